//! Physical network description and its expansion into the layered
//! multi-modal choice network.
//!
//! The expansion follows the supernetwork construction used throughout the
//! model: per OD pair, an origin state fans out through mode-choice dummy
//! links into three layers (platform-bundled service, direct pay-per-use
//! service, private driving). Bundled and direct layers are shared across OD
//! pairs; the driving layer is copied per OD pair. Transit lines are
//! represented per (line, stop) so that staying on board, alighting, and
//! transferring are distinct actions. Destination arrival is structural:
//! in the MDP for destination d every service-layer state at physical node d
//! is terminal, so no egress links exist.

pub mod tntp;

use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct RoadLink {
    pub tail: NodeId,
    pub head: NodeId,
    pub length: f64,
    pub free_flow_time: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone)]
pub struct PtLine {
    pub operator: usize,
    pub stops: Vec<NodeId>,
    pub segment_times: Vec<f64>,
    pub segment_capacities: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PhysicalNetwork {
    pub nodes: Vec<NodeId>,
    pub roads: Vec<RoadLink>,
    pub pt_lines: Vec<PtLine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    MoD,
    Pt,
}

/// How an operator's direct (non-bundled) fares are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PricingScheme {
    /// One rate, charged per unit length of every service link.
    DistanceRate,
    /// One rate, charged per service link traversed.
    FlatRate,
    /// An independent price per service link.
    PerLink,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccessCongestion {
    /// Every access action is its own congestible pseudo-link.
    PerLink,
    /// All access flows pool on one pseudo-link with the fleet as capacity.
    Pooled { fleet_size: f64 },
}

#[derive(Debug, Clone)]
pub struct Operator {
    pub name: String,
    pub kind: OperatorKind,
    pub wholesale_price: f64,
    pub pricing: PricingScheme,
    pub access_time: f64,
    pub access_capacity: f64,
    pub access_congestion: AccessCongestion,
}

#[derive(Debug, Clone, Copy)]
pub struct OdPair {
    pub origin: NodeId,
    pub dest: NodeId,
    pub demand: f64,
    pub vot: f64,
}

#[derive(Debug, Clone)]
pub struct ExpansionConfig {
    pub maas_enabled: bool,
    pub maas_transfer_penalty: f64,
    pub nonmaas_transfer_penalty: f64,
    pub driving_fixed_cost: f64,
    pub driving_distance_cost: f64,
    /// Tiny disutility on mode-choice dummies that carry no price, keeping
    /// every utility strictly negative.
    pub mode_choice_epsilon: f64,
    /// Promote origin PT access links into the priced time vector as
    /// capacitated links instead of treating them as fixed-time.
    pub pt_access_capacitated: bool,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            maas_enabled: true,
            maas_transfer_penalty: 1.0,
            nonmaas_transfer_penalty: 10.0,
            driving_fixed_cost: 5.0,
            driving_distance_cost: 0.2,
            mode_choice_epsilon: 1e-6,
            pt_access_capacitated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Maas,
    NonMaas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    Maas,
    NonMaas,
    Driving,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Maas => "MaaS",
            Mode::NonMaas => "non-MaaS",
            Mode::Driving => "driving",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StateKind {
    Origin { node: NodeId },
    Hub { od: u32, mode: Mode },
    ModNode { scope: Scope, op: u32, node: NodeId },
    PtStop { scope: Scope, line: u32, pos: u32 },
    DriveNode { od: u32, node: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    RoadCongestible,
    ModAccessCongestible,
    PtFixedCapacitated,
    PtAccess,
    TransferAccess,
    DummyModeChoice,
    DrivingAccess,
}

#[derive(Debug, Clone)]
pub struct Action {
    pub tail: u32,
    pub head: u32,
    pub kind: LinkKind,
    pub scope: Option<Scope>,
    pub od: Option<u32>,
    pub operator: Option<u32>,
    /// Index into the priced time vector when travel time is a decision
    /// variable (roads, MoD access, PT service); `None` for fixed-time links.
    pub tlink: Option<u32>,
    pub fixed_time: f64,
    pub length: f64,
    /// Physical incident nodes, for reporting.
    pub phys: (NodeId, NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TLinkKind {
    Road { road: u32 },
    ModAccess { op: u32, serial: u32 },
    PtEdge { tail: NodeId, head: NodeId },
    PtAccessEdge { serial: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupplyKind {
    /// Inverse-BPR volume/delay supply.
    Bpr,
    /// Fixed design capacity; time rises only under saturation.
    Capacitated,
}

#[derive(Debug, Clone)]
pub struct TLink {
    pub kind: TLinkKind,
    pub supply: SupplyKind,
    pub t0: f64,
    pub capacity: f64,
}

/// A group of OD pairs sharing one destination and one value of time; the
/// follower problem is solved once per segment.
#[derive(Debug, Clone)]
pub struct Segment {
    pub dest: NodeId,
    pub vot: f64,
    pub ods: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub origin: NodeId,
    pub dest: NodeId,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct MultiModalNetwork {
    pub phys: PhysicalNetwork,
    pub operators: Vec<Operator>,
    pub config: ExpansionConfig,
    pub ods: Vec<OdPair>,
    pub states: Vec<StateKind>,
    pub state_phys: Vec<NodeId>,
    pub actions: Vec<Action>,
    pub tlinks: Vec<TLink>,
    pub out_actions: Vec<Vec<u32>>,
    pub in_actions: Vec<Vec<u32>>,
    pub segments: Vec<Segment>,
    /// Per OD: the three mode-choice dummy actions, if the mode is served.
    pub maas_dummy: Vec<Option<u32>>,
    pub nonmaas_dummy: Vec<Option<u32>>,
    pub drive_dummy: Vec<Option<u32>>,
    /// Per operator: tlink indices it prices individually (per-link scheme
    /// only; empty for scalar rate schemes).
    pub price_links: Vec<Vec<u32>>,
}

impl MultiModalNetwork {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn mod_operators(&self) -> Vec<usize> {
        self.operators
            .iter()
            .enumerate()
            .filter(|(_, o)| o.kind == OperatorKind::MoD)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when the state is a service-layer copy of `dest` (arrival there
    /// ends the trip in the MDP whose destination is `dest`).
    pub fn is_terminal_for(&self, state: u32, dest: NodeId) -> bool {
        match self.states[state as usize] {
            StateKind::ModNode { .. } | StateKind::PtStop { .. } | StateKind::DriveNode { .. } => {
                self.state_phys[state as usize] == dest
            }
            StateKind::Origin { .. } | StateKind::Hub { .. } => false,
        }
    }

    /// Whether an action exists in the MDP for destination `dest` restricted
    /// to the OD set `od_allowed` (indexed by OD id).
    pub fn action_available(&self, action: &Action, dest: NodeId, od_allowed: &[bool]) -> bool {
        if let Some(od) = action.od {
            if !od_allowed[od as usize] {
                return false;
            }
        }
        // No action leaves a terminal state.
        !self.is_terminal_for(action.tail, dest)
    }

    pub fn state_label(&self, s: u32) -> String {
        match self.states[s as usize] {
            StateKind::Origin { node } => format!("origin({node})"),
            StateKind::Hub { od, mode } => {
                let o = &self.ods[od as usize];
                format!("hub({},{},{})", o.origin, o.dest, mode.name())
            }
            StateKind::ModNode { scope, op, node } => {
                format!("{}:{}@{}", scope_name(scope), self.operators[op as usize].name, node)
            }
            StateKind::PtStop { scope, line, pos } => {
                let node = self.phys.pt_lines[line as usize].stops[pos as usize];
                format!("{}:line{}@{}", scope_name(scope), line, node)
            }
            StateKind::DriveNode { od, node } => {
                let o = &self.ods[od as usize];
                format!("drive({},{})@{}", o.origin, o.dest, node)
            }
        }
    }

    pub fn action_label(&self, a: u32) -> String {
        let act = &self.actions[a as usize];
        let kind = match act.kind {
            LinkKind::RoadCongestible => "road",
            LinkKind::ModAccessCongestible => "mod-access",
            LinkKind::PtFixedCapacitated => "pt",
            LinkKind::PtAccess => "pt-access",
            LinkKind::TransferAccess => "transfer",
            LinkKind::DummyModeChoice => "dummy",
            LinkKind::DrivingAccess => "drive-access",
        };
        format!(
            "{}[{} -> {}]",
            kind,
            self.state_label(act.tail),
            self.state_label(act.head)
        )
    }

    pub fn tlink_label(&self, idx: usize) -> String {
        match self.tlinks[idx].kind {
            TLinkKind::Road { road } => {
                let r = &self.phys.roads[road as usize];
                format!("road({},{})", r.tail, r.head)
            }
            TLinkKind::ModAccess { op, serial } => {
                format!("{}-access#{}", self.operators[op as usize].name, serial)
            }
            TLinkKind::PtEdge { tail, head } => format!("pt({tail},{head})"),
            TLinkKind::PtAccessEdge { serial } => format!("pt-access#{serial}"),
        }
    }

    /// Stable textual form of the whole expansion; equal strings mean equal
    /// networks (used to check construction is deterministic).
    pub fn canonical_summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (i, st) in self.states.iter().enumerate() {
            writeln!(s, "S{i} {st:?} phys={}", self.state_phys[i]).unwrap();
        }
        for (i, a) in self.actions.iter().enumerate() {
            writeln!(
                s,
                "A{i} {}->{} {:?} scope={:?} od={:?} op={:?} tl={:?} ft={} len={}",
                a.tail, a.head, a.kind, a.scope, a.od, a.operator, a.tlink, a.fixed_time, a.length
            )
            .unwrap();
        }
        for (i, t) in self.tlinks.iter().enumerate() {
            writeln!(
                s,
                "T{i} {:?} {:?} t0={} cap={}",
                t.kind, t.supply, t.t0, t.capacity
            )
            .unwrap();
        }
        s
    }
}

fn scope_name(s: Scope) -> &'static str {
    match s {
        Scope::Maas => "maas",
        Scope::NonMaas => "direct",
    }
}

pub fn build(
    phys: PhysicalNetwork,
    operators: Vec<Operator>,
    config: ExpansionConfig,
    demand: Vec<OdPair>,
) -> Result<MultiModalNetwork> {
    validate_physical(&phys, &operators)?;

    let mut ods = demand;
    for od in &ods {
        if od.demand <= 0.0 || !od.demand.is_finite() {
            return Err(Error::Network(format!(
                "OD ({},{}) has non-positive demand {}",
                od.origin, od.dest, od.demand
            )));
        }
        if od.origin == od.dest {
            return Err(Error::Network(format!(
                "OD ({},{}) has identical origin and destination",
                od.origin, od.dest
            )));
        }
        if od.vot <= 0.0 {
            return Err(Error::Network(format!(
                "OD ({},{}) has non-positive value of time {}",
                od.origin, od.dest, od.vot
            )));
        }
        let known = |n: NodeId| phys.nodes.contains(&n);
        if !known(od.origin) || !known(od.dest) {
            return Err(Error::Network(format!(
                "OD ({},{}) references unknown nodes",
                od.origin, od.dest
            )));
        }
    }
    ods.sort_by_key(|od| (od.origin, od.dest));
    for w in ods.windows(2) {
        if w[0].origin == w[1].origin && w[0].dest == w[1].dest {
            return Err(Error::Network(format!(
                "duplicate OD pair ({},{})",
                w[0].origin, w[0].dest
            )));
        }
    }
    if ods.is_empty() {
        return Err(Error::Network("no OD pairs with positive demand".into()));
    }

    let mod_ops: Vec<usize> = operators
        .iter()
        .enumerate()
        .filter(|(_, o)| o.kind == OperatorKind::MoD)
        .map(|(i, _)| i)
        .collect();
    let has_pt = !phys.pt_lines.is_empty();
    let has_roads = !phys.roads.is_empty();
    let service_exists = !mod_ops.is_empty() || has_pt;
    let maas_on = config.maas_enabled && service_exists;

    // Road-incident nodes, sorted.
    let road_nodes: Vec<NodeId> = {
        let mut s = BTreeSet::new();
        for r in &phys.roads {
            s.insert(r.tail);
            s.insert(r.head);
        }
        s.into_iter().collect()
    };
    // Stops per node: (line, pos), sorted.
    let mut stops_at: BTreeMap<NodeId, Vec<(u32, u32)>> = BTreeMap::new();
    for (li, line) in phys.pt_lines.iter().enumerate() {
        for (pos, &node) in line.stops.iter().enumerate() {
            stops_at
                .entry(node)
                .or_default()
                .push((li as u32, pos as u32));
        }
    }

    let scopes: Vec<Scope> = if maas_on {
        vec![Scope::Maas, Scope::NonMaas]
    } else if service_exists {
        vec![Scope::NonMaas]
    } else {
        vec![]
    };

    // ---- states, in canonical order: origins, hubs, service copies, driving
    // copies. Destination arrivals are virtual terminals, so "destinations
    // last" holds trivially.
    let mut states: Vec<StateKind> = Vec::new();
    let mut state_id: BTreeMap<StateKind, u32> = BTreeMap::new();
    let push_state = |states: &mut Vec<StateKind>,
                      state_id: &mut BTreeMap<StateKind, u32>,
                      k: StateKind|
     -> u32 {
        *state_id.entry(k).or_insert_with(|| {
            states.push(k);
            (states.len() - 1) as u32
        })
    };

    let origin_nodes: BTreeSet<NodeId> = ods.iter().map(|od| od.origin).collect();
    for &n in &origin_nodes {
        push_state(&mut states, &mut state_id, StateKind::Origin { node: n });
    }
    for (oi, _) in ods.iter().enumerate() {
        let oi = oi as u32;
        if maas_on {
            push_state(&mut states, &mut state_id, StateKind::Hub { od: oi, mode: Mode::Maas });
        }
        if service_exists {
            push_state(
                &mut states,
                &mut state_id,
                StateKind::Hub { od: oi, mode: Mode::NonMaas },
            );
        }
        if has_roads {
            push_state(
                &mut states,
                &mut state_id,
                StateKind::Hub { od: oi, mode: Mode::Driving },
            );
        }
    }
    for &scope in &scopes {
        for &op in &mod_ops {
            for &n in &road_nodes {
                push_state(
                    &mut states,
                    &mut state_id,
                    StateKind::ModNode { scope, op: op as u32, node: n },
                );
            }
        }
        for (li, line) in phys.pt_lines.iter().enumerate() {
            for pos in 0..line.stops.len() {
                push_state(
                    &mut states,
                    &mut state_id,
                    StateKind::PtStop { scope, line: li as u32, pos: pos as u32 },
                );
            }
        }
    }
    if has_roads {
        for (oi, _) in ods.iter().enumerate() {
            for &n in &road_nodes {
                push_state(
                    &mut states,
                    &mut state_id,
                    StateKind::DriveNode { od: oi as u32, node: n },
                );
            }
        }
    }

    let state_phys: Vec<NodeId> = states
        .iter()
        .map(|k| match *k {
            StateKind::Origin { node } => node,
            StateKind::Hub { od, .. } => ods[od as usize].origin,
            StateKind::ModNode { node, .. } => node,
            StateKind::PtStop { line, pos, .. } => phys.pt_lines[line as usize].stops[pos as usize],
            StateKind::DriveNode { node, .. } => node,
        })
        .collect();

    let sid = |state_id: &BTreeMap<StateKind, u32>, k: &StateKind| -> u32 {
        *state_id.get(k).expect("state must exist")
    };

    // ---- priced time vector: roads, then PT edges, then access pseudo-links
    // in creation order.
    let mut tlinks: Vec<TLink> = Vec::new();
    for (ri, r) in phys.roads.iter().enumerate() {
        tlinks.push(TLink {
            kind: TLinkKind::Road { road: ri as u32 },
            supply: SupplyKind::Bpr,
            t0: r.free_flow_time,
            capacity: r.capacity,
        });
    }
    let mut pt_edge_idx: BTreeMap<(NodeId, NodeId), u32> = BTreeMap::new();
    for line in &phys.pt_lines {
        for (seg, w) in line.stops.windows(2).enumerate() {
            let key = (w[0], w[1]);
            match pt_edge_idx.get(&key) {
                Some(&i) => {
                    // Lines sharing a physical edge pool their capacity.
                    tlinks[i as usize].capacity += line.segment_capacities[seg];
                }
                None => {
                    tlinks.push(TLink {
                        kind: TLinkKind::PtEdge { tail: key.0, head: key.1 },
                        supply: SupplyKind::Capacitated,
                        t0: line.segment_times[seg],
                        capacity: line.segment_capacities[seg],
                    });
                    pt_edge_idx.insert(key, (tlinks.len() - 1) as u32);
                }
            }
        }
    }
    // Pooled access pseudo-links are created up front; per-link ones on
    // demand as access actions appear.
    let mut pooled_access: BTreeMap<usize, u32> = BTreeMap::new();
    for &op in &mod_ops {
        if let AccessCongestion::Pooled { fleet_size } = operators[op].access_congestion {
            tlinks.push(TLink {
                kind: TLinkKind::ModAccess { op: op as u32, serial: 0 },
                supply: SupplyKind::Bpr,
                t0: operators[op].access_time,
                capacity: fleet_size,
            });
            pooled_access.insert(op, (tlinks.len() - 1) as u32);
        }
    }
    let mut access_serial: BTreeMap<usize, u32> = BTreeMap::new();
    let mut pt_access_serial: u32 = 0;

    // ---- actions ----
    let mut actions: Vec<Action> = Vec::new();
    let mut maas_dummy: Vec<Option<u32>> = vec![None; ods.len()];
    let mut nonmaas_dummy: Vec<Option<u32>> = vec![None; ods.len()];
    let mut drive_dummy: Vec<Option<u32>> = vec![None; ods.len()];

    // Mode-choice dummies and driving access, per OD.
    for (oi, od) in ods.iter().enumerate() {
        let oi_u = oi as u32;
        let origin = sid(&state_id, &StateKind::Origin { node: od.origin });
        if maas_on {
            let hub = sid(&state_id, &StateKind::Hub { od: oi_u, mode: Mode::Maas });
            maas_dummy[oi] = Some(actions.len() as u32);
            actions.push(Action {
                tail: origin,
                head: hub,
                kind: LinkKind::DummyModeChoice,
                scope: Some(Scope::Maas),
                od: Some(oi_u),
                operator: None,
                tlink: None,
                fixed_time: 0.0,
                length: 0.0,
                phys: (od.origin, od.origin),
            });
        }
        if service_exists {
            let hub = sid(&state_id, &StateKind::Hub { od: oi_u, mode: Mode::NonMaas });
            nonmaas_dummy[oi] = Some(actions.len() as u32);
            actions.push(Action {
                tail: origin,
                head: hub,
                kind: LinkKind::DummyModeChoice,
                scope: Some(Scope::NonMaas),
                od: Some(oi_u),
                operator: None,
                tlink: None,
                fixed_time: 0.0,
                length: 0.0,
                phys: (od.origin, od.origin),
            });
        }
        if has_roads {
            let hub = sid(&state_id, &StateKind::Hub { od: oi_u, mode: Mode::Driving });
            drive_dummy[oi] = Some(actions.len() as u32);
            actions.push(Action {
                tail: origin,
                head: hub,
                kind: LinkKind::DummyModeChoice,
                scope: None,
                od: Some(oi_u),
                operator: None,
                tlink: None,
                fixed_time: 0.0,
                length: 0.0,
                phys: (od.origin, od.origin),
            });
            if road_nodes.binary_search(&od.origin).is_ok() {
                let copy = sid(&state_id, &StateKind::DriveNode { od: oi_u, node: od.origin });
                actions.push(Action {
                    tail: hub,
                    head: copy,
                    kind: LinkKind::DrivingAccess,
                    scope: None,
                    od: Some(oi_u),
                    operator: None,
                    tlink: None,
                    fixed_time: 0.0,
                    length: 0.0,
                    phys: (od.origin, od.origin),
                });
            }
        }
    }

    // Access links from the mode hubs into the service layers.
    for (oi, od) in ods.iter().enumerate() {
        let oi_u = oi as u32;
        for &scope in &scopes {
            let mode = match scope {
                Scope::Maas => Mode::Maas,
                Scope::NonMaas => Mode::NonMaas,
            };
            if scope == Scope::Maas && !maas_on {
                continue;
            }
            let hub = sid(&state_id, &StateKind::Hub { od: oi_u, mode });
            for &op in &mod_ops {
                if road_nodes.binary_search(&od.origin).is_err() {
                    continue;
                }
                let target = sid(
                    &state_id,
                    &StateKind::ModNode { scope, op: op as u32, node: od.origin },
                );
                let tl = match operators[op].access_congestion {
                    AccessCongestion::Pooled { .. } => pooled_access[&op],
                    AccessCongestion::PerLink => {
                        let serial = access_serial.entry(op).or_insert(0);
                        let s = *serial;
                        *serial += 1;
                        tlinks.push(TLink {
                            kind: TLinkKind::ModAccess { op: op as u32, serial: s },
                            supply: SupplyKind::Bpr,
                            t0: operators[op].access_time,
                            capacity: operators[op].access_capacity,
                        });
                        (tlinks.len() - 1) as u32
                    }
                };
                actions.push(Action {
                    tail: hub,
                    head: target,
                    kind: LinkKind::ModAccessCongestible,
                    scope: Some(scope),
                    od: Some(oi_u),
                    operator: Some(op as u32),
                    tlink: Some(tl),
                    fixed_time: operators[op].access_time,
                    length: 0.0,
                    phys: (od.origin, od.origin),
                });
            }
            if let Some(stops) = stops_at.get(&od.origin) {
                for &(line, pos) in stops {
                    let op = phys.pt_lines[line as usize].operator;
                    let target = sid(&state_id, &StateKind::PtStop { scope, line, pos });
                    let tl = if config.pt_access_capacitated {
                        tlinks.push(TLink {
                            kind: TLinkKind::PtAccessEdge { serial: pt_access_serial },
                            supply: SupplyKind::Capacitated,
                            t0: operators[op].access_time,
                            capacity: operators[op].access_capacity,
                        });
                        pt_access_serial += 1;
                        Some((tlinks.len() - 1) as u32)
                    } else {
                        None
                    };
                    actions.push(Action {
                        tail: hub,
                        head: target,
                        kind: LinkKind::PtAccess,
                        scope: Some(scope),
                        od: Some(oi_u),
                        operator: Some(op as u32),
                        tlink: tl,
                        fixed_time: operators[op].access_time,
                        length: 0.0,
                        phys: (od.origin, od.origin),
                    });
                }
            }
        }
    }

    // Service links and transfers, per scope.
    for &scope in &scopes {
        for &op in &mod_ops {
            for (ri, r) in phys.roads.iter().enumerate() {
                let tail = sid(&state_id, &StateKind::ModNode { scope, op: op as u32, node: r.tail });
                let head = sid(&state_id, &StateKind::ModNode { scope, op: op as u32, node: r.head });
                actions.push(Action {
                    tail,
                    head,
                    kind: LinkKind::RoadCongestible,
                    scope: Some(scope),
                    od: None,
                    operator: Some(op as u32),
                    tlink: Some(ri as u32),
                    fixed_time: r.free_flow_time,
                    length: r.length,
                    phys: (r.tail, r.head),
                });
            }
        }
        for (li, line) in phys.pt_lines.iter().enumerate() {
            for (seg, w) in line.stops.windows(2).enumerate() {
                let tail = sid(
                    &state_id,
                    &StateKind::PtStop { scope, line: li as u32, pos: seg as u32 },
                );
                let head = sid(
                    &state_id,
                    &StateKind::PtStop { scope, line: li as u32, pos: (seg + 1) as u32 },
                );
                actions.push(Action {
                    tail,
                    head,
                    kind: LinkKind::PtFixedCapacitated,
                    scope: Some(scope),
                    od: None,
                    operator: Some(line.operator as u32),
                    tlink: Some(pt_edge_idx[&(w[0], w[1])]),
                    fixed_time: line.segment_times[seg],
                    length: 0.0,
                    phys: (w[0], w[1]),
                });
            }
        }
        // Transfers at shared physical nodes. Platforms at a node: each MoD
        // copy (if road-incident) and each (line, stop).
        for &node in phys.nodes.iter() {
            #[derive(Clone, Copy)]
            enum Platform {
                ModOp(usize),
                Stop(u32, u32),
            }
            let mut platforms: Vec<Platform> = Vec::new();
            if road_nodes.binary_search(&node).is_ok() {
                for &op in &mod_ops {
                    platforms.push(Platform::ModOp(op));
                }
            }
            if let Some(stops) = stops_at.get(&node) {
                for &(l, p) in stops {
                    platforms.push(Platform::Stop(l, p));
                }
            }
            for (i, &from) in platforms.iter().enumerate() {
                for (j, &to) in platforms.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    match (from, to) {
                        (Platform::ModOp(_), Platform::ModOp(_)) => continue,
                        (Platform::Stop(l1, _), Platform::Stop(l2, _)) if l1 == l2 => continue,
                        _ => {}
                    }
                    let tail = match from {
                        Platform::ModOp(op) => {
                            sid(&state_id, &StateKind::ModNode { scope, op: op as u32, node })
                        }
                        Platform::Stop(l, p) => {
                            sid(&state_id, &StateKind::PtStop { scope, line: l, pos: p })
                        }
                    };
                    let (head, wait, target_op) = match to {
                        Platform::ModOp(op) => (
                            sid(&state_id, &StateKind::ModNode { scope, op: op as u32, node }),
                            operators[op].access_time,
                            op,
                        ),
                        Platform::Stop(l, p) => {
                            let op = phys.pt_lines[l as usize].operator;
                            (
                                sid(&state_id, &StateKind::PtStop { scope, line: l, pos: p }),
                                operators[op].access_time,
                                op,
                            )
                        }
                    };
                    actions.push(Action {
                        tail,
                        head,
                        kind: LinkKind::TransferAccess,
                        scope: Some(scope),
                        od: None,
                        operator: Some(target_op as u32),
                        tlink: None,
                        fixed_time: wait,
                        length: 0.0,
                        phys: (node, node),
                    });
                }
            }
        }
    }

    // Driving layer, one copy per OD.
    if has_roads {
        for (oi, _) in ods.iter().enumerate() {
            for (ri, r) in phys.roads.iter().enumerate() {
                let tail = sid(&state_id, &StateKind::DriveNode { od: oi as u32, node: r.tail });
                let head = sid(&state_id, &StateKind::DriveNode { od: oi as u32, node: r.head });
                actions.push(Action {
                    tail,
                    head,
                    kind: LinkKind::RoadCongestible,
                    scope: None,
                    od: Some(oi as u32),
                    operator: None,
                    tlink: Some(ri as u32),
                    fixed_time: r.free_flow_time,
                    length: r.length,
                    phys: (r.tail, r.head),
                });
            }
        }
    }

    // ---- adjacency ----
    let mut out_actions: Vec<Vec<u32>> = vec![Vec::new(); states.len()];
    let mut in_actions: Vec<Vec<u32>> = vec![Vec::new(); states.len()];
    for (ai, a) in actions.iter().enumerate() {
        out_actions[a.tail as usize].push(ai as u32);
        in_actions[a.head as usize].push(ai as u32);
    }

    // ---- demand segments: group ODs by (destination, value of time) ----
    let mut seg_map: BTreeMap<(NodeId, u64), Vec<u32>> = BTreeMap::new();
    for (oi, od) in ods.iter().enumerate() {
        seg_map
            .entry((od.dest, od.vot.to_bits()))
            .or_default()
            .push(oi as u32);
    }
    let segments: Vec<Segment> = seg_map
        .into_iter()
        .map(|((dest, vot_bits), ods)| Segment {
            dest,
            vot: f64::from_bits(vot_bits),
            ods,
        })
        .collect();

    // Per-operator priced-link lists for the per-link fare scheme: MoD prices
    // each road link, PT each of its physical service edges. Scalar schemes
    // leave the list empty.
    let price_links: Vec<Vec<u32>> = operators
        .iter()
        .enumerate()
        .map(|(opi, op)| {
            if op.pricing != PricingScheme::PerLink {
                return Vec::new();
            }
            match op.kind {
                OperatorKind::MoD => (0..phys.roads.len() as u32).collect(),
                OperatorKind::Pt => {
                    let mut seen = BTreeSet::new();
                    let mut list = Vec::new();
                    for line in phys.pt_lines.iter().filter(|l| l.operator == opi) {
                        for w in line.stops.windows(2) {
                            let tl = pt_edge_idx[&(w[0], w[1])];
                            if seen.insert(tl) {
                                list.push(tl);
                            }
                        }
                    }
                    list
                }
            }
        })
        .collect();

    let net = MultiModalNetwork {
        phys,
        operators,
        config,
        ods,
        states,
        state_phys,
        actions,
        tlinks,
        out_actions,
        in_actions,
        segments,
        maas_dummy,
        nonmaas_dummy,
        drive_dummy,
        price_links,
    };

    let violations = net.validate();
    if let Some(v) = violations.first() {
        return Err(Error::Unreachable {
            origin: v.origin,
            dest: v.dest,
            mode: v.mode.name(),
        });
    }
    Ok(net)
}

impl MultiModalNetwork {
    /// Checks that every OD pair can reach its destination through every mode
    /// hub that was built for it. Returns all violations (empty = valid).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (oi, od) in self.ods.iter().enumerate() {
            let mut od_allowed = vec![false; self.ods.len()];
            od_allowed[oi] = true;
            for (dummy, mode) in [
                (self.maas_dummy[oi], Mode::Maas),
                (self.nonmaas_dummy[oi], Mode::NonMaas),
                (self.drive_dummy[oi], Mode::Driving),
            ] {
                let Some(dummy) = dummy else { continue };
                let hub = self.actions[dummy as usize].head;
                if !self.reaches_terminal(hub, od.dest, &od_allowed) {
                    out.push(Violation {
                        origin: od.origin,
                        dest: od.dest,
                        mode,
                    });
                }
            }
            if self.maas_dummy[oi].is_none()
                && self.nonmaas_dummy[oi].is_none()
                && self.drive_dummy[oi].is_none()
            {
                out.push(Violation {
                    origin: od.origin,
                    dest: od.dest,
                    mode: Mode::Driving,
                });
            }
        }
        out
    }

    fn reaches_terminal(&self, start: u32, dest: NodeId, od_allowed: &[bool]) -> bool {
        let mut seen = vec![false; self.states.len()];
        let mut stack = vec![start];
        seen[start as usize] = true;
        while let Some(s) = stack.pop() {
            if self.is_terminal_for(s, dest) {
                return true;
            }
            for &ai in &self.out_actions[s as usize] {
                let a = &self.actions[ai as usize];
                if !self.action_available(a, dest, od_allowed) {
                    continue;
                }
                if !seen[a.head as usize] {
                    seen[a.head as usize] = true;
                    stack.push(a.head);
                }
            }
        }
        false
    }
}

fn validate_physical(phys: &PhysicalNetwork, operators: &[Operator]) -> Result<()> {
    if phys.nodes.is_empty() {
        return Err(Error::Network("physical network has no nodes".into()));
    }
    let nodes: BTreeSet<NodeId> = phys.nodes.iter().copied().collect();
    if nodes.len() != phys.nodes.len() {
        return Err(Error::Network("duplicate node ids".into()));
    }
    for (i, r) in phys.roads.iter().enumerate() {
        if !nodes.contains(&r.tail) || !nodes.contains(&r.head) {
            return Err(Error::Network(format!(
                "road {i} ({},{}) references unknown nodes",
                r.tail, r.head
            )));
        }
        if r.tail == r.head {
            return Err(Error::Network(format!("road {i} is a self-loop at {}", r.tail)));
        }
        if r.length <= 0.0 || r.free_flow_time <= 0.0 || r.capacity <= 0.0 {
            return Err(Error::Network(format!(
                "road {i} ({},{}) needs positive length/time/capacity",
                r.tail, r.head
            )));
        }
    }
    for (li, line) in phys.pt_lines.iter().enumerate() {
        if line.operator >= operators.len()
            || operators[line.operator].kind != OperatorKind::Pt
        {
            return Err(Error::Network(format!(
                "transit line {li} must belong to a PT operator"
            )));
        }
        if line.stops.len() < 2 {
            return Err(Error::Network(format!("transit line {li} has fewer than 2 stops")));
        }
        let nseg = line.stops.len() - 1;
        if line.segment_times.len() != nseg || line.segment_capacities.len() != nseg {
            return Err(Error::Network(format!(
                "transit line {li}: expected {nseg} segment times and capacities"
            )));
        }
        let distinct: BTreeSet<NodeId> = line.stops.iter().copied().collect();
        if distinct.len() != line.stops.len() {
            return Err(Error::Network(format!("transit line {li} revisits a stop")));
        }
        for &s in &line.stops {
            if !nodes.contains(&s) {
                return Err(Error::Network(format!(
                    "transit line {li} stops at unknown node {s}"
                )));
            }
        }
        for (i, (&t, &c)) in line
            .segment_times
            .iter()
            .zip(line.segment_capacities.iter())
            .enumerate()
        {
            if t <= 0.0 || c <= 0.0 {
                return Err(Error::Network(format!(
                    "transit line {li} segment {i} needs positive time and capacity"
                )));
            }
        }
    }
    for (i, op) in operators.iter().enumerate() {
        if op.wholesale_price < 0.0 {
            return Err(Error::Network(format!(
                "operator {i} ({}) has negative wholesale price",
                op.name
            )));
        }
        if op.access_time <= 0.0 || op.access_capacity <= 0.0 {
            return Err(Error::Network(format!(
                "operator {i} ({}) needs positive access time and capacity",
                op.name
            )));
        }
        if let AccessCongestion::Pooled { fleet_size } = op.access_congestion {
            if fleet_size <= 0.0 {
                return Err(Error::Network(format!(
                    "operator {i} ({}) pooled access needs positive fleet size",
                    op.name
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mod_op(access: AccessCongestion) -> Operator {
        Operator {
            name: "mod".into(),
            kind: OperatorKind::MoD,
            wholesale_price: 1.3,
            pricing: PricingScheme::DistanceRate,
            access_time: 1.0,
            access_capacity: 100.0,
            access_congestion: access,
        }
    }

    fn pt_op() -> Operator {
        Operator {
            name: "pt".into(),
            kind: OperatorKind::Pt,
            wholesale_price: 1.3,
            pricing: PricingScheme::FlatRate,
            access_time: 2.0,
            access_capacity: 500.0,
            access_congestion: AccessCongestion::PerLink,
        }
    }

    fn line(nodes: &[NodeId]) -> PhysicalNetwork {
        PhysicalNetwork {
            nodes: nodes.to_vec(),
            roads: nodes
                .windows(2)
                .map(|w| RoadLink {
                    tail: w[0],
                    head: w[1],
                    length: 2.0,
                    free_flow_time: 5.0,
                    capacity: 300.0,
                })
                .collect(),
            pt_lines: vec![],
        }
    }

    fn od(origin: NodeId, dest: NodeId) -> OdPair {
        OdPair {
            origin,
            dest,
            demand: 100.0,
            vot: 1.0,
        }
    }

    #[test]
    fn expansion_is_deterministic() {
        for name in ["small_with_maas", "small_without_maas"] {
            let sc = crate::scenarios::load(name).unwrap();
            let a = sc.network().unwrap().canonical_summary();
            let b = sc.network().unwrap().canonical_summary();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn out_actions_partition_the_action_set() {
        let net = crate::scenarios::load("small_with_maas")
            .unwrap()
            .network()
            .unwrap();
        let mut seen = vec![0u32; net.n_actions()];
        for (s, outs) in net.out_actions.iter().enumerate() {
            for &ai in outs {
                assert_eq!(net.actions[ai as usize].tail, s as u32);
                seen[ai as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "every action listed exactly once");
    }

    #[test]
    fn maas_scope_only_exists_when_enabled() {
        let with = crate::scenarios::load("small_with_maas").unwrap();
        let without = with.without_maas();
        let n_with = with.network().unwrap();
        let n_without = without.network().unwrap();
        assert!(n_with.maas_dummy.iter().all(|d| d.is_some()));
        assert!(n_without.maas_dummy.iter().all(|d| d.is_none()));
        assert!(n_without
            .actions
            .iter()
            .all(|a| a.scope != Some(Scope::Maas)));
        assert!(n_with.n_states() > n_without.n_states());
        assert!(n_with.n_actions() > n_without.n_actions());
    }

    #[test]
    fn pooled_access_collapses_supply_links() {
        let phys = line(&[1, 2, 3]);
        let ods = vec![od(1, 3), od(2, 3)];
        let cfg = ExpansionConfig {
            maas_enabled: true,
            ..ExpansionConfig::default()
        };
        let count = |net: &MultiModalNetwork| {
            net.tlinks
                .iter()
                .filter(|t| matches!(t.kind, TLinkKind::ModAccess { .. }))
                .count()
        };
        let per_link = build(
            phys.clone(),
            vec![mod_op(AccessCongestion::PerLink)],
            cfg.clone(),
            ods.clone(),
        )
        .unwrap();
        let pooled = build(
            phys,
            vec![mod_op(AccessCongestion::Pooled { fleet_size: 300.0 })],
            cfg,
            ods,
        )
        .unwrap();
        assert!(count(&per_link) > 1);
        assert_eq!(count(&pooled), 1);
        let pool = pooled
            .tlinks
            .iter()
            .find(|t| matches!(t.kind, TLinkKind::ModAccess { .. }))
            .unwrap();
        assert_eq!(pool.capacity, 300.0);
        // Same traveler-facing actions either way, only the supply mapping
        // differs.
        assert_eq!(per_link.n_actions(), pooled.n_actions());
    }

    #[test]
    fn rejects_malformed_physical_networks() {
        let cfg = ExpansionConfig::default();
        let ops = || vec![mod_op(AccessCongestion::PerLink)];

        let mut self_loop = line(&[1, 2]);
        self_loop.roads[0].head = 1;
        assert!(build(self_loop, ops(), cfg.clone(), vec![od(1, 2)]).is_err());

        let mut bad_cap = line(&[1, 2]);
        bad_cap.roads[0].capacity = 0.0;
        assert!(build(bad_cap, ops(), cfg.clone(), vec![od(1, 2)]).is_err());

        let mut line_on_mod = line(&[1, 2, 3]);
        line_on_mod.pt_lines.push(PtLine {
            operator: 0,
            stops: vec![1, 2],
            segment_times: vec![7.5],
            segment_capacities: vec![300.0],
        });
        assert!(build(line_on_mod, ops(), cfg.clone(), vec![od(1, 3)]).is_err());

        let mut revisit = line(&[1, 2, 3]);
        revisit.pt_lines.push(PtLine {
            operator: 1,
            stops: vec![1, 2, 1],
            segment_times: vec![7.5, 7.5],
            segment_capacities: vec![300.0, 300.0],
        });
        assert!(build(
            revisit,
            vec![mod_op(AccessCongestion::PerLink), pt_op()],
            cfg,
            vec![od(1, 3)]
        )
        .is_err());
    }

    #[test]
    fn rejects_malformed_demand() {
        let cfg = ExpansionConfig::default();
        let ops = || vec![mod_op(AccessCongestion::PerLink)];
        let cases: Vec<Vec<OdPair>> = vec![
            vec![],
            vec![od(1, 1)],
            vec![OdPair { demand: 0.0, ..od(1, 2) }],
            vec![OdPair { vot: -1.0, ..od(1, 2) }],
            vec![od(1, 9)],
            vec![od(1, 2), od(1, 2)],
        ];
        for (i, ods) in cases.into_iter().enumerate() {
            assert!(
                build(line(&[1, 2]), ops(), cfg.clone(), ods).is_err(),
                "case {i} must be rejected"
            );
        }
    }

    #[test]
    fn unreachable_destinations_fail_the_build() {
        // The only road runs 1 -> 2, so an OD going 2 -> 1 has no path in
        // any mode and construction refuses it outright.
        let err = build(
            line(&[1, 2]),
            vec![mod_op(AccessCongestion::PerLink)],
            ExpansionConfig::default(),
            vec![od(2, 1)],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Unreachable { origin: 2, dest: 1, .. }
        ));

        let ok = build(
            line(&[1, 2]),
            vec![mod_op(AccessCongestion::PerLink)],
            ExpansionConfig::default(),
            vec![od(1, 2)],
        )
        .unwrap();
        assert!(ok.validate().is_empty());
    }
}
