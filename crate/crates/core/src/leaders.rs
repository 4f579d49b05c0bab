//! Leader-side maps: the virtual traffic operator, the platform, and the
//! service operators, assembled into one stacked map G over the decision
//! vector y = [t; p; p_tilde].
//!
//! * Traffic operator: balances supply against xbar, the expanded flows
//!   aggregated onto each physical link. Congestible links use either
//!   g_t[a] = z_a(t_a) - xbar_a (z the inverse BPR relation) or the scaled
//!   time gap s_a (t_a - tau_a(xbar_a)), selected per scenario; capacitated
//!   links always use kappa_a - xbar_a.
//! * Platform: g_p[od] = sum_m c_m dX_m/dp_od - p_od dQ_od/dp_od - Q_od.
//!   Cross-OD terms vanish at fixed t because origins are pure sources and
//!   distinct destinations live in separate MDPs.
//! * Operators: with fares parameterized as p_tilde_m = rate * B_m,
//!   g_m = -(B_m^T Xt_m + rate * d(B_m^T Xt_m) + c_m * d(1^T X_m)) along the
//!   utility direction du = -B_m (and per-link analogues).
//!
//! All follower derivatives are the analytic directional sensitivities from
//! the choice model, evaluated at fixed t within one G evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{
    LinkKind, MultiModalNetwork, OperatorKind, PricingScheme, Scope, SupplyKind,
};
use crate::par;
use crate::pumcm::{
    self, FlowSystem, OpPrice, SegmentMdp, SigmaConfig, UtilityInputs, ValueIterationOptions,
};

/// Inverse BPR: flow that makes a congestible link's travel time equal `t`.
pub fn inverse_bpr(t: f64, t0: f64, capacity: f64, alpha: f64, beta: f64) -> Result<f64> {
    if t < t0 - 1e-9 {
        return Err(Error::SupplyDomain {
            link: String::new(),
            t,
            t0,
        });
    }
    let ratio = ((t / t0 - 1.0).max(0.0) / alpha).powf(1.0 / beta);
    Ok(capacity * ratio)
}

/// Forward BPR volume/delay function (used by tests and diagnostics).
pub fn forward_bpr(x: f64, t0: f64, capacity: f64, alpha: f64, beta: f64) -> f64 {
    t0 * (1.0 + alpha * (x / capacity).powf(beta))
}

/// How the traffic block of G is formed on congestible links. Both variants
/// vanish exactly where supply meets demand, so they carry the same
/// equilibria. The supply gap z(t) - xbar is the textbook map, but the
/// inverse BPR curve has unbounded slope at free flow: with a fixed step the
/// prediction overshoots the interior optimum of any lightly loaded link and
/// the correction throws the iterate back onto the lower bound, where it
/// sticks. The time gap compares t against the forward BPR time of the
/// aggregated flow instead, which is Lipschitz across the whole box, and is
/// scaled per link to keep the same convergence rate on loaded links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrafficFormulation {
    /// g = z(t) - xbar.
    #[default]
    SupplyGap,
    /// g = s * (t - tau(xbar)), s the inverse-BPR slope at capacity (capped).
    TimeGap,
}

/// Gradient scale for the time-gap map: dz/dt evaluated at the capacity
/// point, capped so that step * scale stays well below the stability limit
/// on high-capacity networks.
fn traffic_scale(t0: f64, capacity: f64, alpha: f64, beta: f64) -> f64 {
    (capacity / (alpha * beta * t0)).min(2500.0)
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub gamma: f64,
    pub sigma: SigmaConfig,
    pub bpr_alpha: f64,
    pub bpr_beta: f64,
    /// Upper bounds for times: t0 * (1 + alpha * ratio^beta).
    pub max_time_ratio: f64,
    pub max_price: f64,
    pub traffic: TrafficFormulation,
    pub vi: ValueIterationOptions,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            gamma: 1.0,
            sigma: SigmaConfig::uniform(1.0),
            bpr_alpha: 0.15,
            bpr_beta: 4.0,
            max_time_ratio: 5.0,
            max_price: 50.0,
            traffic: TrafficFormulation::SupplyGap,
            vi: ValueIterationOptions::default(),
        }
    }
}

/// Block layout of the stacked decision vector y = [t; p; p_tilde].
#[derive(Debug, Clone)]
pub struct Layout {
    pub n_t: usize,
    /// OD indices that carry a platform fare, in ascending OD order.
    pub p_ods: Vec<usize>,
    /// Per operator: number of fare components (1 for scalar schemes,
    /// price_links.len() for per-link; 0 when the operator sells nothing).
    pub rate_len: Vec<usize>,
    pub dim: usize,
}

impl Layout {
    pub fn p_offset(&self) -> usize {
        self.n_t
    }
    pub fn rate_offset(&self, op: usize) -> usize {
        self.n_t + self.p_ods.len() + self.rate_len[..op].iter().sum::<usize>()
    }
}

/// Componentwise box constraints.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn project(y: &[f64], b: &Bounds) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, &v)| v.clamp(b.lower[i], b.upper[i]))
        .collect()
}

/// Flow aggregates produced by one G evaluation; the raw material for every
/// reported metric.
#[derive(Debug, Clone, Default)]
pub struct Aggregates {
    /// Aggregated flow per priced time link.
    pub tbar: Vec<f64>,
    /// Per OD: flows on the three mode dummies.
    pub od_maas: Vec<f64>,
    pub od_nonmaas: Vec<f64>,
    pub od_drive: Vec<f64>,
    /// Per operator: total flow on its bundled (MaaS) service links.
    pub x_maas: Vec<f64>,
    /// Per operator: basis-weighted direct service flow B^T Xt_m.
    pub basis_direct: Vec<f64>,
    /// Per operator: plain flow total on direct service links.
    pub svc_flow_direct: Vec<f64>,
    /// Per operator: fare revenue on direct links at current prices.
    pub revenue_direct: Vec<f64>,
    /// Per operator: flow per priced link (per-link scheme only).
    pub per_link_flow: Vec<Vec<f64>>,
    pub transfer_flow: f64,
    /// Sum over ODs of q_od * V(origin).
    pub welfare: f64,
    pub vi_sweeps: usize,
}

pub struct GEval {
    pub g: Vec<f64>,
    pub agg: Aggregates,
}

/// Per-segment constant indexing, precomputed once.
struct SegMeta {
    /// (od, local maas dummy, local nonmaas dummy, local drive dummy).
    dummies: Vec<(usize, Option<usize>, Option<usize>, Option<usize>)>,
    /// Per operator: local MaaS service actions.
    maas_svc: Vec<Vec<usize>>,
    /// Per operator: local direct service actions with their price basis
    /// (length for distance rates, 1 for flat rates).
    direct_svc: Vec<Vec<(usize, f64)>>,
    /// Per operator: (local action, per-link slot).
    per_link: Vec<Vec<(usize, usize)>>,
    transfers: Vec<usize>,
    /// (local action, tlink).
    tlinked: Vec<(usize, u32)>,
}

struct SegmentWorker {
    mdp: SegmentMdp,
    system: FlowSystem,
    meta: SegMeta,
    warm_v: Option<Vec<f64>>,
}

struct SegResult {
    tbar: Vec<f64>,
    od_rows: Vec<(usize, f64, f64, f64)>,
    x_maas: Vec<f64>,
    basis_direct: Vec<f64>,
    svc_flow_direct: Vec<f64>,
    revenue_direct: Vec<f64>,
    per_link_flow: Vec<Vec<f64>>,
    transfer: f64,
    welfare: f64,
    /// (global p slot, value).
    g_p: Vec<(usize, f64)>,
    /// Per operator: (d(B^T Xt_m), d(1^T X_m)) along du = -B_m.
    rate_sens: Vec<(f64, f64)>,
    /// Per operator, per priced link: (dXt vector dot p_tilde, d(1^T X_m)).
    per_link_sens: Vec<Vec<(f64, f64)>>,
    sweeps: usize,
}

/// Owns everything needed to evaluate G and the follower layer underneath.
pub struct Evaluator {
    pub net: MultiModalNetwork,
    pub params: ModelParams,
    pub layout: Layout,
    pub bounds: Bounds,
    workers: Vec<SegmentWorker>,
    pub eval_count: u64,
    /// Route segment solves through the plain sequential map. The parallel
    /// and sequential paths reduce in the same canonical order, so results
    /// are bit-identical; this exists for benchmarking and debugging.
    pub sequential: bool,
}

impl Evaluator {
    pub fn new(net: MultiModalNetwork, params: ModelParams) -> Result<Evaluator> {
        let n_ops = net.operators.len();
        let mut workers = Vec::with_capacity(net.segments.len());
        for seg_idx in 0..net.segments.len() {
            let mdp = pumcm::extract_segment(&net, seg_idx, params.sigma)?;
            let system = FlowSystem::new(&mdp);
            let meta = build_meta(&net, &mdp, n_ops);
            workers.push(SegmentWorker {
                mdp,
                system,
                meta,
                warm_v: None,
            });
        }

        let p_ods: Vec<usize> = (0..net.ods.len())
            .filter(|&oi| net.maas_dummy[oi].is_some())
            .collect();
        let rate_len: Vec<usize> = net
            .operators
            .iter()
            .enumerate()
            .map(|(opi, op)| match op.pricing {
                PricingScheme::PerLink => net.price_links[opi].len(),
                _ => {
                    if operator_sells(&net, opi) {
                        1
                    } else {
                        0
                    }
                }
            })
            .collect();
        let n_t = net.tlinks.len();
        let dim = n_t + p_ods.len() + rate_len.iter().sum::<usize>();
        let layout = Layout {
            n_t,
            p_ods,
            rate_len,
            dim,
        };

        let mut lower = Vec::with_capacity(dim);
        let mut upper = Vec::with_capacity(dim);
        for tl in &net.tlinks {
            lower.push(tl.t0);
            upper.push(tl.t0 * (1.0 + params.bpr_alpha * params.max_time_ratio.powf(params.bpr_beta)));
        }
        for _ in layout.n_t..dim {
            lower.push(0.0);
            upper.push(params.max_price);
        }
        let bounds = Bounds { lower, upper };

        Ok(Evaluator {
            net,
            params,
            layout,
            bounds,
            workers,
            eval_count: 0,
            sequential: false,
        })
    }

    /// Per-segment (destination, value of time, states, actions), in
    /// canonical segment order.
    pub fn segment_sizes(&self) -> Vec<(usize, f64, usize, usize)> {
        self.workers
            .iter()
            .map(|w| (w.mdp.dest, w.mdp.vot, w.mdp.states.len(), w.mdp.actions.len()))
            .collect()
    }

    /// Default initial point: free-flow times, prices at 10% of their cap.
    pub fn default_start(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.layout.dim);
        for tl in &self.net.tlinks {
            y.push(tl.t0);
        }
        for _ in self.layout.n_t..self.layout.dim {
            y.push(0.1 * self.params.max_price);
        }
        y
    }

    pub fn split<'a>(&self, y: &'a [f64]) -> (&'a [f64], Vec<f64>, Vec<OpPrice<'a>>) {
        let t = &y[..self.layout.n_t];
        let mut maas_price = vec![0.0; self.net.ods.len()];
        for (slot, &oi) in self.layout.p_ods.iter().enumerate() {
            maas_price[oi] = y[self.layout.p_offset() + slot];
        }
        let op_price: Vec<OpPrice> = (0..self.net.operators.len())
            .map(|opi| {
                let off = self.layout.rate_offset(opi);
                match self.net.operators[opi].pricing {
                    PricingScheme::PerLink => {
                        OpPrice::PerLink(&y[off..off + self.layout.rate_len[opi]])
                    }
                    _ => {
                        if self.layout.rate_len[opi] == 1 {
                            OpPrice::Rate(y[off])
                        } else {
                            OpPrice::Rate(0.0)
                        }
                    }
                }
            })
            .collect();
        (t, maas_price, op_price)
    }

    /// Supply z(t) per priced link.
    pub fn supply(&self, t: &[f64]) -> Result<Vec<f64>> {
        let mut z = Vec::with_capacity(t.len());
        for (i, tl) in self.net.tlinks.iter().enumerate() {
            match tl.supply {
                SupplyKind::Bpr => {
                    let v = inverse_bpr(
                        t[i],
                        tl.t0,
                        tl.capacity,
                        self.params.bpr_alpha,
                        self.params.bpr_beta,
                    )
                    .map_err(|_| Error::SupplyDomain {
                        link: self.net.tlink_label(i),
                        t: t[i],
                        t0: tl.t0,
                    })?;
                    z.push(v);
                }
                SupplyKind::Capacitated => {
                    if t[i] < tl.t0 - 1e-9 {
                        return Err(Error::SupplyDomain {
                            link: self.net.tlink_label(i),
                            t: t[i],
                            t0: tl.t0,
                        });
                    }
                    z.push(tl.capacity);
                }
            }
        }
        Ok(z)
    }

    pub fn eval(&mut self, y: &[f64]) -> Result<GEval> {
        self.eval_count += 1;
        let (t, maas_price, op_price) = self.split(y);
        let z = self.supply(t)?;

        // Utilities per distinct value of time.
        let mut vot_keys: Vec<u64> = self.net.segments.iter().map(|s| s.vot.to_bits()).collect();
        vot_keys.sort_unstable();
        vot_keys.dedup();
        let inputs = UtilityInputs {
            t,
            maas_price: &maas_price,
            op_price: op_price.clone(),
        };
        let mut u_by_vot: Vec<(u64, Vec<f64>)> = Vec::with_capacity(vot_keys.len());
        for &k in &vot_keys {
            u_by_vot.push((
                k,
                pumcm::assemble_utilities(&self.net, &inputs, f64::from_bits(k))?,
            ));
        }

        let net = &self.net;
        let params = &self.params;
        let layout = &self.layout;
        let wholesale: Vec<f64> = net.operators.iter().map(|o| o.wholesale_price).collect();

        let sequential = self.sequential;
        let work = |_: usize, w: &mut SegmentWorker| {
            let u = &u_by_vot
                .iter()
                .find(|(k, _)| *k == w.mdp.vot.to_bits())
                .expect("utilities for segment vot")
                .1;
            eval_segment(net, params, layout, &maas_price, &op_price, &wholesale, w, u)
        };
        let results: Vec<Result<SegResult>> = if sequential {
            par::map_mut_indexed_seq(&mut self.workers, work)
        } else {
            par::map_mut_indexed(&mut self.workers, work)
        };

        // Canonical-order sequential reduction keeps results bit-identical
        // under any parallel schedule.
        let n_ops = self.net.operators.len();
        let mut agg = Aggregates {
            tbar: vec![0.0; self.layout.n_t],
            od_maas: vec![0.0; self.net.ods.len()],
            od_nonmaas: vec![0.0; self.net.ods.len()],
            od_drive: vec![0.0; self.net.ods.len()],
            x_maas: vec![0.0; n_ops],
            basis_direct: vec![0.0; n_ops],
            svc_flow_direct: vec![0.0; n_ops],
            revenue_direct: vec![0.0; n_ops],
            per_link_flow: (0..n_ops)
                .map(|opi| vec![0.0; self.net.price_links[opi].len()])
                .collect(),
            ..Default::default()
        };
        let mut g = vec![0.0; self.layout.dim];
        let mut rate_sens = vec![(0.0, 0.0); n_ops];
        let mut per_link_sens: Vec<Vec<(f64, f64)>> = (0..n_ops)
            .map(|opi| vec![(0.0, 0.0); self.net.price_links[opi].len()])
            .collect();

        for r in results {
            let r = r?;
            for i in 0..agg.tbar.len() {
                agg.tbar[i] += r.tbar[i];
            }
            for (od, m, nm, dr) in r.od_rows {
                agg.od_maas[od] += m;
                agg.od_nonmaas[od] += nm;
                agg.od_drive[od] += dr;
            }
            for op in 0..n_ops {
                agg.x_maas[op] += r.x_maas[op];
                agg.basis_direct[op] += r.basis_direct[op];
                agg.svc_flow_direct[op] += r.svc_flow_direct[op];
                agg.revenue_direct[op] += r.revenue_direct[op];
                for (j, v) in r.per_link_flow[op].iter().enumerate() {
                    agg.per_link_flow[op][j] += v;
                }
                rate_sens[op].0 += r.rate_sens[op].0;
                rate_sens[op].1 += r.rate_sens[op].1;
                for (j, v) in r.per_link_sens[op].iter().enumerate() {
                    per_link_sens[op][j].0 += v.0;
                    per_link_sens[op][j].1 += v.1;
                }
            }
            agg.transfer_flow += r.transfer;
            agg.welfare += r.welfare;
            agg.vi_sweeps += r.sweeps;
            for (slot, val) in r.g_p {
                g[slot] += val;
            }
        }

        // Traffic operator block.
        for (i, tl) in self.net.tlinks.iter().enumerate() {
            g[i] = match (self.params.traffic, tl.supply) {
                (TrafficFormulation::TimeGap, SupplyKind::Bpr) => {
                    let tau = forward_bpr(
                        agg.tbar[i],
                        tl.t0,
                        tl.capacity,
                        self.params.bpr_alpha,
                        self.params.bpr_beta,
                    );
                    traffic_scale(tl.t0, tl.capacity, self.params.bpr_alpha, self.params.bpr_beta)
                        * (t[i] - tau)
                }
                _ => z[i] - agg.tbar[i],
            };
        }
        // Operator fare blocks.
        for opi in 0..n_ops {
            let off = self.layout.rate_offset(opi);
            match self.net.operators[opi].pricing {
                PricingScheme::PerLink => {
                    for j in 0..self.layout.rate_len[opi] {
                        let (d_rev, d_xm) = per_link_sens[opi][j];
                        g[off + j] = -(agg.per_link_flow[opi][j] + d_rev + wholesale[opi] * d_xm);
                    }
                }
                _ => {
                    if self.layout.rate_len[opi] == 1 {
                        let rate = match op_price[opi] {
                            OpPrice::Rate(r) => r,
                            OpPrice::PerLink(_) => unreachable!(),
                        };
                        let (d_basis, d_xm) = rate_sens[opi];
                        g[off] =
                            -(agg.basis_direct[opi] + rate * d_basis + wholesale[opi] * d_xm);
                    }
                }
            }
        }

        Ok(GEval { g, agg })
    }

    /// Startup audit for the fare box: with every OD fare pushed to the cap
    /// M_p, MaaS demand should be essentially dead, i.e. |dQ_od/dp_od| tiny.
    /// Returns (od index, |dQ/dp|) per priced OD; callers warn above ~1e-3.
    /// Cross-OD fare terms vanish at fixed times, so one symmetric move of
    /// the whole fare block measures every own-price slope at once.
    pub fn fare_cap_elasticities(&mut self) -> Result<Vec<(usize, f64)>> {
        if self.layout.p_ods.is_empty() {
            return Ok(Vec::new());
        }
        let h = 1e-3;
        let mut lo = self.default_start();
        for slot in 0..self.layout.p_ods.len() {
            lo[self.layout.p_offset() + slot] = self.params.max_price - h;
        }
        let mut hi = lo.clone();
        for slot in 0..self.layout.p_ods.len() {
            hi[self.layout.p_offset() + slot] = self.params.max_price + h;
        }
        let a = self.eval(&lo)?.agg;
        let b = self.eval(&hi)?.agg;
        Ok(self
            .layout
            .p_ods
            .iter()
            .map(|&od| {
                let slope = (b.od_maas[od] - a.od_maas[od]) / (2.0 * h);
                (od, slope.abs())
            })
            .collect())
    }

    /// Clears warm-start caches (used when replaying from scratch).
    pub fn reset_warm_starts(&mut self) {
        for w in &mut self.workers {
            w.warm_v = None;
        }
        self.eval_count = 0;
    }

    pub fn segment_count(&self) -> usize {
        self.workers.len()
    }

}

fn operator_sells(net: &MultiModalNetwork, opi: usize) -> bool {
    match net.operators[opi].kind {
        OperatorKind::MoD => !net.phys.roads.is_empty(),
        OperatorKind::Pt => net.phys.pt_lines.iter().any(|l| l.operator == opi),
    }
}

fn build_meta(net: &MultiModalNetwork, mdp: &SegmentMdp, n_ops: usize) -> SegMeta {
    let seg = &net.segments[mdp.seg_idx];
    // Actions are grouped by tail state, not sorted by global id, so lookups
    // need an explicit index.
    let pos: BTreeMap<u32, usize> = mdp
        .actions
        .iter()
        .enumerate()
        .map(|(i, &g)| (g, i))
        .collect();
    let local_action = |global: u32| -> Option<usize> { pos.get(&global).copied() };

    let mut dummies = Vec::new();
    for &oi in &seg.ods {
        let oi = oi as usize;
        dummies.push((
            oi,
            net.maas_dummy[oi].and_then(local_action),
            net.nonmaas_dummy[oi].and_then(local_action),
            net.drive_dummy[oi].and_then(local_action),
        ));
    }

    let mut maas_svc: Vec<Vec<usize>> = vec![Vec::new(); n_ops];
    let mut direct_svc: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_ops];
    let mut per_link: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_ops];
    let mut transfers = Vec::new();
    let mut tlinked = Vec::new();

    for (li, &gi) in mdp.actions.iter().enumerate() {
        let a = &net.actions[gi as usize];
        if let Some(tl) = a.tlink {
            tlinked.push((li, tl));
        }
        match a.kind {
            LinkKind::RoadCongestible | LinkKind::PtFixedCapacitated => {
                if let (Some(scope), Some(op)) = (a.scope, a.operator) {
                    let op = op as usize;
                    match scope {
                        Scope::Maas => maas_svc[op].push(li),
                        Scope::NonMaas => {
                            let basis = match net.operators[op].pricing {
                                PricingScheme::DistanceRate => a.length,
                                PricingScheme::FlatRate => 1.0,
                                PricingScheme::PerLink => 1.0,
                            };
                            direct_svc[op].push((li, basis));
                            if net.operators[op].pricing == PricingScheme::PerLink {
                                let slot = net.price_links[op]
                                    .iter()
                                    .position(|&t| t == a.tlink.unwrap())
                                    .expect("priced link");
                                per_link[op].push((li, slot));
                            }
                        }
                    }
                }
            }
            LinkKind::TransferAccess => transfers.push(li),
            _ => {}
        }
    }

    SegMeta {
        dummies,
        maas_svc,
        direct_svc,
        per_link,
        transfers,
        tlinked,
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_segment(
    net: &MultiModalNetwork,
    params: &ModelParams,
    layout: &Layout,
    maas_price: &[f64],
    op_price: &[OpPrice],
    wholesale: &[f64],
    w: &mut SegmentWorker,
    u_global: &[f64],
) -> Result<SegResult> {
    let gamma = params.gamma;
    let sol = pumcm::solve_segment(
        &w.mdp,
        &mut w.system,
        u_global,
        gamma,
        params.vi,
        w.warm_v.as_deref(),
    )?;
    w.warm_v = Some(sol.v.clone());

    let mdp = &w.mdp;
    let meta = &w.meta;
    let n_ops = net.operators.len();
    let m = mdp.actions.len();

    let mut tbar = vec![0.0; layout.n_t];
    for &(li, tl) in &meta.tlinked {
        tbar[tl as usize] += sol.flows[li];
    }

    let mut od_rows = Vec::with_capacity(meta.dummies.len());
    for &(od, lm, lnm, ld) in &meta.dummies {
        od_rows.push((
            od,
            lm.map_or(0.0, |k| sol.flows[k]),
            lnm.map_or(0.0, |k| sol.flows[k]),
            ld.map_or(0.0, |k| sol.flows[k]),
        ));
    }

    let mut x_maas = vec![0.0; n_ops];
    let mut basis_direct = vec![0.0; n_ops];
    let mut svc_flow_direct = vec![0.0; n_ops];
    let mut revenue_direct = vec![0.0; n_ops];
    let mut per_link_flow: Vec<Vec<f64>> = (0..n_ops)
        .map(|opi| vec![0.0; net.price_links[opi].len()])
        .collect();
    for op in 0..n_ops {
        for &k in &meta.maas_svc[op] {
            x_maas[op] += sol.flows[k];
        }
        for &(k, basis) in &meta.direct_svc[op] {
            basis_direct[op] += basis * sol.flows[k];
            svc_flow_direct[op] += sol.flows[k];
            let fare = match op_price[op] {
                OpPrice::Rate(r) => match net.operators[op].pricing {
                    PricingScheme::DistanceRate => r * basis,
                    _ => r,
                },
                OpPrice::PerLink(v) => {
                    let gi = mdp.actions[k];
                    let tl = net.actions[gi as usize].tlink.unwrap();
                    let slot = net.price_links[op].iter().position(|&t| t == tl).unwrap();
                    v[slot]
                }
            };
            revenue_direct[op] += fare * sol.flows[k];
        }
        for &(k, slot) in &meta.per_link[op] {
            per_link_flow[op][slot] += sol.flows[k];
        }
    }

    let transfer: f64 = meta.transfers.iter().map(|&k| sol.flows[k]).sum();
    // Demand enters only at origin states, so q . V is the segment's
    // contribution to sum_od q_od V(origin_od).
    let welfare: f64 = mdp.q.iter().zip(&sol.v).map(|(q, v)| q * v).sum();

    // Platform fare gradient entries for this segment's ODs.
    let mut g_p = Vec::new();
    let mut du = vec![0.0; m];
    for &(od, lm, _, _) in &meta.dummies {
        let Some(dummy) = lm else { continue };
        let slot = layout
            .p_ods
            .binary_search(&od)
            .expect("priced OD registered");
        du[dummy] = -1.0;
        let d = pumcm::directional_sensitivity(mdp, &sol.lu, &sol.pi, &sol.visits, gamma, &du);
        du[dummy] = 0.0;
        let dq = d.dx[dummy];
        let mut dx_cost = 0.0;
        for op in 0..n_ops {
            let mut s = 0.0;
            for &k in &meta.maas_svc[op] {
                s += d.dx[k];
            }
            dx_cost += wholesale[op] * s;
        }
        let q_od = sol.flows[dummy];
        g_p.push((
            layout.p_offset() + slot,
            dx_cost - maas_price[od] * dq - q_od,
        ));
    }

    // Operator fare sensitivities.
    let mut rate_sens = vec![(0.0, 0.0); n_ops];
    let mut per_link_sens: Vec<Vec<(f64, f64)>> = (0..n_ops)
        .map(|opi| vec![(0.0, 0.0); net.price_links[opi].len()])
        .collect();
    for op in 0..n_ops {
        match net.operators[op].pricing {
            PricingScheme::PerLink => {
                for j in 0..net.price_links[op].len() {
                    let mut du = vec![0.0; m];
                    let mut any = false;
                    for &(k, slot) in &meta.per_link[op] {
                        if slot == j {
                            du[k] = -1.0;
                            any = true;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let d = pumcm::directional_sensitivity(
                        mdp, &sol.lu, &sol.pi, &sol.visits, gamma, &du,
                    );
                    // d(sum_j' p_j' X_j')/dp_j and d(1^T X_m)/dp_j.
                    let prices = match op_price[op] {
                        OpPrice::PerLink(v) => v,
                        OpPrice::Rate(_) => unreachable!(),
                    };
                    let mut d_rev = 0.0;
                    for &(k, slot) in &meta.per_link[op] {
                        d_rev += prices[slot] * d.dx[k];
                    }
                    let mut d_xm = 0.0;
                    for &k in &meta.maas_svc[op] {
                        d_xm += d.dx[k];
                    }
                    per_link_sens[op][j] = (d_rev, d_xm);
                }
            }
            _ => {
                if meta.direct_svc[op].is_empty() && meta.maas_svc[op].is_empty() {
                    continue;
                }
                let mut du = vec![0.0; m];
                let mut any = false;
                for &(k, basis) in &meta.direct_svc[op] {
                    du[k] = -basis;
                    any = true;
                }
                if !any {
                    continue;
                }
                let d = pumcm::directional_sensitivity(
                    mdp, &sol.lu, &sol.pi, &sol.visits, gamma, &du,
                );
                let mut d_basis = 0.0;
                for &(k, basis) in &meta.direct_svc[op] {
                    d_basis += basis * d.dx[k];
                }
                let mut d_xm = 0.0;
                for &k in &meta.maas_svc[op] {
                    d_xm += d.dx[k];
                }
                rate_sens[op] = (d_basis, d_xm);
            }
        }
    }

    Ok(SegResult {
        tbar,
        od_rows,
        x_maas,
        basis_direct,
        svc_flow_direct,
        revenue_direct,
        per_link_flow,
        transfer,
        welfare,
        g_p,
        rate_sens,
        per_link_sens,
        sweeps: sol.sweeps,
    })
}

/// Per-link shadow prices on capacitated links (zero on congestible links):
/// lambda_a = max(0, kappa_a - xbar_a) where t* stays at the design time,
/// with complementarity gap lambda_a * (t*_a - t0_a).
#[derive(Debug, Clone)]
pub struct DualRow {
    pub tlink: usize,
    pub label: String,
    pub capacitated: bool,
    pub t: f64,
    pub t0: f64,
    pub z: f64,
    pub xbar: f64,
    pub lambda: f64,
    pub gap: f64,
}

pub fn capacitated_duals(ev: &Evaluator, y: &[f64], agg: &Aggregates) -> Vec<DualRow> {
    let t = &y[..ev.layout.n_t];
    let mut rows = Vec::with_capacity(ev.layout.n_t);
    for (i, tl) in ev.net.tlinks.iter().enumerate() {
        let capacitated = tl.supply == SupplyKind::Capacitated;
        let z = match tl.supply {
            SupplyKind::Bpr => inverse_bpr(
                t[i].max(tl.t0),
                tl.t0,
                tl.capacity,
                ev.params.bpr_alpha,
                ev.params.bpr_beta,
            )
            .unwrap_or(f64::NAN),
            SupplyKind::Capacitated => tl.capacity,
        };
        let at_design = (t[i] - tl.t0).abs() <= 1e-6 * tl.t0.max(1.0);
        let lambda = if capacitated && at_design {
            (tl.capacity - agg.tbar[i]).max(0.0)
        } else {
            0.0
        };
        rows.push(DualRow {
            tlink: i,
            label: ev.net.tlink_label(i),
            capacitated,
            t: t[i],
            t0: tl.t0,
            z,
            xbar: agg.tbar[i],
            lambda,
            gap: lambda * (t[i] - tl.t0),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpr_round_trip() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t0 = rng.gen_range(0.5..20.0);
            let cap = rng.gen_range(50.0..5000.0);
            let x = rng.gen_range(0.0..3.0 * cap);
            let t = forward_bpr(x, t0, cap, 0.15, 4.0);
            let back = inverse_bpr(t, t0, cap, 0.15, 4.0).unwrap();
            assert!(
                (back - x).abs() < 1e-6 * x.max(1.0),
                "x={x} t={t} back={back}"
            );
        }
    }

    #[test]
    fn inverse_bpr_at_free_flow_is_zero() {
        assert_eq!(inverse_bpr(2.0, 2.0, 300.0, 0.15, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn inverse_bpr_below_free_flow_errors() {
        assert!(inverse_bpr(1.9, 2.0, 300.0, 0.15, 4.0).is_err());
    }

    #[test]
    fn projection_clamps_componentwise() {
        let b = Bounds {
            lower: vec![0.0, 1.0, -1.0],
            upper: vec![1.0, 2.0, 1.0],
        };
        assert_eq!(project(&[-0.5, 1.5, 3.0], &b), vec![0.0, 1.5, 1.0]);
        // Idempotent.
        let p = project(&[-0.5, 1.5, 3.0], &b);
        assert_eq!(project(&p, &b), p);
    }

    #[test]
    fn mode_flows_sum_to_demand() {
        for name in ["small_without_maas", "small_with_maas"] {
            let sc = crate::scenarios::load(name).unwrap();
            let mut ev = sc.evaluator().unwrap();
            let y = ev.default_start();
            let g = ev.eval(&y).unwrap();
            for (oi, od) in ev.net.ods.iter().enumerate() {
                let total = g.agg.od_maas[oi] + g.agg.od_nonmaas[oi] + g.agg.od_drive[oi];
                assert!(
                    (total - od.demand).abs() <= 1e-8 * od.demand,
                    "{name}: od {}->{} splits to {total}, demand {}",
                    od.origin,
                    od.dest,
                    od.demand
                );
            }
        }
    }

    #[test]
    fn traffic_formulations_agree_on_sign_structure() {
        // Both traffic maps must vanish together and push in the same
        // direction everywhere, since they encode the same balance condition.
        let sc = crate::scenarios::load("small_without_maas").unwrap();
        let mut a = sc.evaluator().unwrap();
        let mut b = sc.evaluator().unwrap();
        a.params.traffic = TrafficFormulation::SupplyGap;
        b.params.traffic = TrafficFormulation::TimeGap;

        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let y: Vec<f64> = (0..a.layout.dim)
                .map(|i| rng.gen_range(a.bounds.lower[i]..=a.bounds.upper[i]))
                .collect();
            let ga = a.eval(&y).unwrap();
            let gb = b.eval(&y).unwrap();
            for i in 0..a.layout.n_t {
                let (va, vb) = (ga.g[i], gb.g[i]);
                assert!(
                    va * vb > 0.0 || (va.abs() < 1e-9 && vb.abs() < 1e-9),
                    "link {i}: supply-gap {va} vs time-gap {vb}"
                );
            }
            // Flows underneath are identical: same y, same follower problem.
            for i in 0..a.layout.n_t {
                assert!((ga.agg.tbar[i] - gb.agg.tbar[i]).abs() < 1e-12);
            }
        }
    }
}
