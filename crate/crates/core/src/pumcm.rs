//! Perturbed-utility Markov choice model: the follower layer.
//!
//! Travelers bound for one destination (and sharing one value of time) solve
//! an absorbing MDP over the expanded network. The per-step perturbation is
//! the scaled negative entropy F_s(pi) = sigma_s * sum_a pi_a ln pi_a, whose
//! convex conjugate is the log-sum-exp smooth maximum
//!
//!   F*_s(Q) = sigma_s * ln sum_a exp(Q_a / sigma_s),
//!
//! so the Bellman operator is V(s) = F*_s(u + gamma * V(head)) and the
//! optimal mixed policy is the temperature-sigma softmax of Q. Expected
//! state visits N solve (I - gamma P^T Pi^T) N = q and link flows are
//! x_a = N(tail(a)) * pi_a; both use one sparse LU of A^T where
//! A = I - gamma Pi P. Sensitivities of (V, pi, N, x) to utility directions
//! reuse the same factors:
//!
//!   A dV = Pi du,
//!   dQ = du + gamma dV(head),
//!   dpi_a = pi_a (dQ_a - sum_b pi_b dQ_b) / sigma_s,
//!   A^T dN = gamma P^T (N(tail) . dpi),
//!   dx = pi . dN(tail) + N(tail) . dpi.

use crate::error::{Error, Result};
use crate::linalg::{self, CscMat, LuFactors};
use crate::network::{LinkKind, MultiModalNetwork, PricingScheme, StateKind};

/// Sentinel head for actions that end the trip.
pub const TERMINAL: u32 = u32::MAX;

/// Per-state-class perturbation scales.
#[derive(Debug, Clone, Copy)]
pub struct SigmaConfig {
    pub origin: f64,
    pub hub: f64,
    pub service: f64,
}

impl SigmaConfig {
    pub fn uniform(sigma: f64) -> Self {
        SigmaConfig {
            origin: sigma,
            hub: sigma,
            service: sigma,
        }
    }
}

/// The absorbing MDP for one demand segment, extracted from the expanded
/// network with per-destination availability masking and reachability
/// pruning. State and action lists are ascending in global ids, so the
/// extraction is deterministic regardless of traversal order.
#[derive(Debug, Clone)]
pub struct SegmentMdp {
    pub seg_idx: usize,
    pub dest: usize,
    pub vot: f64,
    /// Local -> global state id.
    pub states: Vec<u32>,
    /// Local -> global action id, grouped by tail state.
    pub actions: Vec<u32>,
    pub tail: Vec<u32>,
    /// Local head state or [`TERMINAL`].
    pub head: Vec<u32>,
    /// Actions of local state s: state_ptr[s]..state_ptr[s+1].
    pub state_ptr: Vec<usize>,
    /// Source demand per local state.
    pub q: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn extract_segment(net: &MultiModalNetwork, seg_idx: usize, sigma: SigmaConfig) -> Result<SegmentMdp> {
    let seg = &net.segments[seg_idx];
    let mut od_allowed = vec![false; net.ods.len()];
    for &oi in &seg.ods {
        od_allowed[oi as usize] = true;
    }
    let dest = seg.dest;

    let n_states = net.n_states();
    let mut forward = vec![false; n_states];
    let mut stack: Vec<u32> = Vec::new();
    for &oi in &seg.ods {
        let od = &net.ods[oi as usize];
        let origin = net
            .states
            .iter()
            .position(|k| matches!(k, StateKind::Origin { node } if *node == od.origin))
            .expect("origin state exists");
        if !forward[origin] {
            forward[origin] = true;
            stack.push(origin as u32);
        }
    }
    while let Some(s) = stack.pop() {
        for &ai in &net.out_actions[s as usize] {
            let a = &net.actions[ai as usize];
            if !net.action_available(a, dest, &od_allowed) {
                continue;
            }
            let h = a.head;
            if net.is_terminal_for(h, dest) {
                continue;
            }
            if !forward[h as usize] {
                forward[h as usize] = true;
                stack.push(h);
            }
        }
    }

    // Backward pass: states that can still reach the destination.
    let mut backward = vec![false; n_states];
    let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n_states];
    let mut seeds: Vec<u32> = Vec::new();
    for (ai, a) in net.actions.iter().enumerate() {
        if !forward[a.tail as usize] || !net.action_available(a, dest, &od_allowed) {
            continue;
        }
        if net.is_terminal_for(a.head, dest) {
            seeds.push(a.tail);
        } else if forward[a.head as usize] {
            rev[a.head as usize].push(a.tail);
        }
        let _ = ai;
    }
    for s in seeds {
        if !backward[s as usize] {
            backward[s as usize] = true;
            stack.push(s);
        }
    }
    while let Some(s) = stack.pop() {
        for &t in &rev[s as usize] {
            if !backward[t as usize] {
                backward[t as usize] = true;
                stack.push(t);
            }
        }
    }

    let mut local_of = vec![u32::MAX; n_states];
    let mut states: Vec<u32> = Vec::new();
    for s in 0..n_states {
        if forward[s] && backward[s] {
            local_of[s] = states.len() as u32;
            states.push(s as u32);
        }
    }

    let mut kept: Vec<(u32, u32, u32)> = Vec::new(); // (tail_local, global action, head_local_or_terminal)
    for (ai, a) in net.actions.iter().enumerate() {
        let tl = local_of[a.tail as usize];
        if tl == u32::MAX || !net.action_available(a, dest, &od_allowed) {
            continue;
        }
        if net.is_terminal_for(a.head, dest) {
            kept.push((tl, ai as u32, TERMINAL));
        } else {
            let hl = local_of[a.head as usize];
            if hl != u32::MAX {
                kept.push((tl, ai as u32, hl));
            }
        }
    }
    kept.sort_unstable();

    let mut state_ptr = vec![0usize; states.len() + 1];
    for &(tl, _, _) in &kept {
        state_ptr[tl as usize + 1] += 1;
    }
    for i in 0..states.len() {
        state_ptr[i + 1] += state_ptr[i];
    }

    let mut q = vec![0.0; states.len()];
    for &oi in &seg.ods {
        let od = &net.ods[oi as usize];
        let origin = net
            .states
            .iter()
            .position(|k| matches!(k, StateKind::Origin { node } if *node == od.origin))
            .unwrap();
        let l = local_of[origin];
        if l == u32::MAX {
            return Err(Error::Unreachable {
                origin: od.origin,
                dest: od.dest,
                mode: "any",
            });
        }
        q[l as usize] += od.demand;
    }

    let sig = |s: u32| -> f64 {
        match net.states[s as usize] {
            StateKind::Origin { .. } => sigma.origin,
            StateKind::Hub { .. } => sigma.hub,
            _ => sigma.service,
        }
    };
    let sigma_v: Vec<f64> = states.iter().map(|&s| sig(s)).collect();

    let mdp = SegmentMdp {
        seg_idx,
        dest,
        vot: net.segments[seg_idx].vot,
        actions: kept.iter().map(|k| k.1).collect(),
        tail: kept.iter().map(|k| k.0).collect(),
        head: kept.iter().map(|k| k.2).collect(),
        state_ptr,
        states,
        q,
        sigma: sigma_v,
    };
    // Every kept non-terminal state has at least one action by construction
    // (backward reachability); assert in debug builds.
    debug_assert!((0..mdp.states.len()).all(|s| mdp.state_ptr[s + 1] > mdp.state_ptr[s]));
    Ok(mdp)
}

/// Scaled negative entropy F_s(pi) (the perturbation itself).
pub fn perturbation(pi: &[f64], sigma: f64) -> f64 {
    sigma
        * pi.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
}

/// Convex conjugate F*_s(Q): a numerically safe log-sum-exp.
pub fn conjugate(q: &[f64], sigma: f64) -> f64 {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = q.iter().map(|&v| ((v - m) / sigma).exp()).sum();
    m + sigma * s.ln()
}

/// Gradient of the conjugate: the temperature-sigma softmax.
pub fn softmax(q: &[f64], sigma: f64) -> Vec<f64> {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = q.iter().map(|&v| ((v - m) / sigma).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// Prices and times needed to turn the expanded network into per-action
/// utilities. `maas_price` is indexed by OD; `op_price` by operator.
pub struct UtilityInputs<'a> {
    pub t: &'a [f64],
    pub maas_price: &'a [f64],
    pub op_price: Vec<OpPrice<'a>>,
}

#[derive(Clone, Copy)]
pub enum OpPrice<'a> {
    Rate(f64),
    PerLink(&'a [f64]),
}

/// Assembles utilities for every expanded action at value-of-time `vot`.
/// Errors if any utility fails strict negativity.
pub fn assemble_utilities(
    net: &MultiModalNetwork,
    inputs: &UtilityInputs,
    vot: f64,
) -> Result<Vec<f64>> {
    let cfg = &net.config;
    let mut u = vec![0.0f64; net.n_actions()];
    for (ai, a) in net.actions.iter().enumerate() {
        let time = match a.tlink {
            Some(tl) => inputs.t[tl as usize],
            None => a.fixed_time,
        };
        let money = match a.kind {
            LinkKind::DummyModeChoice => match a.scope {
                Some(crate::network::Scope::Maas) => inputs.maas_price[a.od.unwrap() as usize],
                _ => cfg.mode_choice_epsilon,
            },
            LinkKind::DrivingAccess => cfg.driving_fixed_cost,
            LinkKind::RoadCongestible => match (a.scope, a.operator) {
                (Some(crate::network::Scope::NonMaas), Some(op)) => {
                    price_on(net, inputs, op as usize, a.tlink.unwrap(), a.length)
                }
                (None, _) => cfg.driving_distance_cost * a.length,
                _ => 0.0, // bundled service: traveler pays the OD fare only
            },
            LinkKind::PtFixedCapacitated => match a.scope {
                Some(crate::network::Scope::NonMaas) => {
                    price_on(net, inputs, a.operator.unwrap() as usize, a.tlink.unwrap(), 1.0)
                }
                _ => 0.0,
            },
            _ => 0.0,
        };
        let penalty = if a.kind == LinkKind::TransferAccess {
            match a.scope {
                Some(crate::network::Scope::Maas) => cfg.maas_transfer_penalty,
                _ => cfg.nonmaas_transfer_penalty,
            }
        } else {
            0.0
        };
        let val = -vot * time - money - penalty;
        if val >= 0.0 {
            return Err(Error::NonnegativeUtility {
                action: ai,
                detail: net.action_label(ai as u32),
                value: val,
            });
        }
        u[ai] = val;
    }
    Ok(u)
}

fn price_on(
    net: &MultiModalNetwork,
    inputs: &UtilityInputs,
    op: usize,
    tlink: u32,
    basis: f64,
) -> f64 {
    match inputs.op_price[op] {
        OpPrice::Rate(r) => match net.operators[op].pricing {
            PricingScheme::DistanceRate => r * basis,
            PricingScheme::FlatRate => r,
            PricingScheme::PerLink => unreachable!("per-link operator with scalar price"),
        },
        OpPrice::PerLink(v) => {
            let slot = net.price_links[op]
                .iter()
                .position(|&t| t == tlink)
                .expect("priced link registered");
            v[slot]
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValueIterationOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for ValueIterationOptions {
    fn default() -> Self {
        ValueIterationOptions {
            tolerance: 1e-12,
            max_sweeps: 50_000,
        }
    }
}

pub struct ValueIterationResult {
    pub v: Vec<f64>,
    pub sweeps: usize,
    /// Sup-norm Bellman residual per sweep.
    pub residuals: Vec<f64>,
}

/// Fixed-point iteration of the smooth Bellman operator. `warm` seeds the
/// value function (zeros otherwise).
pub fn value_iteration(
    mdp: &SegmentMdp,
    u: &[f64],
    gamma: f64,
    opts: ValueIterationOptions,
    warm: Option<&[f64]>,
) -> Result<ValueIterationResult> {
    let n = mdp.states.len();
    let mut v = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let mut residuals = Vec::new();
    for sweep in 0..opts.max_sweeps {
        let mut res = 0.0f64;
        for s in 0..n {
            let lo = mdp.state_ptr[s];
            let hi = mdp.state_ptr[s + 1];
            let sigma = mdp.sigma[s];
            let mut m = f64::NEG_INFINITY;
            for k in lo..hi {
                let h = mdp.head[k];
                let cont = if h == TERMINAL { 0.0 } else { v[h as usize] };
                let q = u[k] + gamma * cont;
                if q > m {
                    m = q;
                }
            }
            let mut acc = 0.0f64;
            for k in lo..hi {
                let h = mdp.head[k];
                let cont = if h == TERMINAL { 0.0 } else { v[h as usize] };
                let q = u[k] + gamma * cont;
                acc += ((q - m) / sigma).exp();
            }
            let nv = m + sigma * acc.ln();
            let d = (nv - v[s]).abs();
            if d > res {
                res = d;
            }
            next[s] = nv;
        }
        std::mem::swap(&mut v, &mut next);
        residuals.push(res);
        if res < opts.tolerance {
            return Ok(ValueIterationResult {
                v,
                sweeps: sweep + 1,
                residuals,
            });
        }
    }
    Err(Error::ValueIterationDiverged {
        dest: mdp.dest,
        max_sweeps: opts.max_sweeps,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Softmax policy and action values from a converged value function. The
/// identity pi_a = exp((Q_a - V(s))/sigma) holds exactly at the fixed point;
/// the explicit normalization only mops up the last floating-point dust.
pub fn policy(mdp: &SegmentMdp, u: &[f64], v: &[f64], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let m = mdp.actions.len();
    let mut pi = vec![0.0; m];
    let mut qv = vec![0.0; m];
    for s in 0..mdp.states.len() {
        let lo = mdp.state_ptr[s];
        let hi = mdp.state_ptr[s + 1];
        let sigma = mdp.sigma[s];
        let mut sum = 0.0;
        for k in lo..hi {
            let h = mdp.head[k];
            let cont = if h == TERMINAL { 0.0 } else { v[h as usize] };
            let q = u[k] + gamma * cont;
            qv[k] = q;
            let p = ((q - v[s]) / sigma).exp();
            pi[k] = p;
            sum += p;
        }
        for k in lo..hi {
            pi[k] /= sum;
        }
    }
    (pi, qv)
}

/// Sparse system A^T (with A = I - gamma Pi P) over the segment's states,
/// with a reusable pattern: the symbolic CSC structure and per-action slots
/// are built once, values are refilled every evaluation.
pub struct FlowSystem {
    mat: CscMat,
    diag_slot: Vec<usize>,
    action_slot: Vec<usize>, // usize::MAX for terminal-head actions
}

impl FlowSystem {
    pub fn new(mdp: &SegmentMdp) -> FlowSystem {
        let n = mdp.states.len();
        let mut coords: Vec<(usize, usize)> = Vec::with_capacity(n + mdp.actions.len());
        for s in 0..n {
            coords.push((s, s));
        }
        for k in 0..mdp.actions.len() {
            let h = mdp.head[k];
            if h != TERMINAL {
                // B = A^T: B[head, tail] accumulates -gamma pi.
                coords.push((h as usize, mdp.tail[k] as usize));
            }
        }
        let (mat, slots) = CscMat::from_coords(n, &coords);
        let diag_slot = slots[..n].to_vec();
        let mut action_slot = vec![usize::MAX; mdp.actions.len()];
        let mut j = n;
        for k in 0..mdp.actions.len() {
            if mdp.head[k] != TERMINAL {
                action_slot[k] = slots[j];
                j += 1;
            }
        }
        FlowSystem {
            mat,
            diag_slot,
            action_slot,
        }
    }

    pub fn factor(&mut self, mdp: &SegmentMdp, pi: &[f64], gamma: f64) -> Result<LuFactors> {
        for v in self.mat.values.iter_mut() {
            *v = 0.0;
        }
        for s in 0..mdp.states.len() {
            self.mat.values[self.diag_slot[s]] = 1.0;
        }
        for k in 0..mdp.actions.len() {
            let slot = self.action_slot[k];
            if slot != usize::MAX {
                self.mat.values[slot] -= gamma * pi[k];
            }
        }
        linalg::factor(&self.mat)
    }
}

/// Expected visits and link flows under a fixed policy.
pub fn flows(mdp: &SegmentMdp, lu: &LuFactors, pi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let visits = lu.solve(&mdp.q); // A^T N = q
    let x: Vec<f64> = (0..mdp.actions.len())
        .map(|k| visits[mdp.tail[k] as usize] * pi[k])
        .collect();
    (visits, x)
}

/// Directional derivatives of the follower solution along a utility
/// direction `du` (one entry per local action).
pub struct Directional {
    pub dv: Vec<f64>,
    pub dpi: Vec<f64>,
    pub dn: Vec<f64>,
    pub dx: Vec<f64>,
}

pub fn directional_sensitivity(
    mdp: &SegmentMdp,
    lu: &LuFactors,
    pi: &[f64],
    visits: &[f64],
    gamma: f64,
    du: &[f64],
) -> Directional {
    let n = mdp.states.len();
    let m = mdp.actions.len();

    let mut rhs = vec![0.0; n];
    for k in 0..m {
        if du[k] != 0.0 {
            rhs[mdp.tail[k] as usize] += pi[k] * du[k];
        }
    }
    let dv = lu.solve_transpose(&rhs); // A dV = Pi du

    let mut dq = vec![0.0; m];
    for k in 0..m {
        let h = mdp.head[k];
        let cont = if h == TERMINAL { 0.0 } else { dv[h as usize] };
        dq[k] = du[k] + gamma * cont;
    }

    let mut dpi = vec![0.0; m];
    for s in 0..n {
        let lo = mdp.state_ptr[s];
        let hi = mdp.state_ptr[s + 1];
        let mut mean = 0.0;
        for k in lo..hi {
            mean += pi[k] * dq[k];
        }
        let inv_sigma = 1.0 / mdp.sigma[s];
        for k in lo..hi {
            dpi[k] = pi[k] * (dq[k] - mean) * inv_sigma;
        }
    }

    let mut rhs2 = vec![0.0; n];
    for k in 0..m {
        let h = mdp.head[k];
        if h != TERMINAL && dpi[k] != 0.0 {
            rhs2[h as usize] += gamma * visits[mdp.tail[k] as usize] * dpi[k];
        }
    }
    let dn = lu.solve(&rhs2); // A^T dN = gamma P^T (N . dpi)

    let mut dx = vec![0.0; m];
    for k in 0..m {
        let t = mdp.tail[k] as usize;
        dx[k] = pi[k] * dn[t] + visits[t] * dpi[k];
    }

    Directional { dv, dpi, dn, dx }
}

/// Everything the leader maps need from one follower solve.
pub struct SegmentSolution {
    pub v: Vec<f64>,
    pub pi: Vec<f64>,
    pub q_values: Vec<f64>,
    pub visits: Vec<f64>,
    pub flows: Vec<f64>,
    pub lu: LuFactors,
    pub sweeps: usize,
}

pub fn solve_segment(
    mdp: &SegmentMdp,
    system: &mut FlowSystem,
    u_global: &[f64],
    gamma: f64,
    opts: ValueIterationOptions,
    warm: Option<&[f64]>,
) -> Result<SegmentSolution> {
    let u_local: Vec<f64> = mdp.actions.iter().map(|&a| u_global[a as usize]).collect();
    let vi = value_iteration(mdp, &u_local, gamma, opts, warm)?;
    let (pi, q_values) = policy(mdp, &u_local, &vi.v, gamma);
    let lu = system.factor(mdp, &pi, gamma)?;
    let (visits, x) = flows(mdp, &lu, &pi);
    Ok(SegmentSolution {
        v: vi.v,
        pi,
        q_values,
        visits,
        flows: x,
        lu,
        sweeps: vi.sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built two-state chain: state 0 has two parallel actions to the
    /// terminal; state 1 feeds state 0.
    fn toy_mdp(sigma: f64) -> SegmentMdp {
        SegmentMdp {
            seg_idx: 0,
            dest: 99,
            vot: 1.0,
            states: vec![0, 1],
            actions: vec![0, 1, 2],
            tail: vec![0, 0, 1],
            head: vec![TERMINAL, TERMINAL, 0],
            state_ptr: vec![0, 2, 3],
            q: vec![0.0, 1.0],
            sigma: vec![sigma, sigma],
        }
    }

    #[test]
    fn conjugate_pair_identities() {
        let q = [-2.0, -3.5, -1.0];
        let sigma = 0.7;
        let pi = softmax(&q, sigma);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        // F*(Q) = <pi, Q> - F(pi) at the maximizing pi.
        let lhs = conjugate(&q, sigma);
        let rhs: f64 = pi.iter().zip(q.iter()).map(|(p, v)| p * v).sum::<f64>()
            - perturbation(&pi, sigma);
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        // Gradient of the conjugate is the softmax (finite differences).
        let h = 1e-6;
        for i in 0..q.len() {
            let mut qp = q;
            qp[i] += h;
            let mut qm = q;
            qm[i] -= h;
            let fd = (conjugate(&qp, sigma) - conjugate(&qm, sigma)) / (2.0 * h);
            assert!((fd - pi[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn equal_utilities_split_evenly() {
        let q = [-2.0, -2.0];
        let pi = softmax(&q, 1.3);
        assert!((pi[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn known_odds_ratio() {
        // Q = (0, -sigma ln 3) gives exactly (0.75, 0.25).
        let sigma = 0.9;
        let pi = softmax(&[0.0, -sigma * 3.0f64.ln()], sigma);
        assert!((pi[0] - 0.75).abs() < 1e-14);
        assert!((pi[1] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn value_iteration_closed_form_chain() {
        // V(0) = sigma ln(e^{u0/sigma} + e^{u1/sigma}), V(1) = u2 + gamma V(0).
        let sigma = 1.1;
        let gamma = 0.95;
        let mdp = toy_mdp(sigma);
        let u = [-1.0, -2.0, -0.5];
        let vi = value_iteration(&mdp, &u, gamma, Default::default(), None).unwrap();
        let v0 = conjugate(&[-1.0, -2.0], sigma);
        let v1 = -0.5 + gamma * v0;
        assert!((vi.v[0] - v0).abs() < 1e-10);
        assert!((vi.v[1] - v1).abs() < 1e-10);
        // Residual trace decreases over the tail.
        let r = &vi.residuals;
        if r.len() > 12 {
            for k in 0..r.len() - 11 {
                assert!(r[k + 10] < r[k].max(1e-13) + 1e-16);
            }
        }
    }

    #[test]
    fn flows_split_and_conserve() {
        let sigma = 0.8;
        let gamma = 1.0;
        let mdp = toy_mdp(sigma);
        let u = [-1.5, -1.5, -0.25];
        let vi = value_iteration(&mdp, &u, gamma, Default::default(), None).unwrap();
        let (pi, _) = policy(&mdp, &u, &vi.v, gamma);
        let mut sys = FlowSystem::new(&mdp);
        let lu = sys.factor(&mdp, &pi, gamma).unwrap();
        let (n, x) = flows(&mdp, &lu, &pi);
        // One unit enters at state 1, passes to state 0, splits evenly.
        assert!((n[1] - 1.0).abs() < 1e-12);
        assert!((n[0] - 1.0).abs() < 1e-12);
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!((x[1] - 0.5).abs() < 1e-12);
        assert!((x[2] - 1.0).abs() < 1e-12);
    }

    /// Random layered MDPs with a couple of back edges; used by the dense
    /// reference and finite-difference oracles.
    fn random_mdp(seed: u64, n_states: usize) -> (SegmentMdp, Vec<f64>) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut tail = Vec::new();
        let mut head = Vec::new();
        for s in 0..n_states {
            // Forward edge to s+1 or terminal, plus extras (may loop back).
            let targets: Vec<u32> = if s + 1 == n_states {
                vec![TERMINAL]
            } else {
                vec![(s + 1) as u32, TERMINAL]
            };
            for t in targets {
                tail.push(s as u32);
                head.push(t);
            }
            if s > 0 && rng.gen_bool(0.6) {
                tail.push(s as u32);
                head.push(rng.gen_range(0..n_states) as u32);
            }
        }
        let m = tail.len();
        // Group by tail.
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by_key(|&k| tail[k]);
        let tail2: Vec<u32> = idx.iter().map(|&k| tail[k]).collect();
        let head2: Vec<u32> = idx.iter().map(|&k| head[k]).collect();
        let mut state_ptr = vec![0usize; n_states + 1];
        for &t in &tail2 {
            state_ptr[t as usize + 1] += 1;
        }
        for s in 0..n_states {
            state_ptr[s + 1] += state_ptr[s];
        }
        let mut q = vec![0.0; n_states];
        q[0] = 2.0;
        if n_states > 2 {
            q[1] = 1.0;
        }
        // Deep enough costs that no cycle's entropy bonus can offset it, so
        // value iteration converges even at gamma = 1.
        let u: Vec<f64> = (0..m).map(|_| -rng.gen_range(2.0..5.0)).collect();
        (
            SegmentMdp {
                seg_idx: 0,
                dest: 0,
                vot: 1.0,
                states: (0..n_states as u32).collect(),
                actions: (0..m as u32).collect(),
                tail: tail2,
                head: head2,
                state_ptr,
                q,
                sigma: vec![0.9; n_states],
            },
            u,
        )
    }

    /// Dense reference: x = diag-free evaluation of the closed-form flow
    /// equations, checked against the sparse path.
    #[test]
    fn sparse_flows_match_dense_formula() {
        for seed in [1u64, 2, 3, 4, 5] {
            let (mdp, u) = random_mdp(seed, 7);
            let gamma = 0.93;
            let vi = value_iteration(&mdp, &u, gamma, Default::default(), None).unwrap();
            let (pi, _) = policy(&mdp, &u, &vi.v, gamma);
            let mut sys = FlowSystem::new(&mdp);
            let lu = sys.factor(&mdp, &pi, gamma).unwrap();
            let (visits, x) = flows(&mdp, &lu, &pi);

            let n = mdp.states.len();
            // Dense A = I - gamma Pi P.
            let mut a = vec![vec![0.0; n]; n];
            for s in 0..n {
                a[s][s] = 1.0;
            }
            for k in 0..mdp.actions.len() {
                if mdp.head[k] != TERMINAL {
                    a[mdp.tail[k] as usize][mdp.head[k] as usize] -= gamma * pi[k];
                }
            }
            // Solve A^T n = q densely.
            let mut at = vec![vec![0.0; n]; n];
            for r in 0..n {
                for c in 0..n {
                    at[c][r] = a[r][c];
                }
            }
            let dense_n = dense_solve(at, mdp.q.clone());
            for s in 0..n {
                assert!((visits[s] - dense_n[s]).abs() < 1e-9);
            }
            // Flow conservation: outflow = q + gamma * inflow at every state.
            for s in 0..n {
                let lo = mdp.state_ptr[s];
                let hi = mdp.state_ptr[s + 1];
                let outflow: f64 = (lo..hi).map(|k| x[k]).sum();
                let inflow: f64 = (0..mdp.actions.len())
                    .filter(|&k| mdp.head[k] == s as u32)
                    .map(|k| x[k])
                    .sum();
                assert!((outflow - (mdp.q[s] + gamma * inflow)).abs() < 1e-9);
            }
        }
    }

    /// The production path computes flows from expected visits,
    /// x = q [I - gamma Pi P]^{-1} Pi. The envelope identity x = q grad V
    /// gives an independent route: differentiate the demand-weighted value
    /// sum numerically and compare, one utility coordinate at a time.
    #[test]
    fn envelope_flows_match_visit_flows() {
        let tight = ValueIterationOptions {
            tolerance: 1e-13,
            max_sweeps: 200_000,
        };
        for seed in 1u64..=20 {
            let n_states = 5 + (seed % 4) as usize;
            let gamma = if seed % 2 == 0 { 1.0 } else { 0.93 };
            let (mdp, u) = random_mdp(seed * 31 + 7, n_states);
            let vi = value_iteration(&mdp, &u, gamma, tight, None).unwrap();
            let (pi, _) = policy(&mdp, &u, &vi.v, gamma);
            let mut sys = FlowSystem::new(&mdp);
            let lu = sys.factor(&mdp, &pi, gamma).unwrap();
            let (_, x) = flows(&mdp, &lu, &pi);
            let x_max = x.iter().cloned().fold(0.0, f64::max);
            assert!(x_max > 0.0);

            let weighted_value = |u2: &[f64]| -> f64 {
                let vi = value_iteration(&mdp, u2, gamma, tight, None).unwrap();
                mdp.q.iter().zip(&vi.v).map(|(q, v)| q * v).sum()
            };
            let h = 1e-5;
            for k in 0..mdp.actions.len() {
                let mut up = u.clone();
                let mut um = u.clone();
                up[k] += h;
                um[k] -= h;
                let envelope = (weighted_value(&up) - weighted_value(&um)) / (2.0 * h);
                assert!(
                    (envelope - x[k]).abs() <= 1e-6 * x_max,
                    "seed={seed} gamma={gamma} x[{k}]: envelope={envelope} visits={}",
                    x[k]
                );
            }
        }
    }

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for j in 0..n {
            let p = (j..n).max_by(|&x, &y| a[x][j].abs().total_cmp(&a[y][j].abs())).unwrap();
            a.swap(j, p);
            b.swap(j, p);
            for r in j + 1..n {
                let f = a[r][j] / a[j][j];
                for c in j..n {
                    a[r][c] -= f * a[j][c];
                }
                b[r] -= f * b[j];
            }
        }
        let mut x = vec![0.0; n];
        for j in (0..n).rev() {
            let mut s = b[j];
            for c in j + 1..n {
                s -= a[j][c] * x[c];
            }
            x[j] = s / a[j][j];
        }
        x
    }

    /// Finite-difference oracle for the analytic sensitivities: every
    /// utility coordinate of five random networks (well over a hundred
    /// Jacobian columns), at gamma = 1 and gamma = 0.9 (the latter
    /// distinguishes the correct gamma placement in the visit derivative).
    #[test]
    fn directional_sensitivity_matches_finite_differences() {
        let tight = ValueIterationOptions {
            tolerance: 1e-14,
            max_sweeps: 200_000,
        };
        let mut columns_checked = 0usize;
        for seed in [11u64, 12, 13, 14, 15] {
            let gamma = if seed % 2 == 0 { 0.9 } else { 1.0 };
            let (mdp, u) = random_mdp(seed, 10);
            let vi = value_iteration(&mdp, &u, gamma, tight, None).unwrap();
            let (pi, _) = policy(&mdp, &u, &vi.v, gamma);
            let mut sys = FlowSystem::new(&mdp);
            let lu = sys.factor(&mdp, &pi, gamma).unwrap();
            let (visits, _) = flows(&mdp, &lu, &pi);

            let solve_at = |u2: &[f64]| -> (Vec<f64>, Vec<f64>) {
                let vi = value_iteration(&mdp, u2, gamma, tight, None).unwrap();
                let (pi2, _) = policy(&mdp, u2, &vi.v, gamma);
                let mut sys2 = FlowSystem::new(&mdp);
                let lu2 = sys2.factor(&mdp, &pi2, gamma).unwrap();
                flows(&mdp, &lu2, &pi2)
            };

            let m = mdp.actions.len();
            let h = 1e-6;
            for j in 0..m {
                let mut dir = vec![0.0; m];
                dir[j] = 1.0;
                let d = directional_sensitivity(&mdp, &lu, &pi, &visits, gamma, &dir);

                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += h;
                um[j] -= h;
                let (np, xp) = solve_at(&up);
                let (nm, xm) = solve_at(&um);
                for s in 0..mdp.states.len() {
                    let fd = (np[s] - nm[s]) / (2.0 * h);
                    assert!(
                        (fd - d.dn[s]).abs() < 1e-4 * (1.0 + fd.abs()),
                        "gamma={gamma} seed={seed} dN[{s}]/du[{j}]: fd={fd} analytic={}",
                        d.dn[s]
                    );
                }
                for k in 0..m {
                    let fd = (xp[k] - xm[k]) / (2.0 * h);
                    assert!(
                        (fd - d.dx[k]).abs() < 1e-4 * (1.0 + fd.abs()),
                        "gamma={gamma} seed={seed} dx[{k}]/du[{j}]: fd={fd} analytic={}",
                        d.dx[k]
                    );
                }
                columns_checked += 1;
            }
        }
        assert!(columns_checked >= 100, "only {columns_checked} columns");
    }

    #[test]
    fn symmetric_two_link_sensitivity_closed_form() {
        // Two equal parallel links from one source: x_i = q/2,
        // d x_1 / d u_1 = q * pi (1 - pi) / sigma = q / (4 sigma).
        let sigma = 1.7;
        let mdp = SegmentMdp {
            seg_idx: 0,
            dest: 9,
            vot: 1.0,
            states: vec![0],
            actions: vec![0, 1],
            tail: vec![0, 0],
            head: vec![TERMINAL, TERMINAL],
            state_ptr: vec![0, 2],
            q: vec![3.0],
            sigma: vec![sigma],
        };
        let u = [-2.0, -2.0];
        let gamma = 1.0;
        let vi = value_iteration(&mdp, &u, gamma, Default::default(), None).unwrap();
        let (pi, _) = policy(&mdp, &u, &vi.v, gamma);
        let mut sys = FlowSystem::new(&mdp);
        let lu = sys.factor(&mdp, &pi, gamma).unwrap();
        let (visits, _) = flows(&mdp, &lu, &pi);
        let d = directional_sensitivity(&mdp, &lu, &pi, &visits, gamma, &[1.0, 0.0]);
        let expect = 3.0 / (4.0 * sigma);
        assert!((d.dx[0] - expect).abs() < 1e-12);
        assert!((d.dx[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn diverging_value_iteration_reports_error() {
        // gamma = 1 with a free positive-entropy loop: state 0 has two
        // actions both returning to state 0 with u = 0 is impossible by
        // strict negativity, but a cheap loop with entropy bonus exceeding
        // the cost still diverges: u = -0.01, sigma = 1, two parallel loops
        // give V <- -0.01 + sigma ln 2 + V, which grows without bound.
        let mdp = SegmentMdp {
            seg_idx: 0,
            dest: 1,
            vot: 1.0,
            states: vec![0],
            actions: vec![0, 1],
            tail: vec![0, 0],
            head: vec![0, 0],
            state_ptr: vec![0, 2],
            q: vec![1.0],
            sigma: vec![1.0],
        };
        let u = [-0.01, -0.01];
        let r = value_iteration(
            &mdp,
            &u,
            1.0,
            ValueIterationOptions {
                tolerance: 1e-10,
                max_sweeps: 500,
            },
            None,
        );
        assert!(matches!(r, Err(Error::ValueIterationDiverged { .. })));
    }
}
