//! Projected extragradient iteration for the variational equilibrium.
//!
//! Each iteration evaluates the stacked map G exactly twice: once at the
//! current point y_k to form the prediction
//!     y_pred = Proj(y_k - a G(y_k)),
//! and once at the prediction to take the corrected step
//!     y_{k+1} = Proj(y_k - a G(y_pred)).
//! Convergence is declared on the natural residual
//!     r(y) = || y - Proj(y - a G(y)) ||_2,
//! which reuses the prediction already computed at the loop head, so the
//! check costs nothing extra. The consecutive-iterate distance
//! || y_{k+1} - y_k ||_2 is tracked alongside and can be selected as the
//! stopping rule instead.

use std::cell::RefCell;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::leaders::{self, Aggregates, Bounds, Evaluator, ModelParams};
use crate::metrics;
use crate::network::MultiModalNetwork;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualKind {
    #[default]
    Natural,
    IterateDiff,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub step_size: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub residual: ResidualKind,
    /// Trace every this-many iterations (the final iterate is always traced).
    pub trace_stride: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            step_size: 1e-4,
            tolerance: 1e-6,
            max_iterations: 500_000,
            residual: ResidualKind::Natural,
            trace_stride: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub natural_residual: f64,
    pub iterate_diff: f64,
    pub elapsed_ms: f64,
    pub platform_profit: f64,
    pub operator_profit: Vec<f64>,
    pub welfare: f64,
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub y: Vec<f64>,
    pub agg: Aggregates,
    pub converged: bool,
    pub iterations: usize,
    pub natural_residual: f64,
    pub iterate_diff: f64,
    /// Follower-layer evaluations consumed: 2 per iteration plus the final
    /// convergence check.
    pub follower_evals: u64,
    pub trace: Vec<TraceRow>,
}

struct CoreOutcome {
    y: Vec<f64>,
    iterations: usize,
    natural_residual: f64,
    iterate_diff: f64,
    converged: bool,
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn stepped(y: &[f64], g: &[f64], a: f64, b: &Bounds) -> Vec<f64> {
    let moved: Vec<f64> = y.iter().zip(g).map(|(yi, gi)| yi - a * gi).collect();
    leaders::project(&moved, b)
}

/// The bare algorithm over an arbitrary map; `on_trace` fires on traced
/// iterations with (iter, y, natural residual, iterate diff, elapsed ms).
fn run_extragradient<E, T>(
    mut eval: E,
    mut on_trace: T,
    y0: Vec<f64>,
    bounds: &Bounds,
    opts: &SolverOptions,
) -> Result<CoreOutcome>
where
    E: FnMut(&[f64]) -> Result<Vec<f64>>,
    T: FnMut(usize, &[f64], f64, f64, f64),
{
    let a = opts.step_size;
    let stride = opts.trace_stride.max(1);
    let start = Instant::now();
    let mut y = leaders::project(&y0, bounds);
    let mut last_diff = f64::INFINITY;

    for iter in 0.. {
        let g1 = eval(&y)?;
        let y_pred = stepped(&y, &g1, a, bounds);
        let natural = l2_diff(&y, &y_pred);
        let selected = match opts.residual {
            ResidualKind::Natural => natural,
            ResidualKind::IterateDiff => last_diff,
        };
        let done = selected <= opts.tolerance;
        if done || iter % stride == 0 || iter >= opts.max_iterations {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            on_trace(iter, &y, natural, last_diff, ms);
        }
        if done {
            return Ok(CoreOutcome {
                y,
                iterations: iter,
                natural_residual: natural,
                iterate_diff: last_diff,
                converged: true,
            });
        }
        if iter >= opts.max_iterations {
            return Ok(CoreOutcome {
                y,
                iterations: iter,
                natural_residual: natural,
                iterate_diff: last_diff,
                converged: false,
            });
        }
        let g2 = eval(&y_pred)?;
        let y_next = stepped(&y, &g2, a, bounds);
        last_diff = l2_diff(&y, &y_next);
        y = y_next;
    }
    unreachable!("loop exits via return");
}

/// Like [`solve`] but treats exhausting the iteration budget as an error;
/// used where a certified equilibrium is required (probe baselines).
pub fn solve_converged(
    ev: &mut Evaluator,
    y0: Option<Vec<f64>>,
    opts: &SolverOptions,
) -> Result<Equilibrium> {
    let eq = solve(ev, y0, opts)?;
    if !eq.converged {
        let residual = match opts.residual {
            ResidualKind::Natural => eq.natural_residual,
            ResidualKind::IterateDiff => eq.iterate_diff,
        };
        return Err(Error::NotConverged {
            iterations: eq.iterations,
            residual,
            tolerance: opts.tolerance,
        });
    }
    Ok(eq)
}

/// Runs the iteration until the selected residual drops below tolerance or
/// the budget runs out; non-convergence is reported in-band through the
/// `converged` flag so sweeps can tolerate individual grid points failing.
pub fn solve(
    ev: &mut Evaluator,
    y0: Option<Vec<f64>>,
    opts: &SolverOptions,
) -> Result<Equilibrium> {
    let bounds = ev.bounds.clone();
    let start_y = y0.unwrap_or_else(|| ev.default_start());
    let evals_before = ev.eval_count;

    let ev_cell = RefCell::new(ev);
    let agg_cell: RefCell<Option<Aggregates>> = RefCell::new(None);
    let trace_cell: RefCell<Vec<TraceRow>> = RefCell::new(Vec::new());

    let eval = |y: &[f64]| -> Result<Vec<f64>> {
        let mut ev = ev_cell.borrow_mut();
        let e = ev.eval(y)?;
        *agg_cell.borrow_mut() = Some(e.agg);
        Ok(e.g)
    };
    let on_trace = |iteration: usize, y: &[f64], natural: f64, diff: f64, ms: f64| {
        let ev = ev_cell.borrow();
        let agg = agg_cell.borrow();
        let Some(agg) = agg.as_ref() else { return };
        let profits = metrics::profits(&ev.net, &ev.layout, y, agg);
        trace_cell.borrow_mut().push(TraceRow {
            iteration,
            natural_residual: natural,
            iterate_diff: diff,
            elapsed_ms: ms,
            platform_profit: profits.platform,
            operator_profit: profits.operator.iter().map(|o| o.total).collect(),
            welfare: agg.welfare,
        });
    };

    let out = run_extragradient(eval, on_trace, start_y, &bounds, opts)?;

    let agg = agg_cell
        .into_inner()
        .expect("at least one evaluation happened");
    let follower_evals = ev_cell.into_inner().eval_count - evals_before;
    debug_assert_eq!(
        follower_evals,
        2 * out.iterations as u64 + 1,
        "extragradient must evaluate the follower map exactly twice per iteration"
    );
    Ok(Equilibrium {
        y: out.y,
        agg,
        converged: out.converged,
        iterations: out.iterations,
        natural_residual: out.natural_residual,
        iterate_diff: out.iterate_diff,
        follower_evals,
        trace: trace_cell.into_inner(),
    })
}

/// Initialization-robustness probe: re-solves from multiplicatively
/// perturbed starting points and reports the distance of each recovered
/// equilibrium from the baseline.
#[derive(Debug, Clone)]
pub struct ProbeSpec {
    /// Relative perturbation magnitudes (0.01 = perturb by one percent).
    pub thetas: Vec<f64>,
    /// Fractions of coordinates perturbed per replicate.
    pub ratios: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            thetas: vec![0.01, 0.05, 0.10],
            ratios: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            replicates: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub theta: f64,
    pub ratio: f64,
    pub replicate: usize,
    pub converged: bool,
    pub iterations: usize,
    /// l2 distance between this replicate's equilibrium and the baseline.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub baseline_iterations: usize,
    pub baseline_residual: f64,
    pub rows: Vec<ProbeRow>,
}

pub fn robustness_probe(
    net: &MultiModalNetwork,
    params: &ModelParams,
    opts: &SolverOptions,
    spec: &ProbeSpec,
) -> Result<ProbeReport> {
    let mut base_ev = Evaluator::new(net.clone(), params.clone())?;
    let y0 = base_ev.default_start();
    let base = solve_converged(&mut base_ev, None, opts)?;

    let mut samples = Vec::new();
    for &theta in &spec.thetas {
        for &ratio in &spec.ratios {
            for rep in 0..spec.replicates {
                samples.push((theta, ratio, rep));
            }
        }
    }

    let dim = y0.len();
    let rows: Vec<Result<ProbeRow>> = par::map_indexed(&samples, |i, &(theta, ratio, rep)| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let k = ((ratio * dim as f64).ceil() as usize).clamp(0, dim);
        let picked = rand::seq::index::sample(&mut rng, dim, k);
        // Multiplicative shift y_i -> (1 + theta) y_i on the selected subset.
        let mut y = y0.clone();
        for j in picked {
            y[j] *= 1.0 + theta;
        }
        let mut ev = Evaluator::new(net.clone(), params.clone())?;
        let eq = solve(&mut ev, Some(y), opts)?;
        Ok(ProbeRow {
            theta,
            ratio,
            replicate: rep,
            converged: eq.converged,
            iterations: eq.iterations,
            gap: l2_diff(&eq.y, &base.y),
        })
    });

    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        out.push(r?);
    }
    Ok(ProbeReport {
        baseline_iterations: base.iterations,
        baseline_residual: base.natural_residual,
        rows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_bounds(lo: f64, hi: f64, n: usize) -> Bounds {
        Bounds {
            lower: vec![lo; n],
            upper: vec![hi; n],
        }
    }

    fn opts(step: f64, tol: f64, max: usize) -> SolverOptions {
        SolverOptions {
            step_size: step,
            tolerance: tol,
            max_iterations: max,
            residual: ResidualKind::Natural,
            trace_stride: 1000,
        }
    }

    #[test]
    fn affine_strongly_monotone_interior_solution() {
        // G(y) = A (y - y*), A SPD: unique VI solution at y*.
        let a = [[4.0, 1.0], [1.0, 3.0]];
        let target = [0.3, -0.4];
        let eval = |y: &[f64]| -> Result<Vec<f64>> {
            Ok((0..2)
                .map(|i| (0..2).map(|j| a[i][j] * (y[j] - target[j])).sum())
                .collect())
        };
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![1.0, 1.0],
            &box_bounds(-1.0, 1.0, 2),
            &opts(0.1, 1e-12, 100_000),
        )
        .unwrap();
        assert!(out.converged);
        for i in 0..2 {
            assert!((out.y[i] - target[i]).abs() < 1e-10, "{:?}", out.y);
        }
    }

    #[test]
    fn pure_rotation_needs_the_extra_gradient() {
        // G(u, v) = (v, -u) is monotone but not strongly monotone; the plain
        // projected step spirals outward while extragradient contracts to the
        // unique solution at the origin.
        let eval = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![y[1], -y[0]]) };
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![0.9, -0.7],
            &box_bounds(-1.0, 1.0, 2),
            &opts(0.2, 1e-10, 2_000_000),
        )
        .unwrap();
        assert!(out.converged, "residual {}", out.natural_residual);
        assert!(out.y[0].abs() < 1e-8 && out.y[1].abs() < 1e-8, "{:?}", out.y);

        // The naive forward step with the same step size expands: one step
        // from (r, 0) lands at radius r * sqrt(1 + a^2) > r.
        let r0 = (0.81f64 + 0.49).sqrt();
        let y1 = [0.9f64 - 0.2 * (-0.7), -0.7f64 - 0.2 * (-0.9)];
        let r1 = (y1[0] * y1[0] + y1[1] * y1[1]).sqrt();
        assert!(r1 > r0);
    }

    #[test]
    fn boundary_solution_lands_on_the_box() {
        // Solution of VI(G, [−1,1]^2) with G(y) = y − (2, −3) is the clamp.
        let eval = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![y[0] - 2.0, y[1] + 3.0]) };
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![0.0, 0.0],
            &box_bounds(-1.0, 1.0, 2),
            &opts(0.3, 1e-12, 50_000),
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.y[0] - 1.0).abs() < 1e-9);
        assert!((out.y[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_budget_is_two_per_iteration_plus_final_check() {
        let mut count = 0u64;
        let eval = |y: &[f64]| -> Result<Vec<f64>> {
            count += 1;
            Ok(vec![2.0 * y[0]])
        };
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![1.0],
            &box_bounds(-2.0, 2.0, 1),
            &opts(0.2, 1e-10, 10_000),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(count, 2 * out.iterations as u64 + 1);
    }

    #[test]
    fn one_dimensional_step_by_hand() {
        // G(y) = y - 3 on [0, 10] with a = 0.5 starting at 0: the prediction
        // lands at 1.5 and the corrected iterate at 0.75.
        let eval = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![y[0] - 3.0]) };
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![0.0],
            &box_bounds(0.0, 10.0, 1),
            &opts(0.5, 1e-15, 1),
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.y[0], 0.75);
    }

    #[test]
    fn max_iterations_reports_nonconvergence() {
        let eval = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![y[1], -y[0]]) };
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![0.9, -0.7],
            &box_bounds(-1.0, 1.0, 2),
            &opts(0.2, 1e-10, 5),
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 5);
    }

    #[test]
    fn iterate_diff_residual_also_converges() {
        let eval = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![3.0 * (y[0] - 0.5)]) };
        let mut o = opts(0.1, 1e-11, 100_000);
        o.residual = ResidualKind::IterateDiff;
        let out = run_extragradient(
            eval,
            |_, _, _, _, _| {},
            vec![-1.0],
            &box_bounds(-2.0, 2.0, 1),
            &o,
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.y[0] - 0.5).abs() < 1e-8);
    }
}
