//! Backward dynamic programming on the discretized density dynamics.
//!
//! The optimal cost-to-go of a mass vector is linear in the masses. Writing
//! the one-step map as `p' = Ê⁻¹(p + τ Σ_c B_c v_c)` with `Ê = E / a`, where
//! `τ` is the physical time of one step and `a = 1 + hσ` the diagonal of `A`
//! (see [`crate::operators::Stepping`]), we have `J_k(p) = y_kᵀ Ê p` and
//!
//! ```text
//! Eᵀ y_k = Aᵀ y_{k+1} + h · d_split(x_i, B₊ᵀ y_{k+1}, B₋ᵀ y_{k+1})   (per node i)
//! ```
//!
//! with the continuous-time transports `B±` of each input channel. Without
//! stabilization `a = 1`, `τ = h` and `Ê = E`. The minimizers of the split
//! dual cost are the feedback `u*_{k,i}`.
//!
//! Because `Aᵀ1 = Eᵀ1` and every transport has zero column sums, the step
//! commutes with adding constants to `y`; the ergodic solver uses this to
//! re-anchor `y` at one node after every step and reads the per-step drift
//! off as `τ ℓ∞`. At the fixed point `ℓ∞ = ℓ(x_i, u_i) + ((A_c + B_u)ᵀ y)_i`
//! at every node, the discrete ergodic HJB equation.

use rayon::prelude::*;

use crate::conjugate::DualCost;
use crate::operators::DiscreteSystem;
use crate::{Error, Result};

/// Inputs per node handled without heap allocation in the inner loop.
const MAX_INPUTS: usize = 16;

/// One backward step: value coefficients and the feedback that produced them.
#[derive(Clone, Debug)]
pub struct ValueIterate {
    pub y: Vec<f64>,
    /// Node-major feedback table, `n_inputs` entries per node.
    pub u: Vec<f64>,
    pub k: usize,
    /// Value removed by re-anchoring (zero outside ergodic mode).
    pub offset_per_step: f64,
}

/// `y_k` from `y_{k+1}`.
pub fn dp_step(sys: &DiscreteSystem, dc: &DualCost, y_next: &[f64]) -> Result<ValueIterate> {
    let n = sys.len();
    let nu = sys.n_inputs();
    if nu > MAX_INPUTS {
        return Err(Error::InvalidParameter(format!("at most {MAX_INPUTS} inputs are supported")));
    }
    if y_next.len() != n || dc.len() != n {
        return Err(Error::InvalidParameter("value vector does not match the grid".into()));
    }
    if let Some(bad) = y_next.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite value at node {bad}")));
    }
    let a = sys.a();
    let h = sys.step();
    let transports = &sys.generator().controls;
    let mut u = vec![0.0; n * nu];
    let mut y: Vec<f64> = if nu == 0 {
        (0..n).map(|i| a.column_dot(i, y_next) + h * dc.state_cost()[i]).collect()
    } else {
        u.par_chunks_mut(nu)
            .enumerate()
            .map(|(i, ui)| {
                let mut plus = [0.0; MAX_INPUTS];
                let mut minus = [0.0; MAX_INPUTS];
                for (c, ct) in transports.iter().enumerate() {
                    plus[c] = ct.forward.column_dot(i, y_next);
                    minus[c] = ct.backward.column_dot(i, y_next);
                }
                a.column_dot(i, y_next) + h * dc.split_argmin(i, &plus[..nu], &minus[..nu], ui)
            })
            .collect()
    };
    sys.factor().solve_transpose_in_place(&mut y)?;
    Ok(ValueIterate {
        y,
        u,
        k: 0,
        offset_per_step: 0.0,
    })
}

/// Result of a finite-horizon backward sweep.
#[derive(Clone, Debug)]
pub struct FiniteHorizonSolution {
    /// `J(T, p₀) = y₀ᵀ E p₀ / a`.
    pub y0: Vec<f64>,
    /// `schedule[k]` is the feedback applied at step `k`.
    pub schedule: Vec<Vec<f64>>,
}

impl FiniteHorizonSolution {
    /// Optimal cost from initial masses `p0`.
    pub fn cost(&self, sys: &DiscreteSystem, p0: &[f64]) -> f64 {
        let ep = sys.e().mul_vec(p0);
        self.y0.iter().zip(&ep).map(|(a, b)| a * b).sum::<f64>() / sys.a_scale()
    }

    /// Cost per unit mass started at each node, `(Eᵀy₀)_i / a`.
    pub fn values(&self, sys: &DiscreteSystem) -> Vec<f64> {
        let a = sys.a_scale();
        sys.e().tr_mul_vec(&self.y0).into_iter().map(|v| v / a).collect()
    }
}

/// `N` backward steps from `y_N = 0`.
pub fn solve_finite_horizon(sys: &DiscreteSystem, dc: &DualCost, steps: usize) -> Result<FiniteHorizonSolution> {
    if steps == 0 {
        return Err(Error::InvalidParameter("horizon must be at least one step".into()));
    }
    let mut y = vec![0.0; sys.len()];
    let mut schedule = vec![Vec::new(); steps];
    for k in (0..steps).rev() {
        let it = dp_step(sys, dc, &y)?;
        y = it.y;
        schedule[k] = it.u;
    }
    Ok(FiniteHorizonSolution { y0: y, schedule })
}

#[derive(Clone, Debug)]
pub struct ErgodicOptions {
    /// Stop once `‖u_k − u_{k+1}‖_∞ ≤ tol` ...
    pub tol: f64,
    /// ... and the per-step drift changes by at most this relative amount.
    pub offset_tol: f64,
    /// Node pinned to zero; defaults to the node nearest the domain centre.
    pub anchor: Option<usize>,
    pub max_iter: usize,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        ErgodicOptions {
            tol: 1e-6,
            offset_tol: 1e-8,
            anchor: None,
            max_iter: 500_000,
        }
    }
}

/// One row of the convergence trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// `‖u_k − u_{k−1}‖_∞`.
    pub residual: f64,
    /// Running estimate of `ℓ∞`.
    pub ell: f64,
}

#[derive(Clone, Debug)]
pub struct ErgodicSolution {
    /// Nodal values of `V∞`, zero at the anchor node.
    pub v_inf: Vec<f64>,
    /// Stationary feedback table (node-major).
    pub mu_inf: Vec<f64>,
    pub ell_inf: f64,
    pub iterations: usize,
    pub residual: f64,
    pub anchor: usize,
    pub trace: Vec<TraceRow>,
}

impl ErgodicSolution {
    /// `V∞` shifted to have zero mean against the masses `p`.
    pub fn centered_values(&self, p: &[f64]) -> Vec<f64> {
        let total: f64 = p.iter().sum();
        let mean = self.v_inf.iter().zip(p).map(|(v, m)| v * m).sum::<f64>() / total;
        self.v_inf.iter().map(|v| v - mean).collect()
    }
}

/// Relative value iteration until the feedback and the average cost settle.
pub fn solve_ergodic(sys: &DiscreteSystem, dc: &DualCost, opts: &ErgodicOptions) -> Result<ErgodicSolution> {
    if !(opts.tol > 0.0) || !(opts.offset_tol > 0.0) {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    let anchor = opts.anchor.unwrap_or_else(|| sys.grid().center_node());
    if anchor >= sys.len() {
        return Err(Error::InvalidParameter(format!("anchor node {anchor} is outside the grid")));
    }
    let tau = sys.time_per_step();
    let mut y = vec![0.0; sys.len()];
    let mut u_prev: Option<Vec<f64>> = None;
    let mut offset_prev = f64::NAN;
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let it = dp_step(sys, dc, &y)?;
        let offset = it.y[anchor];
        y = it.y;
        y.iter_mut().for_each(|v| *v -= offset);
        residual = match &u_prev {
            Some(prev) => prev.iter().zip(&it.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            None => f64::INFINITY,
        };
        let ell = offset / tau;
        trace.push(TraceRow {
            iteration,
            residual,
            ell,
        });
        let settled = (offset - offset_prev).abs() <= opts.offset_tol * offset.abs().max(f64::MIN_POSITIVE);
        if residual <= opts.tol && settled {
            return Ok(ErgodicSolution {
                v_inf: y,
                mu_inf: it.u,
                ell_inf: ell,
                iterations: iteration,
                residual,
                anchor,
                trace,
            });
        }
        offset_prev = offset;
        u_prev = Some(it.u);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// The feedback table carried by an iterate.
pub fn extract_feedback(it: &ValueIterate) -> &[f64] {
    &it.u
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::grid::Grid;
    use crate::model::{load_example, BoxDomain, ExampleId, ProblemSpec};
    use proptest::prelude::*;

    fn small_controlled() -> ProblemSpec {
        let mut p = load_example(ExampleId::Lqg1d);
        p.domain = BoxDomain::cube(1, -1.0, 1.0);
        p.controls = BoxDomain::cube(1, -1.5, 1.0);
        p.drift = vec![Expr::parse("0.5*x1 - x1^3", 1, 0).unwrap()];
        p.input_map = vec![vec![Expr::parse("1 + 0.3*x1", 1, 0).unwrap()]];
        p
    }

    fn setup(p: &ProblemSpec, m: usize, h: f64) -> (DiscreteSystem, DualCost) {
        let g = Grid::uniform(&p.domain, m).unwrap();
        let sys = DiscreteSystem::build(p, &g, h).unwrap();
        let dc = DualCost::new(p, &g).unwrap();
        (sys, dc)
    }

    #[test]
    fn zero_terminal_value_gives_min_cost() {
        let p = load_example(ExampleId::CaseStudy2d);
        let (sys, dc) = setup(&p, 6, 0.05);
        let it = dp_step(&sys, &dc, &vec![0.0; 36]).unwrap();
        let ety = sys.e().tr_mul_vec(&it.y);
        for i in 0..36 {
            let expected = sys.step() * p.min_stage_cost(sys.grid().node(i)).unwrap();
            assert!((ety[i] - expected).abs() < 1e-12);
        }
        assert!(it.u.iter().all(|u| *u == 0.0));
    }

    #[test]
    fn uncontrolled_feedback_is_pointwise_argmin() {
        let mut p = load_example(ExampleId::DoubleWell1d);
        p.controls = BoxDomain::cube(1, 0.5, 2.0);
        let (sys, dc) = setup(&p, 15, 0.1);
        let y: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        let it = dp_step(&sys, &dc, &y).unwrap();
        assert!(it.u.iter().all(|u| *u == 0.5));
    }

    #[test]
    fn zero_cost_problem_has_zero_value() {
        let mut p = small_controlled();
        p.cost_q = Expr::Const(0.0);
        let (sys, dc) = setup(&p, 9, 0.1);
        let sol = solve_finite_horizon(&sys, &dc, 1).unwrap();
        assert!(sol.y0.iter().all(|v| v.abs() < 1e-15));
    }

    /// Primal cost of a two-step schedule, rolled forward explicitly.
    fn primal_two_step(sys: &DiscreteSystem, dc: &DualCost, p0: &[f64], u0: &[f64]) -> f64 {
        let tau = sys.time_per_step();
        let first: f64 = (0..p0.len()).map(|i| dc.stage_cost(i, &[u0[i]]) * p0[i]).sum();
        let p1 = sys.step_feedback(p0, u0).unwrap();
        // The last control only moves mass into the zero terminal cost.
        let last: f64 = (0..p1.len())
            .map(|i| {
                let best = dc.stage_cost(i, &[0.0]);
                best * p1[i]
            })
            .sum();
        tau * (first + last)
    }

    #[test]
    fn two_steps_match_exhaustive_search() {
        let p = small_controlled();
        let (sys, dc) = setup(&p, 5, 0.2);
        let sol = solve_finite_horizon(&sys, &dc, 2).unwrap();
        let p0 = [0.1, 0.3, 0.05, 0.35, 0.2];
        let dp_value = sol.cost(&sys, &p0);

        // Per-node lattices: 7 evenly spaced inputs plus the DP's own choice.
        let lattice: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut l: Vec<f64> = (0..7).map(|k| -1.5 + 2.5 * k as f64 / 6.0).collect();
                l.push(sol.schedule[0][i]);
                l
            })
            .collect();
        let mut best = f64::INFINITY;
        let mut idx = [0usize; 5];
        loop {
            let u0: Vec<f64> = (0..5).map(|i| lattice[i][idx[i]]).collect();
            best = best.min(primal_two_step(&sys, &dc, &p0, &u0));
            let mut k = 0;
            while k < 5 {
                idx[k] += 1;
                if idx[k] < lattice[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == 5 {
                break;
            }
        }
        assert!((best - dp_value).abs() < 1e-10, "brute {best} vs dp {dp_value}");
    }

    #[test]
    fn value_grows_with_horizon() {
        let p = small_controlled();
        let (sys, dc) = setup(&p, 11, 0.1);
        let p0: Vec<f64> = (0..11).map(|i| 1.0 + (i % 3) as f64).collect();
        let mut last = 0.0;
        for n in 1..8 {
            let c = solve_finite_horizon(&sys, &dc, n).unwrap().cost(&sys, &p0);
            assert!(c >= last - 1e-12);
            last = c;
        }
    }

    #[test]
    fn feedback_stays_in_box() {
        let p = small_controlled();
        let (sys, dc) = setup(&p, 21, 0.1);
        let sol = solve_finite_horizon(&sys, &dc, 30).unwrap();
        for u in sol.schedule.iter().flatten() {
            assert!((-1.5..=1.0).contains(u));
        }
    }

    #[test]
    fn ergodic_fixed_point_is_consistent() {
        let p = small_controlled();
        let (sys, dc) = setup(&p, 31, 0.1);
        let sol = solve_ergodic(&sys, &dc, &ErgodicOptions::default()).unwrap();
        assert_eq!(sol.v_inf[sol.anchor], 0.0);
        assert!(sol.residual <= 1e-6);
        // ℓ∞ = ℓ(x_i, u_i) + ((A_c + B_u)ᵀ V∞)_i at every node.
        let k = sys.generator().closed_loop(&sol.mu_inf);
        let kt = k.tr_mul_vec(&sol.v_inf);
        for i in 0..31 {
            let local = dc.stage_cost(i, &sol.mu_inf[i..i + 1]) + kt[i];
            assert!((local - sol.ell_inf).abs() < 1e-4 * sol.ell_inf.abs().max(1.0), "node {i}");
        }
    }

    #[test]
    fn ergodic_reports_non_convergence() {
        let p = small_controlled();
        let (sys, dc) = setup(&p, 11, 0.1);
        let opts = ErgodicOptions {
            max_iter: 3,
            ..Default::default()
        };
        assert!(matches!(solve_ergodic(&sys, &dc, &opts), Err(Error::NoConvergence { iterations: 3, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn step_commutes_with_constant_shift(seed in proptest::collection::vec(-5.0..5.0f64, 100), c in -50.0..50.0f64) {
            let p = load_example(ExampleId::CaseStudy2d);
            let (sys, dc) = setup(&p, 10, 0.05);
            let base = dp_step(&sys, &dc, &seed).unwrap();
            let shifted: Vec<f64> = seed.iter().map(|v| v + c).collect();
            let moved = dp_step(&sys, &dc, &shifted).unwrap();
            let err = base.y.iter().zip(&moved.y).map(|(a, b)| (b - c - a).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-10, "{}", err);
            let du = base.u.iter().zip(&moved.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(du <= 1e-10, "{}", du);
        }
    }
}
