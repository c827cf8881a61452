//! Closed-form conjugates of the stage cost `ℓ(x, u) = q(x) + ½ Σ R_j u_j²`
//! over a box of inputs.
//!
//! The pointwise dual cost
//!
//! ```text
//! d(x, λ) = min_{u ∈ U} ℓ(x, u) + λᵀu
//! ```
//!
//! separates over input channels, and each channel is a clamped quadratic:
//! `u*_j = clamp(−λ_j / R_j, u̲_j, ū_j)`.
//!
//! The dynamic-programming recursion also needs a *split* variant in which
//! the linear coefficient depends on the sign of `u` (the transport operator
//! is upwinded by the direction of the control); see [`DualCost::split_argmin`].

use rayon::prelude::*;

use crate::grid::Grid;
use crate::model::ProblemSpec;
use crate::Result;

/// Minimize `½ r u² + λ u` over `[lo, hi]`, returning `(u*, value)`.
pub fn clamped_quadratic(r: f64, lo: f64, hi: f64, lambda: f64) -> (f64, f64) {
    let u = (-lambda / r).clamp(lo, hi);
    (u, 0.5 * r * u * u + lambda * u)
}

/// Stage-cost data frozen on a grid: cached `q(x_i)`, weights `R`, box `U`.
#[derive(Clone, Debug)]
pub struct DualCost {
    q: Vec<f64>,
    r: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DualCost {
    /// Evaluate `q` at every grid node.
    pub fn new(p: &ProblemSpec, g: &Grid) -> Result<DualCost> {
        let q = (0..g.len())
            .into_par_iter()
            .map(|i| p.state_cost(g.node(i)).map_err(Into::into))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self::from_parts(q, p.cost_r.clone(), p.controls.lower.clone(), p.controls.upper.clone()))
    }

    pub fn from_parts(q: Vec<f64>, r: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> DualCost {
        assert!(r.len() == lower.len() && r.len() == upper.len());
        assert!(r.iter().all(|r| *r > 0.0), "control weights must be positive");
        DualCost { q, r, lower, upper }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.r.len()
    }

    /// Cached `q(x_i)`.
    pub fn state_cost(&self) -> &[f64] {
        &self.q
    }

    /// `ℓ(x_i, u)`.
    pub fn stage_cost(&self, i: usize, u: &[f64]) -> f64 {
        self.q[i] + self.r.iter().zip(u).map(|(r, u)| 0.5 * r * u * u).sum::<f64>()
    }

    /// `d(x_i, λ)`, writing the minimizer into `u`.
    pub fn node_argmin(&self, i: usize, lambda: &[f64], u: &mut [f64]) -> f64 {
        let mut d = self.q[i];
        for j in 0..self.r.len() {
            let (uj, v) = clamped_quadratic(self.r[j], self.lower[j], self.upper[j], lambda[j]);
            u[j] = uj;
            d += v;
        }
        d
    }

    /// Minimize `ℓ(x_i, u) + Σ_j λ⁺_j u_j⁺ − λ⁻_j u_j⁻` where `u⁺ = max(u, 0)`
    /// and `u⁻ = max(−u, 0)`: the linear coefficient is `λ⁺` on the
    /// nonnegative half of each input interval and `λ⁻` on the nonpositive half.
    ///
    /// With `λ⁺ = λ⁻` this is [`node_argmin`](Self::node_argmin). The value is
    /// a minimum of functions affine in `(λ⁺, λ⁻)`, hence jointly concave.
    pub fn split_argmin(&self, i: usize, plus: &[f64], minus: &[f64], u: &mut [f64]) -> f64 {
        let mut d = self.q[i];
        for j in 0..self.r.len() {
            let (lo, hi, r) = (self.lower[j], self.upper[j], self.r[j]);
            let mut best = (f64::NAN, f64::INFINITY);
            if hi >= 0.0 {
                let c = clamped_quadratic(r, lo.max(0.0), hi, plus[j]);
                best = c;
            }
            if lo <= 0.0 {
                let c = clamped_quadratic(r, lo, hi.min(0.0), minus[j]);
                // Ties (both halves meet at u = 0) keep the nonnegative branch.
                if c.1 < best.1 {
                    best = c;
                }
            }
            u[j] = best.0;
            d += best.1;
        }
        d
    }

    /// Weighted dual perspective `D(λ)_i = w_i d(x_i, λ_i / w_i)` together
    /// with the per-node minimizers (node-major, `n_inputs` per node).
    pub fn dual_perspective(&self, weights: &[f64], lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nu = self.n_inputs();
        assert_eq!(weights.len(), self.len());
        assert_eq!(lambda.len(), self.len() * nu);
        let mut u = vec![0.0; lambda.len()];
        let d = u
            .par_chunks_mut(nu)
            .enumerate()
            .map(|(i, ui)| {
                let w = weights[i];
                let scaled: Vec<f64> = lambda[i * nu..(i + 1) * nu].iter().map(|l| l / w).collect();
                w * self.node_argmin(i, &scaled, ui)
            })
            .collect();
        (d, u)
    }
}

/// `(u*, d(x, λ))` for a single point, evaluating `q` on the fly.
pub fn dual_argmin(p: &ProblemSpec, x: &[f64], lambda: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut d = p.state_cost(x)?;
    let mut u = Vec::with_capacity(p.nu);
    for j in 0..p.nu {
        let (uj, v) = clamped_quadratic(p.cost_r[j], p.controls.lower[j], p.controls.upper[j], lambda[j]);
        u.push(uj);
        d += v;
    }
    Ok((u, d))
}

/// `H(x, ∇V) = min_u ℓ(x, u) + ∇Vᵀ(f(x) + G(x) u) = ∇Vᵀf + d(x, Gᵀ∇V)`.
pub fn hamiltonian(p: &ProblemSpec, x: &[f64], grad_v: &[f64]) -> Result<f64> {
    let mut f = vec![0.0; p.nx];
    p.drift_at(x, &mut f)?;
    let mut lambda = vec![0.0; p.nu];
    for (i, gi) in grad_v.iter().enumerate() {
        for (j, l) in lambda.iter_mut().enumerate() {
            *l += p.input_map[i][j].eval(x, &[])? * gi;
        }
    }
    let (_, d) = dual_argmin(p, x, &lambda)?;
    Ok(grad_v.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_example, ExampleId};
    use proptest::prelude::*;

    /// Exhaustive minimization over an evenly spaced lattice on `[lo, hi]`.
    fn brute_force(r: f64, lo: f64, hi: f64, lambda: f64, n: usize) -> (f64, f64) {
        (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .map(|u| (u, 0.5 * r * u * u + lambda * u))
            .fold((f64::NAN, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
    }

    fn case_study() -> ProblemSpec {
        load_example(ExampleId::CaseStudy2d)
    }

    #[test]
    fn worked_values() {
        let p = case_study();
        let x = [0.5, -1.0];
        let q = p.state_cost(&x).unwrap();
        let (u, d) = dual_argmin(&p, &x, &[0.0]).unwrap();
        assert_eq!((u[0], d), (0.0, q));
        let (u, d) = dual_argmin(&p, &x, &[2.0]).unwrap();
        assert_eq!(u[0], -2.0);
        assert!((d - (q - 2.0)).abs() < 1e-12);
        let (u, d) = dual_argmin(&p, &x, &[10.0]).unwrap();
        assert_eq!(u[0], -4.0);
        assert!((d - (q - 32.0)).abs() < 1e-12);
        for lambda in [2.0, 10.0] {
            let (ub, vb) = brute_force(1.0, -4.0, 4.0, lambda, 100_001);
            let (uc, vc) = clamped_quadratic(1.0, -4.0, 4.0, lambda);
            assert!((ub - uc).abs() < 1e-4 && (vb - vc).abs() < 1e-8);
        }
    }

    #[test]
    fn perspective_at_zero_is_weighted_min_cost() {
        let dc = DualCost::from_parts(vec![1.0, 2.0, 3.0], vec![1.0], vec![-1.0], vec![1.0]);
        let (d, u) = dc.dual_perspective(&[0.5, 1.0, 2.0], &[0.0; 3]);
        assert_eq!(d, vec![0.5, 2.0, 6.0]);
        assert_eq!(u, vec![0.0; 3]);
    }

    #[test]
    fn perspective_matches_per_node_brute_force() {
        let q = vec![0.3, 0.0, 1.2, 4.0, 0.7];
        let w = [0.25, 0.5, 0.5, 0.5, 0.25];
        let dc = DualCost::from_parts(q.clone(), vec![2.0], vec![-3.0], vec![1.5]);
        let lambda = [0.4, -1.3, 2.9, -0.05, 5.0];
        let (d, u) = dc.dual_perspective(&w, &lambda);
        for i in 0..5 {
            let (ub, vb) = brute_force(2.0, -3.0, 1.5, lambda[i] / w[i], 450_001);
            assert!((d[i] - w[i] * (q[i] + vb)).abs() < 1e-8, "node {i}");
            assert!((u[i] - ub).abs() < 1e-4);
        }
    }

    #[test]
    fn hamiltonian_special_cases() {
        let dw = load_example(ExampleId::DoubleWell1d);
        let x = [0.8];
        let h = hamiltonian(&dw, &x, &[1.7]).unwrap();
        let f = 0.4 - 0.8f64.powi(3);
        assert!((h - (1.7 * f + 0.64)).abs() < 1e-12);
        let cs = case_study();
        let h0 = hamiltonian(&cs, &[0.1, 0.2], &[0.0, 0.0]).unwrap();
        assert_eq!(h0, cs.min_stage_cost(&[0.1, 0.2]).unwrap());
    }

    #[test]
    fn hamiltonian_matches_sampled_inputs() {
        let cs = case_study();
        let (x, g) = ([1.3, -0.4], [0.7, -2.2]);
        let (f1, f2) = (x[1] - 0.5 * x[0] * x[1], -x[0]);
        let q = cs.state_cost(&x).unwrap();
        let best = (0..100_001)
            .map(|k| -4.0 + 8.0 * k as f64 / 100_000.0)
            .map(|u| q + 0.5 * u * u + g[0] * f1 + g[1] * (f2 + u))
            .fold(f64::INFINITY, f64::min);
        assert!((hamiltonian(&cs, &x, &g).unwrap() - best).abs() < 1e-8);
    }

    #[test]
    fn split_handles_boxes_away_from_zero() {
        let dc = DualCost::from_parts(vec![0.0], vec![1.0], vec![1.0], vec![2.0]);
        let mut u = [0.0];
        let d = dc.split_argmin(0, &[0.5], &[-100.0], &mut u);
        assert_eq!(u[0], 1.0);
        assert!((d - 1.0).abs() < 1e-15);
        let dc = DualCost::from_parts(vec![0.0], vec![1.0], vec![-2.0], vec![-1.0]);
        let d = dc.split_argmin(0, &[-100.0], &[3.0], &mut u);
        assert_eq!(u[0], -2.0);
        assert!((d - (2.0 - 6.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn concave_in_lambda(l1 in -50.0..50.0f64, l2 in -50.0..50.0f64, t in 0.0..1.0f64,
                             r in 0.1..5.0f64, lo in -5.0..0.0f64, hi in 0.0..5.0f64) {
            let d = |l: f64| clamped_quadratic(r, lo, hi, l).1;
            prop_assert!(d(t * l1 + (1.0 - t) * l2) >= t * d(l1) + (1.0 - t) * d(l2) - 1e-12);
        }

        #[test]
        fn minimizer_is_nonincreasing(l1 in -50.0..50.0f64, dl in 0.0..10.0f64, r in 0.1..5.0f64) {
            let (a, _) = clamped_quadratic(r, -3.0, 2.0, l1);
            let (b, _) = clamped_quadratic(r, -3.0, 2.0, l1 + dl);
            prop_assert!(b <= a);
        }

        #[test]
        fn value_is_consistent(l in -50.0..50.0f64, q in -1.0..10.0f64) {
            let dc = DualCost::from_parts(vec![q], vec![1.5], vec![-2.0], vec![3.0]);
            let mut u = [0.0];
            let d = dc.node_argmin(0, &[l], &mut u);
            prop_assert_eq!(d, q + (0.5 * 1.5 * u[0] * u[0] + l * u[0]));
            prop_assert!((d - (dc.stage_cost(0, &u) + l * u[0])).abs() <= 1e-14 * (1.0 + d.abs()));
        }

        #[test]
        fn split_reduces_to_plain_when_coefficients_agree(l in -50.0..50.0f64) {
            let dc = DualCost::from_parts(vec![0.2], vec![0.7], vec![-2.0], vec![3.0]);
            let (mut u, mut v) = ([0.0], [0.0]);
            let a = dc.node_argmin(0, &[l], &mut u);
            let b = dc.split_argmin(0, &[l], &[l], &mut v);
            prop_assert!((a - b).abs() < 1e-14);
            prop_assert_eq!(u[0], v[0]);
        }

        #[test]
        fn split_matches_brute_force(lp in -20.0..20.0f64, lm in -20.0..20.0f64) {
            let dc = DualCost::from_parts(vec![0.0], vec![1.0], vec![-4.0], vec![4.0]);
            let mut u = [0.0];
            let d = dc.split_argmin(0, &[lp], &[lm], &mut u);
            let best = (0..20_001)
                .map(|k| -4.0 + 8.0 * k as f64 / 20_000.0)
                .map(|u| 0.5 * u * u + if u >= 0.0 { lp * u } else { lm * u })
                .fold(f64::INFINITY, f64::min);
            prop_assert!(d <= best + 1e-12);
            prop_assert!(best - d <= 1e-5);
        }

        #[test]
        fn weight_scaling_cancels(l in -20.0..20.0f64, w in 0.01..3.0f64) {
            let dc = DualCost::from_parts(vec![1.0], vec![1.0], vec![-4.0], vec![4.0]);
            let (d1, u1) = dc.dual_perspective(&[w], &[l]);
            let (d2, u2) = dc.dual_perspective(&[2.0 * w], &[2.0 * l]);
            prop_assert_eq!(&u1, &u2);
            prop_assert!((d2[0] - 2.0 * d1[0]).abs() < 1e-12 * (1.0 + d1[0].abs()));
        }
    }
}
