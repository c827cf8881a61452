//! Forward propagation of densities under a fixed feedback.
//!
//! The one-step map is `p' = E⁻¹ K p` with `K = A + h Σ_c B_c^{sgn u} diag(u_c)`.
//! For a feedback inside the control box `E⁻¹ K` is entrywise nonnegative
//! and preserves total mass, i.e. it is a Markov transition matrix. Its
//! fixed point is the discrete stationary density, and every such map
//! contracts the χ²-energy
//!
//! ```text
//! E(p) = Σ_i (p_i − p∞_i)² / p∞_i
//! ```
//!
//! which is the mass-coordinate form of `∫ (ρ − ρ∞)² / ρ∞ dx`.

use crate::conjugate::DualCost;
use crate::operators::{clip_negative, DiscreteSystem};
use crate::sparse::{LuFactor, SparseMatrix};
use crate::{Error, Result};

/// Node masses at a point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityState {
    pub p: Vec<f64>,
    pub time: f64,
}

impl DensityState {
    /// Masses `p` at time zero after checking sign and normalization.
    pub fn new(p: Vec<f64>) -> Result<DensityState> {
        if let Some(i) = p.iter().position(|v| *v < -crate::operators::POSITIVITY_SLACK || !v.is_finite()) {
            return Err(Error::PositivityViolation { node: i, value: p[i] });
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!("masses sum to {total}, not 1")));
        }
        Ok(DensityState { p, time: 0.0 })
    }

    /// Normalized masses of a density sampled at the grid nodes.
    pub fn from_density(grid: &crate::grid::Grid, rho: impl Fn(&[f64]) -> f64) -> Result<DensityState> {
        let mut p: Vec<f64> = (0..grid.len()).map(|i| grid.weights()[i] * rho(grid.node(i))).collect();
        let total: f64 = p.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidParameter("density has no mass on the grid".into()));
        }
        p.iter_mut().for_each(|v| *v /= total);
        Self::new(p)
    }

    /// Nodal density values `ρ_i = p_i / w_i`.
    pub fn density(&self, grid: &crate::grid::Grid) -> Vec<f64> {
        self.p.iter().zip(grid.weights()).map(|(p, w)| p / w).collect()
    }
}

/// Right-hand-side matrix `K = A + h Σ_c B_c^{sgn u} diag(u_c)` of the
/// closed-loop one-step map `E⁻¹ K`.
pub fn closed_loop_matrix(sys: &DiscreteSystem, feedback: &[f64]) -> SparseMatrix {
    let generator_part = sys.generator().closed_loop(feedback);
    // K = a I + h (closed loop − A_c)
    let controls_only = generator_part.linear_combination(1.0, &sys.generator().drift_diffusion, -1.0);
    sys.a().linear_combination(1.0, &controls_only, sys.step())
}

/// The closed-loop one-step map with its factorization borrowed from the system.
pub struct ClosedLoop<'a> {
    sys: &'a DiscreteSystem,
    k: SparseMatrix,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(sys: &'a DiscreteSystem, feedback: &[f64]) -> Result<ClosedLoop<'a>> {
        check_feedback(sys, feedback)?;
        Ok(ClosedLoop {
            sys,
            k: closed_loop_matrix(sys, feedback),
        })
    }

    pub fn rhs_matrix(&self) -> &SparseMatrix {
        &self.k
    }

    /// `E⁻¹ K p` without sign clipping.
    pub fn apply_raw(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut next = self.k.mul_vec(p);
        self.sys.factor().solve_in_place(&mut next)?;
        Ok(next)
    }

    /// `E⁻¹ K p`, clipping rounding-level negative masses.
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut next = self.apply_raw(p)?;
        clip_negative(&mut next)?;
        Ok(next)
    }
}

fn check_feedback(sys: &DiscreteSystem, feedback: &[f64]) -> Result<()> {
    let nu = sys.n_inputs();
    if feedback.len() != sys.len() * nu {
        return Err(Error::InvalidParameter(format!(
            "feedback has {} entries, expected {}",
            feedback.len(),
            sys.len() * nu
        )));
    }
    let b = sys.control_box();
    for (k, u) in feedback.iter().enumerate() {
        let c = k % nu.max(1);
        if !(b.lower[c] - 1e-12..=b.upper[c] + 1e-12).contains(u) {
            return Err(Error::InvalidParameter(format!("feedback {u} at node {} is outside U", k / nu)));
        }
    }
    Ok(())
}

/// Stationary masses of the closed loop, `(A_c + B_u) p = 0`, `1ᵀp = 1`.
///
/// One equation of the singular (rank `m − 1`) generator is replaced by
/// `p_r = 1` at the centre node, the sparse system is solved directly and
/// iteratively refined until a correction changes no entry by more than
/// `1e-12` relative to the largest mass, and the result is normalized. (Plain power iteration on the
/// one-step map converges at the rate of the slowest mode, which on fine
/// grids means many thousands of sweeps.)
pub fn steady_state(sys: &DiscreteSystem, feedback: &[f64]) -> Result<DensityState> {
    const REFINE_TOL: f64 = 1e-12;
    const MAX_REFINE: usize = 20;
    check_feedback(sys, feedback)?;
    let n = sys.len();
    let pinned = sys.grid().center_node();
    let l = sys.generator().closed_loop(feedback);
    let mut t: Vec<_> = l.triplets().filter(|(r, _, _)| *r != pinned).collect();
    t.push((pinned, pinned, 1.0));
    let bordered = SparseMatrix::from_triplets(n, n, &t);
    let lu = LuFactor::new(&bordered)?;
    let mut rhs = vec![0.0; n];
    rhs[pinned] = 1.0;
    let mut p = rhs.clone();
    lu.solve_in_place(&mut p)?;
    let mut update = f64::INFINITY;
    for _ in 0..MAX_REFINE {
        let mut r = bordered.mul_vec(&p);
        r.iter_mut().zip(&rhs).for_each(|(ri, bi)| *ri = bi - *ri);
        lu.solve_in_place(&mut r)?;
        p.iter_mut().zip(&r).for_each(|(pi, di)| *pi += di);
        let scale = p.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        update = r.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / scale;
        if update <= REFINE_TOL {
            clip_negative(&mut p)?;
            normalize(&mut p);
            return Ok(DensityState { p, time: 0.0 });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_REFINE,
        residual: update,
    })
}

fn normalize(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
}

/// `E(p) = Σ (p_i − p∞_i)² / p∞_i`.
pub fn energy(p: &[f64], p_inf: &[f64]) -> f64 {
    p.iter()
        .zip(p_inf)
        .map(|(a, b)| if *b > 0.0 { (a - b) * (a - b) / b } else { 0.0 })
        .sum()
}

/// Sampled energy `E(t)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl EnergyTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest increase between consecutive samples (zero if monotone).
    pub fn max_increase(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn is_nonincreasing(&self, slack: f64) -> bool {
        self.max_increase() <= slack
    }
}

/// Snapshots and energy of a forward rollout.
#[derive(Clone, Debug)]
pub struct Propagation {
    /// States every `stride` steps, including the initial and final one.
    pub snapshots: Vec<DensityState>,
    pub energy: EnergyTrace,
    pub final_state: DensityState,
}

/// Roll the one-step map `steps` times from `p0`, recording `E(t)` against `p_inf`.
pub fn propagate(
    sys: &DiscreteSystem,
    feedback: &[f64],
    p0: &DensityState,
    steps: usize,
    p_inf: &[f64],
    stride: usize,
) -> Result<Propagation> {
    let cl = ClosedLoop::new(sys, feedback)?;
    let stride = stride.max(1);
    let dt = sys.time_per_step();
    let mut state = p0.clone();
    let mut trace = EnergyTrace::default();
    let mut snapshots = vec![state.clone()];
    trace.times.push(state.time);
    trace.values.push(energy(&state.p, p_inf));
    for k in 1..=steps {
        state = DensityState {
            p: cl.apply(&state.p)?,
            time: p0.time + k as f64 * dt,
        };
        trace.times.push(state.time);
        trace.values.push(energy(&state.p, p_inf));
        if k % stride == 0 || k == steps {
            snapshots.push(state.clone());
        }
    }
    Ok(Propagation {
        snapshots,
        energy: trace,
        final_state: state,
    })
}

/// Least-squares slope of `−½ log E(t)` over the trailing `window` fraction
/// of the samples with `E > 1e-14`.
pub fn estimate_decay_rate(trace: &EnergyTrace, window: f64) -> Result<f64> {
    const FLOOR: f64 = 1e-14;
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::InvalidParameter(format!("window fraction {window} not in (0, 1]")));
    }
    let usable: Vec<(f64, f64)> = trace
        .times
        .iter()
        .zip(&trace.values)
        .filter(|(_, e)| **e > FLOOR)
        .map(|(t, e)| (*t, 0.5 * e.ln()))
        .collect();
    let keep = ((usable.len() as f64) * window).ceil() as usize;
    if usable.len() < 10 || keep < 2 {
        return Err(Error::InsufficientData(format!(
            "{} energy samples above {FLOOR:e}, need at least 10",
            usable.len()
        )));
    }
    let tail = &usable[usable.len() - keep..];
    let n = tail.len() as f64;
    let (mt, my) = tail.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t / n, b + y / n));
    let (sxy, sxx) = tail
        .iter()
        .fold((0.0, 0.0), |(a, b), (t, y)| (a + (t - mt) * (y - my), b + (t - mt) * (t - mt)));
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all samples at the same time".into()));
    }
    Ok(-sxy / sxx)
}

/// `Σ_i ℓ(x_i, u_i) p_i`.
pub fn primal_cost(dc: &DualCost, feedback: &[f64], p: &[f64]) -> f64 {
    let nu = dc.n_inputs();
    (0..dc.len())
        .map(|i| dc.stage_cost(i, &feedback[i * nu..(i + 1) * nu]) * p[i])
        .sum()
}
