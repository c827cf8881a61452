//! Finite-volume assembly of the controlled Fokker-Planck operator and its
//! semi-implicit time discretization.
//!
//! State vectors hold node probability masses `p_i = w_i ρ(x_i)`, so the
//! conservation law reads `1ᵀ E⁻¹ A = 1ᵀ` with the plain ones vector.
//!
//! Fluxes across the face between neighbours `i` and `j = i + e_a` (area
//! `S`, spacing `h_a`, donor density `ρ = p / w`) are
//!
//! ```text
//! drift + diffusion:   S (f⁺ ρ_i − f⁻ ρ_j) + S ε (ρ_i − ρ_j) / h_a
//! control channel c:   S g ν_donor,   g = G_ac(face midpoint)
//! ```
//!
//! By default every flux is first-order upwind, so each operator has
//! nonnegative off-diagonal entries and zero column sums. The control
//! transport needs a donor that depends on the sign of the control, which is
//! why each channel has a forward operator (used where `u ≥ 0`) and a
//! backward operator (used where `u < 0`). Both discretize `−div(G_c ·)`.
//!
//! Upwinding adds an artificial diffusion of size `|F| h / 2`, which is not
//! small when the cell Péclet number `|F| h / ε` exceeds one. [`Scheme`]
//! offers two less diffusive fluxes that keep the same sign structure:
//! exponential fitting (Scharfetter-Gummel) for the drift, and a hybrid
//! control flux that blends towards central differences as far as an
//! explicitly treated slice of the diffusion can pay for the resulting
//! negative off-diagonal entries.

use rayon::prelude::*;

use crate::grid::Grid;
use crate::model::{BoxDomain, ProblemSpec};
use crate::sparse::{LuFactor, SparseMatrix};
use crate::{Error, Result};

/// Conservation residuals above this are treated as assembly bugs.
pub const CONSERVATION_TOLERANCE: f64 = 1e-10;
/// Negative masses down to this are rounding noise and clipped to zero.
pub const POSITIVITY_SLACK: f64 = 1e-12;

/// Flux for the drift part of the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DriftFlux {
    /// Donor-cell upwinding with central diffusion.
    #[default]
    Upwind,
    /// Scharfetter-Gummel flux `(εS/h)[B(−Pe) ρ_i − B(Pe) ρ_j]` with the
    /// Bernoulli function `B(z) = z / (eᶻ − 1)` and `Pe = f h / ε`; exact for
    /// one-dimensional steady fluxes with constant drift.
    ExponentialFitting,
}

/// Flux for the control transport.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ControlFlux {
    /// Donor-cell upwinding by the sign of `G_c u_c`.
    #[default]
    Upwind,
    /// Donor weight `α ∈ [½, 1]` per face with the missing upwind diffusion
    /// supplied by moving up to `|G u|_max h / 2` of the physical diffusion
    /// into the explicit part `A`. Central wherever `ε ≥ |G u|_max h / 2`.
    Hybrid,
}

/// Spatial discretization choices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Scheme {
    pub drift: DriftFlux,
    pub control: ControlFlux,
}

impl Scheme {
    /// Exponential-fitting drift with hybrid control fluxes.
    pub const HIGH_RESOLUTION: Scheme = Scheme {
        drift: DriftFlux::ExponentialFitting,
        control: ControlFlux::Hybrid,
    };
}

/// `B(z) = z / (eᶻ − 1)`, continuous at zero.
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-10 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Continuous-time transport of one input channel.
#[derive(Clone, Debug)]
pub struct ControlTransport {
    /// Upwind discretization valid for nonnegative control densities.
    pub forward: SparseMatrix,
    /// Upwind discretization valid for nonpositive control densities.
    pub backward: SparseMatrix,
}

impl ControlTransport {
    /// Operator to apply to a control mass of the given sign.
    pub fn for_sign(&self, v: f64) -> &SparseMatrix {
        if v < 0.0 {
            &self.backward
        } else {
            &self.forward
        }
    }
}

/// Semi-discrete generator `dp/dt = A_c p + Σ_c B_c v_c`.
#[derive(Clone, Debug)]
pub struct Generator {
    /// The full drift-diffusion operator `A_c`.
    pub drift_diffusion: SparseMatrix,
    /// Slice of the diffusion in `A_c` that time stepping treats explicitly
    /// (zero for upwind control fluxes).
    pub explicit_diffusion: SparseMatrix,
    pub controls: Vec<ControlTransport>,
}

impl Generator {
    /// `A_c + Σ_c B_c diag(u_c)` for a per-node feedback (node-major, `nu` per node).
    pub fn closed_loop(&self, feedback: &[f64]) -> SparseMatrix {
        let n = self.drift_diffusion.ncols();
        let nu = self.controls.len();
        let mut t: Vec<_> = self.drift_diffusion.triplets().collect();
        for i in 0..n {
            for (c, ct) in self.controls.iter().enumerate() {
                let u = feedback[i * nu + c];
                if u != 0.0 {
                    t.extend(ct.for_sign(u).column(i).map(|(r, v)| (r, i, v * u)));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, &t)
    }
}

struct Face {
    lo: usize,
    hi: usize,
    axis: usize,
    area: f64,
    midpoint: Vec<f64>,
}

fn faces(g: &Grid) -> Vec<Face> {
    let mut out = Vec::new();
    for i in 0..g.len() {
        let m = g.multi_index(i);
        for a in 0..g.dim() {
            if m[a] + 1 >= g.counts()[a] {
                continue;
            }
            let j = i + g.strides()[a];
            let area: f64 = (0..g.dim())
                .filter(|&b| b != a)
                .map(|b| g.dual_width(b, m[b]))
                .product();
            let midpoint = g.node(i).iter().zip(g.node(j)).map(|(x, y)| 0.5 * (x + y)).collect();
            out.push(Face {
                lo: i,
                hi: j,
                axis: a,
                area,
                midpoint,
            });
        }
    }
    out
}

/// Flux `S g (α ν_donor + (1 − α) ν_other)` from `lo` to `hi` as matrix
/// triplets; `α = 1` is donor-cell upwinding.
fn push_transport(
    t: &mut Vec<(usize, usize, f64)>,
    face: &Face,
    speed: f64,
    w: &[f64],
    positive_density: bool,
    alpha: f64,
) {
    if speed == 0.0 {
        return;
    }
    let (donor, other) = if (speed > 0.0) == positive_density {
        (face.lo, face.hi)
    } else {
        (face.hi, face.lo)
    };
    for (node, weight) in [(donor, alpha), (other, 1.0 - alpha)] {
        if weight > 0.0 {
            let coef = weight * face.area * speed / w[node];
            t.push((face.hi, node, coef));
            t.push((face.lo, node, -coef));
        }
    }
}

/// Symmetric diffusion `c (ρ_lo − ρ_hi)` across a face.
fn push_diffusion(t: &mut Vec<(usize, usize, f64)>, face: &Face, c: f64, w: &[f64]) {
    if c == 0.0 {
        return;
    }
    t.push((face.hi, face.lo, c / w[face.lo]));
    t.push((face.lo, face.lo, -c / w[face.lo]));
    t.push((face.lo, face.hi, c / w[face.hi]));
    t.push((face.hi, face.hi, -c / w[face.hi]));
}

/// Assemble the drift-diffusion generator and the per-channel control
/// transports with the problem's discretization scheme.
pub fn assemble_generator(p: &ProblemSpec, g: &Grid) -> Result<Generator> {
    assemble_generator_with(p, g, p.scheme)
}

/// Per-face data of the generator.
#[derive(Default)]
struct FaceStencil {
    implicit: Vec<(usize, usize, f64)>,
    explicit: Vec<(usize, usize, f64)>,
    forward: Vec<Vec<(usize, usize, f64)>>,
    backward: Vec<Vec<(usize, usize, f64)>>,
}

pub fn assemble_generator_with(p: &ProblemSpec, g: &Grid, scheme: Scheme) -> Result<Generator> {
    if g.dim() != p.nx {
        return Err(Error::Assembly(format!(
            "grid has dimension {}, problem has {}",
            g.dim(),
            p.nx
        )));
    }
    let n = g.len();
    let w = g.weights();
    let faces = faces(g);
    let eval = |e: &crate::expr::Expr, x: &[f64]| -> Result<f64> {
        match e.eval(x, &[]) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(Error::Assembly(format!("expression `{e}` is {v} at {x:?}"))),
            Err(err) => Err(Error::Assembly(format!("expression `{e}` at {x:?}: {err}"))),
        }
    };
    let u_max: Vec<f64> = (0..p.nu)
        .map(|c| p.controls.lower[c].abs().max(p.controls.upper[c].abs()))
        .collect();

    let stencils: Vec<FaceStencil> = faces
        .par_iter()
        .map(|face| {
            let mut st = FaceStencil::default();
            let spacing = g.spacing()[face.axis];
            let f = eval(&p.drift[face.axis], &face.midpoint)?;
            let d = p.epsilon * face.area / spacing;
            let speeds = (0..p.nu)
                .map(|c| eval(&p.input_map[face.axis][c], &face.midpoint))
                .collect::<Result<Vec<f64>>>()?;

            // Upwind demand Σ_c |g_c| u_max,c h / 2 and the diffusion moved
            // to the explicit side to cover it.
            let demand: f64 = speeds.iter().zip(&u_max).map(|(s, u)| 0.5 * s.abs() * u * spacing).sum();
            let (alpha, eps_explicit) = match scheme.control {
                ControlFlux::Hybrid if demand > 0.0 => {
                    let e = p.epsilon.min(demand);
                    (1.0 - 0.5 * e / demand, e)
                }
                _ => (1.0, 0.0),
            };
            let d_explicit = eps_explicit * face.area / spacing;

            match scheme.drift {
                DriftFlux::Upwind => {
                    push_transport(&mut st.implicit, face, f, w, true, 1.0);
                    push_diffusion(&mut st.implicit, face, d - d_explicit, w);
                }
                DriftFlux::ExponentialFitting => {
                    // Only the implicit remainder of ε is fitted; the explicit
                    // slice stays a plain central diffusion.
                    let d_imp = d - d_explicit;
                    let eps_imp = p.epsilon - eps_explicit;
                    if eps_imp > 0.0 {
                        let pe = f * spacing / eps_imp;
                        let (cf, cb) = (d_imp * bernoulli(-pe), d_imp * bernoulli(pe));
                        st.implicit.push((face.hi, face.lo, cf / w[face.lo]));
                        st.implicit.push((face.lo, face.lo, -cf / w[face.lo]));
                        st.implicit.push((face.lo, face.hi, cb / w[face.hi]));
                        st.implicit.push((face.hi, face.hi, -cb / w[face.hi]));
                    } else {
                        push_transport(&mut st.implicit, face, f, w, true, 1.0);
                    }
                }
            }
            push_diffusion(&mut st.explicit, face, d_explicit, w);
            for s in speeds {
                let (mut fw, mut bw) = (Vec::new(), Vec::new());
                push_transport(&mut fw, face, s, w, true, alpha);
                push_transport(&mut bw, face, s, w, false, alpha);
                st.forward.push(fw);
                st.backward.push(bw);
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;

    let explicit_diffusion =
        SparseMatrix::from_triplets(n, n, &stencils.iter().flat_map(|s| s.explicit.iter().copied()).collect::<Vec<_>>());
    let all: Vec<_> = stencils
        .iter()
        .flat_map(|s| s.implicit.iter().chain(&s.explicit).copied())
        .collect();
    let drift_diffusion = SparseMatrix::from_triplets(n, n, &all);
    let controls = (0..p.nu)
        .map(|c| {
            let fw: Vec<_> = stencils.iter().flat_map(|s| s.forward[c].iter().copied()).collect();
            let bw: Vec<_> = stencils.iter().flat_map(|s| s.backward[c].iter().copied()).collect();
            ControlTransport {
                forward: SparseMatrix::from_triplets(n, n, &fw),
                backward: SparseMatrix::from_triplets(n, n, &bw),
            }
        })
        .collect();
    Ok(Generator {
        drift_diffusion,
        explicit_diffusion,
        controls,
    })
}

/// How the explicit control transport is kept positivity preserving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stepping {
    /// `E = I − h (A_c − A_x)`, `A = I + h A_x` with `A_x` the explicit
    /// diffusion slice (zero for upwind control fluxes); fails with
    /// [`Error::StepTooLarge`] when some admissible control could drive a
    /// mass negative.
    SemiImplicit,
    /// Adds the uniform shift `σ ≥ 0` to the diagonals of both `E` and `A`,
    /// the smallest one that makes `A + h Σ B diag(u)` entrywise nonnegative.
    ///
    /// Dividing the shifted system by `1 + hσ` shows it is the plain scheme
    /// with the shorter step `h / (1 + hσ)`: each step then advances physical
    /// time by [`DiscreteSystem::time_per_step`], not by `h`. A uniform shift
    /// (rather than a node-wise one) keeps `1ᵀ E⁻¹ A = 1ᵀ` exact.
    Stabilized,
}

/// Discrete-time system `E p' = A p + Σ_c B_c v_c` with a cached factorization of `E`.
#[derive(Debug)]
pub struct DiscreteSystem {
    grid: Grid,
    generator: Generator,
    controls: BoxDomain,
    h: f64,
    shift: f64,
    e: SparseMatrix,
    a: SparseMatrix,
    lu: LuFactor,
}

/// Worst-case rate at which the explicit part of the generator (explicit
/// diffusion plus control transport at the vertices of the control box)
/// drains each node.
pub fn explicit_outflow_rates(gen: &Generator, controls: &BoxDomain) -> Vec<f64> {
    let n = gen.drift_diffusion.ncols();
    (0..n)
        .map(|i| {
            let control: f64 = gen
                .controls
                .iter()
                .enumerate()
                .map(|(c, ct)| {
                    let up = controls.upper[c].max(0.0) * -ct.forward.get(i, i);
                    let down = (-controls.lower[c]).max(0.0) * ct.backward.get(i, i);
                    up.max(down).max(0.0)
                })
                .sum();
            control - gen.explicit_diffusion.get(i, i)
        })
        .collect()
}

/// Build `(E, A, B)` from the generator for time step `h`.
pub fn discretize_time(
    grid: &Grid,
    generator: Generator,
    controls: &BoxDomain,
    h: f64,
    stepping: Stepping,
) -> Result<DiscreteSystem> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {h}")));
    }
    let rates = explicit_outflow_rates(&generator, controls);
    let worst = rates.iter().cloned().fold(0.0, f64::max);
    let shift = match stepping {
        Stepping::SemiImplicit => {
            if h * worst > 1.0 {
                return Err(Error::StepTooLarge { max_step: 1.0 / worst });
            }
            0.0
        }
        Stepping::Stabilized => (worst - 1.0 / h).max(0.0),
    };
    let diag = SparseMatrix::diagonal(&vec![1.0 + h * shift; rates.len()]);
    let implicit = generator
        .drift_diffusion
        .linear_combination(1.0, &generator.explicit_diffusion, -1.0);
    let e = diag.linear_combination(1.0, &implicit, -h);
    let a = diag.linear_combination(1.0, &generator.explicit_diffusion, h);
    let lu = LuFactor::new(&e)?;
    Ok(DiscreteSystem {
        grid: grid.clone(),
        generator,
        controls: controls.clone(),
        h,
        shift,
        e,
        a,
        lu,
    })
}

impl DiscreteSystem {
    /// Assemble and discretize in one go with the stabilized scheme.
    pub fn build(p: &ProblemSpec, grid: &Grid, h: f64) -> Result<DiscreteSystem> {
        let gen = assemble_generator(p, grid)?;
        discretize_time(grid, gen, &p.controls, h, Stepping::Stabilized)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn control_box(&self) -> &BoxDomain {
        &self.controls
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.generator.controls.len()
    }

    /// Diagonal stabilization `σ` (zero when the plain scheme is admissible).
    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// `1 + hσ`, the common column sum of `A` and `E`.
    pub fn a_scale(&self) -> f64 {
        1.0 + self.h * self.shift
    }

    /// Physical time advanced by one step, `h / (1 + hσ)`.
    pub fn time_per_step(&self) -> f64 {
        self.h / self.a_scale()
    }

    pub fn e(&self) -> &SparseMatrix {
        &self.e
    }

    /// `A = (1 + hσ) I + h A_x`.
    pub fn a(&self) -> &SparseMatrix {
        &self.a
    }

    /// Discrete control matrix `h B_c` for channel `c` and control sign.
    pub fn b(&self, c: usize, negative: bool) -> SparseMatrix {
        let ct = &self.generator.controls[c];
        if negative { &ct.backward } else { &ct.forward }.scaled(self.h)
    }

    pub fn factor(&self) -> &LuFactor {
        &self.lu
    }

    /// Right-hand side `A p + h Σ_c B_c v_c` of one step.
    pub fn step_rhs(&self, p: &[f64], v: &[f64]) -> Vec<f64> {
        let nu = self.n_inputs();
        let mut rhs = self.a.mul_vec(p);
        for i in 0..p.len() {
            for (c, ct) in self.generator.controls.iter().enumerate() {
                let vic = v[i * nu + c];
                if vic != 0.0 {
                    for (r, b) in ct.for_sign(vic).column(i) {
                        rhs[r] += self.h * b * vic;
                    }
                }
            }
        }
        rhs
    }

    /// Advance node masses one step under control masses `v` (`v_ic = p_i u_ic`).
    pub fn apply_step(&self, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let nu = self.n_inputs();
        assert_eq!(p.len(), n);
        assert_eq!(v.len(), n * nu);
        for i in 0..n {
            for c in 0..nu {
                let (lo, hi) = (self.controls.lower[c], self.controls.upper[c]);
                let vic = v[i * nu + c];
                let tol = 1e-12 * (1.0 + p[i].abs() * (lo.abs() + hi.abs()));
                let (a, b) = (p[i] * lo, p[i] * hi);
                if vic < a.min(b) - tol || vic > a.max(b) + tol {
                    return Err(Error::InvalidParameter(format!(
                        "control mass {vic} at node {i} is outside p_i U = [{a}, {b}]"
                    )));
                }
            }
        }
        let mut next = self.step_rhs(p, v);
        self.lu.solve_in_place(&mut next)?;
        let before: f64 = p.iter().sum();
        let after: f64 = next.iter().sum();
        if (after - before).abs() > CONSERVATION_TOLERANCE * before.abs().max(1.0) {
            return Err(Error::LinearSolve(format!("mass drifted from {before} to {after}")));
        }
        clip_negative(&mut next)?;
        Ok(next)
    }

    /// One step under a feedback table `u` (node-major).
    pub fn step_feedback(&self, p: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let nu = self.n_inputs();
        let v: Vec<f64> = (0..p.len() * nu).map(|k| p[k / nu] * u[k]).collect();
        self.apply_step(p, &v)
    }

    /// Max-abs residuals of `1ᵀ E⁻¹ A − 1ᵀ` and `1ᵀ E⁻¹ B_c` (both signs).
    pub fn conservation_residuals(&self) -> (f64, f64) {
        // 1ᵀ E⁻¹ = zᵀ with Eᵀ z = 1.
        let mut z = vec![1.0; self.len()];
        if self.lu.solve_transpose_in_place(&mut z).is_err() {
            return (f64::INFINITY, f64::INFINITY);
        }
        let ra = self.a.tr_mul_vec(&z).iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        let mut rb: f64 = 0.0;
        for c in 0..self.n_inputs() {
            for neg in [false, true] {
                let b = self.b(c, neg);
                rb = b.tr_mul_vec(&z).iter().fold(rb, |m, v| m.max(v.abs()));
            }
        }
        (ra, rb)
    }
}

/// Extremes observed over random feasible one-step applications.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepAudit {
    pub trials: usize,
    /// Largest `|1ᵀp' − 1ᵀp| / 1ᵀp`.
    pub max_mass_drift: f64,
    /// Smallest entry of any `p'` before clipping.
    pub min_component: f64,
}

/// Applies `trials` random steps `p' = E⁻¹(A p + h Σ B_c v_c)` with `p ≥ 0`
/// and `v_i ∈ p_i U`. Half of the trials use dense masses, the other half
/// put all mass on a few nodes with controls at vertices of `U`, which is
/// where positivity is tightest.
pub fn audit_random_steps(sys: &DiscreteSystem, trials: usize, seed: u64) -> Result<StepAudit> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (n, nu) = (sys.len(), sys.n_inputs());
    let boxu = sys.control_box();
    let mut audit = StepAudit { trials, max_mass_drift: 0.0, min_component: f64::INFINITY };
    for t in 0..trials {
        let mut p = vec![0.0; n];
        let mut u = vec![0.0; n * nu];
        if t % 2 == 0 {
            p.iter_mut().for_each(|v| *v = rng.random::<f64>());
            u.iter_mut()
                .enumerate()
                .for_each(|(k, v)| *v = rng.random_range(boxu.lower[k % nu]..=boxu.upper[k % nu]));
        } else {
            for _ in 0..rng.random_range(1..=4) {
                let i = rng.random_range(0..n);
                p[i] += rng.random::<f64>() + 0.1;
                for c in 0..nu {
                    u[i * nu + c] = if rng.random::<bool>() { boxu.upper[c] } else { boxu.lower[c] };
                }
            }
        }
        let total: f64 = p.iter().sum();
        let v: Vec<f64> = (0..n * nu).map(|k| p[k / nu] * u[k]).collect();
        let mut next = sys.step_rhs(&p, &v);
        sys.lu.solve_in_place(&mut next)?;
        let after: f64 = next.iter().sum();
        audit.max_mass_drift = audit.max_mass_drift.max((after - total).abs() / total);
        audit.min_component = next.iter().fold(audit.min_component, |m, v| m.min(*v));
    }
    Ok(audit)
}

pub(crate) fn clip_negative(p: &mut [f64]) -> Result<()> {
    for (i, v) in p.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v < -POSITIVITY_SLACK {
                return Err(Error::PositivityViolation { node: i, value: *v });
            }
            *v = 0.0;
        }
    }
    Ok(())
}
