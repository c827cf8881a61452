//! Problem specifications: control-affine dynamics `dX = (f(X) + G(X)u) dt +
//! sqrt(2ε) dW` reflected at the walls of a box, with stage cost
//! `ℓ(x, u) = q(x) + ½ uᵀ diag(R) u` and a box of admissible inputs.

use std::path::Path;

use serde::Deserialize;

use crate::expr::{EvalError, Expr, ParseError};
use crate::operators::{ControlFlux, DriftFlux, Scheme};
use crate::{Error, Result};

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len(), "box bounds differ in length");
        BoxDomain { lower, upper }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        BoxDomain::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| b - a)
            .product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// Corner points of the box.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.upper[i]
                        } else {
                            self.lower[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Weak Lyapunov (Has'minskiĭ) data: a function `Q(x)` and optionally the
/// constants `γ1..γ4` it is claimed to satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovData {
    pub q: Expr,
    pub gammas: Option<[f64; 4]>,
}

/// Weight matrix `P(x)` for the Bakry-Emery LMI together with the decay
/// parameter `λ` and declared spectral bounds `λ̲ I ⪯ P ⪯ λ̄ I`.
#[derive(Clone, Debug, PartialEq)]
pub struct BakryEmeryData {
    pub p: Vec<Vec<Expr>>,
    pub lambda: Option<f64>,
    pub bounds: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub nx: usize,
    pub nu: usize,
    /// Drift components `f_i(x)`.
    pub drift: Vec<Expr>,
    /// Input map, `input_map[i][j] = G_ij(x)`.
    pub input_map: Vec<Vec<Expr>>,
    /// State part `q(x)` of the stage cost.
    pub cost_q: Expr,
    /// Diagonal of the quadratic control weight.
    pub cost_r: Vec<f64>,
    pub controls: BoxDomain,
    pub domain: BoxDomain,
    pub epsilon: f64,
    pub lyapunov: Option<LyapunovData>,
    pub bakry_emery: Option<BakryEmeryData>,
    /// Spatial discretization used when the problem is assembled on a grid.
    pub scheme: Scheme,
}

impl ProblemSpec {
    pub fn drift_at(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), EvalError> {
        for (o, f) in out.iter_mut().zip(&self.drift) {
            *o = f.eval(x, &[])?;
        }
        Ok(())
    }

    /// Closed-loop vector field `F(x) = f(x) + G(x) u`.
    pub fn closed_loop_at(
        &self,
        x: &[f64],
        u: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), EvalError> {
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = self.drift[i].eval(x, &[])?;
            for (j, uj) in u.iter().enumerate() {
                v += self.input_map[i][j].eval(x, &[])? * uj;
            }
            *o = v;
        }
        Ok(())
    }

    pub fn state_cost(&self, x: &[f64]) -> std::result::Result<f64, EvalError> {
        self.cost_q.eval(x, &[])
    }

    /// `ℓ(x, u) = q(x) + ½ Σ R_j u_j²`.
    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> std::result::Result<f64, EvalError> {
        let control: f64 = self
            .cost_r
            .iter()
            .zip(u)
            .map(|(r, v)| 0.5 * r * v * v)
            .sum();
        Ok(self.state_cost(x)? + control)
    }

    /// Per-channel minimizer of `½ R_j u²` over the box; zero when admissible.
    pub fn cheapest_input(&self) -> Vec<f64> {
        self.controls
            .lower
            .iter()
            .zip(&self.controls.upper)
            .map(|(lo, hi)| 0.0f64.clamp(*lo, *hi))
            .collect()
    }

    /// `min_u ℓ(x, u)`.
    pub fn min_stage_cost(&self, x: &[f64]) -> std::result::Result<f64, EvalError> {
        self.stage_cost(x, &self.cheapest_input())
    }

    pub fn from_toml_str(text: &str) -> Result<ProblemSpec> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.into_spec()
    }

    pub fn from_file(path: &Path) -> Result<ProblemSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Serialize back to the config format (expressions are pretty printed).
    pub fn to_toml_string(&self) -> String {
        let list = |v: &[f64]| {
            let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", items.join(", "))
        };
        let strings = |v: &[Expr]| {
            let items: Vec<String> = v.iter().map(|e| format!("\"{e}\"")).collect();
            format!("[{}]", items.join(", "))
        };
        let mut s = String::new();
        s += &format!("name = \"{}\"\n", self.name);
        s += &format!("epsilon = {:?}\n", self.epsilon);
        s += &format!("drift = {}\n", strings(&self.drift));
        let rows: Vec<String> = self.input_map.iter().map(|r| strings(r)).collect();
        s += &format!("input_map = [{}]\n", rows.join(", "));
        if let Some(l) = &self.lyapunov {
            s += &format!("lyapunov_Q = \"{}\"\n", l.q);
            if let Some(g) = l.gammas {
                s += &format!("lyapunov_gammas = {}\n", list(&g));
            }
        }
        if let Some(be) = &self.bakry_emery {
            let rows: Vec<String> = be.p.iter().map(|r| strings(r)).collect();
            s += &format!("be_weight_P = [{}]\n", rows.join(", "));
            if let Some(l) = be.lambda {
                s += &format!("be_lambda = {l:?}\n");
            }
            if let Some((lo, hi)) = be.bounds {
                s += &format!("be_bounds = [{lo:?}, {hi:?}]\n");
            }
        }
        s += &format!("\n[dimensions]\nnx = {}\nnu = {}\n", self.nx, self.nu);
        s += &format!(
            "\n[domain]\nlower = {}\nupper = {}\n",
            list(&self.domain.lower),
            list(&self.domain.upper)
        );
        s += &format!(
            "\n[controls]\nlower = {}\nupper = {}\n",
            list(&self.controls.lower),
            list(&self.controls.upper)
        );
        s += &format!("\n[cost]\nq = \"{}\"\nR = {}\n", self.cost_q, list(&self.cost_r));
        if self.scheme != Scheme::default() {
            s += &format!(
                "\n[discretization]\ndrift = \"{}\"\ncontrol = \"{}\"\n",
                drift_name(self.scheme.drift),
                control_name(self.scheme.control)
            );
        }
        s
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDimensions {
    nx: usize,
    nu: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    q: String,
    #[serde(rename = "R")]
    r: Vec<f64>,
}

fn drift_name(d: DriftFlux) -> &'static str {
    match d {
        DriftFlux::Upwind => "upwind",
        DriftFlux::ExponentialFitting => "exponential-fitting",
    }
}

fn control_name(c: ControlFlux) -> &'static str {
    match c {
        ControlFlux::Upwind => "upwind",
        ControlFlux::Hybrid => "hybrid",
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiscretization {
    drift: Option<String>,
    control: Option<String>,
}

impl RawDiscretization {
    fn into_scheme(self) -> Result<Scheme> {
        let mut s = Scheme::default();
        if let Some(d) = self.drift {
            s.drift = match d.as_str() {
                "upwind" => DriftFlux::Upwind,
                "exponential-fitting" => DriftFlux::ExponentialFitting,
                other => {
                    return Err(Error::Config(format!(
                        "discretization.drift: unknown flux `{other}` (expected upwind or exponential-fitting)"
                    )))
                }
            };
        }
        if let Some(c) = self.control {
            s.control = match c.as_str() {
                "upwind" => ControlFlux::Upwind,
                "hybrid" => ControlFlux::Hybrid,
                other => {
                    return Err(Error::Config(format!(
                        "discretization.control: unknown flux `{other}` (expected upwind or hybrid)"
                    )))
                }
            };
        }
        Ok(s)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    dimensions: RawDimensions,
    domain: RawBox,
    controls: RawBox,
    epsilon: f64,
    drift: Vec<String>,
    input_map: Vec<Vec<String>>,
    cost: RawCost,
    #[serde(rename = "lyapunov_Q")]
    lyapunov_q: Option<String>,
    lyapunov_gammas: Option<[f64; 4]>,
    #[serde(rename = "be_weight_P")]
    be_weight_p: Option<Vec<Vec<String>>>,
    be_lambda: Option<f64>,
    be_bounds: Option<[f64; 2]>,
    discretization: Option<RawDiscretization>,
}

fn parse_field(what: &str, src: &str, nx: usize) -> Result<Expr> {
    Expr::parse(src, nx, 0).map_err(|e: ParseError| Error::Config(format!("{what}: {e}")))
}

fn parse_matrix(what: &str, rows: &[Vec<String>], r: usize, c: usize, nx: usize) -> Result<Vec<Vec<Expr>>> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a {r}x{c} array of expressions")));
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, s)| parse_field(&format!("{what}[{i}][{j}]"), s, nx))
                .collect()
        })
        .collect()
}

impl RawConfig {
    fn into_spec(self) -> Result<ProblemSpec> {
        let RawDimensions { nx, nu } = self.dimensions;
        if nx == 0 || nu == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        let dims = |what: &str, b: &RawBox, n: usize| -> Result<BoxDomain> {
            if b.lower.len() != n || b.upper.len() != n {
                return Err(Error::Config(format!("{what} bounds must have {n} entries")));
            }
            Ok(BoxDomain::new(b.lower.clone(), b.upper.clone()))
        };
        let domain = dims("domain", &self.domain, nx)?;
        let controls = dims("controls", &self.controls, nu)?;
        if self.drift.len() != nx {
            return Err(Error::Config(format!("drift must have {nx} entries")));
        }
        let drift = self
            .drift
            .iter()
            .enumerate()
            .map(|(i, s)| parse_field(&format!("drift[{i}]"), s, nx))
            .collect::<Result<Vec<_>>>()?;
        let input_map = parse_matrix("input_map", &self.input_map, nx, nu, nx)?;
        if self.cost.r.len() != nu {
            return Err(Error::Config(format!("cost.R must have {nu} entries")));
        }
        let cost_q = parse_field("cost.q", &self.cost.q, nx)?;
        let lyapunov = match self.lyapunov_q {
            Some(q) => Some(LyapunovData {
                q: parse_field("lyapunov_Q", &q, nx)?,
                gammas: self.lyapunov_gammas,
            }),
            None if self.lyapunov_gammas.is_some() => {
                return Err(Error::Config("lyapunov_gammas given without lyapunov_Q".into()))
            }
            None => None,
        };
        let bakry_emery = match self.be_weight_p {
            Some(p) => Some(BakryEmeryData {
                p: parse_matrix("be_weight_P", &p, nx, nx, nx)?,
                lambda: self.be_lambda,
                bounds: self.be_bounds.map(|[a, b]| (a, b)),
            }),
            None if self.be_lambda.is_some() || self.be_bounds.is_some() => {
                return Err(Error::Config("be_lambda/be_bounds given without be_weight_P".into()))
            }
            None => None,
        };
        Ok(ProblemSpec {
            name: self.name.unwrap_or_else(|| "problem".into()),
            nx,
            nu,
            drift,
            input_map,
            cost_q,
            cost_r: self.cost.r,
            controls,
            domain,
            epsilon: self.epsilon,
            lyapunov,
            bakry_emery,
            scheme: match self.discretization {
                Some(d) => d.into_scheme()?,
                None => Scheme::default(),
            },
        })
    }
}

/// Outcome of [`validate_spec`]; an empty violation list means valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const LATTICE_POINTS: usize = 5;

/// Check the standing assumptions that can be checked mechanically.
pub fn validate_spec(p: &ProblemSpec) -> ValidationReport {
    let mut v = Vec::new();
    if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
        v.push("epsilon must be positive".to_string());
    }
    for (j, (lo, hi)) in p.controls.lower.iter().zip(&p.controls.upper).enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            v.push(format!("control box component {} is empty or unbounded", j + 1));
        }
    }
    for (i, (lo, hi)) in p.domain.lower.iter().zip(&p.domain.upper).enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            v.push(format!("domain component {} is empty or unbounded", i + 1));
        }
    }
    if p.cost_r.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        v.push("control cost not strongly convex".to_string());
    }
    if p.drift.len() != p.nx || p.input_map.len() != p.nx || p.input_map.iter().any(|r| r.len() != p.nu) {
        v.push("dimension mismatch between drift, input map and nx/nu".to_string());
    }
    if p.cost_r.len() != p.nu || p.controls.dim() != p.nu || p.domain.dim() != p.nx {
        v.push("dimension mismatch between boxes, cost weights and nx/nu".to_string());
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }

    // Sample every expression on a coarse lattice over Ω × U.
    let mut finite = true;
    let mut bad = |what: &str, e: Option<EvalError>, x: &[f64]| {
        if finite {
            let why = e.map(|e| e.to_string()).unwrap_or_else(|| "non-finite value".into());
            v.push(format!("{what} is not finite at x = {x:?} ({why})"));
        }
        finite = false;
    };
    let mut x = vec![0.0; p.nx];
    let total = LATTICE_POINTS.pow(p.nx as u32);
    let mut u_samples = p.controls.vertices();
    u_samples.push(p.cheapest_input());
    for flat in 0..total {
        let mut rem = flat;
        for i in 0..p.nx {
            let k = rem % LATTICE_POINTS;
            rem /= LATTICE_POINTS;
            let t = k as f64 / (LATTICE_POINTS - 1) as f64;
            x[i] = p.domain.lower[i] + t * (p.domain.upper[i] - p.domain.lower[i]);
        }
        let mut check = |what: &str, e: &Expr| match e.eval(&x, &[]) {
            Ok(val) if val.is_finite() => {}
            Ok(_) => bad(what, None, &x),
            Err(err) => bad(what, Some(err), &x),
        };
        for f in &p.drift {
            check("drift", f);
        }
        for row in &p.input_map {
            for g in row {
                check("input map", g);
            }
        }
        check("stage cost", &p.cost_q);
        if let Some(l) = &p.lyapunov {
            check("lyapunov_Q", &l.q);
        }
        if let Some(be) = &p.bakry_emery {
            for row in &be.p {
                for e in row {
                    check("be_weight_P", e);
                }
            }
        }
        for u in &u_samples {
            match p.stage_cost(&x, u) {
                Ok(c) if c.is_finite() => {}
                Ok(_) => bad("stage cost", None, &x),
                Err(err) => bad("stage cost", Some(err), &x),
            }
        }
    }
    if let Some(be) = &p.bakry_emery {
        if let Some(l) = be.lambda {
            if !(l >= 0.0) {
                v.push("be_lambda must be nonnegative".to_string());
            }
        }
        if let Some((lo, hi)) = be.bounds {
            if !(0.0 < lo && lo <= hi) {
                v.push("be_bounds must satisfy 0 < lower <= upper".to_string());
            }
        }
    }
    ValidationReport { violations: v }
}

/// Built-in problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExampleId {
    /// Scalar linear-quadratic regulator `f = x`, `G = 1`, `ℓ = x² + u²`.
    Lqg1d,
    /// Uncontrolled double well `f = x/2 − x³`, `ε = 1`.
    DoubleWell1d,
    /// Uncontrolled cubic `f = x − x³` with cost `x² + x⁴ + u²`.
    CubicUncontrolled1d,
    /// Two-state oscillator with a bimodal state cost.
    CaseStudy2d,
}

impl ExampleId {
    pub const ALL: [ExampleId; 4] = [
        ExampleId::Lqg1d,
        ExampleId::DoubleWell1d,
        ExampleId::CubicUncontrolled1d,
        ExampleId::CaseStudy2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExampleId::Lqg1d => "lqg_1d",
            ExampleId::DoubleWell1d => "double_well_1d",
            ExampleId::CubicUncontrolled1d => "cubic_uncontrolled_1d",
            ExampleId::CaseStudy2d => "case_study_2d",
        }
    }

    pub fn from_name(name: &str) -> Option<ExampleId> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

fn ex(src: &str, nx: usize) -> Expr {
    Expr::parse(src, nx, 0).expect("built-in expression")
}

/// Expand a built-in example into its full specification.
pub fn load_example(id: ExampleId) -> ProblemSpec {
    match id {
        ExampleId::Lqg1d => ProblemSpec {
            name: id.name().into(),
            nx: 1,
            nu: 1,
            drift: vec![ex("x1", 1)],
            input_map: vec![vec![ex("1", 1)]],
            cost_q: ex("x1^2", 1),
            cost_r: vec![2.0],
            controls: BoxDomain::cube(1, -20.0, 20.0),
            domain: BoxDomain::cube(1, -5.0, 5.0),
            epsilon: 0.5,
            lyapunov: Some(LyapunovData {
                q: ex("0.5*x1^2", 1),
                gammas: None,
            }),
            bakry_emery: None,
            scheme: Scheme::default(),
        },
        ExampleId::DoubleWell1d => ProblemSpec {
            name: id.name().into(),
            nx: 1,
            nu: 1,
            drift: vec![ex("x1/2 - x1^3", 1)],
            input_map: vec![vec![ex("0", 1)]],
            cost_q: ex("x1^2", 1),
            cost_r: vec![1.0],
            controls: BoxDomain::cube(1, -1.0, 1.0),
            domain: BoxDomain::cube(1, -3.0, 3.0),
            epsilon: 1.0,
            lyapunov: Some(LyapunovData {
                q: ex("0.5*x1^2", 1),
                gammas: None,
            }),
            bakry_emery: Some(BakryEmeryData {
                p: vec![vec![ex("1 - 0.5*exp(-x1^2)", 1)]],
                lambda: Some(1.0 / 20.0),
                bounds: Some((0.5, 1.0)),
            }),
            scheme: Scheme::default(),
        },
        ExampleId::CubicUncontrolled1d => ProblemSpec {
            name: id.name().into(),
            nx: 1,
            nu: 1,
            drift: vec![ex("x1 - x1^3", 1)],
            input_map: vec![vec![ex("0", 1)]],
            cost_q: ex("x1^2 + x1^4", 1),
            // ℓ = x² + x⁴ + u² means ½ R u² with R = 2.
            cost_r: vec![2.0],
            controls: BoxDomain::cube(1, -1.0, 1.0),
            domain: BoxDomain::cube(1, -3.0, 3.0),
            epsilon: 1.0,
            lyapunov: Some(LyapunovData {
                q: ex("0.5*x1^2", 1),
                gammas: Some([1.0, 1.0, 1.0, 0.25]),
            }),
            bakry_emery: None,
            scheme: Scheme::default(),
        },
        ExampleId::CaseStudy2d => ProblemSpec {
            name: id.name().into(),
            nx: 2,
            nu: 1,
            drift: vec![ex("x2 - 0.5*x1*x2", 2), ex("-x1", 2)],
            input_map: vec![vec![ex("0", 2)], vec![ex("1", 2)]],
            cost_q: ex("0.25*x1^2 + 3*(x2^2 - 1)^2", 2),
            cost_r: vec![1.0],
            controls: BoxDomain::cube(1, -4.0, 4.0),
            domain: BoxDomain::cube(2, -3.0, 3.0),
            epsilon: 0.2,
            lyapunov: Some(LyapunovData {
                q: ex("0.5*x1^2 + 0.5*x2^2", 2),
                gammas: None,
            }),
            bakry_emery: None,
            // At ε = 0.2 the cell Péclet number on fine grids exceeds one and
            // upwinding would add diffusion comparable to ε itself.
            scheme: Scheme::HIGH_RESOLUTION,
        },
    }
}
