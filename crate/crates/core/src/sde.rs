//! Reflected Euler-Maruyama simulation of the closed loop.
//!
//! Each step is `X' = X + F[μ](X) dt + √(2ε dt) ξ` followed by mirroring
//! into the box, with `μ` interpolated multilinearly from a node table.
//! Trajectory `k` draws from ChaCha8 stream `k` of the configured seed, so
//! results do not depend on how trajectories are scheduled over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::grid::Grid;
use crate::model::{BoxDomain, ProblemSpec};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub trajectories: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Fraction of the horizon discarded before costs are averaged.
    pub burn_in: f64,
    /// Starting point of every trajectory; the box center if `None`.
    pub initial: Option<Vec<f64>>,
    /// Keep every `stride`-th state of each trajectory; `None` keeps nothing.
    pub path_stride: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trajectories: 64,
            dt: 0.005,
            horizon: 2000.0,
            seed: 0,
            burn_in: 0.2,
            initial: None,
            path_stride: None,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) {
            return Err(Error::InvalidParameter(format!(
                "horizon {} is shorter than one step",
                self.horizon
            )));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::InvalidParameter(format!(
                "burn-in fraction must lie in [0, 1), got {}",
                self.burn_in
            )));
        }
        if self.trajectories == 0 {
            return Err(Error::InvalidParameter("need at least one trajectory".into()));
        }
        if self.path_stride == Some(0) {
            return Err(Error::InvalidParameter("path stride must be positive".into()));
        }
        Ok(())
    }
}

/// Thinned samples of one trajectory; `states` is time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub trajectory: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
}

impl Path {
    pub fn dim(&self) -> usize {
        if self.times.is_empty() {
            0
        } else {
            self.states.len() / self.times.len()
        }
    }

    pub fn state(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.states[k * d..(k + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    /// Time-average stage cost of each trajectory after burn-in.
    pub averages: Vec<f64>,
    pub mean: f64,
    /// Standard error of `mean` across trajectories.
    pub std_error: f64,
    pub paths: Vec<Path>,
}

/// Mirrors `x` into `[lo, hi]`; repeated reflection folded into one modulo.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&x) {
        return x;
    }
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    let y = (x - lo).rem_euclid(2.0 * width);
    let r = if y > width { 2.0 * width - y } else { y };
    (lo + r).clamp(lo, hi)
}

/// Node-table feedback with split channels and reusable lookup buffers.
struct Lookup<'a> {
    grid: &'a Grid,
    channels: Vec<Vec<f64>>,
    base: Vec<usize>,
    frac: Vec<f64>,
}

impl<'a> Lookup<'a> {
    fn new(grid: &'a Grid, channels: &[Vec<f64>]) -> Self {
        Lookup {
            grid,
            channels: channels.to_vec(),
            base: vec![0; grid.dim()],
            frac: vec![0.0; grid.dim()],
        }
    }

    fn eval(&mut self, x: &[f64], u: &mut [f64]) -> Result<()> {
        self.grid.locate(x, &mut self.base, &mut self.frac)?;
        for (o, ch) in u.iter_mut().zip(&self.channels) {
            *o = self.grid.blend(ch, &self.base, &self.frac);
        }
        Ok(())
    }
}

fn split_channels(p: &ProblemSpec, g: &Grid, feedback: &[f64]) -> Result<Vec<Vec<f64>>> {
    if g.dim() != p.nx {
        return Err(Error::Incompatible(format!(
            "grid is {}-dimensional, problem has {} states",
            g.dim(),
            p.nx
        )));
    }
    if feedback.len() != g.len() * p.nu {
        return Err(Error::Incompatible(format!(
            "feedback table has {} entries, expected {}",
            feedback.len(),
            g.len() * p.nu
        )));
    }
    Ok((0..p.nu)
        .map(|c| feedback.iter().skip(c).step_by(p.nu).copied().collect())
        .collect())
}

struct Rollout {
    average: f64,
    path: Option<Path>,
}

#[allow(clippy::too_many_arguments)]
fn rollout(
    p: &ProblemSpec,
    lookup: &mut Lookup<'_>,
    x0: &[f64],
    steps: usize,
    burn: usize,
    dt: f64,
    noise: f64,
    rng: Option<&mut ChaCha8Rng>,
    stride: Option<usize>,
    id: usize,
) -> Result<Rollout> {
    let dom = &p.domain;
    let n = p.nx;
    let mut x = x0.to_vec();
    let mut u = vec![0.0; p.nu];
    let mut f = vec![0.0; n];
    let mut path = stride.map(|_| Path { trajectory: id, times: vec![0.0], states: x.clone() });
    let mut total = 0.0;
    let mut rng = rng;
    for k in 0..steps {
        lookup.eval(&x, &mut u)?;
        if k >= burn {
            total += p.stage_cost(&x, &u)?;
        }
        p.closed_loop_at(&x, &u, &mut f)?;
        for a in 0..n {
            let mut step = f[a] * dt;
            if let Some(r) = rng.as_deref_mut() {
                let xi: f64 = StandardNormal.sample(r);
                step += noise * xi;
            }
            x[a] = reflect(x[a] + step, dom.lower[a], dom.upper[a]);
        }
        if let (Some(s), Some(pa)) = (stride, path.as_mut()) {
            if (k + 1) % s == 0 {
                pa.times.push((k + 1) as f64 * dt);
                pa.states.extend_from_slice(&x);
            }
        }
    }
    Ok(Rollout { average: total / (steps - burn).max(1) as f64, path })
}

fn start_point(p: &ProblemSpec, x0: &[f64]) -> Result<()> {
    if x0.len() != p.nx || !p.domain.contains(x0) {
        return Err(Error::OutOfDomain(x0.to_vec()));
    }
    Ok(())
}

/// Monte-Carlo estimate of the ergodic cost under a tabulated feedback.
pub fn simulate(p: &ProblemSpec, g: &Grid, feedback: &[f64], cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let channels = split_channels(p, g, feedback)?;
    let x0 = cfg.initial.clone().unwrap_or_else(|| p.domain.center());
    start_point(p, &x0)?;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let burn = ((cfg.burn_in * steps as f64).floor() as usize).min(steps - 1);
    let noise = (2.0 * p.epsilon * cfg.dt).sqrt();
    let runs: Vec<Rollout> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64);
            let mut lookup = Lookup::new(g, &channels);
            rollout(p, &mut lookup, &x0, steps, burn, cfg.dt, noise, Some(&mut rng), cfg.path_stride, id)
        })
        .collect::<Result<_>>()?;
    let averages: Vec<f64> = runs.iter().map(|r| r.average).collect();
    let (mean, std_error) = mean_and_error(&averages);
    Ok(SimResult {
        averages,
        mean,
        std_error,
        paths: runs.into_iter().filter_map(|r| r.path).collect(),
    })
}

/// Sample mean and its standard error; the error is zero for one sample.
pub fn mean_and_error(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Noiseless rollouts from the given starting points, for attractor plots.
pub fn simulate_deterministic(
    p: &ProblemSpec,
    g: &Grid,
    feedback: &[f64],
    initial: &[Vec<f64>],
    horizon: f64,
    dt: f64,
    stride: usize,
) -> Result<Vec<Path>> {
    let cfg = SimConfig {
        trajectories: initial.len().max(1),
        dt,
        horizon,
        burn_in: 0.0,
        path_stride: Some(stride),
        ..SimConfig::default()
    };
    cfg.validate()?;
    let channels = split_channels(p, g, feedback)?;
    let steps = (horizon / dt).round() as usize;
    initial
        .par_iter()
        .enumerate()
        .map(|(id, x0)| {
            start_point(p, x0)?;
            let mut lookup = Lookup::new(g, &channels);
            let run = rollout(p, &mut lookup, x0, steps, 0, dt, 0.0, None, Some(stride), id)?;
            Ok(run.path.expect("stride is set"))
        })
        .collect()
}

/// Eight starting points for noiseless rollouts.
///
/// In two or more dimensions they sit on a ring of 80% of the half widths
/// in the first two coordinates; in one dimension they are spread evenly
/// over the central 80% of the interval.
pub fn default_initial_conditions(domain: &BoxDomain) -> Vec<Vec<f64>> {
    let c = domain.center();
    let r: Vec<f64> = (0..domain.dim())
        .map(|a| 0.8 * 0.5 * (domain.upper[a] - domain.lower[a]))
        .collect();
    (0..8)
        .map(|k| {
            let mut x = c.clone();
            if domain.dim() == 1 {
                x[0] += r[0] * (-1.0 + 2.0 * k as f64 / 7.0);
            } else {
                let theta = std::f64::consts::FRAC_PI_4 * k as f64;
                x[0] += r[0] * theta.cos();
                x[1] += r[1] * theta.sin();
            }
            x
        })
        .collect()
}
