use std::path::Path;

use serde_json::{json, Value};

use otdp::analysis::{self, FeedbackLaw};
use otdp::conjugate::DualCost;
use otdp::dp::{self, ErgodicOptions};
use otdp::fpk::{self, DensityState};
use otdp::io::{self, GridFieldFile};
use otdp::model::{load_example, ExampleId, ProblemSpec};
use otdp::operators::{audit_random_steps, DiscreteSystem, CONSERVATION_TOLERANCE, POSITIVITY_SLACK};
use otdp::sde::{self, SimConfig};
use otdp::Grid;

use crate::manifest::{sha256_hex, Run};
use crate::{Check, CliError, Mode, SimulateArgs, SolveArgs, Source, VerifyArgs};

struct Loaded {
    spec: ProblemSpec,
    source: String,
}

impl Loaded {
    fn describe(&self) -> Value {
        json!({
            "source": self.source,
            "name": self.spec.name,
            "sha256": sha256_hex(self.spec.to_toml_string().as_bytes()),
        })
    }
}

fn load(arg: &str) -> Result<Loaded, CliError> {
    if let Some(name) = arg.strip_prefix("builtin:") {
        let id = ExampleId::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = ExampleId::ALL.iter().map(|e| e.name()).collect();
            CliError::Config(format!("unknown built-in '{name}' (known: {})", known.join(", ")))
        })?;
        return Ok(Loaded { spec: load_example(id), source: arg.into() });
    }
    let path = Path::new(arg);
    let file = if path.is_dir() {
        path.join("config.toml")
    } else if !path.exists() && Path::new(&format!("{arg}.toml")).is_file() {
        format!("{arg}.toml").into()
    } else {
        path.to_path_buf()
    };
    if !file.is_file() {
        return Err(CliError::Config(format!("config not found: {}", file.display())));
    }
    let spec = ProblemSpec::from_file(&file)
        .map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
    let report = otdp::model::validate_spec(&spec);
    if !report.is_valid() {
        return Err(CliError::Config(format!(
            "{}: {}",
            file.display(),
            report.violations.join("; ")
        )));
    }
    Ok(Loaded { spec, source: file.display().to_string() })
}

fn grid_for(spec: &ProblemSpec, per_axis: Option<usize>) -> Result<Grid, CliError> {
    let m = per_axis.unwrap_or(if spec.nx == 1 { 201 } else { 60 });
    Ok(Grid::uniform(&spec.domain, m)?)
}

fn grid_json(g: &Grid) -> Value {
    json!({ "counts": g.counts(), "lower": g.domain().lower, "upper": g.domain().upper })
}

fn input_names(nu: usize) -> Vec<String> {
    (1..=nu).map(|c| format!("mu{c}")).collect()
}

fn field_file(g: &Grid, names: &[String], values: Vec<f64>) -> Result<Vec<u8>, CliError> {
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(GridFieldFile::new(g, &refs, values)?.to_csv()?.into_bytes())
}

fn common_params(run: &mut Run, src: &Source, g: &Grid, sys: &DiscreteSystem) {
    run.param("grid", grid_json(g));
    run.param("h", json!(src.h));
    run.param("time_per_step", json!(sys.time_per_step()));
    run.param("shift", json!(sys.shift()));
}

pub fn solve(a: &SolveArgs) -> Result<(), CliError> {
    let mut run = Run::new(&a.src.out, "solve")?;
    let cfg = load(&a.src.config)?;
    let p = &cfg.spec;
    run.lap("parse");
    let g = grid_for(p, a.src.grid)?;
    let sys = DiscreteSystem::build(p, &g, a.src.h)?;
    let dc = DualCost::new(p, &g)?;
    let t_assemble = run.lap("assemble");
    common_params(&mut run, &a.src, &g, &sys);
    println!("{}: {} nodes, assembled in {t_assemble:.1} ms", p.name, g.len());
    let names = input_names(p.nu);

    match a.mode {
        Mode::Finite => {
            let sol = dp::solve_finite_horizon(&sys, &dc, a.steps)?;
            let t = run.lap("dp");
            let uniform = DensityState::from_density(&g, |_| 1.0)?;
            let cost = sol.cost(&sys, &uniform.p);
            let horizon = a.steps as f64 * sys.time_per_step();
            run.param("mode", json!("finite"));
            run.param("steps", json!(a.steps));
            run.result("cost_from_uniform", json!(cost));
            run.result("horizon", json!(horizon));
            run.write("v_0.csv", &field_file(&g, &["v".into()], sol.values(&sys))?)?;
            run.write("mu_0.csv", &field_file(&g, &names, sol.schedule[0].clone())?)?;
            println!("J(T) from the uniform density = {cost:.6} over T = {horizon:.4} ({t:.1} ms)");
            println!("average cost J(T)/T = {:.6}", cost / horizon);
        }
        Mode::Ergodic => {
            let opts = ErgodicOptions { tol: a.tol, max_iter: a.max_iter, ..ErgodicOptions::default() };
            run.param("mode", json!("ergodic"));
            run.param("tol", json!(opts.tol));
            run.param("offset_tol", json!(opts.offset_tol));
            run.param("max_iter", json!(opts.max_iter));
            let sol = dp::solve_ergodic(&sys, &dc, &opts)?;
            let t_dp = run.lap("dp");
            run.param("anchor", json!(sol.anchor));
            let ss = fpk::steady_state(&sys, &sol.mu_inf)?;
            let t_ss = run.lap("steady_state");
            let primal = fpk::primal_cost(&dc, &sol.mu_inf, &ss.p);
            let report = analysis::duality_report(&sol, primal);
            println!("ell_inf = {:.6}  ({} iterations, {t_dp:.1} ms)", sol.ell_inf, sol.iterations);
            println!("primal  = {primal:.6}  (steady state {t_ss:.1} ms, relative gap {:.2e})", report.relative_gap);
            run.result("ell_inf", json!(sol.ell_inf));
            run.result("iterations", json!(sol.iterations));
            run.result("residual", json!(sol.residual));
            run.result("duality", json!(report));

            run.write("mu_inf.csv", &field_file(&g, &names, sol.mu_inf.clone())?)?;
            // Anchored values next to the variant with zero mean under ρ∞.
            let centered = sol.centered_values(&ss.p);
            let v: Vec<f64> = sol.v_inf.iter().zip(&centered).flat_map(|(a, b)| [*a, *b]).collect();
            run.write("v_inf.csv", &field_file(&g, &["v".into(), "v_centered".into()], v)?)?;
            run.write("rho_inf.csv", &field_file(&g, &["rho".into()], ss.density(&g))?)?;
            run.write("trace.csv", io::trace_csv(&sol.trace).as_bytes())?;

            if a.energy_steps > 0 {
                let p0 = DensityState::from_density(&g, |_| 1.0)?;
                let stride = a.energy_steps.max(1);
                let prop = fpk::propagate(&sys, &sol.mu_inf, &p0, a.energy_steps, &ss.p, stride)?;
                run.lap("energy");
                let monotone = prop.energy.is_nonincreasing(1e-10);
                let gamma = fpk::estimate_decay_rate(&prop.energy, 0.5).ok();
                run.result("energy_nonincreasing", json!(monotone));
                run.result("gamma_hat", json!(gamma));
                run.write("energy.csv", io::energy_csv(&prop.energy).as_bytes())?;
                match gamma {
                    Some(g) => println!("energy decay rate = {g:.4} (nonincreasing: {monotone})"),
                    None => println!("energy decayed below resolution (nonincreasing: {monotone})"),
                }
            }
        }
    }
    run.finish("manifest.json", cfg.describe())
}

/// Reads a feedback table and checks it against the problem.
fn read_feedback(p: &ProblemSpec, path: &Path) -> Result<(Grid, Vec<f64>), CliError> {
    let f = GridFieldFile::read(path)
        .map_err(|e| match e {
            otdp::Error::Io(io) => CliError::Config(format!("{}: {io}", path.display())),
            other => CliError::Incompatible(format!("{}: {other}", path.display())),
        })?;
    let g = f.grid()?;
    let same_box = g.dim() == p.nx && {
        let probe = Grid::new(&p.domain, g.counts())?;
        f.matches(&probe)
    };
    if !same_box || f.fields.len() != p.nu {
        return Err(CliError::Incompatible(format!(
            "{}: grid or field count does not match problem '{}'",
            path.display(),
            p.name
        )));
    }
    Ok((g, f.values))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut run = Run::new(&a.out, "simulate")?;
    let cfg = load(&a.config)?;
    let p = &cfg.spec;
    let (g, table) = read_feedback(p, &a.feedback)?;
    run.param("grid", grid_json(&g));
    run.param("feedback", json!(a.feedback.display().to_string()));
    run.param("dt", json!(a.dt));
    run.lap("parse");
    if a.deterministic {
        let horizon = a.horizon.unwrap_or(100.0);
        let stride = a.stride.unwrap_or(20);
        let starts = sde::default_initial_conditions(&p.domain);
        let paths = sde::simulate_deterministic(p, &g, &table, &starts, horizon, a.dt, stride)?;
        run.lap("simulate");
        run.param("horizon", json!(horizon));
        run.param("stride", json!(stride));
        run.param("initial_conditions", json!(starts));
        run.write("deterministic_paths.csv", io::paths_csv(&paths, p.nx).as_bytes())?;
        println!("{} noiseless paths over T = {horizon}", paths.len());
    } else {
        let sim = SimConfig {
            trajectories: a.traj,
            dt: a.dt,
            horizon: a.horizon.unwrap_or(2000.0),
            seed: a.seed,
            burn_in: a.burn_in,
            initial: None,
            path_stride: a.stride,
        };
        for (k, v) in [
            ("trajectories", json!(sim.trajectories)),
            ("horizon", json!(sim.horizon)),
            ("seed", json!(sim.seed)),
            ("burn_in", json!(sim.burn_in)),
            ("stride", json!(sim.path_stride)),
        ] {
            run.param(k, v);
        }
        let r = sde::simulate(p, &g, &table, &sim)?;
        let t = run.lap("simulate");
        println!("time-average cost = {:.6} ± {:.6} (SE, {} trajectories, {t:.0} ms)", r.mean, r.std_error, a.traj);
        run.result("mean", json!(r.mean));
        run.result("std_error", json!(r.std_error));
        run.write_json(
            "sim_summary.json",
            &json!({ "mean": r.mean, "std_error": r.std_error, "averages": r.averages }),
        )?;
        if !r.paths.is_empty() {
            run.write("paths.csv", io::paths_csv(&r.paths, p.nx).as_bytes())?;
        }
    }
    run.finish("simulate_manifest.json", cfg.describe())
}

pub fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let mut run = Run::new(&a.src.out, "verify")?;
    let cfg = load(&a.src.config)?;
    let p = &cfg.spec;
    let g = grid_for(p, a.src.grid)?;
    run.param("grid", grid_json(&g));
    let mu = match &a.feedback {
        Some(path) => {
            let (fg, table) = read_feedback(p, path)?;
            FeedbackLaw::table(&fg, &table, p.nu)?
        }
        None => FeedbackLaw::cheapest(p),
    };
    let (name, passed, report, summary) = match a.check {
        Check::Hasminskii => {
            if p.lyapunov.is_none() {
                return Err(CliError::Config(format!("problem '{}' has no lyapunov_Q", p.name)));
            }
            let gammas = match a.gammas.as_deref() {
                None => None,
                Some(&[g1, g2, g3, g4]) => Some([g1, g2, g3, g4]),
                Some(v) => return Err(CliError::Config(format!("--gammas needs 4 values, got {}", v.len()))),
            };
            let c = analysis::check_hasminskii(p, &mu, &g, gammas)?;
            let summary = format!(
                "γ = ({}, {}, {}, {}), margin {:.4e}, {} violating nodes",
                c.gamma1,
                c.gamma2,
                c.gamma3,
                c.gamma4,
                c.margin,
                c.violations().len()
            );
            ("hasminskii", c.passed, json!(c), summary)
        }
        Check::BakryEmery => {
            if p.bakry_emery.is_none() {
                return Err(CliError::Config(format!("problem '{}' has no be_weight_P", p.name)));
            }
            let c = analysis::check_bakry_emery(p, &mu, &g, a.lambda)?;
            let summary = format!(
                "λ = {}, λ̲ = {}, λ̄ = {}, γ = {}, margin {:.4e}",
                c.lambda, c.lambda_lower, c.lambda_upper, c.gamma, c.margin
            );
            ("bakry_emery", c.passed, json!(c), summary)
        }
        Check::Duality => {
            let sys = DiscreteSystem::build(p, &g, a.src.h)?;
            let dc = DualCost::new(p, &g)?;
            let sol = dp::solve_ergodic(&sys, &dc, &ErgodicOptions { tol: a.tol, ..ErgodicOptions::default() })?;
            let ss = fpk::steady_state(&sys, &sol.mu_inf)?;
            let r = analysis::duality_report(&sol, fpk::primal_cost(&dc, &sol.mu_inf, &ss.p));
            let summary = format!(
                "dual {:.6}, primal {:.6}, relative gap {:.3e}",
                r.dual, r.primal, r.relative_gap
            );
            ("duality", r.relative_gap <= a.gap_tol, json!(r), summary)
        }
        Check::Conservation => {
            let sys = DiscreteSystem::build(p, &g, a.src.h)?;
            let (ra, rb) = sys.conservation_residuals();
            let audit = audit_random_steps(&sys, 1000, 0)?;
            let ok = ra <= CONSERVATION_TOLERANCE
                && rb <= CONSERVATION_TOLERANCE
                && audit.max_mass_drift <= CONSERVATION_TOLERANCE
                && audit.min_component >= -POSITIVITY_SLACK;
            let summary = format!(
                "residuals {ra:.2e} / {rb:.2e}, worst drift {:.2e}, min component {:.2e}",
                audit.max_mass_drift, audit.min_component
            );
            let report = json!({ "residual_a": ra, "residual_b": rb, "random_steps": audit });
            ("conservation", ok, report, summary)
        }
    };
    run.lap(name);
    run.result("passed", json!(passed));
    run.write_json(&format!("verify_{name}.json"), &json!({ "check": name, "passed": passed, "report": report }))?;
    run.finish(&format!("verify_{name}_manifest.json"), cfg.describe())?;
    println!("{name}: {} — {summary}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(CliError::Verification(summary))
    }
}
