//! Subcommand implementations. Every command writes its outputs and a
//! `manifest.json` that replays the run.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use lent_core::bottom_structure::instances;
use lent_core::density_criteria::{monte_carlo_rank_stats, rank_diagnostic, RankReport};
use lent_core::lent_particle::{gamma_generic, gamma_rho_mc, relative_frobenius, SdeFunctional};
use lent_core::poisson_measure::{fmt_f64, simulate_configuration};
use lent_core::scenarios::{
    doleans_on, levy_area_on, mckean_vlasov, zeta, AlphaFn, EmpiricalLaw, LevyAreaCase, McKeanConfig,
    SigmaFn, StableLike,
};
use lent_core::sde::solve_with_flow;
use lent_core::{FormulaTag, GammaMatrix, JumpConfiguration, State, Trajectory, TruncatedLevyModel};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::setup::{flow_gamma, parse_all, Measure, Setup};

/// Agreement required between the two flow formulas.
pub const CROSS_CHECK_TOL: f64 = 1e-10;

pub const EXAMPLES: [&str; 5] = ["doleans", "levy-area-1", "levy-area-2", "mckean", "stable-like"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Gamma,
    RankStats,
    Example(String),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Gamma => "gamma",
            Command::RankStats => "rank-stats",
            Command::Example(_) => "example",
        }
    }
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> lent_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    fn finish(mut self, command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
        let mut outputs = self.files.clone();
        outputs.push("manifest.json".into());
        let manifest = json!({
            "command": command.name(),
            "config": cfg,
            "outputs": outputs,
            "version": lent_core::VERSION,
        });
        self.json("manifest.json", &manifest)
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Numeric table with a header row; values are plain floats, so no field
/// needs quoting.
fn table_csv(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn trajectory_csv(out: &mut Output, traj: &Trajectory) -> Result<(), CliError> {
    out.csv("trajectory.csv", |w| traj.write_csv(w))
}

fn jumps_csv(out: &mut Output, config: &JumpConfiguration) -> Result<(), CliError> {
    out.csv("jumps.csv", |w| config.write_csv(w))
}

fn rank(cfg: &RunConfig, g: &GammaMatrix) -> Result<RankReport, CliError> {
    Ok(rank_diagnostic(&g.matrix, cfg.numerics.rank_rel_tol)?)
}

/// Run `command` with an already validated config, writing into `out`.
pub fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Command::Example(name) = command {
        if !EXAMPLES.contains(&name.as_str()) {
            return Err(CliError::Config(format!(
                "unknown example `{name}` (expected one of {})",
                EXAMPLES.join(", ")
            )));
        }
        cfg.scenario = name.clone();
    }
    let mut output = Output::new(out)?;
    match command {
        Command::Simulate => simulate(&cfg, &mut output)?,
        Command::Gamma => gamma(&cfg, &mut output)?,
        Command::RankStats => rank_stats(&cfg, &mut output)?,
        Command::Example(name) => match name.as_str() {
            "doleans" => example_doleans(&cfg, &mut output)?,
            "levy-area-1" => example_levy_area(&cfg, &mut output, LevyAreaCase::Isotropic)?,
            "levy-area-2" => example_levy_area(&cfg, &mut output, LevyAreaCase::Graph)?,
            "mckean" => example_mckean(&cfg, &mut output)?,
            _ => example_stable_like(&cfg, &mut output)?,
        },
    }
    output.finish(command, &cfg)
}

fn simulate(cfg: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let setup = Setup::from_config(cfg)?;
    let model = setup.model(setup.epsilon)?;
    let config = simulate_configuration(&model, setup.horizon, cfg.seed()?)?;
    let coeffs = setup.coefficients(&model)?;
    let traj = setup.solve(coeffs.as_ref(), &model, &config)?;
    trajectory_csv(out, &traj)
}

fn truncate(config: &JumpConfiguration, t: f64) -> Result<JumpConfiguration, CliError> {
    Ok(JumpConfiguration::new(config.atoms_until(t).to_vec(), t, config.mark_dim())?)
}

fn gamma(cfg: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let tag = FormulaTag::from_str(&cfg.numerics.formula)
        .ok()
        .filter(|t| *t != FormulaTag::Linear)
        .ok_or_else(|| {
            CliError::Config(format!(
                "`numerics.formula`: unknown tag `{}` (theorem9, remark3, generic or rho_mc)",
                cfg.numerics.formula
            ))
        })?;
    let seed = cfg.seed()?;
    let setup = Setup::from_config(cfg)?;
    let model = setup.model(setup.epsilon)?;
    let config = simulate_configuration(&model, setup.horizon, seed)?;
    let coeffs = setup.coefficients(&model)?;
    let traj = setup.solve(coeffs.as_ref(), &model, &config)?;
    let g9 = flow_gamma(FormulaTag::Theorem9, &traj, coeffs.as_ref(), &setup.bs, setup.t)?;
    let g3 = flow_gamma(FormulaTag::Remark3, &traj, coeffs.as_ref(), &setup.bs, setup.t)?;
    let selected = match tag {
        FormulaTag::Theorem9 => g9.clone(),
        FormulaTag::Remark3 => g3.clone(),
        _ => {
            let functional = SdeFunctional {
                coeffs: coeffs.as_ref(),
                model: &model,
                x0: setup.x0.clone(),
                t: setup.t,
                step: setup.step,
            };
            let upto = truncate(&config, setup.t)?;
            if tag == FormulaTag::Generic {
                gamma_generic(&functional, &upto, &setup.bs)?
            } else {
                gamma_rho_mc(&functional, &upto, &setup.bs, cfg.numerics.draws, seed)?
            }
        }
    };
    let flows = relative_frobenius(&g9.matrix, &g3.matrix);
    let closed = setup.closed_form(&config, &model)?;
    let report = json!({
        "scenario": setup.name,
        "seed": seed,
        "epsilon": setup.epsilon,
        "t": setup.t,
        "n_jumps": config.atoms_until(setup.t).len(),
        "gamma": selected.to_json(),
        "rank": rank(cfg, &selected)?,
        "cross_check": {
            "theorem9_vs_remark3": flows,
            "tolerance": CROSS_CHECK_TOL,
            "agree": flows <= CROSS_CHECK_TOL,
            "selected_vs_theorem9": relative_frobenius(&selected.matrix, &g9.matrix),
            "closed_form_distance": closed.as_ref().map(|c| relative_frobenius(&selected.matrix, c)),
        },
    });
    out.json("gamma.json", &report)
}

fn rank_stats(cfg: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let setup = Setup::from_config(cfg)?;
    let epsilons = cfg.numerics.epsilons.clone().unwrap_or_else(|| vec![setup.epsilon]);
    let table = monte_carlo_rank_stats(&setup, cfg.numerics.n_paths, &epsilons, cfg.seed()?)?;
    out.csv("rank_table.csv", |w| table.write_csv(w))?;
    out.json("summary.json", &table)
}

fn example_doleans(cfg: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let setup = Setup::from_config(cfg)?;
    let model = setup.model(setup.epsilon)?;
    let config = simulate_configuration(&model, setup.t, seed)?;
    let r = doleans_on(&model, &config, setup.t)?;
    let report = json!({
        "example": "doleans",
        "seed": seed,
        "epsilon": setup.epsilon,
        "t": setup.t,
        "n_jumps": config.len(),
        "y": r.y,
        "doleans_dade": r.e,
        "gamma": r.pipeline.to_json(),
        "closed_form": matrix_rows(&r.closed_form),
        "relative_distance": r.pipeline.relative_distance(&r.closed_form),
        "rank": rank(cfg, &r.pipeline)?,
    });
    out.json("gamma.json", &report)?;
    trajectory_csv(out, &r.trajectory)?;
    jumps_csv(out, &config)
}

fn example_levy_area(cfg: &RunConfig, out: &mut Output, case: LevyAreaCase) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let setup = Setup::from_config(cfg)?;
    let model = setup.model(setup.epsilon)?;
    let config = simulate_configuration(&model, setup.t, seed)?;
    let r = levy_area_on(&model, &config, setup.t, case)?;
    let report = json!({
        "example": cfg.scenario,
        "seed": seed,
        "epsilon": setup.epsilon,
        "t": setup.t,
        "n_jumps": config.len(),
        "state": r.v.iter().copied().collect::<Vec<f64>>(),
        "span_dim": r.span_dim,
        "gamma": r.pipeline.to_json(),
        "closed_form": matrix_rows(&r.closed_form),
        "relative_distance": r.pipeline.relative_distance(&r.closed_form),
        "rank": rank(cfg, &r.pipeline)?,
    });
    out.json("gamma.json", &report)?;
    trajectory_csv(out, &r.trajectory)?;
    jumps_csv(out, &config)
}

fn example_mckean(cfg: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let mk = &cfg.mckean;
    let d = mk.center.len();
    if d == 0 || !mk.sigma.len().is_multiple_of(d) || mk.sigma.is_empty() {
        return Err(CliError::Config(format!(
            "`mckean.sigma`: needs d·r entries with d = {d} (the length of `mckean.center`)"
        )));
    }
    let r = mk.sigma.len() / d;
    let mut vars: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    vars.extend((1..=d).map(|i| format!("m{i}")));
    let entries = Arc::new(parse_all("mckean.sigma", &mk.sigma, &vars)?);
    let sigma: SigmaFn = Arc::new(move |x: &State, law: &EmpiricalLaw| {
        let m = law.mean();
        let p: Vec<f64> = x.iter().chain(m.iter()).copied().collect();
        DMatrix::from_row_iterator(d, r, entries.iter().map(|e| e.eval_point(&p)))
    });
    let horizon = cfg.numerics.horizon.unwrap_or(1.0);
    let measure = Measure::power_law(cfg, r)?;
    let epsilon = measure.epsilon(cfg, horizon)?;
    let model = TruncatedLevyModel::new(measure.measure, epsilon)?;
    let bs = match &cfg.structure.name {
        Some(name) => instances::by_name(name, r)?,
        None => instances::isotropic(r),
    };
    let mcfg = McKeanConfig {
        sigma,
        initial: McKeanConfig::gaussian_initial(DVector::from_column_slice(&mk.center), mk.spread),
        state_dim: d,
        particles: mk.particles,
        picard_iters: mk.picard_iters,
        horizon,
        step: cfg.numerics.step.unwrap_or(0.05),
        tolerance: mk.tolerance,
    };
    let res = mckean_vlasov(&mcfg, &model, &bs, seed)?;
    let report = json!({
        "example": "mckean",
        "seed": seed,
        "epsilon": epsilon,
        "t": horizon,
        "particles": mk.particles,
        "picard_residuals": res.picard_residuals,
        "converged": res.converged,
        "warning": res.warning,
        "lipschitz_estimate": res.lipschitz_estimate,
        "aa_star_at_start": res.aa_star_at_start,
        "gamma": res.gamma.to_json(),
        "rank": rank(cfg, &res.gamma)?,
    });
    out.json("gamma.json", &report)?;
    let header: Vec<String> = (1..=d).map(|i| format!("X_{i}")).collect();
    let bytes = table_csv(&header, res.samples.iter().map(|s| s.iter().copied().collect()));
    out.write("samples.csv", &bytes)
}

fn example_stable_like(cfg: &RunConfig, out: &mut Output) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let sl = &cfg.stable_like;
    let d = sl.dim;
    let vars: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    let alpha_expr = parse_all("stable_like.alpha", std::slice::from_ref(&sl.alpha), &vars)?.remove(0);
    let f_expr = parse_all("stable_like.f", std::slice::from_ref(&sl.f), &vars)?.remove(0);
    let alpha: AlphaFn = Arc::new(move |x: &State| alpha_expr.eval_point(x.as_slice()));
    let band = (sl.band[0], sl.band[1]);
    let x = DVector::from_column_slice(&sl.x.clone().unwrap_or_else(|| vec![0.0; d]));
    let process = StableLike::new(alpha.clone(), band, sl.u0, d, sl.z_max)
        .map_err(|e| CliError::Config(format!("`stable_like`: {e}")))?;
    let f = move |y: &State| f_expr.eval_point(y.as_slice());
    let check = lent_core::scenarios::stable_like_generator_check(&process, &x, &f, sl.h, sl.n_paths, seed)?;
    let alpha_x = process.alpha_at(&x)?;

    let path_process = StableLike::new(alpha, band, sl.u0, d, sl.path_z_max)?;
    let horizon = cfg.numerics.horizon.unwrap_or(1.0);
    let model = TruncatedLevyModel::new(Arc::new(path_process.measure()?), 1e-12)?;
    let config = simulate_configuration(&model, horizon, seed)?;
    let step = cfg.numerics.step.unwrap_or(0.05);
    let inverse = lent_core::InverseMethod::DirectSde;
    let traj = solve_with_flow(&path_process, &model, &config, &x, horizon, step, inverse)?;
    for node in &traj.nodes {
        path_process.alpha_at(&node.x)?;
    }
    let bs = instances::isotropic(d);
    let g = flow_gamma(FormulaTag::Theorem9, &traj, &path_process, &bs, horizon)?;
    let report = json!({
        "example": "stable-like",
        "seed": seed,
        "x": x.iter().copied().collect::<Vec<f64>>(),
        "alpha_at_x": alpha_x,
        "zeta": zeta(alpha_x, d)?,
        "generator_check": check,
        "t": horizon,
        "n_jumps": config.len(),
        "gamma": g.to_json(),
        "rank": rank(cfg, &g)?,
    });
    out.json("gamma.json", &report)?;
    trajectory_csv(out, &traj)?;
    jumps_csv(out, &config)
}
