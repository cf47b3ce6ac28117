//! Command dispatch: every run writes its artifacts and a `manifest.json`
//! into one output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::control::{contraction_margin, fixed_point_certificate, margin_sweep, optimize, Problem};
use crate::error::{Error, Result};
use crate::forward::{ensemble_energy, integrate_ensemble, ControlPath};
use crate::io;
use crate::scenario::{Mode, Scenario};
use crate::verify;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Optimize,
    VerifyGradient,
    VerifyInvariants,
    ConvergenceStudy,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Simulate,
        Command::Optimize,
        Command::VerifyGradient,
        Command::VerifyInvariants,
        Command::ConvergenceStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Optimize => "optimize",
            Command::VerifyGradient => "verify-gradient",
            Command::VerifyInvariants => "verify-invariants",
            Command::ConvergenceStudy => "convergence-study",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown command `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub digest: String,
    pub command: Command,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub passed: bool,
    /// First failing check, for verify commands.
    pub failure: Option<String>,
}

struct Outputs<'a> {
    dir: &'a Path,
    artifacts: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.artifacts.push(path);
        Ok(())
    }
}

type Summary = BTreeMap<String, serde_json::Value>;

/// Executes `command` and writes artifacts plus `manifest.json` under `out`.
pub fn run(scenario: &Scenario, command: Command, out: &Path) -> Result<RunRecord> {
    scenario.validate()?;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let problem = scenario.build_problem()?;
    let mut outputs = Outputs {
        dir: out,
        artifacts: Vec::new(),
    };
    let mut summary = Summary::new();
    let failure = match command {
        Command::Simulate => simulate(&problem, &mut outputs, &mut summary)?,
        Command::Optimize => run_optimize(scenario, &problem, &mut outputs, &mut summary)?,
        Command::VerifyGradient => verify_gradient(scenario, &problem, &mut outputs, &mut summary)?,
        Command::VerifyInvariants => verify_invariants(&problem, &mut outputs, &mut summary)?,
        Command::ConvergenceStudy => convergence_study(scenario, &problem, &mut outputs, &mut summary)?,
    };
    let record = RunRecord {
        digest: scenario.digest(),
        command,
        artifacts: outputs.artifacts,
        wall_time_s: start.elapsed().as_secs_f64(),
        summary,
        passed: failure.is_none(),
        failure,
    };
    write_manifest(scenario, &record, out)?;
    Ok(record)
}

fn write_manifest(scenario: &Scenario, record: &RunRecord, out: &Path) -> Result<()> {
    let manifest = json!({
        "command": record.command,
        "digest": record.digest,
        "seed": scenario.seed,
        "scenario": scenario,
        "versions": {
            "fhn-control": env!("CARGO_PKG_VERSION"),
            "trajectory_csv": io::TRAJECTORY_CSV_VERSION,
            "history_csv": io::HISTORY_CSV_VERSION,
            "snapshot": io::SNAPSHOT_VERSION,
        },
        "artifacts": record.artifacts.iter().map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())).collect::<Vec<_>>(),
        "wall_time_s": record.wall_time_s,
        "summary": record.summary,
        "passed": record.passed,
        "failure": record.failure,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

fn put(summary: &mut Summary, key: &str, value: impl Serialize) {
    summary.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
}

fn simulate(problem: &Problem, out: &mut Outputs, summary: &mut Summary) -> Result<Option<String>> {
    let model = &problem.model;
    let u = ControlPath::zeros(&model.grid, &problem.time);
    let ensemble = integrate_ensemble(model, &problem.time, &problem.x0, &u, problem.seed, 0, problem.paths())?;
    out.write("trajectory.csv", &io::trajectory_csv(&ensemble[0]))?;
    let snapshot = out.dir.join("trajectory.bin");
    io::write_snapshot(&snapshot, &ensemble[0])?;
    out.artifacts.push(snapshot);
    if ensemble.len() > 1 {
        let m = ensemble.len() as f64;
        let mean: Vec<_> = (0..=problem.time.steps())
            .map(|n| {
                let mut acc = model.grid.zero_state();
                for t in &ensemble {
                    acc.axpy(1.0 / m, &t.states[n]);
                }
                acc
            })
            .collect();
        out.write("mean.csv", &io::states_csv(&problem.time, &mean))?;
    }
    let energy = ensemble_energy(&model.grid, model.gamma(), &ensemble);
    put(summary, "paths", ensemble.len());
    put(summary, "sup_mean_energy", energy.sup_mean_h_sq);
    put(summary, "mean_sup_energy", energy.mean_sup_h_sq);
    put(summary, "mean_v_integral", energy.mean_v_integral);
    Ok(None)
}

fn run_optimize(scenario: &Scenario, problem: &Problem, out: &mut Outputs, summary: &mut Summary) -> Result<Option<String>> {
    let config = scenario.optimize_config();
    let u0 = ControlPath::zeros(&problem.model.grid, &problem.time);
    let report = optimize(problem, &config, &u0)?;
    out.write("history.csv", &io::history_csv(&report))?;
    out.write("control.csv", &io::control_csv(&problem.time, &report.control))?;
    out.write("trajectory.csv", &io::trajectory_csv(&report.ensemble[0]))?;
    let eval = crate::control::evaluate(problem, &report.control)?;
    out.write("adjoint.csv", &io::adjoint_csv(&problem.time, &eval.adjoints[0]))?;
    let certificate = fixed_point_certificate(problem, &report.control)?;
    put(summary, "converged", report.converged);
    put(summary, "iterations", report.history.len());
    put(summary, "final_residual", report.final_residual());
    put(summary, "certificate", certificate);
    put(summary, "psi", report.history.last().map(|r| r.psi));
    put(summary, "margin", report.margin.margin);
    put(summary, "control_norm", report.control.norm(&problem.model.grid, problem.time.dt()));
    put(summary, "psi_nonincreasing", report.psi_nonincreasing());
    if !report.psi_nonincreasing() {
        return Ok(Some("psi_nonincreasing".into()));
    }
    Ok(None)
}

const GRADIENT_TOLERANCE: f64 = 1e-4;

fn verify_gradient(scenario: &Scenario, problem: &Problem, out: &mut Outputs, summary: &mut Summary) -> Result<Option<String>> {
    let det = Problem {
        model: problem.model.deterministic(),
        ..problem.clone()
    };
    let u = ControlPath::zeros(&det.model.grid, &det.time);
    let check = verify::gradient_check(&det, &u, 5, 1e-5, scenario.seed)?;
    let mut csv = String::from("mode,direction,finite_difference,adjoint,relative_error\n");
    for (i, (fd, an, rel)) in check.rows.iter().enumerate() {
        csv.push_str(&format!("deterministic,{i},{fd},{an},{rel}\n"));
    }
    put(summary, "max_relative_error", check.max_rel_error);
    put(summary, "tolerance", GRADIENT_TOLERANCE);
    if scenario.mode == Mode::Stochastic {
        let stochastic = verify::gradient_check(problem, &u, 5, 1e-5, scenario.seed)?;
        for (i, (fd, an, rel)) in stochastic.rows.iter().enumerate() {
            csv.push_str(&format!("stochastic,{i},{fd},{an},{rel}\n"));
        }
        put(summary, "stochastic_max_relative_error", stochastic.max_rel_error);
    }
    out.write("gradient_check.csv", &csv)?;
    Ok((check.max_rel_error > GRADIENT_TOLERANCE).then(|| "gradient_finite_difference".to_string()))
}

fn verify_invariants(problem: &Problem, out: &mut Outputs, summary: &mut Summary) -> Result<Option<String>> {
    let checks = verify::invariant_suite(problem)?;
    let mut csv = String::from("invariant,value,tolerance,passed\n");
    for c in &checks {
        csv.push_str(&format!("{},{},{},{}\n", c.name, c.value, c.tolerance, c.passed as u8));
        put(summary, c.name, c.value);
    }
    out.write("invariants.csv", &csv)?;
    Ok(checks.iter().find(|c| !c.passed).map(|c| c.name.to_string()))
}

fn convergence_study(scenario: &Scenario, problem: &Problem, out: &mut Outputs, summary: &mut Summary) -> Result<Option<String>> {
    let mut csv = String::from("study,dt,value\n");
    let gap = verify::duality_gap_study(problem, &[4e-3, 2e-3, 1e-3])?;
    for (dt, g) in gap.dts.iter().zip(&gap.gaps) {
        csv.push_str(&format!("duality_gap,{dt},{g}\n"));
    }
    let linear_time = crate::forward::TimeGrid::new(problem.time.horizon(), (problem.time.horizon() / 1e-4).round() as usize)?;
    let linear_gap = verify::duality_gap_at(&verify::linearized(problem), linear_time)?.abs();
    csv.push_str(&format!("linear_duality_gap,{},{linear_gap}\n", linear_time.dt()));

    let noisy = Scenario {
        mode: Mode::Stochastic,
        ..scenario.clone()
    }
    .build_model()?;
    let paths = scenario.ensemble.clamp(1, 200);
    let coarse = (problem.time.steps() / 16).max(4);
    let strong = verify::strong_convergence(&noisy, &problem.x0, problem.time.horizon(), coarse, 4, scenario.seed, paths)?;
    for (dt, e) in strong.dts.iter().zip(&strong.errors) {
        csv.push_str(&format!("strong_self_convergence,{dt},{e}\n"));
    }

    let sweep = margin_sweep(
        &Problem {
            model: problem.model.deterministic(),
            ..problem.clone()
        },
        &scenario.optimize_config(),
        &[0.25, 0.5, 1.0, 2.0, 4.0],
    )?;
    let mut sweep_csv = String::from("horizon,margin,converged,iterations,worst_ratio,geometric\n");
    for p in &sweep.points {
        sweep_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.horizon, p.margin, p.converged as u8, p.iterations, p.worst_ratio, p.geometric as u8
        ));
    }
    out.write("convergence.csv", &csv)?;
    out.write("margin_sweep.csv", &sweep_csv)?;

    put(summary, "duality_gap_slope", gap.slope);
    put(summary, "linear_duality_gap", linear_gap);
    put(summary, "strong_rate", strong.rate);
    put(summary, "empirical_threshold", sweep.threshold);
    put(summary, "margin", contraction_margin(&problem.cost, problem.time.horizon()).margin);

    if (gap.slope - 1.0).abs() > 0.3 {
        return Ok(Some("duality_gap_slope".into()));
    }
    if linear_gap > 1e-8 {
        return Ok(Some("linear_duality_gap".into()));
    }
    if strong.rate < 0.4 {
        return Ok(Some("strong_rate".into()));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("plot".parse::<Command>().is_err());
    }

    #[test]
    fn simulate_trivial_scenario_writes_zeros() {
        let s = Scenario::parse("[initial]\nkind = \"constant\"\nv = 0.0\nw = 0.0\n[time]\nsteps = 20\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let record = run(&s, Command::Simulate, dir.path()).unwrap();
        assert!(record.passed);
        let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        for line in csv.lines().skip(1) {
            assert!(line.split(',').skip(1).all(|x| x.parse::<f64>().unwrap() == 0.0));
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["scenario"]["grid"]["points"], 64);
        assert_eq!(manifest["digest"], s.digest());
    }
}
