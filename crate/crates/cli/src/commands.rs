use std::fs;
use std::path::Path;

use crossdiff::experiments::{
    astar_sweep, optimize_astar, run_convergence, ExperimentError, MeshSpec, ProfileKind,
    Reference, TestCase,
};
use crossdiff::fields::SpeciesField;
use crossdiff::reaction::{validate, Check, MassAction3};
use crossdiff::solver::{SolverError, StepReport};
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::output::{self, Diagnostics, SCHEMA_VERSION};
use crate::CliError;

const DRIFT_TOL: f64 = 1e-10;
const ENTROPY_TOL: f64 = 1e-10;

/// Running verdicts over the reported steps.
#[derive(Debug)]
struct Checks {
    reactive: bool,
    initial_masses: Vec<f64>,
    last_entropy: Option<f64>,
    max_defect: f64,
    max_drift: f64,
    max_entropy_increase: f64,
    min_value: f64,
}

impl Checks {
    fn new(reactive: bool) -> Self {
        Self {
            reactive,
            initial_masses: Vec::new(),
            last_entropy: None,
            max_defect: 0.0,
            max_drift: 0.0,
            max_entropy_increase: f64::NEG_INFINITY,
            min_value: f64::INFINITY,
        }
    }

    /// Relative entropy when a reaction sets the equilibrium, `E_T` otherwise.
    fn lyapunov(&self, r: &StepReport) -> f64 {
        if self.reactive {
            r.relative_entropy.unwrap_or(r.entropy)
        } else {
            r.entropy
        }
    }

    fn observe(&mut self, u: &SpeciesField, r: &StepReport) {
        let masses = if self.reactive {
            vec![r.masses.iter().sum()]
        } else {
            r.masses.clone()
        };
        if r.step == 0 {
            self.initial_masses = masses;
        } else {
            for (m, m0) in masses.iter().zip(&self.initial_masses) {
                self.max_drift = self
                    .max_drift
                    .max((m - m0).abs() / m0.abs().max(f64::MIN_POSITIVE));
            }
        }
        let e = self.lyapunov(r);
        if let Some(prev) = self.last_entropy {
            self.max_entropy_increase = self.max_entropy_increase.max(e - prev);
        }
        self.last_entropy = Some(e);
        self.max_defect = self.max_defect.max(u.simplex_defect());
        if r.step > 0 {
            self.min_value = self.min_value.min(u.min_value());
        }
    }

    fn verdicts(&self) -> Value {
        json!({
            "simplex_exact": self.max_defect == 0.0,
            "mass_conserved": self.max_drift <= DRIFT_TOL,
            "entropy_nonincreasing": self.max_entropy_increase <= ENTROPY_TOL,
            "positive": self.min_value > 0.0,
            "max_simplex_defect": self.max_defect,
            "max_relative_mass_drift": self.max_drift,
            "max_entropy_increase": finite_or_null(self.max_entropy_increase),
            "min_value": finite_or_null(self.min_value),
        })
    }

    fn passed(&self) -> bool {
        self.max_defect == 0.0
            && self.max_drift <= DRIFT_TOL
            && self.max_entropy_increase <= ENTROPY_TOL
            && self.min_value > 0.0
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn case_json(c: &TestCase) -> Value {
    let mesh = match c.mesh {
        MeshSpec::Interval { lo, hi, cells } => json!({"lo": [lo], "hi": [hi], "cells": [cells]}),
        MeshSpec::Rectangle { lo, hi, nx, ny } => json!({"lo": lo, "hi": hi, "cells": [nx, ny]}),
    };
    json!({
        "name": c.name,
        "mesh": mesh,
        "final_time": c.final_time,
        "dt": c.dt,
        "matrix": c.matrix,
        "astar": format!("{:?}", c.astar),
        "profile": format!("{:?}", c.profile),
        "reaction": c.reaction.map(|r| json!({"forward": r.forward, "backward": r.backward})),
    })
}

fn header(command: &str, cfg: &Resolved) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("command".into(), json!(command));
    m.insert("case".into(), case_json(&cfg.case));
    m.insert("reproducible".into(), json!(cfg.reproducible));
    m
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn run(cfg: &Resolved) -> Result<Value, CliError> {
    let p = cfg.case.prepare()?;
    create_out(&cfg.out)?;
    let species = p.matrix.species_count();
    let mut diag = Diagnostics::create(&cfg.out.join("diagnostics.csv"), species)?;
    let last = p.grid.num_steps();
    let mut checks = Checks::new(p.reaction.is_some());
    let mut io_error: Option<std::io::Error> = None;
    let mut newton_total = 0;
    let mut continuation_steps = 0;
    let mut snapshots = 0;
    let result = p.run(cfg.solver(), &mut |u, r| {
        checks.observe(u, r);
        newton_total += r.newton_iterations;
        continuation_steps += usize::from(r.path.len() > 1);
        if io_error.is_some() {
            return;
        }
        let snap = r.step == last
            || (cfg.stride == 0 && r.step == 0)
            || (cfg.stride > 0 && r.step % cfg.stride == 0);
        let res = diag.push(r).and_then(|_| {
            if snap {
                output::write_snapshot(&cfg.out, r.step, u, &p.mesh, r.time)
            } else {
                Ok(())
            }
        });
        snapshots += usize::from(snap);
        if let Err(e) = res {
            io_error = Some(e);
        }
    });
    diag.finish()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let mut s = header("run", cfg);
    s.insert("steps".into(), json!(last));
    s.insert("snapshots".into(), json!(snapshots));
    s.insert("newton_iterations".into(), json!(newton_total));
    s.insert("steps_with_continuation".into(), json!(continuation_steps));
    s.insert("checks".into(), checks.verdicts());
    let status = match &result {
        Ok(sim) => {
            let fin = sim.reports.last();
            s.insert("final_time".into(), json!(fin.map_or(0.0, |r| r.time)));
            s.insert("final_entropy".into(), json!(fin.map(|r| r.entropy)));
            s.insert(
                "final_relative_entropy".into(),
                json!(fin.and_then(|r| r.relative_entropy)),
            );
            if checks.passed() {
                "ok"
            } else {
                "checks_failed"
            }
        }
        Err(ExperimentError::Solver(SolverError::Stall { step, time, .. })) => {
            s.insert("stall".into(), json!({"step": step, "time": time}));
            "stalled"
        }
        Err(_) => "failed",
    };
    s.insert("status".into(), json!(status));
    let summary = Value::Object(s);
    output::write_json(&cfg.out.join("summary.json"), &summary)?;
    result?;
    if !checks.passed() {
        return Err(CliError::Failed(format!(
            "invariant checks failed: {}",
            summary["checks"]
        )));
    }
    Ok(summary)
}

fn default_reference(case: &TestCase) -> Option<Reference> {
    match case.reference {
        Reference::None => None,
        r => Some(r),
    }
}

pub fn convergence(cfg: &Resolved) -> Result<Value, CliError> {
    let c = &cfg.file.convergence;
    let sizes = c
        .sizes
        .clone()
        .unwrap_or_else(|| (5..=9).map(|k| 1 << k).collect());
    let reference = match c.reference_cells {
        Some(0) => Reference::ClosedForm,
        Some(cells) => Reference::FinestGrid { cells },
        None => default_reference(&cfg.case).ok_or_else(|| {
            CliError::Config(
                "case has no default reference; set convergence.reference_cells".into(),
            )
        })?,
    };
    let dt = c.dt.unwrap_or(cfg.case.dt);
    if !(dt > 0.0) {
        return Err(CliError::Config(format!("dt must be positive, got {dt}")));
    }
    let rows = run_convergence(&cfg.case, &sizes, dt, reference, cfg.solver())?;
    create_out(&cfg.out)?;
    output::write_file(&cfg.out.join("eoc.csv"), |w| output::write_eoc(w, &rows))?;
    let mut s = header("convergence", cfg);
    s.insert("dt".into(), json!(dt));
    s.insert("reference".into(), json!(format!("{reference:?}")));
    s.insert(
        "rows".into(),
        json!(rows
            .iter()
            .map(|r| json!({"cells": r.cells, "error": r.error, "eoc": r.eoc}))
            .collect::<Vec<_>>()),
    );
    s.insert("status".into(), json!("ok"));
    let summary = Value::Object(s);
    output::write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn sweep(cfg: &Resolved) -> Result<Value, CliError> {
    let c = &cfg.file.sweep;
    if !matches!(cfg.case.mesh, MeshSpec::Interval { .. }) {
        return Err(CliError::Config("the a* sweep is one-dimensional".into()));
    }
    let cells = c.cells.unwrap_or(128);
    let ref_cells = c.reference_cells.unwrap_or(2048);
    let dt = c.dt.unwrap_or(cfg.case.dt);
    let refine = c.refine.unwrap_or(8);
    let requested = c.values.clone().unwrap_or_else(|| {
        (0..=16)
            .map(|k| 10f64.powf(-3.0 + 0.25 * k as f64))
            .collect()
    });
    let min = (0..cfg.case.matrix.len())
        .flat_map(|i| {
            (0..cfg.case.matrix.len())
                .filter(move |&j| j != i)
                .map(move |j| (i, j))
        })
        .map(|(i, j)| cfg.case.matrix[i][j])
        .fold(f64::INFINITY, f64::min);
    let (values, skipped): (Vec<f64>, Vec<f64>) =
        requested.iter().partition(|&&a| a > 0.0 && a >= min);
    if !skipped.is_empty() {
        log::warn!("skipping a* values below min a_ij = {min}: {skipped:?}");
    }
    if values.is_empty() {
        return Err(CliError::Config("no admissible a* value to sweep".into()));
    }
    let nested = |n: usize| n.is_power_of_two() && n >= 2;
    if !(nested(cells) && nested(ref_cells) && cells < ref_cells) {
        return Err(CliError::Config(format!(
            "sweep needs nested power-of-two grids, got {cells} and {ref_cells}"
        )));
    }
    if !(dt > 0.0) {
        return Err(CliError::Config(format!("dt must be positive, got {dt}")));
    }
    let base = cfg.case.clone().with_dt(dt);
    let (rm, ru) = base
        .clone()
        .with_cells(ref_cells)
        .final_state(cfg.solver())?;
    let case = base.with_cells(cells);
    let table = if refine > 0 && values.len() >= 2 {
        optimize_astar(&case, &values, (&rm, &ru), cfg.solver(), refine)?
    } else {
        astar_sweep(&case, &values, (&rm, &ru), cfg.solver())?
    };
    create_out(&cfg.out)?;
    output::write_file(&cfg.out.join("astar_sweep.csv"), |w| {
        output::write_sweep(w, &table)
    })?;
    let mut s = header("sweep", cfg);
    s.insert("cells".into(), json!(cells));
    s.insert("reference_cells".into(), json!(ref_cells));
    s.insert("dt".into(), json!(dt));
    s.insert("skipped".into(), json!(skipped));
    s.insert("optimum".into(), json!(table.optimum));
    s.insert("optimal_error".into(), json!(table.optimal_error));
    s.insert("status".into(), json!("ok"));
    let summary = Value::Object(s);
    output::write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Structural checks of the mass-action model of `case`, or of the
/// default `(1000, 1)` rates when the case has none.
pub fn validate_reaction(
    case: Option<&TestCase>,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<Value, CliError> {
    let (kf, kb) = case
        .and_then(|c| c.reaction)
        .map_or((1000.0, 1.0), |r| (r.forward, r.backward));
    if samples == 0 {
        return Err(CliError::Config("samples must be positive".into()));
    }
    let mut model = MassAction3::new(kf, kb).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(c) =
        case.filter(|c| c.reaction.is_some() && c.profile == ProfileKind::ReactiveTiles)
    {
        model = c
            .prepare()?
            .reaction
            .ok_or_else(|| CliError::Config("case has no reaction".into()))?;
    }
    let report = validate(&model, samples, seed);
    let count = |c: Check| report.violations.iter().filter(|v| v.check == c).count();
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "validate-reaction",
        "model": {"kind": "mass_action_3", "forward": kf, "backward": kb},
        "samples": report.samples,
        "seed": seed,
        "checks": {
            "isochore": !report.failed(Check::Isochore),
            "positivity": !report.failed(Check::Positivity),
            "dissipation": report.dissipation_checked && !report.failed(Check::Dissipation),
        },
        "violations": {
            "isochore": count(Check::Isochore),
            "positivity": count(Check::Positivity),
            "dissipation": count(Check::Dissipation),
        },
        "max_isochore_defect": report.max_isochore_defect,
        "max_dissipation": report.max_dissipation,
        "status": if report.passed() && report.dissipation_checked { "ok" } else { "checks_failed" },
    });
    create_out(out)?;
    output::write_json(&out.join("summary.json"), &summary)?;
    if summary["status"] != "ok" {
        return Err(CliError::Failed(format!(
            "reaction validation failed: {}",
            summary["violations"]
        )));
    }
    Ok(summary)
}
