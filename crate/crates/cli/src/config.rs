//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use crossdiff::experiments::{
    find_case, Astar, MassActionRates, MeshSpec, ProfileKind, Reference, TestCase,
};
use crossdiff::fields::Summation;
use crossdiff::scheme::CrossDiffusionMatrix;
use crossdiff::solver::SolverConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name from the catalog.
    pub case: Option<String>,
    pub inline: Option<InlineCase>,
    #[serde(default)]
    pub overrides: Overrides,
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
    pub reproducible: Option<bool>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub cells: Option<usize>,
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub dt: Option<f64>,
    pub final_time: Option<f64>,
    pub astar: Option<f64>,
    pub astar_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineCase {
    pub name: String,
    /// One entry per dimension.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
    pub final_time: f64,
    pub dt: f64,
    pub matrix: Vec<Vec<f64>>,
    pub astar: Option<f64>,
    pub astar_epsilon: Option<f64>,
    /// `smooth`, `rough` or `reactive_tiles`.
    pub profile: String,
    pub reaction: Option<Rates>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub sizes: Option<Vec<usize>>,
    /// Cells of the nested reference; `0` selects the closed form.
    pub reference_cells: Option<usize>,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub values: Option<Vec<f64>>,
    pub cells: Option<usize>,
    pub reference_cells: Option<usize>,
    pub dt: Option<f64>,
    /// Golden-section iterations after the coarse sweep.
    pub refine: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub samples: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub case: Option<String>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
    pub reproducible: bool,
    pub seed: Option<u64>,
}

/// Fully validated settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub case: TestCase,
    pub out: PathBuf,
    pub stride: usize,
    pub reproducible: bool,
    pub seed: u64,
    pub file: RunConfig,
}

impl Resolved {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            summation: if self.reproducible {
                Summation::Pairwise
            } else {
                Summation::Sequential
            },
            ..SolverConfig::default()
        }
    }
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

fn profile(name: &str) -> Result<ProfileKind, CliError> {
    match name {
        "smooth" => Ok(ProfileKind::Smooth),
        "rough" => Ok(ProfileKind::Rough),
        "reactive_tiles" => Ok(ProfileKind::ReactiveTiles),
        other => Err(CliError::Config(format!("unknown profile {other:?}"))),
    }
}

fn inline_case(c: &InlineCase) -> Result<TestCase, CliError> {
    let mesh = match (c.lo.as_slice(), c.hi.as_slice(), c.cells.as_slice()) {
        ([lo], [hi], [cells]) => MeshSpec::Interval {
            lo: *lo,
            hi: *hi,
            cells: *cells,
        },
        ([x0, y0], [x1, y1], [nx, ny]) => MeshSpec::Rectangle {
            lo: [*x0, *y0],
            hi: [*x1, *y1],
            nx: *nx,
            ny: *ny,
        },
        _ => {
            return Err(CliError::Config(
                "lo, hi and cells must all have length 1 or 2".into(),
            ))
        }
    };
    let astar = match (c.astar, c.astar_epsilon) {
        (Some(a), None) => Astar::Fixed(a),
        (None, Some(epsilon)) => Astar::Rule { epsilon },
        _ => {
            return Err(CliError::Config(
                "give exactly one of astar and astar_epsilon".into(),
            ))
        }
    };
    Ok(TestCase {
        name: c.name.clone(),
        mesh,
        final_time: c.final_time,
        dt: c.dt,
        matrix: c.matrix.clone(),
        astar,
        profile: profile(&c.profile)?,
        reaction: c.reaction.map(|r| MassActionRates {
            forward: r.forward,
            backward: r.backward,
        }),
        reference: Reference::None,
    })
}

fn apply(mut case: TestCase, o: &Overrides) -> Result<TestCase, CliError> {
    if let Some(n) = o.cells {
        if !matches!(case.mesh, MeshSpec::Interval { .. }) {
            return Err(CliError::Config(
                "`cells` applies to 1D cases; use nx and ny".into(),
            ));
        }
        case = case.with_cells(n);
    }
    if o.nx.is_some() || o.ny.is_some() {
        let MeshSpec::Rectangle { nx, ny, .. } = case.mesh else {
            return Err(CliError::Config(
                "`nx`/`ny` apply to 2D cases; use cells".into(),
            ));
        };
        case = case.with_resolution(o.nx.unwrap_or(nx), o.ny.unwrap_or(ny));
    }
    if let Some(dt) = o.dt {
        case = case.with_dt(dt);
    }
    if let Some(t) = o.final_time {
        case = case.with_final_time(t);
    }
    match (o.astar, o.astar_epsilon) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "give at most one of astar and astar_epsilon".into(),
            ))
        }
        (Some(a), None) => case.astar = Astar::Fixed(a),
        (None, Some(epsilon)) => case.astar = Astar::Rule { epsilon },
        (None, None) => {}
    }
    Ok(case)
}

/// Checks everything that can be checked without solving.
fn check(case: &TestCase) -> Result<(), CliError> {
    positive("dt", case.dt)?;
    positive("final_time", case.final_time)?;
    if let Astar::Rule { epsilon } = case.astar {
        positive("astar_epsilon", epsilon)?;
    }
    // matrix and a* admissibility; a* from the rule needs the mesh size
    let mesh = case
        .mesh
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let astar = case
        .astar_for(&mesh)
        .map_err(|e| CliError::Config(e.to_string()))?;
    CrossDiffusionMatrix::new(&case.matrix, astar)
        .map_err(|e| CliError::Config(format!("matrix: {e}")))?;
    if let Some(r) = case.reaction {
        positive("reaction.forward", r.forward)?;
        positive("reaction.backward", r.backward)?;
        if case.matrix.len() != 3 {
            return Err(CliError::Config(
                "mass-action reaction needs three species".into(),
            ));
        }
    }
    Ok(())
}

pub fn resolve(flags: &Flags, default_out: &str) -> Result<Resolved, CliError> {
    let file = match &flags.config {
        Some(p) => load(p)?,
        None => RunConfig::default(),
    };
    let name = flags.case.clone().or_else(|| file.case.clone());
    let case = match (&name, &file.inline) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "give either a case name or an [inline] case".into(),
            ))
        }
        (Some(n), None) => find_case(n).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(c)) => inline_case(c)?,
        (None, None) => {
            return Err(CliError::Config(
                "no case given; use --case or a config file".into(),
            ))
        }
    };
    let case = apply(case, &file.overrides)?;
    check(&case)?;
    let stride = flags.stride.or(file.stride).unwrap_or(0);
    Ok(Resolved {
        out: flags
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from(default_out).join(&case.name)),
        stride,
        reproducible: flags.reproducible || file.reproducible.unwrap_or(false),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        case,
        file,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_schema() {
        let cfg = parse(
            r#"
            out = "runs/x"
            stride = 4
            reproducible = true
            seed = 9

            [inline]
            name = "mine"
            lo = [0.0]
            hi = [1.0]
            cells = [32]
            final_time = 0.1
            dt = 0.01
            matrix = [[0.0, 0.5, 1.0], [0.5, 0.0, 0.2], [1.0, 0.2, 0.0]]
            astar = 0.3
            profile = "rough"

            [convergence]
            sizes = [8, 16]
            reference_cells = 64

            [sweep]
            values = [0.2, 0.5]
            refine = 3
            "#,
        )
        .unwrap();
        let flags = Flags {
            config: None,
            ..Flags::default()
        };
        assert!(resolve(&flags, "out").is_err());
        let c = inline_case(cfg.inline.as_ref().unwrap()).unwrap();
        assert_eq!(c.astar, Astar::Fixed(0.3));
        assert_eq!(cfg.convergence.sizes, Some(vec![8, 16]));
        assert_eq!(cfg.seed, Some(9));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(matches!(parse("cases = \"x\""), Err(CliError::Config(_))));
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        let mut c = find_case("A_reg_smooth").unwrap();
        c.matrix[0][1] = 0.3;
        assert!(matches!(check(&c), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let c = find_case("A_reg_smooth").unwrap();
        let o = Overrides {
            cells: Some(64),
            dt: Some(0.5),
            astar_epsilon: Some(2.0),
            ..Overrides::default()
        };
        let c = apply(c, &o).unwrap();
        assert_eq!(c.dt, 0.5);
        assert_eq!(c.astar, Astar::Rule { epsilon: 2.0 });
        assert!(matches!(c.mesh, MeshSpec::Interval { cells: 64, .. }));
        let o = Overrides {
            nx: Some(4),
            ..Overrides::default()
        };
        assert!(apply(find_case("A_reg_smooth").unwrap(), &o).is_err());
    }
}
