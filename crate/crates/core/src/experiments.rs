//! Benchmark cases, convergence studies and the `a*` sweep.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::fields::{
    self, lp_error_exact, lp_error_nested, project_initial, FieldError, InitialProfile,
    SpeciesField, Summation,
};
use crate::mesh::{Cell, Mesh, MeshError, TimeGrid, TimeGridError};
use crate::reaction::{MassAction3, ReactionError, ReactionModel};
use crate::scheme::{CrossDiffusionMatrix, Discretization, MatrixError};
use crate::solver::{simulate, Simulation, SolverConfig, SolverError, StepReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Time(#[from] TimeGridError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Reaction(#[from] ReactionError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("all off-diagonal coefficients vanish; set a* explicitly")]
    ZeroMatrix,
    #[error("grid sizes must be powers of two below the reference size, got {0:?}")]
    NotNested(Vec<usize>),
    #[error("case {0} has no closed-form solution")]
    NoClosedForm(String),
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("{0}")]
    Invalid(String),
}

pub fn a_lap() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 1.0, 1.0],
        vec![1.0, 0.0, 1.0],
        vec![1.0, 1.0, 0.0],
    ]
}

pub fn a_reg() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.2, 1.0],
        vec![0.2, 0.0, 0.1],
        vec![1.0, 0.1, 0.0],
    ]
}

pub fn a_sing() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0, 1.0],
        vec![0.0, 0.0, 0.1],
        vec![1.0, 0.1, 0.0],
    ]
}

fn off_diagonal_range(rows: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, r) in rows.iter().enumerate() {
        for (j, &a) in r.iter().enumerate() {
            if i != j {
                lo = lo.min(a);
                hi = hi.max(a);
            }
        }
    }
    (lo, hi)
}

/// `min{ max a_ij ; max{ min a_ij, epsilon h^2 / dt } }`.
pub fn astar_rule(
    rows: &[Vec<f64>],
    h: f64,
    dt: f64,
    epsilon: f64,
) -> Result<f64, ExperimentError> {
    if !(h > 0.0 && dt > 0.0 && epsilon > 0.0) {
        return Err(ExperimentError::Invalid(format!(
            "a* rule needs positive h, dt and epsilon (got {h}, {dt}, {epsilon})"
        )));
    }
    let (lo, hi) = off_diagonal_range(rows);
    if !(hi > 0.0) {
        return Err(ExperimentError::ZeroMatrix);
    }
    Ok(hi.min(lo.max(epsilon * h * h / dt)))
}

/// `log2(e_h / e_{h/2})` for consecutive entries.
pub fn eoc(errors: &[f64]) -> Vec<Option<f64>> {
    let mut out = vec![None];
    out.extend(errors.windows(2).map(|w| Some((w[0] / w[1]).log2())));
    out.truncate(errors.len());
    out
}

fn cos_average(a: f64, b: f64) -> f64 {
    ((PI * b).sin() - (PI * a).sin()) / (PI * (b - a))
}

/// `(1/4 + cos(pi x)/4, 1/4 + cos(pi x)/4, 1/2 - cos(pi x)/2)`, averaged
/// exactly.
#[derive(Debug, Clone, Copy)]
pub struct SmoothProfile;

impl InitialProfile for SmoothProfile {
    fn species_count(&self) -> usize {
        3
    }

    fn cell_average(&self, cell: &Cell, out: &mut [f64]) {
        let c = cos_average(cell.lower[0], cell.upper[0]);
        out[0] = 0.25 + 0.25 * c;
        out[1] = 0.25 + 0.25 * c;
        out[2] = 0.5 - 0.5 * c;
    }
}

/// Piecewise constant pure phases: species 1 in the middle quarter,
/// species 2 on both sides of it, species 3 near the walls.
#[derive(Debug, Clone, Copy)]
pub struct RoughProfile;

fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

impl InitialProfile for RoughProfile {
    fn species_count(&self) -> usize {
        3
    }

    fn cell_average(&self, cell: &Cell, out: &mut [f64]) {
        let (a, b) = (cell.lower[0], cell.upper[0]);
        let h = b - a;
        out[0] = overlap(a, b, 0.375, 0.625) / h;
        out[1] = (overlap(a, b, 0.125, 0.375) + overlap(a, b, 0.625, 0.875)) / h;
        out[2] = (overlap(a, b, 0.0, 0.125) + overlap(a, b, 0.875, 1.0)) / h;
    }
}

/// Exact cell averages of the heat-equation solution started from
/// [`SmoothProfile`] with unit diffusivity.
pub fn smooth_heat_solution(t: f64, species: usize, cell: &Cell) -> f64 {
    let c = (-PI * PI * t).exp() * cos_average(cell.lower[0], cell.upper[0]);
    match species {
        0 | 1 => 0.25 + 0.25 * c,
        _ => 0.5 - 0.5 * c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub species: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

/// Union of disjoint pure-phase rectangles over a background species.
#[derive(Debug, Clone, PartialEq)]
pub struct RectangleProfile {
    pub species: usize,
    pub background: usize,
    pub rects: Vec<Rect>,
}

impl RectangleProfile {
    /// Periodic layout on `(0,22) x (0,16)`: 5 x 5 tiles of size 4.4 x 3.2,
    /// each with a 1.2 x 2.4 block of species 1 and a 1.6 x 1.6 block of
    /// species 2 in a background of species 3. Mean composition is
    /// `(9/44, 2/11, 27/44)` and block edges fall on both the 55 x 40 and
    /// the 110 x 80 grid.
    pub fn reactive_tiles() -> Self {
        let (tx, ty) = (4.4, 3.2);
        let mut rects = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                let (x, y) = (i as f64 * tx, j as f64 * ty);
                rects.push(Rect {
                    species: 0,
                    lo: [x + 0.4, y + 0.4],
                    hi: [x + 1.6, y + 2.8],
                });
                rects.push(Rect {
                    species: 1,
                    lo: [x + 2.4, y + 0.8],
                    hi: [x + 4.0, y + 2.4],
                });
            }
        }
        Self {
            species: 3,
            background: 2,
            rects,
        }
    }
}

impl InitialProfile for RectangleProfile {
    fn species_count(&self) -> usize {
        self.species
    }

    fn cell_average(&self, cell: &Cell, out: &mut [f64]) {
        out.fill(0.0);
        let area = cell.measure;
        let mut covered = 0.0;
        for r in &self.rects {
            let a = overlap(cell.lower[0], cell.upper[0], r.lo[0], r.hi[0])
                * overlap(cell.lower[1], cell.upper[1], r.lo[1], r.hi[1]);
            // rounding in the grid coordinates leaves slivers of size ~1e-16
            let frac = match a / area {
                f if f < 1e-12 => 0.0,
                f if f > 1.0 - 1e-12 => 1.0,
                f => f,
            };
            out[r.species] += frac;
            covered += frac;
        }
        out[self.background] += (1.0 - covered).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileKind {
    Smooth,
    Rough,
    ReactiveTiles,
}

impl ProfileKind {
    pub fn build(self) -> Box<dyn InitialProfile + Send + Sync> {
        match self {
            ProfileKind::Smooth => Box::new(SmoothProfile),
            ProfileKind::Rough => Box::new(RoughProfile),
            ProfileKind::ReactiveTiles => Box::new(RectangleProfile::reactive_tiles()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshSpec {
    Interval {
        lo: f64,
        hi: f64,
        cells: usize,
    },
    Rectangle {
        lo: [f64; 2],
        hi: [f64; 2],
        nx: usize,
        ny: usize,
    },
}

impl MeshSpec {
    pub fn build(&self) -> Result<Mesh, MeshError> {
        match *self {
            MeshSpec::Interval { lo, hi, cells } => Mesh::uniform_1d(lo, hi, cells),
            MeshSpec::Rectangle { lo, hi, nx, ny } => Mesh::cartesian_2d(lo, hi, nx, ny),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Astar {
    Fixed(f64),
    Rule { epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    ClosedForm,
    FinestGrid { cells: usize },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassActionRates {
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub name: String,
    pub mesh: MeshSpec,
    pub final_time: f64,
    pub dt: f64,
    pub matrix: Vec<Vec<f64>>,
    pub astar: Astar,
    pub profile: ProfileKind,
    pub reaction: Option<MassActionRates>,
    pub reference: Reference,
}

/// Everything needed to run a case, resolved on its mesh.
#[derive(Debug)]
pub struct Prepared {
    pub mesh: Mesh,
    pub grid: TimeGrid,
    pub matrix: CrossDiffusionMatrix,
    pub initial: SpeciesField,
    pub reaction: Option<MassAction3>,
}

impl Prepared {
    pub fn discretization(&self) -> Discretization<'_> {
        Discretization::new(
            &self.mesh,
            &self.matrix,
            self.reaction.as_ref().map(|r| r as &dyn ReactionModel),
        )
    }

    pub fn run(
        &self,
        config: SolverConfig,
        observer: &mut dyn FnMut(&SpeciesField, &StepReport),
    ) -> Result<Simulation, ExperimentError> {
        Ok(simulate(
            &self.initial,
            &self.grid,
            self.discretization(),
            config,
            observer,
        )?)
    }
}

impl TestCase {
    pub fn with_cells(mut self, cells: usize) -> Self {
        if let MeshSpec::Interval { cells: c, .. } = &mut self.mesh {
            *c = cells;
        }
        self
    }

    pub fn with_resolution(mut self, nx: usize, ny: usize) -> Self {
        if let MeshSpec::Rectangle { nx: x, ny: y, .. } = &mut self.mesh {
            *x = nx;
            *y = ny;
        }
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_final_time(mut self, t: f64) -> Self {
        self.final_time = t;
        self
    }

    pub fn with_astar(mut self, astar: f64) -> Self {
        self.astar = Astar::Fixed(astar);
        self
    }

    pub fn astar_for(&self, mesh: &Mesh) -> Result<f64, ExperimentError> {
        match self.astar {
            Astar::Fixed(a) => Ok(a),
            Astar::Rule { epsilon } => astar_rule(&self.matrix, mesh.size(), self.dt, epsilon),
        }
    }

    pub fn prepare(&self) -> Result<Prepared, ExperimentError> {
        let mesh = self.mesh.build()?;
        let grid = TimeGrid::uniform(self.final_time, self.dt)?;
        let matrix = CrossDiffusionMatrix::new(&self.matrix, self.astar_for(&mesh)?)?;
        let profile = self.profile.build();
        if profile.species_count() != matrix.species_count() {
            return Err(ExperimentError::Invalid(format!(
                "profile has {} species, matrix {}",
                profile.species_count(),
                matrix.species_count()
            )));
        }
        let initial = project_initial(profile.as_ref(), &mesh)?;
        let reaction = match self.reaction {
            Some(r) => {
                let mut mean: Vec<f64> = initial
                    .masses(&mesh, Summation::Sequential)
                    .iter()
                    .map(|m| m / mesh.domain_measure())
                    .collect();
                fields::normalize_exact(&mut mean);
                Some(MassAction3::new(r.forward, r.backward)?.with_mean(&mean)?)
            }
            None => None,
        };
        Ok(Prepared {
            mesh,
            grid,
            matrix,
            initial,
            reaction,
        })
    }

    /// Solves the case and returns the final state with its mesh.
    pub fn final_state(
        &self,
        config: SolverConfig,
    ) -> Result<(Mesh, SpeciesField), ExperimentError> {
        let p = self.prepare()?;
        let sim = p.run(config, &mut |_, _| {})?;
        Ok((p.mesh, sim.final_state))
    }

    fn cells_1d(&self) -> Option<usize> {
        match self.mesh {
            MeshSpec::Interval { cells, .. } => Some(cells),
            MeshSpec::Rectangle { .. } => None,
        }
    }
}

fn interval_case(
    name: &str,
    matrix: Vec<Vec<f64>>,
    astar: f64,
    profile: ProfileKind,
    reference: Reference,
) -> TestCase {
    TestCase {
        name: name.to_string(),
        mesh: MeshSpec::Interval {
            lo: 0.0,
            hi: 1.0,
            cells: 128,
        },
        final_time: 0.25,
        dt: 2f64.powi(-10),
        matrix,
        astar: Astar::Fixed(astar),
        profile,
        reaction: None,
        reference,
    }
}

fn reactive_case(name: &str, nx: usize, ny: usize) -> TestCase {
    TestCase {
        name: name.to_string(),
        mesh: MeshSpec::Rectangle {
            lo: [0.0, 0.0],
            hi: [22.0, 16.0],
            nx,
            ny,
        },
        final_time: 50.0,
        dt: 0.125,
        matrix: a_sing(),
        astar: Astar::Fixed(0.1),
        profile: ProfileKind::ReactiveTiles,
        reaction: Some(MassActionRates {
            forward: 1000.0,
            backward: 1.0,
        }),
        reference: Reference::None,
    }
}

/// Named benchmark cases. `A_lap_*` use `a* = 1`, the smallest value
/// allowed for that matrix; the others use `a* = 0.1`.
pub fn catalog() -> Vec<TestCase> {
    let fine = Reference::FinestGrid { cells: 2048 };
    vec![
        interval_case(
            "A_lap_smooth",
            a_lap(),
            1.0,
            ProfileKind::Smooth,
            Reference::ClosedForm,
        ),
        interval_case("A_lap_rough", a_lap(), 1.0, ProfileKind::Rough, fine),
        interval_case("A_reg_smooth", a_reg(), 0.1, ProfileKind::Smooth, fine),
        interval_case("A_reg_rough", a_reg(), 0.1, ProfileKind::Rough, fine),
        interval_case("A_sing_smooth", a_sing(), 0.1, ProfileKind::Smooth, fine),
        interval_case("A_sing_rough", a_sing(), 0.1, ProfileKind::Rough, fine),
        reactive_case("reactive_2d", 55, 40),
        reactive_case("reactive_2d_full", 110, 80),
    ]
}

pub fn find_case(name: &str) -> Result<TestCase, ExperimentError> {
    catalog()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| ExperimentError::UnknownCase(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub cells: usize,
    pub error: f64,
    pub eoc: Option<f64>,
}

/// Final-time `L^2` errors on the given 1D grids, against the closed form
/// or a nested finer solution, with orders between consecutive grids.
pub fn run_convergence(
    case: &TestCase,
    sizes: &[usize],
    dt: f64,
    reference: Reference,
    config: SolverConfig,
) -> Result<Vec<ConvergenceRow>, ExperimentError> {
    if case.cells_1d().is_none() {
        return Err(ExperimentError::Invalid(
            "convergence studies are one-dimensional".into(),
        ));
    }
    let base = case.clone().with_dt(dt);
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let nested = |n: usize| n.is_power_of_two() && n >= 2;
    if sorted.iter().any(|&n| !nested(n)) {
        return Err(ExperimentError::NotNested(sizes.to_vec()));
    }
    let ref_cells = match reference {
        Reference::FinestGrid { cells } => {
            if !nested(cells) || sorted.last().is_some_and(|&n| n >= cells) {
                return Err(ExperimentError::NotNested(sizes.to_vec()));
            }
            Some(cells)
        }
        Reference::ClosedForm => {
            if !(matches!(case.profile, ProfileKind::Smooth) && case.matrix == a_lap()) {
                return Err(ExperimentError::NoClosedForm(case.name.clone()));
            }
            None
        }
        Reference::None => return Err(ExperimentError::Invalid("a reference is required".into())),
    };

    let mut jobs: Vec<usize> = sorted.clone();
    jobs.extend(ref_cells);
    let results: Vec<Result<(Mesh, SpeciesField), ExperimentError>> = jobs
        .par_iter()
        .map(|&n| base.clone().with_cells(n).final_state(config))
        .collect();
    let mut results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reference_state = ref_cells.map(|_| results.pop().unwrap());

    let t = TimeGrid::uniform(case.final_time, dt)?.final_time();
    let errors = results
        .iter()
        .map(|(mesh, u)| match &reference_state {
            Some((rm, ru)) => Ok(lp_error_nested(u, mesh, ru, rm, 2.0)?),
            None => Ok(lp_error_exact(
                u,
                mesh,
                |i, _, c| smooth_heat_solution(t, i, c),
                2.0,
            )),
        })
        .collect::<Result<Vec<f64>, ExperimentError>>()?;
    let orders = eoc(&errors);
    Ok(sorted
        .into_iter()
        .zip(errors)
        .zip(orders)
        .map(|((cells, error), eoc)| ConvergenceRow { cells, error, eoc })
        .collect())
}

/// Like [`run_convergence`], against an already computed fine solution.
pub fn convergence_against(
    case: &TestCase,
    sizes: &[usize],
    dt: f64,
    (rm, ru): (&Mesh, &SpeciesField),
    config: SolverConfig,
) -> Result<Vec<ConvergenceRow>, ExperimentError> {
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let base = case.clone().with_dt(dt);
    let errors = sorted
        .par_iter()
        .map(|&n| {
            let (mesh, u) = base.clone().with_cells(n).final_state(config)?;
            Ok(lp_error_nested(&u, &mesh, ru, rm, 2.0)?)
        })
        .collect::<Result<Vec<f64>, ExperimentError>>()?;
    let orders = eoc(&errors);
    Ok(sorted
        .into_iter()
        .zip(errors)
        .zip(orders)
        .map(|((cells, error), eoc)| ConvergenceRow { cells, error, eoc })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub astar: f64,
    pub error: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Sorted by `a*`.
    pub rows: Vec<SweepRow>,
    pub optimum: f64,
    pub optimal_error: f64,
}

fn fill_ratios(mut points: Vec<(f64, f64)>) -> SweepTable {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.dedup_by(|a, b| a.0 == b.0);
    let (optimum, optimal_error) = points
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((f64::NAN, f64::NAN));
    let rows = points
        .into_iter()
        .map(|(astar, error)| SweepRow {
            astar,
            error,
            ratio: error / optimal_error,
        })
        .collect();
    SweepTable {
        rows,
        optimum,
        optimal_error,
    }
}

/// Final-time `L^2` error against `reference` for every value of `a*`.
pub fn astar_sweep(
    case: &TestCase,
    astar_values: &[f64],
    reference: (&Mesh, &SpeciesField),
    config: SolverConfig,
) -> Result<SweepTable, ExperimentError> {
    let points = astar_values
        .par_iter()
        .map(|&a| sweep_point(case, a, reference, config).map(|e| (a, e)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fill_ratios(points))
}

fn sweep_point(
    case: &TestCase,
    astar: f64,
    (rm, ru): (&Mesh, &SpeciesField),
    config: SolverConfig,
) -> Result<f64, ExperimentError> {
    let (mesh, u) = case.clone().with_astar(astar).final_state(config)?;
    Ok(lp_error_nested(&u, &mesh, ru, rm, 2.0)?)
}

/// Coarse sweep followed by golden-section search in `ln a*` around the
/// best coarse value. All evaluated points are returned.
pub fn optimize_astar(
    case: &TestCase,
    coarse: &[f64],
    reference: (&Mesh, &SpeciesField),
    config: SolverConfig,
    iterations: usize,
) -> Result<SweepTable, ExperimentError> {
    let table = astar_sweep(case, coarse, reference, config)?;
    let mut points: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.astar, r.error)).collect();
    let best = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .ok_or_else(|| ExperimentError::Invalid("empty sweep".into()))?;
    let lo = points[best.saturating_sub(1)].0.ln();
    let hi = points[(best + 1).min(points.len() - 1)].0.ln();
    let mut eval = |x: f64| -> Result<f64, ExperimentError> {
        let a = x.exp();
        let e = sweep_point(case, a, reference, config)?;
        points.push((a, e));
        Ok(e)
    };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (eval(c)?, eval(d)?);
    for _ in 0..iterations {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d)?;
        }
    }
    Ok(fill_ratios(points))
}
