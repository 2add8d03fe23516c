//! Time stepping: Newton iterations with projection onto the simplex,
//! continuation in the cross-diffusion and reaction weights, heat seeding.

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::fields::{self, normalize_exact, SpeciesField, Summation};
use crate::linalg::{BlockPattern, LinearSolveError, LuSolver};
use crate::mesh::{Mesh, TimeGrid};
use crate::scheme::{
    edge_concentrations, CrossDiffusionMatrix, Discretization, Homotopy, SchemeError,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Stop when the sup-norm of the increment falls below this.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Iterates are floored at `floor_factor * dt` before renormalization.
    pub floor_factor: f64,
    /// Give up when the continuation step in `lambda` or `mu` gets smaller.
    pub continuation_min_gap: f64,
    pub summation: Summation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-12,
            newton_max_iter: 20,
            floor_factor: 1e-10,
            continuation_min_gap: 1e-6,
            summation: Summation::Sequential,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
    #[error(transparent)]
    Field(#[from] fields::FieldError),
    #[error("continuation stalled at step {step} (t = {time}) after {} attempts", path.len())]
    Stall {
        step: usize,
        time: f64,
        path: Vec<Attempt>,
        /// Reports of the steps completed before the stall.
        completed: Vec<StepReport>,
    },
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.newton_tol)
            || !positive(self.floor_factor)
            || !positive(self.continuation_min_gap)
        {
            return Err(SolverError::Config("tolerances must be positive".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(SolverError::Config(
                "newton_max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Floors every entry at `floor_factor * dt` and rescales each cell to sum
/// to one.
pub fn project_onto_admissible(field: &mut SpeciesField, dt: f64, floor_factor: f64) {
    let floor = floor_factor * dt;
    let n = field.species_count();
    for k in 0..field.num_cells() {
        let cell = field.cell_mut(k);
        for v in cell.iter_mut() {
            // NaN is mapped to the floor as well
            if !(*v >= floor) {
                *v = floor;
            }
        }
        debug_assert_eq!(cell.len(), n);
        normalize_exact(cell);
    }
}

/// One backward-Euler step of `N` uncoupled heat equations with diffusion
/// coefficient `astar`.
pub fn heat_seed(
    old: &SpeciesField,
    dt: f64,
    astar: f64,
    mesh: &Mesh,
) -> Result<SpeciesField, SolverError> {
    let n = old.species_count();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { astar }).collect())
        .collect();
    let matrix =
        CrossDiffusionMatrix::new(&rows, astar).map_err(|e| SolverError::Config(e.to_string()))?;
    let disc = Discretization::new(mesh, &matrix, None);
    let pattern = disc.pattern();
    let mut lu = LuSolver::new(&pattern);
    heat_seed_with(&disc, old, dt, &pattern, &mut lu)
}

fn heat_seed_with(
    disc: &Discretization,
    old: &SpeciesField,
    dt: f64,
    pattern: &Arc<BlockPattern>,
    lu: &mut LuSolver,
) -> Result<SpeciesField, SolverError> {
    let jac = disc.jacobian(old, dt, Homotopy::HEAT, pattern)?;
    let r = disc.residual(old, old, dt, Homotopy::HEAT)?;
    let mut delta: Vec<f64> = r.values.iter().map(|v| -v).collect();
    lu.solve(&jac, &mut delta)?;
    let values = old
        .values()
        .iter()
        .zip(&delta)
        .map(|(u, d)| u + d)
        .collect();
    Ok(SpeciesField::new(
        old.species_count(),
        old.num_cells(),
        values,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonFailure {
    MaxIterations,
    NonFinite,
    LinearSolve,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub state: SpeciesField,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the residual at the returned state.
    pub residual_norm: f64,
    pub failure: Option<NewtonFailure>,
}

/// Cached sparsity pattern and factorization data reused across Newton
/// solves of one discretization.
#[derive(Debug)]
pub struct Workspace {
    pattern: Arc<BlockPattern>,
    lu: LuSolver,
}

impl Workspace {
    pub fn new(disc: &Discretization) -> Self {
        let pattern = disc.pattern();
        let lu = LuSolver::new(&pattern);
        Self { pattern, lu }
    }
}

/// Newton iterations for the step from `old`, starting at `seed`, each
/// increment followed by [`project_onto_admissible`].
pub fn newton_solve(
    disc: &Discretization,
    old: &SpeciesField,
    dt: f64,
    weights: Homotopy,
    config: &SolverConfig,
    seed: &SpeciesField,
    ws: &mut Workspace,
) -> Result<NewtonOutcome, SolverError> {
    let mut u = seed.clone();
    let fail = |u: SpeciesField, iterations, why| NewtonOutcome {
        state: u,
        converged: false,
        iterations,
        residual_norm: f64::NAN,
        failure: Some(why),
    };
    for it in 1..=config.newton_max_iter {
        let r = disc.residual(&u, old, dt, weights)?;
        if r.values.iter().any(|v| !v.is_finite()) {
            return Ok(fail(u, it - 1, NewtonFailure::NonFinite));
        }
        let jac = disc.jacobian(&u, dt, weights, &ws.pattern)?;
        let mut delta: Vec<f64> = r.values.iter().map(|v| -v).collect();
        if ws.lu.solve(&jac, &mut delta).is_err() {
            return Ok(fail(u, it - 1, NewtonFailure::LinearSolve));
        }
        let values = u.values().iter().zip(&delta).map(|(a, d)| a + d).collect();
        let mut next = SpeciesField::new_unchecked(u.species_count(), u.num_cells(), values);
        project_onto_admissible(&mut next, dt, config.floor_factor);
        let step = next.max_abs_diff(&u);
        u = next;
        if !step.is_finite() {
            return Ok(fail(u, it, NewtonFailure::NonFinite));
        }
        if step <= config.newton_tol {
            let residual_norm = disc.residual(&u, old, dt, weights)?.norm_inf();
            return Ok(NewtonOutcome {
                state: u,
                converged: true,
                iterations: it,
                residual_norm,
                failure: None,
            });
        }
    }
    Ok(fail(
        u,
        config.newton_max_iter,
        NewtonFailure::MaxIterations,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attempt {
    pub weights: Homotopy,
    pub converged: bool,
    pub iterations: usize,
}

/// Outcome of a continuation: the attempted weights in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationPath {
    pub attempts: Vec<Attempt>,
    pub stalled: bool,
}

/// Drives a weight from `prev` towards 1, halving the distance to the last
/// success after each failure.
fn ramp(
    start: f64,
    min_gap: f64,
    at: impl Fn(f64) -> Homotopy,
    attempt: &mut dyn FnMut(Homotopy) -> (bool, usize),
    path: &mut Vec<Attempt>,
) -> bool {
    let mut prev = 0.0;
    let mut value = start;
    loop {
        let weights = at(value);
        let (converged, iterations) = attempt(weights);
        path.push(Attempt {
            weights,
            converged,
            iterations,
        });
        if converged {
            if value == 1.0 {
                return true;
            }
            prev = value;
            value = 1.0;
        } else {
            value = 0.5 * (value + prev);
            if value - prev < min_gap {
                return false;
            }
        }
    }
}

/// Continuation control flow. `attempt` runs Newton at the given weights
/// from the last converged state and reports success and iteration count.
///
/// Without reaction `lambda` is driven from 0 to 1. With reaction the full
/// problem is tried first; on failure `mu` is ramped from 1/2 to 1 at
/// `lambda = 0`, then `lambda` from 0 to 1 at `mu = 1`.
pub fn continuation(
    with_reaction: bool,
    min_gap: f64,
    attempt: &mut dyn FnMut(Homotopy) -> (bool, usize),
) -> ContinuationPath {
    let mut path = Vec::new();
    let ok = if !with_reaction {
        ramp(1.0, min_gap, |l| Homotopy::new(l, 0.0), attempt, &mut path)
    } else {
        let (converged, iterations) = attempt(Homotopy::FULL);
        path.push(Attempt {
            weights: Homotopy::FULL,
            converged,
            iterations,
        });
        converged
            || (ramp(0.5, min_gap, |m| Homotopy::new(0.0, m), attempt, &mut path)
                && ramp(1.0, min_gap, |l| Homotopy::new(l, 1.0), attempt, &mut path))
    };
    ContinuationPath {
        attempts: path,
        stalled: !ok,
    }
}

/// Solver state shared across the steps of one run.
pub struct Stepper<'a> {
    pub disc: Discretization<'a>,
    pub config: SolverConfig,
    ws: Workspace,
    heat: Discretization<'a>,
}

impl<'a> Stepper<'a> {
    pub fn new(disc: Discretization<'a>, config: SolverConfig) -> Result<Self, SolverError> {
        config.validate()?;
        // at lambda = 0 only a* enters the fluxes
        let heat = Discretization {
            reaction: None,
            ..disc
        };
        let ws = Workspace::new(&disc);
        Ok(Self {
            disc,
            config,
            ws,
            heat,
        })
    }

    /// Advances one step of length `dt`. Returns the new state, the
    /// continuation path and the residual norm.
    pub fn advance(
        &mut self,
        old: &SpeciesField,
        dt: f64,
    ) -> Result<(SpeciesField, ContinuationPath, f64), SolverError> {
        let seed = heat_seed_with(&self.heat, old, dt, &self.ws.pattern, &mut self.ws.lu)?;
        let mut current = seed;
        let mut last_residual = f64::NAN;
        let mut error = None;
        let disc = self.disc;
        let config = self.config;
        let ws = &mut self.ws;
        let path = continuation(
            disc.reaction.is_some(),
            config.continuation_min_gap,
            &mut |w| {
                if error.is_some() {
                    return (false, 0);
                }
                match newton_solve(&disc, old, dt, w, &config, &current, ws) {
                    Ok(out) if out.converged => {
                        current = out.state;
                        last_residual = out.residual_norm;
                        (true, out.iterations)
                    }
                    Ok(out) => (false, out.iterations),
                    Err(e) => {
                        error = Some(e);
                        (false, 0)
                    }
                }
            },
        );
        if let Some(e) = error {
            return Err(e);
        }
        Ok((current, path, last_residual))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    /// Newton iterations summed over all continuation attempts.
    pub newton_iterations: usize,
    pub path: Vec<Attempt>,
    pub residual_norm: f64,
    pub entropy: f64,
    pub relative_entropy: Option<f64>,
    /// Fisher-type dissipation of the new state.
    pub dissipation: f64,
    pub cross_dissipation: f64,
    pub masses: Vec<f64>,
    pub min_value: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub final_state: SpeciesField,
    /// Reports for steps `1..=N`; the initial state is described by `initial`.
    pub reports: Vec<StepReport>,
    pub initial: StepReport,
}

fn describe(
    disc: &Discretization,
    field: &SpeciesField,
    summation: Summation,
    step: usize,
    time: f64,
    dt: f64,
) -> Result<StepReport, SolverError> {
    let mesh = disc.mesh;
    let edge = edge_concentrations(field, mesh, disc.safeguarded);
    let d = fields::dissipation(field, &edge, disc.matrix, mesh);
    let relative_entropy = match disc.reaction.and_then(|r| r.equilibrium()) {
        Some(eq) => Some(fields::relative_entropy_with(field, eq, mesh, summation)?),
        None => None,
    };
    Ok(StepReport {
        step,
        time,
        dt,
        newton_iterations: 0,
        path: Vec::new(),
        residual_norm: 0.0,
        entropy: fields::entropy_with(field, mesh, summation)?,
        relative_entropy,
        dissipation: d.fisher,
        cross_dissipation: d.cross,
        masses: field.masses(mesh, summation),
        min_value: field.min_value(),
        wall_time: Duration::ZERO,
    })
}

/// Runs the scheme over `grid`. `observer` sees every new state with its
/// report, starting with the initial state at step 0.
pub fn simulate(
    initial: &SpeciesField,
    grid: &TimeGrid,
    disc: Discretization,
    config: SolverConfig,
    observer: &mut dyn FnMut(&SpeciesField, &StepReport),
) -> Result<Simulation, SolverError> {
    let mut stepper = Stepper::new(disc, config)?;
    let first = describe(&disc, initial, config.summation, 0, grid.times()[0], 0.0)?;
    observer(initial, &first);
    let mut state = initial.clone();
    let mut reports = Vec::with_capacity(grid.num_steps());
    for n in 1..=grid.num_steps() {
        let dt = grid.step(n);
        let time = grid.times()[n];
        let clock = Instant::now();
        let (next, path, residual_norm) = stepper.advance(&state, dt)?;
        if path.stalled {
            return Err(SolverError::Stall {
                step: n,
                time,
                path: path.attempts,
                completed: reports,
            });
        }
        let mut report = describe(&disc, &next, config.summation, n, time, dt)?;
        report.newton_iterations = path.attempts.iter().map(|a| a.iterations).sum();
        report.path = path.attempts;
        report.residual_norm = residual_norm;
        report.wall_time = clock.elapsed();
        log::debug!(
            "step {n} t={time:.6} newton={} attempts={} E={:.12e}",
            report.newton_iterations,
            report.path.len(),
            report.entropy
        );
        observer(&next, &report);
        reports.push(report);
        state = next;
    }
    Ok(Simulation {
        final_state: state,
        reports,
        initial: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{entropy, relative_entropy};
    use crate::reaction::{MassAction3, ReactionModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a_reg() -> CrossDiffusionMatrix {
        CrossDiffusionMatrix::new(
            &[
                vec![0.0, 0.2, 1.0],
                vec![0.2, 0.0, 0.1],
                vec![1.0, 0.1, 0.0],
            ],
            0.1,
        )
        .unwrap()
    }

    fn a_sing() -> CrossDiffusionMatrix {
        CrossDiffusionMatrix::new(
            &[
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.1],
                vec![1.0, 0.1, 0.0],
            ],
            0.1,
        )
        .unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, cells: usize, zero_prob: f64) -> SpeciesField {
        let mut v = Vec::new();
        for _ in 0..cells {
            let mut row: Vec<f64> = (0..3)
                .map(|_| {
                    if rng.gen::<f64>() < zero_prob {
                        0.0
                    } else {
                        rng.gen()
                    }
                })
                .collect();
            if row.iter().sum::<f64>() == 0.0 {
                row[0] = 1.0;
            }
            normalize_exact(&mut row);
            v.extend(row);
        }
        SpeciesField::new(3, cells, v).unwrap()
    }

    #[test]
    fn projection_examples() {
        let mut u = SpeciesField::new(3, 1, vec![0.5, 0.5, 0.0]).unwrap();
        project_onto_admissible(&mut u, 1.0, 1e-10);
        assert_relative_eq!(u.get(2, 0), 1e-10 / (1.0 + 1e-10), max_relative = 1e-12);
        assert_relative_eq!(u.get(0, 0), 0.5 / (1.0 + 1e-10), max_relative = 1e-15);
        assert_eq!(u.cell(0).iter().sum::<f64>(), 1.0);

        let mut u = SpeciesField::new(3, 1, vec![0.2, 0.3, 0.5]).unwrap();
        project_onto_admissible(&mut u, 1.0, 1e-10);
        assert_eq!(u.cell(0), &[0.2, 0.3, 0.5]);

        let mut u = SpeciesField::new_unchecked(3, 1, vec![-0.2, 0.6, 0.6]);
        project_onto_admissible(&mut u, 1.0, 1e-10);
        assert_relative_eq!(u.get(0, 0), 1e-10 / (1.2 + 1e-10), max_relative = 1e-12);
        assert_relative_eq!(u.get(1, 0), 0.5, max_relative = 1e-10);
    }

    #[test]
    fn heat_seed_properties() {
        let m = Mesh::uniform_1d(0.0, 1.0, 20).unwrap();
        let c = SpeciesField::uniform(20, &[0.2, 0.3, 0.5]);
        let s = heat_seed(&c, 0.1, 0.1, &m).unwrap();
        assert!(s.max_abs_diff(&c) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_state(&mut rng, 20, 0.4);
        let s = heat_seed(&u, 0.01, 0.3, &m).unwrap();
        let (m0, m1) = (
            u.masses(&m, Summation::Sequential),
            s.masses(&m, Summation::Sequential),
        );
        for i in 0..3 {
            assert!((m0[i] - m1[i]).abs() < 1e-14);
        }
        assert!(s.min_value() > 0.0);
        assert!(s.simplex_defect() < 1e-14);
    }

    #[test]
    fn heat_seed_long_step_averages() {
        let m = Mesh::uniform_1d(0.0, 3.0, 2).unwrap();
        let u = SpeciesField::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = heat_seed(&u, 1e12, 1.0, &m).unwrap();
        for k in 0..2 {
            assert!((s.get(0, k) - 0.5).abs() < 1e-10);
        }
        // hand-solved 2x2 system: m (u - u0)/dt = -tau a (u - v), m = 1.5, tau = 1/1.5
        let s = heat_seed(&u, 1.0, 1.0, &m).unwrap();
        let (mk, tau) = (1.5, 1.0 / 1.5);
        let c = tau / mk;
        let expected = (1.0 + c) / (1.0 + 2.0 * c);
        assert_relative_eq!(s.get(0, 0), expected, max_relative = 1e-14);
    }

    #[test]
    fn linear_problem_converges_immediately() {
        let m = Mesh::uniform_1d(0.0, 1.0, 16).unwrap();
        let a = a_reg();
        let d = Discretization::new(&m, &a, None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let old = random_state(&mut rng, 16, 0.0);
        let mut ws = Workspace::new(&d);
        let out = newton_solve(
            &d,
            &old,
            0.01,
            Homotopy::HEAT,
            &SolverConfig::default(),
            &old,
            &mut ws,
        )
        .unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn equal_coefficients_reproduce_heat_seed() {
        let m = Mesh::uniform_1d(0.0, 1.0, 16).unwrap();
        let a = CrossDiffusionMatrix::new(
            &[
                vec![0.0, 0.3, 0.3],
                vec![0.3, 0.0, 0.3],
                vec![0.3, 0.3, 0.0],
            ],
            0.3,
        )
        .unwrap();
        let d = Discretization::new(&m, &a, None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let old = random_state(&mut rng, 16, 0.0);
        let mut ws = Workspace::new(&d);
        let seed = heat_seed(&old, 0.02, 0.3, &m).unwrap();
        let out = newton_solve(
            &d,
            &old,
            0.02,
            Homotopy::FULL,
            &SolverConfig::default(),
            &old,
            &mut ws,
        )
        .unwrap();
        assert!(out.converged);
        assert!(out.state.max_abs_diff(&seed) < 1e-12);
    }

    #[test]
    fn stress_step_does_not_panic() {
        let m = Mesh::uniform_1d(0.0, 1.0, 32).unwrap();
        let a = a_sing();
        let d = Discretization::new(&m, &a, None);
        let mut v = Vec::new();
        for k in 0..32 {
            let x = (k as f64 + 0.5) / 32.0;
            v.extend(if x < 0.3 {
                [1.0, 0.0, 0.0]
            } else if x < 0.6 {
                [0.0, 1.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            });
        }
        let old = SpeciesField::new(3, 32, v).unwrap();
        let mut ws = Workspace::new(&d);
        let out = newton_solve(
            &d,
            &old,
            1e6,
            Homotopy::FULL,
            &SolverConfig::default(),
            &old,
            &mut ws,
        )
        .unwrap();
        if !out.converged {
            assert!(out.failure.is_some());
        }
    }

    #[test]
    fn bisection_arithmetic() {
        let mut tried = Vec::new();
        let path = continuation(false, 1e-6, &mut |w| {
            tried.push(w.lambda);
            (tried.len() > 2, 1)
        });
        assert_eq!(tried[..3], [1.0, 0.5, 0.25]);
        assert!(!path.stalled);
        // after success at 0.25 the next target is 1 again
        assert_eq!(tried[3], 1.0);
    }

    #[test]
    fn direct_success_is_single_attempt() {
        let path = continuation(true, 1e-6, &mut |_| (true, 3));
        assert_eq!(path.attempts.len(), 1);
        assert_eq!(path.attempts[0].weights, Homotopy::FULL);
    }

    #[test]
    fn reaction_is_ramped_first() {
        let mut tried = Vec::new();
        let path = continuation(true, 1e-6, &mut |w| {
            tried.push(w);
            (tried.len() > 1, 1)
        });
        assert_eq!(tried[1], Homotopy::new(0.0, 0.5));
        assert_eq!(tried[2], Homotopy::new(0.0, 1.0));
        assert_eq!(tried[3], Homotopy::new(1.0, 1.0));
        assert!(!path.stalled);
    }

    #[test]
    fn stall_is_reported() {
        let path = continuation(false, 1e-3, &mut |_| (false, 20));
        assert!(path.stalled);
        // 1, 1/2, ..., down to a gap below 1e-3
        assert_eq!(path.attempts.len(), 10);
    }

    #[test]
    fn constant_state_is_kept() {
        let m = Mesh::uniform_1d(0.0, 1.0, 10).unwrap();
        let a = a_reg();
        let d = Discretization::new(&m, &a, None);
        let u0 = SpeciesField::uniform(10, &[0.2, 0.3, 0.5]);
        let grid = TimeGrid::uniform(0.1, 0.01).unwrap();
        let sim = simulate(&u0, &grid, d, SolverConfig::default(), &mut |_, _| {}).unwrap();
        assert!(sim.final_state.max_abs_diff(&u0) < 1e-15);
        assert!(sim.reports.iter().all(|r| r.newton_iterations <= 1));
    }

    fn check_invariants(
        a: &CrossDiffusionMatrix,
        u0: &SpeciesField,
        mesh: &Mesh,
        dt: f64,
        steps: usize,
    ) {
        let d = Discretization::new(mesh, a, None);
        let grid = TimeGrid::uniform(dt * steps as f64, dt).unwrap();
        let mut states = Vec::new();
        let sim = simulate(u0, &grid, d, SolverConfig::default(), &mut |u, _| {
            states.push(u.clone())
        })
        .unwrap();
        let m0 = u0.masses(mesh, Summation::Sequential);
        let total = mesh.domain_measure();
        let mut prev = sim.initial.entropy;
        for (u, r) in states.iter().skip(1).zip(&sim.reports) {
            assert_eq!(u.simplex_defect(), 0.0);
            assert!(u.min_value() > 0.0);
            for i in 0..3 {
                assert!((r.masses[i] - m0[i]).abs() <= 1e-10 * total);
            }
            assert!(r.entropy - prev <= 1e-10);
            if a.is_nondegenerate() {
                assert!(r.entropy - prev + r.dt * a.min_off_diagonal() * r.dissipation <= 1e-8);
            }
            // edge sums of admissible states never exceed one
            let e = edge_concentrations(u, mesh, false);
            for s in 0..mesh.num_faces() {
                assert!(e.face(s).iter().sum::<f64>() <= 1.0 + 1e-14);
            }
            prev = r.entropy;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn structure_is_preserved(seed in 0u64..1000, sing in proptest::bool::ANY, zero_prob in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mesh = Mesh::uniform_1d(0.0, 1.0, 24).unwrap();
            let u0 = random_state(&mut rng, 24, zero_prob);
            let a = if sing { a_sing() } else { a_reg() };
            check_invariants(&a, &u0, &mesh, 1e-3, 6);
        }
    }

    #[test]
    fn structure_is_preserved_in_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mesh = Mesh::cartesian_2d([0.0, 0.0], [2.0, 1.0], 8, 5).unwrap();
        let u0 = random_state(&mut rng, 40, 0.3);
        check_invariants(&a_reg(), &u0, &mesh, 5e-3, 4);
    }

    #[test]
    fn reactive_relative_entropy_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mesh = Mesh::cartesian_2d([0.0, 0.0], [1.0, 1.0], 6, 6).unwrap();
        let u0 = random_state(&mut rng, 36, 0.3);
        let mean: Vec<f64> = u0
            .masses(&mesh, Summation::Sequential)
            .iter()
            .map(|m| m / mesh.domain_measure())
            .collect();
        let mut mean = mean;
        normalize_exact(&mut mean);
        let model = MassAction3::new(1000.0, 1.0)
            .unwrap()
            .with_mean(&mean)
            .unwrap();
        let a = a_sing();
        let d = Discretization::new(&mesh, &a, Some(&model as &dyn ReactionModel));
        let grid = TimeGrid::uniform(0.5, 0.05).unwrap();
        let mut states = Vec::new();
        let sim = simulate(&u0, &grid, d, SolverConfig::default(), &mut |u, _| {
            states.push(u.clone())
        })
        .unwrap();
        let mut prev = sim.initial.relative_entropy.unwrap();
        for (u, r) in states.iter().skip(1).zip(&sim.reports) {
            assert_eq!(u.simplex_defect(), 0.0);
            let h = r.relative_entropy.unwrap();
            assert!(h - prev <= 1e-8, "{h} > {prev}");
            assert!(
                (h - relative_entropy(u, model.equilibrium().unwrap(), &mesh).unwrap()).abs()
                    < 1e-12
            );
            prev = h;
        }
        assert!(entropy(&sim.final_state, &mesh).unwrap().is_finite());
    }
}
