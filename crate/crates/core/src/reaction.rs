//! Reaction terms and checks of their structural properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReactionError {
    #[error("reaction rates must be positive and finite, got k_f = {forward}, k_b = {backward}")]
    Rates { forward: f64, backward: f64 },
    #[error("mean composition {0:?} is not a point of the simplex")]
    Composition(Vec<f64>),
    #[error("no steady state with nonnegative components")]
    NoAdmissibleRoot,
}

/// Source term `R(U)` of a reaction-cross-diffusion system, evaluated
/// pointwise on the composition of one cell.
pub trait ReactionModel: Send + Sync + std::fmt::Debug {
    fn species_count(&self) -> usize;

    fn rates(&self, u: &[f64], out: &mut [f64]);

    /// `out[i * N + j] = d r_i / d u_j`.
    fn rate_jacobian(&self, u: &[f64], out: &mut [f64]);

    /// Reference state used for the relative entropy, when known.
    fn equilibrium(&self) -> Option<&[f64]> {
        None
    }
}

/// `R = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoReaction {
    pub species: usize,
}

impl ReactionModel for NoReaction {
    fn species_count(&self) -> usize {
        self.species
    }

    fn rates(&self, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn rate_jacobian(&self, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Reversible reaction `e1 + e3 <-> 2 e2` with mass-action kinetics:
/// `r1 = k_b (u2+)^2 - k_f u1+ u3+`, `r2 = -2 r1`, `r3 = r1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassAction3 {
    forward: f64,
    backward: f64,
    equilibrium: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub state: [f64; 3],
    /// Amount `alpha` such that `state = mean + alpha (-1, 2, -1)`.
    pub advancement: f64,
}

impl MassAction3 {
    /// Equilibrium defaults to the steady state reached from the uniform
    /// composition.
    pub fn new(forward: f64, backward: f64) -> Result<Self, ReactionError> {
        if !(forward > 0.0 && backward > 0.0 && forward.is_finite() && backward.is_finite()) {
            return Err(ReactionError::Rates { forward, backward });
        }
        let mut m = Self {
            forward,
            backward,
            equilibrium: [1.0 / 3.0; 3],
        };
        m.equilibrium = m.steady_state(&[1.0 / 3.0; 3])?.state;
        Ok(m)
    }

    /// Uses the steady state with the given mean composition as equilibrium.
    pub fn with_mean(mut self, mean: &[f64]) -> Result<Self, ReactionError> {
        self.equilibrium = self.steady_state(mean)?.state;
        Ok(self)
    }

    pub fn forward(&self) -> f64 {
        self.forward
    }

    pub fn backward(&self) -> f64 {
        self.backward
    }

    fn r1(&self, u: &[f64]) -> f64 {
        let p = |x: f64| x.max(0.0);
        self.backward * p(u[1]) * p(u[1]) - self.forward * p(u[0]) * p(u[2])
    }

    /// Homogeneous state with the same volume fractions in mean as `mean`
    /// and zero reaction rate.
    pub fn steady_state(&self, mean: &[f64]) -> Result<SteadyState, ReactionError> {
        let sum: f64 = mean.iter().sum();
        if mean.len() != 3 || mean.iter().any(|m| !(*m >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(ReactionError::Composition(mean.to_vec()));
        }
        let (m1, m2, m3) = (mean[0], mean[1], mean[2]);
        let (kf, kb) = (self.forward, self.backward);
        let lo = -0.5 * m2;
        let hi = m1.min(m3);
        let g = |a: f64| kb * (m2 + 2.0 * a).powi(2) - kf * (m1 - a) * (m3 - a);
        let dg = |a: f64| 4.0 * kb * (m2 + 2.0 * a) + kf * ((m1 - a) + (m3 - a));

        let qa = 4.0 * kb - kf;
        let qb = 4.0 * kb * m2 + kf * (m1 + m3);
        let qc = kb * m2 * m2 - kf * m1 * m3;
        let mut roots = Vec::with_capacity(2);
        if qa == 0.0 {
            if qb != 0.0 {
                roots.push(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let q = -0.5 * (qb + qb.signum() * disc.sqrt());
                if q != 0.0 {
                    roots.push(q / qa);
                    roots.push(qc / q);
                } else {
                    roots.push(0.0);
                }
            }
        }
        let slack = 1e-12;
        let mut alpha = roots
            .into_iter()
            .filter(|a| *a >= lo - slack && *a <= hi + slack)
            .min_by(|a, b| g(*a).abs().total_cmp(&g(*b).abs()))
            .ok_or(ReactionError::NoAdmissibleRoot)?
            .clamp(lo, hi);
        for _ in 0..3 {
            let d = dg(alpha);
            if d > 0.0 {
                alpha = (alpha - g(alpha) / d).clamp(lo, hi);
            }
        }
        let state = [m1 - alpha, m2 + 2.0 * alpha, m3 - alpha];
        Ok(SteadyState {
            state,
            advancement: alpha,
        })
    }
}

impl ReactionModel for MassAction3 {
    fn species_count(&self) -> usize {
        3
    }

    fn rates(&self, u: &[f64], out: &mut [f64]) {
        let r = self.r1(u);
        out[0] = r;
        out[1] = -2.0 * r;
        out[2] = r;
    }

    fn rate_jacobian(&self, u: &[f64], out: &mut [f64]) {
        let p = |x: f64| x.max(0.0);
        let step = |x: f64| if x > 0.0 { 1.0 } else { 0.0 };
        let d = [
            -self.forward * step(u[0]) * p(u[2]),
            2.0 * self.backward * p(u[1]),
            -self.forward * p(u[0]) * step(u[2]),
        ];
        for (row, w) in [1.0, -2.0, 1.0].into_iter().enumerate() {
            for j in 0..3 {
                out[row * 3 + j] = w * d[j];
            }
        }
    }

    fn equilibrium(&self) -> Option<&[f64]> {
        Some(&self.equilibrium)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Isochore,
    Positivity,
    Dissipation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub check: Check,
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
    /// Dissipation is only checked when the model has an equilibrium.
    pub dissipation_checked: bool,
    pub max_isochore_defect: f64,
    pub max_dissipation: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn failed(&self, check: Check) -> bool {
        self.violations.iter().any(|v| v.check == check)
    }
}

const MAX_RECORDED: usize = 32;
const TOL: f64 = 1e-12;

fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Monte-Carlo check of the isochore, positivity and entropy-dissipation
/// properties over `samples` draws of each kind.
pub fn validate(model: &dyn ReactionModel, samples: usize, seed: u64) -> ValidationReport {
    let n = model.species_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = vec![0.0; n];
    let mut report = ValidationReport {
        samples,
        violations: Vec::new(),
        dissipation_checked: model.equilibrium().is_some(),
        max_isochore_defect: 0.0,
        max_dissipation: f64::NEG_INFINITY,
    };
    let record = |report: &mut ValidationReport, check, point: &[f64], value| {
        if report
            .violations
            .iter()
            .filter(|v| v.check == check)
            .count()
            < MAX_RECORDED
        {
            report.violations.push(Violation {
                check,
                point: point.to_vec(),
                value,
            });
        }
    };

    for s in 0..samples {
        let u: Vec<f64> = if s % 2 == 0 {
            simplex_point(&mut rng, n)
        } else {
            (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect()
        };
        model.rates(&u, &mut r);
        let total: f64 = r.iter().sum();
        let scale = r.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        report.max_isochore_defect = report.max_isochore_defect.max(total.abs() / scale);
        if total.abs() > TOL * scale {
            record(&mut report, Check::Isochore, &u, total);
        }
    }

    for s in 0..samples {
        let i = rng.gen_range(0..n);
        let mut u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        u[i] = if s % 8 == 0 { 0.0 } else { -rng.gen::<f64>() };
        model.rates(&u, &mut r);
        let scale = r.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        if r[i] < -TOL * scale {
            record(&mut report, Check::Positivity, &u, r[i]);
        }
    }

    if let Some(eq) = model.equilibrium() {
        for _ in 0..samples {
            let u = simplex_point(&mut rng, n);
            if u.iter().any(|x| *x <= 0.0) {
                continue;
            }
            model.rates(&u, &mut r);
            let terms: Vec<f64> = (0..n).map(|i| r[i] * (u[i] / eq[i]).ln()).collect();
            let value: f64 = terms.iter().sum();
            let scale = terms.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            report.max_dissipation = report.max_dissipation.max(value / scale);
            if value > TOL * scale {
                record(&mut report, Check::Dissipation, &u, value);
            }
        }
    }
    report
}
