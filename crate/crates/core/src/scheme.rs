//! Backward-Euler TPFA scheme for the cross-diffusion system.
//!
//! Fluxes split into a linear heat part with coefficient `a*` and a cross
//! part weighted by `a_ij - a*`; edge concentrations are logarithmic means
//! of the two adjacent cell values. Unknowns are ordered cell by cell, with
//! the `N` species of a cell contiguous.

use thiserror::Error;

use crate::fields::{EdgeField, SpeciesField};
use crate::linalg::{BlockPattern, BlockSparseMatrix};
use crate::mesh::Mesh;
use crate::reaction::ReactionModel;
use std::sync::Arc;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("matrix must be square and non-empty")]
    NotSquare,
    #[error("a[{i}][{j}] != a[{j}][{i}]")]
    Asymmetric { i: usize, j: usize },
    #[error("a[{i}][{j}] is negative or not finite")]
    Negative { i: usize, j: usize },
    #[error("a* = {astar} must be positive and at least min a_ij = {min}")]
    BadStabilization { astar: f64, min: f64 },
}

/// Symmetric nonnegative coupling matrix together with the stabilization
/// coefficient `a*`. Diagonal entries are never used.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDiffusionMatrix {
    n: usize,
    entries: Vec<f64>,
    astar: f64,
}

impl CrossDiffusionMatrix {
    pub fn new(rows: &[Vec<f64>], astar: f64) -> Result<Self, MatrixError> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(MatrixError::NotSquare);
        }
        let entries: Vec<f64> = rows.iter().flatten().copied().collect();
        for i in 0..n {
            for j in 0..n {
                let a = entries[i * n + j];
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(MatrixError::Negative { i, j });
                }
                if a != entries[j * n + i] {
                    return Err(MatrixError::Asymmetric { i, j });
                }
            }
        }
        if (0..n).any(|i| entries[i * n + i] != 0.0) {
            log::warn!("diagonal entries of the cross-diffusion matrix are ignored");
        }
        let m = Self {
            n,
            entries,
            astar: 0.0,
        };
        m.with_astar(astar)
    }

    /// Replaces `a*`, enforcing `a* > 0` and `a* >= min_{i != j} a_ij`.
    pub fn with_astar(mut self, astar: f64) -> Result<Self, MatrixError> {
        let min = self.min_off_diagonal();
        if !(astar > 0.0) || !astar.is_finite() || astar < min {
            return Err(MatrixError::BadStabilization { astar, min });
        }
        self.astar = astar;
        Ok(self)
    }

    /// Replaces `a*` without the admissibility constraint. Only meant for
    /// exhibiting what goes wrong with `a* = 0`.
    pub fn with_any_astar(mut self, astar: f64) -> Self {
        self.astar = astar;
        self
    }

    pub fn species_count(&self) -> usize {
        self.n
    }

    pub fn astar(&self) -> f64 {
        self.astar
    }

    /// `a_ij` for `i != j`, zero on the diagonal.
    #[inline]
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.entries[i * self.n + j]
        }
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.n;
        (0..n).flat_map(move |i| {
            (0..n)
                .filter(move |&j| j != i)
                .map(move |j| self.entries[i * n + j])
        })
    }

    /// Zero for a single species.
    pub fn min_off_diagonal(&self) -> f64 {
        self.off_diagonal().reduce(f64::min).unwrap_or(0.0)
    }

    pub fn max_off_diagonal(&self) -> f64 {
        self.off_diagonal().reduce(f64::max).unwrap_or(0.0)
    }

    pub fn is_nondegenerate(&self) -> bool {
        self.min_off_diagonal() > 0.0
    }
}

// |t| below this switches to the series in t = (a - b) / (a + b)
const SERIES_THRESHOLD: f64 = 1e-3;

/// Logarithmic mean, zero as soon as one argument is nonpositive.
#[inline]
pub fn log_mean(a: f64, b: f64) -> f64 {
    if a.min(b) <= 0.0 {
        return 0.0;
    }
    let (a, b) = if a < b { (b, a) } else { (a, b) };
    if a == b {
        return a;
    }
    let m = 0.5 * (a + b);
    let t = (a - b) / (a + b);
    if t.abs() <= SERIES_THRESHOLD {
        // t / artanh(t) = 1 / (1 + t^2/3 + t^4/5 + t^6/7 + ...)
        let t2 = t * t;
        m / (1.0 + t2 * (1.0 / 3.0 + t2 * (1.0 / 5.0 + t2 / 7.0)))
    } else {
        (a - b) / ((a - b) / b).ln_1p()
    }
}

/// Partial derivative of [`log_mean`] with respect to its first argument;
/// zero on the flat branch `min(a, b) <= 0`.
#[inline]
pub fn log_mean_da(a: f64, b: f64) -> f64 {
    if a.min(b) <= 0.0 {
        return 0.0;
    }
    let t = (a - b) / (a + b);
    if t.abs() <= SERIES_THRESHOLD {
        let t2 = t * t;
        let s = 1.0 + t2 * (1.0 / 3.0 + t2 * (1.0 / 5.0 + t2 / 7.0));
        let ds = t * (2.0 / 3.0 + t2 * (4.0 / 5.0 + t2 * 6.0 / 7.0));
        0.5 * (1.0 / s - ds * (1.0 - t) / (s * s))
    } else {
        let ln = ((a - b) / b).ln_1p();
        (ln - 1.0 + b / a) / (ln * ln)
    }
}

/// Edge concentrations on every face. With `safeguarded`, the values of a
/// face are divided by `max(1, sum_j u_{j,sigma})`.
pub fn edge_concentrations(field: &SpeciesField, mesh: &Mesh, safeguarded: bool) -> EdgeField {
    let n = field.species_count();
    let mut values = vec![0.0; n * mesh.num_faces()];
    for (s, f) in mesh.faces().iter().enumerate() {
        let k = f.owner;
        let l = f.neighbor.unwrap_or(k);
        let out = &mut values[s * n..(s + 1) * n];
        for (i, v) in out.iter_mut().enumerate() {
            *v = log_mean(field.get(i, k), field.get(i, l));
        }
        if safeguarded {
            let total: f64 = out.iter().sum();
            if total > 1.0 {
                out.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    EdgeField::new(n, values)
}

/// Fluxes `F_{i,K sigma}` seen from the owner of each face
/// (`values[sigma * N + i]`); the neighbor sees the opposite value.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFluxes {
    species: usize,
    values: Vec<f64>,
}

impl FaceFluxes {
    /// Face-major: `values()[face * N + species]`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, species: usize, face: usize) -> f64 {
        self.values[face * self.species + species]
    }

    /// Flux out of `cell` through `face`.
    pub fn outward(&self, species: usize, face: usize, cell: usize, mesh: &Mesh) -> f64 {
        let f = &mesh.faces()[face];
        if f.owner == cell {
            self.get(species, face)
        } else {
            -self.get(species, face)
        }
    }
}

/// `F_i = -a* tau D u_i - lambda tau sum_j (a_ij - a*)(u_{j,sigma} D u_i - u_{i,sigma} D u_j)`.
pub fn fluxes(
    field: &SpeciesField,
    edge: &EdgeField,
    matrix: &CrossDiffusionMatrix,
    lambda: f64,
    mesh: &Mesh,
) -> FaceFluxes {
    let n = field.species_count();
    let mut values = vec![0.0; n * mesh.num_faces()];
    let mut jumps = vec![0.0; n];
    for (s, f) in mesh.interior_faces() {
        let (k, l) = (f.owner, f.neighbor.unwrap());
        for (j, d) in jumps.iter_mut().enumerate() {
            *d = field.get(j, l) - field.get(j, k);
        }
        face_flux(
            matrix,
            lambda,
            f.transmissibility,
            &jumps,
            edge.face(s),
            &mut values[s * n..(s + 1) * n],
        );
    }
    FaceFluxes { species: n, values }
}

#[inline]
fn face_flux(
    matrix: &CrossDiffusionMatrix,
    lambda: f64,
    tau: f64,
    jumps: &[f64],
    edge: &[f64],
    out: &mut [f64],
) {
    let astar = matrix.astar();
    for (i, o) in out.iter_mut().enumerate() {
        let mut cross = 0.0;
        for j in 0..jumps.len() {
            if j != i {
                let c = matrix.coupling(i, j) - astar;
                cross += c * (edge[j] * jumps[i] - edge[i] * jumps[j]);
            }
        }
        *o = -astar * tau * jumps[i] - lambda * tau * cross;
    }
}

/// Continuation weights: `lambda` scales the cross-diffusion part of the
/// fluxes, `mu` the reaction source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homotopy {
    pub lambda: f64,
    pub mu: f64,
}

impl Homotopy {
    pub const FULL: Homotopy = Homotopy {
        lambda: 1.0,
        mu: 1.0,
    };
    pub const HEAT: Homotopy = Homotopy {
        lambda: 0.0,
        mu: 0.0,
    };

    pub fn new(lambda: f64, mu: f64) -> Self {
        Self { lambda, mu }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error(
        "field has {got_species} species and {got_cells} cells, expected {species} and {cells}"
    )]
    Shape {
        species: usize,
        cells: usize,
        got_species: usize,
        got_cells: usize,
    },
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeResidual {
    /// `values[K * N + i]`.
    pub values: Vec<f64>,
    pub fluxes: FaceFluxes,
}

impl SchemeResidual {
    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum over cells of the residual of one species.
    pub fn species_total(&self, species: usize, n: usize) -> f64 {
        self.values.iter().skip(species).step_by(n).sum()
    }
}

/// Mesh, coefficients and optional reaction of one problem.
#[derive(Clone, Copy)]
pub struct Discretization<'a> {
    pub mesh: &'a Mesh,
    pub matrix: &'a CrossDiffusionMatrix,
    pub reaction: Option<&'a dyn ReactionModel>,
    /// Use the normalized edge values `u / max(1, sum_j u_j)`.
    pub safeguarded: bool,
}

impl<'a> Discretization<'a> {
    pub fn new(
        mesh: &'a Mesh,
        matrix: &'a CrossDiffusionMatrix,
        reaction: Option<&'a dyn ReactionModel>,
    ) -> Self {
        Self {
            mesh,
            matrix,
            reaction,
            safeguarded: true,
        }
    }

    pub fn species_count(&self) -> usize {
        self.matrix.species_count()
    }

    pub fn unknowns(&self) -> usize {
        self.species_count() * self.mesh.num_cells()
    }

    fn check(&self, field: &SpeciesField) -> Result<(), SchemeError> {
        if field.species_count() != self.species_count()
            || field.num_cells() != self.mesh.num_cells()
        {
            return Err(SchemeError::Shape {
                species: self.species_count(),
                cells: self.mesh.num_cells(),
                got_species: field.species_count(),
                got_cells: field.num_cells(),
            });
        }
        Ok(())
    }

    /// `m_K (u - u_old) / dt + sum_sigma F_{i,K sigma} - mu m_K r_i(U_K)`.
    pub fn residual(
        &self,
        new: &SpeciesField,
        old: &SpeciesField,
        dt: f64,
        weights: Homotopy,
    ) -> Result<SchemeResidual, SchemeError> {
        self.check(new)?;
        self.check(old)?;
        if !(dt > 0.0) {
            return Err(SchemeError::TimeStep(dt));
        }
        let n = self.species_count();
        let mesh = self.mesh;
        let edge = edge_concentrations(new, mesh, self.safeguarded);
        let flux = fluxes(new, &edge, self.matrix, weights.lambda, mesh);
        let mut values = vec![0.0; self.unknowns()];
        let mut rates = vec![0.0; n];
        for (k, c) in mesh.cells().iter().enumerate() {
            let r = &mut values[k * n..(k + 1) * n];
            for i in 0..n {
                r[i] = c.measure * (new.get(i, k) - old.get(i, k)) / dt;
            }
            if let (Some(model), true) = (self.reaction, weights.mu != 0.0) {
                model.rates(new.cell(k), &mut rates);
                for i in 0..n {
                    r[i] -= weights.mu * c.measure * rates[i];
                }
            }
        }
        for (s, f) in mesh.interior_faces() {
            let l = f.neighbor.unwrap();
            for i in 0..n {
                let q = flux.get(i, s);
                values[f.owner * n + i] += q;
                values[l * n + i] -= q;
            }
        }
        Ok(SchemeResidual {
            values,
            fluxes: flux,
        })
    }

    /// Sparsity pattern shared by every Jacobian of this discretization.
    pub fn pattern(&self) -> Arc<BlockPattern> {
        BlockPattern::for_mesh(self.mesh, self.species_count())
    }

    /// Exact derivative of [`Discretization::residual`] with respect to `new`.
    pub fn jacobian(
        &self,
        new: &SpeciesField,
        dt: f64,
        weights: Homotopy,
        pattern: &Arc<BlockPattern>,
    ) -> Result<BlockSparseMatrix, SchemeError> {
        self.check(new)?;
        if !(dt > 0.0) {
            return Err(SchemeError::TimeStep(dt));
        }
        let n = self.species_count();
        let mesh = self.mesh;
        let matrix = self.matrix;
        let astar = matrix.astar();
        let lambda = weights.lambda;
        let mut jac = BlockSparseMatrix::zeros(Arc::clone(pattern));

        let mut rate_jac = vec![0.0; n * n];
        for (k, c) in mesh.cells().iter().enumerate() {
            let block = jac.diag_block_mut(k);
            for i in 0..n {
                block[i * n + i] += c.measure / dt;
            }
            if let (Some(model), true) = (self.reaction, weights.mu != 0.0) {
                model.rate_jacobian(new.cell(k), &mut rate_jac);
                for (b, dr) in block.iter_mut().zip(&rate_jac) {
                    *b -= weights.mu * c.measure * dr;
                }
            }
        }

        let mut ell = vec![0.0; n];
        let mut dell_own = vec![0.0; n];
        let mut dell_nb = vec![0.0; n];
        let mut edge = vec![0.0; n];
        let mut jumps = vec![0.0; n];
        // d edge_m / d ell_n
        let mut dnorm = vec![0.0; n * n];
        // dF_i/du_{k,K} and dF_i/du_{k,L}
        let mut d_own = vec![0.0; n * n];
        let mut d_nb = vec![0.0; n * n];
        for (s, f) in mesh.interior_faces() {
            let (kc, lc) = (f.owner, f.neighbor.unwrap());
            let tau = f.transmissibility;
            for j in 0..n {
                let (a, b) = (new.get(j, kc), new.get(j, lc));
                ell[j] = log_mean(a, b);
                dell_own[j] = log_mean_da(a, b);
                dell_nb[j] = log_mean_da(b, a);
                jumps[j] = b - a;
            }
            let total: f64 = ell.iter().sum();
            dnorm.fill(0.0);
            if self.safeguarded && total > 1.0 {
                for m in 0..n {
                    edge[m] = ell[m] / total;
                    for q in 0..n {
                        dnorm[m * n + q] =
                            if m == q { 1.0 / total } else { 0.0 } - ell[m] / (total * total);
                    }
                }
            } else {
                edge.copy_from_slice(&ell);
                for m in 0..n {
                    dnorm[m * n + m] = 1.0;
                }
            }
            for i in 0..n {
                let mut sum_cu = 0.0;
                let mut sum_cd = 0.0;
                for j in 0..n {
                    if j != i {
                        let c = matrix.coupling(i, j) - astar;
                        sum_cu += c * edge[j];
                        sum_cd += c * jumps[j];
                    }
                }
                for q in 0..n {
                    let cq = if q == i {
                        0.0
                    } else {
                        matrix.coupling(i, q) - astar
                    };
                    // dG_i/dD_q
                    let dg_dd = if q == i { sum_cu } else { 0.0 } - edge[i] * cq;
                    let df_dd =
                        -astar * tau * if q == i { 1.0 } else { 0.0 } - lambda * tau * dg_dd;
                    // sum_m dG_i/d edge_m * d edge_m / d ell_q
                    let mut dg_dell = 0.0;
                    for m in 0..n {
                        let cm = if m == i {
                            0.0
                        } else {
                            matrix.coupling(i, m) - astar
                        };
                        let dg_dedge = cm * jumps[i] - if m == i { sum_cd } else { 0.0 };
                        dg_dell += dg_dedge * dnorm[m * n + q];
                    }
                    let df_dell = -lambda * tau * dg_dell;
                    d_own[i * n + q] = -df_dd + df_dell * dell_own[q];
                    d_nb[i * n + q] = df_dd + df_dell * dell_nb[q];
                }
            }
            {
                let b = jac.diag_block_mut(kc);
                b.iter_mut().zip(&d_own).for_each(|(x, d)| *x += d);
            }
            {
                let b = jac.diag_block_mut(lc);
                b.iter_mut().zip(&d_nb).for_each(|(x, d)| *x -= d);
            }
            let (kl, lk) = jac.face_blocks_mut(s);
            kl.iter_mut().zip(&d_nb).for_each(|(x, d)| *x += d);
            lk.iter_mut().zip(&d_own).for_each(|(x, d)| *x -= d);
        }
        Ok(jac)
    }
}
