//! Discrete concentration fields, entropy functionals and reconstructions.

use thiserror::Error;

use crate::mesh::{Cell, Mesh, MeshError};
use crate::scheme::CrossDiffusionMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value at species {species}, cell {cell}")]
    NonFinite { species: usize, cell: usize },
    #[error("negative value {value} at species {species}, cell {cell}")]
    Negative {
        species: usize,
        cell: usize,
        value: f64,
    },
    #[error("species {species} has no mass")]
    NoMass { species: usize },
    #[error("reference composition must be positive, got {value} for species {species}")]
    BadReference { species: usize, value: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Concentrations of `N` species in every cell, stored cell by cell
/// (`values[K * N + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesField {
    species: usize,
    values: Vec<f64>,
}

impl SpeciesField {
    pub fn new(species: usize, cells: usize, values: Vec<f64>) -> Result<Self, FieldError> {
        if species == 0 || values.len() != species * cells {
            return Err(FieldError::Shape {
                expected: species * cells,
                got: values.len(),
            });
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite {
                species: p % species,
                cell: p / species,
            });
        }
        Ok(Self { species, values })
    }

    /// No finiteness check; for intermediate iterates.
    pub(crate) fn new_unchecked(species: usize, cells: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), species * cells);
        Self { species, values }
    }

    /// Same composition in every cell.
    pub fn uniform(cells: usize, composition: &[f64]) -> Self {
        let values = (0..cells)
            .flat_map(|_| composition.iter().copied())
            .collect();
        Self {
            species: composition.len(),
            values,
        }
    }

    /// Builds a field from per-species cell vectors.
    pub fn from_species(columns: &[Vec<f64>]) -> Result<Self, FieldError> {
        let n = columns.len();
        let cells = columns.first().map_or(0, Vec::len);
        let mut values = vec![0.0; n * cells];
        for (i, col) in columns.iter().enumerate() {
            if col.len() != cells {
                return Err(FieldError::Shape {
                    expected: cells,
                    got: col.len(),
                });
            }
            for (k, v) in col.iter().enumerate() {
                values[k * n + i] = *v;
            }
        }
        Self::new(n, cells, values)
    }

    pub fn species_count(&self) -> usize {
        self.species
    }

    pub fn num_cells(&self) -> usize {
        self.values.len() / self.species
    }

    #[inline]
    pub fn get(&self, species: usize, cell: usize) -> f64 {
        self.values[cell * self.species + species]
    }

    #[inline]
    pub fn set(&mut self, species: usize, cell: usize, value: f64) {
        self.values[cell * self.species + species] = value;
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.species..(cell + 1) * self.species]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.values[cell * self.species..(cell + 1) * self.species]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Values of one species in every cell.
    pub fn species(&self, species: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(species)
            .step_by(self.species)
            .copied()
            .collect()
    }

    /// `sum_K m_K u_{i,K}` for every species.
    pub fn masses(&self, mesh: &Mesh, summation: Summation) -> Vec<f64> {
        (0..self.species)
            .map(|i| {
                let terms: Vec<f64> = mesh
                    .cells()
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c.measure * self.get(i, k))
                    .collect();
                summation.sum(&terms)
            })
            .collect()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `max_K |sum_i u_{i,K} - 1|`.
    pub fn simplex_defect(&self) -> f64 {
        self.values
            .chunks(self.species)
            .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &SpeciesField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_mesh(&self, mesh: &Mesh) -> Result<(), FieldError> {
        if self.num_cells() != mesh.num_cells() {
            return Err(MeshError::FieldSize {
                expected: mesh.num_cells(),
                got: self.num_cells(),
            }
            .into());
        }
        Ok(())
    }

    fn check_nonnegative(&self) -> Result<(), FieldError> {
        match self.values.iter().position(|v| *v < 0.0) {
            Some(p) => Err(FieldError::Negative {
                species: p % self.species,
                cell: p / self.species,
                value: self.values[p],
            }),
            None => Ok(()),
        }
    }
}

/// Divides `values` by its sum, then adjusts single entries, largest first,
/// until the left-to-right floating-point sum is exactly one.
pub fn normalize_exact(values: &mut [f64]) {
    let s: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= s;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    for j in order {
        if values.iter().sum::<f64>() == 1.0 || fix_entry(values, j) {
            return;
        }
    }
}

// The sequential sum is monotone in each entry, so bracket and bisect.
fn fix_entry(values: &mut [f64], j: usize) -> bool {
    let original = values[j];
    let mut sum_with = |v: f64| {
        values[j] = v;
        values.iter().sum::<f64>()
    };
    let guess = original + (1.0 - sum_with(original));
    let (mut lo, mut hi) = (guess, guess);
    let mut step = f64::EPSILON;
    while sum_with(lo) > 1.0 {
        lo -= step;
        step *= 2.0;
    }
    step = f64::EPSILON;
    while sum_with(hi) < 1.0 {
        hi += step;
        step *= 2.0;
    }
    let mut found = None;
    for _ in 0..200 {
        if sum_with(lo) == 1.0 {
            found = Some(lo);
            break;
        }
        if sum_with(hi) == 1.0 {
            found = Some(hi);
            break;
        }
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if sum_with(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    match found {
        Some(v) if v >= 0.0 => {
            values[j] = v;
            true
        }
        _ => {
            values[j] = original;
            false
        }
    }
}

/// Order of summation for reductions. `Pairwise` gives results that do not
/// depend on how the terms were produced, only on their order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Summation {
    #[default]
    Sequential,
    Pairwise,
}

impl Summation {
    pub fn sum(self, terms: &[f64]) -> f64 {
        match self {
            Summation::Sequential => terms.iter().sum(),
            Summation::Pairwise => pairwise_sum(terms),
        }
    }
}

fn pairwise_sum(terms: &[f64]) -> f64 {
    if terms.len() <= 8 {
        terms.iter().sum()
    } else {
        let (a, b) = terms.split_at(terms.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Per-face edge concentrations (`values[sigma * N + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    species: usize,
    values: Vec<f64>,
}

impl EdgeField {
    pub fn new(species: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len() % species, 0);
        Self { species, values }
    }

    pub fn species_count(&self) -> usize {
        self.species
    }

    #[inline]
    pub fn get(&self, species: usize, face: usize) -> f64 {
        self.values[face * self.species + species]
    }

    pub fn face(&self, face: usize) -> &[f64] {
        &self.values[face * self.species..(face + 1) * self.species]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// An initial condition that can be averaged over a cell.
pub trait InitialProfile {
    fn species_count(&self) -> usize;

    /// Writes the mean of every species over `cell` into `out`.
    fn cell_average(&self, cell: &Cell, out: &mut [f64]);
}

/// Profile given pointwise; averaged with the midpoint rule.
pub struct SampledProfile<F> {
    species: usize,
    sample: F,
}

impl<F: Fn([f64; 2], &mut [f64])> SampledProfile<F> {
    pub fn new(species: usize, sample: F) -> Self {
        Self { species, sample }
    }
}

impl<F: Fn([f64; 2], &mut [f64])> InitialProfile for SampledProfile<F> {
    fn species_count(&self) -> usize {
        self.species
    }

    fn cell_average(&self, cell: &Cell, out: &mut [f64]) {
        (self.sample)(cell.center, out)
    }
}

/// Cell averages of `profile`, renormalized so that every cell lies on the
/// simplex.
pub fn project_initial(
    profile: &dyn InitialProfile,
    mesh: &Mesh,
) -> Result<SpeciesField, FieldError> {
    let n = profile.species_count();
    let mut values = vec![0.0; n * mesh.num_cells()];
    for (k, cell) in mesh.cells().iter().enumerate() {
        let out = &mut values[k * n..(k + 1) * n];
        profile.cell_average(cell, out);
        for (i, v) in out.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(FieldError::NonFinite {
                    species: i,
                    cell: k,
                });
            }
            // quadrature noise
            if *v < 0.0 && *v > -1e-13 {
                *v = 0.0;
            }
            if *v < 0.0 {
                return Err(FieldError::Negative {
                    species: i,
                    cell: k,
                    value: *v,
                });
            }
        }
        if out.iter().sum::<f64>() <= 0.0 {
            return Err(FieldError::NoMass { species: 0 });
        }
        normalize_exact(out);
    }
    let field = SpeciesField::new(n, mesh.num_cells(), values)?;
    for (i, m) in field.masses(mesh, Summation::Sequential).iter().enumerate() {
        if *m <= 0.0 {
            return Err(FieldError::NoMass { species: i });
        }
    }
    Ok(field)
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Mixing entropy `sum_K m_K sum_i u ln u` with `0 ln 0 = 0`.
pub fn entropy(field: &SpeciesField, mesh: &Mesh) -> Result<f64, FieldError> {
    entropy_with(field, mesh, Summation::Sequential)
}

pub fn entropy_with(
    field: &SpeciesField,
    mesh: &Mesh,
    summation: Summation,
) -> Result<f64, FieldError> {
    field.check_mesh(mesh)?;
    field.check_nonnegative()?;
    let terms: Vec<f64> = mesh
        .cells()
        .iter()
        .enumerate()
        .map(|(k, c)| c.measure * field.cell(k).iter().map(|&u| xlogx(u)).sum::<f64>())
        .collect();
    Ok(summation.sum(&terms))
}

/// Relative entropy `sum_K m_K sum_i u ln(u / ubar)` against a positive
/// constant state.
pub fn relative_entropy(
    field: &SpeciesField,
    reference: &[f64],
    mesh: &Mesh,
) -> Result<f64, FieldError> {
    relative_entropy_with(field, reference, mesh, Summation::Sequential)
}

pub fn relative_entropy_with(
    field: &SpeciesField,
    reference: &[f64],
    mesh: &Mesh,
    summation: Summation,
) -> Result<f64, FieldError> {
    field.check_mesh(mesh)?;
    field.check_nonnegative()?;
    if reference.len() != field.species_count() {
        return Err(FieldError::Shape {
            expected: field.species_count(),
            got: reference.len(),
        });
    }
    if let Some(i) = reference.iter().position(|r| !(*r > 0.0)) {
        return Err(FieldError::BadReference {
            species: i,
            value: reference[i],
        });
    }
    let terms: Vec<f64> = mesh
        .cells()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let s: f64 = field
                .cell(k)
                .iter()
                .zip(reference)
                .map(|(&u, &r)| if u > 0.0 { u * (u / r).ln() } else { 0.0 })
                .sum();
            c.measure * s
        })
        .collect();
    Ok(summation.sum(&terms))
}

/// Face sums controlling the entropy decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Dissipation {
    /// `sum_sigma tau_sigma u_{i,sigma} (D ln u_i)^2` for each species.
    pub per_species: Vec<f64>,
    /// Sum of `per_species`.
    pub fisher: f64,
    /// `sum_sigma tau_sigma sum_{i<j} a_ij u_{i,sigma} u_{j,sigma} (D (ln u_i - ln u_j))^2`.
    pub cross: f64,
}

/// Log-jump of one species across a face, or `None` when the edge value
/// vanishes (the face then contributes nothing).
#[inline]
fn log_jump(
    field: &SpeciesField,
    edge: &EdgeField,
    i: usize,
    face: usize,
    k: usize,
    l: usize,
) -> Option<f64> {
    let (a, b) = (field.get(i, k), field.get(i, l));
    (edge.get(i, face) > 0.0 && a > 0.0 && b > 0.0).then(|| (b / a).ln())
}

pub fn dissipation(
    field: &SpeciesField,
    edge: &EdgeField,
    matrix: &CrossDiffusionMatrix,
    mesh: &Mesh,
) -> Dissipation {
    let n = field.species_count();
    let mut per_species = vec![0.0; n];
    let mut cross = 0.0;
    let mut dln = vec![None; n];
    for (s, f) in mesh.interior_faces() {
        let (k, l) = (f.owner, f.neighbor.unwrap());
        for i in 0..n {
            dln[i] = log_jump(field, edge, i, s, k, l);
            if let Some(d) = dln[i] {
                per_species[i] += f.transmissibility * edge.get(i, s) * d * d;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if let (Some(di), Some(dj)) = (dln[i], dln[j]) {
                    let d = di - dj;
                    cross += f.transmissibility
                        * matrix.coupling(i, j)
                        * edge.get(i, s)
                        * edge.get(j, s)
                        * d
                        * d;
                }
            }
        }
    }
    Dissipation {
        fisher: per_species.iter().sum(),
        per_species,
        cross,
    }
}

/// Piecewise-constant reconstruction of a cell function.
pub struct CellwiseConstant<'a> {
    mesh: &'a Mesh,
    values: &'a [f64],
}

impl<'a> CellwiseConstant<'a> {
    pub fn new(mesh: &'a Mesh, values: &'a [f64]) -> Self {
        Self { mesh, values }
    }

    pub fn sample(&self, point: [f64; 2]) -> Option<f64> {
        self.mesh.locate(point).map(|k| self.values[k])
    }
}

/// Gradient reconstruction, constant on every diamond:
/// `d * D_{K sigma} f / d_sigma * n_{K sigma}` (oriented from the owner).
pub fn reconstruct_gradient(values: &[f64], mesh: &Mesh) -> Vec<[f64; 2]> {
    let d = mesh.dimension() as f64;
    mesh.faces()
        .iter()
        .map(|f| match f.neighbor {
            Some(l) => {
                let g = d * (values[l] - values[f.owner]) / f.distance;
                [g * f.normal[0], g * f.normal[1]]
            }
            None => [0.0, 0.0],
        })
        .collect()
}

/// `sum_sigma tau_sigma D f D g`.
pub fn discrete_h1_product(f: &[f64], g: &[f64], mesh: &Mesh) -> f64 {
    mesh.interior_faces()
        .map(|(_, s)| {
            let l = s.neighbor.unwrap();
            s.transmissibility * (f[l] - f[s.owner]) * (g[l] - g[s.owner])
        })
        .sum()
}

/// `integral over Omega of grad_f . grad_g` for diamond-wise constant fields.
pub fn diamond_l2_product(grad_f: &[[f64; 2]], grad_g: &[[f64; 2]], mesh: &Mesh) -> f64 {
    mesh.faces()
        .iter()
        .zip(grad_f.iter().zip(grad_g))
        .map(|(s, (a, b))| s.diamond_measure * (a[0] * b[0] + a[1] * b[1]))
        .sum()
}

/// `|| u_E - u_T ||_{L^1}` for one species, where the edge reconstruction is
/// constant on each half-diamond.
pub fn edge_cell_l1_gap(
    field: &SpeciesField,
    edge: &EdgeField,
    species: usize,
    mesh: &Mesh,
) -> f64 {
    let d = mesh.dimension() as f64;
    mesh.faces()
        .iter()
        .enumerate()
        .map(|(s, f)| {
            let ue = edge.get(species, s);
            let own =
                f.measure * f.cell_distance(f.owner) / d * (ue - field.get(species, f.owner)).abs();
            let other = f.neighbor.map_or(0.0, |l| {
                f.measure * f.cell_distance(l) / d * (ue - field.get(species, l)).abs()
            });
            own + other
        })
        .sum()
}

fn combine(errors: &[f64], p: f64) -> f64 {
    errors.iter().map(|e| e.powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Averages a fine-grid field onto a coarse grid it refines.
pub fn restrict(
    fine: &SpeciesField,
    fine_mesh: &Mesh,
    coarse_mesh: &Mesh,
) -> Result<SpeciesField, FieldError> {
    fine.check_mesh(fine_mesh)?;
    let parents = coarse_mesh.coarse_parents(fine_mesh)?;
    let n = fine.species_count();
    let mut values = vec![0.0; n * coarse_mesh.num_cells()];
    for (kf, &kc) in parents.iter().enumerate() {
        let w = fine_mesh.cells()[kf].measure;
        for i in 0..n {
            values[kc * n + i] += w * fine.get(i, kf);
        }
    }
    for (kc, c) in coarse_mesh.cells().iter().enumerate() {
        for v in &mut values[kc * n..(kc + 1) * n] {
            *v /= c.measure;
        }
    }
    SpeciesField::new(n, coarse_mesh.num_cells(), values)
}

/// Discrete `L^p` distance between a coarse field and a nested fine-grid
/// reference; species errors are combined as `(sum_i e_i^p)^(1/p)`.
pub fn lp_error_nested(
    coarse: &SpeciesField,
    coarse_mesh: &Mesh,
    fine: &SpeciesField,
    fine_mesh: &Mesh,
    p: f64,
) -> Result<f64, FieldError> {
    coarse.check_mesh(coarse_mesh)?;
    let reference = restrict(fine, fine_mesh, coarse_mesh)?;
    Ok(lp_error_exact(
        coarse,
        coarse_mesh,
        |i, k, _| reference.get(i, k),
        p,
    ))
}

/// `L^p` distance to a reference given by its value on every
/// `(species, cell index, cell)`, typically an exact cell average.
pub fn lp_error_exact(
    field: &SpeciesField,
    mesh: &Mesh,
    reference: impl Fn(usize, usize, &Cell) -> f64,
    p: f64,
) -> f64 {
    let errors: Vec<f64> = (0..field.species_count())
        .map(|i| {
            mesh.cells()
                .iter()
                .enumerate()
                .map(|(k, c)| c.measure * (field.get(i, k) - reference(i, k, c)).abs().powf(p))
                .sum::<f64>()
                .powf(1.0 / p)
        })
        .collect();
    combine(&errors, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{edge_concentrations, log_mean};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit(n: usize) -> Mesh {
        Mesh::uniform_1d(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn constant_profile_projects_to_constant() {
        let m = unit(5);
        let p = SampledProfile::new(3, |_, out: &mut [f64]| out.fill(1.0 / 3.0));
        let u = project_initial(&p, &m).unwrap();
        for k in 0..5 {
            for i in 0..3 {
                assert_relative_eq!(u.get(i, k), 1.0 / 3.0, max_relative = 1e-15);
            }
            assert_eq!(u.cell(k).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn rejects_negative_and_missing_species() {
        let m = unit(4);
        let neg = SampledProfile::new(2, |x: [f64; 2], out: &mut [f64]| {
            out[0] = x[0] - 0.5;
            out[1] = 1.5 - x[0];
        });
        assert!(matches!(
            project_initial(&neg, &m),
            Err(FieldError::Negative { .. })
        ));
        let absent = SampledProfile::new(2, |_, out: &mut [f64]| {
            out[0] = 1.0;
            out[1] = 0.0;
        });
        assert_eq!(
            project_initial(&absent, &m),
            Err(FieldError::NoMass { species: 1 })
        );
    }

    #[test]
    fn normalization_is_exact() {
        let mut v = [0.1, 0.2, 0.3];
        normalize_exact(&mut v);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        let mut v = [1e-10, 0.6, 0.6];
        normalize_exact(&mut v);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn entropy_examples() {
        let m = unit(8);
        let u = SpeciesField::uniform(8, &[1.0 / 3.0; 3]);
        assert_relative_eq!(
            entropy(&u, &m).unwrap(),
            (1.0f64 / 3.0).ln(),
            max_relative = 1e-14
        );
        let pure = SpeciesField::uniform(8, &[1.0, 0.0, 0.0]);
        assert_eq!(entropy(&pure, &m).unwrap(), 0.0);
        let bad = SpeciesField::new(2, 1, vec![-0.1, 1.1]).unwrap();
        assert!(matches!(
            entropy(&bad, &unit(2)),
            Err(FieldError::Shape { .. }) | Err(FieldError::Mesh(_))
        ));
        let bad = SpeciesField::new(2, 2, vec![-0.1, 1.1, 0.5, 0.5]).unwrap();
        assert!(matches!(
            entropy(&bad, &unit(2)),
            Err(FieldError::Negative { .. })
        ));
    }

    #[test]
    fn relative_entropy_examples() {
        let m = unit(4);
        let bar = [0.5, 0.25, 0.25];
        let u = SpeciesField::uniform(4, &bar);
        assert_eq!(relative_entropy(&u, &bar, &m).unwrap(), 0.0);
        let v = SpeciesField::uniform(4, &[1.0, 0.0, 0.0]);
        assert_relative_eq!(
            relative_entropy(&v, &bar, &m).unwrap(),
            2f64.ln(),
            max_relative = 1e-14
        );
        assert!(matches!(
            relative_entropy(&v, &[1.0, 0.0, 0.0], &m),
            Err(FieldError::BadReference { species: 1, .. })
        ));
    }

    #[test]
    fn dissipation_of_constant_vanishes() {
        let m = unit(6);
        let u = SpeciesField::uniform(6, &[0.2, 0.3, 0.5]);
        let a = CrossDiffusionMatrix::new(
            &[
                vec![0.0, 0.2, 1.0],
                vec![0.2, 0.0, 0.1],
                vec![1.0, 0.1, 0.0],
            ],
            0.1,
        )
        .unwrap();
        let e = edge_concentrations(&u, &m, false);
        let d = dissipation(&u, &e, &a, &m);
        assert_eq!(d.fisher, 0.0);
        assert_eq!(d.cross, 0.0);
    }

    #[test]
    fn two_cell_dissipation_by_hand() {
        // tau = 2, u_1 = (0.25, 0.75): 2 * (0.5 / ln 3) * (ln 3)^2 = ln 3
        let m = unit(2);
        let u = SpeciesField::from_species(&[vec![0.25, 0.75], vec![0.75, 0.25]]).unwrap();
        let a = CrossDiffusionMatrix::new(&[vec![0.0, 1.0], vec![1.0, 0.0]], 1.0).unwrap();
        let e = edge_concentrations(&u, &m, false);
        assert_relative_eq!(e.get(0, 1), 0.5 / 3f64.ln(), max_relative = 1e-14);
        let d = dissipation(&u, &e, &a, &m);
        assert_relative_eq!(d.per_species[0], 3f64.ln(), max_relative = 1e-13);
        assert_relative_eq!(d.per_species[1], 3f64.ln(), max_relative = 1e-13);
    }

    #[test]
    fn dissipation_ignores_vanishing_edges() {
        let m = unit(2);
        let u = SpeciesField::from_species(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = CrossDiffusionMatrix::new(&[vec![0.0, 1.0], vec![1.0, 0.0]], 1.0).unwrap();
        let e = edge_concentrations(&u, &m, false);
        let d = dissipation(&u, &e, &a, &m);
        assert_eq!(d.fisher, 0.0);
        assert!(d.cross.is_finite());
    }

    #[test]
    fn linear_field_has_unit_gradient() {
        let m = unit(16);
        let f: Vec<f64> = m.cells().iter().map(|c| c.center[0]).collect();
        let g = reconstruct_gradient(&f, &m);
        for (s, face) in m.faces().iter().enumerate() {
            if face.is_interior() {
                assert_relative_eq!(g[s][0], 1.0, max_relative = 1e-12);
            }
        }
        let c = vec![3.0; 16];
        assert!(reconstruct_gradient(&c, &m)
            .iter()
            .all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn cellwise_sampler() {
        let m = unit(4);
        let v = [1.0, 2.0, 3.0, 4.0];
        let pi = CellwiseConstant::new(&m, &v);
        assert_eq!(pi.sample([0.3, 0.0]), Some(2.0));
        assert_eq!(pi.sample([1.0, 0.0]), Some(4.0));
        assert_eq!(pi.sample([1.5, 0.0]), None);
    }

    #[test]
    fn error_norms() {
        let coarse_mesh = unit(4);
        let fine_mesh = unit(16);
        let coarse = SpeciesField::uniform(4, &[0.5]);
        assert_eq!(
            lp_error_nested(&coarse, &coarse_mesh, &coarse, &coarse_mesh, 2.0).unwrap(),
            0.0
        );
        let fine = SpeciesField::uniform(16, &[0.25]);
        assert_relative_eq!(
            lp_error_nested(&coarse, &coarse_mesh, &fine, &fine_mesh, 2.0).unwrap(),
            0.25,
            max_relative = 1e-14
        );
        let odd = unit(6);
        assert!(lp_error_nested(
            &coarse,
            &coarse_mesh,
            &SpeciesField::uniform(6, &[0.1]),
            &odd,
            2.0
        )
        .is_err());
        // two species, each off by 0.1 everywhere: sqrt(0.01 + 0.01)
        let two = SpeciesField::uniform(4, &[0.6, 0.4]);
        let e = lp_error_exact(
            &two,
            &coarse_mesh,
            |i, _, _| if i == 0 { 0.5 } else { 0.5 },
            2.0,
        );
        assert_relative_eq!(e, 0.02f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn restriction_preserves_mass() {
        let coarse = Mesh::cartesian_2d([0.0, 0.0], [2.0, 1.0], 2, 3).unwrap();
        let fine = Mesh::cartesian_2d([0.0, 0.0], [2.0, 1.0], 6, 9).unwrap();
        let vals: Vec<f64> = (0..54).map(|k| (k as f64 * 0.37).sin().abs()).collect();
        let u = SpeciesField::new(1, 54, vals).unwrap();
        let r = restrict(&u, &fine, &coarse).unwrap();
        assert_relative_eq!(
            r.masses(&coarse, Summation::Sequential)[0],
            u.masses(&fine, Summation::Sequential)[0],
            max_relative = 1e-13
        );
    }

    #[test]
    fn pairwise_summation_matches() {
        let t: Vec<f64> = (0..1000).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        assert_relative_eq!(
            Summation::Pairwise.sum(&t),
            Summation::Sequential.sum(&t),
            max_relative = 1e-13
        );
    }

    fn simplex_field(n: usize, cells: usize) -> impl Strategy<Value = SpeciesField> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, n), cells).prop_map(
            move |rows| {
                let mut values = Vec::new();
                for mut r in rows {
                    if r.iter().sum::<f64>() == 0.0 {
                        r[0] = 1.0;
                    }
                    normalize_exact(&mut r);
                    values.extend(r);
                }
                SpeciesField::new(n, cells, values).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn entropy_bounds(u in simplex_field(3, 12)) {
            let m = unit(12);
            let e = entropy(&u, &m).unwrap();
            let omega = m.domain_measure();
            prop_assert!(e <= 1e-15);
            prop_assert!(e >= -omega * 3f64.ln() - 1e-12);
            prop_assert!(e >= -3.0 * omega / std::f64::consts::E - 1e-12);
        }

        #[test]
        fn relative_entropy_nonnegative(u in simplex_field(3, 10), r in simplex_field(3, 1)) {
            let bar: Vec<f64> = r.cell(0).iter().map(|v| v.max(1e-3)).collect();
            let s: f64 = bar.iter().sum();
            let bar: Vec<f64> = bar.iter().map(|v| v / s).collect();
            let m = unit(10);
            prop_assert!(relative_entropy(&u, &bar, &m).unwrap() >= -1e-12);
        }

        #[test]
        fn log_mean_sandwich(a in 1e-8f64..10.0, b in 1e-8f64..10.0) {
            let l = log_mean(a, b);
            prop_assert!(l >= a.min(b) * (1.0 - 1e-14));
            prop_assert!(l <= 0.5 * (a + b) * (1.0 + 1e-14));
        }

        #[test]
        fn discrete_chain_rule(a in 1e-6f64..10.0, b in 1e-6f64..10.0) {
            prop_assume!((a - b).abs() > 1e-9 * a.max(b));
            let lhs = log_mean(a, b) * (a.ln() - b.ln());
            prop_assert!((lhs - (a - b)).abs() <= 1e-12 * (a - b).abs().max(1e-300) + 1e-15 * a.max(b));
        }

        #[test]
        fn fisher_minus_cross_identity(u in simplex_field(3, 6)) {
            // sum_i u_i (Dln u_i)^2 - sum_{i<j} u_i u_j (Dln u_i - Dln u_j)^2
            //   = sum_i u_i (1 - sum_j u_j) (Dln u_i)^2, checked face by face with unit couplings
            let m = unit(6);
            let pos: Vec<f64> = u.values().iter().map(|v| v.max(1e-6)).collect();
            let u = SpeciesField::new(3, 6, pos).unwrap();
            let e = edge_concentrations(&u, &m, false);
            for (s, f) in m.interior_faces() {
                let (k, l) = (f.owner, f.neighbor.unwrap());
                let d: Vec<f64> = (0..3).map(|i| (u.get(i, l) / u.get(i, k)).ln()).collect();
                let w: Vec<f64> = (0..3).map(|i| e.get(i, s)).collect();
                let sw: f64 = w.iter().sum();
                let fisher: f64 = (0..3).map(|i| w[i] * d[i] * d[i]).sum();
                let mut cross = 0.0;
                for i in 0..3 {
                    for j in i + 1..3 {
                        cross += w[i] * w[j] * (d[i] - d[j]).powi(2);
                    }
                }
                let rhs: f64 = (0..3).map(|i| w[i] * (1.0 - sw) * d[i] * d[i]).sum();
                prop_assert!((fisher - cross - rhs).abs() <= 1e-10 * fisher.max(1.0));
                prop_assert!(rhs >= -1e-14);
            }
        }

        #[test]
        fn gradient_identities(n in 2usize..10, ny in 2usize..8, w in 0.2f64..3.0, seed in 0u64..500) {
            let m = Mesh::cartesian_2d([0.0, 0.0], [w, 1.0], n, ny).unwrap();
            let f: Vec<f64> = (0..m.num_cells()).map(|k| ((k as u64 * 2654435761 + seed) % 997) as f64 / 97.0).collect();
            let g: Vec<f64> = (0..m.num_cells()).map(|k| ((k as u64 * 40503 + 3 * seed) % 991) as f64 / 89.0).collect();
            let d = m.dimension() as f64;
            let gf = reconstruct_gradient(&f, &m);
            let gg = reconstruct_gradient(&g, &m);
            let lhs = discrete_h1_product(&f, &g, &m);
            let rhs = diamond_l2_product(&gf, &gg, &m) / d;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            let lhs = discrete_h1_product(&f, &f, &m);
            let rhs = diamond_l2_product(&gf, &gf, &m) / d;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
        }
    }
}
#[cfg(test)]
mod normalize_tests {
    use rand::{Rng, SeedableRng};

    #[test]
    fn sums_are_exactly_one_with_tiny_entries() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100_000 {
            let n = rng.gen_range(2..6);
            let mut v: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < 0.3 {
                        1e-13
                    } else {
                        rng.gen::<f64>()
                    }
                })
                .collect();
            super::normalize_exact(&mut v);
            assert_eq!(v.iter().sum::<f64>(), 1.0, "{v:?}");
            assert!(v.iter().all(|x| *x > 0.0));
        }
    }
}
