//! Admissible two-point flux meshes.
//!
//! A [`Mesh`] is a list of cells and faces. Every face stores a fixed
//! orientation (owner cell, optional neighbor); the signed quantities seen
//! from the neighbor side are derived on the fly. Boundary faces are kept
//! even though their fluxes vanish, since the diamond cells attached to them
//! carry measure.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("need at least {min} cells along each axis, got {got}")]
    TooFewCells { min: usize, got: usize },
    #[error("degenerate extent [{lo}, {hi}]")]
    DegenerateExtent { lo: f64, hi: f64 },
    #[error("face {face} is not adjacent to cell {cell}")]
    NotAdjacent { cell: usize, face: usize },
    #[error("meshes are not nested: {0}")]
    NotNested(String),
    #[error("field has {got} entries, mesh has {expected} cells")]
    FieldSize { expected: usize, got: usize },
}

/// Structured description of the two supported mesh families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
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

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub center: [f64; 2],
    pub measure: f64,
    /// Bounding box of the (box-shaped) cell. Unused coordinates are 0.
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub diameter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub owner: usize,
    /// `None` for boundary faces.
    pub neighbor: Option<usize>,
    /// (d-1)-dimensional measure; 1 in 1D.
    pub measure: f64,
    /// `|x_K - x_L|` for interior faces, `|x_K - x_sigma|` on the boundary.
    pub distance: f64,
    /// Distance from the owner center to the face hyperplane.
    pub owner_distance: f64,
    pub transmissibility: f64,
    /// Unit normal pointing out of the owner.
    pub normal: [f64; 2],
    pub diamond_measure: f64,
}

impl Face {
    pub fn is_interior(&self) -> bool {
        self.neighbor.is_some()
    }

    /// Distance from the center of `cell` to this face.
    pub fn cell_distance(&self, cell: usize) -> f64 {
        if cell == self.owner {
            self.owner_distance
        } else {
            self.distance - self.owner_distance
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    layout: Layout,
    cells: Vec<Cell>,
    faces: Vec<Face>,
    cell_faces: Vec<Vec<usize>>,
    size: f64,
    regularity: f64,
    measure: f64,
}

impl Mesh {
    /// Uniform subdivision of `[lo, hi]` into `cells` intervals.
    pub fn uniform_1d(lo: f64, hi: f64, cells: usize) -> Result<Self, MeshError> {
        if cells < 2 {
            return Err(MeshError::TooFewCells { min: 2, got: cells });
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(MeshError::DegenerateExtent { lo, hi });
        }
        let h = (hi - lo) / cells as f64;
        let cell_list: Vec<Cell> = (0..cells)
            .map(|k| {
                let a = lo + k as f64 * h;
                let b = if k + 1 == cells {
                    hi
                } else {
                    lo + (k + 1) as f64 * h
                };
                Cell {
                    center: [0.5 * (a + b), 0.0],
                    measure: h,
                    lower: [a, 0.0],
                    upper: [b, 0.0],
                    diameter: h,
                }
            })
            .collect();

        let mut faces = Vec::with_capacity(cells + 1);
        faces.push(boundary_face(0, 1.0, 0.5 * h, [-1.0, 0.0], 1));
        for k in 0..cells - 1 {
            faces.push(interior_face(k, k + 1, 1.0, h, [1.0, 0.0], 1));
        }
        faces.push(boundary_face(cells - 1, 1.0, 0.5 * h, [1.0, 0.0], 1));

        Ok(Self::assemble(
            Layout::Interval { lo, hi, cells },
            cell_list,
            faces,
            hi - lo,
        ))
    }

    /// Cartesian grid of `nx * ny` rectangles; cell `(i, j)` has index `j * nx + i`.
    pub fn cartesian_2d(
        lo: [f64; 2],
        hi: [f64; 2],
        nx: usize,
        ny: usize,
    ) -> Result<Self, MeshError> {
        for n in [nx, ny] {
            if n < 2 {
                return Err(MeshError::TooFewCells { min: 2, got: n });
            }
        }
        for d in 0..2 {
            if !(hi[d] > lo[d]) || !lo[d].is_finite() || !hi[d].is_finite() {
                return Err(MeshError::DegenerateExtent {
                    lo: lo[d],
                    hi: hi[d],
                });
            }
        }
        let dx = (hi[0] - lo[0]) / nx as f64;
        let dy = (hi[1] - lo[1]) / ny as f64;
        let diameter = dx.hypot(dy);
        let mut cells = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x0 = lo[0] + i as f64 * dx;
                let y0 = lo[1] + j as f64 * dy;
                cells.push(Cell {
                    center: [x0 + 0.5 * dx, y0 + 0.5 * dy],
                    measure: dx * dy,
                    lower: [x0, y0],
                    upper: [x0 + dx, y0 + dy],
                    diameter,
                });
            }
        }
        let idx = |i: usize, j: usize| j * nx + i;
        let mut faces = Vec::new();
        for j in 0..ny {
            for i in 0..nx - 1 {
                faces.push(interior_face(
                    idx(i, j),
                    idx(i + 1, j),
                    dy,
                    dx,
                    [1.0, 0.0],
                    2,
                ));
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                faces.push(interior_face(
                    idx(i, j),
                    idx(i, j + 1),
                    dx,
                    dy,
                    [0.0, 1.0],
                    2,
                ));
            }
        }
        for j in 0..ny {
            faces.push(boundary_face(idx(0, j), dy, 0.5 * dx, [-1.0, 0.0], 2));
            faces.push(boundary_face(idx(nx - 1, j), dy, 0.5 * dx, [1.0, 0.0], 2));
        }
        for i in 0..nx {
            faces.push(boundary_face(idx(i, 0), dx, 0.5 * dy, [0.0, -1.0], 2));
            faces.push(boundary_face(idx(i, ny - 1), dx, 0.5 * dy, [0.0, 1.0], 2));
        }
        let measure = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        Ok(Self::assemble(
            Layout::Rectangle { lo, hi, nx, ny },
            cells,
            faces,
            measure,
        ))
    }

    fn assemble(layout: Layout, cells: Vec<Cell>, faces: Vec<Face>, measure: f64) -> Self {
        let mut cell_faces = vec![Vec::new(); cells.len()];
        for (s, f) in faces.iter().enumerate() {
            cell_faces[f.owner].push(s);
            if let Some(l) = f.neighbor {
                cell_faces[l].push(s);
            }
        }
        let size = cells.iter().map(|c| c.diameter).fold(0.0, f64::max);
        let regularity = faces
            .iter()
            .flat_map(|f| {
                let own = f.owner_distance / f.distance;
                let other = f
                    .neighbor
                    .map(|_| (f.distance - f.owner_distance) / f.distance);
                std::iter::once(own).chain(other)
            })
            .fold(f64::INFINITY, f64::min);
        Self {
            layout,
            cells,
            faces,
            cell_faces,
            size,
            regularity,
            measure,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dimension(&self) -> usize {
        match self.layout {
            Layout::Interval { .. } => 1,
            Layout::Rectangle { .. } => 2,
        }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn cell_faces(&self, cell: usize) -> &[usize] {
        &self.cell_faces[cell]
    }

    pub fn interior_faces(&self) -> impl Iterator<Item = (usize, &Face)> {
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_interior())
    }

    /// `h_T`, the largest cell diameter.
    pub fn size(&self) -> f64 {
        self.size
    }

    /// `zeta_T = min d(x_K, sigma) / d_sigma`.
    pub fn regularity(&self) -> f64 {
        self.regularity
    }

    /// Measure of the whole domain.
    pub fn domain_measure(&self) -> f64 {
        self.measure
    }

    fn check_adjacent(&self, cell: usize, face: usize) -> Result<&Face, MeshError> {
        let f = self
            .faces
            .get(face)
            .ok_or(MeshError::NotAdjacent { cell, face })?;
        if f.owner == cell || f.neighbor == Some(cell) {
            Ok(f)
        } else {
            Err(MeshError::NotAdjacent { cell, face })
        }
    }

    /// Value of `field` seen from `cell` across `face`: the neighbor value on
    /// interior faces, the cell's own value on the boundary.
    pub fn mirror_value(&self, field: &[f64], cell: usize, face: usize) -> Result<f64, MeshError> {
        let f = self.check_adjacent(cell, face)?;
        Ok(match f.neighbor {
            Some(l) if f.owner == cell => field[l],
            Some(_) => field[f.owner],
            None => field[cell],
        })
    }

    /// Oriented jump `D_{K sigma} c = c_{K sigma} - c_K`.
    pub fn jump(&self, field: &[f64], cell: usize, face: usize) -> Result<f64, MeshError> {
        Ok(self.mirror_value(field, cell, face)? - field[cell])
    }

    /// +1 when `cell` owns `face`, -1 otherwise.
    pub fn orientation(&self, cell: usize, face: usize) -> Result<f64, MeshError> {
        let f = self.check_adjacent(cell, face)?;
        Ok(if f.owner == cell { 1.0 } else { -1.0 })
    }

    /// Index of the cell containing `point` (closed on the lower side).
    pub fn locate(&self, point: [f64; 2]) -> Option<usize> {
        match self.layout {
            Layout::Interval { lo, hi, cells } => {
                let x = point[0];
                if !(lo..=hi).contains(&x) {
                    return None;
                }
                let k = ((x - lo) / (hi - lo) * cells as f64).floor() as usize;
                Some(k.min(cells - 1))
            }
            Layout::Rectangle { lo, hi, nx, ny } => {
                let mut ij = [0usize; 2];
                for d in 0..2 {
                    if !(lo[d]..=hi[d]).contains(&point[d]) {
                        return None;
                    }
                    let n = if d == 0 { nx } else { ny };
                    let k = ((point[d] - lo[d]) / (hi[d] - lo[d]) * n as f64).floor() as usize;
                    ij[d] = k.min(n - 1);
                }
                Some(ij[1] * nx + ij[0])
            }
        }
    }

    /// For a `finer` mesh that subdivides every cell of `self` into the same
    /// number of congruent cells, returns the coarse cell of each fine cell.
    pub fn coarse_parents(&self, finer: &Mesh) -> Result<Vec<usize>, MeshError> {
        let ratio = |coarse: usize, fine: usize| -> Result<usize, MeshError> {
            if fine < coarse || fine % coarse != 0 {
                Err(MeshError::NotNested(format!(
                    "{fine} cells do not refine {coarse}"
                )))
            } else {
                Ok(fine / coarse)
            }
        };
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        match (self.layout, finer.layout) {
            (
                Layout::Interval { lo, hi, cells },
                Layout::Interval {
                    lo: flo,
                    hi: fhi,
                    cells: fcells,
                },
            ) => {
                if !same(lo, flo) || !same(hi, fhi) {
                    return Err(MeshError::NotNested("different domains".into()));
                }
                let r = ratio(cells, fcells)?;
                Ok((0..fcells).map(|k| k / r).collect())
            }
            (
                Layout::Rectangle { lo, hi, nx, ny },
                Layout::Rectangle {
                    lo: flo,
                    hi: fhi,
                    nx: fnx,
                    ny: fny,
                },
            ) => {
                if !(0..2).all(|d| same(lo[d], flo[d]) && same(hi[d], fhi[d])) {
                    return Err(MeshError::NotNested("different domains".into()));
                }
                let rx = ratio(nx, fnx)?;
                let ry = ratio(ny, fny)?;
                Ok((0..fnx * fny)
                    .map(|k| {
                        let (i, j) = (k % fnx, k / fnx);
                        (j / ry) * nx + i / rx
                    })
                    .collect())
            }
            _ => Err(MeshError::NotNested("different mesh families".into())),
        }
    }
}

fn interior_face(
    owner: usize,
    neighbor: usize,
    measure: f64,
    distance: f64,
    normal: [f64; 2],
    dim: usize,
) -> Face {
    Face {
        owner,
        neighbor: Some(neighbor),
        measure,
        distance,
        owner_distance: 0.5 * distance,
        transmissibility: measure / distance,
        normal,
        diamond_measure: measure * distance / dim as f64,
    }
}

fn boundary_face(owner: usize, measure: f64, distance: f64, normal: [f64; 2], dim: usize) -> Face {
    Face {
        owner,
        neighbor: None,
        measure,
        distance,
        owner_distance: distance,
        transmissibility: measure / distance,
        normal,
        diamond_measure: measure * distance / dim as f64,
    }
}

/// Time levels `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeGridError {
    #[error("time levels must start at 0 and increase strictly")]
    NotIncreasing,
    #[error("invalid step {dt} for final time {final_time}")]
    BadStep { dt: f64, final_time: f64 },
}

impl TimeGrid {
    pub fn from_times(times: Vec<f64>) -> Result<Self, TimeGridError> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TimeGridError::NotIncreasing);
        }
        Ok(Self { times })
    }

    /// Uniform steps of size `dt`; the last step is shortened if `dt` does
    /// not divide `final_time` (up to a relative slack of 1e-9).
    pub fn uniform(final_time: f64, dt: f64) -> Result<Self, TimeGridError> {
        if !(dt > 0.0) || !(final_time > 0.0) || !dt.is_finite() || !final_time.is_finite() {
            return Err(TimeGridError::BadStep { dt, final_time });
        }
        let ratio = final_time / dt;
        let mut steps = ratio.round() as usize;
        if (ratio - steps as f64).abs() > 1e-9 * ratio.max(1.0) {
            steps = ratio.ceil() as usize;
        }
        let steps = steps.max(1);
        let mut times: Vec<f64> = (0..steps).map(|k| k as f64 * dt).collect();
        times.push(final_time);
        Self::from_times(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step(&self, n: usize) -> f64 {
        self.times[n] - self.times[n - 1]
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Largest time step.
    pub fn max_step(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_interval_four_cells() {
        let m = Mesh::uniform_1d(0.0, 1.0, 4).unwrap();
        assert!(m.cells().iter().all(|c| c.measure == 0.25));
        for (_, f) in m.interior_faces() {
            assert_eq!(f.transmissibility, 4.0);
        }
        assert_eq!(m.regularity(), 0.5);
        let ext: Vec<_> = m.faces().iter().filter(|f| !f.is_interior()).collect();
        assert_eq!(ext.len(), 2);
        assert!(ext.iter().all(|f| f.distance == 0.125));
    }

    #[test]
    fn two_cells_single_interior_face() {
        let m = Mesh::uniform_1d(0.0, 1.0, 2).unwrap();
        let interior: Vec<_> = m.interior_faces().collect();
        assert_eq!(interior.len(), 1);
        assert_eq!(interior[0].1.distance, 0.5);
        assert_eq!(interior[0].1.transmissibility, 2.0);
    }

    #[test]
    fn long_interval() {
        let m = Mesh::uniform_1d(0.0, 22.0, 110).unwrap();
        for c in m.cells() {
            assert_relative_eq!(c.measure, 0.2, max_relative = 1e-14);
        }
        assert_relative_eq!(m.size(), 0.2, max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Mesh::uniform_1d(0.0, 1.0, 1),
            Err(MeshError::TooFewCells { .. })
        ));
        assert!(matches!(
            Mesh::uniform_1d(1.0, 1.0, 4),
            Err(MeshError::DegenerateExtent { .. })
        ));
        assert!(Mesh::cartesian_2d([0.0, 0.0], [0.0, 1.0], 3, 3).is_err());
        assert!(Mesh::cartesian_2d([0.0, 0.0], [1.0, 1.0], 1, 3).is_err());
    }

    #[test]
    fn reactive_grid_geometry() {
        let m = Mesh::cartesian_2d([0.0, 0.0], [22.0, 16.0], 110, 80).unwrap();
        assert_eq!(m.num_cells(), 8800);
        for c in m.cells() {
            assert_relative_eq!(c.measure, 0.04, max_relative = 1e-12);
        }
        for (_, f) in m.interior_faces() {
            assert_relative_eq!(f.transmissibility, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn smallest_grid_counts() {
        let m = Mesh::cartesian_2d([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        assert_eq!(m.num_cells(), 4);
        assert_eq!(m.interior_faces().count(), 4);
        assert_eq!(m.faces().iter().filter(|f| !f.is_interior()).count(), 8);
    }

    #[test]
    fn tiling() {
        let m = Mesh::cartesian_2d([0.0, 0.0], [1.0, 1.0], 3, 2).unwrap();
        let total: f64 = m.cells().iter().map(|c| c.measure).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn mirror_values() {
        let m = Mesh::uniform_1d(0.0, 1.0, 2).unwrap();
        let c = [0.2, 0.7];
        let (s, _) = m.interior_faces().next().unwrap();
        assert_eq!(m.mirror_value(&c, 0, s).unwrap(), 0.7);
        assert_eq!(m.mirror_value(&c, 1, s).unwrap(), 0.2);
        let ext = m
            .cell_faces(0)
            .iter()
            .copied()
            .find(|&s| !m.faces()[s].is_interior())
            .unwrap();
        assert_eq!(m.mirror_value(&c, 0, ext).unwrap(), 0.2);
        assert_eq!(m.jump(&c, 0, ext).unwrap(), 0.0);
        assert_eq!(
            m.mirror_value(&c, 1, ext),
            Err(MeshError::NotAdjacent { cell: 1, face: ext })
        );
    }

    #[test]
    fn nested_parents() {
        let coarse = Mesh::cartesian_2d([0.0, 0.0], [2.0, 1.0], 2, 2).unwrap();
        let fine = Mesh::cartesian_2d([0.0, 0.0], [2.0, 1.0], 4, 4).unwrap();
        let p = coarse.coarse_parents(&fine).unwrap();
        assert_eq!(&p[..4], &[0, 0, 1, 1]);
        assert_eq!(p[15], 3);
        let odd = Mesh::cartesian_2d([0.0, 0.0], [2.0, 1.0], 3, 4).unwrap();
        assert!(coarse.coarse_parents(&odd).is_err());
    }

    #[test]
    fn time_grid() {
        let g = TimeGrid::uniform(0.25, 1.0 / 64.0).unwrap();
        assert_eq!(g.num_steps(), 16);
        assert_eq!(g.final_time(), 0.25);
        let g = TimeGrid::uniform(1.0, 0.3).unwrap();
        assert_eq!(g.num_steps(), 4);
        assert!((g.step(4) - 0.1).abs() < 1e-12);
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::uniform(1.0, 0.0).is_err());
    }

    fn arbitrary_mesh() -> impl Strategy<Value = Mesh> {
        prop_oneof![
            (2usize..40, 0.1f64..5.0).prop_map(|(n, l)| Mesh::uniform_1d(-1.0, l, n).unwrap()),
            (2usize..12, 2usize..12, 0.1f64..5.0, 0.1f64..5.0).prop_map(|(nx, ny, a, b)| {
                Mesh::cartesian_2d([0.0, -1.0], [a, b], nx, ny).unwrap()
            }),
        ]
    }

    proptest! {
        #[test]
        fn geometry_identities(m in arbitrary_mesh()) {
            let omega = m.domain_measure();
            let cells: f64 = m.cells().iter().map(|c| c.measure).sum();
            prop_assert!((cells - omega).abs() <= 1e-12 * omega);
            let diamonds: f64 = m.faces().iter().map(|f| f.diamond_measure).sum();
            prop_assert!((diamonds - omega).abs() <= 1e-12 * omega);
            let d = m.dimension() as f64;
            for f in m.faces() {
                prop_assert!(f.transmissibility > 0.0 && f.distance > 0.0);
                let halves = f.measure * f.cell_distance(f.owner) / d
                    + f.neighbor.map_or(0.0, |l| f.measure * f.cell_distance(l) / d);
                prop_assert!((halves - f.diamond_measure).abs() <= 1e-14 * f.diamond_measure);
                if let Some(l) = f.neighbor {
                    // x_L - x_K is parallel to the normal, hence orthogonal to the face
                    let a = m.cells()[f.owner].center;
                    let b = m.cells()[l].center;
                    let v = [b[0] - a[0], b[1] - a[1]];
                    let cross = v[0] * f.normal[1] - v[1] * f.normal[0];
                    prop_assert!(cross.abs() <= 1e-12 * f.distance);
                    prop_assert!(((v[0] * f.normal[0] + v[1] * f.normal[1]) - f.distance).abs() <= 1e-12 * f.distance);
                }
            }
            prop_assert!(m.regularity() > 0.0);
        }

        #[test]
        fn regularity_matches_brute_force(m in arbitrary_mesh()) {
            // distance from each center to the face hyperplane, from raw cell boxes
            let mut zeta = f64::INFINITY;
            for (k, c) in m.cells().iter().enumerate() {
                for &s in m.cell_faces(k) {
                    let f = &m.faces()[s];
                    let axis = if f.normal[0] != 0.0 { 0 } else { 1 };
                    let sign = if f.owner == k { 1.0 } else { -1.0 } * f.normal[axis];
                    let plane = if sign > 0.0 { c.upper[axis] } else { c.lower[axis] };
                    zeta = zeta.min((plane - c.center[axis]).abs() / f.distance);
                }
            }
            prop_assert!((zeta - m.regularity()).abs() <= 1e-12);
        }

        #[test]
        fn jumps_are_antisymmetric(m in arbitrary_mesh(), seed in 0u64..1000) {
            let field: Vec<f64> = (0..m.num_cells()).map(|k| ((k as u64 * 7919 + seed) % 101) as f64 / 17.0).collect();
            for (s, f) in m.faces().iter().enumerate() {
                match f.neighbor {
                    Some(l) => {
                        let a = m.jump(&field, f.owner, s).unwrap();
                        let b = m.jump(&field, l, s).unwrap();
                        prop_assert_eq!(a, -b);
                    }
                    None => prop_assert_eq!(m.jump(&field, f.owner, s).unwrap(), 0.0),
                }
            }
        }
    }
}
