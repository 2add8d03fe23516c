//! Block-sparse Jacobians and the direct solvers used by Newton.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, NumericLu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Conj, MatMut, Par};
use thiserror::Error;

use crate::mesh::Mesh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("zero pivot in column {0}")]
    Singular(usize),
    #[error("solution is not finite")]
    NonFinite,
    #[error("right-hand side has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("sparse factorization failed: {0}")]
    Backend(String),
}

/// Nonzero blocks of a cell-coupled operator: one diagonal block per cell
/// and a pair of off-diagonal blocks per interior face.
#[derive(Debug)]
pub struct BlockPattern {
    cells: usize,
    block: usize,
    blocks: Vec<(usize, usize)>,
    face_block: Vec<Option<usize>>,
    half_bandwidth: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    // position in the block value array of each CSC entry
    csc_src: Vec<usize>,
}

impl BlockPattern {
    pub fn for_mesh(mesh: &Mesh, block: usize) -> Arc<Self> {
        let cells = mesh.num_cells();
        let mut blocks: Vec<(usize, usize)> = (0..cells).map(|k| (k, k)).collect();
        let mut face_block = vec![None; mesh.num_faces()];
        let mut spread = 0;
        for (s, f) in mesh.interior_faces() {
            let l = f.neighbor.unwrap();
            face_block[s] = Some(blocks.len());
            blocks.push((f.owner, l));
            blocks.push((l, f.owner));
            spread = spread.max(f.owner.abs_diff(l));
        }
        let half_bandwidth = spread * block + block - 1;

        let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); cells];
        for (b, &(_, c)) in blocks.iter().enumerate() {
            by_col[c].push(b);
        }
        let n = cells * block;
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut csc_src = Vec::new();
        col_ptr.push(0);
        for list in by_col.iter_mut() {
            list.sort_by_key(|&b| blocks[b].0);
            for cc in 0..block {
                for &b in list.iter() {
                    let r0 = blocks[b].0 * block;
                    for r in 0..block {
                        row_idx.push(r0 + r);
                        csc_src.push(b * block * block + r * block + cc);
                    }
                }
                col_ptr.push(row_idx.len());
            }
        }
        Arc::new(Self {
            cells,
            block,
            blocks,
            face_block,
            half_bandwidth,
            col_ptr,
            row_idx,
            csc_src,
        })
    }

    pub fn dim(&self) -> usize {
        self.cells * self.block
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    /// Largest `|row - col|` over all stored entries.
    pub fn half_bandwidth(&self) -> usize {
        self.half_bandwidth
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }
}

/// Values over a [`BlockPattern`], each block stored row-major.
#[derive(Debug, Clone)]
pub struct BlockSparseMatrix {
    pattern: Arc<BlockPattern>,
    values: Vec<f64>,
}

impl BlockSparseMatrix {
    pub fn zeros(pattern: Arc<BlockPattern>) -> Self {
        let len = pattern.blocks.len() * pattern.block * pattern.block;
        Self {
            pattern,
            values: vec![0.0; len],
        }
    }

    pub fn pattern(&self) -> &Arc<BlockPattern> {
        &self.pattern
    }

    fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let bb = self.pattern.block * self.pattern.block;
        b * bb..(b + 1) * bb
    }

    pub fn diag_block_mut(&mut self, cell: usize) -> &mut [f64] {
        let r = self.block_range(cell);
        &mut self.values[r]
    }

    /// The `(owner, neighbor)` and `(neighbor, owner)` blocks of an interior face.
    pub fn face_blocks_mut(&mut self, face: usize) -> (&mut [f64], &mut [f64]) {
        let b = self.pattern.face_block[face].expect("boundary face has no off-diagonal block");
        let bb = self.pattern.block * self.pattern.block;
        let (a, rest) = self.values[b * bb..(b + 2) * bb].split_at_mut(bb);
        (a, rest)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        let nb = p.block;
        let mut y = vec![0.0; p.dim()];
        for (b, &(r, c)) in p.blocks.iter().enumerate() {
            let vals = &self.values[b * nb * nb..(b + 1) * nb * nb];
            for i in 0..nb {
                let mut acc = 0.0;
                for j in 0..nb {
                    acc += vals[i * nb + j] * x[c * nb + j];
                }
                y[r * nb + i] += acc;
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let p = &self.pattern;
        let nb = p.block;
        let mut d = vec![vec![0.0; p.dim()]; p.dim()];
        for (b, &(r, c)) in p.blocks.iter().enumerate() {
            for i in 0..nb {
                for j in 0..nb {
                    d[r * nb + i][c * nb + j] += self.values[b * nb * nb + i * nb + j];
                }
            }
        }
        d
    }

    fn csc_values(&self) -> Vec<f64> {
        self.pattern
            .csc_src
            .iter()
            .map(|&s| self.values[s])
            .collect()
    }
}

/// Banded LU with partial pivoting, LAPACK band layout.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    fn ldab(kl: usize, ku: usize) -> usize {
        2 * kl + ku + 1
    }

    #[inline]
    fn at(&self, i: usize, c: usize) -> usize {
        (self.kl + self.ku + i - c) + c * Self::ldab(self.kl, self.ku)
    }

    /// Factorizes a matrix with `kl` sub- and `ku` super-diagonals.
    pub fn factor_from(
        n: usize,
        kl: usize,
        ku: usize,
        entries: impl Iterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, LinearSolveError> {
        let mut lu = Self {
            n,
            kl,
            ku,
            ab: vec![0.0; Self::ldab(kl, ku) * n],
            pivots: vec![0; n],
        };
        for (i, c, v) in entries {
            debug_assert!(i <= c + kl && c <= i + ku);
            let k = lu.at(i, c);
            lu.ab[k] += v;
        }
        lu.factor()?;
        Ok(lu)
    }

    fn factor(&mut self) -> Result<(), LinearSolveError> {
        let (n, kl) = (self.n, self.kl);
        let kv = self.kl + self.ku;
        let mut ju = 0;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0;
            let mut best = self.ab[self.at(j, j)].abs();
            for t in 1..=km {
                let v = self.ab[self.at(j + t, j)].abs();
                if v > best {
                    best = v;
                    p = t;
                }
            }
            self.pivots[j] = j + p;
            if best == 0.0 || !best.is_finite() {
                return Err(LinearSolveError::Singular(j));
            }
            ju = ju.max((j + self.ku + p).min(n - 1));
            if p != 0 {
                for c in j..=ju {
                    let (a, b) = (self.at(j, c), self.at(j + p, c));
                    self.ab.swap(a, b);
                }
            }
            let piv = self.ab[self.at(j, j)];
            for r in 1..=km {
                let k = self.at(j + r, j);
                self.ab[k] /= piv;
            }
            for c in j + 1..=ju {
                let ujc = self.ab[self.at(j, c)];
                if ujc != 0.0 {
                    for r in 1..=km {
                        let l = self.ab[self.at(j + r, j)];
                        let k = self.at(j + r, c);
                        self.ab[k] -= l * ujc;
                    }
                }
            }
            debug_assert!(ju <= j + kv);
        }
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let p = self.pivots[j];
            if p != j {
                b.swap(j, p);
            }
            let km = self.kl.min(n - 1 - j);
            let bj = b[j];
            for r in 1..=km {
                b[j + r] -= self.ab[self.at(j + r, j)] * bj;
            }
        }
        let kv = self.kl + self.ku;
        for j in (0..n).rev() {
            b[j] /= self.ab[self.at(j, j)];
            let bj = b[j];
            for i in j.saturating_sub(kv)..j {
                b[i] -= self.ab[self.at(i, j)] * bj;
            }
        }
    }
}

struct SparseCache {
    symbolic: SymbolicSparseColMat<usize>,
    lu: SymbolicLu<usize>,
    numeric: NumericLu<usize, f64>,
}

/// Direct solver for matrices over one [`BlockPattern`]. Narrow patterns
/// (one-dimensional meshes) use a banded LU; the others a sparse LU whose
/// symbolic analysis is computed once and reused.
pub struct LuSolver {
    pattern: Arc<BlockPattern>,
    sparse: Option<SparseCache>,
}

impl std::fmt::Debug for LuSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuSolver")
            .field("dim", &self.pattern.dim())
            .field("banded", &self.is_banded())
            .finish()
    }
}

impl LuSolver {
    pub fn new(pattern: &Arc<BlockPattern>) -> Self {
        Self {
            pattern: Arc::clone(pattern),
            sparse: None,
        }
    }

    pub fn is_banded(&self) -> bool {
        self.pattern.half_bandwidth < 3 * self.pattern.block
    }

    /// Overwrites `rhs` with the solution of `a x = rhs`.
    pub fn solve(
        &mut self,
        a: &BlockSparseMatrix,
        rhs: &mut [f64],
    ) -> Result<(), LinearSolveError> {
        let n = self.pattern.dim();
        if rhs.len() != n {
            return Err(LinearSolveError::Dimension {
                expected: n,
                got: rhs.len(),
            });
        }
        debug_assert!(Arc::ptr_eq(&self.pattern, a.pattern()));
        if self.is_banded() {
            let p = &self.pattern;
            let nb = p.block;
            let entries = p.blocks.iter().enumerate().flat_map(|(b, &(r, c))| {
                (0..nb * nb)
                    .map(move |t| (r * nb + t / nb, c * nb + t % nb, a.values[b * nb * nb + t]))
            });
            let bw = p.half_bandwidth;
            BandedLu::factor_from(n, bw, bw, entries)?.solve_in_place(rhs);
        } else {
            self.solve_sparse(a, rhs)?;
        }
        if rhs.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LinearSolveError::NonFinite)
        }
    }

    fn solve_sparse(
        &mut self,
        a: &BlockSparseMatrix,
        rhs: &mut [f64],
    ) -> Result<(), LinearSolveError> {
        let n = self.pattern.dim();
        if self.sparse.is_none() {
            let symbolic = SymbolicSparseColMat::new_checked(
                n,
                n,
                self.pattern.col_ptr.clone(),
                None,
                self.pattern.row_idx.clone(),
            );
            let lu = factorize_symbolic_lu(symbolic.as_ref(), Default::default())
                .map_err(|e| LinearSolveError::Backend(format!("{e:?}")))?;
            self.sparse = Some(SparseCache {
                symbolic,
                lu,
                numeric: NumericLu::new(),
            });
        }
        let cache = self.sparse.as_mut().unwrap();
        let vals = a.csc_values();
        let mut mem = MemBuffer::new(
            cache
                .lu
                .factorize_numeric_lu_scratch::<f64>(Par::Seq, Default::default())
                .or(cache.lu.solve_in_place_scratch::<f64>(1, Par::Seq)),
        );
        let factors = cache
            .lu
            .factorize_numeric_lu(
                &mut cache.numeric,
                SparseColMatRef::new(cache.symbolic.as_ref(), &vals),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| LinearSolveError::Backend(format!("{e:?}")))?;
        factors.solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(rhs, n, 1),
            Par::Seq,
            MemStack::new(&mut mem),
        );
        Ok(())
    }
}
