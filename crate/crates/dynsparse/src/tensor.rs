//! Dense and block-sparse matrix types plus the kernels used in the
//! forward, backward and weight-gradient passes.
//!
//! Weight matrices are `[O, I]` (output dim by input dim); activations are
//! `[batch, I]` row-major. Sparsity lives at the granularity of `B x B`
//! blocks, stored as a sorted coordinate list so prune/grow set operations
//! and iteration order are deterministic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instrumentation counters for the sparse kernels.
///
/// Used by the FLOPs tests to check the analytic multiply counts and by the
/// always-sparse audit to detect densification of sparse weights.
pub mod counters {
    use std::cell::Cell;

    // Thread-local so concurrent runs (and parallel tests) don't interleave.
    thread_local! {
        static FORWARD_MULS: Cell<u64> = const { Cell::new(0) };
        static BACKWARD_MULS: Cell<u64> = const { Cell::new(0) };
        static BLOCKS_TOUCHED: Cell<u64> = const { Cell::new(0) };
        static DENSIFY_CALLS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        FORWARD_MULS.with(|c| c.set(0));
        BACKWARD_MULS.with(|c| c.set(0));
        BLOCKS_TOUCHED.with(|c| c.set(0));
        DENSIFY_CALLS.with(|c| c.set(0));
    }

    pub fn forward_muls() -> u64 {
        FORWARD_MULS.with(|c| c.get())
    }
    pub fn backward_muls() -> u64 {
        BACKWARD_MULS.with(|c| c.get())
    }
    pub fn blocks_touched() -> u64 {
        BLOCKS_TOUCHED.with(|c| c.get())
    }
    pub fn densify_calls() -> u64 {
        DENSIFY_CALLS.with(|c| c.get())
    }

    pub(super) fn add_forward_muls(n: u64) {
        FORWARD_MULS.with(|c| c.set(c.get() + n));
    }
    pub(super) fn add_backward_muls(n: u64) {
        BACKWARD_MULS.with(|c| c.set(c.get() + n));
    }
    pub(super) fn add_blocks_touched(n: u64) {
        BLOCKS_TOUCHED.with(|c| c.set(c.get() + n));
    }
    pub(super) fn add_densify_call() {
        DENSIFY_CALLS.with(|c| c.set(c.get() + 1));
    }
}

/// Matrix dimensions, rows = output dim, cols = input dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "shape dims must be >= 1, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Block-grid dimensions for block size `b`; errors on indivisible shapes.
    pub fn block_grid(&self, block_size: usize) -> Result<(usize, usize)> {
        if block_size == 0 || !self.rows.is_multiple_of(block_size) || !self.cols.is_multiple_of(block_size) {
            return Err(Error::IndivisibleShape {
                rows: self.rows,
                cols: self.cols,
                block_size,
            });
        }
        Ok((self.rows / block_size, self.cols / block_size))
    }
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            values: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for {}x{}, got {}",
                shape.len(),
                shape.rows,
                shape.cols,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.shape.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Coordinate of one block in the block grid: (block_row, block_col).
pub type BlockCoord = (usize, usize);

/// Set of active block coordinates for one weight matrix.
///
/// Coordinates are unique and strictly sorted in row-major order; that order
/// doubles as the storage order of [`BlockSparseMatrix`] values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    pub shape: Shape,
    pub block_size: usize,
    pub active_blocks: Vec<BlockCoord>,
}

impl SparsityMask {
    pub fn new(shape: Shape, block_size: usize, mut active_blocks: Vec<BlockCoord>) -> Result<Self> {
        let (grid_rows, grid_cols) = shape.block_grid(block_size)?;
        active_blocks.sort_unstable();
        active_blocks.dedup();
        if active_blocks.is_empty() {
            return Err(Error::DegenerateSparsity("mask has no active blocks".into()));
        }
        for &(br, bc) in &active_blocks {
            if br >= grid_rows || bc >= grid_cols {
                return Err(Error::InvalidArgument(format!(
                    "block ({br}, {bc}) outside {grid_rows}x{grid_cols} grid"
                )));
            }
        }
        Ok(Self {
            shape,
            block_size,
            active_blocks,
        })
    }

    /// Mask with every block active.
    pub fn full(shape: Shape, block_size: usize) -> Result<Self> {
        let (gr, gc) = shape.block_grid(block_size)?;
        let coords = (0..gr).flat_map(|r| (0..gc).map(move |c| (r, c))).collect();
        Self::new(shape, block_size, coords)
    }

    pub fn grid(&self) -> (usize, usize) {
        // validated at construction
        self.shape.block_grid(self.block_size).unwrap()
    }

    pub fn num_blocks_total(&self) -> usize {
        let (gr, gc) = self.grid();
        gr * gc
    }

    pub fn num_active(&self) -> usize {
        self.active_blocks.len()
    }

    /// Fraction of nonzero weight slots, f = 1 - s.
    pub fn density(&self) -> f64 {
        let b2 = (self.block_size * self.block_size) as f64;
        self.active_blocks.len() as f64 * b2 / self.shape.len() as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn contains(&self, coord: BlockCoord) -> bool {
        self.active_blocks.binary_search(&coord).is_ok()
    }

    /// Index of `coord` in the active list.
    pub fn position(&self, coord: BlockCoord) -> Option<usize> {
        self.active_blocks.binary_search(&coord).ok()
    }

    /// All block coordinates currently inactive, in row-major order.
    pub fn inactive_blocks(&self) -> Vec<BlockCoord> {
        let (gr, gc) = self.grid();
        let mut out = Vec::with_capacity(gr * gc - self.active_blocks.len());
        let mut it = self.active_blocks.iter().peekable();
        for r in 0..gr {
            for c in 0..gc {
                if it.peek() == Some(&&(r, c)) {
                    it.next();
                } else {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Block-sparse weight matrix: a mask plus the active parameter values.
///
/// `values` holds one row-major `B x B` block per active coordinate, in the
/// mask's coordinate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSparseMatrix {
    pub mask: SparsityMask,
    pub values: Vec<f64>,
}

impl BlockSparseMatrix {
    pub fn zeros(mask: SparsityMask) -> Self {
        let n = mask.num_active() * mask.block_size * mask.block_size;
        Self {
            values: vec![0.0; n],
            mask,
        }
    }

    pub fn block_len(&self) -> usize {
        self.mask.block_size * self.mask.block_size
    }

    /// Values of the `idx`-th active block.
    pub fn block(&self, idx: usize) -> &[f64] {
        let b2 = self.block_len();
        &self.values[idx * b2..(idx + 1) * b2]
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut [f64] {
        let b2 = self.block_len();
        &mut self.values[idx * b2..(idx + 1) * b2]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Block importance norm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
    #[serde(rename = "linf")]
    LInf,
}

/// L^p norm of one block of weights. At block size 1 every choice reduces to
/// the plain magnitude.
pub fn block_norm(block: &[f64], p: NormKind) -> f64 {
    match p {
        NormKind::L1 => block.iter().map(|w| w.abs()).sum(),
        NormKind::L2 => block.iter().map(|w| w * w).sum::<f64>().sqrt(),
        NormKind::LInf => block.iter().fold(0.0, |acc, w| acc.max(w.abs())),
    }
}

/// Uniformly random mask with round((1-s) * n_blocks) active blocks.
pub fn random_mask<R: Rng + ?Sized>(
    shape: Shape,
    block_size: usize,
    sparsity: f64,
    rng: &mut R,
) -> Result<SparsityMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must be in [0, 1), got {sparsity}"
        )));
    }
    let (gr, gc) = shape.block_grid(block_size)?;
    let n_blocks = gr * gc;
    let k = ((1.0 - sparsity) * n_blocks as f64).round() as usize;
    if k == 0 {
        return Err(Error::DegenerateSparsity(format!(
            "sparsity {sparsity} leaves 0 of {n_blocks} blocks active"
        )));
    }
    let k = k.min(n_blocks);
    if k == n_blocks {
        // full mask: skip sampling so the RNG stream matches dense init
        return SparsityMask::full(shape, block_size);
    }
    let mut coords: Vec<BlockCoord> = rand::seq::index::sample(rng, n_blocks, k)
        .into_iter()
        .map(|i| (i / gc, i % gc))
        .collect();
    coords.sort_unstable();
    SparsityMask::new(shape, block_size, coords)
}

/// Copy the masked entries of a dense matrix; everything off-mask is dropped.
pub fn sparsify(dense: &DenseMatrix, mask: &SparsityMask) -> Result<BlockSparseMatrix> {
    if dense.shape != mask.shape {
        return Err(Error::DimensionMismatch(format!(
            "dense {}x{} vs mask {}x{}",
            dense.shape.rows, dense.shape.cols, mask.shape.rows, mask.shape.cols
        )));
    }
    let b = mask.block_size;
    let mut values = Vec::with_capacity(mask.num_active() * b * b);
    for &(br, bc) in &mask.active_blocks {
        for r in 0..b {
            for c in 0..b {
                values.push(dense.get(br * b + r, bc * b + c));
            }
        }
    }
    Ok(BlockSparseMatrix {
        mask: mask.clone(),
        values,
    })
}

/// Expand to a dense matrix with exact zeros off the mask.
pub fn densify(sparse: &BlockSparseMatrix) -> DenseMatrix {
    counters::add_densify_call();
    let b = sparse.mask.block_size;
    let mut out = DenseMatrix::zeros(sparse.mask.shape);
    for (idx, &(br, bc)) in sparse.mask.active_blocks.iter().enumerate() {
        let block = sparse.block(idx);
        for r in 0..b {
            for c in 0..b {
                out.set(br * b + r, bc * b + c, block[r * b + c]);
            }
        }
    }
    out
}

/// y[b, i] = sum_j M[i, j] x[b, j], touching only active blocks.
pub fn spmm_forward(w: &BlockSparseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    let o = w.mask.shape.rows;
    let i_dim = w.mask.shape.cols;
    if x.shape.cols != i_dim {
        return Err(Error::DimensionMismatch(format!(
            "weight cols {} vs input cols {}",
            i_dim, x.shape.cols
        )));
    }
    let batch = x.shape.rows;
    let b = w.mask.block_size;
    let mut y = DenseMatrix::zeros(Shape { rows: batch, cols: o });
    for (idx, &(br, bc)) in w.mask.active_blocks.iter().enumerate() {
        let block = w.block(idx);
        for r in 0..b {
            let i = br * b + r;
            for c in 0..b {
                let j = bc * b + c;
                let wv = block[r * b + c];
                for bi in 0..batch {
                    y.values[bi * o + i] += wv * x.values[bi * i_dim + j];
                }
            }
        }
    }
    counters::add_blocks_touched(w.mask.num_active() as u64);
    counters::add_forward_muls((w.mask.num_active() * b * b * batch) as u64);
    Ok(y)
}

/// dX[b, j] = sum_i M[i, j] dY[b, i]: dense error times the transposed sparse matrix.
pub fn spmm_backward_input(w: &BlockSparseMatrix, dy: &DenseMatrix) -> Result<DenseMatrix> {
    let o = w.mask.shape.rows;
    let i_dim = w.mask.shape.cols;
    if dy.shape.cols != o {
        return Err(Error::DimensionMismatch(format!(
            "weight rows {} vs error cols {}",
            o, dy.shape.cols
        )));
    }
    let batch = dy.shape.rows;
    let b = w.mask.block_size;
    let mut dx = DenseMatrix::zeros(Shape {
        rows: batch,
        cols: i_dim,
    });
    for (idx, &(br, bc)) in w.mask.active_blocks.iter().enumerate() {
        let block = w.block(idx);
        for r in 0..b {
            let i = br * b + r;
            for c in 0..b {
                let j = bc * b + c;
                let wv = block[r * b + c];
                for bi in 0..batch {
                    dx.values[bi * i_dim + j] += wv * dy.values[bi * o + i];
                }
            }
        }
    }
    counters::add_backward_muls((w.mask.num_active() * b * b * batch) as u64);
    Ok(dx)
}

/// Sparse outer product: dW[i, j] = sum_b dY[b, i] x[b, j] for active (i, j)
/// only. Off-mask gradients are never materialized.
pub fn sparse_weight_grad(
    x: &DenseMatrix,
    dy: &DenseMatrix,
    mask: &SparsityMask,
) -> Result<BlockSparseMatrix> {
    if x.shape.rows != dy.shape.rows {
        return Err(Error::DimensionMismatch(format!(
            "batch dims {} vs {}",
            x.shape.rows, dy.shape.rows
        )));
    }
    if x.shape.cols != mask.shape.cols || dy.shape.cols != mask.shape.rows {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs dY cols {} / X cols {}",
            mask.shape.rows, mask.shape.cols, dy.shape.cols, x.shape.cols
        )));
    }
    let batch = x.shape.rows;
    let i_dim = x.shape.cols;
    let o = dy.shape.cols;
    let b = mask.block_size;
    let mut out = BlockSparseMatrix::zeros(mask.clone());
    for (idx, &(br, bc)) in mask.active_blocks.iter().enumerate() {
        let block = out.block_mut(idx);
        for r in 0..b {
            let i = br * b + r;
            for c in 0..b {
                let j = bc * b + c;
                let mut acc = 0.0;
                for bi in 0..batch {
                    acc += dy.values[bi * o + i] * x.values[bi * i_dim + j];
                }
                block[r * b + c] = acc;
            }
        }
    }
    Ok(out)
}

/// Full dense outer-product gradient; only needed for gradient-based
/// re-allocation, which gives up the always-sparse property.
pub fn dense_weight_grad(x: &DenseMatrix, dy: &DenseMatrix) -> Result<DenseMatrix> {
    if x.shape.rows != dy.shape.rows {
        return Err(Error::DimensionMismatch(format!(
            "batch dims {} vs {}",
            x.shape.rows, dy.shape.rows
        )));
    }
    let batch = x.shape.rows;
    let i_dim = x.shape.cols;
    let o = dy.shape.cols;
    let mut out = DenseMatrix::zeros(Shape { rows: o, cols: i_dim });
    for bi in 0..batch {
        for i in 0..o {
            let g = dy.values[bi * o + i];
            if g == 0.0 {
                continue;
            }
            for j in 0..i_dim {
                out.values[i * i_dim + j] += g * x.values[bi * i_dim + j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_dense<R: Rng>(shape: Shape, rng: &mut R) -> DenseMatrix {
        let values = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::from_values(shape, values).unwrap()
    }

    // Dense matmul oracle: Y = X W^T for W [O x I], X [batch x I].
    fn dense_forward_oracle(w: &DenseMatrix, x: &DenseMatrix) -> DenseMatrix {
        let (o, i_dim, batch) = (w.shape.rows, w.shape.cols, x.shape.rows);
        let mut y = DenseMatrix::zeros(Shape { rows: batch, cols: o });
        for b in 0..batch {
            for i in 0..o {
                let mut acc = 0.0;
                for j in 0..i_dim {
                    acc += w.get(i, j) * x.get(b, j);
                }
                y.set(b, i, acc);
            }
        }
        y
    }

    fn dense_backward_oracle(w: &DenseMatrix, dy: &DenseMatrix) -> DenseMatrix {
        let (o, i_dim, batch) = (w.shape.rows, w.shape.cols, dy.shape.rows);
        let mut dx = DenseMatrix::zeros(Shape {
            rows: batch,
            cols: i_dim,
        });
        for b in 0..batch {
            for j in 0..i_dim {
                let mut acc = 0.0;
                for i in 0..o {
                    acc += w.get(i, j) * dy.get(b, i);
                }
                dx.set(b, j, acc);
            }
        }
        dx
    }

    // Brute-force triple loop outer product.
    fn outer_product_oracle(x: &DenseMatrix, dy: &DenseMatrix) -> DenseMatrix {
        let (batch, i_dim, o) = (x.shape.rows, x.shape.cols, dy.shape.cols);
        let mut dw = DenseMatrix::zeros(Shape { rows: o, cols: i_dim });
        for b in 0..batch {
            for i in 0..o {
                for j in 0..i_dim {
                    dw.values[i * i_dim + j] += dy.get(b, i) * x.get(b, j);
                }
            }
        }
        dw
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    #[test]
    fn random_mask_counts() {
        let shape = Shape::new(4, 4).unwrap();
        let m = random_mask(shape, 1, 0.75, &mut rng(0)).unwrap();
        assert_eq!(m.num_active(), 4);

        let m = random_mask(shape, 4, 0.0, &mut rng(1)).unwrap();
        assert_eq!(m.active_blocks, vec![(0, 0)]);
        assert_eq!(m.density(), 1.0);

        // 8x8, B=2, s=0.9: round(0.1 * 16) = 2 blocks, achieved s = 1 - 8/64.
        let m = random_mask(Shape::new(8, 8).unwrap(), 2, 0.9, &mut rng(2)).unwrap();
        assert_eq!(m.num_active(), 2);
        assert!((m.sparsity() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn random_mask_errors() {
        let shape = Shape::new(5, 4).unwrap();
        assert!(matches!(
            random_mask(shape, 2, 0.5, &mut rng(0)),
            Err(Error::IndivisibleShape { .. })
        ));
        let shape = Shape::new(8, 8).unwrap();
        assert!(matches!(
            random_mask(shape, 8, 0.6, &mut rng(0)),
            Err(Error::DegenerateSparsity(_))
        ));
    }

    #[test]
    fn random_mask_uniform_inclusion() {
        // Every coordinate's inclusion frequency within 5 sigma of k/n.
        let shape = Shape::new(8, 8).unwrap();
        let trials = 4000;
        let mut counts = vec![0u32; 64];
        let mut r = rng(7);
        for _ in 0..trials {
            let m = random_mask(shape, 1, 0.75, &mut r).unwrap();
            for &(br, bc) in &m.active_blocks {
                counts[br * 8 + bc] += 1;
            }
        }
        let p = 16.0 / 64.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - trials as f64 * p).abs() < 5.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn sparsify_densify_round_trip() {
        let shape = Shape::new(2, 2).unwrap();
        let d = DenseMatrix::from_values(shape, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let full = SparsityMask::full(shape, 1).unwrap();
        let s = sparsify(&d, &full).unwrap();
        assert_eq!(densify(&s), d);

        let m = SparsityMask::new(shape, 1, vec![(0, 0), (1, 1)]).unwrap();
        let s = sparsify(&d, &m).unwrap();
        assert_eq!(s.values, vec![1.0, 4.0]);

        // densify of one 2x2 block on 4x4 leaves 12 structural zeros
        let shape4 = Shape::new(4, 4).unwrap();
        let m = SparsityMask::new(shape4, 2, vec![(0, 0)]).unwrap();
        let mut s = BlockSparseMatrix::zeros(m);
        s.values.copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let d = densify(&s);
        assert_eq!(d.values.iter().filter(|&&v| v == 0.0).count(), 12);

        // round trip is identity on BlockSparseMatrix
        let mut r = rng(3);
        let m = random_mask(shape4, 2, 0.5, &mut r).unwrap();
        let dense = random_dense(shape4, &mut r);
        let s = sparsify(&dense, &m).unwrap();
        assert_eq!(sparsify(&densify(&s), &m).unwrap(), s);
    }

    #[test]
    fn spmm_forward_hand_cases() {
        let shape = Shape::new(2, 2).unwrap();
        // identity under a full mask
        let eye = DenseMatrix::from_values(shape, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = sparsify(&eye, &SparsityMask::full(shape, 1).unwrap()).unwrap();
        let x = DenseMatrix::from_values(shape, vec![0.5, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spmm_forward(&w, &x).unwrap(), x);

        // single active cell M[1,0] = 2, x = [3, 5] -> y = [0, 6]
        let m = SparsityMask::new(shape, 1, vec![(1, 0)]).unwrap();
        let mut w = BlockSparseMatrix::zeros(m);
        w.values[0] = 2.0;
        let x = DenseMatrix::from_values(Shape::new(1, 2).unwrap(), vec![3.0, 5.0]).unwrap();
        assert_eq!(spmm_forward(&w, &x).unwrap().values, vec![0.0, 6.0]);

        // same cell, backward: dY = [7, 11] -> dX = [22, 0]
        let dy = DenseMatrix::from_values(Shape::new(1, 2).unwrap(), vec![7.0, 11.0]).unwrap();
        assert_eq!(spmm_backward_input(&w, &dy).unwrap().values, vec![22.0, 0.0]);
    }

    #[test]
    fn sparse_weight_grad_hand_case() {
        // batch 1, dY = [1, 0], X = [2, 3], full mask -> [[2, 3], [0, 0]]
        let shape = Shape::new(2, 2).unwrap();
        let x = DenseMatrix::from_values(Shape::new(1, 2).unwrap(), vec![2.0, 3.0]).unwrap();
        let dy = DenseMatrix::from_values(Shape::new(1, 2).unwrap(), vec![1.0, 0.0]).unwrap();
        let g = sparse_weight_grad(&x, &dy, &SparsityMask::full(shape, 1).unwrap()).unwrap();
        assert_eq!(densify(&g).values, vec![2.0, 3.0, 0.0, 0.0]);

        let zero_dy = DenseMatrix::zeros(Shape::new(1, 2).unwrap());
        let g = sparse_weight_grad(&x, &zero_dy, &SparsityMask::full(shape, 1).unwrap()).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernels_match_dense_oracles() {
        let mut r = rng(42);
        for case in 0..120 {
            let b = [1usize, 2, 4][case % 3];
            let gr = r.random_range(1..=4usize);
            let gc = r.random_range(1..=4usize);
            let shape = Shape::new(gr * b, gc * b).unwrap();
            let batch = r.random_range(1..=5usize);
            // keep at least one block active on small grids
            let s_max = (1.0 - 0.6 / (gr * gc) as f64).max(0.05);
            let s = r.random_range(0.0..s_max);
            let mask = random_mask(shape, b, s, &mut r).unwrap();
            let wd = random_dense(shape, &mut r);
            let w = sparsify(&wd, &mask).unwrap();
            let wdense = densify(&w);
            let x = random_dense(Shape::new(batch, shape.cols).unwrap(), &mut r);
            let dy = random_dense(Shape::new(batch, shape.rows).unwrap(), &mut r);

            let y = spmm_forward(&w, &x).unwrap();
            let y_ref = dense_forward_oracle(&wdense, &x);
            for (a, e) in y.values.iter().zip(&y_ref.values) {
                assert!(rel_err(*a, *e) <= 1e-12);
            }

            let dx = spmm_backward_input(&w, &dy).unwrap();
            let dx_ref = dense_backward_oracle(&wdense, &dy);
            for (a, e) in dx.values.iter().zip(&dx_ref.values) {
                assert!(rel_err(*a, *e) <= 1e-12);
            }

            let dw = sparse_weight_grad(&x, &dy, &mask).unwrap();
            let dw_ref = sparsify(&outer_product_oracle(&x, &dy), &mask).unwrap();
            for (a, e) in dw.values.iter().zip(&dw_ref.values) {
                assert!(rel_err(*a, *e) <= 1e-12);
            }

            let dwd = dense_weight_grad(&x, &dy).unwrap();
            let dwd_ref = outer_product_oracle(&x, &dy);
            for (a, e) in dwd.values.iter().zip(&dwd_ref.values) {
                assert!(rel_err(*a, *e) <= 1e-12);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let shape = Shape::new(2, 2).unwrap();
        let w = sparsify(
            &DenseMatrix::zeros(shape),
            &SparsityMask::full(shape, 1).unwrap(),
        )
        .unwrap();
        let bad = DenseMatrix::zeros(Shape::new(1, 3).unwrap());
        assert!(spmm_forward(&w, &bad).is_err());
        assert!(spmm_backward_input(&w, &bad).is_err());
        assert!(dense_weight_grad(&bad, &DenseMatrix::zeros(Shape::new(2, 2).unwrap())).is_err());
    }

    #[test]
    fn block_norm_cases() {
        // 3-4-5 triangle
        let b = [3.0, -4.0, 0.0, 0.0];
        assert_eq!(block_norm(&b, NormKind::L1), 7.0);
        assert_eq!(block_norm(&b, NormKind::L2), 5.0);
        assert_eq!(block_norm(&b, NormKind::LInf), 4.0);

        // B = 1: everything is the magnitude
        let one = [-2.0];
        for p in [NormKind::L1, NormKind::L2, NormKind::LInf] {
            assert_eq!(block_norm(&one, p), 2.0);
        }
    }

    #[test]
    fn block_norm_ordering() {
        let mut r = rng(11);
        for _ in 0..200 {
            let block: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
            let l1 = block_norm(&block, NormKind::L1);
            let l2 = block_norm(&block, NormKind::L2);
            let li = block_norm(&block, NormKind::LInf);
            assert!(li <= l2 + 1e-15);
            assert!(l2 <= l1 + 1e-15);
        }
    }

    #[test]
    fn density_matches_construction() {
        let mut r = rng(13);
        for _ in 0..50 {
            let shape = Shape::new(8, 12).unwrap();
            let m = random_mask(shape, 2, r.random_range(0.0..0.9), &mut r).unwrap();
            let expect = m.num_active() as f64 * 4.0 / 96.0;
            assert_eq!(m.density(), expect);
        }
    }

    #[test]
    fn forward_touches_only_active_blocks() {
        let mut r = rng(17);
        let shape = Shape::new(8, 8).unwrap();
        let mask = random_mask(shape, 2, 0.5, &mut r).unwrap();
        let w = sparsify(&random_dense(shape, &mut r), &mask).unwrap();
        let x = random_dense(Shape::new(3, 8).unwrap(), &mut r);
        counters::reset();
        spmm_forward(&w, &x).unwrap();
        assert_eq!(counters::blocks_touched(), mask.num_active() as u64);
    }
}
