//! Linear operators with exact adjoints.
//!
//! Every operator here satisfies `<apply(x), y> = <x, adjoint_apply(y)>` up to
//! rounding, which is what keeps saddle-point identities intact downstream.
//! The tomography operator is an explicit sparse matrix so its adjoint is the
//! exact transpose rather than an unmatched backprojector.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blockspace::{BlockVector, Shape};
use crate::error::{Error, Result};

/// A linear map `X -> Y_i` together with its exact adjoint.
///
/// `apply`/`adjoint_apply` write into caller-provided buffers; slice lengths
/// must match the operator shapes (checked by the public `BlockOperator`
/// entry points, asserted here).
pub trait LinearOp: Send + Sync {
    fn in_shape(&self) -> &Shape;
    fn out_shape(&self) -> &Shape;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn adjoint_apply(&self, y: &[f64], out: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_shape().numel()];
        self.apply(x, &mut out);
        out
    }

    fn adjoint_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_shape().numel()];
        self.adjoint_apply(y, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Sparse matrices
// ---------------------------------------------------------------------------

/// CSR sparse matrix operator; adjoint is the transpose by construction.
#[derive(Clone, Debug)]
pub struct SparseMatrixOp {
    in_shape: Shape,
    out_shape: Shape,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrixOp {
    /// Builds from `(row, col, value)` triplets. Duplicate positions are
    /// summed. Out-of-range indices are rejected.
    pub fn from_triplets(
        triplets: &[(usize, usize, f64)],
        in_shape: Shape,
        out_shape: Shape,
    ) -> Result<Self> {
        let n_rows = out_shape.numel();
        let n_cols = in_shape.numel();
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::shape(format!(
                    "triplet ({r},{c}) out of range for {n_rows}x{n_cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::invalid("non-finite matrix entry"));
            }
            entries.push((r, c, v));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            // entries are sorted, so a duplicate (row, col) is always the
            // immediately preceding pushed entry
            if row_ptr[r + 1] > 0 && *cols.last().unwrap() == c {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrixOp {
            in_shape,
            out_shape,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn n_rows(&self) -> usize {
        self.out_shape.numel()
    }

    pub fn n_cols(&self) -> usize {
        self.in_shape.numel()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push((r, self.cols[k], self.vals[k]));
            }
        }
        out
    }

    /// One `row col value` line per entry, row-major order.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        for (r, c, v) in self.triplets() {
            s.push_str(&format!("{r} {c} {v}\n"));
        }
        s
    }

    pub fn from_triplet_text(text: &str, in_shape: Shape, out_shape: Shape) -> Result<Self> {
        let mut triplets = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>, what: &str| -> Result<String> {
                tok.map(str::to_string).ok_or_else(|| {
                    Error::invalid(format!("triplet line {}: missing {what}", lineno + 1))
                })
            };
            let r: usize = parse(it.next(), "row")?
                .parse()
                .map_err(|e| Error::invalid(format!("triplet line {}: {e}", lineno + 1)))?;
            let c: usize = parse(it.next(), "col")?
                .parse()
                .map_err(|e| Error::invalid(format!("triplet line {}: {e}", lineno + 1)))?;
            let v: f64 = parse(it.next(), "value")?
                .parse()
                .map_err(|e| Error::invalid(format!("triplet line {}: {e}", lineno + 1)))?;
            triplets.push((r, c, v));
        }
        SparseMatrixOp::from_triplets(&triplets, in_shape, out_shape)
    }

    /// Stacks operators vertically (same input space, concatenated outputs).
    pub fn vstack(parts: &[SparseMatrixOp]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("vstack of zero operators"))?;
        let in_shape = first.in_shape.clone();
        let mut triplets = Vec::new();
        let mut row_offset = 0usize;
        for part in parts {
            if part.in_shape != in_shape {
                return Err(Error::shape("vstack parts disagree on input shape"));
            }
            for (r, c, v) in part.triplets() {
                triplets.push((r + row_offset, c, v));
            }
            row_offset += part.n_rows();
        }
        let out_shape = Shape::d1(row_offset)?;
        SparseMatrixOp::from_triplets(&triplets, in_shape, out_shape)
    }
}

impl LinearOp for SparseMatrixOp {
    fn in_shape(&self) -> &Shape {
        &self.in_shape
    }

    fn out_shape(&self) -> &Shape {
        &self.out_shape
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols());
        debug_assert_eq!(out.len(), self.n_rows());
        for r in 0..self.n_rows() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            out[r] = acc;
        }
    }

    fn adjoint_apply(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rows());
        debug_assert_eq!(out.len(), self.n_cols());
        out.fill(0.0);
        for r in 0..self.n_rows() {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[k]] += self.vals[k] * yr;
            }
        }
    }
}

/// `sparse_matrix_op` per the module surface: triplets plus shapes.
pub fn sparse_matrix_op(
    entries: &[(usize, usize, f64)],
    in_shape: Shape,
    out_shape: Shape,
) -> Result<SparseMatrixOp> {
    SparseMatrixOp::from_triplets(entries, in_shape, out_shape)
}

/// Diagonal operator, mostly for toy problems and tests.
#[derive(Clone, Debug)]
pub struct DiagOp {
    d: Vec<f64>,
    shape: Shape,
}

impl DiagOp {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        let shape = Shape::d1(d.len())?;
        Ok(DiagOp { d, shape })
    }
}

impl LinearOp for DiagOp {
    fn in_shape(&self) -> &Shape {
        &self.shape
    }

    fn out_shape(&self) -> &Shape {
        &self.shape
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &xi), &di) in out.iter_mut().zip(x).zip(&self.d) {
            *o = di * xi;
        }
    }

    fn adjoint_apply(&self, y: &[f64], out: &mut [f64]) {
        self.apply(y, out);
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradAxis {
    Horizontal,
    Vertical,
}

/// Forward differences with zero (Neumann) boundary row/column; the adjoint
/// is the exact transpose (a negative divergence).
#[derive(Clone, Debug)]
pub struct Grad2d {
    shape: Shape,
    axis: GradAxis,
}

pub fn grad2d(shape: &Shape, axis: GradAxis) -> Result<Grad2d> {
    if shape.as_2d().is_none() {
        return Err(Error::shape("grad2d requires a 2-D shape"));
    }
    Ok(Grad2d {
        shape: shape.clone(),
        axis,
    })
}

pub(crate) fn grad_forward(axis: GradAxis, rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    match axis {
        GradAxis::Horizontal => {
            for i in 0..rows {
                let base = i * cols;
                for j in 0..cols - 1 {
                    out[base + j] = x[base + j + 1] - x[base + j];
                }
                out[base + cols - 1] = 0.0;
            }
        }
        GradAxis::Vertical => {
            for i in 0..rows - 1 {
                let base = i * cols;
                for j in 0..cols {
                    out[base + j] = x[base + cols + j] - x[base + j];
                }
            }
            let base = (rows - 1) * cols;
            out[base..base + cols].fill(0.0);
        }
    }
}

pub(crate) fn grad_adjoint(axis: GradAxis, rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    match axis {
        GradAxis::Horizontal => {
            for i in 0..rows {
                let base = i * cols;
                for j in 0..cols {
                    let mut acc = 0.0;
                    if j >= 1 {
                        acc += y[base + j - 1];
                    }
                    if j + 1 < cols {
                        acc -= y[base + j];
                    }
                    out[base + j] = acc;
                }
            }
        }
        GradAxis::Vertical => {
            for i in 0..rows {
                let base = i * cols;
                for j in 0..cols {
                    let mut acc = 0.0;
                    if i >= 1 {
                        acc += y[base - cols + j];
                    }
                    if i + 1 < rows {
                        acc -= y[base + j];
                    }
                    out[base + j] = acc;
                }
            }
        }
    }
}

impl LinearOp for Grad2d {
    fn in_shape(&self) -> &Shape {
        &self.shape
    }

    fn out_shape(&self) -> &Shape {
        &self.shape
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (rows, cols) = self.shape.as_2d().expect("2-D by construction");
        grad_forward(self.axis, rows, cols, x, out);
    }

    fn adjoint_apply(&self, y: &[f64], out: &mut [f64]) {
        let (rows, cols) = self.shape.as_2d().expect("2-D by construction");
        grad_adjoint(self.axis, rows, cols, y, out);
    }
}

// ---------------------------------------------------------------------------
// Convolution (correlation with zero padding)
// ---------------------------------------------------------------------------

/// Linear correlation with zero padding; output has the image shape. The
/// kernel anchor is its center cell `(kr/2, kc/2)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    shape: Shape,
    kernel: Vec<f64>,
    krows: usize,
    kcols: usize,
}

pub fn conv2d(kernel: &[Vec<f64>], shape: &Shape) -> Result<Conv2d> {
    let (rows, cols) = shape
        .as_2d()
        .ok_or_else(|| Error::shape("conv2d requires a 2-D shape"))?;
    let krows = kernel.len();
    if krows == 0 || kernel[0].is_empty() {
        return Err(Error::shape("empty kernel"));
    }
    let kcols = kernel[0].len();
    if kernel.iter().any(|row| row.len() != kcols) {
        return Err(Error::shape("ragged kernel"));
    }
    if krows > rows || kcols > cols {
        return Err(Error::shape(format!(
            "kernel {krows}x{kcols} larger than image {rows}x{cols}"
        )));
    }
    let flat: Vec<f64> = kernel.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite kernel entry"));
    }
    Ok(Conv2d {
        shape: shape.clone(),
        kernel: flat,
        krows,
        kcols,
    })
}

impl LinearOp for Conv2d {
    fn in_shape(&self) -> &Shape {
        &self.shape
    }

    fn out_shape(&self) -> &Shape {
        &self.shape
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (rows, cols) = self.shape.as_2d().expect("2-D by construction");
        let (ci, cj) = (self.krows / 2, self.kcols / 2);
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for ki in 0..self.krows {
                    let ii = i as isize + ki as isize - ci as isize;
                    if ii < 0 || ii >= rows as isize {
                        continue;
                    }
                    for kj in 0..self.kcols {
                        let jj = j as isize + kj as isize - cj as isize;
                        if jj < 0 || jj >= cols as isize {
                            continue;
                        }
                        acc += self.kernel[ki * self.kcols + kj]
                            * x[ii as usize * cols + jj as usize];
                    }
                }
                out[i * cols + j] = acc;
            }
        }
    }

    fn adjoint_apply(&self, y: &[f64], out: &mut [f64]) {
        let (rows, cols) = self.shape.as_2d().expect("2-D by construction");
        let (ci, cj) = (self.krows / 2, self.kcols / 2);
        out.fill(0.0);
        // Transpose of correlation: scatter each output back through the
        // kernel stencil.
        for i in 0..rows {
            for j in 0..cols {
                let yij = y[i * cols + j];
                if yij == 0.0 {
                    continue;
                }
                for ki in 0..self.krows {
                    let ii = i as isize + ki as isize - ci as isize;
                    if ii < 0 || ii >= rows as isize {
                        continue;
                    }
                    for kj in 0..self.kcols {
                        let jj = j as isize + kj as isize - cj as isize;
                        if jj < 0 || jj >= cols as isize {
                            continue;
                        }
                        out[ii as usize * cols + jj as usize] +=
                            self.kernel[ki * self.kcols + kj] * yij;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Toy parallel-beam tomography
// ---------------------------------------------------------------------------

/// Sparse parallel-beam line integrals with pixel-midpoint binning and unit
/// ray weights; one operator per angle so rows partition naturally into
/// angle subsets. Detector bins that catch no pixel midpoint are dropped, so
/// every row has at least one nonzero entry.
pub fn toy_radon(shape: &Shape, n_angles: usize, n_bins: usize) -> Result<Vec<SparseMatrixOp>> {
    let (rows, cols) = shape
        .as_2d()
        .ok_or_else(|| Error::shape("toy_radon requires a 2-D shape"))?;
    if n_angles == 0 || n_bins == 0 {
        return Err(Error::invalid("toy_radon needs n_angles, n_bins >= 1"));
    }
    let mut ops = Vec::with_capacity(n_angles);
    for a in 0..n_angles {
        let phi = a as f64 * std::f64::consts::PI / n_angles as f64;
        let (sin, cos) = phi.sin_cos();
        let mut ts = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let v = (i as f64 + 0.5) - rows as f64 / 2.0;
            for j in 0..cols {
                let u = (j as f64 + 0.5) - cols as f64 / 2.0;
                ts.push(u * cos + v * sin);
            }
        }
        let t_lo = ts.iter().cloned().fold(f64::INFINITY, f64::min);
        let t_hi = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (t_hi - t_lo) / n_bins as f64;
        let mut bin_of_pixel = vec![0usize; rows * cols];
        let mut hit = vec![false; n_bins];
        for (pix, &t) in ts.iter().enumerate() {
            let b = if width > 0.0 {
                (((t - t_lo) / width).floor() as usize).min(n_bins - 1)
            } else {
                0
            };
            bin_of_pixel[pix] = b;
            hit[b] = true;
        }
        let mut bin_index = vec![usize::MAX; n_bins];
        let mut kept = 0usize;
        for (b, &h) in hit.iter().enumerate() {
            if h {
                bin_index[b] = kept;
                kept += 1;
            }
        }
        let triplets: Vec<(usize, usize, f64)> = bin_of_pixel
            .iter()
            .enumerate()
            .map(|(pix, &b)| (bin_index[b], pix, 1.0))
            .collect();
        ops.push(SparseMatrixOp::from_triplets(
            &triplets,
            shape.clone(),
            Shape::d1(kept)?,
        )?);
    }
    Ok(ops)
}

// ---------------------------------------------------------------------------
// Operator norm estimation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct OpNormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub tol: f64,
}

impl OpNormEstimate {
    /// Over-relaxed estimate for step-size safety: power iteration approaches
    /// the norm from below, so `gamma / safe_upper()` keeps strict step-size
    /// conditions valid despite estimation error.
    pub fn safe_upper(&self) -> f64 {
        self.value * (1.0 + 10.0 * self.tol)
    }
}

fn power_iteration<FA, FAT>(
    in_len: usize,
    out_len: usize,
    apply: FA,
    adjoint: FAT,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> OpNormEstimate
where
    FA: Fn(&[f64], &mut [f64]),
    FAT: Fn(&[f64], &mut [f64]),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..in_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 {
        x[0] = 1.0;
    } else {
        x.iter_mut().for_each(|v| *v /= nx);
    }
    let mut w = vec![0.0; out_len];
    let mut v = vec![0.0; in_len];
    let mut est_prev = f64::NAN;
    for it in 1..=max_iter {
        apply(&x, &mut w);
        let est = w.iter().map(|u| u * u).sum::<f64>();
        if est == 0.0 {
            return OpNormEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
                tol,
            };
        }
        if est_prev.is_finite() && (est - est_prev).abs() <= tol * est.max(f64::MIN_POSITIVE) {
            return OpNormEstimate {
                value: est.sqrt(),
                iterations: it,
                converged: true,
                tol,
            };
        }
        est_prev = est;
        adjoint(&w, &mut v);
        let nv = v.iter().map(|u| u * u).sum::<f64>().sqrt();
        if nv == 0.0 {
            return OpNormEstimate {
                value: est.sqrt(),
                iterations: it,
                converged: true,
                tol,
            };
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi = vi / nv;
        }
    }
    OpNormEstimate {
        value: est_prev.sqrt(),
        iterations: max_iter,
        converged: false,
        tol,
    }
}

/// Largest singular value via power iteration on `A*A`; deterministic given
/// `seed`. Non-convergence is reported through the `converged` flag, with the
/// last estimate still returned.
pub fn op_norm(op: &dyn LinearOp, tol: f64, max_iter: usize, seed: u64) -> Result<OpNormEstimate> {
    if !(tol > 0.0) {
        return Err(Error::invalid("op_norm needs tol > 0"));
    }
    Ok(power_iteration(
        op.in_shape().numel(),
        op.out_shape().numel(),
        |x, out| op.apply(x, out),
        |y, out| op.adjoint_apply(y, out),
        tol,
        max_iter,
        seed,
    ))
}

// ---------------------------------------------------------------------------
// Block operator with call counters
// ---------------------------------------------------------------------------

/// Per-block apply/adjoint call counts of a [`BlockOperator`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockOpCounts {
    pub applies: Vec<u64>,
    pub adjoints: Vec<u64>,
}

impl BlockOpCounts {
    pub fn total(&self) -> u64 {
        self.applies.iter().sum::<u64>() + self.adjoints.iter().sum::<u64>()
    }
}

/// Row-stacked operator `A = (A_1; ...; A_n)` over a common input space.
///
/// Counted entry points (`apply_block`, `adjoint_block`, `apply_full`,
/// `adjoint_full`) instrument the algorithmic cost model; the `_quiet`
/// variants exist for diagnostics and cache validation, which are not
/// algorithmic work. Cloning shares the underlying operators but resets the
/// counters (they instrument an instance, not the math).
pub struct BlockOperator {
    rows: Vec<Arc<dyn LinearOp>>,
    in_shape: Shape,
    out_shapes: Vec<Shape>,
    applies: Vec<AtomicU64>,
    adjoints: Vec<AtomicU64>,
}

impl std::fmt::Debug for BlockOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockOperator")
            .field("n_blocks", &self.rows.len())
            .field("in_shape", &self.in_shape)
            .field("out_shapes", &self.out_shapes)
            .finish()
    }
}

impl Clone for BlockOperator {
    fn clone(&self) -> Self {
        BlockOperator {
            rows: self.rows.clone(),
            in_shape: self.in_shape.clone(),
            out_shapes: self.out_shapes.clone(),
            applies: (0..self.rows.len()).map(|_| AtomicU64::new(0)).collect(),
            adjoints: (0..self.rows.len()).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl BlockOperator {
    pub fn new(rows: Vec<Arc<dyn LinearOp>>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("block operator needs >= 1 row"))?;
        let in_shape = first.in_shape().clone();
        for (i, r) in rows.iter().enumerate() {
            if r.in_shape() != &in_shape {
                return Err(Error::shape(format!(
                    "row {i} input shape {} != {}",
                    r.in_shape(),
                    in_shape
                )));
            }
        }
        let out_shapes = rows.iter().map(|r| r.out_shape().clone()).collect();
        let n = rows.len();
        Ok(BlockOperator {
            rows,
            in_shape,
            out_shapes,
            applies: (0..n).map(|_| AtomicU64::new(0)).collect(),
            adjoints: (0..n).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn from_ops<T: LinearOp + 'static>(ops: Vec<T>) -> Result<Self> {
        BlockOperator::new(
            ops.into_iter()
                .map(|o| Arc::new(o) as Arc<dyn LinearOp>)
                .collect(),
        )
    }

    pub fn n_blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn in_shape(&self) -> &Shape {
        &self.in_shape
    }

    pub fn out_shapes(&self) -> &[Shape] {
        &self.out_shapes
    }

    pub fn block(&self, i: usize) -> &Arc<dyn LinearOp> {
        &self.rows[i]
    }

    pub fn y_zeros(&self) -> BlockVector {
        BlockVector::zeros(&self.out_shapes)
    }

    pub fn x_zeros(&self) -> Vec<f64> {
        vec![0.0; self.in_shape.numel()]
    }

    fn check_block(&self, i: usize) -> Result<()> {
        if i >= self.rows.len() {
            return Err(Error::shape(format!(
                "block index {i} out of range (n={})",
                self.rows.len()
            )));
        }
        Ok(())
    }

    /// `A_i x`, counted as one block-operator evaluation.
    pub fn apply_block(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_block(i)?;
        self.applies[i].fetch_add(1, Ordering::Relaxed);
        self.apply_block_quiet(i, x, out)
    }

    /// `A_i* y_i`, counted as one block-operator evaluation.
    pub fn adjoint_block(&self, i: usize, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_block(i)?;
        self.adjoints[i].fetch_add(1, Ordering::Relaxed);
        self.adjoint_block_quiet(i, y, out)
    }

    pub fn apply_block_quiet(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_block(i)?;
        if x.len() != self.in_shape.numel() || out.len() != self.out_shapes[i].numel() {
            return Err(Error::shape(format!("apply_block({i}): buffer length")));
        }
        self.rows[i].apply(x, out);
        Ok(())
    }

    pub fn adjoint_block_quiet(&self, i: usize, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_block(i)?;
        if y.len() != self.out_shapes[i].numel() || out.len() != self.in_shape.numel() {
            return Err(Error::shape(format!("adjoint_block({i}): buffer length")));
        }
        self.rows[i].adjoint_apply(y, out);
        Ok(())
    }

    /// `A x` over all blocks, counted once per block.
    pub fn apply_full(&self, x: &[f64]) -> Result<BlockVector> {
        let mut out = self.y_zeros();
        for i in 0..self.n_blocks() {
            let mut buf = vec![0.0; self.out_shapes[i].numel()];
            self.apply_block(i, x, &mut buf)?;
            out.block_mut(i).copy_from_slice(&buf);
        }
        Ok(out)
    }

    /// `A* y = sum_i A_i* y_i`, counted once per block.
    pub fn adjoint_full(&self, y: &BlockVector) -> Result<Vec<f64>> {
        self.adjoint_full_impl(y, true)
    }

    pub fn adjoint_full_quiet(&self, y: &BlockVector) -> Result<Vec<f64>> {
        self.adjoint_full_impl(y, false)
    }

    pub fn apply_full_quiet(&self, x: &[f64]) -> Result<BlockVector> {
        let mut out = self.y_zeros();
        for i in 0..self.n_blocks() {
            let mut buf = vec![0.0; self.out_shapes[i].numel()];
            self.apply_block_quiet(i, x, &mut buf)?;
            out.block_mut(i).copy_from_slice(&buf);
        }
        Ok(out)
    }

    fn adjoint_full_impl(&self, y: &BlockVector, counted: bool) -> Result<Vec<f64>> {
        if y.n_blocks() != self.n_blocks() {
            return Err(Error::shape("adjoint_full: block count mismatch"));
        }
        let mut acc = self.x_zeros();
        let mut buf = self.x_zeros();
        for i in 0..self.n_blocks() {
            if counted {
                self.adjoint_block(i, y.block(i), &mut buf)?;
            } else {
                self.adjoint_block_quiet(i, y.block(i), &mut buf)?;
            }
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        Ok(acc)
    }

    pub fn counts(&self) -> BlockOpCounts {
        BlockOpCounts {
            applies: self.applies.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
            adjoints: self
                .adjoints
                .iter()
                .map(|c| c.load(Ordering::Relaxed))
                .collect(),
        }
    }

    pub fn reset_counts(&self) {
        for c in self.applies.iter().chain(self.adjoints.iter()) {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Norm of the row-scaled stack `(c_1 A_1; ...; c_n A_n)` via power
/// iteration; uses uncounted paths (norm estimation is not algorithmic work).
pub fn block_op_norm(
    a: &BlockOperator,
    scales: &[f64],
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<OpNormEstimate> {
    if scales.len() != a.n_blocks() {
        return Err(Error::shape("block_op_norm: one scale per block"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("block_op_norm needs tol > 0"));
    }
    let in_len = a.in_shape().numel();
    let offsets: Vec<usize> = {
        let mut o = vec![0usize];
        for s in a.out_shapes() {
            o.push(o.last().unwrap() + s.numel());
        }
        o
    };
    let out_len = *offsets.last().unwrap();
    let apply = |x: &[f64], out: &mut [f64]| {
        for i in 0..a.n_blocks() {
            let seg = &mut out[offsets[i]..offsets[i + 1]];
            a.apply_block_quiet(i, x, seg).expect("shapes fixed");
            for v in seg.iter_mut() {
                *v *= scales[i];
            }
        }
    };
    let adjoint = |y: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        let mut buf = vec![0.0; in_len];
        for i in 0..a.n_blocks() {
            let seg = &y[offsets[i]..offsets[i + 1]];
            a.adjoint_block_quiet(i, seg, &mut buf).expect("shapes fixed");
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += scales[i] * b;
            }
        }
    };
    Ok(power_iteration(
        in_len, out_len, apply, adjoint, tol, max_iter, seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Dense matrix of an operator by probing basis vectors.
    fn dense(op: &dyn LinearOp) -> Vec<Vec<f64>> {
        let n = op.in_shape().numel();
        let m = op.out_shape().numel();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            cols.push(op.apply_vec(&e));
        }
        // row-major m x n
        (0..m)
            .map(|i| (0..n).map(|j| cols[j][i]).collect())
            .collect()
    }

    /// Checks `adjoint_apply` against the dense transpose on basis vectors.
    fn assert_adjoint_is_transpose(op: &dyn LinearOp, tol: f64) {
        let mat = dense(op);
        let n = op.in_shape().numel();
        let m = op.out_shape().numel();
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let at = op.adjoint_vec(&e);
            for j in 0..n {
                assert!(
                    (at[j] - mat[i][j]).abs() <= tol,
                    "adjoint[{j}] = {} vs transpose {}",
                    at[j],
                    mat[i][j]
                );
            }
        }
    }

    fn assert_adjoint_pairing(op: &dyn LinearOp, probes: usize, seed: u64) {
        let mut r = rng(seed);
        for _ in 0..probes {
            let x = random_vec(&mut r, op.in_shape().numel());
            let y = random_vec(&mut r, op.out_shape().numel());
            let ax = op.apply_vec(&x);
            let aty = op.adjoint_vec(&y);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + nx * ny),
                "pairing violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn sparse_from_triplets_basics() {
        let s1 = Shape::d1(1).unwrap();
        let op = sparse_matrix_op(&[(0, 0, 2.0)], s1.clone(), s1.clone()).unwrap();
        assert_eq!(op.apply_vec(&[3.0]), vec![6.0]);

        let zero = sparse_matrix_op(&[], Shape::d1(3).unwrap(), Shape::d1(2).unwrap()).unwrap();
        assert_eq!(zero.apply_vec(&[1.0, 2.0, 3.0]), vec![0.0, 0.0]);

        assert!(sparse_matrix_op(&[(2, 0, 1.0)], s1.clone(), s1.clone()).is_err());
        assert!(sparse_matrix_op(&[(0, 0, f64::NAN)], s1.clone(), s1).is_err());
    }

    #[test]
    fn sparse_duplicate_triplets_are_summed() {
        let s1 = Shape::d1(1).unwrap();
        let op = sparse_matrix_op(&[(0, 0, 2.0), (0, 0, 3.0)], s1.clone(), s1).unwrap();
        assert_eq!(op.nnz(), 1);
        assert_eq!(op.apply_vec(&[1.0]), vec![5.0]);
    }

    #[test]
    fn sparse_adjoint_matches_transpose_on_random_matrix() {
        let mut r = rng(11);
        for _ in 0..10 {
            let n = r.random_range(1..7usize);
            let m = r.random_range(1..7usize);
            let nnz = r.random_range(0..=n * m);
            let triplets: Vec<(usize, usize, f64)> = (0..nnz)
                .map(|_| {
                    (
                        r.random_range(0..m),
                        r.random_range(0..n),
                        r.random_range(-2.0..2.0),
                    )
                })
                .collect();
            let op = sparse_matrix_op(
                &triplets,
                Shape::d1(n).unwrap(),
                Shape::d1(m).unwrap(),
            )
            .unwrap();
            assert_adjoint_is_transpose(&op, 1e-12);
            assert_adjoint_pairing(&op, 20, 5);
        }
    }

    #[test]
    fn triplet_text_roundtrip_is_exact() {
        let mut r = rng(13);
        let triplets: Vec<(usize, usize, f64)> = (0..20)
            .map(|_| {
                (
                    r.random_range(0..5usize),
                    r.random_range(0..4usize),
                    r.random_range(-1.0..1.0),
                )
            })
            .collect();
        let op = sparse_matrix_op(&triplets, Shape::d1(4).unwrap(), Shape::d1(5).unwrap()).unwrap();
        let text = op.to_triplet_text();
        let back =
            SparseMatrixOp::from_triplet_text(&text, Shape::d1(4).unwrap(), Shape::d1(5).unwrap())
                .unwrap();
        assert_eq!(op.triplets(), back.triplets());
    }

    #[test]
    fn grad2d_constant_image_maps_to_zero() {
        let shape = Shape::d2(5, 4).unwrap();
        let x = vec![3.7; 20];
        for axis in [GradAxis::Horizontal, GradAxis::Vertical] {
            let g = grad2d(&shape, axis).unwrap();
            assert!(g.apply_vec(&x).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grad2d_single_difference() {
        let shape = Shape::d2(1, 2).unwrap();
        let g = grad2d(&shape, GradAxis::Horizontal).unwrap();
        assert_eq!(g.apply_vec(&[1.0, 4.0]), vec![3.0, 0.0]);
        assert!(grad2d(&Shape::d1(4).unwrap(), GradAxis::Horizontal).is_err());
    }

    #[test]
    fn grad2d_adjoint_is_exact_transpose_on_4x4() {
        let shape = Shape::d2(4, 4).unwrap();
        for axis in [GradAxis::Horizontal, GradAxis::Vertical] {
            let g = grad2d(&shape, axis).unwrap();
            assert_adjoint_is_transpose(&g, 1e-12);
            assert_adjoint_pairing(&g, 100, 3);
        }
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let shape = Shape::d2(4, 5).unwrap();
        let op = conv2d(&[vec![1.0]], &shape).unwrap();
        let mut r = rng(5);
        let x = random_vec(&mut r, 20);
        assert_eq!(op.apply_vec(&x), x);
    }

    #[test]
    fn conv2d_preserves_nonnegativity() {
        let shape = Shape::d2(6, 6).unwrap();
        let kernel = vec![
            vec![0.1, 0.2, 0.1],
            vec![0.2, 0.4, 0.2],
            vec![0.1, 0.2, 0.1],
        ];
        let op = conv2d(&kernel, &shape).unwrap();
        let mut r = rng(6);
        let x: Vec<f64> = (0..36).map(|_| r.random_range(0.0..2.0)).collect();
        assert!(op.apply_vec(&x).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_image() {
        let shape = Shape::d2(2, 2).unwrap();
        let kernel = vec![vec![1.0, 1.0, 1.0]; 3];
        assert!(conv2d(&kernel, &shape).is_err());
    }

    #[test]
    fn conv2d_adjoint_is_exact_transpose_on_8x8() {
        let shape = Shape::d2(8, 8).unwrap();
        let mut r = rng(21);
        for (kr, kc) in [(3, 3), (5, 3), (1, 4)] {
            let kernel: Vec<Vec<f64>> = (0..kr)
                .map(|_| (0..kc).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect();
            let op = conv2d(&kernel, &shape).unwrap();
            assert_adjoint_is_transpose(&op, 1e-12);
            assert_adjoint_pairing(&op, 50, 9);
        }
    }

    #[test]
    fn toy_radon_single_angle_gives_column_sums() {
        let shape = Shape::d2(6, 6).unwrap();
        let ops = toy_radon(&shape, 1, 6).unwrap();
        assert_eq!(ops.len(), 1);
        let mut r = rng(30);
        let x = random_vec(&mut r, 36);
        let sino = ops[0].apply_vec(&x);
        assert_eq!(sino.len(), 6);
        for j in 0..6 {
            let col_sum: f64 = (0..6).map(|i| x[i * 6 + j]).sum();
            assert_relative_eq!(sino[j], col_sum, max_relative = 1e-12);
        }
    }

    #[test]
    fn toy_radon_zero_image_zero_sinogram() {
        let shape = Shape::d2(8, 8).unwrap();
        let ops = toy_radon(&shape, 5, 8).unwrap();
        for op in &ops {
            assert!(op.apply_vec(&vec![0.0; 64]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn toy_radon_rows_are_nonneg_and_nonempty() {
        let shape = Shape::d2(16, 16).unwrap();
        let ops = toy_radon(&shape, 12, 16).unwrap();
        for op in &ops {
            let mut row_nnz = vec![0usize; op.n_rows()];
            for (r, _, v) in op.triplets() {
                assert!(v >= 0.0);
                row_nnz[r] += 1;
            }
            assert!(row_nnz.iter().all(|&c| c >= 1), "empty detector row kept");
            assert_adjoint_pairing(op, 20, 2);
        }
    }

    #[test]
    fn toy_radon_is_deterministic() {
        let shape = Shape::d2(12, 12).unwrap();
        let a = toy_radon(&shape, 7, 12).unwrap();
        let b = toy_radon(&shape, 7, 12).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.triplets(), y.triplets());
        }
    }

    #[test]
    fn op_norm_identity_and_diag() {
        let id = DiagOp::new(vec![1.0; 9]).unwrap();
        let est = op_norm(&id, 1e-10, 1000, 1).unwrap();
        assert!(est.converged);
        assert_relative_eq!(est.value, 1.0, epsilon = 1e-8);

        let d = DiagOp::new(vec![1.0, 3.0]).unwrap();
        let est = op_norm(&d, 1e-12, 5000, 2).unwrap();
        assert_relative_eq!(est.value, 3.0, epsilon = 1e-8);
        assert!(est.safe_upper() >= est.value);
    }

    #[test]
    fn op_norm_zero_operator() {
        let z = sparse_matrix_op(&[], Shape::d1(4).unwrap(), Shape::d1(3).unwrap()).unwrap();
        let est = op_norm(&z, 1e-10, 100, 3).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.converged);
    }

    #[test]
    fn op_norm_grad_stack_matches_laplacian_eigenvalues() {
        // Stack of horizontal+vertical forward differences on an m x m grid:
        // squared norm is 8 sin^2((m-1) pi / (2m)), approaching 8.
        let mut prev = 0.0;
        for m in [4usize, 8, 16] {
            let shape = Shape::d2(m, m).unwrap();
            let a = BlockOperator::from_ops(vec![
                grad2d(&shape, GradAxis::Horizontal).unwrap(),
                grad2d(&shape, GradAxis::Vertical).unwrap(),
            ])
            .unwrap();
            let est = block_op_norm(&a, &[1.0, 1.0], 1e-12, 20000, 4).unwrap();
            let exact = (8.0 * ((m as f64 - 1.0) * std::f64::consts::PI / (2.0 * m as f64))
                .sin()
                .powi(2))
            .sqrt();
            assert_relative_eq!(est.value, exact, epsilon = 1e-6);
            assert!(est.value <= 8f64.sqrt() + 1e-9);
            assert!(est.value > prev);
            prev = est.value;
        }
    }

    #[test]
    fn op_norm_never_grossly_underestimates() {
        let mut r = rng(40);
        let triplets: Vec<(usize, usize, f64)> = (0..30)
            .map(|_| {
                (
                    r.random_range(0..6usize),
                    r.random_range(0..5usize),
                    r.random_range(-1.0..1.0),
                )
            })
            .collect();
        let op = sparse_matrix_op(&triplets, Shape::d1(5).unwrap(), Shape::d1(6).unwrap()).unwrap();
        let est = op_norm(&op, 1e-10, 10000, 5).unwrap();
        for _ in 0..50 {
            let x = random_vec(&mut r, 5);
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 {
                continue;
            }
            let ax = op.apply_vec(&x);
            let na = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(est.value >= na / nx - 1e-8);
        }
    }

    #[test]
    fn block_operator_matches_per_block_application() {
        let shape = Shape::d2(4, 4).unwrap();
        let a = BlockOperator::from_ops(vec![
            grad2d(&shape, GradAxis::Horizontal).unwrap(),
            grad2d(&shape, GradAxis::Vertical).unwrap(),
        ])
        .unwrap();
        let mut r = rng(50);
        let x = random_vec(&mut r, 16);
        let full = a.apply_full(&x).unwrap();
        for i in 0..2 {
            let mut buf = vec![0.0; 16];
            a.apply_block(i, &x, &mut buf).unwrap();
            assert_eq!(full.block(i), buf.as_slice());
        }
    }

    #[test]
    fn block_operator_counters_track_counted_calls_only() {
        let shape = Shape::d2(3, 3).unwrap();
        let a = BlockOperator::from_ops(vec![
            grad2d(&shape, GradAxis::Horizontal).unwrap(),
            grad2d(&shape, GradAxis::Vertical).unwrap(),
        ])
        .unwrap();
        let x = vec![1.0; 9];
        let mut buf = vec![0.0; 9];
        a.apply_block(0, &x, &mut buf).unwrap();
        a.apply_block(0, &x, &mut buf).unwrap();
        a.adjoint_block(1, &x, &mut buf).unwrap();
        a.apply_block_quiet(1, &x, &mut buf).unwrap();
        a.adjoint_block_quiet(0, &x, &mut buf).unwrap();
        let c = a.counts();
        assert_eq!(c.applies, vec![2, 0]);
        assert_eq!(c.adjoints, vec![0, 1]);
        assert_eq!(c.total(), 3);

        let b = a.clone();
        assert_eq!(b.counts().total(), 0, "clone starts with fresh counters");
        a.reset_counts();
        assert_eq!(a.counts().total(), 0);
    }

    #[test]
    fn vstack_concatenates_rows() {
        let shape = Shape::d2(6, 6).unwrap();
        let parts = toy_radon(&shape, 3, 6).unwrap();
        let total_rows: usize = parts.iter().map(|p| p.n_rows()).sum();
        let stacked = SparseMatrixOp::vstack(&parts).unwrap();
        assert_eq!(stacked.n_rows(), total_rows);
        let mut r = rng(60);
        let x = random_vec(&mut r, 36);
        let full = stacked.apply_vec(&x);
        let mut offset = 0;
        for p in &parts {
            let seg = p.apply_vec(&x);
            assert_eq!(&full[offset..offset + seg.len()], seg.as_slice());
            offset += seg.len();
        }
    }
}
