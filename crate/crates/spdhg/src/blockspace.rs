//! Block-structured vectors, shapes and diagonal block weights.
//!
//! A [`BlockVector`] is the basic currency of the dual space
//! `Y = Y_1 x ... x Y_n` (and, with a single block, of the primal space `X`).
//! Blocks are dense `f64` buffers tagged with a [`Shape`] so 2-D images keep
//! their row/column layout. All reductions are plain sequential sums; NaN
//! entries propagate into the result rather than being masked.

use crate::error::{Error, Result};

/// Dimensions of one block: a 1-D length or 2-D rows x cols, every dim >= 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn d1(n: usize) -> Result<Self> {
        Shape::new(vec![n])
    }

    pub fn d2(rows: usize, cols: usize) -> Result<Self> {
        Shape::new(vec![rows, cols])
    }

    fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::shape(format!(
                "shape must be 1-D or 2-D, got {} dims",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("zero-length dimension"));
        }
        Ok(Shape { dims })
    }

    /// Total number of entries.
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// `(rows, cols)` when 2-D, `None` for 1-D blocks.
    pub fn as_2d(&self) -> Option<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense block vector; block `i` has `shapes[i].numel()` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockVector {
    shapes: Vec<Shape>,
    blocks: Vec<Vec<f64>>,
}

impl BlockVector {
    pub fn zeros(shapes: &[Shape]) -> Self {
        let blocks = shapes.iter().map(|s| vec![0.0; s.numel()]).collect();
        BlockVector {
            shapes: shapes.to_vec(),
            blocks,
        }
    }

    pub fn from_blocks(blocks: Vec<Vec<f64>>, shapes: Vec<Shape>) -> Result<Self> {
        if blocks.len() != shapes.len() {
            return Err(Error::shape(format!(
                "{} blocks vs {} shapes",
                blocks.len(),
                shapes.len()
            )));
        }
        for (i, (b, s)) in blocks.iter().zip(&shapes).enumerate() {
            if b.len() != s.numel() {
                return Err(Error::shape(format!(
                    "block {i}: {} entries, shape {s} wants {}",
                    b.len(),
                    s.numel()
                )));
            }
        }
        Ok(BlockVector { shapes, blocks })
    }

    /// Builds from raw buffers, treating each as a 1-D block.
    pub fn from_flat_blocks(blocks: Vec<Vec<f64>>) -> Result<Self> {
        let shapes = blocks
            .iter()
            .map(|b| Shape::d1(b.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockVector { shapes, blocks })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn numel(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn shape(&self, i: usize) -> &Shape {
        &self.shapes[i]
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.blocks[i]
    }

    pub fn iter_blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.blocks.iter().map(|b| b.as_slice())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.shapes != other.shapes {
            return Err(Error::shape("block vectors have different shapes"));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for b in &mut self.blocks {
            for x in b.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            for (x, y) in a.iter().zip(b) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum()
    }

    /// `sum_i w_i * ||v_i||^2` for positive per-block weights.
    pub fn weighted_norm_sq(&self, w: &BlockWeights) -> Result<f64> {
        if w.len() != self.n_blocks() {
            return Err(Error::shape(format!(
                "{} weights vs {} blocks",
                w.len(),
                self.n_blocks()
            )));
        }
        let mut acc = 0.0;
        for (i, b) in self.blocks.iter().enumerate() {
            let s: f64 = b.iter().map(|x| x * x).sum();
            acc += w.get(i) * s;
        }
        Ok(acc)
    }

    /// `||self - other||^2`.
    pub fn dist_sq(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                acc += d * d;
            }
        }
        Ok(acc)
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// One positive scalar weight per block (a diagonal metric).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    w: Vec<f64>,
}

impl BlockWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("empty weight list"));
        }
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::invalid("block weights must be finite and positive"));
        }
        Ok(BlockWeights { w })
    }

    pub fn uniform(n: usize, c: f64) -> Result<Self> {
        BlockWeights::new(vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.w[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}
