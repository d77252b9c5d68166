//! Dense f32 vectors and the similarity primitives shared by every module.
//!
//! All reductions accumulate in f64 in ascending index order so that two code
//! paths computing the same quantity agree bit for bit.

use crate::error::{Error, Result};

/// Row-major matrix of `len × dim` f32 values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    /// Wraps a flat buffer. Fails if the length is not a multiple of `dim`.
    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Invalid(format!(
                "buffer of {} values is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::with_capacity(dim, rows.len());
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.data
    }

    /// Index of the first row containing a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.rows().position(|r| r.iter().any(|x| !x.is_finite()))
    }

    /// L2 norm of each row.
    pub fn norms(&self) -> Vec<f64> {
        self.rows().map(norm).collect()
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Scales `v` to unit length in place. Returns `false` and leaves `v`
/// untouched when its norm is zero.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / n) as f32;
    }
    true
}

/// Arithmetic mean of the given rows, accumulated in f64 in iteration order.
pub fn mean<'a, I>(dim: usize, rows: I) -> Vec<f32>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut acc = vec![0.0f64; dim];
    let mut count = 0usize;
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += f64::from(*x);
        }
        count += 1;
    }
    let c = count.max(1) as f64;
    acc.into_iter().map(|a| (a / c) as f32).collect()
}

/// Mean of `rows` weighted by `weights`.
pub fn weighted_mean<'a, I>(dim: usize, rows: I) -> Vec<f32>
where
    I: IntoIterator<Item = (&'a [f32], f64)>,
{
    let mut acc = vec![0.0f64; dim];
    let mut total = 0.0f64;
    for (r, w) in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += f64::from(*x) * w;
        }
        total += w;
    }
    let t = if total == 0.0 { 1.0 } else { total };
    acc.into_iter().map(|a| (a / t) as f32).collect()
}
