//! Vector types shared by every stage: head vectors, the subspace layout and
//! the append-only key/value store.

use crate::error::{Error, Result};

/// Inner product of two equal-length slices, accumulated in f64.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// A single query, key or value row of width `d`. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadVector(Vec<f32>);

impl HeadVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn with_dim(values: Vec<f32>, d: usize) -> Result<Self> {
        if values.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: values.len(),
            });
        }
        Self::new(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for HeadVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite(pos)),
        None => Ok(()),
    }
}

/// Result of normalizing a subspace vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f32>,
    /// Set when the input had zero norm; `vector` is then all zeros.
    pub degenerate: bool,
}

/// ℓ2-normalizes `v`. A zero vector comes back as zeros with `degenerate` set.
pub fn l2_normalize(v: &[f32]) -> Normalized {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Normalized {
            vector: vec![0.0; v.len()],
            degenerate: true,
        };
    }
    Normalized {
        vector: v.iter().map(|&x| (x as f64 / norm) as f32).collect(),
        degenerate: false,
    }
}

/// Contiguous partition of the head dimension into `m` subspaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl SubspaceLayout {
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::param("subspace layout needs at least one subspace"));
        }
        if let Some(b) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::param(format!("subspace {b} has zero width")));
        }
        let offsets = sizes
            .iter()
            .scan(0, |acc, &s| {
                let start = *acc;
                *acc += s;
                Some(start)
            })
            .collect();
        Ok(Self { sizes, offsets })
    }

    /// Splits `d` into `m` near-equal widths. When `m` does not divide `d`
    /// the first `d % m` subspaces are one wider.
    pub fn uniform(d: usize, m: usize) -> Result<Self> {
        if m == 0 || m > d {
            return Err(Error::param(format!(
                "cannot split d={d} into m={m} non-empty subspaces"
            )));
        }
        let base = d / m;
        let extra = d % m;
        Self::from_sizes((0..m).map(|b| base + usize::from(b < extra)).collect())
    }

    pub fn num_subspaces(&self) -> usize {
        self.sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.offsets.last().unwrap() + self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn width(&self, b: usize) -> usize {
        self.sizes[b]
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b] + self.sizes[b]
    }

    /// The `b`-th slice of a full-width vector. `v` must have width `dim()`.
    #[inline]
    pub fn slice<'a>(&self, v: &'a [f32], b: usize) -> &'a [f32] {
        &v[self.range(b)]
    }

    pub fn split<'a>(&self, v: &'a [f32]) -> Result<Vec<&'a [f32]>> {
        self.check_dim(v.len())?;
        Ok((0..self.num_subspaces()).map(|b| self.slice(v, b)).collect())
    }

    pub fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }
}

/// Append-only key/value cache for one head. Rows are stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct KvStore {
    d: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    prefill_len: usize,
}

impl KvStore {
    /// Builds a store from `n` prefill rows (row-major, width `d`).
    pub fn from_prefill(d: usize, keys: Vec<f32>, values: Vec<f32>) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("head dimension must be positive"));
        }
        if !keys.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                expected: d,
                actual: keys.len() % d,
            });
        }
        if keys.len() != values.len() {
            return Err(Error::param(format!(
                "key/value row counts differ: {} vs {}",
                keys.len() / d,
                values.len() / d
            )));
        }
        check_finite(&keys)?;
        check_finite(&values)?;
        let prefill_len = keys.len() / d;
        Ok(Self {
            d,
            keys,
            values,
            prefill_len,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    #[inline]
    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn keys(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.keys.chunks_exact(self.d)
    }

    pub fn push(&mut self, key: &[f32], value: &[f32]) -> Result<()> {
        for row in [key, value] {
            if row.len() != self.d {
                return Err(Error::Dimension {
                    expected: self.d,
                    actual: row.len(),
                });
            }
            check_finite(row)?;
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(())
    }
}

/// `max(1, ⌈ratio·n⌉)`, treating products within 1e-9 of an integer as that
/// integer so that e.g. 0.1·30 yields 3 rather than 4.
pub fn ceil_ratio(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let nearest = x.round();
    let c = if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (c as usize).max(1)
}
