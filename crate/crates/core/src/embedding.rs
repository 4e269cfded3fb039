//! Memory bank of per-sample unit embeddings.
//!
//! Rows are stored as `f32`; every reduction (norms, dot products) is
//! accumulated in `f64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PcpError, Result};
use crate::par;

/// Maximum deviation from unit norm tolerated for a stored row.
pub const UNIT_TOLERANCE: f64 = 1e-5;

const PCPE_MAGIC: &[u8; 4] = b"PCPE";

/// Scalar types a query vector may be expressed in.
pub trait Real: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn dot<A: Real, B: Real>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

pub(crate) fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

/// Scale `v` onto the unit sphere.
pub fn normalize<T: Real>(v: &[T]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(PcpError::NumericError("non-finite vector norm".into()));
    }
    if n == 0.0 {
        return Err(PcpError::DegenerateVector);
    }
    Ok(v.iter().map(|&x| x.to_f64() / n).collect())
}

/// `f32` variant of [`normalize`] used when writing rows.
pub fn normalize_f32<T: Real>(v: &[T]) -> Result<Vec<f32>> {
    Ok(normalize(v)?.into_iter().map(|x| x as f32).collect())
}

/// Inner product of two unit vectors.
pub fn cosine_sim<A: Real, B: Real>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PcpError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(a, b))
}

/// One unit-length `dim`-vector per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    data: Vec<f32>,
    dim: usize,
    count: usize,
}

impl EmbeddingBank {
    /// Rows drawn from an isotropic Gaussian, then normalized.
    pub fn random<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(PcpError::ConfigError(format!(
                "bank needs positive shape, got {count}x{dim}"
            )));
        }
        let mut data = Vec::with_capacity(count * dim);
        let mut row = vec![0.0f64; dim];
        for _ in 0..count {
            loop {
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(rng);
                }
                if let Ok(unit) = normalize_f32(&row) {
                    data.extend_from_slice(&unit);
                    break;
                }
            }
        }
        Ok(Self { data, dim, count })
    }

    /// Build a bank from arbitrary nonzero rows, normalizing each.
    pub fn from_rows<T: Real>(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || dim == 0 {
            return Err(PcpError::ConfigError("bank needs at least one nonempty row".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(PcpError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend(normalize_f32(row)?);
        }
        Ok(Self {
            data,
            dim,
            count: rows.len(),
        })
    }

    /// Wrap row-major data that must already be unit-norm. No rescaling is
    /// applied, so the stored bits are exactly `data`.
    pub fn from_unit_data(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(PcpError::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        let count = data.len() / dim;
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(PcpError::NumericError(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { data, dim, count })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn try_row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.count {
            return Err(PcpError::IndexError {
                index,
                len: self.count,
            });
        }
        Ok(self.row(index))
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major view of all components.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Momentum update: `row := normalize(m * old + (1 - m) * fresh)`.
    pub fn update<T: Real>(&mut self, index: usize, fresh: &[T], momentum: f64) -> Result<&[f32]> {
        if index >= self.count {
            return Err(PcpError::IndexError {
                index,
                len: self.count,
            });
        }
        if fresh.len() != self.dim {
            return Err(PcpError::DimensionMismatch {
                expected: self.dim,
                got: fresh.len(),
            });
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(PcpError::ConfigError(format!(
                "bank momentum {momentum} outside [0, 1]"
            )));
        }
        let dim = self.dim;
        let old = &self.data[index * dim..(index + 1) * dim];
        // Mixing a row with itself is the identity.
        let same = old
            .iter()
            .zip(fresh)
            .all(|(&a, &b)| a as f64 == b.to_f64());
        if !same {
            let mixed: Vec<f64> = old
                .iter()
                .zip(fresh)
                .map(|(&o, &f)| momentum * o as f64 + (1.0 - momentum) * f.to_f64())
                .collect();
            let unit = normalize_f32(&mixed)?;
            self.data[index * dim..(index + 1) * dim].copy_from_slice(&unit);
        }
        Ok(self.row(index))
    }

    /// Cosine similarity of `v` against every row.
    pub fn all_sims<T: Real>(&self, v: &[T]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(PcpError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(par::map_range(self.count, |i| dot(self.row(i), v)))
    }

    /// Serialize as `PCPE`: magic, u32 N, u32 D, then N*D little-endian f32.
    pub fn to_pcpe_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(PCPE_MAGIC);
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Parse a `PCPE` buffer; bits are reproduced exactly.
    pub fn from_pcpe_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != PCPE_MAGIC {
            return Err(PcpError::ingest("offset 0", "missing PCPE magic"));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + count * dim * 4;
        if bytes.len() != expected {
            return Err(PcpError::ingest(
                "offset 12",
                format!("expected {expected} bytes for {count}x{dim}, found {}", bytes.len()),
            ));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_unit_data(dim, data)
    }
}
