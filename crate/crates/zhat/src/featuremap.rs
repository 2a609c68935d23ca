//! Randomized feature maps for the exp dot-product kernel, and the
//! precomputation that turns partition function estimation into a P-term
//! dot product.
//!
//! A feature is `φ(x) = √(a_M p^{M+1}) · Π_{r=1}^{M} ω_r·x`, where
//! `a_m = 1/m!`, the degree `M` is drawn with `P[M = m] = 1/p^{m+1}`, and
//! each `ω_r` is a Rademacher vector (entries ±1). Because the coefficient
//! exactly inverts the sampling probability, `E[φ(x)·φ(y)] = Σ_m a_m (x·y)^m
//! = exp(x·y)` for a single feature; averaging P of them concentrates the
//! estimate. For `p > 2` the degree weights sum to `1/(p-1) < 1`; the
//! leftover mass maps to a dead feature that is identically zero, which
//! keeps the expectation identity intact for every `p >= 2` (and is vacuous
//! at the default `p = 2`).
//!
//! With `λ̃_j = (1/P) Σᵢ φ_j(vᵢ)` precomputed over the embedding matrix
//! (`O(N·P·d)` once), an estimate is `Ẑ(q) = Σⱼ λ̃_j φ_j(q)`, `O(P·d)` per
//! query. Products of up to 64 dot products overflow f64 easily, so
//! features are carried as signed log-magnitudes throughout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::estimators::{Diagnostics, Estimate, Method};
use crate::numeric::{derive_seed, signed_log_sum, SignedLog};

/// Hard cap on sampled degrees. `P[M > 64] < 1e-19` at `p = 2`; the tail
/// probability is folded onto the cap.
pub const MAX_DEGREE: u32 = 64;

/// Degree marker for a dead feature (`p > 2` leftover mass); `φ ≡ 0`.
const DEAD: u8 = u8::MAX;

/// A sampled feature map plus, once precomputed, the per-feature data
/// coefficients `λ̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapModel {
    dim: usize,
    p: f64,
    seed: u64,
    /// Per-feature degree `M_j`; `DEAD` for zero features.
    degrees: Vec<u8>,
    /// Rademacher rows for all features, bit-packed: bit = 1 means +1.
    /// Feature `j` owns rows `row_offsets[j] .. row_offsets[j] + M_j`.
    signs: Vec<u64>,
    row_offsets: Vec<usize>,
    lambda: Option<Vec<SignedLog>>,
}

impl FeatureMapModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_features(&self) -> usize {
        self.degrees.len()
    }

    /// Degree of feature `j`, `None` for a dead feature.
    pub fn degree(&self, j: usize) -> Option<u32> {
        match self.degrees[j] {
            DEAD => None,
            m => Some(u32::from(m)),
        }
    }

    pub fn has_lambda(&self) -> bool {
        self.lambda.is_some()
    }

    pub fn lambda(&self) -> Option<&[SignedLog]> {
        self.lambda.as_deref()
    }

    fn words_per_row(&self) -> usize {
        words_per_row(self.dim)
    }

    pub(crate) fn from_raw_parts(
        dim: usize,
        p: f64,
        seed: u64,
        degrees: Vec<u8>,
        signs: Vec<u64>,
        lambda: Option<Vec<SignedLog>>,
    ) -> Result<FeatureMapModel> {
        let mut row_offsets = Vec::with_capacity(degrees.len());
        let mut rows = 0usize;
        for &m in &degrees {
            row_offsets.push(rows);
            if m != DEAD {
                rows += m as usize;
            }
        }
        if signs.len() != rows * words_per_row(dim) {
            return Err(Error::CorruptModel(format!(
                "sign storage holds {} words, need {}",
                signs.len(),
                rows * words_per_row(dim)
            )));
        }
        if let Some(ref l) = lambda {
            if l.len() != degrees.len() {
                return Err(Error::CorruptModel(format!(
                    "{} lambda entries for {} features",
                    l.len(),
                    degrees.len()
                )));
            }
        }
        Ok(FeatureMapModel {
            dim,
            p,
            seed,
            degrees,
            signs,
            row_offsets,
            lambda,
        })
    }
}

fn words_per_row(dim: usize) -> usize {
    dim.div_ceil(64)
}

/// `ln(m!)` for m in 0..=64.
fn ln_factorial(m: u32) -> f64 {
    debug_assert!(m <= MAX_DEGREE);
    let mut acc = 0.0;
    for i in 2..=m {
        acc += f64::from(i).ln();
    }
    acc
}

/// `ln √(a_M · p^{M+1}) = ((M+1)·ln p - ln M!) / 2`.
fn log_coeff(m: u32, p: f64) -> f64 {
    0.5 * ((f64::from(m) + 1.0) * p.ln() - ln_factorial(m))
}

/// Draw a degree from `P[M = m] = 1/p^{m+1}`. Returns `None` for the dead
/// leftover mass when `p > 2`.
fn sample_degree(rng: &mut ChaCha8Rng, p: f64) -> Option<u32> {
    let u: f64 = rng.random();
    let scaled = u * (p - 1.0);
    if scaled >= 1.0 {
        return None;
    }
    let x = -(1.0 - scaled).ln() / p.ln();
    let m = if x.is_finite() { x.floor() as u32 } else { MAX_DEGREE };
    Some(m.min(MAX_DEGREE))
}

/// Sample the degrees and Rademacher sign rows of `n_features` features.
/// Each feature uses its own derived RNG stream, so the model is a pure
/// function of `(dim, n_features, p, seed)`.
pub fn build_feature_map(
    dim: usize,
    n_features: usize,
    p: f64,
    seed: u64,
) -> Result<FeatureMapModel> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be >= 1"));
    }
    if n_features == 0 {
        return Err(Error::invalid("n_features", "must be >= 1"));
    }
    if !p.is_finite() || p < 2.0 {
        return Err(Error::invalid(
            "p",
            format!("must be >= 2 (heavier degree tails blow up the estimator variance), got {p}"),
        ));
    }
    let wpr = words_per_row(dim);
    let tail_mask: u64 = if dim % 64 == 0 {
        u64::MAX
    } else {
        (1u64 << (dim % 64)) - 1
    };

    let mut degrees = Vec::with_capacity(n_features);
    let mut signs = Vec::new();
    let mut row_offsets = Vec::with_capacity(n_features);
    let mut rows = 0usize;
    for j in 0..n_features {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64));
        row_offsets.push(rows);
        match sample_degree(&mut rng, p) {
            None => degrees.push(DEAD),
            Some(m) => {
                degrees.push(m as u8);
                for _ in 0..m {
                    for w in 0..wpr {
                        let mut word = rng.next_u64();
                        if w == wpr - 1 {
                            word &= tail_mask;
                        }
                        signs.push(word);
                    }
                }
                rows += m as usize;
            }
        }
    }
    Ok(FeatureMapModel {
        dim,
        p,
        seed,
        degrees,
        signs,
        row_offsets,
        lambda: None,
    })
}

/// `φ_j(x)` as a signed log-magnitude. `total` must be `Σᵢ xᵢ`.
fn apply_with_total(model: &FeatureMapModel, j: usize, x: &[f64], total: f64) -> SignedLog {
    let m = match model.degrees[j] {
        DEAD => return SignedLog::ZERO,
        m => m as usize,
    };
    let mut sign: i8 = 1;
    let mut log_mag = log_coeff(m as u32, model.p);
    let wpr = model.words_per_row();
    let base = model.row_offsets[j] * wpr;
    for r in 0..m {
        let row = &model.signs[base + r * wpr..base + (r + 1) * wpr];
        let mut sum_set = 0.0;
        for (w, &word) in row.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let i = bits.trailing_zeros() as usize;
                sum_set += x[w * 64 + i];
                bits &= bits - 1;
            }
        }
        // ω has +1 on set bits, -1 elsewhere
        let dot = 2.0 * sum_set - total;
        if dot == 0.0 {
            return SignedLog::ZERO;
        }
        if dot < 0.0 {
            sign = -sign;
        }
        log_mag += dot.abs().ln();
    }
    SignedLog { sign, log_mag }
}

/// Evaluate feature `j` on `x`.
pub fn apply_feature(model: &FeatureMapModel, j: usize, x: &[f64]) -> Result<SignedLog> {
    if x.len() != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            got: x.len(),
        });
    }
    if j >= model.n_features() {
        return Err(Error::IndexOutOfRange {
            index: j,
            n: model.n_features(),
        });
    }
    let total: f64 = x.iter().sum();
    Ok(apply_with_total(model, j, x, total))
}

/// Precompute `λ̃_j = (1/P) Σᵢ φ_j(vᵢ)` over the embedding matrix. One-time
/// `O(N·P·d)` cost; parallel over features, deterministic regardless of
/// worker count.
pub fn precompute_lambda_tilde(model: &mut FeatureMapModel, v: &EmbeddingMatrix) -> Result<()> {
    if v.dim() != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            got: v.dim(),
        });
    }
    let n = v.n_vectors();
    let totals: Vec<f64> = (0..n).map(|i| v.row(i).iter().sum()).collect();
    let log_p_features = (model.n_features() as f64).ln();
    let lambda: Vec<SignedLog> = (0..model.n_features())
        .into_par_iter()
        .map(|j| {
            let terms = (0..n).map(|i| apply_with_total(model, j, v.row(i), totals[i]));
            signed_log_sum(terms).scale_log(-log_p_features)
        })
        .collect();
    if let Some(bad) = lambda
        .iter()
        .position(|l| l.sign != 0 && !l.log_mag.is_finite())
    {
        return Err(Error::invalid(
            "lambda",
            format!("non-finite coefficient for feature {bad}"),
        ));
    }
    model.lambda = Some(lambda);
    Ok(())
}

/// `Ẑ(q) = Σⱼ λ̃_j φ_j(q)`. A negative draw is clamped to the smallest
/// positive normal and flagged, since consumers require `Z > 0`.
pub fn estimate_fmbe(model: &FeatureMapModel, q: &[f64]) -> Result<Estimate> {
    if q.len() != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            got: q.len(),
        });
    }
    let lambda = model.lambda.as_deref().ok_or(Error::MissingLambda)?;
    let total: f64 = q.iter().sum();
    let terms = (0..model.n_features())
        .map(|j| lambda[j].mul(apply_with_total(model, j, q, total)));
    let z = signed_log_sum(terms);
    if z.sign > 0 {
        Ok(Estimate::new(z.log_mag, Method::Fmbe, Diagnostics::default()))
    } else {
        Ok(Estimate::new(
            f64::MIN_POSITIVE.ln(),
            Method::Fmbe,
            Diagnostics {
                iterations: 0,
                not_converged: false,
                clamped: true,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// serialization
//
// Little-endian layout:
//   magic "ZHFM" | version u32 = 1 | dim u32 | p f64 | seed u64 |
//   n_features u64 | lambda_present u8 |
//   n_features × degree u8 (255 = dead) |
//   total_rows × words_per_row × sign word u64 |
//   if lambda_present: n_features × (sign i8, log_mag f64)
// ---------------------------------------------------------------------------

const FM_MAGIC: &[u8; 4] = b"ZHFM";
const FM_VERSION: u32 = 1;

/// Write the model to `writer` in the versioned binary layout above.
pub fn write_model<W: Write>(model: &FeatureMapModel, writer: &mut W) -> Result<()> {
    writer.write_all(FM_MAGIC)?;
    writer.write_all(&FM_VERSION.to_le_bytes())?;
    writer.write_all(&(model.dim as u32).to_le_bytes())?;
    writer.write_all(&model.p.to_le_bytes())?;
    writer.write_all(&model.seed.to_le_bytes())?;
    writer.write_all(&(model.n_features() as u64).to_le_bytes())?;
    writer.write_all(&[u8::from(model.lambda.is_some())])?;
    writer.write_all(&model.degrees)?;
    for word in &model.signs {
        writer.write_all(&word.to_le_bytes())?;
    }
    if let Some(ref lambda) = model.lambda {
        for l in lambda {
            writer.write_all(&[l.sign as u8])?;
            writer.write_all(&l.log_mag.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a model from untrusted bytes; structural problems surface as
/// [`Error::CorruptModel`], never panics or unbounded allocation.
pub fn read_model<R: BufRead>(reader: &mut R) -> Result<FeatureMapModel> {
    let mut magic = [0u8; 4];
    read_exact_or(reader, &mut magic, "magic")?;
    if &magic != FM_MAGIC {
        return Err(Error::CorruptModel("bad magic".into()));
    }
    let version = read_u32(reader)?;
    if version != FM_VERSION {
        return Err(Error::CorruptModel(format!("unsupported version {version}")));
    }
    let dim = read_u32(reader)? as usize;
    if dim == 0 {
        return Err(Error::CorruptModel("dim = 0".into()));
    }
    let p = read_f64(reader)?;
    if !p.is_finite() || p < 2.0 {
        return Err(Error::CorruptModel(format!("invalid p {p}")));
    }
    let seed = read_u64(reader)?;
    let n_features = read_u64(reader)? as usize;
    if n_features == 0 {
        return Err(Error::CorruptModel("zero features".into()));
    }
    let mut lambda_present = [0u8; 1];
    read_exact_or(reader, &mut lambda_present, "lambda flag")?;
    if lambda_present[0] > 1 {
        return Err(Error::CorruptModel("lambda flag not 0/1".into()));
    }

    let degrees = read_chunked(reader, n_features, "degrees")?;
    let mut rows = 0usize;
    for &m in &degrees {
        if m != DEAD {
            if m as u32 > MAX_DEGREE {
                return Err(Error::CorruptModel(format!("degree {m} exceeds cap")));
            }
            rows = rows
                .checked_add(m as usize)
                .ok_or_else(|| Error::CorruptModel("row count overflow".into()))?;
        }
    }
    let n_words = rows
        .checked_mul(words_per_row(dim))
        .ok_or_else(|| Error::CorruptModel("sign storage overflow".into()))?;
    let sign_bytes = read_chunked(reader, n_words * 8, "sign rows")?;
    let signs: Vec<u64> = sign_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();

    let lambda = if lambda_present[0] == 1 {
        let mut lambda = Vec::with_capacity(n_features.min(1 << 20));
        for _ in 0..n_features {
            let mut sign = [0u8; 1];
            read_exact_or(reader, &mut sign, "lambda sign")?;
            let sign = sign[0] as i8;
            if !(-1..=1).contains(&sign) {
                return Err(Error::CorruptModel(format!("lambda sign {sign}")));
            }
            let log_mag = read_f64(reader)?;
            if log_mag.is_nan() || (sign != 0 && log_mag == f64::INFINITY) {
                return Err(Error::CorruptModel("non-finite lambda".into()));
            }
            lambda.push(if sign == 0 {
                SignedLog::ZERO
            } else {
                SignedLog { sign, log_mag }
            });
        }
        Some(lambda)
    } else {
        None
    };

    FeatureMapModel::from_raw_parts(dim, p, seed, degrees, signs, lambda)
}

pub fn save_model(model: &FeatureMapModel, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_model(model, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FeatureMapModel> {
    let mut reader = BufReader::new(File::open(path)?);
    read_model(&mut reader)
}

fn read_exact_or<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::CorruptModel(format!("truncated while reading {what}")))
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(reader, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(reader: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(reader, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(reader: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or(reader, &mut b, "f64")?;
    Ok(f64::from_le_bytes(b))
}

/// Read exactly `len` bytes without trusting `len` for preallocation.
fn read_chunked<R: Read>(reader: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(len.min(1 << 20));
    let mut remaining = len;
    let mut chunk = [0u8; 8192];
    while remaining > 0 {
        let take = remaining.min(chunk.len());
        reader
            .read_exact(&mut chunk[..take])
            .map_err(|_| Error::CorruptModel(format!("truncated while reading {what}")))?;
        out.extend_from_slice(&chunk[..take]);
        remaining -= take;
    }
    Ok(out)
}
