//! Embedding matrices, query sets, and the on-disk vector formats.
//!
//! Two interchangeable formats are supported:
//!
//! * **text** — line 1 is `N d`; each of the next `N` lines is
//!   `label f₁ … f_d` with whitespace-separated decimal floats. Values are
//!   written with Rust's shortest round-trip formatting, so text files
//!   reproduce `f64` data bit-exactly.
//! * **binary** — ASCII header `N d\n`, then `N` records of
//!   `label 0x20 [d × f32 little-endian] 0x0A`. This is the common
//!   embedding interchange layout; storage is `f32`, so only
//!   `f32`-representable data survives a binary round trip unchanged.
//!
//! Vectors are stored exactly as ingested and never re-normalized; they are
//! the weights of a trained output layer and rescaling them would change
//! every score.
//!
//! Both parsers accept untrusted input: they read incrementally, cap
//! speculative allocation, and return typed errors naming the offending
//! line or byte offset instead of panicking.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric;

/// Upper bound on speculative `Vec` reservation while parsing. Anything the
/// header promises beyond this is only allocated once the data is actually
/// read, so a forged header cannot trigger an OOM.
const RESERVE_CAP: usize = 1 << 20;

/// Longest accepted label, in bytes.
const MAX_LABEL_BYTES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Format> {
        match s {
            "text" => Ok(Format::Text),
            "binary" => Ok(Format::Binary),
            other => Err(Error::invalid(
                "format",
                format!("unknown format `{other}` (expected text|binary)"),
            )),
        }
    }
}

/// The classifier output layer: `N` weight vectors of dimension `d`,
/// stored row-major, with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<String>,
}

impl EmbeddingMatrix {
    /// Build a matrix from row-major data. `labels` must be empty or have
    /// one entry per row; labels may not contain whitespace (the formats
    /// use it as a delimiter).
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<String>) -> Result<EmbeddingMatrix> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(
                "data",
                format!("length {} is not a positive multiple of dim {}", data.len(), dim),
            ));
        }
        let n = data.len() / dim;
        if !labels.is_empty() && labels.len() != n {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(bad) = labels.iter().find(|l| l.chars().any(char::is_whitespace)) {
            return Err(Error::invalid(
                "labels",
                format!("label `{bad}` contains whitespace"),
            ));
        }
        for (i, x) in data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    line: i / dim + 2,
                    field: i % dim + 2,
                });
            }
        }
        Ok(EmbeddingMatrix { dim, data, labels })
    }

    pub fn n_vectors(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }

    pub fn find_label(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Label used when writing row `i`: the stored label, or the row index
    /// when the matrix is unlabeled.
    fn write_label(&self, i: usize) -> String {
        match self.label(i) {
            Some(l) => l.to_string(),
            None => i.to_string(),
        }
    }
}

/// Queries paired with the matrix they were drawn from. `noise_level` is
/// the norm of the added noise relative to the norm of the source vector;
/// zero means the queries are bit-for-bit copies of their sources.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    dim: usize,
    data: Vec<f64>,
    source_indices: Option<Vec<usize>>,
    noise_level: f64,
}

impl QuerySet {
    /// Wrap externally supplied query vectors (row-major).
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<QuerySet> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(
                "queries",
                format!("length {} is not a positive multiple of dim {}", data.len(), dim),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("queries", "non-finite query entry"));
        }
        Ok(QuerySet {
            dim,
            data,
            source_indices: None,
            noise_level: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn source_indices(&self) -> Option<&[usize]> {
        self.source_indices.as_deref()
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    /// Re-perturb this set's rows with fresh noise of relative norm `rho`.
    /// The current rows act as the sources; source indices are preserved.
    pub fn with_noise(&self, rho: f64, seed: u64) -> Result<QuerySet> {
        let data = perturb_rows(&self.data, self.dim, rho, seed)?;
        Ok(QuerySet {
            dim: self.dim,
            data,
            source_indices: self.source_indices.clone(),
            noise_level: rho,
        })
    }
}

/// Load an embedding matrix from disk.
pub fn load_embeddings(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingMatrix> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    match format {
        Format::Text => parse_text(&mut reader),
        Format::Binary => parse_binary(&mut reader),
    }
}

/// Write an embedding matrix to disk. Binary storage rounds entries to
/// `f32`.
pub fn save_embeddings(
    matrix: &EmbeddingMatrix,
    path: impl AsRef<Path>,
    format: Format,
) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    match format {
        Format::Text => write_text(matrix, &mut writer)?,
        Format::Binary => write_binary(matrix, &mut writer)?,
    }
    writer.flush()?;
    Ok(())
}

/// Parse the text format from any buffered reader.
pub fn parse_text<R: BufRead>(reader: &mut R) -> Result<EmbeddingMatrix> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(Error::MalformedHeader {
            line: 1,
            detail: "empty input".into(),
        });
    }
    let (n, dim) = parse_header(line.trim_end_matches(['\n', '\r']), 1)?;

    let mut data: Vec<f64> = Vec::with_capacity((n.saturating_mul(dim)).min(RESERVE_CAP));
    let mut labels: Vec<String> = Vec::with_capacity(n.min(RESERVE_CAP));
    let mut row = 0usize;
    let mut line_no = 1usize;
    while row < n {
        line.clear();
        line_no += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::MissingRows {
                expected: n,
                found: row,
            });
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            // blank lines between records are tolerated
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let label = tokens[0];
        let values = &tokens[1..];
        if values.len() != dim {
            return Err(Error::RowLength {
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        for (j, tok) in values.iter().enumerate() {
            let value: f64 = tok.parse().map_err(|_| Error::BadNumber {
                line: line_no,
                field: j + 2,
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    line: line_no,
                    field: j + 2,
                });
            }
            data.push(value);
        }
        labels.push(label.to_string());
        row += 1;
    }
    EmbeddingMatrix::new(dim, data, labels)
}

/// Parse the binary format from any buffered reader.
pub fn parse_binary<R: BufRead>(reader: &mut R) -> Result<EmbeddingMatrix> {
    let mut offset = 0u64;
    let header = match read_token(reader, b'\n', 256, &mut offset)? {
        Token::Bytes(b) => b,
        Token::Eof | Token::CapExceeded => {
            return Err(Error::MalformedHeader {
                line: 1,
                detail: "missing newline-terminated header".into(),
            })
        }
    };
    let header = std::str::from_utf8(&header).map_err(|_| Error::MalformedHeader {
        line: 1,
        detail: "header is not ASCII".into(),
    })?;
    let (n, dim) = parse_header(header.trim_end_matches('\r'), 1)?;

    let mut data: Vec<f64> = Vec::with_capacity((n.saturating_mul(dim)).min(RESERVE_CAP));
    let mut labels: Vec<String> = Vec::with_capacity(n.min(RESERVE_CAP));
    let mut float_buf = vec![0u8; dim.min(RESERVE_CAP) * 4];
    for record in 0..n {
        let label_bytes = match read_token(reader, b' ', MAX_LABEL_BYTES, &mut offset)? {
            Token::Bytes(bytes) => bytes,
            Token::Eof => return Err(Error::Truncated { record, offset }),
            Token::CapExceeded => {
                return Err(Error::MalformedRecord {
                    record,
                    offset,
                    detail: format!("label exceeds {MAX_LABEL_BYTES} bytes"),
                })
            }
        };
        let label = String::from_utf8(label_bytes).map_err(|_| Error::MalformedRecord {
            record,
            offset,
            detail: "label is not valid UTF-8".into(),
        })?;
        if label.chars().any(char::is_whitespace) {
            return Err(Error::MalformedRecord {
                record,
                offset,
                detail: "label contains whitespace".into(),
            });
        }
        if float_buf.len() < dim * 4 {
            float_buf.resize(dim * 4, 0);
        }
        reader
            .read_exact(&mut float_buf[..dim * 4])
            .map_err(|_| Error::Truncated { record, offset })?;
        offset += (dim * 4) as u64;
        for (j, chunk) in float_buf[..dim * 4].chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    line: record + 1,
                    field: j + 2,
                });
            }
            data.push(f64::from(value));
        }
        let mut terminator = [0u8; 1];
        reader
            .read_exact(&mut terminator)
            .map_err(|_| Error::Truncated { record, offset })?;
        offset += 1;
        if terminator[0] != b'\n' {
            return Err(Error::MalformedRecord {
                record,
                offset,
                detail: format!("expected 0x0A record terminator, found 0x{:02x}", terminator[0]),
            });
        }
        labels.push(label);
    }
    EmbeddingMatrix::new(dim, data, labels)
}

pub fn write_text<W: Write>(matrix: &EmbeddingMatrix, writer: &mut W) -> Result<()> {
    writeln!(writer, "{} {}", matrix.n_vectors(), matrix.dim())?;
    for i in 0..matrix.n_vectors() {
        write!(writer, "{}", matrix.write_label(i))?;
        for x in matrix.row(i) {
            write!(writer, " {x}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(matrix: &EmbeddingMatrix, writer: &mut W) -> Result<()> {
    writeln!(writer, "{} {}", matrix.n_vectors(), matrix.dim())?;
    for i in 0..matrix.n_vectors() {
        write!(writer, "{} ", matrix.write_label(i))?;
        for &x in matrix.row(i) {
            writer.write_all(&(x as f32).to_le_bytes())?;
        }
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Draw an `n × d` matrix of i.i.d. zero-mean Gaussian entries with the
/// given standard deviation. Entries are quantized to `f32` precision so
/// that either on-disk format reproduces them exactly. Unlabeled.
pub fn synthesize_gaussian(n: usize, d: usize, scale: f64, seed: u64) -> Result<EmbeddingMatrix> {
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "must be >= 1"));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid("scale", "must be a finite non-negative real"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let z: f64 = rng.sample(StandardNormal);
        data.push((z * scale) as f32 as f64);
    }
    EmbeddingMatrix::new(d, data, Vec::new())
}

/// Perturb selected rows of `base` with isotropic Gaussian noise rescaled
/// so that `‖noise‖ = rho · ‖row‖`. `rho = 0` copies the rows bit-for-bit,
/// and a zero source vector is always returned unchanged.
pub fn perturb_queries(
    base: &EmbeddingMatrix,
    indices: &[usize],
    rho: f64,
    seed: u64,
) -> Result<QuerySet> {
    if indices.is_empty() {
        return Err(Error::invalid("indices", "query index list is empty"));
    }
    let n = base.n_vectors();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, n });
    }
    let d = base.dim();
    let mut rows = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        rows.extend_from_slice(base.row(i));
    }
    let data = perturb_rows(&rows, d, rho, seed)?;
    Ok(QuerySet {
        dim: d,
        data,
        source_indices: Some(indices.to_vec()),
        noise_level: rho,
    })
}

fn perturb_rows(rows: &[f64], d: usize, rho: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::invalid("noise_level", "must be a finite non-negative real"));
    }
    if rho == 0.0 {
        return Ok(rows.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows.len());
    let mut eps = vec![0.0f64; d];
    for row in rows.chunks_exact(d) {
        let target = rho * numeric::norm(row);
        if target == 0.0 {
            out.extend_from_slice(row);
            // keep the stream aligned so per-query noise does not depend
            // on how many zero vectors precede it
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            continue;
        }
        let mut eps_norm = 0.0;
        while eps_norm == 0.0 {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            eps_norm = numeric::norm(&eps);
        }
        let factor = target / eps_norm;
        for (x, e) in row.iter().zip(&eps) {
            out.push(x + factor * e);
        }
    }
    Ok(out)
}

/// Sample `count` distinct row indices uniformly from `[0, n_total)`,
/// returned in ascending order.
pub fn sample_query_indices(n_total: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > n_total {
        return Err(Error::invalid(
            "count",
            format!("must be in 1..={n_total}, got {count}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n_total).collect();
    for i in 0..count {
        let j = rng.random_range(i..n_total);
        pool.swap(i, j);
    }
    let mut picked = pool[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn parse_header(line: &str, line_no: usize) -> Result<(usize, usize)> {
    let mut parts = line.split_whitespace();
    let n_tok = parts.next().ok_or_else(|| Error::MalformedHeader {
        line: line_no,
        detail: "expected `N d`".into(),
    })?;
    let d_tok = parts.next().ok_or_else(|| Error::MalformedHeader {
        line: line_no,
        detail: "expected two fields `N d`".into(),
    })?;
    if parts.next().is_some() {
        return Err(Error::MalformedHeader {
            line: line_no,
            detail: "trailing fields after `N d`".into(),
        });
    }
    let n: usize = n_tok.parse().map_err(|_| Error::MalformedHeader {
        line: line_no,
        detail: format!("`{n_tok}` is not a count"),
    })?;
    let d: usize = d_tok.parse().map_err(|_| Error::MalformedHeader {
        line: line_no,
        detail: format!("`{d_tok}` is not a count"),
    })?;
    if n == 0 || d == 0 {
        return Err(Error::EmptyDims {
            line: line_no,
            n,
            d,
        });
    }
    if n.checked_mul(d).is_none() {
        return Err(Error::MalformedHeader {
            line: line_no,
            detail: format!("N*d overflows: {n} * {d}"),
        });
    }
    Ok((n, d))
}

enum Token {
    Bytes(Vec<u8>),
    Eof,
    CapExceeded,
}

/// Read bytes until `delim` (consumed, not returned). EOF anywhere short
/// of the delimiter reports `Token::Eof`; the caller knows which record it
/// was reading.
fn read_token<R: BufRead>(
    reader: &mut R,
    delim: u8,
    cap: usize,
    offset: &mut u64,
) -> Result<Token> {
    let mut out = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte)? {
            0 => return Ok(Token::Eof),
            _ => {
                *offset += 1;
                if byte[0] == delim {
                    return Ok(Token::Bytes(out));
                }
                out.push(byte[0]);
                if out.len() > cap {
                    return Ok(Token::CapExceeded);
                }
            }
        }
    }
}
