//! Complex CSI tensor representation, 3D patching, and token-level padding.
//!
//! A CSI sample is a complex tensor over (time blocks, subcarriers, antenna
//! ports), stored as separate real and imaginary planes in row-major
//! time-major order. Patching cuts the tensor into fixed-size 3D blocks and
//! flattens each block into one token row; the token count is
//! `ceil(T/t) * ceil(K/k) * ceil(A/a)`. Axes that are not divisible by the
//! patch edge are zero-filled inside the sample before slicing, and those
//! partial tokens count as valid.
//!
//! All operations are pure functions on immutable inputs and all math is in
//! double precision.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Record magic for the binary dataset format ("CSI1").
const DATASET_MAGIC: u32 = u32::from_le_bytes(*b"CSI1");
/// Binary dataset format version.
const DATASET_VERSION: u32 = 1;

#[derive(Debug)]
pub enum TensorError {
    /// An axis count or patch edge was zero.
    InvalidSpec(String),
    /// Input contained NaN or infinity.
    NonFinite(String),
    /// Two shapes that must agree did not.
    ShapeMismatch { expected: String, actual: String },
    /// `pad_tokens` was asked to shrink a sequence; truncation is refused.
    TruncationRefused { valid_len: usize, target_len: usize },
    /// Binary dataset file was malformed.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidSpec(s) => write!(f, "invalid spec: {s}"),
            Self::NonFinite(s) => write!(f, "non-finite value in {s}"),
            Self::ShapeMismatch { expected, actual } => {
                write!(f, "shape mismatch: expected {expected}, got {actual}")
            }
            Self::TruncationRefused {
                valid_len,
                target_len,
            } => write!(
                f,
                "refusing to truncate: target length {target_len} < valid length {valid_len}"
            ),
            Self::Format(s) => write!(f, "bad dataset file: {s}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for TensorError {}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Tensor extents: time blocks T, subcarriers K, antenna ports A.
///
/// The antenna axis is a single axis regardless of how a source labels it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub time_blocks: usize,
    pub subcarriers: usize,
    pub antenna_ports: usize,
}

impl ScaleSpec {
    pub fn new(time_blocks: usize, subcarriers: usize, antenna_ports: usize) -> Result<Self, TensorError> {
        if time_blocks == 0 || subcarriers == 0 || antenna_ports == 0 {
            return Err(TensorError::InvalidSpec(format!(
                "scale axes must be >= 1, got ({time_blocks}, {subcarriers}, {antenna_ports})"
            )));
        }
        Ok(ScaleSpec {
            time_blocks,
            subcarriers,
            antenna_ports,
        })
    }

    /// Number of complex elements.
    pub fn elems(&self) -> usize {
        self.time_blocks * self.subcarriers * self.antenna_ports
    }

    /// Patch-grid extents for a given patch size (ceiling division per axis).
    pub fn grid(&self, patch: &PatchSpec) -> GridShape {
        GridShape {
            time: self.time_blocks.div_ceil(patch.time),
            freq: self.subcarriers.div_ceil(patch.freq),
            antenna: self.antenna_ports.div_ceil(patch.antenna),
        }
    }
}

/// Patch edge lengths along (time, frequency, antenna).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub time: usize,
    pub freq: usize,
    pub antenna: usize,
}

impl PatchSpec {
    pub fn new(time: usize, freq: usize, antenna: usize) -> Result<Self, TensorError> {
        if time == 0 || freq == 0 || antenna == 0 {
            return Err(TensorError::InvalidSpec(format!(
                "patch edges must be >= 1, got ({time}, {freq}, {antenna})"
            )));
        }
        Ok(PatchSpec { time, freq, antenna })
    }

    /// Complex elements per patch.
    pub fn volume(&self) -> usize {
        self.time * self.freq * self.antenna
    }

    /// Real features per token: real plane then imaginary plane.
    pub fn token_dim(&self) -> usize {
        2 * self.volume()
    }
}

/// Patch-grid extents of a patched sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub time: usize,
    pub freq: usize,
    pub antenna: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.time * self.freq * self.antenna
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid coordinates of a flattened token position (time-major order).
    pub fn coords(&self, pos: usize) -> (usize, usize, usize) {
        let a = pos % self.antenna;
        let k = (pos / self.antenna) % self.freq;
        let t = pos / (self.antenna * self.freq);
        (t, k, a)
    }
}

/// Flattened token count of a sample at a given scale and patch size.
pub fn token_length(scale: &ScaleSpec, patch: &PatchSpec) -> usize {
    scale.grid(patch).len()
}

/// A complex 3D array with separate real and imaginary planes, row-major
/// over (time, subcarrier, antenna).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub scale: ScaleSpec,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn zeros(scale: ScaleSpec) -> Self {
        let n = scale.elems();
        ComplexTensor {
            scale,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn new(scale: ScaleSpec, re: Vec<f64>, im: Vec<f64>) -> Result<Self, TensorError> {
        if re.len() != scale.elems() || im.len() != scale.elems() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{} elements", scale.elems()),
                actual: format!("re {}, im {}", re.len(), im.len()),
            });
        }
        Ok(ComplexTensor { scale, re, im })
    }

    #[inline]
    pub fn index(&self, t: usize, k: usize, a: usize) -> usize {
        (t * self.scale.subcarriers + k) * self.scale.antenna_ports + a
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|v| v.is_finite())
    }

    /// Mean |H|^2 per complex element.
    pub fn mean_power(&self) -> f64 {
        let n = self.re.len();
        if n == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .re
            .iter()
            .zip(self.im.iter())
            .map(|(r, i)| r * r + i * i)
            .sum();
        sum / n as f64
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

/// One CSI sample: a complex tensor plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub data: ComplexTensor,
    pub scenario_id: u32,
    pub dataset_id: u32,
    pub sample_id: u32,
}

impl CsiSample {
    pub fn new(
        data: ComplexTensor,
        scenario_id: u32,
        dataset_id: u32,
        sample_id: u32,
    ) -> Result<Self, TensorError> {
        if !data.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "sample {sample_id} of dataset {dataset_id}"
            )));
        }
        Ok(CsiSample {
            data,
            scenario_id,
            dataset_id,
            sample_id,
        })
    }
}

/// Patched, flattened token matrix of one sample.
///
/// Row `r` (for `r < valid_len`) holds patch `r` in time-major grid order;
/// within a row the real plane of the patch comes first, then the imaginary
/// plane, each in time-major element order. Rows at index `>= valid_len` are
/// zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f64>,
    pub token_dim: usize,
    pub valid_len: usize,
    pub grid: GridShape,
}

impl TokenSequence {
    /// Total rows including padding.
    pub fn padded_len(&self) -> usize {
        self.tokens.len().checked_div(self.token_dim).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.tokens[r * self.token_dim..(r + 1) * self.token_dim]
    }
}

/// Cuts a sample into patch tokens.
pub fn patchify(sample: &CsiSample, patch: &PatchSpec) -> Result<TokenSequence, TensorError> {
    if !sample.data.is_finite() {
        return Err(TensorError::NonFinite(format!(
            "sample {} of dataset {}",
            sample.sample_id, sample.dataset_id
        )));
    }
    let scale = &sample.data.scale;
    let grid = scale.grid(patch);
    let valid_len = grid.len();
    let vol = patch.volume();
    let token_dim = patch.token_dim();
    let mut tokens = vec![0.0; valid_len * token_dim];

    for gt in 0..grid.time {
        for gk in 0..grid.freq {
            for ga in 0..grid.antenna {
                let row = (gt * grid.freq + gk) * grid.antenna + ga;
                let base = row * token_dim;
                let mut off = 0;
                for dt in 0..patch.time {
                    for dk in 0..patch.freq {
                        for da in 0..patch.antenna {
                            let t = gt * patch.time + dt;
                            let k = gk * patch.freq + dk;
                            let a = ga * patch.antenna + da;
                            if t < scale.time_blocks
                                && k < scale.subcarriers
                                && a < scale.antenna_ports
                            {
                                let idx = sample.data.index(t, k, a);
                                tokens[base + off] = sample.data.re[idx];
                                tokens[base + vol + off] = sample.data.im[idx];
                            }
                            off += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        token_dim,
        valid_len,
        grid,
    })
}

/// Exact inverse of [`patchify`] on the valid region; intra-sample fill from
/// non-divisible axes is truncated.
pub fn depatchify(
    seq: &TokenSequence,
    scale: &ScaleSpec,
    patch: &PatchSpec,
) -> Result<ComplexTensor, TensorError> {
    let grid = scale.grid(patch);
    if seq.grid != grid || seq.token_dim != patch.token_dim() {
        return Err(TensorError::ShapeMismatch {
            expected: format!("grid {:?}, token_dim {}", grid, patch.token_dim()),
            actual: format!("grid {:?}, token_dim {}", seq.grid, seq.token_dim),
        });
    }
    if seq.valid_len != grid.len() {
        return Err(TensorError::ShapeMismatch {
            expected: format!("valid_len {}", grid.len()),
            actual: format!("valid_len {}", seq.valid_len),
        });
    }
    let vol = patch.volume();
    let mut out = ComplexTensor::zeros(*scale);

    for gt in 0..grid.time {
        for gk in 0..grid.freq {
            for ga in 0..grid.antenna {
                let row = (gt * grid.freq + gk) * grid.antenna + ga;
                let base = row * seq.token_dim;
                let mut off = 0;
                for dt in 0..patch.time {
                    for dk in 0..patch.freq {
                        for da in 0..patch.antenna {
                            let t = gt * patch.time + dt;
                            let k = gk * patch.freq + dk;
                            let a = ga * patch.antenna + da;
                            if t < scale.time_blocks
                                && k < scale.subcarriers
                                && a < scale.antenna_ports
                            {
                                let idx = out.index(t, k, a);
                                out.re[idx] = seq.tokens[base + off];
                                out.im[idx] = seq.tokens[base + vol + off];
                            }
                            off += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Appends zero rows so the sequence has `target_len` rows in total.
///
/// Rows below `valid_len` are copied bit-exactly; never truncates.
pub fn pad_tokens(seq: &TokenSequence, target_len: usize) -> Result<TokenSequence, TensorError> {
    if target_len < seq.valid_len {
        return Err(TensorError::TruncationRefused {
            valid_len: seq.valid_len,
            target_len,
        });
    }
    let mut tokens = Vec::with_capacity(target_len * seq.token_dim);
    tokens.extend_from_slice(&seq.tokens[..seq.valid_len * seq.token_dim]);
    tokens.resize(target_len * seq.token_dim, 0.0);
    Ok(TokenSequence {
        tokens,
        token_dim: seq.token_dim,
        valid_len: seq.valid_len,
        grid: seq.grid,
    })
}

/// Lookup table from pool-wide sample id to patched token sequence.
#[derive(Debug, Default)]
pub struct TokenBank {
    map: std::collections::BTreeMap<u64, TokenSequence>,
}

impl TokenBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u64, seq: TokenSequence) {
        self.map.insert(id, seq);
    }

    pub fn get(&self, id: u64) -> Option<&TokenSequence> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Serializes samples into the binary dataset format.
///
/// Layout: sample count (u32 LE), then per record a header of eight u32 LE
/// fields (magic, version, T, K, A, scenario_id, dataset_id, sample_id)
/// followed by `2*T*K*A` f64 LE values: the real plane then the imaginary
/// plane, row-major over time, subcarrier, antenna.
pub fn encode_dataset(samples: &[CsiSample]) -> Result<Vec<u8>, TensorError> {
    let mut out = Vec::new();
    write_u32(&mut out, samples.len() as u32)?;
    for s in samples {
        let scale = &s.data.scale;
        write_u32(&mut out, DATASET_MAGIC)?;
        write_u32(&mut out, DATASET_VERSION)?;
        write_u32(&mut out, scale.time_blocks as u32)?;
        write_u32(&mut out, scale.subcarriers as u32)?;
        write_u32(&mut out, scale.antenna_ports as u32)?;
        write_u32(&mut out, s.scenario_id)?;
        write_u32(&mut out, s.dataset_id)?;
        write_u32(&mut out, s.sample_id)?;
        for v in s.data.re.iter().chain(s.data.im.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the binary dataset format; the inverse of [`encode_dataset`].
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<CsiSample>, TensorError> {
    let mut r = bytes;
    let count = read_u32(&mut r)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let magic = read_u32(&mut r)?;
        if magic != DATASET_MAGIC {
            return Err(TensorError::Format(format!("bad record magic {magic:#x}")));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let t = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let a = read_u32(&mut r)? as usize;
        let scenario_id = read_u32(&mut r)?;
        let dataset_id = read_u32(&mut r)?;
        let sample_id = read_u32(&mut r)?;
        let scale = ScaleSpec::new(t, k, a)
            .map_err(|e| TensorError::Format(format!("bad scale in record: {e}")))?;
        let n = scale.elems();
        let mut plane = |dst: &mut Vec<f64>| -> Result<(), TensorError> {
            for _ in 0..n {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                dst.push(f64::from_le_bytes(buf));
            }
            Ok(())
        };
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        plane(&mut re)?;
        plane(&mut im)?;
        let data = ComplexTensor::new(scale, re, im)?;
        samples.push(CsiSample::new(data, scenario_id, dataset_id, sample_id)?);
    }
    if !r.is_empty() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after last record",
            r.len()
        )));
    }
    Ok(samples)
}

pub fn write_dataset_file(path: &Path, samples: &[CsiSample]) -> Result<(), TensorError> {
    let bytes = encode_dataset(samples)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<CsiSample>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
