//! Double masking: MAE masks that hide valid tokens from the encoder, and
//! additive attention biases that keep padded tokens out of attention.
//!
//! The two masks are distinct states and never overlap: an MAE mask only ever
//! hides positions below a sequence's valid length, while the attention bias
//! kills keys at or beyond it. The "minus infinity" bias entry is realized as
//! the most negative finite f64; together with max-subtracted softmax this
//! underflows masked weights to exactly zero without ever producing NaN.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::{derive_stream, domain, CounterRng};
use crate::tensor::TokenSequence;

/// Additive bias value standing in for minus infinity.
pub const NEG_BIAS: f64 = f64::MIN;

#[derive(Debug)]
pub enum MaskingError {
    RatioOutOfRange(f64),
    CutOutOfRange { axis: &'static str, cut: usize, grid: usize },
    ZeroValidLen { index: usize },
    ValidLenExceedsTotal { index: usize, valid: usize, total: usize },
    NoVisibleTokens { index: usize },
}

impl fmt::Display for MaskingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RatioOutOfRange(r) => write!(f, "mask ratio {r} outside (0, 1)"),
            Self::CutOutOfRange { axis, cut, grid } => {
                write!(f, "{axis} cut {cut} outside [1, {grid})")
            }
            Self::ZeroValidLen { index } => {
                write!(f, "sample {index} has zero valid length; softmax undefined")
            }
            Self::ValidLenExceedsTotal { index, valid, total } => {
                write!(f, "sample {index}: valid length {valid} > padded length {total}")
            }
            Self::NoVisibleTokens { index } => {
                write!(f, "sample {index} has no visible tokens left for the encoder")
            }
        }
    }
}

impl std::error::Error for MaskingError {}

/// MAE mask family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Random,
    Time,
    Frequency,
}

/// Parameterized mask request, in patch-grid units.
///
/// Cut points given in raw tensor units convert via [`MaskSpec::time_cut`] /
/// [`MaskSpec::frequency_cut`], which apply the ceiling conversion from
/// blocks to patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskSpec {
    /// Hide `round(ratio * valid_len)` uniformly chosen valid positions.
    Random { ratio: f64 },
    /// Keep the first `visible_time_patches` time slices; hide the rest.
    Time { visible_time_patches: usize },
    /// Keep the first `visible_freq_patches` frequency slices; hide the rest.
    Frequency { visible_freq_patches: usize },
}

impl MaskSpec {
    /// Time-prediction mask from a raw cut of `visible_blocks` time blocks.
    pub fn time_cut(visible_blocks: usize, patch_time: usize) -> Self {
        MaskSpec::Time {
            visible_time_patches: visible_blocks.div_ceil(patch_time),
        }
    }

    /// Frequency-prediction mask from a raw cut of `visible_subcarriers`.
    pub fn frequency_cut(visible_subcarriers: usize, patch_freq: usize) -> Self {
        MaskSpec::Frequency {
            visible_freq_patches: visible_subcarriers.div_ceil(patch_freq),
        }
    }

    pub fn kind(&self) -> MaskKind {
        match self {
            Self::Random { .. } => MaskKind::Random,
            Self::Time { .. } => MaskKind::Time,
            Self::Frequency { .. } => MaskKind::Frequency,
        }
    }
}

/// Which valid token positions are hidden from the encoder.
///
/// `hidden` has one flag per valid position; padding positions are a separate
/// state and can never be hidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaeMask {
    pub kind: MaskKind,
    pub hidden: Vec<bool>,
}

impl MaeMask {
    /// An all-visible mask (nothing hidden). Used by task drivers for
    /// degenerate cuts where there is nothing to predict.
    pub fn none(valid_len: usize) -> Self {
        MaeMask {
            kind: MaskKind::Random,
            hidden: vec![false; valid_len],
        }
    }

    pub fn hidden_count(&self) -> usize {
        self.hidden.iter().filter(|&&h| h).count()
    }

    pub fn valid_len(&self) -> usize {
        self.hidden.len()
    }
}

/// Builds an MAE mask over the valid tokens of a sequence.
///
/// Random masking draws positions without replacement from the stream
/// `(seed, MASK domain)`; structural masks are deterministic in the grid.
pub fn mae_mask(seq: &TokenSequence, spec: &MaskSpec, seed: u64) -> Result<MaeMask, MaskingError> {
    let valid = seq.valid_len;
    let grid = seq.grid;
    let mut hidden = vec![false; valid];
    match *spec {
        MaskSpec::Random { ratio } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(MaskingError::RatioOutOfRange(ratio));
            }
            let n_hide = (ratio * valid as f64).round() as usize;
            let mut order: Vec<usize> = (0..valid).collect();
            let mut rng = CounterRng::new(seed, derive_stream(&[domain::MASK, valid as u64]));
            rng.shuffle(&mut order);
            for &pos in order.iter().take(n_hide) {
                hidden[pos] = true;
            }
        }
        MaskSpec::Time { visible_time_patches } => {
            if visible_time_patches == 0 || visible_time_patches >= grid.time {
                return Err(MaskingError::CutOutOfRange {
                    axis: "time",
                    cut: visible_time_patches,
                    grid: grid.time,
                });
            }
            for (pos, flag) in hidden.iter_mut().enumerate() {
                let (t, _, _) = grid.coords(pos);
                *flag = t >= visible_time_patches;
            }
        }
        MaskSpec::Frequency { visible_freq_patches } => {
            if visible_freq_patches == 0 || visible_freq_patches >= grid.freq {
                return Err(MaskingError::CutOutOfRange {
                    axis: "frequency",
                    cut: visible_freq_patches,
                    grid: grid.freq,
                });
            }
            for (pos, flag) in hidden.iter_mut().enumerate() {
                let (_, k, _) = grid.coords(pos);
                *flag = k >= visible_freq_patches;
            }
        }
    }
    Ok(MaeMask {
        kind: spec.kind(),
        hidden,
    })
}

/// Per-batch additive attention bias over keys.
///
/// Entry `(b, i, j)` is `0` when key `j` lies below sample `b`'s valid
/// length and [`NEG_BIAS`] otherwise, independent of the query row `i`:
/// queries are never masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnBias {
    len: usize,
    valid_lens: Vec<usize>,
}

impl AttnBias {
    /// Bias with no masked keys (every position treated as valid).
    pub fn open(batch: usize, len: usize) -> Self {
        AttnBias {
            len,
            valid_lens: vec![len; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.valid_lens.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn valid_lens(&self) -> &[usize] {
        &self.valid_lens
    }

    /// The bias matrix entry `M[b, i, j]`.
    #[inline]
    pub fn entry(&self, b: usize, _i: usize, j: usize) -> f64 {
        if j < self.valid_lens[b] {
            0.0
        } else {
            NEG_BIAS
        }
    }
}

/// Builds the padding attention bias for a batch padded to `len`.
pub fn build_attn_bias(valid_lens: &[usize], len: usize) -> Result<AttnBias, MaskingError> {
    for (index, &v) in valid_lens.iter().enumerate() {
        if v == 0 {
            return Err(MaskingError::ZeroValidLen { index });
        }
        if v > len {
            return Err(MaskingError::ValidLenExceedsTotal { index, valid: v, total: len });
        }
    }
    Ok(AttnBias {
        len,
        valid_lens: valid_lens.to_vec(),
    })
}

/// Generalized key mask used inside attention: a key either participates
/// (bias 0) or is dead (bias [`NEG_BIAS`]).
///
/// The encoder combines the padding bias with the MAE mask so hidden tokens
/// are invisible as keys; the decoder uses the padding bias alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBias {
    batch: usize,
    len: usize,
    allowed: Vec<bool>,
}

impl KeyBias {
    pub fn from_attn_bias(bias: &AttnBias) -> Self {
        let batch = bias.batch();
        let len = bias.len();
        let mut allowed = vec![false; batch * len];
        for b in 0..batch {
            for j in 0..len {
                allowed[b * len + j] = bias.entry(b, 0, j) == 0.0;
            }
        }
        KeyBias { batch, len, allowed }
    }

    /// Encoder bias: keys must be valid under `bias` and not MAE-hidden.
    ///
    /// `hidden` is a `batch * len` matrix (false beyond each valid length).
    /// Fails if any sample would have no visible key at all, which would
    /// leave its softmax rows undefined.
    pub fn encoder(bias: &AttnBias, hidden: &[bool]) -> Result<Self, MaskingError> {
        let batch = bias.batch();
        let len = bias.len();
        assert_eq!(hidden.len(), batch * len, "hidden mask shape mismatch");
        let mut allowed = vec![false; batch * len];
        for b in 0..batch {
            let mut any = false;
            for j in 0..len {
                let ok = bias.entry(b, 0, j) == 0.0 && !hidden[b * len + j];
                allowed[b * len + j] = ok;
                any |= ok;
            }
            if !any {
                return Err(MaskingError::NoVisibleTokens { index: b });
            }
        }
        Ok(KeyBias { batch, len, allowed })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allowed(&self, b: usize, j: usize) -> bool {
        self.allowed[b * self.len + j]
    }

    /// Additive bias for key `j` of sample `b`.
    #[inline]
    pub fn bias(&self, b: usize, j: usize) -> f64 {
        if self.allowed(b, j) {
            0.0
        } else {
            NEG_BIAS
        }
    }
}
