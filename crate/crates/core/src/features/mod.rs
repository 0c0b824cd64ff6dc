//! Waveform featurization: 40-d log-mel filter bank plus a 100-d phonetic
//! feature from a pluggable provider, at 25 ms windows / 10 ms hop.

mod featfile;
mod logmel;
mod phonetic;
pub mod wav;

pub use featfile::{read_feat, write_feat, FEAT_MAGIC, FEAT_VERSION};
pub use logmel::logmel;
pub use phonetic::{phonetic_features, PhoneCodebook, PhoneticProvider};

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const HOP_SECONDS: f64 = 0.010;
pub const N_MELS: usize = 40;
pub const PHONETIC_DIM: usize = 100;
pub const N_PHONES: usize = 40;
/// log-energy of a fully silent frame: ln(energy floor)
pub const SILENCE_LOG_ENERGY: f64 = -23.025850929940457; // ln(1e-10)

pub fn window_samples(sample_rate: u32) -> usize {
    (WINDOW_SECONDS * sample_rate as f64).round() as usize
}

pub fn hop_samples(sample_rate: u32) -> usize {
    (HOP_SECONDS * sample_rate as f64).round() as usize
}

/// Number of analysis frames for a waveform of `len` samples.
pub fn frame_count(len: usize, sample_rate: u32) -> Option<usize> {
    let win = window_samples(sample_rate);
    let hop = hop_samples(sample_rate);
    if len < win {
        None
    } else {
        Some(1 + (len - win) / hop)
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform too short: {samples} samples, need at least {window}")]
    TooShort { samples: usize, window: usize },
    #[error("phonetic feature frame count {got} cannot align to acoustic frame count {expected}")]
    Alignment { expected: usize, got: usize },
    #[error("waveform has no phone track; synthetic phonetic provider needs one")]
    MissingPhoneTrack,
    #[error("bad feature file magic (expected FEAT)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    BadVersion(u32),
    #[error("feature file truncated: expected {expected} values, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(String),
}

/// One labeled stretch of a phone within a waveform. Spans may overlap when
/// several sources were mixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneSpan {
    pub phone: u8,
    pub start_sample: usize,
    pub end_sample: usize,
}

/// A mono waveform with optional phone alignment metadata.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub phones: Option<Vec<PhoneSpan>>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        Waveform {
            samples,
            sample_rate,
            phones: None,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Peak-normalize so |sample| <= limit.
    pub fn normalize_peak(&mut self, limit: f64) {
        let peak = self
            .samples
            .iter()
            .fold(0.0f64, |acc, s| acc.max(s.abs()));
        if peak > 0.0 {
            let g = limit / peak;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }
}

/// Per-frame acoustic (T x 40) and phonetic (T x 100) features.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub acoustic: Vec<f64>,
    pub phonetic: Vec<f64>,
    pub frames: usize,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl FeatureMatrix {
    pub fn new(acoustic: Vec<f64>, phonetic: Vec<f64>, frames: usize) -> FeatureMatrix {
        debug_assert_eq!(acoustic.len(), frames * N_MELS);
        debug_assert_eq!(phonetic.len(), frames * PHONETIC_DIM);
        FeatureMatrix {
            acoustic,
            phonetic,
            frames,
            hop_seconds: HOP_SECONDS,
            window_seconds: WINDOW_SECONDS,
        }
    }

    pub fn input_dim() -> usize {
        N_MELS + PHONETIC_DIM
    }

    pub fn acoustic_row(&self, t: usize) -> &[f64] {
        &self.acoustic[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn phonetic_row(&self, t: usize) -> &[f64] {
        &self.phonetic[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM]
    }

    /// Interleave acoustic and phonetic into the model's T x 140 input.
    pub fn stacked(&self) -> Vec<f64> {
        let dim = Self::input_dim();
        let mut out = vec![0.0; self.frames * dim];
        for t in 0..self.frames {
            out[t * dim..t * dim + N_MELS].copy_from_slice(self.acoustic_row(t));
            out[t * dim + N_MELS..(t + 1) * dim].copy_from_slice(self.phonetic_row(t));
        }
        out
    }

    /// Row slice [start, start+len) as a new matrix.
    pub fn slice(&self, start: usize, len: usize) -> FeatureMatrix {
        assert!(start + len <= self.frames);
        FeatureMatrix::new(
            self.acoustic[start * N_MELS..(start + len) * N_MELS].to_vec(),
            self.phonetic[start * PHONETIC_DIM..(start + len) * PHONETIC_DIM].to_vec(),
            len,
        )
    }

    /// Concatenate along time.
    pub fn concat(parts: &[&FeatureMatrix]) -> FeatureMatrix {
        let frames = parts.iter().map(|p| p.frames).sum();
        let mut acoustic = Vec::with_capacity(frames * N_MELS);
        let mut phonetic = Vec::with_capacity(frames * PHONETIC_DIM);
        for p in parts {
            acoustic.extend_from_slice(&p.acoustic);
            phonetic.extend_from_slice(&p.phonetic);
        }
        FeatureMatrix::new(acoustic, phonetic, frames)
    }

    /// Zero-feature frames standing in for silence padding.
    pub fn zero_pad(frames: usize) -> FeatureMatrix {
        FeatureMatrix::new(
            vec![0.0; frames * N_MELS],
            vec![0.0; frames * PHONETIC_DIM],
            frames,
        )
    }

    /// Replace the phonetic block with zeros (ablation switch).
    pub fn zero_phonetic(&mut self) {
        self.phonetic.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Featurize a waveform with both acoustic and phonetic streams.
pub fn featurize(
    w: &Waveform,
    provider: &PhoneticProvider,
) -> Result<FeatureMatrix, FeatureError> {
    let acoustic = logmel(w)?;
    let frames = acoustic.len() / N_MELS;
    let phonetic = phonetic_features(w, provider, frames)?;
    Ok(FeatureMatrix::new(acoustic, phonetic, frames))
}
