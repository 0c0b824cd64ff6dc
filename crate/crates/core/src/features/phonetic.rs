//! Phonetic feature provider: a per-frame phone-posterior-like embedding,
//! either synthesized from a fixed phone codebook or loaded from a file.

use super::{
    featfile, hop_samples, window_samples, FeatureError, Waveform, N_PHONES, PHONETIC_DIM,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Triangular smoother applied along time to the prototype sequence.
const SMOOTHER: [f64; 5] = [1.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];

/// Fixed, seeded codebook of 100-d prototypes: one per phone plus one for
/// silence (index N_PHONES).
pub struct PhoneCodebook {
    prototypes: Vec<f64>,
}

impl PhoneCodebook {
    pub fn new(seed: u64) -> PhoneCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = N_PHONES + 1;
        let mut prototypes = vec![0.0; n * PHONETIC_DIM];
        for p in 0..n {
            let row = &mut prototypes[p * PHONETIC_DIM..(p + 1) * PHONETIC_DIM];
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        PhoneCodebook { prototypes }
    }

    pub fn prototype(&self, phone: usize) -> &[f64] {
        &self.prototypes[phone * PHONETIC_DIM..(phone + 1) * PHONETIC_DIM]
    }

    fn silence(&self) -> &[f64] {
        self.prototype(N_PHONES)
    }
}

impl Default for PhoneCodebook {
    fn default() -> Self {
        // one shared codebook unless a caller wants a different universe
        PhoneCodebook::new(0x9e3779b9)
    }
}

pub enum PhoneticProvider {
    /// Reads the phone track embedded by the data simulator.
    Synthetic(PhoneCodebook),
    /// Loads a precomputed T x 100 matrix from a FEAT file.
    External(PathBuf),
}

/// T x 100 phonetic features, rows unit-L2-normalized.
pub fn phonetic_features(
    w: &Waveform,
    provider: &PhoneticProvider,
    acoustic_frames: usize,
) -> Result<Vec<f64>, FeatureError> {
    match provider {
        PhoneticProvider::Synthetic(codebook) => synthetic(w, codebook, acoustic_frames),
        PhoneticProvider::External(path) => external(path, acoustic_frames),
    }
}

fn synthetic(
    w: &Waveform,
    codebook: &PhoneCodebook,
    frames: usize,
) -> Result<Vec<f64>, FeatureError> {
    let spans = w.phones.as_ref().ok_or(FeatureError::MissingPhoneTrack)?;
    let hop = hop_samples(w.sample_rate);
    let win = window_samples(w.sample_rate);

    // raw prototype per frame: mean of prototypes of phones active at the
    // frame center, silence prototype when none
    let mut raw = vec![0.0; frames * PHONETIC_DIM];
    for t in 0..frames {
        let center = t * hop + win / 2;
        let row = &mut raw[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM];
        let mut active = 0usize;
        for span in spans.iter() {
            if center >= span.start_sample && center < span.end_sample {
                for (o, v) in row.iter_mut().zip(codebook.prototype(span.phone as usize)) {
                    *o += v;
                }
                active += 1;
            }
        }
        if active == 0 {
            row.copy_from_slice(codebook.silence());
        } else if active > 1 {
            row.iter_mut().for_each(|v| *v /= active as f64);
        }
    }

    // 5-frame triangular smoothing along time, edge-clamped
    let mut smoothed = vec![0.0; frames * PHONETIC_DIM];
    for t in 0..frames {
        let row = &mut smoothed[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM];
        for (k, coeff) in SMOOTHER.iter().enumerate() {
            let src = (t as isize + k as isize - 2).clamp(0, frames as isize - 1) as usize;
            for (o, v) in row
                .iter_mut()
                .zip(&raw[src * PHONETIC_DIM..(src + 1) * PHONETIC_DIM])
            {
                *o += coeff * v;
            }
        }
    }
    normalize_rows(&mut smoothed, frames);
    Ok(smoothed)
}

fn external(path: &std::path::Path, frames: usize) -> Result<Vec<f64>, FeatureError> {
    let (rows, cols, data) = featfile::read_feat(path)?;
    if cols != PHONETIC_DIM {
        return Err(FeatureError::Alignment {
            expected: frames,
            got: rows,
        });
    }
    // nearest-rate resampling tolerates small frame-count drift only
    if rows.abs_diff(frames) > 3 {
        return Err(FeatureError::Alignment {
            expected: frames,
            got: rows,
        });
    }
    let mut out = vec![0.0; frames * PHONETIC_DIM];
    for t in 0..frames {
        let src = if rows == frames {
            t
        } else {
            (((t as f64 + 0.5) * rows as f64 / frames as f64) as usize).min(rows - 1)
        };
        out[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM]
            .copy_from_slice(&data[src * PHONETIC_DIM..(src + 1) * PHONETIC_DIM]);
    }
    normalize_rows(&mut out, frames);
    Ok(out)
}

fn normalize_rows(data: &mut [f64], rows: usize) {
    for r in 0..rows {
        let row = &mut data[r * PHONETIC_DIM..(r + 1) * PHONETIC_DIM];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{PhoneSpan, SAMPLE_RATE};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn track_waveform(spans: Vec<PhoneSpan>, samples: usize) -> Waveform {
        let mut w = Waveform::new(vec![0.1; samples], SAMPLE_RATE);
        w.phones = Some(spans);
        w
    }

    #[test]
    fn single_phone_rows_are_identical() {
        let w = track_waveform(
            vec![PhoneSpan {
                phone: 7,
                start_sample: 0,
                end_sample: 16_000,
            }],
            16_000,
        );
        let provider = PhoneticProvider::Synthetic(PhoneCodebook::default());
        let feats = phonetic_features(&w, &provider, 98).unwrap();
        let first = &feats[0..PHONETIC_DIM];
        for t in 1..98 {
            assert_eq!(&feats[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM], first);
        }
    }

    #[test]
    fn two_phone_script_gives_two_block_similarity() {
        // phones [a, b] at 50/50: frame similarities form a 2-block pattern
        // away from the smoother's reach of the boundary
        let w = track_waveform(
            vec![
                PhoneSpan { phone: 3, start_sample: 0, end_sample: 8_000 },
                PhoneSpan { phone: 21, start_sample: 8_000, end_sample: 16_000 },
            ],
            16_000,
        );
        let provider = PhoneticProvider::Synthetic(PhoneCodebook::default());
        let feats = phonetic_features(&w, &provider, 98).unwrap();
        let row = |t: usize| &feats[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM];
        // boundary frame: center sample 8000 -> frame (8000-200)/160 = 48.75
        let block_a: Vec<usize> = (0..46).collect();
        let block_b: Vec<usize> = (52..98).collect();
        for &i in &block_a {
            for &j in &block_a {
                assert!(cosine(row(i), row(j)) >= 0.99);
            }
            for &j in &block_b {
                assert!(cosine(row(i), row(j)) <= 0.5);
            }
        }
        for &i in &block_b {
            for &j in &block_b {
                assert!(cosine(row(i), row(j)) >= 0.99);
            }
        }
    }

    #[test]
    fn rows_are_unit_norm() {
        let w = track_waveform(
            vec![
                PhoneSpan { phone: 0, start_sample: 0, end_sample: 5_000 },
                PhoneSpan { phone: 1, start_sample: 5_000, end_sample: 12_000 },
            ],
            16_000,
        );
        let provider = PhoneticProvider::Synthetic(PhoneCodebook::default());
        let feats = phonetic_features(&w, &provider, 98).unwrap();
        for t in 0..98 {
            let norm: f64 = feats[t * PHONETIC_DIM..(t + 1) * PHONETIC_DIM]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "frame {t} norm {norm}");
        }
    }

    #[test]
    fn missing_phone_track_is_an_error() {
        let w = Waveform::new(vec![0.1; 16_000], SAMPLE_RATE);
        let provider = PhoneticProvider::Synthetic(PhoneCodebook::default());
        assert!(matches!(
            phonetic_features(&w, &provider, 98),
            Err(FeatureError::MissingPhoneTrack)
        ));
    }
}
