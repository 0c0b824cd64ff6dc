//! 40-filter log-mel energies, 20 Hz - 7600 Hz, Hamming window, 512-point FFT.

use super::{frame_count, hop_samples, window_samples, FeatureError, Waveform, N_MELS};
use rustfft::{num_complex::Complex, FftPlanner};

const N_FFT: usize = 512;
const F_MIN: f64 = 20.0;
const F_MAX: f64 = 7600.0;
const ENERGY_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter bank as a [N_MELS x (N_FFT/2+1)] dense matrix.
fn mel_filterbank(sample_rate: u32) -> Vec<f64> {
    let n_bins = N_FFT / 2 + 1;
    let mel_lo = hz_to_mel(F_MIN);
    let mel_hi = hz_to_mel(F_MAX);
    // N_MELS + 2 edge points, evenly spaced on the mel scale
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / N_FFT as f64;
    let mut fb = vec![0.0; N_MELS * n_bins];
    for m in 0..N_MELS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * n_bins + b] = w;
        }
    }
    fb
}

fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// T x 40 log-mel energies, flattened row-major. T is a pure function of the
/// sample count: 1 + floor((len - window) / hop).
pub fn logmel(w: &Waveform) -> Result<Vec<f64>, FeatureError> {
    let win = window_samples(w.sample_rate);
    let hop = hop_samples(w.sample_rate);
    let frames = frame_count(w.samples.len(), w.sample_rate).ok_or(FeatureError::TooShort {
        samples: w.samples.len(),
        window: win,
    })?;
    let window = hamming(win);
    let fb = mel_filterbank(w.sample_rate);
    let n_bins = N_FFT / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let mut out = vec![0.0; frames * N_MELS];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0; n_bins];
    for t in 0..frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(w.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(buf.iter().take(n_bins)) {
            *p = c.norm_sqr();
        }
        for m in 0..N_MELS {
            let e: f64 = fb[m * n_bins..(m + 1) * n_bins]
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            out[t * N_MELS + m] = e.max(ENERGY_FLOOR).ln();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{SAMPLE_RATE, SILENCE_LOG_ENERGY};

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.1; 16_000], SAMPLE_RATE);
        let feats = logmel(&w).unwrap();
        assert_eq!(feats.len() / N_MELS, 98);
    }

    #[test]
    fn frame_count_depends_only_on_length() {
        let quiet = Waveform::new(vec![0.001; 7_013], SAMPLE_RATE);
        let loud = Waveform::new(
            (0..7_013).map(|i| ((i as f64) * 0.7).sin()).collect(),
            SAMPLE_RATE,
        );
        assert_eq!(
            logmel(&quiet).unwrap().len(),
            logmel(&loud).unwrap().len()
        );
    }

    #[test]
    fn silence_hits_the_floor_uniformly() {
        let w = Waveform::new(vec![0.0; 8_000], SAMPLE_RATE);
        let feats = logmel(&w).unwrap();
        for v in feats {
            assert_eq!(v, SILENCE_LOG_ENERGY);
        }
    }

    #[test]
    fn pure_tone_peaks_in_the_same_filter_every_frame() {
        let freq = 1000.0;
        let samples: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        let w = Waveform::new(samples, SAMPLE_RATE);
        let feats = logmel(&w).unwrap();
        let frames = feats.len() / N_MELS;
        let argmax = |row: &[f64]| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let first = argmax(&feats[0..N_MELS]);
        for t in 1..frames {
            assert_eq!(argmax(&feats[t * N_MELS..(t + 1) * N_MELS]), first);
        }
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE);
        assert!(matches!(
            logmel(&w),
            Err(FeatureError::TooShort { samples: 399, window: 400 })
        ));
    }
}
