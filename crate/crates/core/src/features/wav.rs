//! 16-bit PCM mono WAV read/write for simulated audio.

use super::{FeatureError, Waveform};
use std::path::Path;

pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| FeatureError::Wav(e.to_string()))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| FeatureError::Wav(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| FeatureError::Wav(e.to_string()))?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform, FeatureError> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| FeatureError::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(FeatureError::Wav(format!(
            "expected 16-bit mono, got {}-bit {} channel(s)",
            spec.bits_per_sample, spec.channels
        )));
    }
    let samples: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| FeatureError::Wav(e.to_string()))?;
    Ok(Waveform::new(
        samples.iter().map(|&v| v as f64 / i16::MAX as f64).collect(),
        spec.sample_rate,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SAMPLE_RATE;

    #[test]
    fn roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.05).sin() * 0.8).collect();
        write_wav(&path, &Waveform::new(samples.clone(), SAMPLE_RATE)).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
    }
}
