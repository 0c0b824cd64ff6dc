//! FEAT binary matrix format: magic "FEAT", version u32 LE, rows u32, cols
//! u32, then rows*cols float32 LE row-major.

use super::FeatureError;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FEAT_MAGIC: [u8; 4] = *b"FEAT";
pub const FEAT_VERSION: u32 = 1;

pub fn write_feat(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<(), FeatureError> {
    assert_eq!(data.len(), rows * cols);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEAT_MAGIC)?;
    w.write_all(&FEAT_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feat(path: &Path) -> Result<(usize, usize, Vec<f64>), FeatureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FEAT_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEAT_VERSION {
        return Err(FeatureError::BadVersion(version));
    }
    r.read_exact(&mut u32buf)?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    let expected = rows * cols;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(FeatureError::Truncated {
            expected,
            got: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.feat");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 3.0).collect();
        write_feat(&path, 3, 4, &data).unwrap();
        let (rows, cols, back) = read_feat(&path).unwrap();
        assert_eq!((rows, cols), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_feat(&path), Err(FeatureError::BadMagic)));
    }

    #[test]
    fn truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.feat");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FEAT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_feat(&path),
            Err(FeatureError::Truncated { expected: 4, got: 1 })
        ));
    }
}
