//! Middlebury .flo flow files plus a packed-bit validity-mask sidecar
//! (the format itself has no mask channel).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;
const MAX_EXTENT: usize = 1_000_000;

/// Sidecar path for the validity mask: same stem, `.mask` extension.
pub fn mask_path(path: &Path) -> PathBuf {
    path.with_extension("mask")
}

pub fn flo_write(f: &FlowField, path: &Path) -> Result<()> {
    if f.width >= MAX_EXTENT || f.height >= MAX_EXTENT {
        return Err(Error::Contract(format!(
            "flow extent {}x{} exceeds the format limit",
            f.height, f.width
        )));
    }
    let mut buf = Vec::with_capacity(12 + f.data.len() * 4);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(f.width as i32).to_le_bytes());
    buf.extend_from_slice(&(f.height as i32).to_le_bytes());
    for &v in &f.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;

    let mut bits = vec![0u8; f.valid.len().div_ceil(8)];
    for (i, &v) in f.valid.iter().enumerate() {
        if v {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    fs::write(mask_path(path), &bits)?;
    Ok(())
}

fn format_err(msg: impl Into<String>, offset: usize) -> Error {
    Error::Format {
        msg: msg.into(),
        offset: offset as u64,
    }
}

pub fn flo_read(path: &Path) -> Result<FlowField> {
    let buf = fs::read(path)?;
    if buf.len() < 12 {
        return Err(format_err("truncated header", buf.len()));
    }
    let magic = f32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(format_err(format!("bad magic {magic}"), 0));
    }
    let w = i32::from_le_bytes(buf[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(buf[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w as usize >= MAX_EXTENT || h as usize >= MAX_EXTENT {
        return Err(format_err(format!("bad extents {w}x{h}"), 4));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + h * w * 2 * 4;
    if buf.len() < expected {
        return Err(format_err(
            format!("payload needs {expected} bytes, file has {}", buf.len()),
            buf.len(),
        ));
    }
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h * w * 2 {
        let o = 12 + i * 4;
        data.push(f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64);
    }
    let valid = match fs::read(mask_path(path)) {
        Ok(bits) => {
            if bits.len() < (h * w).div_ceil(8) {
                return Err(format_err("truncated mask sidecar", bits.len()));
            }
            (0..h * w).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect()
        }
        Err(_) => vec![true; h * w],
    };
    Ok(FlowField {
        height: h,
        width: w,
        data,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn f32_exact_flow(h: usize, w: usize, seed: u64) -> FlowField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut f = FlowField::zeros(h, w);
        for v in &mut f.data {
            *v = (rng.random::<f32>() * 10.0 - 5.0) as f64;
        }
        for v in &mut f.valid {
            *v = rng.random::<f64>() > 0.3;
        }
        f
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let f = f32_exact_flow(7, 5, 1);
        flo_write(&f, &path).unwrap();
        let g = flo_read(&path).unwrap();
        assert_eq!(f, g);
        // second write of the read-back flow is byte-identical
        let path2 = dir.path().join("b.flo");
        flo_write(&g, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        assert_eq!(
            fs::read(mask_path(&path)).unwrap(),
            fs::read(mask_path(&path2)).unwrap()
        );
    }

    #[test]
    fn two_by_two_file_is_44_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.flo");
        flo_write(&FlowField::zeros(2, 2), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 44);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        let mut buf = vec![];
        buf.extend_from_slice(&0.0f32.to_le_bytes());
        buf.extend_from_slice(&2i32.to_le_bytes());
        buf.extend_from_slice(&2i32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 32]);
        fs::write(&path, &buf).unwrap();
        match flo_read(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let path = dir.path().join("short.flo");
        let mut buf = vec![];
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&2i32.to_le_bytes());
        buf.extend_from_slice(&2i32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 8]); // needs 32 payload bytes
        fs::write(&path, &buf).unwrap();
        match flo_read(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mask_defaults_to_all_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.flo");
        let f = f32_exact_flow(3, 3, 2);
        flo_write(&f, &path).unwrap();
        fs::remove_file(mask_path(&path)).unwrap();
        let g = flo_read(&path).unwrap();
        assert!(g.valid.iter().all(|&v| v));
        assert_eq!(g.data, f.data);
    }
}
