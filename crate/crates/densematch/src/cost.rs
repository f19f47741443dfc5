//! 4D cost volume: construction, slicing, separable 4D convolution, and
//! cross-level resampling.
//!
//! Layout: shape [h_s, w_s, h_t, w_t], source spatial axes first, row-major.
//! Slicing by a target pixel is therefore strided; performance-sensitive
//! code should iterate source-major.

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Value};

fn square4(tape: &Tape, c: Value, op: &'static str) -> Result<usize> {
    let sh = tape.shape(c);
    if sh.len() != 4 || sh[0] != sh[1] || sh[2] != sh[3] || sh[0] != sh[2] {
        return Err(Error::dim(op, sh, &[]));
    }
    Ok(sh[0])
}

/// All pairwise feature similarities: C(i,j) = dot(D_s(i), D_t(j)).
/// One (hw x c)·(c x hw) matmul.
pub fn build(tape: &mut Tape, d_s: Value, d_t: Value) -> Result<Value> {
    let (ss, st) = (tape.shape(d_s).to_vec(), tape.shape(d_t).to_vec());
    if ss != st || ss.len() != 3 || ss[0] != ss[1] {
        return Err(Error::Contract(format!(
            "cost build needs same-level square feature maps, got {ss:?} vs {st:?}"
        )));
    }
    let (e, c) = (ss[0], ss[2]);
    let fs = tape.reshape(d_s, vec![e * e, c])?;
    let ft = tape.reshape(d_t, vec![e * e, c])?;
    let ftt = tape.transpose(ft)?;
    let m = tape.matmul(fs, ftt)?;
    tape.reshape(m, vec![e, e, e, e])
}

/// 2D similarity map over all source positions for a fixed target pixel.
/// Plain data extraction (used for visualization), not differentiable.
pub fn slice(tape: &Tape, c: Value, j: (usize, usize)) -> Result<Array> {
    let e = square4(tape, c, "cost_slice")?;
    let (jy, jx) = j;
    if jy >= e || jx >= e {
        return Err(Error::Contract(format!(
            "slice pixel ({jy},{jx}) out of bounds for extent {e}"
        )));
    }
    let src = tape.data(c);
    let mut out = vec![0.0; e * e];
    for iy in 0..e {
        for ix in 0..e {
            out[iy * e + ix] = src[((iy * e + ix) * e + jy) * e + jx];
        }
    }
    Array::new(vec![e, e], out)
}

/// Separable 4D convolution: 2D conv over the source axes with `k_src`,
/// then over the target axes with `k_tgt`. Same-padding, stride 1.
pub fn conv4d_separable(tape: &mut Tape, c: Value, k_src: Value, k_tgt: Value) -> Result<Value> {
    let e = square4(tape, c, "conv4d")?;
    let as_src_major = tape.reshape(c, vec![e, e, e * e])?;
    let cs = tape.conv2d_shared(as_src_major, k_src)?;
    let four = tape.reshape(cs, vec![e, e, e, e])?;
    let tgt_major = tape.permute4(four, [2, 3, 0, 1])?;
    let flat = tape.reshape(tgt_major, vec![e, e, e * e])?;
    let ct = tape.conv2d_shared(flat, k_tgt)?;
    let four = tape.reshape(ct, vec![e, e, e, e])?;
    tape.permute4(four, [2, 3, 0, 1])
}

/// Elementwise sum of two same-extent volumes.
pub fn residual_add(tape: &mut Tape, a: Value, b: Value) -> Result<Value> {
    square4(tape, a, "residual_add")?;
    tape.add(a, b)
}

/// Bilinear resize over source axes then target axes to a finer extent.
pub fn upsample_cost(tape: &mut Tape, c: Value, to_extent: usize) -> Result<Value> {
    let e = square4(tape, c, "upsample_cost")?;
    if to_extent < e {
        return Err(Error::Contract(format!(
            "upsample_cost target extent {to_extent} coarser than source {e}"
        )));
    }
    if to_extent == e {
        return Ok(c);
    }
    let src_major = tape.reshape(c, vec![e, e, e * e])?;
    let up_src = tape.bilinear_resize(src_major, to_extent, to_extent)?;
    let four = tape.reshape(up_src, vec![to_extent, to_extent, e, e])?;
    let tgt_major = tape.permute4(four, [2, 3, 0, 1])?;
    let flat = tape.reshape(tgt_major, vec![e, e, to_extent * to_extent])?;
    let up_tgt = tape.bilinear_resize(flat, to_extent, to_extent)?;
    let four = tape.reshape(up_tgt, vec![to_extent, to_extent, to_extent, to_extent])?;
    tape.permute4(four, [2, 3, 0, 1])
}

/// Upsample every level to the finest extent and sum.
pub fn final_cost(tape: &mut Tape, per_level: &[Value]) -> Result<Value> {
    if per_level.len() != 3 {
        return Err(Error::Contract(format!(
            "final_cost expects 3 levels, got {}",
            per_level.len()
        )));
    }
    let finest = per_level
        .iter()
        .map(|&v| square4(tape, v, "final_cost"))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap();
    let mut acc: Option<Value> = None;
    for &v in per_level {
        let up = upsample_cost(tape, v, finest)?;
        acc = Some(match acc {
            None => up,
            Some(a) => tape.add(a, up)?,
        });
    }
    Ok(acc.unwrap())
}
