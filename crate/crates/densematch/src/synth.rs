//! Synthetic-warp pair generation with analytic ground-truth flow:
//! random affine / homography / thin-plate-spline warps applied to
//! procedural base textures.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Array;
use crate::zoom::warp_image;

pub const DEFAULT_TPS_GRID: usize = 4;
/// Dense sample grid used to fit the reverse TPS.
const TPS_INVERSE_GRID: usize = 12;
const MAX_SAMPLE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    Affine,
    Homography,
    Tps,
}

impl WarpKind {
    pub const ALL: [WarpKind; 3] = [WarpKind::Affine, WarpKind::Homography, WarpKind::Tps];

    pub fn name(self) -> &'static str {
        match self {
            WarpKind::Affine => "affine",
            WarpKind::Homography => "homography",
            WarpKind::Tps => "tps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(WarpKind::Affine),
            "homography" => Ok(WarpKind::Homography),
            "tps" => Ok(WarpKind::Tps),
            other => Err(Error::Config(format!("unknown warp kind {other:?}"))),
        }
    }
}

/// A warp of the unit square, in normalized [0,1]² coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum WarpSpec {
    /// Row-major [a, b, tx, c, d, ty]: p ↦ (a·x + b·y + tx, c·x + d·y + ty).
    Affine([f64; 6]),
    /// Row-major 3×3 projective matrix, h22 = 1.
    Homography([f64; 9]),
    /// Thin-plate spline from a regular control grid to jittered targets.
    Tps {
        src: Vec<(f64, f64)>,
        dst: Vec<(f64, f64)>,
    },
}

impl WarpSpec {
    pub fn kind(&self) -> WarpKind {
        match self {
            WarpSpec::Affine(_) => WarpKind::Affine,
            WarpSpec::Homography(_) => WarpKind::Homography,
            WarpSpec::Tps { .. } => WarpKind::Tps,
        }
    }
}

/// Fitted thin-plate spline interpolant: two scalar splines sharing centers.
#[derive(Debug, Clone)]
struct TpsMap {
    centers: Vec<(f64, f64)>,
    wx: Vec<f64>, // len n+3: kernel weights then affine (1, x, y)
    wy: Vec<f64>,
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

fn tps_fit(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<TpsMap> {
    let n = src.len();
    if n < 9 || dst.len() != n {
        return Err(Error::Contract(format!(
            "TPS fit needs >= 9 matched control points, got {n}/{}",
            dst.len()
        )));
    }
    let m = n + 3;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            let dx = src[i].0 - src[j].0;
            let dy = src[i].1 - src[j].1;
            a[(i, j)] = tps_kernel(dx * dx + dy * dy);
        }
        a[(i, n)] = 1.0;
        a[(i, n + 1)] = src[i].0;
        a[(i, n + 2)] = src[i].1;
        a[(n, i)] = 1.0;
        a[(n + 1, i)] = src[i].0;
        a[(n + 2, i)] = src[i].1;
    }
    let mut bx = DMatrix::<f64>::zeros(m, 1);
    let mut by = DMatrix::<f64>::zeros(m, 1);
    for i in 0..n {
        bx[(i, 0)] = dst[i].0;
        by[(i, 0)] = dst[i].1;
    }
    let lu = a.lu();
    let wx = lu
        .solve(&bx)
        .ok_or_else(|| Error::Generation("singular TPS system".into()))?;
    let wy = lu
        .solve(&by)
        .ok_or_else(|| Error::Generation("singular TPS system".into()))?;
    Ok(TpsMap {
        centers: src.to_vec(),
        wx: wx.column(0).iter().copied().collect(),
        wy: wy.column(0).iter().copied().collect(),
    })
}

impl TpsMap {
    fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let n = self.centers.len();
        let mut x = self.wx[n] + self.wx[n + 1] * p.0 + self.wx[n + 2] * p.1;
        let mut y = self.wy[n] + self.wy[n + 1] * p.0 + self.wy[n + 2] * p.1;
        for (i, c) in self.centers.iter().enumerate() {
            let dx = p.0 - c.0;
            let dy = p.1 - c.1;
            let u = tps_kernel(dx * dx + dy * dy);
            x += self.wx[i] * u;
            y += self.wy[i] * u;
        }
        (x, y)
    }
}

fn apply_homography(m: &[f64; 9], p: (f64, f64)) -> (f64, f64) {
    let z = m[6] * p.0 + m[7] * p.1 + m[8];
    let z = if z.abs() < 1e-12 { 1e-12 } else { z };
    (
        (m[0] * p.0 + m[1] * p.1 + m[2]) / z,
        (m[3] * p.0 + m[4] * p.1 + m[5]) / z,
    )
}

/// Apply the forward warp in normalized coordinates.
pub fn apply_warp(w: &WarpSpec, p: (f64, f64)) -> (f64, f64) {
    match w {
        WarpSpec::Affine(m) => (
            m[0] * p.0 + m[1] * p.1 + m[2],
            m[3] * p.0 + m[4] * p.1 + m[5],
        ),
        WarpSpec::Homography(m) => apply_homography(m, p),
        WarpSpec::Tps { src, dst } => tps_fit(src, dst)
            .expect("validated TPS spec")
            .apply(p),
    }
}

/// The inverse map of a warp, as an applicable object. Affine and
/// homography inverses are exact; the TPS inverse is a reverse fit on a
/// dense sample grid.
pub enum InverseWarp {
    Affine([f64; 6]),
    Homography([f64; 9]),
    Tps(TpsMapInv),
}

pub struct TpsMapInv(TpsMap);

impl InverseWarp {
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        match self {
            InverseWarp::Affine(m) => (
                m[0] * p.0 + m[1] * p.1 + m[2],
                m[3] * p.0 + m[4] * p.1 + m[5],
            ),
            InverseWarp::Homography(m) => apply_homography(m, p),
            InverseWarp::Tps(t) => t.0.apply(p),
        }
    }
}

fn affine_det(m: &[f64; 6]) -> f64 {
    m[0] * m[4] - m[1] * m[3]
}

fn homography_det(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

pub fn inverse_warp(w: &WarpSpec) -> Result<InverseWarp> {
    match w {
        WarpSpec::Affine(m) => {
            let det = affine_det(m);
            if det.abs() <= 1e-6 {
                return Err(Error::Contract("affine warp is not invertible".into()));
            }
            let (a, b, c, d) = (m[0], m[1], m[3], m[4]);
            let inv = [d / det, -b / det, -c / det, a / det];
            Ok(InverseWarp::Affine([
                inv[0],
                inv[1],
                -(inv[0] * m[2] + inv[1] * m[5]),
                inv[2],
                inv[3],
                -(inv[2] * m[2] + inv[3] * m[5]),
            ]))
        }
        WarpSpec::Homography(m) => {
            if homography_det(m).abs() <= 1e-6 {
                return Err(Error::Contract("homography is not invertible".into()));
            }
            // adjugate; projective division normalizes the scale
            let inv = [
                m[4] * m[8] - m[5] * m[7],
                m[2] * m[7] - m[1] * m[8],
                m[1] * m[5] - m[2] * m[4],
                m[5] * m[6] - m[3] * m[8],
                m[0] * m[8] - m[2] * m[6],
                m[2] * m[3] - m[0] * m[5],
                m[3] * m[7] - m[4] * m[6],
                m[1] * m[6] - m[0] * m[7],
                m[0] * m[4] - m[1] * m[3],
            ];
            Ok(InverseWarp::Homography(inv))
        }
        WarpSpec::Tps { src, dst } => {
            let forward = tps_fit(src, dst)?;
            let g = TPS_INVERSE_GRID;
            let mut from = Vec::with_capacity(g * g);
            let mut to = Vec::with_capacity(g * g);
            for gy in 0..g {
                for gx in 0..g {
                    let p = (gx as f64 / (g - 1) as f64, gy as f64 / (g - 1) as f64);
                    from.push(forward.apply(p));
                    to.push(p);
                }
            }
            Ok(InverseWarp::Tps(TpsMapInv(tps_fit(&from, &to)?)))
        }
    }
}

/// Draw a random warp; displacement ranges scale with `strength` in (0,1].
/// Degenerate draws are rejected and resampled, up to 100 attempts.
pub fn sample_warp(kind: WarpKind, seed: u64, strength: f64) -> Result<WarpSpec> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Domain(format!(
            "warp strength must be in (0,1], got {strength}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sym = |range: f64| (rng.random::<f64>() * 2.0 - 1.0) * range;
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        match kind {
            WarpKind::Affine => {
                let theta = sym(15f64.to_radians() * strength);
                let sx = 1.0 + sym(0.25 * strength);
                let sy = 1.0 + sym(0.25 * strength);
                let (tx, ty) = (sym(0.1 * strength), sym(0.1 * strength));
                let (cs, sn) = (theta.cos(), theta.sin());
                let a = [cs * sx, -sn * sy, sn * sx, cs * sy];
                // rotate/scale about the square center, then translate
                let cx = 0.5 - (a[0] * 0.5 + a[1] * 0.5) + tx;
                let cy = 0.5 - (a[2] * 0.5 + a[3] * 0.5) + ty;
                let m = [a[0], a[1], cx, a[2], a[3], cy];
                if affine_det(&m).abs() > 1e-6 {
                    return Ok(WarpSpec::Affine(m));
                }
            }
            WarpKind::Homography => {
                let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
                let jittered: Vec<(f64, f64)> = corners
                    .iter()
                    .map(|&(x, y)| (x + sym(0.1 * strength), y + sym(0.1 * strength)))
                    .collect();
                if let Some(m) = fit_homography(&corners, &jittered) {
                    if homography_det(&m).abs() > 1e-6 {
                        return Ok(WarpSpec::Homography(m));
                    }
                }
            }
            WarpKind::Tps => {
                let g = DEFAULT_TPS_GRID;
                let mut src = Vec::with_capacity(g * g);
                let mut dst = Vec::with_capacity(g * g);
                for gy in 0..g {
                    for gx in 0..g {
                        let p = (gx as f64 / (g - 1) as f64, gy as f64 / (g - 1) as f64);
                        src.push(p);
                        dst.push((p.0 + sym(0.08 * strength), p.1 + sym(0.08 * strength)));
                    }
                }
                let spec = WarpSpec::Tps { src, dst };
                if let WarpSpec::Tps { src, dst } = &spec {
                    if tps_fit(src, dst).is_ok() {
                        return Ok(spec);
                    }
                }
            }
        }
    }
    Err(Error::Generation(format!(
        "no invertible {} warp after {MAX_SAMPLE_ATTEMPTS} draws (seed {seed})",
        kind.name()
    )))
}

/// Direct linear transform for the homography mapping four point pairs.
fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<[f64; 9]> {
    let mut a = DMatrix::<f64>::zeros(8, 8);
    let mut b = DMatrix::<f64>::zeros(8, 1);
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[(r, 0)] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[(r + 1, 0)] = v;
    }
    let h = a.lu().solve(&b)?;
    Some([
        h[(0, 0)],
        h[(1, 0)],
        h[(2, 0)],
        h[(3, 0)],
        h[(4, 0)],
        h[(5, 0)],
        h[(6, 0)],
        h[(7, 0)],
        1.0,
    ])
}

fn normalize(x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
    (x / (w - 1) as f64, y / (h - 1) as f64)
}

fn denormalize(p: (f64, f64), h: usize, w: usize) -> (f64, f64) {
    (p.0 * (w - 1) as f64, p.1 * (h - 1) as f64)
}

/// Ground-truth backward flow of a warp on an h×w grid: F(j) = w⁻¹(j) − j,
/// so warping the source by F reproduces the rendered target. Pixels whose
/// source point leaves the image are invalid.
pub fn warp_to_flow(w: &WarpSpec, height: usize, width: usize) -> Result<FlowField> {
    if height < 2 || width < 2 {
        return Err(Error::Contract("flow grid needs extents >= 2".into()));
    }
    let inv = inverse_warp(w)?;
    let mut f = FlowField::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let q = inv.apply(normalize(x as f64, y as f64, height, width));
            let (sx, sy) = denormalize(q, height, width);
            f.set(x, y, sx - x as f64, sy - y as f64);
            f.valid[y * width + x] =
                sx >= 0.0 && sy >= 0.0 && sx <= (width - 1) as f64 && sy <= (height - 1) as f64;
        }
    }
    Ok(f)
}

/// Forward flow of a warp: G(s) = w(s) − s, the inverse direction of
/// [`warp_to_flow`]. Feeds cycle-consistency checks.
pub fn warp_forward_flow(w: &WarpSpec, height: usize, width: usize) -> Result<FlowField> {
    if height < 2 || width < 2 {
        return Err(Error::Contract("flow grid needs extents >= 2".into()));
    }
    // resolve the TPS interpolant once, not per pixel
    let apply: Box<dyn Fn((f64, f64)) -> (f64, f64)> = match w {
        WarpSpec::Tps { src, dst } => {
            let t = tps_fit(src, dst)?;
            Box::new(move |p| t.apply(p))
        }
        other => {
            let o = other.clone();
            Box::new(move |p| apply_warp(&o, p))
        }
    };
    let mut f = FlowField::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let q = apply(normalize(x as f64, y as f64, height, width));
            let (tx, ty) = denormalize(q, height, width);
            f.set(x, y, tx - x as f64, ty - y as f64);
            f.valid[y * width + x] =
                tx >= 0.0 && ty >= 0.0 && tx <= (width - 1) as f64 && ty <= (height - 1) as f64;
        }
    }
    Ok(f)
}

/// Fraction of the base extent cropped from each side when rendering.
const CROP_FRACTION: f64 = 0.1;

/// Render a matched pair from a base image: the target is the base warped
/// by `w`, and both sides are center-cropped so the returned pair avoids
/// border invalidity. Returns (source, target, ground-truth flow).
pub fn render_pair(image: &Array, w: &WarpSpec) -> Result<(Array, Array, FlowField)> {
    if image.shape.len() != 3 || image.shape[2] != 3 || image.shape[0] != image.shape[1] {
        return Err(Error::Contract(format!(
            "render_pair needs a square [n,n,3] image, got {:?}",
            image.shape
        )));
    }
    let e = image.shape[0];
    let margin = ((e as f64) * CROP_FRACTION).round() as usize;
    if e <= 2 * margin + 1 {
        return Err(Error::Contract(format!("base image extent {e} too small")));
    }
    let out = e - 2 * margin;
    let flow_full = warp_to_flow(w, e, e)?;
    let (target_full, _) = warp_image(image, &flow_full)?;

    let crop = |a: &Array| -> Array {
        let mut data = vec![0.0; out * out * 3];
        for y in 0..out {
            for x in 0..out {
                let src = ((y + margin) * e + x + margin) * 3;
                let dst = (y * out + x) * 3;
                data[dst..dst + 3].copy_from_slice(&a.data[src..src + 3]);
            }
        }
        Array::new(vec![out, out, 3], data).expect("crop shape")
    };
    let i_s = crop(image);
    let i_t = crop(&target_full);
    let mut flow = FlowField::zeros(out, out);
    for y in 0..out {
        for x in 0..out {
            let (dx, dy) = flow_full.get(x + margin, y + margin);
            flow.set(x, y, dx, dy);
            // valid only where the matched source point stays inside the crop
            let sx = (x + margin) as f64 + dx;
            let sy = (y + margin) as f64 + dy;
            flow.valid[y * out + x] = sx >= margin as f64
                && sy >= margin as f64
                && sx <= (margin + out - 1) as f64
                && sy <= (margin + out - 1) as f64;
        }
    }
    Ok((i_s, i_t, flow))
}

/// Procedural base texture: layered value noise, a random checkerboard and
/// gradient composites — deterministic from the seed, channels in [0,1].
pub fn base_texture(extent: usize, seed: u64) -> Array {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = vec![0.0; extent * extent * 3];

    // multi-octave value noise
    for (octave, weight) in [(4usize, 0.25), (8, 0.15), (16, 0.10)] {
        let grid: Vec<f64> = (0..octave * octave * 3).map(|_| rng.random()).collect();
        for y in 0..extent {
            for x in 0..extent {
                let gx = x as f64 * (octave - 1) as f64 / (extent - 1) as f64;
                let gy = y as f64 * (octave - 1) as f64 / (extent - 1) as f64;
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(octave - 1), (y0 + 1).min(octave - 1));
                let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| grid[(yy * octave + xx) * 3 + c];
                    let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                    let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                    data[(y * extent + x) * 3 + c] += weight * (top + (bot - top) * fy);
                }
            }
        }
    }

    // random checkerboard
    let cell = 4 + (rng.random::<f64>() * 12.0) as usize;
    let ca: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let cb: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    for y in 0..extent {
        for x in 0..extent {
            let col = if (x / cell + y / cell) % 2 == 0 { ca } else { cb };
            for c in 0..3 {
                data[(y * extent + x) * 3 + c] += 0.3 * col[c];
            }
        }
    }

    // linear gradient composite
    let (gx, gy) = (rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0);
    for y in 0..extent {
        for x in 0..extent {
            let t = 0.5 + 0.5 * (gx * (x as f64 / extent as f64 - 0.5)
                + gy * (y as f64 / extent as f64 - 0.5));
            for c in 0..3 {
                data[(y * extent + x) * 3 + c] += 0.2 * t;
            }
        }
    }

    let max = data.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
    for v in &mut data {
        *v = (*v / max).clamp(0.0, 1.0);
    }
    Array::new(vec![extent, extent, 3], data).expect("texture shape")
}
