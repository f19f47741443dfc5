//! Dense zoom-in inference: coarse alignment by warping, k×k window
//! partitioning, per-window matching, transitive flow composition, and
//! per-pixel selection by cycle-consistency confidence.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::model::{self, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Array, Tape, Value};

/// Per-pixel round-trip distance in pixels; lower means more confident.
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub cycle_error: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ZoomConfig {
    /// Window partition counts; each k splits the image into k×k windows.
    pub k_list: Vec<usize>,
    /// Windows smaller than this are skipped with a warning.
    pub min_window: usize,
}

impl Default for ZoomConfig {
    fn default() -> Self {
        ZoomConfig {
            k_list: vec![3, 4, 5],
            min_window: 8,
        }
    }
}

impl ZoomConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &k in &self.k_list {
            if k < 2 {
                return Err(Error::Config(format!("zoom k must be >= 2, got {k}")));
            }
            if !seen.insert(k) {
                return Err(Error::Config(format!("duplicate zoom k {k}")));
            }
        }
        Ok(())
    }
}

pub struct ZoomOutput {
    pub flow: FlowField,
    pub confidence: ConfidenceMap,
    pub warnings: Vec<String>,
}

/// A named candidate flow with its cycle-error map.
pub struct Candidate {
    pub label: String,
    pub flow: FlowField,
    pub confidence: ConfidenceMap,
}

fn host_sample(a: &Array, x: f64, y: f64, out: &mut [f64]) -> bool {
    let (h, w, c) = (a.shape[0], a.shape[1], a.shape[2]);
    let inside = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let mut x0 = xc.floor() as usize;
    let mut y0 = yc.floor() as usize;
    let (mut fx, mut fy) = (xc - x0 as f64, yc - y0 as f64);
    // snap sub-nanopixel fractions so float noise cannot blur exact hits
    if fx < 1e-9 {
        fx = 0.0;
    } else if fx > 1.0 - 1e-9 {
        x0 += 1;
        fx = 0.0;
    }
    if fy < 1e-9 {
        fy = 0.0;
    } else if fy > 1.0 - 1e-9 {
        y0 += 1;
        fy = 0.0;
    }
    let x0 = x0.min(w - 1);
    let y0 = y0.min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    for ch in 0..c {
        let at = |yy: usize, xx: usize| a.data[(yy * w + xx) * c + ch];
        let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
        let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
        out[ch] = top + (bot - top) * fy;
    }
    inside
}

/// Warp a source image by a flow field: output(j) = source(j + F(j)).
/// The mask marks pixels whose sample stayed inside the image.
pub fn warp_image(i_s: &Array, f: &FlowField) -> Result<(Array, Vec<bool>)> {
    if i_s.shape.len() != 3 || i_s.shape[0] != f.height || i_s.shape[1] != f.width {
        return Err(Error::Contract(format!(
            "warp_image: image {:?} vs flow {}x{}",
            i_s.shape, f.height, f.width
        )));
    }
    let (h, w, c) = (i_s.shape[0], i_s.shape[1], i_s.shape[2]);
    let mut out = vec![0.0; h * w * c];
    let mut mask = vec![false; h * w];
    let mut px = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = f.get(x, y);
            let inside = host_sample(i_s, x as f64 + dx, y as f64 + dy, &mut px);
            out[(y * w + x) * c..(y * w + x) * c + c].copy_from_slice(&px);
            mask[y * w + x] = inside && f.is_valid(x, y);
        }
    }
    Ok((Array::new(vec![h, w, c], out)?, mask))
}

/// Round-trip error of a forward flow against a backward flow: for target
/// pixel j, follow s = j + f_ts(j), then e(j) = ‖(s + f_st(s)) − j‖₂.
pub fn cycle_confidence(f_ts: &FlowField, f_st: &FlowField) -> Result<ConfidenceMap> {
    if f_ts.height != f_st.height || f_ts.width != f_st.width {
        return Err(Error::Contract(format!(
            "cycle_confidence: {}x{} vs {}x{}",
            f_ts.height, f_ts.width, f_st.height, f_st.width
        )));
    }
    let (h, w) = (f_ts.height, f_ts.width);
    let mut err = vec![f64::INFINITY; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !f_ts.is_valid(x, y) {
                continue;
            }
            let (dx, dy) = f_ts.get(x, y);
            let sx = x as f64 + dx;
            let sy = y as f64 + dy;
            if let Some((bx, by)) = f_st.sample(sx, sy) {
                let ex = sx + bx - x as f64;
                let ey = sy + by - y as f64;
                err[y * w + x] = (ex * ex + ey * ey).sqrt();
                valid[y * w + x] = true;
            }
        }
    }
    Ok(ConfidenceMap {
        height: h,
        width: w,
        cycle_error: err,
        valid,
    })
}

/// A window of a partition: pixel origin and extent per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Split an h×w grid into k×k windows of extent floor(n/k), the last row
/// and column absorbing the remainder. The windows tile the grid exactly.
pub fn partition(height: usize, width: usize, k: usize) -> Result<Vec<Window>> {
    if k < 2 {
        return Err(Error::Config(format!("partition needs k >= 2, got {k}")));
    }
    if height < k || width < k {
        return Err(Error::Config(format!(
            "cannot split {height}x{width} into {k}x{k} windows"
        )));
    }
    let (bh, bw) = (height / k, width / k);
    let mut out = Vec::with_capacity(k * k);
    for wy in 0..k {
        for wx in 0..k {
            let y0 = wy * bh;
            let x0 = wx * bw;
            out.push(Window {
                x0,
                y0,
                width: if wx == k - 1 { width - x0 } else { bw },
                height: if wy == k - 1 { height - y0 } else { bh },
            });
        }
    }
    Ok(out)
}

/// Transitive composition: F(j) = f_local(j) + f_coarse(j + f_local(j)).
/// Valid where the local flow is valid and the coarse lookup lands inside.
pub fn compose_flow(f_local: &FlowField, f_coarse: &FlowField) -> Result<FlowField> {
    if f_local.height != f_coarse.height || f_local.width != f_coarse.width {
        return Err(Error::Contract(format!(
            "compose_flow: {}x{} vs {}x{}",
            f_local.height, f_local.width, f_coarse.height, f_coarse.width
        )));
    }
    let (h, w) = (f_local.height, f_local.width);
    let mut out = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !f_local.is_valid(x, y) {
                out.valid[y * w + x] = false;
                continue;
            }
            let (lx, ly) = f_local.get(x, y);
            match f_coarse.sample(x as f64 + lx, y as f64 + ly) {
                Some((cx, cy)) => out.set(x, y, lx + cx, ly + cy),
                None => {
                    // keep the local displacement, but the composition is
                    // undefined here
                    out.set(x, y, lx, ly);
                    out.valid[y * w + x] = false;
                }
            }
        }
    }
    Ok(out)
}

fn host_resize(a: &Array, oh: usize, ow: usize) -> Array {
    let (h, w, c) = (a.shape[0], a.shape[1], a.shape[2]);
    if h == oh && w == ow {
        return a.clone();
    }
    let mut out = vec![0.0; oh * ow * c];
    let mut px = vec![0.0; c];
    for oy in 0..oh {
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            host_sample(a, sx, sy, &mut px);
            out[(oy * ow + ox) * c..(oy * ow + ox) * c + c].copy_from_slice(&px);
        }
    }
    Array::new(vec![oh, ow, c], out).expect("resize shape")
}

/// Resize a flow field to a new grid, rescaling displacements per axis.
fn resize_flow(f: &FlowField, oh: usize, ow: usize) -> FlowField {
    let a = f.to_array();
    let r = host_resize(&a, oh, ow);
    let (sx, sy) = (ow as f64 / f.width as f64, oh as f64 / f.height as f64);
    let mut out = FlowField::zeros(oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = (y * ow + x) * 2;
            out.data[i] = r.data[i] * sx;
            out.data[i + 1] = r.data[i + 1] * sy;
            let nx = (((x as f64 + 0.5) * f.width as f64 / ow as f64 - 0.5).round() as isize)
                .clamp(0, f.width as isize - 1) as usize;
            let ny = (((y as f64 + 0.5) * f.height as f64 / oh as f64 - 0.5).round() as isize)
                .clamp(0, f.height as isize - 1) as usize;
            out.valid[y * ow + x] = f.is_valid(nx, ny);
        }
    }
    out
}

fn slice_window(a: &Array, win: Window) -> Array {
    let (_, w, c) = (a.shape[0], a.shape[1], a.shape[2]);
    let mut out = vec![0.0; win.height * win.width * c];
    for y in 0..win.height {
        for x in 0..win.width {
            let src = ((win.y0 + y) * w + win.x0 + x) * c;
            let dst = (y * win.width + x) * c;
            out[dst..dst + c].copy_from_slice(&a.data[src..src + c]);
        }
    }
    Array::new(vec![win.height, win.width, c], out).expect("window shape")
}

fn forward_flow(
    params: &ParameterStore,
    cfg: &ModelConfig,
    img_s: &Array,
    img_t: &Array,
) -> Result<FlowField> {
    let mut tape = Tape::inference();
    let vars: HashMap<String, Value> = params.inject_all(&mut tape)?;
    let out = model::forward(&mut tape, &vars, cfg, img_s, img_t)?;
    model::flow_field(&tape, out.flow)
}

/// Compute the coarse flow plus one composed candidate per usable k, each
/// scored by cycle consistency against the coarse backward flow.
pub fn zoom_candidates(
    params: &ParameterStore,
    cfg: &ModelConfig,
    zcfg: &ZoomConfig,
    img_s: &Array,
    img_t: &Array,
) -> Result<(Vec<Candidate>, Vec<String>)> {
    zcfg.validate()?;
    let (h, w) = (img_s.shape[0], img_s.shape[1]);
    let e_in = cfg.plan.input_extent;

    let coarse = forward_flow(params, cfg, img_s, img_t)?;
    let backward = forward_flow(params, cfg, img_t, img_s)?;
    let coarse_conf = cycle_confidence(&coarse, &backward)?;
    let (aligned, _mask) = warp_image(img_s, &coarse)?;

    let mut ks: Vec<usize> = zcfg.k_list.clone();
    ks.sort_unstable();

    let mut candidates = vec![Candidate {
        label: "coarse".into(),
        flow: coarse.clone(),
        confidence: coarse_conf,
    }];
    let mut warnings = Vec::new();

    for k in ks {
        let windows = partition(h, w, k)?;
        let too_small = windows
            .iter()
            .any(|win| win.width < zcfg.min_window || win.height < zcfg.min_window);
        if too_small {
            warnings.push(format!(
                "k={k}: window below {} px on a {h}x{w} image, skipped",
                zcfg.min_window
            ));
            continue;
        }
        // window matches are independent; merged in window index order
        let locals: Result<Vec<FlowField>> = windows
            .par_iter()
            .map(|&win| {
                let ws = host_resize(&slice_window(&aligned, win), e_in, e_in);
                let wt = host_resize(&slice_window(img_t, win), e_in, e_in);
                let f = forward_flow(params, cfg, &ws, &wt)?;
                Ok(resize_flow(&f, win.height, win.width))
            })
            .collect();
        let locals = locals?;
        let mut merged = FlowField::zeros(h, w);
        for (win, local) in windows.iter().zip(&locals) {
            for y in 0..win.height {
                for x in 0..win.width {
                    let (dx, dy) = local.get(x, y);
                    merged.set(win.x0 + x, win.y0 + y, dx, dy);
                    merged.valid[(win.y0 + y) * w + win.x0 + x] = local.is_valid(x, y);
                }
            }
        }
        let composed = compose_flow(&merged, &coarse)?;
        let conf = cycle_confidence(&composed, &backward)?;
        candidates.push(Candidate {
            label: format!("k={k}"),
            flow: composed,
            confidence: conf,
        });
    }
    Ok((candidates, warnings))
}

/// Per-pixel argmin of cycle error over the candidates; ties keep the
/// earlier candidate (coarse first, then ascending k).
pub fn select_candidates(candidates: &[Candidate]) -> Result<(FlowField, ConfidenceMap)> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::Contract("selection needs at least one candidate".into()))?;
    let (h, w) = (first.flow.height, first.flow.width);
    let mut flow = first.flow.clone();
    let mut conf = first.confidence.clone();
    for cand in &candidates[1..] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !cand.confidence.valid[i] {
                    continue;
                }
                if !conf.valid[i] || cand.confidence.cycle_error[i] < conf.cycle_error[i] {
                    let (dx, dy) = cand.flow.get(x, y);
                    flow.set(x, y, dx, dy);
                    flow.valid[i] = cand.flow.valid[i];
                    conf.cycle_error[i] = cand.confidence.cycle_error[i];
                    conf.valid[i] = cand.confidence.valid[i];
                }
            }
        }
    }
    Ok((flow, conf))
}

/// Full zoom-in inference: coarse matching, per-window refinement at every
/// k in the config, and per-pixel most-confident selection.
pub fn zoom_in(
    params: &ParameterStore,
    cfg: &ModelConfig,
    zcfg: &ZoomConfig,
    img_s: &Array,
    img_t: &Array,
) -> Result<ZoomOutput> {
    let (candidates, warnings) = zoom_candidates(params, cfg, zcfg, img_s, img_t)?;
    let (flow, confidence) = select_candidates(&candidates)?;
    Ok(ZoomOutput {
        flow,
        confidence,
        warnings,
    })
}
