//! Coarse-to-fine orchestration: per-level attention blocks, cross-level
//! feature/cost propagation, the summed final cost, and soft-argmax flow
//! decoding with an EPE training objective.

use std::collections::HashMap;

use rand_chacha::ChaCha12Rng;

use crate::attention::{self, AggConfig};
use crate::backbone::{self, LevelPlan};
use crate::cost;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::params::ParameterStore;
use crate::tensor::{Array, Tape, Value};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub plan: LevelPlan,
    pub agg: AggConfig,
    /// Soft-argmax temperature for flow decoding.
    pub temperature: f64,
    /// Propagate aggregated features/cost from coarse to fine levels.
    pub hierarchy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            plan: LevelPlan::desk(),
            agg: AggConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            hierarchy: true,
        }
    }
}

/// Everything a forward pass produces, still on the tape.
pub struct ModelOutput {
    /// Aggregated (features_s, features_t, cost) per level, coarsest first.
    pub per_level: Vec<(Value, Value, Value)>,
    /// Sum of all per-level costs at the finest extent.
    pub c_star: Value,
    /// Flow at the finest cost-grid resolution, grid-pixel units.
    pub flow_grid: Value,
    /// Flow upscaled to the input image resolution, image-pixel units.
    pub flow: Value,
}

/// Register every learnable parameter of the model.
pub fn register(params: &mut ParameterStore, cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Result<()> {
    backbone::register(params, &cfg.plan, rng)?;
    attention::register(params, &cfg.plan, &cfg.agg, rng)?;
    if cfg.hierarchy {
        for l in 0..cfg.plan.levels.len() - 1 {
            let cin = cfg.plan.levels[l].proj_channels;
            let cout = cfg.plan.levels[l + 1].proj_channels;
            let scale = (1.0 / cin as f64).sqrt();
            params.register_uniform(&format!("pyr.trans{l}.weight"), &[cin, cout], scale, rng)?;
        }
    }
    Ok(())
}

fn var(vars: &HashMap<String, Value>, name: &str) -> Result<Value> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter {name:?} not on tape")))
}

/// Decode a flow field from a cost volume: per target pixel, the softmax
/// expectation of source positions minus the target position, in grid
/// pixels, channels (dx, dy).
pub fn soft_argmax(tape: &mut Tape, c_star: Value, temperature: f64) -> Result<Value> {
    if temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "soft-argmax temperature must be positive, got {temperature}"
        )));
    }
    let sh = tape.shape(c_star).to_vec();
    if sh.len() != 4 || sh[0] != sh[1] || sh[2] != sh[3] || sh[0] != sh[2] {
        return Err(Error::dim("soft_argmax", &sh, &[]));
    }
    let e = sh[0];
    let hw = e * e;
    let flat = tape.reshape(c_star, vec![hw, hw])?;
    let by_target = tape.transpose(flat)?; // row j: scores over source i
    let p = tape.softmax_last(by_target, temperature)?;
    let mut pos = vec![0.0; hw * 2];
    for y in 0..e {
        for x in 0..e {
            pos[(y * e + x) * 2] = x as f64;
            pos[(y * e + x) * 2 + 1] = y as f64;
        }
    }
    let pos_v = tape.input(Array::new(vec![hw, 2], pos.clone())?)?;
    let expected = tape.matmul(p, pos_v)?;
    let own = tape.input(Array::new(vec![hw, 2], pos)?)?;
    let disp = tape.sub(expected, own)?;
    tape.reshape(disp, vec![e, e, 2])
}

/// Resize a flow grid to a new square extent, rescaling displacements into
/// the new pixel units.
pub fn upscale_flow(tape: &mut Tape, flow: Value, out_extent: usize) -> Result<Value> {
    let sh = tape.shape(flow).to_vec();
    if sh.len() != 3 || sh[2] != 2 || sh[0] != sh[1] {
        return Err(Error::dim("upscale_flow", &sh, &[out_extent]));
    }
    if sh[0] == out_extent {
        return Ok(flow);
    }
    let resized = tape.bilinear_resize(flow, out_extent, out_extent)?;
    // displacements are in source-grid pixels: scale with the resolution
    tape.scale(resized, out_extent as f64 / sh[0] as f64)
}

/// Masked mean endpoint error between a predicted flow (on the tape) and a
/// ground-truth flow field. Differentiable in the prediction.
pub fn epe_loss(tape: &mut Tape, pred: Value, gt: &FlowField) -> Result<Value> {
    let sh = tape.shape(pred).to_vec();
    if sh != [gt.height, gt.width, 2] {
        return Err(Error::dim("epe_loss", &sh, &[gt.height, gt.width, 2]));
    }
    let n_valid = gt.valid_count();
    if n_valid == 0 {
        return Err(Error::Eval("no valid pixels for EPE".into()));
    }
    let hw = gt.height * gt.width;
    let gt_v = tape.input(gt.to_array())?;
    let diff = tape.sub(pred, gt_v)?;
    let sq = tape.mul(diff, diff)?;
    let flat = tape.reshape(sq, vec![hw, 2])?;
    let ones = tape.input(Array::new(vec![2, 1], vec![1.0, 1.0])?)?;
    let sums = tape.matmul(flat, ones)?;
    let shifted = tape.add_scalar(sums, 1e-12)?;
    let dist = tape.sqrt(shifted)?;
    let mask: Vec<f64> = gt.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask_v = tape.input(Array::new(vec![hw, 1], mask)?)?;
    let masked = tape.mul(dist, mask_v)?;
    let total = tape.sum_all(masked)?;
    tape.scale(total, 1.0 / n_valid as f64)
}

/// Turn a decoded flow value into a host flow field; pixels whose matched
/// source location leaves the image are marked invalid.
pub fn flow_field(tape: &Tape, flow: Value) -> Result<FlowField> {
    let sh = tape.shape(flow);
    if sh.len() != 3 || sh[2] != 2 {
        return Err(Error::dim("flow_field", sh, &[]));
    }
    let (h, w) = (sh[0], sh[1]);
    let data = tape.data(flow).to_vec();
    let mut valid = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 2;
            let sx = x as f64 + data[i];
            let sy = y as f64 + data[i + 1];
            valid[y * w + x] =
                sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
        }
    }
    FlowField::from_array(&Array::new(vec![h, w, 2], data)?, valid)
}

fn check_image(a: &Array, what: &str) -> Result<usize> {
    if a.shape.len() != 3 || a.shape[2] != 3 || a.shape[0] != a.shape[1] {
        return Err(Error::Config(format!(
            "{what} must be a square [n,n,3] image, got {:?}",
            a.shape
        )));
    }
    Ok(a.shape[0])
}

/// Full coarse-to-fine forward pass. Accepts square RGB images of any
/// extent: they are resized to the plan's input extent, and the decoded
/// flow is upscaled back to the original resolution.
pub fn forward(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    cfg: &ModelConfig,
    img_s: &Array,
    img_t: &Array,
) -> Result<ModelOutput> {
    let n_s = check_image(img_s, "source image")?;
    let n_t = check_image(img_t, "target image")?;
    if n_s != n_t {
        return Err(Error::Config(format!(
            "image extents must match, got {n_s} vs {n_t}"
        )));
    }
    let e_in = cfg.plan.input_extent;
    let mut s = tape.input(img_s.clone())?;
    let mut t = tape.input(img_t.clone())?;
    if n_s != e_in {
        s = tape.bilinear_resize(s, e_in, e_in)?;
        t = tape.bilinear_resize(t, e_in, e_in)?;
    }
    let feats_s = backbone::features(tape, vars, &cfg.plan, s)?;
    let feats_t = backbone::features(tape, vars, &cfg.plan, t)?;

    let mut per_level: Vec<(Value, Value, Value)> = Vec::new();
    for l in 0..cfg.plan.levels.len() {
        let spec = cfg.plan.levels[l];
        let (mut ds, mut dt) = (feats_s[l], feats_t[l]);
        let mut c_in: Option<Value> = None;
        if cfg.hierarchy && l > 0 {
            let (pds, pdt, pc) = per_level[l - 1];
            let w = var(vars, &format!("pyr.trans{}.weight", l - 1))?;
            let lift = |tape: &mut Tape, fine: Value, prev: Value| -> Result<Value> {
                let up = tape.bilinear_resize(prev, spec.extent, spec.extent)?;
                let prev_ch = cfg.plan.levels[l - 1].proj_channels;
                let flat = tape.reshape(up, vec![spec.extent * spec.extent, prev_ch])?;
                let proj = tape.matmul(flat, w)?;
                let shaped =
                    tape.reshape(proj, vec![spec.extent, spec.extent, spec.proj_channels])?;
                tape.add(fine, shaped)
            };
            ds = lift(tape, ds, pds)?;
            dt = lift(tape, dt, pdt)?;
            let base = cost::build(tape, ds, dt)?;
            let up_c = cost::upsample_cost(tape, pc, spec.extent)?;
            c_in = Some(cost::residual_add(tape, base, up_c)?);
        }
        let c_l = match c_in {
            Some(c) => c,
            None => cost::build(tape, ds, dt)?,
        };
        let (ds2, dt2, c2) =
            attention::attention_block(tape, vars, &cfg.plan, l, &cfg.agg, ds, dt, c_l)?;
        per_level.push((ds2, dt2, c2));
    }

    let costs: Vec<Value> = per_level.iter().map(|&(_, _, c)| c).collect();
    let c_star = cost::final_cost(tape, &costs)?;
    let flow_grid = soft_argmax(tape, c_star, cfg.temperature)?;
    let flow = upscale_flow(tape, flow_grid, n_s)?;
    Ok(ModelOutput {
        per_level,
        c_star,
        flow_grid,
        flow,
    })
}
