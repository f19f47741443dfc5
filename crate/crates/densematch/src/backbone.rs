//! Toy trainable feature extractor: a strided conv stack producing a
//! 3-level pyramid, plus per-level channel-reduction projections.

use std::collections::HashMap;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Tape, Value};

/// One pyramid level: square extent and channel widths before/after the
/// channel-reduction projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub extent: usize,
    pub raw_channels: usize,
    pub proj_channels: usize,
}

/// The full pyramid layout, coarsest level first. Extents double per level
/// and the model input is square at `input_extent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    pub input_extent: usize,
    pub levels: Vec<LevelSpec>,
}

impl LevelPlan {
    /// Desk-scale default: 64x64 input, levels 8/16/32.
    pub fn desk() -> Self {
        LevelPlan {
            input_extent: 64,
            levels: vec![
                LevelSpec { extent: 8, raw_channels: 96, proj_channels: 48 },
                LevelSpec { extent: 16, raw_channels: 64, proj_channels: 32 },
                LevelSpec { extent: 32, raw_channels: 48, proj_channels: 24 },
            ],
        }
    }

    /// Full-scale preset: 512x512 input, levels 16/32/64.
    pub fn paper() -> Self {
        LevelPlan {
            input_extent: 512,
            levels: vec![
                LevelSpec { extent: 16, raw_channels: 768, proj_channels: 384 },
                LevelSpec { extent: 32, raw_channels: 512, proj_channels: 256 },
                LevelSpec { extent: 64, raw_channels: 256, proj_channels: 128 },
            ],
        }
    }

    /// Small plan for ablation sweeps: 16x16 input, levels 2/4/8.
    pub fn small() -> Self {
        LevelPlan {
            input_extent: 16,
            levels: vec![
                LevelSpec { extent: 2, raw_channels: 12, proj_channels: 8 },
                LevelSpec { extent: 4, raw_channels: 10, proj_channels: 6 },
                LevelSpec { extent: 8, raw_channels: 8, proj_channels: 4 },
            ],
        }
    }

    /// Minimal plan for gradient checks: 8x8 input, levels 1/2/4.
    pub fn tiny() -> Self {
        LevelPlan {
            input_extent: 8,
            levels: vec![
                LevelSpec { extent: 1, raw_channels: 8, proj_channels: 4 },
                LevelSpec { extent: 2, raw_channels: 6, proj_channels: 3 },
                LevelSpec { extent: 4, raw_channels: 4, proj_channels: 2 },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown level plan {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 3 {
            return Err(Error::Config(format!(
                "level plan must have exactly 3 levels, got {}",
                self.levels.len()
            )));
        }
        for w in self.levels.windows(2) {
            if w[1].extent != 2 * w[0].extent {
                return Err(Error::Config(format!(
                    "each finer level must double the coarser extent: {} then {}",
                    w[0].extent, w[1].extent
                )));
            }
        }
        for l in &self.levels {
            if l.extent == 0 || l.raw_channels == 0 || l.proj_channels == 0 {
                return Err(Error::Config("level extents/channels must be positive".into()));
            }
            if l.proj_channels > l.raw_channels {
                return Err(Error::Config(format!(
                    "projection must reduce channels: {} -> {}",
                    l.raw_channels, l.proj_channels
                )));
            }
        }
        let coarsest = self.levels[0].extent;
        if self.input_extent % coarsest != 0
            || !(self.input_extent / coarsest).is_power_of_two()
            || self.input_extent < self.finest().extent
        {
            return Err(Error::Config(format!(
                "input extent {} incompatible with coarsest level extent {}",
                self.input_extent, coarsest
            )));
        }
        Ok(())
    }

    pub fn finest(&self) -> &LevelSpec {
        self.levels.last().expect("plan has levels")
    }

    /// Conv stage output channel widths, input side first. The last three
    /// stages are the pyramid taps (fine, middle, coarse).
    fn stage_channels(&self) -> Vec<usize> {
        let n_stages = (self.input_extent / self.levels[0].extent).ilog2() as usize;
        let mut chans = vec![self.levels[2].raw_channels; n_stages.saturating_sub(3)];
        chans.push(self.levels[2].raw_channels);
        chans.push(self.levels[1].raw_channels);
        chans.push(self.levels[0].raw_channels);
        chans.truncate(n_stages);
        chans
    }
}

/// Register backbone + projection parameters. Conv kernels use a uniform
/// fan-in init; biases start at zero.
pub fn register(params: &mut ParameterStore, plan: &LevelPlan, rng: &mut ChaCha12Rng) -> Result<()> {
    plan.validate()?;
    let mut cin = 3;
    for (i, cout) in plan.stage_channels().into_iter().enumerate() {
        let scale = (1.0 / (9.0 * cin as f64)).sqrt();
        params.register_uniform(&format!("backbone.stage{i}.kernel"), &[3, 3, cin, cout], scale, rng)?;
        params.register_const(&format!("backbone.stage{i}.bias"), &[cout], 0.0)?;
        cin = cout;
    }
    for (l, spec) in plan.levels.iter().enumerate() {
        let scale = (1.0 / spec.raw_channels as f64).sqrt();
        params.register_uniform(
            &format!("backbone.proj{l}.weight"),
            &[spec.raw_channels, spec.proj_channels],
            scale,
            rng,
        )?;
    }
    Ok(())
}

fn var(vars: &HashMap<String, Value>, name: &str) -> Result<Value> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter {name:?} not on tape")))
}

/// Run the strided conv stack. Returns raw per-level feature maps
/// (shape [extent, extent, raw_channels]), coarsest first.
pub fn extract_pyramid(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    plan: &LevelPlan,
    image: Value,
) -> Result<Vec<Value>> {
    let sh = tape.shape(image);
    if sh != [plan.input_extent, plan.input_extent, 3] {
        return Err(Error::Config(format!(
            "backbone expects a {0}x{0}x3 image, got {1:?}",
            plan.input_extent, sh
        )));
    }
    let n_stages = plan.stage_channels().len();
    let mut x = image;
    let mut taps = Vec::new();
    for i in 0..n_stages {
        let k = var(vars, &format!("backbone.stage{i}.kernel"))?;
        let b = var(vars, &format!("backbone.stage{i}.bias"))?;
        let y = tape.conv2d(x, k, 2)?;
        let sh = tape.shape(y).to_vec();
        let flat = tape.reshape(y, vec![sh[0] * sh[1], sh[2]])?;
        let biased = tape.add_row(flat, b)?;
        let act = tape.silu(biased)?;
        x = tape.reshape(act, sh)?;
        if i + 3 >= n_stages {
            taps.push(x);
        }
    }
    taps.reverse(); // taps were fine->coarse; return coarsest first
    Ok(taps)
}

/// Pointwise channel-reduction projection for one level.
pub fn project(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    plan: &LevelPlan,
    level: usize,
    feat: Value,
) -> Result<Value> {
    let spec = &plan.levels[level];
    let sh = tape.shape(feat);
    if sh != [spec.extent, spec.extent, spec.raw_channels] {
        return Err(Error::dim("project", sh, &[spec.extent, spec.extent, spec.raw_channels]));
    }
    let w = var(vars, &format!("backbone.proj{level}.weight"))?;
    let flat = tape.reshape(feat, vec![spec.extent * spec.extent, spec.raw_channels])?;
    let p = tape.matmul(flat, w)?;
    tape.reshape(p, vec![spec.extent, spec.extent, spec.proj_channels])
}

/// Unit-normalize each pixel's channel vector (zero vectors stay zero).
pub fn l2_normalize(tape: &mut Tape, feat: Value) -> Result<Value> {
    let sh = tape.shape(feat).to_vec();
    if sh.len() != 3 {
        return Err(Error::dim("l2_normalize", &sh, &[]));
    }
    let flat = tape.reshape(feat, vec![sh[0] * sh[1], sh[2]])?;
    let n = tape.l2_normalize_rows(flat)?;
    tape.reshape(n, sh)
}

/// Full per-image feature path: pyramid, projection, normalization.
/// Returns projected, unit-norm maps [extent, extent, proj_channels],
/// coarsest first.
pub fn features(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    plan: &LevelPlan,
    image: Value,
) -> Result<Vec<Value>> {
    let raw = extract_pyramid(tape, vars, plan, image)?;
    raw.into_iter()
        .enumerate()
        .map(|(l, f)| {
            let p = project(tape, vars, plan, l, f)?;
            l2_normalize(tape, p)
        })
        .collect()
}
