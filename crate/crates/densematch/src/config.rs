//! Flat key=value configuration: every key has a default, unknown keys are
//! rejected, and parse → serialize → parse is the identity.

use std::fmt::Write as _;
use std::path::Path;

use crate::attention::{AggConfig, AttnKind, CrossKind};
use crate::backbone::LevelPlan;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::synth::WarpKind;
use crate::zoom::ZoomConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // model
    pub plan: String,
    pub attention: String,
    pub blocks: usize,
    pub heads: usize,
    pub posemb: bool,
    pub hierarchy: bool,
    pub cross: String,
    pub feature_stream: bool,
    pub cost_stream: bool,
    pub shared_attention: bool,
    pub temperature: f64,
    // zoom
    pub zoom_k: Vec<usize>,
    // optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    // dataset
    pub seed: u64,
    pub strength: f64,
    pub count: usize,
    pub val_count: usize,
    pub extent: usize,
    pub warp_kinds: Vec<String>,
    // paths
    pub data_dir: String,
    pub out_dir: String,
    pub checkpoint: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            plan: "desk".into(),
            attention: "linear".into(),
            blocks: 2,
            heads: 1,
            posemb: true,
            hierarchy: true,
            cross: "matching-dist".into(),
            feature_stream: true,
            cost_stream: true,
            shared_attention: true,
            temperature: 0.02,
            zoom_k: vec![3, 4, 5],
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 2,
            seed: 0,
            strength: 0.5,
            count: 200,
            val_count: 20,
            extent: 256,
            warp_kinds: vec!["affine".into(), "homography".into(), "tps".into()],
            data_dir: "data".into(),
            out_dir: "out".into(),
            checkpoint: String::new(),
        }
    }
}

fn parse_cross(s: &str) -> Result<CrossKind> {
    match s {
        "none" => Ok(CrossKind::None),
        "feature-qk" => Ok(CrossKind::FeatureQk),
        "matching-dist" => Ok(CrossKind::MatchingDist),
        other => Err(Error::Config(format!("unknown cross kind {other:?}"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true/false, got {other:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "plan" => {
                    LevelPlan::by_name(value)?;
                    cfg.plan = value.into();
                }
                "attention" => {
                    AttnKind::parse(value)?;
                    cfg.attention = value.into();
                }
                "blocks" => cfg.blocks = parse_num(key, value)?,
                "heads" => cfg.heads = parse_num(key, value)?,
                "posemb" => cfg.posemb = parse_bool(key, value)?,
                "hierarchy" => cfg.hierarchy = parse_bool(key, value)?,
                "cross" => {
                    parse_cross(value)?;
                    cfg.cross = value.into();
                }
                "feature_stream" => cfg.feature_stream = parse_bool(key, value)?,
                "cost_stream" => cfg.cost_stream = parse_bool(key, value)?,
                "shared_attention" => cfg.shared_attention = parse_bool(key, value)?,
                "temperature" => cfg.temperature = parse_num(key, value)?,
                "zoom_k" => {
                    cfg.zoom_k = if value.is_empty() {
                        vec![]
                    } else {
                        value
                            .split(',')
                            .map(|s| parse_num("zoom_k", s.trim()))
                            .collect::<Result<_>>()?
                    };
                }
                "lr" => cfg.lr = parse_num(key, value)?,
                "beta1" => cfg.beta1 = parse_num(key, value)?,
                "beta2" => cfg.beta2 = parse_num(key, value)?,
                "eps" => cfg.eps = parse_num(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "strength" => cfg.strength = parse_num(key, value)?,
                "count" => cfg.count = parse_num(key, value)?,
                "val_count" => cfg.val_count = parse_num(key, value)?,
                "extent" => cfg.extent = parse_num(key, value)?,
                "warp_kinds" => {
                    let kinds: Vec<String> =
                        value.split(',').map(|s| s.trim().to_string()).collect();
                    for k in &kinds {
                        WarpKind::parse(k)?;
                    }
                    cfg.warp_kinds = kinds;
                }
                "data_dir" => cfg.data_dir = value.into(),
                "out_dir" => cfg.out_dir = value.into(),
                "checkpoint" => cfg.checkpoint = value.into(),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Config("strength must be in (0,1]".into()));
        }
        self.zoom_config().validate()?;
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let join_usize = |v: &[usize]| {
            v.iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "plan = {}", self.plan);
        let _ = writeln!(s, "attention = {}", self.attention);
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "posemb = {}", self.posemb);
        let _ = writeln!(s, "hierarchy = {}", self.hierarchy);
        let _ = writeln!(s, "cross = {}", self.cross);
        let _ = writeln!(s, "feature_stream = {}", self.feature_stream);
        let _ = writeln!(s, "cost_stream = {}", self.cost_stream);
        let _ = writeln!(s, "shared_attention = {}", self.shared_attention);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "zoom_k = {}", join_usize(&self.zoom_k));
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "strength = {}", self.strength);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "val_count = {}", self.val_count);
        let _ = writeln!(s, "extent = {}", self.extent);
        let _ = writeln!(s, "warp_kinds = {}", self.warp_kinds.join(","));
        let _ = writeln!(s, "data_dir = {}", self.data_dir);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint);
        s
    }

    pub fn agg_config(&self) -> Result<AggConfig> {
        Ok(AggConfig {
            kind: AttnKind::parse(&self.attention)?,
            n_blocks: self.blocks,
            heads: self.heads,
            use_posemb: self.posemb,
            feature_stream: self.feature_stream,
            cost_stream: self.cost_stream,
            shared_attention: self.shared_attention,
            cross: parse_cross(&self.cross)?,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            plan: LevelPlan::by_name(&self.plan)?,
            agg: self.agg_config()?,
            temperature: self.temperature,
            hierarchy: self.hierarchy,
        })
    }

    pub fn zoom_config(&self) -> ZoomConfig {
        ZoomConfig {
            k_list: self.zoom_k.clone(),
            ..ZoomConfig::default()
        }
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn warp_kind_list(&self) -> Result<Vec<WarpKind>> {
        self.warp_kinds.iter().map(|s| WarpKind::parse(s)).collect()
    }
}
