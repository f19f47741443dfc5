//! Seeded ablation harness: trains wiring variants of the model on a shared
//! synthetic dataset and reports held-out AEPE per variant, with soft
//! directional PASS/FAIL checks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::attention::CrossKind;
use crate::backbone::{LevelPlan, LevelSpec};
use crate::config::Config;
use crate::dataset::{self, PairRecord};
use crate::error::{Error, Result};
use crate::eval::aepe;
use crate::model::{self, ModelConfig};
use crate::optim::AdamW;
use crate::params::ParameterStore;
use crate::tensor::Tape;
use crate::zoom::{self, ZoomConfig};

/// Variants must stay within this relative distance of the reference
/// parameter count.
pub const BUDGET_TOLERANCE: f64 = 0.10;

/// One model variant: a wiring of the aggregation/hierarchy/zoom components,
/// already width-adjusted to the shared parameter budget.
#[derive(Debug, Clone)]
pub struct VariantSpec {
    pub tag: String,
    pub model: ModelConfig,
    /// Evaluate with multi-window zoom-in instead of the plain coarse pass.
    pub use_zoom: bool,
    /// Learnable scalar count after budget matching.
    pub param_count: usize,
}

/// Per-variant outcome over the seed set.
#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub tag: String,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    pub val_aepe: Vec<f64>,
    pub median_aepe: f64,
}

/// A soft directional expectation between two variants.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionCheck {
    pub name: String,
    pub better: String,
    pub worse: String,
    pub better_median: f64,
    pub worse_median: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub results: Vec<VariantResult>,
    pub directions: Vec<DirectionCheck>,
    pub markdown: String,
}

/// The wiring behind each variant tag, in report order.
fn wiring(tag: &str) -> Option<(bool, bool, bool, CrossKind, bool, bool)> {
    // (feature_stream, cost_stream, shared_attention, cross, hierarchy, zoom)
    match tag {
        "feat-self" => Some((true, false, false, CrossKind::None, false, false)),
        "feat-self-cross" => Some((true, false, false, CrossKind::FeatureQk, false, false)),
        "cost-self" => Some((false, true, false, CrossKind::None, false, false)),
        "sequential" => Some((true, true, false, CrossKind::FeatureQk, false, false)),
        "integrative" => Some((true, true, true, CrossKind::FeatureQk, false, false)),
        "+matching-dist" => Some((true, true, true, CrossKind::MatchingDist, false, false)),
        "+hierarchy" => Some((true, true, true, CrossKind::MatchingDist, true, false)),
        "+zoom" => Some((true, true, true, CrossKind::MatchingDist, true, true)),
        _ => None,
    }
}

pub const DEFAULT_TAGS: [&str; 8] = [
    "feat-self",
    "feat-self-cross",
    "cost-self",
    "sequential",
    "integrative",
    "+matching-dist",
    "+hierarchy",
    "+zoom",
];

fn scalar_count(mcfg: &ModelConfig) -> Result<usize> {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    model::register(&mut store, mcfg, &mut rng)?;
    Ok(store.scalar_count())
}

/// Rescale every channel width of a plan by `m` (extents unchanged).
fn scaled_plan(base: &LevelPlan, m: f64) -> LevelPlan {
    let s = |c: usize| ((c as f64 * m).round() as usize).max(2);
    LevelPlan {
        input_extent: base.input_extent,
        levels: base
            .levels
            .iter()
            .map(|l| LevelSpec {
                extent: l.extent,
                raw_channels: s(l.raw_channels),
                proj_channels: s(l.proj_channels).min(s(l.raw_channels)),
            })
            .collect(),
    }
}

/// Widen or narrow a variant's channels until its learnable-parameter count
/// lands within tolerance of `target`.
fn match_budget(tag: &str, mcfg: &ModelConfig, target: usize) -> Result<(ModelConfig, usize)> {
    let within = |count: usize| {
        (count as f64 - target as f64).abs() <= BUDGET_TOLERANCE * target as f64
    };
    let count0 = scalar_count(mcfg)?;
    if within(count0) {
        return Ok((mcfg.clone(), count0));
    }
    let count_at = |m: f64| -> Result<(ModelConfig, usize)> {
        let mut c = mcfg.clone();
        c.plan = scaled_plan(&mcfg.plan, m);
        let n = scalar_count(&c)?;
        Ok((c, n))
    };
    let (mut lo, mut hi) = (1.0 / 16.0, 16.0);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let (c, n) = count_at(mid)?;
        if within(n) {
            return Ok((c, n));
        }
        if n < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (_, n) = count_at(0.5 * (lo + hi))?;
    Err(Error::Config(format!(
        "variant {tag:?} cannot be matched to the parameter budget: \
         closest count {n} vs target {target}"
    )))
}

/// Build the budget-matched variant list for a config. The reference budget
/// is the integrative variant's count under the config's plan.
pub fn build_variants(cfg: &Config, tags: &[&str]) -> Result<Vec<VariantSpec>> {
    let base = cfg.model_config()?;
    let make = |tag: &str| -> Result<(ModelConfig, bool)> {
        let (feat, cost, shared, cross, hier, zoomed) = wiring(tag)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {tag:?}")))?;
        let mut m = base.clone();
        m.agg.feature_stream = feat;
        m.agg.cost_stream = cost;
        m.agg.shared_attention = shared;
        m.agg.cross = cross;
        m.hierarchy = hier;
        Ok((m, zoomed))
    };
    let (reference, _) = make("integrative")?;
    let target = scalar_count(&reference)?;
    let mut out = Vec::with_capacity(tags.len());
    for tag in tags {
        let (mcfg, use_zoom) = make(tag)?;
        let (matched, count) = match_budget(tag, &mcfg, target)?;
        out.push(VariantSpec {
            tag: tag.to_string(),
            model: matched,
            use_zoom,
            param_count: count,
        });
    }
    Ok(out)
}

fn held_out_aepe(
    params: &ParameterStore,
    spec: &VariantSpec,
    zcfg: &ZoomConfig,
    dir: &Path,
    recs: &[PairRecord],
) -> Result<f64> {
    if recs.is_empty() {
        return Err(Error::Eval("no validation pairs".into()));
    }
    let mut total = 0.0;
    for rec in recs {
        let (i_s, i_t, gt) = dataset::load_pair(dir, rec)?;
        let pred = if spec.use_zoom {
            zoom::zoom_in(params, &spec.model, zcfg, &i_s, &i_t)?.flow
        } else {
            let mut tape = Tape::inference();
            let vars = params.inject_all(&mut tape)?;
            let out = model::forward(&mut tape, &vars, &spec.model, &i_s, &i_t)?;
            model::flow_field(&tape, out.flow)?
        };
        total += aepe(&pred, &gt)?;
    }
    Ok(total / recs.len() as f64)
}

/// Train one variant from scratch and return its final parameters. The
/// shuffle order depends only on (seed, epoch), so every variant sees the
/// training pairs in the same order.
fn fit(
    cfg: &Config,
    mcfg: &ModelConfig,
    data_dir: &Path,
    train_recs: &[PairRecord],
    seed: u64,
) -> Result<ParameterStore> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = ParameterStore::new();
    model::register(&mut params, mcfg, &mut rng)?;
    let mut opt = AdamW::new(cfg.adamw_config());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_recs.len()).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_add(1));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }
        for &idx in &order {
            let (i_s, i_t, gt) = dataset::load_pair(data_dir, &train_recs[idx])?;
            let mut tape = Tape::new();
            let vars = params.inject_all(&mut tape)?;
            let out = model::forward(&mut tape, &vars, mcfg, &i_s, &i_t)?;
            let loss = model::epe_loss(&mut tape, out.flow, &gt)?;
            let grads = tape.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&vars, &tape, &grads)?;
            params.fill_missing_grads();
            opt.step(&mut params)?;
        }
    }
    Ok(params)
}

/// Stable description of everything that affects training (not inference).
fn wiring_key(mcfg: &ModelConfig) -> String {
    let levels: Vec<String> = mcfg
        .plan
        .levels
        .iter()
        .map(|l| format!("{}:{}:{}", l.extent, l.raw_channels, l.proj_channels))
        .collect();
    format!(
        "in{} [{}] blocks{} heads{} pos{} kind{:?} f{} c{} sh{} cross{:?} hier{} t{}",
        mcfg.plan.input_extent,
        levels.join(","),
        mcfg.agg.n_blocks,
        mcfg.agg.heads,
        mcfg.agg.use_posemb,
        mcfg.agg.kind,
        mcfg.agg.feature_stream,
        mcfg.agg.cost_stream,
        mcfg.agg.shared_attention,
        mcfg.agg.cross,
        mcfg.hierarchy,
        mcfg.temperature
    )
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn direction(
    name: &str,
    better: &str,
    worse: &str,
    medians: &HashMap<String, f64>,
) -> Option<DirectionCheck> {
    let (&b, &w) = (medians.get(better)?, medians.get(worse)?);
    Some(DirectionCheck {
        name: name.to_string(),
        better: better.to_string(),
        worse: worse.to_string(),
        better_median: b,
        worse_median: w,
        pass: b < w,
    })
}

fn render_markdown(results: &[VariantResult], directions: &[DirectionCheck]) -> String {
    let mut md = String::from("# Ablation report\n\n");
    md.push_str("| variant | params |");
    if let Some(r) = results.first() {
        for s in &r.seeds {
            md.push_str(&format!(" seed {s} |"));
        }
    }
    md.push_str(" median AEPE |\n|---|---|");
    if let Some(r) = results.first() {
        for _ in &r.seeds {
            md.push_str("---|");
        }
    }
    md.push_str("---|\n");
    for r in results {
        md.push_str(&format!("| {} | {} |", r.tag, r.param_count));
        for v in &r.val_aepe {
            md.push_str(&format!(" {v:.4} |"));
        }
        md.push_str(&format!(" {:.4} |\n", r.median_aepe));
    }
    md.push_str("\nDirectional checks (soft, not build-breaking):\n\n");
    for d in directions {
        md.push_str(&format!(
            "- {}: {} ({:.4} vs {:.4})\n",
            d.name,
            if d.pass { "PASS" } else { "FAIL" },
            d.better_median,
            d.worse_median
        ));
    }
    md
}

/// Train and evaluate every variant over the seed set on a shared dataset.
///
/// The dataset is generated under `cfg.data_dir` if no manifest exists yet.
/// Variants with identical model wiring (e.g. "+hierarchy" and "+zoom")
/// share trained parameters per seed; "+zoom" differs only in inference.
pub fn run_ablation(cfg: &Config, variants: &[VariantSpec], seeds: &[u64]) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let data_dir = Path::new(&cfg.data_dir);
    let records = if dataset::manifest_path(data_dir).exists() {
        dataset::load_manifest(data_dir)?
    } else {
        dataset::generate(data_dir, cfg)?
    };
    if records.len() < cfg.count + cfg.val_count {
        return Err(Error::Config(format!(
            "dataset has {} pairs, config wants {} train + {} val",
            records.len(),
            cfg.count,
            cfg.val_count
        )));
    }
    let train_recs = &records[..cfg.count];
    let val_recs = &records[cfg.count..cfg.count + cfg.val_count];
    let zcfg = cfg.zoom_config();
    zcfg.validate()?;

    // variants that differ only at inference time (e.g. "+zoom") share
    // trained parameters per seed
    let mut trained: HashMap<(String, u64), ParameterStore> = HashMap::new();
    let mut results = Vec::with_capacity(variants.len());
    for spec in variants {
        let key = wiring_key(&spec.model);
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cache_key = (key.clone(), seed);
            if !trained.contains_key(&cache_key) {
                let params = fit(cfg, &spec.model, data_dir, train_recs, seed)?;
                trained.insert(cache_key.clone(), params);
            }
            let params = &trained[&cache_key];
            per_seed.push(held_out_aepe(params, spec, &zcfg, data_dir, val_recs)?);
        }
        results.push(VariantResult {
            tag: spec.tag.clone(),
            param_count: spec.param_count,
            seeds: seeds.to_vec(),
            median_aepe: median(&per_seed),
            val_aepe: per_seed,
        });
    }

    let medians: HashMap<String, f64> = results
        .iter()
        .map(|r| (r.tag.clone(), r.median_aepe))
        .collect();
    let directions: Vec<DirectionCheck> = [
        ("integrative < sequential", "integrative", "sequential"),
        ("full-stack < baseline", "+hierarchy", "feat-self"),
        ("+matching-dist improves on integrative", "+matching-dist", "integrative"),
        ("+hierarchy improves on +matching-dist", "+hierarchy", "+matching-dist"),
        ("+zoom improves on +hierarchy", "+zoom", "+hierarchy"),
    ]
    .iter()
    .filter_map(|(n, b, w)| direction(n, b, w, &medians))
    .collect();

    let markdown = render_markdown(&results, &directions);
    Ok(AblationReport {
        results,
        directions,
        markdown,
    })
}

/// Write the markdown table and a JSONL record file under `dir`.
pub fn write_report(dir: &Path, report: &AblationReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation.md"), &report.markdown)?;
    let mut lines = Vec::new();
    for r in &report.results {
        lines.push(serde_json::to_string(r).expect("result serializes"));
    }
    for d in &report.directions {
        lines.push(serde_json::to_string(d).expect("direction serializes"));
    }
    fs::write(dir.join("ablation.jsonl"), lines.join("\n") + "\n")?;
    Ok(())
}
