//! Command-line surface: dataset generation, toy training, matching,
//! zoom-in inference, evaluation, visualization, and the ablation sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use densematch::ablation;
use densematch::config::Config;
use densematch::dataset;
use densematch::error::{Error, Result};
use densematch::eval::{self, Keypoint, PCK_ALPHAS};
use densematch::flo;
use densematch::flow::FlowField;
use densematch::model;
use densematch::params::ParameterStore;
use densematch::tensor::{Array, Tape};
use densematch::train;
use densematch::viz;
use densematch::zoom;

#[derive(Parser)]
#[command(name = "densematch", about = "dense matching with unified feature/cost aggregation")]
struct Cli {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic warp dataset under the configured data dir.
    GenData,
    /// Train the toy model on an existing dataset.
    TrainToy,
    /// One coarse forward pass; writes a .flo flow with mask sidecar.
    Match {
        source: PathBuf,
        target: PathBuf,
        /// Output flow path (default: <out_dir>/flow.flo).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-window zoom-in inference; writes flow + confidence image.
    Zoomin {
        source: PathBuf,
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predicted .flo files against ground truth; JSONL report.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Report path (default: <out_dir>/eval.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PCA feature maps and cost-volume slices for one image pair.
    Viz {
        source: PathBuf,
        target: PathBuf,
        /// Target pixel "x,y" for the cost slices (default: center).
        #[arg(long)]
        pixel: Option<String>,
    },
    /// Train and compare ablation variants; markdown + JSONL report.
    Ablate {
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model parameters: from the configured checkpoint when set, otherwise a
/// fresh seeded initialization.
fn load_params(cfg: &Config) -> Result<ParameterStore> {
    if !cfg.checkpoint.is_empty() {
        Ok(train::load_checkpoint(Path::new(&cfg.checkpoint))?.params)
    } else {
        let mut params = ParameterStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        model::register(&mut params, &cfg.model_config()?, &mut rng)?;
        Ok(params)
    }
}

fn forward_flow(params: &ParameterStore, cfg: &Config, i_s: &Array, i_t: &Array) -> Result<FlowField> {
    let mcfg = cfg.model_config()?;
    let mut tape = Tape::inference();
    let vars = params.inject_all(&mut tape)?;
    let out = model::forward(&mut tape, &vars, &mcfg, i_s, i_t)?;
    model::flow_field(&tape, out.flow)
}

fn confidence_image(conf: &zoom::ConfidenceMap) -> Result<Array> {
    // bright = confident (small cycle error); invalid pixels are black
    let mut data = vec![0.0; conf.height * conf.width * 3];
    for i in 0..conf.height * conf.width {
        let g = if conf.valid[i] {
            1.0 / (1.0 + conf.cycle_error[i])
        } else {
            0.0
        };
        data[i * 3] = g;
        data[i * 3 + 1] = g;
        data[i * 3 + 2] = g;
    }
    Array::new(vec![conf.height, conf.width, 3], data)
}

#[derive(Serialize)]
struct EvalRow {
    pair: String,
    aepe: f64,
    pck: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct EvalSummary {
    pairs: usize,
    mean_aepe: f64,
    alphas: Vec<f64>,
    mean_pck: Vec<Option<f64>>,
}

/// Keypoints on a sparse grid of valid ground-truth pixels, used to turn a
/// dense flow comparison into a PCK number.
fn grid_keypoints(gt: &FlowField) -> Vec<Keypoint> {
    let stride = (gt.height.max(gt.width) / 8).max(1);
    let mut kps = Vec::new();
    let mut id = 0usize;
    for y in (stride / 2..gt.height).step_by(stride) {
        for x in (stride / 2..gt.width).step_by(stride) {
            if gt.is_valid(x, y) {
                let (dx, dy) = gt.get(x, y);
                kps.push(Keypoint {
                    x: x as f64 + dx,
                    y: y as f64 + dy,
                    id: Some(id),
                });
                id += 1;
            }
        }
    }
    kps
}

fn eval_pair(name: &str, pred: &FlowField, gt: &FlowField) -> Result<EvalRow> {
    let aepe = eval::aepe(pred, gt)?;
    // source keypoints from the gt flow; transfer through both flows and
    // keep the ones matched under both
    let kps = grid_keypoints(gt);
    let mut pck = vec![None; PCK_ALPHAS.len()];
    if !kps.is_empty() {
        let via_gt = eval::transfer_keypoints(gt, &kps);
        let via_pred = eval::transfer_keypoints(pred, &kps);
        let mut gt_pts = Vec::new();
        let mut pred_pts = Vec::new();
        for (g, p) in via_gt.iter().zip(&via_pred) {
            if g.matched && p.matched {
                gt_pts.push(g.point.clone());
                pred_pts.push(p.point.clone());
            }
        }
        if !gt_pts.is_empty() {
            for (i, &alpha) in PCK_ALPHAS.iter().enumerate() {
                pck[i] = Some(eval::pck(&pred_pts, &gt_pts, alpha, gt.height, gt.width)?);
            }
        }
    }
    Ok(EvalRow {
        pair: name.to_string(),
        aepe,
        pck,
    })
}

fn cmd_eval(cfg: &Config, pred_dir: &Path, gt_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".flo"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Eval(format!(
            "no .flo files under {}",
            gt_dir.display()
        )));
    }
    let mut lines = Vec::new();
    let mut aepe_sum = 0.0;
    let mut pck_sums = vec![(0.0, 0usize); PCK_ALPHAS.len()];
    for name in &names {
        let gt = flo::flo_read(&gt_dir.join(name))?;
        let pred = flo::flo_read(&pred_dir.join(name))?;
        let row = eval_pair(name, &pred, &gt)?;
        aepe_sum += row.aepe;
        for (i, v) in row.pck.iter().enumerate() {
            if let Some(v) = v {
                pck_sums[i].0 += v;
                pck_sums[i].1 += 1;
            }
        }
        lines.push(serde_json::to_string(&row).expect("row serializes"));
    }
    let summary = EvalSummary {
        pairs: names.len(),
        mean_aepe: aepe_sum / names.len() as f64,
        alphas: PCK_ALPHAS.to_vec(),
        mean_pck: pck_sums
            .iter()
            .map(|&(s, n)| if n > 0 { Some(s / n as f64) } else { None })
            .collect(),
    };
    lines.push(serde_json::to_string(&summary).expect("summary serializes"));
    let text = lines.join("\n") + "\n";
    let out = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join("eval.jsonl"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, &text)?;
    print!("{text}");
    Ok(())
}

fn parse_pixel(s: &str, extent: usize) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("pixel must be \"x,y\", got {s:?}")));
    }
    let x: usize = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad pixel x {:?}", parts[0])))?;
    let y: usize = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad pixel y {:?}", parts[1])))?;
    if x >= extent || y >= extent {
        return Err(Error::Config(format!(
            "pixel ({x},{y}) outside {extent}x{extent} image"
        )));
    }
    Ok((x, y))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;
    let out_dir = Path::new(&cfg.out_dir);
    match &cli.cmd {
        Cmd::GenData => {
            let records = dataset::generate(Path::new(&cfg.data_dir), &cfg)?;
            let checksum = dataset::dataset_checksum(Path::new(&cfg.data_dir), &records)?;
            println!(
                "wrote {} pairs to {} (checksum {checksum:016x})",
                records.len(),
                cfg.data_dir
            );
        }
        Cmd::TrainToy => {
            let outcome = train::train(&cfg)?;
            for r in &outcome.records {
                match r.train_loss {
                    Some(l) => println!(
                        "epoch {:>3}  train {:.4}  val {:.4}",
                        r.epoch, l, r.val_aepe
                    ),
                    None => println!("epoch {:>3}  val {:.4} (pre-training)", r.epoch, r.val_aepe),
                }
            }
            println!(
                "best val {:.4} at epoch {} -> {}",
                outcome.best_val,
                outcome.best_epoch,
                outcome.best_path.display()
            );
        }
        Cmd::Match { source, target, out } => {
            let params = load_params(&cfg)?;
            let i_s = dataset::read_png(source)?;
            let i_t = dataset::read_png(target)?;
            let flow = forward_flow(&params, &cfg, &i_s, &i_t)?;
            let out = out.clone().unwrap_or_else(|| out_dir.join("flow.flo"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            flo::flo_write(&flow, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Zoomin { source, target, out } => {
            let params = load_params(&cfg)?;
            let i_s = dataset::read_png(source)?;
            let i_t = dataset::read_png(target)?;
            let mcfg = cfg.model_config()?;
            let zcfg = cfg.zoom_config();
            let result = zoom::zoom_in(&params, &mcfg, &zcfg, &i_s, &i_t)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            let out = out.clone().unwrap_or_else(|| out_dir.join("zoom.flo"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            flo::flo_write(&result.flow, &out)?;
            let conf_path = out.with_extension("confidence.png");
            dataset::write_png(&conf_path, &confidence_image(&result.confidence)?)?;
            println!("wrote {} and {}", out.display(), conf_path.display());
        }
        Cmd::Eval { pred_dir, gt_dir, out } => {
            cmd_eval(&cfg, pred_dir, gt_dir, out.clone())?;
        }
        Cmd::Viz { source, target, pixel } => {
            let params = load_params(&cfg)?;
            let i_s = dataset::read_png(source)?;
            let i_t = dataset::read_png(target)?;
            let extent = i_s.shape[0];
            let px = match pixel {
                Some(s) => parse_pixel(s, extent)?,
                None => (extent / 2, extent / 2),
            };
            let dir = out_dir.join("viz");
            let written = viz::emit(&dir, &params, &cfg.model_config()?, &i_s, &i_t, px)?;
            for name in &written {
                println!("wrote {}", dir.join(name).display());
            }
        }
        Cmd::Ablate { seeds } => {
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed {s:?}")))
                })
                .collect::<Result<_>>()?;
            let tags: Vec<&str> = ablation::DEFAULT_TAGS.to_vec();
            let variants = ablation::build_variants(&cfg, &tags)?;
            let report = ablation::run_ablation(&cfg, &variants, &seeds)?;
            ablation::write_report(out_dir, &report)?;
            print!("{}", report.markdown);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
