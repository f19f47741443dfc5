//! Toy training loop: EPE-loss minimization with AdamW over a synthetic
//! dataset, per-epoch validation AEPE, best-by-validation checkpointing,
//! and deterministic resume.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{self, PairRecord};
use crate::error::{Error, Result};
use crate::eval::aepe;
use crate::model::{self, ModelConfig};
use crate::optim::AdamW;
use crate::params::ParameterStore;
use crate::tensor::{Array, Tape};

const CKPT_MAGIC: &[u8; 4] = b"DMCK";
const CKPT_VERSION: u32 = 1;

/// Everything needed to restart training exactly where it stopped.
pub struct Checkpoint {
    pub params: ParameterStore,
    pub step_count: u64,
    pub moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    /// Next epoch to run (epochs completed so far).
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_u64(&mut buf, ck.epoch as u64);
    put_f64s(&mut buf, &[ck.best_val]);
    put_u64(&mut buf, ck.best_epoch as u64);
    put_u64(&mut buf, ck.step_count);
    put_u64(&mut buf, ck.params.len() as u64);
    for name in ck.params.names() {
        let p = ck.params.get(name)?;
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, p.value.shape.len() as u32);
        for &d in &p.value.shape {
            put_u64(&mut buf, d as u64);
        }
        put_f64s(&mut buf, &p.value.data);
        match ck.moments.get(name) {
            Some((m, v)) => {
                buf.push(1);
                put_f64s(&mut buf, m);
                put_f64s(&mut buf, v);
            }
            None => buf.push(0),
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                msg: "truncated checkpoint".into(),
                offset: self.pos as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format {
            msg: "not a checkpoint file".into(),
            offset: 0,
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            msg: format!("unsupported checkpoint version {version}"),
            offset: 4,
        });
    }
    let epoch = r.u64()? as usize;
    let best_val = r.f64s(1)?[0];
    let best_epoch = r.u64()? as usize;
    let step_count = r.u64()?;
    let n_params = r.u64()? as usize;
    let mut params = ParameterStore::new();
    let mut moments = HashMap::new();
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            msg: "bad parameter name".into(),
            offset: r.pos as u64,
        })?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        params.register(&name, Array::new(shape, data)?)?;
        if r.take(1)?[0] == 1 {
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            moments.insert(name, (m, v));
        }
    }
    Ok(Checkpoint {
        params,
        step_count,
        moments,
        epoch,
        best_val,
        best_epoch,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the pre-training row.
    pub train_loss: Option<f64>,
    pub val_aepe: f64,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub initial_val: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

fn validation_aepe(
    params: &ParameterStore,
    mcfg: &ModelConfig,
    dir: &Path,
    recs: &[PairRecord],
) -> Result<f64> {
    if recs.is_empty() {
        return Err(Error::Eval("no validation pairs".into()));
    }
    let mut total = 0.0;
    for rec in recs {
        let (i_s, i_t, gt) = dataset::load_pair(dir, rec)?;
        let mut tape = Tape::inference();
        let vars = params.inject_all(&mut tape)?;
        let out = model::forward(&mut tape, &vars, mcfg, &i_s, &i_t)?;
        let pred = model::flow_field(&tape, out.flow)?;
        total += aepe(&pred, &gt)?;
    }
    Ok(total / recs.len() as f64)
}

/// Run (or resume) training as described by the config. The dataset must
/// already exist under `cfg.data_dir`.
pub fn train(cfg: &Config) -> Result<TrainOutcome> {
    let data_dir = Path::new(&cfg.data_dir);
    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir)?;
    let mcfg = cfg.model_config()?;

    let all = dataset::load_manifest(data_dir)?;
    if all.len() < cfg.count + cfg.val_count {
        return Err(Error::Config(format!(
            "dataset has {} pairs, config wants {} train + {} val",
            all.len(),
            cfg.count,
            cfg.val_count
        )));
    }
    let train_recs = &all[..cfg.count];
    let val_recs = &all[cfg.count..cfg.count + cfg.val_count];

    let mut opt = AdamW::new(cfg.adamw_config());
    let (mut params, start_epoch, mut best_val, mut best_epoch) = if !cfg.checkpoint.is_empty()
    {
        let ck = load_checkpoint(Path::new(&cfg.checkpoint))?;
        opt.step_count = ck.step_count;
        opt.moments = ck.moments;
        (ck.params, ck.epoch, ck.best_val, ck.best_epoch)
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut p = ParameterStore::new();
        model::register(&mut p, &mcfg, &mut rng)?;
        (p, 0, f64::INFINITY, 0)
    };

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut records = Vec::new();

    let initial_val = validation_aepe(&params, &mcfg, data_dir, val_recs)?;
    if start_epoch == 0 {
        best_val = initial_val;
        best_epoch = 0;
        save_checkpoint(
            &best_path,
            &Checkpoint {
                params: params.clone(),
                step_count: opt.step_count,
                moments: opt.moments.clone(),
                epoch: 0,
                best_val,
                best_epoch,
            },
        )?;
    }
    records.push(EpochRecord {
        epoch: start_epoch,
        train_loss: None,
        val_aepe: initial_val,
    });

    for epoch in start_epoch..cfg.epochs {
        // deterministic per-epoch shuffle, stable across resume
        let mut order: Vec<usize> = (0..train_recs.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_add(1));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }

        let mut loss_sum = 0.0;
        for &idx in &order {
            let (i_s, i_t, gt) = dataset::load_pair(data_dir, &train_recs[idx])?;
            let mut tape = Tape::new();
            let vars = params.inject_all(&mut tape)?;
            let out = model::forward(&mut tape, &vars, &mcfg, &i_s, &i_t)?;
            let loss = model::epe_loss(&mut tape, out.flow, &gt)?;
            loss_sum += tape.data(loss)[0];
            let grads = tape.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&vars, &tape, &grads)?;
            params.fill_missing_grads();
            opt.step(&mut params)?;
        }
        let train_loss = loss_sum / order.len().max(1) as f64;

        let val = validation_aepe(&params, &mcfg, data_dir, val_recs)?;
        let finished = epoch + 1;
        if val < best_val {
            best_val = val;
            best_epoch = finished;
            save_checkpoint(
                &best_path,
                &Checkpoint {
                    params: params.clone(),
                    step_count: opt.step_count,
                    moments: opt.moments.clone(),
                    epoch: finished,
                    best_val,
                    best_epoch,
                },
            )?;
        }
        save_checkpoint(
            &last_path,
            &Checkpoint {
                params: params.clone(),
                step_count: opt.step_count,
                moments: opt.moments.clone(),
                epoch: finished,
                best_val,
                best_epoch,
            },
        )?;
        records.push(EpochRecord {
            epoch: finished,
            train_loss: Some(train_loss),
            val_aepe: val,
        });
    }

    let log: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    fs::write(out_dir.join("train_log.jsonl"), log)?;

    Ok(TrainOutcome {
        records,
        initial_val,
        best_val,
        best_epoch,
        best_path,
        last_path,
    })
}
