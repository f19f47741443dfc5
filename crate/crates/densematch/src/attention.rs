//! Feature/cost aggregation: integrative self-attention over concatenated
//! [feature ; cost] tokens with dual value streams, and cross-attention
//! whose attention map is the convolved cost volume, stacked N times.

use std::collections::HashMap;

use rand_chacha::ChaCha12Rng;

use crate::backbone::LevelPlan;
use crate::cost;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Array, Tape, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Linear,
    Softmax,
}

impl AttnKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AttnKind::Linear),
            "softmax" => Ok(AttnKind::Softmax),
            other => Err(Error::Config(format!("unknown attention kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttnKind::Linear => "linear",
            AttnKind::Softmax => "softmax",
        }
    }
}

/// Cross-attention wiring between the two images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossKind {
    /// No cross-attention layer.
    None,
    /// Plain feature cross-attention: queries/keys projected from features.
    FeatureQk,
    /// The convolved cost volume acts as the attention map (default).
    MatchingDist,
}

/// Aggregation hyperparameters (part of the model config).
///
/// The stream/wiring flags exist for the ablation variants; the default is
/// the full model (both streams, one shared attention matrix, cost-volume
/// cross-attention).
#[derive(Debug, Clone, Copy)]
pub struct AggConfig {
    pub kind: AttnKind,
    pub n_blocks: usize,
    pub heads: usize,
    pub use_posemb: bool,
    /// Features participate as tokens and are updated by self-attention.
    pub feature_stream: bool,
    /// Cost rows participate as tokens and are updated by self-attention.
    pub cost_stream: bool,
    /// One attention matrix drives both value streams. When false the
    /// feature and cost streams run separate (sequential) attentions.
    pub shared_attention: bool,
    pub cross: CrossKind,
}

impl Default for AggConfig {
    fn default() -> Self {
        AggConfig {
            kind: AttnKind::Linear,
            n_blocks: 2,
            heads: 1,
            use_posemb: true,
            feature_stream: true,
            cost_stream: true,
            shared_attention: true,
            cross: CrossKind::MatchingDist,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

fn var(vars: &HashMap<String, Value>, name: &str) -> Result<Value> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter {name:?} not on tape")))
}

/// Key/query width for a level: the projected channel count.
fn key_dim(plan: &LevelPlan, level: usize) -> usize {
    plan.levels[level].proj_channels
}

/// Fixed 2D sinusoidal positional embedding over an extent x extent grid,
/// small amplitude so unit-norm features are not drowned out.
pub fn posemb(extent: usize, channels: usize) -> Array {
    let mut data = vec![0.0; extent * extent * channels];
    for y in 0..extent {
        for x in 0..extent {
            for k in 0..channels {
                let i = k / 2;
                let p = if k % 2 == 0 { x } else { y };
                let angle =
                    std::f64::consts::PI * (p as f64 + 0.5) * (i as f64 + 1.0) / extent as f64;
                data[(y * extent + x) * channels + k] = 0.1 * angle.sin();
            }
        }
    }
    Array::new(vec![extent * extent, channels], data).expect("posemb shape")
}

fn register_linear(
    params: &mut ParameterStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let scale = (1.0 / din as f64).sqrt();
    params.register_uniform(name, &[din, dout], scale, rng)
}

/// Hidden width of the residual MLPs: the usual 2x expansion, capped so
/// the cost-token MLP stays affordable when tokens are hw-dimensional.
fn mlp_hidden(width: usize) -> usize {
    (2 * width).min(256)
}

fn register_mlp(
    params: &mut ParameterStore,
    prefix: &str,
    width: usize,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let hidden = mlp_hidden(width);
    params.register_const(&format!("{prefix}.ln.scale"), &[width], 1.0)?;
    params.register_const(&format!("{prefix}.ln.bias"), &[width], 0.0)?;
    register_linear(params, &format!("{prefix}.w1"), width, hidden, rng)?;
    params.register_const(&format!("{prefix}.b1"), &[hidden], 0.0)?;
    register_linear(params, &format!("{prefix}.w2"), hidden, width, rng)?;
    params.register_const(&format!("{prefix}.b2"), &[width], 0.0)?;
    Ok(())
}

fn register_conv3x3(
    params: &mut ParameterStore,
    name: &str,
    identity: bool,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let mut p = ParameterStore::new();
    p.register_uniform("k", &[3, 3], 0.05, rng)?;
    let mut data = p.get("k")?.value.data.clone();
    if identity {
        data[4] += 1.0;
    }
    params.register(name, Array::new(vec![3, 3], data)?)
}

/// Register aggregation parameters for all levels and blocks.
pub fn register(
    params: &mut ParameterStore,
    plan: &LevelPlan,
    cfg: &AggConfig,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    if cfg.n_blocks < 1 {
        return Err(Error::Config("attention block count must be >= 1".into()));
    }
    if !cfg.feature_stream && !cfg.cost_stream {
        return Err(Error::Config(
            "at least one of the feature/cost streams must be enabled".into(),
        ));
    }
    for (l, spec) in plan.levels.iter().enumerate() {
        let ch = spec.proj_channels;
        let hw = spec.extent * spec.extent;
        let m = ch + hw;
        let d = key_dim(plan, l);
        if cfg.heads == 0 || d % cfg.heads != 0 || ch % cfg.heads != 0 || hw % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide key dim {d}, channels {ch}, and grid size {hw}",
                cfg.heads
            )));
        }
        for b in 0..cfg.n_blocks {
            let p = format!("agg.l{l}.b{b}");
            if cfg.feature_stream && cfg.cost_stream && cfg.shared_attention {
                params.register_const(&format!("{p}.ln_attn.scale"), &[m], 1.0)?;
                params.register_const(&format!("{p}.ln_attn.bias"), &[m], 0.0)?;
                register_linear(params, &format!("{p}.pq"), m, d, rng)?;
                register_linear(params, &format!("{p}.pk"), m, d, rng)?;
            } else {
                if cfg.feature_stream {
                    params.register_const(&format!("{p}.ln_attn_f.scale"), &[ch], 1.0)?;
                    params.register_const(&format!("{p}.ln_attn_f.bias"), &[ch], 0.0)?;
                    register_linear(params, &format!("{p}.pq_f"), ch, d, rng)?;
                    register_linear(params, &format!("{p}.pk_f"), ch, d, rng)?;
                }
                if cfg.cost_stream {
                    params.register_const(&format!("{p}.ln_attn_c.scale"), &[hw], 1.0)?;
                    params.register_const(&format!("{p}.ln_attn_c.bias"), &[hw], 0.0)?;
                    register_linear(params, &format!("{p}.pq_c"), hw, d, rng)?;
                    register_linear(params, &format!("{p}.pk_c"), hw, d, rng)?;
                }
            }
            if cfg.feature_stream {
                register_linear(params, &format!("{p}.pvd"), ch, ch, rng)?;
                register_mlp(params, &format!("{p}.mlp_d"), ch, rng)?;
            }
            if cfg.cost_stream {
                register_linear(params, &format!("{p}.pvc"), hw, hw, rng)?;
                register_mlp(params, &format!("{p}.mlp_c"), hw, rng)?;
            }
            match cfg.cross {
                CrossKind::None => {}
                CrossKind::FeatureQk => {
                    register_linear(params, &format!("{p}.cross.pq"), ch, d, rng)?;
                    register_linear(params, &format!("{p}.cross.pk"), ch, d, rng)?;
                    register_linear(params, &format!("{p}.cross.pvd"), ch, ch, rng)?;
                    register_mlp(params, &format!("{p}.cross.mlp"), ch, rng)?;
                    register_conv3x3(params, &format!("{p}.fuse.ksrc"), false, rng)?;
                    register_conv3x3(params, &format!("{p}.fuse.ktgt"), false, rng)?;
                }
                CrossKind::MatchingDist => {
                    register_linear(params, &format!("{p}.cross.pvd"), ch, ch, rng)?;
                    register_conv3x3(params, &format!("{p}.cross.ksrc"), true, rng)?;
                    register_conv3x3(params, &format!("{p}.cross.ktgt"), true, rng)?;
                    register_mlp(params, &format!("{p}.cross.mlp"), ch, rng)?;
                    register_conv3x3(params, &format!("{p}.fuse.ksrc"), false, rng)?;
                    register_conv3x3(params, &format!("{p}.fuse.ktgt"), false, rng)?;
                }
            }
        }
    }
    Ok(())
}

/// Linear-kernel attention with feature map elu(x)+1, computed
/// right-to-left in O(n·d·dv): out = φq (φkᵀ v) / (φq Σφk).
pub fn linear_attention(tape: &mut Tape, q: Value, k: Value, v: Value) -> Result<Value> {
    let n = tape.shape(q)[0];
    let pq = tape.elu_plus_one(q)?;
    let pk = tape.elu_plus_one(k)?;
    let pkt = tape.transpose(pk)?;
    let kv = tape.matmul(pkt, v)?;
    let num = tape.matmul(pq, kv)?;
    let ones = tape.input(Array::new(vec![n, 1], vec![1.0; n])?)?;
    let ksum = tape.matmul(pkt, ones)?;
    let denom = tape.matmul(pq, ksum)?;
    tape.div_cols(num, denom)
}

/// Softmax attention: out = softmax(q kᵀ / √d) v.
pub fn softmax_attention(tape: &mut Tape, q: Value, k: Value, v: Value) -> Result<Value> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let a = tape.softmax_last(scaled, 1.0)?;
    tape.matmul(a, v)
}

/// Dispatch on kind with optional multi-head channel splitting.
pub fn attention(
    tape: &mut Tape,
    q: Value,
    k: Value,
    v: Value,
    kind: AttnKind,
    heads: usize,
) -> Result<Value> {
    let one = |tape: &mut Tape, q, k, v| match kind {
        AttnKind::Linear => linear_attention(tape, q, k, v),
        AttnKind::Softmax => softmax_attention(tape, q, k, v),
    };
    if heads <= 1 {
        return one(tape, q, k, v);
    }
    let (d, dv) = (tape.shape(q)[1], tape.shape(v)[1]);
    if d % heads != 0 || dv % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide key dim {d} and value dim {dv}"
        )));
    }
    let (hd, hv) = (d / heads, dv / heads);
    let mut out: Option<Value> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hv, hv)?;
        let oh = one(tape, qh, kh, vh)?;
        out = Some(match out {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh)?,
        });
    }
    Ok(out.unwrap())
}

/// Residual pre-norm MLP: x + W2·silu(W1·LN(x) + b1) + b2.
fn mlp_residual(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    prefix: &str,
    x: Value,
) -> Result<Value> {
    let scale = var(vars, &format!("{prefix}.ln.scale"))?;
    let bias = var(vars, &format!("{prefix}.ln.bias"))?;
    let xn = tape.layer_norm(x, scale, bias, 1e-5)?;
    let w1 = var(vars, &format!("{prefix}.w1"))?;
    let b1 = var(vars, &format!("{prefix}.b1"))?;
    let h = tape.matmul(xn, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h)?;
    let w2 = var(vars, &format!("{prefix}.w2"))?;
    let b2 = var(vars, &format!("{prefix}.b2"))?;
    let o = tape.matmul(h, w2)?;
    let o = tape.add_row(o, b2)?;
    tape.add(x, o)
}

/// Tokens for one side: row i is [D(i) + posemb(i) ; C-row(i)].
/// The source side uses cost rows C(i,·); the target side uses columns.
pub fn make_tokens(
    tape: &mut Tape,
    d: Value,
    c_vol: Value,
    side: Side,
    use_posemb: bool,
) -> Result<Value> {
    let sh = tape.shape(d).to_vec();
    let (e, ch) = (sh[0], sh[2]);
    let csh = tape.shape(c_vol).to_vec();
    if csh != [e, e, e, e] {
        return Err(Error::Contract(format!(
            "token build: feature map extent {e} does not match cost volume {csh:?}"
        )));
    }
    let hw = e * e;
    let flat = tape.reshape(d, vec![hw, ch])?;
    let feat = if use_posemb {
        let pe = tape.input(posemb(e, ch))?;
        tape.add(flat, pe)?
    } else {
        flat
    };
    let cmat = tape.reshape(c_vol, vec![hw, hw])?;
    let crows = match side {
        Side::Source => cmat,
        Side::Target => tape.transpose(cmat)?,
    };
    tape.concat_cols(feat, crows)
}

/// One side of integrative self-attention. Returns the updated feature map
/// and the updated cost volume (canonical source-major orientation).
fn self_attention_side(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    prefix: &str,
    cfg: &AggConfig,
    d: Value,
    c_vol: Value,
    side: Side,
) -> Result<(Value, Value)> {
    let sh = tape.shape(d).to_vec();
    let (e, ch) = (sh[0], sh[2]);
    let hw = e * e;
    let d_flat = tape.reshape(d, vec![hw, ch])?;
    let cmat = tape.reshape(c_vol, vec![hw, hw])?;
    let crows = match side {
        Side::Source => cmat,
        Side::Target => tape.transpose(cmat)?,
    };

    let (od, oc) = if cfg.feature_stream && cfg.cost_stream && cfg.shared_attention {
        let tok = make_tokens(tape, d, c_vol, side, cfg.use_posemb)?;
        let ln_s = var(vars, &format!("{prefix}.ln_attn.scale"))?;
        let ln_b = var(vars, &format!("{prefix}.ln_attn.bias"))?;
        let tn = tape.layer_norm(tok, ln_s, ln_b, 1e-5)?;
        let pq = var(vars, &format!("{prefix}.pq"))?;
        let pk = var(vars, &format!("{prefix}.pk"))?;
        let q = tape.matmul(tn, pq)?;
        let k = tape.matmul(tn, pk)?;
        let feat_n = tape.slice_cols(tn, 0, ch)?;
        let cost_n = tape.slice_cols(tn, ch, hw)?;
        let pvd = var(vars, &format!("{prefix}.pvd"))?;
        let pvc = var(vars, &format!("{prefix}.pvc"))?;
        let vd = tape.matmul(feat_n, pvd)?;
        let vc = tape.matmul(cost_n, pvc)?;
        // one attention weighting, two value streams
        let od = attention(tape, q, k, vd, cfg.kind, cfg.heads)?;
        let oc = attention(tape, q, k, vc, cfg.kind, cfg.heads)?;
        (Some(od), Some(oc))
    } else {
        let od = if cfg.feature_stream {
            let feat = if cfg.use_posemb {
                let pe = tape.input(posemb(e, ch))?;
                tape.add(d_flat, pe)?
            } else {
                d_flat
            };
            let ln_s = var(vars, &format!("{prefix}.ln_attn_f.scale"))?;
            let ln_b = var(vars, &format!("{prefix}.ln_attn_f.bias"))?;
            let tn = tape.layer_norm(feat, ln_s, ln_b, 1e-5)?;
            let pq = var(vars, &format!("{prefix}.pq_f"))?;
            let pk = var(vars, &format!("{prefix}.pk_f"))?;
            let q = tape.matmul(tn, pq)?;
            let k = tape.matmul(tn, pk)?;
            let pvd = var(vars, &format!("{prefix}.pvd"))?;
            let vd = tape.matmul(tn, pvd)?;
            Some(attention(tape, q, k, vd, cfg.kind, cfg.heads)?)
        } else {
            None
        };
        let oc = if cfg.cost_stream {
            let ln_s = var(vars, &format!("{prefix}.ln_attn_c.scale"))?;
            let ln_b = var(vars, &format!("{prefix}.ln_attn_c.bias"))?;
            let tn = tape.layer_norm(crows, ln_s, ln_b, 1e-5)?;
            let pq = var(vars, &format!("{prefix}.pq_c"))?;
            let pk = var(vars, &format!("{prefix}.pk_c"))?;
            let q = tape.matmul(tn, pq)?;
            let k = tape.matmul(tn, pk)?;
            let pvc = var(vars, &format!("{prefix}.pvc"))?;
            let vc = tape.matmul(tn, pvc)?;
            Some(attention(tape, q, k, vc, cfg.kind, cfg.heads)?)
        } else {
            None
        };
        (od, oc)
    };

    let d_out = match od {
        Some(od) => {
            let d1 = tape.add(d_flat, od)?;
            let d2 = mlp_residual(tape, vars, &format!("{prefix}.mlp_d"), d1)?;
            tape.reshape(d2, vec![e, e, ch])?
        }
        None => d,
    };
    let c_out = match oc {
        Some(oc) => {
            let c1 = tape.add(crows, oc)?;
            let c2 = mlp_residual(tape, vars, &format!("{prefix}.mlp_c"), c1)?;
            let c_canon = match side {
                Side::Source => c2,
                Side::Target => tape.transpose(c2)?,
            };
            tape.reshape(c_canon, vec![e, e, e, e])?
        }
        None => c_vol,
    };
    Ok((d_out, c_out))
}

/// Integrative self-attention over both sides, applied sequentially
/// source-then-target with shared parameters; the target side sees the
/// source-aggregated cost.
pub fn integrative_self_attention(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    prefix: &str,
    cfg: &AggConfig,
    d_s: Value,
    d_t: Value,
    c_vol: Value,
) -> Result<(Value, Value, Value)> {
    let (d_s1, c1) = self_attention_side(tape, vars, prefix, cfg, d_s, c_vol, Side::Source)?;
    let (d_t1, c2) = self_attention_side(tape, vars, prefix, cfg, d_t, c1, Side::Target)?;
    Ok((d_s1, d_t1, c2))
}

/// Cross-attention between the two images. With [`CrossKind::MatchingDist`]
/// the convolved cost volume acts as the attention map: each side's features
/// aggregate the other side's values under a per-pixel softmax over the cost.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    prefix: &str,
    plan: &LevelPlan,
    level: usize,
    kind: CrossKind,
    d_s: Value,
    d_t: Value,
    c_vol: Value,
) -> Result<(Value, Value)> {
    let sh = tape.shape(d_s).to_vec();
    let (e, ch) = (sh[0], sh[2]);
    let hw = e * e;
    let pvd = var(vars, &format!("{prefix}.cross.pvd"))?;
    let ds_flat = tape.reshape(d_s, vec![hw, ch])?;
    let dt_flat = tape.reshape(d_t, vec![hw, ch])?;
    let vs = tape.matmul(ds_flat, pvd)?;
    let vt = tape.matmul(dt_flat, pvd)?;

    let (os, ot) = match kind {
        CrossKind::None => {
            return Err(Error::Contract(
                "cross_attention called with cross wiring disabled".into(),
            ))
        }
        CrossKind::FeatureQk => {
            let pq = var(vars, &format!("{prefix}.cross.pq"))?;
            let pk = var(vars, &format!("{prefix}.cross.pk"))?;
            let qs = tape.matmul(ds_flat, pq)?;
            let ks = tape.matmul(ds_flat, pk)?;
            let qt = tape.matmul(dt_flat, pq)?;
            let kt = tape.matmul(dt_flat, pk)?;
            let os = softmax_attention(tape, qs, kt, vt)?;
            let ot = softmax_attention(tape, qt, ks, vs)?;
            (os, ot)
        }
        CrossKind::MatchingDist => {
            let ksrc = var(vars, &format!("{prefix}.cross.ksrc"))?;
            let ktgt = var(vars, &format!("{prefix}.cross.ktgt"))?;
            let m = cost::conv4d_separable(tape, c_vol, ksrc, ktgt)?;
            let mmat = tape.reshape(m, vec![hw, hw])?;
            let dk = key_dim(plan, level) as f64;
            let scaled = tape.scale(mmat, 1.0 / dk.sqrt())?;
            // source row i attends over target pixels j
            let w_s = tape.softmax_last(scaled, 1.0)?;
            let os = tape.matmul(w_s, vt)?;
            // target row j attends over source pixels i
            let scaled_t = tape.transpose(scaled)?;
            let w_t = tape.softmax_last(scaled_t, 1.0)?;
            let ot = tape.matmul(w_t, vs)?;
            (os, ot)
        }
    };

    let ds1 = tape.add(ds_flat, os)?;
    let dt1 = tape.add(dt_flat, ot)?;
    let ds2 = mlp_residual(tape, vars, &format!("{prefix}.cross.mlp"), ds1)?;
    let dt2 = mlp_residual(tape, vars, &format!("{prefix}.cross.mlp"), dt1)?;
    let ds_out = tape.reshape(ds2, vec![e, e, ch])?;
    let dt_out = tape.reshape(dt2, vec![e, e, ch])?;
    Ok((ds_out, dt_out))
}

/// N interleaved blocks: self-attention (both sides), cross-attention,
/// then the cost volume is rebuilt from the refreshed features and fused
/// with a residual 4D convolution.
pub fn attention_block(
    tape: &mut Tape,
    vars: &HashMap<String, Value>,
    plan: &LevelPlan,
    level: usize,
    cfg: &AggConfig,
    d_s: Value,
    d_t: Value,
    c_vol: Value,
) -> Result<(Value, Value, Value)> {
    if cfg.n_blocks < 1 {
        return Err(Error::Config("attention block count must be >= 1".into()));
    }
    let (mut ds, mut dt, mut c) = (d_s, d_t, c_vol);
    for b in 0..cfg.n_blocks {
        let prefix = format!("agg.l{level}.b{b}");
        let (ds1, dt1, c1) = integrative_self_attention(tape, vars, &prefix, cfg, ds, dt, c)?;
        if cfg.cross == CrossKind::None {
            ds = ds1;
            dt = dt1;
            // a variant with no cross layer and no cost stream still has to
            // surface its refreshed features in the cost volume
            c = if cfg.cost_stream {
                c1
            } else {
                cost::build(tape, ds1, dt1)?
            };
            continue;
        }
        let (ds2, dt2) =
            cross_attention(tape, vars, &prefix, plan, level, cfg.cross, ds1, dt1, c1)?;
        let rebuilt = cost::build(tape, ds2, dt2)?;
        let fks = var(vars, &format!("{prefix}.fuse.ksrc"))?;
        let fkt = var(vars, &format!("{prefix}.fuse.ktgt"))?;
        let fused = cost::conv4d_separable(tape, rebuilt, fks, fkt)?;
        let c2 = tape.add(c1, fused)?;
        ds = ds2;
        dt = dt2;
        c = c2;
    }
    Ok((ds, dt, c))
}
