//! Visualization emitters: joint PCA of per-pixel descriptors rendered as
//! RGB, and grayscale cost-volume slices.

use std::collections::HashMap;
use std::path::Path;

use crate::attention;
use crate::cost;
use crate::dataset::write_png;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Array, Tape, Value};

/// Top-k principal directions of a set of row vectors, by power iteration
/// with deflation. Returns (mean, components[k][c]).
fn principal_components(rows: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let c = rows[0].len();
    let mut mean = vec![0.0; c];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();
    // covariance, then deflated power iteration
    let mut cov = vec![0.0; c * c];
    for r in &centered {
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut comps = Vec::with_capacity(k);
    for pc in 0..k.min(c) {
        let mut v: Vec<f64> = (0..c)
            .map(|i| if i == pc % c { 1.0 } else { 0.1 })
            .collect();
        for _ in 0..100 {
            let mut w = vec![0.0; c];
            for i in 0..c {
                for j in 0..c {
                    w[i] += cov[i * c + j] * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                break; // zero variance left
            }
            for x in &mut w {
                *x /= norm;
            }
            v = w;
        }
        // deflate: cov -= lambda v v^T
        let mut cv = vec![0.0; c];
        for i in 0..c {
            for j in 0..c {
                cv[i] += cov[i * c + j] * v[j];
            }
        }
        let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] -= lambda * v[i] * v[j];
            }
        }
        comps.push(v);
    }
    (mean, comps)
}

/// Jointly fit a 3-component PCA over the per-pixel descriptors of both
/// feature maps and render each as an RGB image in [0,1]. Zero-variance
/// channels render as flat 0.5 gray.
pub fn pca_rgb(feat_a: &Array, feat_b: &Array) -> Result<(Array, Array)> {
    for f in [feat_a, feat_b] {
        if f.shape.len() != 3 {
            return Err(Error::Contract(format!(
                "pca_rgb needs [h,w,c] features, got {:?}",
                f.shape
            )));
        }
    }
    if feat_a.shape[2] != feat_b.shape[2] {
        return Err(Error::Contract("feature channel mismatch".into()));
    }
    let c = feat_a.shape[2];
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for f in [feat_a, feat_b] {
        for px in f.data.chunks_exact(c) {
            rows.push(px.to_vec());
        }
    }
    let (mean, comps) = principal_components(&rows, 3);

    // project everything, then normalize each component over both images
    let project = |f: &Array| -> Vec<f64> {
        let mut out = Vec::with_capacity(f.data.len() / c * comps.len());
        for px in f.data.chunks_exact(c) {
            for comp in &comps {
                let mut s = 0.0;
                for i in 0..c {
                    s += (px[i] - mean[i]) * comp[i];
                }
                out.push(s);
            }
        }
        out
    };
    let pa = project(feat_a);
    let pb = project(feat_b);
    let n_comp = comps.len();
    let mut lo = vec![f64::INFINITY; 3];
    let mut hi = vec![f64::NEG_INFINITY; 3];
    for chunk in pa.chunks_exact(n_comp).chain(pb.chunks_exact(n_comp)) {
        for (i, &v) in chunk.iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    let to_rgb = |proj: &[f64], shape: &[usize]| -> Array {
        let hw = shape[0] * shape[1];
        let mut data = vec![0.5; hw * 3];
        for p in 0..hw {
            for i in 0..n_comp {
                let range = hi[i] - lo[i];
                if range > 1e-12 {
                    data[p * 3 + i] = (proj[p * n_comp + i] - lo[i]) / range;
                }
            }
        }
        Array::new(vec![shape[0], shape[1], 3], data).expect("rgb shape")
    };
    Ok((to_rgb(&pa, &feat_a.shape), to_rgb(&pb, &feat_b.shape)))
}

/// Render a source-plane cost slice for one target pixel as a grayscale
/// RGB image normalized to [0,1]; a flat slice renders mid-gray.
pub fn cost_slice_image(slice: &Array) -> Result<Array> {
    if slice.shape.len() != 2 {
        return Err(Error::Contract(format!(
            "cost slice must be 2-D, got {:?}",
            slice.shape
        )));
    }
    let lo = slice.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let (h, w) = (slice.shape[0], slice.shape[1]);
    let mut data = vec![0.5; h * w * 3];
    if range > 1e-12 {
        for (p, &v) in slice.data.iter().enumerate() {
            let g = (v - lo) / range;
            data[p * 3] = g;
            data[p * 3 + 1] = g;
            data[p * 3 + 2] = g;
        }
    }
    Array::new(vec![h, w, 3], data)
}

/// Everything `viz` writes for one pair: per level, PCA images of the raw,
/// self-attended and fully aggregated features of both sides, plus a cost
/// slice at the requested target pixel for each stage.
pub fn emit(
    dir: &Path,
    params: &ParameterStore,
    cfg: &ModelConfig,
    img_s: &Array,
    img_t: &Array,
    target_px: (usize, usize),
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut tape = Tape::inference();
    let vars: HashMap<String, Value> = params.inject_all(&mut tape)?;
    let out = model::forward(&mut tape, &vars, cfg, img_s, img_t)?;

    // recompute the raw features and a self-attention-only pass for the
    // intermediate stage
    let e_in = cfg.plan.input_extent;
    let mut s = tape.input(img_s.clone())?;
    let mut t = tape.input(img_t.clone())?;
    if img_s.shape[0] != e_in {
        s = tape.bilinear_resize(s, e_in, e_in)?;
        t = tape.bilinear_resize(t, e_in, e_in)?;
    }
    let raw_s = crate::backbone::features(&mut tape, &vars, &cfg.plan, s)?;
    let raw_t = crate::backbone::features(&mut tape, &vars, &cfg.plan, t)?;

    let mut written = Vec::new();
    let mut save = |name: String, img: &Array| -> Result<()> {
        let path = dir.join(&name);
        write_png(&path, img)?;
        written.push(name);
        Ok(())
    };

    for l in 0..cfg.plan.levels.len() {
        let spec = cfg.plan.levels[l];
        let c0 = cost::build(&mut tape, raw_s[l], raw_t[l])?;
        let (self_s, self_t, _c_self) = attention::integrative_self_attention(
            &mut tape,
            &vars,
            &format!("agg.l{l}.b0"),
            &cfg.agg,
            raw_s[l],
            raw_t[l],
            c0,
        )?;
        let (agg_s, agg_t, agg_c) = out.per_level[l];

        let host = |tape: &Tape, v: Value| -> Array {
            Array::new(tape.shape(v).to_vec(), tape.data(v).to_vec()).expect("host copy")
        };
        let stages = [
            ("raw", host(&tape, raw_s[l]), host(&tape, raw_t[l])),
            ("self", host(&tape, self_s), host(&tape, self_t)),
            ("agg", host(&tape, agg_s), host(&tape, agg_t)),
        ];
        for (stage, fa, fb) in &stages {
            let (ia, ib) = pca_rgb(fa, fb)?;
            save(format!("l{l}_{stage}_pca_s.png"), &ia)?;
            save(format!("l{l}_{stage}_pca_t.png"), &ib)?;
        }

        // cost slices at the scaled target pixel, raw and aggregated
        let scale = spec.extent as f64 / img_s.shape[0] as f64;
        let jx = ((target_px.0 as f64 * scale) as usize).min(spec.extent - 1);
        let jy = ((target_px.1 as f64 * scale) as usize).min(spec.extent - 1);
        for (stage, c) in [("raw", c0), ("agg", agg_c)] {
            let sl = cost::slice(&tape, c, (jy, jx))?;
            save(
                format!("l{l}_{stage}_cost_j{jx}x{jy}.png"),
                &cost_slice_image(&sl)?,
            )?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AggConfig;
    use crate::backbone::LevelPlan;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn constant_features_render_single_color() {
        let a = Array::new(vec![3, 3, 4], vec![0.7; 36]).unwrap();
        let b = Array::new(vec![3, 3, 4], vec![0.7; 36]).unwrap();
        let (ia, ib) = pca_rgb(&a, &b).unwrap();
        assert!(ia.data.iter().all(|&v| v == 0.5));
        assert!(ib.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pca_is_deterministic_and_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut mk = || {
            Array::new(
                vec![4, 4, 6],
                (0..96).map(|_| rng.random::<f64>()).collect(),
            )
            .unwrap()
        };
        let a = mk();
        let b = mk();
        let (i1, _) = pca_rgb(&a, &b).unwrap();
        let (i2, _) = pca_rgb(&a, &b).unwrap();
        assert!(i1.data.iter().zip(&i2.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(i1.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identity_cost_slice_renders_one_hot() {
        // identity cost: C(i,j) = 1 iff i == j
        let e = 3;
        let hw = e * e;
        let mut c = vec![0.0; hw * hw];
        for i in 0..hw {
            c[i * hw + i] = 1.0;
        }
        let mut tape = Tape::inference();
        let v = tape
            .input(Array::new(vec![e, e, e, e], c).unwrap())
            .unwrap();
        let sl = cost::slice(&tape, v, (1, 2)).unwrap(); // (jy, jx)
        let img = cost_slice_image(&sl).unwrap();
        for y in 0..e {
            for x in 0..e {
                let want = if (y, x) == (1, 2) { 1.0 } else { 0.0 };
                assert_eq!(img.data[(y * e + x) * 3], want);
            }
        }
    }

    #[test]
    fn emit_writes_deterministic_files() {
        let cfg = ModelConfig {
            plan: LevelPlan::tiny(),
            agg: AggConfig {
                n_blocks: 1,
                ..AggConfig::default()
            },
            ..ModelConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut params = ParameterStore::new();
        model::register(&mut params, &cfg, &mut rng).unwrap();
        let img_s = crate::synth::base_texture(8, 2);
        let img_t = crate::synth::base_texture(8, 3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let w1 = emit(d1.path(), &params, &cfg, &img_s, &img_t, (4, 4)).unwrap();
        let w2 = emit(d2.path(), &params, &cfg, &img_s, &img_t, (4, 4)).unwrap();
        assert_eq!(w1, w2);
        assert!(!w1.is_empty());
        for name in &w1 {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
}
