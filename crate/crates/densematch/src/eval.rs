//! Matching metrics: average endpoint error, keypoint transfer through a
//! dense flow, and percentage of correct keypoints.

use crate::error::{Error, Result};
use crate::flow::FlowField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub id: Option<usize>,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, id: None }
    }
}

/// A transferred keypoint; unmatched points carry the best grid guess but
/// are flagged.
#[derive(Debug, Clone, Copy)]
pub struct Transferred {
    pub point: Keypoint,
    pub matched: bool,
}

/// PCK thresholds reported by the evaluation records.
pub const PCK_ALPHAS: [f64; 5] = [0.01, 0.03, 0.05, 0.1, 0.15];

/// Mean Euclidean distance between two flows over the intersection of
/// their valid masks.
pub fn aepe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Contract(format!(
            "aepe: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..pred.valid.len() {
        if pred.valid[i] && gt.valid[i] {
            let dx = pred.data[i * 2] - gt.data[i * 2];
            let dy = pred.data[i * 2 + 1] - gt.data[i * 2 + 1];
            total += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval("aepe: no jointly valid pixels".into()));
    }
    Ok(total / n as f64)
}

/// Follow the flow from a continuous target position to its source point.
fn flow_target_to_source(f: &FlowField, x: f64, y: f64) -> Option<(f64, f64)> {
    f.sample(x, y).map(|(dx, dy)| (x + dx, y + dy))
}

/// Transfer source keypoints to the target image through a backward
/// (target→source) flow: the predicted target point is the position whose
/// flow maps onto the source keypoint. Grid argmin plus local refinement;
/// points farther than 2 px from any grid solution are flagged unmatched.
pub fn transfer_keypoints(f: &FlowField, kps: &[Keypoint]) -> Vec<Transferred> {
    const UNMATCHED_DIST: f64 = 2.0;
    kps.iter()
        .map(|kp| {
            // coarse grid argmin of ‖(j + F(j)) − p‖
            let mut best = (f64::INFINITY, 0.0f64, 0.0f64);
            for y in 0..f.height {
                for x in 0..f.width {
                    if !f.is_valid(x, y) {
                        continue;
                    }
                    let (dx, dy) = f.get(x, y);
                    let ex = x as f64 + dx - kp.x;
                    let ey = y as f64 + dy - kp.y;
                    let d = (ex * ex + ey * ey).sqrt();
                    if d < best.0 {
                        best = (d, x as f64, y as f64);
                    }
                }
            }
            // local refinement: Gauss-Newton on g(j) = j + F(j) with a
            // finite-difference Jacobian from the bilinear flow
            let (mut tx, mut ty) = (best.1, best.2);
            let mut dist = best.0;
            if dist.is_finite() {
                for _ in 0..10 {
                    let Some((sx, sy)) = flow_target_to_source(f, tx, ty) else {
                        break;
                    };
                    let (rx, ry) = (sx - kp.x, sy - kp.y);
                    let h = 0.25;
                    let gx = flow_target_to_source(f, (tx + h).min((f.width - 1) as f64), ty);
                    let gxm = flow_target_to_source(f, (tx - h).max(0.0), ty);
                    let gy = flow_target_to_source(f, tx, (ty + h).min((f.height - 1) as f64));
                    let gym = flow_target_to_source(f, tx, (ty - h).max(0.0));
                    let (Some(gx), Some(gxm), Some(gy), Some(gym)) = (gx, gxm, gy, gym) else {
                        break;
                    };
                    let j00 = (gx.0 - gxm.0) / (2.0 * h);
                    let j10 = (gx.1 - gxm.1) / (2.0 * h);
                    let j01 = (gy.0 - gym.0) / (2.0 * h);
                    let j11 = (gy.1 - gym.1) / (2.0 * h);
                    let det = j00 * j11 - j01 * j10;
                    if det.abs() < 1e-9 {
                        break;
                    }
                    let ux = (j11 * rx - j01 * ry) / det;
                    let uy = (-j10 * rx + j00 * ry) / det;
                    let nx = (tx - ux).clamp(0.0, (f.width - 1) as f64);
                    let ny = (ty - uy).clamp(0.0, (f.height - 1) as f64);
                    let nd = match flow_target_to_source(f, nx, ny) {
                        Some((qx, qy)) => ((qx - kp.x).powi(2) + (qy - kp.y).powi(2)).sqrt(),
                        None => break,
                    };
                    if nd < dist {
                        tx = nx;
                        ty = ny;
                        dist = nd;
                    } else {
                        break;
                    }
                }
            }
            Transferred {
                point: Keypoint {
                    x: tx,
                    y: ty,
                    id: kp.id,
                },
                matched: dist <= UNMATCHED_DIST,
            }
        })
        .collect()
}

/// Fraction of keypoint pairs with distance ≤ alpha · max(h_ref, w_ref);
/// the boundary counts as correct.
pub fn pck(
    pred: &[Keypoint],
    gt: &[Keypoint],
    alpha: f64,
    h_ref: usize,
    w_ref: usize,
) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Eval(format!(
            "pck needs matched non-empty lists, got {}/{}",
            pred.len(),
            gt.len()
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::Domain(format!("pck alpha must be > 0, got {alpha}")));
    }
    let thresh = alpha * h_ref.max(w_ref) as f64;
    let correct = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
            d <= thresh
        })
        .count();
    Ok(correct as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_warp, warp_to_flow, WarpKind};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_flow(h: usize, w: usize, seed: u64) -> FlowField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut f = FlowField::zeros(h, w);
        for v in &mut f.data {
            *v = rng.random::<f64>() * 6.0 - 3.0;
        }
        for v in &mut f.valid {
            *v = rng.random::<f64>() > 0.25;
        }
        f
    }

    #[test]
    fn aepe_trivial_cases() {
        let f = rand_flow(5, 4, 1);
        assert_eq!(aepe(&f, &f).unwrap(), 0.0);

        let mut g = f.clone();
        for i in 0..g.data.len() / 2 {
            g.data[i * 2] += 3.0;
            g.data[i * 2 + 1] += 4.0;
        }
        assert!((aepe(&f, &g).unwrap() - 5.0).abs() < 1e-12);
        // sign-flip symmetry
        assert_eq!(aepe(&f, &g).unwrap(), aepe(&g, &f).unwrap());

        let empty = FlowField {
            valid: vec![false; 20],
            ..FlowField::zeros(5, 4)
        };
        assert!(matches!(aepe(&f, &empty), Err(Error::Eval(_))));
    }

    #[test]
    fn aepe_matches_masked_loop_oracle() {
        for seed in 0..10u64 {
            let a = rand_flow(7, 6, seed);
            let b = rand_flow(7, 6, seed + 100);
            let mut total = 0.0;
            let mut n = 0;
            for y in 0..7 {
                for x in 0..6 {
                    if a.is_valid(x, y) && b.is_valid(x, y) {
                        let (ax, ay) = a.get(x, y);
                        let (bx, by) = b.get(x, y);
                        total += ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                        n += 1;
                    }
                }
            }
            let want = total / n as f64;
            assert!((aepe(&a, &b).unwrap() - want).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn zero_flow_transfers_keypoints_unchanged() {
        let f = FlowField::zeros(16, 16);
        let kps = vec![Keypoint::new(3.0, 4.0), Keypoint::new(10.5, 7.25)];
        let out = transfer_keypoints(&f, &kps);
        for (t, kp) in out.iter().zip(&kps) {
            assert!(t.matched);
            assert!((t.point.x - kp.x).abs() < 1e-6 && (t.point.y - kp.y).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_flow_shifts_keypoints_by_its_negation() {
        let (h, w) = (20, 20);
        let mut f = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                f.set(x, y, 2.0, -1.5);
            }
        }
        let kps = vec![Keypoint::new(8.0, 9.0), Keypoint::new(5.25, 12.0)];
        let out = transfer_keypoints(&f, &kps);
        for (t, kp) in out.iter().zip(&kps) {
            assert!(t.matched);
            assert!((t.point.x - (kp.x - 2.0)).abs() < 1e-3, "{:?}", t.point);
            assert!((t.point.y - (kp.y + 1.5)).abs() < 1e-3, "{:?}", t.point);
        }
    }

    #[test]
    fn affine_flow_transfer_matches_the_forward_map() {
        for seed in 0..5u64 {
            let spec = sample_warp(WarpKind::Affine, seed, 0.4).unwrap();
            let (h, w) = (32, 32);
            let f = warp_to_flow(&spec, h, w).unwrap();
            let kps = vec![
                Keypoint::new(10.0, 12.0),
                Keypoint::new(16.5, 15.0),
                Keypoint::new(20.0, 18.5),
            ];
            let out = transfer_keypoints(&f, &kps);
            for (t, kp) in out.iter().zip(&kps) {
                // the true target point is the forward warp of the source
                let p = (kp.x / (w - 1) as f64, kp.y / (h - 1) as f64);
                let q = crate::synth::apply_warp(&spec, p);
                let (wx, wy) = (q.0 * (w - 1) as f64, q.1 * (h - 1) as f64);
                if !t.matched {
                    continue; // keypoint mapped outside the valid area
                }
                let d = ((t.point.x - wx).powi(2) + (t.point.y - wy).powi(2)).sqrt();
                assert!(d < 0.5, "seed {seed}: {d}");
            }
            assert!(out.iter().any(|t| t.matched), "seed {seed}");
        }
    }

    #[test]
    fn pck_trivial_and_boundary_cases() {
        let gt: Vec<Keypoint> = (0..6).map(|i| Keypoint::new(i as f64 * 3.0, 2.0)).collect();
        assert_eq!(pck(&gt, &gt, 0.05, 100, 50).unwrap(), 1.0);

        // one keypoint exactly at threshold distance counts as correct
        let thresh = 0.1 * 100.0;
        let pred = vec![Keypoint::new(thresh, 0.0)];
        let gt1 = vec![Keypoint::new(0.0, 0.0)];
        assert_eq!(pck(&pred, &gt1, 0.1, 100, 80).unwrap(), 1.0);

        // 3 of 6 within threshold
        let pred: Vec<Keypoint> = (0..6)
            .map(|i| {
                let off = if i < 3 { 0.5 } else { 50.0 };
                Keypoint::new(i as f64 * 3.0 + off, 2.0)
            })
            .collect();
        assert_eq!(pck(&pred, &gt, 0.05, 100, 50).unwrap(), 0.5);

        assert!(matches!(pck(&[], &[], 0.1, 10, 10), Err(Error::Eval(_))));
    }

    #[test]
    fn pck_is_monotone_in_alpha() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let gt: Vec<Keypoint> = (0..40)
            .map(|_| Keypoint::new(rng.random::<f64>() * 60.0, rng.random::<f64>() * 60.0))
            .collect();
        let pred: Vec<Keypoint> = gt
            .iter()
            .map(|k| {
                Keypoint::new(
                    k.x + rng.random::<f64>() * 8.0 - 4.0,
                    k.y + rng.random::<f64>() * 8.0 - 4.0,
                )
            })
            .collect();
        let mut prev = 0.0;
        for alpha in PCK_ALPHAS {
            let v = pck(&pred, &gt, alpha, 64, 64).unwrap();
            assert!(v >= prev, "alpha {alpha}");
            prev = v;
        }
    }
}
