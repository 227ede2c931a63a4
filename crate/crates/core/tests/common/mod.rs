//! Exhaustive-matching AP oracle for tiny scenes.

#![allow(dead_code)]

use boxforge::geometry::{iou, BBox};
use boxforge::postproc::{Detection, GtInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every partial injective map from `n_det` detections to `n_gt` targets.
fn all_matchings(n_det: usize, n_gt: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n_det {
        let mut next = Vec::new();
        for m in &out {
            next.push([m.clone(), vec![None]].concat());
            for g in 0..n_gt {
                if !m.contains(&Some(g)) {
                    next.push([m.clone(), vec![Some(g)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

/// Whether each detection, in score order, holds the best remaining target
/// it clears `t` with, and is unmatched only when none is left.
fn is_greedy(m: &[Option<usize>], ious: &[Vec<f64>], t: f64) -> bool {
    for (i, &mi) in m.iter().enumerate() {
        let taken: Vec<usize> = m[..i].iter().flatten().copied().collect();
        let best = (0..ious[i].len())
            .filter(|g| !taken.contains(g) && ious[i][*g] >= t)
            .max_by(|&a, &b| ious[i][a].total_cmp(&ious[i][b]));
        if mi != best {
            return false;
        }
    }
    true
}

/// AP at IoU threshold `t` over all areas: every matching is enumerated and
/// the greedy one is scored with precision taken as the best value at or
/// beyond each of 101 recall levels.
pub fn oracle_ap(dets: &[Detection], gts: &[Vec<GtInstance>], t: f64) -> f64 {
    let mut cats: Vec<usize> = gts.iter().flatten().map(|g| g.category).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut sum = 0.0;
    let mut n = 0usize;
    for cat in cats {
        let n_gt: usize = gts.iter().flatten().filter(|g| g.category == cat).count();
        let mut hits: Vec<(f64, bool)> = Vec::new();
        for (scene, sg) in gts.iter().enumerate() {
            let g: Vec<BBox> = sg.iter().filter(|x| x.category == cat).map(|x| x.bbox).collect();
            let mut d: Vec<&Detection> = dets.iter().filter(|x| x.scene == scene && x.category == cat).collect();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            let ious: Vec<Vec<f64>> = d
                .iter()
                .map(|x| g.iter().map(|gb| iou(&x.bbox, gb)).collect())
                .collect();
            let greedy: Vec<Vec<Option<usize>>> = all_matchings(d.len(), g.len())
                .into_iter()
                .filter(|m| m.iter().enumerate().all(|(i, mi)| mi.is_none_or(|k| ious[i][k] >= t)))
                .filter(|m| is_greedy(m, &ious, t))
                .collect();
            assert_eq!(greedy.len(), 1, "greedy matching must be unique");
            for (i, mi) in greedy[0].iter().enumerate() {
                hits.push((d[i].score, mi.is_some()));
            }
        }
        hits.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut curve = Vec::new();
        let mut tp = 0usize;
        for (k, &(_, hit)) in hits.iter().enumerate() {
            tp += usize::from(hit);
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let q: f64 = (0..101)
            .map(|k| {
                let r = k as f64 / 100.0;
                curve
                    .iter()
                    .filter(|(rec, _)| *rec >= r)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum();
        sum += q / 101.0;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A random case of one or two scenes, each with at most three targets and
/// three detections over two categories. Detections jitter targets so that
/// IoUs spread across the threshold range.
pub fn tiny_case(seed: u64) -> (Vec<Detection>, Vec<Vec<GtInstance>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_scenes = rng.random_range(1..=2);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for scene in 0..n_scenes {
        let n_gt = rng.random_range(0..=3);
        let g: Vec<GtInstance> = (0..n_gt)
            .map(|_| {
                let x = rng.random_range(0.0..60.0);
                let y = rng.random_range(0.0..60.0);
                let w = rng.random_range(10.0..40.0);
                let h = rng.random_range(10.0..40.0);
                GtInstance {
                    bbox: BBox::new(x, y, x + w, y + h),
                    category: rng.random_range(0..2),
                }
            })
            .collect();
        for _ in 0..rng.random_range(0..=3) {
            let (base, category) = match g.get(rng.random_range(0..=g.len())) {
                Some(gi) if rng.random_bool(0.8) => (gi.bbox, gi.category),
                _ => (BBox::new(20.0, 20.0, 50.0, 50.0), rng.random_range(0..2)),
            };
            let s = rng.random_range(0.0..0.35) * base.width().min(base.height());
            let mut j = || rng.random_range(-s..=s);
            let b = BBox::new(base.x1 + j(), base.y1 + j(), base.x2 + j(), base.y2 + j());
            dets.push(Detection {
                bbox: b,
                score: rng.random_range(0.05..1.0),
                category,
                scene,
            });
        }
        gts.push(g);
    }
    (dets, gts)
}
