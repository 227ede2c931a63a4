//! Greedy NMS, COCO-style average precision and precision/recall curves.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::geometry::{area, iou, BBox};

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_THRESHOLD: f64 = 0.5;
pub const MAX_DETS_PER_SCENE: usize = 100;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
    pub scene: usize,
}

/// On-disk form of a detection: one JSON object per line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    scene: usize,
    category: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            scene: d.scene,
            category: d.category,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            score: d.score,
        }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Self {
            bbox: BBox::new(r.x1, r.y1, r.x2, r.y2),
            score: r.score,
            category: r.category,
            scene: r.scene,
        }
    }
}

pub fn write_detections<W: Write>(mut w: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, &DetectionRecord::from(d))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("detection line {}: {e}", n + 1)))?;
        let det = Detection::from(rec);
        if !det.bbox.is_valid() || !(0.0..=1.0).contains(&det.score) {
            return Err(Error::Parse(format!("detection line {}: invalid box or score", n + 1)));
        }
        out.push(det);
    }
    Ok(out)
}

/// Final detection confidence: classification probability weighted by the
/// predicted consistency.
pub fn score_detections(cls: f64, consistency: f64) -> f64 {
    cls * consistency
}

/// Detections are kept only when their score is strictly above
/// [`SCORE_THRESHOLD`].
pub fn passes_score_threshold(score: f64) -> bool {
    score > SCORE_THRESHOLD
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy suppression within each `(scene, category)` group. A detection
/// whose IoU with an already kept one reaches `threshold` is dropped. The
/// survivors are returned in descending score order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let order = score_order(dets);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.scene == d.scene && k.category == d.category && iou(&k.bbox, &d.bbox) >= threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtInstance {
    pub bbox: BBox,
    pub category: usize,
}

/// Area range used to bucket objects by size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    fn excludes(&self, a: f64) -> bool {
        a < self.lo || a > self.hi
    }
}

/// Small/medium/large cutoffs: 32 and 96 pixels at stride 8, scaled
/// linearly with the stride.
pub fn size_buckets(stride: f64) -> [AreaRange; 3] {
    let s = (32.0 / 8.0 * stride).powi(2);
    let m = (96.0 / 8.0 * stride).powi(2);
    [
        AreaRange { lo: 0.0, hi: s },
        AreaRange { lo: s, hi: m },
        AreaRange {
            lo: m,
            hi: f64::INFINITY,
        },
    ]
}

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub stride: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            max_dets: MAX_DETS_PER_SCENE,
            stride: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct APReport {
    /// Mean over the requested IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

impl APReport {
    pub const CSV_HEADER: &'static str = "AP,AP50,AP75,AP_S,AP_M,AP_L";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.ap, self.ap50, self.ap75, self.ap_small, self.ap_medium, self.ap_large
        )
    }

    pub fn to_csv(&self, stride: f64) -> String {
        let [s, m, _] = size_buckets(stride);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# size buckets by area: small < {:.1}, medium < {:.1}, large above",
            s.hi, m.hi
        );
        let _ = writeln!(out, "{}", Self::CSV_HEADER);
        let _ = writeln!(out, "{}", self.csv_row());
        out
    }
}

/// Per-category matching outcome at one IoU threshold and area range:
/// scores, true-positive flags and the count of non-ignored ground truths.
struct Matched {
    scores: Vec<f64>,
    tp: Vec<bool>,
    n_gt: usize,
}

fn match_category(
    dets: &[Detection],
    gts: &[Vec<GtInstance>],
    category: usize,
    threshold: f64,
    range: AreaRange,
    max_dets: usize,
) -> Matched {
    let mut scores = Vec::new();
    let mut tp = Vec::new();
    let mut n_gt = 0;
    for (scene, scene_gts) in gts.iter().enumerate() {
        let mut g: Vec<(BBox, bool)> = scene_gts
            .iter()
            .filter(|x| x.category == category)
            .map(|x| (x.bbox, range.excludes(area(&x.bbox))))
            .collect();
        // non-ignored first, stable
        g.sort_by_key(|&(_, ignore)| ignore);
        n_gt += g.iter().filter(|(_, ignore)| !ignore).count();

        let mut d: Vec<&Detection> = dets
            .iter()
            .filter(|x| x.scene == scene && x.category == category)
            .collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(max_dets);

        let mut taken = vec![false; g.len()];
        for det in d {
            let mut best: Option<usize> = None;
            let mut best_iou = threshold.min(1.0 - 1e-10);
            for (k, (gb, ignore)) in g.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                if let Some(b) = best {
                    if !g[b].1 && *ignore {
                        break;
                    }
                }
                let o = iou(&det.bbox, gb);
                if o < best_iou {
                    continue;
                }
                best_iou = o;
                best = Some(k);
            }
            let ignored = match best {
                Some(k) => {
                    taken[k] = true;
                    g[k].1
                }
                None => range.excludes(area(&det.bbox)),
            };
            if !ignored {
                scores.push(det.score);
                tp.push(best.is_some());
            }
        }
    }
    Matched { scores, tp, n_gt }
}

/// Interpolated precision at the 101 recall points, plus the final recall.
fn interpolate(m: &Matched) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..m.scores.len()).collect();
    order.sort_by(|&a, &b| m.scores[b].total_cmp(&m.scores[a]));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        if m.tp[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / m.n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let q = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    (q, recall.last().copied().unwrap_or(0.0))
}

fn categories(gts: &[Vec<GtInstance>]) -> Vec<usize> {
    let mut cats: Vec<usize> = gts.iter().flatten().map(|g| g.category).collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

/// AP at one threshold and area range: mean over categories that have at
/// least one non-ignored ground truth; 0 when there are none.
fn ap_at(dets: &[Detection], gts: &[Vec<GtInstance>], threshold: f64, range: AreaRange, max_dets: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for cat in categories(gts) {
        let m = match_category(dets, gts, cat, threshold, range, max_dets);
        if m.n_gt == 0 {
            continue;
        }
        let (q, _) = interpolate(&m);
        sum += q.iter().sum::<f64>() / RECALL_POINTS as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_over(dets: &[Detection], gts: &[Vec<GtInstance>], thresholds: &[f64], range: AreaRange, p: &EvalParams) -> f64 {
    if thresholds.is_empty() {
        return 0.0;
    }
    let s: f64 = thresholds.iter().map(|&t| ap_at(dets, gts, t, range, p.max_dets)).sum();
    s / thresholds.len() as f64
}

/// COCO-style evaluation. `gts[scene]` lists the ground truth of each scene;
/// detections refer to scenes by index.
pub fn evaluate_ap(dets: &[Detection], gts: &[Vec<GtInstance>], params: &EvalParams) -> APReport {
    evaluate_ap_with(dets, gts, params, ExecMode::default())
}

pub fn evaluate_ap_with(dets: &[Detection], gts: &[Vec<GtInstance>], params: &EvalParams, mode: ExecMode) -> APReport {
    let per: Vec<f64> = exec::map(mode, &params.iou_thresholds, |&t| {
        ap_at(dets, gts, t, AreaRange::ALL, params.max_dets)
    });
    let ap = if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    let lookup = |t: f64| {
        params
            .iou_thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-12)
            .map(|i| per[i])
            .unwrap_or_else(|| ap_at(dets, gts, t, AreaRange::ALL, params.max_dets))
    };
    let coco = coco_iou_thresholds();
    let buckets = size_buckets(params.stride);
    let sized: Vec<f64> = exec::map(mode, &buckets, |&r| mean_over(dets, gts, &coco, r, params));
    APReport {
        ap,
        ap50: lookup(0.5),
        ap75: lookup(0.75),
        ap_small: sized[0],
        ap_medium: sized[1],
        ap_large: sized[2],
        per_threshold: params.iou_thresholds.iter().copied().zip(per).collect(),
    }
}

/// Interpolated precision over the standard recall grid, averaged over
/// categories, up to the highest recall any category reaches.
pub fn pr_curve(
    dets: &[Detection],
    gts: &[Vec<GtInstance>],
    iou_threshold: f64,
    range: Option<AreaRange>,
) -> Vec<(f64, f64)> {
    let range = range.unwrap_or(AreaRange::ALL);
    let mut curves = Vec::new();
    let mut max_recall: f64 = 0.0;
    for cat in categories(gts) {
        let m = match_category(dets, gts, cat, iou_threshold, range, MAX_DETS_PER_SCENE);
        if m.n_gt == 0 {
            continue;
        }
        let (q, rec) = interpolate(&m);
        max_recall = max_recall.max(rec);
        curves.push(q);
    }
    if curves.is_empty() {
        return Vec::new();
    }
    (0..RECALL_POINTS)
        .map(|k| (k as f64 / (RECALL_POINTS - 1) as f64, k))
        .take_while(|&(r, _)| r <= max_recall + 1e-12)
        .map(|(r, k)| (r, curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64))
        .collect()
}

pub fn pr_curve_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in points {
        let _ = writeln!(out, "{r:.6},{p:.6}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
            category: 0,
            scene: 0,
        }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GtInstance {
        GtInstance {
            bbox: BBox::new(x1, y1, x2, y2),
            category: 0,
        }
    }

    #[test]
    fn nms_examples() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(nms(&[a], 0.5), vec![a]);
        // IoU = 80 / 120 = 0.667 and 0.6 cases
        let b = det(0.0, 0.0, 10.0, 12.5, 0.8);
        assert!((iou(&a.bbox, &b.bbox) - 0.8).abs() < 1e-12);
        let c = det(0.0, 0.0, 6.0, 10.0, 0.8);
        assert!((iou(&a.bbox, &c.bbox) - 0.6).abs() < 1e-12);
        assert_eq!(nms(&[c, a], 0.5), vec![a]);
        assert_eq!(nms(&[c, a], 0.7), vec![a, c]);
        // exactly at threshold is suppressed
        assert_eq!(nms(&[c, a], 0.6), vec![a]);
    }

    #[test]
    fn nms_keeps_other_categories_and_scenes() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let mut b = a;
        b.score = 0.5;
        b.category = 1;
        let mut c = a;
        c.score = 0.4;
        c.scene = 1;
        assert_eq!(nms(&[a, b, c], 0.5).len(), 3);
    }

    #[test]
    fn nms_tie_breaks_by_input_order() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.5);
        let b = det(1.0, 0.0, 11.0, 10.0, 0.5);
        assert_eq!(nms(&[a, b], 0.5), vec![a]);
        assert_eq!(nms(&[b, a], 0.5), vec![b]);
    }

    #[test]
    fn ap_examples() {
        let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)]];
        let perfect = vec![det(0.0, 0.0, 10.0, 10.0, 0.9), det(20.0, 20.0, 30.0, 30.0, 0.8)];
        let r = evaluate_ap(&perfect, &g, &EvalParams::default());
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));

        let single = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
        let d = vec![det(0.0, 0.0, 6.0, 10.0, 0.7)];
        let r = evaluate_ap(&d, &single, &EvalParams::default());
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        // thresholds 0.50, 0.55, 0.60 match
        assert!((r.ap - 0.3).abs() < 1e-12);

        let r = evaluate_ap(&[], &single, &EvalParams::default());
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn false_positive_ranked_first_halves_precision() {
        let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
        let d = vec![det(50.0, 50.0, 60.0, 60.0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0.8)];
        let r = evaluate_ap(&d, &g, &EvalParams::default());
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn size_buckets_ignore_out_of_range_objects() {
        // area 100 is small at stride 8 (< 32^2); area 2500 is medium
        let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(100.0, 100.0, 150.0, 150.0)]];
        let d = vec![det(0.0, 0.0, 10.0, 10.0, 0.9)];
        let r = evaluate_ap(&d, &g, &EvalParams::default());
        assert_eq!(r.ap_small, 1.0);
        assert_eq!(r.ap_medium, 0.0);
        assert_eq!(r.ap_large, 0.0);
    }

    #[test]
    fn pr_curve_examples() {
        let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)]];
        let perfect = vec![det(0.0, 0.0, 10.0, 10.0, 0.9), det(20.0, 20.0, 30.0, 30.0, 0.8)];
        let c = pr_curve(&perfect, &g, 0.5, None);
        assert_eq!(c.len(), 101);
        assert!(c.iter().all(|&(_, p)| p == 1.0));

        let half = vec![det(0.0, 0.0, 10.0, 10.0, 0.9)];
        let c = pr_curve(&half, &g, 0.5, None);
        assert_eq!(c.last().unwrap().0, 0.5);

        assert!(pr_curve(&half, &[vec![]], 0.5, None).is_empty());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_detections(1.0, 1.0), 1.0);
        assert!((score_detections(0.8, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(score_detections(0.3, 0.0), 0.0);
        assert!(!passes_score_threshold(score_detections(0.05, 1.0)));
        assert!(!passes_score_threshold(score_detections(0.1, 0.5)));
        assert!(passes_score_threshold(0.050_000_000_000_001));
    }

    #[test]
    fn detection_records_roundtrip() {
        let d = vec![
            det(0.5, 1.0, 10.25, 12.0, 0.75),
            Detection {
                scene: 3,
                category: 2,
                ..det(1.0, 1.0, 2.0, 2.0, 0.1)
            },
        ];
        let mut buf = Vec::new();
        write_detections(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"scene\":0,\"category\":0,\"x1\":0.5"));
        assert_eq!(read_detections(&buf[..]).unwrap(), d);
        assert!(read_detections(&b"{\"scene\":0}\n"[..]).is_err());
    }
}
