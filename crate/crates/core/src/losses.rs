//! Scalar losses and their analytic gradients.
//!
//! Box gradients are expressed either over box sides (in [`Side`] order:
//! left, right, bottom, top) or over a pixel's distances `(l, t, r, b)`.
//! Classification and consistency gradients are taken with respect to
//! probabilities; the caller chains them through its own parameterization.

use crate::assignment::Partition;
use crate::dnr::{self, PixelPrediction};
use crate::error::{Error, Result};
use crate::geometry::{area, boundary_deviations, dist_to_box, iou, BBox, Distances, Point, Side};

/// Sides closer than this to the matching target side are treated as
/// coincident; the loss has a kink there and the reported partial is zero.
pub const COINCIDENT_EPS: f64 = 1e-9;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// `-ln IoU(pred, gt)`.
pub fn iou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    let s = iou(pred, gt);
    if s <= 0.0 {
        return Err(Error::ZeroOverlap);
    }
    Ok(-s.ln())
}

/// Gradient of `-ln IoU` with respect to the four sides of `pred`, in
/// [`Side`] order.
pub fn iou_loss_box_grad(pred: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let wi = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let hi = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    if wi <= 0.0 || hi <= 0.0 {
        return Err(Error::ZeroOverlap);
    }
    let inter = wi * hi;
    let union = area(pred) + area(gt) - inter;
    let (wp, hp) = (pred.width(), pred.height());

    // (d area_pred, d intersection) per side
    let x1_in = pred.x1 > gt.x1;
    let x2_in = pred.x2 < gt.x2;
    let y1_in = pred.y1 > gt.y1;
    let y2_in = pred.y2 < gt.y2;
    let partial = |d_area: f64, d_inter: f64| -d_inter / inter + (d_area - d_inter) / union;

    let mut g = [0.0; 4];
    g[Side::Left.index()] = partial(-hp, if x1_in { -hi } else { 0.0 });
    g[Side::Right.index()] = partial(hp, if x2_in { hi } else { 0.0 });
    g[Side::Top.index()] = partial(-wp, if y1_in { -wi } else { 0.0 });
    g[Side::Bottom.index()] = partial(wp, if y2_in { wi } else { 0.0 });

    for side in Side::ALL {
        if (pred.side(side) - gt.side(side)).abs() <= COINCIDENT_EPS {
            g[side.index()] = 0.0;
        }
    }
    Ok(g)
}

/// Maps a side-ordered box gradient onto a pixel's `(l, t, r, b)` distances.
pub fn side_grad_to_dist(g: [f64; 4]) -> [f64; 4] {
    [
        -g[Side::Left.index()],
        -g[Side::Top.index()],
        g[Side::Right.index()],
        g[Side::Bottom.index()],
    ]
}

/// Analytic `d(-ln IoU)/d(l, t, r, b)` for the box a pixel at `p` regresses.
pub fn iou_loss_grad(p: Point, d: Distances, gt: &BBox) -> Result<[f64; 4]> {
    iou_loss_box_grad(&dist_to_box(p, d), gt).map(side_grad_to_dist)
}

/// Linear penalty used when a prediction has no overlap with its target:
/// the boundary deviation sum normalized by the target's half perimeter.
/// Returns the value and its side-ordered gradient.
pub fn zero_overlap_penalty(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let norm = (gt.width() + gt.height()).max(f64::MIN_POSITIVE);
    let value = boundary_deviations(pred, gt).sum() / norm;
    let mut g = [0.0; 4];
    for side in Side::ALL {
        let diff = pred.side(side) - gt.side(side);
        g[side.index()] = if diff > 0.0 {
            1.0 / norm
        } else if diff < 0.0 {
            -1.0 / norm
        } else {
            0.0
        };
    }
    (value, g)
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::ProbabilityOutOfRange(p))
    }
}

/// Sigmoid focal loss for a single binary output. Returns `(loss, dloss/dp)`.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> Result<(f64, f64)> {
    check_probability(p)?;
    let (pt, alpha_t, dpt_dp) = if positive {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    let q = 1.0 - pt;
    let log_pt = pt.ln();
    let loss = -alpha_t * q.powf(gamma) * log_pt;
    // d/dpt of -(1-pt)^g ln pt = g (1-pt)^(g-1) ln pt - (1-pt)^g / pt
    let dq = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * log_pt
    };
    let dloss_dpt = alpha_t * (dq - q.powf(gamma) / pt);
    Ok((loss, dloss_dpt * dpt_dp))
}

/// Binary cross-entropy of a consistency estimate `r` against a soft IoU
/// target. Returns `(loss, dloss/dr)`.
pub fn consistency_loss(r: f64, target_iou: f64) -> Result<(f64, f64)> {
    check_probability(r)?;
    let t = target_iou.clamp(0.0, 1.0);
    let loss = -(t * r.ln() + (1.0 - t) * (1.0 - r).ln());
    let grad = -t / r + (1.0 - t) / (1.0 - r);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub con: f64,
    pub total: f64,
    pub n_pos: usize,
}

impl LossBreakdown {
    pub fn from_sums(cls: f64, reg: f64, con: f64, n_pos: usize) -> Self {
        let norm = n_pos.max(1) as f64;
        let (cls, reg, con) = (cls / norm, reg / norm, con / norm);
        Self {
            cls,
            reg,
            con,
            total: cls + reg + con,
            n_pos,
        }
    }
}

/// Decoded head outputs at one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelOutput {
    pub point: Point,
    pub dist: Distances,
    /// Per-category classification probabilities.
    pub cls: Vec<f64>,
    /// Consistency (inner significance) probability.
    pub con: f64,
}

impl PixelOutput {
    pub fn bbox(&self) -> BBox {
        dist_to_box(self.point, self.dist)
    }
}

/// One instance's target box, category and pixel labeling. Partition ids
/// index the pixel output slice.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub gt: BBox,
    pub category: usize,
    pub partition: Partition,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub dnr: bool,
    pub consistency_head: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dnr: true,
            consistency_head: true,
            focal_alpha: FOCAL_ALPHA,
            focal_gamma: FOCAL_GAMMA,
        }
    }
}

/// Gradients of a loss with respect to every pixel's distances and
/// probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub dist: Vec<[f64; 4]>,
    pub cls: Vec<Vec<f64>>,
    pub con: Vec<f64>,
}

impl LossGrads {
    fn zeros(outputs: &[PixelOutput]) -> Self {
        Self {
            dist: vec![[0.0; 4]; outputs.len()],
            cls: outputs.iter().map(|o| vec![0.0; o.cls.len()]).collect(),
            con: vec![0.0; outputs.len()],
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.dist {
            g.iter_mut().for_each(|v| *v *= k);
        }
        for g in &mut self.cls {
            g.iter_mut().for_each(|v| *v *= k);
        }
        self.con.iter_mut().for_each(|v| *v *= k);
    }
}

/// Unnormalized loss sums for one scene. Summation runs in ascending pixel
/// and instance order so results do not depend on how scenes are scheduled.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSums {
    pub cls: f64,
    pub reg: f64,
    pub con: f64,
    pub n_pos: usize,
    /// Positives that had no overlap with their target and were trained
    /// with the linear fallback penalty.
    pub fallbacks: usize,
    pub grads: LossGrads,
}

#[derive(Clone, Copy, PartialEq)]
enum Label {
    Background,
    Positive(usize),
    Ignored,
}

pub fn scene_loss_sums(outputs: &[PixelOutput], instances: &[InstanceTarget], cfg: &LossConfig) -> Result<LossSums> {
    let mut grads = LossGrads::zeros(outputs);
    let mut labels = vec![Label::Background; outputs.len()];
    for inst in instances {
        for &i in &inst.partition.positives {
            labels[i] = Label::Positive(inst.category);
        }
        for &i in &inst.partition.ignored {
            labels[i] = Label::Ignored;
        }
    }

    let mut cls_sum = 0.0;
    for (i, out) in outputs.iter().enumerate() {
        let label = labels[i];
        if label == Label::Ignored {
            continue;
        }
        for (k, &p) in out.cls.iter().enumerate() {
            let positive = label == Label::Positive(k);
            let (l, g) = focal_loss(p, positive, cfg.focal_alpha, cfg.focal_gamma)?;
            cls_sum += l;
            grads.cls[i][k] = g;
        }
    }

    let mut reg_sum = 0.0;
    let mut con_sum = 0.0;
    let mut n_pos = 0;
    let mut fallbacks = 0;
    for inst in instances {
        let positives = &inst.partition.positives;
        n_pos += positives.len();

        let mut overlapping = Vec::with_capacity(positives.len());
        for &i in positives {
            let b = outputs[i].bbox();
            if iou(&b, &inst.gt) > 0.0 {
                overlapping.push(i);
            } else {
                let (v, g) = zero_overlap_penalty(&b, &inst.gt);
                reg_sum += v;
                add4(&mut grads.dist[i], side_grad_to_dist(g));
                fallbacks += 1;
            }
        }

        if cfg.dnr && !overlapping.is_empty() {
            let preds: Vec<PixelPrediction> = overlapping
                .iter()
                .map(|&i| PixelPrediction::new(outputs[i].point, outputs[i].dist))
                .collect();
            let out = dnr::dnr_loss(&preds, &inst.gt)?;
            reg_sum += out.loss;
            for (slot, &i) in overlapping.iter().enumerate() {
                add4(&mut grads.dist[i], out.grads[slot]);
            }
        } else {
            for &i in &overlapping {
                let o = &outputs[i];
                reg_sum += iou_loss(&o.bbox(), &inst.gt)?;
                add4(&mut grads.dist[i], iou_loss_grad(o.point, o.dist, &inst.gt)?);
            }
        }

        if cfg.consistency_head {
            for &i in positives {
                let target = iou(&outputs[i].bbox(), &inst.gt);
                let (l, g) = consistency_loss(outputs[i].con, target)?;
                con_sum += l;
                grads.con[i] = g;
            }
        }
    }

    Ok(LossSums {
        cls: cls_sum,
        reg: reg_sum,
        con: con_sum,
        n_pos,
        fallbacks,
        grads,
    })
}

fn add4(acc: &mut [f64; 4], g: [f64; 4]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

/// Combines per-scene sums into a normalized breakdown and rescales the
/// gradients by the shared positive count.
pub fn normalize(sums: &[LossSums]) -> Result<(LossBreakdown, usize)> {
    let (mut cls, mut reg, mut con, mut n_pos) = (0.0, 0.0, 0.0, 0);
    for s in sums {
        cls += s.cls;
        reg += s.reg;
        con += s.con;
        n_pos += s.n_pos;
    }
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    Ok((LossBreakdown::from_sums(cls, reg, con, n_pos), n_pos))
}

/// Total loss of one scene: focal classification over non-ignored pixels,
/// IoU regression (with or without boundary recombination) and consistency
/// over positives, each divided by the number of positives.
pub fn total_loss(
    outputs: &[PixelOutput],
    instances: &[InstanceTarget],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let sums = scene_loss_sums(outputs, instances, cfg)?;
    let (breakdown, n_pos) = normalize(std::slice::from_ref(&sums))?;
    let mut grads = sums.grads;
    grads.scale(1.0 / n_pos as f64);
    Ok((breakdown, grads))
}
