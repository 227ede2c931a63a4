//! Tabular dense predictor: every pixel of every pyramid level owns its own
//! log-distances, class logits and consistency logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assignment::resolve_overlaps;
use crate::error::{Error, Result};
use crate::geometry::{box_to_dist, BBox, Distances, Point};
use crate::losses::{LossGrads, PixelOutput};
use crate::postproc::{passes_score_threshold, score_detections, Detection};

use super::scene::Scene;

pub const LOGIT_CLAMP: f64 = 20.0;

/// Pixel centers of every level, level by level in row-major order. Level
/// `l` has stride `stride * 2^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLayout {
    pub points: Vec<Point>,
    pub levels: Vec<usize>,
    pub strides: Vec<f64>,
}

impl PixelLayout {
    pub fn new(scene: &Scene, num_levels: usize) -> Self {
        let mut points = Vec::new();
        let mut levels = Vec::new();
        let mut strides = Vec::with_capacity(num_levels);
        for l in 0..num_levels.max(1) {
            let f = 1usize << l;
            let s = scene.stride * f as f64;
            strides.push(s);
            let (w, h) = (scene.grid.width.div_ceil(f), scene.grid.height.div_ceil(f));
            for iy in 0..h {
                for ix in 0..w {
                    points.push(Point::new((ix as f64 + 0.5) * s, (iy as f64 + 0.5) * s));
                    levels.push(l);
                }
            }
        }
        Self {
            points,
            levels,
            strides,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Scale of the log-distance perturbation. A side at distance `d` in a
    /// box of extent `e` along that axis gets standard deviation
    /// `noise * (near_noise + far_noise * d / e)`: pixels see nearby edges
    /// better than distant ones.
    pub noise: f64,
    pub near_noise: f64,
    pub far_noise: f64,
    /// Noise multiplier for box pixels that do not lie on the object.
    pub off_object_gain: f64,
    /// Each instance's noise is scaled by `exp(u * difficulty_spread)` with
    /// `u` uniform in `[-1, 1]`.
    pub difficulty_spread: f64,
    /// Range of the per-instance silhouette scale: the object is the
    /// ellipse inscribed in its box, shrunk by a factor drawn from here.
    pub silhouette_min: f64,
    pub silhouette_max: f64,
    /// Spread of initial class logits between object centers and rims.
    pub cls_evidence: f64,
    pub logit_jitter: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            noise: 0.9,
            near_noise: 0.25,
            far_noise: 1.0,
            off_object_gain: 3.0,
            difficulty_spread: 0.7,
            silhouette_min: 0.45,
            silhouette_max: 1.0,
            cls_evidence: 1.0,
            logit_jitter: 0.1,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.noise >= 0.0
            && self.near_noise >= 0.0
            && self.far_noise >= 0.0
            && self.off_object_gain >= 0.0
            && self.difficulty_spread >= 0.0
            && self.silhouette_min > 0.0
            && self.silhouette_min <= self.silhouette_max
            && self.silhouette_max <= 1.0
            && self.cls_evidence >= 0.0
            && self.logit_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid init settings {self:?}")))
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePredictor {
    pub num_categories: usize,
    /// `ln` of `(l, t, r, b)` per pixel.
    pub reg: Vec<[f64; 4]>,
    /// Class logits, `num_categories` per pixel.
    pub cls: Vec<f64>,
    pub con: Vec<f64>,
}

impl ScenePredictor {
    pub fn len(&self) -> usize {
        self.reg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reg.is_empty()
    }

    pub fn cls_logits(&self, i: usize) -> &[f64] {
        &self.cls[i * self.num_categories..(i + 1) * self.num_categories]
    }

    pub fn output(&self, layout: &PixelLayout, i: usize) -> PixelOutput {
        let r = self.reg[i];
        PixelOutput {
            point: layout.points[i],
            dist: Distances::new(r[0].exp(), r[1].exp(), r[2].exp(), r[3].exp()),
            cls: self.cls_logits(i).iter().map(|&z| sigmoid(z)).collect(),
            con: sigmoid(self.con[i]),
        }
    }

    pub fn outputs(&self, layout: &PixelLayout) -> Vec<PixelOutput> {
        (0..self.len()).map(|i| self.output(layout, i)).collect()
    }

    /// One descent step given loss gradients with respect to the decoded
    /// outputs `outs`.
    pub fn descend(&mut self, outs: &[PixelOutput], grads: &LossGrads, lr_reg: f64, lr_cls: f64) {
        for (i, out) in outs.iter().enumerate() {
            let d = out.dist.to_array();
            for (k, (theta, g)) in self.reg[i].iter_mut().zip(grads.dist[i]).enumerate() {
                *theta -= lr_reg * g * d[k];
            }
            let g = self.num_categories;
            for (k, z) in self.cls[i * g..(i + 1) * g].iter_mut().enumerate() {
                let p = out.cls[k];
                *z = (*z - lr_cls * grads.cls[i][k] * p * (1.0 - p)).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            }
            let r = out.con;
            self.con[i] = (self.con[i] - lr_cls * grads.con[i] * r * (1.0 - r)).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
    }

    /// Best-category detection of every pixel whose score clears the
    /// threshold, before suppression.
    pub fn detections(&self, layout: &PixelLayout, scene_index: usize) -> Vec<Detection> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            let o = self.output(layout, i);
            let (category, p) =
                o.cls.iter().copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, p)| if p > best.1 { (k, p) } else { best },
                );
            let score = score_detections(p, o.con);
            let bbox = o.bbox();
            if passes_score_threshold(score) && bbox.is_valid() {
                out.push(Detection {
                    bbox,
                    score,
                    category,
                    scene: scene_index,
                });
            }
        }
        out
    }
}

/// Initial table for one scene. Box pixels start near their object's box,
/// with error that grows with the distance to each side and jumps off the
/// object's silhouette. With zero noise every box pixel regresses its box exactly.
pub fn init_predictor(
    scene: &Scene,
    layout: &PixelLayout,
    num_categories: usize,
    cfg: &InitConfig,
    seed: u64,
) -> Result<ScenePredictor> {
    cfg.validate()?;
    scene.validate(num_categories)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = scene
        .instances
        .iter()
        .map(|_| rng.random_range(cfg.silhouette_min..=cfg.silhouette_max))
        .collect();
    let difficulty: Vec<f64> = scene
        .instances
        .iter()
        .map(|_| (cfg.difficulty_spread * rng.random_range(-1.0..=1.0)).exp())
        .collect();
    let boxes: Vec<(usize, BBox)> = scene.instances.iter().map(|i| i.bbox()).enumerate().collect();

    let n = layout.len();
    let mut reg = Vec::with_capacity(n);
    let mut cls = Vec::with_capacity(n * num_categories);
    let mut con = Vec::with_capacity(n);
    for (i, &p) in layout.points.iter().enumerate() {
        let floor = 0.01 * layout.strides[layout.levels[i]];
        let mut z = || -> f64 { rng.sample(StandardNormal) };
        match resolve_overlaps(&boxes, p) {
            Some(k) => {
                let inst = &scene.instances[k];
                let rho = inst.radial(p) / (scales[k] * scales[k]);
                let gain = difficulty[k] * if rho <= 1.0 { 1.0 } else { cfg.off_object_gain };
                let b = inst.bbox();
                let extent = [b.width(), b.height(), b.width(), b.height()];
                let d = box_to_dist(p, &b)?.to_array();
                let mut row = [0.0; 4];
                for ((t, dv), e) in row.iter_mut().zip(d).zip(extent) {
                    let sigma = cfg.noise * gain * (cfg.near_noise + cfg.far_noise * dv / e);
                    *t = dv.max(floor).ln() + sigma * z();
                }
                reg.push(row);
                let evidence = cfg.cls_evidence * (0.5 - rho.min(1.5));
                for c in 0..num_categories {
                    let base = if c == inst.category {
                        evidence
                    } else {
                        -0.5 * cfg.cls_evidence
                    };
                    cls.push(base + cfg.logit_jitter * z());
                }
            }
            None => {
                let half = (0.5 * layout.strides[layout.levels[i]]).ln();
                reg.push([
                    half + cfg.noise * z(),
                    half + cfg.noise * z(),
                    half + cfg.noise * z(),
                    half + cfg.noise * z(),
                ]);
                for _ in 0..num_categories {
                    cls.push(-0.5 * cfg.cls_evidence + cfg.logit_jitter * z());
                }
            }
        }
        con.push(cfg.logit_jitter * z());
    }
    Ok(ScenePredictor {
        num_categories,
        reg,
        cls,
        con,
    })
}
