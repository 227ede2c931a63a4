//! Full-batch training of the tabular predictor over a suite of scenes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::{fpn_level_assign, resolve_overlaps, AssignStrategy, CandidateSet, LevelRanges};
use crate::dnr;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::geometry::{iou, BBox};
use crate::losses::{scene_loss_sums, InstanceTarget, LossBreakdown, LossConfig, LossSums, PixelOutput};
use crate::postproc::{evaluate_ap_with, nms, APReport, Detection, EvalParams, GtInstance, NMS_THRESHOLD};

use super::predictor::{init_predictor, InitConfig, PixelLayout, ScenePredictor};
use super::scene::{generate_suite, Scene, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub dnr: bool,
    pub assignment: AssignStrategy,
    pub epochs: usize,
    /// Per-pixel step size for log-distances.
    pub lr: f64,
    /// Per-pixel step size for class and consistency logits.
    pub cls_lr: f64,
    /// Epochs at which both step sizes drop tenfold.
    pub lr_drops: Vec<usize>,
    pub seed: u64,
    pub level_ranges: LevelRanges,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            dnr: true,
            assignment: AssignStrategy::Mean,
            epochs: 12,
            lr: 0.25,
            cls_lr: 1.0,
            lr_drops: vec![8, 11],
            seed: 0,
            level_ranges: LevelRanges::single(),
        }
    }
}

impl VariantConfig {
    pub fn baseline() -> Self {
        Self {
            dnr: false,
            assignment: AssignStrategy::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.assignment.validate()?;
        if self.epochs == 0 {
            return Err(Error::ConfigInvalid("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.cls_lr > 0.0 && self.cls_lr.is_finite()) {
            return Err(Error::ConfigInvalid("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_scale(&self, epoch: usize) -> f64 {
        0.1f64.powi(self.lr_drops.iter().filter(|&&e| e <= epoch).count() as i32)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            dnr: self.dnr,
            ..LossConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scenes: usize,
    pub scene: SceneSpec,
    pub init: InitConfig,
    pub variant: VariantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            scene: SceneSpec::default(),
            init: InitConfig::default(),
            variant: VariantConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::ConfigInvalid("need at least one scene".into()));
        }
        self.scene.validate()?;
        self.init.validate()?;
        self.variant.validate()
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Running first and second moments.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    pub fn var(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            let m = self.mean();
            (self.sum_sq / self.n as f64 - m * m).max(0.0)
        }
    }
}

/// IoU statistics over the positives' boundaries. `original` credits each
/// boundary with the IoU of the box it came from; `recombined` with the
/// score it keeps after recombination. Both walk boundaries in the same
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IouStats {
    pub original: Moments,
    pub recombined: Moments,
}

impl IouStats {
    fn merge(&mut self, o: &IouStats) {
        self.original.merge(&o.original);
        self.recombined.merge(&o.recombined);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iou_mean: f64,
    pub iou_var: f64,
    pub dr_iou_mean: f64,
    pub dr_iou_var: f64,
    pub loss: LossBreakdown,
    pub pos_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str =
        "epoch,iou_mean,iou_var,dr_iou_mean,dr_iou_var,loss_cls,loss_reg,loss_con,pos_frac";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch,
                r.iou_mean,
                r.iou_var,
                r.dr_iou_mean,
                r.dr_iou_var,
                r.loss.cls,
                r.loss.reg,
                r.loss.con,
                r.pos_frac
            );
        }
        out
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

/// One scene with its pixel table and the static pixel-to-instance map.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub scene: Scene,
    pub layout: PixelLayout,
    /// Instance whose candidate each pixel is, if any.
    pub owner: Vec<Option<usize>>,
    pub predictor: ScenePredictor,
}

impl SceneState {
    pub fn new(
        scene: Scene,
        num_categories: usize,
        init: &InitConfig,
        ranges: &LevelRanges,
        seed: u64,
    ) -> Result<Self> {
        let layout = PixelLayout::new(&scene, ranges.len());
        let levels: Vec<usize> = scene
            .instances
            .iter()
            .map(|i| fpn_level_assign(&i.bbox(), ranges))
            .collect();
        let owner = layout
            .points
            .iter()
            .zip(&layout.levels)
            .map(|(&p, &l)| {
                let on_level: Vec<(usize, BBox)> = scene
                    .instances
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| levels[*k] == l)
                    .map(|(k, i)| (k, i.bbox()))
                    .collect();
                resolve_overlaps(&on_level, p)
            })
            .collect();
        let predictor = init_predictor(&scene, &layout, num_categories, init, seed)?;
        Ok(Self {
            scene,
            layout,
            owner,
            predictor,
        })
    }

    pub fn candidates(&self, outs: &[PixelOutput], k: usize) -> CandidateSet {
        let inst = &self.scene.instances[k];
        let gt = inst.bbox();
        let mut c = CandidateSet::default();
        for (i, o) in self.owner.iter().enumerate() {
            if *o == Some(k) {
                let out = &outs[i];
                c.push(i, out.point, out.cls[inst.category], iou(&out.bbox(), &gt));
            }
        }
        c
    }

    pub fn targets(&self, outs: &[PixelOutput], strategy: &AssignStrategy) -> Result<(Vec<InstanceTarget>, usize)> {
        let mut targets = Vec::with_capacity(self.scene.instances.len());
        let mut n_cands = 0;
        for (k, inst) in self.scene.instances.iter().enumerate() {
            let cands = self.candidates(outs, k);
            if cands.is_empty() {
                continue;
            }
            n_cands += cands.len();
            let gt = inst.bbox();
            targets.push(InstanceTarget {
                gt,
                category: inst.category,
                partition: strategy.apply(&cands, &gt)?,
            });
        }
        Ok((targets, n_cands))
    }

    pub fn detections(&self, scene_index: usize) -> Vec<Detection> {
        nms(&self.predictor.detections(&self.layout, scene_index), NMS_THRESHOLD)
    }
}

pub fn iou_stats(outs: &[PixelOutput], targets: &[InstanceTarget]) -> Result<IouStats> {
    let mut stats = IouStats::default();
    for t in targets {
        if t.partition.positives.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = t.partition.positives.iter().map(|&i| outs[i].bbox()).collect();
        let pass = dnr::run_pass(&boxes, &t.gt)?;
        for (rank, fin) in pass.finals.rows.iter().enumerate() {
            for (side, &f) in fin.iter().enumerate() {
                let src = pass.recombined.provenance[rank][side];
                stats.original.push(pass.original.rows[src][side]);
                stats.recombined.push(f);
            }
        }
    }
    Ok(stats)
}

struct SceneStep {
    sums: LossSums,
    stats: IouStats,
    n_cands: usize,
}

fn step_scene(st: &mut SceneState, variant: &VariantConfig, lr_reg: f64, lr_cls: f64) -> Result<SceneStep> {
    let outs = st.predictor.outputs(&st.layout);
    let (targets, n_cands) = st.targets(&outs, &variant.assignment)?;
    let stats = iou_stats(&outs, &targets)?;
    let sums = scene_loss_sums(&outs, &targets, &variant.loss_config())?;
    if sums.n_pos == 0 {
        return Err(Error::NoPositives);
    }
    st.predictor.descend(&outs, &sums.grads, lr_reg, lr_cls);
    Ok(SceneStep { sums, stats, n_cands })
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub variant: VariantConfig,
    pub states: Vec<SceneState>,
    pub stride: f64,
    pub epoch: usize,
    pub mode: ExecMode,
}

impl Trainer {
    pub fn new(
        scenes: Vec<Scene>,
        num_categories: usize,
        init: &InitConfig,
        variant: VariantConfig,
        mode: ExecMode,
    ) -> Result<Self> {
        variant.validate()?;
        let stride = scenes
            .first()
            .map(|s| s.stride)
            .ok_or(Error::ConfigInvalid("no scenes".into()))?;
        let seed = variant.seed;
        let states = exec::map_range(mode, scenes.len(), |i| {
            SceneState::new(
                scenes[i].clone(),
                num_categories,
                init,
                &variant.level_ranges,
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            variant,
            states,
            stride,
            epoch: 0,
            mode,
        })
    }

    pub fn from_config(cfg: &TrainConfig, mode: ExecMode) -> Result<Self> {
        cfg.validate()?;
        let scenes = generate_suite(cfg.variant.seed, cfg.scenes, &cfg.scene)?;
        Self::new(scenes, cfg.scene.num_categories, &cfg.init, cfg.variant.clone(), mode)
    }

    /// Records metrics of the current tables, then applies one update.
    pub fn step(&mut self) -> Result<EpochMetrics> {
        let scale = self.variant.lr_scale(self.epoch);
        let (lr, cls_lr) = (self.variant.lr * scale, self.variant.cls_lr * scale);
        let variant = &self.variant;
        let steps = exec::map_mut(self.mode, &mut self.states, |st| step_scene(st, variant, lr, cls_lr));
        let mut stats = IouStats::default();
        let (mut cls, mut reg, mut con, mut n_pos, mut n_cands) = (0.0, 0.0, 0.0, 0, 0);
        for s in steps {
            let s = s?;
            stats.merge(&s.stats);
            cls += s.sums.cls;
            reg += s.sums.reg;
            con += s.sums.con;
            n_pos += s.sums.n_pos;
            n_cands += s.n_cands;
        }
        let m = EpochMetrics {
            epoch: self.epoch,
            iou_mean: stats.original.mean(),
            iou_var: stats.original.var(),
            dr_iou_mean: stats.recombined.mean(),
            dr_iou_var: stats.recombined.var(),
            loss: LossBreakdown::from_sums(cls, reg, con, n_pos),
            pos_frac: n_pos as f64 / n_cands.max(1) as f64,
        };
        self.epoch += 1;
        Ok(m)
    }

    pub fn run(&mut self) -> Result<MetricsLog> {
        let mut log = MetricsLog::default();
        while self.epoch < self.variant.epochs {
            log.rows.push(self.step()?);
        }
        Ok(log)
    }

    /// Suppressed detections of every scene, scenes in order.
    pub fn detections(&self) -> Vec<Detection> {
        exec::map_range(self.mode, self.states.len(), |i| self.states[i].detections(i))
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn ground_truth(&self) -> Vec<Vec<GtInstance>> {
        self.states.iter().map(|s| s.scene.gt_instances()).collect()
    }

    pub fn evaluate(&self) -> APReport {
        let params = EvalParams {
            stride: self.stride,
            ..EvalParams::default()
        };
        evaluate_ap_with(&self.detections(), &self.ground_truth(), &params, self.mode)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub detections: Vec<Detection>,
    pub report: APReport,
}

pub fn train(cfg: &TrainConfig, mode: ExecMode) -> Result<TrainOutcome> {
    let mut t = Trainer::from_config(cfg, mode)?;
    let log = t.run()?;
    Ok(TrainOutcome {
        log,
        detections: t.detections(),
        report: t.evaluate(),
    })
}
