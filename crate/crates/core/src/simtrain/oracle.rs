//! Ranking versus exhaustive recombination on random prediction sets.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dnr::{brute_force_optimal, run_pass, ORACLE_LIMIT};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::geometry::{BBox, Side};

use super::scene::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Predictions per instance.
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    /// Side noise as a fraction of the target's extent along that axis.
    pub jitter: f64,
    /// Size range and grid the targets are drawn from.
    pub scene: SceneSpec,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n: 4,
            trials: 500,
            seed: 0,
            jitter: 0.2,
            scene: SceneSpec::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n == 0 {
            return Err(Error::EmptyPredictionSet);
        }
        if self.n > ORACLE_LIMIT {
            return Err(Error::TooManyPredictions {
                n: self.n,
                limit: ORACLE_LIMIT,
            });
        }
        if self.trials == 0 {
            return Err(Error::ConfigInvalid("trials must be positive".into()));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::ConfigInvalid("jitter must be positive".into()));
        }
        Ok(())
    }
}

/// A target box and `n` valid predictions scattered around it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    pub gt: BBox,
    pub preds: Vec<BBox>,
}

/// Draws instance `trial` of the stream selected by `seed`.
pub fn random_instance(seed: u64, trial: usize, n: usize, jitter: f64, spec: &SceneSpec) -> OracleInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let (wpx, hpx) = (spec.width as f64 * spec.stride, spec.height as f64 * spec.stride);
    let w = rng.random_range(spec.min_size..=spec.max_size) * spec.stride;
    let h = rng.random_range(spec.min_size..=spec.max_size) * spec.stride;
    let x1 = rng.random_range(0.0..=(wpx - w));
    let y1 = rng.random_range(0.0..=(hpx - h));
    let gt = BBox::new(x1, y1, x1 + w, y1 + h);
    let nx = Normal::new(0.0, jitter * w).expect("positive sigma");
    let ny = Normal::new(0.0, jitter * h).expect("positive sigma");
    let mut preds = Vec::with_capacity(n);
    while preds.len() < n {
        let b = BBox::new(
            gt.x1 + nx.sample(&mut rng),
            gt.y1 + ny.sample(&mut rng),
            gt.x2 + nx.sample(&mut rng),
            gt.y2 + ny.sample(&mut rng),
        );
        if b.is_valid() {
            preds.push(b);
        }
    }
    OracleInstance { gt, preds }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTrial {
    pub trial: usize,
    pub n: usize,
    pub best_original_iou: f64,
    pub rank0_iou: f64,
    pub oracle_iou: f64,
}

impl OracleTrial {
    pub fn gap(&self) -> f64 {
        self.oracle_iou - self.rank0_iou
    }
}

pub fn evaluate_instance(trial: usize, inst: &OracleInstance) -> Result<OracleTrial> {
    let pass = run_pass(&inst.preds, &inst.gt)?;
    let oracle = brute_force_optimal(&inst.preds, &inst.gt)?;
    Ok(OracleTrial {
        trial,
        n: inst.preds.len(),
        best_original_iou: pass.original.max(),
        rank0_iou: pass.recombined_scores.get(0, Side::Left),
        oracle_iou: oracle.best_iou,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStudy {
    pub trials: Vec<OracleTrial>,
}

impl OracleStudy {
    pub const CSV_HEADER: &'static str = "trial,n,best_original_iou,rank0_iou,oracle_iou,gap";
    pub const SUMMARY_HEADER: &'static str =
        "n,trials,mean_best_original_iou,mean_rank0_iou,mean_oracle_iou,mean_gap,max_gap,zero_gap_frac";

    pub fn mean_gap(&self) -> f64 {
        self.mean(OracleTrial::gap)
    }

    pub fn max_gap(&self) -> f64 {
        self.trials.iter().map(OracleTrial::gap).fold(0.0, f64::max)
    }

    fn mean(&self, f: impl Fn(&OracleTrial) -> f64) -> f64 {
        self.trials.iter().map(f).sum::<f64>() / self.trials.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                t.trial,
                t.n,
                t.best_original_iou,
                t.rank0_iou,
                t.oracle_iou,
                t.gap()
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let n = self.trials.first().map_or(0, |t| t.n);
        let zero = self.trials.iter().filter(|t| t.gap() == 0.0).count() as f64 / self.trials.len() as f64;
        format!(
            "{}\n{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            Self::SUMMARY_HEADER,
            n,
            self.trials.len(),
            self.mean(|t| t.best_original_iou),
            self.mean(|t| t.rank0_iou),
            self.mean(|t| t.oracle_iou),
            self.mean_gap(),
            self.max_gap(),
            zero
        )
    }
}

pub fn run_oracle_study(cfg: &OracleConfig, mode: ExecMode) -> Result<OracleStudy> {
    cfg.validate()?;
    let trials = exec::map_range(mode, cfg.trials, |t| {
        evaluate_instance(t, &random_instance(cfg.seed, t, cfg.n, cfg.jitter, &cfg.scene))
    });
    Ok(OracleStudy {
        trials: trials.into_iter().collect::<Result<_>>()?,
    })
}
