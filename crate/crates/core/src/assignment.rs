//! Positive/negative labeling of the pixels inside an instance.
//!
//! The adaptive rule compares every candidate's classification score and
//! regression IoU with the instance means: a pixel at or above either mean
//! is positive, a pixel below both is negative. The remaining strategies
//! are the fixed baselines it is compared against.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{area, BBox, Point};

pub const PN_SIGMA: f64 = 0.4;
pub const PNI_SIGMA_POS: f64 = 0.2;
pub const PNI_SIGMA_IGN: f64 = 0.5;

/// Pixels inside one instance with their scores. All vectors are parallel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub ids: Vec<usize>,
    pub points: Vec<Point>,
    /// Maximum classification probability over categories.
    pub cls: Vec<f64>,
    /// IoU of the pixel's predicted box with the target.
    pub reg: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, point: Point, cls: f64, reg: f64) {
        self.ids.push(id);
        self.points.push(point);
        self.cls.push(cls);
        self.reg.push(reg);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub ignored: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len() + self.ignored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_labels(ids: &[usize], labels: impl IntoIterator<Item = Label>) -> Self {
        let mut p = Partition::default();
        for (&id, label) in ids.iter().zip(labels) {
            match label {
                Label::Positive => p.positives.push(id),
                Label::Negative => p.negatives.push(id),
                Label::Ignored => p.ignored.push(id),
            }
        }
        p
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    Positive,
    Negative,
    Ignored,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn semantic_consistency_assign(cands: &CandidateSet) -> Result<Partition> {
    if cands.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let c_mean = mean(&cands.cls);
    let r_mean = mean(&cands.reg);
    let labels = cands.cls.iter().zip(&cands.reg).map(|(&c, &r)| {
        if c >= c_mean || r >= r_mean {
            Label::Positive
        } else {
            Label::Negative
        }
    });
    Ok(Partition::from_labels(&cands.ids, labels))
}

/// Number of positives a constant ratio keeps out of `m` candidates.
pub fn ratio_count(ratio: f64, m: usize) -> usize {
    // the epsilon keeps products like 0.7 * 10 from flooring to 6
    ((ratio * m as f64 + 1e-9).floor() as usize).clamp(1, m)
}

/// Keeps the top `floor(c * M)` candidates by regression IoU (at least one).
pub fn constant_ratio_assign(cands: &CandidateSet, ratio: f64) -> Result<Partition> {
    if cands.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::ConfigInvalid(format!("ratio {ratio} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands.reg[b]
            .total_cmp(&cands.reg[a])
            .then(cands.ids[a].cmp(&cands.ids[b]))
    });
    let keep = ratio_count(ratio, cands.len());
    let mut labels = vec![Label::Negative; cands.len()];
    for &k in &order[..keep] {
        labels[k] = Label::Positive;
    }
    Ok(Partition::from_labels(&cands.ids, labels))
}

pub fn center_sampling_assign(cands: &CandidateSet, gt: &BBox, sigma: f64) -> Result<Partition> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::ConfigInvalid(format!("sigma {sigma} outside (0, 1]")));
    }
    let region = gt.shrink(sigma);
    let labels = cands.points.iter().map(|&p| {
        if region.contains(p) {
            Label::Positive
        } else {
            Label::Negative
        }
    });
    Ok(Partition::from_labels(&cands.ids, labels))
}

pub fn pni_assign(cands: &CandidateSet, gt: &BBox, sigma_pos: f64, sigma_ign: f64) -> Result<Partition> {
    if !(sigma_pos > 0.0 && sigma_pos < sigma_ign && sigma_ign <= 1.0) {
        return Err(Error::InvalidRatios {
            pos: sigma_pos,
            ign: sigma_ign,
        });
    }
    let pos = gt.shrink(sigma_pos);
    let ign = gt.shrink(sigma_ign);
    let labels = cands.points.iter().map(|&p| {
        if pos.contains(p) {
            Label::Positive
        } else if ign.contains(p) {
            Label::Ignored
        } else {
            Label::Negative
        }
    });
    Ok(Partition::from_labels(&cands.ids, labels))
}

/// Picks the smallest-area instance whose box contains `pixel`; equal areas
/// go to the lowest instance id.
pub fn resolve_overlaps(instances: &[(usize, BBox)], pixel: Point) -> Option<usize> {
    instances
        .iter()
        .filter(|(_, b)| b.contains(pixel))
        .min_by(|(ia, a), (ib, b)| area(a).total_cmp(&area(b)).then(ia.cmp(ib)))
        .map(|(id, _)| *id)
}

/// Per-level `(min, max]` ranges of the largest regression distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct LevelRanges {
    ranges: Vec<(f64, f64)>,
}

impl LevelRanges {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        let bad = |msg: &str| Err(Error::ConfigInvalid(format!("level ranges: {msg}")));
        if ranges.is_empty() {
            return bad("empty");
        }
        if ranges[0].0 != 0.0 {
            return bad("first level must start at 0");
        }
        if ranges.last().map(|r| r.1) != Some(f64::INFINITY) {
            return bad("last level must be unbounded");
        }
        for w in ranges.windows(2) {
            if w[0].1 != w[1].0 {
                return bad("levels must be contiguous");
            }
        }
        if ranges.iter().any(|&(lo, hi)| !(lo < hi)) {
            return bad("each level needs min < max");
        }
        Ok(Self { ranges })
    }

    pub fn single() -> Self {
        Self {
            ranges: vec![(0.0, f64::INFINITY)],
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.ranges
    }
}

impl Default for LevelRanges {
    fn default() -> Self {
        Self::single()
    }
}

impl TryFrom<Vec<(f64, f64)>> for LevelRanges {
    type Error = Error;

    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LevelRanges> for Vec<(f64, f64)> {
    fn from(l: LevelRanges) -> Self {
        l.ranges
    }
}

/// Largest distance from the box center to a side.
pub fn max_regression_distance(gt: &BBox) -> f64 {
    0.5 * gt.width().max(gt.height())
}

pub fn fpn_level_assign(gt: &BBox, ranges: &LevelRanges) -> usize {
    let d = max_regression_distance(gt);
    ranges
        .as_slice()
        .iter()
        .position(|&(lo, hi)| d > lo && d <= hi)
        .unwrap_or(0)
}

/// Assignment strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AssignStrategy {
    /// Every in-box pixel is positive.
    None,
    /// Center region positive, the rest negative.
    CenterSampling { sigma: f64 },
    /// Center positive, a ring ignored, the rest negative.
    Pni { sigma_pos: f64, sigma_ign: f64 },
    /// Top fraction by regression IoU.
    ConstantRatio(f64),
    /// Adaptive mean threshold on classification and regression scores.
    Mean,
}

impl AssignStrategy {
    pub fn apply(&self, cands: &CandidateSet, gt: &BBox) -> Result<Partition> {
        match *self {
            AssignStrategy::None => {
                if cands.is_empty() {
                    return Err(Error::EmptyCandidates);
                }
                Ok(Partition {
                    positives: cands.ids.clone(),
                    ..Partition::default()
                })
            }
            AssignStrategy::CenterSampling { sigma } => center_sampling_assign(cands, gt, sigma),
            AssignStrategy::Pni { sigma_pos, sigma_ign } => pni_assign(cands, gt, sigma_pos, sigma_ign),
            AssignStrategy::ConstantRatio(c) => constant_ratio_assign(cands, c),
            AssignStrategy::Mean => semantic_consistency_assign(cands),
        }
    }
}

impl fmt::Display for AssignStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignStrategy::None => write!(f, "none"),
            AssignStrategy::CenterSampling { sigma } if *sigma == PN_SIGMA => write!(f, "pn"),
            AssignStrategy::CenterSampling { sigma } => write!(f, "pn{sigma}"),
            AssignStrategy::Pni { sigma_pos, sigma_ign }
                if *sigma_pos == PNI_SIGMA_POS && *sigma_ign == PNI_SIGMA_IGN =>
            {
                write!(f, "pni")
            }
            AssignStrategy::Pni { sigma_pos, sigma_ign } => write!(f, "pni{sigma_pos}/{sigma_ign}"),
            AssignStrategy::ConstantRatio(c) => write!(f, "c{c}"),
            AssignStrategy::Mean => write!(f, "mean"),
        }
    }
}

impl std::str::FromStr for AssignStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| Error::ConfigInvalid(format!("bad number in assignment '{s}'")))
        };
        let strategy = match s {
            "none" => AssignStrategy::None,
            "pn" => AssignStrategy::CenterSampling { sigma: PN_SIGMA },
            "pni" => AssignStrategy::Pni {
                sigma_pos: PNI_SIGMA_POS,
                sigma_ign: PNI_SIGMA_IGN,
            },
            "mean" => AssignStrategy::Mean,
            _ if s.starts_with("pni") => {
                let (a, b) = s[3..]
                    .split_once('/')
                    .ok_or_else(|| Error::ConfigInvalid(format!("expected pni<pos>/<ign>, got '{s}'")))?;
                AssignStrategy::Pni {
                    sigma_pos: num(a)?,
                    sigma_ign: num(b)?,
                }
            }
            _ if s.starts_with("pn") => AssignStrategy::CenterSampling { sigma: num(&s[2..])? },
            _ if s.starts_with('c') => AssignStrategy::ConstantRatio(num(&s[1..])?),
            _ => return Err(Error::ConfigInvalid(format!("unknown assignment '{s}'"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl AssignStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AssignStrategy::CenterSampling { sigma } if !(sigma > 0.0 && sigma <= 1.0) => {
                Err(Error::ConfigInvalid(format!("sigma {sigma} outside (0, 1]")))
            }
            AssignStrategy::Pni { sigma_pos, sigma_ign }
                if !(sigma_pos > 0.0 && sigma_pos < sigma_ign && sigma_ign <= 1.0) =>
            {
                Err(Error::InvalidRatios {
                    pos: sigma_pos,
                    ign: sigma_ign,
                })
            }
            AssignStrategy::ConstantRatio(c) if !(c > 0.0 && c <= 1.0) => {
                Err(Error::ConfigInvalid(format!("ratio {c} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl TryFrom<String> for AssignStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AssignStrategy> for String {
    fn from(a: AssignStrategy) -> Self {
        a.to_string()
    }
}
