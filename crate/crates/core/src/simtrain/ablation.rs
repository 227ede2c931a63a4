//! Variant grids: several training configurations over one scene suite.

use std::fmt::Write as _;

use crate::assignment::AssignStrategy;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

use super::scene::{generate_suite, Scene};
use super::train::{TrainConfig, Trainer, VariantConfig};

/// Parses a variant name into a configuration derived from `base`.
///
/// A name is `baseline` or `+`-joined tokens: `dnr` and at most one
/// assignment name (`none`, `pn`, `pni`, `mean`, `c0.5`, ...). D&R is off
/// unless listed and the assignment defaults to `none`. A leading `+` and
/// `=` inside ratios are accepted (`+dnr`, `c=0.5`). `full` and `both` are
/// shorthand for `dnr+mean`.
pub fn parse_variant(name: &str, base: &VariantConfig) -> Result<VariantConfig> {
    let mut v = VariantConfig {
        dnr: false,
        assignment: AssignStrategy::None,
        ..base.clone()
    };
    let name = name.trim();
    let body = match name {
        "baseline" => return Ok(v),
        "full" | "both" => "dnr+mean",
        other => other.strip_prefix('+').unwrap_or(other),
    };
    let mut assignment_set = false;
    for tok in body.split('+') {
        match tok.trim().replace('=', "").as_str() {
            "dnr" => v.dnr = true,
            "" => return Err(Error::ConfigInvalid(format!("empty token in variant '{name}'"))),
            t => {
                if assignment_set {
                    return Err(Error::ConfigInvalid(format!("variant '{name}' names two assignments")));
                }
                v.assignment = t.parse()?;
                assignment_set = true;
            }
        }
    }
    Ok(v)
}

/// Comma-separated variant names. Needs at least two distinct names.
pub fn parse_variant_list(list: &str, base: &VariantConfig) -> Result<Vec<(String, VariantConfig)>> {
    let mut out: Vec<(String, VariantConfig)> = Vec::new();
    for name in list.split(',').map(str::trim) {
        if out.iter().any(|(n, _)| n == name) {
            return Err(Error::ConfigInvalid(format!("variant '{name}' listed twice")));
        }
        out.push((name.to_string(), parse_variant(name, base)?));
    }
    if out.len() < 2 {
        return Err(Error::ConfigInvalid("an ablation needs at least two variants".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub final_iou_mean: f64,
    pub final_iou_var: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "variant,AP,AP50,AP75,final_iou_mean,final_iou_var";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.variant, r.ap, r.ap50, r.ap75, r.final_iou_mean, r.final_iou_var
            );
        }
        out
    }

    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

pub fn run_variant(
    scenes: &[Scene],
    base: &TrainConfig,
    name: &str,
    variant: &VariantConfig,
    mode: ExecMode,
) -> Result<AblationRow> {
    let mut t = Trainer::new(
        scenes.to_vec(),
        base.scene.num_categories,
        &base.init,
        variant.clone(),
        mode,
    )?;
    let log = t.run()?;
    let last = log.last().ok_or(Error::ConfigInvalid("no epochs".into()))?;
    let report = t.evaluate();
    Ok(AblationRow {
        variant: name.to_string(),
        ap: report.ap,
        ap50: report.ap50,
        ap75: report.ap75,
        final_iou_mean: last.iou_mean,
        final_iou_var: last.iou_var,
    })
}

/// Trains every variant on the suite drawn from `base` and evaluates it on
/// the same scenes. Rows follow the order of `variants`.
pub fn run_variant_grid(
    base: &TrainConfig,
    variants: &[(String, VariantConfig)],
    mode: ExecMode,
) -> Result<AblationTable> {
    base.validate()?;
    let scenes = generate_suite(base.variant.seed, base.scenes, &base.scene)?;
    let rows = exec::map(mode, variants, |(name, v)| run_variant(&scenes, base, name, v, mode));
    Ok(AblationTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}
