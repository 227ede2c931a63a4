//! Synthetic scenes and their on-disk format.
//!
//! A scene file is one JSON object:
//!
//! ```json
//! {"grid":{"width":32,"height":32},"stride":8.0,"seed":0,
//!  "instances":[{"x1":12.5,"y1":40.0,"x2":80.25,"y2":96.0,"category":1}]}
//! ```
//!
//! Coordinates are in image units; pixel `(ix, iy)` of the base grid sits at
//! `((ix + 0.5) * stride, (iy + 0.5) * stride)`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Point};
use crate::postproc::GtInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub category: usize,
}

impl Instance {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }

    /// Whether `p` lies on the object itself: the ellipse inscribed in the
    /// box. Box pixels outside it see background.
    pub fn on_object(&self, p: Point) -> bool {
        self.radial(p) <= 1.0
    }

    /// Squared normalized elliptical radius of `p` about the box center.
    pub fn radial(&self, p: Point) -> f64 {
        let b = self.bbox();
        let c = b.center();
        let dx = (p.x - c.x) / (0.5 * b.width());
        let dy = (p.y - c.y) / (0.5 * b.height());
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: Grid,
    pub stride: f64,
    pub seed: u64,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn extent(&self) -> BBox {
        BBox::new(
            0.0,
            0.0,
            self.grid.width as f64 * self.stride,
            self.grid.height as f64 * self.stride,
        )
    }

    pub fn gt_instances(&self) -> Vec<GtInstance> {
        self.instances
            .iter()
            .map(|i| GtInstance {
                bbox: i.bbox(),
                category: i.category,
            })
            .collect()
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        let extent = self.extent();
        if self.grid.width == 0 || self.grid.height == 0 || !(self.stride > 0.0) {
            return Err(Error::SpecInvalid("empty grid or non-positive stride".into()));
        }
        for (k, inst) in self.instances.iter().enumerate() {
            let b = inst.bbox();
            if !(b.width() > 0.0 && b.height() > 0.0) {
                return Err(Error::SpecInvalid(format!("instance {k} has no area")));
            }
            if b.x1 < extent.x1 || b.y1 < extent.y1 || b.x2 > extent.x2 || b.y2 > extent.y2 {
                return Err(Error::SpecInvalid(format!("instance {k} leaves the grid")));
            }
            if inst.category >= num_categories {
                return Err(Error::SpecInvalid(format!(
                    "instance {k} has category {} but only {num_categories} exist",
                    inst.category
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub stride: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance side lengths, in grid cells.
    pub min_size: f64,
    pub max_size: f64,
    /// Probability that a new instance may overlap earlier ones. At 0 no two
    /// boxes intersect.
    pub overlap_rate: f64,
    /// Overlapping pairs never exceed this IoU.
    pub max_pair_iou: f64,
    pub num_categories: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            stride: 8.0,
            min_instances: 2,
            max_instances: 5,
            min_size: 5.0,
            max_size: 14.0,
            overlap_rate: 0.3,
            max_pair_iou: 0.4,
            num_categories: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("grid {}x{} is smaller than 8x8", self.width, self.height));
        }
        if !(self.stride > 0.0) {
            return bad("stride must be positive".into());
        }
        if self.min_instances < 1 || self.max_instances > 16 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance count range {}..={} must lie within 1..=16",
                self.min_instances, self.max_instances
            ));
        }
        let fits = self.width.min(self.height) as f64;
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= fits) {
            return bad(format!(
                "size range {}..={} must be positive and fit the grid",
                self.min_size, self.max_size
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_rate) || !(0.0..=1.0).contains(&self.max_pair_iou) {
            return bad("overlap_rate and max_pair_iou must lie in [0, 1]".into());
        }
        if self.num_categories == 0 {
            return bad("need at least one category".into());
        }
        Ok(())
    }
}

const PLACEMENT_ATTEMPTS: usize = 2000;

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(spec.min_instances..=spec.max_instances);
    let (wpx, hpx) = (spec.width as f64 * spec.stride, spec.height as f64 * spec.stride);
    let mut instances: Vec<Instance> = Vec::with_capacity(target);

    let mut attempts = 0;
    while instances.len() < target && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let w = rng.random_range(spec.min_size..=spec.max_size) * spec.stride;
        let h = rng.random_range(spec.min_size..=spec.max_size) * spec.stride;
        let x1 = rng.random_range(0.0..=(wpx - w));
        let y1 = rng.random_range(0.0..=(hpx - h));
        let may_overlap = rng.random_bool(spec.overlap_rate);
        let category = rng.random_range(0..spec.num_categories);
        let b = BBox::new(x1, y1, x1 + w, y1 + h);
        let ok = instances.iter().all(|o| {
            let ob = o.bbox();
            if may_overlap {
                iou(&b, &ob) <= spec.max_pair_iou
            } else {
                b.intersection(&ob) == 0.0
            }
        });
        if ok {
            instances.push(Instance {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                category,
            });
        }
    }
    if instances.len() < spec.min_instances {
        return Err(Error::SpecInvalid(format!(
            "could only place {} of at least {} instances",
            instances.len(),
            spec.min_instances
        )));
    }
    Ok(Scene {
        grid: Grid {
            width: spec.width,
            height: spec.height,
        },
        stride: spec.stride,
        seed,
        instances,
    })
}

/// Seed of the `index`-th scene of a suite drawn from `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn generate_suite(base_seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(base_seed, i), spec))
        .collect()
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.json")
}

pub fn write_scenes(dir: &Path, scenes: &[Scene]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let p = dir.join(scene_file_name(i));
        std::fs::write(&p, s.to_json() + "\n")?;
        paths.push(p);
    }
    Ok(paths)
}

/// Reads every `*.json` file in `dir`, in file-name order.
pub fn read_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Io(format!("no scene files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            Scene::from_json(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
        })
        .collect()
}
