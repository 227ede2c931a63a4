//! Axis-aligned box algebra.
//!
//! Boxes are stored as corners `(x1, y1, x2, y2)` in image coordinates with
//! `y` growing downwards, so the top side is `y1` and the bottom side is `y2`.
//! A pixel regresses its box as four distances `(l, t, r, b)` from its
//! location to the sides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// The four sides of a box, in the column order used by boundary score
/// matrices: left, right, bottom, top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left = 0,
    Right = 1,
    Bottom = 2,
    Top = 3,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    pub const fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Closed containment: points on the border count as inside.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn side(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.x1,
            Side::Right => self.x2,
            Side::Bottom => self.y2,
            Side::Top => self.y1,
        }
    }

    /// Builds a box from side values indexed in [`Side`] order.
    pub fn from_sides(sides: [f64; 4]) -> Self {
        Self::new(
            sides[Side::Left.index()],
            sides[Side::Top.index()],
            sides[Side::Right.index()],
            sides[Side::Bottom.index()],
        )
    }

    pub fn sides(&self) -> [f64; 4] {
        [self.x1, self.x2, self.y2, self.y1]
    }

    /// Shrinks the box about its center, keeping `ratio` of each extent.
    pub fn shrink(&self, ratio: f64) -> Self {
        let c = self.center();
        let hw = 0.5 * self.width() * ratio;
        let hh = 0.5 * self.height() * ratio;
        Self::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }
}

/// Offsets from a pixel to the left, top, right and bottom sides of its box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distances {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl Distances {
    pub const fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Absolute per-side distance between a predicted box and its target.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deviations {
    pub dl: f64,
    pub dr: f64,
    pub db: f64,
    pub dt: f64,
}

impl Deviations {
    pub fn sum(&self) -> f64 {
        self.dl + self.dr + self.db + self.dt
    }

    pub fn get(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.dl,
            Side::Right => self.dr,
            Side::Bottom => self.db,
            Side::Top => self.dt,
        }
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

/// Intersection over union; two boxes with zero union score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = area(a) + area(b) - inter;
    let hull = area(&a.enclosing(b));
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

pub fn dist_to_box(p: Point, d: Distances) -> BBox {
    BBox::new(p.x - d.l, p.y - d.t, p.x + d.r, p.y + d.b)
}

pub fn box_to_dist(p: Point, b: &BBox) -> Result<Distances> {
    if !b.contains(p) {
        return Err(Error::PointOutsideBox { x: p.x, y: p.y });
    }
    Ok(Distances::new(p.x - b.x1, p.y - b.y1, b.x2 - p.x, b.y2 - p.y))
}

pub fn boundary_deviations(pred: &BBox, gt: &BBox) -> Deviations {
    Deviations {
        dl: (pred.x1 - gt.x1).abs(),
        dr: (pred.x2 - gt.x2).abs(),
        db: (pred.y2 - gt.y2).abs(),
        dt: (pred.y1 - gt.y1).abs(),
    }
}
