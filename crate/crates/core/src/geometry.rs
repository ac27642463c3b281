// SPDX-License-Identifier: Apache-2.0

//! Region arithmetic in normalized image coordinates.
//!
//! A [`Region`] is a point, an axis-aligned box or a polygon whose
//! coordinates are fractions of the image width and height. Pixel-space
//! inputs go through [`normalize_region`]; the inverse is
//! [`denormalize_region`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum area (normalized units) a perturbed box may have before redrawing.
pub const MIN_PERTURBED_AREA: f64 = 1e-6;
/// Side length a perturbed box is expanded to when every redraw collapsed.
pub const MIN_PERTURBED_SIDE: f64 = 1e-3;
/// Redraw budget for [`perturb_box`].
pub const MAX_PERTURB_RETRIES: usize = 100;

const SMALL_AREA_LIMIT: f64 = 32.0 * 32.0;
const MEDIUM_AREA_LIMIT: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("coordinate {axis}={value} of point {index} is outside [0, {limit}]")]
    OutOfFrame {
        index: usize,
        axis: char,
        value: f64,
        limit: f64,
    },
    #[error("{kind} region needs {expected} points, got {got}")]
    Arity {
        kind: RegionKind,
        expected: &'static str,
        got: usize,
    },
    #[error("expected a box region, got {0}")]
    NotABox(RegionKind),
    #[error("box corners are not ordered: ({x1}, {y1}) / ({x2}, {y2})")]
    UnorderedBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("noise scale {0} is outside [0, 1]")]
    InvalidScale(f64),
}

/// Pixel extent of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ImageDims {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ImageDims {
    type Error = GeometryError;

    fn try_from(raw: RawDims) -> Result<Self, Self::Error> {
        ImageDims::new(raw.width, raw.height)
    }
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Point,
    Box,
    Polygon,
}

impl RegionKind {
    /// Kind implied by a number of points: 1 is a point, 2 a box, 3+ a polygon.
    pub fn from_point_count(n: usize) -> Option<Self> {
        match n {
            0 => None,
            1 => Some(RegionKind::Point),
            2 => Some(RegionKind::Box),
            _ => Some(RegionKind::Polygon),
        }
    }

    fn check_arity(self, n: usize) -> Result<(), GeometryError> {
        let (ok, expected) = match self {
            RegionKind::Point => (n == 1, "exactly 1"),
            RegionKind::Box => (n == 2, "exactly 2"),
            RegionKind::Polygon => (n >= 3, "at least 3"),
        };
        if ok {
            Ok(())
        } else {
            Err(GeometryError::Arity {
                kind: self,
                expected,
                got: n,
            })
        }
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionKind::Point => "point",
            RegionKind::Box => "box",
            RegionKind::Polygon => "polygon",
        })
    }
}

/// A 2-D coordinate pair, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// A normalized multi-grained referent.
///
/// Invariants, checked on every construction path including
/// deserialization: the point count matches the kind, every coordinate lies
/// in `[0, 1]`, and box corners are ordered `(min, max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegion")]
pub struct Region {
    kind: RegionKind,
    points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_dims: Option<ImageDims>,
}

#[derive(Deserialize)]
struct RawRegion {
    kind: RegionKind,
    points: Vec<Point>,
    #[serde(default)]
    source_dims: Option<ImageDims>,
}

impl TryFrom<RawRegion> for Region {
    type Error = GeometryError;

    fn try_from(raw: RawRegion) -> Result<Self, Self::Error> {
        let mut r = Region::new(raw.kind, raw.points)?;
        r.source_dims = raw.source_dims;
        Ok(r)
    }
}

impl Region {
    /// Builds a region from normalized points, validating every invariant.
    pub fn new(kind: RegionKind, points: Vec<Point>) -> Result<Self, GeometryError> {
        kind.check_arity(points.len())?;
        check_frame(&points, 1.0, 1.0)?;
        if kind == RegionKind::Box {
            let (a, b) = (points[0], points[1]);
            if a.x > b.x || a.y > b.y {
                return Err(GeometryError::UnorderedBox {
                    x1: a.x,
                    y1: a.y,
                    x2: b.x,
                    y2: b.y,
                });
            }
        }
        Ok(Self {
            kind,
            points,
            source_dims: None,
        })
    }

    pub fn point(x: f64, y: f64) -> Result<Self, GeometryError> {
        Self::new(RegionKind::Point, vec![Point::new(x, y)])
    }

    /// Box from corners in any order.
    pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new(
            RegionKind::Box,
            vec![
                Point::new(x1.min(x2), y1.min(y2)),
                Point::new(x1.max(x2), y1.max(y2)),
            ],
        )
    }

    pub fn polygon(points: Vec<Point>) -> Result<Self, GeometryError> {
        Self::new(RegionKind::Polygon, points)
    }

    pub fn with_source_dims(mut self, dims: ImageDims) -> Self {
        self.source_dims = Some(dims);
        self
    }

    pub fn kind(&self) -> RegionKind {
        self.kind
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn source_dims(&self) -> Option<ImageDims> {
        self.source_dims
    }

    /// `(x1, y1, x2, y2)` of a box region.
    pub fn corners(&self) -> Result<(f64, f64, f64, f64), GeometryError> {
        if self.kind != RegionKind::Box {
            return Err(GeometryError::NotABox(self.kind));
        }
        let (a, b) = (self.points[0], self.points[1]);
        Ok((a.x, a.y, b.x, b.y))
    }

    /// Normalized area of a box region.
    pub fn area(&self) -> Result<f64, GeometryError> {
        let (x1, y1, x2, y2) = self.corners()?;
        Ok((x2 - x1) * (y2 - y1))
    }

    /// Whether `other` has the same kind and every coordinate within `tol`.
    pub fn approx_eq(&self, other: &Region, tol: f64) -> bool {
        self.kind == other.kind
            && self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol)
    }
}

fn check_frame(points: &[Point], width: f64, height: f64) -> Result<(), GeometryError> {
    for (index, p) in points.iter().enumerate() {
        // NaN fails both comparisons and is rejected here too.
        if !(p.x >= 0.0 && p.x <= width) {
            return Err(GeometryError::OutOfFrame {
                index,
                axis: 'x',
                value: p.x,
                limit: width,
            });
        }
        if !(p.y >= 0.0 && p.y <= height) {
            return Err(GeometryError::OutOfFrame {
                index,
                axis: 'y',
                value: p.y,
                limit: height,
            });
        }
    }
    Ok(())
}

/// Maps pixel coordinates to a normalized region, reordering box corners.
pub fn normalize_region(
    points_px: &[Point],
    kind: RegionKind,
    dims: ImageDims,
) -> Result<Region, GeometryError> {
    kind.check_arity(points_px.len())?;
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    check_frame(points_px, w, h)?;
    let mut points: Vec<Point> = points_px
        .iter()
        .map(|p| Point::new(p.x / w, p.y / h))
        .collect();
    if kind == RegionKind::Box {
        let (a, b) = (points[0], points[1]);
        points = vec![
            Point::new(a.x.min(b.x), a.y.min(b.y)),
            Point::new(a.x.max(b.x), a.y.max(b.y)),
        ];
    }
    Ok(Region::new(kind, points)?.with_source_dims(dims))
}

/// Maps a normalized region back to pixel coordinates of `dims`.
pub fn denormalize_region(r: &Region, dims: ImageDims) -> Vec<Point> {
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    r.points
        .iter()
        .map(|p| Point::new(p.x * w, p.y * h))
        .collect()
}

/// Intersection over union of two box regions; 0 when the union is empty.
pub fn iou(a: &Region, b: &Region) -> Result<f64, GeometryError> {
    let (ax1, ay1, ax2, ay2) = a.corners()?;
    let (bx1, by1, bx2, by2) = b.corners()?;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn box_area_px(r: &Region, dims: ImageDims) -> Result<f64, GeometryError> {
    let (x1, y1, x2, y2) = r.corners()?;
    Ok((x2 - x1) * f64::from(dims.width) * (y2 - y1) * f64::from(dims.height))
}

/// Area bucket used by the size-restricted AP variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// `small` below 32², `medium` below 96², `large` otherwise.
pub fn size_bucket(area_px: f64) -> SizeBucket {
    if area_px < SMALL_AREA_LIMIT {
        SizeBucket::Small
    } else if area_px < MEDIUM_AREA_LIMIT {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Randomly displaces each box corner by up to `scale` times the box side.
///
/// The four displacements are drawn from `U(-1, 1)` by a ChaCha8 generator
/// seeded with `seed`. Degenerate results are redrawn up to
/// [`MAX_PERTURB_RETRIES`] times; if every draw collapses, the last clamped
/// box is grown to [`MIN_PERTURBED_SIDE`] per side.
pub fn perturb_box(r: &Region, scale: f64, seed: u64) -> Result<Region, GeometryError> {
    let (x1, y1, x2, y2) = r.corners()?;
    if !(0.0..=1.0).contains(&scale) {
        return Err(GeometryError::InvalidScale(scale));
    }
    if scale == 0.0 {
        return Ok(r.clone());
    }
    let (w, h) = (x2 - x1, y2 - y1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..=MAX_PERTURB_RETRIES {
        let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let nx1 = x1 + u[0] * scale * w;
        let ny1 = y1 + u[1] * scale * h;
        let nx2 = x2 + u[2] * scale * w;
        let ny2 = y2 + u[3] * scale * h;
        let bx1 = nx1.min(nx2).clamp(0.0, 1.0);
        let bx2 = nx1.max(nx2).clamp(0.0, 1.0);
        let by1 = ny1.min(ny2).clamp(0.0, 1.0);
        let by2 = ny1.max(ny2).clamp(0.0, 1.0);
        last = (bx1, by1, bx2, by2);
        if (bx2 - bx1) * (by2 - by1) >= MIN_PERTURBED_AREA {
            return rebuild_box(r, bx1, by1, bx2, by2);
        }
    }
    let (bx1, bx2) = grow_interval(last.0, last.2, MIN_PERTURBED_SIDE);
    let (by1, by2) = grow_interval(last.1, last.3, MIN_PERTURBED_SIDE);
    rebuild_box(r, bx1, by1, bx2, by2)
}

fn rebuild_box(orig: &Region, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Region, GeometryError> {
    let mut out = Region::bbox(x1, y1, x2, y2)?;
    out.source_dims = orig.source_dims;
    Ok(out)
}

/// Widens `[lo, hi]` around its center to at least `min_len`, kept inside `[0, 1]`.
fn grow_interval(lo: f64, hi: f64, min_len: f64) -> (f64, f64) {
    if hi - lo >= min_len {
        return (lo, hi);
    }
    let center = (lo + hi) / 2.0;
    let mut a = center - min_len / 2.0;
    let mut b = center + min_len / 2.0;
    if a < 0.0 {
        b -= a;
        a = 0.0;
    }
    if b > 1.0 {
        a -= b - 1.0;
        b = 1.0;
    }
    (a.max(0.0), b.min(1.0))
}

/// Axis-aligned bounding box of any region.
pub fn enclosing_box(r: &Region) -> Region {
    if r.kind == RegionKind::Box {
        return r.clone();
    }
    let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
    let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &r.points {
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    Region {
        kind: RegionKind::Box,
        points: vec![Point::new(x1, y1), Point::new(x2, y2)],
        source_dims: r.source_dims,
    }
}
