//! Rectangular areas, correspondence fields and IoU ground truth.
//!
//! Areas are continuous axis-aligned rectangles in pixel coordinates. An area
//! set owns the image extent its rectangles live in; ids are positions in the
//! set. Ground truth between two images is the IoU between each projected
//! image-A area and each image-B area, where the projection is the bounding box
//! of a sampled lattice mapped through a [`CorrespondenceField`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lattice resolution used by [`project_area`].
pub const DEFAULT_GRID_K: usize = 16;

/// Fraction of lattice samples that must map validly for a projection to exist.
pub const MIN_VALID_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Area {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub id: usize,
}

impl Area {
    pub fn new(id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let area = Self { x0, y0, x1, y1, id };
        area.validate()?;
        Ok(area)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArea {
                index: self.id,
                reason: "non-finite coordinate".into(),
            });
        }
        if !(self.x1 > self.x0 && self.y1 > self.y0) {
            return Err(Error::InvalidArea {
                index: self.id,
                reason: format!(
                    "degenerate rectangle ({}, {}, {}, {})",
                    self.x0, self.y0, self.x1, self.y1
                ),
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn size(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn with_id(self, id: usize) -> Self {
        Self { id, ..self }
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &Area) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing positive remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Area> {
        let x0 = self.x0.max(0.0);
        let y0 = self.y0.max(0.0);
        let x1 = self.x1.min(width);
        let y1 = self.y1.min(height);
        (x1 > x0 && y1 > y0).then_some(Area { x0, y0, x1, y1, id: self.id })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Areas of one image. Ids always equal positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaSet {
    areas: Vec<Area>,
    image_width: f64,
    image_height: f64,
}

impl AreaSet {
    /// Builds a set from rectangles, renumbering ids to positions.
    pub fn new(image_width: f64, image_height: f64, rects: impl IntoIterator<Item = Area>) -> Result<Self> {
        if !(image_width > 0.0 && image_height > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "image extent must be positive, got {image_width}x{image_height}"
            )));
        }
        let areas: Vec<Area> = rects
            .into_iter()
            .enumerate()
            .map(|(i, a)| a.with_id(i))
            .collect();
        for a in &areas {
            a.validate()?;
            if a.x0 < 0.0 || a.y0 < 0.0 || a.x1 > image_width || a.y1 > image_height {
                return Err(Error::InvalidArea {
                    index: a.id,
                    reason: format!("outside image bounds {image_width}x{image_height}"),
                });
            }
        }
        Ok(Self {
            areas,
            image_width,
            image_height,
        })
    }

    pub fn areas(&self) -> &[Area] {
        &self.areas
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn image_width(&self) -> f64 {
        self.image_width
    }

    pub fn image_height(&self) -> f64 {
        self.image_height
    }

    pub fn diagonal(&self) -> f64 {
        self.image_width.hypot(self.image_height)
    }

    /// Subset keeping the given ids in order; the new set is renumbered.
    pub fn subset(&self, ids: &[usize]) -> AreaSet {
        AreaSet {
            areas: ids
                .iter()
                .enumerate()
                .map(|(k, &i)| self.areas[i].with_id(k))
                .collect(),
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AreaSetJson {
            image_width: self.image_width,
            image_height: self.image_height,
            areas: self.areas.iter().map(Area::as_array).collect(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: AreaSetJson = serde_json::from_str(text)?;
        let rects = raw
            .areas
            .iter()
            .enumerate()
            .map(|(i, r)| Area { x0: r[0], y0: r[1], x1: r[2], y1: r[3], id: i });
        Self::new(raw.image_width, raw.image_height, rects)
    }
}

#[derive(Serialize, Deserialize)]
struct AreaSetJson {
    image_width: f64,
    image_height: f64,
    areas: Vec<[f64; 4]>,
}

/// Tightest rectangle around the set pixels of `mask`, indexed `[y, x]`.
///
/// Pixel `(x, y)` covers `[x, x + 1) x [y, y + 1)`.
pub fn mask_to_area(mask: &Array2<bool>) -> Result<Area> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &set) in mask.indexed_iter() {
        if !set {
            continue;
        }
        bounds = Some(match bounds {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyMask)?;
    Ok(Area {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: (x1 + 1) as f64,
        y1: (y1 + 1) as f64,
        id: 0,
    })
}

pub fn rect_iou(a: &Area, b: &Area) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.size() + b.size() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Exact area of the union of rectangles by coordinate compression.
pub fn union_area(rects: &[Area]) -> f64 {
    if rects.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x0, r.x1]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut total = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(rects.len());
    for slab in xs.windows(2) {
        let (xl, xr) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(
            rects
                .iter()
                .filter(|r| r.x0 <= xl && r.x1 >= xr)
                .map(|r| (r.y0, r.y1)),
        );
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let (mut lo, mut hi) = spans[0];
        for &(s, e) in &spans[1..] {
            if s > hi {
                covered += hi - lo;
                lo = s;
                hi = e;
            } else if e > hi {
                hi = e;
            }
        }
        covered += hi - lo;
        total += covered * (xr - xl);
    }
    total
}

/// Row-major 3x3 homography mapping image-A pixels to image-B pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: [f64; 9],
}

impl Homography {
    pub fn new(h: [f64; 9]) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography".into()));
        }
        let det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6]);
        if det.abs() <= 1e-12 {
            return Err(Error::SingularHomography(det));
        }
        Ok(Self { h })
    }

    pub fn identity() -> Self {
        Self {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    pub fn matrix(&self) -> &[f64; 9] {
        &self.h
    }

    /// Maps a point; `None` when it lands on or behind the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.h;
        let w = h[6] * x + h[7] * y + h[8];
        if w <= 1e-12 {
            return None;
        }
        Some(((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w))
    }

    /// Matrix product `self * other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        let (a, b) = (&self.h, &other.h);
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Homography::new(out)
    }
}

/// Sampled per-pixel flow over image A with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlow {
    width: usize,
    height: usize,
    stride: f64,
    flow: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl DenseFlow {
    /// Grid node `(gx, gy)` sits at image-A position `(gx * stride, gy * stride)`.
    pub fn new(width: usize, height: usize, stride: f64, flow: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if width < 2 || height < 2 || !(stride > 0.0) {
            return Err(Error::InvalidConfig(
                "dense grid needs at least 2x2 nodes and a positive stride".into(),
            ));
        }
        if flow.len() != width * height {
            return Err(crate::error::shape_mismatch("dense flow", &[width * height], &[flow.len()]));
        }
        if valid.len() != width * height {
            return Err(crate::error::shape_mismatch("dense validity", &[width * height], &[valid.len()]));
        }
        Ok(Self {
            width,
            height,
            stride,
            flow,
            valid,
        })
    }

    fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let gx = x / self.stride;
        let gy = y / self.stride;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(0.0..=max_x).contains(&gx) || !(0.0..=max_y).contains(&gy) {
            return None;
        }
        let ix = (gx.floor() as usize).min(self.width - 2);
        let iy = (gy.floor() as usize).min(self.height - 2);
        let tx = gx - ix as f64;
        let ty = gy - iy as f64;
        let idx = |cx: usize, cy: usize| cy * self.width + cx;
        let corners = [idx(ix, iy), idx(ix + 1, iy), idx(ix, iy + 1), idx(ix + 1, iy + 1)];
        if corners.iter().any(|&c| !self.valid[c]) {
            return None;
        }
        let weights = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
        let (mut fx, mut fy) = (0.0, 0.0);
        for (&c, w) in corners.iter().zip(weights) {
            fx += w * self.flow[c][0];
            fy += w * self.flow[c][1];
        }
        Some((x + fx, y + fy))
    }
}

/// Stand-in for pose + depth reprojection between two images.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrespondenceField {
    Homography(Homography),
    DenseGrid(DenseFlow),
}

impl CorrespondenceField {
    pub fn identity() -> Self {
        CorrespondenceField::Homography(Homography::identity())
    }

    pub fn map_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = match self {
            CorrespondenceField::Homography(h) => h.apply(x, y),
            CorrespondenceField::DenseGrid(g) => g.apply(x, y),
        }?;
        (p.0.is_finite() && p.1.is_finite()).then_some(p)
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = match self {
            CorrespondenceField::Homography(h) => FieldJson::Homography { h: h.h.to_vec() },
            CorrespondenceField::DenseGrid(g) => FieldJson::Grid {
                w: g.width,
                h: g.height,
                stride: Some(g.stride),
                flow: g.flow.iter().flat_map(|f| [f[0], f[1]]).collect(),
                valid: g.valid.clone(),
            },
        };
        Ok(serde_json::to_string(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        match serde_json::from_str(text)? {
            FieldJson::Homography { h } => {
                let h: [f64; 9] = h.as_slice().try_into().map_err(|_| Error::Format {
                    what: "homography field",
                    reason: format!("expected 9 numbers, got {}", h.len()),
                })?;
                Ok(CorrespondenceField::Homography(Homography::new(h)?))
            }
            FieldJson::Grid { w, h, stride, flow, valid } => {
                if flow.len() != 2 * w * h {
                    return Err(Error::Format {
                        what: "grid field",
                        reason: format!("expected {} flow numbers, got {}", 2 * w * h, flow.len()),
                    });
                }
                let flow = flow.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                Ok(CorrespondenceField::DenseGrid(DenseFlow::new(
                    w,
                    h,
                    stride.unwrap_or(1.0),
                    flow,
                    valid,
                )?))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum FieldJson {
    Homography {
        h: Vec<f64>,
    },
    Grid {
        w: usize,
        h: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<f64>,
        flow: Vec<f64>,
        valid: Vec<bool>,
    },
}

/// Bounding box of a `grid_k x grid_k` lattice over `r` mapped through `field`.
///
/// Returns `None` when fewer than a quarter of the samples map validly or the
/// survivors collapse to a degenerate box.
pub fn project_area(r: &Area, field: &CorrespondenceField, grid_k: usize) -> Option<Area> {
    let k = grid_k.max(2);
    let step = |lo: f64, hi: f64, u: usize| lo + (hi - lo) * u as f64 / (k - 1) as f64;
    let mut valid = 0usize;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in 0..k {
        let y = step(r.y0, r.y1, v);
        for u in 0..k {
            let x = step(r.x0, r.x1, u);
            if let Some((px, py)) = field.map_point(x, y) {
                valid += 1;
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
            }
        }
    }
    if (valid as f64) < MIN_VALID_FRACTION * (k * k) as f64 || !(x1 > x0 && y1 > y0) {
        return None;
    }
    Some(Area { x0, y0, x1, y1, id: r.id })
}

/// IoU labels in `[0, 1]`, rows indexing image A and columns image B.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMatrix(Array2<f64>);

impl GtMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format {
                what: "ground-truth matrix",
                reason: "entries must lie in [0, 1]".into(),
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

pub fn gt_matrix(set_a: &AreaSet, set_b: &AreaSet, field: &CorrespondenceField) -> GtMatrix {
    gt_matrix_with_grid(set_a, set_b, field, DEFAULT_GRID_K)
}

pub fn gt_matrix_with_grid(set_a: &AreaSet, set_b: &AreaSet, field: &CorrespondenceField, grid_k: usize) -> GtMatrix {
    let mut values = Array2::zeros((set_a.len(), set_b.len()));
    for (i, a) in set_a.areas().iter().enumerate() {
        let Some(proj) = project_area(a, field, grid_k) else {
            continue;
        };
        for (j, b) in set_b.areas().iter().enumerate() {
            values[[i, j]] = rect_iou(&proj, b);
        }
    }
    GtMatrix(values)
}

/// Positive labels: entries strictly above `lambda_gt`.
pub fn binarize_gt(gt: &GtMatrix, lambda_gt: f64) -> Array2<bool> {
    gt.0.mapv(|v| v > lambda_gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Area {
        Area { x0, y0, x1, y1, id: 0 }
    }

    fn raster_iou(a: &Area, b: &Area, grid: usize) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..grid {
            for x in 0..grid {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ia = px > a.x0 && px < a.x1 && py > a.y0 && py < a.y1;
                let ib = px > b.x0 && px < b.x1 && py > b.y0 && py < b.y1;
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn mask_single_pixel() {
        let mut mask = Array2::from_elem((10, 10), false);
        mask[[7, 3]] = true;
        assert_eq!(mask_to_area(&mask).unwrap().as_array(), [3.0, 7.0, 4.0, 8.0]);
    }

    #[test]
    fn mask_two_corners() {
        let mut mask = Array2::from_elem((5, 10), false);
        mask[[0, 0]] = true;
        mask[[4, 9]] = true;
        assert_eq!(mask_to_area(&mask).unwrap().as_array(), [0.0, 0.0, 10.0, 5.0]);
    }

    #[test]
    fn mask_empty_is_error() {
        let mask = Array2::from_elem((4, 4), false);
        assert!(matches!(mask_to_area(&mask), Err(Error::EmptyMask)));
    }

    #[test]
    fn mask_random_blob_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut mask = Array2::from_elem((32, 48), false);
            let mut pts = Vec::new();
            for _ in 0..20 {
                let (x, y) = (rng.random_range(0..48usize), rng.random_range(0..32usize));
                mask[[y, x]] = true;
                pts.push((x, y));
            }
            let x0 = pts.iter().map(|p| p.0).min().unwrap() as f64;
            let x1 = pts.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
            let y0 = pts.iter().map(|p| p.1).min().unwrap() as f64;
            let y1 = pts.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
            assert_eq!(mask_to_area(&mask).unwrap().as_array(), [x0, y0, x1, y1]);
        }
    }

    #[test]
    fn iou_examples() {
        let a = rect(0.0, 0.0, 10.0, 10.0);
        assert_eq!(rect_iou(&a, &a), 1.0);
        assert_eq!(rect_iou(&a, &rect(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = rect(5.0, 0.0, 15.0, 10.0);
        let oracle = raster_iou(&a, &b, 64);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((rect_iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn union_area_matches_raster() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let rects: Vec<Area> = (0..rng.random_range(1..6))
                .map(|_| {
                    let x0 = rng.random_range(0..50) as f64;
                    let y0 = rng.random_range(0..50) as f64;
                    rect(x0, y0, x0 + rng.random_range(1..15) as f64, y0 + rng.random_range(1..15) as f64)
                })
                .collect();
            let mut count = 0usize;
            for y in 0..64 {
                for x in 0..64 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if rects.iter().any(|r| px > r.x0 && px < r.x1 && py > r.y0 && py < r.y1) {
                        count += 1;
                    }
                }
            }
            assert!((union_area(&rects) - count as f64).abs() <= 1e-3 * count as f64);
        }
    }

    #[test]
    fn project_identity_and_translation() {
        let r = rect(0.0, 0.0, 10.0, 10.0);
        let id = project_area(&r, &CorrespondenceField::identity(), 16).unwrap();
        assert_eq!(id.as_array(), [0.0, 0.0, 10.0, 10.0]);
        let t = CorrespondenceField::Homography(Homography::translation(5.0, 5.0));
        assert_eq!(project_area(&r, &t, 16).unwrap().as_array(), [5.0, 5.0, 15.0, 15.0]);
    }

    #[test]
    fn project_mostly_invalid_is_none() {
        // Line at infinity crosses the rectangle: x > 5 maps behind the camera.
        let h = Homography::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.2, 0.0, 1.0]).unwrap();
        let r = rect(0.0, 0.0, 40.0, 10.0);
        assert!(project_area(&r, &CorrespondenceField::Homography(h), 16).is_none());
    }

    #[test]
    fn dense_grid_translation() {
        let (w, h) = (21, 21);
        let flow = vec![[2.0, -1.0]; w * h];
        let valid = vec![true; w * h];
        let field = CorrespondenceField::DenseGrid(DenseFlow::new(w, h, 1.0, flow, valid).unwrap());
        let out = project_area(&rect(2.0, 3.0, 12.0, 8.0), &field, 8).unwrap();
        for (got, want) in out.as_array().iter().zip([4.0, 2.0, 14.0, 7.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let back = CorrespondenceField::from_json(&field.to_json().unwrap()).unwrap();
        assert_eq!(back, field);
    }

    #[test]
    fn singular_homography_rejected() {
        assert!(matches!(
            Homography::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]),
            Err(Error::SingularHomography(_))
        ));
    }

    #[test]
    fn gt_identity_has_unit_diagonal() {
        let set = AreaSet::new(
            100.0,
            100.0,
            vec![rect(0.0, 0.0, 30.0, 30.0), rect(50.0, 50.0, 90.0, 80.0), rect(10.0, 40.0, 40.0, 90.0)],
        )
        .unwrap();
        let gt = gt_matrix(&set, &set, &CorrespondenceField::identity());
        for i in 0..3 {
            assert_eq!(gt.values()[[i, i]], 1.0);
            let row = gt.values().row(i);
            let best = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, i);
        }
    }

    #[test]
    fn gt_disjoint_projection_is_zero() {
        let a = AreaSet::new(100.0, 100.0, vec![rect(0.0, 0.0, 10.0, 10.0)]).unwrap();
        let b = AreaSet::new(100.0, 100.0, vec![rect(50.0, 50.0, 60.0, 60.0)]).unwrap();
        let gt = gt_matrix(&a, &b, &CorrespondenceField::identity());
        assert_eq!(gt.values()[[0, 0]], 0.0);
    }

    #[test]
    fn binarize_is_strict() {
        let gt = GtMatrix::new(ndarray::array![[0.25, 0.2, 0.19]]).unwrap();
        assert_eq!(binarize_gt(&gt, 0.2), ndarray::array![[true, false, false]]);
    }

    #[test]
    fn area_set_json_round_trip() {
        let set = AreaSet::new(64.0, 48.0, vec![rect(1.0, 2.0, 3.5, 4.25)]).unwrap();
        let text = set.to_json().unwrap();
        assert_eq!(text, r#"{"image_width":64.0,"image_height":48.0,"areas":[[1.0,2.0,3.5,4.25]]}"#);
        assert_eq!(AreaSet::from_json(&text).unwrap(), set);
    }

    #[test]
    fn out_of_bounds_area_rejected() {
        assert!(AreaSet::new(10.0, 10.0, vec![rect(5.0, 5.0, 11.0, 6.0)]).is_err());
    }

    fn arb_rect() -> impl Strategy<Value = Area> {
        (0u32..50, 0u32..50, 1u32..14, 1u32..14)
            .prop_map(|(x, y, w, h)| rect(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_matches_raster(a in arb_rect(), b in arb_rect()) {
            let ab = rect_iou(&a, &b);
            prop_assert_eq!(ab, rect_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
            prop_assert!((ab - raster_iou(&a, &b, 64)).abs() < 1e-3);
        }

        #[test]
        fn binarize_monotone_in_threshold(vals in proptest::collection::vec(0.0f64..=1.0, 12), l1 in 0.01f64..0.99, l2 in 0.01f64..0.99) {
            let gt = GtMatrix::new(Array2::from_shape_vec((3, 4), vals).unwrap()).unwrap();
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let b_lo = binarize_gt(&gt, lo);
            let b_hi = binarize_gt(&gt, hi);
            for (x, y) in b_lo.iter().zip(b_hi.iter()) {
                prop_assert!(*x >= *y);
            }
        }

        #[test]
        fn identity_projection_is_exact(a in arb_rect(), k in 2usize..20) {
            let p = project_area(&a, &CorrespondenceField::identity(), k).unwrap();
            for (got, want) in p.as_array().iter().zip(a.as_array()) {
                prop_assert!((got - want).abs() <= 1e-9);
            }
        }
    }
}
