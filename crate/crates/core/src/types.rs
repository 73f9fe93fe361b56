//! Shared domain types: boxes, labels, masks, reference instances, context
//! scenes and placements.

use std::collections::BTreeSet;
use std::fmt;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): need finite coordinates with min < max")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("labels are both base and novel: {0:?}")]
    OverlappingSplits(Vec<String>),
    #[error("mask is empty")]
    EmptyMask,
    #[error("pixel raster is {pixels:?} but mask is {mask:?}")]
    DimensionMismatch {
        pixels: (u32, u32),
        mask: (u32, u32),
    },
    #[error("context marked novel-free carries novel box of class {0}")]
    NovelInContext(String),
    #[error("placement {target} lies outside a {width}x{height} context")]
    PlacementOutOfBounds { target: BBox, width: u32, height: u32 },
    #[error("placement {0} covers no whole pixel")]
    DegeneratePlacement(BBox),
}

/// Axis-aligned box in continuous image coordinates, half-open
/// `[x_min, x_max) x [y_min, y_max)`, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = TypeError;
    fn try_from(r: RawBox) -> Result<Self, TypeError> {
        BBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, TypeError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(TypeError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from a top-left corner and a size, as in COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, TypeError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Width over height.
    pub fn aspect_ratio(&self) -> f64 {
        self.width() / self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// True when the box lies inside `[0, width) x [0, height)`.
    pub fn is_within(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= f64::from(width)
            && self.y_max <= f64::from(height)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub name: String,
    pub split: Split,
}

impl ClassLabel {
    pub fn base(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            split: Split::Base,
        }
    }

    pub fn novel(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            split: Split::Novel,
        }
    }

    pub fn is_novel(&self) -> bool {
        self.split == Split::Novel
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The twenty DIOR categories as spelled in its XML annotations.
pub const DIOR_CLASSES: [&str; 20] = [
    "airplane",
    "airport",
    "baseballfield",
    "basketballcourt",
    "bridge",
    "chimney",
    "dam",
    "Expressway-Service-area",
    "Expressway-toll-station",
    "golffield",
    "groundtrackfield",
    "harbor",
    "overpass",
    "ship",
    "stadium",
    "storagetank",
    "tenniscourt",
    "trainstation",
    "vehicle",
    "windmill",
];

/// Default novel split used for DIOR few-shot experiments.
pub const DIOR_NOVEL: [&str; 5] = [
    "airplane",
    "baseballfield",
    "tenniscourt",
    "trainstation",
    "windmill",
];

/// A partition of class names into disjoint base and novel sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    base: BTreeSet<String>,
    novel: BTreeSet<String>,
}

impl LabelSpace {
    pub fn new<I, J, S, T>(base: I, novel: J) -> Result<Self, TypeError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        let base: BTreeSet<String> = base.into_iter().map(Into::into).collect();
        let novel: BTreeSet<String> = novel.into_iter().map(Into::into).collect();
        let overlap: Vec<String> = base.intersection(&novel).cloned().collect();
        if !overlap.is_empty() {
            return Err(TypeError::OverlappingSplits(overlap));
        }
        Ok(Self { base, novel })
    }

    /// Splits `all` so that the names in `novel` form the novel set.
    pub fn from_all<S: AsRef<str>>(all: &[S], novel: &[S]) -> Self {
        let novel: BTreeSet<String> = novel.iter().map(|s| s.as_ref().to_owned()).collect();
        let base = all
            .iter()
            .map(|s| s.as_ref().to_owned())
            .filter(|s| !novel.contains(s))
            .collect();
        Self { base, novel }
    }

    pub fn dior() -> Self {
        Self::from_all(&DIOR_CLASSES, &DIOR_NOVEL)
    }

    pub fn label(&self, name: &str) -> Option<ClassLabel> {
        if self.novel.contains(name) {
            Some(ClassLabel::novel(name))
        } else if self.base.contains(name) {
            Some(ClassLabel::base(name))
        } else {
            None
        }
    }

    pub fn novel(&self) -> impl Iterator<Item = &str> {
        self.novel.iter().map(String::as_str)
    }

    pub fn base(&self) -> impl Iterator<Item = &str> {
        self.base.iter().map(String::as_str)
    }

    /// All labels, sorted by name.
    pub fn labels(&self) -> Vec<ClassLabel> {
        let mut out: Vec<ClassLabel> = self
            .base
            .iter()
            .map(ClassLabel::base)
            .chain(self.novel.iter().map(ClassLabel::novel))
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }
}

/// Binary raster; stored as 0/1 luma values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(GrayImage);

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self(GrayImage::new(width, height))
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self(GrayImage::from_pixel(width, height, Luma([1])))
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        Self(GrayImage::from_fn(width, height, |x, y| {
            Luma([u8::from(f(x, y))])
        }))
    }

    /// Any nonzero value counts as set.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] != 0)
    }

    pub(crate) fn from_raw_binary(img: GrayImage) -> Self {
        debug_assert!(img.pixels().all(|p| p[0] <= 1));
        Self(img)
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.0.dimensions()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.0.get_pixel(x, y)[0] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.0.put_pixel(x, y, Luma([u8::from(value)]));
    }

    pub fn count(&self) -> usize {
        self.0.pixels().filter(|p| p[0] != 0).count()
    }

    pub fn as_image(&self) -> &GrayImage {
        &self.0
    }

    /// Scales set pixels to 255 for viewing or PNG export.
    pub fn to_visible(&self) -> GrayImage {
        GrayImage::from_fn(self.width(), self.height(), |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Tight pixel bounds of the set region as `(x0, y0, x1, y1)`, exclusive max.
    pub fn tight_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for (x, y, p) in self.0.enumerate_pixels() {
            if p[0] == 0 {
                continue;
            }
            bounds = Some(match bounds {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bounds
    }
}

/// Where a reference crop came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub image_id: String,
    pub bbox: BBox,
}

/// An object crop with its mask and label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceInstance {
    pixels: RgbImage,
    mask: Mask,
    pub label: ClassLabel,
    pub source: SourceRef,
}

impl ReferenceInstance {
    pub fn new(
        pixels: RgbImage,
        mask: Mask,
        label: ClassLabel,
        source: SourceRef,
    ) -> Result<Self, TypeError> {
        if pixels.dimensions() != mask.dimensions() {
            return Err(TypeError::DimensionMismatch {
                pixels: pixels.dimensions(),
                mask: mask.dimensions(),
            });
        }
        if mask.tight_bounds().is_none() {
            return Err(TypeError::EmptyMask);
        }
        Ok(Self {
            pixels,
            mask,
            label,
            source,
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }

    /// Width over height of the mask's tight bounding box.
    pub fn aspect_ratio(&self) -> f64 {
        let (x0, y0, x1, y1) = self
            .mask
            .tight_bounds()
            .expect("reference mask is non-empty by construction");
        f64::from(x1 - x0) / f64::from(y1 - y0)
    }

    /// Swaps in transformed rasters; both must come from the same transform.
    pub(crate) fn with_rasters(&self, pixels: RgbImage, mask: Mask) -> Self {
        debug_assert_eq!(pixels.dimensions(), mask.dimensions());
        Self {
            pixels,
            mask,
            label: self.label.clone(),
            source: self.source.clone(),
        }
    }
}

/// A background image with its existing ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextScene {
    pub id: String,
    pixels: RgbImage,
    existing: Vec<(BBox, ClassLabel)>,
    novel_free: bool,
}

impl ContextScene {
    pub fn new(
        id: impl Into<String>,
        pixels: RgbImage,
        existing: Vec<(BBox, ClassLabel)>,
        novel_free: bool,
    ) -> Result<Self, TypeError> {
        if novel_free {
            if let Some((_, label)) = existing.iter().find(|(_, l)| l.is_novel()) {
                return Err(TypeError::NovelInContext(label.name.clone()));
            }
        }
        Ok(Self {
            id: id.into(),
            pixels,
            existing,
            novel_free,
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn existing_boxes(&self) -> &[(BBox, ClassLabel)] {
        &self.existing
    }

    pub fn is_novel_free(&self) -> bool {
        self.novel_free
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }

    pub(crate) fn with_pixels(&self, pixels: RgbImage) -> Self {
        Self {
            id: self.id.clone(),
            pixels,
            existing: self.existing.clone(),
            novel_free: self.novel_free,
        }
    }
}

/// Integer pixel rectangle covered by a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }
}

/// A target rectangle inside a context of known size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementSpec {
    target: BBox,
    context_width: u32,
    context_height: u32,
}

impl PlacementSpec {
    pub fn new(target: BBox, context_width: u32, context_height: u32) -> Result<Self, TypeError> {
        if !target.is_within(context_width, context_height) {
            return Err(TypeError::PlacementOutOfBounds {
                target,
                width: context_width,
                height: context_height,
            });
        }
        let spec = Self {
            target,
            context_width,
            context_height,
        };
        let r = spec.pixel_rect();
        if r.width == 0 || r.height == 0 {
            return Err(TypeError::DegeneratePlacement(target));
        }
        Ok(spec)
    }

    pub fn in_context(target: BBox, context: &ContextScene) -> Result<Self, TypeError> {
        let (w, h) = context.dimensions();
        Self::new(target, w, h)
    }

    pub fn target(&self) -> BBox {
        self.target
    }

    pub fn context_dimensions(&self) -> (u32, u32) {
        (self.context_width, self.context_height)
    }

    /// Width over height of the target.
    pub fn aspect_ratio(&self) -> f64 {
        self.target.aspect_ratio()
    }

    /// The target snapped to whole pixels by rounding each edge.
    pub fn pixel_rect(&self) -> PixelRect {
        let x0 = self.target.x_min.round() as u32;
        let y0 = self.target.y_min.round() as u32;
        let x1 = (self.target.x_max.round() as u32).min(self.context_width);
        let y1 = (self.target.y_max.round() as u32).min(self.context_height);
        PixelRect {
            x: x0,
            y: y0,
            width: x1.saturating_sub(x0),
            height: y1.saturating_sub(y0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    // Counts covered unit cells at a given sub-pixel resolution.
    fn raster_iou(a: &BBox, c: &BBox, res: f64) -> f64 {
        let lo_x = a.x_min.min(c.x_min);
        let lo_y = a.y_min.min(c.y_min);
        let hi_x = a.x_max.max(c.x_max);
        let hi_y = a.y_max.max(c.y_max);
        let nx = ((hi_x - lo_x) * res).ceil() as usize;
        let ny = ((hi_y - lo_y) * res).ceil() as usize;
        let (mut inter, mut union) = (0usize, 0usize);
        for j in 0..ny {
            for i in 0..nx {
                let px = lo_x + (i as f64 + 0.5) / res;
                let py = lo_y + (j as f64 + 0.5) / res;
                let ina = px >= a.x_min && px < a.x_max && py >= a.y_min && py < a.y_max;
                let inc = px >= c.x_min && px < c.x_max && py >= c.y_min && py < c.y_max;
                inter += usize::from(ina && inc);
                union += usize::from(ina || inc);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        let half = iou(&a, &b(5.0, 0.0, 15.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-15);
        assert!((raster_iou(&a, &b(5.0, 0.0, 15.0, 10.0), 1.0) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0.0, 0.0, 5.0, 5.0), &b(5.0, 0.0, 9.0, 5.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(3.0, 0.0, 3.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>(r#"{"x_min":2,"y_min":0,"x_max":1,"y_max":1}"#).is_err());
    }

    #[test]
    fn label_space_rejects_overlap() {
        assert!(LabelSpace::new(["a", "b"], ["b"]).is_err());
        let ls = LabelSpace::dior();
        assert_eq!(ls.novel().count(), 5);
        assert_eq!(ls.base().count(), 15);
        assert!(ls.label("windmill").unwrap().is_novel());
        assert!(!ls.label("ship").unwrap().is_novel());
    }

    #[test]
    fn novel_free_context_rejects_novel_box() {
        let img = RgbImage::new(8, 8);
        let boxes = vec![(b(0.0, 0.0, 2.0, 2.0), ClassLabel::novel("windmill"))];
        assert!(ContextScene::new("c", img.clone(), boxes.clone(), true).is_err());
        assert!(ContextScene::new("c", img, boxes, false).is_ok());
    }

    #[test]
    fn reference_ratio_from_tight_mask() {
        let mask = Mask::from_fn(10, 10, |x, y| (2..6).contains(&x) && (1..3).contains(&y));
        let r = ReferenceInstance::new(
            RgbImage::new(10, 10),
            mask,
            ClassLabel::novel("ship"),
            SourceRef {
                image_id: "i".into(),
                bbox: b(0.0, 0.0, 10.0, 10.0),
            },
        )
        .unwrap();
        assert_eq!(r.aspect_ratio(), 2.0);
        assert!(ReferenceInstance::new(
            RgbImage::new(3, 3),
            Mask::new(3, 3),
            ClassLabel::novel("ship"),
            r.source.clone()
        )
        .is_err());
    }

    #[test]
    fn placement_bounds() {
        assert!(PlacementSpec::new(b(0.0, 0.0, 10.0, 10.0), 10, 10).is_ok());
        assert!(PlacementSpec::new(b(1.0, 0.0, 11.0, 10.0), 10, 10).is_err());
        let p = PlacementSpec::new(b(2.0, 3.0, 6.0, 5.0), 10, 10).unwrap();
        assert_eq!(p.aspect_ratio(), 2.0);
        assert_eq!(
            p.pixel_rect(),
            PixelRect {
                x: 2,
                y: 3,
                width: 4,
                height: 2
            }
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..40, 0u32..40, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| {
            let (x, y, w, h) = (f64::from(x), f64::from(y), f64::from(w), f64::from(h));
            b(x, y, x + w, y + h)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_matches_pixel_raster(a in arb_box(), c in arb_box()) {
            // integer boxes: unit-resolution rasterization is exact
            let exact = raster_iou(&a, &c, 1.0);
            let union = a.area() + c.area() - a.intersection_area(&c);
            prop_assert!((iou(&a, &c) - exact).abs() <= 1.0 / union);
        }

        #[test]
        fn iou_matches_subpixel_raster(
            x in 0.0f64..20.0, y in 0.0f64..20.0, w in 2.0f64..15.0, h in 2.0f64..15.0,
            dx in -10.0f64..10.0, dy in -10.0f64..10.0,
        ) {
            let a = b(x, y, x + w, y + h);
            let c = b(x + dx, y + dy, x + dx + h, y + dy + w);
            let res = 8.0;
            let union = a.area() + c.area() - a.intersection_area(&c);
            // each box edge can misclassify at most one strip of cells
            let tol = 2.0 * (a.width() + a.height() + c.width() + c.height()) / res / union;
            prop_assert!((iou(&a, &c) - raster_iou(&a, &c, res)).abs() <= tol);
        }
    }
}
