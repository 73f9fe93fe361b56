//! Reference preprocessing: orientation alignment, pad-then-resize to the
//! encoder input size, and the lossless square-symmetry augmentations.

use image::{ImageBuffer, Luma, Pixel, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::types::{Mask, PlacementSpec, ReferenceInstance};

/// Side length of the square reference raster fed to the coarse encoder.
pub const ENCODER_SIDE: u32 = 224;

/// Fill used for padded pixels.
pub const PAD_GRAY: Rgb<u8> = Rgb([128, 128, 128]);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("cannot resample a {width}x{height} raster")]
    Degenerate { width: u32, height: u32 },
    #[error("affine family is empty")]
    EmptyFamily,
}

/// The eight symmetries of the square. Rotations are clockwise in image
/// coordinates (y pointing down).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffineOp {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Transpose,
    AntiTranspose,
}

impl AffineOp {
    pub const ALL: [AffineOp; 8] = [
        AffineOp::Identity,
        AffineOp::Rot90,
        AffineOp::Rot180,
        AffineOp::Rot270,
        AffineOp::FlipHorizontal,
        AffineOp::FlipVertical,
        AffineOp::Transpose,
        AffineOp::AntiTranspose,
    ];

    /// Signed permutation matrix acting on centred coordinates `(u, v)`.
    fn matrix(self) -> [[i8; 2]; 2] {
        match self {
            AffineOp::Identity => [[1, 0], [0, 1]],
            AffineOp::Rot90 => [[0, -1], [1, 0]],
            AffineOp::Rot180 => [[-1, 0], [0, -1]],
            AffineOp::Rot270 => [[0, 1], [-1, 0]],
            AffineOp::FlipHorizontal => [[-1, 0], [0, 1]],
            AffineOp::FlipVertical => [[1, 0], [0, -1]],
            AffineOp::Transpose => [[0, 1], [1, 0]],
            AffineOp::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: [[i8; 2]; 2]) -> AffineOp {
        *Self::ALL
            .iter()
            .find(|op| op.matrix() == m)
            .expect("dihedral group is closed")
    }

    /// `self` followed by `next`.
    pub fn then(self, next: AffineOp) -> AffineOp {
        let a = self.matrix();
        let b = next.matrix();
        let mut m = [[0i8; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = b[i][0] * a[0][j] + b[i][1] * a[1][j];
            }
        }
        Self::from_matrix(m)
    }

    pub fn inverse(self) -> AffineOp {
        let m = self.matrix();
        Self::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// True when the op exchanges width and height.
    pub fn swaps_axes(self) -> bool {
        self.matrix()[0][0] == 0
    }

    pub fn output_dimensions(self, width: u32, height: u32) -> (u32, u32) {
        if self.swaps_axes() {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Applies the op to any raster, moving pixels without interpolation.
    pub fn apply_to<P: Pixel>(
        self,
        src: &ImageBuffer<P, Vec<P::Subpixel>>,
    ) -> ImageBuffer<P, Vec<P::Subpixel>> {
        let (w, h) = src.dimensions();
        let (ow, oh) = self.output_dimensions(w, h);
        let inv = self.inverse().matrix();
        let (w, h, ow, oh) = (i64::from(w), i64::from(h), i64::from(ow), i64::from(oh));
        ImageBuffer::from_fn(ow as u32, oh as u32, |x, y| {
            // doubled centred coordinates stay integral for even and odd sides
            let u = 2 * i64::from(x) - (ow - 1);
            let v = 2 * i64::from(y) - (oh - 1);
            let su = i64::from(inv[0][0]) * u + i64::from(inv[0][1]) * v;
            let sv = i64::from(inv[1][0]) * u + i64::from(inv[1][1]) * v;
            let sx = (su + w - 1) / 2;
            let sy = (sv + h - 1) / 2;
            *src.get_pixel(sx as u32, sy as u32)
        })
    }
}

/// The subset of [`AffineOp`] augmentations that may be sampled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineFamily(Vec<AffineOp>);

impl Default for AffineFamily {
    fn default() -> Self {
        Self(AffineOp::ALL.to_vec())
    }
}

impl AffineFamily {
    pub fn new(ops: Vec<AffineOp>) -> Result<Self, GeometryError> {
        if ops.is_empty() {
            return Err(GeometryError::EmptyFamily);
        }
        Ok(Self(ops))
    }

    pub fn ops(&self) -> &[AffineOp] {
        &self.0
    }

    /// Uniform draw, deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> AffineOp {
        let mut rng = seed::rng_from(seed, &["affine"]);
        self.0[rng.random_range(0..self.0.len())]
    }
}

/// Uniform draw over all eight symmetries.
pub fn sample_affine(seed: u64) -> AffineOp {
    AffineFamily::default().sample(seed)
}

/// Applies `op` to the pixels and mask of a reference together.
pub fn apply_affine(op: AffineOp, reference: &ReferenceInstance) -> ReferenceInstance {
    if op == AffineOp::Identity {
        return reference.clone();
    }
    let pixels = op.apply_to(reference.pixels());
    let mask = Mask::from_raw_binary(op.apply_to(reference.mask().as_image()));
    reference.with_rasters(pixels, mask)
}

/// True when the reference and target disagree on elongation direction,
/// i.e. `(r_ref - 1)(r_target - 1) < 0`.
pub fn needs_rotation(ref_ratio: f64, target_ratio: f64) -> bool {
    (ref_ratio - 1.0) * (target_ratio - 1.0) < 0.0
}

/// Rotates the reference a quarter turn when its long edge is orthogonal to
/// the target's long edge. Returns the (possibly) rotated reference and
/// whether a rotation happened.
pub fn orient_align(
    reference: &ReferenceInstance,
    placement: &PlacementSpec,
) -> (ReferenceInstance, bool) {
    if needs_rotation(reference.aspect_ratio(), placement.aspect_ratio()) {
        (apply_affine(AffineOp::Rot90, reference), true)
    } else {
        (reference.clone(), false)
    }
}

/// How a source raster was padded and scaled into the encoder square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizeRecord {
    pub pad_left: u32,
    pub pad_right: u32,
    pub pad_top: u32,
    pub pad_bottom: u32,
    pub scale: f64,
    pub output_side: u32,
}

impl ResizeRecord {
    /// Padding and scale for a `width x height` source.
    pub fn for_source(width: u32, height: u32, output_side: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || output_side == 0 {
            return Err(GeometryError::Degenerate { width, height });
        }
        let side = width.max(height);
        let (pw, ph) = (side - width, side - height);
        Ok(Self {
            pad_left: pw / 2,
            pad_right: pw - pw / 2,
            pad_top: ph / 2,
            pad_bottom: ph - ph / 2,
            scale: f64::from(output_side) / f64::from(side),
            output_side,
        })
    }

    pub fn padded_side(&self) -> u32 {
        (f64::from(self.output_side) / self.scale).round() as u32
    }

    /// Continuous output coordinate to continuous source coordinate.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x / self.scale - f64::from(self.pad_left),
            y / self.scale - f64::from(self.pad_top),
        )
    }

    /// Continuous source coordinate to continuous output coordinate.
    pub fn from_source(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + f64::from(self.pad_left)) * self.scale,
            (y + f64::from(self.pad_top)) * self.scale,
        )
    }
}

/// Square encoder input derived from a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub pixels: RgbImage,
    pub mask: Mask,
    pub record: ResizeRecord,
}

/// Pads the shorter axis symmetrically (odd remainder to the right/bottom)
/// to a square, then resamples to [`ENCODER_SIDE`]. Pixels use bilinear
/// filtering and mid-gray fill; the mask uses nearest-neighbour and zero fill.
pub fn pad_then_resize(reference: &ReferenceInstance) -> Result<EncoderInput, GeometryError> {
    pad_then_resize_to(reference, ENCODER_SIDE)
}

pub fn pad_then_resize_to(
    reference: &ReferenceInstance,
    side: u32,
) -> Result<EncoderInput, GeometryError> {
    let (w, h) = reference.dimensions();
    let record = ResizeRecord::for_source(w, h, side)?;
    let padded_side = w.max(h);
    let src = reference.pixels();
    let padded = RgbImage::from_fn(padded_side, padded_side, |x, y| {
        match (x.checked_sub(record.pad_left), y.checked_sub(record.pad_top)) {
            (Some(sx), Some(sy)) if sx < w && sy < h => *src.get_pixel(sx, sy),
            _ => PAD_GRAY,
        }
    });
    let mask = reference.mask();
    let padded_mask = Mask::from_fn(padded_side, padded_side, |x, y| {
        match (x.checked_sub(record.pad_left), y.checked_sub(record.pad_top)) {
            (Some(sx), Some(sy)) if sx < w && sy < h => mask.get(sx, sy),
            _ => false,
        }
    });
    Ok(EncoderInput {
        pixels: resize_bilinear(&padded, side, side)?,
        mask: resize_mask(&padded_mask, side, side)?,
        record,
    })
}

/// Channel types the resamplers understand.
pub trait Sample: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for u8 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

impl Sample for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Pixel-centre source coordinate and neighbour pair for bilinear lookup.
fn bilinear_axis(dst: u32, src_len: u32, dst_len: u32) -> (u32, u32, f64) {
    let s = (f64::from(dst) + 0.5) * f64::from(src_len) / f64::from(dst_len) - 0.5;
    let s = s.clamp(0.0, f64::from(src_len - 1));
    let i0 = s.floor() as u32;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - f64::from(i0))
}

fn nearest_axis(dst: u32, src_len: u32, dst_len: u32) -> u32 {
    let s = (f64::from(dst) + 0.5) * f64::from(src_len) / f64::from(dst_len);
    (s.floor() as u32).min(src_len - 1)
}

/// Bilinear resampling with pixel-centre alignment. Same-size resampling is
/// an exact copy.
pub fn resize_bilinear<P>(
    src: &ImageBuffer<P, Vec<P::Subpixel>>,
    width: u32,
    height: u32,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>, GeometryError>
where
    P: Pixel,
    P::Subpixel: Sample,
{
    let (sw, sh) = src.dimensions();
    if sw == 0 || sh == 0 || width == 0 || height == 0 {
        return Err(GeometryError::Degenerate {
            width: sw.min(width),
            height: sh.min(height),
        });
    }
    if (sw, sh) == (width, height) {
        return Ok(src.clone());
    }
    let xs: Vec<_> = (0..width).map(|x| bilinear_axis(x, sw, width)).collect();
    let ys: Vec<_> = (0..height).map(|y| bilinear_axis(y, sh, height)).collect();
    let mut out: ImageBuffer<P, Vec<P::Subpixel>> = ImageBuffer::new(width, height);
    for (y, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            let p00 = src.get_pixel(x0, y0).channels();
            let p10 = src.get_pixel(x1, y0).channels();
            let p01 = src.get_pixel(x0, y1).channels();
            let p11 = src.get_pixel(x1, y1).channels();
            let px = out.get_pixel_mut(x as u32, y as u32);
            for (c, dst) in px.channels_mut().iter_mut().enumerate() {
                let top = p00[c].to_f64() * (1.0 - tx) + p10[c].to_f64() * tx;
                let bottom = p01[c].to_f64() * (1.0 - tx) + p11[c].to_f64() * tx;
                *dst = <P::Subpixel as Sample>::from_f64(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Ok(out)
}

pub fn resize_nearest<P: Pixel>(
    src: &ImageBuffer<P, Vec<P::Subpixel>>,
    width: u32,
    height: u32,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>, GeometryError> {
    let (sw, sh) = src.dimensions();
    if sw == 0 || sh == 0 || width == 0 || height == 0 {
        return Err(GeometryError::Degenerate {
            width: sw.min(width),
            height: sh.min(height),
        });
    }
    Ok(ImageBuffer::from_fn(width, height, |x, y| {
        *src.get_pixel(nearest_axis(x, sw, width), nearest_axis(y, sh, height))
    }))
}

pub fn resize_mask(mask: &Mask, width: u32, height: u32) -> Result<Mask, GeometryError> {
    resize_nearest(mask.as_image(), width, height).map(Mask::from_raw_binary)
}

/// Single-channel float raster.
pub type FloatImage = ImageBuffer<Luma<f32>, Vec<f32>>;
