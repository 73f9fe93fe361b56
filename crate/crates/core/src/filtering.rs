//! High-frequency guidance maps and the stitched conditioning collage.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use thiserror::Error;

use crate::geometry::{self, AffineFamily, AffineOp, FloatImage, GeometryError};
use crate::types::{Mask, PlacementSpec, ReferenceInstance};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("raster {width}x{height} is smaller than the 3x3 kernel")]
    TooSmall { width: u32, height: u32 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("failed to write collage: {0}")]
    Image(#[from] image::ImageError),
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Edge-magnitude map in `[0, 1]`, same size as its source.
#[derive(Debug, Clone, PartialEq)]
pub struct HighFreqMap(FloatImage);

impl HighFreqMap {
    pub fn values(&self) -> &FloatImage {
        &self.0
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.0.dimensions()
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.0.get_pixel(x, y)[0]
    }

    pub fn apply_affine(&self, op: AffineOp) -> HighFreqMap {
        HighFreqMap(op.apply_to(&self.0))
    }
}

pub fn luma(p: &image::Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

/// Unnormalised Sobel gradient magnitude of the luma channel, with edge
/// replication at the borders.
pub fn gradient_magnitude(pixels: &RgbImage) -> Result<Vec<f64>, FilterError> {
    let (w, h) = pixels.dimensions();
    if w < 3 || h < 3 {
        return Err(FilterError::TooSmall {
            width: w,
            height: h,
        });
    }
    let gray: Vec<f64> = pixels.pixels().map(luma).collect();
    let at = |x: i64, y: i64| {
        let x = x.clamp(0, i64::from(w) - 1) as usize;
        let y = y.clamp(0, i64::from(h) - 1) as usize;
        gray[y * w as usize + x]
    };
    let mut out = Vec::with_capacity(gray.len());
    for y in 0..i64::from(h) {
        for x in 0..i64::from(w) {
            let (mut gx, mut gy) = (0.0, 0.0);
            for (j, (kx_row, ky_row)) in SOBEL_X.iter().zip(SOBEL_Y.iter()).enumerate() {
                for i in 0..3 {
                    let v = at(x + i as i64 - 1, y + j as i64 - 1);
                    gx += kx_row[i] * v;
                    gy += ky_row[i] * v;
                }
            }
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    Ok(out)
}

/// Sobel gradient magnitude, max-normalised. A flat input gives all zeros.
pub fn high_pass(pixels: &RgbImage) -> Result<HighFreqMap, FilterError> {
    let (w, h) = pixels.dimensions();
    let mag = gradient_magnitude(pixels)?;
    let max = mag.iter().copied().fold(0.0f64, f64::max);
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data: Vec<f32> = mag.iter().map(|m| (m * norm) as f32).collect();
    Ok(HighFreqMap(
        FloatImage::from_raw(w, h, data).expect("buffer sized from source"),
    ))
}

/// Context-sized canvas that is zero everywhere except the placement.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchCollage {
    canvas: FloatImage,
    placement: PlacementSpec,
}

impl StitchCollage {
    pub fn canvas(&self) -> &FloatImage {
        &self.canvas
    }

    pub fn placement(&self) -> &PlacementSpec {
        &self.placement
    }

    /// 8-bit view: values scaled by 255 and rounded.
    pub fn to_gray(&self) -> GrayImage {
        let (w, h) = self.canvas.dimensions();
        GrayImage::from_fn(w, h, |x, y| {
            let v = self.canvas.get_pixel(x, y)[0];
            Luma([(f64::from(v) * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), FilterError> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Pastes a transformed edge map and its mask into a zero canvas at the
/// placement rectangle, scaling both to the rectangle size.
pub fn paste_into_canvas(
    map: &HighFreqMap,
    mask: &Mask,
    placement: &PlacementSpec,
) -> Result<StitchCollage, FilterError> {
    let rect = placement.pixel_rect();
    let scaled = geometry::resize_bilinear(map.values(), rect.width, rect.height)?;
    let scaled_mask = geometry::resize_mask(mask, rect.width, rect.height)?;
    let (cw, ch) = placement.context_dimensions();
    let mut canvas = FloatImage::new(cw, ch);
    for (x, y, v) in scaled.enumerate_pixels() {
        if scaled_mask.get(x, y) {
            canvas.put_pixel(rect.x + x, rect.y + y, *v);
        }
    }
    Ok(StitchCollage {
        canvas,
        placement: *placement,
    })
}

/// Builds the collage with a fixed augmentation: orientation alignment,
/// then high-pass filtering, then `op`, then paste.
pub fn build_stitch_with(
    reference: &ReferenceInstance,
    placement: &PlacementSpec,
    op: AffineOp,
) -> Result<StitchCollage, FilterError> {
    let (aligned, _) = geometry::orient_align(reference, placement);
    let edges = high_pass(aligned.pixels())?.apply_affine(op);
    let mask = Mask::from_gray(&op.apply_to(aligned.mask().as_image()));
    paste_into_canvas(&edges, &mask, placement)
}

/// Builds the collage with an augmentation drawn from `family` by `seed`.
pub fn build_stitch(
    reference: &ReferenceInstance,
    placement: &PlacementSpec,
    family: &AffineFamily,
    seed: u64,
) -> Result<(StitchCollage, AffineOp), FilterError> {
    let op = family.sample(seed);
    Ok((build_stitch_with(reference, placement, op)?, op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::types::{BBox, ClassLabel, SourceRef};
    use image::Rgb;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct 3x3 correlation written out per tap, independent of the loop
    /// structure above.
    fn oracle_magnitude(gray: &[Vec<f64>], x: usize, y: usize) -> f64 {
        let h = gray.len() as i64;
        let w = gray[0].len() as i64;
        let g = |dx: i64, dy: i64| {
            let xx = (x as i64 + dx).clamp(0, w - 1) as usize;
            let yy = (y as i64 + dy).clamp(0, h - 1) as usize;
            gray[yy][xx]
        };
        let gx = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1)) - (g(-1, -1) + 2.0 * g(-1, 0) + g(-1, 1));
        let gy = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1)) - (g(-1, -1) + 2.0 * g(0, -1) + g(1, -1));
        gx.hypot(gy)
    }

    fn gray_of(img: &RgbImage) -> Vec<Vec<f64>> {
        (0..img.height())
            .map(|y| (0..img.width()).map(|x| luma(img.get_pixel(x, y))).collect())
            .collect()
    }

    fn gray_img(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = f(x, y);
            Rgb([v, v, v])
        })
    }

    fn reference(pixels: RgbImage, mask: Mask) -> ReferenceInstance {
        ReferenceInstance::new(
            pixels,
            mask,
            ClassLabel::novel("windmill"),
            SourceRef {
                image_id: "i".into(),
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            },
        )
        .unwrap()
    }

    #[test]
    fn constant_image_gives_zero_map() {
        let m = high_pass(&gray_img(9, 7, |_, _| 77)).unwrap();
        assert!(m.values().pixels().all(|p| p[0] == 0.0));
        assert_eq!(m.dimensions(), (9, 7));
    }

    #[test]
    fn small_raster_rejected() {
        assert!(matches!(
            high_pass(&RgbImage::new(2, 5)),
            Err(FilterError::TooSmall { .. })
        ));
    }

    #[test]
    fn vertical_step_edges() {
        let c = 6;
        let img = gray_img(12, 5, |x, _| if x < c { 0 } else { 255 });
        let m = high_pass(&img).unwrap();
        let gray = gray_of(&img);
        let max = (0..12).map(|x| oracle_magnitude(&gray, x, 2)).fold(0.0, f64::max);
        for y in 0..5 {
            for x in 0..12u32 {
                let expected = (oracle_magnitude(&gray, x as usize, y as usize) / max) as f32;
                assert_eq!(m.get(x, y), expected);
                if x + 1 == c || x == c {
                    assert_eq!(m.get(x, y), 1.0);
                } else {
                    assert_eq!(m.get(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn impulse_response_is_confined_to_kernel_footprint() {
        let img = gray_img(9, 9, |x, y| if (x, y) == (4, 4) { 255 } else { 0 });
        let m = high_pass(&img).unwrap();
        let gray = gray_of(&img);
        for y in 0..9u32 {
            for x in 0..9u32 {
                let inside = x.abs_diff(4) <= 1 && y.abs_diff(4) <= 1;
                let v = m.get(x, y);
                assert_eq!(oracle_magnitude(&gray, x as usize, y as usize) > 0.0, v > 0.0);
                if !inside {
                    assert_eq!(v, 0.0, "({x},{y})");
                } else if (x, y) != (4, 4) {
                    assert!(v > 0.0, "({x},{y})");
                } else {
                    // symmetric taps cancel at the impulse itself
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    fn square_placement(x: f64, y: f64, side: f64, cw: u32, ch: u32) -> PlacementSpec {
        PlacementSpec::new(BBox::new(x, y, x + side, y + side).unwrap(), cw, ch).unwrap()
    }

    #[test]
    fn constant_reference_gives_empty_collage() {
        let r = reference(gray_img(10, 10, |_, _| 200), Mask::full(10, 10));
        let p = square_placement(5.0, 5.0, 10.0, 30, 30);
        let (c, _) = build_stitch(&r, &p, &AffineFamily::default(), 3).unwrap();
        assert!(c.canvas().pixels().all(|v| v[0] == 0.0));
    }

    #[test]
    fn identity_square_collage_equals_edge_map() {
        let img = gray_img(12, 12, |x, y| ((x * 31 + y * 17) % 251) as u8);
        let r = reference(img.clone(), Mask::full(12, 12));
        let p = square_placement(4.0, 6.0, 12.0, 30, 30);
        let c = build_stitch_with(&r, &p, AffineOp::Identity).unwrap();
        let m = high_pass(&img).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(c.canvas().get_pixel(4 + x, 6 + y)[0], m.get(x, y));
            }
        }
    }

    #[test]
    fn collage_is_zero_outside_target_and_masked() {
        let img = gray_img(16, 8, |x, y| ((x * x + 3 * y) % 256) as u8);
        let mask = Mask::from_fn(16, 8, |x, _| x < 8);
        let r = reference(img, mask);
        let p = PlacementSpec::new(BBox::new(3.0, 2.0, 11.0, 18.0).unwrap(), 20, 24).unwrap();
        for s in 0..8 {
            let (c, _) = build_stitch(&r, &p, &AffineFamily::default(), s).unwrap();
            let rect = p.pixel_rect();
            for (x, y, v) in c.canvas().enumerate_pixels() {
                if !rect.contains(x, y) {
                    assert_eq!(v[0], 0.0);
                }
            }
        }
    }

    #[test]
    fn stepwise_composition_matches_fused() {
        let img = gray_img(20, 10, |x, y| ((x * 13 + y * y * 7) % 256) as u8);
        let mask = Mask::from_fn(20, 10, |x, y| x + y > 4);
        let r = reference(img, mask);
        // tall target forces the alignment rotation
        let p = PlacementSpec::new(BBox::new(2.0, 3.0, 9.0, 21.0).unwrap(), 25, 25).unwrap();
        for op in AffineOp::ALL {
            let fused = build_stitch_with(&r, &p, op).unwrap();
            let (aligned, rotated) = geometry::orient_align(&r, &p);
            assert!(rotated);
            let edges = high_pass(aligned.pixels()).unwrap();
            let transformed = geometry::apply_affine(op, &aligned);
            let stepwise = paste_into_canvas(&edges.apply_affine(op), transformed.mask(), &p).unwrap();
            assert_eq!(fused, stepwise, "{op:?}");
        }
    }

    #[test]
    fn gray_export_scales_by_255() {
        let img = gray_img(6, 6, |x, _| if x < 3 { 0 } else { 255 });
        let r = reference(img, Mask::full(6, 6));
        let p = square_placement(0.0, 0.0, 6.0, 6, 6);
        let c = build_stitch_with(&r, &p, AffineOp::Identity).unwrap();
        let g = c.to_gray();
        assert_eq!(g.get_pixel(2, 0)[0], 255);
        assert_eq!(g.get_pixel(0, 0)[0], 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        c.save_png(&path).unwrap();
        assert_eq!(image::open(&path).unwrap().to_luma8(), g);
    }

    proptest! {
        #[test]
        fn translation_equivariance(seed in any::<u64>(), dx in 0u32..4, dy in 0u32..4) {
            let mut rng = seed::rng_from(seed, &["hp"]);
            let (w, h) = (20u32, 16u32);
            let base: Vec<u8> = (0..(w + 4) * (h + 4)).map(|_| rng.random()).collect();
            let at = |x: u32, y: u32| base[(y * (w + 4) + x) as usize];
            let a = gray_img(w, h, |x, y| at(x, y));
            let b = gray_img(w, h, |x, y| at(x + dx, y + dy));
            let ma = gradient_magnitude(&a).unwrap();
            let mb = gradient_magnitude(&b).unwrap();
            for y in 3..h - 3 - 4 {
                for x in 3..w - 3 - 4 {
                    prop_assert_eq!(
                        mb[(y * w + x) as usize],
                        ma[((y + dy) * w + x + dx) as usize]
                    );
                }
            }
        }

        #[test]
        fn invariant_under_constant_offset(seed in any::<u64>(), offset in 0u8..60) {
            let mut rng = seed::rng_from(seed, &["off"]);
            let vals: Vec<u8> = (0..100).map(|_| rng.random_range(0..190)).collect();
            let a = gray_img(10, 10, |x, y| vals[(y * 10 + x) as usize]);
            let b = gray_img(10, 10, |x, y| vals[(y * 10 + x) as usize] + offset);
            let ma = gradient_magnitude(&a).unwrap();
            let mb = gradient_magnitude(&b).unwrap();
            for (p, q) in ma.iter().zip(mb.iter()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
