//! Semantic tokenization: each kept segment becomes a fixed-size patch plus
//! a normalized geometry vector; everything else goes into one background
//! token.

mod cache;
mod patch;

pub use cache::{read_token_cache, write_token_cache};
pub use patch::{resize_bilinear, resize_bilinear_to, Patch};

use image::RgbImage;

use crate::error::{Result, SvitError};
use crate::scalar::Scalar;
use crate::segmenter::{SegmentManifest, SegmentMask};

/// Sequence length the encoder is built for (segments plus background).
pub const TOKEN_CAPACITY: usize = 196;
/// Segments kept as their own tokens; the rest merge into the background.
pub const MAX_SEGMENT_TOKENS: usize = TOKEN_CAPACITY - 1;
/// Geometry value of the background token's x/y fields.
pub const BACKGROUND_SENTINEL: f64 = -1.0;

/// Normalized bounding-box corners and relative pixel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
    pub size: T,
}

impl<T: Scalar> Geometry<T> {
    pub fn to_array(self) -> [T; 5] {
        [self.x_min, self.y_min, self.x_max, self.y_max, self.size]
    }

    pub fn from_array(a: [T; 5]) -> Self {
        Self {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
            size: a[4],
        }
    }

    pub fn background(size: T) -> Self {
        let s = T::lit(BACKGROUND_SENTINEL);
        Self {
            x_min: s,
            y_min: s,
            x_max: s,
            y_max: s,
            size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentToken<T> {
    pub patch: Patch<T>,
    pub geometry: Geometry<T>,
    pub is_background: bool,
}

/// Token sequence for one image; the background token is always last.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedImage<T> {
    pub image_id: String,
    pub patch_size: usize,
    pub tokens: Vec<SegmentToken<T>>,
}

impl<T: Scalar> TokenizedImage<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-background tokens.
    pub fn segments(&self) -> &[SegmentToken<T>] {
        let n = self.tokens.len().saturating_sub(1);
        &self.tokens[..n]
    }

    pub fn background(&self) -> Option<&SegmentToken<T>> {
        self.tokens.last().filter(|t| t.is_background)
    }

    pub fn cast<U: Scalar>(&self) -> TokenizedImage<U> {
        let c = |v: T| U::lit(v.as_f64());
        TokenizedImage {
            image_id: self.image_id.clone(),
            patch_size: self.patch_size,
            tokens: self
                .tokens
                .iter()
                .map(|t| SegmentToken {
                    patch: t.patch.cast(),
                    geometry: Geometry::from_array(t.geometry.to_array().map(c)),
                    is_background: t.is_background,
                })
                .collect(),
        }
    }
}

/// Bounding-box crop of `mask`; pixels outside the mask become `fill`.
pub fn crop_segment<T: Scalar>(image: &RgbImage, mask: &SegmentMask, fill: T) -> Result<Patch<T>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let bb = mask.bbox();
    if bb.x_max >= w || bb.y_max >= h || mask.image_size() != (w, h) {
        return Err(SvitError::contract(format!(
            "mask for {:?} image (bbox {bb:?}) does not fit {w}x{h} image",
            mask.image_size()
        )));
    }
    let mut patch = Patch::filled(bb.height(), bb.width(), fill);
    let scale = T::lit(255.0);
    for (x, y) in mask.pixels() {
        let px = image.get_pixel(x as u32, y as u32).0;
        for c in 0..3 {
            patch.set(y - bb.y_min, x - bb.x_min, c, T::lit(px[c] as f64) / scale);
        }
    }
    Ok(patch)
}

/// Corners divided by image width/height, size by the pixel total.
pub fn normalize_geometry<T: Scalar>(mask: &SegmentMask, image_size: (usize, usize)) -> Result<Geometry<T>> {
    let (w, h) = image_size;
    if w == 0 || h == 0 {
        return Err(SvitError::contract("zero-area image"));
    }
    let b = mask.bbox();
    let (wf, hf) = (w as f64, h as f64);
    Ok(Geometry {
        x_min: T::lit(b.x_min as f64 / wf),
        y_min: T::lit(b.y_min as f64 / hf),
        x_max: T::lit(b.x_max as f64 / wf),
        y_max: T::lit(b.y_max as f64 / hf),
        size: T::lit(mask.pixel_count() as f64 / (wf * hf)),
    })
}

/// Pixels not covered by any of `kept`, as a row-major flag grid.
pub fn residual_pixels(image_size: (usize, usize), kept: &[SegmentMask]) -> Vec<bool> {
    let (w, h) = image_size;
    let mut residual = vec![true; w * h];
    for m in kept {
        for (x, y) in m.pixels() {
            residual[y * w + x] = false;
        }
    }
    residual
}

/// Background token from every pixel outside `kept_masks`.
pub fn build_background<T: Scalar>(
    image: &RgbImage,
    kept_masks: &[SegmentMask],
    patch_size: usize,
) -> Result<SegmentToken<T>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(SvitError::contract("zero-area image"));
    }
    let residual = residual_pixels((w, h), kept_masks);
    let mut full = Patch::from_image(image);
    let mut count = 0usize;
    for (i, &keep) in residual.iter().enumerate() {
        if keep {
            count += 1;
        } else {
            for c in 0..3 {
                full.set(i / w, i % w, c, T::zero());
            }
        }
    }
    Ok(SegmentToken {
        patch: resize_bilinear(&full, patch_size),
        geometry: Geometry::background(T::lit(count as f64 / (w * h) as f64)),
        is_background: true,
    })
}

/// Tokenizes the first [`MAX_SEGMENT_TOKENS`] masks in manifest order and
/// appends the background token.
pub fn tokenize<T: Scalar>(
    image: &RgbImage,
    manifest: &SegmentManifest,
    patch_size: usize,
) -> Result<TokenizedImage<T>> {
    let size = (image.width() as usize, image.height() as usize);
    if manifest.image_size() != size {
        return Err(SvitError::contract(format!(
            "manifest {} is {:?} but image is {:?}",
            manifest.image_id(),
            manifest.image_size(),
            size
        )));
    }
    if patch_size == 0 {
        return Err(SvitError::contract("patch size must be positive"));
    }
    let kept = &manifest.masks()[..manifest.masks().len().min(MAX_SEGMENT_TOKENS)];
    let mut tokens = Vec::with_capacity(kept.len() + 1);
    for mask in kept {
        let crop = crop_segment(image, mask, T::zero())?;
        tokens.push(SegmentToken {
            patch: resize_bilinear(&crop, patch_size),
            geometry: normalize_geometry(mask, size)?,
            is_background: false,
        });
    }
    tokens.push(build_background(image, kept, patch_size)?);
    Ok(TokenizedImage {
        image_id: manifest.image_id().to_string(),
        patch_size,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{Bitmap, Run};
    use image::Rgb;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn full_rectangle_crop_is_sub_image() {
        let img = gradient_image(9, 7);
        let mask = SegmentMask::from_bitmap(&Bitmap::from_fn(9, 7, |x, y| (2..6).contains(&x) && (1..4).contains(&y))).unwrap();
        let p: Patch<f64> = crop_segment(&img, &mask, 0.0).unwrap();
        assert_eq!((p.height(), p.width()), (3, 4));
        for y in 0..3 {
            for x in 0..4 {
                let px = img.get_pixel(x as u32 + 2, y as u32 + 1).0;
                for c in 0..3 {
                    assert_eq!(p.get(y, x, c), px[c] as f64 / 255.0);
                }
            }
        }
    }

    #[test]
    fn l_shaped_crop_fills_complement() {
        let img = RgbImage::from_pixel(6, 6, Rgb([255, 128, 64]));
        let inside = |x: usize, y: usize| (x == 1 && (1..4).contains(&y)) || (y == 3 && (1..4).contains(&x));
        let mask = SegmentMask::from_bitmap(&Bitmap::from_fn(6, 6, inside)).unwrap();
        let p: Patch<f64> = crop_segment(&img, &mask, 0.0).unwrap();
        assert_eq!((p.height(), p.width()), (3, 3));
        for y in 0..3 {
            for x in 0..3 {
                let want = if inside(x + 1, y + 1) { [1.0, 128.0 / 255.0, 64.0 / 255.0] } else { [0.0; 3] };
                for c in 0..3 {
                    assert_eq!(p.get(y, x, c), want[c], "pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn single_pixel_crop() {
        let img = gradient_image(5, 5);
        let mask = SegmentMask::from_runs(vec![Run::new(2, 3, 1)], (5, 5)).unwrap();
        let p: Patch<f32> = crop_segment(&img, &mask, 0.0).unwrap();
        assert_eq!((p.height(), p.width()), (1, 1));
        assert_eq!(p.get(0, 0, 0), 21.0 / 255.0);
    }

    #[test]
    fn crop_rejects_foreign_mask() {
        let img = gradient_image(4, 4);
        let mask = SegmentMask::from_runs(vec![Run::new(5, 0, 1)], (8, 8)).unwrap();
        assert!(crop_segment::<f32>(&img, &mask, 0.0).is_err());
    }

    #[test]
    fn geometry_examples() {
        let full = SegmentMask::from_bitmap(&Bitmap::from_fn(8, 5, |_, _| true)).unwrap();
        let g: Geometry<f64> = normalize_geometry(&full, (8, 5)).unwrap();
        assert_eq!(g.to_array(), [0.0, 0.0, 7.0 / 8.0, 4.0 / 5.0, 1.0]);

        let origin = SegmentMask::from_runs(vec![Run::new(0, 0, 1)], (8, 5)).unwrap();
        let g: Geometry<f64> = normalize_geometry(&origin, (8, 5)).unwrap();
        assert_eq!(g.to_array(), [0.0, 0.0, 0.0, 0.0, 1.0 / 40.0]);

        let sq = SegmentMask::from_bitmap(&Bitmap::from_fn(100, 50, |x, y| (5..15).contains(&x) && (5..15).contains(&y))).unwrap();
        let g: Geometry<f64> = normalize_geometry(&sq, (100, 50)).unwrap();
        let want = [0.05, 0.10, 0.14, 0.28, 0.02];
        for (a, b) in g.to_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_geometry::<f64>(&sq, (0, 50)).is_err());
    }

    #[test]
    fn empty_manifest_gives_background_of_whole_image() {
        let img = gradient_image(16, 16);
        let m = SegmentManifest::new("e", (16, 16), vec![]).unwrap();
        let t: TokenizedImage<f64> = tokenize(&img, &m, 16).unwrap();
        assert_eq!(t.len(), 1);
        let bg = &t.tokens[0];
        assert!(bg.is_background);
        assert_eq!(bg.geometry.size, 1.0);
        assert_eq!(bg.patch, Patch::from_image(&img));
    }

    #[test]
    fn fully_covered_image_gives_empty_background() {
        let img = gradient_image(6, 6);
        let full = SegmentMask::from_bitmap(&Bitmap::from_fn(6, 6, |_, _| true)).unwrap();
        let t: SegmentToken<f32> = build_background(&img, &[full], 16).unwrap();
        assert!(t.patch.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.geometry.size, 0.0);
        assert_eq!(t.geometry.x_min, -1.0);
        assert_eq!(t.geometry.y_max, -1.0);
    }

    #[test]
    fn three_masks_keep_order_and_end_with_background() {
        let img = gradient_image(12, 12);
        let masks: Vec<SegmentMask> = (0..3)
            .map(|k| SegmentMask::from_bitmap(&Bitmap::from_fn(12, 12, |x, y| x / 4 == k && y < 3 + k)).unwrap())
            .collect();
        let m = SegmentManifest::new("three", (12, 12), masks.clone()).unwrap();
        let t: TokenizedImage<f32> = tokenize(&img, &m, 16).unwrap();
        assert_eq!(t.len(), 4);
        for (k, tok) in t.segments().iter().enumerate() {
            assert!(!tok.is_background);
            assert_eq!(tok.geometry, normalize_geometry(&masks[k], (12, 12)).unwrap());
        }
        assert!(t.tokens[3].is_background);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let img = gradient_image(12, 12);
        let m = SegmentManifest::new("x", (10, 12), vec![]).unwrap();
        assert!(tokenize::<f32>(&img, &m, 16).is_err());
    }
}
