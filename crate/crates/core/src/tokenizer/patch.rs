use image::{Rgb, RgbImage};

use crate::scalar::Scalar;

/// `height × width × 3` RGB array with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Patch<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == height * width * 3).then_some(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_image(img: &RgbImage) -> Self {
        let scale = T::lit(255.0);
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| T::lit(v as f64) / scale).collect(),
        }
    }

    /// Rounds to 8-bit RGB.
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let f = self.get(y as usize, x as usize, c).as_f64().clamp(0.0, 1.0);
                *v = (f * 255.0).round() as u8;
            }
            Rgb(px)
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Scalar>(&self) -> Patch<U> {
        Patch {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Rectangular sub-patch; the caller keeps the window in bounds.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut out = Self::filled(height, width, T::zero());
        for y in 0..height {
            let src = ((top + y) * self.width + left) * 3;
            let dst = y * width * 3;
            out.data[dst..dst + width * 3].copy_from_slice(&self.data[src..src + width * 3]);
        }
        out
    }
}

/// Square bilinear resize to `size × size`.
pub fn resize_bilinear<T: Scalar>(patch: &Patch<T>, size: usize) -> Patch<T> {
    resize_bilinear_to(patch, size, size)
}

// Source coordinate for output index `i` with half-pixel centers.
fn source_coord(i: usize, scale: f64, last: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(last);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear_to<T: Scalar>(patch: &Patch<T>, out_h: usize, out_w: usize) -> Patch<T> {
    assert!(patch.height > 0 && patch.width > 0, "resize of an empty patch");
    if patch.height == out_h && patch.width == out_w {
        return patch.clone();
    }
    let sy = patch.height as f64 / out_h as f64;
    let sx = patch.width as f64 / out_w as f64;
    let cols: Vec<(usize, usize, T)> = (0..out_w)
        .map(|x| {
            let (a, b, w) = source_coord(x, sx, patch.width - 1);
            (a, b, T::lit(w))
        })
        .collect();
    let mut out = Patch::filled(out_h, out_w, T::zero());
    let one = T::one();
    for y in 0..out_h {
        let (y0, y1, wy) = source_coord(y, sy, patch.height - 1);
        let wy = T::lit(wy);
        for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let top = patch.get(y0, x0, c) * (one - wx) + patch.get(y0, x1, c) * wx;
                let bot = patch.get(y1, x0, c) * (one - wx) + patch.get(y1, x1, c) * wx;
                let v = top * (one - wy) + bot * wy;
                out.set(y, x, c, v.max(T::zero()).min(one));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_at_matching_scale() {
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        let p = Patch::from_data(16, 16, data).unwrap();
        assert_eq!(resize_bilinear(&p, 16), p);
    }

    // Independent per-pixel bilinear evaluation.
    fn oracle(src: &[[f64; 2]; 2], y: usize, x: usize, out: usize) -> f64 {
        let map = |i: usize| (((i as f64 + 0.5) * 2.0 / out as f64) - 0.5).clamp(0.0, 1.0);
        let (fy, fx) = (map(y), map(x));
        src[0][0] * (1.0 - fy) * (1.0 - fx)
            + src[0][1] * (1.0 - fy) * fx
            + src[1][0] * fy * (1.0 - fx)
            + src[1][1] * fy * fx
    }

    #[test]
    fn checkerboard_upsample_matches_oracle() {
        let board = [[1.0, 0.0], [0.0, 1.0]];
        let mut p = Patch::<f64>::filled(2, 2, 0.0);
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    p.set(y, x, c, board[y][x]);
                }
            }
        }
        let r = resize_bilinear(&p, 4);
        for y in 0..4 {
            for x in 0..4 {
                let want = oracle(&board, y, x, 4);
                for c in 0..3 {
                    assert!((r.get(y, x, c) - want).abs() < 1e-6);
                }
            }
        }
        // corners replicate, centre pixels blend 3:1
        assert!((r.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!((r.get(1, 1, 0) - 0.625).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn constant_patches_stay_constant(h in 1usize..40, w in 1usize..40, v in 0.0f64..=1.0, out in 1usize..33) {
            let p = Patch::filled(h, w, v);
            let r = resize_bilinear(&p, out);
            prop_assert_eq!((r.height(), r.width()), (out, out));
            for &x in r.data() {
                prop_assert!((x - v).abs() < 1e-12);
            }
        }

        #[test]
        fn output_stays_in_unit_range(h in 1usize..20, w in 1usize..20, seed in any::<u32>()) {
            let data: Vec<f64> = (0..h * w * 3).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f64 / u32::MAX as f64).collect();
            let r = resize_bilinear(&Patch::from_data(h, w, data).unwrap(), 16);
            prop_assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
