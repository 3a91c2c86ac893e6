//! Segment-level augmentation: a per-image random fraction of segment
//! tokens is flipped, crop-resized and has its geometry jittered. The
//! whole-image baseline used for ViT lives here too.

use image::{imageops, Rgb, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SvitError};
use crate::scalar::Scalar;
use crate::tokenizer::{resize_bilinear_to, Geometry, Patch, SegmentToken, TokenizedImage};

/// Which per-segment operations run; all three by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnabledOps {
    pub flip: bool,
    pub crop: bool,
    pub pos: bool,
}

impl EnabledOps {
    pub const ALL: Self = Self {
        flip: true,
        crop: true,
        pos: true,
    };
    pub const NONE: Self = Self {
        flip: false,
        crop: false,
        pos: false,
    };

    /// Parses a `+`-separated subset such as `flip+crop`; `none` or the empty
    /// string disables everything and `combined` enables all three.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::NONE);
        }
        if s == "combined" || s == "all" {
            return Ok(Self::ALL);
        }
        let mut ops = Self::NONE;
        for part in s.split('+') {
            match part.trim() {
                "flip" => ops.flip = true,
                "crop" => ops.crop = true,
                "pos" => ops.pos = true,
                other => return Err(SvitError::config(format!("unknown augmentation op {other:?}"))),
            }
        }
        Ok(ops)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub max_perc: f64,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
    pub geom_noise_var: f64,
    pub enabled_ops: EnabledOps,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_perc: 0.25,
            crop_scale: (0.9, 1.0),
            crop_ratio: (0.75, 1.33),
            hflip_prob: 0.5,
            geom_noise_var: 0.001,
            enabled_ops: EnabledOps::ALL,
            rng_seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(SvitError::config(format!("{name} range ({lo}, {hi}) must be ordered and positive")));
    }
    Ok(())
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_perc) {
            return Err(SvitError::config(format!("max_perc {} outside [0, 1]", self.max_perc)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(SvitError::config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.geom_noise_var >= 0.0 && self.geom_noise_var.is_finite()) {
            return Err(SvitError::config("geom_noise_var must be non-negative"));
        }
        check_range("crop_scale", self.crop_scale)?;
        check_range("crop_ratio", self.crop_ratio)
    }
}

/// Whole-image augmentation for the grid baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineAugConfig {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
}

impl Default for BaselineAugConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            crop_ratio: (0.75, 1.33),
            hflip_prob: 0.5,
        }
    }
}

impl BaselineAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(SvitError::config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        check_range("crop_scale", self.crop_scale)?;
        check_range("crop_ratio", self.crop_ratio)
    }
}

/// What a segment-level pass did.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentReport {
    pub perc_samp: f64,
    /// Token indices chosen for augmentation, ascending.
    pub selected: Vec<usize>,
}

/// Independent RNG stream for one (seed, image, epoch) triple.
pub fn stream_rng(seed: u64, image_index: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&image_index.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Reverses columns.
pub fn hflip_patch<T: Scalar>(patch: &Patch<T>) -> Patch<T> {
    let (h, w) = (patch.height(), patch.width());
    let mut out = patch.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.set(y, x, c, patch.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

// (top, left, height, width) of a random crop, or None after 10 misses.
fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return Some((top, left, h, w));
        }
    }
    None
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Random-resized crop that keeps the patch size.
pub fn crop_resize_patch<T: Scalar, R: Rng + ?Sized>(
    patch: &Patch<T>,
    scale_range: (f64, f64),
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Patch<T> {
    let (h, w) = (patch.height(), patch.width());
    match sample_crop(h, w, scale_range, ratio_range, rng) {
        Some((top, left, ch, cw)) if (ch, cw) != (h, w) => {
            resize_bilinear_to(&patch.window(top, left, ch, cw), h, w)
        }
        _ => patch.clone(),
    }
}

/// Adds N(0, var) to all five geometry fields and clamps them back into
/// range. Background geometry is returned untouched.
pub fn jitter_geometry<T: Scalar, R: Rng + ?Sized>(
    geometry: Geometry<T>,
    is_background: bool,
    var: f64,
    rng: &mut R,
) -> Geometry<T> {
    if is_background || var == 0.0 {
        return geometry;
    }
    let noise = Normal::new(0.0, var.sqrt()).expect("finite non-negative variance");
    let mut a = geometry.to_array();
    for v in a.iter_mut() {
        *v += T::lit(noise.sample(rng));
    }
    for v in a.iter_mut().take(4) {
        *v = v.max(T::zero()).min(T::one());
    }
    a[4] = a[4].max(T::min_positive_value()).min(T::one());
    Geometry::from_array(a)
}

/// Segment-level augmentation with a freshly drawn sampling fraction.
pub fn augment_segments<T: Scalar, R: Rng + ?Sized>(
    tokens: &TokenizedImage<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> TokenizedImage<T> {
    augment_segments_report(tokens, cfg, rng).0
}

pub fn augment_segments_report<T: Scalar, R: Rng + ?Sized>(
    tokens: &TokenizedImage<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (TokenizedImage<T>, AugmentReport) {
    let perc = uniform(rng, 0.0, cfg.max_perc);
    augment_segments_with_fraction(tokens, cfg, perc, rng)
}

/// Segment-level augmentation of `floor(len · perc_samp)` uniformly chosen
/// segment tokens.
pub fn augment_segments_with_fraction<T: Scalar, R: Rng + ?Sized>(
    tokens: &TokenizedImage<T>,
    cfg: &AugmentConfig,
    perc_samp: f64,
    rng: &mut R,
) -> (TokenizedImage<T>, AugmentReport) {
    let candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| !tokens.tokens[i].is_background)
        .collect();
    let num = ((candidates.len() as f64) * perc_samp).floor() as usize;
    let num = num.min(candidates.len());
    let mut selected: Vec<usize> = index::sample(rng, candidates.len(), num)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    selected.sort_unstable();

    let mut out = tokens.clone();
    let ops = cfg.enabled_ops;
    for &i in &selected {
        let tok: &mut SegmentToken<T> = &mut out.tokens[i];
        if ops.flip && rng.random_bool(cfg.hflip_prob) {
            tok.patch = hflip_patch(&tok.patch);
        }
        if ops.crop {
            tok.patch = crop_resize_patch(&tok.patch, cfg.crop_scale, cfg.crop_ratio, rng);
        }
        if ops.pos {
            tok.geometry = jitter_geometry(tok.geometry, tok.is_background, cfg.geom_noise_var, rng);
        }
    }
    (
        out,
        AugmentReport {
            perc_samp,
            selected,
        },
    )
}

/// Random-resized crop plus horizontal flip on the full image; output keeps
/// the input dimensions.
pub fn augment_whole_image<R: Rng + ?Sized>(image: &RgbImage, cfg: &BaselineAugConfig, rng: &mut R) -> RgbImage {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let mut out = match sample_crop(h, w, cfg.crop_scale, cfg.crop_ratio, rng) {
        Some((top, left, ch, cw)) if (ch, cw) != (h, w) => {
            let crop: Patch<f32> = Patch::from_image(image).window(top, left, ch, cw);
            resize_bilinear_to(&crop, h, w).to_image()
        }
        _ => image.clone(),
    };
    if rng.random_bool(cfg.hflip_prob) {
        imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Two-row contact sheet: original token patches on top, augmented below.
pub fn preview_sheet<T: Scalar>(before: &TokenizedImage<T>, after: &TokenizedImage<T>) -> RgbImage {
    let p = before.patch_size as u32;
    let gap = 2u32;
    let n = before.len().max(after.len()) as u32;
    let width = n * (p + gap) + gap;
    let height = 2 * (p + gap) + gap;
    let mut sheet = RgbImage::from_pixel(width.max(1), height, Rgb([255, 255, 255]));
    for (row, img) in [before, after].into_iter().enumerate() {
        for (k, tok) in img.tokens.iter().enumerate() {
            let tile = tok.patch.to_image();
            let x0 = gap + k as u32 * (p + gap);
            let y0 = gap + row as u32 * (p + gap);
            imageops::replace(&mut sheet, &tile, x0 as i64, y0 as i64);
        }
    }
    sheet
}
