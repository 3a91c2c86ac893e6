//! Token attribution: the gradient of a class logit with respect to each
//! token embedding, multiplied elementwise by the embedding, averaged over
//! the embedding width and passed through ReLU. Scores render as a heatmap
//! over the segment masks.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};

use crate::error::{Result, SvitError};
use crate::model::{EmbeddedTokens, Mode, Model};
use crate::scalar::Scalar;
use crate::segmenter::SegmentManifest;
use crate::tensor::Tape;
use crate::tokenizer::{TokenizedImage, MAX_SEGMENT_TOKENS};

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    /// One non-negative score per image token, background last.
    pub scores: Vec<f64>,
    pub class_token_score: f64,
    pub class_index: usize,
    /// Manifest mask index for each token; `None` for the background.
    pub token_masks: Vec<Option<usize>>,
    pub image_id: String,
}

/// `ReLU(mean_j(grad_j · emb_j))` for each row of `[rows, width]` arrays.
pub fn relu_mean_product<T: Scalar>(grad: &[T], emb: &[T], width: usize) -> Vec<f64> {
    grad.chunks(width)
        .zip(emb.chunks(width))
        .map(|(g, t)| {
            let s: f64 = g.iter().zip(t).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            (s / width as f64).max(0.0)
        })
        .collect()
}

/// Attribution of class logit `class` to every token of one image.
pub fn token_importance<T: Scalar>(
    model: &Model<T>,
    tokens: &TokenizedImage<T>,
    class: usize,
) -> Result<ImportanceMap> {
    let cfg = model.config();
    if class >= cfg.num_classes {
        return Err(SvitError::contract(format!(
            "class {class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    if cfg.mode != Mode::Svit {
        return Err(SvitError::contract("token importance needs an svit model"));
    }
    let mut tape = Tape::new();
    let bound = model.bind_constants(&mut tape);
    let emb = model.embed_svit(&mut tape, &bound, &[tokens])?;
    // re-root the embeddings as a differentiable leaf: T_i enters the encoder here
    let shape = tape.shape(emb.embeddings).to_vec();
    let values = tape.value(emb.embeddings).to_vec();
    let leaf = tape.variable(&shape, values.clone())?;
    let emb = EmbeddedTokens {
        embeddings: leaf,
        ..emb
    };
    let logits = model.forward(&mut tape, &bound, &emb)?;
    let y = tape.pick(logits, class)?;
    tape.backward(y)?;
    let grad = tape
        .grad(leaf)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); values.len()]);
    let all = relu_mean_product(&grad, &values, cfg.embed_dim);
    // batch of one: position 0 is the class token, then the image tokens
    let scores = all[1..=tokens.len()].to_vec();
    let token_masks = tokens
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (!t.is_background).then_some(i))
        .collect();
    Ok(ImportanceMap {
        scores,
        class_token_score: all[0],
        class_index: class,
        token_masks,
        image_id: tokens.image_id.clone(),
    })
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 0.0]),
    (0.5, [255.0, 255.0, 0.0]),
    (0.75, [255.0, 165.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Blue → green → yellow → orange → red for `t` in [0, 1].
pub fn ramp_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    for w in RAMP.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * f);
        }
    }
    RAMP[4].1
}

pub const HEATMAP_ALPHA: f64 = 0.5;

/// Tints every kept segment by its min-max normalized score. The background
/// token is never tinted; all-zero scores return an untinted copy.
pub fn render_heatmap(map: &ImportanceMap, image: &RgbImage, manifest: &SegmentManifest) -> Result<RgbImage> {
    let size = (image.width() as usize, image.height() as usize);
    if manifest.image_size() != size {
        return Err(SvitError::contract("manifest does not match image size"));
    }
    let kept = manifest.masks().len().min(MAX_SEGMENT_TOKENS);
    if map.scores.len() != kept + 1 || map.token_masks.len() != map.scores.len() {
        return Err(SvitError::contract(format!(
            "{} scores for a manifest with {kept} kept masks",
            map.scores.len()
        )));
    }
    let segs: Vec<(usize, f64)> = map
        .token_masks
        .iter()
        .zip(&map.scores)
        .filter_map(|(m, &s)| m.map(|m| (m, s)))
        .collect();
    let mut out = image.clone();
    if segs.iter().all(|&(_, s)| s == 0.0) {
        return Ok(out);
    }
    let lo = segs.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = segs.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut tint: Vec<Option<[f64; 3]>> = vec![None; size.0 * size.1];
    for &(mask_idx, s) in &segs {
        let t = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
        let color = ramp_color(t);
        for (x, y) in manifest.masks()[mask_idx].pixels() {
            tint[y * size.0 + x] = Some(color);
        }
    }
    for (i, c) in tint.iter().enumerate() {
        if let Some(c) = c {
            let (x, y) = ((i % size.0) as u32, (i / size.0) as u32);
            let px = image.get_pixel(x, y).0;
            let blended = [0, 1, 2].map(|k| {
                ((1.0 - HEATMAP_ALPHA) * px[k] as f64 + HEATMAP_ALPHA * c[k]).round() as u8
            });
            out.put_pixel(x, y, Rgb(blended));
        }
    }
    Ok(out)
}

/// `token_index score` lines, highest score first.
pub fn format_table(map: &ImportanceMap) -> String {
    let mut order: Vec<usize> = (0..map.scores.len()).collect();
    order.sort_by(|&a, &b| map.scores[b].total_cmp(&map.scores[a]).then(a.cmp(&b)));
    let mut s = String::new();
    for i in order {
        let _ = writeln!(s, "{i} {}", map.scores[i]);
    }
    s
}
