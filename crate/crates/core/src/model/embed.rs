use image::RgbImage;

use super::{Bound, FrontEnd, Linear, Mode, Model};
use crate::error::{Result, SvitError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::tokenizer::{resize_bilinear_to, Patch, TokenizedImage};

/// Token embeddings entering the encoder, class token first.
#[derive(Debug, Clone)]
pub struct EmbeddedTokens {
    /// `[batch, seq, embed_dim]` on the tape.
    pub embeddings: Var,
    /// `batch · seq` flags, true for real positions.
    pub attention_mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl EmbeddedTokens {
    /// Real positions (class token included) for batch entry `b`.
    pub fn real_len(&self, b: usize) -> usize {
        self.attention_mask[b * self.seq..(b + 1) * self.seq]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// Resizes a whole image to the ViT input side.
pub fn prepare_vit_image<T: Scalar>(image: &RgbImage, side: usize) -> Patch<T> {
    resize_bilinear_to(&Patch::from_image(image), side, side)
}

impl<T: Scalar> Model<T> {
    pub(super) fn linear(&self, tape: &mut Tape<T>, b: &Bound, x: Var, l: Linear) -> Result<Var> {
        let y = tape.matmul(x, b.var(l.weight))?;
        tape.add_row(y, b.var(l.bias))
    }

    // Prepends the class token to each sequence of `lens` rows from
    // `tokens`, padding to the longest sequence.
    fn assemble(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        tokens: Var,
        lens: &[usize],
    ) -> Result<EmbeddedTokens> {
        let n = self.config.embed_dim;
        let cls = tape.reshape(b.var(self.layout.cls), &[1, n])?;
        let all = tape.concat_rows(cls, tokens)?;
        let seq = lens.iter().copied().max().unwrap_or(0) + 1;
        let mut index = Vec::with_capacity(lens.len() * seq);
        let mut mask = Vec::with_capacity(lens.len() * seq);
        let mut offset = 1;
        for &len in lens {
            index.push(Some(0));
            mask.push(true);
            for pos in 0..seq - 1 {
                if pos < len {
                    index.push(Some(offset + pos));
                    mask.push(true);
                } else {
                    index.push(None);
                    mask.push(false);
                }
            }
            offset += len;
        }
        let rows = tape.gather_rows(all, &index)?;
        let embeddings = tape.reshape(rows, &[lens.len(), seq, n])?;
        Ok(EmbeddedTokens {
            embeddings,
            attention_mask: mask,
            batch: lens.len(),
            seq,
        })
    }

    /// Segment-patch projection plus geometry MLP, per token.
    pub fn embed_svit(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        batch: &[&TokenizedImage<T>],
    ) -> Result<EmbeddedTokens> {
        let FrontEnd::Svit { pos_fc1, pos_fc2 } = self.layout.front else {
            return Err(SvitError::config("embed_svit called on a vit model"));
        };
        let p = self.config.patch_size;
        let dim = self.config.patch_dim();
        let mut patches = Vec::new();
        let mut geometry = Vec::new();
        let mut lens = Vec::with_capacity(batch.len());
        for img in batch {
            if img.len() > self.config.token_capacity {
                return Err(SvitError::config(format!(
                    "image {} has {} tokens, capacity is {}",
                    img.image_id,
                    img.len(),
                    self.config.token_capacity
                )));
            }
            for tok in &img.tokens {
                if tok.patch.height() != p || tok.patch.width() != p {
                    return Err(SvitError::config(format!(
                        "patch {}x{} in image {} does not match patch_size {p}",
                        tok.patch.height(),
                        tok.patch.width(),
                        img.image_id
                    )));
                }
                patches.extend_from_slice(tok.patch.data());
                geometry.extend_from_slice(&tok.geometry.to_array());
            }
            lens.push(img.len());
        }
        let total: usize = lens.iter().sum();
        let px = tape.constant(&[total, dim], patches)?;
        let geom = tape.constant(&[total, 5], geometry)?;
        let seg = self.linear(tape, b, px, self.layout.patch)?;
        let h = self.linear(tape, b, geom, pos_fc1)?;
        let h = tape.gelu(h);
        let pos = self.linear(tape, b, h, pos_fc2)?;
        let tokens = tape.add(seg, pos)?;
        self.assemble(tape, b, tokens, &lens)
    }

    /// Grid-patch projection plus per-index positional table. Images must
    /// already be `vit_image_side` square.
    pub fn embed_vit(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: &[&Patch<T>],
    ) -> Result<EmbeddedTokens> {
        let FrontEnd::Vit { pos_table } = self.layout.front else {
            return Err(SvitError::config("embed_vit called on an svit model"));
        };
        let p = self.config.patch_size;
        let grid = self.config.vit_grid();
        let side = self.config.vit_image_side();
        let cells = grid * grid;
        let mut patches = Vec::with_capacity(images.len() * cells * self.config.patch_dim());
        for img in images {
            if img.height() != side || img.width() != side {
                return Err(SvitError::config(format!(
                    "vit input is {}x{}, expected {side}x{side}",
                    img.height(),
                    img.width()
                )));
            }
            for gy in 0..grid {
                for gx in 0..grid {
                    patches.extend_from_slice(img.window(gy * p, gx * p, p, p).data());
                }
            }
        }
        let px = tape.constant(&[images.len() * cells, self.config.patch_dim()], patches)?;
        let seg = self.linear(tape, b, px, self.layout.patch)?;
        let order: Vec<Option<usize>> = (0..images.len()).flat_map(|_| (0..cells).map(Some)).collect();
        let pos = tape.gather_rows(b.var(pos_table), &order)?;
        let tokens = tape.add(seg, pos)?;
        let lens = vec![cells; images.len()];
        self.assemble(tape, b, tokens, &lens)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }
}
