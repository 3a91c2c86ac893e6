use super::{Bound, EmbeddedTokens, Model, Norm, LAYER_NORM_EPS, MASK_LOGIT};
use crate::error::{Result, SvitError};
use crate::scalar::Scalar;
use crate::tensor::HeadLayout;
use crate::tensor::{Tape, Var};

impl<T: Scalar> Model<T> {
    fn norm(&self, tape: &mut Tape<T>, b: &Bound, x: Var, n: Norm) -> Result<Var> {
        let y = tape.layer_norm(x, 1, T::lit(LAYER_NORM_EPS))?;
        let y = tape.mul_row(y, b.var(n.gamma))?;
        tape.add_row(y, b.var(n.beta))
    }

    /// Pre-norm encoder over `emb`, classifying from the class token.
    /// Returns logits `[batch, num_classes]`.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, emb: &EmbeddedTokens) -> Result<Var> {
        let n = self.config.embed_dim;
        let (batch, seq) = (emb.batch, emb.seq);
        if tape.shape(emb.embeddings) != [batch, seq, n] || emb.attention_mask.len() != batch * seq {
            return Err(SvitError::Dimension {
                op: "forward",
                lhs: tape.shape(emb.embeddings).to_vec(),
                rhs: vec![batch, seq, n],
            });
        }
        let heads = self.config.heads;
        let layout = HeadLayout {
            batch,
            seq,
            heads,
            dim: self.config.head_dim(),
            parts: 3,
        };
        let bias = if emb.attention_mask.iter().all(|&m| m) {
            None
        } else {
            let mut data = vec![T::zero(); batch * heads * seq * seq];
            for bi in 0..batch {
                for h in 0..heads {
                    for q in 0..seq {
                        for k in 0..seq {
                            if !emb.attention_mask[bi * seq + k] {
                                data[((bi * heads + h) * seq + q) * seq + k] = T::lit(MASK_LOGIT);
                            }
                        }
                    }
                }
            }
            Some(tape.constant(&[batch * heads, seq, seq], data)?)
        };
        let scale = T::one() / T::lit(layout.dim as f64).sqrt();

        let mut x = tape.reshape(emb.embeddings, &[batch * seq, n])?;
        for (i, blk) in self.layout.blocks.iter().enumerate() {
            let h = self.norm(tape, b, x, blk.norm1)?;
            let qkv = self.linear(tape, b, h, blk.qkv)?;
            let q = tape.split_heads(qkv, layout, 0)?;
            let k = tape.split_heads(qkv, layout, 1)?;
            let v = tape.split_heads(qkv, layout, 2)?;
            let scores = tape.bmm(q, k, true)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(bias) = bias {
                scores = tape.add(scores, bias)?;
            }
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.bmm(attn, v, false)?;
            let ctx = tape.merge_heads(ctx, layout)?;
            let out = self.linear(tape, b, ctx, blk.proj)?;
            x = tape.add(x, out)?;

            let h = self.norm(tape, b, x, blk.norm2)?;
            let h = self.linear(tape, b, h, blk.fc1)?;
            let h = tape.gelu(h);
            let h = self.linear(tape, b, h, blk.fc2)?;
            x = tape.add(x, h)?;

            if !tape.value(x).iter().all(|v| v.is_finite()) {
                return Err(SvitError::Numeric(format!("non-finite activations after layer {i}")));
            }
        }
        let x = self.norm(tape, b, x, self.layout.norm)?;
        let cls_rows: Vec<Option<usize>> = (0..batch).map(|bi| Some(bi * seq)).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        self.linear(tape, b, cls, self.layout.head)
    }
}
