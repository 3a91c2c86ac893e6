// Checkpoint layout:
//   SVITCKPT 1\n
//   config mode=<svit|vit> patch_size=<P> embed_dim=<N> depth=<d> heads=<h>
//          mlp_ratio=<r> token_capacity=<c> num_classes=<C> init_seed=<s>\n
//   tensors <count>\n
//   per tensor: <name> <rank> <dim0> ... <dimR-1>\n then numel·4 bytes of
//   little-endian f32.

use std::fmt::Write as _;

use super::{Model, ModelConfig};
use crate::error::{Result, SvitError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "SVITCKPT 1";

pub fn write_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let c = model.config();
    let mut head = String::new();
    let _ = writeln!(head, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(
        head,
        "config mode={} patch_size={} embed_dim={} depth={} heads={} mlp_ratio={} token_capacity={} num_classes={} init_seed={}",
        c.mode, c.patch_size, c.embed_dim, c.depth, c.heads, c.mlp_ratio, c.token_capacity, c.num_classes, c.init_seed
    );
    let _ = writeln!(head, "tensors {}", model.params().len());
    let mut out = head.into_bytes();
    for p in model.params() {
        let mut line = format!("{} {}", p.name, p.tensor.shape().len());
        for d in p.tensor.shape() {
            let _ = write!(line, " {d}");
        }
        line.push('\n');
        out.extend_from_slice(line.as_bytes());
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| SvitError::format("truncated checkpoint header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| SvitError::format("non-UTF-8 checkpoint header"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SvitError::format("truncated checkpoint data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse_config(line: &str) -> Result<ModelConfig> {
    let mut fields = line.split_whitespace();
    if fields.next() != Some("config") {
        return Err(SvitError::format("missing config line in checkpoint"));
    }
    let mut cfg = ModelConfig::desk(super::Mode::Svit, 1);
    for kv in fields {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SvitError::format(format!("bad config entry {kv:?}")))?;
        let num = || -> Result<usize> {
            v.parse()
                .map_err(|_| SvitError::format(format!("bad value for {k}: {v:?}")))
        };
        match k {
            "mode" => cfg.mode = v.parse()?,
            "patch_size" => cfg.patch_size = num()?,
            "embed_dim" => cfg.embed_dim = num()?,
            "depth" => cfg.depth = num()?,
            "heads" => cfg.heads = num()?,
            "mlp_ratio" => cfg.mlp_ratio = num()?,
            "token_capacity" => cfg.token_capacity = num()?,
            "num_classes" => cfg.num_classes = num()?,
            "init_seed" => {
                cfg.init_seed = v
                    .parse()
                    .map_err(|_| SvitError::format(format!("bad init_seed {v:?}")))?
            }
            other => return Err(SvitError::format(format!("unknown config key {other:?}"))),
        }
    }
    Ok(cfg)
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(SvitError::format(format!(
            "not a checkpoint (header {magic:?}, expected {CHECKPOINT_MAGIC:?})"
        )));
    }
    let cfg = parse_config(cur.line()?)?;
    let count: usize = match cur.line()?.split_once(' ') {
        Some(("tensors", n)) => n
            .parse()
            .map_err(|_| SvitError::format("bad tensor count"))?,
        _ => return Err(SvitError::format("missing tensors line")),
    };
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let fields: Vec<&str> = cur.line()?.split_whitespace().collect();
        let (name, rank) = match fields.as_slice() {
            [name, rank, ..] => (
                name.to_string(),
                rank.parse::<usize>()
                    .map_err(|_| SvitError::format(format!("bad rank for {name}")))?,
            ),
            _ => return Err(SvitError::format("malformed tensor header")),
        };
        if fields.len() != rank + 2 {
            return Err(SvitError::format(format!("rank/shape mismatch for {name}")));
        }
        let shape = fields[2..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| SvitError::format(format!("bad dim for {name}"))))
            .collect::<Result<Vec<usize>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(SvitError::format("trailing bytes after checkpoint tensors"));
    }
    Model::from_parts(cfg, loaded)
}
