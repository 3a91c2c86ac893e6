// Line format:
//   SVITMANIFEST 1
//   image <id> <width> <height>
//   source <tag>                      (optional)
//   mask <index> bbox <x_min> <y_min> <x_max> <y_max> count <n>
//   run <row> <col_start> <len>       (one per run, after its mask line)

use std::fmt::Write as _;

use super::{Run, SegmentMask};
use crate::error::{Result, SvitError};

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "SVITMANIFEST";

/// Ordered masks for one image. Order is tokenization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentManifest {
    image_id: String,
    image_size: (usize, usize),
    masks: Vec<SegmentMask>,
    source: Option<String>,
}

fn check_word(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(SvitError::format(format!(
            "{kind} must be a non-empty token without whitespace, got {s:?}"
        )));
    }
    Ok(())
}

impl SegmentManifest {
    pub fn new(image_id: &str, image_size: (usize, usize), masks: Vec<SegmentMask>) -> Result<Self> {
        check_word("image id", image_id)?;
        if let Some(k) = masks.iter().position(|m| m.image_size() != image_size) {
            return Err(SvitError::format(format!(
                "image size mismatch at mask {k}: {:?} vs {:?}",
                masks[k].image_size(),
                image_size
            )));
        }
        Ok(Self {
            image_id: image_id.to_string(),
            image_size,
            masks,
            source: None,
        })
    }

    pub fn with_source(mut self, source: &str) -> Result<Self> {
        check_word("source tag", source)?;
        self.source = Some(source.to_string());
        Ok(self)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    /// (width, height)
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn masks(&self) -> &[SegmentMask] {
        &self.masks
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }
}

pub fn write_manifest(m: &SegmentManifest) -> Vec<u8> {
    let mut s = String::new();
    let (w, h) = m.image_size;
    let _ = writeln!(s, "{MAGIC} {MANIFEST_VERSION}");
    let _ = writeln!(s, "image {} {w} {h}", m.image_id);
    if let Some(src) = &m.source {
        let _ = writeln!(s, "source {src}");
    }
    for (k, mask) in m.masks.iter().enumerate() {
        let b = mask.bbox();
        let _ = writeln!(
            s,
            "mask {k} bbox {} {} {} {} count {}",
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max,
            mask.pixel_count()
        );
        for r in mask.runs() {
            let _ = writeln!(s, "run {} {} {}", r.row, r.col_start, r.len);
        }
    }
    s.into_bytes()
}

struct PendingMask {
    index: usize,
    bbox: [usize; 4],
    count: usize,
    runs: Vec<Run>,
}

fn finish(p: PendingMask, size: (usize, usize)) -> Result<SegmentMask> {
    let k = p.index;
    let mask = SegmentMask::from_runs(p.runs, size).map_err(|e| match e {
        SvitError::Format(msg) => SvitError::format(format!("{msg} at mask {k}")),
        other => other,
    })?;
    let b = mask.bbox();
    if [b.x_min, b.y_min, b.x_max, b.y_max] != p.bbox {
        return Err(SvitError::format(format!(
            "bbox {:?} is not the tight box {:?} at mask {k}",
            p.bbox,
            [b.x_min, b.y_min, b.x_max, b.y_max]
        )));
    }
    if mask.pixel_count() != p.count {
        return Err(SvitError::format(format!(
            "count {} disagrees with {} run pixels at mask {k}",
            p.count,
            mask.pixel_count()
        )));
    }
    Ok(mask)
}

fn nums<const N: usize>(fields: &[&str], lineno: usize) -> Result<[usize; N]> {
    if fields.len() != N {
        return Err(SvitError::format(format!(
            "line {lineno}: expected {N} numbers, found {}",
            fields.len()
        )));
    }
    let mut out = [0usize; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .parse()
            .map_err(|_| SvitError::format(format!("line {lineno}: bad integer {f:?}")))?;
    }
    Ok(out)
}

/// Parses and validates a manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<SegmentManifest> {
    let text = std::str::from_utf8(bytes).map_err(|e| SvitError::format(format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, header) = lines
        .next()
        .ok_or_else(|| SvitError::format("empty manifest"))?;
    match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        [MAGIC, v] if *v == MANIFEST_VERSION.to_string() => {}
        [MAGIC, v] => {
            return Err(SvitError::format(format!(
                "unsupported manifest version {v}, expected {MANIFEST_VERSION}"
            )))
        }
        _ => return Err(SvitError::format("missing SVITMANIFEST header")),
    }

    let (lineno, image_line) = lines
        .next()
        .ok_or_else(|| SvitError::format("missing image line"))?;
    let fields: Vec<&str> = image_line.split_whitespace().collect();
    let (id, size) = match fields.as_slice() {
        ["image", id, rest @ ..] => {
            let [w, h] = nums::<2>(rest, lineno)?;
            (id.to_string(), (w, h))
        }
        _ => return Err(SvitError::format(format!("line {lineno}: expected image line"))),
    };

    let mut source = None;
    let mut masks = Vec::new();
    let mut pending: Option<PendingMask> = None;
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["source", tag] if masks.is_empty() && pending.is_none() && source.is_none() => {
                source = Some(tag.to_string());
            }
            ["mask", idx, "bbox", x0, y0, x1, y1, "count", n] => {
                if let Some(p) = pending.take() {
                    masks.push(finish(p, size)?);
                }
                let [index] = nums::<1>(&[idx], lineno)?;
                if index != masks.len() {
                    return Err(SvitError::format(format!(
                        "line {lineno}: mask index {index}, expected {}",
                        masks.len()
                    )));
                }
                let bbox = nums::<4>(&[x0, y0, x1, y1], lineno)?;
                let [count] = nums::<1>(&[n], lineno)?;
                pending = Some(PendingMask {
                    index,
                    bbox,
                    count,
                    runs: Vec::new(),
                });
            }
            ["run", rest @ ..] => {
                let [row, col, len] = nums::<3>(rest, lineno)?;
                let p = pending
                    .as_mut()
                    .ok_or_else(|| SvitError::format(format!("line {lineno}: run before any mask")))?;
                p.runs.push(Run::new(row, col, len));
            }
            [] => {
                return Err(SvitError::format(format!("line {lineno}: blank line")));
            }
            _ => {
                return Err(SvitError::format(format!(
                    "line {lineno}: unrecognized record {line:?}"
                )))
            }
        }
    }
    if let Some(p) = pending.take() {
        masks.push(finish(p, size)?);
    }
    let m = SegmentManifest::new(&id, size, masks)?;
    match source {
        Some(s) => m.with_source(&s),
        None => Ok(m),
    }
}
