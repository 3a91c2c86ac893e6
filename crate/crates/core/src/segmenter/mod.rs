//! Segment masks: run-length encoding, a reference connected-components
//! segmenter, and the `SVITMANIFEST 1` interchange format.

mod components;
mod manifest;
mod rle;

pub use components::{label_map_from_colors, segment_connected_components, LabelMap};
pub use manifest::{read_manifest, write_manifest, SegmentManifest, MANIFEST_VERSION};
pub use rle::{rle_decode, rle_encode, Bitmap};

use crate::error::{Result, SvitError};

/// One horizontal run of mask pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Run {
    pub row: usize,
    pub col_start: usize,
    pub len: usize,
}

impl Run {
    pub fn new(row: usize, col_start: usize, len: usize) -> Self {
        Self {
            row,
            col_start,
            len,
        }
    }

    /// One past the last column.
    pub fn col_end(&self) -> usize {
        self.col_start + self.len
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

/// A single segment stored as sorted, non-overlapping runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    runs: Vec<Run>,
    bbox: BBox,
    pixel_count: usize,
    image_size: (usize, usize),
}

impl SegmentMask {
    /// Validates `runs` against `image_size` (width, height) and derives the
    /// tight bounding box and pixel count.
    pub fn from_runs(runs: Vec<Run>, image_size: (usize, usize)) -> Result<Self> {
        let (w, h) = image_size;
        if runs.is_empty() {
            return Err(SvitError::format("mask has no pixels"));
        }
        for r in &runs {
            if r.len == 0 {
                return Err(SvitError::format(format!("zero-length run at row {}", r.row)));
            }
            if r.row >= h || r.col_end() > w {
                return Err(SvitError::format(format!(
                    "run (row {}, col {}, len {}) outside {w}x{h} image",
                    r.row, r.col_start, r.len
                )));
            }
        }
        for pair in runs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if (b.row, b.col_start) <= (a.row, a.col_start) {
                return Err(SvitError::format("runs not sorted"));
            }
            if a.row == b.row && b.col_start < a.col_end() {
                return Err(SvitError::format("runs overlap"));
            }
        }
        let mut bbox = BBox {
            x_min: usize::MAX,
            y_min: runs[0].row,
            x_max: 0,
            y_max: runs[runs.len() - 1].row,
        };
        for r in &runs {
            bbox.x_min = bbox.x_min.min(r.col_start);
            bbox.x_max = bbox.x_max.max(r.col_end() - 1);
        }
        let pixel_count = runs.iter().map(|r| r.len).sum();
        Ok(Self {
            runs,
            bbox,
            pixel_count,
            image_size,
        })
    }

    pub fn from_bitmap(bitmap: &Bitmap) -> Result<Self> {
        Self::from_runs(rle_encode(bitmap), (bitmap.width(), bitmap.height()))
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    /// (width, height)
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    /// Every `(x, y)` pixel of the mask in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (r.col_start..r.col_end()).map(move |x| (x, r.row)))
    }

    pub fn to_bitmap(&self) -> Bitmap {
        let mut bm = Bitmap::new(self.image_size.0, self.image_size.1);
        for (x, y) in self.pixels() {
            bm.set(x, y, true);
        }
        bm
    }
}
