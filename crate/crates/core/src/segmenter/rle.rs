use super::Run;
use crate::error::{Result, SvitError};

/// Boolean pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bm = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                bm.bits[y * width + x] = f(x, y);
            }
        }
        bm
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }
}

/// Maximal horizontal runs in row-major order.
pub fn rle_encode(bitmap: &Bitmap) -> Vec<Run> {
    let mut runs = Vec::new();
    for y in 0..bitmap.height {
        let row = &bitmap.bits[y * bitmap.width..(y + 1) * bitmap.width];
        let mut x = 0;
        while x < row.len() {
            if row[x] {
                let start = x;
                while x < row.len() && row[x] {
                    x += 1;
                }
                runs.push(Run::new(y, start, x - start));
            } else {
                x += 1;
            }
        }
    }
    runs
}

/// Paints `runs` into a `width × height` bitmap.
pub fn rle_decode(runs: &[Run], image_size: (usize, usize)) -> Result<Bitmap> {
    let (w, h) = image_size;
    let mut bm = Bitmap::new(w, h);
    for r in runs {
        if r.row >= h || r.col_end() > w {
            return Err(SvitError::format(format!(
                "run (row {}, col {}, len {}) outside {w}x{h} image",
                r.row, r.col_start, r.len
            )));
        }
        for x in r.col_start..r.col_end() {
            bm.set(x, r.row, true);
        }
    }
    Ok(bm)
}
