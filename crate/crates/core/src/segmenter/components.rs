use std::collections::{HashMap, VecDeque};

use image::{GrayImage, RgbImage};

use super::{rle_encode, Bitmap, SegmentManifest, SegmentMask};
use crate::error::{Result, SvitError};

/// Integer label grid; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(SvitError::Dimension {
                op: "label_map",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u32) {
        self.labels[y * self.width + x] = label;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            labels: img.as_raw().iter().map(|&v| v as u32).collect(),
        }
    }

    /// 8-bit rendering; fails if any label exceeds 255.
    pub fn to_gray(&self) -> Result<GrayImage> {
        let raw = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| SvitError::format(format!("label {l} > 255"))))
            .collect::<Result<Vec<u8>>>()?;
        Ok(GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions"))
    }
}

/// Labels an RGB image by exact color: the most frequent color becomes
/// background (0), every other color gets a label in order of first
/// appearance.
pub fn label_map_from_colors(img: &RgbImage) -> LabelMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    let mut order: Vec<[u8; 3]> = Vec::new();
    for p in img.pixels() {
        let e = counts.entry(p.0).or_insert_with(|| {
            order.push(p.0);
            0
        });
        *e += 1;
    }
    // first-seen wins ties so the choice does not depend on hash order
    let background = order
        .iter()
        .copied()
        .fold(None::<([u8; 3], usize)>, |best, c| match best {
            Some((_, n)) if n >= counts[&c] => best,
            _ => Some((c, counts[&c])),
        })
        .map(|(c, _)| c);
    let mut ids: HashMap<[u8; 3], u32> = HashMap::new();
    let mut next = 1;
    for c in &order {
        if Some(*c) != background {
            ids.insert(*c, next);
            next += 1;
        }
    }
    let labels = img
        .pixels()
        .map(|p| ids.get(&p.0).copied().unwrap_or(0))
        .collect();
    LabelMap {
        width: w,
        height: h,
        labels,
    }
}

/// One mask per 4-connected component of each nonzero label, ordered by
/// `(y_min, x_min, label)`.
pub fn segment_connected_components(labels: &LabelMap, image_id: &str) -> Result<SegmentManifest> {
    let (w, h) = (labels.width, labels.height);
    let mut seen = vec![false; w * h];
    let mut found: Vec<(usize, usize, u32, SegmentMask)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        let label = labels.labels[start];
        if label == 0 || seen[start] {
            continue;
        }
        let mut bm = Bitmap::new(w, h);
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            bm.set(x, y, true);
            let mut visit = |j: usize| {
                if !seen[j] && labels.labels[j] == label {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        let mask = SegmentMask::from_runs(rle_encode(&bm), (w, h))?;
        let bb = mask.bbox();
        found.push((bb.y_min, bb.x_min, label, mask));
    }
    // stable: discovery order breaks remaining ties
    found.sort_by_key(|(y, x, l, _)| (*y, *x, *l));
    SegmentManifest::new(
        image_id,
        (w, h),
        found.into_iter().map(|(_, _, _, m)| m).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::BBox;

    fn map(w: usize, h: usize, f: impl Fn(usize, usize) -> u32) -> LabelMap {
        let mut lm = LabelMap::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                lm.set(x, y, f(x, y));
            }
        }
        lm
    }

    // Recursive flood fill over the pixel set, independent of the BFS above.
    fn oracle_components(lm: &LabelMap) -> Vec<Vec<(usize, usize)>> {
        fn fill(lm: &LabelMap, seen: &mut Vec<bool>, x: usize, y: usize, l: u32, out: &mut Vec<(usize, usize)>) {
            if seen[y * lm.width() + x] || lm.get(x, y) != l {
                return;
            }
            seen[y * lm.width() + x] = true;
            out.push((x, y));
            if x > 0 {
                fill(lm, seen, x - 1, y, l, out);
            }
            if x + 1 < lm.width() {
                fill(lm, seen, x + 1, y, l, out);
            }
            if y > 0 {
                fill(lm, seen, x, y - 1, l, out);
            }
            if y + 1 < lm.height() {
                fill(lm, seen, x, y + 1, l, out);
            }
        }
        let mut seen = vec![false; lm.width() * lm.height()];
        let mut comps = Vec::new();
        for y in 0..lm.height() {
            for x in 0..lm.width() {
                let l = lm.get(x, y);
                if l != 0 && !seen[y * lm.width() + x] {
                    let mut c = Vec::new();
                    fill(lm, &mut seen, x, y, l, &mut c);
                    c.sort_by_key(|&(x, y)| (y, x));
                    comps.push(c);
                }
            }
        }
        comps.sort();
        comps
    }

    #[test]
    fn all_zero_image_gives_empty_manifest() {
        let m = segment_connected_components(&LabelMap::zeros(8, 8), "blank").unwrap();
        assert!(m.masks().is_empty());
    }

    #[test]
    fn single_pixel_component() {
        let lm = map(8, 8, |x, y| u32::from(x == 5 && y == 3));
        let m = segment_connected_components(&lm, "px").unwrap();
        assert_eq!(m.masks().len(), 1);
        let mask = &m.masks()[0];
        assert_eq!(
            mask.bbox(),
            BBox {
                x_min: 5,
                y_min: 3,
                x_max: 5,
                y_max: 3
            }
        );
        assert_eq!(mask.pixel_count(), 1);
    }

    #[test]
    fn two_disjoint_squares_match_flood_fill_oracle() {
        let lm = map(8, 8, |x, y| {
            u32::from((1..3).contains(&x) && (1..3).contains(&y) || (5..7).contains(&x) && (4..6).contains(&y))
        });
        let m = segment_connected_components(&lm, "sq").unwrap();
        assert_eq!(m.masks().len(), 2);
        assert_eq!(m.masks().iter().map(|k| k.pixel_count()).sum::<usize>(), 8);
        let mut ours: Vec<Vec<(usize, usize)>> = m.masks().iter().map(|k| k.pixels().collect()).collect();
        ours.sort();
        assert_eq!(ours, oracle_components(&lm));
    }

    #[test]
    fn diagonal_pixels_are_separate_under_4_connectivity() {
        let lm = map(4, 4, |x, y| u32::from(x == y));
        let m = segment_connected_components(&lm, "diag").unwrap();
        assert_eq!(m.masks().len(), 4);
    }

    #[test]
    fn ordering_is_by_top_then_left_then_label() {
        let lm = map(6, 4, |x, y| match (x, y) {
            (4, 0) => 2,
            (0, 0) => 3,
            (2, 0) => 1,
            (0, 2) => 1,
            _ => 0,
        });
        let m = segment_connected_components(&lm, "ord").unwrap();
        let starts: Vec<(usize, usize)> = m.masks().iter().map(|k| (k.bbox().x_min, k.bbox().y_min)).collect();
        assert_eq!(starts, vec![(0, 0), (2, 0), (4, 0), (0, 2)]);
    }

    #[test]
    fn random_maps_partition_nonzero_pixels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (w, h) = (rng.random_range(1..16), rng.random_range(1..16));
            let vals: Vec<u32> = (0..w * h).map(|_| rng.random_range(0..4)).collect();
            let lm = LabelMap::new(w, h, vals).unwrap();
            let m = segment_connected_components(&lm, "r").unwrap();
            let mut owner = vec![0usize; w * h];
            for k in m.masks() {
                for (x, y) in k.pixels() {
                    owner[y * w + x] += 1;
                }
                let bb = k.bbox();
                // tightness: all four boundary lines touch the mask
                let px: Vec<_> = k.pixels().collect();
                assert!(px.iter().any(|p| p.0 == bb.x_min) && px.iter().any(|p| p.0 == bb.x_max));
                assert!(px.iter().any(|p| p.1 == bb.y_min) && px.iter().any(|p| p.1 == bb.y_max));
            }
            for i in 0..w * h {
                assert_eq!(owner[i], usize::from(lm.as_slice()[i] != 0));
            }
            let mut ours: Vec<Vec<(usize, usize)>> = m.masks().iter().map(|k| k.pixels().collect()).collect();
            ours.sort();
            assert_eq!(ours, oracle_components(&lm));
        }
    }

    #[test]
    fn color_labels_use_most_frequent_color_as_background() {
        let mut img = RgbImage::from_pixel(4, 4, image::Rgb([10, 10, 10]));
        img.put_pixel(1, 1, image::Rgb([200, 0, 0]));
        img.put_pixel(3, 3, image::Rgb([0, 200, 0]));
        let lm = label_map_from_colors(&img);
        assert_eq!(lm.get(0, 0), 0);
        assert_eq!(lm.get(1, 1), 1);
        assert_eq!(lm.get(3, 3), 2);
    }
}
