//! Synthetic shape scenes with exact label maps, plus the on-disk dataset
//! layout used by the CLI.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::stream_rng;
use crate::error::{Result, SvitError};
use crate::segmenter::{read_manifest, segment_connected_components, write_manifest, LabelMap, SegmentManifest};

use super::config::KvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Square, Shape::Triangle];

    /// Whether the pixel centre at offset `(dx, dy)` from the object centre
    /// lies inside a shape of half-extent `half`.
    pub fn covers(self, dx: f64, dy: f64, half: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= half * half,
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
            // apex up, base on the bottom edge of the box
            Shape::Triangle => {
                let t = (dy + half) / (2.0 * half);
                (0.0..=1.0).contains(&t) && dx.abs() <= half * t
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        })
    }
}

impl FromStr for Shape {
    type Err = SvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(Shape::Disk),
            "square" => Ok(Shape::Square),
            "triangle" => Ok(Shape::Triangle),
            other => Err(SvitError::config(format!("unknown shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Class = the vocabulary index of the shape holding a strict majority.
    Multiset,
    /// Class 0 if the disk's centre is above the square's, else 1.
    DiskAboveSquare,
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelRule::Multiset => "multiset",
            LabelRule::DiskAboveSquare => "disk_above_square",
        })
    }
}

impl FromStr for LabelRule {
    type Err = SvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiset" => Ok(LabelRule::Multiset),
            "disk_above_square" | "relation" => Ok(LabelRule::DiskAboveSquare),
            other => Err(SvitError::config(format!("unknown label rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub palette: Vec<[u8; 3]>,
    pub background_palette: Vec<[u8; 3]>,
    pub objects: (usize, usize),
    /// Half-extent range in pixels.
    pub scale: (f64, f64),
    pub rule: LabelRule,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            shapes: Shape::ALL.to_vec(),
            palette: vec![
                [230, 60, 50],
                [60, 200, 80],
                [70, 110, 240],
                [240, 220, 60],
                [220, 90, 220],
                [80, 220, 230],
            ],
            background_palette: vec![[20, 20, 24], [60, 60, 60], [30, 40, 70]],
            objects: (1, 3),
            scale: (4.0, 8.0),
            rule: LabelRule::Multiset,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn num_classes(&self) -> usize {
        match self.rule {
            LabelRule::Multiset => self.shapes.len(),
            LabelRule::DiskAboveSquare => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SvitError::config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if self.shapes.is_empty() || self.palette.is_empty() || self.background_palette.is_empty() {
            return bad("shapes and palettes must be non-empty".into());
        }
        if self.palette.iter().any(|c| self.background_palette.contains(c)) {
            return bad("object and background palettes overlap".into());
        }
        let (lo, hi) = self.objects;
        if lo == 0 || lo > hi {
            return bad(format!("objects range {lo}..={hi} is invalid"));
        }
        let (s0, s1) = self.scale;
        if !(s0 >= 1.5 && s0 <= s1 && s1 * 2.0 + 2.0 <= self.image_size as f64) {
            return bad(format!("scale range ({s0}, {s1}) does not fit a {} px image", self.image_size));
        }
        if self.rule == LabelRule::DiskAboveSquare
            && (lo < 2 || !self.shapes.contains(&Shape::Disk) || !self.shapes.contains(&Shape::Square))
        {
            return bad("disk_above_square needs at least 2 objects and both disk and square".into());
        }
        Ok(())
    }

    /// Reads the documented keys; unspecified keys keep their defaults.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut s = Self::default();
        kv.take_into("image_size", &mut s.image_size)?;
        if let Some(list) = kv.take::<String>("shapes")? {
            s.shapes = list.split(',').map(|t| t.trim().parse()).collect::<Result<_>>()?;
        }
        kv.take_into("objects_min", &mut s.objects.0)?;
        kv.take_into("objects_max", &mut s.objects.1)?;
        kv.take_into("scale_min", &mut s.scale.0)?;
        kv.take_into("scale_max", &mut s.scale.1)?;
        kv.take_into("rule", &mut s.rule)?;
        kv.take_into("seed", &mut s.seed)?;
        s.validate()?;
        Ok(s)
    }
}

/// Distribution shift applied when regenerating a test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shift {
    /// Multiplies every half-extent.
    Scale(f64),
    /// Moves every object by whole pixels, clamped to the frame.
    Translate(i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [u8; 3],
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
}

impl SceneObject {
    /// Inclusive pixel box `(x0, y0, x1, y1)` that may contain the object.
    pub fn pixel_box(&self) -> (i64, i64, i64, i64) {
        (
            (self.cx - self.half).floor() as i64,
            (self.cy - self.half).floor() as i64,
            (self.cx + self.half).ceil() as i64,
            (self.cy + self.half).ceil() as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
}

/// Re-evaluates the label rule on a scene description.
pub fn scene_label(spec: &SyntheticSceneSpec, scene: &Scene) -> Option<usize> {
    match spec.rule {
        LabelRule::Multiset => {
            let n = scene.objects.len();
            spec.shapes.iter().position(|&s| {
                2 * scene.objects.iter().filter(|o| o.shape == s).count() > n
            })
        }
        LabelRule::DiskAboveSquare => {
            let find = |shape| {
                let mut it = scene.objects.iter().filter(move |o| o.shape == shape);
                match (it.next(), it.next()) {
                    (Some(o), None) => Some(o.cy),
                    _ => None,
                }
            };
            let (d, s) = (find(Shape::Disk)?, find(Shape::Square)?);
            Some(if d < s { 0 } else { 1 })
        }
    }
}

/// Paints the scene; object `k` gets label `k + 1` and the background 0.
pub fn render_scene(scene: &Scene, size: usize) -> (RgbImage, LabelMap) {
    let mut img = RgbImage::from_pixel(size as u32, size as u32, Rgb(scene.background));
    let mut labels = LabelMap::zeros(size, size);
    for (k, o) in scene.objects.iter().enumerate() {
        let (x0, y0, x1, y1) = o.pixel_box();
        for y in y0.max(0)..=y1.min(size as i64 - 1) {
            for x in x0.max(0)..=x1.min(size as i64 - 1) {
                let (dx, dy) = (x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy);
                if o.shape.covers(dx, dy, o.half) {
                    img.put_pixel(x as u32, y as u32, Rgb(o.color));
                    labels.set(x as usize, y as usize, k as u32 + 1);
                }
            }
        }
    }
    (img, labels)
}

fn boxes_clear(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
    // one pixel of gap on every side
    a.2 + 1 < b.0 || b.2 + 1 < a.0 || a.3 + 1 < b.1 || b.3 + 1 < a.1
}

const PLACE_TRIES: usize = 100;
const SCENE_TRIES: usize = 200;

fn shapes_for_class(spec: &SyntheticSceneSpec, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let mut shapes = match spec.rule {
        LabelRule::Multiset => {
            let target = spec.shapes[class];
            let mut v = vec![target; n / 2 + 1];
            while v.len() < n {
                v.push(spec.shapes[rng.random_range(0..spec.shapes.len())]);
            }
            v
        }
        LabelRule::DiskAboveSquare => {
            let others: Vec<Shape> = spec
                .shapes
                .iter()
                .copied()
                .filter(|s| !matches!(s, Shape::Disk | Shape::Square))
                .collect();
            let mut v = vec![Shape::Disk, Shape::Square];
            while v.len() < n && !others.is_empty() {
                v.push(others[rng.random_range(0..others.len())]);
            }
            v
        }
    };
    shapes.shuffle(rng);
    shapes
}

/// Scene `index` of a split. Drawing order is fixed so a shifted split
/// sees the same shapes, colours and base sizes as its unshifted twin.
/// Returns the scene and whether the shift had to be clamped.
fn make_scene(
    spec: &SyntheticSceneSpec,
    stream: u64,
    index: u64,
    shift: Option<Shift>,
) -> Result<(Scene, usize, bool)> {
    let size = spec.image_size as f64;
    let mut rng = stream_rng(spec.seed, index, stream);
    let class = rng.random_range(0..spec.num_classes());
    let max_half = size / 2.0 - 1.0;
    for _ in 0..SCENE_TRIES {
        let n = rng.random_range(spec.objects.0..=spec.objects.1);
        let shapes = shapes_for_class(spec, class, n, &mut rng);
        let background = spec.background_palette[rng.random_range(0..spec.background_palette.len())];
        let mut clamped = false;
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for &shape in &shapes {
            let color = spec.palette[rng.random_range(0..spec.palette.len())];
            let mut half = rng.random_range(spec.scale.0..=spec.scale.1);
            if let Some(Shift::Scale(f)) = shift {
                half *= f;
                if half > max_half {
                    half = max_half;
                    clamped = true;
                }
            }
            objects.push(SceneObject {
                shape,
                color,
                cx: 0.0,
                cy: 0.0,
                half,
            });
        }
        if !place(&mut objects, size, &mut rng) {
            continue;
        }
        if let Some(Shift::Translate(dx, dy)) = shift {
            let moved = translate(&objects, size, dx as f64, dy as f64);
            clamped |= moved.iter().zip(&objects).any(|(a, b)| {
                (a.cx - b.cx - dx as f64).abs() > 1e-9 || (a.cy - b.cy - dy as f64).abs() > 1e-9
            });
            objects = moved;
        }
        let scene = Scene { background, objects };
        match scene_label(spec, &scene) {
            Some(label) if label == class || spec.rule == LabelRule::Multiset => {
                return Ok((scene, label, clamped));
            }
            // the relation rule settles its class only after placement
            _ => continue,
        }
    }
    Err(SvitError::contract(format!(
        "could not place scene {index} after {SCENE_TRIES} attempts; widen the image or shrink the scale range"
    )))
}

fn place(objects: &mut [SceneObject], size: f64, rng: &mut ChaCha8Rng) -> bool {
    for k in 0..objects.len() {
        let half = objects[k].half;
        let mut ok = false;
        for _ in 0..PLACE_TRIES {
            objects[k].cx = rng.random_range(half..=size - half);
            objects[k].cy = rng.random_range(half..=size - half);
            let b = objects[k].pixel_box();
            if objects[..k].iter().all(|o| boxes_clear(o.pixel_box(), b)) {
                ok = true;
                break;
            }
        }
        if !ok {
            return false;
        }
    }
    true
}

// Whole-scene translation keeps relative layout; each object is clamped to
// the frame separately, falling back to no move if clamping would collide.
fn translate(objects: &[SceneObject], size: f64, dx: f64, dy: f64) -> Vec<SceneObject> {
    let mut out: Vec<SceneObject> = Vec::with_capacity(objects.len());
    for o in objects {
        let mut m = o.clone();
        m.cx = (o.cx + dx).clamp(o.half, size - o.half);
        m.cy = (o.cy + dy).clamp(o.half, size - o.half);
        if !out.iter().all(|p| boxes_clear(p.pixel_box(), m.pixel_box())) {
            m = o.clone();
        }
        out.push(m);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub label_map: Option<LabelMap>,
    pub manifest: SegmentManifest,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn sample_from_scene(spec: &SyntheticSceneSpec, id: String, scene: &Scene, label: usize) -> Result<Sample> {
    let (image, labels) = render_scene(scene, spec.image_size);
    let manifest = segment_connected_components(&labels, &id)?.with_source("synthetic")?;
    Ok(Sample {
        id,
        image,
        label_map: Some(labels),
        manifest,
        label,
    })
}

/// Scene descriptions for one split, for audits that need the geometry.
pub fn gen_scenes(spec: &SyntheticSceneSpec, test: bool, n: usize, shift: Option<Shift>) -> Result<Vec<(Scene, usize, bool)>> {
    spec.validate()?;
    let stream = if test { TEST_STREAM } else { TRAIN_STREAM };
    (0..n as u64).map(|i| make_scene(spec, stream, i, shift)).collect()
}

fn gen_split(spec: &SyntheticSceneSpec, test: bool, n: usize, shift: Option<Shift>) -> Result<(Vec<Sample>, usize)> {
    let prefix = if test { "test" } else { "train" };
    let mut clamped = 0;
    let samples = gen_scenes(spec, test, n, shift)?
        .into_iter()
        .enumerate()
        .map(|(i, (scene, label, c))| {
            clamped += c as usize;
            sample_from_scene(spec, format!("{prefix}_{i:05}"), &scene, label)
        })
        .collect::<Result<_>>()?;
    Ok((samples, clamped))
}

pub fn gen_dataset(spec: &SyntheticSceneSpec, n_train: usize, n_test: usize) -> Result<Dataset> {
    Ok(Dataset {
        num_classes: spec.num_classes(),
        train: gen_split(spec, false, n_train, None)?.0,
        test: gen_split(spec, true, n_test, None)?.0,
    })
}

/// Test split regenerated under `shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedSet {
    pub samples: Vec<Sample>,
    /// Scenes whose shift was limited by the frame.
    pub clamped: usize,
}

pub fn gen_shifted_testset(spec: &SyntheticSceneSpec, n_test: usize, shift: Shift) -> Result<ShiftedSet> {
    match shift {
        Shift::Scale(f) if !(f > 0.0 && f.is_finite()) => {
            return Err(SvitError::config(format!("scale factor {f} must be positive")));
        }
        _ => {}
    }
    let (samples, clamped) = gen_split(spec, true, n_test, Some(shift))?;
    Ok(ShiftedSet { samples, clamped })
}

const DATA_MAGIC: &str = "SVITDATA 1";

fn write_split(dir: &Path, name: &str, samples: &[Sample]) -> Result<()> {
    let mut list = String::new();
    for s in samples {
        s.image.save(dir.join("images").join(format!("{}.ppm", s.id)))?;
        if let Some(lm) = &s.label_map {
            lm.to_gray()?.save(dir.join("labels").join(format!("{}.pgm", s.id)))?;
        }
        fs::write(dir.join("manifests").join(format!("{}.svm", s.id)), write_manifest(&s.manifest))?;
        list.push_str(&format!("{} {}\n", s.id, s.label));
    }
    fs::write(dir.join(format!("{name}.txt")), list)?;
    Ok(())
}

/// Writes `dataset.txt`, `train.txt`, `test.txt` and the `images/`,
/// `labels/`, `manifests/` directories.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels", "manifests"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("dataset.txt"), format!("{DATA_MAGIC}\nclasses {}\n", data.num_classes))?;
    write_split(dir, "train", &data.train)?;
    write_split(dir, "test", &data.test)
}

/// Reads one split. Label maps are optional on disk.
pub fn load_split(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let list = fs::read_to_string(dir.join(format!("{name}.txt")))?;
    let mut out = Vec::new();
    for (n, line) in list.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(id), Some(label), None) = (it.next(), it.next(), it.next()) else {
            return Err(SvitError::format(format!("{name}.txt line {}: expected `<id> <label>`", n + 1)));
        };
        let label: usize = label
            .parse()
            .map_err(|_| SvitError::format(format!("{name}.txt line {}: bad label {label:?}", n + 1)))?;
        let image = image::open(dir.join("images").join(format!("{id}.ppm")))?.to_rgb8();
        let manifest = read_manifest(&fs::read(dir.join("manifests").join(format!("{id}.svm")))?)?;
        let lpath = dir.join("labels").join(format!("{id}.pgm"));
        let label_map = if lpath.exists() {
            let g: GrayImage = image::open(lpath)?.to_luma8();
            Some(LabelMap::from_gray(&g))
        } else {
            None
        };
        out.push(Sample {
            id: id.to_string(),
            image,
            label_map,
            manifest,
            label,
        });
    }
    Ok(out)
}

pub fn read_num_classes(dir: &Path) -> Result<usize> {
    let text = fs::read_to_string(dir.join("dataset.txt"))?;
    let mut lines = text.lines();
    if lines.next() != Some(DATA_MAGIC) {
        return Err(SvitError::format(format!("dataset.txt must start with {DATA_MAGIC:?}")));
    }
    let classes = lines
        .next()
        .and_then(|l| l.strip_prefix("classes "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| SvitError::format("dataset.txt: expected `classes <n>`"))?;
    Ok(classes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let num_classes = read_num_classes(dir)?;
    let data = Dataset {
        num_classes,
        train: load_split(dir, "train")?,
        test: load_split(dir, "test")?,
    };
    if let Some(s) = data.train.iter().chain(&data.test).find(|s| s.label >= num_classes) {
        return Err(SvitError::Label {
            label: s.label,
            classes: num_classes,
        });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_cover_expected_pixels() {
        assert!(Shape::Disk.covers(0.0, 0.0, 3.0));
        assert!(!Shape::Disk.covers(2.5, 2.5, 3.0));
        assert!(Shape::Square.covers(2.5, 2.5, 3.0));
        assert!(Shape::Triangle.covers(0.0, -2.9, 3.0));
        assert!(!Shape::Triangle.covers(2.0, -2.0, 3.0));
        assert!(Shape::Triangle.covers(2.9, 2.95, 3.0));
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        let spec = SyntheticSceneSpec::default();
        let a = gen_dataset(&spec, 20, 10).unwrap();
        let b = gen_dataset(&spec, 20, 10).unwrap();
        assert_eq!(a, b);
        let other = gen_dataset(&SyntheticSceneSpec { seed: 9, ..spec }, 20, 10).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn labels_match_rule_and_objects_are_separate_segments() {
        for rule in [LabelRule::Multiset, LabelRule::DiskAboveSquare] {
            let spec = SyntheticSceneSpec {
                rule,
                objects: (2, 3),
                ..Default::default()
            };
            let scenes = gen_scenes(&spec, false, 300, None).unwrap();
            let mut counts = vec![0; spec.num_classes()];
            for (scene, label, _) in &scenes {
                assert_eq!(scene_label(&spec, scene), Some(*label));
                counts[*label] += 1;
                let (_, lm) = render_scene(scene, spec.image_size);
                let m = segment_connected_components(&lm, "x").unwrap();
                assert_eq!(m.masks().len(), scene.objects.len());
            }
            assert!(counts.iter().all(|&c| c > 50), "{rule}: {counts:?}");
        }
    }

    #[test]
    fn empty_train_split() {
        let d = gen_dataset(&SyntheticSceneSpec::default(), 0, 5).unwrap();
        assert!(d.train.is_empty());
        assert_eq!(d.test.len(), 5);
    }

    #[test]
    fn unit_scale_shift_matches_base_test_split() {
        let spec = SyntheticSceneSpec::default();
        let base = gen_dataset(&spec, 0, 15).unwrap().test;
        let shifted = gen_shifted_testset(&spec, 15, Shift::Scale(1.0)).unwrap();
        assert_eq!(shifted.samples, base);
        assert_eq!(shifted.clamped, 0);
    }

    #[test]
    fn translation_keeps_multiset_labels() {
        let spec = SyntheticSceneSpec::default();
        let base = gen_scenes(&spec, true, 50, None).unwrap();
        let moved = gen_scenes(&spec, true, 50, Some(Shift::Translate(5, -3))).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert_eq!(a.1, b.1);
            assert_eq!(scene_label(&spec, &b.0), Some(b.1));
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let bad = SyntheticSceneSpec {
            scale: (10.0, 40.0),
            ..Default::default()
        };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let mut kv = KvConfig::parse("rule = relation\nobjects_min = 1").unwrap();
        assert!(SyntheticSceneSpec::from_kv(&mut kv).is_err());
        let mut kv = KvConfig::parse("shapes = disk,square\nseed = 4").unwrap();
        let s = SyntheticSceneSpec::from_kv(&mut kv).unwrap();
        assert_eq!(s.num_classes(), 2);
        assert_eq!(s.seed, 4);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(&SyntheticSceneSpec::default(), 4, 3).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }
}
