//! Training and evaluation loops.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{augment_segments, augment_whole_image, stream_rng, AugmentConfig, BaselineAugConfig};
use crate::error::{Result, SvitError};
use crate::model::{prepare_vit_image, Mode, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Var};
use crate::tokenizer::{tokenize, Patch, TokenizedImage};

use super::config::KvConfig;
use super::synth::{Dataset, Sample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Linear learning-rate warmup length in epochs; 0 disables it.
    pub warmup_epochs: f64,
    pub augment: bool,
    pub segment_aug: AugmentConfig,
    pub baseline_aug: BaselineAugConfig,
    /// Train only the classification head.
    pub probe: bool,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 1.0,
            augment: false,
            segment_aug: AugmentConfig::default(),
            baseline_aug: BaselineAugConfig::default(),
            probe: false,
            seed: 0,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    /// Large-scale batch; everything else matches the desk default.
    pub fn large() -> Self {
        Self {
            batch_size: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(SvitError::config(format!("lr {} must be non-negative", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(SvitError::config("betas must lie in [0, 1)"));
        }
        if !(a.weight_decay >= 0.0 && a.eps > 0.0) {
            return Err(SvitError::config("weight_decay must be >= 0 and adam_eps > 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch_size == 0 {
            return Err(SvitError::config("batch_size and epochs must be positive"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return Err(SvitError::config("warmup_epochs must be non-negative"));
        }
        self.segment_aug.validate()?;
        self.baseline_aug.validate()
    }

    /// Reads the documented training and augmentation keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut c = match kv.take::<String>("train_preset")?.as_deref() {
            None | Some("desk") => Self::default(),
            Some("large") => Self::large(),
            Some(other) => return Err(SvitError::config(format!("unknown train_preset {other:?}"))),
        };
        kv.take_into("lr", &mut c.adam.lr)?;
        kv.take_into("beta1", &mut c.adam.beta1)?;
        kv.take_into("beta2", &mut c.adam.beta2)?;
        kv.take_into("weight_decay", &mut c.adam.weight_decay)?;
        kv.take_into("adam_eps", &mut c.adam.eps)?;
        kv.take_into("batch_size", &mut c.batch_size)?;
        kv.take_into("eval_batch_size", &mut c.eval_batch_size)?;
        kv.take_into("epochs", &mut c.epochs)?;
        kv.take_into("warmup_epochs", &mut c.warmup_epochs)?;
        kv.take_into("augment", &mut c.augment)?;
        kv.take_into("probe", &mut c.probe)?;
        kv.take_into("seed", &mut c.seed)?;
        let s = &mut c.segment_aug;
        kv.take_into("max_perc", &mut s.max_perc)?;
        kv.take_pair("crop_scale", &mut s.crop_scale)?;
        kv.take_pair("crop_ratio", &mut s.crop_ratio)?;
        kv.take_into("hflip_prob", &mut s.hflip_prob)?;
        kv.take_into("geom_noise_var", &mut s.geom_noise_var)?;
        kv.take_into("aug_seed", &mut s.rng_seed)?;
        if let Some(ops) = kv.take::<String>("enabled_ops")? {
            s.enabled_ops = crate::augment::EnabledOps::parse(&ops)?;
        }
        let b = &mut c.baseline_aug;
        kv.take_pair("vit_crop_scale", &mut b.crop_scale)?;
        kv.take_pair("vit_crop_ratio", &mut b.crop_ratio)?;
        kv.take_into("vit_hflip_prob", &mut b.hflip_prob)?;
        c.validate()?;
        Ok(c)
    }
}

/// Model keys: `preset` (desk | large) first, then individual overrides.
/// `num_classes` falls back to `default_classes`.
pub fn model_config_from_kv(kv: &mut KvConfig, default_classes: usize) -> Result<ModelConfig> {
    let mode = kv.take::<Mode>("mode")?.unwrap_or(Mode::Svit);
    let mut c = match kv.take::<String>("preset")?.as_deref() {
        None | Some("desk") => ModelConfig::desk(mode, default_classes),
        Some("large") => ModelConfig::large(mode, default_classes),
        Some(other) => return Err(SvitError::config(format!("unknown preset {other:?}"))),
    };
    kv.take_into("patch_size", &mut c.patch_size)?;
    kv.take_into("embed_dim", &mut c.embed_dim)?;
    kv.take_into("depth", &mut c.depth)?;
    kv.take_into("heads", &mut c.heads)?;
    kv.take_into("mlp_ratio", &mut c.mlp_ratio)?;
    kv.take_into("token_capacity", &mut c.token_capacity)?;
    kv.take_into("num_classes", &mut c.num_classes)?;
    kv.take_into("init_seed", &mut c.init_seed)?;
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    pub wall_clock_secs: f64,
}

impl Metrics {
    /// One line per epoch. Wall-clock time is left out so reruns compare
    /// equal.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch train_loss train_acc val_loss val_acc\n");
        for e in &self.epochs {
            let (vl, va) = match &e.val {
                Some(v) => (v.loss.to_string(), v.accuracy.to_string()),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(s, "{} {} {} {vl} {va}", e.epoch, e.train_loss, e.train_accuracy);
        }
        s
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

/// Model inputs built once per sample: token sequences for sViT, resized
/// images for the grid baseline.
#[derive(Debug, Clone)]
pub struct PreparedSet<T> {
    pub mode: Mode,
    pub tokens: Vec<TokenizedImage<T>>,
    pub images: Vec<Patch<T>>,
    pub labels: Vec<usize>,
}

impl<T> PreparedSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn prepare_set<T: Scalar>(cfg: &ModelConfig, samples: &[Sample]) -> Result<PreparedSet<T>> {
    let mut set = PreparedSet {
        mode: cfg.mode,
        tokens: Vec::new(),
        images: Vec::new(),
        labels: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        if s.label >= cfg.num_classes {
            return Err(SvitError::contract(format!(
                "sample {} has label {} but the model has {} classes",
                s.id, s.label, cfg.num_classes
            )));
        }
        match cfg.mode {
            Mode::Svit => set.tokens.push(tokenize(&s.image, &s.manifest, cfg.patch_size)?),
            Mode::Vit => set.images.push(prepare_vit_image(&s.image, cfg.vit_image_side())),
        }
        set.labels.push(s.label);
    }
    Ok(set)
}

/// Logits `[batch, classes]` for the listed items.
pub fn forward_batch<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &crate::model::Bound,
    set: &PreparedSet<T>,
    items: &[usize],
) -> Result<Var> {
    let emb = match set.mode {
        Mode::Svit => {
            let batch: Vec<&TokenizedImage<T>> = items.iter().map(|&i| &set.tokens[i]).collect();
            model.embed_svit(tape, bound, &batch)?
        }
        Mode::Vit => {
            let batch: Vec<&Patch<T>> = items.iter().map(|&i| &set.images[i]).collect();
            model.embed_vit(tape, bound, &batch)?
        }
    };
    model.forward(tape, bound, &emb)
}

/// Logits for every item as `f64` rows.
pub fn predict<T: Scalar>(model: &Model<T>, set: &PreparedSet<T>, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let c = model.config().num_classes;
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut tape = Tape::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        tape.reset();
        let bound = model.bind_constants(&mut tape);
        let logits = forward_batch(model, &mut tape, &bound, set, chunk)?;
        out.extend(tape.value(logits).chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and top-1 accuracy. Parameters are only read.
pub fn evaluate_prepared<T: Scalar>(model: &Model<T>, set: &PreparedSet<T>, batch_size: usize) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(SvitError::contract("cannot evaluate an empty dataset"));
    }
    if set.mode != model.config().mode {
        return Err(SvitError::contract("prepared inputs do not match the model mode"));
    }
    let rows = predict(model, set, batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in rows.iter().zip(&set.labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        correct += (argmax(row) == y) as usize;
    }
    let count = set.len();
    Ok(EvalMetrics {
        loss: loss / count as f64,
        accuracy: correct as f64 / count as f64,
        correct,
        count,
    })
}

pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(SvitError::contract("cannot evaluate an empty dataset"));
    }
    let set = prepare_set(model.config(), samples)?;
    evaluate_prepared(model, &set, batch_size)
}

fn lr_at(cfg: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch as f64;
    if warm <= 0.0 {
        cfg.adam.lr
    } else {
        cfg.adam.lr * ((step + 1) as f64 / warm).min(1.0)
    }
}

/// Trains `model` in place on `train`, evaluating on `val` after every
/// epoch when given.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    train: &PreparedSet<T>,
    val: Option<&PreparedSet<T>>,
) -> Result<Metrics> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SvitError::contract("cannot train on an empty dataset"));
    }
    if train.mode != model.config().mode {
        return Err(SvitError::contract("prepared inputs do not match the model mode"));
    }
    let start = Instant::now();
    if cfg.probe {
        model.linear_probe_mode();
    }
    let trainable = model.trainable();
    let mut states: Vec<AdamState<T>> = trainable
        .iter()
        .map(|&i| AdamState::new(model.params()[i].tensor.len()))
        .collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let c = model.config().num_classes;
    let aug_seed = cfg.seed ^ cfg.segment_aug.rng_seed.rotate_left(32);
    let mut tape = Tape::new();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, u64::MAX, epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_set;
            let (set, items): (&PreparedSet<T>, Vec<usize>) = if cfg.augment {
                batch_set = augmented_batch(train, chunk, cfg, aug_seed, epoch)?;
                (&batch_set, (0..chunk.len()).collect())
            } else {
                (train, chunk.to_vec())
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            tape.reset();
            let bound = model.bind(&mut tape);
            let logits = forward_batch(model, &mut tape, &bound, set, &items).map_err(|e| match e {
                SvitError::Numeric(m) => SvitError::Numeric(format!("epoch {} step {b}: {m}", epoch + 1)),
                other => other,
            })?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let lv = tape.value(loss)[0].as_f64();
            if !lv.is_finite() {
                return Err(SvitError::Numeric(format!(
                    "loss is {lv} at epoch {} step {b}",
                    epoch + 1
                )));
            }
            loss_sum += lv * chunk.len() as f64;
            for (row, &y) in tape.value(logits).chunks(c).zip(&labels) {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                correct += (argmax(&row) == y) as usize;
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &bound)?;
            let adam = AdamConfig {
                lr: lr_at(cfg, step, steps_per_epoch),
                ..cfg.adam
            };
            for (&i, state) in trainable.iter().zip(states.iter_mut()) {
                let p = &mut model.params_mut()[i].tensor;
                let g = p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.len()]);
                adam_step(p.data_mut(), &g, state, &adam)?;
                if !p.is_finite() {
                    return Err(SvitError::Numeric(format!(
                        "parameter {} became non-finite at epoch {} step {b}",
                        model.params()[i].name,
                        epoch + 1
                    )));
                }
            }
            step += 1;
        }
        let val = val.map(|v| evaluate_prepared(model, v, cfg.eval_batch_size)).transpose()?;
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val,
        });
    }
    for p in model.params_mut() {
        p.tensor.zero_grad();
    }
    Ok(Metrics {
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn augmented_batch<T: Scalar>(
    train: &PreparedSet<T>,
    chunk: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<PreparedSet<T>> {
    let mut out = PreparedSet {
        mode: train.mode,
        tokens: Vec::new(),
        images: Vec::new(),
        labels: chunk.iter().map(|&i| train.labels[i]).collect(),
    };
    for &i in chunk {
        let mut rng = stream_rng(seed, i as u64, epoch as u64);
        match train.mode {
            Mode::Svit => out.tokens.push(augment_segments(&train.tokens[i], &cfg.segment_aug, &mut rng)),
            Mode::Vit => {
                let img = train.images[i].to_image();
                let aug = augment_whole_image(&img, &cfg.baseline_aug, &mut rng);
                out.images.push(Patch::from_image(&aug));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: Metrics,
}

/// Fresh model from `model_cfg`, trained on the dataset's train split and
/// validated on its test split.
pub fn train<T: Scalar>(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    if data.num_classes != model_cfg.num_classes {
        return Err(SvitError::contract(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, model_cfg.num_classes
        )));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let train_set = prepare_set(model_cfg, &data.train)?;
    let val_set = if data.test.is_empty() {
        None
    } else {
        Some(prepare_set(model_cfg, &data.test)?)
    };
    let metrics = train_model(&mut model, cfg, &train_set, val_set.as_ref())?;
    Ok(TrainOutcome { model, metrics })
}

/// Images per second for one pass of `train_model` over `set`.
pub fn throughput(metrics: &Metrics, samples: usize) -> f64 {
    let n = (samples * metrics.epochs.len()) as f64;
    n / metrics.wall_clock_secs.max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_dataset, SyntheticSceneSpec};

    fn tiny_model(classes: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            num_classes: classes,
            ..ModelConfig::desk(Mode::Svit, classes)
        }
    }

    #[test]
    fn lr_zero_leaves_parameters_and_gives_log_c_loss() {
        let data = gen_dataset(&SyntheticSceneSpec::default(), 8, 0).unwrap();
        let mcfg = tiny_model(3);
        let mut model = Model::<f64>::new(mcfg.clone()).unwrap();
        let before = model.clone();
        let set = prepare_set(&mcfg, &data.train).unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let m = train_model(&mut model, &cfg, &set, None).unwrap();
        for (a, b) in model.params().iter().zip(before.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        assert!((m.epochs[0].train_loss - 3f64.ln()).abs() < 0.05, "{}", m.epochs[0].train_loss);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let mcfg = tiny_model(3);
        let model = Model::<f32>::new(mcfg).unwrap();
        let err = evaluate(&model, &[], 8).unwrap_err();
        assert!(matches!(err, SvitError::Contract(_)));
    }

    #[test]
    fn class_mismatch_is_a_contract_error() {
        let data = gen_dataset(&SyntheticSceneSpec::default(), 0, 6).unwrap();
        let model = Model::<f32>::new(tiny_model(2)).unwrap();
        let bad = data.test.iter().any(|s| s.label == 2);
        let r = evaluate(&model, &data.test, 8);
        assert_eq!(r.is_err(), bad);
        let r = train::<f32>(&tiny_model(2), &TrainConfig::default(), &data);
        assert!(matches!(r, Err(SvitError::Contract(_))));
    }

    #[test]
    fn evaluation_is_repeatable_and_read_only() {
        let data = gen_dataset(&SyntheticSceneSpec::default(), 0, 12).unwrap();
        let model = Model::<f32>::new(tiny_model(3)).unwrap();
        let before = crate::model::write_checkpoint(&model);
        let a = evaluate(&model, &data.test, 5).unwrap();
        let b = evaluate(&model, &data.test, 12).unwrap();
        assert_eq!(a.correct, b.correct);
        assert!((a.loss - b.loss).abs() < 1e-6);
        assert_eq!(crate::model::write_checkpoint(&model), before);
    }

    #[test]
    fn config_keys() {
        let mut kv = KvConfig::parse("lr = 0.001\nepochs = 3\ncrop_scale = 0.5,1\naugment = true\nmode = vit\nembed_dim = 32\nheads = 4").unwrap();
        let t = TrainConfig::from_kv(&mut kv).unwrap();
        let m = model_config_from_kv(&mut kv, 3).unwrap();
        kv.finish().unwrap();
        assert_eq!(t.adam.lr, 0.001);
        assert_eq!(t.epochs, 3);
        assert!(t.augment);
        assert_eq!(t.segment_aug.crop_scale, (0.5, 1.0));
        assert_eq!(m.mode, Mode::Vit);
        assert_eq!(m.embed_dim, 32);
        let mut kv = KvConfig::parse("batch_size = 0").unwrap();
        assert_eq!(TrainConfig::from_kv(&mut kv).unwrap_err().exit_code(), 2);
    }
}
