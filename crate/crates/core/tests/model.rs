mod common;

use common::{small_config, token_batch};
use image::{Rgb, RgbImage};
use svit::model::{prepare_vit_image, Mode, Model, ModelConfig};
use svit::tensor::Tape;
use svit::tokenizer::{Geometry, Patch, SegmentToken, TokenizedImage};
use svit::{Scalar, SvitError};

fn logits<T: Scalar>(model: &Model<T>, batch: &[&TokenizedImage<T>]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let emb = model.embed_svit(&mut tape, &b, batch).unwrap();
    let out = model.forward(&mut tape, &b, &emb).unwrap();
    let c = model.config().num_classes;
    assert_eq!(tape.shape(out), [batch.len(), c]);
    tape.value(out).chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_token_embeds_to_zero_with_fresh_biases() {
    let cfg = small_config(1);
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let p = cfg.patch_size;
    let img = TokenizedImage {
        image_id: "z".into(),
        patch_size: p,
        tokens: vec![SegmentToken {
            patch: Patch::filled(p, p, 0.0),
            geometry: Geometry::from_array([0.0; 5]),
            is_background: false,
        }],
    };
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let emb = model.embed_svit(&mut tape, &b, &[&img]).unwrap();
    let v = tape.value(emb.embeddings);
    let n = cfg.embed_dim;
    // row 0 is the class token, row 1 the zero token
    assert!(v[n..2 * n].iter().all(|&x| x == 0.0));
    assert!(v[..n].iter().any(|&x| x != 0.0));
}

#[test]
fn ragged_batch_pads_and_masks() {
    let cfg = small_config(2);
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let imgs = token_batch::<f32>(3, 12, cfg.patch_size);
    let mut base = imgs[0].0.clone();
    let bg = base.tokens.pop().unwrap();
    let seg = base.tokens[0].clone();
    let make = |n: usize| {
        let mut t = base.clone();
        t.tokens = vec![seg.clone(); n - 1];
        t.tokens.push(bg.clone());
        t
    };
    let (a, b) = (make(4), make(7));
    let mut tape = Tape::new();
    let bound = model.bind_constants(&mut tape);
    let emb = model.embed_svit(&mut tape, &bound, &[&a, &b]).unwrap();
    assert_eq!(emb.seq, 8);
    assert_eq!((emb.real_len(0), emb.real_len(1)), (5, 8));
    assert_eq!(tape.shape(emb.embeddings), [2, 8, cfg.embed_dim]);

    let again = model.embed_svit(&mut tape, &bound, &[&a, &b]).unwrap();
    assert_eq!(tape.value(emb.embeddings), tape.value(again.embeddings));
}

#[test]
fn padding_never_changes_logits() {
    let cfg = small_config(4);
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let imgs = token_batch::<f64>(5, 6, cfg.patch_size);
    let mut short = &imgs[0].0;
    let mut long = &imgs[1].0;
    for (t, _) in &imgs {
        if t.len() < short.len() {
            short = t;
        }
        if t.len() > long.len() {
            long = t;
        }
    }
    assert!(short.len() < long.len());
    let alone = logits(&model, &[short]);
    let padded = logits(&model, &[long, short]);
    assert!(max_diff(&alone[0], &padded[1]) < 1e-6);
}

#[test]
fn class_token_only_input_is_finite() {
    let cfg = small_config(6);
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let empty = TokenizedImage {
        image_id: "none".into(),
        patch_size: cfg.patch_size,
        tokens: Vec::new(),
    };
    let out = logits(&model, &[&empty]);
    assert_eq!(out[0].len(), cfg.num_classes);
    assert!(out[0].iter().all(|v| v.is_finite()));
}

#[test]
fn segment_order_does_not_matter() {
    let cfg = small_config(7);
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    for (t, _) in token_batch::<f32>(8, 10, cfg.patch_size) {
        let mut r = t.clone();
        r.tokens.reverse();
        let a = logits(&model, &[&t]);
        let b = logits(&model, &[&r]);
        assert!(max_diff(&a[0], &b[0]) < 1e-5);
    }
}

#[test]
fn vit_grid_at_224_and_order_sensitivity() {
    let cfg = ModelConfig::desk(Mode::Vit, 3);
    assert_eq!(cfg.vit_image_side(), 224);
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let n = cfg.embed_dim;

    let flat = prepare_vit_image::<f32>(&RgbImage::from_pixel(224, 224, Rgb([90, 140, 30])), 224);
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let emb = model.embed_vit(&mut tape, &b, &[&flat]).unwrap();
    assert_eq!(tape.shape(emb.embeddings), [1, 197, n]);
    let rows: Vec<&[f32]> = tape.value(emb.embeddings).chunks(n).skip(1).collect();
    let table = model.param("pos_table").unwrap().tensor.data();
    // before the table add every cell embeds the same patch
    let seg0: Vec<f32> = rows[0].iter().zip(&table[..n]).map(|(e, t)| e - t).collect();
    for (k, r) in rows.iter().enumerate() {
        let seg: Vec<f32> = r.iter().zip(&table[k * n..(k + 1) * n]).map(|(e, t)| e - t).collect();
        assert!(seg.iter().zip(&seg0).all(|(a, b)| (a - b).abs() < 1e-5));
    }
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            assert_ne!(rows[i], rows[j]);
        }
    }

    // swap two grid cells of a textured image
    let mut img = RgbImage::new(224, 224);
    for (x, y, p) in img.enumerate_pixels_mut() {
        *p = Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8]);
    }
    let a = prepare_vit_image::<f32>(&img, 224);
    let mut swapped = a.clone();
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                swapped.set(y, x, c, a.get(y + 32, x + 48, c));
                swapped.set(y + 32, x + 48, c, a.get(y, x, c));
            }
        }
    }
    let run = |p: &Patch<f32>| {
        let mut tape = Tape::new();
        let b = model.bind_constants(&mut tape);
        let emb = model.embed_vit(&mut tape, &b, &[p]).unwrap();
        let out = model.forward(&mut tape, &b, &emb).unwrap();
        tape.value(out).iter().map(|v| v.as_f64()).collect::<Vec<_>>()
    };
    assert!(max_diff(&run(&a), &run(&swapped)) > 0.0);
}

#[test]
fn probe_trains_exactly_the_head() {
    let cfg = small_config(9);
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    let idx = model.linear_probe_mode();
    let count: usize = idx.iter().map(|&i| model.params()[i].tensor.data().len()).sum();
    assert_eq!(count, cfg.embed_dim * cfg.num_classes + cfg.num_classes);
}

#[test]
fn non_finite_activations_name_the_layer() {
    let cfg = small_config(10);
    let mut model = Model::<f32>::new(cfg.clone()).unwrap();
    model.param_mut("blocks.1.mlp.fc1.weight").unwrap().tensor.data_mut()[0] = f32::NAN;
    let (t, _) = &token_batch::<f32>(11, 1, cfg.patch_size)[0];
    let mut tape = Tape::new();
    let b = model.bind_constants(&mut tape);
    let emb = model.embed_svit(&mut tape, &b, &[t]).unwrap();
    match model.forward(&mut tape, &b, &emb) {
        Err(SvitError::Numeric(m)) => assert!(m.contains("layer 1"), "{m}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}
