#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svit::harness::{gen_dataset, SyntheticSceneSpec};
use svit::model::{Mode, Model, ModelConfig};
use svit::tensor::{HeadLayout, Tape, Var};
use svit::tokenizer::{tokenize, TokenizedImage};
use svit::{Result, Scalar};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub type OpFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

pub struct OpCase<T> {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn<T>,
}

fn case<T>(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static) -> OpCase<T> {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// One case per differentiable op (and per axis where relevant).
pub fn op_cases<T: Scalar>() -> Vec<OpCase<T>> {
    let layout = HeadLayout {
        batch: 2,
        seq: 3,
        heads: 2,
        dim: 2,
        parts: 3,
    };
    let merge = HeadLayout { parts: 1, ..layout };
    let mut v = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, x| t.matmul(x[0], x[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, x| t.bmm(x[0], x[1], false)),
        case("bmm_trans_b", &[&[2, 3, 4], &[2, 5, 4]], |t, x| t.bmm(x[0], x[1], true)),
        case("add", &[&[2, 3], &[2, 3]], |t, x| t.add(x[0], x[1])),
        case("mul", &[&[2, 3], &[2, 3]], |t, x| t.mul(x[0], x[1])),
        case("add_row", &[&[4, 3], &[3]], |t, x| t.add_row(x[0], x[1])),
        case("mul_row", &[&[4, 3], &[3]], |t, x| t.mul_row(x[0], x[1])),
        case("scale", &[&[5]], |t, x| Ok(t.scale(x[0], T::lit(-1.5)))),
        case("relu", &[&[8]], |t, x| Ok(t.relu(x[0]))),
        case("gelu", &[&[8]], |t, x| Ok(t.gelu(x[0]))),
        case("sum", &[&[3, 4]], |t, x| Ok(t.sum(x[0]))),
        case("cross_entropy", &[&[3, 4]], |t, x| t.cross_entropy(x[0], &[0, 3, 1])),
        case("reshape", &[&[2, 6]], |t, x| t.reshape(x[0], &[3, 4])),
        case("gather_rows", &[&[3, 2]], |t, x| t.gather_rows(x[0], &[Some(2), None, Some(0), Some(2)])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, x| t.concat_rows(x[0], x[1])),
        case("pick", &[&[2, 3]], |t, x| t.pick(x[0], 4)),
        case("split_heads_q", &[&[6, 12]], move |t, x| t.split_heads(x[0], layout, 0)),
        case("split_heads_k", &[&[6, 12]], move |t, x| t.split_heads(x[0], layout, 1)),
        case("split_heads_v", &[&[6, 12]], move |t, x| t.split_heads(x[0], layout, 2)),
        case("merge_heads", &[&[4, 3, 2]], move |t, x| t.merge_heads(x[0], merge)),
    ];
    for axis in 0..3 {
        v.push(case("mean", &[&[2, 3, 4]], move |t, x| t.mean(x[0], axis)));
        v.push(case("softmax", &[&[2, 3, 4]], move |t, x| t.softmax(x[0], axis)));
        v.push(case("layer_norm", &[&[2, 3, 4]], move |t, x| t.layer_norm(x[0], axis, T::lit(1e-5))));
    }
    v
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect()
}

/// `sum(w ⊙ f(inputs))` evaluated in `T`.
fn weighted_loss<T: Scalar>(tape: &mut Tape<T>, f: &OpFn<T>, shapes: &[Vec<usize>], inputs: &[Vec<f64>], grad: bool) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = shapes
        .iter()
        .zip(inputs)
        .map(|(s, v)| {
            let data = v.iter().map(|&x| T::lit(x)).collect();
            if grad {
                tape.variable(s, data).unwrap()
            } else {
                tape.constant(s, data).unwrap()
            }
        })
        .collect();
    let y = f(tape, &vars).unwrap();
    let shape = tape.shape(y).to_vec();
    let w = weights(tape.value(y).len()).into_iter().map(T::lit).collect();
    let wv = tape.constant(&shape, w).unwrap();
    let p = tape.mul(y, wv).unwrap();
    (vars, tape.sum(p))
}

/// Worst per-input relative error between the analytic gradient in `T` and
/// central differences of the same op evaluated in f64.
pub fn op_grad_error<T: Scalar>(analytic: &OpCase<T>, reference: &OpCase<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // inputs representable in T so both precisions see the same point
    let inputs: Vec<Vec<f64>> = analytic
        .shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| T::lit(rng.random_range(-1.0..1.0)).as_f64())
                .collect()
        })
        .collect();
    let mut tape = Tape::<T>::new();
    let (vars, loss) = weighted_loss(&mut tape, &analytic.f, &analytic.shapes, &inputs, true);
    tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let a: Vec<f64> = match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut fd = Vec::with_capacity(a.len());
        for i in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut x = inputs.clone();
                x[k][i] += delta;
                let mut t = Tape::<f64>::new();
                let (_, l) = weighted_loss(&mut t, &reference.f, &reference.shapes, &x, false);
                t.value(l)[0]
            };
            fd.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&a, &fd));
    }
    worst
}

/// Small sViT used by the gradient and attribution checks.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        init_seed: seed,
        ..ModelConfig::desk(Mode::Svit, 3)
    }
}

/// Synthetic images tokenized at `patch_size`, with labels.
pub fn token_batch<T: Scalar>(seed: u64, n: usize, patch_size: usize) -> Vec<(TokenizedImage<T>, usize)> {
    let spec = SyntheticSceneSpec {
        seed,
        ..Default::default()
    };
    let data = gen_dataset(&spec, n, 0).unwrap();
    data.train
        .iter()
        .map(|s| (tokenize(&s.image, &s.manifest, patch_size).unwrap(), s.label))
        .collect()
}

fn model_loss<T: Scalar>(model: &Model<T>, batch: &[(TokenizedImage<T>, usize)], params_grad: bool) -> (Tape<T>, svit::model::Bound, Var) {
    let mut tape = Tape::new();
    let bound = if params_grad {
        model.bind(&mut tape)
    } else {
        model.bind_constants(&mut tape)
    };
    let toks: Vec<&TokenizedImage<T>> = batch.iter().map(|b| &b.0).collect();
    let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
    let emb = model.embed_svit(&mut tape, &bound, &toks).unwrap();
    let logits = model.forward(&mut tape, &bound, &emb).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    (tape, bound, loss)
}

/// Worst per-tensor relative error of the end-to-end parameter gradient of
/// the cross-entropy loss, analytic in `T` against f64 central differences.
/// `stride` > 1 samples every stride-th element of each tensor.
pub fn model_grad_error<T: Scalar>(model: &Model<T>, batch: &[(TokenizedImage<T>, usize)], stride: usize) -> (f64, String) {
    let (tape, bound, loss) = model_loss(model, batch, true);
    let mut tape = tape;
    tape.backward(loss).unwrap();
    let reference: Model<f64> = model.cast();
    let ref_batch: Vec<(TokenizedImage<f64>, usize)> = batch.iter().map(|(t, l)| (t.cast(), *l)).collect();
    let h = 1e-6;
    let mut worst = (0.0, String::new());
    for (pi, p) in model.params().iter().enumerate() {
        let g = tape.grad(bound.var(pi));
        let mut a = Vec::new();
        let mut fd = Vec::new();
        for i in (0..p.tensor.len()).step_by(stride.max(1)) {
            a.push(g.map_or(0.0, |g| g[i].as_f64()));
            let eval = |delta: f64| {
                let mut m = reference.clone();
                m.params_mut()[pi].tensor.data_mut()[i] += delta;
                let (t, _, l) = model_loss(&m, &ref_batch, false);
                t.value(l)[0]
            };
            fd.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let e = rel_err(&a, &fd);
        if e >= worst.0 {
            worst = (e, p.name.clone());
        }
    }
    worst
}

/// Asymptotic Kolmogorov distribution tail `P(K > x)`.
pub fn kolmogorov_tail(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * x * x).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// One-sample KS test against U(lo, hi); returns (D, p-value).
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d))
}

/// Token scores from central differences of the class logit with respect
/// to each embedding entry. Returns (scores incl. class token at 0, pre-ReLU
/// means).
pub fn fd_attribution(model: &Model<f64>, tokens: &TokenizedImage<f64>, class: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.bind_constants(&mut tape);
    let emb = model.embed_svit(&mut tape, &bound, &[tokens]).unwrap();
    let shape = tape.shape(emb.embeddings).to_vec();
    let base = tape.value(emb.embeddings).to_vec();
    let width = model.config().embed_dim;
    let logit = |values: Vec<f64>| {
        let mut t = Tape::new();
        let b = model.bind_constants(&mut t);
        let leaf = t.constant(&shape, values).unwrap();
        let e = svit::model::EmbeddedTokens {
            embeddings: leaf,
            attention_mask: emb.attention_mask.clone(),
            batch: emb.batch,
            seq: emb.seq,
        };
        let y = model.forward(&mut t, &b, &e).unwrap();
        t.value(y)[class]
    };
    let h = 1e-5;
    let mut pre = Vec::new();
    for row in 0..base.len() / width {
        let mut s = 0.0;
        for j in 0..width {
            let i = row * width + j;
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let g = (logit(plus) - logit(minus)) / (2.0 * h);
            s += g * base[i];
        }
        pre.push(s / width as f64);
    }
    (pre.iter().map(|v| v.max(0.0)).collect(), pre)
}
