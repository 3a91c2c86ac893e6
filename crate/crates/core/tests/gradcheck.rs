mod common;

use common::{model_grad_error, op_cases, op_grad_error, small_config, token_batch};
use svit::model::Model;

#[test]
fn every_op_double_precision() {
    for (i, (c, r)) in op_cases::<f64>().iter().zip(op_cases::<f64>().iter()).enumerate() {
        let e = op_grad_error(c, r, 100 + i as u64);
        assert!(e < 1e-5, "{}: rel err {e:e}", c.name);
    }
}

#[test]
fn every_op_single_precision() {
    for (i, (c, r)) in op_cases::<f32>().iter().zip(op_cases::<f64>().iter()).enumerate() {
        let e = op_grad_error(c, r, 200 + i as u64);
        assert!(e < 1e-3, "{}: rel err {e:e}", c.name);
    }
}

#[test]
fn two_layer_mlp() {
    use svit::tensor::Tape;
    let cases = |t: &mut Tape<f64>, x: &[svit::tensor::Var]| {
        let h = t.matmul(x[0], x[1])?;
        let h = t.add_row(h, x[2])?;
        let h = t.gelu(h);
        let o = t.matmul(h, x[3])?;
        t.cross_entropy(o, &[1, 0, 2, 1])
    };
    let c = common::OpCase {
        name: "mlp",
        shapes: vec![vec![4, 5], vec![5, 6], vec![6], vec![6, 3]],
        f: Box::new(cases),
    };
    let r = common::OpCase {
        name: "mlp",
        shapes: c.shapes.clone(),
        f: Box::new(cases),
    };
    let e = op_grad_error(&c, &r, 7);
    assert!(e < 1e-5, "rel err {e:e}");
}

#[test]
fn depth_two_model_double_precision() {
    let model = Model::<f64>::new(small_config(3)).unwrap();
    let batch = token_batch::<f64>(11, 3, 8);
    let (e, name) = model_grad_error(&model, &batch, 3);
    assert!(e < 1e-5, "{name}: rel err {e:e}");
}

#[test]
fn depth_two_model_single_precision() {
    let model = Model::<f32>::new(small_config(4)).unwrap();
    let batch = token_batch::<f32>(12, 3, 8);
    let (e, name) = model_grad_error(&model, &batch, 3);
    assert!(e < 1e-3, "{name}: rel err {e:e}");
}
