//! Finite-difference checks for every tape operation over several shapes.

use glori_core::rng::substream;
use glori_core::tensor::{grad_check_multi, Activation, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduce an arbitrary tensor to a scalar with nontrivial weights so the
/// checked op sees a dense upstream gradient.
fn to_scalar(tape: &Tape, v: Var) -> glori_core::Result<Var> {
    let n = tape.value(v).numel();
    let flat = tape.reshape(v, vec![1, n])?;
    let weights: Vec<f64> = (0..n).map(|i| 0.25 + 0.5 * ((i % 7) as f64)).collect();
    let w = tape.constant(Tensor::new(vec![1, n], weights).unwrap());
    let d = tape.row_dot(flat, w)?;
    tape.reshape(d, vec![])
}

fn check(name: &str, points: &[Tensor], f: impl Fn(&Tape, &[Var]) -> glori_core::Result<Var>) {
    let err = grad_check_multi(|t, vs| f(t, vs), points, H).unwrap();
    assert!(err < TOL, "{name}: grad error {err} >= {TOL}");
}

#[test]
fn matmul_gradients() {
    let mut rng = substream(100, "grad", 0);
    for (m, k, n) in [(2, 3, 4), (1, 5, 2), (4, 4, 4)] {
        let a = Tensor::randn(vec![m, k], &mut rng);
        let b = Tensor::randn(vec![k, n], &mut rng);
        check("matmul", &[a, b], |t, vs| {
            let c = t.matmul(vs[0], vs[1])?;
            to_scalar(t, c)
        });
    }
}

#[test]
fn matmul_nt_gradients() {
    let mut rng = substream(100, "grad", 1);
    for (m, k, n) in [(2, 3, 4), (3, 6, 1), (5, 2, 5)] {
        let a = Tensor::randn(vec![m, k], &mut rng);
        let b = Tensor::randn(vec![n, k], &mut rng);
        check("matmul_nt", &[a, b], |t, vs| {
            let c = t.matmul_nt(vs[0], vs[1])?;
            to_scalar(t, c)
        });
    }
}

#[test]
fn linear_gradients() {
    let mut rng = substream(100, "grad", 2);
    for (n, di, dj) in [(1, 3, 2), (4, 2, 5), (3, 7, 3)] {
        let x = Tensor::randn(vec![n, di], &mut rng);
        let w = Tensor::randn(vec![di, dj], &mut rng);
        let b = Tensor::randn(vec![dj], &mut rng);
        check("linear", &[x, w, b], |t, vs| {
            let y = t.linear(vs[0], vs[1], vs[2])?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn activation_gradients() {
    let mut rng = substream(100, "grad", 3);
    for kind in [Activation::Relu, Activation::Tanh, Activation::Exp] {
        for shape in [vec![6], vec![2, 5], vec![3, 2, 2]] {
            // keep relu inputs away from the kink at 0
            let x = Tensor::randn(shape, &mut rng).map(|v| {
                let v = v * 0.8;
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            });
            check("activation", &[x], |t, vs| {
                let y = t.activation(kind, vs[0])?;
                to_scalar(t, y)
            });
        }
    }
}

#[test]
fn softmax_with_temperature_gradients() {
    let mut rng = substream(100, "grad", 4);
    for (m, n) in [(1, 4), (3, 7), (5, 2)] {
        let logits = Tensor::randn(vec![m, n], &mut rng);
        let tau = Tensor::rand_uniform(vec![m], 0.4, 2.2, &mut rng);
        check("softmax_with_temperature", &[logits, tau], |t, vs| {
            let y = t.softmax_with_temperature(vs[0], vs[1])?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = substream(100, "grad", 5);
    for (n, d) in [(1, 4), (3, 8), (2, 16)] {
        let x = Tensor::randn(vec![n, d], &mut rng).map(|v| v * 2.0);
        let gamma = Tensor::rand_uniform(vec![d], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(vec![d], &mut rng);
        check("layer_norm", &[x, gamma, beta], |t, vs| {
            let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-5)?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn pool_and_upsample_gradients() {
    let mut rng = substream(100, "grad", 6);
    for (h, w, d, k) in [(4, 4, 2, 2), (6, 4, 1, 2), (8, 8, 3, 4)] {
        let x = Tensor::randn(vec![h, w, d], &mut rng);
        check("avg_pool2d", std::slice::from_ref(&x), |t, vs| {
            let y = t.avg_pool2d(vs[0], k)?;
            to_scalar(t, y)
        });
        check("upsample_nearest", &[x], |t, vs| {
            let y = t.upsample_nearest(vs[0], k)?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn concat_and_slice_gradients() {
    let mut rng = substream(100, "grad", 7);
    for (n, d1, d2) in [(2, 3, 4), (1, 2, 2), (4, 5, 1)] {
        let a = Tensor::randn(vec![n, d1], &mut rng);
        let b = Tensor::randn(vec![n, d2], &mut rng);
        check("concat", &[a, b], |t, vs| {
            let y = t.concat(&[vs[0], vs[1]], 1)?;
            to_scalar(t, y)
        });
    }
    for (n, d, s, l) in [(3, 6, 2, 3), (2, 4, 0, 4), (5, 8, 7, 1)] {
        let x = Tensor::randn(vec![n, d], &mut rng);
        check("slice_cols", &[x], |t, vs| {
            let y = t.slice_cols(vs[0], s, l)?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn channel_concat_gradients() {
    let mut rng = substream(100, "grad", 8);
    for (h, w, d1, d2) in [(2, 2, 1, 2), (3, 2, 2, 2), (2, 4, 3, 1)] {
        let a = Tensor::randn(vec![h, w, d1], &mut rng);
        let b = Tensor::randn(vec![h, w, d2], &mut rng);
        check("concat axis2", &[a, b], |t, vs| {
            let y = t.concat(&[vs[0], vs[1]], 2)?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn reduction_gradients() {
    let mut rng = substream(100, "grad", 9);
    for (n, d) in [(1, 3), (4, 2), (6, 6)] {
        let x = Tensor::randn(vec![n, d], &mut rng);
        check("mean_rows", &[x], |t, vs| {
            let y = t.mean_rows(vs[0])?;
            to_scalar(t, y)
        });
        let a = Tensor::randn(vec![n, d], &mut rng);
        let b = Tensor::randn(vec![n, d], &mut rng);
        check("row_dot", &[a, b], |t, vs| {
            let y = t.row_dot(vs[0], vs[1])?;
            let c = t.reshape(y, vec![n, 1])?;
            to_scalar(t, c)
        });
    }
}

#[test]
fn arithmetic_gradients() {
    let mut rng = substream(100, "grad", 10);
    for shape in [vec![4], vec![2, 3], vec![2, 2, 2]] {
        let a = Tensor::randn(shape.clone(), &mut rng);
        let b = Tensor::randn(shape.clone(), &mut rng);
        check("add", &[a.clone(), b], |t, vs| {
            let y = t.add(vs[0], vs[1])?;
            to_scalar(t, y)
        });
        check("scale", &[a], |t, vs| {
            let y = t.scale(vs[0], -1.75)?;
            to_scalar(t, y)
        });
    }
    for (n, d) in [(1, 4), (3, 3), (5, 2)] {
        let x = Tensor::randn(vec![n, d], &mut rng);
        let b = Tensor::randn(vec![d], &mut rng);
        check("add_bias_rows", &[x, b], |t, vs| {
            let y = t.add_bias_rows(vs[0], vs[1])?;
            to_scalar(t, y)
        });
    }
}

#[test]
fn bce_gradients() {
    let mut rng = substream(100, "grad", 11);
    for m in [1usize, 4, 9] {
        let z = Tensor::randn(vec![m], &mut rng).map(|v| v * 2.0);
        let labels: Vec<f64> = (0..m).map(|i| ((i * 7 + 3) % 2) as f64).collect();
        check("bce_with_logits", &[z], |t, vs| {
            t.bce_with_logits(vs[0], &labels)
        });
    }
}

#[test]
fn deep_composite_gradient() {
    // exercise a chain resembling the production head: linear -> relu ->
    // attention-style softmax pooling -> layer norm -> bce
    let mut rng = substream(100, "grad", 12);
    let x = Tensor::randn(vec![6, 4], &mut rng);
    let w = Tensor::randn(vec![4, 4], &mut rng);
    let b = Tensor::randn(vec![4], &mut rng);
    let q = Tensor::randn(vec![2, 4], &mut rng);
    let tau = Tensor::rand_uniform(vec![2], 0.6, 1.6, &mut rng);
    let gamma = Tensor::rand_uniform(vec![4], 0.5, 1.5, &mut rng);
    let beta = Tensor::randn(vec![4], &mut rng);
    let labels = [1.0, 0.0];

    let err = grad_check_multi(
        |t, vs| {
            let h = t.relu(t.linear(vs[0], vs[1], vs[2])?)?;
            let scores = t.matmul_nt(vs[3], h)?;
            let scaled = t.scale(scores, 0.5)?;
            let attn = t.softmax_with_temperature(scaled, vs[4])?;
            let pooled = t.matmul(attn, h)?;
            let normed = t.layer_norm(pooled, vs[5], vs[6], 1e-5)?;
            let logits = t.row_dot(normed, vs[3])?;
            t.bce_with_logits(logits, &labels)
        },
        &[x, w, b, q, tau, gamma, beta],
        H,
    )
    .unwrap();
    assert!(err < TOL, "composite grad error {err}");
}
