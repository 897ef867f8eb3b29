//! Central finite-difference utilities for verifying analytic gradients.
//!
//! The numeric path here never touches `Tape::backward`; it only re-runs the
//! supplied forward closure, so it is an independent oracle for it. The
//! per-operation suite below is what both the unit tests and the acceptance
//! suite run, at different seed counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Scalar, Tape, TensorId};

/// Finite-difference step; chosen for single precision.
pub const FD_EPSILON: Scalar = 1e-3;

/// Central-difference gradients of `f` with respect to every element of
/// every input, at step `epsilon`.
pub fn numeric_gradients(
    mut f: impl FnMut(&[Vec<Scalar>]) -> Scalar,
    inputs: &[Vec<Scalar>],
    epsilon: Scalar,
) -> Vec<Vec<Scalar>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = vec![0.0 as Scalar; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k][i] += epsilon;
            let mut minus = inputs.to_vec();
            minus[k][i] -= epsilon;
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * epsilon);
        }
        grads.push(grad);
    }
    grads
}

/// Norm-based relative error between two gradient vectors, guarded at unit
/// scale: below gradient norm 1 it degrades into an absolute tolerance, the
/// usual guard against the finite-difference noise floor.
pub fn relative_error(a: &[Scalar], b: &[Scalar]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let na: f64 = a
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    let nb: f64 = b
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    diff / na.max(nb).max(1.0)
}

#[derive(Debug, Clone)]
pub struct OpGradCheck {
    pub op: &'static str,
    pub seed: u64,
    pub rel_err: f64,
}

fn check_op(
    name: &'static str,
    seed: u64,
    inputs: &[(Vec<Scalar>, Vec<usize>)],
    build: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> OpGradCheck {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(v, s)| tape.param(v.clone(), s))
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss)
        .expect("backward failed in gradient check");
    let analytic: Vec<Vec<Scalar>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let values: Vec<Vec<Scalar>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let numeric = numeric_gradients(
        |vals| {
            let mut t = Tape::new();
            let ids: Vec<TensorId> = vals
                .iter()
                .zip(&shapes)
                .map(|(v, s)| t.leaf(v.clone(), s))
                .collect();
            let loss = build(&mut t, &ids);
            t.value(loss)
        },
        &values,
        FD_EPSILON,
    );

    let rel_err = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max);
    OpGradCheck {
        op: name,
        seed,
        rel_err,
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<Scalar> {
    (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) as Scalar)
        .collect()
}

/// Scalarization weights with alternating signs and magnitudes bounded away
/// from zero, so the probe direction never nearly vanishes.
fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<Scalar> {
    (0..n)
        .map(|i| {
            let mag = 0.6 + 0.8 * rng.gen::<f64>();
            (if i % 2 == 0 { mag } else { -mag }) as Scalar
        })
        .collect()
}

/// Gradient-check every differentiable operation at the given seed and
/// return one record per operation.
pub fn check_all_ops(seed: u64) -> Vec<OpGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // matmul: 3x4 by 4x2, loss = weighted sum of the product.
    {
        let a = (randn(&mut rng, 12), vec![3, 4]);
        let b = (randn(&mut rng, 8), vec![4, 2]);
        let w = probe(&mut rng, 6);
        out.push(check_op("matmul", seed, &[a, b], &move |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            let wl = t.leaf(w.clone(), &[3, 2]);
            let p = t.mul(c, wl).unwrap();
            t.sum(p)
        }));
    }
    // matmul_nt: 3x4 by 5x4.
    {
        let a = (randn(&mut rng, 12), vec![3, 4]);
        let b = (randn(&mut rng, 20), vec![5, 4]);
        let w = probe(&mut rng, 15);
        out.push(check_op("matmul_nt", seed, &[a, b], &move |t, ids| {
            let c = t.matmul_nt(ids[0], ids[1]).unwrap();
            let wl = t.leaf(w.clone(), &[3, 5]);
            let p = t.mul(c, wl).unwrap();
            t.sum(p)
        }));
    }
    // Elementwise family.
    {
        let a = (randn(&mut rng, 6), vec![2, 3]);
        let b = (randn(&mut rng, 6), vec![2, 3]);
        let w = probe(&mut rng, 6);
        out.push(check_op("add", seed, &[a.clone(), b.clone()], &{
            let w = w.clone();
            move |t, ids| {
                let c = t.add(ids[0], ids[1]).unwrap();
                let wl = t.leaf(w.clone(), &[2, 3]);
                let p = t.mul(c, wl).unwrap();
                t.sum(p)
            }
        }));
        out.push(check_op("sub", seed, &[a.clone(), b.clone()], &{
            let w = w.clone();
            move |t, ids| {
                let c = t.sub(ids[0], ids[1]).unwrap();
                let wl = t.leaf(w.clone(), &[2, 3]);
                let p = t.mul(c, wl).unwrap();
                t.sum(p)
            }
        }));
        out.push(check_op("mul", seed, &[a.clone(), b], &{
            let w = w.clone();
            move |t, ids| {
                let c = t.mul(ids[0], ids[1]).unwrap();
                let wl = t.leaf(w.clone(), &[2, 3]);
                let p = t.mul(c, wl).unwrap();
                t.sum(p)
            }
        }));
        out.push(check_op("scale", seed, &[a.clone()], &move |t, ids| {
            let c = t.scale(ids[0], 1.7);
            t.sum(c)
        }));
        out.push(check_op("add_scalar", seed, &[a], &move |t, ids| {
            let c = t.add_scalar(ids[0], -0.3);
            let c = t.mul(c, c).unwrap();
            t.sum(c)
        }));
    }
    // Row-broadcast bias.
    {
        let a = (randn(&mut rng, 12), vec![4, 3]);
        let b = (randn(&mut rng, 3), vec![3]);
        let w = probe(&mut rng, 12);
        out.push(check_op("add_row_bias", seed, &[a, b], &move |t, ids| {
            let c = t.add_row_bias(ids[0], ids[1]).unwrap();
            let wl = t.leaf(w.clone(), &[4, 3]);
            let p = t.mul(c, wl).unwrap();
            t.sum(p)
        }));
    }
    // softmax on a length-5 vector (Jacobian-vector product).
    {
        let x = (randn(&mut rng, 5), vec![5]);
        let w = probe(&mut rng, 5);
        out.push(check_op("softmax", seed, &[x], &move |t, ids| {
            let y = t.softmax(ids[0], 0).unwrap();
            let wl = t.leaf(w.clone(), &[5]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
    }
    // softmax along rows of a 3x4 matrix.
    {
        let x = (randn(&mut rng, 12), vec![3, 4]);
        let w = probe(&mut rng, 12);
        out.push(check_op("softmax_rows", seed, &[x], &move |t, ids| {
            let y = t.softmax(ids[0], 1).unwrap();
            let wl = t.leaf(w.clone(), &[3, 4]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
    }
    // layer_norm on 2x4 with gain and bias.
    {
        let x = (randn(&mut rng, 8), vec![2, 4]);
        let gain = ((0..4).map(|i| 0.8 + 0.1 * i as Scalar).collect(), vec![4]);
        let bias = (randn(&mut rng, 4), vec![4]);
        let w = probe(&mut rng, 8);
        out.push(check_op(
            "layer_norm",
            seed,
            &[x, gain, bias],
            &move |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let wl = t.leaf(w.clone(), &[2, 4]);
                let p = t.mul(y, wl).unwrap();
                t.sum(p)
            },
        ));
    }
    // gelu probed at fixed points around the dip plus random ones.
    {
        let mut vals = vec![-2.0, -0.5, 0.5, 2.0];
        vals.extend(randn(&mut rng, 4));
        let n = vals.len();
        let x = (vals, vec![n]);
        let w = probe(&mut rng, n);
        out.push(check_op("gelu", seed, &[x], &move |t, ids| {
            let y = t.gelu(ids[0]);
            let wl = t.leaf(w.clone(), &[n]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
    }
    // Embedding lookup with a repeated id.
    {
        let table = (randn(&mut rng, 32), vec![8, 4]);
        let w = probe(&mut rng, 12);
        out.push(check_op("gather_rows", seed, &[table], &move |t, ids| {
            let y = t.gather_rows(ids[0], &[3, 1, 3]).unwrap();
            let wl = t.leaf(w.clone(), &[3, 4]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
    }
    // Dropout with a fixed mask (same seed every evaluation).
    {
        let x = (randn(&mut rng, 10), vec![10]);
        let w = probe(&mut rng, 10);
        let mask_seed = seed ^ 0xD0;
        out.push(check_op("dropout", seed, &[x], &move |t, ids| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let y = t.dropout(ids[0], 0.3, true, &mut mask_rng).unwrap();
            let wl = t.leaf(w.clone(), &[10]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
    }
    // Weighted cross entropy over 4 examples, 3 classes.
    {
        let logits = (randn(&mut rng, 12), vec![4, 3]);
        out.push(check_op(
            "cross_entropy_weighted",
            seed,
            &[logits],
            &|t, ids| {
                t.cross_entropy_weighted(ids[0], &[0, 2, 1, 0], &[2.0, 1.0, 1.5])
                    .unwrap()
            },
        ));
    }
    // MSE over 4 predictions.
    {
        let pred = (randn(&mut rng, 4), vec![4]);
        let targets: Vec<Scalar> = randn(&mut rng, 4);
        out.push(check_op("mse_loss", seed, &[pred], &move |t, ids| {
            t.mse_loss(ids[0], &targets).unwrap()
        }));
    }
    // Structural ops: slices and concats.
    {
        let x = (randn(&mut rng, 20), vec![4, 5]);
        let w = probe(&mut rng, 10);
        out.push(check_op("slice_rows", seed, &[x.clone()], &{
            let w = w.clone();
            move |t, ids| {
                let y = t.slice_rows(ids[0], 1, 2).unwrap();
                let wl = t.leaf(w.clone(), &[2, 5]);
                let p = t.mul(y, wl).unwrap();
                t.sum(p)
            }
        }));
        let w2 = probe(&mut rng, 8);
        out.push(check_op("slice_cols", seed, &[x], &move |t, ids| {
            let y = t.slice_cols(ids[0], 2, 2).unwrap();
            let wl = t.leaf(w2.clone(), &[4, 2]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
        let a = (randn(&mut rng, 6), vec![2, 3]);
        let b = (randn(&mut rng, 9), vec![3, 3]);
        let w3 = probe(&mut rng, 15);
        out.push(check_op("concat_rows", seed, &[a, b], &move |t, ids| {
            let y = t.concat_rows(&[ids[0], ids[1]]).unwrap();
            let wl = t.leaf(w3.clone(), &[5, 3]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
        let a = (randn(&mut rng, 6), vec![3, 2]);
        let b = (randn(&mut rng, 9), vec![3, 3]);
        let w4 = probe(&mut rng, 15);
        out.push(check_op("concat_cols", seed, &[a, b], &move |t, ids| {
            let y = t.concat_cols(&[ids[0], ids[1]]).unwrap();
            let wl = t.leaf(w4.clone(), &[3, 5]);
            let p = t.mul(y, wl).unwrap();
            t.sum(p)
        }));
    }
    // Two-layer composition ending in a loss: five parameter tensors
    // (embedding table, two weight matrices, two biases).
    {
        let table = (randn(&mut rng, 15), vec![5, 3]);
        let w1 = (randn(&mut rng, 12), vec![3, 4]);
        let b1 = (randn(&mut rng, 4), vec![4]);
        let w2 = (randn(&mut rng, 12), vec![4, 3]);
        let b2 = (randn(&mut rng, 3), vec![3]);
        out.push(check_op(
            "two_layer_composition",
            seed,
            &[table, w1, b1, w2, b2],
            &|t, ids| {
                let x = t.gather_rows(ids[0], &[1, 3]).unwrap();
                let h = t.matmul(x, ids[1]).unwrap();
                let h = t.add_row_bias(h, ids[2]).unwrap();
                let h = t.gelu(h);
                let logits = t.matmul(h, ids[3]).unwrap();
                let logits = t.add_row_bias(logits, ids[4]).unwrap();
                // Temper the logits so the soft-max never saturates and the
                // cross-entropy gradient stays well away from the noise floor.
                let logits = t.scale(logits, 0.5);
                t.cross_entropy_weighted(logits, &[0, 2], &[1.0, 1.0, 1.0])
                    .unwrap()
            },
        ));
    }

    out
}

/// Run the whole per-operation suite across seeds.
pub fn gradient_suite(seeds: &[u64]) -> Vec<OpGradCheck> {
    seeds.iter().flat_map(|&s| check_all_ops(s)).collect()
}
