//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it stays independent of
//! the analytic backward rules it verifies.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Axis, Segments, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::CsrMatrix;

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every element of every input.
pub fn numeric_gradient(f: &mut dyn FnMut(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work);
            work[i].data_mut()[j] = orig - h;
            let down = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Norm-wise relative error below `tol`, and every element within
/// `tol · max(|a|, |n|) + 1e-8`.
pub fn gradients_match(analytic: &Tensor, numeric: &Tensor, tol: f64) -> bool {
    analytic.shape() == numeric.shape()
        && relative_error(analytic, numeric) < tol
        && analytic
            .data()
            .iter()
            .zip(numeric.data())
            .all(|(a, n)| (a - n).abs() <= tol * a.abs().max(n.abs()) + 1e-8)
}

#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Uniform in `[-1, 1]`.
    Signed,
    /// Uniform in `[-1, 1]` with `|x| ≥ 0.1`, away from kinks at zero.
    AwayFromZero,
    /// Uniform in `[0.05, 0.95]`.
    Probability,
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<((usize, usize), Domain)>,
    pub build: fn(&mut Tape, &[Var]) -> Result<Var>,
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub ok: bool,
    pub max_rel_error: f64,
}

fn sample(rng: &mut ChaCha8Rng, (r, c): (usize, usize), domain: Domain) -> Tensor {
    let data = (0..r * c)
        .map(|_| match domain {
            Domain::Signed => rng.random_range(-1.0..1.0),
            Domain::AwayFromZero => {
                let m: f64 = rng.random_range(0.1..1.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
            Domain::Probability => rng.random_range(0.05..0.95),
        })
        .collect();
    Tensor::from_vec(r, c, data).expect("shape")
}

/// Evaluates one primitive on random inputs drawn from `seed` and compares
/// its analytic gradients with central differences (h = 1e-5, tol = 1e-4).
pub fn run_case(case: &PrimitiveCase, seed: u64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case.inputs.iter().map(|&(s, d)| sample(&mut rng, s, d)).collect();
    let reduce_seed = rng.random::<u64>();
    let eval = |t: &mut Tape, vars: &[Var]| -> Var {
        let out = (case.build)(t, vars).expect("primitive forward");
        if t.shape(out) == (1, 1) {
            out
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(reduce_seed);
            let w: Vec<f64> = (0..t.value(out).len()).map(|_| r.random_range(-1.0..1.0)).collect();
            t.weighted_sum(out, Rc::new(w)).expect("reduce")
        }
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, x)| tape.param(i, x)).collect();
    let loss = eval(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let numeric = numeric_gradient(
        &mut |xs: &[Tensor]| {
            let mut t = Tape::new();
            let v: Vec<Var> = xs.iter().enumerate().map(|(i, x)| t.param(i, x)).collect();
            let l = eval(&mut t, &v);
            t.value(l).item()
        },
        &inputs,
        1e-5,
    );
    let mut ok = true;
    let mut worst = 0.0_f64;
    for (i, n) in numeric.iter().enumerate() {
        let zero = Tensor::zeros(n.rows(), n.cols());
        let a = grads.get(i).unwrap_or(&zero);
        worst = worst.max(relative_error(a, n));
        ok &= gradients_match(a, n, 1e-4);
    }
    CaseReport { ok, max_rel_error: worst }
}

fn toy_sparse() -> Rc<CsrMatrix> {
    Rc::new(CsrMatrix::from_rows(
        4,
        vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![], vec![(0, 0.25), (1, 0.25), (3, 0.5)]],
    ))
}

fn toy_segments() -> Rc<Segments> {
    Rc::new(Segments::from_groups(vec![vec![0, 2, 3], vec![1], vec![], vec![3, 0]]))
}

/// One case per differentiable primitive.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    use Domain::*;
    vec![
        PrimitiveCase { name: "matmul", inputs: vec![((3, 4), Signed), ((4, 2), Signed)], build: |t, v| t.matmul(v[0], v[1]) },
        PrimitiveCase { name: "add", inputs: vec![((3, 4), Signed), ((3, 4), Signed)], build: |t, v| t.add(v[0], v[1]) },
        PrimitiveCase { name: "add_broadcast", inputs: vec![((3, 4), Signed), ((1, 4), Signed)], build: |t, v| t.add(v[0], v[1]) },
        PrimitiveCase { name: "scale", inputs: vec![((2, 3), Signed)], build: |t, v| t.scale(v[0], -1.7) },
        PrimitiveCase { name: "affine", inputs: vec![((2, 3), Signed)], build: |t, v| t.affine(v[0], 0.5, 0.5) },
        PrimitiveCase { name: "tanh", inputs: vec![((3, 3), Signed)], build: |t, v| t.tanh(v[0]) },
        PrimitiveCase { name: "leaky_relu", inputs: vec![((3, 3), AwayFromZero)], build: |t, v| t.leaky_relu(v[0], 0.2) },
        PrimitiveCase { name: "elu", inputs: vec![((3, 3), AwayFromZero)], build: |t, v| t.elu(v[0]) },
        PrimitiveCase { name: "softmax_cols", inputs: vec![((3, 4), Signed)], build: |t, v| t.softmax(v[0], Axis::Cols) },
        PrimitiveCase { name: "softmax_rows", inputs: vec![((3, 4), Signed)], build: |t, v| t.softmax(v[0], Axis::Rows) },
        PrimitiveCase {
            name: "concat_rows",
            inputs: vec![((2, 3), Signed), ((1, 3), Signed)],
            build: |t, v| t.concat(&[v[0], v[1]], Axis::Rows),
        },
        PrimitiveCase {
            name: "concat_cols",
            inputs: vec![((2, 3), Signed), ((2, 1), Signed)],
            build: |t, v| t.concat(&[v[0], v[1]], Axis::Cols),
        },
        PrimitiveCase { name: "mean_rows", inputs: vec![((3, 4), Signed)], build: |t, v| t.mean(v[0], Axis::Rows) },
        PrimitiveCase { name: "mean_cols", inputs: vec![((3, 4), Signed)], build: |t, v| t.mean(v[0], Axis::Cols) },
        PrimitiveCase { name: "l2_norm", inputs: vec![((3, 4), AwayFromZero)], build: |t, v| t.l2_norm(v[0]) },
        PrimitiveCase {
            name: "cosine",
            inputs: vec![((3, 4), AwayFromZero), ((3, 4), AwayFromZero)],
            build: |t, v| t.cosine(v[0], v[1]),
        },
        PrimitiveCase { name: "dropout", inputs: vec![((4, 4), Signed)], build: |t, v| t.dropout(v[0], 0.3, 42) },
        PrimitiveCase {
            name: "bce",
            inputs: vec![((4, 1), Probability)],
            build: |t, v| t.bce(v[0], &[1.0, 0.0, 1.0, 0.0]),
        },
        PrimitiveCase {
            name: "gather_rows",
            inputs: vec![((3, 2), Signed)],
            build: |t, v| t.gather_rows(v[0], Rc::new(vec![2, 0, 2, 1])),
        },
        PrimitiveCase { name: "spmm", inputs: vec![((4, 3), Signed)], build: |t, v| t.spmm(toy_sparse(), v[0]) },
        PrimitiveCase {
            name: "scale_rows",
            inputs: vec![((3, 2), Signed)],
            build: |t, v| t.scale_rows(v[0], Rc::new(vec![0.3, -1.0, 2.0])),
        },
        PrimitiveCase {
            name: "weighted_sum",
            inputs: vec![((2, 2), Signed)],
            build: |t, v| t.weighted_sum(v[0], Rc::new(vec![1.0, -2.0, 0.5, 3.0])),
        },
        PrimitiveCase {
            name: "segment_softmax",
            inputs: vec![((6, 1), Signed)],
            build: |t, v| t.segment_softmax(v[0], Rc::new(Segments::from_groups(vec![vec![0, 0, 0], vec![], vec![0, 0], vec![0]]))),
        },
        PrimitiveCase {
            name: "segment_weighted_sum",
            inputs: vec![((6, 1), Signed), ((4, 3), Signed)],
            build: |t, v| t.segment_weighted_sum(v[0], v[1], toy_segments()),
        },
    ]
}
