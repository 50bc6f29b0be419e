//! Finite-difference gradient checks. Each op gets a plain f64
//! reimplementation; the loss `sum(op(x) * g)` is differentiated
//! numerically in f64 and compared with the tape's reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resinv_core::tensor::{Tape, Tensor, Var};
use resinv_core::Result;

pub const INSTANCES: usize = 10;
const H: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    shapes: Vec<(usize, usize)>,
    build: Build,
    reference: Reference,
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=6)
}

fn elementwise(rng: &mut ChaCha8Rng, arity: usize, f: fn(&[f64]) -> f64, build: Build) -> Case {
    let s = (dims(rng), dims(rng));
    Case {
        shapes: vec![s; arity],
        build,
        reference: Box::new(move |xs| {
            (0..xs[0].len())
                .map(|i| f(&xs.iter().map(|x| x[i]).collect::<Vec<_>>()))
                .collect()
        }),
    }
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (dims(rng), dims(rng), dims(rng));
            Case {
                shapes: vec![(m, k), (k, n)],
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
                reference: Box::new(move |xs| {
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            for p in 0..k {
                                out[i * n + j] += xs[0][i * k + p] * xs[1][p * n + j];
                            }
                        }
                    }
                    out
                }),
            }
        }
        "add" => elementwise(rng, 2, |x| x[0] + x[1], Box::new(|t, v| t.add(v[0], v[1]))),
        "sub" => elementwise(rng, 2, |x| x[0] - x[1], Box::new(|t, v| t.sub(v[0], v[1]))),
        "mul" => elementwise(rng, 2, |x| x[0] * x[1], Box::new(|t, v| t.mul(v[0], v[1]))),
        "scale" => {
            let s: f32 = rng.random_range(-2.0..2.0);
            let mut c = elementwise(rng, 1, |x| x[0], Box::new(move |t, v| t.scale(v[0], s)));
            c.reference = Box::new(move |xs| xs[0].iter().map(|x| x * s as f64).collect());
            c
        }
        "silu" => elementwise(rng, 1, |x| x[0] / (1.0 + (-x[0]).exp()), Box::new(|t, v| t.silu(v[0]))),
        "square" => elementwise(rng, 1, |x| x[0] * x[0], Box::new(|t, v| t.square(v[0]))),
        "add_row" => {
            let (m, n) = (dims(rng), dims(rng));
            Case {
                shapes: vec![(m, n), (1, n)],
                build: Box::new(|t, v| t.add_row(v[0], v[1])),
                reference: Box::new(move |xs| (0..m * n).map(|i| xs[0][i] + xs[1][i % n]).collect()),
            }
        }
        "concat_cols" => {
            let m = dims(rng);
            let widths = [dims(rng), dims(rng), dims(rng)];
            Case {
                shapes: widths.iter().map(|&w| (m, w)).collect(),
                build: Box::new(|t, v| t.concat_cols(v)),
                reference: Box::new(move |xs| {
                    let mut out = Vec::new();
                    for i in 0..m {
                        for (x, &w) in xs.iter().zip(&widths) {
                            out.extend_from_slice(&x[i * w..(i + 1) * w]);
                        }
                    }
                    out
                }),
            }
        }
        "gather_rows" => {
            let (r, c) = (dims(rng), dims(rng));
            let idx: Vec<usize> = (0..dims(rng) + 2).map(|_| rng.random_range(0..r)).collect();
            let idx2 = idx.clone();
            Case {
                shapes: vec![(r, c)],
                build: Box::new(move |t, v| t.gather_rows(v[0], &idx)),
                reference: Box::new(move |xs| idx2.iter().flat_map(|&i| xs[0][i * c..(i + 1) * c].to_vec()).collect()),
            }
        }
        "broadcast_rows" => {
            let (rows, n) = (dims(rng), dims(rng));
            Case {
                shapes: vec![(1, n)],
                build: Box::new(move |t, v| t.broadcast_rows(v[0], rows)),
                reference: Box::new(move |xs| xs[0].repeat(rows)),
            }
        }
        "sum" => {
            let s = (dims(rng), dims(rng));
            Case {
                shapes: vec![s],
                build: Box::new(|t, v| t.sum(v[0])),
                reference: Box::new(|xs| vec![xs[0].iter().sum()]),
            }
        }
        "mean" => {
            let s = (dims(rng), dims(rng));
            Case {
                shapes: vec![s],
                build: Box::new(|t, v| t.mean(v[0])),
                reference: Box::new(|xs| vec![xs[0].iter().sum::<f64>() / xs[0].len() as f64]),
            }
        }
        "mse" => {
            let s = (dims(rng), dims(rng));
            Case {
                shapes: vec![s, s],
                build: Box::new(|t, v| t.mse(v[0], v[1])),
                reference: Box::new(|xs| {
                    let n = xs[0].len() as f64;
                    vec![xs[0].iter().zip(&xs[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n]
                }),
            }
        }
        other => panic!("no finite-difference case for {other}"),
    }
}

pub const OPS: [&str; 14] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "square",
    "add_row",
    "concat_cols",
    "gather_rows",
    "broadcast_rows",
    "sum",
    "mean",
    "mse",
];

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of one random instance of `op`.
fn check_once(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    let c = case(op, rng);
    check_case(c, rng)
}

fn check_case(c: Case, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<Vec<f32>> = c
        .shapes
        .iter()
        .map(|&(r, k)| (0..r * k).map(|_| rng.random_range(-1.5f32..1.5)).collect())
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = c
        .shapes
        .iter()
        .zip(&inputs)
        .map(|(&(r, k), x)| tape.leaf(Tensor::new(vec![r, k], x.clone()).unwrap()))
        .collect();
    let out = (c.build)(&mut tape, &vars).unwrap();
    let out_shape = tape.value(out).shape().to_vec();
    let weights: Vec<f32> = (0..tape.value(out).numel())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let g = tape.leaf(Tensor::new(out_shape, weights.clone()).unwrap());
    let weighted = tape.mul(out, g).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss, &vars).unwrap();

    let loss64 = |xs: &[Vec<f64>]| -> f64 { (c.reference)(xs).iter().zip(&weights).map(|(o, &w)| o * w as f64).sum() };
    let mut point: Vec<Vec<f64>> = inputs.iter().map(|x| x.iter().map(|&v| v as f64).collect()).collect();
    let (mut diff, mut scale) = (Vec::new(), Vec::new());
    for k in 0..point.len() {
        for i in 0..point[k].len() {
            let x = point[k][i];
            point[k][i] = x + H;
            let up = loss64(&point);
            point[k][i] = x - H;
            let down = loss64(&point);
            point[k][i] = x;
            let numeric = (up - down) / (2.0 * H);
            diff.push(grads[k].data()[i] as f64 - numeric);
            scale.push(numeric);
        }
    }
    norm(diff.into_iter()) / norm(scale.into_iter()).max(1e-8)
}

/// Worst relative error over [`INSTANCES`] random instances per op.
pub fn check_all(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let worst = (0..INSTANCES).map(|_| check_once(op, &mut rng)).fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}

/// The error the harness reports when silu's tape gradient is compared with
/// a reference for a different function; used to show the check has teeth.
pub fn mismatched_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = case("silu", &mut rng);
    c.reference = Box::new(|xs| xs[0].iter().map(|x| x * x).collect());
    check_case(c, &mut rng)
}
