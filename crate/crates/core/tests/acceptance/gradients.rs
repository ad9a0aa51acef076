//! Criterion 1: every differentiable op agrees with central finite
//! differences (h = 1e-4, 64-bit) to relative error < 1e-3 on 20 random
//! instances.

use duomodal::autograd::{AttentionLayout, AttentionSegment, Graph, Var};
use duomodal::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::Outcome;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: usize = 20;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar objective `sum(op(inputs) ⊙ probe)` evaluated without gradients.
fn objective(build: &Build, inputs: &[Tensor<f64>], probe: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out)
        .data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Largest relative error between autodiff and central differences.
fn max_relative_error(build: &Build, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let shape = g.value(out).shape().to_vec();
    let probe = uniform(rng, &shape);
    let p = g.constant(probe.clone());
    let weighted = g.mul(out, p).expect("probe product");
    let loss = g.sum(weighted);
    g.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let ad = g.grad(*var).expect("leaf gradient").data().to_vec();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (objective(build, &plus, &probe) - objective(build, &minus, &probe)) / (2.0 * H);
            let rel = (ad[j] - fd).abs() / (fd.abs() + 1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

struct Case {
    name: &'static str,
    shapes: fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    build: Box<Build>,
    /// Optional rejection filter for inputs near a non-differentiable point.
    accept: fn(&[Tensor<f64>]) -> bool,
}

fn always(_: &[Tensor<f64>]) -> bool {
    true
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            shapes: |r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                vec![vec![m, k], vec![k, n]]
            },
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "matmul_nt",
            shapes: |r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                vec![vec![m, k], vec![n, k]]
            },
            build: Box::new(|g, v| g.matmul_nt(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "linear",
            shapes: |r| {
                let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 4), dims(r, 1, 4));
                vec![vec![m, k], vec![k, n], vec![n]]
            },
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
            accept: always,
        },
        Case {
            name: "add",
            shapes: |r| {
                let s = vec![dims(r, 1, 3), dims(r, 1, 3)];
                vec![s.clone(), s]
            },
            build: Box::new(|g, v| g.add(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "sub",
            shapes: |r| {
                let s = vec![dims(r, 1, 3), dims(r, 1, 3)];
                vec![s.clone(), s]
            },
            build: Box::new(|g, v| g.sub(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "mul",
            shapes: |r| {
                let s = vec![dims(r, 1, 3), dims(r, 1, 3)];
                vec![s.clone(), s]
            },
            build: Box::new(|g, v| g.mul(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "add_row",
            shapes: |r| {
                let (m, n) = (dims(r, 1, 4), dims(r, 1, 4));
                vec![vec![m, n], vec![n]]
            },
            build: Box::new(|g, v| g.add_row(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "scale",
            shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 1, 3)]],
            build: Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
            accept: always,
        },
        Case {
            name: "sum",
            shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 1, 3)]],
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
            accept: always,
        },
        Case {
            name: "mean",
            shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 1, 3)]],
            build: Box::new(|g, v| Ok(g.mean(v[0]))),
            accept: always,
        },
        Case {
            name: "gelu",
            shapes: |r| vec![vec![dims(r, 1, 4), dims(r, 1, 4)]],
            build: Box::new(|g, v| Ok(g.gelu(v[0]))),
            accept: always,
        },
        Case {
            name: "layer_norm",
            shapes: |r| {
                let (m, d) = (dims(r, 1, 4), dims(r, 2, 6));
                vec![vec![m, d], vec![d], vec![d]]
            },
            build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            accept: always,
        },
        Case {
            name: "softmax",
            shapes: |r| vec![vec![dims(r, 1, 3), dims(r, 1, 3), dims(r, 2, 4)]],
            build: Box::new(|g, v| g.softmax(v[0], 2)),
            accept: always,
        },
        Case {
            name: "softmax_inner_axis",
            shapes: |r| vec![vec![dims(r, 1, 3), dims(r, 2, 4), dims(r, 1, 3)]],
            build: Box::new(|g, v| g.softmax(v[0], 1)),
            accept: always,
        },
        Case {
            name: "self_attention",
            shapes: |r| {
                let n = dims(r, 2, 5);
                vec![vec![n, 4], vec![n, 4], vec![n, 4]]
            },
            build: Box::new(|g, v| {
                let n = g.value(v[0]).rows();
                let layout = AttentionLayout {
                    heads: 2,
                    segments: vec![AttentionSegment {
                        query_start: 0,
                        query_len: n,
                        key_start: 0,
                        key_len: n,
                    }],
                    key_padding: None,
                };
                g.attention(v[0], v[1], v[2], None, &layout)
            }),
            accept: always,
        },
        Case {
            name: "packed_cross_attention_with_padding",
            shapes: |_| vec![vec![5, 4], vec![6, 4], vec![6, 4], vec![4]],
            build: Box::new(|g, v| {
                let layout = AttentionLayout {
                    heads: 2,
                    segments: vec![
                        AttentionSegment {
                            query_start: 0,
                            query_len: 2,
                            key_start: 0,
                            key_len: 4,
                        },
                        AttentionSegment {
                            query_start: 2,
                            query_len: 2,
                            key_start: 4,
                            key_len: 2,
                        },
                        AttentionSegment {
                            query_start: 4,
                            query_len: 1,
                            key_start: 4,
                            key_len: 1,
                        },
                    ],
                    key_padding: Some(vec![false, true, false, false, true, true]),
                };
                g.attention(v[0], v[1], v[2], Some(v[3]), &layout)
            }),
            accept: always,
        },
        Case {
            name: "cross_entropy",
            shapes: |r| vec![vec![3, dims(r, 2, 6)]],
            build: Box::new(|g, v| {
                let vocab = g.value(v[0]).cols();
                let targets = [0, vocab - 1, vocab / 2];
                g.cross_entropy(v[0], &targets, Some(&[true, false, true]))
            }),
            accept: always,
        },
        Case {
            name: "l1_loss",
            shapes: |r| {
                let s = vec![3, dims(r, 1, 4)];
                vec![s.clone(), s]
            },
            build: Box::new(|g, v| g.l1_loss(v[0], v[1], Some(&[true, true, false]))),
            accept: |inp| {
                inp[0]
                    .data()
                    .iter()
                    .zip(inp[1].data())
                    .all(|(a, b)| (a - b).abs() > 1e-2)
            },
        },
        Case {
            name: "gather_rows",
            shapes: |r| vec![vec![4, dims(r, 1, 3)]],
            build: Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 3, 1])),
            accept: always,
        },
        Case {
            name: "mix_rows",
            shapes: |_| vec![vec![4, 3]],
            build: Box::new(|g, v| g.mix_rows(v[0], &[(1, &[0.5, -0.5, 0.25][..])])),
            accept: always,
        },
        Case {
            name: "cols",
            shapes: |r| vec![vec![dims(r, 1, 4), 5]],
            build: Box::new(|g, v| g.cols(v[0], 1, 3)),
            accept: always,
        },
        Case {
            name: "concat_cols",
            shapes: |r| {
                let m = dims(r, 1, 4);
                vec![vec![m, dims(r, 1, 3)], vec![m, dims(r, 1, 3)]]
            },
            build: Box::new(|g, v| g.concat_cols(v[0], v[1])),
            accept: always,
        },
        Case {
            name: "segment_mean",
            shapes: |r| vec![vec![5, dims(r, 1, 4)]],
            build: Box::new(|g, v| {
                g.segment_mean(v[0], &[(0, 3), (3, 2)], Some(&[true, false, true, true, true]))
            }),
            accept: always,
        },
    ]
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut worst_overall = 0.0f64;
    let mut failures = Vec::new();
    let cases = cases();
    for case in &cases {
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < INSTANCES {
            let shapes = (case.shapes)(&mut rng);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
            if !(case.accept)(&inputs) {
                continue;
            }
            worst = worst.max(max_relative_error(case.build.as_ref(), &inputs, &mut rng));
            done += 1;
        }
        if !(worst < TOL) {
            failures.push(format!("{} (rel err {worst:.2e})", case.name));
        }
        worst_overall = worst_overall.max(worst);
    }
    let detail = format!(
        "{} ops x {INSTANCES} instances, worst relative error {worst_overall:.2e} (limit {TOL:.0e})",
        cases.len()
    );
    if failures.is_empty() {
        Outcome::pass(detail)
    } else {
        Outcome::fail(format!("{detail}; failing: {}", failures.join(", ")))
    }
}
