//! Finite-difference audit of every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovd_core::encoders::contrastive_loss;
use ovd_core::head::{query_logits, ClassHeads};
use ovd_core::nn::gradcheck::{check, check_params};
use ovd_core::nn::layers::{block, init_block, init_mlp, mlp, LN_EPS};
use ovd_core::nn::{Graph, ParamStore, Tensor, Var};

pub const POINTS: usize = 20;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

/// Random boxes in cxcywh with sides bounded away from zero.
fn rand_boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            vec![
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
            ]
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Scalar readout `Σ y ⊙ R` with a fixed random `R`, so every output
/// coordinate contributes to the checked gradient.
fn readout(g: &mut Graph, y: Var, rng_seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = g.constant(rand_t(&mut rng, r, c, 1.0));
    let p = g.mul(y, w);
    g.sum(p)
}

/// Worst relative error of one operation over [`POINTS`] random draws.
pub struct OpReport {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);

fn unary(name: &'static str, f: fn(&mut Graph, Var) -> Var, scale: f64) -> Case {
    (
        name,
        Box::new(move |rng| {
            let x = rand_t(rng, 3, 4, scale);
            check(&[x], H, |g, v| {
                let y = f(g, v[0]);
                readout(g, y, 1)
            })
            .max_rel_err
        }),
    )
}

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = vec![
        (
            "add (same shape, row, column and scalar broadcast)",
            Box::new(|rng| {
                let a = rand_t(rng, 3, 4, 1.0);
                let (b, c, d, s) = (
                    rand_t(rng, 3, 4, 1.0),
                    rand_t(rng, 1, 4, 1.0),
                    rand_t(rng, 3, 1, 1.0),
                    rand_t(rng, 1, 1, 1.0),
                );
                check(&[a, b, c, d, s], H, |g, v| {
                    let y = g.add(v[0], v[1]);
                    let y = g.add(y, v[2]);
                    let y = g.add(y, v[3]);
                    let y = g.add(y, v[4]);
                    readout(g, y, 2)
                })
                .max_rel_err
            }),
        ),
        (
            "sub",
            Box::new(|rng| {
                let (a, b, c) = (
                    rand_t(rng, 3, 4, 1.0),
                    rand_t(rng, 1, 4, 1.0),
                    rand_t(rng, 3, 1, 1.0),
                );
                check(&[a, b, c], H, |g, v| {
                    let y = g.sub(v[0], v[1]);
                    let y = g.sub(y, v[2]);
                    readout(g, y, 3)
                })
                .max_rel_err
            }),
        ),
        (
            "mul",
            Box::new(|rng| {
                let (a, b, c, s) = (
                    rand_t(rng, 3, 4, 1.0),
                    rand_t(rng, 3, 4, 1.0),
                    rand_t(rng, 1, 4, 1.0),
                    rand_t(rng, 1, 1, 1.0),
                );
                check(&[a, b, c, s], H, |g, v| {
                    let y = g.mul(v[0], v[1]);
                    let y = g.mul(y, v[2]);
                    let y = g.mul(y, v[3]);
                    readout(g, y, 4)
                })
                .max_rel_err
            }),
        ),
        (
            "scale",
            Box::new(|rng| {
                let s = rng.random_range(-3.0..3.0);
                check(&[rand_t(rng, 2, 5, 1.0)], H, |g, v| {
                    let y = g.scale(v[0], s);
                    readout(g, y, 5)
                })
                .max_rel_err
            }),
        ),
        (
            "matmul",
            Box::new(|rng| {
                let (a, b) = (rand_t(rng, 3, 5, 1.0), rand_t(rng, 5, 2, 1.0));
                check(&[a, b], H, |g, v| {
                    let y = g.matmul(v[0], v[1]);
                    readout(g, y, 6)
                })
                .max_rel_err
            }),
        ),
        (
            "matmul_nt",
            Box::new(|rng| {
                let (a, b) = (rand_t(rng, 3, 5, 1.0), rand_t(rng, 4, 5, 1.0));
                check(&[a, b], H, |g, v| {
                    let y = g.matmul_nt(v[0], v[1]);
                    readout(g, y, 7)
                })
                .max_rel_err
            }),
        ),
        (
            "transpose",
            Box::new(|rng| {
                check(&[rand_t(rng, 3, 4, 1.0)], H, |g, v| {
                    let y = g.transpose(v[0]);
                    readout(g, y, 8)
                })
                .max_rel_err
            }),
        ),
    ];
    v.push(unary("gelu", Graph::gelu, 3.0));
    v.push(unary("sigmoid", Graph::sigmoid, 4.0));
    v.push(unary("softplus", Graph::softplus, 4.0));
    v.push(unary("exp", Graph::exp, 2.0));
    v.push(unary("tanh", Graph::tanh, 2.0));
    v.push(unary("softmax_rows", Graph::softmax_rows, 3.0));
    v.extend::<Vec<Case>>(vec![
        (
            "layer_norm",
            Box::new(|rng| {
                let (x, gain, bias) = (
                    rand_t(rng, 3, 6, 2.0),
                    rand_t(rng, 1, 6, 1.5),
                    rand_t(rng, 1, 6, 1.0),
                );
                check(&[x, gain, bias], H, |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], LN_EPS);
                    readout(g, y, 9)
                })
                .max_rel_err
            }),
        ),
        (
            "normalize_rows",
            Box::new(|rng| {
                check(&[rand_t(rng, 3, 5, 1.0)], H, |g, v| {
                    let y = g.normalize_rows(v[0]).unwrap();
                    readout(g, y, 10)
                })
                .max_rel_err
            }),
        ),
        (
            "slice_cols",
            Box::new(|rng| {
                let start = rng.random_range(0..3);
                check(&[rand_t(rng, 3, 6, 1.0)], H, |g, v| {
                    let y = g.slice_cols(v[0], start, 3);
                    readout(g, y, 11)
                })
                .max_rel_err
            }),
        ),
        (
            "concat_cols and concat_rows",
            Box::new(|rng| {
                let (a, b, c) = (
                    rand_t(rng, 3, 2, 1.0),
                    rand_t(rng, 3, 4, 1.0),
                    rand_t(rng, 2, 6, 1.0),
                );
                check(&[a, b, c], H, |g, v| {
                    let y = g.concat_cols(&[v[0], v[1]]);
                    let y = g.concat_rows(&[y, v[2]]);
                    readout(g, y, 12)
                })
                .max_rel_err
            }),
        ),
        (
            "gather_rows (repeated indices)",
            Box::new(|rng| {
                let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
                check(&[rand_t(rng, 4, 3, 1.0)], H, |g, v| {
                    let y = g.gather_rows(v[0], &idx);
                    readout(g, y, 13)
                })
                .max_rel_err
            }),
        ),
        (
            "attention (2 heads, 2 segments)",
            Box::new(|rng| {
                let (q, k, val) = (
                    rand_t(rng, 4, 4, 1.0),
                    rand_t(rng, 6, 4, 1.0),
                    rand_t(rng, 6, 4, 1.0),
                );
                check(&[q, k, val], H, |g, v| {
                    let y = g.attention(v[0], v[1], v[2], 2, 2);
                    readout(g, y, 14)
                })
                .max_rel_err
            }),
        ),
        (
            "sum and mean",
            Box::new(|rng| {
                check(&[rand_t(rng, 3, 4, 1.0)], H, |g, v| {
                    let e = g.exp(v[0]);
                    let s = g.sum(e);
                    let m = g.mean(v[0]);
                    let m = g.mul(m, m);
                    g.add(s, m)
                })
                .max_rel_err
            }),
        ),
        (
            "cross_entropy_rows",
            Box::new(|rng| {
                let t: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
                check(&[rand_t(rng, 4, 5, 3.0)], H, |g, v| {
                    g.cross_entropy_rows(v[0], &t)
                })
                .max_rel_err
            }),
        ),
        (
            "focal_sum",
            Box::new(|rng| {
                let targets = Tensor::matrix(
                    3,
                    4,
                    (0..12)
                        .map(|_| f64::from(rng.random_range(0..2u8)))
                        .collect(),
                );
                let (alpha, gamma) = (rng.random_range(0.1..0.9), rng.random_range(0.0..3.0));
                check(&[rand_t(rng, 3, 4, 4.0)], H, |g, v| {
                    g.focal_sum(v[0], targets.clone(), alpha, gamma)
                })
                .max_rel_err
            }),
        ),
        (
            "giou_loss_sum",
            Box::new(|rng| {
                let (p, t) = (rand_boxes(rng, 4), rand_boxes(rng, 4));
                check(&[p], H, |g, v| g.giou_loss_sum(v[0], t.clone())).max_rel_err
            }),
        ),
        (
            "l1_sum",
            Box::new(|rng| {
                let a = rand_t(rng, 3, 4, 1.0);
                let t = a.map(|x| x + if x > 0.0 { -0.3 } else { 0.3 });
                check(&[a], H, |g, v| g.l1_sum(v[0], t.clone())).max_rel_err
            }),
        ),
        (
            "contrastive loss",
            Box::new(|rng| {
                let (i, t, lt) = (
                    rand_t(rng, 4, 5, 1.0),
                    rand_t(rng, 4, 5, 1.0),
                    rand_t(rng, 1, 1, 1.0),
                );
                check(&[i, t, lt], H, |g, v| {
                    contrastive_loss(g, v[0], v[1], v[2]).unwrap()
                })
                .max_rel_err
            }),
        ),
        (
            "query logits",
            Box::new(|rng| {
                let (e, s, sh, q) = (
                    rand_t(rng, 5, 4, 1.0),
                    rand_t(rng, 5, 1, 1.0),
                    rand_t(rng, 5, 1, 1.0),
                    rand_t(rng, 3, 4, 1.0),
                );
                check(&[e, s, sh, q], H, |g, v| {
                    let heads = ClassHeads {
                        emb: v[0],
                        scale: v[1],
                        shift: v[2],
                    };
                    let y = query_logits(g, &heads, v[3]).unwrap();
                    readout(g, y, 15)
                })
                .max_rel_err
            }),
        ),
        (
            "mlp parameters",
            Box::new(|rng| {
                let mut p = ParamStore::new();
                init_mlp(&mut p, rng, "m", 4, 6).unwrap();
                for (_, t) in p.iter_mut() {
                    *t = t.map(|x| x + 0.1);
                }
                let x = rand_t(rng, 3, 4, 1.0);
                check_params(&p, H, |g, p| {
                    let xv = g.constant(x.clone());
                    let y = mlp(g, p, "m", xv).unwrap();
                    readout(g, y, 16)
                })
                .max_rel_err
            }),
        ),
        (
            "transformer block parameters",
            Box::new(|rng| {
                let mut p = ParamStore::new();
                init_block(&mut p, rng, "b", 4, 8).unwrap();
                let jitter: Vec<(String, Tensor)> = p
                    .iter()
                    .map(|(n, t)| (n.to_string(), t.map(|x| x + 0.05)))
                    .collect();
                for (n, t) in jitter {
                    p.put(&n, t);
                }
                let x = rand_t(rng, 4, 4, 1.0);
                check_params(&p, H, |g, p| {
                    let xv = g.constant(x.clone());
                    let y = block(g, p, "b", xv, 2, &[false, false]).unwrap();
                    readout(g, y, 17)
                })
                .max_rel_err
            }),
        ),
    ]);
    v
}

/// Every case at [`POINTS`] random points, with its worst relative error.
pub fn run() -> Vec<OpReport> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let max_rel_err = (0..POINTS).map(|_| f(&mut rng)).fold(0.0, f64::max);
            OpReport {
                name,
                points: POINTS,
                max_rel_err,
            }
        })
        .collect()
}
