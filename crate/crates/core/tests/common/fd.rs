//! Central finite-difference checks of reverse-mode gradients.
//!
//! A case draws random inputs and builds a scalar from them. Trainable
//! inputs are graph parameters; everything a loss treats as fixed
//! (labels, propensities, pseudo labels, teacher activations) is passed as a
//! constant, so the check compares the gradient the loss actually trains with.

use evi::diffcore::{Graph, Tensor, Var};
use evi::losses::{self, PropensityClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator, so
/// gradients that are exactly zero are compared absolutely.
pub const FLOOR: f64 = 1e-3;
pub const TRIALS: usize = 100;

#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub params: Vec<Tensor>,
    pub consts: Vec<Tensor>,
    pub ids: Vec<usize>,
}

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Inputs>;
type Build = Box<dyn Fn(&mut Graph, &[Var], &[Var], &Inputs) -> Var>;

pub struct Case {
    pub name: &'static str,
    gen: Gen,
    build: Build,
}

impl Case {
    pub fn new(
        name: &'static str,
        gen: impl Fn(&mut ChaCha8Rng) -> Inputs + 'static,
        build: impl Fn(&mut Graph, &[Var], &[Var], &Inputs) -> Var + 'static,
    ) -> Self {
        Case {
            name,
            gen: Box::new(gen),
            build: Box::new(build),
        }
    }

    fn eval(&self, inp: &Inputs) -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let params: Vec<Var> = inp.params.iter().map(|t| g.param(t.clone())).collect();
        let consts: Vec<Var> = inp.consts.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&mut g, &params, &consts, inp);
        (g, params, out)
    }

    /// Worst relative error over every coordinate of every parameter.
    pub fn check_once(&self, inp: &Inputs) -> f64 {
        let (mut g, params, out) = self.eval(inp);
        g.backward(out).expect("scalar root");
        let mut worst: f64 = 0.0;
        for (k, &p) in params.iter().enumerate() {
            let analytic = g
                .grad(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inp.params[k].len()]);
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = inp.clone();
                plus.params[k].values_mut()[j] += STEP;
                let mut minus = inp.clone();
                minus.params[k].values_mut()[j] -= STEP;
                let fp = {
                    let (g, _, o) = self.eval(&plus);
                    g.value(o).item()
                };
                let fm = {
                    let (g, _, o) = self.eval(&minus);
                    g.value(o).item()
                };
                let numeric = (fp - fm) / (2.0 * STEP);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Worst error over `trials` random draws.
    pub fn run(&self, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..trials)
            .map(|_| self.check_once(&(self.gen)(&mut rng)))
            .fold(0.0, f64::max)
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in [-2, 2] kept away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c, -2.0, 2.0))
}

/// `Σ out ⊙ w` with constant `w`, so every output coordinate is exercised.
fn project(g: &mut Graph, out: Var, w: Var) -> Var {
    let m = g.mul(out, w).unwrap();
    g.sum(m)
}

/// Appends a projection weight shaped like an op's output.
fn with_weight(mut inp: Inputs, rng: &mut ChaCha8Rng, shape: &[usize]) -> Inputs {
    let n = shape.iter().product();
    inp.consts
        .push(Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).unwrap());
    inp
}

fn unary(name: &'static str, lo: f64, hi: f64, kink: bool, f: fn(&mut Graph, Var) -> Var) -> Case {
    Case::new(
        name,
        move |rng| {
            let vals = if kink {
                away_from_zero(rng, 12)
            } else {
                uniform(rng, 12, lo, hi)
            };
            let inp = Inputs {
                params: vec![Tensor::matrix(3, 4, vals)],
                ..Default::default()
            };
            with_weight(inp, rng, &[3, 4])
        },
        move |g, p, c, _| {
            let y = f(g, p[0]);
            project(g, y, c[0])
        },
    )
}

fn binary(name: &'static str, f: fn(&mut Graph, Var, Var) -> Var) -> Case {
    Case::new(
        name,
        |rng| {
            let inp = Inputs {
                params: vec![mat(rng, 3, 4), mat(rng, 3, 4)],
                ..Default::default()
            };
            with_weight(inp, rng, &[3, 4])
        },
        move |g, p, c, _| {
            let y = f(g, p[0], p[1]);
            project(g, y, c[0])
        },
    )
}

/// One case per differentiable graph op.
pub fn op_cases() -> Vec<Case> {
    vec![
        Case::new(
            "matmul",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 4), mat(rng, 4, 2)],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 2])
            },
            |g, p, c, _| {
                let y = g.matmul(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "add_row",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 4), Tensor::vector(uniform(rng, 4, -2.0, 2.0))],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 4])
            },
            |g, p, c, _| {
                let y = g.add_row(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        binary("add", |g, a, b| g.add(a, b).unwrap()),
        binary("sub", |g, a, b| g.sub(a, b).unwrap()),
        binary("mul", |g, a, b| g.mul(a, b).unwrap()),
        Case::new(
            "mul_col",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 4), Tensor::column(uniform(rng, 3, -2.0, 2.0))],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 4])
            },
            |g, p, c, _| {
                let y = g.mul_col(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "mul_row",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 4), Tensor::vector(uniform(rng, 4, -2.0, 2.0))],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 4])
            },
            |g, p, c, _| {
                let y = g.mul_row(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "div_row",
            |rng| {
                let denom: Vec<f64> = away_from_zero(rng, 4)
                    .into_iter()
                    .map(|v| v.signum() * (0.5 + v.abs()))
                    .collect();
                let inp = Inputs {
                    params: vec![mat(rng, 3, 4), Tensor::vector(denom)],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 4])
            },
            |g, p, c, _| {
                let y = g.div_row(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        unary("scale", -2.0, 2.0, false, |g, x| g.scale(x, -1.7)),
        unary("add_scalar", -2.0, 2.0, false, |g, x| g.add_scalar(x, 0.3)),
        unary("relu", -2.0, 2.0, true, |g, x| g.relu(x)),
        unary("sigmoid", -2.0, 2.0, false, |g, x| g.sigmoid(x)),
        unary("softplus", -2.0, 2.0, false, |g, x| g.softplus(x)),
        unary("ln", 0.2, 2.0, false, |g, x| g.ln(x)),
        unary("square", -2.0, 2.0, false, |g, x| g.square(x)),
        unary("softmax", -2.0, 2.0, false, |g, x| g.softmax(x)),
        Case::new(
            "bce",
            |rng| {
                let inp = Inputs {
                    params: vec![
                        Tensor::matrix(3, 4, uniform(rng, 12, 0.05, 0.95)),
                        Tensor::matrix(3, 4, uniform(rng, 12, 0.0, 1.0)),
                    ],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 4])
            },
            |g, p, c, _| {
                let y = g.bce(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "outer",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 2), mat(rng, 3, 3)],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 6])
            },
            |g, p, c, _| {
                let y = g.outer(p[0], p[1]).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "gather",
            |rng| {
                let ids = (0..6).map(|_| rng.random_range(0..5)).collect();
                let inp = Inputs {
                    params: vec![mat(rng, 5, 3)],
                    ids,
                    ..Default::default()
                };
                with_weight(inp, rng, &[6, 3])
            },
            |g, p, c, inp| {
                let y = g.gather(p[0], &inp.ids).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "concat_cols",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 2), mat(rng, 3, 3)],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 5])
            },
            |g, p, c, _| {
                let y = g.concat_cols(&[p[0], p[1]]).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "slice_col",
            |rng| {
                let inp = Inputs {
                    params: vec![mat(rng, 3, 4)],
                    ..Default::default()
                };
                with_weight(inp, rng, &[3, 1])
            },
            |g, p, c, _| {
                let y = g.slice_col(p[0], 2).unwrap();
                project(g, y, c[0])
            },
        ),
        Case::new(
            "sum",
            |rng| Inputs {
                params: vec![mat(rng, 3, 4)],
                ..Default::default()
            },
            |g, p, _, _| {
                let sq = g.square(p[0]);
                g.sum(sq)
            },
        ),
        Case::new(
            "mean",
            |rng| Inputs {
                params: vec![mat(rng, 3, 4)],
                ..Default::default()
            },
            |g, p, _, _| {
                let sq = g.square(p[0]);
                g.mean(sq)
            },
        ),
    ]
}

const BATCH: usize = 8;

/// Batch labels with at least one click and one non-click; conversions only on clicks.
fn funnel(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let o: Vec<f64> = (0..BATCH)
            .map(|_| f64::from(rng.random_bool(0.5) as u8))
            .collect();
        let clicks = o.iter().sum::<f64>();
        if clicks >= 1.0 && clicks < BATCH as f64 {
            let r = o
                .iter()
                .map(|&oi| oi * f64::from(rng.random_bool(0.5) as u8))
                .collect();
            return (o, r);
        }
    }
}

/// Inputs for one CVR-loss case: `params[0]` are student logits; consts are
/// `[o, r, r*, ô]` as columns; `ids` unused.
fn loss_inputs(rng: &mut ChaCha8Rng, extra_logits: usize) -> Inputs {
    let (o, r) = funnel(rng);
    let mut params = vec![Tensor::column(uniform(rng, BATCH, -2.0, 2.0))];
    for _ in 0..extra_logits {
        params.push(Tensor::column(uniform(rng, BATCH, -2.0, 2.0)));
    }
    Inputs {
        params,
        consts: vec![
            Tensor::column(o),
            Tensor::column(r),
            Tensor::column(uniform(rng, BATCH, 0.01, 0.99)),
            Tensor::column(uniform(rng, BATCH, 0.02, 0.98)),
        ],
        ids: vec![],
    }
}

fn labels(inp: &Inputs) -> (Vec<f64>, Vec<f64>) {
    (
        inp.consts[0].values().to_vec(),
        inp.consts[1].values().to_vec(),
    )
}

/// One case per loss, each differentiated with respect to what it trains.
pub fn loss_cases() -> Vec<Case> {
    let clip = PropensityClip::default();
    vec![
        Case::new(
            "loss_cvr_naive",
            |rng| loss_inputs(rng, 0),
            |g, p, _, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(p[0]);
                losses::loss_cvr_naive(g, s, &o, &r).unwrap()
            },
        ),
        Case::new(
            "loss_cvr_ipw",
            |rng| loss_inputs(rng, 0),
            move |g, p, c, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(p[0]);
                losses::loss_cvr_ipw(g, s, &o, &r, c[3], Some(clip)).unwrap()
            },
        ),
        Case::new(
            "loss_cvr_dr (prediction)",
            |rng| loss_inputs(rng, 0),
            move |g, p, c, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(p[0]);
                let imputed = g.softplus(c[2]);
                losses::loss_cvr_dr(g, s, Some(imputed), &o, &r, c[3], Some(clip))
                    .unwrap()
                    .0
            },
        ),
        Case::new(
            "loss_cvr_dr (imputation)",
            |rng| loss_inputs(rng, 0),
            move |g, p, c, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(c[2]);
                let imputed = g.softplus(p[0]);
                losses::loss_cvr_dr(g, s, Some(imputed), &o, &r, c[3], Some(clip))
                    .unwrap()
                    .1
            },
        ),
        Case::new(
            "loss_cvr_distill_entire",
            |rng| loss_inputs(rng, 0),
            |g, p, c, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(p[0]);
                losses::loss_cvr_distill_entire(g, s, &o, &r, c[2]).unwrap()
            },
        ),
        Case::new(
            "loss_cvr_ddpo",
            |rng| loss_inputs(rng, 0),
            move |g, p, c, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(p[0]);
                losses::loss_cvr_ddpo(g, s, &o, &r, c[2], c[3], clip).unwrap()
            },
        ),
        Case::new(
            "loss_ctr",
            |rng| loss_inputs(rng, 0),
            |g, p, _, inp| {
                let (o, _) = labels(inp);
                let s = g.sigmoid(p[0]);
                losses::loss_ctr(g, s, &o).unwrap()
            },
        ),
        Case::new(
            "loss_ctcvr",
            |rng| loss_inputs(rng, 1),
            |g, p, _, inp| {
                let (o, r) = labels(inp);
                let ctr = g.sigmoid(p[1]);
                let cvr = g.sigmoid(p[0]);
                losses::loss_ctcvr(g, ctr, cvr, &o, &r).unwrap()
            },
        ),
        Case::new(
            "loss_cvr_teacher",
            |rng| loss_inputs(rng, 0),
            |g, p, _, inp| {
                let (o, r) = labels(inp);
                let t = g.sigmoid(p[0]);
                losses::loss_cvr_teacher(g, t, &o, &r).unwrap().loss
            },
        ),
        Case::new(
            "loss_cvr_evi",
            |rng| loss_inputs(rng, 0),
            move |g, p, c, inp| {
                let (o, r) = labels(inp);
                let s = g.sigmoid(p[0]);
                losses::loss_cvr_evi(g, s, &o, &r, c[2], c[3], clip).unwrap()
            },
        ),
        Case::new(
            "loss_vie",
            |rng| {
                // Two transfer pairs: student taps [8×5] -> teacher [8×4], and [8×3] -> [8×2].
                let mut params = Vec::new();
                let mut consts = Vec::new();
                for (ds, dt) in [(5, 4), (3, 2)] {
                    params.push(Tensor::matrix(
                        BATCH,
                        ds,
                        uniform(rng, BATCH * ds, -1.0, 1.0),
                    ));
                    params.push(Tensor::matrix(ds, dt, uniform(rng, ds * dt, -1.0, 1.0)));
                    params.push(Tensor::vector(uniform(rng, dt, -0.5, 0.5)));
                    params.push(Tensor::vector(uniform(rng, dt, -1.0, 1.0)));
                    consts.push(Tensor::matrix(
                        BATCH,
                        dt,
                        uniform(rng, BATCH * dt, -1.0, 1.0),
                    ));
                }
                Inputs {
                    params,
                    consts,
                    ids: vec![],
                }
            },
            |g, p, c, _| {
                let mut terms = Vec::new();
                for k in 0..2 {
                    let (s, w, b, rho) = (p[4 * k], p[4 * k + 1], p[4 * k + 2], p[4 * k + 3]);
                    let sw = g.matmul(s, w).unwrap();
                    let mu = g.add_row(sw, b).unwrap();
                    let sigma = g.softplus(rho);
                    terms.push((mu, sigma));
                }
                losses::loss_vie(g, &[c[0], c[1]], &terms).unwrap()
            },
        ),
    ]
}
