//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec::diffcalc::{finite_difference_gradient, Graph, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks sit far from every probe.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    // gradients that vanish identically (e.g. a bias under centering) are pure rounding noise
    diff / scale.max(1e-3)
}

/// Builds the graph with input slot `slot` taken from `x` and the rest from
/// `inputs`, returning a scalar output.
type Builder = dyn Fn(&mut Graph, &[Var]) -> Var;

fn scalar_of(build: &Builder, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars);
    g.value(out).unwrap().data()[0]
}

/// Checks every input's gradient against finite differences and returns the
/// worst relative error.
fn check(build: &Builder, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (slot, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf reached").data().to_vec();
        let numeric = finite_difference_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[slot] = x.clone();
                scalar_of(build, &probe)
            },
            &inputs[slot],
            H,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic, numeric.data()));
    }
    worst
}

/// Weighted sum so every output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.value(v).unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let prod = g.mul(v, w).unwrap();
    g.sum(prod).unwrap()
}

/// Worst relative error over `SEEDS` random instances.
fn run(make: impl Fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor>, Box<Builder>)) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, build) = make(&mut rng, seed);
            check(&*build, &inputs)
        })
        .fold(0.0, f64::max)
}

pub fn conv1d() -> f64 {
    run(|rng, seed| {
        let b = rng.gen_range(1..4);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = rng.gen_range(1..6);
        let stride = rng.gen_range(1..4);
        let padding = rng.gen_range(0..k);
        let len = rng.gen_range(k.max(2)..k + 9);
        let inputs = vec![
            rand_tensor(rng, &[b, cin, len]),
            rand_tensor(rng, &[cout, cin, k]),
            rand_tensor(rng, &[cout]),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.conv1d(v[0], v[1], v[2], stride, padding).unwrap();
                weighted_sum(g, y, seed)
            }),
        )
    })
}

pub fn affine() -> f64 {
    run(|rng, seed| {
        let (b, din, dout) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let inputs = vec![
            rand_tensor(rng, &[b, din]),
            rand_tensor(rng, &[dout, din]),
            rand_tensor(rng, &[dout]),
        ];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.affine(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, seed)
            }),
        )
    })
}

pub fn relu() -> f64 {
    run(|rng, seed| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..6)];
        (
            vec![rand_away_from_zero(rng, &shape)],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.relu(v[0]).unwrap();
                weighted_sum(g, y, seed)
            }),
        )
    })
}

pub fn global_avg_pool() -> f64 {
    run(|rng, seed| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..7)];
        (
            vec![rand_tensor(rng, &shape)],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.global_avg_pool(v[0]).unwrap();
                weighted_sum(g, y, seed)
            }),
        )
    })
}

pub fn elementwise() -> f64 {
    run(|rng, seed| {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let factor = rng.gen_range(-2.0..2.0);
        let inputs = vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let s = g.add(v[0], v[1]).unwrap();
                let p = g.mul(s, v[0]).unwrap();
                let q = g.scale(p, factor).unwrap();
                let flat = g.reshape(q, vec![r * c]).unwrap();
                weighted_sum(g, flat, seed)
            }),
        )
    })
}

pub fn cross_correlation(center: bool) -> f64 {
    run(|rng, seed| {
        let (b, d) = (rng.gen_range(3..8), rng.gen_range(1..5));
        let inputs = vec![rand_tensor(rng, &[b, d]), rand_tensor(rng, &[b, d])];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let c = g.cross_correlation(v[0], v[1], 1e-12, center).unwrap();
                weighted_sum(g, c, seed)
            }),
        )
    })
}

pub fn barlow_loss() -> f64 {
    run(|rng, _| {
        let d = rng.gen_range(1..6);
        let lambda = rng.gen_range(0.0..2.0);
        (
            vec![rand_tensor(rng, &[d, d])],
            Box::new(move |g: &mut Graph, v: &[Var]| g.barlow_loss(v[0], lambda).unwrap()),
        )
    })
}

pub fn loss_of_correlation(center: bool) -> f64 {
    run(|rng, _| {
        let (b, d) = (rng.gen_range(3..9), rng.gen_range(2..5));
        let inputs = vec![rand_tensor(rng, &[b, d]), rand_tensor(rng, &[b, d])];
        (
            inputs,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let c = g.cross_correlation(v[0], v[1], 1e-12, center).unwrap();
                g.barlow_loss(c, 0.05).unwrap()
            }),
        )
    })
}

/// Inputs: x1, x2, then conv weights/biases for 2 layers, then projector.
fn composite_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (b, len) = (5, 12);
    let mut v = vec![rand_tensor(rng, &[b, 1, len]), rand_tensor(rng, &[b, 1, len])];
    for (cin, cout) in [(1, 3), (3, 4)] {
        v.push(rand_tensor(rng, &[cout, cin, 3]));
        v.push(rand_tensor(rng, &[cout]));
    }
    v.push(rand_tensor(rng, &[6, 4]));
    v.push(rand_tensor(rng, &[6]));
    v.push(rand_tensor(rng, &[5, 6]));
    v.push(rand_tensor(rng, &[5]));
    v
}

fn composite(g: &mut Graph, v: &[Var], center: bool) -> Var {
    let branch = |g: &mut Graph, x: Var| {
        let mut h = x;
        for l in 0..2 {
            h = g.conv1d(h, v[2 + 2 * l], v[3 + 2 * l], 2, 1).unwrap();
            h = g.relu(h).unwrap();
        }
        let pooled = g.global_avg_pool(h).unwrap();
        let a = g.affine(pooled, v[6], v[7]).unwrap();
        let a = g.relu(a).unwrap();
        g.affine(a, v[8], v[9]).unwrap()
    };
    let z1 = branch(g, v[0]);
    let z2 = branch(g, v[1]);
    let c = g.cross_correlation(z1, z2, 1e-12, center).unwrap();
    g.barlow_loss(c, 5e-3).unwrap()
}

pub fn full_composite(center: bool) -> f64 {
    run(|rng, _| {
        (
            composite_inputs(rng),
            Box::new(move |g: &mut Graph, v: &[Var]| composite(g, v, center)),
        )
    })
}

/// Largest deviation of `∇(a f + b h)` from `a ∇f + b ∇h`.
pub fn linearity_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = composite_inputs(&mut rng);
        let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let grads_of = |which: u8| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let f = composite(&mut g, &vars, false);
            let h = {
                let sq = g.mul(vars[0], vars[1]).unwrap();
                g.sum(sq).unwrap()
            };
            let out = match which {
                0 => f,
                1 => h,
                _ => {
                    let fa = g.scale(f, a).unwrap();
                    let hb = g.scale(h, b).unwrap();
                    g.add(fa, hb).unwrap()
                }
            };
            let grads = g.backward(out).unwrap();
            vars.iter()
                .map(|v| grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; t_len(&inputs, v)]))
                .collect::<Vec<_>>()
        };
        let (gf, gh, gc) = (grads_of(0), grads_of(1), grads_of(2));
        for ((f, h), c) in gf.iter().zip(&gh).zip(&gc) {
            for ((x, y), z) in f.iter().zip(h).zip(c) {
                worst = worst.max((a * x + b * y - z).abs());
            }
        }
    }
    worst
}

fn t_len(inputs: &[Tensor], v: &Var) -> usize {
    inputs[v.index()].len()
}

/// Every check with its worst relative error.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("conv1d", conv1d()),
        ("affine", affine()),
        ("relu", relu()),
        ("global_avg_pool", global_avg_pool()),
        ("add/mul/scale/reshape/sum", elementwise()),
        ("cross_correlation", cross_correlation(false)),
        ("cross_correlation centered", cross_correlation(true)),
        ("barlow_loss", barlow_loss()),
        ("loss of correlation", loss_of_correlation(false)),
        ("loss of centered correlation", loss_of_correlation(true)),
        ("encoder-projector-loss composite", full_composite(false)),
        ("centered composite", full_composite(true)),
    ]
}
