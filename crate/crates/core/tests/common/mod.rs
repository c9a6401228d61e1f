//! Oracles shared by the integration tests and the acceptance run. Nothing
//! here calls the library code it is checking.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepguide_core::guidance::Recommendation;
use sweepguide_core::tensor::{grad_check, Graph, LstmWeights, NodeId, ParamStore, Tensor, TensorError};

pub const GRAD_TOLERANCE: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from ReLU's kink, so finite differences never straddle it.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output element matters.
fn project(g: &mut Graph, out: NodeId, r: &Tensor) -> Result<NodeId, TensorError> {
    let r = g.input(r.clone());
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn p(g: &mut Graph, s: &ParamStore, name: &str) -> NodeId {
    g.param(s, s.id(name).unwrap())
}

/// Worst relative error over every parameter and input of one layer.
pub fn check_layer(layer: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(layer.len() as u64));
    let mut s = ParamStore::new();
    let report = match layer {
        "conv" => {
            let stride = 1 + (seed % 2) as usize;
            s.add("x", random(&mut rng, &[2, 2, 7, 7])).unwrap();
            s.add("w", random(&mut rng, &[3, 2, 3, 3])).unwrap();
            s.add("b", random(&mut rng, &[3])).unwrap();
            let side = (7 + 2 - 3) / stride + 1;
            let r = random(&mut rng, &[2, 3, side, side]);
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
                let y = g.conv2d(x, w, b, stride, 1)?;
                project(g, y, &r)
            })
        }
        "dense" => {
            s.add("x", random(&mut rng, &[3, 5])).unwrap();
            s.add("w", random(&mut rng, &[4, 5])).unwrap();
            s.add("b", random(&mut rng, &[4])).unwrap();
            let r = random(&mut rng, &[3, 4]);
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
                let y = g.dense(x, w, Some(b))?;
                project(g, y, &r)
            })
        }
        "relu" => {
            s.add("x", away_from_zero(&mut rng, &[4, 6])).unwrap();
            let r = random(&mut rng, &[4, 6]);
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let x = p(g, s, "x");
                let y = g.relu(x)?;
                project(g, y, &r)
            })
        }
        "pool" => {
            s.add("x", random(&mut rng, &[2, 3, 4, 5])).unwrap();
            let r = random(&mut rng, &[2, 3]);
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let x = p(g, s, "x");
                let y = g.global_avg_pool(x)?;
                project(g, y, &r)
            })
        }
        "lstm" => {
            let (b, d, m) = (2, 3, 4);
            s.add("x", random(&mut rng, &[b, d])).unwrap();
            s.add("h", random(&mut rng, &[b, m])).unwrap();
            s.add("c", random(&mut rng, &[b, m])).unwrap();
            s.add("w_ih", random(&mut rng, &[4 * m, d])).unwrap();
            s.add("w_hh", random(&mut rng, &[4 * m, m])).unwrap();
            s.add("bias", random(&mut rng, &[4 * m])).unwrap();
            let (rh, rc) = (random(&mut rng, &[b, m]), random(&mut rng, &[b, m]));
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let w = LstmWeights {
                    w_ih: p(g, s, "w_ih"),
                    w_hh: p(g, s, "w_hh"),
                    bias: p(g, s, "bias"),
                };
                let (x, h, c) = (p(g, s, "x"), p(g, s, "h"), p(g, s, "c"));
                let (h1, c1) = g.lstm_step(x, h, c, &w)?;
                // a second step exercises the recurrence
                let (h2, c2) = g.lstm_step(x, h1, c1, &w)?;
                let a = project(g, h2, &rh)?;
                let b = project(g, c2, &rc)?;
                g.add(a, b)
            })
        }
        "fusion" => {
            s.add("feat", random(&mut rng, &[3, 4])).unwrap();
            s.add("pose", random(&mut rng, &[3, 2])).unwrap();
            s.add("w", random(&mut rng, &[5, 6])).unwrap();
            let r = random(&mut rng, &[2, 5]);
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let (f, q, w) = (p(g, s, "feat"), p(g, s, "pose"), p(g, s, "w"));
                let cat = g.concat(f, q)?;
                let y = g.dense(cat, w, None)?;
                // row gathering with a repeat, as in the windowed sequence batches
                let rows = g.gather_rows(y, &[2, 0])?;
                let picked = g.slice_cols(rows, 0, 5)?;
                project(g, picked, &r)
            })
        }
        "softmax_ce" => {
            let (n, k) = (4, 3);
            s.add("logits", random(&mut rng, &[n, k])).unwrap();
            let mut targets = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                targets.extend(raw.iter().map(|v| v / sum));
            }
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
            grad_check(&mut s, GRAD_TOLERANCE, |g, s| {
                let l = p(g, s, "logits");
                g.softmax_cross_entropy(l, &targets, &weights)
            })
        }
        other => panic!("unknown layer {other}"),
    }
    .unwrap();
    report.max_relative_error()
}

pub const LAYERS: [&str; 7] = ["conv", "dense", "relu", "pool", "lstm", "fusion", "softmax_ce"];

// ---------------------------------------------------------------- statistics

/// Fleiss' κ from ordered rater pairs, counted one by one.
pub fn brute_fleiss(items: &[Vec<usize>], categories: usize) -> Option<f64> {
    let n = items[0].len();
    if n < 2 {
        return None;
    }
    let mut agree_share = 0.0;
    let mut class_votes = vec![0usize; categories];
    for row in items {
        let mut agree = 0usize;
        for r in 0..n {
            class_votes[row[r]] += 1;
            for s in 0..n {
                if r != s && row[r] == row[s] {
                    agree += 1;
                }
            }
        }
        agree_share += agree as f64 / (n * (n - 1)) as f64;
    }
    let p_bar = agree_share / items.len() as f64;
    let total = (items.len() * n) as f64;
    let p_e: f64 = class_votes.iter().map(|&c| (c as f64 / total).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return None;
    }
    Some((p_bar - p_e) / (1.0 - p_e))
}

/// Of all ordered rater pairs whose first rater chose `class`, the share
/// where the second did too.
pub fn brute_specific(items: &[Vec<usize>], class: usize) -> Option<f64> {
    let (mut both, mut first) = (0usize, 0usize);
    for row in items {
        for r in 0..row.len() {
            for s in 0..row.len() {
                if r != s && row[r] == class {
                    first += 1;
                    both += (row[s] == class) as usize;
                }
            }
        }
    }
    (first > 0).then(|| both as f64 / first as f64)
}

/// Mean model–observer agreement over mean observer–observer agreement.
pub fn brute_williams(model: &[usize], observers: &[Vec<usize>]) -> Option<f64> {
    let agree = |a: &[usize], b: &[usize]| a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
    let p0: f64 = observers.iter().map(|o| agree(model, o)).sum::<f64>() / observers.len() as f64;
    let mut pairs = Vec::new();
    for j in 0..observers.len() {
        for k in j + 1..observers.len() {
            pairs.push(agree(&observers[j], &observers[k]));
        }
    }
    let pj = pairs.iter().sum::<f64>() / pairs.len() as f64;
    (pj > 0.0).then(|| p0 / pj)
}

fn choose(n: u64, k: u64) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Two-sided exact McNemar p from integer binomial sums.
pub fn exact_mcnemar_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let tail: u128 = (0..=b.min(c)).map(|k| choose(n, k)).sum();
    (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0)
}

/// A random table of 2..=5 raters, 1..=50 items and 2..=4 classes, with a
/// tendency toward agreement so κ spans its range.
pub fn random_table(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, usize) {
    let raters = rng.random_range(2..=5);
    let items = rng.random_range(1..=50);
    let k = rng.random_range(2..=4);
    let bias = rng.random_range(0.0..0.9);
    let rows = (0..items)
        .map(|_| {
            let truth = rng.random_range(0..k);
            (0..raters)
                .map(|_| if rng.random_bool(bias) { truth } else { rng.random_range(0..k) })
                .collect()
        })
        .collect();
    (rows, k)
}

// ---------------------------------------------------------------- guidance

/// The recommendation at every step, computed from the whole prefix: the
/// trailing run of Stops decides Aligned; otherwise the current side, the
/// most recent side before the run, or (for a run from the very start) the
/// likelier side of the first frame, ties to the left.
pub fn hysteresis_oracle(k: usize, seq: &[[f64; 3]]) -> Vec<Recommendation> {
    // class order (R, S, L); ties in the argmax go to the lower index
    let class = |d: &[f64; 3]| {
        if d[0] >= d[1] && d[0] >= d[2] {
            0
        } else if d[1] >= d[2] {
            1
        } else {
            2
        }
    };
    let side = |c: usize| if c == 0 { Recommendation::MoveRight } else { Recommendation::MoveLeft };
    (0..seq.len())
        .map(|t| {
            let c = class(&seq[t]);
            if c != 1 {
                return side(c);
            }
            let run = seq[..=t].iter().rev().take_while(|d| class(d) == 1).count();
            if run >= k {
                return Recommendation::Aligned;
            }
            match seq[..=t].iter().rev().map(class).find(|&c| c != 1) {
                Some(c) => side(c),
                None if seq[0][2] >= seq[0][0] => Recommendation::MoveLeft,
                None => Recommendation::MoveRight,
            }
        })
        .collect()
}

/// Direction sequences rich in Stop runs, side flips and exact side ties.
pub fn random_direction_sequence(rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let len = rng.random_range(1..=60);
    (0..len)
        .map(|_| match rng.random_range(0..10) {
            0 => [0.25, 0.5, 0.25],
            1..=4 => {
                let s = rng.random_range(0.4..0.9);
                let l = rng.random_range(0.0..1.0 - s);
                [1.0 - s - l, s, l]
            }
            _ => {
                let a: f64 = rng.random_range(0.0..1.0);
                let b: f64 = rng.random_range(0.0..1.0);
                let c: f64 = rng.random_range(0.0..1.0);
                let t = a + b + c;
                [a / t, b / t, c / t]
            }
        })
        .collect()
}
