//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls into the crate's model or metric
//! code paths; it only reads the parameter structs.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svsnet_core::{
    forward, Dataset, LayerwiseRepr, Mode, ModelConfig, ModelParams, RatedPair, ReprSource, Sample,
};

pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_repr(rng: &mut ChaCha8Rng, id: &str, l: usize, t: usize, d: usize) -> LayerwiseRepr {
    let data = (0..l * t * d)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    LayerwiseRepr::new(id, l, t, d, data).unwrap()
}

/// Random parameters with nonzero logits and biases.
pub fn random_params(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ModelParams {
    let mut p = ModelParams::init_with_rng(cfg, rng);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

// ---------------------------------------------------------------------------
// Straight-line forward oracle
// ---------------------------------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn layer(repr: &LayerwiseRepr, l: usize) -> Mat {
    let (t, d) = (repr.num_frames(), repr.dim());
    let data = repr.data();
    (0..t)
        .map(|i| (0..d).map(|j| data[l * t * d + i * d + j] as f64).collect())
        .collect()
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_encode(repr: &LayerwiseRepr, p: &ModelParams, cfg: &ModelConfig) -> Mat {
    let (t, d) = (repr.num_frames(), repr.dim());
    let fused: Mat = match cfg.repr_source {
        ReprSource::LastLayer => layer(repr, repr.num_layers() - 1),
        ReprSource::WeightedSum => {
            let w = oracle_softmax(&p.layer_logits);
            let mut out = vec![vec![0.0; d]; t];
            for (l, wl) in w.iter().enumerate() {
                let x = layer(repr, l);
                for i in 0..t {
                    for j in 0..d {
                        out[i][j] += wl * x[i][j];
                    }
                }
            }
            out
        }
    };
    match &p.adapter {
        None => fused,
        Some(a) => fused
            .iter()
            .map(|row| {
                (0..a.weight.rows())
                    .map(|o| {
                        let mut acc = a.bias[o];
                        for (i, x) in row.iter().enumerate() {
                            acc += a.weight[(o, i)] * x;
                        }
                        acc
                    })
                    .collect()
            })
            .collect(),
    }
}

fn oracle_attention(q: &Mat, kv: &Mat) -> Mat {
    let dim = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = kv
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dim.sqrt())
                .collect();
            let w = oracle_softmax(&scores);
            let mut out = vec![0.0; qi.len()];
            for (wj, kj) in w.iter().zip(kv) {
                for (o, v) in out.iter_mut().zip(kj) {
                    *o += wj * v;
                }
            }
            out
        })
        .collect()
}

fn oracle_mean(x: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; x[0].len()];
    for row in x {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter().map(|v| v / x.len() as f64).collect()
}

fn oracle_head(d: &[f64], p: &ModelParams) -> Vec<f64> {
    let h1 = &p.head_hidden;
    let hidden: Vec<f64> = (0..h1.weight.rows())
        .map(|o| {
            let z: f64 = h1.bias[o] + (0..d.len()).map(|i| h1.weight[(o, i)] * d[i]).sum::<f64>();
            if z > 0.0 {
                z
            } else {
                0.0
            }
        })
        .collect();
    let h2 = &p.head_out;
    (0..h2.weight.rows())
        .map(|o| {
            h2.bias[o]
                + (0..hidden.len())
                    .map(|i| h2.weight[(o, i)] * hidden[i])
                    .sum::<f64>()
        })
        .collect()
}

/// Final score (regression) or mean probability vector (classification).
pub fn oracle_forward(
    test: &LayerwiseRepr,
    reference: &LayerwiseRepr,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> Vec<f64> {
    let rt = oracle_encode(test, p, cfg);
    let rr = oracle_encode(reference, p, cfg);
    let rr_hat = oracle_attention(&rt, &rr);
    let rt_hat = oracle_attention(&rr, &rt);
    let dist = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> {
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect()
    };
    let d_tr = dist(oracle_mean(&rt), oracle_mean(&rr_hat));
    let d_rt = dist(oracle_mean(&rr), oracle_mean(&rt_hat));
    let zt = oracle_head(&d_tr, p);
    let zr = oracle_head(&d_rt, p);
    match cfg.mode {
        Mode::Regression => vec![(zt[0] + zr[0]) / 2.0],
        Mode::Classification => {
            let pt = oracle_softmax(&zt);
            let pr = oracle_softmax(&zr);
            pt.iter().zip(&pr).map(|(a, b)| (a + b) / 2.0).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles
// ---------------------------------------------------------------------------

pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

/// O(n^2) average rank: 1 + #less + (#equal - 1) / 2.
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

pub fn brute_mse(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += (x[i] - y[i]) * (x[i] - y[i]);
    }
    s / x.len() as f64
}

/// Group-by then mean, keyed by system id, sorted by id.
pub fn brute_group_means(
    preds: &[f64],
    labels: &[f64],
    systems: &[String],
) -> Vec<(String, f64, f64, usize)> {
    let mut ids: Vec<String> = systems.to_vec();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let members: Vec<usize> = (0..systems.len()).filter(|&i| systems[i] == id).collect();
            let n = members.len();
            let mp = members.iter().map(|&i| preds[i]).sum::<f64>() / n as f64;
            let ml = members.iter().map(|&i| labels[i]).sum::<f64>() / n as f64;
            (id, mp, ml, n)
        })
        .collect()
}

/// Random vector of `n` values with roughly a third drawn from a small
/// pool so ties are common.
pub fn vector_with_ties(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let pool: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.35) {
                pool[rng.gen_range(0..pool.len())]
            } else {
                rng.gen_range(-5.0..5.0)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic teacher dataset
// ---------------------------------------------------------------------------

pub const TEACHER_LAYERS: usize = 3;
pub const TEACHER_DIM: usize = 8;

/// The default configuration with the adapter, on small representations.
pub fn teacher_config() -> ModelConfig {
    ModelConfig::new(
        Mode::Regression,
        ReprSource::WeightedSum,
        true,
        TEACHER_LAYERS,
        TEACHER_DIM,
    )
}

/// `n` pairs over 12 utterances and 5 systems, labelled by a frozen random
/// model of the same architecture whose output layer is affinely rescaled
/// so labels span [1.5, 3.5].
pub fn teacher_dataset(n: usize, seed: u64) -> Dataset {
    let cfg = teacher_config();
    let (l, d) = (TEACHER_LAYERS, TEACHER_DIM);
    let mut rng = rng(seed);
    let reprs: Vec<Arc<LayerwiseRepr>> = (0..12)
        .map(|i| {
            let t = rng.gen_range(2..=6);
            Arc::new(random_repr(&mut rng, &format!("u{i}"), l, t, d))
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let a = rng.gen_range(0..12);
            let mut b = rng.gen_range(0..12);
            while b == a {
                b = rng.gen_range(0..12);
            }
            (a, b)
        })
        .collect();
    let mut teacher = ModelParams::init_with_rng(&cfg, &mut rng);
    for v in teacher.layer_logits.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let raw: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| {
            forward(&reprs[a], &reprs[b], &teacher, &cfg)
                .unwrap()
                .score()
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = 2.0 / (hi - lo);
    let shift = 2.5 - scale * (lo + hi) / 2.0;
    teacher
        .head_out
        .weight
        .as_mut_slice()
        .iter_mut()
        .for_each(|w| *w *= scale);
    teacher.head_out.bias[0] = scale * teacher.head_out.bias[0] + shift;

    let samples = pairs
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let score = forward(&reprs[a], &reprs[b], &teacher, &cfg)
                .unwrap()
                .score();
            Sample {
                pair: RatedPair {
                    pair_id: format!("p{i:02}"),
                    test_path: format!("u{a}.lrp").into(),
                    ref_path: format!("u{b}.lrp").into(),
                    score,
                    system_id: format!("S{}", i % 5),
                },
                test: reprs[a].clone(),
                reference: reprs[b].clone(),
            }
        })
        .collect();
    Dataset::from_samples(".", samples).unwrap()
}
