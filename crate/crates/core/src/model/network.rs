use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::model::ops::{self, Attended, BranchOutput, HeadTrace};
use crate::model::{Gradients, Mode, ModelConfig, ModelParams, ReprSource, NUM_CLASSES};
use crate::repr::LayerwiseRepr;

/// Scores of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOutput {
    Regression {
        test_branch: f64,
        ref_branch: f64,
        score: f64,
    },
    Classification {
        test_branch: Vec<f64>,
        ref_branch: Vec<f64>,
        /// Mean of the two branch distributions.
        probabilities: Vec<f64>,
        /// `argmax + 1` of `probabilities`.
        score: f64,
    },
}

impl ScoreOutput {
    /// The score fed to metrics: the averaged regression output, or the
    /// argmax class in `1..=4`.
    pub fn score(&self) -> f64 {
        match self {
            ScoreOutput::Regression { score, .. } | ScoreOutput::Classification { score, .. } => {
                *score
            }
        }
    }

    /// Probability-weighted class score; equals [`Self::score`] in
    /// regression mode.
    pub fn expected_score(&self) -> f64 {
        match self {
            ScoreOutput::Regression { score, .. } => *score,
            ScoreOutput::Classification { probabilities, .. } => probabilities
                .iter()
                .enumerate()
                .map(|(k, p)| (k + 1) as f64 * p)
                .sum(),
        }
    }

    pub fn test_branch(&self) -> BranchOutput {
        match self {
            ScoreOutput::Regression { test_branch, .. } => BranchOutput::Score(*test_branch),
            ScoreOutput::Classification { test_branch, .. } => {
                BranchOutput::Probabilities(test_branch.clone())
            }
        }
    }

    pub fn ref_branch(&self) -> BranchOutput {
        match self {
            ScoreOutput::Regression { ref_branch, .. } => BranchOutput::Score(*ref_branch),
            ScoreOutput::Classification { ref_branch, .. } => {
                BranchOutput::Probabilities(ref_branch.clone())
            }
        }
    }
}

/// One utterance after layer fusion and the optional adapter.
struct Encoded {
    fused: Matrix,
    features: Matrix,
}

fn encode(repr: &LayerwiseRepr, params: &ModelParams, cfg: &ModelConfig) -> Result<Encoded> {
    if repr.num_layers() != cfg.dims.num_layers || repr.dim() != cfg.dims.dim {
        return Err(Error::DimensionMismatch(format!(
            "representation {} is {}x{}, model expects L={} D={}",
            repr.utterance_id(),
            repr.num_layers(),
            repr.dim(),
            cfg.dims.num_layers,
            cfg.dims.dim
        )));
    }
    let fused = match cfg.repr_source {
        ReprSource::WeightedSum => ops::weighted_sum(&params.layer_logits, repr)?,
        ReprSource::LastLayer => ops::select_last_layer(repr),
    };
    let features = match &params.adapter {
        Some(a) => ops::apply_adapter(&fused, a)?,
        None => fused.clone(),
    };
    Ok(Encoded { fused, features })
}

/// Distance and head for one direction of the co-attention.
struct Branch {
    own_mean: Vec<f64>,
    aligned_mean: Vec<f64>,
    distance: Vec<f64>,
    head: HeadTrace,
}

fn branch(own: &Matrix, aligned: &Matrix, params: &ModelParams) -> Result<Branch> {
    let own_mean = ops::mean_pool(own)?;
    let aligned_mean = ops::mean_pool(aligned)?;
    let distance = ops::per_dim_l1(&own_mean, &aligned_mean)?;
    let head = ops::head_forward(&distance, params)?;
    Ok(Branch {
        own_mean,
        aligned_mean,
        distance,
        head,
    })
}

struct Trace {
    test: Encoded,
    reference: Encoded,
    /// Reference aligned to test frames.
    ref_on_test: Attended,
    /// Test aligned to reference frames.
    test_on_ref: Attended,
    test_branch: Branch,
    ref_branch: Branch,
}

fn run(
    test: &LayerwiseRepr,
    reference: &LayerwiseRepr,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Trace> {
    params.check_compatible(cfg)?;
    let test = encode(test, params, cfg)?;
    let reference = encode(reference, params, cfg)?;
    ops::check_pair(&test.features, &reference.features)?;
    let ref_on_test = ops::attend(&test.features, &reference.features);
    let test_on_ref = ops::attend(&reference.features, &test.features);
    let test_branch = branch(&test.features, &ref_on_test.values, params)?;
    let ref_branch = branch(&reference.features, &test_on_ref.values, params)?;
    Ok(Trace {
        test,
        reference,
        ref_on_test,
        test_on_ref,
        test_branch,
        ref_branch,
    })
}

fn output(trace: &Trace, mode: Mode) -> ScoreOutput {
    let t = &trace.test_branch.head.logits;
    let r = &trace.ref_branch.head.logits;
    match mode {
        Mode::Regression => ScoreOutput::Regression {
            test_branch: t[0],
            ref_branch: r[0],
            score: (t[0] + r[0]) / 2.0,
        },
        Mode::Classification => {
            let pt = softmax(t);
            let pr = softmax(r);
            let probabilities: Vec<f64> = pt.iter().zip(&pr).map(|(a, b)| (a + b) / 2.0).collect();
            let argmax = probabilities.iter().enumerate().fold(0, |best, (k, &p)| {
                if p > probabilities[best] {
                    k
                } else {
                    best
                }
            });
            ScoreOutput::Classification {
                test_branch: pt,
                ref_branch: pr,
                probabilities,
                score: (argmax + 1) as f64,
            }
        }
    }
}

/// Scores a (test, reference) pair.
pub fn forward(
    test: &LayerwiseRepr,
    reference: &LayerwiseRepr,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ScoreOutput> {
    Ok(output(&run(test, reference, params, cfg)?, cfg.mode))
}

/// Smallest distance of any ReLU pre-activation or mean difference from
/// its kink at zero. Finite differences are only meaningful when this is
/// well above the step size.
pub fn kink_margin(
    test: &LayerwiseRepr,
    reference: &LayerwiseRepr,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let trace = run(test, reference, params, cfg)?;
    let margin = [&trace.test_branch, &trace.ref_branch]
        .into_iter()
        .flat_map(|b| {
            let diffs = b.own_mean.iter().zip(&b.aligned_mean).map(|(u, v)| u - v);
            b.head.pre_activation.iter().copied().chain(diffs)
        })
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min);
    Ok(margin)
}

fn class_index(label: f64) -> Result<usize> {
    if label.fract() == 0.0 && (1.0..=NUM_CLASSES as f64).contains(&label) {
        Ok(label as usize - 1)
    } else {
        Err(Error::LabelDomain(label))
    }
}

/// `-ln softmax(z)[c]`, computed through log-sum-exp.
fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// Training loss for one pair and its exact gradient.
///
/// Regression: `(score - label)^2` on the averaged score.
/// Classification: mean of the two branch cross-entropies against class
/// `label - 1`.
pub fn loss_and_grad(
    test: &LayerwiseRepr,
    reference: &LayerwiseRepr,
    label: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, Gradients)> {
    if !label.is_finite() {
        return Err(Error::LabelDomain(label));
    }
    let class = match cfg.mode {
        Mode::Classification => Some(class_index(label)?),
        Mode::Regression => None,
    };
    let trace = run(test, reference, params, cfg)?;
    let zt = &trace.test_branch.head.logits;
    let zr = &trace.ref_branch.head.logits;

    let (loss, dzt, dzr) = match class {
        None => {
            let score = (zt[0] + zr[0]) / 2.0;
            let diff = score - label;
            let g = diff; // d/dscore (diff^2) = 2 diff, times 1/2 per branch
            (diff * diff, vec![g], vec![g])
        }
        Some(c) => {
            let loss = 0.5 * (cross_entropy(zt, c) + cross_entropy(zr, c));
            let grad = |z: &[f64]| {
                let mut p = softmax(z);
                p[c] -= 1.0;
                p.iter_mut().for_each(|v| *v *= 0.5);
                p
            };
            (loss, grad(zt), grad(zr))
        }
    };

    let mut grads = params.zeros_like();
    let d_test = branch_backward(&trace.test_branch, &dzt, params, &mut grads);
    let d_ref = branch_backward(&trace.ref_branch, &dzr, params, &mut grads);

    let t1 = trace.test.features.rows();
    let t2 = trace.reference.features.rows();
    let width = trace.test.features.cols();
    let mut g_test = Matrix::zeros(t1, width);
    let mut g_ref = Matrix::zeros(t2, width);
    let mut g_ref_on_test = Matrix::zeros(t1, width);
    let mut g_test_on_ref = Matrix::zeros(t2, width);
    spread_mean(&mut g_test, &d_test.own);
    spread_mean(&mut g_ref_on_test, &d_test.aligned);
    spread_mean(&mut g_ref, &d_ref.own);
    spread_mean(&mut g_test_on_ref, &d_ref.aligned);

    ops::attend_backward(
        &trace.test.features,
        &trace.reference.features,
        &trace.ref_on_test,
        &g_ref_on_test,
        &mut g_test,
        &mut g_ref,
    );
    ops::attend_backward(
        &trace.reference.features,
        &trace.test.features,
        &trace.test_on_ref,
        &g_test_on_ref,
        &mut g_ref,
        &mut g_test,
    );

    encode_backward(test, &trace.test, &g_test, params, cfg, &mut grads);
    encode_backward(reference, &trace.reference, &g_ref, params, cfg, &mut grads);

    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok((loss, grads))
}

struct MeanGrads {
    own: Vec<f64>,
    aligned: Vec<f64>,
}

fn branch_backward(
    b: &Branch,
    d_logits: &[f64],
    params: &ModelParams,
    grads: &mut Gradients,
) -> MeanGrads {
    let d_dist = ops::head_backward(&b.distance, &b.head, d_logits, params, grads);
    // |u - v| has subgradient 0 at u == v
    let own: Vec<f64> = d_dist
        .iter()
        .zip(b.own_mean.iter().zip(&b.aligned_mean))
        .map(|(g, (u, v))| {
            let diff: f64 = u - v;
            if diff > 0.0 {
                *g
            } else if diff < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect();
    let aligned = own.iter().map(|g| -g).collect();
    MeanGrads { own, aligned }
}

/// Adds the gradient of a time-mean to every frame.
fn spread_mean(dst: &mut Matrix, d_mean: &[f64]) {
    let scale = 1.0 / dst.rows() as f64;
    for t in 0..dst.rows() {
        crate::linalg::axpy(dst.row_mut(t), scale, d_mean);
    }
}

fn encode_backward(
    repr: &LayerwiseRepr,
    enc: &Encoded,
    d_features: &Matrix,
    params: &ModelParams,
    cfg: &ModelConfig,
    grads: &mut Gradients,
) {
    let d_fused = match (&params.adapter, &mut grads.adapter) {
        (Some(a), Some(ga)) => ops::adapter_backward(&enc.fused, d_features, a, ga),
        _ => d_features.clone(),
    };
    if cfg.repr_source == ReprSource::WeightedSum {
        ops::weighted_sum_backward(
            &params.layer_logits,
            repr,
            &d_fused,
            &mut grads.layer_logits,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_repr(rng: &mut ChaCha8Rng, l: usize, t: usize, d: usize) -> LayerwiseRepr {
        let data = (0..l * t * d)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        LayerwiseRepr::new("u", l, t, d, data).unwrap()
    }

    fn cfg(mode: Mode, adapter: bool) -> ModelConfig {
        ModelConfig::new(mode, ReprSource::WeightedSum, adapter, 2, 4).with_widths(3, 5)
    }

    #[test]
    fn identical_inputs_give_equal_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_repr(&mut rng, 2, 3, 4);
        for mode in [Mode::Regression, Mode::Classification] {
            let c = cfg(mode, true);
            let p = ModelParams::init(&c, 5);
            let trace = run(&x, &x, &p, &c).unwrap();
            // attention rows are stochastic but columns are not, so the
            // distance is only zero when every frame is the same
            assert_eq!(trace.test_branch.distance, trace.ref_branch.distance);
            match output(&trace, mode) {
                ScoreOutput::Regression {
                    test_branch,
                    ref_branch,
                    score,
                } => {
                    assert_eq!(test_branch, ref_branch);
                    assert_eq!(score, test_branch);
                }
                ScoreOutput::Classification {
                    test_branch,
                    ref_branch,
                    probabilities,
                    ..
                } => {
                    assert_eq!(test_branch, ref_branch);
                    assert_eq!(probabilities, test_branch);
                }
            }
        }
    }

    #[test]
    fn identical_single_frame_inputs_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let single = random_repr(&mut rng, 2, 1, 4);
        let c = cfg(Mode::Regression, true);
        let p = ModelParams::init(&c, 1);
        let trace = run(&single, &single, &p, &c).unwrap();
        assert!(trace.test_branch.distance.iter().all(|&v| v == 0.0));
        assert!(trace.ref_branch.distance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swap_gives_same_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_repr(&mut rng, 2, 3, 4);
        let b = random_repr(&mut rng, 2, 5, 4);
        let c = cfg(Mode::Regression, false);
        let p = ModelParams::init(&c, 9);
        let s1 = forward(&a, &b, &p, &c).unwrap().score();
        let s2 = forward(&b, &a, &p, &c).unwrap().score();
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn zero_loss_when_score_matches_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_repr(&mut rng, 2, 3, 4);
        let b = random_repr(&mut rng, 2, 2, 4);
        let c = cfg(Mode::Regression, false);
        let p = ModelParams::init(&c, 4);
        let s = forward(&a, &b, &p, &c).unwrap().score();
        let (loss, grads) = loss_and_grad(&a, &b, s, &p, &c).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_classification_loss_is_ln4() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_repr(&mut rng, 2, 3, 4);
        let b = random_repr(&mut rng, 2, 2, 4);
        let c = cfg(Mode::Classification, false);
        let p = ModelParams::zeros(&c);
        let (loss, _) = loss_and_grad(&a, &b, 3.0, &p, &c).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 5e-5);
    }

    #[test]
    fn classification_label_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_repr(&mut rng, 2, 3, 4);
        let c = cfg(Mode::Classification, false);
        let p = ModelParams::init(&c, 0);
        for bad in [0.0, 5.0, 2.5, f64::NAN] {
            assert!(matches!(
                loss_and_grad(&a, &a, bad, &p, &c),
                Err(Error::LabelDomain(_))
            ));
        }
    }

    #[test]
    fn classification_score_is_argmax_plus_one() {
        let c = ModelConfig::new(Mode::Classification, ReprSource::LastLayer, false, 1, 2)
            .with_widths(2, 2);
        let mut p = ModelParams::zeros(&c);
        p.head_out.bias = vec![0.0, 0.0, 5.0, 0.0];
        let x = LayerwiseRepr::new("x", 1, 1, 2, vec![0.1, 0.2]).unwrap();
        let out = forward(&x, &x, &p, &c).unwrap();
        assert_eq!(out.score(), 3.0);
        assert!(out.expected_score() > 2.9 && out.expected_score() < 3.0);
    }

    #[test]
    fn mismatched_repr_dims_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_repr(&mut rng, 2, 3, 8);
        let c = cfg(Mode::Regression, false);
        let p = ModelParams::init(&c, 0);
        assert!(matches!(
            forward(&a, &a, &p, &c),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
