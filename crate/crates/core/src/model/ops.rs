//! Building blocks of the forward pass and their backward rules.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax, softmax_backward, Matrix};
use crate::model::{Linear, Mode, ModelParams};
use crate::repr::LayerwiseRepr;

/// Layer weights as the normalized exponential of the logits.
pub fn layer_weights(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// Convex combination of all layers, weights `softmax(layer_logits)`.
pub fn weighted_sum(layer_logits: &[f64], repr: &LayerwiseRepr) -> Result<Matrix> {
    if layer_logits.len() != repr.num_layers() {
        return Err(Error::DimensionMismatch(format!(
            "{} layer logits for a {}-layer representation",
            layer_logits.len(),
            repr.num_layers()
        )));
    }
    let weights = layer_weights(layer_logits);
    let mut out = Matrix::zeros(repr.num_frames(), repr.dim());
    for (layer, &w) in weights.iter().enumerate() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(repr.layer(layer)) {
            *o += w * f64::from(v);
        }
    }
    Ok(out)
}

pub fn select_last_layer(repr: &LayerwiseRepr) -> Matrix {
    repr.layer_matrix(repr.num_layers() - 1)
}

/// Per-frame affine map, no activation.
pub fn apply_adapter(x: &Matrix, adapter: &Linear) -> Result<Matrix> {
    if x.cols() != adapter.inputs() {
        return Err(Error::DimensionMismatch(format!(
            "adapter expects {} inputs, frames have {}",
            adapter.inputs(),
            x.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), adapter.outputs());
    for t in 0..x.rows() {
        out.row_mut(t).copy_from_slice(&adapter.apply(x.row(t)));
    }
    Ok(out)
}

/// Output of single-query-sequence attention plus its weights.
#[derive(Debug, Clone)]
pub(crate) struct Attended {
    pub weights: Matrix,
    pub values: Matrix,
}

/// `softmax(q kᵀ / sqrt(d)) k`, with keys doubling as values.
pub(crate) fn attend(query: &Matrix, keys: &Matrix) -> Attended {
    let scale = 1.0 / (query.cols() as f64).sqrt();
    let mut weights = Matrix::zeros(query.rows(), keys.rows());
    let mut values = Matrix::zeros(query.rows(), keys.cols());
    for i in 0..query.rows() {
        let scores: Vec<f64> = keys
            .row_iter()
            .map(|k| dot(query.row(i), k) * scale)
            .collect();
        let a = softmax(&scores);
        for (j, &aij) in a.iter().enumerate() {
            axpy(values.row_mut(i), aij, keys.row(j));
        }
        weights.row_mut(i).copy_from_slice(&a);
    }
    Attended { weights, values }
}

/// Gradients of [`attend`] w.r.t. query and keys, accumulated into
/// `d_query` and `d_keys`.
pub(crate) fn attend_backward(
    query: &Matrix,
    keys: &Matrix,
    att: &Attended,
    d_values: &Matrix,
    d_query: &mut Matrix,
    d_keys: &mut Matrix,
) {
    let scale = 1.0 / (query.cols() as f64).sqrt();
    for i in 0..query.rows() {
        let a = att.weights.row(i);
        let dv = d_values.row(i);
        let da: Vec<f64> = keys.row_iter().map(|k| dot(dv, k)).collect();
        for (j, &aij) in a.iter().enumerate() {
            axpy(d_keys.row_mut(j), aij, dv);
        }
        let ds = softmax_backward(a, &da);
        for (j, &dsij) in ds.iter().enumerate() {
            axpy(d_query.row_mut(i), scale * dsij, keys.row(j));
            axpy(d_keys.row_mut(j), scale * dsij, query.row(i));
        }
    }
}

/// Bidirectional alignment: returns `(r_r_hat, r_t_hat)` where `r_r_hat`
/// has one row per test frame and `r_t_hat` one row per reference frame.
pub fn co_attention(r_t: &Matrix, r_r: &Matrix) -> Result<(Matrix, Matrix)> {
    check_pair(r_t, r_r)?;
    Ok((attend(r_t, r_r).values, attend(r_r, r_t).values))
}

/// Attention matrix of `query` over `keys`, one row per query frame.
pub fn attention_weights(query: &Matrix, keys: &Matrix) -> Result<Matrix> {
    check_pair(query, keys)?;
    Ok(attend(query, keys).weights)
}

pub(crate) fn check_pair(r_t: &Matrix, r_r: &Matrix) -> Result<()> {
    if r_t.rows() == 0 || r_r.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    if r_t.cols() != r_r.cols() {
        return Err(Error::DimensionMismatch(format!(
            "co-attention feature dims {} vs {}",
            r_t.cols(),
            r_r.cols()
        )));
    }
    Ok(())
}

pub fn mean_pool(x: &Matrix) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut out = vec![0.0; x.cols()];
    for row in x.row_iter() {
        axpy(&mut out, 1.0, row);
    }
    let n = x.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Element-wise `|a - b|`.
pub fn per_dim_l1(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
}

/// Per-branch prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchOutput {
    Score(f64),
    Probabilities(Vec<f64>),
}

/// Intermediates of the prediction head kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadTrace {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn head_forward(d: &[f64], params: &ModelParams) -> Result<HeadTrace> {
    if d.len() != params.head_hidden.inputs() {
        return Err(Error::DimensionMismatch(format!(
            "head expects {} inputs, distance has {}",
            params.head_hidden.inputs(),
            d.len()
        )));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance vector".into()));
    }
    let pre_activation = params.head_hidden.apply(d);
    let hidden: Vec<f64> = pre_activation.iter().map(|&h| h.max(0.0)).collect();
    let logits = params.head_out.apply(&hidden);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction head output".into()));
    }
    Ok(HeadTrace {
        pre_activation,
        hidden,
        logits,
    })
}

pub(crate) fn head_output(trace: &HeadTrace, mode: Mode) -> BranchOutput {
    match mode {
        Mode::Regression => BranchOutput::Score(trace.logits[0]),
        Mode::Classification => BranchOutput::Probabilities(softmax(&trace.logits)),
    }
}

/// `lin2(relu(lin1(d)))` followed by identity (regression) or softmax
/// (classification).
pub fn predict_head(d: &[f64], params: &ModelParams, mode: Mode) -> Result<BranchOutput> {
    Ok(head_output(&head_forward(d, params)?, mode))
}

/// Backward through the head given the gradient at its logits. Accumulates
/// parameter gradients into `grads` and returns the gradient at `d`.
pub(crate) fn head_backward(
    d: &[f64],
    trace: &HeadTrace,
    d_logits: &[f64],
    params: &ModelParams,
    grads: &mut ModelParams,
) -> Vec<f64> {
    let out = &params.head_out;
    let g_out = &mut grads.head_out;
    let mut d_hidden = vec![0.0; trace.hidden.len()];
    for (k, &dz) in d_logits.iter().enumerate() {
        axpy(g_out.weight.row_mut(k), dz, &trace.hidden);
        g_out.bias[k] += dz;
        axpy(&mut d_hidden, dz, out.weight.row(k));
    }
    // relu subgradient at exactly 0 is 0
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.pre_activation)
        .map(|(&g, &h)| if h > 0.0 { g } else { 0.0 })
        .collect();
    let hid = &params.head_hidden;
    let g_hid = &mut grads.head_hidden;
    let mut d_input = vec![0.0; d.len()];
    for (j, &dh) in d_pre.iter().enumerate() {
        if dh == 0.0 {
            continue;
        }
        axpy(g_hid.weight.row_mut(j), dh, d);
        g_hid.bias[j] += dh;
        axpy(&mut d_input, dh, hid.weight.row(j));
    }
    d_input
}

/// Backward of the adapter: accumulates its gradients and returns the
/// gradient at its input.
pub(crate) fn adapter_backward(
    x: &Matrix,
    d_out: &Matrix,
    adapter: &Linear,
    grad: &mut Linear,
) -> Matrix {
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        for (o, &g) in d_out.row(t).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(grad.weight.row_mut(o), g, x.row(t));
            grad.bias[o] += g;
            axpy(d_x.row_mut(t), g, adapter.weight.row(o));
        }
    }
    d_x
}

/// Gradient of the layer logits given the gradient at the fused sequence.
pub(crate) fn weighted_sum_backward(
    layer_logits: &[f64],
    repr: &LayerwiseRepr,
    d_fused: &Matrix,
    d_logits: &mut [f64],
) {
    let weights = layer_weights(layer_logits);
    let d_weights: Vec<f64> = (0..repr.num_layers())
        .map(|l| {
            repr.layer(l)
                .iter()
                .zip(d_fused.as_slice())
                .map(|(&v, g)| f64::from(v) * g)
                .sum()
        })
        .collect();
    for (dst, g) in d_logits
        .iter_mut()
        .zip(softmax_backward(&weights, &d_weights))
    {
        *dst += g;
    }
}
