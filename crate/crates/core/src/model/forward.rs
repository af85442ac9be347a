use crate::datagen::Bag;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_unchecked, Matrix};

use super::{Aggregator, IntegrationMode, ModelParams};

/// Output of the pooling stage together with what its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    /// Pre-activation patch projections, N_p × H.
    pub pre: Matrix,
    /// relu(pre), N_p × H.
    pub hidden: Matrix,
    /// tanh branch of the gated attention, N_p × A. Empty for max/mean.
    pub attn_tanh: Matrix,
    /// sigmoid branch of the gated attention, N_p × A. Empty for max/mean.
    pub attn_gate: Matrix,
    pub attn_logits: Vec<f64>,
    /// Pooling weights over patches. For max pooling, the share of hidden
    /// coordinates each patch wins.
    pub attn_weights: Vec<f64>,
    /// Winning patch per hidden coordinate (max pooling only).
    pub max_index: Vec<usize>,
    pub slide: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Matrix,
    pub pooled: Pooled,
    pub v_c: Vec<f64>,
    pub v_f: Vec<f64>,
    pub v_c_aug: Vec<f64>,
    pub v_f_aug: Vec<f64>,
    /// N_c × P
    pub f_c: Matrix,
    /// N_f × P
    pub f_f: Matrix,
    pub o_c: Vec<f64>,
    pub o_f: Vec<f64>,
}

/// Values substituted for the stop-gradient inputs of the integration step.
///
/// Holding these fixed while the parameters vary gives a function whose
/// ordinary derivative equals the gated gradient, which is what a
/// finite-difference check needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub fine_for_coarse: Vec<f64>,
    pub coarse_for_fine: Vec<f64>,
}

impl Detached {
    pub fn from_trace(trace: &ForwardTrace) -> Self {
        Self {
            fine_for_coarse: trace.v_f.clone(),
            coarse_for_fine: trace.v_c.clone(),
        }
    }
}

pub(crate) fn bag_matrix(bag: &Bag) -> Matrix {
    let data = bag.features().iter().map(|&x| x as f64).collect();
    Matrix::from_vec(bag.n_patches(), bag.dim(), data).expect("bag shape is consistent")
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Projects each patch to H dims with relu, then pools.
///
/// Attention pooling uses the gated form: logit_k = wᵀ(tanh(V h_k) ⊙ σ(U h_k)),
/// weights are a softmax over patches, and the slide vector is Σ_k a_k h_k.
pub fn attention_pool(features: &Matrix, params: &ModelParams) -> Result<Pooled> {
    let cfg = &params.config;
    let n = features.rows();
    if n == 0 {
        return Err(Error::Empty("bag"));
    }
    if features.cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            context: "patch features",
            expected: cfg.input_dim,
            got: features.cols(),
        });
    }
    let h_dim = cfg.hidden_dim;
    let mut pre = Matrix::zeros(n, h_dim);
    let mut hidden = Matrix::zeros(n, h_dim);
    for k in 0..n {
        params
            .patch_w
            .affine_into(features.row(k), params.patch_b.as_slice(), pre.row_mut(k));
        for (h, &z) in hidden.row_mut(k).iter_mut().zip(pre.row(k)) {
            *h = z.max(0.0);
        }
    }

    let mut slide = vec![0.0; h_dim];
    let (attn_tanh, attn_gate, attn_logits, attn_weights, max_index) = match cfg.aggregator {
        Aggregator::Attention => {
            let a_dim = cfg.attn_dim;
            let mut t = Matrix::zeros(n, a_dim);
            let mut g = Matrix::zeros(n, a_dim);
            let mut logits = vec![0.0; n];
            for k in 0..n {
                params
                    .attn_v
                    .affine_into(hidden.row(k), params.attn_v_b.as_slice(), t.row_mut(k));
                params
                    .attn_u
                    .affine_into(hidden.row(k), params.attn_u_b.as_slice(), g.row_mut(k));
                t.row_mut(k).iter_mut().for_each(|x| *x = x.tanh());
                g.row_mut(k).iter_mut().for_each(|x| *x = sigmoid(*x));
                logits[k] = params
                    .attn_w
                    .as_slice()
                    .iter()
                    .zip(t.row(k).iter().zip(g.row(k)))
                    .map(|(w, (a, b))| w * a * b)
                    .sum();
            }
            let weights = softmax_unchecked(&logits);
            for (k, &a) in weights.iter().enumerate() {
                for (s, &h) in slide.iter_mut().zip(hidden.row(k)) {
                    *s += a * h;
                }
            }
            (t, g, logits, weights, Vec::new())
        }
        Aggregator::Mean => {
            let w = 1.0 / n as f64;
            for k in 0..n {
                for (s, &h) in slide.iter_mut().zip(hidden.row(k)) {
                    *s += w * h;
                }
            }
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0), Vec::new(), vec![w; n], Vec::new())
        }
        Aggregator::Max => {
            let mut index = vec![0usize; h_dim];
            for j in 0..h_dim {
                let mut best = 0;
                for k in 1..n {
                    if hidden.get(k, j) > hidden.get(best, j) {
                        best = k;
                    }
                }
                index[j] = best;
                slide[j] = hidden.get(best, j);
            }
            let mut share = vec![0.0; n];
            for &k in &index {
                share[k] += 1.0 / h_dim as f64;
            }
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0), Vec::new(), share, index)
        }
    };

    Ok(Pooled {
        pre,
        hidden,
        attn_tanh,
        attn_gate,
        attn_logits,
        attn_weights,
        max_index,
        slide,
    })
}

fn integrate_with(
    v_c: &[f64],
    v_f: &[f64],
    mode: IntegrationMode,
    gated_fine: &[f64],
    gated_coarse: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let concat = |a: &[f64], b: &[f64]| [a, b].concat();
    let c = if mode.augments_coarse() {
        concat(v_c, gated_fine)
    } else {
        v_c.to_vec()
    };
    let f = if mode.augments_fine() {
        concat(v_f, gated_coarse)
    } else {
        v_f.to_vec()
    };
    (c, f)
}

/// Cross-level integration. Augmented vectors are `[own half, other half]`;
/// the appended half is behind a stop-gradient, which only the backward pass
/// observes.
pub fn integrate(v_c: &[f64], v_f: &[f64], mode: IntegrationMode) -> Result<(Vec<f64>, Vec<f64>)> {
    if v_c.len() != v_f.len() {
        return Err(Error::DimensionMismatch {
            context: "coarse/fine halves",
            expected: v_c.len(),
            got: v_f.len(),
        });
    }
    Ok(integrate_with(v_c, v_f, mode, v_f, v_c))
}

fn project_level(w: &Matrix, b: &Matrix, cls_w: &Matrix, cls_b: &Matrix, input: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    if input.len() != w.cols() {
        return Err(Error::DimensionMismatch {
            context: "projection head input",
            expected: w.cols(),
            got: input.len(),
        });
    }
    let (classes, p) = (cls_w.rows(), cls_w.cols());
    let mut feats = Matrix::zeros(classes, p);
    w.affine_into(input, b.as_slice(), feats.as_mut_slice());
    let logits = (0..classes)
        .map(|i| dot(cls_w.row(i), feats.row(i)) + cls_b.as_slice()[i])
        .collect();
    Ok((feats, logits))
}

/// Per-class projection followed by per-class readout: class i's logit reads
/// only row i of its level's feature matrix.
pub fn project_and_classify(
    v_c_aug: &[f64],
    v_f_aug: &[f64],
    params: &ModelParams,
) -> Result<(Matrix, Matrix, Vec<f64>, Vec<f64>)> {
    let (f_c, o_c) = project_level(
        &params.coarse_proj_w,
        &params.coarse_proj_b,
        &params.coarse_cls_w,
        &params.coarse_cls_b,
        v_c_aug,
    )?;
    let (f_f, o_f) = project_level(
        &params.fine_proj_w,
        &params.fine_proj_b,
        &params.fine_cls_w,
        &params.fine_cls_b,
        v_f_aug,
    )?;
    Ok((f_c, f_f, o_c, o_f))
}

fn forward_impl(bag: &Bag, params: &ModelParams, detached: Option<&Detached>) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if bag.dim() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            context: "bag feature dim",
            expected: cfg.input_dim,
            got: bag.dim(),
        });
    }
    let inputs = bag_matrix(bag);
    let pooled = attention_pool(&inputs, params)?;
    let s = cfg.split_dim;
    let v_c = pooled.slide[..s].to_vec();
    let v_f = pooled.slide[s..].to_vec();
    let (v_c_aug, v_f_aug) = match detached {
        None => integrate_with(&v_c, &v_f, cfg.integration, &v_f, &v_c),
        Some(d) => {
            if d.fine_for_coarse.len() != s || d.coarse_for_fine.len() != s {
                return Err(Error::DimensionMismatch {
                    context: "detached halves",
                    expected: s,
                    got: d.fine_for_coarse.len().min(d.coarse_for_fine.len()),
                });
            }
            integrate_with(&v_c, &v_f, cfg.integration, &d.fine_for_coarse, &d.coarse_for_fine)
        }
    };
    let (f_c, f_f, o_c, o_f) = project_and_classify(&v_c_aug, &v_f_aug, params)?;
    Ok(ForwardTrace {
        inputs,
        pooled,
        v_c,
        v_f,
        v_c_aug,
        v_f_aug,
        f_c,
        f_f,
        o_c,
        o_f,
    })
}

pub fn forward(bag: &Bag, params: &ModelParams) -> Result<ForwardTrace> {
    forward_impl(bag, params, None)
}

/// Forward pass with the stop-gradient slots pinned to `detached`.
pub fn forward_detached(bag: &Bag, params: &ModelParams, detached: &Detached) -> Result<ForwardTrace> {
    forward_impl(bag, params, Some(detached))
}
