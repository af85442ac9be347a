use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, softmax_backward, Matrix};

use super::{Aggregator, ForwardTrace, ModelConfig, ModelParams};

/// Upstream gradients entering the network's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedGradients {
    pub o_c: Vec<f64>,
    pub o_f: Vec<f64>,
    pub f_c: Matrix,
    pub f_f: Matrix,
}

impl SeedGradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            o_c: vec![0.0; config.n_coarse],
            o_f: vec![0.0; config.n_fine],
            f_c: Matrix::zeros(config.n_coarse, config.proj_dim),
            f_f: Matrix::zeros(config.n_fine, config.proj_dim),
        }
    }

    pub fn add_assign(&mut self, other: &SeedGradients) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.o_c, &other.o_c);
        add(&mut self.o_f, &other.o_f);
        add(self.f_c.as_mut_slice(), other.f_c.as_slice());
        add(self.f_f.as_mut_slice(), other.f_f.as_slice());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Block gradient flow through the appended half of each augmented
    /// vector. Turning this off gives plain (ungated) concatenation.
    pub stop_gradient: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            stop_gradient: true,
        }
    }
}

/// Parameter gradients plus the gradients at the main intermediate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    pub v_c_aug: Vec<f64>,
    pub v_f_aug: Vec<f64>,
    pub v_c: Vec<f64>,
    pub v_f: Vec<f64>,
    pub slide: Vec<f64>,
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

fn check_seeds(seeds: &SeedGradients, trace: &ForwardTrace) -> Result<()> {
    check_len("seed o_c", trace.o_c.len(), seeds.o_c.len())?;
    check_len("seed o_f", trace.o_f.len(), seeds.o_f.len())?;
    check_len("seed f_c", trace.f_c.len(), seeds.f_c.len())?;
    check_len("seed f_f", trace.f_f.len(), seeds.f_f.len())?;
    check_len("seed f_c rows", trace.f_c.rows(), seeds.f_c.rows())?;
    check_len("seed f_f rows", trace.f_f.rows(), seeds.f_f.rows())?;
    ensure_finite(&seeds.o_c, "seed o_c")?;
    ensure_finite(&seeds.o_f, "seed o_f")?;
    ensure_finite(seeds.f_c.as_slice(), "seed f_c")?;
    ensure_finite(seeds.f_f.as_slice(), "seed f_f")?;
    Ok(())
}

/// Reverse pass through one level's readout and projection head; returns the
/// gradient at the head input.
#[allow(clippy::too_many_arguments)]
fn head_backward(
    d_logits: &[f64],
    d_feats_seed: &Matrix,
    feats: &Matrix,
    input: &[f64],
    proj_w: &Matrix,
    cls_w: &Matrix,
    g_proj_w: &mut Matrix,
    g_proj_b: &mut Matrix,
    g_cls_w: &mut Matrix,
    g_cls_b: &mut Matrix,
) -> Vec<f64> {
    let mut d_feats = d_feats_seed.clone();
    for (i, &d) in d_logits.iter().enumerate() {
        g_cls_b.as_mut_slice()[i] += d;
        if d != 0.0 {
            for (g, &f) in g_cls_w.row_mut(i).iter_mut().zip(feats.row(i)) {
                *g += d * f;
            }
            for (g, &c) in d_feats.row_mut(i).iter_mut().zip(cls_w.row(i)) {
                *g += d * c;
            }
        }
    }
    let d_flat = d_feats.as_slice();
    g_proj_w.add_outer(d_flat, input);
    for (g, &d) in g_proj_b.as_mut_slice().iter_mut().zip(d_flat) {
        *g += d;
    }
    let mut d_input = vec![0.0; input.len()];
    proj_w.add_transpose_mul(d_flat, &mut d_input);
    d_input
}

pub fn backward(trace: &ForwardTrace, seeds: &SeedGradients, params: &ModelParams) -> Result<Gradients> {
    backward_with(trace, seeds, params, BackwardOptions::default())
}

pub fn backward_with(
    trace: &ForwardTrace,
    seeds: &SeedGradients,
    params: &ModelParams,
    options: BackwardOptions,
) -> Result<Gradients> {
    check_seeds(seeds, trace)?;
    let cfg = &params.config;
    check_len("trace coarse head input", cfg.coarse_head_in(), trace.v_c_aug.len())?;
    check_len("trace fine head input", cfg.fine_head_in(), trace.v_f_aug.len())?;
    check_len("trace input dim", cfg.input_dim, trace.inputs.cols())?;
    let s = cfg.split_dim;
    let mut g = ModelParams::zeros(cfg);

    let d_vc_aug = head_backward(
        &seeds.o_c,
        &seeds.f_c,
        &trace.f_c,
        &trace.v_c_aug,
        &params.coarse_proj_w,
        &params.coarse_cls_w,
        &mut g.coarse_proj_w,
        &mut g.coarse_proj_b,
        &mut g.coarse_cls_w,
        &mut g.coarse_cls_b,
    );
    let d_vf_aug = head_backward(
        &seeds.o_f,
        &seeds.f_f,
        &trace.f_f,
        &trace.v_f_aug,
        &params.fine_proj_w,
        &params.fine_cls_w,
        &mut g.fine_proj_w,
        &mut g.fine_proj_b,
        &mut g.fine_cls_w,
        &mut g.fine_cls_b,
    );

    // Integration: each branch owns its first S coordinates; the appended
    // half flows back only when the gate is open.
    let mut d_vc = d_vc_aug[..s].to_vec();
    let mut d_vf = d_vf_aug[..s].to_vec();
    if !options.stop_gradient {
        if cfg.integration.augments_coarse() {
            d_vf.iter_mut().zip(&d_vc_aug[s..]).for_each(|(a, b)| *a += b);
        }
        if cfg.integration.augments_fine() {
            d_vc.iter_mut().zip(&d_vf_aug[s..]).for_each(|(a, b)| *a += b);
        }
    }
    let d_slide = [d_vc.as_slice(), d_vf.as_slice()].concat();

    let pooled = &trace.pooled;
    let n = pooled.hidden.rows();
    let mut d_hidden = Matrix::zeros(n, cfg.hidden_dim);
    match cfg.aggregator {
        Aggregator::Attention => {
            let mut d_weights = vec![0.0; n];
            for k in 0..n {
                let a = pooled.attn_weights[k];
                for ((dh, &ds), &h) in d_hidden.row_mut(k).iter_mut().zip(&d_slide).zip(pooled.hidden.row(k)) {
                    *dh = a * ds;
                    d_weights[k] += ds * h;
                }
            }
            let d_logits = softmax_backward(&pooled.attn_weights, &d_weights);
            let a_dim = cfg.attn_dim;
            let mut d_sv = vec![0.0; a_dim];
            let mut d_su = vec![0.0; a_dim];
            for k in 0..n {
                let de = d_logits[k];
                let t = pooled.attn_tanh.row(k);
                let gate = pooled.attn_gate.row(k);
                let w = params.attn_w.as_slice();
                for a in 0..a_dim {
                    g.attn_w.as_mut_slice()[a] += de * t[a] * gate[a];
                    d_sv[a] = de * w[a] * gate[a] * (1.0 - t[a] * t[a]);
                    d_su[a] = de * w[a] * t[a] * gate[a] * (1.0 - gate[a]);
                }
                let h = pooled.hidden.row(k);
                g.attn_v.add_outer(&d_sv, h);
                g.attn_u.add_outer(&d_su, h);
                for a in 0..a_dim {
                    g.attn_v_b.as_mut_slice()[a] += d_sv[a];
                    g.attn_u_b.as_mut_slice()[a] += d_su[a];
                }
                let row = d_hidden.row_mut(k);
                params.attn_v.add_transpose_mul(&d_sv, row);
                params.attn_u.add_transpose_mul(&d_su, row);
            }
        }
        Aggregator::Mean => {
            let w = 1.0 / n as f64;
            for k in 0..n {
                for (dh, &ds) in d_hidden.row_mut(k).iter_mut().zip(&d_slide) {
                    *dh = w * ds;
                }
            }
        }
        Aggregator::Max => {
            for (j, &k) in pooled.max_index.iter().enumerate() {
                d_hidden.row_mut(k)[j] = d_slide[j];
            }
        }
    }

    let mut d_pre = vec![0.0; cfg.hidden_dim];
    for k in 0..n {
        for ((dz, &dh), &z) in d_pre.iter_mut().zip(d_hidden.row(k)).zip(pooled.pre.row(k)) {
            *dz = if z > 0.0 { dh } else { 0.0 };
        }
        g.patch_w.add_outer(&d_pre, trace.inputs.row(k));
        for (gb, &dz) in g.patch_b.as_mut_slice().iter_mut().zip(&d_pre) {
            *gb += dz;
        }
    }

    Ok(Gradients {
        params: g,
        v_c_aug: d_vc_aug,
        v_f_aug: d_vf_aug,
        v_c: d_vc,
        v_f: d_vf,
        slide: d_slide,
    })
}
