//! Cross-entropy at both levels plus the three hierarchy-aware terms: JSD
//! consistency between the top-scoring coarse and fine feature rows, a
//! margin-based intra/inter-group KL term on the fine feature rows, and a
//! cross-entropy restricted to the true coarse group.
//!
//! Feature rows are turned into distributions with a softmax over their P
//! entries before any divergence is taken.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, SeedGradients};
use crate::numerics::{argmax, clamped_ln, jsd, kl_unchecked, softmax_backward, softmax_unchecked, Matrix};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce_coarse: f64,
    pub ce_fine: f64,
    pub con: f64,
    pub int: f64,
    pub gce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce_coarse: 1.0,
            ce_fine: 1.0,
            con: 1.0,
            int: 1.0,
            gce: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub enable_con: bool,
    pub enable_int: bool,
    pub enable_gce: bool,
    /// Margin of the inter-group hinge.
    pub alpha: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enable_con: true,
            enable_int: true,
            enable_gce: true,
            alpha: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    /// Cross-entropy only.
    pub fn ce_only() -> Self {
        Self {
            enable_con: false,
            enable_int: false,
            enable_gce: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        let w = &self.weights;
        for (name, v) in [
            ("ce_coarse", w.ce_coarse),
            ("ce_fine", w.ce_fine),
            ("con", w.con),
            ("int", w.int),
            ("gce", w.gce),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("loss weight `{name}` must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values; disabled terms read 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_coarse: f64,
    pub ce_fine: f64,
    pub con: f64,
    pub int: f64,
    pub gce: f64,
    pub total: f64,
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { what, index, len });
    }
    Ok(())
}

/// `−log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn ce_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    check_index("target class", target, logits.len())?;
    let top = argmax(logits);
    let m = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &l)| (l - m).exp())
        .sum();
    // (m − l_t) + ln(1 + Σ_{i≠top} e^{l_i − m}) keeps precision when the
    // target dominates.
    let loss = (m - logits[target]) + rest.ln_1p();
    let mut grad = softmax_unchecked(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Output of [`con_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConLoss {
    pub value: f64,
    pub coarse_row: usize,
    pub fine_row: usize,
    pub grad_coarse_row: Vec<f64>,
    pub grad_fine_row: Vec<f64>,
}

/// Jensen-Shannon divergence between the softmax-normalized feature rows of
/// the highest coarse logit and the highest fine logit. Row selection is
/// constant with respect to the gradient.
pub fn con_loss(f_c: &Matrix, f_f: &Matrix, o_c: &[f64], o_f: &[f64]) -> Result<ConLoss> {
    if f_c.cols() != f_f.cols() {
        return Err(Error::DimensionMismatch {
            context: "coarse/fine feature width",
            expected: f_c.cols(),
            got: f_f.cols(),
        });
    }
    if o_c.len() != f_c.rows() || o_f.len() != f_f.rows() {
        return Err(Error::DimensionMismatch {
            context: "logits vs feature rows",
            expected: f_c.rows() + f_f.rows(),
            got: o_c.len() + o_f.len(),
        });
    }
    if o_c.is_empty() || o_f.is_empty() {
        return Err(Error::Empty("logits"));
    }
    let (ci, fi) = (argmax(o_c), argmax(o_f));
    let p = softmax_unchecked(f_c.row(ci));
    let q = softmax_unchecked(f_f.row(fi));
    let value = jsd(&p, &q)?;
    // ∂JSD/∂p_i = ½ ln(p_i / m_i), likewise for q.
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let gp: Vec<f64> = p.iter().zip(&m).map(|(&a, &mi)| 0.5 * (clamped_ln(a) - clamped_ln(mi))).collect();
    let gq: Vec<f64> = q.iter().zip(&m).map(|(&b, &mi)| 0.5 * (clamped_ln(b) - clamped_ln(mi))).collect();
    Ok(ConLoss {
        value,
        coarse_row: ci,
        fine_row: fi,
        grad_coarse_row: softmax_backward(&p, &gp),
        grad_fine_row: softmax_backward(&q, &gq),
    })
}

/// Gradients of `KL(softmax(a) ‖ softmax(b))` w.r.t. the logits `a` and `b`,
/// given the two distributions and the divergence value.
fn kl_softmax_grads(p: &[f64], q: &[f64], kl: f64) -> (Vec<f64>, Vec<f64>) {
    let ga = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (clamped_ln(pi) - clamped_ln(qi) - kl))
        .collect();
    let gb = p.iter().zip(q).map(|(&pi, &qi)| qi - pi).collect();
    (ga, gb)
}

/// Intra/inter-group distance on fine feature rows:
/// Σ_{same group} KL(r* ‖ r_i) + Σ_{other groups} max(0, α − KL(r* ‖ r_j)),
/// where r* is the true class row. Returns the value and a gradient for
/// every row.
pub fn int_loss(f_f: &Matrix, true_fine: usize, taxonomy: &Taxonomy, alpha: f64) -> Result<(f64, Matrix)> {
    if f_f.rows() != taxonomy.n_fine() {
        return Err(Error::DimensionMismatch {
            context: "fine feature rows vs taxonomy",
            expected: taxonomy.n_fine(),
            got: f_f.rows(),
        });
    }
    let siblings = taxonomy.siblings_of(true_fine)?;
    let complement = taxonomy.complement_of(true_fine)?;
    let dists: Vec<Vec<f64>> = (0..f_f.rows()).map(|i| softmax_unchecked(f_f.row(i))).collect();
    let anchor = &dists[true_fine];
    let mut grad = Matrix::zeros(f_f.rows(), f_f.cols());
    let mut anchor_grad = vec![0.0; f_f.cols()];
    let mut value = 0.0;

    let mut accumulate = |j: usize, sign: f64, grad: &mut Matrix, kl: f64| {
        let (ga, gb) = kl_softmax_grads(anchor, &dists[j], kl);
        for (acc, g) in anchor_grad.iter_mut().zip(&ga) {
            *acc += sign * g;
        }
        for (acc, g) in grad.row_mut(j).iter_mut().zip(&gb) {
            *acc += sign * g;
        }
    };

    for &j in siblings.iter().filter(|&&j| j != true_fine) {
        let kl = kl_unchecked(anchor, &dists[j]);
        value += kl;
        accumulate(j, 1.0, &mut grad, kl);
    }
    for &j in &complement {
        let kl = kl_unchecked(anchor, &dists[j]);
        let slack = alpha - kl;
        if slack > 0.0 {
            value += slack;
            accumulate(j, -1.0, &mut grad, kl);
        }
    }
    for (acc, g) in grad.row_mut(true_fine).iter_mut().zip(&anchor_grad) {
        *acc += g;
    }
    Ok((value, grad))
}

/// Cross-entropy with the softmax restricted to the fine classes of the true
/// coarse group. The gradient is zero outside the group.
pub fn gce_loss(o_f: &[f64], true_fine: usize, taxonomy: &Taxonomy) -> Result<(f64, Vec<f64>)> {
    if o_f.len() != taxonomy.n_fine() {
        return Err(Error::DimensionMismatch {
            context: "fine logits vs taxonomy",
            expected: taxonomy.n_fine(),
            got: o_f.len(),
        });
    }
    let group = taxonomy.siblings_of(true_fine)?;
    let sub: Vec<f64> = group.iter().map(|&k| o_f[k]).collect();
    let local = group.iter().position(|&k| k == true_fine).expect("class is in its own group");
    let (loss, sub_grad) = ce_loss(&sub, local)?;
    let mut grad = vec![0.0; o_f.len()];
    for (&k, g) in group.iter().zip(sub_grad) {
        grad[k] = g;
    }
    Ok((loss, grad))
}

/// Evaluates every enabled term on a forward trace and routes the weighted
/// gradients to the trace outputs.
pub fn total_loss(
    trace: &ForwardTrace,
    coarse_label: usize,
    fine_label: usize,
    taxonomy: &Taxonomy,
    config: &LossConfig,
) -> Result<(LossBreakdown, SeedGradients)> {
    if !taxonomy.is_consistent(coarse_label, fine_label) {
        return Err(Error::InvalidBag(format!(
            "labels (coarse {coarse_label}, fine {fine_label}) disagree with the taxonomy"
        )));
    }
    let w = &config.weights;
    let mut seeds = SeedGradients {
        o_c: vec![0.0; trace.o_c.len()],
        o_f: vec![0.0; trace.o_f.len()],
        f_c: Matrix::zeros(trace.f_c.rows(), trace.f_c.cols()),
        f_f: Matrix::zeros(trace.f_f.rows(), trace.f_f.cols()),
    };
    let mut out = LossBreakdown::default();
    let add = |dst: &mut [f64], src: &[f64], scale: f64| {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
    };

    let (ce_c, g) = ce_loss(&trace.o_c, coarse_label)?;
    out.ce_coarse = ce_c;
    add(&mut seeds.o_c, &g, w.ce_coarse);
    let (ce_f, g) = ce_loss(&trace.o_f, fine_label)?;
    out.ce_fine = ce_f;
    add(&mut seeds.o_f, &g, w.ce_fine);
    out.total = w.ce_coarse * ce_c + w.ce_fine * ce_f;

    if config.enable_con {
        let con = con_loss(&trace.f_c, &trace.f_f, &trace.o_c, &trace.o_f)?;
        out.con = con.value;
        out.total += w.con * con.value;
        add(seeds.f_c.row_mut(con.coarse_row), &con.grad_coarse_row, w.con);
        add(seeds.f_f.row_mut(con.fine_row), &con.grad_fine_row, w.con);
    }
    if config.enable_int {
        let (value, g) = int_loss(&trace.f_f, fine_label, taxonomy, config.alpha)?;
        out.int = value;
        out.total += w.int * value;
        add(seeds.f_f.as_mut_slice(), g.as_slice(), w.int);
    }
    if config.enable_gce {
        let (value, g) = gce_loss(&trace.o_f, fine_label, taxonomy)?;
        out.gce = value;
        out.total += w.gce * value;
        add(&mut seeds.o_f, &g, w.gce);
    }
    Ok((out, seeds))
}
