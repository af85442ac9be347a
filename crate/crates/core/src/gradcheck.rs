//! Finite-difference verification of the full loss gradient on tiny models.
//!
//! The stop-gradient inputs are frozen at their base-point values while
//! probing (see [`Detached`]), so the central difference sees the same
//! function the analytic pass differentiates. Points close to a
//! non-differentiable kink are rejected and resampled.

use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, Bag};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{total_loss, LossConfig};
use crate::model::{
    backward, forward, forward_detached, Aggregator, Detached, ForwardTrace, IntegrationMode, ModelConfig,
    ModelParams,
};
use crate::numerics::{finite_diff_grad, kl_div, softmax, FD_STEP};
use crate::taxonomy::Taxonomy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum distance from any tie or hinge kink for a sample to be accepted.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradcheckDims {
    pub input: usize,
    pub hidden: usize,
    pub split: usize,
    pub proj: usize,
    pub attn: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n_patches: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        Self {
            input: 8,
            hidden: 8,
            split: 4,
            proj: 4,
            attn: 4,
            n_coarse: 2,
            n_fine: 4,
            n_patches: 3,
        }
    }
}

impl GradcheckDims {
    /// Parses `D,H,S,P,A`; the class counts and bag size keep their defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("bad --dims `{s}`: {e}")))?;
        let [input, hidden, split, proj, attn] = parts[..] else {
            return Err(Error::InvalidConfig(format!(
                "--dims expects D,H,S,P,A (five integers), got `{s}`"
            )));
        };
        let dims = Self {
            input,
            hidden,
            split,
            proj,
            attn,
            ..Self::default()
        };
        dims.model_config(IntegrationMode::Bidirectional, Aggregator::Attention)?;
        Ok(dims)
    }

    /// Fine classes are dealt into contiguous, near-equal coarse groups.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        if self.n_coarse == 0 || self.n_fine < self.n_coarse {
            return Err(Error::InvalidConfig(format!(
                "need 1 ≤ n_coarse ({}) ≤ n_fine ({})",
                self.n_coarse, self.n_fine
            )));
        }
        let coarse = (0..self.n_coarse).map(|c| format!("group{c}")).collect();
        let fine = (0..self.n_fine).map(|f| format!("class{f}")).collect();
        let map = (0..self.n_fine).map(|f| f * self.n_coarse / self.n_fine).collect();
        Taxonomy::new(coarse, fine, map)
    }

    pub fn model_config(&self, integration: IntegrationMode, aggregator: Aggregator) -> Result<ModelConfig> {
        if self.n_patches == 0 {
            return Err(Error::InvalidConfig("n_patches must be ≥ 1".into()));
        }
        let cfg = ModelConfig {
            input_dim: self.input,
            hidden_dim: self.hidden,
            split_dim: self.split,
            proj_dim: self.proj,
            attn_dim: self.attn,
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            integration,
            aggregator,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub dims: GradcheckDims,
    pub integration: IntegrationMode,
    pub aggregator: Aggregator,
    pub loss: LossConfig,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error. Central differences with
    /// h = 1e-5 on a loss of a few nats carry roughly 1e-10 of roundoff,
    /// which a floor of 1e-5 keeps near 1e-5 relative.
    pub floor: f64,
    pub max_attempts: usize,
    /// Debug aid: perturbs the analytic gradient of this block so the check
    /// must flag it.
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: GradcheckDims::default(),
            integration: IntegrationMode::Bidirectional,
            aggregator: Aggregator::Attention,
            loss: LossConfig::default(),
            step: FD_STEP,
            tolerance: 1e-4,
            floor: 1e-5,
            max_attempts: 200,
            corrupt_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    /// Samples discarded for sitting too close to a kink.
    pub rejected: usize,
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failed_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect()
    }
}

struct Sample {
    bag: Bag,
    params: ModelParams,
    coarse: usize,
    fine: usize,
}

fn draw(seed: u64, cfg: &ModelConfig, dims: &GradcheckDims, taxonomy: &Taxonomy) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.n_patches * dims.input;
    let features = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let fine = rng.random_range(0..dims.n_fine);
    let coarse = taxonomy.group_of(fine)?;
    let bag = Bag::new(format!("gradcheck_{seed}"), dims.n_patches, dims.input, features, coarse, fine)?;
    let mut params = ModelParams::init(cfg, rng.random())?;
    // Default init leaves biases at zero; jitter everything so no block is
    // tested only at a special point.
    for (_, block) in params.blocks_mut() {
        for x in block.as_mut_slice() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    Ok(Sample {
        bag,
        params,
        coarse,
        fine,
    })
}

fn top2_gap(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::INFINITY;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s[1]
}

/// Whether every piecewise choice (argmax rows, hinge activity, relu signs,
/// max-pool winners) stays put under an `h`-sized parameter probe.
fn away_from_kinks(trace: &ForwardTrace, fine: usize, taxonomy: &Taxonomy, config: &GradcheckConfig) -> Result<bool> {
    if trace.pooled.pre.as_slice().iter().any(|z| z.abs() < KINK_MARGIN) {
        return Ok(false);
    }
    if config.loss.enable_con && (top2_gap(&trace.o_c) < KINK_MARGIN || top2_gap(&trace.o_f) < KINK_MARGIN) {
        return Ok(false);
    }
    if config.loss.enable_int {
        let anchor = softmax(trace.f_f.row(fine))?;
        for j in taxonomy.complement_of(fine)? {
            let kl = kl_div(&anchor, &softmax(trace.f_f.row(j))?)?;
            if (kl - config.loss.alpha).abs() < KINK_MARGIN {
                return Ok(false);
            }
        }
    }
    if config.aggregator == Aggregator::Max {
        let h = &trace.pooled.hidden;
        for j in 0..h.cols() {
            let col: Vec<f64> = (0..h.rows()).map(|k| h.get(k, j)).collect();
            if top2_gap(&col) < KINK_MARGIN {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Checks one seed. Samples near a kink are redrawn from derived seeds.
pub fn gradcheck(seed: u64, config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.loss.validate()?;
    let taxonomy = config.dims.taxonomy()?;
    let model_cfg = config.dims.model_config(config.integration, config.aggregator)?;
    if let Some(name) = &config.corrupt_block {
        if ModelParams::zeros(&model_cfg).block(name).is_none() {
            return Err(Error::InvalidConfig(format!("unknown parameter block `{name}`")));
        }
    }

    let mut rejected = 0;
    let (sample, trace) = loop {
        if rejected >= config.max_attempts {
            return Err(Error::InvalidConfig(format!(
                "seed {seed}: no kink-free sample in {} attempts",
                config.max_attempts
            )));
        }
        let s = draw(derive_seed(seed, &[rejected as u64]), &model_cfg, &config.dims, &taxonomy)?;
        let trace = forward(&s.bag, &s.params)?;
        if away_from_kinks(&trace, s.fine, &taxonomy, config)? {
            break (s, trace);
        }
        rejected += 1;
    };

    let (loss, seeds) = total_loss(&trace, sample.coarse, sample.fine, &taxonomy, &config.loss)?;
    let mut analytic = backward(&trace, &seeds, &sample.params)?.params;
    if let Some(name) = &config.corrupt_block {
        let block = analytic.block_mut(name).expect("checked above");
        for (i, g) in block.as_mut_slice().iter_mut().enumerate() {
            *g = *g * 1.5 + if i == 0 { 1e-2 } else { 0.0 };
        }
    }
    let analytic_flat = analytic.flatten();

    let detached = Detached::from_trace(&trace);
    let mut work = sample.params.clone();
    let mut fd_error = None;
    let numeric = finite_diff_grad(
        |x| {
            work.assign_flat(x).expect("same layout");
            let result = forward_detached(&sample.bag, &work, &detached)
                .and_then(|t| total_loss(&t, sample.coarse, sample.fine, &taxonomy, &config.loss));
            match result {
                Ok((b, _)) => b.total,
                Err(e) => {
                    fd_error.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &sample.params.flatten(),
        config.step,
    );
    if let Some(e) = fd_error {
        return Err(e);
    }
    let numeric = numeric?;

    let blocks: Vec<BlockReport> = sample
        .params
        .block_ranges()
        .into_iter()
        .map(|(name, start, len)| {
            let end = start + len;
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for (a, n) in analytic_flat[start..end].iter().zip(&numeric[start..end]) {
                let abs = (a - n).abs();
                max_abs = max_abs.max(abs);
                max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(config.floor));
            }
            BlockReport {
                name: name.to_string(),
                len,
                max_rel_err: max_rel,
                max_abs_err: max_abs,
                passed: max_rel < config.tolerance,
            }
        })
        .collect();
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradcheckReport {
        seed,
        rejected,
        loss: loss.total,
        blocks,
        passed,
    })
}

/// Runs [`gradcheck`] for each seed; reports come back in seed order.
pub fn gradcheck_seeds(seeds: &[u64], config: &GradcheckConfig, exec: Exec) -> Result<Vec<GradcheckReport>> {
    exec.map(seeds, |&s| gradcheck(s, config)).into_iter().collect()
}
