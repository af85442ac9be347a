//! The hierarchical MIL network: patch projection, pooling, coarse/fine split
//! with stop-gradient integration, per-class projection heads and per-class
//! readout classifiers.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{backward, backward_with, BackwardOptions, Gradients, SeedGradients};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{attention_pool, forward, forward_detached, integrate, project_and_classify, Detached, ForwardTrace, Pooled};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    None,
    FineToCoarse,
    CoarseToFine,
    Bidirectional,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 4] = [
        IntegrationMode::None,
        IntegrationMode::FineToCoarse,
        IntegrationMode::CoarseToFine,
        IntegrationMode::Bidirectional,
    ];

    /// Whether the coarse branch receives the (gated) fine half.
    pub fn augments_coarse(self) -> bool {
        matches!(self, IntegrationMode::FineToCoarse | IntegrationMode::Bidirectional)
    }

    /// Whether the fine branch receives the (gated) coarse half.
    pub fn augments_fine(self) -> bool {
        matches!(self, IntegrationMode::CoarseToFine | IntegrationMode::Bidirectional)
    }

    pub fn code(self) -> u32 {
        match self {
            IntegrationMode::None => 0,
            IntegrationMode::FineToCoarse => 1,
            IntegrationMode::CoarseToFine => 2,
            IntegrationMode::Bidirectional => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntegrationMode::None => "none",
            IntegrationMode::FineToCoarse => "fine_to_coarse",
            IntegrationMode::CoarseToFine => "coarse_to_fine",
            IntegrationMode::Bidirectional => "bidirectional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Attention,
    Max,
    Mean,
}

impl Aggregator {
    pub fn code(self) -> u32 {
        match self {
            Aggregator::Attention => 0,
            Aggregator::Max => 1,
            Aggregator::Mean => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Aggregator::Attention),
            1 => Some(Aggregator::Max),
            2 => Some(Aggregator::Mean),
            _ => None,
        }
    }
}

/// Architecture knobs that do not depend on the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub hidden_dim: usize,
    pub split_dim: usize,
    pub proj_dim: usize,
    pub attn_dim: usize,
    pub integration: IntegrationMode,
    pub aggregator: Aggregator,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            split_dim: 256,
            proj_dim: 256,
            attn_dim: 256,
            integration: IntegrationMode::Bidirectional,
            aggregator: Aggregator::Attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub split_dim: usize,
    pub proj_dim: usize,
    pub attn_dim: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub integration: IntegrationMode,
    pub aggregator: Aggregator,
}

impl ModelConfig {
    pub fn new(input_dim: usize, taxonomy: &Taxonomy, options: &ModelOptions) -> Result<Self> {
        let config = Self {
            input_dim,
            hidden_dim: options.hidden_dim,
            split_dim: options.split_dim,
            proj_dim: options.proj_dim,
            attn_dim: options.attn_dim,
            n_coarse: taxonomy.n_coarse(),
            n_fine: taxonomy.n_fine(),
            integration: options.integration,
            aggregator: options.aggregator,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("split_dim", self.split_dim),
            ("proj_dim", self.proj_dim),
            ("attn_dim", self.attn_dim),
            ("n_coarse", self.n_coarse),
            ("n_fine", self.n_fine),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
        }
        if self.hidden_dim != 2 * self.split_dim {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim ({}) must equal 2 × split_dim ({})",
                self.hidden_dim, self.split_dim
            )));
        }
        Ok(())
    }

    pub fn coarse_head_in(&self) -> usize {
        if self.integration.augments_coarse() {
            2 * self.split_dim
        } else {
            self.split_dim
        }
    }

    pub fn fine_head_in(&self) -> usize {
        if self.integration.augments_fine() {
            2 * self.split_dim
        } else {
            self.split_dim
        }
    }

    pub fn check_compatible(&self, input_dim: usize, taxonomy: &Taxonomy) -> Result<()> {
        for (context, expected, got) in [
            ("model input dim vs data", self.input_dim, input_dim),
            ("model coarse classes vs taxonomy", self.n_coarse, taxonomy.n_coarse()),
            ("model fine classes vs taxonomy", self.n_fine, taxonomy.n_fine()),
        ] {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Names of the parameter blocks, in storage and checkpoint order.
pub const BLOCK_NAMES: [&str; 15] = [
    "patch_w",
    "patch_b",
    "attn_v",
    "attn_v_b",
    "attn_u",
    "attn_u_b",
    "attn_w",
    "coarse_proj_w",
    "coarse_proj_b",
    "fine_proj_w",
    "fine_proj_b",
    "coarse_cls_w",
    "coarse_cls_b",
    "fine_cls_w",
    "fine_cls_b",
];

/// All learnable weights. Biases are stored as single-row matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// H × D
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    /// A × H
    pub attn_v: Matrix,
    pub attn_v_b: Matrix,
    /// A × H
    pub attn_u: Matrix,
    pub attn_u_b: Matrix,
    /// 1 × A
    pub attn_w: Matrix,
    /// (N_c·P) × coarse head input
    pub coarse_proj_w: Matrix,
    pub coarse_proj_b: Matrix,
    /// (N_f·P) × fine head input
    pub fine_proj_w: Matrix,
    pub fine_proj_b: Matrix,
    /// N_c × P, one readout vector per class
    pub coarse_cls_w: Matrix,
    pub coarse_cls_b: Matrix,
    /// N_f × P
    pub fine_cls_w: Matrix,
    pub fine_cls_b: Matrix,
}

impl ModelParams {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        let row = |n| Matrix::zeros(1, n);
        Self {
            config: *c,
            patch_w: Matrix::zeros(c.hidden_dim, c.input_dim),
            patch_b: row(c.hidden_dim),
            attn_v: Matrix::zeros(c.attn_dim, c.hidden_dim),
            attn_v_b: row(c.attn_dim),
            attn_u: Matrix::zeros(c.attn_dim, c.hidden_dim),
            attn_u_b: row(c.attn_dim),
            attn_w: row(c.attn_dim),
            coarse_proj_w: Matrix::zeros(c.n_coarse * c.proj_dim, c.coarse_head_in()),
            coarse_proj_b: row(c.n_coarse * c.proj_dim),
            fine_proj_w: Matrix::zeros(c.n_fine * c.proj_dim, c.fine_head_in()),
            fine_proj_b: row(c.n_fine * c.proj_dim),
            coarse_cls_w: Matrix::zeros(c.n_coarse, c.proj_dim),
            coarse_cls_b: row(c.n_coarse),
            fine_cls_w: Matrix::zeros(c.n_fine, c.proj_dim),
            fine_cls_b: row(c.n_fine),
        }
    }

    /// Uniform(±√(1/fan_in)) weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, block) in params.blocks_mut() {
            if is_bias(name) {
                continue;
            }
            let fan_in = block.cols();
            let bound = (1.0 / fan_in as f64).sqrt();
            for x in block.as_mut_slice() {
                *x = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn blocks(&self) -> [(&'static str, &Matrix); 15] {
        [
            (BLOCK_NAMES[0], &self.patch_w),
            (BLOCK_NAMES[1], &self.patch_b),
            (BLOCK_NAMES[2], &self.attn_v),
            (BLOCK_NAMES[3], &self.attn_v_b),
            (BLOCK_NAMES[4], &self.attn_u),
            (BLOCK_NAMES[5], &self.attn_u_b),
            (BLOCK_NAMES[6], &self.attn_w),
            (BLOCK_NAMES[7], &self.coarse_proj_w),
            (BLOCK_NAMES[8], &self.coarse_proj_b),
            (BLOCK_NAMES[9], &self.fine_proj_w),
            (BLOCK_NAMES[10], &self.fine_proj_b),
            (BLOCK_NAMES[11], &self.coarse_cls_w),
            (BLOCK_NAMES[12], &self.coarse_cls_b),
            (BLOCK_NAMES[13], &self.fine_cls_w),
            (BLOCK_NAMES[14], &self.fine_cls_b),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Matrix); 15] {
        [
            (BLOCK_NAMES[0], &mut self.patch_w),
            (BLOCK_NAMES[1], &mut self.patch_b),
            (BLOCK_NAMES[2], &mut self.attn_v),
            (BLOCK_NAMES[3], &mut self.attn_v_b),
            (BLOCK_NAMES[4], &mut self.attn_u),
            (BLOCK_NAMES[5], &mut self.attn_u_b),
            (BLOCK_NAMES[6], &mut self.attn_w),
            (BLOCK_NAMES[7], &mut self.coarse_proj_w),
            (BLOCK_NAMES[8], &mut self.coarse_proj_b),
            (BLOCK_NAMES[9], &mut self.fine_proj_w),
            (BLOCK_NAMES[10], &mut self.fine_proj_b),
            (BLOCK_NAMES[11], &mut self.coarse_cls_w),
            (BLOCK_NAMES[12], &mut self.coarse_cls_b),
            (BLOCK_NAMES[13], &mut self.fine_cls_w),
            (BLOCK_NAMES[14], &mut self.fine_cls_b),
        ]
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.blocks().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.blocks_mut().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    /// Concatenation of every block in [`BLOCK_NAMES`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.blocks() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for (_, m) in self.blocks_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `(name, start, len)` of each block inside [`Self::flatten`].
    pub fn block_ranges(&self) -> Vec<(&'static str, usize, usize)> {
        let mut offset = 0;
        self.blocks()
            .iter()
            .map(|(name, m)| {
                let r = (*name, offset, m.len());
                offset += m.len();
                r
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.is_finite())
    }
}

pub(crate) fn is_bias(name: &str) -> bool {
    name.ends_with("_b")
}
