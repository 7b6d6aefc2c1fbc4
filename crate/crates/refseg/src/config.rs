use crate::error::{RefsegError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Every knob of the pipeline. The whole struct is serialized into each
/// checkpoint, log and report, and its hash ties artifacts to the exact
/// configuration that produced them.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,

    /// Input images are image_size x image_size RGB; the feature grid is
    /// image_size / 4 on each axis (two stride-2 blocks in the backbone).
    pub image_size: usize,
    /// Channel widths of the six backbone blocks.
    pub backbone_channels: Vec<usize>,

    /// Word feature width.
    pub c_l: usize,
    /// Visual feature width after coordinate fusion.
    pub c_v: usize,
    /// Multimodal feature width.
    pub c_m: usize,
    /// Projection width for affinities and pooling weights.
    pub c_h: usize,
    /// Hidden width of the word-type classifier.
    pub c_n: usize,
    /// ConvLSTM cell width.
    pub c_cell: usize,

    /// Rank of the bilinear fusion in entity perception.
    pub bilinear_rank: usize,
    /// Feature-exchange rounds.
    pub exchange_rounds: usize,
    /// Stacked graph-convolution layers.
    pub graph_layers: usize,
    /// Apply relu after each graph-conv layer when stacking more than one.
    pub graph_relu: bool,
    /// Share one weight matrix across stacked graph-conv layers.
    pub graph_shared_weights: bool,
    /// Softmax-normalize pooling weights over positions (the unnormalized
    /// literal form is kept reachable for comparison).
    pub normalize_pool_weights: bool,
    /// Give each level its own exchange parameters instead of sharing.
    pub tgfe_per_level_params: bool,

    /// Ablation switches.
    pub ep_enabled: bool,
    pub rar_enabled: bool,
    pub tgfe_enabled: bool,
    /// Order in which the fused levels are fed to the ConvLSTM
    /// (indices into [shallow, middle, deep]).
    pub level_order: Vec<usize>,

    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the auxiliary word-type classification loss (0 = off).
    pub lambda_word_types: f64,
    pub mask_threshold: f64,

    pub n_train: usize,
    pub n_val: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            image_size: 32,
            backbone_channels: vec![16, 16, 32, 32, 64, 64],
            c_l: 64,
            c_v: 64,
            c_m: 64,
            c_h: 64,
            c_n: 64,
            c_cell: 32,
            bilinear_rank: 3,
            exchange_rounds: 1,
            graph_layers: 1,
            graph_relu: true,
            graph_shared_weights: false,
            normalize_pool_weights: true,
            tgfe_per_level_params: false,
            ep_enabled: true,
            rar_enabled: true,
            tgfe_enabled: true,
            level_order: vec![0, 1, 2],
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 15,
            batch_size: 8,
            lambda_word_types: 0.0,
            mask_threshold: 0.5,
            n_train: 2000,
            n_val: 500,
        }
    }
}

impl RunConfig {
    /// Side length of the shared feature grid.
    pub fn grid_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(RefsegError::Config("image_size must be at least 8".into()));
        }
        if self.image_size % 4 != 0 {
            return Err(RefsegError::Config("image_size must be divisible by 4".into()));
        }
        if self.backbone_channels.len() != 6 {
            return Err(RefsegError::Config("backbone_channels must list 6 block widths".into()));
        }
        if self.bilinear_rank < 1 {
            return Err(RefsegError::Config("bilinear_rank must be >= 1".into()));
        }
        if self.rar_enabled && self.graph_layers < 1 {
            return Err(RefsegError::Config("graph_layers must be >= 1 when relation reasoning is on".into()));
        }
        let mut order = self.level_order.clone();
        order.sort_unstable();
        if order != [0, 1, 2] {
            return Err(RefsegError::Config("level_order must be a permutation of [0, 1, 2]".into()));
        }
        if !(0.0 < self.mask_threshold && self.mask_threshold < 1.0) {
            return Err(RefsegError::Config("mask_threshold must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(RefsegError::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(RefsegError::io(format!("reading config {}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(RefsegError::json(format!("config {}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
