//! Full model assembly and ablation wiring.
//!
//! With feature exchange enabled the pipeline is: backbone taps -> three
//! per-level comprehension blocks (shared linguistic stream, per-level
//! parameters) -> n exchange rounds -> ConvLSTM fusion -> logits. With it
//! disabled the pipeline runs on the deepest level only with a 1x1
//! prediction head, which also hosts the plain concat baseline when both
//! comprehension stages are off.
//!
//! Ablated stages own no parameters, so checkpoints carry exactly the
//! parameters of the configured variant.

use crate::cmpc::{self, CmpcParams, LevelTrace};
use crate::config::RunConfig;
use crate::error::{RefsegError, Result};
use crate::head::{self, HeadParams};
use crate::lang::{self, LangParams};
use crate::synth::LoadedSample;
use crate::tgfe::{self, PoolTrace, TgfeParams};
use crate::vis::{self, VisParams};
use crate::vocab::Vocabulary;
use tapegrad::{derive_seed, ParamStore, SplitMix64, Tape, Tensor, TensorRef};

pub struct Model {
    pub cfg: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub lang: LangParams,
    pub vis: VisParams,
    /// One per active level: three with exchange, one (the deepest) without.
    pub cmpc: Vec<CmpcParams>,
    pub tgfe: Option<TgfeParams>,
    pub head: HeadParams,
}

/// Intermediate values exported for visualization.
#[derive(Default)]
pub struct ForwardTrace {
    pub levels: Vec<LevelTrace>,
    pub pools: Vec<PoolTrace>,
}

pub struct ModelOut {
    /// [H, W] logits on the feature grid.
    pub grid_logits: TensorRef,
    /// [T, 4] pre-softmax word-type scores.
    pub type_logits: TensorRef,
}

pub struct Prediction {
    pub grid_logits: Tensor,
    /// Binary mask at image resolution.
    pub mask: Tensor,
}

impl Model {
    /// Deterministic construction: the parameter registration order and
    /// every initial value follow from (config, vocabulary).
    pub fn new(cfg: RunConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, "init", 0));
        let mut store = ParamStore::new();
        let lang = LangParams::init(&mut store, &cfg, vocab.len(), &mut rng);
        let active_levels: Vec<usize> = if cfg.tgfe_enabled { vec![0, 1, 2] } else { vec![2] };
        let vis = VisParams::init(&mut store, &cfg, &active_levels, &mut rng);
        let cmpc = active_levels
            .iter()
            .map(|&l| CmpcParams::init(&mut store, &cfg, &format!("cmpc{l}"), &mut rng))
            .collect();
        let tgfe = cfg.tgfe_enabled.then(|| TgfeParams::init(&mut store, &cfg, &mut rng));
        let head = HeadParams::init(&mut store, &cfg, &mut rng);
        Ok(Model { cfg, vocab, store, lang, vis, cmpc, tgfe, head })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Build the forward graph for one sample on the given tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &[TensorRef],
        tokens: &[usize],
        image: &Tensor,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<ModelOut> {
        let lang_out = lang::forward(tape, staged, &self.lang, tokens, &self.cfg)?;
        let levels = vis::forward(tape, staged, &self.vis, image)?;

        let grid_logits = if self.cfg.tgfe_enabled {
            let mut ys = Vec::with_capacity(3);
            for level in 0..3 {
                let x = levels[level].expect("all levels active");
                let y = cmpc::forward(
                    tape,
                    staged,
                    &self.cmpc[level],
                    x,
                    &lang_out,
                    &self.cfg,
                    level,
                    trace.as_deref_mut().map(|t| &mut t.levels),
                )?;
                ys.push(y);
            }
            // Exchange operates on flattened vertex features.
            let shape = tape.shape(ys[0]).to_vec();
            let (h, w) = (shape[0], shape[1]);
            let n = h * w;
            let flat: Vec<TensorRef> = ys
                .iter()
                .map(|&y| tape.reshape(y, &[n, self.cfg.c_m]))
                .collect::<tapegrad::Result<_>>()?;
            let exchanged = tgfe::forward(
                tape,
                [flat[0], flat[1], flat[2]],
                lang_out.necessary,
                staged,
                self.tgfe.as_ref().expect("exchange parameters exist"),
                &self.cfg,
                self.cfg.exchange_rounds,
                trace.as_deref_mut().map(|t| &mut t.pools),
            )?;
            let mut maps = Vec::with_capacity(3);
            for &f in &exchanged {
                maps.push(tape.reshape(f, &[h, w, self.cfg.c_m])?);
            }
            head::fuse_levels(tape, staged, &self.head, &[maps[0], maps[1], maps[2]], &self.cfg)?
        } else {
            let x = levels[2].expect("deep level active");
            let y = cmpc::forward(
                tape,
                staged,
                &self.cmpc[0],
                x,
                &lang_out,
                &self.cfg,
                2,
                trace.as_deref_mut().map(|t| &mut t.levels),
            )?;
            head::single_level_logits(tape, staged, &self.head, y)?
        };
        Ok(ModelOut { grid_logits, type_logits: lang_out.type_logits })
    }

    /// Training loss: pixel BCE of the upsampled logits against the exact
    /// mask, plus the optional word-type auxiliary term.
    pub fn loss(
        &self,
        tape: &mut Tape,
        staged: &[TensorRef],
        sample: &LoadedSample,
    ) -> Result<TensorRef> {
        let out = self.forward(tape, staged, &sample.token_ids, &sample.image, None)?;
        let (h0, w0) = (sample.mask.shape[0], sample.mask.shape[1]);
        let up = head::upsample_logits(tape, out.grid_logits, h0, w0)?;
        let bce = head::bce_loss(tape, up, &sample.mask)?;
        if self.cfg.lambda_word_types > 0.0 {
            let ce = tape.cross_entropy_rows(out.type_logits, &sample.oracle_types)?;
            let weighted = tape.scale(ce, self.cfg.lambda_word_types)?;
            Ok(tape.add(bce, weighted)?)
        } else {
            Ok(bce)
        }
    }

    /// One sample's loss value and parameter gradients (store order).
    pub fn train_step(&self, sample: &LoadedSample) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let staged = self.store.stage(&mut tape);
        let loss = self.loss(&mut tape, &staged, sample)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let out = staged
            .iter()
            .map(|&r| grads.get_or_zeros(r, tape.value(r).numel()))
            .collect();
        Ok((value, out))
    }

    /// Forward-only mask prediction at image resolution.
    pub fn predict(&self, tokens: &[usize], image: &Tensor) -> Result<Prediction> {
        self.predict_traced(tokens, image, None)
    }

    pub fn predict_traced(
        &self,
        tokens: &[usize],
        image: &Tensor,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Prediction> {
        let mut tape = Tape::no_grad();
        let staged = self.store.stage(&mut tape);
        let out = self.forward(&mut tape, &staged, tokens, image, trace)?;
        let grid_logits = tape.value(out.grid_logits).clone();
        let (h0, w0) = (image.shape[0], image.shape[1]);
        let mask = head::predict_mask(&grid_logits, h0, w0, self.cfg.mask_threshold);
        Ok(Prediction { grid_logits, mask })
    }

    /// Overwrite parameter values from (name, tensor) pairs, requiring an
    /// exact match of names, order, and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(RefsegError::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                values.len(),
                self.store.len()
            )));
        }
        for (idx, (name, tensor)) in values.into_iter().enumerate() {
            let id = tapegrad::ParamId::from_index(idx);
            if self.store.name(id) != name {
                return Err(RefsegError::Checkpoint(format!(
                    "parameter {idx} is named {} in the checkpoint but {} in the model",
                    name,
                    self.store.name(id)
                )));
            }
            if self.store.get(id).shape != tensor.shape {
                return Err(RefsegError::Checkpoint(format!(
                    "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                    tensor.shape,
                    self.store.get(id).shape
                )));
            }
            *self.store.get_mut(id) = tensor;
        }
        Ok(())
    }
}
