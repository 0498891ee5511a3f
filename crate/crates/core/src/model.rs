//! Pre-norm Transformer decoder over pianoroll columns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pianoroll::{CellScale, ContinuousRoll, Pianoroll, Window, N_PITCHES};
use crate::posenc::{apply_sape, relative_bias, PEConfig, PEState, PositionIndices};
use crate::tensor::{Checkpoint, Graph, Init, ParamGrads, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Position t predicts column t + 1 of all tracks.
    NextTimestep,
    /// Position t predicts the target track at t from the other tracks.
    Accompaniment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub task: Task,
    pub n_tracks: usize,
    /// Track predicted by the accompaniment task.
    pub target_track: usize,
    pub pe: PEConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 256,
            d_ff: 1024,
            dropout: 0.1,
            task: Task::NextTimestep,
            n_tracks: 3,
            target_track: 2,
            pe: PEConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers, heads and d_ff must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.pe.d_model != self.d_model {
            return Err(Error::Config(format!(
                "pe.d_model {} differs from d_model {}",
                self.pe.d_model, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        match self.task {
            Task::NextTimestep if self.n_tracks == 0 => {
                return Err(Error::Config("n_tracks must be >= 1".into()))
            }
            Task::Accompaniment if self.n_tracks < 2 || self.target_track >= self.n_tracks => {
                return Err(Error::Config(format!(
                    "accompaniment needs >= 2 tracks and a target below {}",
                    self.n_tracks
                )))
            }
            _ => {}
        }
        self.pe.validate()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn input_width(&self) -> usize {
        match self.task {
            Task::NextTimestep => self.n_tracks * N_PITCHES,
            Task::Accompaniment => (self.n_tracks - 1) * N_PITCHES,
        }
    }

    pub fn output_width(&self) -> usize {
        match self.task {
            Task::NextTimestep => self.n_tracks * N_PITCHES,
            Task::Accompaniment => N_PITCHES,
        }
    }

    pub fn conditioning_tracks(&self) -> Vec<usize> {
        (0..self.n_tracks).filter(|&k| k != self.target_track).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pe: PEState,
    w_in: ParamId,
    b_in: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub training: bool,
    pub causal: bool,
}

impl ForwardOptions {
    pub const EVAL: ForwardOptions = ForwardOptions { training: false, causal: true };
    pub const TRAIN: ForwardOptions = ForwardOptions { training: true, causal: true };
}

/// One training or validation window.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: Tensor,
    pub mask: Tensor,
    pub indices: PositionIndices,
}

/// Rows of `roll` columns in `window`, flattened track-major.
pub fn column_matrix(roll: &Pianoroll, window: Window) -> Result<Tensor> {
    let w = roll.slice_window(window)?;
    let data = w.cells().iter().map(|&c| c as f64).collect();
    Tensor::new(vec![window.length, roll.n_tracks() * N_PITCHES], data)
}

/// Mixes a base seed with stream coordinates into an independent seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Model {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let w_in = store.add("input.w", &[cfg.input_width(), d], Init::XavierUniform, rng)?;
        let b_in = store.add("input.b", &[d], Init::Zeros, rng)?;
        let pe = PEState::new(&cfg.pe, cfg.d_head(), &mut store, rng)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut add = |name: &str, shape: &[usize], init: Init| {
                store.add(format!("layer{l}.{name}"), shape, init, rng)
            };
            layers.push(LayerIds {
                ln1_g: add("ln1.g", &[d], Init::Ones)?,
                ln1_b: add("ln1.b", &[d], Init::Zeros)?,
                wq: add("attn.wq", &[d, d], Init::XavierUniform)?,
                wk: add("attn.wk", &[d, d], Init::XavierUniform)?,
                wv: add("attn.wv", &[d, d], Init::XavierUniform)?,
                wo: add("attn.wo", &[d, d], Init::XavierUniform)?,
                bo: add("attn.bo", &[d], Init::Zeros)?,
                ln2_g: add("ln2.g", &[d], Init::Ones)?,
                ln2_b: add("ln2.b", &[d], Init::Zeros)?,
                w1: add("ffn.w1", &[d, cfg.d_ff], Init::XavierUniform)?,
                b1: add("ffn.b1", &[cfg.d_ff], Init::Zeros)?,
                w2: add("ffn.w2", &[cfg.d_ff, d], Init::XavierUniform)?,
                b2: add("ffn.b2", &[d], Init::Zeros)?,
            });
        }
        let lnf_g = store.add("final.ln.g", &[d], Init::Ones, rng)?;
        let lnf_b = store.add("final.ln.b", &[d], Init::Zeros, rng)?;
        let w_out = store.add("head.w", &[d, cfg.output_width()], Init::XavierUniform, rng)?;
        let b_out = store.add("head.b", &[cfg.output_width()], Init::Zeros, rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            pe,
            w_in,
            b_in,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        })
    }

    /// Zeroes the output projection so every probability starts at 0.5.
    pub fn zero_head(&mut self) {
        for id in [self.w_out, self.b_out] {
            self.store.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Probabilities `L × output_width` for an `L × input_width` input.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        input: Var,
        indices: &PositionIndices,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = g.shape(input).to_vec();
        if shape.len() != 2 || shape[1] != cfg.input_width() || shape[0] != indices.len {
            return Err(Error::Shape(format!(
                "input {shape:?}, expected {}x{}",
                indices.len,
                cfg.input_width()
            )));
        }
        let s = &self.store;
        let pe = self.pe.bind(g, s, indices)?;
        let (w_in, b_in) = (g.param(s, self.w_in), g.param(s, self.b_in));
        let mut x = g.linear(input, w_in, Some(b_in))?;
        x = apply_sape(g, x, &pe)?;
        x = g.dropout(x, cfg.dropout, rng, opts.training)?;
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        for ids in &self.layers {
            let (g1, b1) = (g.param(s, ids.ln1_g), g.param(s, ids.ln1_b));
            let h = g.layer_norm(x, g1, b1)?;
            let (wq, wk, wv) = (g.param(s, ids.wq), g.param(s, ids.wk), g.param(s, ids.wv));
            let q_all = g.matmul(h, wq)?;
            let k_all = g.matmul(h, wk)?;
            let v_all = g.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let q = g.slice_cols(q_all, head * dh, dh)?;
                let k = g.slice_cols(k_all, head * dh, dh)?;
                let v = g.slice_cols(v_all, head * dh, dh)?;
                let bias = relative_bias(g, q, &pe)?;
                heads.push(g.attention(q, k, v, bias, scale, opts.causal)?);
            }
            let cat = g.concat_cols(&heads)?;
            let (wo, bo) = (g.param(s, ids.wo), g.param(s, ids.bo));
            let o = g.linear(cat, wo, Some(bo))?;
            let o = g.dropout(o, cfg.dropout, rng, opts.training)?;
            x = g.add(x, o)?;

            let (g2, b2) = (g.param(s, ids.ln2_g), g.param(s, ids.ln2_b));
            let h = g.layer_norm(x, g2, b2)?;
            let (w1, bb1) = (g.param(s, ids.w1), g.param(s, ids.b1));
            let f = g.linear(h, w1, Some(bb1))?;
            let f = g.gelu(f);
            let (w2, bb2) = (g.param(s, ids.w2), g.param(s, ids.b2));
            let f = g.linear(f, w2, Some(bb2))?;
            let f = g.dropout(f, cfg.dropout, rng, opts.training)?;
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param(s, self.lnf_g), g.param(s, self.lnf_b));
        let x = g.layer_norm(x, gf, bf)?;
        let (wo, bo) = (g.param(s, self.w_out), g.param(s, self.b_out));
        let logits = g.linear(x, wo, Some(bo))?;
        Ok(g.sigmoid(logits))
    }

    /// Evaluation-mode forward pass without a gradient tape.
    pub fn predict(&self, input: &Tensor, indices: &PositionIndices) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut g, x, indices, ForwardOptions::EVAL, &mut rng)?;
        g.ensure_finite()?;
        Ok(g.value(y).clone())
    }

    /// Probability roll for a prediction matrix.
    pub fn to_roll(&self, probs: &Tensor) -> Result<ContinuousRoll> {
        let (l, w) = probs.dims2()?;
        ContinuousRoll::new(w / N_PITCHES, l, CellScale::Probability, probs.data().to_vec())
    }

    fn example_loss<R: Rng>(
        &self,
        g: &mut Graph,
        ex: &Example,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let x = g.constant(ex.input.clone());
        let p = self.forward(g, x, &ex.indices, opts, rng)?;
        g.bce_loss(p, &ex.target, &ex.mask)
    }

    /// Mean masked BCE over the batch and its parameter gradient. Elements
    /// run in parallel; results are summed in batch order.
    pub fn loss_and_grads(&self, batch: &[Example], seed: u64) -> Result<(f64, ParamGrads)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let parts = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 1));
                let mut g = Graph::new();
                let loss = self.example_loss(&mut g, ex, ForwardOptions::TRAIN, &mut rng)?;
                g.ensure_finite()?;
                let grads = g.backward(loss)?;
                Ok((g.value(loss).data()[0], grads.param_grads(&g, &self.store)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = ParamGrads::zeros(&self.store);
        let mut loss = 0.0;
        for (l, gr) in &parts {
            loss += l;
            total.add_assign(gr);
        }
        let inv = 1.0 / batch.len() as f64;
        total.scale(inv);
        Ok((loss * inv, total))
    }

    /// Mean evaluation-mode loss over examples.
    pub fn mean_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Invalid("no examples".into()));
        }
        let losses = examples
            .par_iter()
            .map(|ex| {
                let mut g = Graph::no_grad();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let loss = self.example_loss(&mut g, ex, ForwardOptions::EVAL, &mut rng)?;
                g.ensure_finite()?;
                Ok(g.value(loss).data()[0])
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn to_checkpoint(&self, optim: Option<crate::tensor::AdamState>) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.cfg)
            .map_err(|e| Error::Invalid(format!("config serialization: {e}")))?;
        Ok(Checkpoint {
            meta,
            params: self.store.clone(),
            optim,
        })
    }

    /// Rebuilds a model from a checkpoint whose metadata is its config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Format { offset: 0, message: format!("checkpoint config: {e}") })?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&cfg, &mut rng)?;
        if model.store.len() != ckpt.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} parameters, config implies {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for ((_, want), (_, have)) in model.store.iter().zip(ckpt.params.iter()) {
            if want.name != have.name || want.value.shape() != have.value.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    have.name,
                    have.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.store = ckpt.params.clone();
        Ok(model)
    }
}
