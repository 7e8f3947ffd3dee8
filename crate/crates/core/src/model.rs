//! The DNN and LSTM encoders plus the distribution parameter heads, with
//! hand-derived forward and backward passes over a flat parameter vector.
//!
//! The backprop here is written per layer against the exact forward algebra;
//! the finite-difference checker in [`gradcheck`] is the guard for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{categorical_nll, gaussian_nll, DistributionParams};
use crate::numerics::{
    matvec_acc, matvec_t_acc, outer_acc, sigmoid_vec, softmax, tanh_vec, BlockId, GradCheckReport,
    ParamSet,
};

/// log-variance outputs are clamped here before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 8.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("categorical id {id} out of range for category {category} (cardinality {cardinality} + unknown)")]
    BadCategoricalId { category: usize, id: u32, cardinality: usize },
    #[error(transparent)]
    Density(#[from] crate::density::DensityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Dnn,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    SameTimeStep,
    NextTimeStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: Encoder,
    pub layers: usize,
    pub hidden_dim: usize,
    pub target_mode: TargetMode,
    pub covariance: Covariance,
    pub include_categoricals: bool,
    pub embedding_ratio: f64,
    pub bptt_window: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: Encoder::Dnn,
            layers: 2,
            hidden_dim: 64,
            target_mode: TargetMode::SameTimeStep,
            covariance: Covariance::Diagonal,
            include_categoricals: false,
            embedding_ratio: 0.25,
            bptt_window: 10,
            batch_size: 256,
            learning_rate: 0.01,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Warnings for values outside the tuning ranges; the config stays usable.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(1..=6).contains(&self.layers) {
            w.push(format!("layers {} outside 1..=6", self.layers));
        }
        if !(20..=500).contains(&self.hidden_dim) {
            w.push(format!("hidden_dim {} outside 20..=500", self.hidden_dim));
        }
        if !(0.25..=1.0).contains(&self.embedding_ratio) {
            w.push(format!("embedding_ratio {} outside 0.25..=1.0", self.embedding_ratio));
        }
        if !(3..=40).contains(&self.bptt_window) {
            w.push(format!("bptt_window {} outside 3..=40", self.bptt_window));
        }
        w
    }
}

/// One user-day as the model consumes it: real-valued counts plus raw
/// categorical ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayInput {
    pub counts: Vec<f64>,
    pub cat_ids: Vec<u32>,
}

/// Per-layer hidden and cell vectors carried between LSTM steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStates {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LayerStates {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        LayerStates { h: vec![vec![0.0; hidden]; layers], c: vec![vec![0.0; hidden]; layers] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadBlocks {
    u: BlockId,
    b: BlockId,
    u2: BlockId,
    b2: BlockId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LstmLayerBlocks {
    wgx: BlockId,
    wgh: BlockId,
    wfx: BlockId,
    wfh: BlockId,
    wix: BlockId,
    wih: BlockId,
    wox: BlockId,
    woh: BlockId,
    bg: BlockId,
    bf: BlockId,
    bi: BlockId,
    bo: BlockId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum EncoderBlocks {
    Dnn { w: Vec<BlockId>, b: Vec<BlockId> },
    Lstm { layers: Vec<LstmLayerBlocks> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layout {
    encoder: EncoderBlocks,
    count_head: HeadBlocks,
    cat_heads: Vec<HeadBlocks>,
    embeddings: Vec<BlockId>,
}

/// Shared trainable weights ("these weights are shared among all users") plus
/// the shape metadata needed to run them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub count_dim: usize,
    /// Known cardinality per category; heads and embeddings allow one extra
    /// UNKNOWN class on top.
    pub cat_cards: Vec<usize>,
    pub params: ParamSet,
    layout: Layout,
}

pub fn embedding_width(ratio: f64, cardinality: usize) -> usize {
    ((ratio * cardinality as f64).ceil() as usize).max(1)
}

impl Model {
    pub fn new(config: ModelConfig, count_dim: usize, cat_cards: Vec<usize>) -> Model {
        let mut params = ParamSet::new();
        let hidden = config.hidden_dim;
        let input_dim = {
            let mut d = count_dim;
            if config.include_categoricals {
                for &card in &cat_cards {
                    d += embedding_width(config.embedding_ratio, card);
                }
            }
            d
        };

        let encoder = match config.encoder {
            Encoder::Dnn => {
                let mut w = Vec::new();
                let mut b = Vec::new();
                for l in 0..config.layers {
                    let in_dim = if l == 0 { input_dim } else { hidden };
                    w.push(params.add_block(&format!("dnn.w{l}"), hidden, in_dim));
                    b.push(params.add_block(&format!("dnn.b{l}"), hidden, 1));
                }
                EncoderBlocks::Dnn { w, b }
            }
            Encoder::Lstm => {
                let mut layers = Vec::new();
                for l in 0..config.layers {
                    let in_dim = if l == 0 { input_dim } else { hidden };
                    layers.push(LstmLayerBlocks {
                        wgx: params.add_block(&format!("lstm.l{l}.wgx"), hidden, in_dim),
                        wgh: params.add_block(&format!("lstm.l{l}.wgh"), hidden, hidden),
                        wfx: params.add_block(&format!("lstm.l{l}.wfx"), hidden, in_dim),
                        wfh: params.add_block(&format!("lstm.l{l}.wfh"), hidden, hidden),
                        wix: params.add_block(&format!("lstm.l{l}.wix"), hidden, in_dim),
                        wih: params.add_block(&format!("lstm.l{l}.wih"), hidden, hidden),
                        wox: params.add_block(&format!("lstm.l{l}.wox"), hidden, in_dim),
                        woh: params.add_block(&format!("lstm.l{l}.woh"), hidden, hidden),
                        bg: params.add_block(&format!("lstm.l{l}.bg"), hidden, 1),
                        bf: params.add_block(&format!("lstm.l{l}.bf"), hidden, 1),
                        bi: params.add_block(&format!("lstm.l{l}.bi"), hidden, 1),
                        bo: params.add_block(&format!("lstm.l{l}.bo"), hidden, 1),
                    });
                }
                EncoderBlocks::Lstm { layers }
            }
        };

        let count_out = match config.covariance {
            Covariance::Identity => count_dim,
            Covariance::Diagonal => 2 * count_dim,
        };
        let count_head = HeadBlocks {
            u: params.add_block("head.count.u", hidden, hidden),
            b: params.add_block("head.count.b", hidden, 1),
            u2: params.add_block("head.count.u2", count_out, hidden),
            b2: params.add_block("head.count.b2", count_out, 1),
        };
        let mut cat_heads = Vec::new();
        let mut embeddings = Vec::new();
        if config.include_categoricals {
            for (c, &card) in cat_cards.iter().enumerate() {
                let classes = card + 1;
                cat_heads.push(HeadBlocks {
                    u: params.add_block(&format!("head.cat{c}.u"), hidden, hidden),
                    b: params.add_block(&format!("head.cat{c}.b"), hidden, 1),
                    u2: params.add_block(&format!("head.cat{c}.u2"), classes, hidden),
                    b2: params.add_block(&format!("head.cat{c}.b2"), classes, 1),
                });
                let width = embedding_width(config.embedding_ratio, card);
                embeddings.push(params.add_block(&format!("emb.cat{c}"), classes, width));
            }
        }

        let mut model = Model {
            config,
            count_dim,
            cat_cards,
            params,
            layout: Layout { encoder, count_head, cat_heads, embeddings },
        };
        model.init_weights();
        model
    }

    /// Uniform in +/- 1/sqrt(fan_in); biases start at zero.
    fn init_weights(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let blocks = self.params.blocks.clone();
        for (id, info) in blocks.iter().enumerate() {
            if info.cols == 1 && !info.name.starts_with("emb.") {
                continue; // bias
            }
            let scale = 1.0 / (info.cols as f64).sqrt();
            for v in self.params.block_mut(id) {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        let mut d = self.count_dim;
        if self.config.include_categoricals {
            for &card in &self.cat_cards {
                d += embedding_width(self.config.embedding_ratio, card);
            }
        }
        d
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn zero_states(&self) -> LayerStates {
        LayerStates::zeros(self.config.layers, self.config.hidden_dim)
    }

    /// Concatenate the count vector with the embedding rows of each
    /// categorical id (UNKNOWN slot allowed).
    pub fn embed_input(&self, params: &ParamSet, day: &DayInput) -> Result<Vec<f64>, ModelError> {
        if day.counts.len() != self.count_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "input counts {} vs count_dim {}",
                day.counts.len(),
                self.count_dim
            )));
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(&day.counts);
        if self.config.include_categoricals {
            for (c, &card) in self.cat_cards.iter().enumerate() {
                let id = *day.cat_ids.get(c).ok_or_else(|| {
                    ModelError::ShapeMismatch(format!("missing categorical id {c}"))
                })?;
                if id as usize > card {
                    return Err(ModelError::BadCategoricalId { category: c, id, cardinality: card });
                }
                let table = params.block(self.layout.embeddings[c]);
                let width = self.params.blocks[self.layout.embeddings[c]].cols;
                let row = &table[id as usize * width..(id as usize + 1) * width];
                x.extend_from_slice(row);
            }
        }
        Ok(x)
    }

    // ---- encoder forward ----

    fn dnn_forward_with(&self, params: &ParamSet, x: Vec<f64>) -> DnnCache {
        let (w, b) = match &self.layout.encoder {
            EncoderBlocks::Dnn { w, b } => (w, b),
            _ => unreachable!("dnn_forward on lstm model"),
        };
        let hidden = self.config.hidden_dim;
        let mut activations = vec![x];
        for l in 0..self.config.layers {
            let info = &self.params.blocks[w[l]];
            let mut z = params.block(b[l]).to_vec();
            matvec_acc(params.block(w[l]), info.rows, info.cols, &activations[l], &mut z);
            let mut h = vec![0.0; hidden];
            tanh_vec(&z, &mut h);
            activations.push(h);
        }
        DnnCache { activations }
    }

    /// Forward one day through the stacked DNN (Eq. 1 algebra).
    pub fn dnn_forward(&self, day: &DayInput) -> Result<DnnCache, ModelError> {
        let x = self.embed_input(&self.params, day)?;
        Ok(self.dnn_forward_with(&self.params, x))
    }

    fn lstm_step_with(&self, params: &ParamSet, x: Vec<f64>, prev: &LayerStates) -> LstmStepCache {
        let layers = match &self.layout.encoder {
            EncoderBlocks::Lstm { layers } => layers,
            _ => unreachable!("lstm_step on dnn model"),
        };
        let hidden = self.config.hidden_dim;
        let mut layer_caches = Vec::with_capacity(self.config.layers);
        let mut input = x;
        for (l, blocks) in layers.iter().enumerate() {
            let in_dim = self.params.blocks[blocks.wgx].cols;
            let gate = |wx: BlockId, wh: BlockId, bias: BlockId| -> Vec<f64> {
                let mut z = params.block(bias).to_vec();
                matvec_acc(params.block(wx), hidden, in_dim, &input, &mut z);
                matvec_acc(params.block(wh), hidden, hidden, &prev.h[l], &mut z);
                z
            };
            let zg = gate(blocks.wgx, blocks.wgh, blocks.bg);
            let zf = gate(blocks.wfx, blocks.wfh, blocks.bf);
            let zi = gate(blocks.wix, blocks.wih, blocks.bi);
            let zo = gate(blocks.wox, blocks.woh, blocks.bo);
            let mut g = vec![0.0; hidden];
            tanh_vec(&zg, &mut g);
            let mut f = vec![0.0; hidden];
            sigmoid_vec(&zf, &mut f);
            let mut i = vec![0.0; hidden];
            sigmoid_vec(&zi, &mut i);
            let mut o = vec![0.0; hidden];
            sigmoid_vec(&zo, &mut o);
            let mut c = vec![0.0; hidden];
            for k in 0..hidden {
                c[k] = f[k] * prev.c[l][k] + i[k] * g[k];
            }
            let mut tanh_c = vec![0.0; hidden];
            tanh_vec(&c, &mut tanh_c);
            let mut h = vec![0.0; hidden];
            for k in 0..hidden {
                h[k] = o[k] * tanh_c[k];
            }
            layer_caches.push(LstmLayerCache {
                input: input.clone(),
                h_prev: prev.h[l].clone(),
                c_prev: prev.c[l].clone(),
                g,
                f,
                i,
                o,
                c,
                tanh_c,
                h: h.clone(),
            });
            input = h;
        }
        LstmStepCache { layers: layer_caches }
    }

    /// One LSTM step (Eqs. 2-7 algebra): returns the cache and the new
    /// per-layer states.
    pub fn lstm_step(&self, day: &DayInput, prev: &LayerStates) -> Result<(LstmStepCache, LayerStates), ModelError> {
        let x = self.embed_input(&self.params, day)?;
        let cache = self.lstm_step_with(&self.params, x, prev);
        let states = cache.states();
        Ok((cache, states))
    }

    // ---- heads ----

    fn head_forward(&self, params: &ParamSet, blocks: &HeadBlocks, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u_info = &self.params.blocks[blocks.u];
        let mut z = params.block(blocks.b).to_vec();
        matvec_acc(params.block(blocks.u), u_info.rows, u_info.cols, h, &mut z);
        let mut a = vec![0.0; z.len()];
        tanh_vec(&z, &mut a);
        let u2_info = &self.params.blocks[blocks.u2];
        let mut out = params.block(blocks.b2).to_vec();
        matvec_acc(params.block(blocks.u2), u2_info.rows, u2_info.cols, &a, &mut out);
        (a, out)
    }

    fn heads_with(&self, params: &ParamSet, h: &[f64]) -> (HeadsCache, DistributionParams) {
        let (count_a, count_out) = self.head_forward(params, &self.layout.count_head, h);
        let (mu, log_var_raw) = match self.config.covariance {
            Covariance::Identity => (count_out.clone(), None),
            Covariance::Diagonal => {
                let mu = count_out[..self.count_dim].to_vec();
                let raw = count_out[self.count_dim..].to_vec();
                (mu, Some(raw))
            }
        };
        let log_var = log_var_raw
            .as_ref()
            .map(|raw| raw.iter().map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).collect::<Vec<f64>>());

        let mut cat_caches = Vec::new();
        let mut cat_probs = Vec::new();
        for blocks in &self.layout.cat_heads {
            let (a, logits) = self.head_forward(params, blocks, h);
            let probs = softmax(&logits);
            cat_caches.push((a, probs.clone()));
            cat_probs.push(probs);
        }
        let dp = DistributionParams {
            mu,
            log_var,
            categorical_probs: if self.config.include_categoricals { Some(cat_probs) } else { None },
        };
        let cache = HeadsCache { h: h.to_vec(), count_a, log_var_raw, cat_caches };
        (cache, dp)
    }

    /// Emit the distribution parameters for one encoder output.
    pub fn heads(&self, h: &[f64]) -> (HeadsCache, DistributionParams) {
        self.heads_with(&self.params, h)
    }

    // ---- loss ----

    fn loss_of(&self, dp: &DistributionParams, target: &DayInput) -> Result<f64, ModelError> {
        let (count_nll, _) = gaussian_nll(&target.counts, dp)?;
        let mut loss = count_nll;
        if let Some(probs) = &dp.categorical_probs {
            for (c, p) in probs.iter().enumerate() {
                loss += categorical_nll(target.cat_ids[c] as usize, p)?;
            }
        }
        Ok(loss)
    }

    /// Full forward (encoder + heads + NLL) for one sample.
    pub fn evaluate(&self, input: &EncoderInput, target: &DayInput) -> Result<Evaluation, ModelError> {
        self.evaluate_with(&self.params, input, target)
    }

    fn evaluate_with(
        &self,
        params: &ParamSet,
        input: &EncoderInput,
        target: &DayInput,
    ) -> Result<Evaluation, ModelError> {
        let (encoder_cache, h) = match (&self.config.encoder, input) {
            (Encoder::Dnn, EncoderInput::Dnn { day }) => {
                let x = self.embed_input(params, day)?;
                let cache = self.dnn_forward_with(params, x);
                let h = cache.activations.last().unwrap().clone();
                (EncoderCache::Dnn { cache, ids: day.cat_ids.clone() }, h)
            }
            (Encoder::Lstm, EncoderInput::Lstm { window, boundary }) => {
                if window.is_empty() {
                    return Err(ModelError::ShapeMismatch("empty LSTM window".into()));
                }
                let mut states = (*boundary).clone();
                let mut steps = Vec::with_capacity(window.len());
                let mut ids = Vec::with_capacity(window.len());
                for day in window.iter() {
                    let x = self.embed_input(params, day)?;
                    let cache = self.lstm_step_with(params, x, &states);
                    states = cache.states();
                    ids.push(day.cat_ids.clone());
                    steps.push(cache);
                }
                let h = states.h.last().unwrap().clone();
                (EncoderCache::Lstm { steps, ids }, h)
            }
            _ => return Err(ModelError::ShapeMismatch("encoder/input kind mismatch".into())),
        };
        let (heads_cache, dp) = self.heads_with(params, &h);
        let loss = self.loss_of(&dp, target)?;
        Ok(Evaluation { loss, dp, encoder: encoder_cache, heads: heads_cache, target: target.clone() })
    }

    /// Accumulate dLoss/dParams for one evaluated sample into `grads`.
    pub fn backward(&self, eval: &Evaluation, grads: &mut [f64]) {
        // gradients at the head outputs
        let dp = &eval.dp;
        let target = &eval.target;
        let mut d_count_out = Vec::with_capacity(match self.config.covariance {
            Covariance::Identity => self.count_dim,
            Covariance::Diagonal => 2 * self.count_dim,
        });
        for i in 0..self.count_dim {
            let var = dp.log_var.as_ref().map(|lv| lv[i].exp()).unwrap_or(1.0);
            d_count_out.push((dp.mu[i] - target.counts[i]) / var);
        }
        if let (Covariance::Diagonal, Some(lv), Some(raw)) =
            (self.config.covariance, dp.log_var.as_ref(), eval.heads.log_var_raw.as_ref())
        {
            for i in 0..self.count_dim {
                let clamped = raw[i].abs() >= LOG_VAR_CLAMP;
                let d = if clamped {
                    0.0
                } else {
                    let diff = target.counts[i] - dp.mu[i];
                    0.5 * (1.0 - diff * diff / lv[i].exp())
                };
                d_count_out.push(d);
            }
        }

        let mut d_h = vec![0.0; self.config.hidden_dim];
        self.head_backward(&self.layout.count_head, &eval.heads.h, &eval.heads.count_a, &d_count_out, grads, &mut d_h);

        if let Some(probs) = &dp.categorical_probs {
            for (c, blocks) in self.layout.cat_heads.iter().enumerate() {
                let (a, p) = &eval.heads.cat_caches[c];
                debug_assert_eq!(p, &probs[c]);
                let id = target.cat_ids[c] as usize;
                let mut d_logits = p.clone();
                d_logits[id] -= 1.0;
                self.head_backward(blocks, &eval.heads.h, a, &d_logits, grads, &mut d_h);
            }
        }

        match &eval.encoder {
            EncoderCache::Dnn { cache, ids } => {
                let d_input = self.dnn_backward(cache, &d_h, grads);
                self.embedding_backward(ids, &d_input, grads);
            }
            EncoderCache::Lstm { steps, ids } => {
                let d_inputs = self.lstm_backward(steps, &d_h, grads);
                for (step_ids, d_input) in ids.iter().zip(&d_inputs) {
                    self.embedding_backward(step_ids, d_input, grads);
                }
            }
        }
    }

    fn head_backward(
        &self,
        blocks: &HeadBlocks,
        h: &[f64],
        a: &[f64],
        d_out: &[f64],
        grads: &mut [f64],
        d_h: &mut [f64],
    ) {
        let u2_info = self.params.blocks[blocks.u2].clone();
        // out = U2 a + b2
        outer_acc(self.params.block_of_mut(grads, blocks.u2), u2_info.rows, u2_info.cols, d_out, a);
        for (g, d) in self.params.block_of_mut(grads, blocks.b2).iter_mut().zip(d_out) {
            *g += d;
        }
        let mut d_a = vec![0.0; a.len()];
        matvec_t_acc(self.params.block(blocks.u2), u2_info.rows, u2_info.cols, d_out, &mut d_a);
        // a = tanh(U h + b)
        let mut d_z = vec![0.0; a.len()];
        for k in 0..a.len() {
            d_z[k] = d_a[k] * (1.0 - a[k] * a[k]);
        }
        let u_info = self.params.blocks[blocks.u].clone();
        outer_acc(self.params.block_of_mut(grads, blocks.u), u_info.rows, u_info.cols, &d_z, h);
        for (g, d) in self.params.block_of_mut(grads, blocks.b).iter_mut().zip(&d_z) {
            *g += d;
        }
        matvec_t_acc(self.params.block(blocks.u), u_info.rows, u_info.cols, &d_z, d_h);
    }

    fn dnn_backward(&self, cache: &DnnCache, d_h_top: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let (w, b) = match &self.layout.encoder {
            EncoderBlocks::Dnn { w, b } => (w, b),
            _ => unreachable!(),
        };
        let mut d_h = d_h_top.to_vec();
        for l in (0..self.config.layers).rev() {
            let h = &cache.activations[l + 1];
            let mut d_z = vec![0.0; h.len()];
            for k in 0..h.len() {
                d_z[k] = d_h[k] * (1.0 - h[k] * h[k]);
            }
            let info = self.params.blocks[w[l]].clone();
            outer_acc(self.params.block_of_mut(grads, w[l]), info.rows, info.cols, &d_z, &cache.activations[l]);
            for (g, d) in self.params.block_of_mut(grads, b[l]).iter_mut().zip(&d_z) {
                *g += d;
            }
            let mut d_lower = vec![0.0; info.cols];
            matvec_t_acc(self.params.block(w[l]), info.rows, info.cols, &d_z, &mut d_lower);
            d_h = d_lower;
        }
        d_h
    }

    /// Truncated BPTT over a window of step caches. The loss gradient attaches
    /// to the top-layer hidden state of the final step; boundary states are
    /// treated as constants. Returns dLoss/dInput per step.
    fn lstm_backward(&self, steps: &[LstmStepCache], d_h_final: &[f64], grads: &mut [f64]) -> Vec<Vec<f64>> {
        let layers = match &self.layout.encoder {
            EncoderBlocks::Lstm { layers } => layers,
            _ => unreachable!(),
        };
        let hidden = self.config.hidden_dim;
        let n_layers = self.config.layers;
        let t_len = steps.len();
        let mut dh_time = vec![vec![0.0; hidden]; n_layers];
        let mut dc_time = vec![vec![0.0; hidden]; n_layers];
        let mut d_inputs = vec![Vec::new(); t_len];

        for t in (0..t_len).rev() {
            // gradient flowing into layer l's output at step t from the layer above
            let mut d_from_above =
                if t == t_len - 1 { d_h_final.to_vec() } else { vec![0.0; hidden] };
            for l in (0..n_layers).rev() {
                let lc = &steps[t].layers[l];
                let blocks = &layers[l];
                let in_dim = self.params.blocks[blocks.wgx].cols;
                let mut d_h = vec![0.0; hidden];
                for k in 0..hidden {
                    d_h[k] = d_from_above[k] + dh_time[l][k];
                }
                // h = o * tanh(c)
                let mut d_o = vec![0.0; hidden];
                let mut d_c = dc_time[l].clone();
                for k in 0..hidden {
                    d_o[k] = d_h[k] * lc.tanh_c[k];
                    d_c[k] += d_h[k] * lc.o[k] * (1.0 - lc.tanh_c[k] * lc.tanh_c[k]);
                }
                // c = f * c_prev + i * g
                let mut d_f = vec![0.0; hidden];
                let mut d_i = vec![0.0; hidden];
                let mut d_g = vec![0.0; hidden];
                let mut d_c_prev = vec![0.0; hidden];
                for k in 0..hidden {
                    d_f[k] = d_c[k] * lc.c_prev[k];
                    d_c_prev[k] = d_c[k] * lc.f[k];
                    d_i[k] = d_c[k] * lc.g[k];
                    d_g[k] = d_c[k] * lc.i[k];
                }
                // pre-activation gradients
                let mut dzg = vec![0.0; hidden];
                let mut dzf = vec![0.0; hidden];
                let mut dzi = vec![0.0; hidden];
                let mut dzo = vec![0.0; hidden];
                for k in 0..hidden {
                    dzg[k] = d_g[k] * (1.0 - lc.g[k] * lc.g[k]);
                    dzf[k] = d_f[k] * lc.f[k] * (1.0 - lc.f[k]);
                    dzi[k] = d_i[k] * lc.i[k] * (1.0 - lc.i[k]);
                    dzo[k] = d_o[k] * lc.o[k] * (1.0 - lc.o[k]);
                }
                let mut d_x = vec![0.0; in_dim];
                let mut d_h_prev = vec![0.0; hidden];
                for (wx, wh, bias, dz) in [
                    (blocks.wgx, blocks.wgh, blocks.bg, &dzg),
                    (blocks.wfx, blocks.wfh, blocks.bf, &dzf),
                    (blocks.wix, blocks.wih, blocks.bi, &dzi),
                    (blocks.wox, blocks.woh, blocks.bo, &dzo),
                ] {
                    outer_acc(self.params.block_of_mut(grads, wx), hidden, in_dim, dz, &lc.input);
                    outer_acc(self.params.block_of_mut(grads, wh), hidden, hidden, dz, &lc.h_prev);
                    for (g, d) in self.params.block_of_mut(grads, bias).iter_mut().zip(dz.iter()) {
                        *g += d;
                    }
                    matvec_t_acc(self.params.block(wx), hidden, in_dim, dz, &mut d_x);
                    matvec_t_acc(self.params.block(wh), hidden, hidden, dz, &mut d_h_prev);
                }
                dh_time[l] = d_h_prev;
                dc_time[l] = d_c_prev;
                d_from_above = d_x.clone();
                if l == 0 {
                    d_inputs[t] = d_x;
                }
            }
        }
        d_inputs
    }

    fn embedding_backward(&self, cat_ids: &[u32], d_input: &[f64], grads: &mut [f64]) {
        if !self.config.include_categoricals {
            return;
        }
        let mut offset = self.count_dim;
        for (c, &block) in self.layout.embeddings.iter().enumerate() {
            let width = self.params.blocks[block].cols;
            let id = cat_ids[c] as usize;
            let d_slice = &d_input[offset..offset + width];
            let table_grad = self.params.block_of_mut(grads, block);
            for (g, d) in table_grad[id * width..(id + 1) * width].iter_mut().zip(d_slice) {
                *g += d;
            }
            offset += width;
        }
    }

    /// Advance per-user boundary states by one step without keeping caches.
    pub fn advance_state(&self, day: &DayInput, states: &LayerStates) -> Result<LayerStates, ModelError> {
        let x = self.embed_input(&self.params, day)?;
        Ok(self.lstm_step_with(&self.params, x, states).states())
    }
}

pub enum EncoderInput<'a> {
    Dnn { day: &'a DayInput },
    Lstm { window: &'a [DayInput], boundary: &'a LayerStates },
}

#[derive(Debug, Clone)]
pub struct DnnCache {
    /// activations[0] is the embedded input; activations[l+1] the output of layer l.
    pub activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LstmLayerCache {
    pub input: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub layers: Vec<LstmLayerCache>,
}

impl LstmStepCache {
    pub fn states(&self) -> LayerStates {
        LayerStates {
            h: self.layers.iter().map(|l| l.h.clone()).collect(),
            c: self.layers.iter().map(|l| l.c.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadsCache {
    pub h: Vec<f64>,
    pub count_a: Vec<f64>,
    pub log_var_raw: Option<Vec<f64>>,
    pub cat_caches: Vec<(Vec<f64>, Vec<f64>)>,
}

enum EncoderCache {
    Dnn { cache: DnnCache, ids: Vec<u32> },
    Lstm { steps: Vec<LstmStepCache>, ids: Vec<Vec<u32>> },
}

pub struct Evaluation {
    pub loss: f64,
    pub dp: DistributionParams,
    encoder: EncoderCache,
    heads: HeadsCache,
    target: DayInput,
}

/// Build a random tiny instance of the configured model and compare analytic
/// gradients of the full loss against central finite differences.
pub fn gradcheck(config: &ModelConfig, count_dim: usize, cat_cards: &[usize], seed: u64) -> GradCheckReport {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let model = Model::new(cfg.clone(), count_dim, cat_cards.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(7));
    let random_day = |rng: &mut ChaCha8Rng| DayInput {
        counts: (0..count_dim).map(|_| rng.gen_range(0.0..3.0)).collect(),
        cat_ids: cat_cards.iter().map(|&card| rng.gen_range(0..=card as u32)).collect(),
    };
    let window: Vec<DayInput> = (0..3).map(|_| random_day(&mut rng)).collect();
    let target = random_day(&mut rng);
    let mut boundary = model.zero_states();
    for h in &mut boundary.h {
        for v in h.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    for c in &mut boundary.c {
        for v in c.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }

    let eval_input = |model: &Model| match model.config.encoder {
        Encoder::Dnn => EncoderInput::Dnn { day: &window[0] },
        Encoder::Lstm => EncoderInput::Lstm { window: &window, boundary: &boundary },
    };

    let eval = model.evaluate(&eval_input(&model), &target).expect("forward");
    let mut grads = model.params.zeros_like();
    model.backward(&eval, &mut grads);

    let mut loss_fn = |params: &ParamSet| {
        model
            .evaluate_with(params, &eval_input(&model), &target)
            .expect("forward in gradcheck")
            .loss
    };
    crate::numerics::gradient_check(&mut loss_fn, &model.params, &grads)
}
