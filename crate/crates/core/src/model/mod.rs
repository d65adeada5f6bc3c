//! The Pyramid Mixer encoder and its prediction head.
//!
//! Per layer `s` with input `X` of shape `[B, L_s, D]`:
//!
//! ```text
//! Y_b = X + swap(W2_b · σ(W1_b · swap(LN_b(X))))      sequence (behavior) axis
//! Y_f = X + W2_f · σ(W1_f · LN_f(X))                  channel (feature) axis
//! α   = sigmoid(X · g + c)                           one scalar per position
//! Z   = α ⊙ Y_b + (1 − α) ⊙ Y_f
//! X'  = conv1d(Z, K, stride, padding) + bias          input of layer s + 1
//! ```
//!
//! `Z` of every layer is one scale of the pyramid. The head mean-pools each
//! scale over its valid positions, concatenates the pooled vectors, projects
//! them to the item-embedding width and scores every item by dot product
//! against the (tied) item-ID embedding table.

mod config;
mod gradcheck;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{FieldSpec, ModelConfig};
pub use gradcheck::{gradcheck, random_batch, GradcheckReport, GroupError, GRADCHECK_TOLERANCE};
pub use params::{BoundParams, ParamStore};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, Graph, Tensor, Var};

/// Rows 0 and 1 of every embedding table are padding and unknown.
pub const RESERVED_ROWS: usize = 2;
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerAxis {
    /// Mixes along the sequence: weights map `L → latent → L`.
    Behavior,
    /// Mixes along the channels: weights map `D → latent → D`.
    Feature,
}

/// Graph handles of one mixer block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MixerBlock {
    pub axis: MixerAxis,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `Y = X + W2·σ(W1·LayerNorm(X))` along the block's axis.
///
/// `x` is `[..., L, D]`. LayerNorm always normalizes each position over
/// its channels; a behavior block then mixes the transposed `[..., D, L]` view.
pub fn mixer_block_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    block: &MixerBlock,
    activation: Activation,
    eps: f64,
) -> Result<Var> {
    let h = g.layer_norm(x, block.ln_gamma, block.ln_beta, eps)?;
    let h = match block.axis {
        MixerAxis::Behavior => g.swap_last2(h)?,
        MixerAxis::Feature => h,
    };
    let u = g.matmul(h, block.w1)?;
    let u = g.add_bias(u, block.b1)?;
    let a = g.activation(u, activation);
    let v = g.matmul(a, block.w2)?;
    let v = g.add_bias(v, block.b2)?;
    let v = match block.axis {
        MixerAxis::Behavior => g.swap_last2(v)?,
        MixerAxis::Feature => v,
    };
    g.add(x, v)
}

/// `Z = α ⊙ Y_b + (1 − α) ⊙ Y_f` with `α = sigmoid(x · gate_w + gate_b)`,
/// one gate value per position. `gate_w` is `[D, 1]`, `gate_b` is `[1]`.
pub fn adaptive_fusion<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    y_behavior: Var,
    y_feature: Var,
    gate_w: Var,
    gate_b: Var,
) -> Result<Var> {
    for other in [y_behavior, y_feature] {
        if g.shape(other) != g.shape(x) {
            return Err(Error::dim(
                "adaptive_fusion",
                format!("input {:?} vs branch {:?}", g.shape(x), g.shape(other)),
            ));
        }
    }
    let logit = g.matmul(x, gate_w)?;
    let logit = g.add_bias(logit, gate_b)?;
    let alpha = g.sigmoid(logit);
    let diff = g.sub(y_behavior, y_feature)?;
    let gated = g.mul_last_broadcast(diff, alpha)?;
    g.add(y_feature, gated)
}

/// Period scaling: a strided convolution along the sequence plus a bias.
pub fn period_scale<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let o = g.conv1d(z, kernel, stride, padding)?;
    g.add_bias(o, bias)
}

/// A scaled position is valid when its receptive field covers any valid input.
pub fn downsample_mask(
    mask: &[bool],
    batch: usize,
    len_in: usize,
    len_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<bool> {
    let mut out = vec![false; batch * len_out];
    for b in 0..batch {
        let row = &mask[b * len_in..][..len_in];
        for j in 0..len_out {
            let start = (j * stride) as isize - padding as isize;
            out[b * len_out + j] = (0..kernel as isize)
                .map(|t| start + t)
                .any(|p| p >= 0 && (p as usize) < len_in && row[p as usize]);
        }
    }
    out
}

/// Per-layer representations, finest first.
#[derive(Clone, Debug)]
pub struct PyramidOutput {
    pub scales: Vec<Var>,
    /// Validity mask of each scale, `[B · L_s]`.
    pub masks: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: PyramidOutput,
    /// `[B, num_items]`; column `j` scores item-table row `j + 2`.
    pub scores: Var,
}

/// Names and shapes of every parameter, in store order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.field_dim();
    let width = config.width;
    let mut shapes = Vec::new();
    for f in &config.fields {
        shapes.push((format!("embed.{}", f.name), vec![f.vocab, d]));
    }
    let lengths = config.scale_lengths();
    for (s, &len) in lengths.iter().enumerate() {
        let p = format!("layer{}", s + 1);
        let mut block = |kind: &str, axis_len: usize, latent: usize| {
            shapes.push((format!("{p}.{kind}.ln_gamma"), vec![width]));
            shapes.push((format!("{p}.{kind}.ln_beta"), vec![width]));
            shapes.push((format!("{p}.{kind}.w1"), vec![axis_len, latent]));
            shapes.push((format!("{p}.{kind}.b1"), vec![latent]));
            shapes.push((format!("{p}.{kind}.w2"), vec![latent, axis_len]));
            shapes.push((format!("{p}.{kind}.b2"), vec![axis_len]));
        };
        if config.cross_behavior {
            block("behavior", len, config.behavior_latent(len));
        }
        if config.cross_feature {
            block("feature", width, config.feature_latent());
        }
        if config.uses_gate() {
            shapes.push((format!("{p}.gate.w"), vec![width, 1]));
            shapes.push((format!("{p}.gate.b"), vec![1]));
        }
        if config.pyramid && s + 1 < lengths.len() {
            shapes.push((format!("{p}.scale.kernel"), vec![config.kernel, width, width]));
            shapes.push((format!("{p}.scale.bias"), vec![width]));
        }
    }
    shapes.push(("head.proj.w".into(), vec![config.layers * width, d]));
    shapes.push(("head.proj.b".into(), vec![d]));
    shapes
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidMixer<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Element> PyramidMixer<T> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Normal::new(0.0, config.embed_init_std)
            .map_err(|e| Error::Config(format!("embed_init_std: {e}")))?;
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let numel: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let values: Vec<f64> = if name.starts_with("embed.") {
                let d = shape[1];
                (0..numel)
                    .map(|i| if i < d { 0.0 } else { embed.sample(&mut rng) })
                    .collect()
            } else if leaf == "ln_gamma" {
                vec![1.0; numel]
            } else if matches!(leaf, "w1" | "w2" | "w" | "kernel") {
                // Xavier-uniform over the weight's (fan_in, fan_out).
                let fan_out = shape[shape.len() - 1];
                let fan_in = numel / fan_out;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; numel]
            };
            params.insert(name, Tensor::new(shape, values.into_iter().map(T::of).collect())?)?;
        }
        Ok(PyramidMixer { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "from_parts",
                    format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(PyramidMixer { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Element>(&self) -> PyramidMixer<U> {
        PyramidMixer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        self.params.attach(g, trainable)
    }

    /// Concatenated field embeddings, `[B, L, D]`.
    pub fn embed_sequence(&self, g: &mut Graph<T>, bound: &BoundParams, batch: &Batch) -> Result<Var> {
        let f_count = self.config.num_fields();
        if batch.fields != f_count || batch.len != self.config.max_len {
            return Err(Error::dim(
                "embed_sequence",
                format!(
                    "batch has {} fields × length {}, model expects {} × {}",
                    batch.fields, batch.len, f_count, self.config.max_len
                ),
            ));
        }
        let rows = batch.size * batch.len;
        let mut parts = Vec::with_capacity(f_count);
        for (f, spec) in self.config.fields.iter().enumerate() {
            let column: Vec<usize> = (0..rows).map(|r| batch.indices[r * f_count + f]).collect();
            if let Some(pos) = column.iter().position(|&i| i >= spec.vocab) {
                return Err(Error::Data(format!(
                    "field `{}` index {} at batch row {}, position {} exceeds vocabulary {}",
                    spec.name,
                    column[pos],
                    pos / batch.len,
                    pos % batch.len,
                    spec.vocab
                )));
            }
            let table = bound.var(&format!("embed.{}", spec.name))?;
            parts.push(g.gather(table, &column, Some(PAD))?);
        }
        let flat = g.concat_last(&parts)?;
        g.reshape(flat, &[batch.size, batch.len, self.config.width])
    }

    fn block(&self, bound: &BoundParams, layer: usize, kind: &str, axis: MixerAxis) -> Result<MixerBlock> {
        let p = |leaf: &str| bound.var(&format!("layer{layer}.{kind}.{leaf}"));
        Ok(MixerBlock {
            axis,
            ln_gamma: p("ln_gamma")?,
            ln_beta: p("ln_beta")?,
            w1: p("w1")?,
            b1: p("b1")?,
            w2: p("w2")?,
            b2: p("b2")?,
        })
    }

    /// Runs the `S` mixer layers on `x: [B, L, D]`.
    pub fn pyramid_forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        mask: &[bool],
    ) -> Result<PyramidOutput> {
        let cfg = &self.config;
        let lengths = cfg.scale_lengths();
        let batch = g.shape(x)[0];
        let mut x = x;
        let mut mask = mask.to_vec();
        let mut scales = Vec::with_capacity(cfg.layers);
        let mut masks = Vec::with_capacity(cfg.layers);
        for (s, &len) in lengths.iter().enumerate() {
            let layer = s + 1;
            debug_assert_eq!(g.shape(x)[1], len);
            let yb = match cfg.cross_behavior {
                true => {
                    let block = self.block(bound, layer, "behavior", MixerAxis::Behavior)?;
                    Some(mixer_block_forward(g, x, &block, cfg.activation, cfg.ln_eps)?)
                }
                false => None,
            };
            let yf = match cfg.cross_feature {
                true => {
                    let block = self.block(bound, layer, "feature", MixerAxis::Feature)?;
                    Some(mixer_block_forward(g, x, &block, cfg.activation, cfg.ln_eps)?)
                }
                false => None,
            };
            let z = match (yb, yf) {
                (Some(b), Some(f)) if cfg.fusion => {
                    let w = bound.var(&format!("layer{layer}.gate.w"))?;
                    let c = bound.var(&format!("layer{layer}.gate.b"))?;
                    adaptive_fusion(g, x, b, f, w, c)?
                }
                (Some(b), Some(f)) => {
                    let sum = g.add(b, f)?;
                    g.scale(sum, 0.5)
                }
                (Some(y), None) | (None, Some(y)) => y,
                (None, None) => x,
            };
            scales.push(z);
            masks.push(mask.clone());
            x = if cfg.pyramid && layer < cfg.layers {
                let kernel = bound.var(&format!("layer{layer}.scale.kernel"))?;
                let bias = bound.var(&format!("layer{layer}.scale.bias"))?;
                let next = lengths[s + 1];
                mask = downsample_mask(&mask, batch, len, next, cfg.kernel, cfg.stride, cfg.padding);
                period_scale(g, z, kernel, bias, cfg.stride, cfg.padding)?
            } else {
                z
            };
        }
        Ok(PyramidOutput {
            scales,
            masks,
            lengths,
        })
    }

    /// Pool every scale, project, and score the full item vocabulary.
    pub fn score_items(&self, g: &mut Graph<T>, bound: &BoundParams, pyramid: &PyramidOutput) -> Result<Var> {
        let pooled = pyramid
            .scales
            .iter()
            .zip(&pyramid.masks)
            .map(|(&z, m)| g.masked_mean_pool(z, m))
            .collect::<Result<Vec<_>>>()?;
        let user = g.concat_last(&pooled)?;
        let user = g.matmul(user, bound.var("head.proj.w")?)?;
        let user = g.add_bias(user, bound.var("head.proj.b")?)?;
        let item_table = bound.var(&format!("embed.{}", self.config.fields[0].name))?;
        let items = g.slice_rows(item_table, RESERVED_ROWS)?;
        g.matmul_nt(user, items)
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundParams, batch: &Batch) -> Result<ForwardOutput> {
        let x = self.embed_sequence(g, bound, batch)?;
        let pyramid = self.pyramid_forward(g, bound, x, &batch.mask)?;
        let scores = self.score_items(g, bound, &pyramid)?;
        Ok(ForwardOutput { pyramid, scores })
    }

    /// Inference-only scores, `[B, num_items]`.
    pub fn scores(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, batch)?;
        Ok(g.value(out.scores).clone())
    }
}
