//! Transformer encoder-decoder that turns a set of user annotations into
//! per-layer latent directions.
//!
//! Encoder tokens fuse a projected motion vector with a projected generator
//! feature read at the annotated pixel; they carry no positional encoding, so
//! the encoder is permutation-equivariant and the decoder's cross-attention
//! makes the directions invariant to annotation order. Decoder queries are the
//! trainable W+ codes projected to the model width plus learned per-layer
//! position embeddings. Both stacks are pre-norm with GELU feed-forward
//! sublayers.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Gradients, ParamId, ParamStore, Real, Tape, Var};
use crate::checkpoint::Archive;
use crate::error::{invalid, Error, Result};
use crate::generator::FeatureGrid;
use crate::latent::{seeded_rng, LatentSeq};

const FEATURE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionVector(pub [f64; 3]);

impl MotionVector {
    pub const ZERO: Self = Self([0.0; 3]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Pixel coordinates: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelPosition {
    pub x: i64,
    pub y: i64,
}

impl PixelPosition {
    pub fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, resolution: usize) -> bool {
        let r = resolution as i64;
        (0..r).contains(&self.x) && (0..r).contains(&self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserInput {
    pub motion: MotionVector,
    pub position: PixelPosition,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UserInputSet {
    pub items: Vec<UserInput>,
}

impl UserInputSet {
    pub fn new(items: Vec<UserInput>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub latent_dim: usize,
    /// Number of W+ codes of the generator being edited.
    pub num_wplus: usize,
    pub image_resolution: usize,
    pub feature_channels: usize,
    pub model_dim: usize,
    /// Width of each of the two encoder input projections.
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub feed_forward_dim: usize,
    pub trainable_layers: Vec<usize>,
    pub use_style_features: bool,
    pub use_position_embeddings: bool,
    /// Learned extra memory row for cross-attention. Attention to it shrinks
    /// the contribution of a small input set, which plain softmax pooling
    /// cannot tell apart from many identical inputs.
    #[serde(default)]
    pub null_memory: bool,
}

impl TransformerConfig {
    /// Full-width configuration for a generator with the given geometry.
    pub fn standard(latent_dim: usize, num_wplus: usize, image_resolution: usize, feature_channels: usize) -> Self {
        Self {
            latent_dim,
            num_wplus,
            image_resolution,
            feature_channels,
            model_dim: 512,
            token_dim: 256,
            heads: 8,
            layers: 6,
            feed_forward_dim: 2048,
            trainable_layers: (0..6.min(num_wplus)).collect(),
            use_style_features: true,
            use_position_embeddings: true,
            null_memory: true,
        }
    }

    /// Narrow configuration for desk-scale experiments.
    pub fn small(latent_dim: usize, num_wplus: usize, image_resolution: usize, feature_channels: usize, model_dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            model_dim,
            token_dim: model_dim / 2,
            heads,
            layers,
            feed_forward_dim: 4 * model_dim,
            ..Self::standard(latent_dim, num_wplus, image_resolution, feature_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.trainable_layers.is_empty() {
            return Err(Error::Config("trainable_layers must be non-empty".into()));
        }
        if let Some(&l) = self.trainable_layers.iter().find(|&&l| l >= self.num_wplus) {
            return Err(Error::Config(format!(
                "trainable layer {l} outside [0, {})",
                self.num_wplus
            )));
        }
        let mut sorted = self.trainable_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.trainable_layers.len() {
            return Err(Error::Config("trainable_layers contains duplicates".into()));
        }
        if self.latent_dim == 0 || self.token_dim == 0 || self.image_resolution == 0 || self.feature_channels == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One direction per trainable layer, aligned with `layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDirection {
    pub layers: Vec<usize>,
    pub directions: Array2<f64>,
}

/// Feature-grid cell for pixel `p` (nearest cell under floor scaling).
pub fn feature_cell(grid_size: usize, p: PixelPosition, image_resolution: usize) -> Result<(usize, usize)> {
    if !p.in_bounds(image_resolution) {
        return Err(invalid(format!(
            "position ({}, {}) outside the {image_resolution}x{image_resolution} image",
            p.x, p.y
        )));
    }
    let map = |v: i64| (v as usize * grid_size) / image_resolution;
    Ok((map(p.x), map(p.y)))
}

pub fn sample_feature(features: &FeatureGrid, p: PixelPosition, image_resolution: usize) -> Result<Array1<f32>> {
    let (cx, cy) = feature_cell(features.size(), p, image_resolution)?;
    Ok(features.cell(cy, cx).to_owned())
}

/// `w + α·d` on the listed layers; every other layer is copied.
pub fn apply_directions(w_before: &LatentSeq, dirs: &LatentDirection, alpha: f64) -> Result<LatentSeq> {
    if !alpha.is_finite() {
        return Err(invalid("alpha must be finite"));
    }
    if dirs.directions.ncols() != w_before.dim() {
        return Err(invalid("direction width differs from the latent dimension"));
    }
    let mut out = w_before.clone();
    for (row, &layer) in dirs.directions.rows().into_iter().zip(&dirs.layers) {
        let mut code = out.codes_mut().row_mut(layer);
        code.zip_mut_with(&row, |w, &d| *w += alpha * d);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

/// Per-channel mean and inverse standard deviation over the whole feature
/// map. Features are standardised with these before tokenisation so that
/// what distinguishes one position from another is not drowned by offsets
/// shared by every position.
fn channel_stats(features: &FeatureGrid) -> (Vec<f64>, Vec<f64>) {
    let c = features.channels();
    let n = (features.size() * features.size()) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for lane in features.activations.lanes(Axis(2)) {
        for (j, &v) in lane.iter().enumerate() {
            mean[j] += f64::from(v);
            sq[j] += f64::from(v) * f64::from(v);
        }
    }
    let inv_std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &s)| {
            *m /= n;
            1.0 / ((s / n - *m * *m).max(0.0) + FEATURE_EPS).sqrt()
        })
        .collect();
    (mean, inv_std)
}

#[derive(Debug, Clone)]
struct Layout {
    motion_in: Linear,
    feature_in: Linear,
    fuse: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    latent_in: Linear,
    position: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    head: Linear,
    null_memory: Option<ParamId>,
}

struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.random_range(-bound..bound)));
        Linear {
            weight: self.store.add(format!("{name}.weight"), w),
            bias: self.store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.store.add(format!("{name}.weight"), Array2::zeros((fan_in, fan_out))),
            bias: self.store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: self.store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    fn attention(&mut self, name: &str, dim: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            out: self.linear(&format!("{name}.out"), dim, dim),
        }
    }

    fn feed_forward(&mut self, name: &str, dim: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), dim, hidden),
            down: self.linear(&format!("{name}.down"), hidden, dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentTransformer<T = f32> {
    config: TransformerConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> LatentTransformer<T> {
    /// Fresh model; the direction head starts at zero so the untrained model is
    /// the identity edit.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed, 0);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let (d, tok, ff) = (config.model_dim, config.token_dim, config.feed_forward_dim);
        let motion_in = b.linear("encoder.motion_in", 3, tok);
        let feature_in = b.linear("encoder.feature_in", config.feature_channels, tok);
        let fuse = b.linear("encoder.fuse", 2 * tok, d);
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer {
                norm_attn: b.norm(&format!("encoder.{i}.norm_attn"), d),
                attn: b.attention(&format!("encoder.{i}.attn"), d),
                norm_ff: b.norm(&format!("encoder.{i}.norm_ff"), d),
                ff: b.feed_forward(&format!("encoder.{i}.ff"), d, ff),
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let latent_in = b.linear("decoder.latent_in", config.latent_dim, d);
        let n = config.trainable_layers.len();
        let pos = Array2::from_shape_fn((n, d), |_| T::lit(0.02 * b.rng.sample::<f64, _>(StandardNormal)));
        let position = b.store.add("decoder.position", pos);
        let decoder = (0..config.layers)
            .map(|i| DecoderLayer {
                norm_self: b.norm(&format!("decoder.{i}.norm_self"), d),
                self_attn: b.attention(&format!("decoder.{i}.self_attn"), d),
                norm_cross: b.norm(&format!("decoder.{i}.norm_cross"), d),
                cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), d),
                norm_ff: b.norm(&format!("decoder.{i}.norm_ff"), d),
                ff: b.feed_forward(&format!("decoder.{i}.ff"), d, ff),
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm", d);
        let head = b.zero_linear("decoder.head", d, config.latent_dim);
        let null_memory = config.null_memory.then(|| {
            let row = Array2::from_shape_fn((1, d), |_| T::lit(0.02 * b.rng.sample::<f64, _>(StandardNormal)));
            b.store.add("decoder.null_memory", row)
        });
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                motion_in,
                feature_in,
                fuse,
                encoder,
                encoder_norm,
                latent_in,
                position,
                decoder,
                decoder_norm,
                head,
                null_memory,
            },
        })
    }

    /// Replaces the zero direction head with random weights.
    pub fn randomize_head(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed, 1);
        let bound = 1.0 / (self.config.model_dim as f64).sqrt();
        for id in [self.layout.head.weight, self.layout.head.bias] {
            self.params
                .get_mut(id)
                .mapv_inplace(|_| T::lit(rng.random_range(-bound..bound)));
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// The same network evaluated in another precision.
    pub fn cast<U: Real>(&self) -> LatentTransformer<U> {
        LatentTransformer {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn linear(&self, t: &mut Tape<'_, T>, x: Var, l: Linear) -> Var {
        let w = t.param(l.weight);
        let b = t.param(l.bias);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    fn norm(&self, t: &mut Tape<'_, T>, x: Var, n: Norm) -> Var {
        let y = t.normalize_rows(x);
        let g = t.param(n.gain);
        let b = t.param(n.bias);
        let y = t.mul_row(y, g);
        t.add_row(y, b)
    }

    fn attention(&self, t: &mut Tape<'_, T>, x: Var, memory: Var, a: Attention) -> Var {
        let q = self.linear(t, x, a.q);
        let k = self.linear(t, memory, a.k);
        let v = self.linear(t, memory, a.v);
        let dh = self.config.model_dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let qh = t.slice_cols(q, h * dh, dh);
                let kh = t.slice_cols(k, h * dh, dh);
                let vh = t.slice_cols(v, h * dh, dh);
                let scores = t.matmul_t(qh, kh);
                let scores = t.scale(scores, scale);
                let weights = t.softmax_rows(scores);
                t.matmul(weights, vh)
            })
            .collect();
        let joined = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
        self.linear(t, joined, a.out)
    }

    fn feed_forward(&self, t: &mut Tape<'_, T>, x: Var, f: FeedForward) -> Var {
        let h = self.linear(t, x, f.up);
        let h = t.gelu(h);
        self.linear(t, h, f.down)
    }

    fn input_matrices(&self, inputs: &UserInputSet, features: &FeatureGrid) -> Result<(Array2<T>, Array2<T>)> {
        if inputs.is_empty() {
            return Err(invalid("at least one user input is required"));
        }
        if features.channels() != self.config.feature_channels {
            return Err(invalid(format!(
                "feature grid has {} channels, model expects {}",
                features.channels(),
                self.config.feature_channels
            )));
        }
        let k = inputs.len();
        let (mean, inv_std) = channel_stats(features);
        let mut motion = Array2::zeros((k, 3));
        let mut feats = Array2::zeros((k, self.config.feature_channels));
        for (i, item) in inputs.items.iter().enumerate() {
            if !item.motion.is_finite() {
                return Err(invalid(format!("user input {i} has a non-finite motion vector")));
            }
            for (j, &v) in item.motion.0.iter().enumerate() {
                motion[[i, j]] = T::lit(v);
            }
            let f = sample_feature(features, item.position, self.config.image_resolution)
                .map_err(|e| invalid(format!("user input {i}: {e}")))?;
            for (j, &v) in f.iter().enumerate() {
                feats[[i, j]] = T::lit((f64::from(v) - mean[j]) * inv_std[j]);
            }
        }
        Ok((motion, feats))
    }

    fn encode_on(&self, t: &mut Tape<'_, T>, inputs: &UserInputSet, features: &FeatureGrid) -> Result<Var> {
        let (motion, feats) = self.input_matrices(inputs, features)?;
        let l = &self.layout;
        let m = t.constant(motion);
        let m = self.linear(t, m, l.motion_in);
        let f = if self.config.use_style_features {
            let f = t.constant(feats);
            self.linear(t, f, l.feature_in)
        } else {
            t.constant(Array2::zeros((inputs.len(), self.config.token_dim)))
        };
        let tokens = t.concat_cols(&[m, f]);
        let mut x = self.linear(t, tokens, l.fuse);
        for layer in &l.encoder {
            let h = self.norm(t, x, layer.norm_attn);
            let h = self.attention(t, h, h, layer.attn);
            x = t.add(x, h);
            let h = self.norm(t, x, layer.norm_ff);
            let h = self.feed_forward(t, h, layer.ff);
            x = t.add(x, h);
        }
        Ok(self.norm(t, x, l.encoder_norm))
    }

    fn directions_on(
        &self,
        t: &mut Tape<'_, T>,
        w_before: &LatentSeq,
        inputs: &UserInputSet,
        features: &FeatureGrid,
    ) -> Result<Var> {
        w_before.check_shape(self.config.num_wplus, self.config.latent_dim)?;
        let mut memory = self.encode_on(t, inputs, features)?;
        let l = &self.layout;
        if let Some(id) = l.null_memory {
            let null = t.param(id);
            memory = t.concat_rows(&[memory, null]);
        }
        let codes = w_before
            .select_layers(&self.config.trainable_layers)
            .mapv(|v| T::lit(v));
        let q = t.constant(codes);
        let mut x = self.linear(t, q, l.latent_in);
        if self.config.use_position_embeddings {
            let pos = t.param(l.position);
            x = t.add(x, pos);
        }
        for layer in &l.decoder {
            let h = self.norm(t, x, layer.norm_self);
            let h = self.attention(t, h, h, layer.self_attn);
            x = t.add(x, h);
            let h = self.norm(t, x, layer.norm_cross);
            let h = self.attention(t, h, memory, layer.cross_attn);
            x = t.add(x, h);
            let h = self.norm(t, x, layer.norm_ff);
            let h = self.feed_forward(t, h, layer.ff);
            x = t.add(x, h);
        }
        let x = self.norm(t, x, l.decoder_norm);
        Ok(self.linear(t, x, l.head))
    }

    /// Encoder memory, one row per user input in input order.
    pub fn encode_user_inputs(&self, inputs: &UserInputSet, features: &FeatureGrid) -> Result<Array2<T>> {
        let mut t = Tape::new(&self.params);
        let out = self.encode_on(&mut t, inputs, features)?;
        Ok(t.value(out).clone())
    }

    pub fn estimate_directions(
        &self,
        w_before: &LatentSeq,
        inputs: &UserInputSet,
        features: &FeatureGrid,
    ) -> Result<LatentDirection> {
        let mut t = Tape::new(&self.params);
        let out = self.directions_on(&mut t, w_before, inputs, features)?;
        let directions = t.value(out).mapv(|v| v.to_f64().unwrap());
        if directions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimated latent direction".into()));
        }
        Ok(LatentDirection {
            layers: self.config.trainable_layers.clone(),
            directions,
        })
    }

    /// `w_before + α·f(w_before, U)` on the trainable layers.
    pub fn transform(
        &self,
        w_before: &LatentSeq,
        inputs: &UserInputSet,
        alpha: f64,
        features: &FeatureGrid,
    ) -> Result<LatentSeq> {
        let dirs = self.estimate_directions(w_before, inputs, features)?;
        apply_directions(w_before, &dirs, alpha)
    }

    /// Mean squared error between `w_before + f(w_before, U)` and `w_after`
    /// over the trainable layers, with parameter gradients.
    pub fn loss_and_grads(
        &self,
        w_before: &LatentSeq,
        inputs: &UserInputSet,
        features: &FeatureGrid,
        w_after: &LatentSeq,
    ) -> Result<(f64, Gradients<T>)> {
        w_after.check_shape(self.config.num_wplus, self.config.latent_dim)?;
        let mut t = Tape::new(&self.params);
        let dirs = self.directions_on(&mut t, w_before, inputs, features)?;
        let layers = &self.config.trainable_layers;
        let residual = (w_after.select_layers(layers) - w_before.select_layers(layers)).mapv(|v| T::lit(v));
        let target = t.constant(residual);
        let diff = t.sub(dirs, target);
        let loss = t.mean_square(diff);
        let value = t.scalar(loss).to_f64().unwrap();
        Ok((value, t.backward(loss)))
    }

    /// `‖f(w, U)‖²` with gradients, used for derivative checks.
    pub fn direction_energy(
        &self,
        w_before: &LatentSeq,
        inputs: &UserInputSet,
        features: &FeatureGrid,
    ) -> Result<(f64, Gradients<T>)> {
        let mut t = Tape::new(&self.params);
        let dirs = self.directions_on(&mut t, w_before, inputs, features)?;
        let n = t.value(dirs).len() as f64;
        let ms = t.mean_square(dirs);
        let energy = t.scale(ms, n);
        let value = t.scalar(energy).to_f64().unwrap();
        Ok((value, t.backward(energy)))
    }
}

impl LatentTransformer<f32> {
    pub fn to_archive(&self, extra: Value) -> Archive {
        let mut a = Archive::new("transformer", json!(self.config));
        a.extra = extra;
        for (_, p) in self.params.iter() {
            a.push(p.name.clone(), &[p.value.nrows(), p.value.ncols()], p.value.iter().copied().collect());
        }
        a
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: Value) -> Result<()> {
        self.to_archive(extra).save(path)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.require_kind("transformer")?;
        let config: TransformerConfig = serde_json::from_value(a.config.clone())
            .map_err(|e| Error::Config(format!("transformer config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let value = model.params.get_mut(id);
            let shape = [value.nrows(), value.ncols()];
            let data = a.get(&name, &shape)?;
            for (d, s) in value.iter_mut().zip(data) {
                *d = *s;
            }
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Value)> {
        let a = Archive::load(path)?;
        Ok((Self::from_archive(&a)?, a.extra.clone()))
    }
}
