//! Style-based generator: mapping MLP, modulated-convolution synthesis with a
//! skip-connected RGB path, truncation, per-layer perturbation and an
//! intermediate feature tap.
//!
//! Latent index layout follows the usual StyleGAN2 convention: the first block
//! (4×4) reads code 0 for its conv and code 1 for its RGB layer; every later
//! block `b` reads codes `2b-1`, `2b` for its two convs and `2b+1` for RGB, so a
//! generator with `n` blocks consumes `2n` codes.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Archive;
use crate::error::{invalid, Error, Result};
use crate::latent::{seeded_rng, LatentSeq, LatentW, LatentZ};

const LRELU_SLOPE: f32 = 0.2;
const LRELU_GAIN: f32 = std::f32::consts::SQRT_2;
const DEMOD_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSign {
    /// `w̄ − ψ(w_rand − w̄)`
    #[default]
    Mirrored,
    /// `w̄ + ψ(w_rand − w̄)`
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Spatial size of each synthesis block, starting at 4.
    pub resolutions: Vec<usize>,
    /// Output channels of each synthesis block.
    pub channels: Vec<usize>,
    pub mapping_depth: usize,
    pub feature_tap_resolution: usize,
    /// Tap the closest available block when no block matches
    /// `feature_tap_resolution`.
    #[serde(default)]
    pub tap_fallback: bool,
    #[serde(default)]
    pub truncation_sign: TruncationSign,
    /// Seed for the frozen per-layer noise maps.
    #[serde(default)]
    pub noise_seed: u64,
    /// Leading channels of every block that carry a fixed positional code
    /// instead of image content (procedural weights only).
    #[serde(default)]
    pub coordinate_channels: usize,
}

impl GeneratorConfig {
    /// 256×256 layout with the 64×64 feature tap.
    pub fn standard_256() -> Self {
        Self {
            latent_dim: 512,
            resolutions: vec![4, 8, 16, 32, 64, 128, 256],
            channels: vec![512, 512, 512, 512, 512, 256, 128],
            mapping_depth: 8,
            feature_tap_resolution: 64,
            tap_fallback: false,
            truncation_sign: TruncationSign::Mirrored,
            noise_seed: 0,
            coordinate_channels: 0,
        }
    }

    /// Desk-scale 32×32 generator with eight W+ codes.
    pub fn toy_32(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            resolutions: vec![4, 8, 16, 32],
            channels: vec![40, 40, 24, 24],
            mapping_depth: 3,
            feature_tap_resolution: 64,
            tap_fallback: true,
            truncation_sign: TruncationSign::Mirrored,
            noise_seed: 0,
            coordinate_channels: 8,
        }
    }

    pub fn num_wplus(&self) -> usize {
        2 * self.resolutions.len()
    }

    pub fn output_resolution(&self) -> usize {
        *self.resolutions.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.resolutions.is_empty() || self.resolutions.len() != self.channels.len() {
            return Err(Error::Config(
                "resolutions and channels must be non-empty and of equal length".into(),
            ));
        }
        if self.resolutions[0] != 4 {
            return Err(Error::Config("the first synthesis block must be 4x4".into()));
        }
        if self.resolutions.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config("each block must double the resolution".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.channels.iter().any(|&c| c <= self.coordinate_channels) {
            return Err(Error::Config("every block needs channels beyond the coordinate channels".into()));
        }
        Ok(())
    }

    /// Block index whose output feeds the feature tap and whether it is a
    /// substitute for the requested resolution.
    pub fn tap_block(&self) -> Result<(usize, bool)> {
        if let Some(i) = self
            .resolutions
            .iter()
            .position(|&r| r == self.feature_tap_resolution)
        {
            return Ok((i, false));
        }
        if !self.tap_fallback {
            return Err(Error::Config(format!(
                "no synthesis block at the feature tap resolution {}",
                self.feature_tap_resolution
            )));
        }
        let target = self.feature_tap_resolution as i64;
        let (i, _) = self
            .resolutions
            .iter()
            .enumerate()
            .min_by_key(|(i, &r)| ((r as i64 - target).abs(), usize::MAX - i))
            .expect("non-empty resolutions");
        Ok((i, true))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    /// `H × W × 3`, values in `[-1, 1]`.
    pub pixels: Array3<f32>,
}

impl ImageTensor {
    pub fn resolution(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Mean over channels, used by block matching.
    pub fn luminance(&self) -> Array2<f32> {
        self.pixels.mean_axis(Axis(2)).expect("three channels")
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    /// `S × S × C` activations.
    pub activations: Array3<f32>,
    /// Resolution of the block the activations came from.
    pub source_resolution: usize,
    /// Set when the configured tap resolution was unavailable.
    pub substituted: bool,
}

impl FeatureGrid {
    pub fn size(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.activations.shape()[2]
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, f32> {
        self.activations.slice(s![row, col, ..])
    }
}

#[derive(Debug, Clone)]
struct ModConv {
    /// `cin × latent_dim`
    affine_weight: Array2<f32>,
    affine_bias: Array1<f32>,
    /// `cout × (cin·k·k)`
    weight: Array2<f32>,
    bias: Array1<f32>,
    kernel: usize,
    demodulate: bool,
    activate: bool,
    noise_strength: f32,
    /// Leading output channels that receive no noise.
    noise_skip: usize,
    latent_index: usize,
}

impl ModConv {
    fn new(cin: usize, cout: usize, kernel: usize, dim: usize, latent_index: usize, rgb: bool) -> Self {
        Self {
            affine_weight: Array2::zeros((cin, dim)),
            affine_bias: Array1::ones(cin),
            weight: Array2::zeros((cout, cin * kernel * kernel)),
            bias: Array1::zeros(cout),
            kernel,
            demodulate: !rgb,
            activate: !rgb,
            noise_strength: 0.0,
            noise_skip: 0,
            latent_index,
        }
    }

    fn cin(&self) -> usize {
        self.affine_weight.nrows()
    }

    fn cout(&self) -> usize {
        self.weight.nrows()
    }

    fn style(&self, w: ArrayView1<'_, f64>) -> Array1<f32> {
        let w32 = w.mapv(|x| x as f32);
        self.affine_weight.dot(&w32) + &self.affine_bias
    }

    fn forward(&self, x: &Array3<f32>, w: &LatentSeq, noise: Option<&Array2<f32>>) -> Array3<f32> {
        let (cin, h, wd) = x.dim();
        debug_assert_eq!(cin, self.cin());
        let style = self.style(w.layer(self.latent_index));
        let kk = self.kernel * self.kernel;
        let mut weight = self.weight.clone();
        for mut row in weight.rows_mut() {
            for (i, &si) in style.iter().enumerate() {
                row.slice_mut(s![i * kk..(i + 1) * kk]).mapv_inplace(|v| v * si);
            }
            if self.demodulate {
                let norm = (row.iter().map(|v| v * v).sum::<f32>() + DEMOD_EPS).sqrt();
                row.mapv_inplace(|v| v / norm);
            }
        }
        let cols = if self.kernel == 1 {
            x.to_shape((cin, h * wd)).unwrap().to_owned()
        } else {
            im2col3(x)
        };
        let out = weight.dot(&cols);
        let mut out = out.into_shape_with_order((self.cout(), h, wd)).unwrap();
        if let Some(n) = noise {
            if self.noise_strength != 0.0 {
                let scaled = n * self.noise_strength;
                let mut rest = out.slice_mut(s![self.noise_skip.., .., ..]);
                rest += &scaled.insert_axis(Axis(0));
            }
        }
        for (mut ch, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            if self.activate {
                ch.mapv_inplace(|v| {
                    let v = v + b;
                    LRELU_GAIN * if v >= 0.0 { v } else { LRELU_SLOPE * v }
                });
            } else {
                ch.mapv_inplace(|v| v + b);
            }
        }
        out
    }
}

/// Plane `j` of the coordinate channels on the 4×4 grid: cosines of `f`
/// half-cycles across the image along the two axes and both diagonals, with
/// `f = 1, 2, …` advancing every four planes.
fn coordinate_plane(j: usize) -> Array2<f32> {
    let f = (j / 4 + 1) as f32;
    Array2::from_shape_fn((4, 4), |(y, x)| {
        let (u, v) = ((x as f32 + 0.5) / 4.0, (y as f32 + 0.5) / 4.0);
        let t = match j % 4 {
            0 => u,
            1 => v,
            2 => (u + v) / 2.0,
            _ => (u - v + 1.0) / 2.0,
        };
        (std::f32::consts::PI * f * t).cos()
    })
}

/// 3×3, zero-padded im2col: `(cin·9) × (h·w)`.
fn im2col3(x: &Array3<f32>) -> Array2<f32> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::zeros((cin * 9, h * w));
    for c in 0..cin {
        let plane = x.index_axis(Axis(0), c);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(c * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().unwrap();
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = plane[[sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Bilinear ×2 upsampling with half-pixel centres.
fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let coord = |o: usize, n: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    let ys: Vec<_> = (0..oh).map(|o| coord(o, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| coord(o, w)).collect();
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        let p = x.index_axis(Axis(0), ch);
        let mut q = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = p[[y0, x0]] * (1.0 - fx) + p[[y0, x1]] * fx;
                let bot = p[[y1, x0]] * (1.0 - fx) + p[[y1, x1]] * fx;
                q[[oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Block {
    resolution: usize,
    conv0: Option<ModConv>,
    conv1: ModConv,
    to_rgb: ModConv,
    noise0: Option<Array2<f32>>,
    noise1: Array2<f32>,
}

/// Draw the `w'_rand` codes used to perturb every layer.
pub type PerturbDraws = Vec<LatentW>;

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    /// `(weight [out × in], bias)` per mapping layer.
    mapping: Vec<(Array2<f32>, Array1<f32>)>,
    constant: Array3<f32>,
    blocks: Vec<Block>,
}

impl Generator {
    /// Zero-weight generator with the architecture of `config`.
    fn skeleton(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mapping = (0..config.mapping_depth)
            .map(|_| (Array2::zeros((d, d)), Array1::zeros(d)))
            .collect();
        let c0 = config.channels[0];
        let mut noise_rng = seeded_rng(config.noise_seed, 0x6e6f697365);
        let mut noise = |r: usize| -> Array2<f32> {
            Array2::from_shape_fn((r, r), |_| noise_rng.sample::<f32, _>(StandardNormal))
        };
        let mut blocks = Vec::with_capacity(config.resolutions.len());
        let mut cin = c0;
        for (b, (&res, &cout)) in config.resolutions.iter().zip(&config.channels).enumerate() {
            let block = if b == 0 {
                Block {
                    resolution: res,
                    conv0: None,
                    conv1: ModConv::new(cin, cout, 3, d, 0, false),
                    to_rgb: ModConv::new(cout, 3, 1, d, 1, true),
                    noise0: None,
                    noise1: noise(res),
                }
            } else {
                Block {
                    resolution: res,
                    conv0: Some(ModConv::new(cin, cout, 3, d, 2 * b - 1, false)),
                    conv1: ModConv::new(cout, cout, 3, d, 2 * b, false),
                    to_rgb: ModConv::new(cout, 3, 1, d, 2 * b + 1, true),
                    noise0: Some(noise(res)),
                    noise1: noise(res),
                }
            };
            let mut block = block;
            for conv in block.conv0.iter_mut().chain([&mut block.conv1]) {
                conv.noise_skip = config.coordinate_channels;
            }
            blocks.push(block);
            cin = cout;
        }
        Ok(Self {
            mapping,
            constant: Array3::zeros((c0, 4, 4)),
            blocks,
            config,
        })
    }

    /// Generator with procedurally drawn weights (StyleGAN-style
    /// initialisation with a smooth constant input).
    pub fn procedural(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut g = Self::skeleton(config)?;
        let mut rng = seeded_rng(seed, 0);
        let d = g.config.latent_dim;
        let mut normal = |shape: (usize, usize), scale: f32| -> Array2<f32> {
            Array2::from_shape_fn(shape, |_| rng.sample::<f32, _>(StandardNormal) * scale)
        };
        for (w, _) in &mut g.mapping {
            *w = normal((d, d), 1.0 / (d as f32).sqrt());
        }
        let c0 = g.constant.dim().0;
        g.constant = normal((c0, 16), 1.0).into_shape_with_order((c0, 4, 4)).unwrap();
        let n = g.config.coordinate_channels;
        for (j, mut plane) in g.constant.outer_iter_mut().take(n).enumerate() {
            // Positive planes stay in the linear part of the activation, so
            // every conv scales them by exactly the activation gain.
            let convs = 2 * g.blocks.len() - 1;
            plane.assign(&coordinate_plane(j).mapv(|v| (v + 1.5) / LRELU_GAIN.powi(convs as i32)));
        }
        for block in &mut g.blocks {
            let convs = block.conv0.iter_mut().chain([&mut block.conv1, &mut block.to_rgb]);
            for conv in convs {
                let cin = conv.cin();
                conv.affine_weight = normal((cin, d), 1.0 / (d as f32).sqrt());
                conv.affine_weight.slice_mut(s![..n, ..]).fill(0.0);
                let fan_in = ((cin - n) * conv.kernel * conv.kernel) as f32;
                conv.weight = normal(conv.weight.dim(), 1.0 / fan_in.sqrt());
                let kk = conv.kernel * conv.kernel;
                // Content ignores the coordinate channels; a coordinate row is
                // a centre-tap identity, which demodulation makes style-free.
                conv.weight.slice_mut(s![.., ..n * kk]).fill(0.0);
                if conv.activate {
                    for o in 0..n {
                        conv.weight.row_mut(o).fill(0.0);
                        conv.weight[[o, o * kk + kk / 2]] = 1.0;
                    }
                    conv.noise_strength = 0.05;
                }
            }
        }
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn num_wplus(&self) -> usize {
        self.config.num_wplus()
    }

    pub fn resolution(&self) -> usize {
        self.config.output_resolution()
    }

    fn check_seq(&self, w: &LatentSeq) -> Result<()> {
        w.check_shape(self.num_wplus(), self.latent_dim())
    }

    pub fn map_z_to_w(&self, z: &LatentZ) -> Result<LatentW> {
        if z.dim() != self.latent_dim() {
            return Err(invalid(format!(
                "z has length {}, expected {}",
                z.dim(),
                self.latent_dim()
            )));
        }
        let zf = z.0.mapv(|v| v as f32);
        let rms = (zf.iter().map(|v| v * v).sum::<f32>() / zf.len() as f32 + 1e-8).sqrt();
        let mut h = zf / rms;
        for (weight, bias) in &self.mapping {
            h = weight.dot(&h) + bias;
            h.mapv_inplace(|v| LRELU_GAIN * if v >= 0.0 { v } else { LRELU_SLOPE * v });
        }
        Ok(LatentW(h.mapv(f64::from)))
    }

    /// Mapped code of a fresh standard-normal draw.
    pub fn sample_w<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentW {
        let z = LatentZ::sample(self.latent_dim(), rng);
        self.map_z_to_w(&z).expect("sampled z has the latent dimension")
    }

    pub fn average_latent(&self, n_samples: usize, seed: u64) -> Result<LatentW> {
        if n_samples == 0 {
            return Err(invalid("average_latent needs at least one sample"));
        }
        let mut rng = seeded_rng(seed, 0);
        let mut acc = Array1::<f64>::zeros(self.latent_dim());
        for _ in 0..n_samples {
            acc += &self.sample_w(&mut rng).0;
        }
        Ok(LatentW(acc / n_samples as f64))
    }

    pub fn truncate(&self, w_rand: &LatentW, w_bar: &LatentW, psi: f64) -> Result<LatentW> {
        truncate(w_rand, w_bar, psi, self.config.truncation_sign)
    }

    /// Perturbs every layer toward/away from an independent mapped draw.
    /// Layers listed in `hold` are returned unchanged.
    pub fn perturb(
        &self,
        w_before: &LatentSeq,
        phi: f64,
        seed: u64,
        hold: &[usize],
    ) -> Result<LatentSeq> {
        self.check_seq(w_before)?;
        let mut rng = seeded_rng(seed, 1);
        let draws: PerturbDraws = (0..w_before.num_layers())
            .map(|_| self.sample_w(&mut rng))
            .collect();
        perturb_with(w_before, phi, &draws, hold)
    }

    pub fn synthesize(&self, w: &LatentSeq) -> Result<ImageTensor> {
        Ok(self.run(w, false)?.0)
    }

    pub fn extract_feature_map(&self, w: &LatentSeq) -> Result<FeatureGrid> {
        let (_, features) = self.run(w, true)?;
        Ok(features.expect("tap requested"))
    }

    pub fn synthesize_with_features(&self, w: &LatentSeq) -> Result<(ImageTensor, FeatureGrid)> {
        self.config.tap_block()?;
        let (img, features) = self.run(w, false)?;
        Ok((img, features.expect("tap block exists")))
    }

    fn run(&self, w: &LatentSeq, stop_at_tap: bool) -> Result<(ImageTensor, Option<FeatureGrid>)> {
        self.check_seq(w)?;
        let tap = self.config.tap_block();
        if stop_at_tap {
            tap.as_ref().map_err(|e| Error::Config(e.to_string()))?;
        }
        let tap = tap.ok();
        let mut x = self.constant.clone();
        let mut rgb: Option<Array3<f32>> = None;
        let mut features = None;
        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(conv0) = &block.conv0 {
                x = upsample2(&x);
                x = conv0.forward(&x, w, block.noise0.as_ref());
            }
            x = block.conv1.forward(&x, w, Some(&block.noise1));
            if let Some((tap_b, substituted)) = tap {
                if tap_b == b {
                    features = Some(FeatureGrid {
                        activations: x.view().permuted_axes([1, 2, 0]).to_owned(),
                        source_resolution: block.resolution,
                        substituted,
                    });
                    if stop_at_tap {
                        let empty = ImageTensor {
                            pixels: Array3::zeros((0, 0, 3)),
                        };
                        return Ok((empty, features));
                    }
                }
            }
            let y = block.to_rgb.forward(&x, w, None);
            rgb = Some(match rgb {
                Some(prev) => upsample2(&prev) + y,
                None => y,
            });
        }
        let rgb = rgb.expect("at least one block");
        let pixels = rgb
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .mapv(|v| v.clamp(-1.0, 1.0));
        Ok((ImageTensor { pixels }, features))
    }

    /// Style-affine matrices (`cin × latent_dim`) of every conv reading one of
    /// `layers`, stacked row-wise.
    pub fn style_affines(&self, layers: &[usize]) -> Array2<f64> {
        let mats: Vec<_> = self
            .blocks
            .iter()
            .flat_map(|b| b.conv0.iter().chain([&b.conv1, &b.to_rgb]))
            .filter(|c| layers.contains(&c.latent_index))
            .map(|c| c.affine_weight.mapv(f64::from))
            .collect();
        if mats.is_empty() {
            return Array2::zeros((0, self.latent_dim()));
        }
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal latent dims")
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> Vec<f32> {
            a.as_standard_layout().iter().copied().collect()
        }
        let mut out = Vec::new();
        for (i, (w, b)) in self.mapping.iter().enumerate() {
            out.push((format!("mapping.{i}.weight"), w.shape().to_vec(), flat(w)));
            out.push((format!("mapping.{i}.bias"), b.shape().to_vec(), flat(b)));
        }
        out.push((
            "synthesis.const".into(),
            self.constant.shape().to_vec(),
            flat(&self.constant),
        ));
        for block in &self.blocks {
            let convs = block
                .conv0
                .iter()
                .map(|c| ("conv0", c))
                .chain([("conv1", &block.conv1), ("torgb", &block.to_rgb)]);
            for (tag, c) in convs {
                let p = format!("synthesis.b{}.{tag}", block.resolution);
                let k = c.kernel;
                out.push((format!("{p}.affine.weight"), c.affine_weight.shape().to_vec(), flat(&c.affine_weight)));
                out.push((format!("{p}.affine.bias"), c.affine_bias.shape().to_vec(), flat(&c.affine_bias)));
                out.push((format!("{p}.weight"), vec![c.cout(), c.cin(), k, k], flat(&c.weight)));
                out.push((format!("{p}.bias"), c.bias.shape().to_vec(), flat(&c.bias)));
                out.push((format!("{p}.noise_strength"), vec![1], vec![c.noise_strength]));
            }
        }
        out
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("generator", json!(self.config));
        for (name, shape, data) in self.named_tensors() {
            a.push(name, &shape, data);
        }
        a
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.require_kind("generator")?;
        let config: GeneratorConfig = serde_json::from_value(a.config.clone())
            .map_err(|e| Error::Config(format!("generator config: {e}")))?;
        let mut g = Self::skeleton(config)?;
        fn fill<D: ndarray::Dimension>(dst: &mut ndarray::Array<f32, D>, src: &[f32]) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s;
            }
        }
        for (i, (w, b)) in g.mapping.iter_mut().enumerate() {
            let d = w.nrows();
            fill(w, a.get(&format!("mapping.{i}.weight"), &[d, d])?);
            fill(b, a.get(&format!("mapping.{i}.bias"), &[d])?);
        }
        let shape = g.constant.shape().to_vec();
        fill(&mut g.constant, a.get("synthesis.const", &shape)?);
        for block in &mut g.blocks {
            let res = block.resolution;
            let convs = block
                .conv0
                .iter_mut()
                .map(|c| ("conv0", c))
                .chain([("conv1", &mut block.conv1), ("torgb", &mut block.to_rgb)]);
            for (tag, c) in convs {
                let p = format!("synthesis.b{res}.{tag}");
                let (cin, cout, k, d) = (c.cin(), c.cout(), c.kernel, c.affine_weight.ncols());
                fill(&mut c.affine_weight, a.get(&format!("{p}.affine.weight"), &[cin, d])?);
                fill(&mut c.affine_bias, a.get(&format!("{p}.affine.bias"), &[cin])?);
                fill(&mut c.weight, a.get(&format!("{p}.weight"), &[cout, cin, k, k])?);
                fill(&mut c.bias, a.get(&format!("{p}.bias"), &[cout])?);
                c.noise_strength = a.get(&format!("{p}.noise_strength"), &[1])?[0];
            }
        }
        Ok(g)
    }

    /// Every parameter as `(name, values)`, in archive order.
    pub fn parameters(&self) -> Vec<(String, Vec<f32>)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _, d)| (n, d))
            .collect()
    }
}

/// Truncation toward the average latent with the configured sign.
pub fn truncate(w_rand: &LatentW, w_bar: &LatentW, psi: f64, sign: TruncationSign) -> Result<LatentW> {
    if w_rand.dim() != w_bar.dim() {
        return Err(invalid(format!(
            "truncate: lengths differ ({} vs {})",
            w_rand.dim(),
            w_bar.dim()
        )));
    }
    if !psi.is_finite() {
        return Err(invalid("truncate: psi must be finite"));
    }
    let diff = &w_rand.0 - &w_bar.0;
    Ok(LatentW(match sign {
        TruncationSign::Mirrored => &w_bar.0 - &(diff * psi),
        TruncationSign::Conventional => &w_bar.0 + &(diff * psi),
    }))
}

/// `w_after = w_before − φ(w'_rand − w_before)` per layer with the supplied
/// draws; layers in `hold` are copied unchanged.
pub fn perturb_with(
    w_before: &LatentSeq,
    phi: f64,
    draws: &[LatentW],
    hold: &[usize],
) -> Result<LatentSeq> {
    if !phi.is_finite() {
        return Err(invalid("perturb: phi must be finite"));
    }
    if draws.len() != w_before.num_layers() || draws.iter().any(|d| d.dim() != w_before.dim()) {
        return Err(invalid("perturb: one draw of the latent dimension per layer is required"));
    }
    let mut out = w_before.clone();
    for (l, (mut row, draw)) in out.codes_mut().rows_mut().into_iter().zip(draws).enumerate() {
        if hold.contains(&l) {
            continue;
        }
        let before = row.to_owned();
        row.assign(&(&before - &((&draw.0 - &before) * phi)));
    }
    Ok(out)
}
