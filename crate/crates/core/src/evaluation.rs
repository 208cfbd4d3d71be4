//! Synthetic benchmark: triplets from flow, image metrics, the SeFa baselines
//! and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{normalize, FlowBackend, Normalizers};
use crate::generator::{Generator, ImageTensor};
use crate::interaction::transform_with_average;
use crate::latent::{seeded_rng, LatentSeq, LatentW};
use crate::training::{mix, PairSampler};
use crate::transformer::{LatentTransformer, MotionVector, PixelPosition, UserInput, UserInputSet};

/// Keeps benchmark pairs disjoint from the training stream.
const BENCHMARK_SALT: u64 = 0x6265_6e63_6821;
const MAX_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub w_before: LatentSeq,
    pub inputs: UserInputSet,
    pub w_after: LatentSeq,
}

impl Triplet {
    pub fn k(&self) -> usize {
        self.inputs.len()
    }
}

/// `n` triplets with exactly `k` inputs each, drawn from distinct valid flow
/// pixels. Pairs with fewer than `k` valid pixels are discarded and redrawn.
pub fn generate_benchmark(
    sampler: &PairSampler<'_>,
    backend: &dyn FlowBackend,
    norms: Normalizers,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if k == 0 {
        return Err(invalid("K must be positive"));
    }
    let g = sampler.generator();
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut found = None;
        for attempt in 0..MAX_ATTEMPTS {
            let key = mix(seed ^ BENCHMARK_SALT, i, attempt);
            let (w_before, w_after) = sampler.sample(key, 0)?;
            let flow = normalize(&backend.estimate(&g.synthesize(&w_before)?, &g.synthesize(&w_after)?)?, norms)?;
            let valid: Vec<PixelPosition> = (0..flow.height() as i64)
                .flat_map(|y| (0..flow.width() as i64).map(move |x| PixelPosition::new(x, y)))
                .filter(|&p| flow.is_valid(p))
                .collect();
            if valid.len() < k {
                tracing::info!(triplet = i, attempt, valid = valid.len(), k, "too few valid flow pixels; resampling pair");
                continue;
            }
            let mut rng = seeded_rng(key, 2);
            let mut picks = index::sample(&mut rng, valid.len(), k).into_vec();
            picks.sort_unstable();
            let items = picks
                .into_iter()
                .map(|j| {
                    let p = valid[j];
                    let s = flow.at(p);
                    UserInput {
                        motion: MotionVector([f64::from(s.x), f64::from(s.y), f64::from(s.z)]),
                        position: p,
                    }
                })
                .collect();
            found = Some(Triplet {
                w_before,
                inputs: UserInputSet::new(items),
                w_after,
            });
            break;
        }
        out.push(found.ok_or_else(|| {
            Error::Backend(format!("no pair with {k} valid flow pixels after {MAX_ATTEMPTS} attempts"))
        })?);
    }
    Ok(out)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.pixels.dim() != b.pixels.dim() {
        return Err(invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.pixels.dim(),
            b.pixels.dim()
        )));
    }
    let sum: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Image distance used to rank and score edits.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Mean of per-level MSEs over a Gaussian pyramid.
#[derive(Debug, Clone, Copy)]
pub struct PyramidL2 {
    pub levels: usize,
}

impl Default for PyramidL2 {
    fn default() -> Self {
        Self { levels: 4 }
    }
}

/// Binomial 5-tap blur with mirrored borders, then 2× decimation.
fn pyramid_down(x: &Array3<f32>) -> Array3<f32> {
    const TAPS: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w, c) = x.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut rows = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                rows[[y, xx, ch]] = TAPS
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| k * x[[y, reflect(xx as isize + t as isize - 2, w), ch]])
                    .sum();
            }
        }
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::<f32>::zeros((oh, ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                out[[oy, ox, ch]] = TAPS
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| k * rows[[reflect((2 * oy) as isize + t as isize - 2, h), 2 * ox, ch]])
                    .sum();
            }
        }
    }
    out
}

impl PerceptualMetric for PyramidL2 {
    fn name(&self) -> &str {
        "pyramid-l2"
    }

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if self.levels == 0 {
            return Err(invalid("pyramid needs at least one level"));
        }
        let mut a = a.clone();
        let mut b = b.clone();
        let mut total = mse(&a, &b)?;
        for _ in 1..self.levels {
            a = ImageTensor { pixels: pyramid_down(&a.pixels) };
            b = ImageTensor { pixels: pyramid_down(&b.pixels) };
            total += mse(&a, &b)?;
        }
        Ok(total / self.levels as f64)
    }
}

/// Set-level distance such as FID; supplied externally.
pub trait DistributionMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, reference: &[ImageTensor], generated: &[ImageTensor]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SefaConfig {
    pub k: usize,
    pub range: (f64, f64),
    pub grid_points: usize,
    pub random_trials: usize,
    /// Codes edited by (and decomposed for) SeFa.
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl Default for SefaConfig {
    fn default() -> Self {
        Self {
            k: 50,
            range: (-3.0, 3.0),
            grid_points: 11,
            random_trials: 100,
            layers: (0..6).collect(),
            seed: 0,
        }
    }
}

impl SefaConfig {
    pub fn grid(&self) -> Result<Vec<f64>> {
        let (lo, hi) = self.range;
        if self.grid_points < 2 || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(invalid("greedy search needs at least two grid points over a non-empty range"));
        }
        let n = self.grid_points - 1;
        Ok((0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect())
    }
}

/// Top-`k` eigenvectors of `AᵀA` for the stacked style affines `A` of
/// `layers`, one per row, each signed so its largest component is positive.
pub fn sefa_directions(generator: &Generator, k: usize, layers: &[usize]) -> Result<Array2<f64>> {
    let d = generator.latent_dim();
    if k == 0 || k > d {
        return Err(invalid(format!("k = {k} must lie in [1, {d}]")));
    }
    let a = generator.style_affines(layers);
    if a.nrows() == 0 {
        return Err(invalid("no style affines read the requested layers"));
    }
    let m = DMatrix::from_row_iterator(a.nrows(), d, a.iter().copied());
    let eig = SymmetricEigen::new(m.transpose() * &m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut out = Array2::zeros((k, d));
    for (row, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            out[[row, j]] = sign * v[j];
        }
    }
    Ok(out)
}

fn shift(w: &LatentSeq, layers: &[usize], dir: ndarray::ArrayView1<'_, f64>, amount: f64) -> LatentSeq {
    let mut out = w.clone();
    for &l in layers {
        out.codes_mut().row_mut(l).scaled_add(amount, &dir);
    }
    out
}

#[derive(Debug, Clone)]
pub struct GreedyResult {
    pub index: usize,
    pub value: f64,
    pub score: f64,
    pub image: ImageTensor,
    pub evaluations: usize,
}

/// Scores every (direction, grid value) edit and keeps the minimiser; ties
/// go to the lowest direction index, then the lowest value.
pub fn greedy_search(
    generator: &Generator,
    directions: &Array2<f64>,
    w_before: &LatentSeq,
    target: &ImageTensor,
    grid: &[f64],
    layers: &[usize],
    metric: &dyn PerceptualMetric,
) -> Result<GreedyResult> {
    if grid.len() < 2 {
        return Err(invalid("greedy search needs at least two grid points"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<GreedyResult> = None;
    let mut evaluations = 0;
    for (i, dir) in directions.axis_iter(Axis(0)).enumerate() {
        for &v in &sorted {
            let image = generator.synthesize(&shift(w_before, layers, dir, v))?;
            let score = metric.distance(&image, target)?;
            evaluations += 1;
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(GreedyResult {
                    index: i,
                    value: v,
                    score,
                    image,
                    evaluations: 0,
                });
            }
        }
    }
    let mut best = best.ok_or_else(|| invalid("no directions to search"))?;
    best.evaluations = evaluations;
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct RandomResult {
    pub coefficients: Vec<f64>,
    pub score: f64,
    pub image: ImageTensor,
}

/// `trials` joint draws of all direction coefficients, uniform in `range`.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    generator: &Generator,
    directions: &Array2<f64>,
    w_before: &LatentSeq,
    target: &ImageTensor,
    trials: usize,
    range: (f64, f64),
    layers: &[usize],
    metric: &dyn PerceptualMetric,
    seed: u64,
) -> Result<RandomResult> {
    if trials == 0 {
        return Err(invalid("random search needs at least one trial"));
    }
    let mut rng = seeded_rng(seed, 3);
    let mut best: Option<RandomResult> = None;
    for _ in 0..trials {
        let coefficients: Vec<f64> = (0..directions.nrows()).map(|_| rng.random_range(range.0..=range.1)).collect();
        let mut w = w_before.clone();
        for (dir, &c) in directions.axis_iter(Axis(0)).zip(&coefficients) {
            w = shift(&w, layers, dir, c);
        }
        let image = generator.synthesize(&w)?;
        let score = metric.distance(&image, target)?;
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(RandomResult {
                coefficients,
                score,
                image,
            });
        }
    }
    Ok(best.expect("at least one trial"))
}

/// Edits latents inverted from a real image: directions come from the
/// average latent, then move `inverted`.
pub fn edit_inverted(
    model: &LatentTransformer<f32>,
    generator: &Generator,
    inverted: &LatentSeq,
    inputs: &UserInputSet,
    alpha: f64,
    w_bar: &LatentW,
) -> Result<LatentSeq> {
    transform_with_average(model, generator, inverted, w_bar, inputs, alpha)
}

pub enum Method<'a> {
    /// Returns `w_after`.
    Oracle,
    /// Returns `w_before`.
    Identity,
    Ours { name: String, model: &'a LatentTransformer<f32> },
    SefaGreedy { directions: Array2<f64>, config: SefaConfig },
    SefaRandom { directions: Array2<f64>, config: SefaConfig },
}

impl Method<'_> {
    pub fn name(&self) -> &str {
        match self {
            Self::Oracle => "oracle",
            Self::Identity => "identity",
            Self::Ours { name, .. } => name,
            Self::SefaGreedy { .. } => "sefa_greedy",
            Self::SefaRandom { .. } => "sefa_random",
        }
    }
}

pub struct EvalContext<'a> {
    pub generator: &'a Generator,
    pub perceptual: &'a dyn PerceptualMetric,
    pub distribution: Option<&'a dyn DistributionMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub k: usize,
    pub samples: usize,
    pub mse: f64,
    pub perceptual: f64,
    pub distribution: Option<f64>,
    /// Identifies the triplet set the aggregates were computed on.
    pub fingerprint: String,
}

/// Order-independent digest of a triplet set.
pub fn fingerprint(triplets: &[Triplet]) -> String {
    // FNV-1a per triplet, combined with a commutative sum.
    let mut acc: u64 = 0;
    for t in triplets {
        let bytes = serde_json::to_vec(t).expect("triplets serialise");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        acc = acc.wrapping_add(h);
    }
    format!("{acc:016x}-{}", triplets.len())
}

pub fn evaluate_method(method: &Method<'_>, triplets: &[Triplet], ctx: &EvalContext<'_>) -> Result<MethodReport> {
    if triplets.is_empty() {
        return Err(invalid("empty triplet set"));
    }
    let k = triplets[0].k();
    let g = ctx.generator;
    let (mut sum_mse, mut sum_perc) = (0.0, 0.0);
    let mut targets = Vec::new();
    let mut estimates = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        let target = g.synthesize(&t.w_after)?;
        let estimate = match method {
            Method::Oracle => g.synthesize(&t.w_after)?,
            Method::Identity => g.synthesize(&t.w_before)?,
            Method::Ours { model, .. } => {
                let features = g.extract_feature_map(&t.w_before)?;
                g.synthesize(&model.transform(&t.w_before, &t.inputs, 1.0, &features)?)?
            }
            Method::SefaGreedy { directions, config } => {
                greedy_search(g, directions, &t.w_before, &target, &config.grid()?, &config.layers, ctx.perceptual)?.image
            }
            Method::SefaRandom { directions, config } => {
                random_search(
                    g,
                    directions,
                    &t.w_before,
                    &target,
                    config.random_trials,
                    config.range,
                    &config.layers,
                    ctx.perceptual,
                    mix(config.seed, i as u64, 0),
                )?
                .image
            }
        };
        sum_mse += mse(&estimate, &target)?;
        sum_perc += ctx.perceptual.distance(&estimate, &target)?;
        if ctx.distribution.is_some() {
            targets.push(target);
            estimates.push(estimate);
        }
    }
    let distribution = match ctx.distribution {
        Some(d) => Some(d.distance(&targets, &estimates)?),
        None => None,
    };
    let n = triplets.len() as f64;
    Ok(MethodReport {
        method: method.name().to_string(),
        k,
        samples: triplets.len(),
        mse: sum_mse / n,
        perceptual: sum_perc / n,
        distribution,
        fingerprint: fingerprint(triplets),
    })
}

/// Table with MSE×10², perceptual×10 and the optional distribution metric.
pub fn render_table(reports: &[MethodReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>4} {:>6} {:>12} {:>16} {:>12}", "method", "K", "n", "MSE x1e2", "perceptual x10", "dist");
    for r in reports {
        let dist = r.distribution.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        let _ = writeln!(
            s,
            "{:<20} {:>4} {:>6} {:>12.6} {:>16.6} {:>12}",
            r.method,
            r.k,
            r.samples,
            r.mse * 1e2,
            r.perceptual * 10.0,
            dist
        );
    }
    s
}

fn render_curves(reports: &[MethodReport]) -> String {
    let mut s = String::from("method,k,mse,perceptual\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{}", r.method, r.k, r.mse, r.perceptual);
    }
    s
}

/// Writes `report.json`, `report.txt` and `curves.csv`. Reports for the same
/// K must come from the same triplet set.
pub fn emit_report(reports: &[MethodReport], out_dir: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(invalid("nothing to report"));
    }
    for a in reports {
        if let Some(b) = reports.iter().find(|b| b.k == a.k && b.fingerprint != a.fingerprint) {
            return Err(invalid(format!(
                "`{}` and `{}` were evaluated on different triplet sets for K = {}",
                a.method, b.method, a.k
            )));
        }
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(reports)?)?;
    fs::write(dir.join("report.txt"), render_table(reports))?;
    fs::write(dir.join("curves.csv"), render_curves(reports))?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Vec<MethodReport>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
