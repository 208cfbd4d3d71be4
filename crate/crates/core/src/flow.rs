//! Pseudo user inputs from image pairs: forward flow with optical expansion,
//! normalisation, calibration of the normalisers and grid subsampling.
//!
//! Expansion is stored as `scale − 1`, so `z = 0` means no depth change and the
//! zero motion vector is depth-neutral.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::generator::ImageTensor;
use crate::latent::seeded_rng;
use crate::training::PairSampler;
use crate::transformer::{MotionVector, PixelPosition, UserInput, UserInputSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

/// Dense forward flow `(x, y)` plus expansion `z` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub x: Array2<f32>,
    pub y: Array2<f32>,
    pub z: Array2<f32>,
    pub valid: Array2<bool>,
    pub backend: String,
    pub normalized: bool,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize, backend: impl Into<String>) -> Self {
        Self {
            x: Array2::zeros((height, width)),
            y: Array2::zeros((height, width)),
            z: Array2::zeros((height, width)),
            valid: Array2::from_elem((height, width), true),
            backend: backend.into(),
            normalized: false,
        }
    }

    pub fn height(&self) -> usize {
        self.x.nrows()
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    pub fn at(&self, p: PixelPosition) -> FlowSample {
        let idx = [p.y as usize, p.x as usize];
        FlowSample {
            x: self.x[idx],
            y: self.y[idx],
            z: self.z[idx],
        }
    }

    pub fn is_valid(&self, p: PixelPosition) -> bool {
        self.valid[[p.y as usize, p.x as usize]]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Largest `‖(x, y)‖` over valid pixels (0 when none are valid).
    pub fn max_magnitude(&self) -> f64 {
        ndarray::Zip::from(&self.x)
            .and(&self.y)
            .and(&self.valid)
            .fold(0.0f64, |m, &x, &y, &v| {
                if v {
                    m.max(f64::from(x.hypot(y)))
                } else {
                    m
                }
            })
    }

    /// Largest `|z|` over valid pixels.
    pub fn max_expansion(&self) -> f64 {
        ndarray::Zip::from(&self.z)
            .and(&self.valid)
            .fold(0.0f64, |m, &z, &v| if v { m.max(f64::from(z.abs())) } else { m })
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            x: &self.x * factor,
            y: &self.y * factor,
            z: &self.z * factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub sigma_f: f64,
    pub sigma_e: f64,
}

impl Normalizers {
    pub fn new(sigma_f: f64, sigma_e: f64) -> Result<Self> {
        if !(sigma_f > 0.0 && sigma_e > 0.0 && sigma_f.is_finite() && sigma_e.is_finite()) {
            return Err(invalid(format!(
                "normalisers must be positive and finite (sigma_f={sigma_f}, sigma_e={sigma_e})"
            )));
        }
        Ok(Self { sigma_f, sigma_e })
    }
}

pub trait FlowBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Forward flow from `a` to `b`.
    fn estimate(&self, a: &ImageTensor, b: &ImageTensor) -> Result<FlowField>;
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.pixels.dim() != b.pixels.dim() {
        return Err(invalid(format!(
            "image resolutions differ: {:?} vs {:?}",
            a.pixels.dim(),
            b.pixels.dim()
        )));
    }
    Ok(())
}

/// Exhaustive SSD block matching over integer displacements and a discrete
/// set of local scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMatching {
    pub block: usize,
    pub radius: usize,
    /// Spacing between block origins; each pixel takes the estimate of the
    /// block whose centre is nearest.
    pub stride: usize,
    pub scales: Vec<f32>,
    /// Largest accepted mean squared residual per sample.
    pub max_residual: f32,
    /// Blocks whose variance is below this are ambiguous and marked invalid.
    pub min_variance: f32,
    /// Refine displacements below one pixel with a parabolic fit.
    pub subpixel: bool,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            block: 8,
            radius: 8,
            stride: 8,
            scales: vec![0.8, 0.9, 1.0, 1.1, 1.25],
            max_residual: 0.02,
            min_variance: 1e-6,
            subpixel: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockEstimate {
    dx: f32,
    dy: f32,
    z: f32,
    valid: bool,
}

impl BlockMatching {
    fn origins(&self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=n - self.block).step_by(self.stride.max(1)).collect();
        if *v.last().unwrap() != n - self.block {
            v.push(n - self.block);
        }
        v
    }

    fn match_block(&self, a: &ImageTensor, b: &ImageTensor, oy: usize, ox: usize) -> BlockEstimate {
        let bs = self.block;
        let pa = &a.pixels;
        let count = (bs * bs * 3) as f32;

        let mut mean = 0.0f32;
        for y in oy..oy + bs {
            for x in ox..ox + bs {
                for c in 0..3 {
                    mean += pa[[y, x, c]];
                }
            }
        }
        mean /= count;
        let mut var = 0.0f32;
        for y in oy..oy + bs {
            for x in ox..ox + bs {
                for c in 0..3 {
                    var += (pa[[y, x, c]] - mean).powi(2);
                }
            }
        }
        var /= count;

        let r = self.radius as i64;
        let mut offsets: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
        offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
        let mut scales = self.scales.clone();
        scales.sort_by(|p, q| (p - 1.0).abs().total_cmp(&(q - 1.0).abs()).then(p.total_cmp(q)));

        let mut best = (f32::INFINITY, 0.0f32, 0.0f32, 1.0f32);
        for &s in &scales {
            for &(dx, dy) in &offsets {
                if let Some(ssd) = self.ssd(a, b, oy, ox, dx as f32, dy as f32, s, best.0) {
                    best = (ssd, dx as f32, dy as f32, s);
                }
            }
        }
        let (ssd, mut dx, mut dy, s) = best;
        if !ssd.is_finite() {
            return BlockEstimate { dx: 0.0, dy: 0.0, z: 0.0, valid: false };
        }
        let valid = ssd / count <= self.max_residual && var >= self.min_variance;
        // An exact match needs no refinement; otherwise fit a parabola per axis.
        if self.subpixel && ssd > 0.0 {
            let at = |dx: f32, dy: f32| self.ssd(a, b, oy, ox, dx, dy, s, f32::INFINITY);
            let vertex = |lo: Option<f32>, hi: Option<f32>| match (lo, hi) {
                (Some(lo), Some(hi)) if lo + hi - 2.0 * ssd > 0.0 => {
                    (0.5 * (lo - hi) / (lo + hi - 2.0 * ssd)).clamp(-0.5, 0.5)
                }
                _ => 0.0,
            };
            let ox_ = vertex(at(dx - 1.0, dy), at(dx + 1.0, dy));
            let oy_ = vertex(at(dx, dy - 1.0), at(dx, dy + 1.0));
            dx += ox_;
            dy += oy_;
        }
        BlockEstimate { dx, dy, z: s - 1.0, valid }
    }

    /// SSD between the block at `(oy, ox)` in `a` and its image in `b` under
    /// displacement `(dx, dy)` and scale `s` about the block centre. `None` if
    /// the warped block leaves the image or the running sum reaches `bound`.
    #[allow(clippy::too_many_arguments)]
    fn ssd(&self, a: &ImageTensor, b: &ImageTensor, oy: usize, ox: usize, dx: f32, dy: f32, s: f32, bound: f32) -> Option<f32> {
        let (h, w, _) = a.pixels.dim();
        let bs = self.block;
        let (pa, pb) = (&a.pixels, &b.pixels);
        let integral = s == 1.0 && dx.fract() == 0.0 && dy.fract() == 0.0;
        let cy = oy as f32 + (bs as f32 - 1.0) / 2.0;
        let cx = ox as f32 + (bs as f32 - 1.0) / 2.0;
        let mut ssd = 0.0f32;
        for y in oy..oy + bs {
            for x in ox..ox + bs {
                if integral {
                    let (ty, tx) = (y as i64 + dy as i64, x as i64 + dx as i64);
                    if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                        return None;
                    }
                    for c in 0..3 {
                        let d = pa[[y, x, c]] - pb[[ty as usize, tx as usize, c]];
                        ssd += d * d;
                    }
                } else {
                    let ty = cy + dy + s * (y as f32 - cy);
                    let tx = cx + dx + s * (x as f32 - cx);
                    if ty < 0.0 || tx < 0.0 || ty > (h - 1) as f32 || tx > (w - 1) as f32 {
                        return None;
                    }
                    let (y0, x0) = (ty.floor() as usize, tx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (ty - y0 as f32, tx - x0 as f32);
                    for c in 0..3 {
                        let top = pb[[y0, x0, c]] * (1.0 - fx) + pb[[y0, x1, c]] * fx;
                        let bot = pb[[y1, x0, c]] * (1.0 - fx) + pb[[y1, x1, c]] * fx;
                        let d = pa[[y, x, c]] - (top * (1.0 - fy) + bot * fy);
                        ssd += d * d;
                    }
                }
                if ssd >= bound {
                    return None;
                }
            }
        }
        Some(ssd)
    }
}

impl FlowBackend for BlockMatching {
    fn id(&self) -> &str {
        "block-matching"
    }

    fn estimate(&self, a: &ImageTensor, b: &ImageTensor) -> Result<FlowField> {
        check_pair(a, b)?;
        let (h, w, _) = a.pixels.dim();
        if self.block == 0 || self.block > h.min(w) {
            return Err(invalid(format!("block size {} does not fit a {h}x{w} image", self.block)));
        }
        let ys = self.origins(h);
        let xs = self.origins(w);
        let estimates: Vec<Vec<BlockEstimate>> = ys
            .iter()
            .map(|&oy| xs.iter().map(|&ox| self.match_block(a, b, oy, ox)).collect())
            .collect();
        let nearest = |origins: &[usize], p: usize| -> usize {
            let half = (self.block as f32 - 1.0) / 2.0;
            origins
                .iter()
                .enumerate()
                .min_by(|(_, &o1), (_, &o2)| {
                    let d1 = (o1 as f32 + half - p as f32).abs();
                    let d2 = (o2 as f32 + half - p as f32).abs();
                    d1.total_cmp(&d2)
                })
                .map(|(i, _)| i)
                .unwrap()
        };
        let row_of: Vec<usize> = (0..h).map(|y| nearest(&ys, y)).collect();
        let col_of: Vec<usize> = (0..w).map(|x| nearest(&xs, x)).collect();
        let mut flow = FlowField::zeros(h, w, self.id());
        for y in 0..h {
            for x in 0..w {
                let e = estimates[row_of[y]][col_of[x]];
                flow.x[[y, x]] = e.dx;
                flow.y[[y, x]] = e.dy;
                flow.z[[y, x]] = e.z;
                flow.valid[[y, x]] = e.valid;
            }
        }
        Ok(flow)
    }
}

/// Delegates to an external program: `<program> <args…> <image_a> <image_b>
/// <flow_out>`, with images in the raw image format and the result in the
/// flow format documented in [`write_flow`].
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub workdir: PathBuf,
}

impl FlowBackend for ExternalBackend {
    fn id(&self) -> &str {
        "external"
    }

    fn estimate(&self, a: &ImageTensor, b: &ImageTensor) -> Result<FlowField> {
        check_pair(a, b)?;
        std::fs::create_dir_all(&self.workdir)?;
        let tag = format!("{}-{:?}", std::process::id(), std::thread::current().id());
        let tag: String = tag.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '-').collect();
        let pa = self.workdir.join(format!("{tag}-a.img"));
        let pb = self.workdir.join(format!("{tag}-b.img"));
        let po = self.workdir.join(format!("{tag}-flow.bin"));
        write_image(&mut std::fs::File::create(&pa)?, a)?;
        write_image(&mut std::fs::File::create(&pb)?, b)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&pa)
            .arg(&pb)
            .arg(&po)
            .status()
            .map_err(|e| Error::Backend(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Backend(format!("{} exited with {status}", self.program.display())));
        }
        let flow = read_flow(&mut std::fs::File::open(&po)?)?;
        for p in [pa, pb, po] {
            let _ = std::fs::remove_file(p);
        }
        let (h, w, _) = a.pixels.dim();
        if flow.height() != h || flow.width() != w {
            return Err(Error::Backend(format!(
                "backend returned a {}x{} flow for {h}x{w} images",
                flow.height(),
                flow.width()
            )));
        }
        Ok(flow)
    }
}

pub fn normalize(flow: &FlowField, norms: Normalizers) -> Result<FlowField> {
    if flow.normalized {
        return Err(invalid("flow field is already normalised"));
    }
    let (sf, se) = (norms.sigma_f as f32, norms.sigma_e as f32);
    Ok(FlowField {
        x: &flow.x / sf,
        y: &flow.y / sf,
        z: &flow.z / se,
        normalized: true,
        ..flow.clone()
    })
}

/// Mean over `n_pairs` sampled pairs of the per-map maximum flow magnitude
/// and maximum absolute expansion.
pub fn calibrate(sampler: &PairSampler<'_>, backend: &dyn FlowBackend, n_pairs: usize, seed: u64) -> Result<Normalizers> {
    if n_pairs == 0 {
        return Err(invalid("calibration needs at least one pair"));
    }
    let (mut sum_f, mut sum_e) = (0.0, 0.0);
    for i in 0..n_pairs {
        let (before, after) = sampler.sample(seed, i as u64)?;
        let g = sampler.generator();
        let flow = backend.estimate(&g.synthesize(&before)?, &g.synthesize(&after)?)?;
        sum_f += flow.max_magnitude();
        sum_e += flow.max_expansion();
    }
    let sigma_f = sum_f / n_pairs as f64;
    let mut sigma_e = sum_e / n_pairs as f64;
    if sigma_f <= 0.0 {
        return Err(Error::Calibration(format!(
            "all {n_pairs} flow maps are zero; sigma_f would be 0"
        )));
    }
    if sigma_e <= 0.0 {
        tracing::warn!("no expansion observed during calibration; using sigma_e = 1");
        sigma_e = 1.0;
    }
    Normalizers::new(sigma_f, sigma_e)
}

/// Positions of a `grid × grid` subsampling at cell centres.
pub fn grid_positions(resolution: usize, grid: usize) -> Result<Vec<PixelPosition>> {
    if grid == 0 || grid > resolution {
        return Err(invalid(format!("grid {grid} does not fit resolution {resolution}")));
    }
    let stride = resolution / grid;
    let offset = stride / 2;
    Ok((0..grid)
        .flat_map(|j| (0..grid).map(move |i| PixelPosition::new((offset + stride * i) as i64, (offset + stride * j) as i64)))
        .collect())
}

/// Normalised flow at the `grid × grid` cell centres, skipping invalid cells.
pub fn subsample(flow: &FlowField, grid: usize) -> Result<UserInputSet> {
    if flow.height() != flow.width() {
        return Err(invalid("subsample expects a square flow field"));
    }
    let positions = grid_positions(flow.width(), grid)?;
    Ok(UserInputSet::new(
        positions
            .into_iter()
            .filter(|&p| flow.is_valid(p))
            .map(|p| {
                let s = flow.at(p);
                UserInput {
                    motion: MotionVector([f64::from(s.x), f64::from(s.y), f64::from(s.z)]),
                    position: p,
                }
            })
            .collect(),
    ))
}

/// `k` items drawn uniformly without replacement.
pub fn random_subset(inputs: &UserInputSet, k: usize, seed: u64) -> Result<UserInputSet> {
    if k == 0 || k > inputs.len() {
        return Err(invalid(format!("subset size {k} outside [1, {}]", inputs.len())));
    }
    let mut rng = seeded_rng(seed, 0x7375_6273);
    let idx = sample_indices(&mut rng, inputs.len(), k);
    Ok(UserInputSet::new(idx.iter().map(|i| inputs.items[i]).collect()))
}

const FLOW_MAGIC: &[u8; 4] = b"DFLO";
const IMAGE_MAGIC: &[u8; 4] = b"DIMG";
const WIRE_VERSION: u32 = 1;

/// Flow record, little-endian:
///
/// ```text
/// magic "DFLO" | u32 version | u32 height | u32 width | u8 normalized
/// | u16 backend-id length n | n bytes UTF-8 backend id
/// | f32 x plane (H·W, row-major) | f32 y plane | f32 z plane
/// | validity bitmask: ceil(H·W / 8) bytes, row-major, LSB first
/// ```
pub fn write_flow(out: &mut impl Write, flow: &FlowField) -> Result<()> {
    out.write_all(FLOW_MAGIC)?;
    out.write_all(&WIRE_VERSION.to_le_bytes())?;
    out.write_all(&(flow.height() as u32).to_le_bytes())?;
    out.write_all(&(flow.width() as u32).to_le_bytes())?;
    out.write_all(&[u8::from(flow.normalized)])?;
    let id = flow.backend.as_bytes();
    out.write_all(&(id.len() as u16).to_le_bytes())?;
    out.write_all(id)?;
    for plane in [&flow.x, &flow.y, &flow.z] {
        let bytes: Vec<u8> = plane.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.write_all(&bytes)?;
    }
    let mut mask = vec![0u8; flow.valid.len().div_ceil(8)];
    for (i, &v) in flow.valid.iter().enumerate() {
        if v {
            mask[i / 8] |= 1 << (i % 8);
        }
    }
    out.write_all(&mask)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_flow(r: &mut impl Read) -> Result<FlowField> {
    if &read_exact::<4>(r)? != FLOW_MAGIC {
        return Err(invalid("not a flow record"));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != WIRE_VERSION {
        return Err(invalid(format!("unsupported flow record version {version}")));
    }
    let h = u32::from_le_bytes(read_exact(r)?) as usize;
    let w = u32::from_le_bytes(read_exact(r)?) as usize;
    let normalized = read_exact::<1>(r)?[0] != 0;
    let n = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut id = vec![0u8; n];
    r.read_exact(&mut id)?;
    let backend = String::from_utf8(id).map_err(|e| invalid(e.to_string()))?;
    let mut plane = || -> Result<Array2<f32>> {
        let mut bytes = vec![0u8; 4 * h * w];
        r.read_exact(&mut bytes)?;
        let v = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Array2::from_shape_vec((h, w), v).unwrap())
    };
    let (x, y, z) = (plane()?, plane()?, plane()?);
    let mut mask = vec![0u8; (h * w).div_ceil(8)];
    r.read_exact(&mut mask)?;
    let valid = Array2::from_shape_fn((h, w), |(i, j)| {
        let k = i * w + j;
        mask[k / 8] >> (k % 8) & 1 == 1
    });
    Ok(FlowField { x, y, z, valid, backend, normalized })
}

/// Raw image record: `"DIMG" | u32 height | u32 width | f32 H×W×3 row-major`.
pub fn write_image(out: &mut impl Write, img: &ImageTensor) -> Result<()> {
    let (h, w, _) = img.pixels.dim();
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    let bytes: Vec<u8> = img.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_image(r: &mut impl Read) -> Result<ImageTensor> {
    if &read_exact::<4>(r)? != IMAGE_MAGIC {
        return Err(invalid("not an image record"));
    }
    let h = u32::from_le_bytes(read_exact(r)?) as usize;
    let w = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut bytes = vec![0u8; 12 * h * w];
    r.read_exact(&mut bytes)?;
    let v = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(ImageTensor {
        pixels: ndarray::Array3::from_shape_vec((h, w, 3), v).map_err(|e| invalid(e.to_string()))?,
    })
}

pub fn save_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_flow(&mut f, flow)?;
    f.flush()?;
    Ok(())
}
