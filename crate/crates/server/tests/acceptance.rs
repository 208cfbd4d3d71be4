//! Acceptance suite. Runs P1–P12 in order and prints one PASS/FAIL line per
//! criterion; exits non-zero if any fails. P8 trains the model that P9, P11
//! and P12 reuse.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dragedit_core::evaluation::{
    evaluate_method, generate_benchmark, greedy_search, sefa_directions, EvalContext, Method, PerceptualMetric, PyramidL2,
    SefaConfig,
};
use dragedit_core::flow::{calibrate, BlockMatching, FlowBackend, FlowField};
use dragedit_core::generator::{FeatureGrid, Generator, GeneratorConfig, ImageTensor};
use dragedit_core::interaction::{anchor_to_input, assemble, drag_to_input, DragGesture, Gesture, InteractionConfig, ZKey};
use dragedit_core::latent::{seeded_rng, LatentSeq, LatentW};
use dragedit_core::optim::{Optimizer, OptimizerConfig};
use dragedit_core::training::{optimize_on, PairSampler, TrainConfig, Trainer};
use dragedit_core::transformer::{LatentTransformer, MotionVector, PixelPosition, TransformerConfig, UserInput, UserInputSet};
use dragedit_core::Result as CoreResult;
use dragedit_server::app::spawn_local;
use dragedit_server::sessions::{Service, ServiceConfig};
use dragedit_server::wire::WireMessage;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: CoreResult<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > budget => Err(format!("{d}; runtime {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64())),
            r => r,
        };
        match result {
            Ok(d) => println!("{id} PASS [{:.1}s] {d}", elapsed.as_secs_f64()),
            Err(d) => {
                self.failures += 1;
                println!("{id} FAIL [{:.1}s] {d}", elapsed.as_secs_f64());
            }
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn toy_model(g: &Generator, model_dim: usize, heads: usize, layers: usize, seed: u64) -> LatentTransformer<f32> {
    let ch = g.extract_feature_map(&LatentSeq::broadcast(&LatentW(ndarray::Array1::zeros(g.latent_dim())), g.num_wplus()))
        .unwrap()
        .channels();
    let cfg = TransformerConfig::small(g.latent_dim(), g.num_wplus(), g.resolution(), ch, model_dim, heads, layers);
    let mut m = LatentTransformer::new(cfg, seed).unwrap();
    m.randomize_head(seed + 1);
    m
}

fn random_seq(g: &Generator, rng: &mut impl Rng) -> LatentSeq {
    let rows: Vec<Vec<f64>> = (0..g.num_wplus()).map(|_| g.sample_w(rng).0.to_vec()).collect();
    LatentSeq::from_rows(&rows).unwrap()
}

fn random_inputs(k: usize, res: i64, rng: &mut impl Rng) -> UserInputSet {
    UserInputSet::new(
        (0..k)
            .map(|_| UserInput {
                motion: MotionVector([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
                position: PixelPosition::new(rng.random_range(0..res), rng.random_range(0..res)),
            })
            .collect(),
    )
}

fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn p1() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for cfg_seed in 0..3u64 {
        let g = Generator::procedural(GeneratorConfig::toy_32(64), cfg_seed).unwrap();
        ensure(g.num_wplus() == 8, || format!("toy generator has {} codes", g.num_wplus()))?;
        let model = toy_model(&g, 32, 4, 2, cfg_seed);
        let mut rng = seeded_rng(100 + cfg_seed, 0);
        for k in [1, 4, 32] {
            let w = random_seq(&g, &mut rng);
            let u = random_inputs(k, 32, &mut rng);
            let f = ok(g.extract_feature_map(&w))?;
            let at0 = ok(model.transform(&w, &u, 0.0, &f))?;
            ensure(
                at0.codes().iter().zip(w.codes()).all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("alpha = 0 changed the latent (K = {k})"),
            )?;
            let d1 = ok(model.transform(&w, &u, 1.0, &f))?.codes() - w.codes();
            ensure(d1.iter().any(|&x| x != 0.0), || "direction is zero".into())?;
            for alpha in [-2.5, 0.3, 4.0] {
                let da = ok(model.transform(&w, &u, alpha, &f))?.codes() - w.codes();
                let r = rel_diff(&da, &(&d1 * alpha));
                worst = worst.max(r);
                ensure(r <= 1e-6, || format!("K = {k}, alpha = {alpha}: relative deviation {r:e}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, worst linearity deviation {worst:.2e} (tol 1e-6), alpha = 0 bitwise identity"))
}

fn p2() -> Outcome {
    let g = Generator::procedural(GeneratorConfig::toy_32(16), 1).unwrap();
    let model = toy_model(&g, 32, 4, 2, 3);
    let mut rng = seeded_rng(2, 0);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let w = random_seq(&g, &mut rng);
        let u = random_inputs(rng.random_range(1..=32), 32, &mut rng);
        let mut items = u.items.clone();
        items.shuffle(&mut rng);
        let permuted = UserInputSet::new(items);
        let f = ok(g.extract_feature_map(&w))?;
        let a = ok(model.estimate_directions(&w, &u, &f))?.directions;
        let b = ok(model.estimate_directions(&w, &permuted, &f))?.directions;
        let r = rel_diff(&b, &a);
        worst = worst.max(r);
        ensure(r <= 1e-5, || format!("case {case}: relative deviation {r:e}"))?;
    }
    Ok(format!("100 cases, worst relative deviation {worst:.2e} (tol 1e-5)"))
}

fn p3() -> Outcome {
    let g = Generator::procedural(GeneratorConfig::toy_32(16), 2).unwrap();
    let model = toy_model(&g, 32, 4, 2, 5);
    let trainable = model.config().trainable_layers.clone();
    let mut rng = seeded_rng(3, 0);
    let mut moved = 0;
    for case in 0..100 {
        let w = random_seq(&g, &mut rng);
        let u = random_inputs(rng.random_range(1..=8), 32, &mut rng);
        let f = ok(g.extract_feature_map(&w))?;
        let out = ok(model.transform(&w, &u, rng.random_range(-3.0..3.0), &f))?;
        for l in 0..g.num_wplus() {
            let same = out.layer(l).iter().zip(w.layer(l).iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if trainable.contains(&l) {
                moved += usize::from(!same);
            } else {
                ensure(same, || format!("case {case}: pass-through layer {l} changed"))?;
            }
        }
    }
    ensure(moved > 0, || "no trainable layer ever moved".into())?;
    Ok(format!(
        "100 transforms, layers {:?} bitwise unchanged",
        (0..g.num_wplus()).filter(|l| !trainable.contains(l)).collect::<Vec<_>>()
    ))
}

fn p4() -> Outcome {
    let g = Generator::procedural(GeneratorConfig::toy_32(16), 4).unwrap();
    let model = toy_model(&g, 16, 2, 2, 7);
    let mut rng = seeded_rng(4, 0);
    let w = random_seq(&g, &mut rng);
    let u = random_inputs(5, 32, &mut rng);
    let f = ok(g.extract_feature_map(&w))?;
    let (_, grads) = ok(model.direction_energy(&w, &u, &f))?;

    // Central differences in double precision on a copy of the same weights.
    let reference = model.cast::<f64>();
    let energy = |m: &LatentTransformer<f64>| m.direction_energy(&w, &u, &f).map(|(e, _)| e).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    let eps = 1e-5;
    while checked < 600 {
        let id = ids[rng.random_range(0..ids.len())];
        let shape = model.params().get(id).dim();
        let (r, c) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
        let analytic = f64::from(grads.get(id).map_or(0.0, |g| g[[r, c]]));
        let mut plus = reference.clone();
        plus.params_mut().get_mut(id)[[r, c]] += eps;
        let mut minus = reference.clone();
        minus.params_mut().get_mut(id)[[r, c]] -= eps;
        let numeric = (energy(&plus) - energy(&minus)) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            // Both vanish: compare absolutely.
            ensure((analytic - numeric).abs() < 1e-7, || format!("{}[{r},{c}]: {analytic} vs {numeric}", model.params().name(id)))?;
        } else {
            let rel = (analytic - numeric).abs() / scale;
            worst = worst.max(rel);
            ensure(rel < 1e-3, || {
                format!("{}[{r},{c}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})", model.params().name(id))
            })?;
        }
        checked += 1;
    }
    Ok(format!("{checked} parameters, worst relative error {worst:.2e} (tol 1e-3)"))
}

fn p5() -> Outcome {
    let cfg = InteractionConfig::default();
    let b = cfg.beta;
    // (start, end, key, expected v, expected drag length)
    type Case = ((i64, i64), (i64, i64), ZKey, [f64; 3], f64);
    #[rustfmt::skip]
    let table: [Case; 20] = [
        ((0, 0), (30, 40), ZKey::None, [0.6, 0.8, 0.0], 50.0),
        ((100, 100), (130, 140), ZKey::None, [0.6, 0.8, 0.0], 50.0),
        ((10, 10), (13, 14), ZKey::None, [0.6, 0.8, 0.0], 5.0),
        ((50, 50), (46, 47), ZKey::None, [-0.8, -0.6, 0.0], 5.0),
        ((0, 0), (10, 0), ZKey::None, [1.0, 0.0, 0.0], 10.0),
        ((20, 20), (20, 5), ZKey::None, [0.0, -1.0, 0.0], 15.0),
        ((7, 9), (2, 9), ZKey::None, [-1.0, 0.0, 0.0], 5.0),
        ((0, 0), (5, 12), ZKey::None, [5.0 / 13.0, 12.0 / 13.0, 0.0], 13.0),
        ((40, 40), (32, 25), ZKey::None, [-8.0 / 17.0, -15.0 / 17.0, 0.0], 17.0),
        ((3, 3), (27, 10), ZKey::None, [24.0 / 25.0, 7.0 / 25.0, 0.0], 25.0),
        ((60, 5), (40, 26), ZKey::None, [-20.0 / 29.0, 21.0 / 29.0, 0.0], 29.0),
        ((1, 50), (10, 10), ZKey::None, [9.0 / 41.0, -40.0 / 41.0, 0.0], 41.0),
        ((0, 0), (30, 40), ZKey::ZoomIn, [0.6, 0.8, -5.0], 50.0),
        ((0, 0), (30, 40), ZKey::ZoomOut, [0.6, 0.8, 5.0], 50.0),
        ((10, 10), (13, 14), ZKey::ZoomIn, [0.6, 0.8, -5.0], 5.0),
        ((5, 5), (5, 6), ZKey::ZoomOut, [0.0, 1.0, 5.0], 1.0),
        ((8, 8), (2, 0), ZKey::ZoomIn, [-0.6, -0.8, -5.0], 10.0),
        ((0, 30), (16, 0), ZKey::ZoomOut, [8.0 / 17.0, -15.0 / 17.0, 5.0], 34.0),
        ((90, 90), (90, 91), ZKey::None, [0.0, 1.0, 0.0], 1.0),
        ((12, 0), (0, 5), ZKey::ZoomIn, [-12.0 / 13.0, 5.0 / 13.0, -5.0], 13.0),
    ];
    for (i, &(s, e, key, v, len)) in table.iter().enumerate() {
        let g = DragGesture {
            start: PixelPosition::new(s.0, s.1),
            end: PixelPosition::new(e.0, e.1),
            z_key: key,
        };
        let (input, alpha) = ok(drag_to_input(&g, &cfg))?;
        ensure(input.motion.0 == v, || format!("case {i}: v = {:?}, expected {v:?}", input.motion.0))?;
        ensure(input.position == g.start, || format!("case {i}: input not placed at the drag start"))?;
        ensure(alpha == b * len, || format!("case {i}: alpha = {alpha}, expected {}", b * len))?;
    }
    ensure((drag_to_input(&DragGesture { start: PixelPosition::new(0, 0), end: PixelPosition::new(30, 40), z_key: ZKey::None }, &cfg)
        .unwrap()
        .1 - 50.0 * b)
        .abs()
        == 0.0, || "alpha for the 50-pixel drag is not 50 beta".into())?;

    let anchors = [PixelPosition::new(3, 4), PixelPosition::new(10, 1)].into_iter().collect();
    let gesture = Gesture::Drag(DragGesture {
        start: PixelPosition::new(0, 0),
        end: PixelPosition::new(30, 40),
        z_key: ZKey::None,
    });
    let (set, _) = ok(assemble(&anchors, Some(&gesture), &cfg, 64))?;
    let json = serde_json::to_value(&set).map_err(|e| e.to_string())?;
    let items = json["items"].as_array().ok_or("inputs did not serialise as a list")?;
    ensure(items.len() == 3, || format!("expected 3 serialised inputs, got {}", items.len()))?;
    for a in &items[..2] {
        ensure(a["motion"] == serde_json::json!([0.0, 0.0, 0.0]), || format!("anchor serialised as {a}"))?;
    }
    ensure(ok(anchor_to_input(PixelPosition::new(1, 1), 64))?.motion == MotionVector::ZERO, || "anchor is not zero".into())?;
    Ok("20 hand-evaluated drags exact; anchors serialise as [0, 0, 0]".into())
}

/// Smooth texture with random phases, evaluated on the continuous plane.
fn texture_image(size: usize, seed: u64, shift: (f32, f32)) -> ImageTensor {
    let mut rng = seeded_rng(seed, 9);
    let waves: Vec<(f32, f32, f32, usize)> = (0..18)
        .map(|i| (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.0..std::f32::consts::TAU), i % 3))
        .collect();
    let mut px = Array3::<f32>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 - shift.0, y as f32 - shift.1);
            for &(a, b, phase, c) in &waves {
                px[[y, x, c]] += (a * u + b * v + phase).sin() / 6.0;
            }
        }
    }
    ImageTensor { pixels: px }
}

fn p6() -> Outcome {
    let bm = BlockMatching::default();
    let mut rng = seeded_rng(6, 0);
    let mut checked = 0;
    for case in 0..10 {
        let (tx, ty) = (rng.random_range(-5..=5i64), rng.random_range(-5..=5i64));
        let a = texture_image(64, case, (0.0, 0.0));
        let b = texture_image(64, case, (tx as f32, ty as f32));
        let flow = ok(bm.estimate(&a, &b))?;
        let mut valid = 0;
        for y in 16..48 {
            for x in 16..48 {
                let p = PixelPosition::new(x, y);
                if flow.is_valid(p) {
                    let s = flow.at(p);
                    ensure((s.x, s.y, s.z) == (tx as f32, ty as f32, 0.0), || {
                        format!("case {case}: ({tx}, {ty}) estimated as ({}, {}, {}) at {p:?}", s.x, s.y, s.z)
                    })?;
                    valid += 1;
                }
            }
        }
        ensure(valid >= 32 * 32 / 2, || format!("case {case}: only {valid} valid interior pixels"))?;
        checked += valid;
        let id = ok(bm.estimate(&a, &a))?;
        ensure(
            id.x.iter().chain(id.y.iter()).chain(id.z.iter()).all(|&v| v == 0.0) && id.valid_count() == 64 * 64,
            || format!("case {case}: identity pair gave non-zero flow"),
        )?;
    }
    Ok(format!("10 translations exact on {checked} interior pixels; identity pairs zero"))
}

struct ConstantOracle {
    scale: f32,
}

impl FlowBackend for ConstantOracle {
    fn id(&self) -> &str {
        "constant-oracle"
    }

    fn estimate(&self, a: &ImageTensor, _b: &ImageTensor) -> CoreResult<FlowField> {
        let n = a.resolution();
        let mut f = FlowField::zeros(n, n, "constant-oracle");
        f.x.fill(1.0);
        f.y.fill(-1.5);
        f.x[[3, 5]] = 4.0;
        f.y[[3, 5]] = 0.0;
        f.z.fill(0.25);
        Ok(f.scaled(self.scale))
    }
}

fn p7() -> Outcome {
    let g = Generator::procedural(GeneratorConfig::toy_32(8), 1).unwrap();
    let w_bar = ok(g.average_latent(32, 0))?;
    let sampler = PairSampler::new(&g, w_bar, 0.3, 0.1);
    let mut out = Vec::new();
    for n in [1, 10] {
        let base = ok(calibrate(&sampler, &ConstantOracle { scale: 1.0 }, n, 3))?;
        ensure(base.sigma_f == 4.0, || format!("n_pairs = {n}: sigma_f = {}", base.sigma_f))?;
        let tripled = ok(calibrate(&sampler, &ConstantOracle { scale: 3.0 }, n, 3))?;
        ensure(tripled.sigma_f == 3.0 * base.sigma_f, || format!("n_pairs = {n}: scaled sigma_f = {}", tripled.sigma_f))?;
        out.push(format!("n={n}: {} -> {}", base.sigma_f, tripled.sigma_f));
    }
    Ok(format!("sigma_f {}", out.join(", ")))
}

/// Toy setup shared by P8, P9, P11 and P12.
struct Trained {
    generator: Generator,
    model: LatentTransformer<f32>,
    w_bar: LatentW,
    backend: BlockMatching,
    norms: dragedit_core::flow::Normalizers,
}

const TRAIN_ITERATIONS: u64 = 3000;
const SPARSE_FRACTION: f64 = 0.1;

fn p8(slot: &mut Option<Trained>) -> Outcome {
    let generator = Generator::procedural(GeneratorConfig::toy_32(4), 7).unwrap();
    ensure(generator.resolution() == 32 && generator.num_wplus() == 8, || "toy generator geometry".into())?;
    let w_bar = ok(generator.average_latent(2000, 1))?;
    let backend = BlockMatching {
        stride: 4,
        ..BlockMatching::default()
    };
    let sampler = PairSampler::new(&generator, w_bar.clone(), 0.3, 0.1);
    let norms = ok(calibrate(&sampler, &backend, 50, 5))?;
    let ch = ok(generator.extract_feature_map(&LatentSeq::broadcast(&w_bar, 8)))?.channels();
    let model = ok(LatentTransformer::new(TransformerConfig::small(4, 8, 32, ch, 64, 4, 2), 0))?;
    let cfg = TrainConfig {
        iterations: TRAIN_ITERATIONS,
        flow_grid: 8,
        batch_size: 4,
        sparse_fraction: SPARSE_FRACTION,
        optimizer: OptimizerConfig::ranger(1e-3),
        ..TrainConfig::default()
    };

    // Single-pair overfit on a copy of the initial model.
    let mut single = model.clone();
    let mut trainer = ok(Trainer::new(&generator, model, Box::new(backend.clone()), norms, w_bar.clone(), cfg.clone()))?;
    let pair = ok(trainer.prepare(0))?;
    let mut opt = Optimizer::new(cfg.optimizer, single.params());
    let first = ok(optimize_on(&mut single, &mut opt, std::slice::from_ref(&pair), 0))?;
    let mut reached = None;
    let mut last = first;
    for step in 1..2000 {
        last = ok(optimize_on(&mut single, &mut opt, std::slice::from_ref(&pair), step))?;
        if last < 1e-3 {
            reached = Some(step + 1);
            break;
        }
    }
    let reached = reached.ok_or_else(|| format!("single-pair loss {last:.3e} after 2000 steps (start {first:.3e})"))?;

    let mut losses = Vec::with_capacity(TRAIN_ITERATIONS as usize);
    for _ in 0..TRAIN_ITERATIONS {
        losses.push(ok(trainer.step())?);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&losses[..100]), mean(&losses[losses.len() - 100..]));
    let ratio = tail / head;
    let model = trainer.model.clone();
    *slot = Some(Trained {
        generator,
        model,
        w_bar,
        backend,
        norms,
    });
    ensure(ratio < 0.5, || format!("last/first 100-step mean loss = {tail:.3e}/{head:.3e} = {ratio:.3} (need < 0.5)"))?;
    Ok(format!(
        "100-step mean loss {head:.3e} -> {tail:.3e} (ratio {ratio:.3}, need < 0.5); single pair below 1e-3 after {reached} steps (start {first:.3e})"
    ))
}

fn p9(t: &Trained) -> Outcome {
    let sampler = PairSampler::new(&t.generator, t.w_bar.clone(), 0.3, 0.1);
    let perceptual = PyramidL2::default();
    let ctx = EvalContext {
        generator: &t.generator,
        perceptual: &perceptual,
        distribution: None,
    };
    let ours = Method::Ours {
        name: "ours".into(),
        model: &t.model,
    };
    let mut res = Vec::new();
    for k in [1, 32] {
        let triplets = ok(generate_benchmark(&sampler, &t.backend, t.norms, 20, k, 1))?;
        let o = ok(evaluate_method(&ours, &triplets, &ctx))?.mse;
        let i = ok(evaluate_method(&Method::Identity, &triplets, &ctx))?.mse;
        res.push((k, o, i));
    }
    let (o1, i1) = (res[0].1, res[0].2);
    let (o32, i32) = (res[1].1, res[1].2);
    let detail = format!("MSE Ours-1 {o1:.4e} (identity {i1:.4e}), Ours-32 {o32:.4e} (identity {i32:.4e})");
    ensure(o32 <= o1, || format!("{detail}: Ours-32 worse than Ours-1"))?;
    ensure(o1 < i1 && o32 < i32, || format!("{detail}: identity not beaten"))?;
    Ok(detail)
}

fn p10() -> Outcome {
    let g = Generator::procedural(GeneratorConfig::toy_32(64), 10).unwrap();
    let layers: Vec<usize> = (0..6).collect();
    let cfg = SefaConfig {
        layers: layers.clone(),
        ..SefaConfig::default()
    };
    let dirs = ok(sefa_directions(&g, cfg.k, &layers))?;
    let gram = dirs.dot(&dirs.t());
    let mut ortho: f64 = 0.0;
    for i in 0..cfg.k {
        for j in 0..cfg.k {
            ortho = ortho.max((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure(ortho <= 1e-5, || format!("orthonormality deviation {ortho:e}"))?;
    ensure(dirs == ok(sefa_directions(&g, cfg.k, &layers))?, || "directions not deterministic".into())?;

    let grid = ok(cfg.grid())?;
    let metric = PyramidL2::default();
    let mut rng = seeded_rng(10, 0);
    for case in 0..10 {
        let w = LatentSeq::broadcast(&g.sample_w(&mut rng), 8);
        let target = ok(g.synthesize(&random_seq(&g, &mut rng)))?;
        let got = ok(greedy_search(&g, &dirs, &w, &target, &grid, &layers, &metric))?;
        ensure(got.evaluations == 550, || format!("{} evaluations", got.evaluations))?;

        // Independent exhaustive scan.
        let mut best: Option<(f64, usize, f64, ImageTensor)> = None;
        for i in 0..cfg.k {
            for step in 0..11 {
                let v = -3.0 + 0.6 * step as f64;
                let v = if step == 5 { 0.0 } else { v };
                let mut codes = w.codes().clone();
                for &l in &layers {
                    for j in 0..g.latent_dim() {
                        codes[[l, j]] += v * dirs[[i, j]];
                    }
                }
                let img = ok(g.synthesize(&LatentSeq::new(codes).unwrap()))?;
                let score = ok(metric.distance(&img, &target))?;
                let better = match &best {
                    None => true,
                    Some((s, bi, bv, _)) => score < *s || (score == *s && (i, v) < (*bi, *bv)),
                };
                if better {
                    best = Some((score, i, v, img));
                }
            }
        }
        let (score, i, v, img) = best.unwrap();
        ensure(got.index == i && got.score == score && got.image == img && (got.value - v).abs() < 1e-12, || {
            format!("case {case}: greedy ({}, {}, {}) vs scan ({i}, {v}, {score})", got.index, got.value, got.score)
        })?;
    }
    Ok(format!("10 instances match the exhaustive 50x11 scan; orthonormality deviation {ortho:.1e} (tol 1e-5)"))
}

fn p11(t: &Trained) -> Outcome {
    let g = &t.generator;
    let mut cfg = t.model.config().clone();
    cfg.use_style_features = false;
    let mut ablated: LatentTransformer<f32> = ok(LatentTransformer::new(cfg, 11))?;
    ablated.randomize_head(12);
    let w = LatentSeq::broadcast(&t.w_bar, 8);
    let features: FeatureGrid = ok(g.extract_feature_map(&w))?;
    let at = |p: (i64, i64)| {
        UserInputSet::new(vec![UserInput {
            motion: MotionVector([0.5, -0.3, 0.0]),
            position: PixelPosition::new(p.0, p.1),
        }])
    };
    let (u1, u2) = (at((4, 6)), at((27, 20)));
    let a1 = ok(ablated.estimate_directions(&w, &u1, &features))?.directions;
    let a2 = ok(ablated.estimate_directions(&w, &u2, &features))?.directions;
    ensure(a1 == a2, || "ablated model depends on input position".into())?;
    let t1 = ok(t.model.estimate_directions(&w, &u1, &features))?.directions;
    let t2 = ok(t.model.estimate_directions(&w, &u2, &features))?.directions;
    let r = rel_diff(&t1, &t2);
    ensure(t1 != t2, || "trained model ignores input position".into())?;
    Ok(format!("ablated directions identical; trained directions differ (relative difference {r:.3})"))
}

fn gesture_log(session: &str) -> Vec<WireMessage> {
    let p = PixelPosition::new;
    let drag = |id, s: (i64, i64), e: (i64, i64), z_key| WireMessage::Drag {
        session: session.into(),
        id,
        s: p(s.0, s.1),
        e: p(e.0, e.1),
        z_key,
    };
    let s = || session.to_string();
    vec![
        drag(1, (8, 8), (12, 11), ZKey::None),
        drag(2, (8, 8), (16, 14), ZKey::None),
        WireMessage::AnchorAdd { session: s(), p: p(25, 25) },
        drag(3, (8, 8), (18, 16), ZKey::ZoomIn),
        WireMessage::AnchorAdd { session: s(), p: p(3, 28) },
        drag(4, (10, 20), (4, 24), ZKey::None),
        WireMessage::Commit { session: s() },
        WireMessage::Wheel { session: s(), id: 5, p: p(16, 16), clicks: 3 },
        WireMessage::Revert { session: s() },
        WireMessage::SetBeta { session: s(), beta: 0.05 },
        drag(6, (20, 5), (28, 11), ZKey::ZoomOut),
        WireMessage::AnchorRemove { session: s(), p: p(25, 25) },
        drag(7, (20, 5), (14, 13), ZKey::None),
        WireMessage::Wheel { session: s(), id: 8, p: p(5, 5), clicks: -2 },
        WireMessage::Commit { session: s() },
        drag(9, (16, 16), (16, 26), ZKey::None),
        WireMessage::Revert { session: s() },
        drag(10, (1, 1), (31, 31), ZKey::None),
        WireMessage::Commit { session: s() },
    ]
}

fn p12(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (gp, tp) = (dir.path().join("generator.ckpt"), dir.path().join("transformer.ckpt"));
    ok(t.generator.save(&gp))?;
    let extra = serde_json::json!({
        "normalizers": t.norms,
        "w_bar": t.w_bar.0.to_vec(),
        "train": TrainConfig::default(),
        "iteration": TRAIN_ITERATIONS,
        "optimizer_steps": TRAIN_ITERATIONS,
    });
    ok(t.model.save(&tp, extra))?;

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let mut transcripts = Vec::new();
        for _ in 0..2 {
            let service = Service::from_checkpoints(&gp, &tp, ServiceConfig::default()).map_err(|e| e.to_string())?;
            let (addr, _) = spawn_local(Arc::new(service)).await.map_err(|e| e.to_string())?;
            let mut c = common::Client::connect(addr).await;
            let create = WireMessage::CreateSession {
                seed: Some(42),
                latent: None,
                use_average_direction: false,
            };
            let mut log = vec![create];
            let first = c.call(&log[0]).await;
            let session = match &first {
                WireMessage::Frame(f) => f.session.clone(),
                other => return Err(format!("create_session answered {other:?}")),
            };
            log.extend(gesture_log(&session));
            let mut replies = vec![serde_json::to_string(&first).unwrap()];
            for m in &log[1..] {
                let r = c.call(m).await;
                if let WireMessage::Error { message, .. } = &r {
                    return Err(format!("{m:?} failed: {message}"));
                }
                replies.push(serde_json::to_string(&r).unwrap());
            }
            ensure(log.len() == 20, || format!("log has {} messages", log.len()))?;
            transcripts.push(replies);

            // Commit/revert round trip on a fresh session.
            let base = c.frame(&WireMessage::CreateSession { seed: Some(5), latent: None, use_average_direction: false }).await;
            let s = base.session.clone();
            let d = WireMessage::Drag { session: s.clone(), id: 1, s: PixelPosition::new(9, 9), e: PixelPosition::new(15, 17), z_key: ZKey::None };
            let edited = c.frame(&d).await;
            ensure(edited.png != base.png, || "drag did not change the frame".into())?;
            let back = c.frame(&WireMessage::Revert { session: s.clone() }).await;
            ensure(back.png == base.png, || "revert did not restore the pre-gesture frame".into())?;
            c.frame(&d).await;
            let committed = c.frame(&WireMessage::Commit { session: s.clone() }).await;
            ensure(committed.png == edited.png, || "commit changed the frame".into())?;
            c.frame(&WireMessage::Drag { session: s.clone(), id: 2, s: PixelPosition::new(3, 3), e: PixelPosition::new(3, 12), z_key: ZKey::None }).await;
            let back = c.frame(&WireMessage::Revert { session: s }).await;
            ensure(back.png == committed.png, || "revert after commit did not restore the committed frame".into())?;
        }
        ensure(transcripts[0] == transcripts[1], || {
            let i = transcripts[0].iter().zip(&transcripts[1]).position(|(a, b)| a != b).unwrap_or(0);
            format!("replay diverged at message {i}")
        })?;
        let frames = transcripts[0].iter().filter(|r| r.contains("\"png\"")).count();
        Ok(format!("20-message log replayed byte-identically ({frames} frames); revert restores pre-gesture and committed frames"))
    })
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.run("P1", secs(10), p1);
    suite.run("P2", secs(30), p2);
    suite.run("P3", secs(10), p3);
    suite.run("P4", secs(120), p4);
    suite.run("P5", secs(1), p5);
    suite.run("P6", secs(60), p6);
    suite.run("P7", secs(60), p7);
    let mut trained = None;
    suite.run("P8", secs(20 * 60), || p8(&mut trained));
    let missing = || Err::<String, _>("needs the P8 model, which was not produced".to_string());
    match &trained {
        Some(t) => {
            suite.run("P9", secs(600), || p9(t));
            suite.run("P10", secs(300), p10);
            suite.run("P11", secs(60), || p11(t));
            suite.run("P12", secs(120), || p12(t));
        }
        None => {
            suite.run("P9", secs(600), missing);
            suite.run("P10", secs(300), p10);
            suite.run("P11", secs(60), missing);
            suite.run("P12", secs(120), missing);
        }
    }
    println!("acceptance: {} of 12 passed", 12 - suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
