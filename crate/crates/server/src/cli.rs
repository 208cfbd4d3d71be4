//! `dragedit` subcommands.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use dragedit_core::evaluation::{
    emit_report, evaluate_method, generate_benchmark, render_table, sefa_directions, EvalContext, Method, PyramidL2, SefaConfig,
};
use dragedit_core::flow::BlockMatching;
use dragedit_core::generator::{Generator, GeneratorConfig};
use dragedit_core::interaction::InteractionConfig;
use dragedit_core::training::{self, PairSampler, RunConfig, RunMetadata};
use dragedit_core::transformer::LatentTransformer;

use crate::app;
use crate::sessions::{Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "dragedit", version, about = "Drag-based layout editing of style-based generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a latent transformer from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on random subsets of this many flow inputs.
        #[arg(long)]
        subset_k: Option<usize>,
        #[arg(long)]
        no_style_features: bool,
        #[arg(long)]
        no_pos_embeddings: bool,
    },
    /// Serve the editing socket at ws://<bind>:<port>/ws.
    Serve {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        transformer: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 64)]
        max_sessions: usize,
        #[arg(long, default_value_t = 0.02)]
        beta: f64,
    },
    /// Run the synthetic benchmark and write report.json, report.txt and curves.csv.
    Eval {
        #[arg(long)]
        transformer: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long = "K", value_delimiter = ',', default_value = "1,32")]
        k: Vec<usize>,
        /// Any of ours, identity, oracle, sefa_greedy, sefa_random.
        #[arg(long, value_delimiter = ',', default_value = "ours,identity,sefa_greedy,sefa_random")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Extra transformer checkpoints to compare, as `name=path`.
        #[arg(long = "ablation")]
        ablations: Vec<String>,
        /// Training `run.json`; its flow settings are reused for the triplets.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        sefa_k: usize,
    },
    /// Write a randomly initialised toy generator checkpoint.
    ToyGenerator {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            subset_k,
            no_style_features,
            no_pos_embeddings,
        } => {
            let mut run = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if subset_k.is_some() {
                run.train.train_subset_k = subset_k;
            }
            run.model.use_style_features &= !no_style_features;
            run.model.use_position_embeddings &= !no_pos_embeddings;
            let out = match resume {
                Some(ckpt) => training::resume(&run, ckpt)?,
                None => training::train(&run)?,
            };
            println!("{}", out.display());
        }
        Command::Serve {
            generator,
            transformer,
            port,
            bind,
            max_sessions,
            beta,
        } => {
            let cfg = ServiceConfig {
                max_sessions,
                interaction: InteractionConfig { beta, ..Default::default() },
            };
            let service = Arc::new(Service::from_checkpoints(&generator, &transformer, cfg)?);
            let addr: SocketAddr = format!("{bind}:{port}").parse().context("bad bind address")?;
            tokio::runtime::Runtime::new()?.block_on(app::serve(service, addr))?;
        }
        Command::Eval {
            transformer,
            generator,
            n,
            k,
            methods,
            out,
            ablations,
            run,
            seed,
            sefa_k,
        } => {
            let table = eval(&EvalArgs {
                transformer: &transformer,
                generator: &generator,
                n,
                ks: &k,
                methods: &methods,
                out: &out,
                ablations: &ablations,
                run: run.as_deref(),
                seed,
                sefa_k,
            })?;
            print!("{table}");
        }
        Command::ToyGenerator { dim, seed, out } => {
            Generator::procedural(GeneratorConfig::toy_32(dim), seed)?.save(&out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub transformer: &'a Path,
    pub generator: &'a Path,
    pub n: usize,
    pub ks: &'a [usize],
    pub methods: &'a [String],
    pub out: &'a Path,
    pub ablations: &'a [String],
    pub run: Option<&'a Path>,
    pub seed: u64,
    pub sefa_k: usize,
}

/// Runs the benchmark and returns the rendered table.
pub fn eval(args: &EvalArgs<'_>) -> anyhow::Result<String> {
    let g = Generator::load(args.generator)?;
    let (model, extra) = LatentTransformer::load(args.transformer)?;
    let meta = RunMetadata::from_extra(&extra).context("transformer checkpoint lacks training metadata")?;
    let flow = match args.run {
        Some(p) => RunConfig::load(p)?.flow,
        None => BlockMatching::default(),
    };
    let mut extra_models = Vec::new();
    for entry in args.ablations {
        let (name, path) = entry.split_once('=').with_context(|| format!("ablation `{entry}` is not name=path"))?;
        extra_models.push((name.to_owned(), LatentTransformer::load(path)?.0));
    }

    let layers = model.config().trainable_layers.clone();
    let k_sefa = args.sefa_k.min(g.latent_dim());
    if k_sefa < args.sefa_k {
        tracing::warn!("SeFa k reduced from {} to the latent dimension {}", args.sefa_k, k_sefa);
    }
    let sefa = SefaConfig {
        k: k_sefa,
        layers: layers.clone(),
        seed: args.seed,
        ..SefaConfig::default()
    };

    let mut methods = Vec::new();
    for name in args.methods {
        methods.push(match name.as_str() {
            "ours" => Method::Ours {
                name: "ours".into(),
                model: &model,
            },
            "identity" => Method::Identity,
            "oracle" => Method::Oracle,
            "sefa_greedy" => Method::SefaGreedy {
                directions: sefa_directions(&g, sefa.k, &layers)?,
                config: sefa.clone(),
            },
            "sefa_random" => Method::SefaRandom {
                directions: sefa_directions(&g, sefa.k, &layers)?,
                config: sefa.clone(),
            },
            other => bail!("unknown method `{other}`"),
        });
    }
    for (name, m) in &extra_models {
        methods.push(Method::Ours { name: name.clone(), model: m });
    }

    let sampler = PairSampler::new(&g, meta.w_bar(), meta.train.psi, meta.train.phi);
    let perceptual = PyramidL2::default();
    let ctx = EvalContext {
        generator: &g,
        perceptual: &perceptual,
        distribution: None,
    };
    let mut reports = Vec::new();
    for &k in args.ks {
        let triplets = generate_benchmark(&sampler, &flow, meta.normalizers, args.n, k, args.seed)?;
        for m in &methods {
            reports.push(evaluate_method(m, &triplets, &ctx)?);
        }
    }
    emit_report(&reports, args.out)?;
    Ok(render_table(&reports))
}
