use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mpda_core::checkpoint::read_checkpoint;
use mpda_core::feature_core::{read_fmap, viz_export, write_fmap, FeatureMap};
use mpda_harness::bench::bench_inference;
use mpda_harness::eval::{evaluate, Method};
use mpda_harness::gradsuite::run_gradient_suite;
use mpda_harness::model::{Arch, CollabMode, Model, World};
use mpda_harness::synth::SceneConfig;
use mpda_harness::train::{checkpoint_bytes, eval_seeds, scenario_domains, train, train_seeds};
use mpda_harness::{HarnessError, Scenario, TrainingConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mpda", version, about = "Heterogeneous multi-agent domain adaptation on synthetic BEV features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes and write ego/collaborator FMAP files plus box lists.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "hetero1")]
        scenario: String,
        /// Render collaborators in the held-out test domain.
        #[arg(long)]
        test_split: bool,
    },
    /// Train from a key = value config; writes model.ckpt and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP@0.5 / AP@0.7 of a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "hetero1")]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Comma-separated subset of nofusion, naive, mpda, direct.
        #[arg(long, default_value = "nofusion,naive,mpda")]
        methods: String,
        #[arg(long)]
        json: bool,
    },
    /// Apply the resizer and cross-domain transformer to an FMAP file.
    Adapt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ego FMAP for the transformer's keys and values; defaults to the resized input.
        #[arg(long)]
        ego: Option<PathBuf>,
    },
    /// Write the per-agent channel energy of an FMAP file as PGM images.
    Viz {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-pass frames per second for several agent counts.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        agents: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn load_model(ckpt: &Path) -> anyhow::Result<(Model, mpda_core::nn::ParamStore<f32>, TrainingConfig)> {
    let ck = read_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let cfg = TrainingConfig::parse(&ck.meta)?;
    let (model, mut store) = Model::build::<f32>(Arch::default(), cfg.seed)?;
    ck.load_into(&mut store)?;
    Ok((model, store, cfg))
}

fn parse_method(s: &str) -> Result<Method, HarnessError> {
    match s.trim() {
        "nofusion" => Ok(Method::NoFusion),
        "naive" => Ok(Method::Naive),
        "mpda" => Ok(Method::Mpda),
        "direct" => Ok(Method::Direct),
        other => Err(HarnessError::Validation(format!("unknown method {other:?}"))),
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Gen { seed, count, out, scenario, test_split } => {
            let scenario: Scenario = scenario.parse()?;
            let (s, tr, te) = scenario_domains(scenario, TrainingConfig::default().noise_sigma);
            let world = World::new(s, if test_split { te } else { tr }, SceneConfig::default());
            fs::create_dir_all(&out)?;
            for (i, sd) in train_seeds(seed, count).into_iter().enumerate() {
                let sample = world.sample::<f32>(sd, CollabMode::Direct);
                write_fmap(&sample.ego, out.join(format!("scene{i:04}_ego.fmap")))?;
                if let Some(c) = &sample.collab {
                    write_fmap(c, out.join(format!("scene{i:04}_collab.fmap")))?;
                }
                let boxes: Vec<_> = sample
                    .scene
                    .boxes
                    .boxes
                    .iter()
                    .map(|b| json!({"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}))
                    .collect();
                let meta = json!({"seed": sd, "boxes": boxes, "visible": sample.scene.visible});
                fs::write(out.join(format!("scene{i:04}.json")), serde_json::to_string_pretty(&meta)?)?;
            }
            println!("wrote {count} scenes to {}", out.display());
        }
        Cmd::Train { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = TrainingConfig::parse(&text)?;
            fs::create_dir_all(&out)?;
            let report = match cfg.precision {
                mpda_harness::config::PrecisionMode::F32 => {
                    let o = train::<f32>(&cfg, Arch::default(), None)?;
                    fs::write(out.join("model.ckpt"), checkpoint_bytes(&cfg, &o.store))?;
                    o.report
                }
                mpda_harness::config::PrecisionMode::F64 => {
                    let o = train::<f64>(&cfg, Arch::default(), None)?;
                    fs::write(out.join("model.ckpt"), checkpoint_bytes(&cfg, &o.store))?;
                    o.report
                }
            };
            fs::write(out.join("report.json"), serde_json::to_string(&report)?)?;
            let last = report.steps.last();
            println!(
                "steps={} final_l={:.6} final_l_det={:.6} final_l_domain={:.6}",
                report.steps.len(),
                last.map_or(f64::NAN, |s| s.l),
                last.map_or(f64::NAN, |s| s.l_det),
                last.map_or(f64::NAN, |s| s.l_domain)
            );
        }
        Cmd::Eval { ckpt, scenario, seed, scenes, methods, json } => {
            let (model, store, cfg) = load_model(&ckpt)?;
            let scenario: Scenario = scenario.parse()?;
            let (s, _, te) = scenario_domains(scenario, cfg.noise_sigma);
            let world = World::new(s, te, SceneConfig::default());
            let seeds = eval_seeds(seed, scenes);
            let mut reports = Vec::new();
            for m in methods.split(',') {
                let method = parse_method(m)?;
                let samples = world.samples::<f32>(&seeds, method.mode());
                reports.push(evaluate(&model, &store, &samples, method, &scenario.to_string())?);
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                for r in &reports {
                    println!("{r}");
                }
            }
        }
        Cmd::Adapt { input, ckpt, out, ego } => {
            let (model, store, _) = load_model(&ckpt)?;
            let f_t = read_fmap(&input)?;
            let f_s: FeatureMap<f32> = match ego {
                Some(p) => read_fmap(p)?,
                None => {
                    let plan = model.adapter.resizer.plan(f_t.channels(), &mut rand_chacha_seeded(model.adapter.cfg().rng_seed));
                    let b = mpda_core::nn::Binding::inference(&store);
                    let y = model.adapter.resizer.forward(&b, b.tape().constant(f_t.data().clone()), &plan)?;
                    let first = mpda_harness::eval::split_agents(&b.tape().value(y)).swap_remove(0);
                    FeatureMap::from_tensor(first, f_t.domain_id())?
                }
            };
            let adapted = model.adapter.adapt(&store, &f_t, &f_s)?;
            write_fmap(&adapted, &out)?;
            let (a, h, w, c) = adapted.dims();
            println!("wrote {}x{}x{}x{} map to {}", a, h, w, c, out.display());
        }
        Cmd::Viz { input, out } => {
            let fm = read_fmap(&input)?;
            for f in viz_export(&fm, &out)? {
                println!("wrote {}", f.display());
            }
        }
        Cmd::Bench { ckpt, agents, iters, warmup } => {
            let (model, store, cfg) = load_model(&ckpt)?;
            let (s, _, te) = scenario_domains(Scenario::Hetero1, cfg.noise_sigma);
            let world = World::new(s, te, SceneConfig::default());
            for row in bench_inference(&model, &store, &world, &agents, warmup, iters)? {
                println!("n_agents={} fps_mean={:.2} fps_std={:.2} iterations={}", row.n_agents, row.fps_mean, row.fps_std, row.iterations);
            }
        }
        Cmd::Gradcheck => {
            let reports = run_gradient_suite()?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                println!("{}", r.summary());
            }
            if failed > 0 {
                return Err(HarnessError::Validation(format!("{failed} gradient checks failed")).into());
            }
        }
    }
    Ok(())
}

fn rand_chacha_seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        return h.exit_code() as u8;
    }
    match err.downcast_ref::<mpda_core::Error>() {
        Some(mpda_core::Error::Io(_)) | Some(mpda_core::Error::NonFinite(_)) => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
