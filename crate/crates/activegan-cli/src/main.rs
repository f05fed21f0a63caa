//! `activegan` command-line tool: train, generate, evaluate, sweep.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric
//! divergence during training, 4 I/O or file-format failure.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use activegan::data::{FeatureNorm, LabeledDataset};
use activegan::evaluation::{
    evaluate_augmentation, export_scatter, sweep_one, write_sweep_csv, EvalReport, SweepRow,
};
use activegan::numerics::{SeededRng, Stream, Tensor};
use activegan::store::TensorStore;
use activegan::training::{
    generate_samples, margin_filter, train_acgan, train_with_checkpoints, write_trace_csv,
    ModelBundle, RunArtifacts, TrainConfig,
};
use activegan::uncertainty::GeneratedSample;
use activegan::{Error, Result};

use config::{EvalComparison, RunConfig};

#[derive(Parser)]
#[command(
    name = "activegan",
    about = "Conditional GAN with uncertainty-steered generation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write trace, checkpoints, samples, and manifest.
    Train(CommonArgs),
    /// Generate labeled samples with uncertainty diagnostics from a
    /// checkpoint.
    Generate {
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Pin every sample to this class label.
        #[arg(long)]
        class: Option<usize>,
        /// Generation seed; defaults to the seed stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train and compare augmentation strategies on a held-out test set.
    Evaluate(CommonArgs),
    /// Train and evaluate across a grid of one reward hyperparameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep rows to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Generate {
            checkpoint,
            count,
            class,
            seed,
            out,
        } => cmd_generate(&checkpoint, count, class, seed, &out),
        Command::Evaluate(common) => cmd_evaluate(&common),
        Command::Sweep { common, jobs } => cmd_sweep(&common, jobs),
    };
    if let Err(e) = outcome {
        log::error!("{}", e);
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_)
        | Error::Contract(_)
        | Error::Domain(_)
        | Error::Shape { .. }
        | Error::Length(_) => 2,
        Error::Numeric(_) | Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Format { .. } | Error::Consistency(_) => 4,
    }
}

/// Collects every file written under the output directory and finishes by
/// writing `manifest.json` declaring all of them.
struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    fn new(dir: &Path) -> Result<Emitter> {
        std::fs::create_dir_all(dir)?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Register `name` as an output and return its full path.
    fn declare(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.declare(name);
        std::fs::write(path, text)?;
        Ok(())
    }

    fn finish(mut self, command: &str) -> Result<()> {
        self.files.push("manifest.json".to_string());
        self.files.sort();
        let manifest = serde_json::json!({
            "command": command,
            "files": self.files,
        });
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Validation(vec![format!("JSON encoding failed: {}", e)]))?;
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Load the config, apply CLI overrides, and validate before any write.
fn resolved_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Feature column names `x0..x{d-1}` plus diagnostics.
fn samples_csv_header(dim: usize) -> String {
    let mut header = String::from("label,u_m,u_le,r");
    for i in 0..dim {
        header.push_str(&format!(",x{}", i));
    }
    header
}

/// Write generated samples as CSV; features are mapped back to raw space
/// when the model was trained on normalized data.
fn write_samples_csv(
    path: &Path,
    samples: &[GeneratedSample],
    dim: usize,
    norm: Option<&FeatureNorm>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", samples_csv_header(dim))?;
    let features = if samples.is_empty() {
        None
    } else {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.sample.clone()).collect();
        let t = Tensor::from_rows(&rows)?;
        Some(match norm {
            Some(n) => n.invert(&t)?,
            None => t,
        })
    };
    for (i, s) in samples.iter().enumerate() {
        write!(w, "{},{},{},{}", s.label, s.margin, s.entropy, s.reward)?;
        let f = features.as_ref().expect("non-empty");
        for v in f.row(i)? {
            write!(w, ",{}", v)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn save_store(path: &Path, store: &TensorStore) -> Result<()> {
    store.save(path)
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = resolved_config(common)?;
    let (train_data, _test) = cfg.dataset.load()?;
    log::info!(
        "training {} on {} samples ({} classes, {} dims), {} iterations",
        cfg.method,
        train_data.len(),
        train_data.classes(),
        train_data.dim(),
        cfg.train.iterations
    );

    let mut emitter = Emitter::new(&cfg.out)?;
    emitter.write_text("config_resolved.toml", &cfg.to_toml()?)?;

    let run = {
        let emitter = &mut emitter;
        let mut sink = move |iteration: usize, store: &TensorStore| -> Result<()> {
            let name = format!("checkpoint_{:06}.agan", iteration);
            let path = emitter.declare(&name);
            save_store(&path, store)
        };
        train_with_checkpoints(cfg.method, &train_data, &cfg.train, &mut sink)
    };

    let artifacts = match run {
        Ok(a) => a,
        Err(Error::Divergence {
            iteration,
            detail,
            partial,
        }) => {
            // Leave the evidence behind, then report the failure.
            write_run_outputs(&mut emitter, &partial, true)?;
            emitter.finish("train")?;
            return Err(Error::Divergence {
                iteration,
                detail,
                partial,
            });
        }
        Err(e) => return Err(e),
    };

    write_run_outputs(&mut emitter, &artifacts, false)?;
    emitter.finish("train")?;
    log::info!(
        "done: {} generator updates, {} discriminator updates, {} final samples",
        artifacts.gen_updates,
        artifacts.disc_updates,
        artifacts.final_samples.len()
    );
    Ok(())
}

fn write_run_outputs(
    emitter: &mut Emitter,
    artifacts: &RunArtifacts,
    partial: bool,
) -> Result<()> {
    let suffix = if partial { "_partial" } else { "" };
    let trace_path = emitter.declare(&format!("trace{}.csv", suffix));
    let w = BufWriter::new(File::create(trace_path)?);
    write_trace_csv(w, &artifacts.trace)?;

    let model_path = emitter.declare(&format!("model{}.agan", suffix));
    save_store(&model_path, &artifacts.to_store()?)?;

    if !partial {
        let samples_path = emitter.declare("samples.csv");
        write_samples_csv(
            &samples_path,
            &artifacts.final_samples,
            artifacts.generator.sample_dim,
            artifacts.norm.as_ref(),
        )?;
    }
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    count: usize,
    class: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let store = TensorStore::load(checkpoint)?;
    let bundle = ModelBundle::from_store(&store)?;
    let seed = seed.unwrap_or(bundle.seed);
    let mut rng = SeededRng::new(seed).stream(Stream::Generate);
    let samples = generate_samples(
        &bundle.generator,
        &bundle.policy,
        &bundle.classifier,
        &bundle.reward,
        count,
        class,
        &mut rng,
    )?;

    let mut emitter = Emitter::new(out)?;
    let path = emitter.declare("generated.csv");
    write_samples_csv(&path, &samples, bundle.generator.sample_dim, bundle.norm.as_ref())?;
    emitter.finish("generate")?;
    log::info!("wrote {} samples (seed {})", samples.len(), seed);
    Ok(())
}

/// Evaluation report of one generated pool against the shared baseline.
fn method_report(
    train_data: &LabeledDataset,
    test: &LabeledDataset,
    samples: &[GeneratedSample],
    hp: &activegan::classifier::ClassifierHp,
    eps: f64,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_augmentation(train_data, samples, test, hp, eps, seed)
}

fn cmd_evaluate(common: &CommonArgs) -> Result<()> {
    let cfg = resolved_config(common)?;
    let (train_data, test) = cfg.dataset.load()?;
    let test = test.ok_or_else(|| {
        Error::Validation(vec![
            "dataset.test_fraction must be positive for evaluation".to_string()
        ])
    })?;

    let mut emitter = Emitter::new(&cfg.out)?;
    emitter.write_text("config_resolved.toml", &cfg.to_toml()?)?;

    let report = match cfg.eval.comparison {
        EvalComparison::Baseline => {
            let hp = activegan::classifier::grid_search(
                &train_data,
                &cfg.train.grid,
                &mut SeededRng::new(cfg.train.seed).stream(Stream::Classifier),
            )?;
            let baseline = evaluate_augmentation(
                &train_data,
                &[],
                &test,
                &hp,
                cfg.train.reward.epsilon,
                cfg.train.seed,
            )?;
            serde_json::json!({ "baseline_f": baseline.baseline_f })
        }
        EvalComparison::Full => {
            log::info!("training steered and plain runs for the comparison");
            let steered = activegan::training::train_activegan(&train_data, &cfg.train)?;
            let plain = train_acgan(&train_data, &cfg.train)?;
            let hp = steered.classifier.hp().clone();

            let gen_pool = |artifacts: &RunArtifacts| -> Result<Vec<GeneratedSample>> {
                generate_samples(
                    &artifacts.generator,
                    &artifacts.policy,
                    &artifacts.classifier,
                    &cfg.train.reward,
                    cfg.eval.generated_count,
                    None,
                    &mut SeededRng::new(cfg.train.seed).stream(Stream::Generate),
                )
            };
            let steered_pool = gen_pool(&steered)?;
            let plain_pool = gen_pool(&plain)?;
            let filtered_pool = margin_filter(&plain_pool, cfg.eval.filter_margin)?;

            let eps = cfg.train.reward.epsilon;
            let seed = cfg.train.seed;
            let steered_report =
                method_report(&train_data, &test, &steered_pool, &hp, eps, seed)?;
            let plain_report = method_report(&train_data, &test, &plain_pool, &hp, eps, seed)?;
            let filtered_report =
                method_report(&train_data, &test, &filtered_pool, &hp, eps, seed)?;

            if cfg.eval.scatter {
                let scatter_path = emitter.declare("scatter.csv");
                write_scatter(&scatter_path, &train_data, &test, &steered_pool, &hp, seed)?;
            }

            serde_json::json!({
                "baseline_f": steered_report.baseline_f,
                "methods": {
                    "activegan": steered_report,
                    "acgan": plain_report,
                    "acgan_filtered": filtered_report,
                }
            })
        }
    };

    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(vec![format!("JSON encoding failed: {}", e)]))?;
    emitter.write_text("eval.json", &text)?;
    emitter.finish("evaluate")?;
    println!("{}", text);
    Ok(())
}

/// Scatter export: training points, generated points, and the test points
/// the baseline classifier gets wrong ("hard" cases near the boundary).
fn write_scatter(
    path: &Path,
    train_data: &LabeledDataset,
    test: &LabeledDataset,
    generated: &[GeneratedSample],
    hp: &activegan::classifier::ClassifierHp,
    seed: u64,
) -> Result<()> {
    let baseline = activegan::classifier::train(
        train_data,
        hp,
        &mut SeededRng::new(seed).stream(Stream::Classifier),
    )?;
    let preds = baseline.predict_batch(test.features())?;
    let hard_idx: Vec<usize> = preds
        .iter()
        .zip(test.labels())
        .enumerate()
        .filter(|(_, (p, t))| *p != *t)
        .map(|(i, _)| i)
        .collect();
    let (hard, _) = test.rows(&hard_idx)?;
    let gen_rows: Vec<Vec<f64>> = generated.iter().map(|s| s.sample.clone()).collect();
    let gen_t = if gen_rows.is_empty() {
        Tensor::zeros(vec![0, train_data.dim()])
    } else {
        Tensor::from_rows(&gen_rows)?
    };
    export_scatter(
        path,
        &[
            ("train", train_data.features()),
            ("generated", &gen_t),
            ("hard-test", &hard),
        ],
    )
}

fn cmd_sweep(common: &CommonArgs, jobs: usize) -> Result<()> {
    let cfg = resolved_config(common)?;
    if jobs == 0 {
        return Err(Error::Validation(vec!["--jobs must be at least 1".to_string()]));
    }
    let (train_data, test) = cfg.dataset.load()?;
    let test = test.ok_or_else(|| {
        Error::Validation(vec![
            "dataset.test_fraction must be positive for a sweep".to_string()
        ])
    })?;

    let mut emitter = Emitter::new(&cfg.out)?;
    emitter.write_text("config_resolved.toml", &cfg.to_toml()?)?;

    let axis = cfg.sweep.axis;
    let values = &cfg.sweep.values;
    log::info!(
        "sweeping {} over {} values with {} parallel jobs",
        axis,
        values.len(),
        jobs
    );

    let rows: Vec<SweepRow> = if jobs <= 1 {
        activegan::evaluation::sweep(axis, values, &train_data, &test, &cfg.train)
    } else {
        parallel_sweep(axis, values, &train_data, &test, &cfg.train, jobs)
    };

    let csv_path = emitter.declare("sweep.csv");
    let w = BufWriter::new(File::create(csv_path)?);
    write_sweep_csv(w, axis, &rows)?;
    emitter.finish("sweep")?;

    for row in &rows {
        match (&row.report, &row.error) {
            (Some(r), _) => log::info!(
                "{} = {}: baseline F {:.4}, augmented F {:.4}",
                axis,
                row.value,
                r.baseline_f,
                r.augmented_f
            ),
            (None, Some(e)) => log::warn!("{} = {}: {}", axis, row.value, e),
            _ => {}
        }
    }
    Ok(())
}

/// Run sweep rows on up to `jobs` worker threads; each row is independent,
/// so the output order is restored by index afterwards.
fn parallel_sweep(
    axis: activegan::evaluation::SweepAxis,
    values: &[f64],
    train_data: &LabeledDataset,
    test: &LabeledDataset,
    base: &TrainConfig,
    jobs: usize,
) -> Vec<SweepRow> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<SweepRow>>> =
        values.iter().map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(values.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= values.len() {
                    break;
                }
                let value = values[i];
                let row = match sweep_one(axis, value, train_data, test, base) {
                    Ok(report) => SweepRow {
                        value,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => SweepRow {
                        value,
                        report: None,
                        error: Some(e.to_string()),
                    },
                };
                *results[i].lock().expect("sweep worker poisoned") = Some(row);
            });
        }
    });

    results
        .into_iter()
        .map(|cell| {
            cell.into_inner()
                .expect("sweep worker poisoned")
                .expect("every index visited")
        })
        .collect()
}
