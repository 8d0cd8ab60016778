use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use ccm_core::config::RunConfig;
use ccm_core::correlated::{train_observed, EpochRecord};
use ccm_core::data::{file_sha256, generate_dataset, load_dataset, save_dataset, Dataset, VQAInstance};
use ccm_core::eval::{report_from_predictions, ScoreKind, EVAL_CHUNK};
use ccm_core::generator::infer_all;
use ccm_core::metrics::{friedman_nemenyi, ScoreMatrix};
use ccm_core::model::CcmModel;
use ccm_core::perturb::{corpus_stats, robustness_sweep, NoiseReference, PerturbKind, PerturbationSpec};
use ccm_core::reports::{
    attention_csv, cd_csv, curves_csv, eval_csv, parse_predictions_csv, parse_sweep_csv, predictions_csv, sunburst_csv, sweep_csv, PredictionRow,
};

#[derive(Parser)]
#[command(name = "ccm", version, about = "Answer and explanation generation on a synthetic VQA task")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the relevant seed of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Base settings the config file and flags are applied on.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset file.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value = "dataset.jsonl")]
        name: String,
    },
    /// Train one variant on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        disc_steps: Option<usize>,
        /// Write the initialised model without training.
        #[arg(long)]
        init_only: bool,
        #[arg(long, default_value = "model.ccm")]
        name: String,
    },
    /// Score models on a split.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Run a repeated-sampling robustness sweep.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        kind: String,
        #[arg(long, value_delimiter = ',', required = true)]
        intensities: Vec<f64>,
        /// Word masking probabilities for the combined kind, one per intensity.
        #[arg(long, value_delimiter = ',')]
        mask_probs: Vec<f64>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value = "bleu1")]
        metric: String,
        #[arg(long)]
        zero_mean: bool,
        /// Use corpus-wide feature statistics instead of per-instance ones.
        #[arg(long)]
        corpus_stats: bool,
        #[arg(long, default_value = "sweep.csv")]
        name: String,
    },
    /// Summarise sweeps and predictions.
    Report {
        /// `model=path` pairs of sweep CSVs.
        #[arg(long, num_args = 1..)]
        sweep: Vec<String>,
        /// Predictions CSV written by `eval`, for the explanation sunburst.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<ccm_core::Error>(),
                Some(ccm_core::Error::Config(_) | ccm_core::Error::Perturb(_))
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<ccm_core::Error> for Failure {
    fn from(e: ccm_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut c = match cli.preset {
        Preset::Desk => RunConfig::default(),
        Preset::Reference => RunConfig::reference(),
    };
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Usage)?;
        c.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))
            .map_err(Failure::Usage)?;
    }
    Ok(c)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn split<'a>(ds: &'a Dataset, c: &RunConfig, which: Split) -> Result<&'a [VQAInstance], Failure> {
    let n = ds.len();
    let train_end = c.train_size.min(n);
    let val_end = (c.train_size + c.val_size).min(n);
    let test_end = (c.train_size + c.val_size + c.test_size).min(n);
    let part = match which {
        Split::Train => &ds.instances[..train_end],
        Split::Val => &ds.instances[train_end..val_end],
        Split::Test => &ds.instances[val_end..test_end],
        Split::All => &ds.instances[..],
    };
    if part.is_empty() {
        return Err(usage(format!(
            "split is empty: dataset has {n} instances, sizes are train {} val {} test {}",
            c.train_size, c.val_size, c.test_size
        )));
    }
    Ok(part)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = load_config(&cli)?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::GenData { n, width, height, name } => {
            if let Some(n) = n {
                config.instances = n;
            }
            if let Some(w) = width {
                config.grid.width = w;
            }
            if let Some(h) = height {
                config.grid.height = h;
            }
            if let Some(s) = cli.seed {
                config.data_seed = s;
            }
            if config.instances == 0 {
                return Err(usage("n must be at least 1"));
            }
            config.validate()?;
            let ds = generate_dataset(config.instances, config.data_seed, config.grid)?;
            let path = out.join(&name);
            save_dataset(&ds, &path)?;
            println!("wrote {} instances to {}", ds.len(), path.display());
        }
        Command::Train {
            data,
            variant,
            epochs,
            eta,
            lr,
            batch_size,
            disc_steps,
            init_only,
            name,
        } => {
            for (key, value) in [
                ("variant", variant),
                ("epochs", epochs.map(|v| v.to_string())),
                ("eta", eta.map(|v| v.to_string())),
                ("lr", lr.map(|v| v.to_string())),
                ("batch_size", batch_size.map(|v| v.to_string())),
                ("disc_steps", disc_steps.map(|v| v.to_string())),
                ("seed", cli.seed.map(|v| v.to_string())),
            ] {
                if let Some(v) = value {
                    config.set(key, &v)?;
                }
            }
            config.validate()?;
            let ds = load_dataset(&data)?;
            let train_set = Dataset {
                instances: split(&ds, &config, Split::Train)?.to_vec(),
                ..ds.clone()
            };
            write(out, "config.txt", &config.to_text())?;
            let mut manifest = serde_json::json!({
                "version": env!("CARGO_PKG_VERSION"),
                "config": config.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v))).collect::<serde_json::Map<_, _>>(),
                "dataset": data.display().to_string(),
                "dataset_sha256": file_sha256(&data)?,
                "train_instances": train_set.len(),
                "timings": serde_json::Value::Null,
            });
            write(out, "manifest.json", &format!("{manifest:#}\n"))?;
            let start = Instant::now();
            let model = if init_only {
                CcmModel::new(&train_set, config.hidden, config.train.variant.name(), config.train.seed)?
            } else {
                let progress = |r: &EpochRecord, _: &_| {
                    eprintln!(
                        "epoch {:>3}  L_y {:.4}  L_e {:.4}  L_c {:.4}  acc {:.3}",
                        r.epoch, r.l_y, r.l_e, r.l_c, r.acc
                    );
                    Ok(())
                };
                let (model, history) = train_observed(&train_set, config.hidden, &config.train, progress)?;
                write(out, "history.csv", &history.to_csv())?;
                model
            };
            let path = out.join(&name);
            model.save(&path)?;
            manifest["timings"] = serde_json::json!({ "train_seconds": start.elapsed().as_secs_f64() });
            write(out, "manifest.json", &format!("{manifest:#}\n"))?;
            println!("wrote {}", path.display());
        }
        Command::Eval { model, data, split: which } => {
            let ds = load_dataset(&data)?;
            let instances = split(&ds, &config, which)?;
            let mut reports = Vec::new();
            for path in &model {
                let m = CcmModel::load(path)?;
                m.check_vocab(&ds.vocab)?;
                let name = model_name(path);
                let preds = infer_all(&m, instances, EVAL_CHUNK)?;
                reports.push(report_from_predictions(&name, &ds.vocab, instances, &preds)?);
                let rows: Vec<PredictionRow> = instances
                    .iter()
                    .zip(&preds.answers)
                    .zip(&preds.explanations)
                    .map(|((inst, a), e)| PredictionRow {
                        id: inst.id,
                        answer: ds.vocab.answers.token(inst.answer).unwrap_or("<unk>").to_string(),
                        predicted: ds.vocab.answers.token(*a).unwrap_or("<unk>").to_string(),
                        explanation: ds.vocab.explanation.decode(e.words()),
                    })
                    .collect();
                write(out, &format!("predictions-{name}.csv"), &predictions_csv(&rows))?;
            }
            write(out, "metrics.csv", &eval_csv(&reports))?;
            write(out, "attention.csv", &attention_csv(&reports))?;
            for r in &reports {
                println!(
                    "{}: accuracy {:.4}  bleu4 {:.4}  meteor {:.4}  rouge_l {:.4}  attention {:.4}",
                    r.model, r.accuracy, r.bleu[3], r.meteor, r.rouge_l, r.attention_spearman
                );
            }
        }
        Command::Perturb {
            model,
            data,
            split: which,
            kind,
            intensities,
            mask_probs,
            samples,
            metric,
            zero_mean,
            corpus_stats: use_corpus,
            name,
        } => {
            let kind: PerturbKind = kind.parse()?;
            let metric: ScoreKind = metric.parse().map_err(|e: ccm_core::Error| usage(e.to_string()))?;
            let ds = load_dataset(&data)?;
            let instances = split(&ds, &config, which)?;
            let mut spec = PerturbationSpec::new(kind, intensities, samples, cli.seed.unwrap_or(config.train.seed));
            spec.mask_probs = mask_probs;
            spec.noise.zero_mean = zero_mean;
            if use_corpus {
                let (mean, std) = corpus_stats(instances);
                spec.noise.reference = NoiseReference::Corpus { mean, std };
            }
            spec.validate()?;
            let m = CcmModel::load(&model)?;
            let rows = robustness_sweep(&m, &ds.vocab, instances, &spec, metric)?;
            let path = write(out, &name, &sweep_csv(&rows))?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Report { sweep, predictions, alpha } => {
            if sweep.is_empty() && predictions.is_none() {
                return Err(usage("nothing to report: pass --sweep and/or --predictions"));
            }
            let mut sweeps = Vec::new();
            for s in &sweep {
                let (model, path) = s.split_once('=').ok_or_else(|| usage(format!("expected model=path, got {s:?}")))?;
                let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
                sweeps.push((model.to_string(), parse_sweep_csv(path, &text)?));
            }
            if !sweeps.is_empty() {
                write(out, "curves.csv", &curves_csv(&sweeps))?;
            }
            if sweeps.len() >= 2 {
                let conditions: Vec<String> = sweeps[0].1.iter().map(|r| format!("{}@{}", r.kind, r.intensity)).collect();
                for (m, rows) in &sweeps[1..] {
                    let c: Vec<String> = rows.iter().map(|r| format!("{}@{}", r.kind, r.intensity)).collect();
                    if c != conditions {
                        return Err(usage(format!("sweep for {m} covers different conditions than {}", sweeps[0].0)));
                    }
                }
                let models: Vec<String> = sweeps.iter().map(|(m, _)| m.clone()).collect();
                let scores = sweeps.iter().map(|(_, rows)| rows.iter().map(|r| r.mean).collect()).collect();
                let matrix = ScoreMatrix::new(models.clone(), conditions, scores)?;
                let f = friedman_nemenyi(&matrix, alpha).map_err(|e| usage(e.to_string()))?;
                if f.tied_conditions > 0 {
                    eprintln!("warning: all models tied in {} condition(s)", f.tied_conditions);
                }
                write(out, "cd.csv", &cd_csv(&models, &f))?;
            }
            if let Some(p) = predictions {
                let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                let rows = parse_predictions_csv(&p.display().to_string(), &text)?;
                let explanations: Vec<Vec<String>> = rows.into_iter().map(|r| r.explanation).collect();
                write(out, "sunburst.csv", &sunburst_csv(&explanations))?;
            }
            println!("wrote reports to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
