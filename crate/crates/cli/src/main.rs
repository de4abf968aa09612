use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mnet::data::DataSource;
use mnet::experiment::{run_pipeline, Experiment, ReconKind, RunConfig, SamplerSpec, Split};
use mnet::metrics::MetricsReport;
use mnet::{Error, Result};

mod plot;

#[derive(Parser, Debug)]
#[command(name = "mnet", version, about = "Object-adaptive k-space sampling: training, evaluation and mask prediction")]
struct Cli {
    /// Base settings: desk, tiny, or full (published network sizes on fastMRI, needs --data-dir).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// TOML configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Acceleration factor (4 or 8); sets the base rows and budget.
    #[arg(long, global = true)]
    accel: Option<u32>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// phantom or fastmri
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Directory of fastMRI .h5 volumes, for --dataset fastmri.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    device: Option<String>,
    /// Checkpoint directory to continue training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the reconstructor on variable-density random masks.
    Warmup,
    /// Alternating training of the mask predictor and the reconstructor.
    Joint {
        /// Warm-up checkpoint; defaults to the latest one in the output directory.
        #[arg(long)]
        warmup: Option<PathBuf>,
    },
    /// Train a reconstructor behind a frozen sampler.
    Recon {
        /// random, equispaced, energy, mnet:DIR, loupe:DIR or loupe-stochastic:DIR
        #[arg(long)]
        sampler: String,
        /// unet or modl
        #[arg(long, default_value = "unet")]
        kind: String,
        /// Weight of the SSIM term in the loss (0 for plain NRMSE).
        #[arg(long)]
        ssim_weight: Option<f64>,
    },
    /// Train the LOUPE baseline.
    Loupe {
        #[arg(long)]
        warmup: Option<PathBuf>,
    },
    /// Masks a trained predictor proposes for dataset slices.
    PredictMask {
        /// Joint checkpoint or MNet bundle directory.
        #[arg(long)]
        mnet: PathBuf,
        /// Slice ids such as phantom00003/0.
        #[arg(long = "slice", required = true)]
        slices: Vec<String>,
    },
    /// Metrics, summary table and box plots for sampler/reconstructor pairs.
    Evaluate {
        /// SAMPLER@RECON, where RECON is a checkpoint directory or zero-filled.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Box plots from per-image metric CSV files.
    Plot {
        /// LABEL=FILE.csv
        #[arg(long = "csv", required = true)]
        inputs: Vec<String>,
    },
    /// Warm-up, joint training, LOUPE and the test comparison in one go.
    Pipeline,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let base = match cli.preset.as_str() {
        "desk" => RunConfig::desk(),
        "tiny" => RunConfig::tiny(),
        "full" => {
            let dir = cli
                .data_dir
                .clone()
                .ok_or_else(|| Error::Config("--preset full needs --data-dir".into()))?;
            RunConfig::full(cli.accel.unwrap_or(4), dir)?
        }
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };
    let mut cfg = RunConfig::layered(base, cli.config.as_deref(), std::env::vars())?;
    if let Some(accel) = cli.accel {
        cfg.set_acceleration(accel)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    if let Some(device) = &cli.device {
        cfg.device = device.clone();
    }
    match cli.dataset.as_deref() {
        None => {}
        Some("phantom") => {
            if !matches!(cfg.dataset.source, DataSource::Phantom { .. }) {
                cfg.dataset.source = DataSource::Phantom {
                    count: cfg.dataset.counts.total(),
                };
            }
        }
        Some("fastmri") => {
            let dir = match (&cli.data_dir, &cfg.dataset.source) {
                (Some(d), _) => d.clone(),
                (None, DataSource::Fastmri { dir }) => dir.clone(),
                _ => return Err(Error::Config("--dataset fastmri needs --data-dir".into())),
            };
            cfg.dataset.source = DataSource::Fastmri { dir };
        }
        Some(other) => return Err(Error::Config(format!("unknown dataset {other:?}"))),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn latest(exp: &Experiment, given: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p.clone()),
        None => exp
            .checkpoints
            .latest(command)?
            .ok_or_else(|| Error::Config(format!("no {command} checkpoint in the output directory; pass one explicitly"))),
    }
}

fn table(reports: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("method,nmae,nmse,hfen,ssim\n");
    for (label, r) in reports {
        let a = &r.aggregates;
        let _ = writeln!(
            out,
            "{label},{},{},{},{}",
            a.nmae.mean, a.nmse.mean, a.hfen.mean, a.ssim.mean
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Plot { inputs } = &cli.command {
        let out = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let series = inputs
            .iter()
            .map(|s| {
                let (label, file) = s
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected LABEL=FILE, got {s:?}")))?;
                plot::Series::read(label, Path::new(file))
            })
            .collect::<Result<Vec<_>>>()?;
        for p in plot::write_box_plots(&series, &out)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let cfg = config(&cli)?;
    if let Command::Pipeline = cli.command {
        let report = run_pipeline(cfg)?;
        let rows = [
            ("mnet".to_string(), report.mnet),
            ("loupe".to_string(), report.loupe),
            ("random".to_string(), report.random),
        ];
        print!("{}", table(&rows));
        println!(
            "distinct masks over {} test images: {}",
            report.adaptivity.images, report.adaptivity.distinct
        );
        return Ok(());
    }
    let exp = Experiment::new(cfg)?;
    let resume = cli.resume.as_deref();
    match &cli.command {
        Command::Warmup => println!("{}", exp.warmup(resume)?.display()),
        Command::Joint { warmup } => {
            let warm = latest(&exp, warmup, "warmup")?;
            let (dir, summary) = exp.joint(&warm, resume)?;
            println!(
                "{} (accepted {}, skipped {}, final alpha {:e})",
                dir.display(),
                summary.accepted,
                summary.skipped,
                summary.final_alpha
            );
        }
        Command::Recon {
            sampler,
            kind,
            ssim_weight,
        } => {
            let mut exp = exp;
            if let Some(w) = ssim_weight {
                exp.cfg.separate.ssim_weight = *w;
            }
            let sampler: SamplerSpec = sampler.parse()?;
            let kind: ReconKind = kind.parse()?;
            println!("{}", exp.separate(&sampler, kind, resume)?.display());
        }
        Command::Loupe { warmup } => {
            let warm = latest(&exp, warmup, "warmup")?;
            println!("{}", exp.loupe(&warm, resume)?.display());
        }
        Command::PredictMask { mnet, slices } => {
            let report = exp.predict_masks(mnet, slices)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            let path = exp.cfg.output.join("masks.json");
            write(&path, &text)?;
            for p in &report.predictions {
                let rows: String = p.mask.rows().iter().map(|&r| if r == 1 { '#' } else { '.' }).collect();
                println!("{} {rows}", p.id);
            }
            println!(
                "{} distinct masks over {} slices; written to {}",
                report.adaptivity.distinct,
                report.adaptivity.images,
                path.display()
            );
        }
        Command::Evaluate { methods, split } => {
            let split: Split = split.parse()?;
            let mut reports = Vec::new();
            let mut series = Vec::new();
            for (i, method) in methods.iter().enumerate() {
                let (sampler, recon) = method.rsplit_once('@').unwrap_or((method.as_str(), "zero-filled"));
                let spec: SamplerSpec = sampler.parse()?;
                let recon_path = (recon != "zero-filled").then(|| PathBuf::from(recon));
                let stem = format!("eval{i}");
                let report = exp.evaluate(&spec, recon_path.as_deref(), split, &stem)?;
                let label = format!("{}-{}", report.sampler, report.reconstructor);
                let csv = exp.cfg.output.join("reports").join(format!("{stem}.csv"));
                series.push(plot::Series::read(label.clone(), &csv)?);
                reports.push((label, report));
            }
            let text = table(&reports);
            write(&exp.cfg.output.join("reports").join("table.csv"), &text)?;
            print!("{text}");
            plot::write_box_plots(&series, &exp.cfg.output.join("reports"))?;
        }
        Command::Plot { .. } | Command::Pipeline => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Validation(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
