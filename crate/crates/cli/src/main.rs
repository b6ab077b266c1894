use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use msdial::data::{synth_labeled_domains, write_feature_table, SyntheticShiftSpec};
use msdial::experiment::{
    emit_results, export_features, lambda_sweep, pca_project, run_experiment, train_replication, ExperimentConfig,
    Method,
};

#[derive(Parser)]
#[command(name = "msdial", version, about = "Multi-source domain alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic affine-shift domains as feature tables plus a config.
    GenSynth {
        #[arg(long, default_value = "shift", value_parser = ["shift", "no-shift"])]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Run all replications of one configuration and write results.csv.
    Train(RunArgs),
    /// Sweep λ over the configured grid and write ablation.csv.
    Ablate(RunArgs),
    /// Train once and write the target test split's classifier inputs.
    ExportFeatures(RunArgs),
    /// Project a feature table onto its top two principal components.
    Project {
        table: PathBuf,
        #[arg(long, default_value = "projection.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(t) = &self.target {
            cfg.target = t.clone();
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(l) = self.lambda {
            cfg.loss.lambda = l;
        }
        if let Some(r) = self.replications {
            cfg.replications = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
        Ok(cfg)
    }
}

fn gen_synth(preset: &str, seed: u64, out: &Path) -> Result<()> {
    let spec = match preset {
        "shift" => SyntheticShiftSpec::shift_benchmark(seed),
        _ => SyntheticShiftSpec::no_shift_control(seed),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut cfg = format!("domains = {}\n", (0..spec.domains.len()).map(|d| format!("d{d}")).collect::<Vec<_>>().join(","));
    for (d, (train, test)) in synth_labeled_domains(&spec)?.iter().enumerate() {
        for (split, ds) in [("train", train), ("test", test)] {
            let file = format!("d{d}_{split}.tsv");
            write_feature_table(out.join(&file), ds.samples(), ds.labels())?;
            cfg.push_str(&format!("domain.d{d}.{split} = {file}\n"));
        }
    }
    cfg.push_str(&format!(
        "target = d{}\ntask = features\nclasses = {}\nseed = {seed}\n",
        spec.target, spec.class_count
    ));
    std::fs::write(out.join("experiment.cfg"), cfg)?;
    info!("wrote {} domains to {}", spec.domains.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenSynth { preset, seed, out } => gen_synth(&preset, seed, &out)?,
        Command::Train(args) => {
            let cfg = args.load()?;
            let record = run_experiment(&cfg)?;
            println!(
                "{} target={} mean={:.4} stderr={:.4} replications={} failed={}",
                record.method,
                record.target,
                record.mean,
                record.standard_error,
                record.accuracies.len(),
                record.failures.len()
            );
            emit_results(&[record], cfg.output_dir.join("results.csv"))?;
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let records = lambda_sweep(&cfg, &cfg.lambdas)?;
            for r in &records {
                println!("lambda={} mean={:.4} stderr={:.4}", r.lambda, r.mean, r.standard_error);
            }
            emit_results(&records, cfg.output_dir.join("ablation.csv"))?;
        }
        Command::ExportFeatures(args) => {
            let cfg = args.load()?;
            let (mut trained, data) = train_replication(&cfg, 0)?;
            let boundary = trained.model.feature_boundary();
            let path = cfg.output_dir.join("features.tsv");
            export_features(
                &mut trained.model,
                data.target_test.samples(),
                Some(&data.target_test_truth.labels),
                trained.eval_domain,
                boundary,
                &path,
            )?;
            println!("{}", path.display());
        }
        Command::Project { table, out } => {
            pca_project(&table, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
