//! Command-line driver for the transient-twin pipeline.
//!
//! Subcommands mirror the pipeline stages: `simulate` one episode,
//! `build-datasets` for the sampled splits, `train` the twin library,
//! `evaluate` the voting ensemble on a split, `compare` ensemble versus
//! single-model cases, and `context-switch` for the paired mid-transient
//! control-action study. All outputs land under `--out`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use eddm::config::AppConfig;
use eddm::dataset::SplitLabel;
use eddm::fnn::{load_library, save_library};
use eddm::harness::{
    compare_all, context_switch_experiment, evaluate_ensemble, train_library, write_json,
    write_table_csv, DataContext, RunContext, REPORT_SCHEMA_VERSION,
};
use eddm::plant::{
    inject_context_switch, save_episode, simulate_episode, ActionKind, ControlAction, PumpProfile,
};
use eddm::pva::{run_ensemble, write_trace_csv};
use eddm::seed::derive_seed;

#[derive(Parser)]
#[command(name = "eddm", version, about = "Transient digital-twin ensemble toolkit")]
struct Cli {
    /// TOML configuration file; omitted means built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    Train,
    Intp,
    Extp,
}

impl From<DatasetArg> for SplitLabel {
    fn from(v: DatasetArg) -> SplitLabel {
        match v {
            DatasetArg::Train => SplitLabel::Train,
            DatasetArg::Intp => SplitLabel::Intp,
            DatasetArg::Extp => SplitLabel::Extp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one transient episode and write its CSV plus sidecar.
    Simulate {
        /// Pump end speed in percent of nominal.
        #[arg(long, default_value_t = 60.0)]
        w_end: f64,
        /// Steady-state episode: no ramp, sensor noise off.
        #[arg(long)]
        steady: bool,
        /// Inject a context switch at this time (seconds).
        #[arg(long)]
        switch_time: Option<f64>,
        #[arg(long, default_value_t = 1.2)]
        switch_target: f64,
        #[arg(long, default_value_t = 30.0)]
        switch_ramp: f64,
        /// Base name of the episode files.
        #[arg(long, default_value = "episode")]
        name: String,
    },
    /// Build the Train, Intp and Extp datasets.
    BuildDatasets,
    /// Train the regime twin library (and optionally extension twins).
    Train {
        /// Dataset directory (defaults to <out>/datasets).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Library output directory (defaults to <out>/library).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Also train extension twins on the extrapolation split.
        #[arg(long)]
        extension: bool,
    },
    /// Evaluate the voting ensemble over one dataset split.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Library directory (defaults to <out>/library/base).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Dataset split to evaluate.
        #[arg(long, value_enum, default_value_t = DatasetArg::Intp)]
        dataset: DatasetArg,
        /// Number of episode traces to export.
        #[arg(long, default_value_t = 3)]
        traces: usize,
    },
    /// Run the standard comparison cases and write report plus table.
    Compare {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Paired baseline/switched ensemble run with trace export.
    ContextSwitch {
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        w_end: f64,
        #[arg(long, default_value_t = 120.0)]
        switch_time: f64,
        #[arg(long, default_value_t = 1.2)]
        switch_target: f64,
        #[arg(long, default_value_t = 30.0)]
        switch_ramp: f64,
    },
}

fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("creating directory {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = AppConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let out = cli.out.clone();
    ensure_dir(&out)?;

    match cli.command {
        Command::Simulate { w_end, steady, switch_time, switch_target, switch_ramp, name } => {
            let mut plant = cfg.plant.clone();
            plant.seed = derive_seed(cfg.master_seed, "simulate_noise", 0);
            let w_frac = if steady { 1.0 } else { w_end / 100.0 };
            if steady {
                plant.noise_sigma = 0.0;
            }
            let profile = PumpProfile::new(
                1.0,
                w_frac,
                cfg.plan(SplitLabel::Train).t_ramp,
                plant.t_acc,
            );
            let episode = match switch_time {
                None => simulate_episode(&profile, &[], &plant)?,
                Some(t_start) => {
                    let switch = ControlAction {
                        kind: ActionKind::ContextSwitch,
                        t_start,
                        pump2_target: switch_target,
                        ramp_duration: switch_ramp,
                    };
                    inject_context_switch(&profile, &[], &plant, switch)?
                }
            };
            let dir = out.join("episodes");
            ensure_dir(&dir)?;
            let base = dir.join(&name);
            save_episode(&episode, &base)?;
            println!(
                "wrote {}.csv ({} steps, w_end {:.1}%, final centerline {:.2} C)",
                base.display(),
                episode.n_steps(),
                w_frac * 100.0,
                episode.ssf.last().copied().unwrap_or_default()
            );
        }

        Command::BuildDatasets => {
            let data = eddm::harness::build_all_datasets(&cfg)?;
            let dir = out.join("datasets");
            ensure_dir(&dir)?;
            data.save(&dir)?;
            println!(
                "wrote {} (train {}, intp {}, extp {}, ext_train {}); features: {}",
                dir.display(),
                data.train.episodes.len(),
                data.intp.episodes.len(),
                data.extp.episodes.len(),
                data.ext_train.episodes.len(),
                data.train.feature_names.join(", ")
            );
        }

        Command::Train { data, library, extension } => {
            let data_dir = data.unwrap_or_else(|| out.join("datasets"));
            let lib_dir = library.unwrap_or_else(|| out.join("library"));
            let ctx = DataContext::load(&data_dir)?;
            let base = train_library(&ctx.train, &cfg.partition, &cfg, "base")?;
            ensure_dir(&lib_dir)?;
            save_library(&base, &lib_dir.join("base"))?;
            println!("trained {} base twins -> {}", base.len(), lib_dir.join("base").display());
            if extension {
                let ext = train_library(&ctx.ext_train, &cfg.extension, &cfg, "extension")?;
                save_library(&ext, &lib_dir.join("extension"))?;
                println!(
                    "trained {} extension twins -> {}",
                    ext.len(),
                    lib_dir.join("extension").display()
                );
            }
        }

        Command::Evaluate { data, library, dataset, traces } => {
            let data_dir = data.unwrap_or_else(|| out.join("datasets"));
            let lib_dir = library.unwrap_or_else(|| out.join("library").join("base"));
            let ctx = DataContext::load(&data_dir)?;
            let twins = load_library(&lib_dir)?;
            let label: SplitLabel = dataset.into();
            let ds = ctx.dataset(label);
            let eval = evaluate_ensemble(
                &twins,
                ds,
                &cfg.tracking,
                cfg.experiments.excursion_margin,
            )?;
            #[derive(serde::Serialize)]
            struct EvaluateReport<'a> {
                schema_version: u32,
                library: String,
                eval: &'a eddm::harness::DatasetEval,
            }
            let report_path = out.join(format!("evaluate_{}.json", label.as_str().to_lowercase()));
            write_json(
                &EvaluateReport {
                    schema_version: REPORT_SCHEMA_VERSION,
                    library: lib_dir.display().to_string(),
                    eval: &eval,
                },
                &report_path,
            )?;
            let trace_dir = out.join("traces");
            ensure_dir(&trace_dir)?;
            for (i, ep) in ds.episodes.iter().take(traces).enumerate() {
                let steps = run_ensemble(&twins, ep, &cfg.tracking)?;
                let path = trace_dir
                    .join(format!("{}_ep{:03}.csv", label.as_str().to_lowercase(), i));
                write_trace_csv(&steps, &ep.ssf, &path)?;
            }
            println!(
                "{}: mean MSE {:.4} C^2, excursions [{:+.3}, {:+.3}] C -> {}",
                label.as_str(),
                eval.mean_mse,
                eval.excursion_negative,
                eval.excursion_positive,
                report_path.display()
            );
        }

        Command::Compare { data, library } => {
            let data_dir = data.unwrap_or_else(|| out.join("datasets"));
            let lib_dir = library.unwrap_or_else(|| out.join("library"));
            let ctx = DataContext::load(&data_dir)?;
            let base = load_library(&lib_dir.join("base"))?;
            let extension = match load_library(&lib_dir.join("extension")) {
                Ok(twins) => twins,
                Err(eddm::Error::EmptyLibrary(_)) => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let rc = RunContext {
                data: &ctx,
                base: &base,
                extension: &extension,
                train: &cfg.train,
                tracking: &cfg.tracking,
                margin: cfg.experiments.excursion_margin,
            };
            let report = compare_all(&cfg, &rc)?;
            write_json(&report, &out.join("report.json"))?;
            write_table_csv(&report, &out.join("table2.csv"))?;
            for case in &report.cases {
                let intp = &case.evals[0];
                println!(
                    "{}: intp mean MSE {:.4}{}",
                    case.spec.case_id,
                    intp.mean_mse,
                    intp.repeat_stats
                        .as_ref()
                        .map(|r| format!(" [{:.4}, {:.4}]", r.capture_low, r.capture_high))
                        .unwrap_or_default()
                );
            }
            println!("wrote {} and {}", out.join("report.json").display(), out.join("table2.csv").display());
        }

        Command::ContextSwitch { library, w_end, switch_time, switch_target, switch_ramp } => {
            let lib_dir = library.unwrap_or_else(|| out.join("library").join("base"));
            let twins = load_library(&lib_dir)?;
            let mut plant = cfg.plant.clone();
            plant.seed = derive_seed(cfg.master_seed, "context_switch_noise", 0);
            let profile = PumpProfile::new(
                1.0,
                w_end / 100.0,
                cfg.plan(SplitLabel::Train).t_ramp,
                plant.t_acc,
            );
            let switch = ControlAction {
                kind: ActionKind::ContextSwitch,
                t_start: switch_time,
                pump2_target: switch_target,
                ramp_duration: switch_ramp,
            };
            let run = context_switch_experiment(
                &twins,
                &profile,
                &[],
                &plant,
                switch,
                &cfg.tracking,
                cfg.experiments.excursion_margin,
            )?;
            let trace_dir = out.join("traces");
            ensure_dir(&trace_dir)?;
            write_trace_csv(
                &run.baseline_steps,
                &run.baseline_episode.ssf,
                &trace_dir.join("context_baseline.csv"),
            )?;
            write_trace_csv(
                &run.switched_steps,
                &run.switched_episode.ssf,
                &trace_dir.join("context_switched.csv"),
            )?;
            write_json(&run.report, &out.join("context_switch.json"))?;
            println!(
                "baseline MSE {:.4}, switched MSE {:.4}, post-switch within {} C margin: {}",
                run.report.baseline.mse,
                run.report.switched.mse,
                run.report.margin,
                run.report.post_switch_within_margin
            );
        }
    }
    Ok(())
}
