use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adnn::bench::{self, evaluate_bundle, run_k_sweep, run_table_experiment, summarize};
use adnn::bounds::{bound_report, BoundSettings};
use adnn::config::{Config, TablePreset};
use adnn::detector::{detect, detect_variant, train_anet_reported, train_variant, Variant};
use adnn::io::{self, ModelBundle};
use adnn::problem::sample_pairs;
use adnn::seed::{self, stream};
use adnn::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adnn", version, about = "Decomposed neural solvers for integer-constrained residual problems")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Variants to train or evaluate, e.g. A,B,C,D.
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a channel and a training set, write them as a dataset file.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Channel realization index.
        #[arg(long, default_value_t = 0)]
        channel: u64,
        /// Number of tuples (default: experiment.k_train).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the A-Net and any further variants on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decide every observation row of a CSV file.
    Detect {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated observations, one vector per row.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "A")]
        variant: Variant,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model against the exhaustive minimizer on fresh observations.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Number of observations (default: experiment.n_test).
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-entry error rates and bounds of a trained A-Net.
    Bound {
        #[arg(long)]
        model: PathBuf,
        /// Dataset the model was trained on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the variant comparison table or the K sweep.
    Bench {
        /// Residual/objective pairing; without it the config decides.
        #[arg(long)]
        table: Option<TablePreset>,
        /// Training sizes for the sweep, e.g. 10,20,30,60,120.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        k_sweep: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = &c.variants {
        cfg.experiment.variants = v.clone();
    }
    if let Some(r) = c.rho {
        cfg.experiment.rho = r;
    }
    if let Some(d) = c.delta {
        cfg.experiment.delta = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", p.display())))
        })?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Some(j) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(vec![format!("jobs: {e}")]))?;
    }
    match cli.cmd {
        Cmd::Gen { out, channel, k } => {
            let p = cfg.instance(channel)?;
            let k = k.unwrap_or(cfg.experiment.k_train);
            let d = sample_pairs(&p, k, seed::derive(cfg.seed, stream::TRAIN_DATA, channel))?;
            io::write_dataset(&out, &p, &d)?;
            log::info!("wrote {k} tuples to {}", out.display());
        }
        Cmd::Train { data, out } => {
            let (p, d) = io::read_dataset(&data)?;
            let specs = cfg.layer_specs();
            let tcfg = cfg.train_config(seed::derive(cfg.seed, stream::TRAINING, 0));
            let (anet, reports) = train_anet_reported(&p, &d, &tcfg, &specs)?;
            for (n, r) in reports.iter().enumerate() {
                log::info!("entry {n}: loss {:.4} -> {:.4}, accuracy {:.3}", r.initial_loss, r.final_loss, r.train_accuracy);
            }
            let mut variants = Vec::new();
            for &v in cfg.experiment.variants.iter().filter(|&&v| v != Variant::A) {
                variants.push(train_variant(v, &p, &d, &tcfg, &specs, Some(&anet))?);
            }
            io::write_model(&out, &ModelBundle { anet, variants })?;
        }
        Cmd::Detect {
            model,
            input,
            variant,
            out,
        } => {
            let bundle = io::read_model(&model)?;
            let ys = io::read_observations(&input, bundle.anet.problem().q())?;
            let rows = ys
                .iter()
                .map(|y| match variant {
                    Variant::A => detect(&bundle.anet, y),
                    v => detect_variant(
                        bundle
                            .variant(v)
                            .ok_or_else(|| Error::InvalidArgument(format!("model file has no {v}-Net")))?,
                        y,
                    ),
                })
                .collect::<Result<Vec<_>>>()?;
            match out {
                Some(p) => io::write_rows(&p, &rows)?,
                None => {
                    let mut w = std::io::stdout().lock();
                    for r in rows {
                        let line: Vec<String> = r.iter().map(ToString::to_string).collect();
                        writeln!(w, "{}", line.join(","))?;
                    }
                }
            }
        }
        Cmd::Eval { model, n_test, out } => {
            let bundle = io::read_model(&model)?;
            let variants: Vec<Variant> = match &cli.common.variants {
                Some(v) => v.clone(),
                None => bundle.available(),
            };
            let n = n_test.unwrap_or(cfg.experiment.n_test);
            let records = evaluate_bundle(&bundle, &variants, n, seed::derive(cfg.seed, stream::TEST_DATA, 0))?;
            bench::write_records(output(out.as_deref())?, records)?;
        }
        Cmd::Bound { model, data, out } => {
            let bundle = io::read_model(&model)?;
            let (p, d) = io::read_dataset(&data)?;
            if p.q() != bundle.anet.problem().q() || p.n() != bundle.anet.problem().n() {
                return Err(Error::InvalidArgument(format!(
                    "dataset {} does not match the model's problem dimensions",
                    data.display()
                )));
            }
            let settings = BoundSettings {
                rho: cfg.experiment.rho,
                delta: cfg.experiment.delta,
                trials: cfg.experiment.bound_trials,
                heldout: cfg.experiment.heldout,
                seed: seed::derive(cfg.seed, stream::ERROR_RATES, 0),
            };
            bench::write_records(output(out.as_deref())?, bound_report(&bundle.anet, &d, &settings)?)?;
        }
        Cmd::Bench { table, k_sweep, out } => {
            let cfg = match table {
                Some(t) => cfg.with_preset(t),
                None => cfg,
            };
            cfg.validate()?;
            match k_sweep {
                Some(ks) => {
                    let ks = if ks.is_empty() { cfg.experiment.k_values.clone() } else { ks };
                    let mut cfg = cfg;
                    cfg.experiment.k_values = ks.clone();
                    let (report, trials) = run_k_sweep(&cfg, &ks)?;
                    bench::write_sweep_csv(&out, &report)?;
                    bench::write_trials_csv(&bench::trials_path(&out), &trials)?;
                    bench::write_resolved_config(&bench::sidecar_path(&out), &cfg)?;
                    for p in &report.points {
                        println!("K={:<5} mean error {:.4}  median {:.4}", p.k, p.mean_error, p.median);
                    }
                    println!("R2 a+b/sqrt(K) = {:.4}, R2 a+b/K = {:.4}", report.r2_inv_sqrt, report.r2_inv);
                }
                None => {
                    let trials = run_table_experiment(&cfg)?;
                    let summary = summarize(&trials, &cfg.experiment.variants);
                    bench::write_summary_csv(&out, &summary)?;
                    bench::write_trials_csv(&bench::trials_path(&out), &trials)?;
                    bench::write_resolved_config(&bench::sidecar_path(&out), &cfg)?;
                    for s in &summary {
                        println!(
                            "{}-Net: train {:.3}  test (oracle) {:.3}  test (truth) {:.3}  failed {}",
                            s.variant, s.train_success, s.test_success_oracle, s.test_success_truth, s.failed
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
