use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgma::config::RunConfig;
use pgma::data::{ingest_csv, synthetic_train_test, NormMode, SeriesMatrix, SyntheticSpec};
use pgma::detector::Detector;
use pgma::experiments::{self, SweepAxis, Variant};
use pgma::spectral::detect_period;
use pgma::{PgmaError, Result};

#[derive(Parser)]
#[command(name = "pgma", version, about = "Periodic graph anomaly detection for multivariate time series")]
struct Cli {
    /// JSON run configuration; flags given on the command line win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for batch gradients and grid search.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled train/test pair.
    Synth(SynthCmd),
    /// Period detection.
    #[command(subcommand)]
    Period(PeriodCmd),
    /// Learned graph inspection.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Train a detector and write a checkpoint.
    Train(TrainCmd),
    /// Score a test series with a checkpoint.
    Score(ScoreCmd),
    /// Compare the full model against its ablations.
    Ablate(AblateCmd),
    /// Sweep the neighbor count or the graph feature size.
    Sweep(SweepCmd),
    /// Configuration helpers.
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    sensors: usize,
    #[arg(long, default_value_t = 4800)]
    length: usize,
    #[arg(long, default_value_t = 24)]
    period: usize,
    #[arg(long, default_value_t = 0.03)]
    anomaly_rate: f64,
    #[arg(long = "synth-seed", default_value_t = 7)]
    synth_seed: u64,
    /// Leading fraction of the series used as the clean training part.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
}

impl SynthArgs {
    fn generate(&self) -> Result<(SeriesMatrix, SeriesMatrix)> {
        let spec = SyntheticSpec {
            n_sensors: self.sensors,
            length: self.length,
            period: self.period,
            anomaly_rate: self.anomaly_rate,
            seed: self.synth_seed,
        };
        synthetic_train_test(&spec, self.train_fraction)
    }
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Subcommand)]
enum PeriodCmd {
    /// Print the dominant period and the strongest frequency bins.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label_column: Option<String>,
        /// Also write the averaged amplitude spectrum as CSV.
        #[arg(long)]
        spectrum_csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Write the learned edges as `slot,source,target,similarity`.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print the effective configuration as JSON.
    Show {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        score: ScoreArgs,
    },
}

/// Training flags; each overrides the config file when given.
#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbors kept per node.
    #[arg(long)]
    k: Option<usize>,
    /// Graph slots per period.
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    dilation: Option<usize>,
    /// Channels per convolution kernel.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Graph feature size d'.
    #[arg(long)]
    graph_dim: Option<usize>,
    #[arg(long)]
    temporal_dim: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Gradient clip norm; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// minmax or zscore.
    #[arg(long)]
    normalization: Option<NormMode>,
    /// Detect the period inside every window.
    #[arg(long)]
    period_per_window: bool,
}

#[derive(Args, Default)]
struct ScoreArgs {
    #[arg(long)]
    ma_window: Option<usize>,
    /// max-validation, best-f1 or fixed:<value>.
    #[arg(long)]
    threshold: Option<String>,
    /// Phase origin of the test series (defaults to the training length).
    #[arg(long)]
    time_offset: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the training report and loss curve.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    args: TrainArgs,
    /// Grid-search the learning rate; optional comma-separated values.
    #[arg(long, num_args = 0..=1, value_delimiter = ',', require_equals = true)]
    grid: Option<Vec<f64>>,
    /// static-graph or no-temporal-conv.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Args)]
struct ScoreCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    args: ScoreArgs,
    /// Also write whitespace-separated plot data.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Labeled training CSV; a synthetic pair is generated when omitted.
    #[arg(long, requires = "test")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    #[command(flatten)]
    synth: SynthArgs,
}

impl DataArgs {
    fn load(&self) -> Result<(SeriesMatrix, SeriesMatrix)> {
        match (&self.train, &self.test) {
            (Some(tr), Some(te)) => {
                let lc = self.label_column.as_deref();
                Ok((ingest_csv(tr, lc)?, ingest_csv(te, lc)?))
            }
            _ => self.synth.generate(),
        }
    }
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Variant to leave out (full, w/o-PGSL, w/o-STIA); repeatable.
    #[arg(long)]
    skip: Vec<String>,
    #[command(flatten)]
    args: TrainArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Sweep the neighbor count k.
    #[arg(long)]
    k_sweep: bool,
    /// Sweep the graph feature size.
    #[arg(long)]
    filter_sweep: bool,
    /// Comma-separated values for the swept axis.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    args: TrainArgs,
    #[command(flatten)]
    score: ScoreArgs,
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { t.$field = v; })*
        };
    }
    set!(lr => learning_rate, epochs => max_epochs, patience => patience, batch_size => batch_size,
         seed => seed, k => k, slots => slots, window => window, stride => stride, dilation => dilation,
         channels => conv_channels, embed_dim => embed_dim, graph_dim => graph_dim,
         temporal_dim => temporal_dim, mlp_hidden => mlp_hidden, val_fraction => val_fraction,
         normalization => normalization);
    if let Some(c) = a.grad_clip {
        t.grad_clip = (c > 0.0).then_some(c);
    }
    if a.period_per_window {
        t.period_per_window = true;
    }
}

fn apply_score_args(cfg: &mut RunConfig, a: &ScoreArgs) {
    if let Some(m) = a.ma_window {
        cfg.score.ma_window = m;
    }
    if let Some(t) = &a.threshold {
        cfg.score.threshold = t.clone();
    }
    if a.time_offset.is_some() {
        cfg.score.time_offset = a.time_offset;
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| PgmaError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PgmaError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        cfg.train.threads = t;
    }
    match cli.command {
        Command::Synth(cmd) => {
            let (train, test) = cmd.synth.generate()?;
            ensure_dir(&cmd.out_dir)?;
            train.save_csv(cmd.out_dir.join("train.csv"))?;
            test.save_csv(cmd.out_dir.join("test.csv"))?;
            let labeled = test.labels().map_or(0, |l| l.iter().filter(|&&v| v == 1).count());
            println!(
                "wrote {} train and {} test timestamps ({labeled} labeled anomalous) to {}",
                train.len(),
                test.len(),
                cmd.out_dir.display()
            );
        }
        Command::Period(PeriodCmd::Report {
            input,
            label_column,
            spectrum_csv,
        }) => {
            let series = ingest_csv(&input, label_column.as_deref())?;
            let norm = pgma::data::fit_normalizer(&series, cfg.train.normalization).apply(&series)?;
            let p = detect_period(&norm)?;
            let report = serde_json::json!({
                "series_length": p.series_len,
                "dominant_frequency": p.dominant_frequency,
                "period": p.period,
                "aperiodic": p.aperiodic,
                "top_bins": p.top_bins(5).iter()
                    .map(|&(bin, amp)| serde_json::json!({"bin": bin, "amplitude": amp}))
                    .collect::<Vec<_>>(),
            });
            print!("{}", to_json(&report));
            if let Some(path) = spectrum_csv {
                let mut s = String::from("bin,amplitude\n");
                for (k, a) in p.amplitudes.iter().enumerate() {
                    s += &format!("{},{a}\n", k + 1);
                }
                write_file(&path, s)?;
            }
        }
        Command::Graph(GraphCmd::Dump { checkpoint, out }) => {
            let det = Detector::load(&checkpoint)?;
            let mut s = String::from("slot,source,target,similarity\n");
            for (slot, src, dst, sim) in det.edge_list()? {
                s += &format!(
                    "{slot},{},{},{sim}\n",
                    det.sensor_names[src], det.sensor_names[dst]
                );
            }
            match out {
                Some(p) => write_file(&p, s)?,
                None => print!("{s}"),
            }
        }
        Command::Train(cmd) => {
            apply_train_args(&mut cfg, &cmd.args);
            match cmd.ablate.as_deref().map(Variant::parse).transpose()? {
                Some(Variant::Full) | None => {}
                Some(v) => cfg.train = v.apply(&cfg.train),
            }
            cfg.validate()?;
            let train = ingest_csv(&cmd.train, cmd.label_column.as_deref())?;
            let (det, report, grid_cells) = match &cmd.grid {
                None => {
                    let (det, report) = Detector::fit(&train, &cfg.train)?;
                    (det, report, None)
                }
                Some(values) => {
                    let grid = if values.is_empty() { cfg.lr_grid.clone() } else { values.clone() };
                    let (det, report, best, cells) =
                        Detector::fit_grid(&train, &cfg.train, &grid, cfg.train.threads)?;
                    log::info!("grid selected learning rate {}", best.learning_rate);
                    (det, report, Some(cells))
                }
            };
            det.save(&cmd.checkpoint)?;
            if let Some(dir) = &cmd.out_dir {
                ensure_dir(dir)?;
                write_file(&dir.join("train_report.json"), to_json(&report))?;
                write_file(&dir.join("loss_curve.csv"), report.loss_curve_csv())?;
                if let Some(cells) = &grid_cells {
                    write_file(&dir.join("grid_report.json"), to_json(cells))?;
                }
            }
            println!(
                "period {}, k {}, best epoch {:?}, validation loss {:.6} -> {}",
                det.period.period,
                det.effective_k,
                report.best_epoch,
                report.best_val_loss,
                cmd.checkpoint.display()
            );
        }
        Command::Score(cmd) => {
            apply_score_args(&mut cfg, &cmd.args);
            let opts = cfg.score.options()?;
            let det = Detector::load(&cmd.checkpoint)?;
            let test = ingest_csv(&cmd.test, cmd.label_column.as_deref())?;
            let out = det.score(&test, &opts)?;
            ensure_dir(&cmd.out_dir)?;
            let mut csv = Vec::new();
            out.write_trace_csv(&mut csv)?;
            write_file(&cmd.out_dir.join("scores.csv"), csv)?;
            if cmd.plot {
                let mut dat = Vec::new();
                out.write_plot_data(&mut dat)?;
                write_file(&cmd.out_dir.join("scores.dat"), dat)?;
            }
            let metrics = serde_json::json!({
                "threshold_mode": opts.threshold.to_string(),
                "threshold": out.trace.threshold,
                "ma_window": opts.ma_window,
                "point_wise": out.metrics,
                "point_adjusted": out.metrics_point_adjusted,
            });
            write_file(&cmd.out_dir.join("metrics.json"), to_json(&metrics))?;
            match &out.metrics {
                Some(m) => println!(
                    "threshold {:.6}: precision {:.4} recall {:.4} f1 {:.4}",
                    out.trace.threshold, m.precision, m.recall, m.f1
                ),
                None => println!("threshold {:.6}: unlabeled test data, no metrics", out.trace.threshold),
            }
        }
        Command::Ablate(cmd) => {
            apply_train_args(&mut cfg, &cmd.args);
            apply_score_args(&mut cfg, &cmd.score);
            if let Some(s) = cmd.seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let skip = cmd.skip.iter().map(|s| Variant::parse(s)).collect::<Result<Vec<_>>>()?;
            let (train, test) = cmd.data.load()?;
            let table = experiments::ablation(&train, &test, &cfg.train, &cfg.seeds, &skip, &cfg.score.options()?)?;
            ensure_dir(&cmd.out_dir)?;
            write_file(&cmd.out_dir.join("ablation.csv"), table.to_csv())?;
            write_file(&cmd.out_dir.join("ablation.json"), to_json(&table))?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            for row in &table.rows {
                println!("{:<10} mean F1 {:.4}", row.variant, row.mean_f1);
            }
        }
        Command::Sweep(cmd) => {
            let axis = match (cmd.k_sweep, cmd.filter_sweep) {
                (true, false) => SweepAxis::K,
                (false, true) => SweepAxis::Filters,
                _ => {
                    return Err(PgmaError::Config(
                        "choose exactly one of --k-sweep and --filter-sweep".into(),
                    ))
                }
            };
            apply_train_args(&mut cfg, &cmd.args);
            apply_score_args(&mut cfg, &cmd.score);
            if let Some(s) = cmd.seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let values = cmd.values.unwrap_or_else(|| axis.default_values());
            let (train, test) = cmd.data.load()?;
            let report = experiments::sweep(&train, &test, &cfg.train, axis, &values, &cfg.seeds, &cfg.score.options()?)?;
            ensure_dir(&cmd.out_dir)?;
            let name = format!("sweep_{}", axis.name());
            write_file(&cmd.out_dir.join(format!("{name}.csv")), report.to_csv())?;
            write_file(&cmd.out_dir.join(format!("{name}.json")), to_json(&report))?;
            print!("{}", report.to_csv());
        }
        Command::Config(ConfigCmd::Show { train, score }) => {
            apply_train_args(&mut cfg, &train);
            apply_score_args(&mut cfg, &score);
            cfg.validate()?;
            print!("{}", cfg.to_json_pretty() + "\n");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
