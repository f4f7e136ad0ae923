//! `facedyn`: batch front end for keypoint ingestion, feature extraction,
//! recurrence analysis, task scoring and the classification harness.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use facedyn::align::{build_template, StabilizationMode, Template, TemplateScope};
use facedyn::dynamics::{
    ami, cross_plot, embed, fnn, recurrence_matrix, rescale_unit, rqa_metrics, AmiConfig,
    FnnConfig, RQA_METRIC_NAMES,
};
use facedyn::features::kinematic_columns;
use facedyn::ingest::{assemble_series, read_keypoint_file, write_series_csv};
use facedyn::ml::{
    learning_curve, lopo_eval, random_split_eval, select_features, FeatureMatrix, Model, RowMeta,
};
use facedyn::pipeline::{
    load_recording, read_features, recording_rows, render_report, report, run_pipeline,
    write_atomic, write_curve_outputs, write_lopo_outputs, write_split_outputs, FeatureSet,
    Recording, RunConfig,
};
use facedyn::preprocess::preprocess;
use facedyn::synth::{
    gen_participant_dataset, permute_labels, write_fixture, DatasetSpec, FixtureSpec,
};
use facedyn::taskperf::{read_event_log, window_count, windowed_perf, PERF_COLUMNS};

#[derive(Parser)]
#[command(
    name = "facedyn",
    version,
    about = "Facial-movement dynamics and workload classification"
)]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set forest.n_trees=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "FACEDYN_WORKERS", global = true)]
    workers: Option<usize>,
    /// Increase log verbosity.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write one feature CSV per stabilization mode.
    Run(RunArgs),
    /// Parse a keypoint file into the long `frame,id,x,y,c` CSV.
    Ingest(FileArgs),
    /// Mask, interpolate, filter and normalise a keypoint file.
    Preprocess(FileArgs),
    /// Kinematic feature rows for one recording.
    Features(FeaturesArgs),
    /// Auto or cross recurrence measures of CSV columns.
    Rqa(RqaArgs),
    /// Windowed task-performance scores of an event log.
    Perf(PerfArgs),
    /// Fit a model on a feature CSV and save it as JSON.
    Train(TrainArgs),
    /// Repeated stratified random-split evaluation.
    EvalSplit(EvalArgs),
    /// Leave-one-participant-out evaluation.
    EvalLopo(EvalArgs),
    /// Participant-specific learning curves.
    LearningCurve(EvalArgs),
    /// Synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Mean ± sd table over fold report CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    keypoints_dir: Option<PathBuf>,
    #[arg(long)]
    events_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Stabilization modes (repeatable): global, per-participant, none.
    #[arg(long = "mode")]
    modes: Vec<StabilizationMode>,
}

#[derive(Args)]
struct FileArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Keypoint file named `<participant>/<session>_<condition>.jsonl`.
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Template text file; built from the input when absent.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value = "global")]
    mode: StabilizationMode,
}

#[derive(Args)]
struct RqaArgs {
    /// CSV with a header row.
    input: PathBuf,
    #[arg(long)]
    column: String,
    /// Second column for cross recurrence.
    #[arg(long)]
    cross: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the recurrence plot in run-length form.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Print AMI and FNN estimates of tau and m instead.
    #[arg(long)]
    estimate: bool,
    #[arg(long, default_value_t = 100)]
    max_lag: usize,
    #[arg(long, default_value_t = 10)]
    max_dim: usize,
}

#[derive(Args)]
struct PerfArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Recording length in seconds; defaults to the last event time.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// Feature groups joined by `+`: kinematic, rqa, crqa, recurrence, perf, pose, all.
    #[arg(long = "feature-set", default_value = "kinematic")]
    set: FeatureSet,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long = "feature-set", default_value = "kinematic")]
    set: FeatureSet,
    #[arg(long)]
    out: PathBuf,
    /// Shuffle labels with this seed before evaluating.
    #[arg(long)]
    permute: Option<u64>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Keypoint files, event logs and a label table in the pipeline layout.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        participants: usize,
        #[arg(long, default_value_t = 3600)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        baseline_frames: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        no_events: bool,
    },
    /// A labelled feature matrix with controllable participant idiosyncrasy.
    Dataset {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 12)]
        participants: usize,
        #[arg(long, default_value_t = 16)]
        windows: usize,
        #[arg(long, default_value_t = 0.0)]
        idiosyncrasy: f64,
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Fold report CSVs (`*_folds.csv`).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let overrides = cli
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_toml_with("", &overrides)?,
    };
    cfg.validate_params()?;
    Ok(cfg)
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_run(cfg: RunConfig, args: RunArgs) -> Result<()> {
    let mut cfg = cfg;
    if let Some(d) = args.keypoints_dir {
        cfg.keypoints_dir = d;
    }
    if let Some(d) = args.events_dir {
        cfg.events_dir = Some(d);
    }
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    if !args.modes.is_empty() {
        cfg.stabilization = args.modes;
    }
    let summary = run_pipeline(&cfg)?;
    println!("config {}", summary.config_hash);
    println!(
        "recordings {} computed {} cached {}",
        summary.recordings, summary.computed, summary.cache_hits
    );
    for (path, rows) in &summary.outputs {
        println!("{} rows {}", path.display(), rows);
    }
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig, args: FileArgs, clean: bool) -> Result<()> {
    let frames = read_keypoint_file(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut series = assemble_series(&frames, cfg.window.fps)?;
    if clean {
        let (s, r) = preprocess(&series, &cfg.preprocess)?;
        log::info!("{r:?}");
        series = s;
    }
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &series)?;
    write_atomic(&args.output, &buf)?;
    Ok(())
}

fn cmd_features(cfg: &RunConfig, args: FeaturesArgs) -> Result<()> {
    let rec = Recording::from_path(&args.input).with_context(|| {
        format!(
            "{}: expected <participant>/<session>_<condition>.<ext>",
            args.input.display()
        )
    })?;
    let mut cfg = cfg.clone();
    cfg.rqa_channels.clear();
    cfg.crqa_pairs.clear();
    cfg.events_dir = None;
    let series = load_recording(&rec, &cfg)?;
    let template = match &args.template {
        Some(p) => Template::from_text(&fs::read_to_string(p)?)?,
        None => build_template(
            &[&series],
            cfg.landmarks.template,
            TemplateScope::PerParticipant,
        )?,
    };
    let rows = recording_rows(&rec, &series, &template, args.mode, &cfg)?;
    let mut m = FeatureMatrix::new(kinematic_columns());
    for (index, row) in rows {
        let meta = RowMeta {
            participant: rec.participant.clone(),
            session: rec.session,
            condition: rec.condition,
            window_index: index,
        };
        m.push_row(meta, &row)?;
    }
    m.write_csv(&args.output)?;
    println!("{} rows {}", args.output.display(), m.n_rows());
    Ok(())
}

fn read_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let j = r
        .headers()?
        .iter()
        .position(|h| h == name)
        .with_context(|| format!("{}: no column '{name}'", path.display()))?;
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec
            .get(j)
            .and_then(|s| s.trim().parse().ok())
            .with_context(|| {
                format!(
                    "{}: row {} of '{name}' is not a number",
                    path.display(),
                    k + 1
                )
            })?;
        out.push(v);
    }
    Ok(out)
}

fn cmd_rqa(cfg: &RunConfig, args: RqaArgs) -> Result<()> {
    let a = read_column(&args.input, &args.column)?;
    if args.estimate {
        let (x, _) = rescale_unit(&a);
        let am = ami(&x, args.max_lag, &AmiConfig::default())?;
        let fr = fnn(&x, am.tau, args.max_dim, &FnnConfig::default())?;
        let mut rows = Vec::new();
        for (k, v) in am.curve.iter().enumerate() {
            rows.push(vec!["ami".into(), (k + 1).to_string(), v.to_string()]);
        }
        for (k, v) in fr.fractions.iter().enumerate() {
            rows.push(vec!["fnn".into(), (k + 1).to_string(), v.to_string()]);
        }
        let header = ["curve", "x", "value"].map(String::from);
        write_atomic(&args.output, csv_text(&header, &rows).as_bytes())?;
        println!("tau {}", am.tau);
        match fr.m {
            Some(m) => println!("m {m}"),
            None => println!("m none (no dimension reached the threshold)"),
        }
        return Ok(());
    }
    let (plot, rqa_cfg) = match &args.cross {
        Some(b) => {
            let b = read_column(&args.input, b)?;
            (cross_plot(&a, &b, &cfg.embedding, &cfg.crqa)?, &cfg.crqa)
        }
        None => {
            let (x, _) = rescale_unit(&a);
            let traj = embed(&x, &cfg.embedding)?;
            (recurrence_matrix(&traj, None, &cfg.rqa)?, &cfg.rqa)
        }
    };
    let metrics = rqa_metrics(&plot, rqa_cfg);
    let header: Vec<String> = RQA_METRIC_NAMES.iter().map(|s| s.to_string()).collect();
    let row: Vec<String> = metrics.to_array().iter().map(|v| v.to_string()).collect();
    write_atomic(&args.output, csv_text(&header, &[row]).as_bytes())?;
    if let Some(p) = &args.plot {
        write_atomic(p, plot.to_rle().as_bytes())?;
    }
    Ok(())
}

fn cmd_perf(cfg: &RunConfig, args: PerfArgs) -> Result<()> {
    let events = read_event_log(&args.input)?;
    let duration = args
        .duration
        .unwrap_or_else(|| events.last().map(|e| e.t).unwrap_or(0.0));
    let n = window_count(duration, &cfg.window);
    let windows = windowed_perf(&events, &cfg.window, n)?;
    let header: Vec<String> = std::iter::once("window_index".to_string())
        .chain(PERF_COLUMNS.iter().map(|s| s.to_string()))
        .collect();
    let rows: Vec<Vec<String>> = windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            std::iter::once(k.to_string())
                .chain(w.values().into_iter().map(fmt_opt))
                .collect()
        })
        .collect();
    write_atomic(&args.output, csv_text(&header, &rows).as_bytes())?;
    println!("{} windows {}", args.output.display(), rows.len());
    Ok(())
}

fn load_matrix(path: &Path, set: &FeatureSet, permute: Option<u64>) -> Result<FeatureMatrix> {
    let m = read_features(path, set)?;
    Ok(match permute {
        Some(seed) => permute_labels(&m, seed)?,
        None => m,
    })
}

fn cmd_train(cfg: &RunConfig, args: TrainArgs) -> Result<()> {
    let m = load_matrix(&args.features, &args.set, None)?;
    let m = if cfg.eval.select_features {
        let sel = select_features(&m, &cfg.forest, &cfg.select, cfg.forest.seed)?;
        m.select_named(&sel.features)?
    } else {
        m
    };
    let model = Model::fit(&m, &cfg.forest)?;
    write_atomic(&args.output, &serde_json::to_vec(&model)?)?;
    println!(
        "{} features {}",
        args.output.display(),
        model.features.len()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: EvalArgs, kind: &str) -> Result<()> {
    let m = load_matrix(&args.features, &args.set, args.permute)?;
    fs::create_dir_all(&args.out)?;
    let written = match kind {
        "split" => {
            let r = random_split_eval(&m, &cfg.forest, &cfg.select, &cfg.eval)?;
            println!(
                "balanced accuracy {}",
                r.summary.balanced_accuracy.percent()
            );
            write_split_outputs(&args.out, &r)?
        }
        "lopo" => {
            let r = lopo_eval(&m, &cfg.forest, &cfg.eval)?;
            println!("balanced accuracy {}", r.balanced_accuracy.percent());
            write_lopo_outputs(&args.out, &r)?
        }
        _ => {
            let c = learning_curve(&m, &cfg.forest, &cfg.select, &cfg.curve)?;
            for (size, a) in &c.population {
                println!("size {size} balanced accuracy {}", a.percent());
            }
            write_curve_outputs(&args.out, &c)?
        }
    };
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_synth(cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Fixture {
            out,
            participants,
            frames,
            baseline_frames,
            seed,
            no_events,
        } => {
            let layout = write_fixture(
                &out,
                &FixtureSpec {
                    participants,
                    frames,
                    baseline_frames,
                    seed,
                    events: !no_events,
                    ..Default::default()
                },
            )?;
            println!("recordings {}", layout.recordings);
            println!("keypoints {}", layout.keypoints_dir.display());
            if let Some(ev) = &layout.events_dir {
                println!("events {}", ev.display());
            }
            println!("labels {}", layout.labels.display());
        }
        SynthCommand::Dataset {
            output,
            participants,
            windows,
            idiosyncrasy,
            separation,
            seed,
        } => {
            if !(0.0..=1.0).contains(&idiosyncrasy) {
                bail!("idiosyncrasy must lie in [0, 1]");
            }
            let d = gen_participant_dataset(&DatasetSpec {
                participants,
                windows_per_condition: windows,
                idiosyncrasy,
                separation,
                seed,
                ..Default::default()
            })?;
            d.matrix.write_csv(&output)?;
            println!("{} rows {}", output.display(), d.matrix.n_rows());
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let lines = report(&args.inputs)?;
    let table = render_report(&lines)?;
    match &args.output {
        Some(p) => write_atomic(p, table.as_bytes())?,
        None => std::io::stdout().write_all(table.as_bytes())?,
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = real_main(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("worker count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Run(a) => cmd_run(cfg, a),
        Command::Ingest(a) => cmd_ingest(&cfg, a, false),
        Command::Preprocess(a) => cmd_ingest(&cfg, a, true),
        Command::Features(a) => cmd_features(&cfg, a),
        Command::Rqa(a) => cmd_rqa(&cfg, a),
        Command::Perf(a) => cmd_perf(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::EvalSplit(a) => cmd_eval(&cfg, a, "split"),
        Command::EvalLopo(a) => cmd_eval(&cfg, a, "lopo"),
        Command::LearningCurve(a) => cmd_eval(&cfg, a, "curve"),
        Command::Synth(c) => cmd_synth(c),
        Command::Report(a) => cmd_report(a),
    }
}
