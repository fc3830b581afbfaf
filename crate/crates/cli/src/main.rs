use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latentlight::config::RunConfig;
use latentlight::dirsearch::{self, apply_direction, Classifier, DirectionSet};
use latentlight::evalkit::{self, InterpolationPath};
use latentlight::losses::Mode;
use latentlight::render::{compose_grid, Rgb8};
use latentlight::rng::stream;
use latentlight::scenegen::Generator;
use latentlight::{Error, Result};

#[derive(Parser)]
#[command(name = "latentlight", version, about = "Search, render and evaluate relighting directions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a direction set and its classifier.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render originals and every edit as a PPM grid (rows: original + M edits).
    RenderGrid {
        #[arg(long)]
        dirs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_scenes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an interpolation strip as PPM.
    Interpolate {
        #[arg(long)]
        dirs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        path: PathArg,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: Option<usize>,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        /// Index of the evaluation scene to edit.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the metric battery and write metrics.csv and summary.json.
    Eval {
        #[arg(long)]
        dirs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Direction set of the opposite mode, for the combined-edit shift.
        #[arg(long)]
        partner: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Relight,
    Recolor,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Scale,
    Pair,
}

/// Failure with its process exit code: 2 for usage and config, 3 at runtime.
struct Failure {
    code: u8,
    message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

fn runtime(context: &str, e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::DimMismatch { .. } | Error::Version { .. } | Error::IndexOutOfRange { .. } => {
            usage(e)
        }
        e => Failure { code: 3, message: format!("{context}: {e}") },
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(usage),
        None => Ok(RunConfig::default()),
    }
}

fn read_input<T>(path: &Path, what: &str, parse: impl Fn(&Path) -> Result<T>) -> std::result::Result<T, Failure> {
    parse(path).map_err(|e| usage(format!("cannot load {what} {}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: impl AsRef<[u8]>) -> std::result::Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| Failure { code: 3, message: format!("cannot write {}: {e}", path.display()) })
}

fn generator_for(cfg: &RunConfig, set: &DirectionSet) -> std::result::Result<Generator, Failure> {
    let gen = Generator::new(cfg.generator.clone()).map_err(usage)?;
    set.check_generator(gen.config()).map_err(usage)?;
    Ok(gen)
}

fn train(config: &Path, mode: Option<ModeArg>, out_dir: Option<PathBuf>) -> std::result::Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(usage)?;
    if let Some(m) = mode {
        cfg.train.weights.mode = match m {
            ModeArg::Relight => Mode::Relight,
            ModeArg::Recolor => Mode::Recolor,
        };
    }
    let out = out_dir.unwrap_or(cfg.output_dir.clone());
    let gen = Generator::new(cfg.generator.clone()).map_err(usage)?;
    let outcome = dirsearch::train_directions(&cfg.train, &gen).map_err(|e| runtime("training failed", e))?;

    let mut log = format!("step,{}\n", latentlight::losses::LossReport::CSV_HEADER);
    for (step, r) in outcome.log.iter().enumerate() {
        log.push_str(&format!("{step},{}\n", r.csv_row()));
    }
    write_output(&out.join("directions.json"), outcome.directions.to_json().map_err(|e| runtime("save", e))?)?;
    write_output(&out.join("classifier.json"), outcome.classifier.to_json().map_err(|e| runtime("save", e))?)?;
    write_output(&out.join("training_log.csv"), log)?;
    log::info!("wrote {} directions to {}", outcome.directions.len(), out.display());
    Ok(())
}

fn render_grid(dirs: &Path, config: Option<&Path>, k: usize, out: Option<PathBuf>) -> std::result::Result<(), Failure> {
    if k == 0 {
        return Err(usage("--n-scenes must be >= 1"));
    }
    let cfg = load_config(config)?;
    let set = read_input(dirs, "directions", DirectionSet::load)?;
    let gen = generator_for(&cfg, &set)?;
    let fail = |e| runtime("render failed", e);
    let styles = evalkit::eval_styles(&gen, cfg.eval.seed, stream::EVAL_SCENES, k).map_err(fail)?;
    let mut rows = vec![Vec::with_capacity(k); set.len() + 1];
    for w in &styles {
        rows[0].push(Rgb8::from_chw(&gen.synthesize(w).map_err(fail)?.pixels).map_err(fail)?);
        for i in 0..set.len() {
            let img = gen.synthesize(&apply_direction(w, &set, i, 1.0).map_err(fail)?).map_err(fail)?;
            rows[i + 1].push(Rgb8::from_chw(&img.pixels).map_err(fail)?);
        }
    }
    let grid = compose_grid(&rows).map_err(fail)?;
    write_output(&out.unwrap_or_else(|| cfg.output_dir.join("grid.ppm")), grid.to_ppm())
}

#[allow(clippy::too_many_arguments)]
fn interpolate(
    dirs: &Path,
    config: Option<&Path>,
    path: PathArg,
    i: usize,
    j: Option<usize>,
    steps: usize,
    scene: usize,
    out: Option<PathBuf>,
) -> std::result::Result<(), Failure> {
    let cfg = load_config(config)?;
    let set = read_input(dirs, "directions", DirectionSet::load)?;
    let gen = generator_for(&cfg, &set)?;
    let path = match (path, j) {
        (PathArg::Scale, _) => InterpolationPath::Scale { i },
        (PathArg::Pair, Some(j)) => InterpolationPath::Pair { i, j },
        (PathArg::Pair, None) => return Err(usage("--path pair requires --j")),
    };
    let fail = |e| runtime("interpolation failed", e);
    let styles = evalkit::eval_styles(&gen, cfg.eval.seed, stream::EVAL_SCENES, scene + 1).map_err(fail)?;
    let frames = evalkit::interpolate(&set, path, steps, &gen, &styles[scene]).map_err(fail)?;
    let tiles = frames.iter().map(|f| Rgb8::from_chw(&f.pixels)).collect::<Result<Vec<_>>>().map_err(fail)?;
    let strip = compose_grid(&[tiles]).map_err(fail)?;
    write_output(&out.unwrap_or_else(|| cfg.output_dir.join("interpolation.ppm")), strip.to_ppm())
}

fn eval(
    dirs: &Path,
    config: Option<&Path>,
    classifier: Option<&Path>,
    partner: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> std::result::Result<(), Failure> {
    let cfg = load_config(config)?;
    let set = read_input(dirs, "directions", DirectionSet::load)?;
    let gen = generator_for(&cfg, &set)?;
    let clf = classifier
        .map(|p| read_input(p, "classifier", |p| Classifier::from_json(&std::fs::read_to_string(p)?)))
        .transpose()?;
    let partner = partner.map(|p| read_input(p, "partner directions", DirectionSet::load)).transpose()?;
    if let Some(p) = &partner {
        p.check_generator(gen.config()).map_err(usage)?;
    }
    let report = evalkit::evaluate(&set, clf.as_ref(), partner.as_ref(), &gen, &cfg.train.objective, &cfg.eval)
        .map_err(|e| runtime("evaluation failed", e))?;
    let out = out_dir.unwrap_or(cfg.output_dir.clone());
    write_output(&out.join("metrics.csv"), report.to_csv())?;
    write_output(&out.join("summary.json"), report.summary_json().map_err(|e| runtime("summary", e))?)?;
    for (name, ok) in &report.checks {
        log::info!("{name}: {}", if *ok { "pass" } else { "fail" });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, mode, out_dir } => train(&config, mode, out_dir),
        Command::RenderGrid { dirs, config, n_scenes, out } => render_grid(&dirs, config.as_deref(), n_scenes, out),
        Command::Interpolate { dirs, config, path, i, j, steps, scene, out } => {
            interpolate(&dirs, config.as_deref(), path, i, j, steps, scene, out)
        }
        Command::Eval { dirs, config, classifier, partner, out_dir } => {
            eval(&dirs, config.as_deref(), classifier.as_deref(), partner.as_deref(), out_dir)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
