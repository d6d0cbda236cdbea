use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use simplenerf::config::RunConfig;
use simplenerf::eval::evaluate;
use simplenerf::exec::Execution;
use simplenerf::io::{load_dataset, read_split, write_dataset, write_pfm, write_png, write_split};
use simplenerf::raster::Image;
use simplenerf::reliability::Verdict;
use simplenerf::render::RenderConfig;
use simplenerf::scene::{generate_scene, sample_sparse_depth, Dataset};
use simplenerf::trainer::{
    self, load_checkpoint, mask_maps, render_view, TrainData, TrainOptions, TrainState, CHECKPOINT_FILE,
};
use simplenerf::Error;

#[derive(Parser)]
#[command(name = "simplenerf", version, about = "Sparse-input NeRF with augmentation-based depth supervision")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take the desk defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Seed for scene generation, training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ablation preset: simplenerf, dsnerf-baseline, no-points, no-views, no-cfc,
    /// no-reliable-depth, identical-aug.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground-truth depth and sparse keypoints.
    MakeData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all four models on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed iterations (the checkpoint stays resumable).
        #[arg(long, hide = true)]
        stop_at: Option<u64>,
    },
    /// Render views of a dataset with a trained checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        views: ViewSet,
    },
    /// Render the test split and score it with and without visibility masks.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the depth reliability masks of a training view.
    Mask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset view index; defaults to the first training view.
        #[arg(long)]
        view: Option<usize>,
    },
    /// Compare analytic gradients against finite differences.
    GradCheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewSet {
    All,
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFinite { .. }) => 4,
        _ => 3,
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &c.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(s) = c.seed {
        cfg.scene.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    for s in &c.set {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = resolve(&cli.common)?;
    let exec = Execution::from_flag(cli.common.deterministic);
    let force = cli.common.force;
    match cli.command {
        Command::MakeData { out } => make_data(&cfg, &out, force),
        Command::Train {
            data,
            out,
            resume,
            stop_at,
        } => train(&cfg, &data, &out, resume, stop_at, force, exec),
        Command::Render {
            checkpoint,
            data,
            out,
            views,
        } => render(&cfg, &checkpoint, &data, &out, views, exec),
        Command::Evaluate { checkpoint, data, out } => eval(&cfg, &checkpoint, &data, &out, exec),
        Command::Mask {
            checkpoint,
            data,
            out,
            view,
        } => mask(&cfg, &checkpoint, &data, &out, view, exec),
        Command::GradCheck => {
            let started = Instant::now();
            let report = simplenerf::gradcheck::run_all(cfg.train.seed)?;
            println!("{report}");
            println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
            Ok(if report.passed() { 0 } else { 4 })
        }
    }
}

fn make_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<u8> {
    let s = &cfg.scene;
    let mut ds = generate_scene(&s.spec()?, s.seed)?;
    ds.sparse_depth = sample_sparse_depth(&ds, s.sparse_per_view, s.sparse_percentile, s.sparse_noise, s.seed)?;
    write_dataset(out, &ds, force)?;
    cfg.write_resolved(out)?;
    println!("scene {} ({}x{}) -> {}", s.preset, s.width, s.height, out.display());
    println!("views {}  train {:?}  test {:?}", ds.views.len(), ds.train, ds.test);
    println!("near {:.4}  far {:.4}  keypoints {}", ds.near, ds.far, ds.sparse_depth.len());
    for sub in ["images", "depth"] {
        println!("{sub}/ {} files", count_files(&out.join(sub))?);
    }
    println!("poses_bounds.bin sparse_depth.csv split.txt {}", simplenerf::config::RESOLVED_CONFIG_FILE);
    Ok(0)
}

fn count_files(dir: &Path) -> Result<usize> {
    Ok(fs::read_dir(dir).with_context(|| dir.display().to_string())?.count())
}

fn non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: bool,
    stop_at: Option<u64>,
    force: bool,
    exec: Execution,
) -> Result<u8> {
    let tc = cfg.train_config();
    let ds = load_dataset(data, Some(cfg.scene.train_views))?;
    let td = TrainData::new(&ds, &tc)?;
    let mut state = if resume {
        trainer::resume(&out.join(CHECKPOINT_FILE), &tc)?
    } else {
        if non_empty(out) && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite or --resume to continue)",
                out.display()
            ))
            .into());
        }
        TrainState::new(tc)?
    };
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    cfg.write_resolved(out)?;
    write_split(&out.join("split.txt"), &ds.train, &ds.test)?;
    let from = state.iteration;
    let started = Instant::now();
    let summary = trainer::train(
        &mut state,
        &td,
        TrainOptions {
            execution: exec,
            out_dir: Some(out),
            stop_at,
        },
    )?;
    let secs = started.elapsed().as_secs_f64();
    if let Some(last) = summary.rows.last() {
        println!("{}", trainer::METRICS_HEADER);
        println!("{}", last.csv_line());
    }
    println!(
        "iterations {from}..{} in {secs:.1}s; checkpoint {}",
        state.iteration,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(0)
}

fn render_config(ds: &Dataset, state: &TrainState) -> RenderConfig {
    RenderConfig {
        near: ds.near,
        far: ds.far,
        n_coarse: state.config.sampling.n_coarse,
        n_fine: state.config.sampling.n_fine,
    }
}

fn write_render(out: &Path, view: usize, image: &Image, depth: &simplenerf::raster::DepthMap) -> Result<()> {
    for sub in ["renders", "depth"] {
        fs::create_dir_all(out.join(sub)).with_context(|| out.join(sub).display().to_string())?;
    }
    write_png(&out.join("renders").join(format!("{view:03}.png")), image)?;
    write_pfm(&out.join("depth").join(format!("{view:03}.pfm")), depth)?;
    Ok(())
}

fn render(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, views: ViewSet, exec: Execution) -> Result<u8> {
    let state = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data, None)?;
    let rc = render_config(&ds, &state);
    let ids: Vec<usize> = match views {
        ViewSet::All => (0..ds.views.len()).collect(),
        ViewSet::Train => ds.train.clone(),
        ViewSet::Test => ds.test.clone(),
    };
    cfg.write_resolved(out)?;
    for i in ids {
        let v = &ds.views[i];
        let r = render_view(&state.models, &v.intrinsics, &v.pose, &rc, cfg.eval.seed, false, exec)?;
        write_render(out, i, &r.image, &r.depth)?;
        println!("view {i:03} -> renders/{i:03}.png depth/{i:03}.pfm");
    }
    Ok(0)
}

/// The split a run was trained on, recorded next to its checkpoint.
fn check_split(checkpoint: &Path, ds: &Dataset) -> Result<()> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join("split.txt");
    if !path.exists() {
        return Ok(());
    }
    let (train, test) = read_split(&path)?;
    if train != ds.train || test != ds.test {
        bail!(Error::Data(format!(
            "split mismatch: run trained on train {train:?} / test {test:?} ({}), dataset has train {:?} / test {:?}",
            path.display(),
            ds.train,
            ds.test
        )));
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, exec: Execution) -> Result<u8> {
    let state = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data, Some(cfg.scene.train_views))?;
    check_split(checkpoint, &ds)?;
    let rc = render_config(&ds, &state);
    let (report, views) = evaluate(&state.models, &ds, &rc, cfg.eval.threshold_factor, cfg.eval.seed, exec)?;
    cfg.write_resolved(out)?;
    report.write(out)?;
    fs::create_dir_all(out.join("masks"))?;
    for v in &views {
        write_render(out, v.view, &v.rendered.image, &v.rendered.depth)?;
        if let Some(mask) = &v.mask {
            let (w, h) = (v.rendered.image.width(), v.rendered.image.height());
            let px = mask.iter().map(|m| if *m { [1.0; 3] } else { [0.0; 3] }).collect();
            write_png(&out.join("masks").join(format!("{:03}.png", v.view)), &Image::from_pixels(w, h, px)?)?;
        }
    }
    println!("{}", report.summary());
    Ok(0)
}

/// White: the main model is trusted; black: the alternative is; gray: neither.
fn verdict_image(w: usize, h: usize, v: &[Verdict]) -> Result<Image> {
    let px = v
        .iter()
        .map(|v| match v {
            Verdict::MainReliable => [1.0; 3],
            Verdict::AltReliable => [0.0; 3],
            Verdict::Neither => [0.5; 3],
        })
        .collect();
    Ok(Image::from_pixels(w, h, px)?)
}

fn mask(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, view: Option<usize>, exec: Execution) -> Result<u8> {
    let state = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data, Some(cfg.scene.train_views))?;
    let td = TrainData::new(&ds, &state.config)?;
    let view = view.unwrap_or(ds.train[0]);
    if !ds.train.contains(&view) {
        return Err(Error::Config(format!("--view {view} is not a training view (train {:?})", ds.train)).into());
    }
    let maps = mask_maps(&state.models, &td, &state.config, view, cfg.eval.seed, exec)?;
    fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    for (name, v) in [("ap", &maps.m_ap), ("av", &maps.m_av), ("cfc", &maps.m_cfc)] {
        let file = format!("mask_{name}_{view:03}.png");
        write_png(&out.join(&file), &verdict_image(maps.width, maps.height, v)?)?;
        let count = |x: Verdict| v.iter().filter(|y| **y == x).count();
        println!(
            "{file}: alt {}  main {}  neither {}",
            count(Verdict::AltReliable),
            count(Verdict::MainReliable),
            count(Verdict::Neither)
        );
    }
    Ok(0)
}
