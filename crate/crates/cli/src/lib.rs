//! Command-line experiments over `crossfuse-core`: gradient checks, matching
//! against an exhaustive oracle, selector comparisons, propagation probes
//! and synthetic scene generation.

pub mod compare;
pub mod gen;
pub mod gradcheck;
pub mod harness;
pub mod match_demo;
pub mod output;
pub mod probe;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crossfuse_core::geometry::IouKind;

use crate::compare::{CompareConfig, Selector};
use crate::harness::SceneSource;
use crate::output::{ensure_dir, line_chart, num, write_csv, write_text, Series};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] crossfuse_core::Error),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), detail: err.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossfuse", version, about = "Seeded experiments for cross-sensor fusion and set-based selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed of every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every differentiable stage.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Run only suites whose name starts with this prefix.
        #[arg(long)]
        only: Option<String>,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Hungarian matching against exhaustive search.
    MatchDemo {
        #[command(flatten)]
        common: Common,
        /// Scenes to match.
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        /// Proposals per scene.
        #[arg(long, default_value_t = match_demo::DEFAULT_CANDIDATES)]
        box_cap: usize,
        /// IoU used for matching and overlap: bev or 3d.
        #[arg(long, default_value = "3d")]
        iou: IouKind,
        /// KITTI root with a `label_2` directory.
        #[arg(long)]
        kitti_dir: Option<PathBuf>,
        /// Synthetic scene configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Consistency ratio of set-based and NMS selectors.
    CompareNms {
        #[command(flatten)]
        common: Common,
        /// Evaluation scenes.
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Scenes used to train the heads.
        #[arg(long, default_value_t = compare::DEFAULT_TRAIN_SCENES)]
        train_scenes: usize,
        /// IoU above which a candidate counts as positive.
        #[arg(long, default_value_t = compare::DEFAULT_TAU)]
        tau: f64,
        /// Comma-separated confidence thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        v_grid: Vec<f64>,
        /// IoU used for matching and overlap: bev or 3d.
        #[arg(long, default_value = "3d")]
        iou: IouKind,
        /// Proposals per scene.
        #[arg(long, default_value_t = compare::DEFAULT_CANDIDATES)]
        box_cap: usize,
        /// KITTI root with a `label_2` directory.
        #[arg(long)]
        kitti_dir: Option<PathBuf>,
        /// Synthetic scene configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Propagation over synthetic scenes with a linear probe.
    Propagate {
        #[command(flatten)]
        common: Common,
        /// Scenes to propagate over.
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Sampled neighbours per node.
        #[arg(long, default_value_t = probe::DEFAULT_K)]
        k: usize,
        /// Message-passing steps.
        #[arg(long, default_value_t = 1)]
        t_steps: usize,
        /// Points sampled per scene.
        #[arg(long, default_value_t = probe::DEFAULT_POINTS)]
        points: usize,
        /// Use the identity configuration instead of seeded parameters.
        #[arg(long)]
        identity: bool,
        /// Not supported; propagation needs synthetic feature levels.
        #[arg(long)]
        kitti_dir: Option<PathBuf>,
    },
    /// Writes synthetic scenes in KITTI layout.
    GenScenes {
        #[command(flatten)]
        common: Common,
        /// Scenes to write.
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Synthetic scene configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// What a command reports: a summary for standard output and whether every
/// check it ran passed.
#[derive(Debug)]
pub struct Outcome {
    pub summary: String,
    pub passed: bool,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Gradcheck { common, only, tolerance } => cmd_gradcheck(&common, only.as_deref(), tolerance),
        Command::MatchDemo { common, scenes, box_cap, iou, kitti_dir, config } => {
            let source = SceneSource::new(kitti_dir.as_deref(), config.as_deref())?;
            cmd_match_demo(&common, &source, scenes, box_cap, iou)
        }
        Command::CompareNms { common, scenes, train_scenes, tau, v_grid, iou, box_cap, kitti_dir, config } => {
            let source = SceneSource::new(kitti_dir.as_deref(), config.as_deref())?;
            let cfg = CompareConfig {
                scenes,
                train_scenes,
                candidates: box_cap,
                tau,
                grid: v_grid,
                kind: iou,
                seed: common.seed,
            };
            cmd_compare_nms(&common, &source, &cfg)
        }
        Command::Propagate { common, scenes, k, t_steps, points, identity, kitti_dir } => {
            if kitti_dir.is_some() {
                return Err(CliError::Usage("propagate needs image feature levels; only synthetic scenes provide them".into()));
            }
            let cfg = probe::ProbeConfig { scenes, points, k, t_steps, identity, seed: common.seed };
            cmd_propagate(&common, &cfg)
        }
        Command::GenScenes { common, scenes, config } => {
            let cfg = harness::load_config(config.as_deref())?;
            cmd_gen_scenes(&common, &cfg, scenes)
        }
    }
}

fn cmd_gradcheck(common: &Common, only: Option<&str>, tolerance: f64) -> Result<Outcome, CliError> {
    ensure_dir(&common.out)?;
    let reports = gradcheck::run_suites(common.seed, only, tolerance)?;
    write_csv(
        &common.out.join("gradcheck.csv"),
        &["suite", "points", "max_rel_error", "tolerance", "passed"],
        reports.iter().map(|r| {
            vec![r.name.to_owned(), r.points.to_string(), num(r.max_rel_error), num(tolerance), r.passed.to_string()]
        }),
    )?;
    let mut summary = String::new();
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAILED" };
        writeln!(summary, "{:<16} max rel error {:.3e}  {status}", r.name, r.max_rel_error).expect("write to string");
    }
    Ok(Outcome { summary, passed: reports.iter().all(|r| r.passed) })
}

fn cmd_match_demo(
    common: &Common,
    source: &SceneSource,
    scenes: usize,
    box_cap: usize,
    kind: IouKind,
) -> Result<Outcome, CliError> {
    ensure_dir(&common.out)?;
    let rows = match_demo::run(source, scenes, box_cap, kind, common.seed)?;
    write_csv(&common.out.join("match_demo.csv"), &match_demo::HEADER, rows.iter().map(|r| r.record()))?;
    let checked = rows.iter().filter(|r| r.equal().is_some()).count();
    let agreed = rows.iter().filter(|r| r.equal() == Some(true)).count();
    let summary = format!("{} scenes, {checked} checked exhaustively, {agreed} equal\n", rows.len());
    Ok(Outcome { summary, passed: agreed == checked })
}

fn cmd_compare_nms(common: &Common, source: &SceneSource, cfg: &CompareConfig) -> Result<Outcome, CliError> {
    ensure_dir(&common.out)?;
    let report = compare::run(source, cfg)?;
    write_csv(&common.out.join("compare_nms.csv"), &compare::RATIO_HEADER, report.ratios.iter().map(|r| r.record()))?;
    write_csv(&common.out.join("nms_removal.csv"), &compare::REMOVAL_HEADER, report.removal.iter().map(|r| r.record()))?;
    write_text(&common.out.join("compare_nms.svg"), &report.plot(cfg.tau))?;
    let mut summary = String::new();
    for s in Selector::ALL {
        let curve: Vec<String> = report.curve(s).iter().map(|r| format!("{:.3}", r.ratio())).collect();
        writeln!(summary, "{:<16} R = [{}]", s.name(), curve.join(", ")).expect("write to string");
    }
    let violations = report.dominance_violations();
    writeln!(
        summary,
        "set-based dominates nms-cls: {}",
        if violations.is_empty() { "yes".to_owned() } else { format!("no, at v = {violations:?}") }
    )
    .expect("write to string");
    writeln!(summary, "unchanged by NMS at {}: {:.1}% of scenes", compare::NMS_THRESHOLD, 100.0 * report.identical_share())
        .expect("write to string");
    Ok(Outcome { summary, passed: true })
}

fn cmd_propagate(common: &Common, cfg: &probe::ProbeConfig) -> Result<Outcome, CliError> {
    ensure_dir(&common.out)?;
    let nodes = probe::run(cfg)?;
    let width = nodes.first().and_then(|s| s.refined.first()).map_or(0, Vec::len);
    let header = probe::latent_header(width);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&common.out.join("propagate_latents.csv"), &header, nodes.iter().flat_map(|s| s.records()))?;
    let scores = probe::probe_scores(&nodes)?;
    write_csv(&common.out.join("propagate_probe.csv"), &probe::PROBE_HEADER, scores.iter().map(|s| s.record()))?;
    let series: Vec<Series> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| Series { name: s.features.to_owned(), points: vec![(i as f64, s.balanced_accuracy), (i as f64 + 1.0, s.balanced_accuracy)] })
        .collect();
    write_text(
        &common.out.join("propagate_probe.svg"),
        &line_chart("Linear probe balanced accuracy", "feature set", "accuracy", [0.0, scores.len() as f64], [0.0, 1.0], &series),
    )?;
    let mut summary = String::new();
    for s in &scores {
        writeln!(summary, "probe on {:<10} balanced accuracy {:.4}", s.features, s.balanced_accuracy).expect("write to string");
    }
    let passed = if cfg.identity {
        let ok = nodes.iter().all(|s| {
            s.raw.iter().zip(&s.refined).all(|(r, f)| f[..r.len()] == r[..] && f[r.len()..].iter().all(|v| *v == 0.0))
        });
        writeln!(summary, "identity configuration reproduces the input latents: {ok}").expect("write to string");
        ok
    } else {
        true
    };
    Ok(Outcome { summary, passed })
}

fn cmd_gen_scenes(common: &Common, cfg: &crossfuse_core::scene::SceneConfig, scenes: usize) -> Result<Outcome, CliError> {
    let rows = gen::run(cfg, common.seed, scenes, &common.out)?;
    write_csv(&common.out.join("scenes.csv"), &gen::SUMMARY_HEADER, rows)?;
    write_text(&common.out.join("scene_config.txt"), &cfg.serialize())?;
    Ok(Outcome { summary: format!("wrote {scenes} scenes to {}\n", common.out.display()), passed: true })
}
