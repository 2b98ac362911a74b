//! `weakvid` command-line driver.

mod config;
mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use weakvid::detector::Detector;
use weakvid::ema::ModelState;
use weakvid::evaluation::evaluate_model;
use weakvid::experiment::{
    ablation_markdown, ablation_rows, ablation_specs, run_from_burn_in, run_grid, summarize, AblationGroup, AblationRow,
    ExperimentPlan, GridOutput, RunResult, RunSpec, Summary, Variant,
};
use weakvid::io::{load_params, read_csv, read_dataset, save_params, write_csv, write_dataset, write_json};
use weakvid::synthetic::generate_splits;
use weakvid::training::{initial_state, run_burn_in, write_run, CurveRow, RunOptions, StageOutcome};
use weakvid::types::DatasetSplit;

use config::{Overrides, ProjectConfig};
use plot::{draw_bands, Band};

/// Bad invocation that clap cannot catch on its own.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "weakvid", version, about = "Weakly semi-supervised video object detection")]
struct Cli {
    /// JSON config; missing sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print per-epoch progress.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Supervised burn-in on the fully labeled split.
    BurnIn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Teacher-student mutual learning from a burn-in checkpoint.
    MutualLearn {
        #[arg(long)]
        data: PathBuf,
        /// Burn-in parameter file, usually `checkpoints/final.theta_epoch`.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "+weak+pseudo+tsmr")]
        variant: String,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Both stages for a named variant over several seeds.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "+weak+pseudo+tsmr")]
        variant: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Comma-separated seeds; defaults to 0..repeats.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// mAP of a parameter file on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold, keep-rate and label-fraction ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Learning-curve and label-fraction plots from run directories.
    Plot {
        /// Directories written by `train`, `burn-in`, `mutual-learn` or `ablate`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSplit {
    Validation,
    Test,
    Full,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 usage, 3 data, 4 numeric.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<weakvid::Error>() {
            return match err {
                weakvid::Error::InvalidInput(_) => 2,
                weakvid::Error::Numeric(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    3
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ProjectConfig::load(cli.config.as_deref())?;
    let verbose = cli.verbose;
    match cli.command {
        Command::Generate { out, seed, force } => {
            if let Some(s) = seed {
                cfg.generator.seed = s;
            }
            cfg.generator.validate()?;
            let split = generate_splits(&cfg.generator)?;
            write_dataset(&out, &split, force)?;
            write_json(&out.join("generator.json"), &cfg.generator)?;
            println!("wrote {} videos to {}", split.total_videos(), out.display());
        }
        Command::BurnIn { data, out, seed, force, overrides } => {
            overrides.apply(&mut cfg);
            cfg.experiment.validate()?;
            prepare_out(&out, force)?;
            let split = read_dataset(&data)?;
            let det = detector_for(&split, &cfg)?;
            let training = weakvid::TrainingConfig { seed, ..cfg.experiment.training.clone() };
            let opts = run_options(&out, verbose);
            let outcome = run_burn_in(&det, &split, initial_state(&det, seed), &training, &cfg.experiment.tsmr, &cfg.experiment.weights, &opts)?;
            write_run(&out, &cfg, &outcome, "final")?;
            report_stage(&det, &split, &cfg, &outcome.state.theta_epoch, &out)?;
        }
        Command::MutualLearn { data, init, out, variant, fraction, seed, force, overrides } => {
            overrides.apply(&mut cfg);
            cfg.experiment.validate()?;
            let variant: Variant = variant.parse()?;
            if !variant.flags().mutual_stage {
                return Err(Usage(format!("variant {variant} has no mutual-learning stage")).into());
            }
            prepare_out(&out, force)?;
            let split = read_dataset(&data)?;
            let det = detector_for(&split, &cfg)?;
            let params = load_params(&init, Some(det.num_params()))?;
            let burn_in = StageOutcome { state: ModelState::uniform(params), curves: Vec::new(), schedule: Vec::new() };
            let spec = RunSpec { fraction, ..RunSpec::new(variant) };
            let run = run_from_burn_in(&det, &split, &cfg.experiment, &spec, seed, &burn_in, &run_options(&out, verbose))?;
            let outcome = run.mutual.expect("mutual variant");
            write_run(&out, &(&cfg, &spec), &outcome, "final")?;
            write_json(&out.join("result.json"), &run.result)?;
            println!("{variant}: val mAP {:.4} test mAP {:.4}", run.result.val_map, run.result.test_map);
        }
        Command::Train { data, out, variant, repeats, seeds, fraction, force, overrides } => {
            overrides.apply(&mut cfg);
            cfg.experiment.validate()?;
            let plan = ExperimentPlan { variant: variant.parse()?, repeats, seeds, video_label_fraction: fraction };
            plan.validate()?;
            prepare_out(&out, force)?;
            let split = read_dataset(&data)?;
            let det = detector_for(&split, &cfg)?;
            write_json(&out.join("config.json"), &(&cfg, &plan))?;
            let results = run_grid(&det, &split, &cfg.experiment, &[plan.spec()], &plan.seeds(), &grid_output(&out, verbose))?;
            let summary = write_summary(&out, &results)?;
            for s in summary {
                println!(
                    "{}: val mAP {:.4} ± {:.4}, test mAP {:.4} ± {:.4} over {} seeds",
                    s.label, s.val_mean, s.val_std, s.test_mean, s.test_std, s.runs
                );
            }
        }
        Command::Evaluate { data, params, split: which, out } => {
            let split = read_dataset(&data)?;
            let det = detector_for(&split, &cfg)?;
            let params = load_params(&params, Some(det.num_params()))?;
            let videos = match which {
                EvalSplit::Validation => &split.validation,
                EvalSplit::Test => &split.test,
                EvalSplit::Full => &split.fully_labeled,
            };
            let report = evaluate_model(&det, &params, videos, &cfg.experiment.training.eval)?;
            fs::create_dir_all(&out)?;
            write_json(
                &out.join("eval.json"),
                &EvalSummary { split: format!("{which:?}").to_lowercase(), map: report.map, num_gt: report.num_gt, num_detections: report.num_detections },
            )?;
            write_csv(&out.join("pr_curve.csv"), &report.pr_curve)?;
            println!("mAP {:.4} ({} ground-truth boxes, {} detections)", report.map, report.num_gt, report.num_detections);
        }
        Command::Ablate { data, out, repeats, seeds, force, overrides } => {
            overrides.apply(&mut cfg);
            cfg.experiment.validate()?;
            let plan = ExperimentPlan { variant: Variant::WeakPseudoTsmr, repeats, seeds, video_label_fraction: 1.0 };
            plan.validate()?;
            prepare_out(&out, force)?;
            let split = read_dataset(&data)?;
            let det = detector_for(&split, &cfg)?;
            write_json(&out.join("config.json"), &cfg)?;
            let grid = ablation_specs();
            let specs: Vec<RunSpec> = grid.iter().map(|g| g.1.clone()).collect();
            let results = run_grid(&det, &split, &cfg.experiment, &specs, &plan.seeds(), &grid_output(&out, verbose))?;
            write_summary(&out, &results)?;
            let rows = ablation_rows(&grid, &results);
            write_csv(&out.join("ablation.csv"), &rows)?;
            let md = ablation_markdown(&rows);
            fs::write(out.join("ablation.md"), &md)?;
            print!("{md}");
        }
        Command::Plot { runs, out } => plot_runs(&runs, &out)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    split: String,
    map: f64,
    num_gt: usize,
    num_detections: usize,
}

/// `summary.json` layout: the per-seed results and their aggregate.
#[derive(Serialize, Deserialize)]
pub struct SummaryFile {
    pub runs: Vec<RunResult>,
    pub summary: Vec<Summary>,
}

fn write_summary(out: &Path, results: &[RunResult]) -> Result<Vec<Summary>> {
    let summary = summarize(results);
    write_json(&out.join("summary.json"), &SummaryFile { runs: results.to_vec(), summary: summary.clone() })?;
    write_csv(&out.join("results.csv"), results)?;
    Ok(summary)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(Usage(format!("{} is not empty; pass --force to overwrite", out.display())).into());
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn detector_for(split: &DatasetSplit, cfg: &ProjectConfig) -> Result<Detector> {
    let frame = split
        .fully_labeled
        .iter()
        .chain(&split.test)
        .find_map(|v| v.frames.first())
        .ok_or_else(|| weakvid::Error::Data("dataset has no frames".into()))?;
    Ok(Detector::new(frame.width, frame.height, cfg.detector)?)
}

fn run_options(out: &Path, verbose: bool) -> RunOptions {
    RunOptions { run_dir: Some(out.to_path_buf()), checkpoint_every_epoch: true, dump_pseudo_labels: true, verbose }
}

fn grid_output(out: &Path, verbose: bool) -> GridOutput {
    GridOutput { root: Some(out.to_path_buf()), checkpoint_every_epoch: false, verbose }
}

fn report_stage(det: &Detector, split: &DatasetSplit, cfg: &ProjectConfig, params: &weakvid::ParameterVector, out: &Path) -> Result<()> {
    let eval = &cfg.experiment.training.eval;
    let val = weakvid::evaluation::evaluate_map(det, params, &split.validation, eval)?;
    let test = weakvid::evaluation::evaluate_map(det, params, &split.test, eval)?;
    save_params(&out.join("checkpoints").join("reported.params"), params)?;
    println!("val mAP {val:.4} test mAP {test:.4}");
    Ok(())
}

/// Directories holding a `curves.csv`: the run itself or its `seed_*` children.
fn curve_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let own = dir.join("curves.csv");
    if own.exists() {
        return Ok(vec![own]);
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                if path.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")) && path.join("curves.csv").exists() {
                    out.push(path.join("curves.csv"));
                } else {
                    stack.push(path);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Teacher (or burn-in epoch-average) validation mAP per epoch, taken from
/// the last stage present in the file.
fn teacher_curve(rows: &[CurveRow]) -> Vec<f64> {
    let stage = rows.last().map(|r| r.stage.clone()).unwrap_or_default();
    rows.iter().filter(|r| r.stage == stage).filter_map(|r| r.val_map_epoch).collect()
}

fn plot_runs(runs: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for dir in runs {
        let files = curve_files(dir)?;
        if files.is_empty() {
            return Err(Usage(format!("no curves.csv below {}", dir.display())).into());
        }
        for f in files {
            let rows: Vec<CurveRow> = read_csv(&f)?;
            if rows.is_empty() {
                return Err(Usage(format!("{} has no rows", f.display())).into());
            }
            // seed_<s> sits inside the directory named after the run
            let parent = f.parent().unwrap_or(dir);
            let label = if parent.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")) {
                parent.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            } else {
                parent.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            };
            match groups.iter_mut().find(|g| g.0 == label) {
                Some(g) => g.1.push(teacher_curve(&rows)),
                None => groups.push((label, vec![teacher_curve(&rows)])),
            }
        }
    }
    let mut bands = Vec::new();
    for (label, series) in &groups {
        if series.len() < 2 {
            eprintln!("warning: {label} has {} run(s); plotting the curve without a confidence band", series.len());
        }
        let len = series.iter().map(Vec::len).max().unwrap_or(0);
        let x: Vec<f64> = (0..len).map(|e| e as f64).collect();
        bands.push(Band::from_series(label, &x, series));
    }
    let curves = out.join("learning_curves.svg");
    draw_bands(&curves, "Validation mAP (mean, 95% CI)", "epoch", "mAP", &bands).map_err(|e| Usage(e.to_string()))?;
    println!("wrote {}", curves.display());

    for dir in runs {
        let csv = dir.join("ablation.csv");
        if !csv.exists() {
            continue;
        }
        let rows: Vec<AblationRow> = read_csv(&csv)?;
        let mut pts: Vec<&AblationRow> = rows.iter().filter(|r| r.group == AblationGroup::Fraction).collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| fraction_of(a).total_cmp(&fraction_of(b)));
        let band = Band {
            label: "test mAP".into(),
            x: pts.iter().map(|r| fraction_of(r)).collect(),
            mean: pts.iter().map(|r| r.test_mean).collect(),
            half: pts.iter().map(|r| weakvid::experiment::ci95_half_width(r.test_std, r.runs)).collect(),
            repeats: pts.iter().map(|r| r.runs).min().unwrap_or(0),
        };
        let path = out.join("fraction.svg");
        draw_bands(&path, "Test mAP vs. video-label fraction", "fraction of labeled weak videos", "mAP", &[band])?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fraction_of(row: &AblationRow) -> f64 {
    row.label.trim_start_matches("fraction=").parse().unwrap_or(f64::NAN)
}
