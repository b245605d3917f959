//! The five subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use dynacal_core::datagen::{self, EpisodeSet};
use dynacal_core::identify::{self, IdentifyReport, Method};
use dynacal_core::surrogate::{self, MlpCheckpoint};
use dynacal_core::tpo::{self, PolicyNet};
use dynacal_core::PhysParams;

use crate::config::RunConfig;
use crate::io::{self, OutDir, RunManifest};
use crate::plot;

pub const DATASET: &str = "dataset.jsonl";
pub const EPISODES: &str = "episodes.json";
pub const PARAM_SETS: &str = "param_sets.json";
pub const TRUTH: &str = "truth.json";
pub const NORM_STATS: &str = "norm_stats.json";
pub const DATAGEN_MANIFEST: &str = "datagen_manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const TRAIN_MANIFEST: &str = "train_manifest.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_JSON: &str = "identify.json";
pub const RECOVERY_CSV: &str = "recovery.csv";
pub const IDENTIFIED: &str = "identified.json";
pub const IDENTIFY_MANIFEST: &str = "identify_manifest.json";
pub const TPO_REPORT: &str = "tpo_report.jsonl";
pub const POLICY: &str = "policy.json";
pub const TPO_MANIFEST: &str = "tpo_manifest.json";

pub const CSV_HEADER: &str = "method,traj_err,rot_err,trans_err,time_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Grad,
    Sa,
    Both,
}

pub fn datagen(cfg: &RunConfig) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let out = OutDir::create(&cfg.output_dir)?;
    let dg = &cfg.datagen;
    let episodes = datagen::make_synthetic_real(&dg.theta_star, dg.n_episodes, dg.horizon, &cfg.plant, cfg.episode_seed())?;
    let sampled = datagen::sample_params(dg.n_param_sets, &cfg.bounds, cfg.sample_seed())?;
    let records = datagen::generate_transitions(&episodes, &sampled, &cfg.plant)?;
    let norm = datagen::compute_norm_stats(&records)?;

    let mut manifest = RunManifest::new("datagen", cfg.hash());
    let n = io::write_jsonl(&out.file(DATASET)?, records.iter().map(io::DatasetLine::from))?;
    io::write_json(&out.file(EPISODES)?, &episodes)?;
    io::write_json(&out.file(PARAM_SETS)?, &sampled)?;
    io::write_json(&out.file(TRUTH)?, &dg.theta_star)?;
    io::write_json(&out.file(NORM_STATS)?, &norm)?;
    for (k, f) in [("dataset", DATASET), ("episodes", EPISODES), ("param_sets", PARAM_SETS), ("truth", TRUTH), ("norm_stats", NORM_STATS)] {
        manifest.add(k, f);
    }
    manifest.finish(t0.elapsed().as_secs_f64());
    manifest.write(&out.file(DATAGEN_MANIFEST)?)?;
    println!("wrote {n} records to {}", out.file(DATASET)?.display());
    Ok(())
}

pub fn train_surrogate(cfg: &RunConfig, dataset: Option<&Path>) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let dataset = dataset.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(DATASET));
    let records = io::read_dataset(&dataset)?;
    let out = OutDir::create(&cfg.output_dir)?;

    let init = MlpCheckpoint::for_records(&records, cfg.init_seed())?;
    let (checkpoint, report) = surrogate::train(&init, &records, &cfg.train_config())?;

    let mut manifest = RunManifest::new("train-surrogate", cfg.hash());
    io::write_json(&out.file(CHECKPOINT)?, &checkpoint)?;
    let mut curve = String::from("step,value\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(curve, "{},{}", i + 1, l);
    }
    std::fs::write(out.file(LOSS_CURVE)?, curve)?;
    manifest.add("checkpoint", CHECKPOINT);
    manifest.add("loss_curve", LOSS_CURVE);
    manifest.finish(t0.elapsed().as_secs_f64());
    manifest.write(&out.file(TRAIN_MANIFEST)?)?;

    let last = report.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:e} after {} epochs ({:?})", report.loss_curve.len(), report.stop);
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct IdentifyInputs {
    pub checkpoint: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub param_sets: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub no_holdout: bool,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(name)
}

/// Elapsed seconds recorded by an upstream command, or 0 when its manifest is absent.
fn upstream_seconds(path: &Path) -> f64 {
    match io::read_json::<RunManifest>(path) {
        Ok(m) => m.elapsed_seconds,
        Err(_) => {
            eprintln!("warning: {} not found; its time is not counted", path.display());
            0.0
        }
    }
}

pub fn identify(cfg: &RunConfig, method: MethodChoice, inputs: &IdentifyInputs) -> anyhow::Result<Vec<IdentifyReport>> {
    let t0 = Instant::now();
    let episodes_path = inputs.episodes.clone().unwrap_or_else(|| cfg.output_dir.join(EPISODES));
    let all: EpisodeSet = io::read_json(&episodes_path)?;
    all.check(cfg.plant.n_joints)?;
    let (fit, eval) = if inputs.no_holdout || cfg.identify.holdout_fraction == 0.0 {
        (all.clone(), all.clone())
    } else {
        all.split_holdout(cfg.identify.holdout_fraction)
    };
    if fit.is_empty() || eval.is_empty() {
        bail!("holdout split of {} episodes leaves an empty side", all.len());
    }
    let truth_path = inputs.truth.clone().or_else(|| Some(sibling(&episodes_path, TRUTH)).filter(|p| p.exists()));
    let truth: Option<PhysParams> = truth_path.as_deref().map(io::read_json).transpose()?;

    let mut reports = Vec::new();
    if matches!(method, MethodChoice::Sa | MethodChoice::Both) {
        let t = Instant::now();
        let sa = identify::anneal_params(&fit, &cfg.bounds, &cfg.anneal_config(), &cfg.plant)?;
        let secs = t.elapsed().as_secs_f64();
        let errors = identify::evaluate_params(&sa.params, &eval, &cfg.plant)?;
        reports.push(IdentifyReport::new(Method::Annealing, sa.params, &errors, secs, truth.as_ref()));
    }
    if matches!(method, MethodChoice::Grad | MethodChoice::Both) {
        let ckpt_path = inputs.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT));
        let checkpoint: MlpCheckpoint = io::read_json(&ckpt_path)?;
        let sets_path = inputs.param_sets.clone().unwrap_or_else(|| sibling(&episodes_path, PARAM_SETS));
        let sampled: Vec<PhysParams> = io::read_json(&sets_path)?;
        let upstream = upstream_seconds(&sibling(&episodes_path, DATAGEN_MANIFEST)) + upstream_seconds(&sibling(&ckpt_path, TRAIN_MANIFEST));
        let t = Instant::now();
        let refined = identify::refine_params(&checkpoint, &fit, &cfg.bounds, &cfg.refine, &sampled)?;
        let secs = upstream + t.elapsed().as_secs_f64();
        let errors = identify::evaluate_params(&refined.params, &eval, &cfg.plant)?;
        reports.push(IdentifyReport::new(Method::Gradient, refined.params, &errors, secs, truth.as_ref()));
    }

    let out = OutDir::create(&cfg.output_dir)?;
    let mut manifest = RunManifest::new("identify", cfg.hash());
    std::fs::write(out.file(REPORT_CSV)?, report_csv(&reports))?;
    std::fs::write(out.file(REPORT_MD)?, report_markdown(&reports))?;
    io::write_json(&out.file(REPORT_JSON)?, &reports)?;
    let chosen = reports.last().expect("at least one method ran");
    io::write_json(&out.file(IDENTIFIED)?, &chosen.params)?;
    for (k, f) in [("report_csv", REPORT_CSV), ("report_md", REPORT_MD), ("report_json", REPORT_JSON), ("identified", IDENTIFIED)] {
        manifest.add(k, f);
    }
    if truth.is_some() {
        std::fs::write(out.file(RECOVERY_CSV)?, recovery_csv(&reports))?;
        manifest.add("recovery_csv", RECOVERY_CSV);
    }
    manifest.finish(t0.elapsed().as_secs_f64());
    manifest.write(&out.file(IDENTIFY_MANIFEST)?)?;
    print!("{}", report_markdown(&reports));
    Ok(reports)
}

pub fn report_csv(reports: &[IdentifyReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.method.label(),
            r.trajectory_error,
            r.rotation_error,
            r.translation_error,
            r.wall_clock_seconds
        );
    }
    s
}

pub fn recovery_csv(reports: &[IdentifyReport]) -> String {
    let mut s = String::from("method,f_rel_err,p_rel_err,d_rel_err\n");
    for r in reports {
        if let Some([f, p, d]) = r.param_recovery_error {
            let _ = writeln!(s, "{},{f},{p},{d}", r.method.label());
        }
    }
    s
}

pub fn report_markdown(reports: &[IdentifyReport]) -> String {
    let with_truth = reports.iter().any(|r| r.param_recovery_error.is_some());
    let mut s = String::from("| Method | Trajectory error | Rotation error | Translation error | Time (s) |");
    if with_truth {
        s.push_str(" f rel. err | p rel. err | d rel. err |");
    }
    s.push_str("\n|---|---|---|---|---|");
    if with_truth {
        s.push_str("---|---|---|");
    }
    s.push('\n');
    for r in reports {
        let _ = write!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.2} |",
            r.method.label(),
            r.trajectory_error,
            r.rotation_error,
            r.translation_error,
            r.wall_clock_seconds
        );
        if let Some([f, p, d]) = r.param_recovery_error {
            let _ = write!(s, " {f:.4} | {p:.4} | {d:.4} |");
        } else if with_truth {
            s.push_str(" | | |");
        }
        s.push('\n');
    }
    s
}

pub fn tpo(cfg: &RunConfig, params: Option<&Path>) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let params_path = params.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(IDENTIFIED));
    let params: PhysParams = io::read_json(&params_path)?;
    params.check_physical().with_context(|| format!("parameters in {}", params_path.display()))?;
    let tcfg = cfg.tpo_config();
    let out = OutDir::create(&cfg.output_dir)?;

    let policy = PolicyNet::init(cfg.plant.n_joints, tcfg.policy_hidden, tcfg.exploration_std, cfg.policy_seed())?;
    let (policy, reports) = tpo::run_tpo(&policy, &params, &tcfg, &cfg.plant)?;

    let mut manifest = RunManifest::new("tpo", cfg.hash());
    io::write_jsonl(&out.file(TPO_REPORT)?, &reports)?;
    io::write_json(&out.file(POLICY)?, &policy)?;
    manifest.add("report", TPO_REPORT);
    manifest.add("policy", POLICY);
    manifest.finish(t0.elapsed().as_secs_f64());
    manifest.write(&out.file(TPO_MANIFEST)?)?;
    for r in &reports {
        println!("cycle {} reward {:.6} -> {:.6} loss {:.6} -> {:.6}", r.cycle, r.mean_reward_before, r.mean_reward_after, r.loss_first, r.loss_last);
    }
    Ok(())
}

pub fn plot(cfg: &RunConfig, input: &Path, output: &str, title: Option<&str>) -> anyhow::Result<()> {
    let points = plot::read_series(input)?;
    let title = title.map(str::to_string).unwrap_or_else(|| input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let out = OutDir::create(&cfg.output_dir)?;
    let path = out.file(output)?;
    std::fs::write(&path, plot::render_svg(&points, &title))?;
    println!("wrote {}", path.display());
    Ok(())
}
