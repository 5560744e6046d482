//! `stmixer`: synthetic scenarios, toy training, inference, linking,
//! evaluation, gradient checks and query banks from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stmixer::bank::{build_query_bank, QueryBank};
use stmixer::checkpoint;
use stmixer::config::RunConfig;
use stmixer::geometry::Mode;
use stmixer::infer::{detect, detect_set};
use stmixer::io::{evaluate_records, ground_truth_records, parse_records, records_to_json, ClipSet, RunManifest};
use stmixer::scenario::gen_scenario;
use stmixer::train::{train, Model};
use stmixer::tube::{link_keyframe_boxes, link_tubelets, LINK_IOU};

#[derive(Parser)]
#[command(name = "stmixer", version, about = "Sparse spatio-temporal action detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value run config; without it the desk config for --mode is used
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// extra config entries, applied after the file (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: clips, ground truth and config snapshot
    Gen(Common),
    /// Overfit a model on the configured scenario and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// query bank directory (long-term classifier only)
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Run a checkpoint over a clip set and write detections
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// clip set written by `gen`
        #[arg(long)]
        clips: PathBuf,
        /// background threshold; defaults to the checkpoint's
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Link detections into video-level tubes
    Link {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = LINK_IOU)]
        tau: f64,
        /// link single-frame boxes across adjacent frames instead of tubelets
        #[arg(long)]
        per_frame: bool,
    },
    /// Frame (and video) mAP of detections against ground truth
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        link_iou: Option<f64>,
    },
    /// Finite-difference check of the training loss gradient
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// plain central differences, without holding piecewise ops fixed
        #[arg(long)]
        plain: bool,
    },
    /// Build a query bank from a keyframe checkpoint
    Bank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        /// rows kept per clip; defaults to the checkpoint's bank_k
        #[arg(long)]
        k: Option<usize>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: stmixer::Error| e.to_string())
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mode = self.mode.unwrap_or(Mode::Keyframe);
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let cfg = RunConfig::parse(&text, mode).with_context(|| format!("in {}", path.display()))?;
                if let Some(m) = self.mode {
                    if m != cfg.mode() {
                        bail!("--mode {} disagrees with mode={} in {}", m.as_str(), cfg.mode().as_str(), path.display());
                    }
                }
                cfg
            }
            None => RunConfig::desk(mode),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?} is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out.as_deref().context("--out is required")?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn write(dir: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> Result<()> {
    fs::write(dir.join(name), text).with_context(|| format!("writing {}", dir.join(name).display()))?;
    manifest.outputs.push(name.into());
    Ok(())
}

fn load_bank(path: Option<&Path>) -> Result<Option<QueryBank>> {
    path.map(|p| QueryBank::load(p).with_context(|| format!("loading bank {}", p.display()))).transpose()
}

fn read_records(path: &Path) -> Result<Vec<stmixer::tube::Tubelet>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_records(&text).with_context(|| format!("in {}", path.display()))
}

fn gen(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let dir = common.out_dir()?;
    let sc = gen_scenario(&cfg.scenario, cfg.seed)?;
    let mut manifest = RunManifest::new("gen", &cfg);
    ClipSet::from_scenario(&sc).save(dir.join("clips"))?;
    manifest.outputs.push("clips".into());
    let gt = ground_truth_records(&sc);
    write(dir, "gt.json", &records_to_json(&gt)?, &mut manifest)?;
    write(dir, "config.txt", &cfg.to_text(), &mut manifest)?;
    manifest.metric("clips", sc.clips.len() as f64);
    manifest.metric("actors", sc.actors.len() as f64);
    manifest.metric("ground_truths", gt.len() as f64);
    manifest.write(dir)?;
    println!("{}: {} clips, {} actors, {} ground-truth records -> {}", sc.video, sc.clips.len(), sc.actors.len(), gt.len(), dir.display());
    Ok(())
}

fn train_cmd(common: &Common, bank: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let dir = common.out_dir()?;
    let bank = load_bank(bank)?;
    let sc = gen_scenario(&cfg.scenario, cfg.seed)?;
    let mut model = Model::new(&cfg)?;
    let every = cfg.log_every.max(1);
    let trace = train(&mut model, &sc.clips, bank.as_ref(), |_, rec| {
        if rec.iteration % every == 0 || rec.iteration + 1 == cfg.iterations {
            let l = &rec.loss;
            println!(
                "iter {:>5}  loss {:>10.4}  cls {:>9.4}  l1 {:>8.4}  giou {:>8.4}  action {:>9.4}  |g| {:>9.3}",
                rec.iteration, l.total, l.cls, l.l1, l.giou, l.action, rec.grad_norm
            );
        }
        Ok(true)
    })?;

    let mut manifest = RunManifest::new("train", &cfg);
    let mut csv = String::from("iteration,total,cls,l1,giou,action,grad_norm\n");
    for r in &trace {
        let l = &r.loss;
        csv += &format!("{},{},{},{},{},{},{}\n", r.iteration, l.total, l.cls, l.l1, l.giou, l.action, r.grad_norm);
    }
    write(dir, "trace.csv", &csv, &mut manifest)?;
    checkpoint::save(&model, dir.join("checkpoint"))?;
    manifest.outputs.push("checkpoint".into());

    let dets = detect(&model, &sc, bank.as_ref(), cfg.bg_threshold)?;
    let report = evaluate_records(cfg.mode(), &dets, &ground_truth_records(&sc), cfg.eval_iou, cfg.link_iou)?;
    let final_loss = trace.last().map_or(f64::NAN, |r| r.loss.total);
    manifest.metric("iterations", trace.len() as f64);
    manifest.metric("final_loss", final_loss);
    manifest.metric("train_frame_map", report.frame_map);
    print!("trained {} iterations, final loss {final_loss:.4}, train frame mAP {:.4}", trace.len(), report.frame_map);
    if let Some(v) = report.video_map {
        manifest.metric("train_video_map", v);
        print!(", train video mAP {v:.4}");
    }
    println!();
    manifest.write(dir)?;
    Ok(())
}

fn infer_cmd(common: &Common, ckpt: &Path, clips: &Path, threshold: Option<f64>, bank: Option<&Path>) -> Result<()> {
    let dir = common.out_dir()?;
    let model = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let set = ClipSet::load(clips).with_context(|| format!("loading clips {}", clips.display()))?;
    let bank = load_bank(bank)?;
    let thr = threshold.unwrap_or(model.config.bg_threshold);
    let dets = detect_set(&model, &set, bank.as_ref(), thr)?;
    let mut manifest = RunManifest::new("infer", &model.config);
    write(dir, "detections.json", &records_to_json(&dets)?, &mut manifest)?;
    manifest.metric("threshold", thr);
    manifest.metric("detections", dets.len() as f64);
    manifest.write(dir)?;
    println!("{} detections over {} clips (threshold {thr}) -> {}", dets.len(), set.clips.len(), dir.join("detections.json").display());
    Ok(())
}

fn link_cmd(common: &Common, detections: &Path, tau: f64, per_frame: bool) -> Result<()> {
    let cfg = common.run_config()?;
    let dir = common.out_dir()?;
    let dets = read_records(detections)?;
    let tubes = if per_frame { link_keyframe_boxes(&dets, tau)? } else { link_tubelets(&dets, tau)? };
    let mut manifest = RunManifest::new("link", &cfg);
    write(dir, "tubes.json", &serde_json::to_string_pretty(&tubes)?, &mut manifest)?;
    manifest.metric("tau", tau);
    manifest.metric("tubes", tubes.len() as f64);
    manifest.write(dir)?;
    println!("{} records -> {} tubes", dets.len(), tubes.len());
    Ok(())
}

fn eval_cmd(common: &Common, detections: &Path, gt: &Path, iou: Option<f64>, link_iou: Option<f64>) -> Result<()> {
    let cfg = common.run_config()?;
    let dir = common.out_dir()?;
    let dets = read_records(detections)?;
    let gts = read_records(gt)?;
    let report = evaluate_records(cfg.mode(), &dets, &gts, iou.unwrap_or(cfg.eval_iou), link_iou.unwrap_or(cfg.link_iou))?;
    let mut manifest = RunManifest::new("eval", &cfg);
    write(dir, "report.json", &serde_json::to_string_pretty(&report)?, &mut manifest)?;
    write(dir, "report.txt", &report.table(), &mut manifest)?;
    manifest.metric("frame_map", report.frame_map);
    if let Some(v) = report.video_map {
        manifest.metric("video_map", v);
    }
    manifest.write(dir)?;
    print!("{}", report.table());
    Ok(())
}

/// Small default for the gradient check: 5 queries, D=16, 2 modules, an
/// 8x8 grid and a single clip.
fn gradcheck_config(common: &Common) -> Result<RunConfig> {
    if common.config.is_some() {
        return common.run_config();
    }
    let mut c = common.clone();
    let small = ["queries=5", "dim=16", "points=4", "groups=2", "heads=2", "modules=2", "frames=2", "classes=3", "width=32", "height=32", "clips=1"];
    c.overrides = small.iter().map(|s| s.to_string()).chain(common.overrides.iter().cloned()).collect();
    c.run_config()
}

fn gradcheck_cmd(common: &Common, h: f64, tol: f64, plain: bool) -> Result<bool> {
    let cfg = gradcheck_config(common)?;
    let sc = gen_scenario(&cfg.scenario, cfg.seed)?;
    let model = Model::new(&cfg)?;
    let report = model.check_gradients(&sc.clips, 0, None, h, tol, !plain)?;
    println!(
        "{} coordinates, {} failures, max rel err {:.2e}, {} steps across a kink ({})",
        report.checked,
        report.failures.len(),
        report.max_rel_err,
        report.left_branch,
        if plain { "plain" } else { "branch-following" }
    );
    for f in report.failures.iter().take(20) {
        println!("  {}[{}] analytic {:.6e} numeric {:.6e} rel {:.2e}", f.param, f.index, f.analytic, f.numeric, f.rel_err);
    }
    if common.out.is_some() {
        let dir = common.out_dir()?;
        let mut manifest = RunManifest::new("gradcheck", &cfg);
        manifest.metric("checked", report.checked as f64);
        manifest.metric("failures", report.failures.len() as f64);
        manifest.metric("max_rel_err", report.max_rel_err);
        manifest.metric("left_branch", report.left_branch as f64);
        manifest.write(dir)?;
    }
    Ok(report.passed())
}

fn bank_cmd(common: &Common, ckpt: &Path, clips: &Path, k: Option<usize>) -> Result<()> {
    let dir = common.out_dir()?;
    let model = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let set = ClipSet::load(clips).with_context(|| format!("loading clips {}", clips.display()))?;
    let spaces: Vec<_> = set.clips.iter().map(|c| c.space.clone()).collect();
    let k = k.unwrap_or(model.config.model.bank_k);
    let bank = build_query_bank(&model.decoder, &model.store, &spaces, k)?;
    bank.save(dir.join("bank"))?;
    let mut manifest = RunManifest::new("bank", &model.config);
    manifest.outputs.push("bank".into());
    manifest.metric("k", k as f64);
    manifest.metric("clips", bank.len() as f64);
    manifest.write(dir)?;
    println!("bank of {} clips x {k} rows -> {}", bank.len(), dir.join("bank").display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen(c) => gen(c)?,
        Command::Train { common, bank } => train_cmd(common, bank.as_deref())?,
        Command::Infer { common, checkpoint, clips, threshold, bank } => infer_cmd(common, checkpoint, clips, *threshold, bank.as_deref())?,
        Command::Link { common, detections, tau, per_frame } => link_cmd(common, detections, *tau, *per_frame)?,
        Command::Eval { common, detections, gt, iou, link_iou } => eval_cmd(common, detections, gt, *iou, *link_iou)?,
        Command::Gradcheck { common, h, tol, plain } => return gradcheck_cmd(common, *h, *tol, *plain),
        Command::Bank { common, checkpoint, clips, k } => bank_cmd(common, checkpoint, clips, *k)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
