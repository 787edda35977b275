//! Command-line front end: train, attack, eval, reproduce and sanity.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::attacks::{audit, blackbox_transfer, craft_adversarial, AttackConfig, CHUNK};
use crate::data::write_tensor;
use crate::detectors::Detector;
use crate::error::{Error, Result};
use crate::evaluation::{build_split, evaluate, gather, latent_stability, summarize, EvalReport, OneClassSplit};
use crate::suite::desk::{checklist, Probe, SanityCheck};
use crate::suite::{self, DeskConfig};
use crate::training::{train_one_class, TrainMode};
use checkpoint::{read_checkpoint, write_checkpoint};
use config::{parse_config, ExperimentConfig, LoadedData};
use report::{write_file, write_json, write_report, Manifest};

#[derive(Debug, Parser)]
#[command(name = "novelty", version, about = "Adversarially robust one-class novelty detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for every stochastic stage; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trained detector checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector; writes a checkpoint and the loss curve.
    Train(Common),
    /// Craft adversarial test sets; writes tensor containers and a budget audit.
    Attack(Common),
    /// Clean and attacked evaluation; writes report JSON and CSV.
    Eval(Common),
    /// Run the desk-scale acceptance suite.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Comma-separated criterion ids (default: all).
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
    },
    /// Run the sanity checklist against a checkpoint.
    Sanity(Common),
}

type Model = Detector<f32>;

fn load_experiment(c: &Common) -> Result<ExperimentConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let mut cfg = parse_config(path)?;
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn load_model(c: &Common, cfg: &ExperimentConfig) -> Result<Model> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("--checkpoint is required".into()))?;
    if !path.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let m: Model = read_checkpoint(path)?;
    let (a, b) = (&m.spec, &cfg.detector);
    if (a.kind, a.channels, a.image_size, a.base_channels) != (b.kind, b.channels, b.image_size, b.base_channels)
        || a.principals.is_some() != b.principals.is_some()
    {
        return Err(Error::config(format!(
            "checkpoint detector {a:?} does not match the configured detector {b:?}"
        )));
    }
    Ok(m)
}

fn seeds(cfg: &ExperimentConfig) -> Vec<(String, u64)> {
    vec![
        ("init".into(), cfg.seed),
        ("train".into(), cfg.train.seed),
        ("split".into(), cfg.split.seed),
    ]
}

fn finish(cfg: &ExperimentConfig, command: &str, files: &[PathBuf]) -> Result<()> {
    let mut m = Manifest::new(command, cfg.digest(), seeds(cfg));
    m.record(&cfg.output, files)?;
    let mp = m.write(&cfg.output)?;
    write_json(&cfg.output.join("config.json"), cfg)?;
    println!("wrote {} files and {}", files.len(), mp.display());
    Ok(())
}

fn split_of(cfg: &ExperimentConfig, data: &LoadedData<f32>) -> Result<OneClassSplit> {
    build_split(&data.test.labels, &cfg.split.known, cfg.split.seed)
}

pub fn train_model(cfg: &ExperimentConfig, data: &LoadedData<f32>, seed_offset: u64, natural: bool) -> Result<(Model, crate::training::TrainReport)> {
    let mut tc = cfg.train.clone();
    if natural {
        tc.mode = TrainMode::Natural;
    }
    tc.seed = tc.seed.wrapping_add(seed_offset);
    let mut model = Detector::build(&cfg.detector, cfg.seed.wrapping_add(seed_offset))?;
    let report = train_one_class(&mut model, &data.train, &tc, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.6}{}",
            r.epoch,
            r.lr,
            r.mean_loss,
            if r.adversarial { "  (adversarial)" } else { "" }
        )
    })?;
    Ok((model, report))
}

fn cmd_train(c: &Common) -> Result<bool> {
    let cfg = load_experiment(c)?;
    let data = cfg.load_data::<f32>()?;
    let (model, report) = train_model(&cfg, &data, 0, false)?;
    let ck = cfg.output.join("model.ckpt");
    write_file(&ck, &[])?;
    write_checkpoint(&ck, &model)?;
    let curve = cfg.output.join("loss.csv");
    write_file(&curve, report.to_csv().as_bytes())?;
    finish(&cfg, "train", &[ck, curve])?;
    Ok(true)
}

fn attacks_of(cfg: &ExperimentConfig) -> Vec<AttackConfig> {
    if cfg.attacks.is_empty() {
        vec![AttackConfig::default()]
    } else {
        cfg.attacks.clone()
    }
}

fn cmd_attack(c: &Common) -> Result<bool> {
    let cfg = load_experiment(c)?;
    let model = load_model(c, &cfg)?;
    let data = cfg.load_data::<f32>()?;
    let split = split_of(&cfg, &data)?;
    let (idx, y) = split.items();
    let x = gather(&data.test.images, &idx)?;
    let mut files = Vec::new();
    let mut log = String::from("attack,digest,items,max_linf,max_ratio,changed_items\n");
    for a in attacks_of(&cfg) {
        let adv = craft_adversarial(&model, &x, &y, &a)?;
        let au = audit(&x, &adv);
        log.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            a.label(),
            a.digest(),
            x.dim0(),
            au.max_linf,
            au.max_ratio,
            au.changed_items
        ));
        let p = cfg.output.join(format!("adv-{}.tensor", a.digest()));
        write_file(&p, &[])?;
        write_tensor(&p, &adv)?;
        files.push(p);
    }
    let lp = cfg.output.join("budget-audit.csv");
    write_file(&lp, log.as_bytes())?;
    print!("{log}");
    files.push(lp);
    finish(&cfg, "attack", &files)?;
    Ok(true)
}

fn cmd_eval(c: &Common) -> Result<bool> {
    let cfg = load_experiment(c)?;
    let model = load_model(c, &cfg)?;
    let data = cfg.load_data::<f32>()?;
    let split = split_of(&cfg, &data)?;
    let mut rep = EvalReport::new(split.known_classes.clone());
    let clean = evaluate(&model, &data.test, &split, None)?;
    println!("clean: AUROC {:.4}  FPR@95%TPR {:.4}", clean.result.auroc, clean.result.fpr_at_95_tpr);
    rep.insert(clean.result);
    let mut files = Vec::new();
    for a in &cfg.attacks {
        let mut ev = evaluate(&model, &data.test, &split, Some(a))?;
        ev.result.latent_stability = Some(latent_stability(&model, &data.test, &split, a)?);
        println!(
            "{}: AUROC {:.4}  FPR@95%TPR {:.4}",
            ev.result.label, ev.result.auroc, ev.result.fpr_at_95_tpr
        );
        let p = cfg.output.join(format!("eval-items-{}.csv", a.digest()));
        write_file(&p, crate::evaluation::items_csv(&ev.items).as_bytes())?;
        files.push(p);
        rep.insert(ev.result);
    }
    files.extend(write_report(&rep, &clean.items, &cfg.output, "eval")?);
    finish(&cfg, "eval", &files)?;
    Ok(true)
}

fn cmd_sanity(c: &Common) -> Result<bool> {
    let cfg = load_experiment(c)?;
    let model = load_model(c, &cfg)?;
    let data = cfg.load_data::<f32>()?;
    let split = split_of(&cfg, &data)?;
    eprintln!("training an independently seeded natural substitute");
    let (substitute, _) = train_model(&cfg, &data, 1, true)?;
    let (idx, y) = split.items();
    let x = gather(&data.test.images, &idx)?;
    let nn = split.normal.len();
    let eps = attacks_of(&cfg)[0].epsilon;
    let checks: Vec<SanityCheck> = checklist(eps, |p| {
        let scores = match p {
            Probe::WhiteBox(a) => model.novelty_scores(&craft_adversarial(&model, &x, &y, &a)?, CHUNK)?,
            Probe::Transfer(a) => blackbox_transfer(&substitute, &model, &x, &y, &a)?,
        };
        Ok(summarize(String::new(), None, &scores[..nn], &scores[nn..])?.auroc)
    })?;
    for ch in &checks {
        println!("[{}] {}: {}", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.detail);
    }
    let p = cfg.output.join("sanity.json");
    write_json(&p, &checks)?;
    finish(&cfg, "sanity", &[p])?;
    Ok(checks.iter().all(|c| c.passed))
}

fn cmd_reproduce(c: &Common, criteria: &[u8]) -> Result<bool> {
    let mut desk = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<DeskConfig>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => DeskConfig::default(),
    };
    if let Some(s) = c.seed {
        desk.seed = s;
    }
    desk.validate()?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("reproduce-out"));
    let criteria: Vec<u8> = if criteria.is_empty() { suite::ALL.to_vec() } else { criteria.to_vec() };
    let outcomes = suite::run(&desk, &criteria, &out, |o| println!("{}", o.line()))?;
    let ok = outcomes.iter().all(|o| o.ok());
    println!(
        "{} of {} criteria passed; artifacts in {}",
        outcomes.iter().filter(|o| o.ok()).count(),
        outcomes.len(),
        out.display()
    );
    Ok(ok)
}

/// Execute a parsed command line; `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Attack(c) => cmd_attack(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Reproduce { common, criteria } => cmd_reproduce(common, criteria),
        Command::Sanity(c) => cmd_sanity(c),
    }
}
