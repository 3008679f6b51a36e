use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flowfid::autodiff::Tape;
use flowfid::conditioning::AdvFormulation;
use flowfid::data::{load_png, make_synthetic_dataset, save_png_with_text, write_dataset, Dataset, DatasetManifest};
use flowfid::flow::Prior;
use flowfid::nn::Ctx;
use flowfid::train::{
    eval_rng, evaluate_bicubic, evaluate_flow, is_adversarial_model, k_sweep, load_dataset, mean_row, summarize_sweep,
    temperature_sweep, write_provenance, EvalRow, RunConfig, SweepArm, Trainer, DEFAULT_TEMPERATURES,
};
use flowfid::{verify, Checkpoint64, Trainer64};

#[derive(Parser)]
#[command(name = "flowfid", version, about = "Conditional normalizing flows as a fidelity objective for super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every property suite and print a pass/fail table.
    Verify,
    /// Print the default configuration as TOML.
    PrintDefaults,
    /// Write a synthetic HR dataset with its manifest.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// NLL pretraining followed by adversarial fine-tuning.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/flowfid")]
        out: PathBuf,
        /// Stop after the NLL phase.
        #[arg(long)]
        phase1_only: bool,
        /// Continue from a checkpoint (its stored configuration is used).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Draw SR samples for LR images.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// LR PNG files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Defaults to 0.9 for NLL-only models and 1.0 after fine-tuning.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n_samples: usize,
        /// Expected scale; rejected if the checkpoint disagrees.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Per-image and mean PSNR, LR-PSNR and NLL.
    Eval {
        /// Omit to score the bicubic upsampling baseline.
        #[arg(long, required_unless_present = "bicubic")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bicubic: bool,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean held-out metrics across sampling temperatures.
    SweepTemperature {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated list.
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train flows with several step counts plus the L1 regressor and compare.
    KSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated flow step counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        over: SweepOverrides,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest; defaults to the held-out split of the checkpoint's own data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SweepOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    prior: Option<Prior>,
    #[arg(long)]
    adv: Option<AdvFormulation>,
    #[arg(long)]
    lambda_adv: Option<f64>,
}

#[derive(Args, Default)]
struct Overrides {
    /// Flow steps per level.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    rest: SweepOverrides,
}

impl SweepOverrides {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.levels {
            c.flow.levels = v;
        }
        if let Some(v) = self.scale {
            c.data.scale = v;
        }
        if let Some(v) = self.prior {
            c.flow.prior = v;
        }
        if let Some(v) = self.adv {
            c.train.adv = v;
        }
        if let Some(v) = self.lambda_adv {
            c.train.lambda_adv = Some(v);
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    })
}

fn checkpoint(path: &Path) -> Result<Checkpoint64> {
    Checkpoint64::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Model and store from a checkpoint, without loading its training data.
fn model_from(ck: &Checkpoint64) -> Result<Trainer64> {
    let cfg = RunConfig::from_toml(&ck.config)?;
    let empty = Dataset {
        pairs: Vec::new(),
        scale: cfg.data.scale,
        seed: cfg.data.seed,
    };
    Ok(Trainer::from_checkpoint_with_data(ck, empty.clone(), empty)?)
}

fn eval_set(data: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    match &data.data {
        Some(path) => {
            let m = DatasetManifest::read(path)?;
            if m.scale != cfg.data.scale {
                bail!("{}: dataset is {}x but the model is {}x", path.display(), m.scale, cfg.data.scale);
            }
            Ok(m.load(path.parent().unwrap_or(Path::new(".")))?)
        }
        None => Ok(load_dataset(&cfg.data)?.1),
    }
}

fn default_tau(ck: &Checkpoint64) -> f64 {
    if is_adversarial_model(ck) {
        1.0
    } else {
        0.9
    }
}

fn open_out(out: Option<&Path>) -> Result<Box<dyn std::io::Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout()),
    })
}

fn write_eval(out: Option<&Path>, provenance: &str, rows: &[EvalRow]) -> Result<()> {
    let mut w = open_out(out)?;
    write_provenance(&mut w, provenance)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["image_id", "psnr_db", "lr_psnr_db", "nll_npd"])?;
    for r in rows.iter().chain(std::iter::once(&mean_row(rows))) {
        csv.write_record([
            r.image_id.clone(),
            r.psnr_db.to_string(),
            r.lr_psnr_db.to_string(),
            r.nll_npd.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn cmd_verify() -> Result<bool> {
    let reports = verify::run_all();
    println!("{:<28} {:>12} {:>10} {:>7} {:>8}  result", "suite", "measured", "tolerance", "cases", "seconds");
    for r in &reports {
        println!(
            "{:<28} {:>12.3e} {:>10.1e} {:>7} {:>8.2}  {}{}",
            r.name,
            r.measured,
            r.tolerance,
            r.cases,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" },
            if r.at.is_empty() { String::new() } else { format!("  (worst: {})", r.at) }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} suites, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn cmd_train(config: Option<&Path>, out: &Path, phase1_only: bool, resume: Option<&Path>, over: &Overrides) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint(path)?;
            eprintln!("resuming at {:?} iteration {}", ck.phase, ck.iteration);
            Trainer64::from_checkpoint(&ck)?
        }
        None => {
            let mut cfg = load_config(config)?;
            if let Some(k) = over.k {
                cfg.flow.steps = k;
            }
            over.rest.apply(&mut cfg);
            Trainer64::new(&cfg)?
        }
    };
    eprintln!(
        "training on {} pairs, {} held out; output in {}",
        trainer.train_set.len(),
        trainer.val_set.len(),
        out.display()
    );
    trainer.run(out, phase1_only, None)?;
    eprintln!("done: {}", out.join("final.ckpt").display());
    Ok(())
}

fn cmd_sample(ck_path: &Path, inputs: &[PathBuf], tau: Option<f64>, seed: u64, n: usize, scale: Option<usize>, out: &Path) -> Result<()> {
    let ck = checkpoint(ck_path)?;
    let t = model_from(&ck)?;
    if let Some(s) = scale {
        if s != t.model.scale {
            bail!("--scale {s} does not match the checkpoint's {}x model", t.model.scale);
        }
    }
    let tau = tau.unwrap_or_else(|| default_tau(&ck));
    if !(tau >= 0.0) {
        bail!("--tau must be non-negative, got {tau}");
    }
    std::fs::create_dir_all(out)?;
    let align = 1usize << t.model.flow.config.levels;
    let provenance = t.config.to_toml();
    for (index, input) in inputs.iter().enumerate() {
        let lr = load_png::<f64>(input)?;
        let (_, _, h, w) = lr.dims4()?;
        let (hh, ww) = (h * t.model.scale, w * t.model.scale);
        if hh % align != 0 || ww % align != 0 {
            bail!(
                "{}: {h}x{w} LR gives {hh}x{ww} HR, which a {}-level flow cannot split (needs multiples of {align})",
                input.display(),
                t.model.flow.config.levels
            );
        }
        let stem = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let mut rng = eval_rng(seed, index);
        for i in 0..n {
            let tape = Tape::new();
            let cx = Ctx::frozen(&tape, &t.store);
            let sr = t.model.sample(&cx, &tape.constant(lr.clone()), tau, &mut rng)?;
            let path = out.join(format!("{stem}_tau{tau:.2}_seed{seed}_{i:03}.png"));
            let meta = format!("tau = {tau}\nseed = {seed}\ncheckpoint = {}\n", ck_path.display());
            save_png_with_text(&path, &sr.value(), &[("flowfid-sample", &meta), ("flowfid-config", &provenance)])?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_eval(ck: Option<&Path>, data: &DataArgs, tau: Option<f64>, seed: u64, out: Option<&Path>) -> Result<()> {
    match ck {
        None => {
            let Some(path) = &data.data else {
                // bicubic on the default synthetic held-out set
                let cfg = RunConfig::default();
                let rows = evaluate_bicubic(&load_dataset(&cfg.data)?.1.pairs)?;
                return write_eval(out, &format!("baseline = \"bicubic\"\n{}", cfg.to_toml()), &rows);
            };
            let m = DatasetManifest::read(path)?;
            let ds = m.load(path.parent().unwrap_or(Path::new(".")))?;
            let rows = evaluate_bicubic(&ds.pairs)?;
            write_eval(out, &format!("baseline = \"bicubic\"\ndata = {:?}\n", path.display().to_string()), &rows)
        }
        Some(ck_path) => {
            let ck = checkpoint(ck_path)?;
            let t = model_from(&ck)?;
            let ds = eval_set(data, &t.config)?;
            let tau = tau.unwrap_or_else(|| default_tau(&ck));
            let rows = evaluate_flow(&t.model, &t.store, &ds.pairs, tau, seed)?;
            let prov = format!("tau = {tau}\neval_seed = {seed}\n{}", t.config.to_toml());
            write_eval(out, &prov, &rows)
        }
    }
}

fn cmd_sweep_temperature(ck_path: &Path, data: &DataArgs, taus: Option<&[f64]>, seed: u64, out: Option<&Path>) -> Result<()> {
    let ck = checkpoint(ck_path)?;
    let t = model_from(&ck)?;
    let ds = eval_set(data, &t.config)?;
    let taus = taus.unwrap_or(&DEFAULT_TEMPERATURES);
    let rows = temperature_sweep(&t.model, &t.store, &ds.pairs, taus, seed)?;
    let mut w = open_out(out)?;
    write_provenance(&mut w, &format!("eval_seed = {seed}\n{}", t.config.to_toml()))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["tau", "lr_psnr_db", "psnr_db", "nll_npd"])?;
    for (tau, r) in rows {
        csv.write_record([tau.to_string(), r.lr_psnr_db.to_string(), r.psnr_db.to_string(), r.nll_npd.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

fn cmd_k_sweep(config: Option<&Path>, ks: &[usize], seeds: &[u64], tau: f64, out: Option<&Path>, over: &SweepOverrides) -> Result<()> {
    let mut cfg = load_config(config)?;
    over.apply(&mut cfg);
    let mut arms: Vec<SweepArm> = ks.iter().map(|&k| SweepArm::Flow(k)).collect();
    arms.push(SweepArm::L1);
    let rows = k_sweep::<f64>(&cfg, &arms, seeds, tau)?;
    let mut w = open_out(out)?;
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    write_provenance(&mut w, &format!("tau = {tau}\nseeds = [{seed_list}]\n{}", cfg.to_toml()))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["k", "seeds", "lr_psnr_db", "psnr_db", "nll_npd"])?;
    for r in summarize_sweep(&rows) {
        csv.write_record([
            r.arm.label(),
            seeds.len().to_string(),
            r.lr_psnr_db.to_string(),
            r.psnr_db.to_string(),
            r.nll_npd.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FLOWFID_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("FLOWFID_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("FLOWFID_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Verify => return cmd_verify(),
        Command::PrintDefaults => {
            println!("# train.lambda_adv and train.disc_lr default by scale (0.1 and 1e-4 from 8x up, else 0.01 and 1e-3)");
            print!("{}", RunConfig::default().resolved().to_toml())
        }
        Command::MakeDataset {
            out,
            count,
            size,
            scale,
            seed,
        } => {
            let ds = make_synthetic_dataset(count, size, scale, seed)?;
            let manifest = write_dataset(&ds, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            config,
            out,
            phase1_only,
            resume,
            over,
        } => cmd_train(config.as_deref(), &out, phase1_only, resume.as_deref(), &over)?,
        Command::Sample {
            checkpoint,
            inputs,
            tau,
            seed,
            n_samples,
            scale,
            out,
        } => cmd_sample(&checkpoint, &inputs, tau, seed, n_samples, scale, &out)?,
        Command::Eval {
            checkpoint,
            bicubic,
            data,
            tau,
            seed,
            out,
        } => cmd_eval(if bicubic { None } else { checkpoint.as_deref() }, &data, tau, seed, out.as_deref())?,
        Command::SweepTemperature {
            checkpoint,
            data,
            tau,
            seed,
            out,
        } => cmd_sweep_temperature(&checkpoint, &data, tau.as_deref(), seed, out.as_deref())?,
        Command::KSweep {
            config,
            k,
            seeds,
            tau,
            out,
            over,
        } => cmd_k_sweep(config.as_deref(), &k, &seeds, tau, out.as_deref(), &over)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
