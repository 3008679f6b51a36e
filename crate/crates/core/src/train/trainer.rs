use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::conditioning::{adversarial_losses, Discriminator};
use crate::data::{lr_psnr, make_synthetic_dataset, psnr, Dataset, DatasetManifest, ImagePair};
use crate::error::{Error, Result};
use crate::model::SrFlow;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::adam::{scheduled_lr, Adam};
use super::checkpoint::{Checkpoint, OptimizerBlock, Phase, RngState};
use super::config::{DataConfig, RunConfig};

const DATA_STREAM: u64 = 1;
const LATENT_STREAM: u64 = 2;
/// Evaluation generators use stream `EVAL_STREAM + image index`.
const EVAL_STREAM: u64 = 1 << 32;
pub(crate) const DISC_PREFIX: &str = "disc/";

/// Adds `u ~ U(−w/2, w/2)` to every element, `w` being the total width.
pub fn inject_noise<R: Rng>(y: &Tensor<f64>, width: f64, rng: &mut R) -> Tensor<f64> {
    if width == 0.0 {
        return y.clone();
    }
    let d = y.data();
    Tensor::from_fn(y.shape(), |i| d[i] + (rng.random::<f64>() - 0.5) * width)
}

/// Builds (train, held-out) from the data section of a config.
pub fn load_dataset(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let ds = match &cfg.manifest {
        Some(path) => {
            let m = DatasetManifest::read(path)?;
            if m.scale != cfg.scale {
                return Err(Error::Config(vec![format!(
                    "data.scale: config says {}x, manifest {} says {}x",
                    cfg.scale,
                    path.display(),
                    m.scale
                )]));
            }
            m.load(path.parent().unwrap_or(Path::new(".")))?
        }
        None => make_synthetic_dataset(cfg.synthetic_count, cfg.synthetic_size, cfg.scale, cfg.seed)?,
    };
    ds.split_holdout(cfg.holdout)
}

/// One line of a loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub nll: f64,
    pub adv: Option<f64>,
    pub real_p: Option<f64>,
    pub fake_p: Option<f64>,
}

pub const CURVE_HEADER: [&str; 5] = ["iteration", "nll_nats_per_dim", "adv_loss", "disc_real_p", "disc_fake_p"];

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes `# `-prefixed provenance lines.
pub fn write_provenance(out: &mut impl Write, config_toml: &str) -> std::io::Result<()> {
    for line in config_toml.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Loss-curve CSV that can be reopened at an earlier iteration.
struct CurveFile {
    writer: csv::Writer<fs::File>,
}

impl CurveFile {
    fn open(path: &Path, config_toml: &str, resume_at: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if resume_at > 0 && path.exists() {
            // drop rows the checkpoint has not seen yet
            for line in fs::read_to_string(path)?.lines() {
                let keep = match line.split(',').next().map(str::parse::<usize>) {
                    Some(Ok(it)) => it < resume_at,
                    _ => true,
                };
                if keep {
                    kept.push(line.to_owned());
                }
            }
        }
        let mut file = fs::File::create(path)?;
        if kept.is_empty() {
            write_provenance(&mut file, config_toml)?;
            writeln!(file, "{}", CURVE_HEADER.join(","))?;
        } else {
            for line in &kept {
                writeln!(file, "{line}")?;
            }
        }
        Ok(Self {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    fn push(&mut self, row: &CurveRow) -> Result<()> {
        self.writer
            .write_record([
                row.iteration.to_string(),
                row.nll.to_string(),
                opt_field(row.adv),
                opt_field(row.real_p),
                opt_field(row.fake_p),
            ])
            .map_err(|e| Error::Io(e.into()))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Per-image evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub lr_psnr_db: f64,
    pub nll_npd: f64,
}

/// Crops a pair so its HR side divides `align` (the LR is rebuilt from the crop).
pub fn fit_pair(pair: &ImagePair, align: usize) -> Result<ImagePair> {
    let (_, _, h, w) = pair.hr.dims4()?;
    let (ch, cw) = (h - h % align, w - w % align);
    if ch == 0 || cw == 0 {
        return Err(Error::shape("fit_pair", format!("image `{}` smaller than {align}px", pair.id)));
    }
    if (ch, cw) == (h, w) {
        return Ok(pair.clone());
    }
    let d = pair.hr.data();
    let hr = Tensor::from_fn(&[1, 3, ch, cw], |i| {
        let x = i % cw;
        let y = (i / cw) % ch;
        let c = i / (cw * ch);
        d[(c * h + y) * w + x]
    });
    ImagePair::from_hr(pair.id.clone(), &hr, pair.scale)
}

/// Evaluation generator for image `index`: independent of thread scheduling.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM + index as u64);
    rng
}

/// NLL, PSNR and LR-PSNR of one flow sample per image at temperature `τ`.
pub fn evaluate_flow<T: Scalar>(
    model: &SrFlow,
    store: &ParamStore<T>,
    pairs: &[ImagePair],
    temperature: f64,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let align = model.scale << model.flow.config.levels;
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let pair = fit_pair(pair, align)?;
            let tape = Tape::new();
            let cx = Ctx::frozen(&tape, store);
            let y = tape.constant(pair.hr.cast::<T>());
            let x = tape.constant(pair.lr.cast::<T>());
            let nll = model.nll_loss(&cx, &y, &x)?.item()?.to_f64_lossy();
            let sr = model.sample(&cx, &x, temperature, &mut eval_rng(seed, i))?;
            let sr = sr.value().cast::<f64>();
            Ok(EvalRow {
                image_id: pair.id.clone(),
                psnr_db: psnr(&sr, &pair.hr, 1.0)?,
                lr_psnr_db: lr_psnr(&sr, &pair.lr, pair.scale)?,
                nll_npd: nll,
            })
        })
        .collect()
}

/// Column means with `image_id = "mean"`.
pub fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    EvalRow {
        image_id: "mean".into(),
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        lr_psnr_db: rows.iter().map(|r| r.lr_psnr_db).sum::<f64>() / n,
        nll_npd: rows.iter().map(|r| r.nll_npd).sum::<f64>() / n,
    }
}

/// Two-phase trainer: NLL pretraining, then NLL plus adversarial fine-tuning.
pub struct Trainer<T> {
    pub config: RunConfig,
    pub store: ParamStore<T>,
    pub model: SrFlow,
    pub disc: Discriminator,
    pub train_set: Dataset,
    pub val_set: Dataset,
    pub phase: Phase,
    /// Iterations completed in the current phase.
    pub iteration: usize,
    /// Best validation score seen in the current phase (lower is better).
    pub best: Option<f64>,
    gen_opt: Adam<T>,
    disc_opt: Adam<T>,
    data_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.check()?;
        let (train_set, val_set) = load_dataset(&config.data)?;
        Self::with_data(config, train_set, val_set)
    }

    /// Like [`new`](Self::new) with an already loaded dataset.
    pub fn with_data(config: &RunConfig, train_set: Dataset, val_set: Dataset) -> Result<Self> {
        config.check()?;
        let config = config.resolved();
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SrFlow::new(&config.flow, &config.encoder, config.data.scale, &mut store, &mut init_rng)?;
        let patch = config.train.patch;
        let disc = Discriminator::new(
            &config.discriminator,
            config.flow.image_channels,
            (patch, patch),
            &mut store,
            &mut init_rng,
        )?;
        let gen_ids = store
            .iter()
            .filter(|(_, p)| p.trainable && !p.name.starts_with(DISC_PREFIX))
            .map(|(id, _)| id)
            .collect();
        let gen_opt = Adam::new(&store, gen_ids);
        let disc_opt = Adam::new(&store, store.trainable_with_prefix(DISC_PREFIX));
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(s);
            r
        };
        Ok(Self {
            data_rng: stream(DATA_STREAM),
            latent_rng: stream(LATENT_STREAM),
            config,
            store,
            model,
            disc,
            train_set,
            val_set,
            phase: Phase::Nll,
            iteration: 0,
            best: None,
            gen_opt,
            disc_opt,
        })
    }

    /// Rebuilds a trainer from a checkpoint, regenerating or reloading its dataset.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config = RunConfig::from_toml(&ckpt.config)?;
        let (train_set, val_set) = load_dataset(&config.data)?;
        Self::from_checkpoint_with_data(ckpt, train_set, val_set)
    }

    pub fn from_checkpoint_with_data(ckpt: &Checkpoint<T>, train_set: Dataset, val_set: Dataset) -> Result<Self> {
        let config = RunConfig::from_toml(&ckpt.config)?;
        let mut t = Self::with_data(&config, train_set, val_set)?;
        ckpt.restore_params(&mut t.store)?;
        ckpt.optimizer("gen")?.restore_into(&mut t.gen_opt, &t.store)?;
        ckpt.optimizer("disc")?.restore_into(&mut t.disc_opt, &t.store)?;
        t.data_rng = ckpt.rng("data")?;
        t.latent_rng = ckpt.rng("latent")?;
        t.phase = ckpt.phase;
        t.iteration = ckpt.iteration as usize;
        t.best = ckpt.best;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.to_toml(),
            phase: self.phase,
            iteration: self.iteration as u64,
            best: self.best,
            params: Checkpoint::capture_params(&self.store),
            optimizers: vec![
                OptimizerBlock::capture("gen", &self.gen_opt, &self.store),
                OptimizerBlock::capture("disc", &self.disc_opt, &self.store),
            ],
            rngs: vec![
                ("data".into(), RngState::capture(&self.data_rng)),
                ("latent".into(), RngState::capture(&self.latent_rng)),
            ],
        }
    }

    fn batch(&mut self) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = &self.config.train;
        let (y, x) = self.train_set.sample_batch(&mut self.data_rng, t.batch, t.patch)?;
        let y = inject_noise(&y, t.noise, &mut self.data_rng);
        Ok((y.cast(), x.cast()))
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => Error::Diverged {
                iteration: self.iteration,
                msg: format!("non-finite value in `{op}` during phase {:?}", self.phase),
            },
            other => other,
        }
    }

    /// One NLL-only step at step size `lr`.
    pub fn nll_step(&mut self, lr: f64) -> Result<CurveRow> {
        let (y, x) = self.batch()?;
        if !self.model.is_initialized(&self.store) {
            self.model.initialize(&mut self.store, &y, &x)?;
        }
        let tape = Tape::new();
        let nll = {
            let cx = Ctx::new(&tape, &self.store);
            let loss = self
                .model
                .nll_loss(&cx, &tape.constant(y), &tape.constant(x))
                .map_err(|e| self.diverged(e))?;
            loss.backward().map_err(|e| self.diverged(e))?;
            loss.item()?.to_f64_lossy()
        };
        self.store.zero_grad();
        tape.accumulate_into(&mut self.store)?;
        self.gen_opt.step(&mut self.store, lr)?;
        Ok(CurveRow {
            iteration: self.iteration,
            nll,
            adv: None,
            real_p: None,
            fake_p: None,
        })
    }

    /// One generator step on `nll + λ·L_adv`, then one discriminator step on `−L_adv`.
    pub fn adversarial_step(&mut self, lr: f64, disc_lr: f64) -> Result<CurveRow> {
        let (y, x) = self.batch()?;
        if !self.model.is_initialized(&self.store) {
            self.model.initialize(&mut self.store, &y, &x)?;
        }
        let lambda = self.config.lambda_adv();
        let form = self.config.train.adv;
        let tau = self.config.train.train_temperature;
        let n = y.shape()[0];
        let hr = (y.shape()[2], y.shape()[3]);
        let latent = self.model.flow.draw_latent::<T, _>(n, hr.0, hr.1, tau, &mut self.latent_rng);
        let tape = Tape::new();
        let (row, fake) = {
            let cx = Ctx::new(&tape, &self.store);
            let dcx = Ctx::frozen(&tape, &self.store);
            let (yv, xv) = (tape.constant(y.clone()), tape.constant(x));
            let run = || -> Result<_> {
                let e = self.model.embed(&cx, &xv)?;
                let nll = self.model.flow.encode(&cx, &yv, Some(&e))?.nll_per_dim()?.mean()?;
                let fake = self.model.flow.decode_sample(&cx, &latent, Some(&e), hr)?;
                let adv = adversarial_losses(&self.disc.logits(&dcx, &yv)?, &self.disc.logits(&dcx, &fake)?, form)?;
                let loss = if lambda > 0.0 {
                    nll.add(&adv.gen_loss.mul_scalar(T::of(lambda))?)?
                } else {
                    nll.clone()
                };
                loss.backward()?;
                Ok((nll.item()?, adv, fake))
            };
            let (nll, adv, fake) = run().map_err(|e| self.diverged(e))?;
            let row = CurveRow {
                iteration: self.iteration,
                nll: nll.to_f64_lossy(),
                adv: Some(adv.value.item()?.to_f64_lossy()),
                real_p: Some(adv.real_p.to_f64_lossy()),
                fake_p: Some(adv.fake_p.to_f64_lossy()),
            };
            (row, (*fake.value()).clone())
        };
        self.store.zero_grad();
        tape.accumulate_into(&mut self.store)?;
        self.gen_opt.step(&mut self.store, lr)?;

        let dtape = Tape::new();
        {
            let dcx = Ctx::new(&dtape, &self.store);
            let real = self.disc.logits(&dcx, &dtape.constant(y))?;
            let fake = self.disc.logits(&dcx, &dtape.constant(fake))?;
            adversarial_losses(&real, &fake, form)?
                .disc_objective
                .backward()
                .map_err(|e| self.diverged(e))?;
        }
        self.store.zero_grad();
        dtape.accumulate_into(&mut self.store)?;
        self.disc_opt.step(&mut self.store, disc_lr)?;
        Ok(row)
    }

    /// Held-out score: mean NLL per dim in phase 1, and
    /// `nll − 0.01·LR-PSNR` of `τ = 1` samples in phase 2.
    pub fn validate(&self) -> Result<f64> {
        let rows = evaluate_flow(&self.model, &self.store, &self.val_set.pairs, 1.0, self.config.seed)?;
        let m = mean_row(&rows);
        Ok(match self.phase {
            Phase::Nll => m.nll_npd,
            _ => m.nll_npd - 0.01 * m.lr_psnr_db,
        })
    }

    fn phase_len(&self) -> usize {
        match self.phase {
            Phase::Nll => self.config.train.phase1_iters,
            Phase::Adversarial => self.config.train.phase2_iters,
            Phase::Done => 0,
        }
    }

    /// One iteration of the current phase at its scheduled step sizes.
    fn step_current(&mut self) -> Result<CurveRow> {
        let len = self.phase_len();
        let lr = scheduled_lr(self.config.train.lr, self.iteration, len);
        let row = match self.phase {
            Phase::Nll => self.nll_step(lr)?,
            Phase::Adversarial => {
                let dlr = scheduled_lr(self.config.disc_lr(), self.iteration, len);
                self.adversarial_step(lr, dlr)?
            }
            Phase::Done => return Err(Error::domain("train", "training already finished")),
        };
        self.iteration += 1;
        Ok(row)
    }

    fn finish_phase(&mut self) {
        let finished = self.phase;
        self.best = None;
        self.phase = match finished {
            Phase::Nll if self.config.train.phase2_iters > 0 => Phase::Adversarial,
            _ => Phase::Done,
        };
        // a finished run keeps its adversarial iteration count
        self.iteration = if finished == Phase::Adversarial { self.iteration } else { 0 };
    }

    /// One iteration without any file output, moving to the next phase when due.
    pub fn advance(&mut self) -> Result<CurveRow> {
        let row = self.step_current()?;
        if self.iteration >= self.phase_len() {
            self.finish_phase();
        }
        Ok(row)
    }

    /// Runs until both phases finish (or phase 1 only), or until
    /// `max_steps` iterations have been taken in this call. Artifacts go to `out`.
    pub fn run(&mut self, out: &Path, phase1_only: bool, max_steps: Option<usize>) -> Result<()> {
        fs::create_dir_all(out)?;
        let toml = self.config.to_toml();
        fs::write(out.join("config.toml"), &toml)?;
        let mut steps = 0usize;
        while self.phase != Phase::Done && !(phase1_only && self.phase == Phase::Adversarial) {
            let (csv_name, tag) = match self.phase {
                Phase::Nll => ("phase1.csv", "phase1"),
                _ => ("phase2.csv", "phase2"),
            };
            let mut curve = CurveFile::open(&out.join(csv_name), &toml, self.iteration)?;
            let len = self.phase_len();
            while self.iteration < len {
                if max_steps.is_some_and(|m| steps >= m) {
                    curve.flush()?;
                    self.checkpoint().save(&out.join("latest.ckpt"))?;
                    return Ok(());
                }
                curve.push(&self.step_current()?)?;
                steps += 1;
                let every = self.config.train.val_every;
                if (every > 0 && self.iteration % every == 0) || self.iteration == len {
                    let score = self.validate()?;
                    if self.best.is_none_or(|b| score < b) {
                        self.best = Some(score);
                        self.checkpoint().save(&out.join(format!("best_{tag}.ckpt")))?;
                    }
                }
                let every = self.config.train.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    curve.flush()?;
                    self.checkpoint().save(&out.join("latest.ckpt"))?;
                }
            }
            curve.flush()?;
            let finished = self.phase;
            self.finish_phase();
            if finished == Phase::Nll {
                self.checkpoint().save(&out.join("phase1.ckpt"))?;
            }
        }
        let ckpt = self.checkpoint();
        ckpt.save(&out.join("latest.ckpt"))?;
        ckpt.save(&out.join("final.ckpt"))?;
        Ok(())
    }
}

/// Whether a checkpoint holds a model that went through adversarial fine-tuning.
pub fn is_adversarial_model<T>(ckpt: &Checkpoint<T>) -> bool {
    matches!(ckpt.phase, Phase::Adversarial | Phase::Done) && ckpt.iteration > 0
}

