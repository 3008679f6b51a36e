use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::conditioning::{adversarial_losses, Discriminator};
use crate::data::{bicubic_upsample, lr_psnr, psnr, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::laplace::laplace_nll;
use crate::model::{Fidelity, L1Baseline, SrFlow};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::adam::{scheduled_lr, Adam};
use super::config::RunConfig;
use super::trainer::{evaluate_flow, DISC_PREFIX, fit_pair, inject_noise, load_dataset, mean_row, EvalRow, Trainer};

pub const DEFAULT_TEMPERATURES: [f64; 5] = [0.0, 0.5, 0.8, 0.9, 1.0];

/// Mean held-out metrics at each temperature, in ascending `τ`.
pub fn temperature_sweep<T: Scalar>(
    model: &SrFlow,
    store: &ParamStore<T>,
    pairs: &[ImagePair],
    temperatures: &[f64],
    seed: u64,
) -> Result<Vec<(f64, EvalRow)>> {
    let mut taus = temperatures.to_vec();
    if let Some(bad) = taus.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::domain("temperature_sweep", format!("temperature {bad} < 0")));
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus.into_iter()
        .map(|tau| Ok((tau, mean_row(&evaluate_flow(model, store, pairs, tau, seed)?))))
        .collect()
}

/// Trains the L1 regressor on the same batch stream the flow would see:
/// `phase1_iters` steps of L1, then `phase2_iters` steps of L1 plus the
/// weighted adversarial loss against its own discriminator.
pub fn train_l1_baseline<T: Scalar>(config: &RunConfig, train_set: &Dataset) -> Result<(L1Baseline, ParamStore<T>)> {
    config.check()?;
    let config = config.resolved();
    let t = &config.train;
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = L1Baseline::new(
        &config.encoder,
        config.flow.image_channels,
        config.data.scale,
        Fidelity::L1,
        &mut store,
        &mut init_rng,
    )?;
    let disc = Discriminator::new(
        &config.discriminator,
        config.flow.image_channels,
        (t.patch, t.patch),
        &mut store,
        &mut init_rng,
    )?;
    let gen_ids = store
        .iter()
        .filter(|(_, p)| p.trainable && !p.name.starts_with(DISC_PREFIX))
        .map(|(id, _)| id)
        .collect();
    let mut opt = Adam::new(&store, gen_ids);
    let mut disc_opt = Adam::new(&store, store.trainable_with_prefix(DISC_PREFIX));
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let (lambda, form) = (config.lambda_adv(), t.adv);
    for (phase2, len) in [(false, t.phase1_iters), (true, t.phase2_iters)] {
        for it in 0..len {
            let (y, x) = train_set.sample_batch(&mut data_rng, t.batch, t.patch)?;
            let y = inject_noise(&y, t.noise, &mut data_rng).cast::<T>();
            let tape = Tape::new();
            let fake = {
                let cx = Ctx::new(&tape, &store);
                let dcx = Ctx::frozen(&tape, &store);
                let (yv, xv) = (tape.constant(y.clone()), tape.constant(x.cast::<T>()));
                let mut loss = net.loss(&cx, &yv, &xv)?;
                let pred = net.predict(&cx, &xv)?;
                if phase2 && lambda > 0.0 {
                    let adv = adversarial_losses(&disc.logits(&dcx, &yv)?, &disc.logits(&dcx, &pred)?, form)?;
                    loss = loss.add(&adv.gen_loss.mul_scalar(T::of(lambda))?)?;
                }
                loss.backward()?;
                (*pred.value()).clone()
            };
            store.zero_grad();
            tape.accumulate_into(&mut store)?;
            opt.step(&mut store, scheduled_lr(t.lr, it, len))?;
            if !phase2 {
                continue;
            }
            let dtape = Tape::new();
            {
                let dcx = Ctx::new(&dtape, &store);
                let real = disc.logits(&dcx, &dtape.constant(y))?;
                let fake = disc.logits(&dcx, &dtape.constant(fake))?;
                adversarial_losses(&real, &fake, form)?.disc_objective.backward()?;
            }
            store.zero_grad();
            dtape.accumulate_into(&mut store)?;
            disc_opt.step(&mut store, scheduled_lr(config.disc_lr(), it, len))?;
        }
    }
    Ok((net, store))
}

/// Held-out metrics of the L1 regressor; the NLL column is its Laplace
/// likelihood with unit scale, in nats per dimension.
pub fn evaluate_l1<T: Scalar>(net: &L1Baseline, store: &ParamStore<T>, pairs: &[ImagePair]) -> Result<Vec<EvalRow>> {
    pairs
        .par_iter()
        .map(|pair| {
            let pair = fit_pair(pair, net.scale)?;
            let tape = Tape::new();
            let cx = Ctx::frozen(&tape, store);
            let y = tape.constant(pair.hr.cast::<T>());
            let g = net.predict(&cx, &tape.constant(pair.lr.cast::<T>()))?;
            let b = tape.constant(Tensor::ones(&y.shape()));
            let d = y.value().len() as f64;
            let nll = laplace_nll(&y, &g, &b)?.item()?.to_f64_lossy() / d;
            let sr = g.value().cast::<f64>();
            Ok(EvalRow {
                image_id: pair.id.clone(),
                psnr_db: psnr(&sr, &pair.hr, 1.0)?,
                lr_psnr_db: lr_psnr(&sr, &pair.lr, pair.scale)?,
                nll_npd: nll,
            })
        })
        .collect()
}

/// Held-out metrics of `SR = bicubic↑(LR)`, scored like [`evaluate_l1`].
pub fn evaluate_bicubic(pairs: &[ImagePair]) -> Result<Vec<EvalRow>> {
    pairs
        .par_iter()
        .map(|pair| {
            let sr = bicubic_upsample(&pair.lr, pair.scale)?;
            let tape = Tape::new();
            let y = tape.constant(pair.hr.clone());
            let g = tape.constant(sr.clone());
            let b = tape.constant(Tensor::ones(&y.shape()));
            let nll = laplace_nll(&y, &g, &b)?.item()? / pair.hr.len() as f64;
            Ok(EvalRow {
                image_id: pair.id.clone(),
                psnr_db: psnr(&sr, &pair.hr, 1.0)?,
                lr_psnr_db: lr_psnr(&sr, &pair.lr, pair.scale)?,
                nll_npd: nll,
            })
        })
        .collect()
}

/// One arm of a K sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepArm {
    /// A flow with this many steps per level.
    Flow(usize),
    /// The L1 regressor.
    L1,
}

impl SweepArm {
    pub fn label(&self) -> String {
        match self {
            SweepArm::Flow(k) => k.to_string(),
            SweepArm::L1 => "L1".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub arm: SweepArm,
    pub seed: u64,
    pub nll_npd: f64,
    pub psnr_db: f64,
    pub lr_psnr_db: f64,
}

/// Trains every arm for every seed and reports mean held-out metrics.
/// Flow arms are trained with both phases and sampled at `τ`.
pub fn k_sweep<T: Scalar>(base: &RunConfig, arms: &[SweepArm], seeds: &[u64], temperature: f64) -> Result<Vec<SweepRow>> {
    base.check()?;
    let (train_set, val_set) = load_dataset(&base.data)?;
    let jobs: Vec<(SweepArm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    jobs.par_iter()
        .map(|&(arm, seed)| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let mean = match arm {
                SweepArm::Flow(k) => {
                    cfg.flow.steps = k;
                    let mut t = Trainer::<T>::with_data(&cfg, train_set.clone(), val_set.clone())?;
                    while t.phase != super::Phase::Done {
                        t.advance()?;
                    }
                    mean_row(&evaluate_flow(&t.model, &t.store, &val_set.pairs, temperature, seed)?)
                }
                SweepArm::L1 => {
                    let (net, store) = train_l1_baseline::<T>(&cfg, &train_set)?;
                    mean_row(&evaluate_l1(&net, &store, &val_set.pairs)?)
                }
            };
            Ok(SweepRow {
                arm,
                seed,
                nll_npd: mean.nll_npd,
                psnr_db: mean.psnr_db,
                lr_psnr_db: mean.lr_psnr_db,
            })
        })
        .collect()
}

/// Averages sweep rows over seeds, one row per arm in first-seen order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut arms: Vec<SweepArm> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm) {
            arms.push(r.arm);
        }
    }
    arms.into_iter()
        .map(|arm| {
            let sel: Vec<_> = rows.iter().filter(|r| r.arm == arm).collect();
            let n = sel.len() as f64;
            SweepRow {
                arm,
                seed: sel[0].seed,
                nll_npd: sel.iter().map(|r| r.nll_npd).sum::<f64>() / n,
                psnr_db: sel.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                lr_psnr_db: sel.iter().map(|r| r.lr_psnr_db).sum::<f64>() / n,
            }
        })
        .collect()
}
