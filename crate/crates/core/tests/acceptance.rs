//! Acceptance checks. Each test prints one `PASS`/`FAIL` line with the
//! measured value next to its tolerance, then asserts.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use flowfid::conditioning::{DiscriminatorConfig, EncoderConfig};
use flowfid::flow::{FlowConfig, Prior};
use flowfid::train::{k_sweep, summarize_sweep, temperature_sweep, Checkpoint, Phase, RunConfig, SweepArm, Trainer};
use flowfid::verify;
use flowfid::Trainer64;

/// Runs one check at a time so the reported runtimes are not shared.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, ok: bool, detail: String) {
    println!("acceptance {id:02} {name}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance {id:02} {name} failed: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn a01_bijectivity() {
    let _g = serial();
    let t = Instant::now();
    let m = verify::measure_round_trip(100, 7).unwrap();
    let el = t.elapsed();
    report(
        1,
        "bijectivity",
        m.worst < 1e-9 && m.cases == 16 && el < Duration::from_secs(60),
        format!("max |decode(encode(y)) - y| = {:.3e} (< 1e-9) over {} configs x 100 inputs, worst at {}, {:.1}s (< 60s)", m.worst, m.cases, m.at, secs(el)),
    );
}

#[test]
fn a02_logdet_oracle() {
    let _g = serial();
    let t = Instant::now();
    let m = verify::measure_logdet(20).unwrap();
    let el = t.elapsed();
    report(
        2,
        "log-det oracle",
        m.worst < 1e-4 && el < Duration::from_secs(120),
        format!("max relative error = {:.3e} (< 1e-4) over {} cases, worst at {}, {:.1}s (< 120s)", m.worst, m.cases, m.at, secs(el)),
    );
}

#[test]
fn a03_l1_equivalence() {
    let _g = serial();
    let (flow, konst) = verify::measure_l1_equivalence(100, 5).unwrap();
    report(
        3,
        "L1 equivalence",
        flow.worst < 1e-12 && konst.worst == 0.0 && flow.cases == 100,
        format!(
            "max |flow - closed form| = {:.3e} (< 1e-12), max |laplace(b=1) - (l1 + D log 2)| = {:e} (== 0), {} instances",
            flow.worst, konst.worst, flow.cases
        ),
    );
}

#[test]
fn a04_gradient_suite() {
    let _g = serial();
    let blocks = verify::gradient_blocks(11).unwrap();
    let (name, worst) = blocks
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    report(
        4,
        "gradient suite",
        worst < 1e-5 && blocks.iter().all(|b| b.1.is_finite()),
        format!("max relative error = {worst:.3e} (< 1e-5) over {} parameter blocks, worst block {name}, h = 1e-5", blocks.len()),
    );
}

#[test]
fn a05_actnorm_init() {
    let _g = serial();
    let (mu, sd) = verify::measure_actnorm(20).unwrap();
    report(
        5,
        "actnorm init",
        mu.worst < 1e-10 && sd.worst < 1e-10,
        format!("max |mean| = {:.3e}, max |std - 1| = {:.3e} (both < 1e-10), {} channels", mu.worst, sd.worst, mu.cases),
    );
}

#[test]
fn a06_orthonormal_mixing() {
    let _g = serial();
    let (q, ld) = verify::measure_orthonormal(20).unwrap();
    report(
        6,
        "orthonormal mixing",
        q.worst < 1e-12 && ld.worst == 0.0 && q.cases == 80,
        format!("max ||Q^T Q - I||_inf = {:.3e} (< 1e-12), max |logdet| = {:e} (== 0), 20 seeds x C in {{2,4,8,12}}", q.worst, ld.worst),
    );
}

/// Phase-1 toy setup: 500 synthetic pairs, 4x, 32x32 patches, L=2, K=4.
fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 1;
    c.flow = FlowConfig {
        levels: 2,
        steps: 4,
        hidden: 16,
        prior: Prior::Gaussian,
        image_channels: 3,
    };
    c.encoder = EncoderConfig {
        width: 16,
        blocks: 4,
        taps: vec![2, 4],
    };
    c.train.phase1_iters = 2000;
    c.train.phase2_iters = 0;
    c.train.batch = 8;
    c.train.patch = 32;
    c.data.scale = 4;
    c.data.synthetic_count = 500;
    c.data.synthetic_size = 48;
    c.data.holdout = 20;
    c
}

struct Phase1Run {
    trainer: Trainer64,
    nll: Vec<f64>,
    seconds: f64,
}

fn phase1_run() -> &'static Phase1Run {
    static RUN: OnceLock<Phase1Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = toy_config();
        let t = Instant::now();
        let mut trainer = Trainer64::new(&cfg).unwrap();
        let mut nll = Vec::new();
        while trainer.phase == Phase::Nll {
            nll.push(trainer.advance().expect("training step").nll);
        }
        Phase1Run {
            trainer,
            nll,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn a07_nll_training() {
    let _g = serial();
    let run = phase1_run();
    let start = run.nll[0];
    let tail = &run.nll[run.nll.len() - 50..];
    let end = tail.iter().sum::<f64>() / tail.len() as f64;
    let drop = (start - end) / start.abs();
    let finite = run.nll.iter().all(|v| v.is_finite());
    report(
        7,
        "nll training",
        finite && drop >= 0.2 && run.nll.len() == 2000 && run.seconds < 900.0,
        format!(
            "nll {start:.4} -> {end:.4} nats/dim (mean of last 50), decrease {:.1}% (>= 20%), finite = {finite}, {} iterations in {:.0}s (< 900s)",
            100.0 * drop,
            run.nll.len(),
            run.seconds
        ),
    );
}

#[test]
fn a08_temperature_tradeoff() {
    let _g = serial();
    let run = phase1_run();
    let t = &run.trainer;
    let rows = temperature_sweep(&t.model, &t.store, &t.val_set.pairs, &[0.0, 1.0], 3).unwrap();
    let (cold, warm) = (rows[0].1.lr_psnr_db, rows[1].1.lr_psnr_db);
    report(
        8,
        "temperature trade-off",
        t.val_set.len() >= 20 && cold >= warm,
        format!("mean LR-PSNR at tau=0 {cold:.2} dB >= tau=1 {warm:.2} dB over {} held-out images", t.val_set.len()),
    );
}

/// Smaller adversarial setup: 16x16 patches, L=2, K=2.
fn adversarial_config() -> RunConfig {
    let mut c = toy_config();
    c.seed = 2;
    c.flow.steps = 2;
    c.train.patch = 16;
    c.train.phase1_iters = 300;
    c.train.phase2_iters = 1000;
    c.discriminator = DiscriminatorConfig { width: 16, blocks: 3 };
    c
}

#[test]
fn a09_adversarial_stability() {
    let _g = serial();
    let cfg = adversarial_config();
    let mut t = Trainer64::new(&cfg).unwrap();
    while t.phase == Phase::Nll {
        t.advance().unwrap();
    }
    let phase1 = t.checkpoint();
    let mut rows = Vec::new();
    while t.phase == Phase::Adversarial {
        match t.advance() {
            Ok(r) => rows.push(r),
            Err(e) => {
                println!("phase 2 stopped: {e}");
                break;
            }
        }
    }
    let finite = rows.len() == 1000
        && rows
            .iter()
            .all(|r| r.nll.is_finite() && r.adv.is_some_and(f64::is_finite) && r.real_p.is_some_and(f64::is_finite));
    let window: Vec<f64> = rows.iter().skip(180).take(20).filter_map(|r| r.real_p).collect();
    let real_p = window.iter().sum::<f64>() / window.len().max(1) as f64;

    // lambda = 0 must replay NLL-only training bit for bit
    let mut zero = RunConfig::from_toml(&phase1.config).unwrap();
    zero.train.lambda_adv = Some(0.0);
    let ck = Checkpoint {
        config: zero.to_toml(),
        ..phase1.clone()
    };
    let mut adv = Trainer::<f64>::from_checkpoint(&ck).unwrap();
    let mut nll = Trainer::<f64>::from_checkpoint(&ck).unwrap();
    let steps = 25;
    let mut identical = true;
    for i in 0..steps {
        let lr = flowfid::train::scheduled_lr(cfg.train.lr, i, cfg.train.phase2_iters);
        let a = adv.adversarial_step(lr, 1e-3).unwrap().nll;
        let b = nll.nll_step(lr).unwrap().nll;
        identical &= a.to_bits() == b.to_bits();
    }
    report(
        9,
        "adversarial stability",
        finite && real_p > 0.5 && identical,
        format!(
            "{} phase-2 iterations, all finite = {finite}, mean real-p over iterations 180..200 = {real_p:.3} (> 0.5), lambda=0 replays {steps} NLL steps bit-exactly = {identical}",
            rows.len()
        ),
    );
}

#[test]
fn a10_k_sweep() {
    let _g = serial();
    // train on whole images: a model fitted to small patches only ever sees
    // border-dominated context and degrades on larger held-out images
    let mut cfg = toy_config();
    cfg.data.synthetic_size = 32;
    cfg.train.patch = 32;
    cfg.train.phase1_iters = 600;
    cfg.train.phase2_iters = 300;
    // 1e-4 leaves the LR conditioning barely trained at this budget
    cfg.train.lr = 1e-3;
    cfg.discriminator = DiscriminatorConfig { width: 16, blocks: 3 };
    let rows = k_sweep::<f64>(&cfg, &[SweepArm::Flow(1), SweepArm::Flow(4), SweepArm::L1], &[0, 1, 2], 1.0).unwrap();
    let mean = summarize_sweep(&rows);
    let get = |arm| mean.iter().find(|r| r.arm == arm).unwrap();
    let (k1, k4, l1) = (get(SweepArm::Flow(1)), get(SweepArm::Flow(4)), get(SweepArm::L1));
    for r in &mean {
        println!("  K={:>2}  lr_psnr {:.2} dB  psnr {:.2} dB  nll {:.4}", r.arm.label(), r.lr_psnr_db, r.psnr_db, r.nll_npd);
    }
    report(
        10,
        "K sweep",
        k4.lr_psnr_db > k1.lr_psnr_db && k1.lr_psnr_db > l1.lr_psnr_db && k4.lr_psnr_db > l1.lr_psnr_db,
        format!(
            "mean LR-PSNR over 3 seeds: K=4 {:.2} dB > K=1 {:.2} dB > L1 {:.2} dB; nll K=4 {:.4}, K=1 {:.4}",
            k4.lr_psnr_db, k1.lr_psnr_db, l1.lr_psnr_db, k4.nll_npd, k1.nll_npd
        ),
    );
}

#[test]
fn a11_determinism() {
    let _g = serial();
    let mut cfg = adversarial_config();
    cfg.flow.steps = 1;
    cfg.flow.hidden = 8;
    cfg.encoder.width = 8;
    cfg.train.batch = 4;
    cfg.train.phase1_iters = 20;
    cfg.train.phase2_iters = 10;
    cfg.train.checkpoint_every = 5;
    cfg.train.val_every = 5;
    cfg.data.synthetic_count = 40;
    cfg.data.holdout = 4;
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    Trainer64::new(&cfg).unwrap().run(dirs[0].path(), false, None).unwrap();
    Trainer64::new(&cfg).unwrap().run(dirs[1].path(), false, None).unwrap();
    // interrupted in phase 1 and again in phase 2
    Trainer64::new(&cfg).unwrap().run(dirs[2].path(), false, Some(13)).unwrap();
    for stop in [Some(12), None] {
        let ck = Checkpoint::load(&dirs[2].path().join("latest.ckpt")).unwrap();
        Trainer64::from_checkpoint(&ck).unwrap().run(dirs[2].path(), false, stop).unwrap();
    }
    let files = ["final.ckpt", "phase1.ckpt", "best_phase1.ckpt", "best_phase2.ckpt", "phase1.csv", "phase2.csv"];
    let same = |a: usize, b: usize, f: &str| std::fs::read(dirs[a].path().join(f)).unwrap() == std::fs::read(dirs[b].path().join(f)).unwrap();
    let repeat = files.iter().all(|f| same(0, 1, f));
    let resume = files.iter().all(|f| same(0, 2, f));
    report(
        11,
        "determinism",
        repeat && resume,
        format!("repeat run byte-identical = {repeat}, resumed run byte-identical = {resume} ({})", files.join(", ")),
    );
}

#[test]
fn a12_metric_constants() {
    let _g = serial();
    let p = verify::measure_metric_constants().unwrap();
    let k = verify::measure_kernel();
    report(
        12,
        "metric constants",
        p.worst == 0.0 && k.worst < 1e-12,
        format!("|psnr - 20| = {:e} (== 0) over {} sizes, max |sum(w) - 1| = {:.3e} (< 1e-12) over {} output pixels", p.worst, p.cases, k.worst, k.cases),
    );
}
