use std::fs;
use std::path::Path;

use flowfid::conditioning::{DiscriminatorConfig, EncoderConfig};
use flowfid::flow::FlowConfig;
use flowfid::train::{Checkpoint, Phase, RunConfig, Trainer};
use flowfid::Trainer64;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.flow = FlowConfig {
        levels: 2,
        steps: 2,
        hidden: 4,
        ..FlowConfig::default()
    };
    c.encoder = EncoderConfig {
        width: 4,
        blocks: 1,
        taps: vec![1],
    };
    c.discriminator = DiscriminatorConfig { width: 4, blocks: 2 };
    c.train.phase1_iters = 6;
    c.train.phase2_iters = 4;
    c.train.batch = 2;
    c.train.patch = 8;
    c.train.checkpoint_every = 3;
    c.train.val_every = 2;
    c.data.scale = 2;
    c.data.synthetic_count = 6;
    c.data.synthetic_size = 16;
    c.data.holdout = 2;
    c
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    Trainer64::new(&cfg).unwrap().run(a.path(), false, None).unwrap();
    Trainer64::new(&cfg).unwrap().run(b.path(), false, None).unwrap();
    for f in ["final.ckpt", "phase1.ckpt", "phase1.csv", "phase2.csv", "best_phase1.ckpt", "best_phase2.ckpt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }

    // interrupt in each phase, resuming from latest.ckpt each time
    Trainer64::new(&cfg).unwrap().run(c.path(), false, Some(4)).unwrap();
    for stop in [Some(4), None] {
        let ck = Checkpoint::load(&c.path().join("latest.ckpt")).unwrap();
        Trainer64::from_checkpoint(&ck).unwrap().run(c.path(), false, stop).unwrap();
    }
    for f in ["final.ckpt", "phase1.csv", "phase2.csv"] {
        assert_eq!(read(a.path(), f), read(c.path(), f), "{f}");
    }
    let fin = Checkpoint::<f64>::load(&a.path().join("final.ckpt")).unwrap();
    assert_eq!(fin.phase, Phase::Done);
    assert!(flowfid::train::is_adversarial_model(&fin));
    let csv = String::from_utf8(read(a.path(), "phase1.csv")).unwrap();
    assert!(csv.starts_with("# "));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
}

#[test]
fn zero_weight_adversarial_step_matches_nll_step() {
    let mut cfg = tiny();
    cfg.train.lambda_adv = Some(0.0);
    let mut t = Trainer64::new(&cfg).unwrap();
    for _ in 0..cfg.train.phase1_iters {
        t.advance().unwrap();
    }
    assert_eq!(t.phase, Phase::Adversarial);
    let ck = t.checkpoint();
    let mut a = Trainer::<f64>::from_checkpoint(&ck).unwrap();
    let mut b = Trainer::<f64>::from_checkpoint(&ck).unwrap();
    for _ in 0..4 {
        let ra = a.adversarial_step(1e-3, 1e-3).unwrap();
        let rb = b.nll_step(1e-3).unwrap();
        assert_eq!(ra.nll.to_bits(), rb.nll.to_bits());
    }
}

#[test]
fn phase1_only_stops_before_adversarial() {
    let cfg = tiny();
    let d = tempfile::tempdir().unwrap();
    Trainer64::new(&cfg).unwrap().run(d.path(), true, None).unwrap();
    let fin = Checkpoint::<f64>::load(&d.path().join("final.ckpt")).unwrap();
    assert!(!flowfid::train::is_adversarial_model(&fin));
    assert!(!d.path().join("phase2.csv").exists());
}
