//! Property suites run by `flowfid verify` and by the acceptance tests.
//!
//! Each `measure_*` function returns the worst observed error over its cases.
//! [`run_all`] compares those against fixed tolerances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{adversarial_losses, AdvFormulation, Discriminator, DiscriminatorConfig, EncoderConfig, LrEmbedding};
use crate::data::{bicubic_downsample, psnr, resize_weights};
use crate::error::Result;
use crate::flow::{FlowConfig, FlowNetwork, Prior};
use crate::gradcheck::{log_abs_det, numeric_jacobian, relative_error};
use crate::laplace::{adaptive_variance_head, l1_loss, laplace_nll, one_layer_flow_nll};
use crate::layers::{ActNorm, AffineInjector, CondAffineCoupling, Layer, LayerIO, OrthoMix, ScaleBias};
use crate::model::{Fidelity, L1Baseline, SrFlow};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst error seen over `cases` checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    pub worst: f64,
    pub cases: usize,
    /// Where the worst value came from.
    pub at: String,
}

impl Measure {
    fn new() -> Self {
        Self {
            worst: 0.0,
            cases: 0,
            at: String::new(),
        }
    }

    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.cases += 1;
        // NaN sticks as the worst possible outcome
        if !self.worst.is_nan() && (err.is_nan() || err > self.worst) {
            self.worst = err;
            self.at = at();
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Adds `U(−amp, amp)` to every trainable parameter so nothing sits at its
/// (often degenerate) initial value.
pub fn perturb(store: &mut ParamStore<f64>, amp: f64, rng: &mut impl Rng) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        for v in p.value.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

fn random_embedding(flow: &FlowNetwork, n: usize, h: usize, w: usize, tape: &Tape<f64>, rng: &mut impl Rng) -> Option<LrEmbedding<f64>> {
    (flow.cond_channels > 0).then(|| LrEmbedding {
        levels: flow
            .level_sizes(h, w)
            .into_iter()
            .map(|(lh, lw)| tape.constant(uniform(&[n, flow.cond_channels, lh, lw], -1.0, 1.0, rng)))
            .collect(),
        sources: Vec::new(),
    })
}

/// Max `|decode(encode(y)) − y|` for `L ∈ {1,2}`, `K ∈ 1..=4`, both priors,
/// `inputs` random images per configuration.
pub fn measure_round_trip(inputs: usize, seed: u64) -> Result<Measure> {
    let mut m = Measure::new();
    for levels in 1..=2 {
        for steps in 1..=4 {
            for prior in [Prior::Gaussian, Prior::Laplace] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((levels * 16 + steps) as u64) << 8);
                let cfg = FlowConfig {
                    levels,
                    steps,
                    hidden: 8,
                    prior,
                    image_channels: 3,
                };
                let mut store = ParamStore::new();
                let flow = FlowNetwork::new(&cfg, 4, &mut store, &mut rng)?;
                perturb(&mut store, 0.2, &mut rng);
                let (h, w) = (8, 8);
                let y = uniform(&[inputs, 3, h, w], 0.0, 1.0, &mut rng);
                let tape = Tape::new();
                let e = random_embedding(&flow, inputs, h, w, &tape, &mut rng);
                let levels_e: Option<Vec<Tensor<f64>>> = e.as_ref().map(|e| e.levels.iter().map(|v| (*v.value()).clone()).collect());
                flow.initialize_actnorm(&mut store, &y, |cx| {
                    Ok(levels_e.map(|l| LrEmbedding {
                        levels: l.into_iter().map(|t| cx.tape.constant(t)).collect(),
                        sources: Vec::new(),
                    }))
                })?;
                let cx = Ctx::new(&tape, &store);
                let enc = flow.encode(&cx, &tape.constant(y.clone()), e.as_ref())?;
                let back = flow.decode(&cx, &enc.latents, e.as_ref())?;
                let err = back.value().max_abs_diff(&y)?;
                m.record(err, || format!("L={levels} K={steps} prior={prior}"));
            }
        }
    }
    Ok(m)
}

fn layer_logdet_error(layer: &Layer, store: &ParamStore<f64>, h: &Tensor<f64>, e: Option<&Tensor<f64>>) -> Result<f64> {
    let run = |x: &Tensor<f64>| -> Result<(Tensor<f64>, f64)> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let io = LayerIO::new(tape.constant(x.clone()), e.map(|e| tape.constant(e.clone())))?;
        let out = layer.forward(&cx, io)?;
        let ld = out.logdet.value().data()[0];
        Ok(((*out.activation.value()).clone(), ld))
    };
    let (_, analytic) = run(h)?;
    let jac = numeric_jacobian(|x: &Tensor<f64>| Ok(run(x)?.0), h, 1e-5)?;
    Ok(relative_error(analytic, log_abs_det(&jac), LOGDET_FLOOR))
}

/// Denominator floor for the log-det comparison, so a zero log-det is
/// compared absolutely.
pub const LOGDET_FLOOR: f64 = 1e-3;

/// Relative error of every layer's analytic log-det, and of a full
/// 1-level/2-step flow, against `log|det|` of a finite-difference Jacobian.
pub fn measure_logdet(seeds: u64) -> Result<Measure> {
    let mut m = Measure::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (c, ce, hw) = (4, 2, 4);
        let h = uniform(&[1, c, hw, hw], -1.0, 1.0, &mut rng);
        let e = uniform(&[1, ce, hw, hw], -1.0, 1.0, &mut rng);
        let e2 = uniform(&[1, 2 * c, hw, hw], -0.5, 0.5, &mut rng);

        let mut store = ParamStore::new();
        let an = ActNorm::new(&mut store, "an", c)?;
        store.set_value(an.scale, Tensor::from_fn(&[c], |_| {
            let s: f64 = rng.random_range(0.3..2.0);
            if rng.random_bool(0.5) { s } else { -s }
        }))?;
        store.set_value(an.bias, uniform(&[c], -1.0, 1.0, &mut rng))?;
        let om = OrthoMix::random(&mut store, &mut rng, "om", c)?;
        let cp = CondAffineCoupling::new(&mut store, &mut rng, "cp", c, ce, 4)?;
        let ij = AffineInjector::new(&mut store, &mut rng, "ij", c, ce, 4)?;
        perturb(&mut store, 0.5, &mut rng);
        let cases: [(Layer, Option<&Tensor<f64>>); 5] = [
            (Layer::ActNorm(an), None),
            (Layer::OrthoMix(om), None),
            (Layer::Coupling(cp), Some(&e)),
            (Layer::Injector(ij), Some(&e)),
            (Layer::ScaleBias(ScaleBias::new(c)), Some(&e2)),
        ];
        for (layer, cond) in &cases {
            let err = layer_logdet_error(layer, &store, &h, *cond)?;
            m.record(err, || format!("{} seed {seed}", layer.kind()));
        }

        // full flow: 3×4×4 = 48 dims
        let cfg = FlowConfig {
            levels: 1,
            steps: 2,
            hidden: 4,
            prior: Prior::Gaussian,
            image_channels: 3,
        };
        let mut fstore = ParamStore::new();
        let flow = FlowNetwork::new(&cfg, ce, &mut fstore, &mut rng)?;
        perturb(&mut fstore, 0.3, &mut rng);
        let y = uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
        let emb = uniform(&[1, ce, 2, 2], -1.0, 1.0, &mut rng);
        let run = |x: &Tensor<f64>| -> Result<(Tensor<f64>, f64)> {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &fstore);
            let e = LrEmbedding::single(tape.constant(emb.clone()));
            let enc = flow.encode(&cx, &tape.constant(x.clone()), Some(&e))?;
            let parts: Vec<Tensor<f64>> = enc.latents.iter().map(|z| (*z.value()).clone()).collect();
            let flat: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
            let n = flat.len();
            Ok((Tensor::new(&[n], flat)?, enc.logdet.value().data()[0]))
        };
        let (_, analytic) = run(&y)?;
        let jac = numeric_jacobian(|x: &Tensor<f64>| Ok(run(x)?.0), &y, 1e-5)?;
        let err = relative_error(analytic, log_abs_det(&jac), LOGDET_FLOOR);
        m.record(err, || format!("flow L=1 K=2 seed {seed}"));
    }
    Ok(m)
}

/// Denominator floor of the gradient comparison, as a fraction of the
/// largest gradient entry in the block.
pub const GRAD_FLOOR_FRACTION: f64 = 1e-2;

/// Compares autodiff gradients of `loss` against central differences for every
/// listed block. Returns `(block name, worst relative error)` per block.
pub fn check_blocks(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    loss: &dyn Fn(&Ctx<f64>) -> Result<Var<f64>>,
) -> Result<Vec<(String, f64)>> {
    let tape = Tape::new();
    {
        let cx = Ctx::new(&tape, store);
        loss(&cx)?.backward()?;
    }
    store.zero_grad();
    tape.accumulate_into(store)?;
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let cx = Ctx::frozen(&tape, store);
        loss(&cx)?.item()
    };
    let mut out = Vec::new();
    for &id in ids {
        let analytic = store.grad(id).clone();
        let scale = analytic.max_abs().max(1e-12);
        let floor = GRAD_FLOOR_FRACTION * scale;
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric, floor);
            if err.is_nan() {
                worst = f64::NAN;
            } else if !worst.is_nan() {
                worst = worst.max(err);
            }
        }
        out.push((store.get(id).name.clone(), worst));
    }
    Ok(out)
}

fn trainable(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
}

/// Finite-difference check of every trainable block of the flow with its
/// encoder, the discriminator, and the adaptive L1 regressor.
pub fn gradient_blocks(seed: u64) -> Result<Vec<(String, f64)>> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_cfg = EncoderConfig {
        width: 4,
        blocks: 2,
        taps: vec![1, 2],
    };
    let mut out = Vec::new();

    // flow + encoder under the summed NLL
    let flow_cfg = FlowConfig {
        levels: 2,
        steps: 1,
        hidden: 4,
        ..FlowConfig::default()
    };
    let mut store = ParamStore::new();
    let model = SrFlow::new(&flow_cfg, &enc_cfg, 2, &mut store, &mut rng)?;
    let y = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let x = bicubic_downsample(&y, 2)?;
    model.initialize(&mut store, &y, &x)?;
    perturb(&mut store, 0.1, &mut rng);
    let ids = trainable(&store);
    out.extend(check_blocks(&mut store, &ids, h, &|cx| {
        let enc = model.encode(cx, &cx.tape.constant(y.clone()), &cx.tape.constant(x.clone()))?;
        enc.nll.sum()
    })?);

    // discriminator under its objective
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&DiscriminatorConfig { width: 4, blocks: 2 }, 3, (8, 8), &mut store, &mut rng)?;
    perturb(&mut store, 0.3, &mut rng);
    let fake = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let ids = trainable(&store);
    for form in [AdvFormulation::Plain, AdvFormulation::Relativistic] {
        let blocks = check_blocks(&mut store, &ids, h, &|cx| {
            let r = disc.logits(cx, &cx.tape.constant(y.clone()))?;
            let f = disc.logits(cx, &cx.tape.constant(fake.clone()))?;
            Ok(adversarial_losses(&r, &f, form)?.disc_objective)
        })?;
        out.extend(blocks.into_iter().map(|(n, e)| (format!("{n} ({form})"), e)));
    }

    // adaptive L1 regressor
    let mut store = ParamStore::new();
    let net = L1Baseline::new(&enc_cfg, 3, 2, Fidelity::Adaptive, &mut store, &mut rng)?;
    perturb(&mut store, 0.1, &mut rng);
    let ids = trainable(&store);
    out.extend(check_blocks(&mut store, &ids, h, &|cx| {
        net.loss(cx, &cx.tape.constant(y.clone()), &cx.tape.constant(x.clone()))
    })?);
    Ok(out)
}

pub fn measure_gradients(seed: u64) -> Result<Measure> {
    let mut m = Measure::new();
    for (name, err) in gradient_blocks(seed)? {
        m.record(err, || name.clone());
    }
    Ok(m)
}

/// `(max |flow − closed form|, max |laplace_nll(b=1) − (l1 + D·ln 2)|)` over
/// random instances. The second value is expected to be exactly zero.
pub fn measure_l1_equivalence(instances: usize, seed: u64) -> Result<(Measure, Measure)> {
    let mut flow_gap = Measure::new();
    let mut const_gap = Measure::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new();
    for i in 0..instances {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let y = tape.constant(uniform(&[n, c, h, w], -1.0, 2.0, &mut rng));
        let out = tape.constant(uniform(&[n, 2 * c, h, w], -1.0, 1.0, &mut rng));
        let head = adaptive_variance_head(&out)?;
        let closed = laplace_nll(&y, &head.g, &head.b()?)?.item()?;
        let flow = one_layer_flow_nll(&cx, &y, &head)?.item()?;
        flow_gap.record((closed - flow).abs(), || format!("instance {i}"));

        let ones = tape.constant(Tensor::ones(&y.shape()));
        let d = y.value().len() as f64;
        let lap = laplace_nll(&y, &head.g, &ones)?.item()?;
        let l1 = l1_loss(&y, &head.g)?.item()?;
        const_gap.record((lap - (l1 + d * 2f64.ln())).abs(), || format!("instance {i}"));
    }
    Ok((flow_gap, const_gap))
}

/// Post-initialization `(max |μ_c|, max |σ_c − 1|)` of ActNorm over random batches.
pub fn measure_actnorm(seeds: u64) -> Result<(Measure, Measure)> {
    let mut mean = Measure::new();
    let mut std = Measure::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let c = rng.random_range(1..9);
        let n = rng.random_range(1..6);
        let shape = [n, c, rng.random_range(2..7), rng.random_range(2..7)];
        let offset = rng.random_range(-5.0..5.0);
        let spread = rng.random_range(0.1..10.0);
        let batch = uniform(&shape, offset - spread, offset + spread, &mut rng);
        let mut store = ParamStore::new();
        let an = ActNorm::new(&mut store, "an", c)?;
        an.initialize(&mut store, &batch)?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = Layer::ActNorm(an).forward(&cx, LayerIO::new(tape.constant(batch), None)?)?;
        let v = out.activation.value();
        let plane = shape[2] * shape[3];
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| v.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec())
                .collect();
            let k = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / k;
            let sd = (vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k).sqrt();
            mean.record(mu.abs(), || format!("seed {seed} channel {ch}"));
            std.record((sd - 1.0).abs(), || format!("seed {seed} channel {ch}"));
        }
    }
    Ok((mean, std))
}

/// `(max ‖QᵀQ − I‖∞, max |logdet|)` for random mixers with `C ∈ {2,4,8,12}`.
pub fn measure_orthonormal(seeds: u64) -> Result<(Measure, Measure)> {
    let mut ortho = Measure::new();
    let mut logdet = Measure::new();
    for seed in 0..seeds {
        for c in [2usize, 4, 8, 12] {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let mut store = ParamStore::new();
            let om = OrthoMix::random(&mut store, &mut rng, "om", c)?;
            let q = store.value(om.matrix).data().to_vec();
            // row-sum norm of QᵀQ − I
            let mut norm = 0.0f64;
            for i in 0..c {
                let row: f64 = (0..c)
                    .map(|j| {
                        let dot: f64 = (0..c).map(|k| q[k * c + i] * q[k * c + j]).sum();
                        (dot - if i == j { 1.0 } else { 0.0 }).abs()
                    })
                    .sum();
                norm = norm.max(row);
            }
            ortho.record(norm, || format!("C={c} seed {seed}"));
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store);
            let h = uniform(&[2, c, 3, 3], -1.0, 1.0, &mut rng);
            let out = Layer::OrthoMix(om).forward(&cx, LayerIO::new(tape.constant(h), None)?)?;
            let ld = out.logdet.value().max_abs();
            logdet.record(ld, || format!("C={c} seed {seed}"));
        }
    }
    Ok((ortho, logdet))
}

/// Max `|Σ w − 1|` of the bicubic weights over every output pixel.
pub fn measure_kernel() -> Measure {
    let mut m = Measure::new();
    for scale in [2usize, 3, 4, 6, 8] {
        for out_len in [1usize, 2, 5, 8, 13, 24] {
            let in_len = out_len * scale;
            for (dir, weights) in [
                ("down", resize_weights(in_len, out_len, 1.0 / scale as f64)),
                ("up", resize_weights(out_len, in_len, scale as f64)),
            ] {
                for (px, row) in weights.iter().enumerate() {
                    let s: f64 = row.iter().map(|(_, w)| w).sum();
                    m.record((s - 1.0).abs(), || format!("{dir} ×{scale} len {out_len} px {px}"));
                }
            }
        }
    }
    m
}

/// `|psnr − 20|` for a constant 0.1 difference on several image sizes.
pub fn measure_metric_constants() -> Result<Measure> {
    let mut m = Measure::new();
    for (i, &(h, w)) in [(1, 1), (4, 4), (7, 13), (32, 32), (48, 48)].iter().enumerate() {
        let a = Tensor::from_fn(&[1, 3, h, w], |k| 0.2 + 0.5 * ((k * 7919 % 101) as f64 / 101.0));
        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b, 1.0)?;
        m.record((p - 20.0).abs(), || format!("case {i} {h}×{w}"));
    }
    Ok(m)
}

/// One row of the verification table.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub at: String,
    pub passed: bool,
    pub seconds: f64,
}

type Outcome = std::result::Result<Measure, String>;

fn report(name: &'static str, tolerance: f64, start: Instant, m: Outcome) -> SuiteReport {
    let seconds = start.elapsed().as_secs_f64();
    match m {
        Ok(m) => SuiteReport {
            name,
            measured: m.worst,
            tolerance,
            cases: m.cases,
            passed: m.worst < tolerance || (tolerance == 0.0 && m.worst == 0.0),
            at: m.at,
            seconds,
        },
        Err(e) => SuiteReport {
            name,
            measured: f64::NAN,
            tolerance,
            cases: 0,
            at: format!("error: {e}"),
            passed: false,
            seconds,
        },
    }
}

fn one(r: Result<Measure>) -> Outcome {
    r.map_err(|e| e.to_string())
}

fn split(r: Result<(Measure, Measure)>) -> (Outcome, Outcome) {
    match r {
        Ok((a, b)) => (Ok(a), Ok(b)),
        Err(e) => (Err(e.to_string()), Err(e.to_string())),
    }
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<SuiteReport> {
    let mut out = Vec::new();
    let t = Instant::now();
    out.push(report("round-trip", 1e-9, t, one(measure_round_trip(100, 7))));
    let t = Instant::now();
    out.push(report("log-det oracle", 1e-4, t, one(measure_logdet(20))));
    let t = Instant::now();
    out.push(report("gradient check", 1e-5, t, one(measure_gradients(11))));
    let t = Instant::now();
    let (flow, konst) = split(measure_l1_equivalence(100, 5));
    out.push(report("L1 equivalence (flow)", 1e-12, t, flow));
    out.push(report("L1 equivalence (D·log 2)", 0.0, t, konst));
    let t = Instant::now();
    let (mu, sd) = split(measure_actnorm(20));
    out.push(report("actnorm init mean", 1e-10, t, mu));
    out.push(report("actnorm init std", 1e-10, t, sd));
    let t = Instant::now();
    let (q, ld) = split(measure_orthonormal(20));
    out.push(report("orthonormal mixing", 1e-12, t, q));
    out.push(report("orthonormal logdet", 0.0, t, ld));
    let t = Instant::now();
    out.push(report("bicubic kernel", 1e-12, t, Ok(measure_kernel())));
    let t = Instant::now();
    out.push(report("metric constants", 0.0, t, one(measure_metric_constants())));
    out
}
