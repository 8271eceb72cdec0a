//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed whether it
//! passes or not. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p semgan --test acceptance -- 1 2 5`.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semgan::ablation::{evaluation_segmenters, run_ablation, AblationRun};
use semgan::config::{RunConfig, Variant};
use semgan::data::{generate_toy_domains, ToyWorldCfg};
use semgan::data::{augment, sample_unpaired_batch, AugmentMode};
use semgan::dropout::{apply_semantic_dropout, apply_semantic_dropout_split, DropoutConfig};
use semgan::eval::{metrics_from_confusion, ConfusionMatrix};
use semgan::losses::{
    adversarial_d_loss, adversarial_g_loss, cycle_loss, identity_loss, seg_consistency_loss, AdvMode,
    LossWeights,
};
use semgan::models::{DiscriminatorCfg, GeneratorCfg, SegmenterCfg};
use semgan::train::{
    generator_gradients, segmenter_objective, train, training_step, Adam, Batch, SegReference,
    TrainConfig, TrainState, WarmupPolicy,
};
use semgan::types::{Direction, Domain, Image, LabelPermutation, LabeledSample, SegMask, IGNORE};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn cpu() -> Device {
    Device::Cpu
}

fn t64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &cpu()).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn mask(labels: Array2<u8>, k: usize) -> SegMask {
    SegMask::new(labels, k).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn unit_values() -> Outcome {
    for dtype in [DType::F32, DType::F64] {
        let half = Tensor::full(0.5f64, (2, 1, 6, 6), &cpu()).unwrap().to_dtype(dtype).unwrap();
        let d = scalar(&adversarial_d_loss(&half, &half, AdvMode::Bce).unwrap());
        ensure!((d - 2.0 * LN_2).abs() < 1e-6, "bce D loss at 0.5 is {d} ({dtype:?}), want 2 ln 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 2..=8usize {
        let logits = Tensor::zeros((3, k, 4, 4), DType::F64, &cpu()).unwrap();
        let masks: Vec<SegMask> = (0..3)
            .map(|_| {
                let l = Array2::from_shape_fn((4, 4), |_| {
                    if rng.random_bool(0.2) { IGNORE } else { rng.random_range(0..k as u8) }
                });
                mask(l, k)
            })
            .collect();
        let refs: Vec<&SegMask> = masks.iter().collect();
        let v = scalar(&seg_consistency_loss(&logits, &refs, None).unwrap().value);
        ensure!((v - (k as f64).ln()).abs() < 1e-6, "uniform logits give {v} for K={k}, want ln K");
    }
    for dtype in [DType::F32, DType::F64] {
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &cpu()).unwrap().to_dtype(dtype).unwrap();
        let round_trip = x.copy().unwrap();
        let c = scalar(&cycle_loss(&x, &round_trip).unwrap());
        ensure!(c == 0.0, "cycle loss of a perfect reconstruction is {c}");
    }
    Ok(format!("2ln2, ln K for K in 2..=8, exact 0"))
}

// ---------------------------------------------------------------------------
// 2

/// Analytic gradients of `f` against central differences, for each input.
fn grad_check(inputs: &[Vec<f64>], shape: &[usize], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|v| Var::from_tensor(&t64(v, shape)).unwrap()).collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&ts).backward().unwrap();
    let mut analytic = Vec::new();
    for v in &vars {
        match grads.get(v.as_tensor()) {
            Some(g) => analytic.extend(flat(g)),
            None => analytic.extend(std::iter::repeat_n(0.0, v.elem_count())),
        }
    }
    let h = 1e-6;
    let mut numeric = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let ts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(m, v)| {
                        let mut v = v.clone();
                        if m == i {
                            v[j] += delta;
                        }
                        t64(&v, shape)
                    })
                    .collect();
                scalar(&f(&ts))
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..100 {
        let k = rng.random_range(2..=5usize);
        let shape = [1, k, 2, 2];
        let n = k * 4;
        let probs = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<f64>>();
        let reals = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();

        for mode in [AdvMode::Bce, AdvMode::Lsgan] {
            let (r, f) = match mode {
                AdvMode::Bce => (probs(&mut rng), probs(&mut rng)),
                AdvMode::Lsgan => (reals(&mut rng), reals(&mut rng)),
            };
            let name = if mode == AdvMode::Bce { "d_bce" } else { "d_lsgan" };
            record(name, grad_check(&[r, f.clone()], &shape, &|t| adversarial_d_loss(&t[0], &t[1], mode).unwrap()));
            let name = if mode == AdvMode::Bce { "g_bce" } else { "g_lsgan" };
            record(name, grad_check(&[f], &shape, &|t| adversarial_g_loss(&t[0], mode).unwrap()));
        }

        // L1 terms are smooth away from ties; keep |x - y| well above the step
        let x = reals(&mut rng);
        let y: Vec<f64> = x
            .iter()
            .map(|&v| {
                let d: f64 = rng.random_range(0.01..1.0);
                if rng.random_bool(0.5) { v + d } else { v - d }
            })
            .collect();
        let pair = [x, y];
        record("cycle", grad_check(&pair, &shape, &|t| cycle_loss(&t[0], &t[1]).unwrap()));
        record("identity", grad_check(&pair, &shape, &|t| identity_loss(&t[0], &t[1]).unwrap()));

        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = Array2::from_shape_fn((2, 2), |_| {
            if rng.random_bool(0.2) { IGNORE } else { rng.random_range(0..k as u8) }
        });
        let m = mask(labels, k);
        let perm = rng.random_bool(0.5).then(|| {
            let mut p: Vec<u8> = (0..k as u8).collect();
            for i in (1..k).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            LabelPermutation::new(p).unwrap()
        });
        record(
            "seg",
            grad_check(&[logits], &shape, &|t| seg_consistency_loss(&t[0], &[&m], perm.as_ref()).unwrap().value),
        );
    }
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    match worst.iter().find(|(_, e)| !(*e < 1e-4)) {
        Some((n, e)) => Err(format!("{n}: relative error {e:.2e} >= 1e-4 ({detail})")),
        None => Ok(format!("max relative error: {detail}")),
    }
}

// ---------------------------------------------------------------------------
// 3

/// 4x4 sample whose mask holds exactly the labels in `set` (plus one IGNORE
/// pixel); every image value is non-zero.
fn set_sample(set: &[u8], domain: Domain, k: usize) -> LabeledSample {
    let labels = Array2::from_shape_fn((4, 4), |(y, x)| {
        let i = y * 4 + x;
        if i == 15 || set.is_empty() { IGNORE } else { set[i % set.len()] }
    });
    let image = Image::new(Array3::from_shape_fn((3, 4, 4), |(c, y, x)| 0.05 + 0.01 * (c * 16 + y * 4 + x) as f32)).unwrap();
    LabeledSample::new(image, mask(labels, k), domain).unwrap()
}

fn check_kept(orig: &LabeledSample, out: &LabeledSample, label: u8) -> std::result::Result<(), String> {
    for ((y, x), &l) in orig.mask.labels().indexed_iter() {
        let got = out.mask.labels()[(y, x)];
        let keep = l == label;
        ensure!(got == if keep { label } else { IGNORE }, "mask pixel ({y},{x}) is {got} after keeping {label}");
        for c in 0..3 {
            let (v, v0) = (out.image.data()[(c, y, x)], orig.image.data()[(c, y, x)]);
            ensure!(if keep { v == v0 } else { v == 0.0 }, "image pixel ({c},{y},{x}) is {v} after keeping {label}");
        }
    }
    Ok(())
}

fn dropout_oracle() -> Outcome {
    let k = 4;
    let subsets: Vec<Vec<u8>> = (0..16u8).map(|bits| (0..4).filter(|i| bits >> i & 1 == 1).collect()).collect();
    // (thresholds a, b) covering: never, always, only-a, only-b
    let thresholds = [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)];
    let mut branches = BTreeSet::new();
    for sa in &subsets {
        for sb in &subsets {
            let a = set_sample(sa, Domain::A, k);
            let b = set_sample(sb, Domain::B, k);
            let common: BTreeSet<u8> = sa.iter().filter(|l| sb.contains(l)).copied().collect();
            for &(pa, pb) in &thresholds {
                let mut chosen = BTreeSet::new();
                for seed in 0..64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let out = apply_semantic_dropout_split(&a, &b, pa, pb, &mut rng).map_err(|e| e.to_string())?;
                    let drawn = pa > 0.0 || pb > 0.0;
                    if !drawn || common.is_empty() {
                        branches.insert(if drawn { "no common class" } else { "not drawn" });
                        ensure!(!out.applied && out.chosen_label.is_none(), "{sa:?}/{sb:?}: applied without a common class");
                        ensure!(out.a == a && out.b == b, "{sa:?}/{sb:?}: samples changed without dropout");
                        continue;
                    }
                    branches.insert("applied");
                    let l = out.chosen_label.ok_or("applied without a label")?;
                    ensure!(out.applied && common.contains(&l), "{sa:?}/{sb:?}: chose {l} outside {common:?}");
                    chosen.insert(l);
                    if pa > 0.0 {
                        check_kept(&a, &out.a, l)?;
                    } else {
                        ensure!(out.a == a, "a changed although only b was masked");
                    }
                    if pb > 0.0 {
                        check_kept(&b, &out.b, l)?;
                    } else {
                        ensure!(out.b == b, "b changed although only a was masked");
                    }
                }
                if (pa > 0.0 || pb > 0.0) && !common.is_empty() {
                    ensure!(chosen == common, "{sa:?}/{sb:?}: only {chosen:?} of {common:?} ever chosen");
                }
            }
        }
    }
    ensure!(branches.len() == 3, "branches hit: {branches:?}");

    let mut details = Vec::new();
    for (p, set) in [(0.5, vec![0u8, 1, 2, 3]), (0.3, vec![1, 2, 3]), (0.8, vec![0, 2])] {
        let a = set_sample(&set, Domain::A, k);
        let b = set_sample(&set, Domain::B, k);
        let cfg = DropoutConfig::new(p, 0).map_err(|e| e.to_string())?;
        let trials = 10_000;
        let mut applied = 0usize;
        let mut counts = vec![0usize; k];
        for seed in 0..trials as u64 {
            let out = apply_semantic_dropout(&a, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
            if out.applied {
                applied += 1;
                counts[out.chosen_label.unwrap() as usize] += 1;
            }
        }
        let rate = applied as f64 / trials as f64;
        ensure!((rate - p).abs() <= 0.02, "applied rate {rate} for p = {p}");
        let m = set.len() as f64;
        let sigma = (applied as f64 * (1.0 / m) * (1.0 - 1.0 / m)).sqrt();
        let expected = applied as f64 / m;
        for &l in &set {
            let dev = (counts[l as usize] as f64 - expected).abs();
            ensure!(dev <= 3.0 * sigma, "label {l} chosen {} times, expected {expected:.0} ± {:.0}", counts[l as usize], 3.0 * sigma);
        }
        details.push(format!("p={p}: rate {rate:.3}"));
    }
    Ok(format!("256 label-set pairs x 4 threshold pairs; {}", details.join(", ")))
}

// ---------------------------------------------------------------------------
// 4

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let k = rng.random_range(2..=5usize);
        let ignore_p = if rng.random_bool(0.3) { 0.2 } else { 0.0 };
        let mut gt = Array2::from_shape_fn((8, 8), |_| {
            if rng.random_bool(ignore_p) { IGNORE } else { rng.random_range(0..k as u8) }
        });
        gt[(0, 0)] = rng.random_range(0..k as u8);
        let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..k as u8));
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&mask(pred.clone(), k), &mask(gt.clone(), k)).map_err(|e| e.to_string())?;
        let report = metrics_from_confusion(&cm, None).map_err(|e| e.to_string())?;

        // per-pixel recount
        let mut total = 0u64;
        let mut correct = 0u64;
        let mut tp = vec![0u64; k];
        let mut in_gt = vec![0u64; k];
        let mut in_union = vec![0u64; k];
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g == IGNORE {
                continue;
            }
            total += 1;
            correct += u64::from(g == p);
            for c in 0..k as u8 {
                tp[c as usize] += u64::from(g == c && p == c);
                in_gt[c as usize] += u64::from(g == c);
                in_union[c as usize] += u64::from(g == c || p == c);
            }
        }
        for g in 0..k {
            for p in 0..k {
                let n = gt.iter().zip(pred.iter()).filter(|&(&a, &b)| a as usize == g && b as usize == p).count() as u64;
                ensure!(cm.get(g, p) == n, "case {case}: confusion ({g},{p}) is {} not {n}", cm.get(g, p));
            }
        }
        let total_f = total as f64;
        let mut accs = Vec::new();
        let mut ious = Vec::new();
        let mut fw = 0.0;
        for c in 0..k {
            if in_gt[c] > 0 {
                accs.push(tp[c] as f64 / in_gt[c] as f64);
            }
            let iou = (in_union[c] > 0).then(|| tp[c] as f64 / in_union[c] as f64);
            if let Some(v) = iou {
                ious.push(v);
                fw += in_gt[c] as f64 / total_f * v;
            }
            ensure!(
                report.per_class_iou[c].iou == iou.map(|v| 100.0 * v),
                "case {case}: class {c} IoU {:?} vs {:?}",
                report.per_class_iou[c].iou,
                iou
            );
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let want = [
            ("overall", 100.0 * correct as f64 / total_f, report.overall_acc),
            ("class acc", 100.0 * mean(&accs), report.avg_class_acc),
            ("mIoU", 100.0 * mean(&ious), report.miou),
            ("fw", 100.0 * fw, report.fw_acc),
        ];
        for (name, w, got) in want {
            ensure!(got == w, "case {case}: {name} {got} vs recount {w}");
        }
    }
    Ok("1000 cases, bitwise equal".into())
}

// ---------------------------------------------------------------------------
// small networks for 5 and 6

fn small_cfg(k: usize) -> TrainConfig {
    TrainConfig {
        crop: 16,
        batch_size: 2,
        pool_size: 4,
        generator: GeneratorCfg { n_res_blocks: 2, base_width: 4 },
        discriminator: DiscriminatorCfg { n_layers: 2, base_width: 8, residual_blocks: 0 },
        segmenter: SegmenterCfg { base_width: 4, ..SegmenterCfg::desk(k) },
        ..Default::default()
    }
}

fn random_samples(n: usize, k: usize, domain: Domain, rng: &mut ChaCha8Rng) -> Vec<LabeledSample> {
    (0..n)
        .map(|_| {
            let labels = Array2::from_shape_fn((16, 16), |(y, x)| ((y / 5 + x / 6 + rng.random_range(0..2)) % k) as u8);
            let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
                0.6 * ((labels[(y, x)] as f32 + c as f32) / k as f32 - 0.5) + rng.random_range(-0.3..0.3)
            });
            LabeledSample::new(Image::new(img).unwrap(), mask(labels, k), domain).unwrap()
        })
        .collect()
}

/// Segmenter-parameter gradient of the full segmenter objective minus that of
/// its real-image part, plus the gradient reaching the generator outputs.
fn fake_path_norms(state: &TrainState, a: &Batch, b: &Batch, cfg: &TrainConfig) -> (f64, f64) {
    let fake_a = Var::from_tensor(&state.g_ba.forward(&b.images).unwrap().detach()).unwrap();
    let fake_b = Var::from_tensor(&state.g_ab.forward(&a.images).unwrap().detach()).unwrap();
    let obj = segmenter_objective(state, a, b, fake_a.as_tensor(), fake_b.as_tensor(), cfg).unwrap();
    let total = match &obj.fake {
        Some(f) => (&obj.real + f).unwrap(),
        None => obj.real.clone(),
    };
    let g_total = total.backward().unwrap();
    let g_real = obj.real.backward().unwrap();
    let mut sq = 0.0;
    for s in [&state.s_a, &state.s_b] {
        for p in s.params().trainable() {
            let get = |g: &candle_core::backprop::GradStore| g.get(p.var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; p.var.elem_count()]);
            sq += get(&g_total).iter().zip(get(&g_real)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    let to_fakes: f64 = [&fake_a, &fake_b]
        .iter()
        .map(|v| g_total.get(v.as_tensor()).map(|g| norm(&flat(g))).unwrap_or(0.0))
        .sum();
    (sq.sqrt(), to_fakes)
}

// ---------------------------------------------------------------------------
// 5

fn warmup_isolation() -> Outcome {
    let k = 4;
    let mut cfg = small_cfg(k);
    cfg.seg_joint = true;
    cfg.warmup = WarmupPolicy::SegValAccThreshold(0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Batch::new(&random_samples(2, k, Domain::A, &mut rng)).unwrap();
    let b = Batch::new(&random_samples(2, k, Domain::B, &mut rng)).unwrap();
    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    ensure!(state.warmup_active(&cfg), "fresh state is not in warmup");
    let (during, to_fakes) = fake_path_norms(&state, &a, &b, &cfg);
    ensure!(during == 0.0 && to_fakes == 0.0, "during warmup: segmenter norm {during}, generator-output norm {to_fakes}");

    // a step taken during warmup leaves the latch closed and still isolates
    training_step(&mut state, &a, &b, &cfg).map_err(|e| e.to_string())?;
    let (during2, _) = fake_path_norms(&state, &a, &b, &cfg);
    ensure!(during2 == 0.0, "after a warmup step: segmenter norm {during2}");

    state.warmup_ended = true;
    ensure!(!state.warmup_active(&cfg), "latch did not end warmup");
    let (after, to_fakes_after) = fake_path_norms(&state, &a, &b, &cfg);
    ensure!(after > 0.0 && to_fakes_after > 0.0, "after warmup: segmenter norm {after}, generator-output norm {to_fakes_after}");

    let mut off = cfg.clone();
    off.seg_joint = false;
    let (no_joint, _) = fake_path_norms(&state, &a, &b, &off);
    ensure!(no_joint == 0.0, "joint flag off: segmenter norm {no_joint}");
    Ok(format!("during 0, after {after:.3e}"))
}

// ---------------------------------------------------------------------------
// 6

/// Cycle-only generator objective written out directly.
fn reference_objective(st: &TrainState, xa: &Tensor, xb: &Tensor, w: &LossWeights) -> Tensor {
    let l1 = |x: &Tensor, y: &Tensor| (x - y).unwrap().abs().unwrap().mean_all().unwrap();
    let ls = |d: &Tensor| (d - 1.0).unwrap().sqr().unwrap().mean_all().unwrap();
    let fake_b = st.g_ab.forward(xa).unwrap();
    let fake_a = st.g_ba.forward(xb).unwrap();
    let adv = (ls(&st.d_b.forward(&fake_b).unwrap()) + ls(&st.d_a.forward(&fake_a).unwrap())).unwrap();
    let cyc = (l1(xa, &st.g_ba.forward(&fake_b).unwrap()) + l1(xb, &st.g_ab.forward(&fake_a).unwrap())).unwrap();
    let idt = (l1(xb, &st.g_ab.forward(xb).unwrap()) + l1(xa, &st.g_ba.forward(xa).unwrap())).unwrap();
    let cyc = cyc.affine(w.lambda_cycle, 0.0).unwrap();
    let idt = idt.affine(w.lambda_idt, 0.0).unwrap();
    ((adv + cyc).unwrap() + idt).unwrap()
}

fn gen_vars(st: &TrainState) -> Vec<(String, Var)> {
    let mut out = Vec::new();
    for (prefix, g) in [("g_ab", &st.g_ab), ("g_ba", &st.g_ba)] {
        for p in g.params().trainable() {
            out.push((format!("{prefix}.{}", p.name), p.var.clone()));
        }
    }
    out
}

/// Samples a batch pair the way the training loop does.
fn draw(state: &mut TrainState, a: &[LabeledSample], b: &[LabeledSample], cfg: &TrainConfig) -> (Batch, Batch) {
    let (xa, xb) = sample_unpaired_batch(a, b, cfg.batch_size, &mut state.rng).unwrap();
    let mut sa = Vec::new();
    let mut sb = Vec::new();
    for (x, y) in xa.into_iter().zip(xb) {
        let x = augment(x, AugmentMode::Train, cfg.crop, cfg.flip, &mut state.rng).unwrap();
        let y = augment(y, AugmentMode::Train, cfg.crop, cfg.flip, &mut state.rng).unwrap();
        let out = apply_semantic_dropout(&x, &y, &cfg.dropout, &mut state.dropout_rng).unwrap();
        sa.push(out.a);
        sb.push(out.b);
    }
    (Batch::new(&sa).unwrap(), Batch::new(&sb).unwrap())
}

fn cycle_equivalence() -> Outcome {
    let k = 4;
    let mut cfg = small_cfg(k);
    cfg.weights = LossWeights { lambda_seg: 0.0, adv_mode: AdvMode::Lsgan, ..LossWeights::default() };
    cfg.dropout.p = 0.0;
    cfg.seg_joint = true;
    cfg.seg_reference = SegReference::Gt;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data_a = random_samples(6, k, Domain::A, &mut rng);
    let data_b = random_samples(6, k, Domain::B, &mut rng);

    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let mut reference = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let (a, b) = draw(&mut state, &data_a, &data_b, &cfg);
    let (ra, rb) = draw(&mut reference, &data_a, &data_b, &cfg);
    ensure!(flat(&a.images) == flat(&ra.images) && flat(&b.images) == flat(&rb.images), "rng streams diverged");

    let got = generator_gradients(&state, &a, &b, &cfg).map_err(|e| e.to_string())?;
    let obj = reference_objective(&reference, &ra.images, &rb.images, &cfg.weights);
    let grads = obj.backward().unwrap();
    let vars = gen_vars(&reference);
    ensure!(got.len() == vars.len(), "{} gradients vs {} parameters", got.len(), vars.len());
    let (mut all_got, mut all_ref) = (Vec::new(), Vec::new());
    let mut worst = 0f64;
    for ((name, g), (rname, v)) in got.iter().zip(&vars) {
        ensure!(name == rname, "parameter order {name} vs {rname}");
        let r = grads.get(v.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let gv = flat(g);
        worst = worst.max(rel_err(&gv, &r));
        all_got.extend(gv);
        all_ref.extend(r);
    }
    let overall = rel_err(&all_got, &all_ref);
    ensure!(overall < 1e-6, "relative error {overall:.2e}");

    // the step itself moves the generators exactly as the reference update does
    let mut opt = Adam::new(vars.iter().map(|(_, v)| v.clone()).collect(), cfg.lr, cfg.beta1, cfg.beta2).map_err(|e| e.to_string())?;
    opt.step(&grads).map_err(|e| e.to_string())?;
    let out = training_step(&mut state, &a, &b, &cfg).map_err(|e| e.to_string())?;
    ensure!(out.skipped.is_none(), "step skipped");
    ensure!(out.record.seg_ab == 0.0 && out.record.seg_ba == 0.0, "segmentation term logged as non-zero");
    let stepped: Vec<f64> = gen_vars(&state).iter().flat_map(|(_, v)| flat(v.as_tensor())).collect();
    let expected: Vec<f64> = vars.iter().flat_map(|(_, v)| flat(v.as_tensor())).collect();
    let step_err = rel_err(&stepped, &expected);
    ensure!(step_err < 1e-6, "parameters after the step differ: {step_err:.2e}");
    Ok(format!("gradient relative error {overall:.1e} (worst tensor {worst:.1e}), parameters {step_err:.1e}"))
}

// ---------------------------------------------------------------------------
// 7

const TOY_COUNTS: (usize, usize, usize) = (100, 20, 40);
/// Image side equal to the desk crop, so every crop shows the whole scene,
/// sky band included.
const TOY_SIZE: usize = 32;
const SEEDS: usize = 3;

/// Per-variant mean test mIoU (A→B, B→A) from the first full run; later runs
/// must stay within `PIN_TOLERANCE` points.
const PINNED: Option<[(Variant, f64, f64); 3]> = Some([
    (Variant::Cycle, 57.35, 60.51),
    (Variant::Seg, 84.08, 84.30),
    (Variant::SegSm, 80.74, 83.22),
]);
const PIN_TOLERANCE: f64 = 5.0;

fn miou(run: &AblationRun, d: Direction) -> Option<f64> {
    run.report(d).map(|r| r.miou)
}

fn directional_ablation() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = tmp.path().join("toy");
    let toy_cfg = ToyWorldCfg { size: TOY_SIZE, counts: TOY_COUNTS, seed: 0, ambiguity: true, ..Default::default() };
    generate_toy_domains(&toy_cfg, &toy, false).map_err(|e| e.to_string())?;
    let runs_dir = tmp.path().join("runs");
    let cfg = RunConfig::parse_str(&format!(
        "preset = desk\ndata_root = {}\nrun_dir = {}\n",
        toy.display(),
        runs_dir.display()
    ))
    .map_err(|e| e.to_string())?;
    let data = cfg.load_data().map_err(|e| e.to_string())?;
    let (eval_a, eval_b) = evaluation_segmenters(&cfg, &data, &runs_dir.join("eval_segmenters")).map_err(|e| e.to_string())?;
    let runs = run_ablation(&cfg, &data, &Variant::ALL, SEEDS, &eval_a, &eval_b, &runs_dir).map_err(|e| e.to_string())?;
    if let Some(r) = runs.iter().find(|r| r.error.is_some()) {
        return Err(format!("{} seed {} failed: {}", r.variant, r.seed, r.error.as_deref().unwrap_or("")));
    }
    let of = |v: Variant, d: Direction| -> Vec<f64> {
        runs.iter().filter(|r| r.variant == v).map(|r| miou(r, d).unwrap()).collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for d in [Direction::AB, Direction::BA] {
        let (c, s, sm) = (of(Variant::Cycle, d), of(Variant::Seg, d), of(Variant::SegSm, d));
        lines.push(format!(
            "{}: cycle {:?} seg {:?} seg_sm {:?}",
            d.as_str(),
            c.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>(),
            s.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>(),
            sm.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>()
        ));
        if mean(&s) < mean(&c) + 10.0 {
            failures.push(format!("{}: mean seg {:.1} < mean cycle {:.1} + 10", d.as_str(), mean(&s), mean(&c)));
        }
        let wins = sm.iter().zip(&s).filter(|(x, y)| x >= y).count();
        if wins < 2 {
            failures.push(format!("{}: seg_sm >= seg in only {wins} of {SEEDS} seeds", d.as_str()));
        }
        if let Some(pins) = PINNED {
            for (v, pab, pba) in pins {
                let pin = if d == Direction::AB { pab } else { pba };
                let m = mean(&of(v, d));
                if (m - pin).abs() > PIN_TOLERANCE {
                    failures.push(format!("{} {v}: mean {m:.1} outside pinned {pin:.1} ± {PIN_TOLERANCE}", d.as_str()));
                }
            }
        }
    }
    let means: Vec<String> = Variant::ALL
        .iter()
        .map(|&v| format!("{v} ({:.1}, {:.1})", mean(&of(v, Direction::AB)), mean(&of(v, Direction::BA))))
        .collect();
    lines.push(format!("means (ab, ba): {}", means.join(", ")));
    if PINNED.is_none() {
        lines.push("no pinned values yet".into());
    }
    let detail = lines.join("; ");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 8

fn first_rows(path: &Path, n: usize) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().take(n + 1).map(str::to_owned).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = tmp.path().join("toy");
    let toy_cfg = ToyWorldCfg { counts: (24, 4, 4), seed: 8, ..Default::default() };
    generate_toy_domains(&toy_cfg, &toy, false).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for run in ["first", "second"] {
        let cfg = RunConfig::parse_str(&format!(
            "preset = desk\ndata_root = {}\nvariant = seg_sm\nepochs = 4\nmax_steps = 20\nseed = 3\n",
            toy.display()
        ))
        .map_err(|e| e.to_string())?;
        let data = cfg.load_data().map_err(|e| e.to_string())?;
        let tc = cfg.resolved(data.taxonomy.num_classes()).map_err(|e| e.to_string())?;
        let dir = tmp.path().join(run);
        std::fs::create_dir_all(&dir).unwrap();
        train(&tc, &data, &dir, false).map_err(|e| e.to_string())?;
        rows.push(first_rows(&dir.join("losses.csv"), 20));
    }
    ensure!(rows[0].len() == 21, "losses.csv holds {} data rows", rows[0].len().saturating_sub(1));
    if let Some(i) = (0..21).find(|&i| rows[0][i] != rows[1][i]) {
        return Err(format!("row {i} differs:\n  {}\n  {}", rows[0][i], rows[1][i]));
    }
    Ok("20 loss rows identical".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "loss unit values", unit_values),
        (2, "finite-difference gradients", gradient_checks),
        (3, "semantic dropout oracle", dropout_oracle),
        (4, "metric oracle", metric_oracle),
        (5, "warmup isolation", warmup_isolation),
        (6, "cycle equivalence", cycle_equivalence),
        (7, "directional ablation", directional_ablation),
        (8, "determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // panics are reported on the criterion's own line
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
