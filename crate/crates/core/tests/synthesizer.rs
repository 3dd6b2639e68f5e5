mod common;

use common::{analytic, dd_frozen, numeric, randn, rel_err, rng, uniform};
use condense::backbone::{BackboneSpec, Mode, Model};
use condense::data::{LabeledSet, Normalization};
use condense::engine::{Array, Tape, Var};
use condense::stats::{capture_bank, StatBank};
use condense::synth::{
    bn_loss, conv_loss, dd_loss, draw_backbone, drop_mask, init_synthetic, load_synthetic, run_synthesis,
    save_synthetic, sds_bn_loss, sds_conv_loss, synth_step, BatchState, EmaTotals, InitMode, Member, PlanMode,
    SynthesisConfig,
};
use condense::Error;
use proptest::prelude::*;

fn model(name: &str, seed: u64) -> Model {
    Model::build(&BackboneSpec::preset(name, [1, 8, 8], 2).unwrap(), seed).unwrap()
}

fn bank_for(m: &Model, seed: u64) -> StatBank {
    let images = randn(&mut rng(seed), &[40, 1, 8, 8]);
    let data = LabeledSet::new(images, (0..40).map(|i| i % 2).collect(), 2).unwrap();
    capture_bank(m, &data, 2, 20).unwrap()
}

fn grad_of(tape: &Tape, loss: Var, x: Var) -> Array {
    let g = tape.backward(loss).unwrap();
    g.get_or_zeros(x, tape.value(x))
}

#[test]
fn dd_loss_is_zero_for_a_flat_spectrum() {
    // Orthogonal rows of equal norm: Gram = 4·I.
    let mut data = vec![0.0; 3 * 16];
    for i in 0..3 {
        data[i * 16 + 5 * i] = 2.0;
    }
    let x = Array::new(vec![3, 1, 4, 4], data).unwrap();
    let mut t = Tape::new();
    let xv = t.param(x);
    let l = dd_loss(&mut t, xv, &[0, 0, 0], 4.0).unwrap();
    assert!(t.value(l).item().abs() < 1e-12);
}

#[test]
fn dd_loss_of_identical_samples_matches_closed_form() {
    let s = uniform(&mut rng(3), &[1, 1, 3, 3], -0.3, 0.3);
    let b = 4;
    let x = Array::new(vec![b, 1, 3, 3], s.data().repeat(b)).unwrap();
    let mut t = Tape::new();
    let xv = t.param(x);
    let l = dd_loss(&mut t, xv, &vec![1; b], 4.0).unwrap();
    let l = t.value(l).item();
    let top = b as f64 * s.data().iter().map(|v| v * v).sum::<f64>();
    let spectrum: Vec<f64> = (0..b).map(|i| if i + 1 == b { top } else { 0.0 }).collect();
    let soft = |scale: f64| {
        let z: f64 = spectrum.iter().map(|v| (v * scale).exp()).sum();
        spectrum.iter().map(|v| (v * scale).exp() / z).collect::<Vec<f64>>()
    };
    let (p, q) = (soft(0.25), soft(1.0));
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    assert!(l > 0.0);
    assert!((l - kl).abs() < 1e-9 * kl.max(1.0), "{l} vs {kl}");
}

#[test]
fn dd_loss_skips_singleton_classes_and_rejects_bad_input() {
    let x = randn(&mut rng(4), &[3, 1, 4, 4]);
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let l = dd_loss(&mut t, xv, &[0, 1, 2], 4.0).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    assert!(dd_loss(&mut t, xv, &[0, 0, 0], 0.0).is_err());
    let mut bad = x;
    bad.data_mut()[0] = f64::NAN;
    let xb = t.param(bad);
    assert!(matches!(dd_loss(&mut t, xb, &[0, 0, 0], 4.0), Err(Error::NonFinite(_))));
}

#[test]
fn dd_loss_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let x0 = uniform(&mut rng(100 + seed), &[4, 1, 3, 3], -0.5, 0.5);
        let labels = [0, 0, 0, 0];
        let f = |t: &mut Tape, v: &[Var]| dd_loss(t, v[0], &labels, 4.0);
        let a = analytic(std::slice::from_ref(&x0), &f);
        let n = numeric(std::slice::from_ref(&x0), &dd_frozen(&x0, &labels, 4.0));
        let err = rel_err(&a[0], &n[0]);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn sds_bn_with_zero_alpha_equals_plain_matching() {
    let m = model("tiny-resnet", 1);
    let bank = bank_for(&m, 2);
    let x0 = randn(&mut rng(3), &[6, 1, 8, 8]);
    let mut totals = EmaTotals::for_bank(&bank);
    // Warm totals so the comparison is not just the first-use case.
    for seed in 0..2 {
        let mut t = Tape::new();
        let x = t.constant(randn(&mut rng(50 + seed), &[6, 1, 8, 8]));
        let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
        sds_bn_loss(&mut t, &f.bn_taps, &bank, &mut totals, 0.8).unwrap();
    }
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    let sds = sds_bn_loss(&mut t, &f.bn_taps, &bank, &mut totals, 0.0).unwrap();
    let plain = bn_loss(&mut t, &f.bn_taps, &bank).unwrap();
    assert!((t.value(sds).item() - t.value(plain).item()).abs() <= 1e-12);
    let (gs, gp) = (grad_of(&t, sds, x), grad_of(&t, plain, x));
    assert!(gs.max_abs_diff(&gp) <= 1e-12);
}

#[test]
fn sds_bn_is_zero_at_a_perfect_match() {
    let m = model("tiny-resnet", 5);
    let x0 = randn(&mut rng(6), &[5, 1, 8, 8]);
    let mut bank = bank_for(&m, 7);
    let mut t = Tape::new();
    let x = t.param(x0);
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    for (l, tap) in bank.layers.iter_mut().zip(&f.bn_taps) {
        l.channel_mean = t.value(tap.mean).data().to_vec();
        l.channel_var = t.value(tap.var).data().to_vec();
    }
    let mut totals = EmaTotals::for_bank(&bank);
    let loss = sds_bn_loss(&mut t, &f.bn_taps, &bank, &mut totals, 0.8).unwrap();
    assert_eq!(t.value(loss).item(), 0.0);
}

#[test]
fn sds_bn_gradient_is_the_unit_direction_of_the_total() {
    let m = model("tiny-resnet", 8);
    let bank = bank_for(&m, 9);
    let alpha = 0.8;
    let mut totals = EmaTotals::for_bank(&bank);
    for seed in 0..3 {
        let mut t = Tape::new();
        let x = t.constant(randn(&mut rng(60 + seed), &[4, 1, 8, 8]));
        let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
        sds_bn_loss(&mut t, &f.bn_taps, &bank, &mut totals, alpha).unwrap();
    }
    let x0 = randn(&mut rng(10), &[4, 1, 8, 8]);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    let loss = sds_bn_loss(&mut t, &f.bn_taps, &bank, &mut totals, alpha).unwrap();
    let g = grad_of(&t, loss, x);

    // Independent construction: Σ_l ⟨unit(total − target), stat_l(X)⟩ over
    // means and variances, with the directions frozen.
    let unit = |total: &[f64], target: &[f64]| {
        let d: Vec<f64> = total.iter().zip(target).map(|(a, b)| a - b).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        Array::from_vec(d.iter().map(|v| v / n).collect())
    };
    let dirs: Vec<[Array; 2]> = bank
        .bn_layers()
        .zip(&totals.bn)
        .map(|(l, [tm, tv])| {
            [unit(tm.value().unwrap(), &l.channel_mean), unit(tv.value().unwrap(), &l.channel_var)]
        })
        .collect();
    let surrogate = |t: &mut Tape, v: &[Var]| -> condense::Result<Var> {
        let f = m.forward(t, v[0], Mode::Taps, false)?;
        let mut acc = t.constant(Array::scalar(0.0));
        for (tap, [u, w]) in f.bn_taps.iter().zip(&dirs) {
            for (stat, dir) in [(tap.mean, u), (tap.var, w)] {
                let d = t.constant(dir.clone());
                let p = t.mul(stat, d)?;
                let s = t.sum(p);
                acc = t.add(acc, s)?;
            }
        }
        Ok(acc)
    };
    let explicit = analytic(std::slice::from_ref(&x0), &surrogate);
    assert!(rel_err(&g, &explicit[0]) < 1e-10);
    let fd = numeric(std::slice::from_ref(&x0), &surrogate);
    assert!(rel_err(&g, &fd[0]) < 1e-4);
}

#[test]
fn sds_losses_reject_misaligned_taps() {
    let m = model("tiny-resnet", 11);
    let bank = bank_for(&m, 12);
    let mut t = Tape::new();
    let x = t.param(randn(&mut rng(13), &[3, 1, 8, 8]));
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    let mut totals = EmaTotals::for_bank(&bank);
    let short = &f.bn_taps[..f.bn_taps.len() - 1];
    assert!(matches!(sds_bn_loss(&mut t, short, &bank, &mut totals, 0.8), Err(Error::Mismatch(_))));
    let short = &f.conv_taps[1..];
    let r = sds_conv_loss(&mut t, short, &bank, &mut totals, 0.8, 0.0, &mut rng(0));
    assert!(matches!(r, Err(Error::Mismatch(_))));
}

#[test]
fn full_drop_gives_zero_loss_and_untouched_totals() {
    let m = model("tiny-shuffle", 14);
    let bank = bank_for(&m, 15);
    let mut t = Tape::new();
    let x = t.param(randn(&mut rng(16), &[3, 1, 8, 8]));
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    let mut totals = EmaTotals::for_bank(&bank);
    let before = totals.clone();
    let out = sds_conv_loss(&mut t, &f.conv_taps, &bank, &mut totals, 0.8, 1.0, &mut rng(1)).unwrap();
    assert_eq!(t.value(out.loss).item(), 0.0);
    assert_eq!(totals, before);
    assert!(out.dropped.iter().all(|m| m.iter().all(|&d| d)));
}

#[test]
fn dropped_terms_skip_their_ema_update() {
    let m = model("tiny-resnet", 17);
    let bank = bank_for(&m, 18);
    let mut t = Tape::new();
    let x = t.param(randn(&mut rng(19), &[3, 1, 8, 8]));
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    let mut totals = EmaTotals::for_bank(&bank);
    let out = sds_conv_loss(&mut t, &f.conv_taps, &bank, &mut totals, 0.8, 0.5, &mut rng(2)).unwrap();
    for (mask, slots) in out.dropped.iter().zip(&totals.conv) {
        for (dropped, slot) in mask.iter().zip(slots) {
            assert_eq!(*dropped, slot.value().is_none());
        }
    }
}

#[test]
fn conv_matching_is_zero_at_a_perfect_match_and_degenerates_at_zero_alpha() {
    let m = model("tiny-mobile", 20);
    let x0 = randn(&mut rng(21), &[4, 1, 8, 8]);
    let bank = bank_for(&m, 22);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let f = m.forward(&mut t, x, Mode::Taps, false).unwrap();
    let mut totals = EmaTotals::for_bank(&bank);
    let sds = sds_conv_loss(&mut t, &f.conv_taps, &bank, &mut totals, 0.0, 0.0, &mut rng(3)).unwrap();
    let plain = conv_loss(&mut t, &f.conv_taps, &bank).unwrap();
    assert!((t.value(sds.loss).item() - t.value(plain).item()).abs() <= 1e-12);
    assert!(grad_of(&t, sds.loss, x).max_abs_diff(&grad_of(&t, plain, x)) <= 1e-12);

    let mut matched = bank.clone();
    let n_p = bank.n_p;
    for (l, &tap) in matched.layers.iter_mut().filter(|l| l.kind == condense::stats::LayerKind::Conv).zip(&f.conv_taps) {
        let v = t.value(tap).clone();
        let (pm, pv) = condense::stats::patch_reduce(&v, n_p).unwrap();
        let cm = t.mean_axes(tap, &[0, 2, 3]).unwrap();
        let cv = t.var_axes(tap, &[0, 2, 3]).unwrap();
        l.channel_mean = t.value(cm).data().to_vec();
        l.channel_var = t.value(cv).data().to_vec();
        l.patch_mean = Some(pm);
        l.patch_var = Some(pv);
    }
    let mut totals = EmaTotals::for_bank(&matched);
    let out = sds_conv_loss(&mut t, &f.conv_taps, &matched, &mut totals, 0.0, 0.0, &mut rng(4)).unwrap();
    assert!(t.value(out.loss).item() < 1e-12);
}

#[test]
fn drop_rate_matches_its_probability() {
    let mut r = rng(23);
    let trials = 10_000;
    let mut counts = [[0usize; 4]; 3];
    for _ in 0..trials {
        for (c, m) in counts.iter_mut().zip(drop_mask(&mut r, 3, 0.5)) {
            for (c, d) in c.iter_mut().zip(m) {
                *c += d as usize;
            }
        }
    }
    for rate in counts.iter().flatten().map(|&c| c as f64 / trials as f64) {
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }
}

#[test]
fn backbone_draws_are_uniform() {
    let mut r = rng(24);
    let mut counts = [0usize; 4];
    for _ in 0..4000 {
        counts[draw_backbone(&mut r, 4)] += 1;
    }
    assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
}

fn toy_train(seed: u64) -> (LabeledSet, Normalization) {
    let images = randn(&mut rng(seed), &[40, 1, 8, 8]);
    let set = LabeledSet::new(images, (0..40).map(|i| i % 2).collect(), 2).unwrap();
    (set, Normalization::identity(1))
}

#[test]
fn init_modes_and_preconditions() {
    let (train, norm) = toy_train(25);
    let a = init_synthetic(&train, &norm, 3, InitMode::Noise, 9).unwrap();
    let b = init_synthetic(&train, &norm, 3, InitMode::Noise, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels, vec![0, 0, 0, 1, 1, 1]);
    let real = init_synthetic(&train, &norm, 4, InitMode::RealInit, 9).unwrap();
    for (i, &y) in real.labels.iter().enumerate() {
        let found = train
            .class_indices(y)
            .iter()
            .any(|&j| train.images.row(j) == real.images.row(i));
        assert!(found, "image {i} is not a real image of class {y}");
    }
    assert!(init_synthetic(&train, &norm, 0, InitMode::Noise, 9).is_err());
    assert!(init_synthetic(&train, &norm, 21, InitMode::RealInit, 9).is_err());
}

fn small_cfg(iterations: usize) -> SynthesisConfig {
    SynthesisConfig {
        iterations,
        batch_size: 6,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn step_leaves_backbone_untouched_and_zero_lr_is_a_no_op() {
    let m = model("tiny-resnet", 26);
    let params = m.params().to_vec();
    let bank = bank_for(&m, 27);
    let cfg = small_cfg(1);
    let images = randn(&mut rng(28), &[4, 1, 8, 8]);
    let bounds = vec![(-3.0, 3.0)];
    let mut state = BatchState::new(images.clone(), vec![0, 0, 1, 1], bounds.clone(), &cfg);
    let mut totals = EmaTotals::for_bank(&bank);
    let member = Member { model: &m, bank: &bank };
    let out = synth_step(&mut state, member, &mut totals, &cfg, 0.0, &mut rng(5)).unwrap();
    assert!(out.total.is_finite());
    assert_eq!(state.images, images.map(|v| v.clamp(-3.0, 3.0)));
    assert_eq!(m.params(), &params[..]);
    let out = synth_step(&mut state, member, &mut totals, &cfg, 0.05, &mut rng(5)).unwrap();
    assert!(out.total.is_finite());
    assert_ne!(state.images, images);
    assert_eq!(m.params(), &params[..]);
}

#[test]
fn non_finite_images_abort_with_a_diagnostic() {
    let m = model("tiny-resnet", 29);
    let bank = bank_for(&m, 30);
    let cfg = SynthesisConfig {
        w_dd: 0.0,
        ..small_cfg(1)
    };
    let mut images = randn(&mut rng(31), &[2, 1, 8, 8]);
    images.data_mut()[3] = f64::INFINITY;
    let mut state = BatchState::new(images, vec![0, 1], vec![(f64::NEG_INFINITY, f64::INFINITY)], &cfg);
    let mut totals = EmaTotals::for_bank(&bank);
    let r = synth_step(&mut state, Member { model: &m, bank: &bank }, &mut totals, &cfg, 0.05, &mut rng(6));
    match r {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("ce=") && msg.contains("bn="), "{msg}"),
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn synthesis_is_bit_reproducible_and_counts_draws() {
    let pool = vec![model("tiny-resnet", 32), model("tiny-convnet-gn", 33)];
    let banks: Vec<StatBank> = pool.iter().enumerate().map(|(i, m)| bank_for(m, 40 + i as u64)).collect();
    let (train, norm) = toy_train(34);
    let init = init_synthetic(&train, &norm, 3, InitMode::Noise, 1).unwrap();
    let cfg = small_cfg(6);
    let a = run_synthesis(&pool, &banks, init.clone(), &cfg).unwrap();
    let b = run_synthesis(&pool, &banks, init.clone(), &cfg).unwrap();
    assert_eq!(a.data.images.data(), b.data.images.data());
    assert_eq!(a.history, b.history);
    assert_eq!(a.draws.iter().sum::<usize>(), a.history.len());
    assert!(a.data.images.all_finite());
    assert_ne!(a.data.images, init.images);
    // A single-member pool needs no bank for the other backbone.
    let single = run_synthesis(&pool[..1], &banks[..1], init.clone(), &cfg).unwrap();
    assert_eq!(single.draws, vec![single.history.len()]);
    assert!(matches!(
        run_synthesis(&pool, &banks[..1], init, &cfg),
        Err(Error::Mismatch(_))
    ));
}

#[test]
fn config_ranges_are_enforced() {
    let ok = SynthesisConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        SynthesisConfig { alpha: 1.0, ..ok.clone() },
        SynthesisConfig { beta_dr: 1.5, ..ok.clone() },
        SynthesisConfig { tau_dd: 0.0, ..ok.clone() },
        SynthesisConfig { w_dd: -1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!((ok.w_bn, ok.w_conv, ok.w_dd), (0.01, 0.01, 1.0));
    assert_eq!((ok.beta1, ok.beta2, ok.tau_dd, ok.alpha, ok.beta_dr), (0.5, 0.9, 4.0, 0.8, 0.4));
    assert_eq!(ok.iterations, 4000);
    assert_eq!(ok.batch_plan, PlanMode::Reorder);
}

#[test]
fn matching_pulls_bn_means_toward_the_bank() {
    // Running statistics of bright images; noise starts far from them inside
    // the [0, 1] box.
    let mut m = model("tiny-resnet", 35);
    let bright = uniform(&mut rng(36), &[40, 1, 8, 8], 0.6, 1.0);
    let mut t = Tape::new();
    let xv = t.constant(bright.clone());
    let stats = m.forward(&mut t, xv, Mode::Train, false).unwrap().bn_batch_stats;
    m.update_running(&stats, 1.0);
    let bright = LabeledSet::new(bright, (0..40).map(|i| i % 2).collect(), 2).unwrap();
    let bank = capture_bank(&m, &bright, 2, 20).unwrap();
    let (train, norm) = toy_train(37);
    let cfg = SynthesisConfig {
        iterations: 300,
        w_bn: 1.0,
        w_conv: 0.0,
        w_dd: 0.0,
        beta_dr: 0.0,
        batch_size: 10,
        ..Default::default()
    };
    let distance = |x: &Array| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let f = m.forward(&mut t, xv, Mode::Taps, false).unwrap();
        f.bn_taps
            .iter()
            .zip(bank.bn_layers())
            .map(|(tap, l)| {
                t.value(tap.mean)
                    .data()
                    .iter()
                    .zip(&l.channel_mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };
    for seed in 0..3 {
        let init = init_synthetic(&train, &norm, 5, InitMode::Noise, seed).unwrap();
        let start = distance(&init.images);
        let out = run_synthesis(std::slice::from_ref(&m), std::slice::from_ref(&bank), init, &SynthesisConfig {
            seed,
            ..cfg.clone()
        })
        .unwrap();
        let end = distance(&out.data.images);
        assert!(end < 0.5 * start, "seed {seed}: {end} vs {start}");
    }
}

#[test]
fn distilled_set_round_trips_and_detects_corruption() {
    let (train, norm) = toy_train(38);
    let data = init_synthetic(&train, &norm, 3, InitMode::Noise, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_synthetic(&data, dir.path()).unwrap();
    assert_eq!(load_synthetic(dir.path()).unwrap(), data);
    assert!(dir.path().join("preview/class_1.pgm").exists());
    let blob = dir.path().join("images.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&blob, &bytes).unwrap();
    match load_synthetic(dir.path()) {
        Err(Error::Corrupt { path, .. }) => assert!(path.ends_with("images.bin")),
        other => panic!("expected corruption error, got {other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_synthetic(empty.path()),
        Err(Error::MissingArtifact { stage: "synthesize", .. })
    ));
}

/// Variance of each class's Gram spectrum.
fn spectrum_variances(x: &Array, labels: &[usize]) -> Vec<f64> {
    let classes = labels.iter().max().unwrap() + 1;
    (0..classes)
        .map(|y| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
            let mut t = Tape::new();
            let xv = t.constant(x.select_rows(&idx));
            let f = t.flatten(xv).unwrap();
            let ft = t.transpose(f).unwrap();
            let g = t.matmul(f, ft).unwrap();
            let e = t.eigvals_sym(g).unwrap();
            let ev = t.value(e).data();
            let mean = ev.iter().sum::<f64>() / ev.len() as f64;
            ev.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ev.len() as f64
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn densification_flattens_each_class_spectrum(seed in 0u64..1000) {
        let labels = [0, 0, 0, 0, 1, 1, 1];
        let mut x = uniform(&mut rng(seed), &[7, 1, 4, 4], -0.3, 0.3);
        let before = spectrum_variances(&x, &labels);
        for _ in 0..100 {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let l = dd_loss(&mut t, xv, &labels, 4.0).unwrap();
            let g = grad_of(&t, l, xv);
            x.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= 0.05 * g);
        }
        let after = spectrum_variances(&x, &labels);
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a < b, "{a} !< {b}");
        }
    }

    #[test]
    fn ema_total_stays_between_history_and_batch(alpha in 0.0f64..1.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let mut s = condense::synth::EmaStat::default();
        prop_assert_eq!(s.update(&[a], alpha), &[a][..]);
        let t = s.update(&[b], alpha)[0];
        prop_assert!(t >= a.min(b) - 1e-12 && t <= a.max(b) + 1e-12);
    }
}
