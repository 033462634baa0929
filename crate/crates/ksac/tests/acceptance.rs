//! Acceptance suite: one test per acceptance criterion, each printing a
//! single pass/fail line (visible with `--nocapture`; failures also panic).

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ksac::data::{generate_scene, AugmentSpec, SceneSample};
use ksac::heads::{
    build_model, ksac_pyramid, Binding, HeadKind, KsacHead, Model, ModelConfig,
};
use ksac::ledger::{count_params, flops_estimate, savings_report, MConvention};
use ksac::ops::{
    batch_norm, bilinear_upsample, conv2d, global_avg_pool, relu, softmax_xent, BatchNormState,
    BnMode, ConvSpec, LabelMap,
};
use ksac::tensor::{Real, Shape};
use ksac::train::{
    evaluate, gradcheck, train, ConfusionMatrix, EvalStrategy, TrainConfig,
};
use ksac::Tape;

use common::{criterion, fd_check, naive_conv, zero_inserted_kernel};

fn model_cfg(head: HeadKind, rates: &[usize], c: usize) -> ModelConfig {
    ModelConfig {
        head,
        rates: rates.to_vec(),
        c_in: c,
        c_out: c,
        os: 16,
        decoder: false,
        num_classes: 4,
        seed: 1,
    }
}

fn random_buf(rng: &mut ChaCha8Rng, len: usize) -> Vec<Real> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn acceptance_1_parameter_complexity() {
    criterion(1, "parameter complexity", || {
        let rates = [6usize, 12, 18];
        let ksac = count_params(&build_model(model_cfg(HeadKind::Ksac, &rates, 256)).unwrap());
        let aspp = count_params(&build_model(model_cfg(HeadKind::Aspp, &rates, 256)).unwrap());
        if ksac.head_3x3 != 589_824 {
            return Err(format!("KSAC head 3x3 = {}, want 589824", ksac.head_3x3));
        }
        if aspp.head_3x3 != 1_769_472 {
            return Err(format!("ASPP head 3x3 = {}, want 1769472", aspp.head_3x3));
        }
        if !ksac.formula_ok() || !aspp.formula_ok() {
            return Err("closed-form cross-check failed".into());
        }
        let savings = savings_report(256, 256, 3, MConvention::TwoLayers);
        if (savings - 0.6207).abs() > 0.0005 {
            return Err(format!("savings {savings:.4}, want 0.6207 ± 0.0005"));
        }
        Ok(format!(
            "589824 vs 1769472, savings {savings:.4}, complexity {}/{}",
            ksac.complexity, aspp.complexity
        ))
    });
}

#[test]
fn acceptance_2_rate_widening_constancy() {
    criterion(2, "rate-widening constancy", || {
        let narrow = [6usize, 12, 18];
        let wide = [1usize, 6, 12, 18, 24];
        let (c_in, c_out) = (256usize, 256usize);
        let count = |head, rates: &[usize]| count_params(&build_model(model_cfg(head, rates, 256)).unwrap());
        let kn = count(HeadKind::Ksac, &narrow);
        let kw = count(HeadKind::Ksac, &wide);
        if kn.head_non_bn() != kw.head_non_bn() {
            return Err(format!(
                "KSAC non-BN head params changed: {} vs {}",
                kn.head_non_bn(),
                kw.head_non_bn()
            ));
        }
        let an = count(HeadKind::Aspp, &narrow);
        let aw = count(HeadKind::Aspp, &wide);
        let delta_3x3 = aw.head_3x3 - an.head_3x3;
        if delta_3x3 != 2 * 9 * c_in * c_out {
            return Err(format!(
                "ASPP 3x3 delta {} != 2·9·C_in·C_out = {}",
                delta_3x3,
                2 * 9 * c_in * c_out
            ));
        }
        Ok(format!(
            "KSAC non-BN head constant at {}, ASPP grows by {delta_3x3}",
            kn.head_non_bn()
        ))
    });
}

#[test]
fn acceptance_3_dilated_convolution_oracle() {
    criterion(3, "dilated convolution oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut worst: Real = 0.0;
        for case in 0..100 {
            let n = rng.gen_range(1..=2);
            let c_in = rng.gen_range(1..=3);
            let c_out = rng.gen_range(1..=3);
            let h = rng.gen_range(3..=9);
            let w = rng.gen_range(3..=9);
            let k = if rng.gen_bool(0.3) { 1 } else { 3 };
            let rate = rng.gen_range(1..=4);
            let stride = rng.gen_range(1..=2);
            let mut spec = ConvSpec::new(c_in, c_out, k).rate(rate).stride(stride);
            let (eh, ew) = spec.effective_extent();
            if rng.gen_bool(0.3) && h >= eh && w >= ew {
                spec = spec.valid();
            }
            let x = random_buf(&mut rng, n * c_in * h * w);
            let kernel = random_buf(&mut rng, c_out * c_in * k * k);
            let bias = random_buf(&mut rng, c_out);

            let mut tape = Tape::new();
            let xt = tape.leaf([n, c_in, h, w], x.clone(), false);
            let kt = tape.leaf([c_out, c_in, k, k], kernel.clone(), false);
            let bt = tape.leaf([1, c_out, 1, 1], bias.clone(), false);
            let out = conv2d(&mut tape, xt, kt, Some(bt), spec)
                .map_err(|e| format!("case {case}: {e}"))?;
            let got = tape.data(out);

            let (want, want_shape) = naive_conv(&x, [n, c_in, h, w], &kernel, Some(&bias), spec);
            if tape.shape(out) != want_shape {
                return Err(format!(
                    "case {case}: shape {:?} vs naive {:?}",
                    tape.shape(out),
                    want_shape
                ));
            }
            for (g, w_) in got.iter().zip(&want) {
                let d = (g - w_).abs();
                worst = worst.max(d);
                if d > 1e-12 {
                    return Err(format!("case {case}: naive mismatch {d:.3e}"));
                }
            }

            // zero-insertion reference: dilated kernel, rate-1 convolution
            let (zk, eh, ew) = zero_inserted_kernel(&kernel, c_out, c_in, k, k, rate);
            let mut zspec = ConvSpec::new(c_in, c_out, eh).stride(stride);
            zspec.kernel = (eh, ew);
            zspec.padding = spec.padding;
            let (zwant, zshape) = naive_conv(&x, [n, c_in, h, w], &zk, Some(&bias), zspec);
            if zshape != want_shape {
                return Err(format!("case {case}: zero-insertion shape {zshape:?}"));
            }
            for (g, w_) in got.iter().zip(&zwant) {
                let d = (g - w_).abs();
                worst = worst.max(d);
                if d > 1e-12 {
                    return Err(format!("case {case}: zero-insertion mismatch {d:.3e}"));
                }
            }
        }
        Ok(format!("100 cases, max abs deviation {worst:.2e}"))
    });
}

#[test]
fn acceptance_4_gradient_correctness() {
    criterion(4, "finite-difference gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (eps, tol) = (1e-5, 1e-4);
        let mut worst: Real = 0.0;
        let mut run = |name: &str,
                       inputs: Vec<Vec<Real>>,
                       loss: &mut dyn FnMut(&[Vec<Real>]) -> Real,
                       analytic: Vec<Vec<Real>>|
         -> Result<(), String> {
            let w = fd_check(name, &inputs, &analytic, loss, eps, tol)?;
            worst = worst.max(w);
            Ok(())
        };

        // conv2d: gradients w.r.t. input, kernel and bias
        {
            let spec = ConvSpec::new(2, 3, 3).rate(2);
            let x = random_buf(&mut rng, 2 * 5 * 5);
            let k = random_buf(&mut rng, 3 * 2 * 3 * 3);
            let b = random_buf(&mut rng, 3);
            let wfix = random_buf(&mut rng, 3 * 5 * 5);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut tape = Tape::new();
                let xt = tape.leaf([1, 2, 5, 5], bufs[0].clone(), grads);
                let kt = tape.leaf([3, 2, 3, 3], bufs[1].clone(), grads);
                let bt = tape.leaf([1, 3, 1, 1], bufs[2].clone(), grads);
                let out = conv2d(&mut tape, xt, kt, Some(bt), spec).unwrap();
                let wt = tape.leaf([1, 3, 5, 5], wfix.clone(), false);
                let prod = tape.mul(out, wt).unwrap();
                let loss = tape.sum_all(prod);
                (tape, loss, [xt, kt, bt])
            };
            let (mut tape, loss, ids) = graph(&[x.clone(), k.clone(), b.clone()], true);
            tape.backward(loss).unwrap();
            let analytic = ids.map(|id| tape.grad(id).unwrap().to_vec()).to_vec();
            run(
                "conv2d",
                vec![x, k, b],
                &mut |bufs| {
                    let (tape, loss, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // batch_norm (train mode, batch statistics)
        {
            let x = random_buf(&mut rng, 2 * 3 * 4 * 4);
            let gamma = random_buf(&mut rng, 3);
            let beta = random_buf(&mut rng, 3);
            let wfix = random_buf(&mut rng, 2 * 3 * 4 * 4);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut tape = Tape::new();
                let xt = tape.leaf([2, 3, 4, 4], bufs[0].clone(), grads);
                let gt = tape.leaf([1, 3, 1, 1], bufs[1].clone(), grads);
                let bt = tape.leaf([1, 3, 1, 1], bufs[2].clone(), grads);
                let mut state = BatchNormState::new(3);
                let out = batch_norm(&mut tape, xt, gt, bt, &mut state, BnMode::Train).unwrap();
                let wt = tape.leaf([2, 3, 4, 4], wfix.clone(), false);
                let prod = tape.mul(out, wt).unwrap();
                let loss = tape.sum_all(prod);
                (tape, loss, [xt, gt, bt])
            };
            let (mut tape, loss, ids) = graph(&[x.clone(), gamma.clone(), beta.clone()], true);
            tape.backward(loss).unwrap();
            let analytic = ids.map(|id| tape.grad(id).unwrap().to_vec()).to_vec();
            run(
                "batch_norm",
                vec![x, gamma, beta],
                &mut |bufs| {
                    let (tape, loss, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // relu (inputs kept away from the kink)
        {
            let x: Vec<Real> = (0..2 * 4 * 4)
                .map(|_| {
                    let v: Real = rng.gen_range(0.1..1.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let wfix = random_buf(&mut rng, 2 * 4 * 4);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut tape = Tape::new();
                let xt = tape.leaf([1, 2, 4, 4], bufs[0].clone(), grads);
                let out = relu(&mut tape, xt);
                let wt = tape.leaf([1, 2, 4, 4], wfix.clone(), false);
                let prod = tape.mul(out, wt).unwrap();
                let loss = tape.sum_all(prod);
                (tape, loss, xt)
            };
            let (mut tape, loss, id) = graph(std::slice::from_ref(&x), true);
            tape.backward(loss).unwrap();
            let analytic = vec![tape.grad(id).unwrap().to_vec()];
            run(
                "relu",
                vec![x],
                &mut |bufs| {
                    let (tape, loss, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // global average pooling
        {
            let x = random_buf(&mut rng, 2 * 3 * 4 * 4);
            let wfix = random_buf(&mut rng, 2 * 3);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut tape = Tape::new();
                let xt = tape.leaf([2, 3, 4, 4], bufs[0].clone(), grads);
                let out = global_avg_pool(&mut tape, xt);
                let wt = tape.leaf([2, 3, 1, 1], wfix.clone(), false);
                let prod = tape.mul(out, wt).unwrap();
                let loss = tape.sum_all(prod);
                (tape, loss, xt)
            };
            let (mut tape, loss, id) = graph(std::slice::from_ref(&x), true);
            tape.backward(loss).unwrap();
            let analytic = vec![tape.grad(id).unwrap().to_vec()];
            run(
                "global_avg_pool",
                vec![x],
                &mut |bufs| {
                    let (tape, loss, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // bilinear upsampling
        {
            let x = random_buf(&mut rng, 2 * 3 * 3);
            let wfix = random_buf(&mut rng, 2 * 7 * 5);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut tape = Tape::new();
                let xt = tape.leaf([1, 2, 3, 3], bufs[0].clone(), grads);
                let out = bilinear_upsample(&mut tape, xt, 7, 5).unwrap();
                let wt = tape.leaf([1, 2, 7, 5], wfix.clone(), false);
                let prod = tape.mul(out, wt).unwrap();
                let loss = tape.sum_all(prod);
                (tape, loss, xt)
            };
            let (mut tape, loss, id) = graph(std::slice::from_ref(&x), true);
            tape.backward(loss).unwrap();
            let analytic = vec![tape.grad(id).unwrap().to_vec()];
            run(
                "bilinear_upsample",
                vec![x],
                &mut |bufs| {
                    let (tape, loss, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // softmax cross-entropy (with an ignored pixel)
        {
            let logits = random_buf(&mut rng, 2 * 3 * 2 * 2);
            let mut label_values = vec![0u32, 1, 2, 1, 2, 0, 1, 255];
            label_values.rotate_left(1);
            let labels = LabelMap::new(2, 2, 2, label_values);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut tape = Tape::new();
                let lt = tape.leaf([2, 3, 2, 2], bufs[0].clone(), grads);
                let xent = softmax_xent(&mut tape, lt, &labels, 255).unwrap();
                (tape, xent.loss, lt)
            };
            let (mut tape, loss, id) = graph(std::slice::from_ref(&logits), true);
            tape.backward(loss).unwrap();
            let analytic = vec![tape.grad(id).unwrap().to_vec()];
            run(
                "softmax_xent",
                vec![logits],
                &mut |bufs| {
                    let (tape, loss, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // ksac_pyramid: input, shared kernel and per-rate BN parameters
        {
            let head0 = KsacHead::new(2, 3, &[1, 2], &mut 99).unwrap();
            let x = random_buf(&mut rng, 2 * 2 * 5 * 5);
            let kernel = head0.shared_kernel.weight.clone();
            let g1 = head0.bn_per_rate[0].gamma.clone();
            let b1 = head0.bn_per_rate[0].beta.clone();
            let g2 = head0.bn_per_rate[1].gamma.clone();
            let b2 = head0.bn_per_rate[1].beta.clone();
            let wfix = random_buf(&mut rng, 2 * 3 * 5 * 5);
            let graph = |bufs: &[Vec<Real>], grads: bool| {
                let mut head = head0.clone();
                head.shared_kernel.weight = bufs[1].clone();
                head.bn_per_rate[0].gamma = bufs[2].clone();
                head.bn_per_rate[0].beta = bufs[3].clone();
                head.bn_per_rate[1].gamma = bufs[4].clone();
                head.bn_per_rate[1].beta = bufs[5].clone();
                let mut tape = Tape::new();
                let xt = tape.leaf([2, 2, 5, 5], bufs[0].clone(), grads);
                let mut bind = Binding::default();
                let out = ksac_pyramid(&mut tape, xt, &mut head, &mut bind, BnMode::Train).unwrap();
                let wt = tape.leaf([2, 3, 5, 5], wfix.clone(), false);
                let prod = tape.mul(out, wt).unwrap();
                let loss = tape.sum_all(prod);
                (tape, loss, xt, bind)
            };
            let inputs = vec![x, kernel, g1, b1, g2, b2];
            let (mut tape, loss, xt, bind) = graph(&inputs, true);
            tape.backward(loss).unwrap();
            let mut analytic = vec![tape.grad(xt).unwrap().to_vec()];
            for name in [
                "head.shared_kernel",
                "head.bn.r1.gamma",
                "head.bn.r1.beta",
                "head.bn.r2.gamma",
                "head.bn.r2.beta",
            ] {
                let id = bind.id(name).ok_or(format!("missing binding {name}"))?;
                analytic.push(tape.grad(id).unwrap().to_vec());
            }
            run(
                "ksac_pyramid",
                inputs,
                &mut |bufs| {
                    let (tape, loss, _, _) = graph(bufs, false);
                    tape.data(loss)[0]
                },
                analytic,
            )?;
        }

        // full tiny model via the library gradient checker
        let mut model = build_model(ModelConfig {
            rates: vec![1, 2],
            c_in: 8,
            c_out: 8,
            decoder: true,
            ..model_cfg(HeadKind::Ksac, &[1, 2], 8)
        })
        .unwrap();
        let scene = generate_scene(21, 48, 48, 4).unwrap();
        let report = gradcheck(&mut model, &[scene], eps, tol, 200, 3).map_err(|e| e.to_string())?;
        if !report.passed() {
            let f = &report.failures[0];
            return Err(format!(
                "full model: {}[{}] analytic {:.3e} vs numeric {:.3e}",
                f.name, f.index, f.analytic, f.numeric
            ));
        }
        Ok(format!(
            "all ops within 1e-4 (worst op rel err {worst:.2e}; full model: {} scalars)",
            report.checked
        ))
    });
}

#[test]
fn acceptance_5_shared_kernel_gradient_pooling() {
    criterion(5, "shared-kernel gradient pooling", || {
        let rates = [1usize, 2, 3];
        let head0 = KsacHead::new(2, 3, &rates, &mut 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x = random_buf(&mut rng, 2 * 2 * 6 * 6);
        let wfix = random_buf(&mut rng, 2 * 3 * 6 * 6);

        let shared_grad = |head_rates: &[usize]| -> Vec<Real> {
            let mut head = head0.clone();
            head.rates = head_rates.to_vec();
            head.bn_per_rate = head_rates
                .iter()
                .map(|r| {
                    let i = rates.iter().position(|x| x == r).unwrap();
                    head0.bn_per_rate[i].clone()
                })
                .collect();
            let mut tape = Tape::new();
            let xt = tape.leaf([2, 2, 6, 6], x.clone(), false);
            let mut bind = Binding::default();
            let out = ksac_pyramid(&mut tape, xt, &mut head, &mut bind, BnMode::Train).unwrap();
            let wt = tape.leaf([2, 3, 6, 6], wfix.clone(), false);
            let prod = tape.mul(out, wt).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss).unwrap();
            let id = bind.id("head.shared_kernel").unwrap();
            tape.grad(id).unwrap().to_vec()
        };

        let pooled = shared_grad(&rates);
        let mut summed = vec![0.0; pooled.len()];
        for &r in &rates {
            for (s, g) in summed.iter_mut().zip(shared_grad(&[r])) {
                *s += g;
            }
        }
        let mut worst: Real = 0.0;
        for (p, s) in pooled.iter().zip(&summed) {
            worst = worst.max((p - s).abs());
        }
        if worst > 1e-10 {
            return Err(format!("pooled vs summed gradient deviation {worst:.3e}"));
        }
        Ok(format!(
            "pooled gradient equals per-rate sum (max dev {worst:.2e})"
        ))
    });
}

#[test]
fn acceptance_6_toy_scale_learning() {
    criterion(6, "toy-scale learning sanity", || {
        let started = std::time::Instant::now();
        let rates = [1usize, 2, 4];
        let crop = 97;
        let train_set: Vec<SceneSample> = (0..256)
            .map(|i| generate_scene(100 + i, 121, 121, 5).unwrap())
            .collect();
        let eval_set: Vec<SceneSample> = (0..64)
            .map(|i| generate_scene(10_100 + i, crop, crop, 5).unwrap())
            .collect();
        let spec = AugmentSpec {
            crop: (crop, crop),
            ..Default::default()
        };
        let budget = TrainConfig {
            lr_schedule: vec![(0, 0.02), (750, 0.01), (1100, 0.005)],
            momentum: 0.9,
            batch_size: 4,
            max_iterations: 1500,
            eval_every: 250,
            seed: 9,
        };
        let build = |head| {
            build_model(ModelConfig {
                head,
                rates: rates.to_vec(),
                c_in: 32,
                c_out: 32,
                os: 16,
                decoder: true,
                num_classes: 4,
                seed: 1,
            })
            .unwrap()
        };

        let mut ksac_model = build(HeadKind::Ksac);
        let mut aspp_model = build(HeadKind::Aspp);
        let kp = count_params(&ksac_model);
        let ap = count_params(&aspp_model);
        let ratio = ap.head_3x3 as Real / kp.head_3x3 as Real;
        if ratio < 1.5 {
            return Err(format!("ASPP/KSAC head 3x3 ratio {ratio:.2} < 1.5"));
        }

        let ksac_out = train(&mut ksac_model, &train_set, &eval_set, &budget, Some(&spec), None)
            .map_err(|e| e.to_string())?;
        let ksac_miou = ksac_out.best_miou.unwrap_or(0.0);
        // calibrated threshold for this fixture (seeds, budget and model
        // above); the paired baseline is reported, never asserted
        if ksac_miou < 0.85 {
            return Err(format!("KSAC eval mIOU {ksac_miou:.4} < 0.85"));
        }
        if budget.max_iterations > 3000 {
            return Err("budget exceeds 3000 iterations".into());
        }
        let aspp_out = train(&mut aspp_model, &train_set, &eval_set, &budget, Some(&spec), None)
            .map_err(|e| e.to_string())?;
        let aspp_miou = aspp_out.best_miou.unwrap_or(0.0);
        let minutes = started.elapsed().as_secs_f64() / 60.0;
        if minutes > 30.0 {
            return Err(format!("training took {minutes:.1} min > 30 min"));
        }
        Ok(format!(
            "KSAC mIOU {ksac_miou:.4} ≥ 0.85 in {} iters; ASPP mIOU {aspp_miou:.4} under the same budget \
             (ordering reported, not asserted); head 3x3 ratio {ratio:.2}; {minutes:.1} min total",
            budget.max_iterations
        ))
    });
}

#[test]
fn acceptance_7_evaluation_strategies() {
    criterion(7, "evaluation strategies", || {
        // hand-computed confusion fixture
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
        for c in 0..2 {
            let iou = m.iou(c).unwrap();
            if (iou - 0.6).abs() > 1e-12 {
                return Err(format!("IoU class {c} = {iou}, want 0.6"));
            }
        }
        if (m.miou() - 0.6).abs() > 1e-12 {
            return Err(format!("mIOU {} != 0.6", m.miou()));
        }

        // MS+Flip vs MS on a mirror-symmetric input, with a flip-equivariant
        // (mirror-averaged) model so the flipped pass is redundant by
        // construction
        let mut model = build_model(ModelConfig {
            rates: vec![1, 2],
            c_in: 16,
            c_out: 16,
            ..model_cfg(HeadKind::Ksac, &[1, 2], 16)
        })
        .unwrap();
        // train briefly so predictions are non-trivial, then mirror-average
        let warmup: Vec<SceneSample> = (0..8)
            .map(|i| generate_scene(300 + i, 64, 64, 4).unwrap())
            .collect();
        let warmup_cfg = TrainConfig {
            lr_schedule: vec![(0, 0.02)],
            momentum: 0.9,
            batch_size: 2,
            max_iterations: 60,
            eval_every: 0,
            seed: 2,
        };
        train(&mut model, &warmup, &[], &warmup_cfg, None, None).map_err(|e| e.to_string())?;
        ksac::train::symmetrize_kernels(&mut model);
        // odd side length keeps every stride-2 grid aligned with the mirror
        // (97 → 49 → 25 → 13 → 7), which flip-equivariance requires
        let base = generate_scene(77, 97, 97, 4).unwrap();
        let (h, w) = (base.h, base.w);
        let mut image = base.image.clone();
        let mut labels = base.labels.clone();
        // mirror the left half onto the right
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w / 2 {
                    image[(c * h + i) * w + w - 1 - j] = image[(c * h + i) * w + j];
                }
            }
        }
        for i in 0..h {
            for j in 0..w / 2 {
                labels[i * w + w - 1 - j] = labels[i * w + j];
            }
        }
        let sym = SceneSample {
            h,
            w,
            image,
            labels,
        };
        // scaled side lengths must stay ≡ 1 (mod 16) so all four stride-2
        // stages see odd widths: 49, 65, 97, 113
        let scales = vec![0.5, 65.0 / 97.0, 1.0, 113.0 / 97.0];
        let samples = vec![sym];
        let ms = evaluate(&mut model, &samples, &EvalStrategy::MultiScale(scales.clone()), 255)
            .map_err(|e| e.to_string())?;
        let msf = evaluate(
            &mut model,
            &samples,
            &EvalStrategy::MultiScaleFlip(scales),
            255,
        )
        .map_err(|e| e.to_string())?;
        if ms.confusion != msf.confusion {
            return Err("MS and MS+Flip confusion matrices differ".into());
        }
        if ms.miou != msf.miou {
            return Err(format!("mIOU differs: {} vs {}", ms.miou, msf.miou));
        }
        Ok(format!(
            "confusion fixture exact; MS+Flip == MS on symmetric input (mIOU {:.4})",
            ms.miou
        ))
    });
}

#[test]
fn acceptance_8_determinism() {
    criterion(8, "fixed-seed determinism", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let scenes: Vec<SceneSample> = (0..4)
            .map(|i| generate_scene(200 + i, 48, 48, 4).unwrap())
            .collect();
        let cfg = TrainConfig {
            lr_schedule: vec![(0, 0.01)],
            momentum: 0.9,
            batch_size: 2,
            max_iterations: 25,
            eval_every: 0,
            seed: 5,
        };
        let run = |path: &std::path::Path| -> Result<(), String> {
            let mut model =
                build_model(model_cfg(HeadKind::Ksac, &[1, 2], 16)).map_err(|e| e.to_string())?;
            train(&mut model, &scenes, &[], &cfg, None, None).map_err(|e| e.to_string())?;
            model.save(path).map_err(|e| e.to_string())
        };
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        run(&a)?;
        run(&b)?;
        let (ba, bb) = (
            std::fs::read(&a).map_err(|e| e.to_string())?,
            std::fs::read(&b).map_err(|e| e.to_string())?,
        );
        if ba != bb {
            return Err("checkpoints differ between identical runs".into());
        }
        Ok(format!("byte-identical checkpoints ({} bytes)", ba.len()))
    });
}

#[test]
fn acceptance_9_flops_os_property() {
    criterion(9, "head MACs vs output stride", || {
        let build_os = |os| {
            build_model(ModelConfig {
                os,
                ..model_cfg(HeadKind::Ksac, &[6, 12, 18], 64)
            })
            .unwrap()
        };
        let m8 = build_os(8);
        let m16 = build_os(16);
        let input: Shape = [1, 3, 64, 64];
        let f8 = flops_estimate(&m8, input).map_err(|e| e.to_string())?;
        let f16 = flops_estimate(&m16, input).map_err(|e| e.to_string())?;
        if f8.head_spatial != 4 * f16.head_spatial {
            return Err(format!(
                "OS8 spatial head MACs {} != 4 × OS16 {}",
                f8.head_spatial, f16.head_spatial
            ));
        }
        // the image-pool branch convolves a 1×1 map, so it is OS-independent
        if f8.head_image_pool != f16.head_image_pool {
            return Err("image-pool MACs changed with OS".into());
        }
        // wall-clock factor reported, not asserted
        let time_forward = |model: &Model| {
            let mut model = model.clone();
            let scene = generate_scene(5, 64, 64, 4).unwrap();
            let mut tape = Tape::new();
            let x = scene.image_tensor(&mut tape);
            let t = std::time::Instant::now();
            model.forward(&mut tape, x, BnMode::Eval).unwrap();
            t.elapsed().as_secs_f64()
        };
        let (t8, t16) = (time_forward(&m8), time_forward(&m16));
        Ok(format!(
            "spatial head MACs {} vs {} (exact 4×); wall-clock forward ratio {:.2} (reported only)",
            f8.head_spatial,
            f16.head_spatial,
            t8 / t16
        ))
    });
}
