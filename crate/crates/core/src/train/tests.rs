use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use super::*;
use crate::data::{gen_synthetic, SceneConfig, IGNORE};
use crate::error::Error;
use crate::layers::AggOp;
use crate::mtl_net::{ModelConfig, TaskSpec, Variant};
use crate::tensor::gradcheck;
use crate::tensor::{Graph, ParamKind, ParamSet, ParamTag, Tensor};

fn input(shape: &[usize], rng: &mut Pcg64) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    let x = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    ps.insert("x", x, ParamTag::Shared, ParamKind::Weight).unwrap();
    ps
}

fn unit_normals(n: usize, hw: usize, rng: &mut Pcg64) -> Tensor<f64> {
    let mut t = Tensor::zeros([n, 3, 1, hw]);
    for img in 0..n {
        for i in 0..hw {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)];
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            for c in 0..3 {
                t.data_mut()[(img * 3 + c) * hw + i] = v[c] / norm;
            }
        }
    }
    t
}

#[test]
fn segmentation_loss_values() {
    let mut g = Graph::<f64>::new(true);
    let logits = g.constant(Tensor::zeros([2, 5, 2, 2]));
    let labels = [0, 1, 2, 3, 4, 0, IGNORE, 1];
    let l = loss_segmentation(&mut g, logits, &labels, 5).unwrap();
    assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);

    let mut ps = input(&[1, 3, 2, 2], &mut Pcg64::seed_from_u64(1));
    let mut g = Graph::<f64>::new(true);
    let x = g.param(&ps, "x").unwrap();
    let l = loss_segmentation(&mut g, x, &[IGNORE; 4], 3).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l, &mut ps).unwrap();
    assert!(ps.get("x").unwrap().grad.iter().all(|&v| v == 0.0));

    let mut g = Graph::<f64>::new(true);
    let x = g.constant(Tensor::zeros([1, 3, 2, 2]));
    assert!(matches!(loss_segmentation(&mut g, x, &[0, 1, 3, 0], 3), Err(Error::Data(_))));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = Pcg64::seed_from_u64(2);
    let ps = input(&[2, 4, 3, 3], &mut rng);
    let labels: Vec<u8> = (0..18).map(|i| if i % 7 == 3 { IGNORE } else { (i % 4) as u8 }).collect();
    let r = gradcheck::check(&ps, true, 1e-6, |_| true, |g, ps| {
        let x = g.param(ps, "x")?;
        loss_segmentation(g, x, &labels, 4)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    // keep |pred - gt| away from the kink of the absolute value
    let mut ps = input(&[2, 1, 3, 3], &mut rng);
    let gt = Tensor::from_fn([2, 1, 3, 3], |_| rng.random_range(1.0..2.0));
    for (v, d) in ps.get_mut("x").unwrap().value.data_mut().iter_mut().zip(gt.data()) {
        *v = d + if *v >= 0.0 { 0.1 + *v } else { *v - 0.1 };
    }
    let r = gradcheck::check(&ps, true, 1e-6, |_| true, |g, ps| {
        let x = g.param(ps, "x")?;
        loss_depth(g, x, &gt)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let ps = input(&[2, 3, 1, 4], &mut rng);
    let gt = unit_normals(2, 4, &mut rng);
    let r = gradcheck::check(&ps, true, 1e-6, |_| true, |g, ps| {
        let x = g.param(ps, "x")?;
        let n = g.l2_normalize_channels(x, 1e-12)?;
        loss_normal(g, n, &gt)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn regression_loss_values() {
    let mut rng = Pcg64::seed_from_u64(3);
    let gt = Tensor::from_fn([1, 1, 2, 2], |_| rng.random_range(1.0..3.0));
    let mut g = Graph::<f64>::new(true);
    let p = g.constant(gt.clone());
    let l = loss_depth(&mut g, p, &gt).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let bad = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 2.0, 1.0]).unwrap();
    assert!(matches!(loss_depth(&mut g, p, &bad), Err(Error::Data(_))));

    let n = unit_normals(1, 4, &mut rng);
    let same = g.constant(n.clone());
    let l = loss_normal(&mut g, same, &n).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);
    let flipped = g.constant(Tensor::from_fn([1, 3, 1, 4], |i| -n.data()[i]));
    let l = loss_normal(&mut g, flipped, &n).unwrap();
    assert!((g.value(l).item() - 2.0).abs() < 1e-12);
}

#[test]
fn poly_schedule() {
    assert_eq!(poly_lr(0, 30000, 0.01), 0.01);
    assert_eq!(poly_lr(30000, 30000, 0.01), 0.0);
    assert!((poly_lr(15000, 30000, 0.01) - 0.0053589).abs() < 1e-7);
    let lrs: Vec<f64> = (0..=100).map(|i| poly_lr(i, 100, 0.01)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

fn one_weight(value: Vec<f64>, grad: Vec<f64>) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    let n = value.len();
    ps.insert("w", Tensor::new([n], value).unwrap(), ParamTag::Shared, ParamKind::Weight).unwrap();
    ps.get_mut("w").unwrap().grad = grad;
    ps
}

#[test]
fn sgd_matches_hand_unrolled_recurrence() {
    let mut ps = one_weight(vec![0.3, -0.2], vec![0.0, 0.0]);
    Sgd::new(0.9, 0.0).step(&mut ps, 0.1, |_| true).unwrap();
    assert_eq!(ps.value("w").unwrap().data(), &[0.3, -0.2]);

    let mut ps = one_weight(vec![0.3, -0.2], vec![0.5, 1.5]);
    Sgd::new(0.9, 0.0).step(&mut ps, 0.1, |_| true).unwrap();
    assert_eq!(ps.value("w").unwrap().data(), &[0.3 - 0.1 * 0.5, -0.2 - 0.1 * 1.5]);

    let (m, wd, lr) = (0.9, 1e-4, 0.05);
    let (theta0, g1, g2) = (0.7, 0.25, -0.4);
    let mut ps = one_weight(vec![theta0], vec![g1]);
    let mut sgd = Sgd::new(m, wd);
    sgd.step(&mut ps, lr, |_| true).unwrap();
    ps.get_mut("w").unwrap().grad = vec![g2];
    sgd.step(&mut ps, lr, |_| true).unwrap();
    let v1 = g1 + wd * theta0;
    let theta1 = theta0 - lr * v1;
    let v2 = m * v1 + g2 + wd * theta1;
    let theta2 = theta1 - lr * v2;
    assert!((ps.value("w").unwrap().data()[0] - theta2).abs() <= 1e-12);

    let mut ps = one_weight(vec![1.0, 2.0], vec![1.0]);
    assert!(matches!(Sgd::new(0.9, 0.0).step(&mut ps, 0.1, |_| true), Err(Error::Contract(_))));
}

#[test]
fn metric_small_cases() {
    let gt = [0u8, 0, 1, 1];
    let pred = [0usize, 1, 1, 1];
    assert!((metric_miou(&pred, &gt, 2) - 7.0 / 12.0).abs() < 1e-15);
    assert_eq!(metric_pixel_acc(&pred, &gt, 2), 0.75);
    let perfect: Vec<usize> = gt.iter().map(|&c| c as usize).collect();
    assert_eq!(metric_miou(&perfect, &gt, 2), 1.0);
    assert_eq!(metric_pixel_acc(&perfect, &[0, IGNORE, 1, 1], 2), 1.0);

    let d = [1.0f64, 2.0, 4.0];
    assert_eq!(metric_rel(&d, &d), 0.0);
    assert_eq!(metric_rms(&d, &d), 0.0);
    assert!((metric_rel(&[2.0, 2.0, 4.0], &d) - 1.0 / 3.0).abs() < 1e-15);
    let n = [1.0f64, 0.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(metric_mean_angle(&n, &n, 2), 0.0);
    let opposite = [0.0f64, 0.0, 0.0, 0.0, -1.0, -1.0];
    let gt_n = [0.0f64, 0.0, 0.0, 0.0, 1.0, 1.0];
    assert!((metric_mean_angle(&opposite, &gt_n, 2) - 180.0).abs() < 1e-12);
}

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::new(Variant::Baseline, vec![TaskSpec::segmentation(3), TaskSpec::depth()], (8, 8));
    cfg.stage_channels = vec![4, 16];
    cfg.stem_channels = 4;
    cfg.decoder_channels = 8;
    cfg
}

fn tiny_batch(rng: &mut Pcg64) -> Batch<f64> {
    let data = gen_synthetic(rng.random(), 3, SceneConfig { h: 8, w: 8, classes: 3 }).unwrap();
    Batch::from_samples(&data.samples.iter().collect::<Vec<_>>()).unwrap()
}

fn modules(strategy: &Strategy, seed: u64) -> (TrainModules, ParamSet<f64>) {
    let mut ps = ParamSet::new();
    let m = build_modules(strategy, &tiny_cfg(), AggOp::Concat, &mut ps, &mut Pcg64::seed_from_u64(seed)).unwrap();
    (m, ps)
}

fn total(m: &TrainModules, ps: &ParamSet<f64>, b: &Batch<f64>, s: &Strategy) -> (f64, Vec<f64>, Vec<f64>, Option<f64>) {
    let mut g = Graph::new(true);
    let o = joint_objective(&mut g, ps, m, b, s).unwrap();
    let v = |x| g.value(x).item();
    (
        v(o.total),
        o.main.iter().map(|&x| v(x)).collect(),
        o.aux.iter().map(|&(_, x)| v(x)).collect(),
        o.ds.map(v),
    )
}

#[test]
fn objective_variants_decompose() {
    let mut rng = Pcg64::seed_from_u64(4);
    let b = tiny_batch(&mut rng);

    let (both, ps) = modules(&Strategy::AuxiBoth, 5);
    let joint = TrainModules {
        aux: None,
        ..both.clone()
    };
    let (t_both, main, aux, _) = total(&both, &ps, &b, &Strategy::AuxiBoth);
    let (t_joint, main_j, _, _) = total(&joint, &ps, &b, &Strategy::Joint);
    assert_eq!(main, main_j);
    assert_eq!(aux.len(), 2);
    assert!((t_both - (t_joint + aux.iter().sum::<f64>())).abs() <= 1e-12);
    assert!((t_joint - main.iter().sum::<f64>()).abs() <= 1e-12);

    let (kendall, ps_k) = modules(&Strategy::Kendall, 5);
    let (t_k, main_k, _, _) = total(&kendall, &ps_k, &b, &Strategy::Kendall);
    assert_eq!(t_k, main_k.iter().sum::<f64>());

    // deep supervision: total = main + 0.1 * tap losses
    let (ds, ps_d) = modules(&Strategy::DeepSupervision(1), 5);
    let (t_d, main_d, _, ds_sum) = total(&ds, &ps_d, &b, &Strategy::DeepSupervision(1));
    let ds_sum = ds_sum.unwrap();
    assert!((t_d - main_d.iter().sum::<f64>() - DS_SCALE * ds_sum).abs() <= 1e-12);

    // mismatched strategy and modules
    let mut g = Graph::new(true);
    assert!(matches!(joint_objective(&mut g, &ps, &both, &b, &Strategy::Joint), Err(Error::Config(_))));
    assert!(matches!(joint_objective(&mut g, &ps, &joint, &b, &Strategy::AuxiSingle(0)), Err(Error::Config(_))));
}

#[test]
fn scaling_one_task_loss_scales_only_its_gradient() {
    let mut rng = Pcg64::seed_from_u64(6);
    let b = tiny_batch(&mut rng);
    let (m, ps) = modules(&Strategy::Joint, 7);
    let grads = |c: f64| {
        let mut g = Graph::new(true);
        let o = joint_objective(&mut g, &ps, &m, &b, &Strategy::Joint).unwrap();
        let scaled = g.scale(o.main[1], c).unwrap();
        let l = g.add(o.main[0], scaled).unwrap();
        let mut p = ps.clone();
        p.zero_grad();
        g.backward(l, &mut p).unwrap();
        p
    };
    let (g1, g3) = (grads(1.0), grads(3.0));
    for (path, p) in g1.iter() {
        let q = g3.get(path).unwrap();
        match p.tag {
            ParamTag::Task(0) => assert_eq!(p.grad, q.grad, "{path}"),
            ParamTag::Task(1) => {
                for (a, b) in p.grad.iter().zip(&q.grad) {
                    assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{path}");
                }
            }
            _ => {}
        }
    }
}

#[test]
fn kendall_weighting_gradient_matches_finite_differences() {
    let mut rng = Pcg64::seed_from_u64(8);
    let b = tiny_batch(&mut rng);
    let (m, mut ps) = modules(&Strategy::Kendall, 9);
    ps.get_mut("kendall.seg.s").unwrap().value.data_mut()[0] = 0.3;
    ps.get_mut("kendall.depth.s").unwrap().value.data_mut()[0] = -0.2;
    let r = gradcheck::check(&ps, true, 1e-6, |p| p.starts_with("kendall."), |g, ps| {
        Ok(joint_objective(g, ps, &m, &b, &Strategy::Kendall)?.total)
    })
    .unwrap();
    assert_eq!(r.checked, 2);
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn strategy_names_round_trip() {
    for name in ["single-t1", "joint", "prior-t2", "ds-t1", "kendall", "auxi-t2", "auxi-both"] {
        assert_eq!(Strategy::parse(name, None).unwrap().name(), name);
    }
    assert!(Strategy::parse("auxi-nas", None).is_err());
    assert!(Strategy::parse("single-t0", None).is_err());
    assert!(Strategy::parse("triple", None).is_err());
    assert_eq!(Strategy::AuxiSingle(1).donor_task(2), Some(0));
    assert_eq!(Strategy::Prior(1).donor_task(2), Some(1));
}

#[test]
fn probe_is_seeded_and_validated() {
    let (_, mut ps) = modules(&Strategy::AuxiBoth, 10);
    let layers = vec!["enc.s1.conv.conv.weight".to_string(), "enc.s2.conv.conv.weight".to_string()];
    let p = GradProbe::new(&ps, &layers, 8, 3).unwrap();
    assert_eq!(p.probe(&ps).unwrap(), vec![0.0, 0.0]);
    for (_, q) in ps.iter_mut() {
        for (i, g) in q.grad.iter_mut().enumerate() {
            *g = (i as f64 * 0.37).sin();
        }
    }
    let again = GradProbe::new(&ps, &layers, 8, 3).unwrap();
    assert_eq!(p.probe(&ps).unwrap(), again.probe(&ps).unwrap());
    assert!(p.probe(&ps).unwrap().iter().all(|&v| v > 0.0));
    for bad in ["enc.s9.conv.conv.weight", "dec.seg.head.weight", "aux.seg.head.weight"] {
        assert!(matches!(GradProbe::new(&ps, &[bad.to_string()], 8, 3), Err(Error::Config(_))));
    }
}

fn tiny_train(iters: usize) -> TrainConfig {
    TrainConfig {
        iters,
        batch: 2,
        eval_every: 2,
        eval_batch: 4,
        probe_layers: vec!["enc.s1.conv.conv.weight".into()],
        probe_samples: 4,
        ..Default::default()
    }
}

#[test]
fn runs_follow_the_strategy_protocol() {
    let data = gen_synthetic(11, 12, SceneConfig { h: 8, w: 8, classes: 3 }).unwrap();
    let cfg = tiny_cfg();
    let train = tiny_train(3);
    let single = run_strategy(&Strategy::Single(0), &data, &cfg, &train, &RunOptions::default()).unwrap();
    assert_eq!(single.record.loss_columns, vec!["loss_seg"]);
    assert_eq!(single.record.rows.len(), 3);
    assert!(single.final_metrics.unwrap().rel.is_none());
    assert!(single.record.eval_csv().lines().nth(1).unwrap().ends_with(",,,"));

    // prior: shared layers come from the donor, the rest from the seed
    let opts = RunOptions {
        donor: Some(&single.params),
        ..Default::default()
    };
    let (_, ps, lr0) = init_run(&Strategy::Prior(0), &cfg, &train, &opts).unwrap();
    assert_eq!(lr0, train.lr0 / LR_DIVISOR);
    for (path, p) in single.params.iter().filter(|(_, p)| p.tag == ParamTag::Shared) {
        assert_eq!(ps.value(path).unwrap(), &p.value);
    }
    assert!(matches!(
        init_run(&Strategy::Prior(0), &cfg, &train, &RunOptions::default()),
        Err(Error::Config(_))
    ));
    let prior = run_strategy(&Strategy::Prior(0), &data, &cfg, &train, &opts).unwrap();
    assert!((prior.record.rows[0].lr - train.lr0 / 10.0).abs() < 1e-15);

    let joint = run_strategy(&Strategy::Joint, &data, &cfg, &train, &RunOptions::default()).unwrap();
    let both = run_strategy(&Strategy::AuxiBoth, &data, &cfg, &train, &RunOptions::default()).unwrap();
    assert_eq!(
        joint.params.paths().collect::<Vec<_>>(),
        both.params.paths().collect::<Vec<_>>()
    );
    assert_eq!(both.record.loss_columns, vec!["loss_seg", "loss_depth", "loss_aux_seg", "loss_aux_depth"]);
    assert_eq!(joint.record.run_csv().lines().next().unwrap(), "iter,lr,loss_total,loss_seg,loss_depth,probe_enc.s1.conv.conv.weight");
    assert_eq!(both.record.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![2, 3]);

    // the stripped network reproduces the reported metrics
    let m = evaluate(&both.model, &both.params, &data, "val", 4).unwrap();
    assert_eq!(Some(m), both.final_metrics);

    let again = run_strategy(&Strategy::AuxiBoth, &data, &cfg, &train, &RunOptions::default()).unwrap();
    assert_eq!(again.record, both.record);
}

#[test]
fn divergence_is_reported() {
    let data = gen_synthetic(12, 12, SceneConfig { h: 8, w: 8, classes: 3 }).unwrap();
    let train = TrainConfig {
        lr0: 1e8,
        ..tiny_train(20)
    };
    let out = run_strategy(&Strategy::Joint, &data, &tiny_cfg(), &train, &RunOptions::default()).unwrap();
    assert!(out.diverged);
    assert!(out.final_metrics.is_none());
    assert!(out.iters_done < 20);
}
