use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use super::*;
use crate::auxiliary::{available_locations, AuxCell, Genotype, LocationRule};
use crate::data::{gen_synthetic, SceneConfig};
use crate::error::Error;
use crate::layers::{AdaptorOp, AggOp};
use crate::mtl_net::{ModelConfig, TaskSpec, Variant};
use crate::tensor::{Graph, ParamSet};
use crate::train::{Adam, TrainConfig};

fn random_genotype(p: usize, t: usize, rule: LocationRule, rng: &mut Pcg64) -> Genotype {
    let mut cells = Vec::new();
    for ti in 0..t {
        for pi in 0..p {
            let locs = available_locations(p, ti, pi, rule);
            let mut pick = || locs[rng.random_range(0..locs.len())];
            let (in1, in2) = (pick(), pick());
            cells.push(AuxCell {
                in1,
                in2,
                op1: AdaptorOp::ALL[rng.random_range(0..6)],
                op2: AdaptorOp::ALL[rng.random_range(0..6)],
                agg: if rng.random_bool(0.5) { AggOp::Sum } else { AggOp::Concat },
            });
        }
    }
    Genotype::new(p, t, cells, rule).unwrap()
}

#[test]
fn codec_points() {
    assert_eq!(seq_len(4, 2), 40);
    let g = decode_tokens(&[0; 40], 4, 2).unwrap();
    for c in g.cells() {
        assert_eq!((c.in1, c.in2, c.op1, c.op2, c.agg), (0, 0, AdaptorOp::SepConv3x3, AdaptorOp::SepConv3x3, AggOp::Sum));
    }
    assert_eq!(encode_genotype(&g).unwrap(), vec![0; 40]);

    let mut seq = vec![0; 40];
    seq[0] = 4 + 3;
    assert!(matches!(decode_tokens(&seq, 4, 2), Err(Error::GenotypeInvalid(_))));
    assert!(matches!(decode_tokens(&[0; 39], 4, 2), Err(Error::Codec(_))));
    seq[0] = 0;
    seq[2] = 6;
    assert!(matches!(decode_tokens(&seq, 4, 2), Err(Error::Codec(_))));

    // cell 1 of task 2 reads cell 0 of task 1 and its own task's cell 0
    let mut seq = vec![0; 40];
    seq[25] = 4;
    seq[26] = 8;
    let g = decode_tokens(&seq, 4, 2).unwrap();
    assert_eq!((g.cells()[5].in1, g.cells()[5].in2), (4, 8));
    assert_eq!(encode_genotype(&g).unwrap(), seq);
    assert!(decode_tokens_with(&seq, 4, 2, LocationRule { cross_task_only: true }).is_err());
    assert!(encode_genotype_with(&g, LocationRule { cross_task_only: true }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]
    #[test]
    fn codec_round_trips(seed in any::<u64>(), p in 1usize..6, t in 1usize..4, strict in any::<bool>()) {
        let rule = LocationRule { cross_task_only: strict };
        let g = random_genotype(p, t, rule, &mut Pcg64::seed_from_u64(seed));
        let seq = encode_genotype_with(&g, rule).unwrap();
        prop_assert_eq!(seq.len(), seq_len(p, t));
        let back = decode_tokens_with(&seq, p, t, rule).unwrap();
        prop_assert_eq!(encode_genotype_with(&back, rule).unwrap(), seq);
        prop_assert_eq!(back, g);
    }
}

fn controller(p: usize, t: usize, rule: LocationRule, seed: u64) -> (Controller, ParamSet<f64>) {
    let mut ps = ParamSet::new();
    let c = Controller::new(p, t, rule, &mut ps, &mut Pcg64::seed_from_u64(seed)).unwrap();
    (c, ps)
}

#[test]
fn sampling_respects_availability() {
    for rule in [LocationRule::default(), LocationRule { cross_task_only: true }] {
        let (c, ps) = controller(4, 2, rule, 0);
        let mut rng = Pcg64::seed_from_u64(1);
        let mut agg = [0usize; 2];
        let mut n = 0;
        while n < 10_000 {
            for s in c.sample(&ps, &mut rng, 500).unwrap() {
                let g = decode_tokens_with(&s.tokens, 4, 2, rule).unwrap();
                agg[g.cells()[0].agg.index()] += 1;
                assert!(s.logps.iter().all(|l| l.is_finite() && *l <= 0.0));
                n += 1;
            }
        }
        let frac = agg[0] as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }
}

#[test]
fn masked_distributions_are_normalised() {
    let (c, ps) = controller(3, 2, LocationRule::default(), 4);
    let mut rng = Pcg64::seed_from_u64(5);
    let s = c.sample(&ps, &mut rng, 1).unwrap().remove(0);
    for pos in 0..c.seq_len() {
        let probs = c.next_distribution(&ps, &s.tokens[..pos]).unwrap();
        let mut total = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            if c.allowed(pos, k) {
                total += p;
            } else {
                assert_eq!(p, 0.0);
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
        assert!((probs[s.tokens[pos]].ln() - s.logps[pos]).abs() < 1e-9);
    }
}

#[test]
fn sampling_is_deterministic() {
    let (c, ps) = controller(4, 2, LocationRule::default(), 9);
    let a = c.sample(&ps, &mut Pcg64::seed_from_u64(3), 8).unwrap();
    let b = c.sample(&ps, &mut Pcg64::seed_from_u64(3), 8).unwrap();
    assert_eq!(a, b);
    let (c2, ps2) = controller(4, 2, LocationRule::default(), 9);
    assert_eq!(c2.sample(&ps2, &mut Pcg64::seed_from_u64(3), 8).unwrap(), a);
}

#[test]
fn reward_values() {
    let (r, d) = compute_reward(&[("miou", 0.25), ("pixacc", 0.64)]).unwrap();
    assert!((r - 0.4).abs() < 1e-12 && !d);
    assert_eq!(compute_reward(&[("miou", 1.0), ("rel", 0.0)]).unwrap(), (1.0, false));
    assert_eq!(compute_reward(&[("miou", f64::NAN), ("rel", 0.1)]).unwrap(), (0.0, true));
    assert!(matches!(compute_reward(&[]), Err(Error::Contract(_))));
    assert!(matches!(compute_reward(&[("bleu", 0.1)]), Err(Error::Contract(_))));
    let (r, _) = compute_reward(&[("angle", 180.0)]).unwrap();
    assert!((r - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn reward_is_bounded_and_monotone(
        acc in 0.0f64..=1.0,
        rel in 0.0f64..5.0,
        angle in 0.0f64..180.0,
        bump in 1e-6f64..10.0,
        which in 0usize..2,
    ) {
        let base = [("miou", acc), ("rel", rel), ("angle", angle)];
        let (r, d) = compute_reward(&base).unwrap();
        prop_assert!(!d && (0.0..=1.0).contains(&r));
        let mut worse = base;
        worse[1 + which].1 += bump;
        let (r2, _) = compute_reward(&worse).unwrap();
        if acc > 0.0 {
            prop_assert!(r2 < r);
        } else {
            prop_assert_eq!(r2, 0.0);
        }
    }
}

fn trajectories(c: &Controller, ps: &ParamSet<f64>, rng: &mut Pcg64, b: usize) -> Vec<Trajectory> {
    c.sample(ps, rng, b)
        .unwrap()
        .into_iter()
        .map(|s| Trajectory {
            tokens: s.tokens,
            logps: s.logps,
            reward: rng.random_range(0.0..1.0),
        })
        .collect()
}

#[test]
fn zero_advantage_leaves_the_policy_unchanged() {
    let (c, mut ps) = controller(2, 2, LocationRule::default(), 1);
    let mut rng = Pcg64::seed_from_u64(2);
    let mut batch = trajectories(&c, &ps, &mut rng, 4);
    for t in &mut batch {
        t.reward = 0.3;
    }
    let before = ps.clone();
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..Default::default()
    };
    let mut base = Baseline { value: Some(0.3) };
    ppo_update(&c, &mut ps, &mut Adam::new(cfg.lr), &batch, &mut base, &cfg).unwrap();
    for (path, p) in before.iter() {
        assert_eq!(ps.value(path).unwrap(), &p.value, "{path}");
    }
    assert_eq!(base.value, Some(0.3));

    let mut empty = Baseline::default();
    assert!(matches!(
        ppo_update(&c, &mut ps, &mut Adam::new(1e-3), &[], &mut empty, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn clipped_ratio_passes_no_gradient() {
    let (c, mut ps) = controller(2, 1, LocationRule::default(), 3);
    let mut rng = Pcg64::seed_from_u64(4);
    let mut batch = trajectories(&c, &ps, &mut rng, 3);
    // old policy much less likely: r = e > 1 + clip
    for t in &mut batch {
        for l in &mut t.logps {
            *l -= 1.0;
        }
    }
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..Default::default()
    };
    let mut g = Graph::new(true);
    let loss = surrogate(&mut g, &c, &ps, &batch, &[1.0, 0.5, 2.0], &cfg).unwrap();
    ps.zero_grad();
    g.backward(loss, &mut ps).unwrap();
    assert!(ps.iter().all(|(_, p)| p.grad.iter().all(|&v| v == 0.0)));

    // unclipped, the same batch does move the policy
    let mut g = Graph::new(true);
    let loss = surrogate(&mut g, &c, &ps, &batch, &[-1.0, -0.5, -2.0], &cfg).unwrap();
    g.backward(loss, &mut ps).unwrap();
    assert!(ps.iter().any(|(_, p)| p.grad.iter().any(|&v| v != 0.0)));
}

#[test]
fn ppo_epochs_decrease_the_surrogate() {
    let cfg = PpoConfig::default();
    let trials = 30;
    let mut improved = 0;
    for trial in 0..trials {
        let (c, mut ps) = controller(2, 2, LocationRule::default(), 100 + trial);
        let mut rng = Pcg64::seed_from_u64(200 + trial);
        let batch = trajectories(&c, &ps, &mut rng, 16);
        let base = Baseline::default();
        let adv = advantages(&batch, &base);
        let losses = ppo_update(&c, &mut ps, &mut Adam::new(cfg.lr), &batch, &mut base.clone(), &cfg).unwrap();
        let mut g = Graph::new(false);
        let after = surrogate(&mut g, &c, &ps, &batch, &adv, &cfg).unwrap();
        if g.value(after).item() < losses[0] {
            improved += 1;
        }
    }
    assert!(improved * 10 >= trials * 9, "{improved}/{trials}");
}

#[test]
fn baseline_is_an_ema() {
    let mut b = Baseline::default();
    b.update(&[0.2, 0.4], 0.95);
    assert!((b.value.unwrap() - 0.3).abs() < 1e-15);
    b.update(&[1.0], 0.95);
    assert!((b.value.unwrap() - (0.95 * 0.3 + 0.05)).abs() < 1e-15);
}

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::new(Variant::Baseline, vec![TaskSpec::segmentation(3), TaskSpec::depth()], (8, 8));
    cfg.stage_channels = vec![4, 16];
    cfg.stem_channels = 4;
    cfg.decoder_channels = 8;
    cfg
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        batch: 2,
        eval_batch: 4,
        ..Default::default()
    }
}

#[test]
fn candidates_are_scored_on_the_meta_splits() {
    let data = gen_synthetic(21, 12, SceneConfig { h: 8, w: 8, classes: 3 }).unwrap();
    let model = tiny_cfg();
    let train = tiny_train();
    let ctx = EvalContext {
        data: &data,
        model: &model,
        train: &train,
        short_iters: 3,
    };
    // skip on the 4-channel tap cannot be built
    let mut seq = vec![0; seq_len(2, 2)];
    seq[2] = AdaptorOp::SkipConnect.index();
    let bad = decode_tokens(&seq, 2, 2).unwrap();
    let r = evaluate_candidate(&bad, &ctx, 0, 1).unwrap();
    assert_eq!((r.reward, r.budget_used, r.diverged), (0.0, 0, false));

    let g = decode_tokens(&vec![1; seq_len(2, 2)], 2, 2).unwrap();
    let a = evaluate_candidate(&g, &ctx, 3, 7).unwrap();
    let b = evaluate_candidate(&g, &ctx, 3, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.budget_used, 3);
    assert!(a.reward > 0.0 && a.reward <= 1.0);
    assert!(a.metrics.miou.is_some() && a.metrics.rel.is_some());
    let line: serde_json::Value = serde_json::from_str(&a.to_json_line()).unwrap();
    assert_eq!(line["candidate_id"], 3);
    assert_eq!(line["seed"], 7);
    assert_eq!(line["wall_ms"], 0);
    assert_eq!(line["genotype"]["P"], 2);
    assert!(a.to_json_line().contains(&format!("\"genotype\":{},", g.to_json())));
    assert!(line["metrics"]["miou"].is_number());
}

#[test]
fn search_loop_bookkeeping() {
    let data = gen_synthetic(22, 12, SceneConfig { h: 8, w: 8, classes: 3 }).unwrap();
    let model = tiny_cfg();
    let train = tiny_train();
    let ctx = EvalContext {
        data: &data,
        model: &model,
        train: &train,
        short_iters: 2,
    };
    let empty = SearchConfig {
        candidates: 0,
        ..Default::default()
    };
    let out = search_loop(&empty, &ctx, 1, |_| Ok(())).unwrap();
    assert!(out.log.is_empty() && out.best.is_none());

    let cfg = SearchConfig {
        candidates: 5,
        batch: 2,
        seed: 3,
        ..Default::default()
    };
    let mut lines = Vec::new();
    let out = search_loop(&cfg, &ctx, 1, |r| {
        lines.push(r.to_json_line());
        Ok(())
    })
    .unwrap();
    assert_eq!(out.log.len(), 5);
    assert_eq!(lines.len(), 5);
    assert_eq!(out.opstats.len(), 3);
    assert_eq!(out.log.iter().map(|r| r.candidate_id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    let max = out.log.iter().map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
    let (best, reward) = out.best.clone().unwrap();
    assert_eq!(reward, max);
    let first = out.log.iter().find(|r| r.reward == max).unwrap();
    assert_eq!(first.genotype.as_ref(), Some(&best));
    let csv = opstats_csv(&out.opstats);
    assert!(csv.starts_with("update,sep_conv3x3,"));
    assert_eq!(csv.lines().count(), 4);

    let mut again = Vec::new();
    let out2 = search_loop(&cfg, &ctx, 2, |r| {
        again.push(r.to_json_line());
        Ok(())
    })
    .unwrap();
    assert_eq!(again, lines);
    assert_eq!(out2.best, out.best);
}
