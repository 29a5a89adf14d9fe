use extravar_core::attention::CalibrationPolicy;
use extravar_core::model::{remap_rule, stage_schedule_for, GenerationPlan, MapSelector, ModelConfig, Sequential, ToyModel};
use extravar_core::probe::{apply_intervention, Intervention, InterventionKind};
use extravar_core::reference::capture_reference;
use extravar_core::rope::{stage_remap, Band, RemapRule, StageSchedule};

fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        head_dim: 16,
        vocab_size: 16,
        total_steps: 6,
        train_side: 8,
        high_band_size: 1,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn plan_at(model: &ToyModel, target: usize, remap: &str, seed: u64) -> GenerationPlan {
    let cfg = model.config();
    let mut plan = GenerationPlan::native(cfg, seed);
    plan.target_side = target;
    plan.remap = remap_rule(cfg, remap, target, plan.schedule).unwrap();
    plan
}

#[test]
fn unit_ratio_stage_aware_equals_identity_without_nope() {
    let model = ToyModel::new(small()).unwrap();
    let mut base = plan_at(&model, 8, "none", 5);
    base.retain_logits = true;
    let mut sa = plan_at(&model, 8, "stage-aware", 5);
    sa.retain_logits = true;
    if let RemapRule::StageAware { very_low_nope, .. } = &mut sa.remap {
        *very_low_nope = false;
    }
    let a = model.generate(&base, &Sequential).unwrap();
    let b = model.generate(&sa, &Sequential).unwrap();
    assert_eq!(a.token_maps, b.token_maps);
    for (x, y) in a.trace.steps.iter().zip(&b.trace.steps) {
        assert_eq!(x.frequencies, y.frequencies);
        assert_eq!(x.logits, y.logits);
    }
}

#[test]
fn unit_ratio_with_nope_only_touches_very_low_pairs() {
    let model = ToyModel::new(small()).unwrap();
    let base = model.generate(&plan_at(&model, 8, "none", 5), &Sequential).unwrap();
    let sa = model.generate(&plan_at(&model, 8, "stage-aware", 5), &Sequential).unwrap();
    let tables = model.tables();
    let mut very_low = 0;
    for (x, y) in base.trace.steps.iter().zip(&sa.trace.steps) {
        for (axis, t) in tables.iter().enumerate() {
            for p in &t.pairs {
                let (u, v) = (x.frequencies[axis][p.index - 1], y.frequencies[axis][p.index - 1]);
                if p.band == Some(Band::VeryLow) {
                    very_low += 1;
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(u, v);
                }
            }
        }
    }
    assert!(very_low > 0);
}

#[test]
fn generation_is_deterministic() {
    let model = ToyModel::new(small()).unwrap();
    let plan = plan_at(&model, 16, "stage-aware", 9);
    let a = model.generate(&plan, &Sequential).unwrap();
    let b = model.generate(&plan, &Sequential).unwrap();
    assert_eq!(a, b);
    let other = model.generate(&plan_at(&model, 16, "stage-aware", 10), &Sequential).unwrap();
    assert_ne!(a.token_maps, other.token_maps);
}

#[test]
fn trace_has_k_steps_with_schedule_sides() {
    let model = ToyModel::new(small()).unwrap();
    let run = model.generate(&plan_at(&model, 16, "pi", 1), &Sequential).unwrap();
    let sides = model.config().schedule_for(16).unwrap();
    assert_eq!(run.trace.steps.len(), 6);
    for ((step, map), side) in run.trace.steps.iter().zip(&run.token_maps).zip(sides) {
        assert_eq!(step.side, side);
        assert_eq!((map.height, map.width), (side, side));
        assert!(map.tokens.iter().all(|&t| t < 16));
        assert_eq!(step.heads.len(), 8);
        assert!(step.heads.iter().all(|h| h.alpha == 1.0));
    }
}

#[test]
fn capture_has_one_entry_per_head_and_step() {
    let model = ToyModel::new(small()).unwrap();
    let store = capture_reference(&model, 7, 1, &Sequential).unwrap();
    assert_eq!(store.len(), 2 * 4 * 6);
    assert!(store.iter().all(|(_, &h)| (0.0..=1.0).contains(&h)));
    assert_eq!(store, capture_reference(&model, 7, 1, &Sequential).unwrap());
    assert_eq!(store.metadata.config_hash, model.config().config_hash());

    let tiny = ToyModel::new(ModelConfig {
        layers: 1,
        heads: 1,
        ..small()
    })
    .unwrap();
    assert_eq!(capture_reference(&tiny, 7, 1, &Sequential).unwrap().len(), 6);
}

#[test]
fn averaged_capture_is_the_mean_of_single_runs() {
    let model = ToyModel::new(small()).unwrap();
    let avg = capture_reference(&model, 3, 3, &Sequential).unwrap();
    let runs: Vec<_> = (0..3)
        .map(|i| {
            let plan = GenerationPlan::native(model.config(), extravar_core::reference::sample_seed(3, i));
            model.generate(&plan, &Sequential).unwrap()
        })
        .collect();
    for (&(l, h, k), &v) in avg.iter() {
        let sum: f64 = runs
            .iter()
            .map(|r| {
                r.trace.steps[k - 1]
                    .heads
                    .iter()
                    .find(|x| x.layer == l && x.head == h)
                    .unwrap()
                    .entropy
            })
            .sum();
        assert!((v - sum / 3.0).abs() < 1e-15);
    }
}

#[test]
fn calibrated_alphas_respect_the_gate() {
    let cfg = ModelConfig {
        head_dim: 32,
        ..small()
    };
    let model = ToyModel::new(cfg).unwrap();
    let store = capture_reference(&model, 2, 1, &Sequential).unwrap();
    let mut plan = plan_at(&model, 16, "stage-aware", 2);
    let policy = CalibrationPolicy {
        active_after: plan.schedule.local_end,
        ..CalibrationPolicy::default()
    };
    plan.calibration = Some(policy);
    plan.reference = Some(store);
    let run = model.generate(&plan, &Sequential).unwrap();
    assert!(run.trace.warnings.is_empty());
    let mut changed = 0;
    for step in &run.trace.steps {
        for h in &step.heads {
            let gate = step.step > policy.active_after
                && h.reference.is_some_and(|r| r < policy.tau_h)
                && h.variance >= policy.epsilon;
            if h.alpha != 1.0 {
                changed += 1;
                assert!(gate, "step {} head {:?}", step.step, h);
                assert!((policy.alpha_min..=policy.alpha_max).contains(&h.alpha));
            }
            if step.step <= policy.active_after {
                assert_eq!(h.alpha, 1.0);
            }
        }
    }
    // the sharp heads (gain 8) fall below the entropy threshold
    assert!(changed > 0);
}

#[test]
fn foreign_reference_warns_once() {
    let model = ToyModel::new(small()).unwrap();
    let store = capture_reference(&model, 2, 1, &Sequential).unwrap();
    let other = ToyModel::new(ModelConfig {
        train_side: 9,
        ..small()
    })
    .unwrap();
    let mut plan = plan_at(&other, 18, "stage-aware", 2);
    plan.calibration = Some(CalibrationPolicy {
        active_after: plan.schedule.local_end,
        ..CalibrationPolicy::default()
    });
    plan.reference = Some(store);
    let run = other.generate(&plan, &Sequential).unwrap();
    assert_eq!(run.trace.warnings.len(), 1);
    assert!(run.trace.warnings[0].contains("train side 8"));
}

#[test]
fn step_frequencies_match_stage_remap() {
    let model = ToyModel::new(small()).unwrap();
    let plan = plan_at(&model, 16, "stage-aware", 0);
    let run = model.generate(&plan, &Sequential).unwrap();
    for step in &run.trace.steps {
        for (axis, t) in model.tables().iter().enumerate() {
            assert_eq!(step.frequencies[axis], stage_remap(t, step.step, &plan.schedule, 2.0).unwrap());
        }
    }
}

#[test]
fn very_low_nope_probe_is_a_no_op_under_stage_aware() {
    let model = ToyModel::new(small()).unwrap();
    let plan = plan_at(&model, 16, "stage-aware", 4);
    let iv = Intervention {
        kind: InterventionKind::NopeSubstitute,
        band: Band::VeryLow,
        first_step: 1,
        last_step: 6,
    };
    let probed = apply_intervention(&plan, iv, model.config()).unwrap();
    let a = model.generate(&plan, &Sequential).unwrap();
    let b = model.generate(&probed, &Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn probes_leave_other_pairs_and_steps_alone() {
    let cfg = ModelConfig {
        head_dim: 32,
        ..small()
    };
    let model = ToyModel::new(cfg).unwrap();
    let plan = plan_at(&model, 16, "stage-aware", 4);
    let base = model.generate(&plan, &Sequential).unwrap();
    for kind in [
        InterventionKind::NopeSubstitute,
        InterventionKind::ForceWavelength(8.0 / 6.0),
        InterventionKind::ZeroQkFeatures,
    ] {
        for band in Band::ALL {
            let iv = Intervention {
                kind,
                band,
                first_step: 3,
                last_step: 5,
            };
            let Ok(probed) = apply_intervention(&plan, iv, model.config()) else {
                continue;
            };
            let run = model.generate(&probed, &Sequential).unwrap();
            for (x, y) in base.trace.steps.iter().zip(&run.trace.steps) {
                for (axis, t) in model.tables().iter().enumerate() {
                    for p in &t.pairs {
                        let j = p.index - 1;
                        let touched = iv.covers(x.step) && p.band == Some(band) && kind != InterventionKind::ZeroQkFeatures;
                        if !touched {
                            assert_eq!(x.frequencies[axis][j].to_bits(), y.frequencies[axis][j].to_bits());
                        } else if let InterventionKind::ForceWavelength(t) = kind {
                            assert_eq!(y.frequencies[axis][j], 2.0 * std::f64::consts::PI / t);
                        }
                    }
                }
            }
            // nothing before the range can change at all
            assert_eq!(base.trace.steps[..2], run.trace.steps[..2]);
        }
    }
}

#[test]
fn empty_band_is_rejected() {
    // d=16 axial, L=8, m=1: every non-high pair has T > 8, so Mid is empty
    let model = ToyModel::new(small()).unwrap();
    let counts = model.tables()[0].band_counts();
    assert_eq!(counts[Band::Mid.ordinal()], 0);
    let plan = GenerationPlan::native(model.config(), 0);
    let iv = Intervention {
        kind: InterventionKind::ForceWavelength(2.0),
        band: Band::Mid,
        first_step: 1,
        last_step: 2,
    };
    assert!(apply_intervention(&plan, iv, model.config()).is_err());
}

#[test]
fn retained_maps_are_row_stochastic() {
    let model = ToyModel::new(small()).unwrap();
    let mut plan = plan_at(&model, 16, "yarn", 1);
    plan.retain_maps = Some(MapSelector {
        layer: Some(1),
        head: None,
        step: Some(4),
    });
    let run = model.generate(&plan, &Sequential).unwrap();
    assert_eq!(run.trace.maps.len(), 4);
    let map = run.trace.attention_map(1, 2, 4).unwrap();
    let sides = model.config().schedule_for(16).unwrap();
    let keys: usize = sides[..4].iter().map(|s| s * s).sum();
    assert_eq!((map.rows(), map.cols()), (sides[3] * sides[3], keys));
    for row in map.iter_rows() {
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(run.trace.attention_map(0, 0, 4).is_err());
}

#[test]
fn scaled_stage_boundaries() {
    assert_eq!(stage_schedule_for(13), StageSchedule::default());
    let s = stage_schedule_for(6);
    assert!(s.validate().is_ok());
    assert_eq!((s.layout_end, s.local_end), (3, 4));
}
