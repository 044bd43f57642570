use ocdd::ballworld::feature;
use ocdd::pipeline::*;
use ocdd::schedule::{NoiseSchedule, ScheduleConfig};
use ocdd::{ArchVariant, ConditionSet, Error, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        schedule: ScheduleConfig {
            steps: 32,
            ..ScheduleConfig::default()
        },
        batch_size: 2,
        lr: 1e-3,
        max_steps: 2,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_roundtrip_and_counts() {
    let data = gen_dataset(&["drop-two", "three-balls"], 3, false, 5, 16).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data.meta.objects, vec![6, 7]);
    assert_eq!(data.buckets().len(), 2);
    for r in &data.records {
        assert_eq!(&r.x.dims()[1..], &[16, 8]);
    }
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn dataset_generation_is_seeded() {
    let a = gen_dataset(&["ball-on-bar"], 2, true, 11, 8).unwrap();
    let b = gen_dataset(&["ball-on-bar"], 2, true, 11, 8).unwrap();
    let c = gen_dataset(&["ball-on-bar"], 2, true, 12, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.records[0].x, c.records[0].x);
    assert!(a.records.iter().all(|r| r.offset.iter().all(|v| v.abs() <= 1.0)));
}

#[test]
fn unknown_template_is_usage_error() {
    assert!(matches!(gen_dataset(&["nope"], 1, false, 0, 8), Err(Error::Usage(_))));
}

#[test]
fn offsets_are_uniform() {
    // Kolmogorov-Smirnov distance against U(-1, 1) at 10^4 draws
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    for axis in 0..2 {
        let mut v: Vec<f64> = (0..n).map(|_| draw_offset(&mut rng, 1.0)[axis]).collect();
        v.sort_by(f64::total_cmp);
        let d = v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 1.0) / 2.0;
                (cdf - i as f64 / n as f64).abs().max((cdf - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value
        assert!(d < 1.63 / (n as f64).sqrt(), "KS distance {d}");
        assert!(v[0] >= -1.0 && v[n - 1] <= 1.0);
    }
}

#[test]
fn training_conditions_follow_probabilities() {
    let data = gen_dataset(&["three-balls"], 1, false, 2, 16).unwrap();
    let x0 = &data.records[0].x;
    let movable: Vec<usize> = (0..x0.dims()[0]).filter(|&o| x0.at(&[o, 0, feature::MOVABLE]) > 0.5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let (none, input) = sample_training_conditions(x0, [1.0, 0.0, 0.0], &mut rng).unwrap();
    assert!(none.is_empty());
    assert_eq!(input.dims(), &[x0.dims()[0], 16, COND_INPUT_DIM]);
    assert!((0..x0.dims()[0]).all(|o| (0..16).all(|l| input.at(&[o, l, 3]) == 0.0)));

    let (two, input) = sample_training_conditions(x0, [0.0, 0.0, 1.0], &mut rng).unwrap();
    assert_eq!(two.len(), 2 * movable.len());
    for (o, cs) in two.by_object() {
        assert!(movable.contains(&o));
        assert_eq!(cs.len(), 2);
        assert_ne!(cs[0].l, cs[1].l);
        for c in cs {
            for f in 0..3 {
                assert_eq!(c.values[f], x0.at(&[o, c.l, f]));
                assert_eq!(input.at(&[o, c.l, f]), c.values[f]);
            }
            assert_eq!(input.at(&[o, c.l, 3]), 1.0);
        }
    }

    // empirical count frequencies
    let probs = [0.3, 0.4, 0.3];
    let mut hist = [0usize; 3];
    for _ in 0..2000 {
        let (c, _) = sample_training_conditions(x0, probs, &mut rng).unwrap();
        for &o in &movable {
            hist[c.conditions.iter().filter(|c| c.o == o).count()] += 1;
        }
    }
    let total = (2000 * movable.len()) as f64;
    for k in 0..3 {
        assert!((hist[k] as f64 / total - probs[k]).abs() < 0.03, "{hist:?}");
    }

    assert!(matches!(sample_training_conditions(x0, [0.5, 0.6, 0.0], &mut rng), Err(Error::Config(_))));
}

#[test]
fn initial_state_conditions_pin_step_zero() {
    let data = gen_dataset(&["funnel"], 1, false, 4, 8).unwrap();
    let x0 = &data.records[0].x;
    let cond = initial_state_conditions(x0);
    let movable = (0..x0.dims()[0]).filter(|&o| x0.at(&[o, 0, feature::MOVABLE]) > 0.5).count();
    assert_eq!(cond.len(), movable);
    for c in &cond.conditions {
        assert_eq!(c.l, 0);
        assert_eq!(c.values, [x0.at(&[c.o, 0, 0]), x0.at(&[c.o, 0, 1]), x0.at(&[c.o, 0, 2])]);
    }
}

#[test]
fn training_is_deterministic() {
    let data = gen_dataset(&["drop-two"], 2, false, 1, 8).unwrap();
    let run = |seed| {
        let mut cfg = tiny_cfg();
        cfg.seed = seed;
        let (ckpt, logs) = train(cfg, &data, None).unwrap();
        (ckpt.params.tensors().to_vec(), logs)
    };
    let (a, la) = run(7);
    let (b, lb) = run(7);
    let (c, _) = run(8);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(a, c);
    assert_eq!(la.len(), 2);
}

#[test]
fn soft_only_training_has_no_shift_penalty() {
    let data = gen_dataset(&["drop-two"], 2, false, 1, 8).unwrap();
    let mut cfg = tiny_cfg();
    cfg.hard_conditioning = false;
    cfg.cond_probs = [0.0, 0.0, 1.0];
    let (_, logs) = train(cfg.clone(), &data, None).unwrap();
    assert!(logs.iter().all(|l| l.term1 == 0.0 && l.loss == l.term2));
    cfg.hard_conditioning = true;
    let (_, logs) = train(cfg, &data, None).unwrap();
    assert!(logs.iter().all(|l| l.term1 > 0.0));
}

#[test]
fn training_writes_checkpoint_and_loss_log() {
    let data = gen_dataset(&["drop-two"], 2, false, 1, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut cfg = tiny_cfg();
    cfg.model.arch = ArchVariant::NoMlp;
    let (ckpt, _) = train(cfg, &data, Some(&path)).unwrap();
    let back = ocdd::acnet::Checkpoint::load(&path).unwrap();
    assert_eq!(back.header, ckpt.header);
    assert_eq!(back.header.arch, ArchVariant::NoMlp);
    assert_eq!(back.params.tensors(), ckpt.params.tensors());
    let csv = std::fs::read_to_string(loss_log_path(&path)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,term1,term2");
    assert_eq!(lines.len(), 3);
}

#[test]
fn cnn_only_training_fixes_object_count() {
    let data = gen_dataset(&["drop-two"], 1, false, 1, 8).unwrap();
    let mut cfg = tiny_cfg();
    cfg.model.arch = ArchVariant::CnnOnly;
    let t = Trainer::new(cfg.clone(), &data).unwrap();
    assert_eq!(t.ckpt.header.model.cnn_objects, Some(6));
    let mixed = gen_dataset(&["drop-two", "three-balls"], 1, false, 1, 8).unwrap();
    assert!(matches!(Trainer::new(cfg, &mixed), Err(Error::Config(_))));
}

#[test]
fn initial_loss_matches_closed_form() {
    // At init v_hat = 0, so x0_hat = sqrt(ab) x_t and the per-entry error is
    // (ab - 1) x0 + sqrt(ab (1 - ab)) eps.
    let data = gen_dataset(&["three-balls"], 1, false, 3, 16).unwrap();
    let x0 = &data.records[0].x;
    let mut cfg = tiny_cfg();
    cfg.hard_conditioning = false;
    let trainer = Trainer::new(cfg.clone(), &data).unwrap();
    let sched = NoiseSchedule::from_config(&cfg.schedule).unwrap();
    let mask = ocdd::DenoiseMask::from_trajectory(x0).unwrap();
    let m2 = (0..x0.len()).filter(|&i| mask.is_set(i)).map(|i| (x0.data()[i] as f64).powi(2)).sum::<f64>()
        / mask.count() as f64;
    let nt = sched.steps() as f64;
    let expected: f64 = (1..=sched.steps())
        .map(|t| {
            let ab = sched.alpha_bar(t);
            (1.0 - ab).powi(2) * m2 + ab * (1.0 - ab)
        })
        .sum::<f64>()
        / nt;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 600;
    let vals: Vec<f64> = (0..n)
        .map(|_| sample_gradient(&trainer.ckpt, &sched, &cfg, x0, &mut rng).unwrap().log.term2)
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - expected).abs() < 4.0 * se, "mean {mean} expected {expected} se {se}");
}

#[test]
fn oracle_sampling_reconstructs() {
    let data = gen_dataset(&["three-balls", "funnel"], 2, false, 9, 32).unwrap();
    let sched = ScheduleConfig::default();
    let report = evaluate_rmse(Predictor::Oracle(&sched), &data.records, &EvalOptions::default()).unwrap();
    assert_eq!(report.per_traj.len(), 4);
    assert!(report.per_traj.iter().all(|&r| r < 0.01), "{:?}", report.per_traj);
    assert_eq!(report.per_template.len(), 2);
}

#[test]
fn sampler_keeps_unmasked_entries_and_conditions() {
    let data = gen_dataset(&["ball-on-bar"], 1, false, 2, 16).unwrap();
    let x0 = &data.records[0].x;
    let ckpt = ocdd::acnet::Checkpoint::init(
        ModelConfig::tiny(),
        ScheduleConfig {
            steps: 16,
            ..ScheduleConfig::default()
        },
        1,
    )
    .unwrap();
    let den = ModelDenoiser::new(&ckpt).unwrap();
    let mut cond = initial_state_conditions(x0);
    cond.push(cond.conditions[0].o, 9, [0.4, 0.6, 0.0]);
    let out = sample_trajectories(&den, x0, &cond, 3, true, None).unwrap();
    let mask = ocdd::DenoiseMask::from_trajectory(x0).unwrap();
    for i in 0..x0.len() {
        if !mask.is_set(i) {
            assert_eq!(out.data()[i].to_bits(), x0.data()[i].to_bits());
        }
    }
    assert!(max_condition_violation(&out, &cond) <= 1e-5);
    let again = sample_trajectories(&den, x0, &cond, 3, true, None).unwrap();
    assert_eq!(out, again);
    let other = sample_trajectories(&den, x0, &cond, 4, true, None).unwrap();
    assert_ne!(out, other);
}

#[test]
fn sampler_snapshots_every_step() {
    let data = gen_dataset(&["drop-two"], 1, false, 2, 8).unwrap();
    let x0 = &data.records[0].x;
    let sched = ScheduleConfig {
        steps: 12,
        ..ScheduleConfig::default()
    };
    let den = OracleDenoiser::new(x0, &sched).unwrap();
    let mut seen = Vec::new();
    let mut f = |t: usize, x: &Tensor<f32>| {
        assert_eq!(x, x0);
        seen.push(t);
    };
    let out = sample_trajectories(&den, x0, &ConditionSet::empty(), 0, false, Some(&mut f)).unwrap();
    assert_eq!(seen, (1..=12).rev().collect::<Vec<_>>());
    assert_eq!(&out, x0);
}

#[test]
fn eval_is_invariant_to_object_order() {
    let data = gen_dataset(&["three-balls"], 1, false, 6, 16).unwrap();
    let rec = &data.records[0];
    let ckpt = ocdd::acnet::Checkpoint::init(
        ModelConfig::tiny(),
        ScheduleConfig {
            steps: 16,
            ..ScheduleConfig::default()
        },
        2,
    )
    .unwrap();
    let (o_n, l_n, d) = (rec.x.dims()[0], rec.x.dims()[1], rec.x.dims()[2]);
    let perm: Vec<usize> = (0..o_n).rev().collect();
    let mut permuted = rec.clone();
    let mut data_p = vec![0.0f32; rec.x.len()];
    for (new, &old) in perm.iter().enumerate() {
        data_p[new * l_n * d..(new + 1) * l_n * d].copy_from_slice(&rec.x.data()[old * l_n * d..(old + 1) * l_n * d]);
    }
    permuted.x = Tensor::new(vec![o_n, l_n, d], data_p).unwrap();
    permuted.colors = perm.iter().map(|&o| rec.colors[o].clone()).collect();
    let opts = EvalOptions::default();
    let a = evaluate_rmse(Predictor::Model(&ckpt), std::slice::from_ref(rec), &opts).unwrap();
    let b = evaluate_rmse(Predictor::Model(&ckpt), &[permuted], &opts).unwrap();
    assert!((a.per_traj[0] - b.per_traj[0]).abs() < 1e-4, "{} vs {}", a.per_traj[0], b.per_traj[0]);
}

#[test]
fn sweeps_produce_one_row_per_setting() {
    let sched = ScheduleConfig {
        steps: 8,
        ..ScheduleConfig::default()
    };
    let opts = EvalOptions::default();
    let rows = sweep_lengths(Predictor::Oracle(&sched), "drop-two", &[8, 16, 24], 2, &opts).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].setting, "L=16");
    let rows = sweep_objects(Predictor::Oracle(&sched), &["drop-two", "funnel"], 8, 2, &opts).unwrap();
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("setting,count,median,mean\n"));
    assert!(csv.contains("(O=9)"));

    let ckpt = ocdd::acnet::Checkpoint::init(ModelConfig::tiny(), sched, 0).unwrap();
    let err = sweep_lengths(Predictor::Model(&ckpt), "drop-two", &[9], 1, &opts).unwrap_err();
    assert!(err.to_string().contains("multiple of 2"));
}

#[test]
fn masked_rmse_ignores_statics() {
    let data = gen_dataset(&["drop-two"], 1, false, 2, 8).unwrap();
    let x0 = &data.records[0].x;
    let mut y = x0.clone();
    let mask = ocdd::DenoiseMask::from_trajectory(x0).unwrap();
    let mut k = 0;
    for i in 0..y.len() {
        if mask.is_set(i) {
            y.data_mut()[i] += if k % 2 == 0 { 0.1 } else { -0.1 };
            k += 1;
        } else {
            y.data_mut()[i] += 5.0;
        }
    }
    assert!((masked_rmse(&y, x0).unwrap() - 0.1).abs() < 1e-6);
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}
