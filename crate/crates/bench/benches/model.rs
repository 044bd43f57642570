use criterion::{criterion_group, criterion_main, Criterion};
use ocdd::acnet::Checkpoint;
use ocdd::ballworld::{make_template, simulate};
use ocdd::pipeline::{initial_state_conditions, sample_gradient, sample_trajectories, ModelDenoiser, TrainConfig};
use ocdd::schedule::{NoiseSchedule, ScheduleConfig};
use ocdd::{ModelConfig, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(c: &mut Criterion) {
    let rec = simulate(&make_template("three-balls").unwrap(), 3).unwrap();
    let cfg = TrainConfig::default();
    let ckpt = Checkpoint::init(ModelConfig::default(), cfg.schedule.clone(), 0).unwrap();
    let sched = NoiseSchedule::from_config(&cfg.schedule).unwrap();
    let cond_input = ocdd::pipeline::build_cond_input(&rec.x, &initial_state_conditions(&rec.x)).unwrap();

    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("forward O=7 L=64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = ckpt.params.bind(&mut tape, false);
            let x = tape.constant(rec.x.clone());
            let cv = tape.constant(cond_input.clone());
            ckpt.net.forward(&mut tape, &p, x, 100, Some(cv)).unwrap()
        })
    });
    g.bench_function("loss gradient O=7 L=64", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| sample_gradient(&ckpt, &sched, &cfg, &rec.x, &mut rng).unwrap())
    });

    let small = ScheduleConfig {
        steps: 16,
        ..ScheduleConfig::default()
    };
    let fast = Checkpoint::init(ModelConfig::default(), small, 0).unwrap();
    let den = ModelDenoiser::new(&fast).unwrap();
    let cond = initial_state_conditions(&rec.x);
    g.bench_function("sample 16 steps O=7 L=64", |b| {
        b.iter(|| sample_trajectories(&den, &rec.x, &cond, 0, true, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
