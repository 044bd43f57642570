use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ocdd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(dims: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(dims.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Forward and backward of `op` applied to fresh leaves.
fn fwd_bwd(inputs: &[Tensor<f32>], op: impl Fn(&mut Tape<f32>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = op(&mut tape, &vars);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
}

fn kernels(c: &mut Criterion) {
    let (o, l) = (7, 64);
    let mut g = c.benchmark_group("kernels");
    for d in [32, 128] {
        let x = randn(&[o, l, d], 1);
        let w = randn(&[d, d], 2);
        let b = randn(&[d], 3);
        g.bench_with_input(BenchmarkId::new("affine", d), &d, |bch, _| {
            bch.iter(|| fwd_bwd(&[x.clone(), w.clone(), b.clone()], |t, v| t.affine(v[0], v[1], Some(v[2])).unwrap()))
        });

        let k = randn(&[5, d, d], 4);
        g.bench_with_input(BenchmarkId::new("conv1d", d), &d, |bch, _| {
            bch.iter(|| fwd_bwd(&[x.clone(), k.clone(), b.clone()], |t, v| t.conv1d(v[0], v[1], v[2], 1).unwrap()))
        });

        let gamma = Tensor::ones(vec![d]);
        g.bench_with_input(BenchmarkId::new("group_norm", d), &d, |bch, _| {
            bch.iter(|| {
                fwd_bwd(&[x.clone(), gamma.clone(), b.clone()], |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5).unwrap())
            })
        });

        g.bench_with_input(BenchmarkId::new("attention", d), &d, |bch, _| {
            bch.iter(|| fwd_bwd(&[x.clone(), x.clone(), x.clone()], |t, v| t.attention(v[0], v[1], v[2], 4).unwrap()))
        });

        g.bench_with_input(BenchmarkId::new("mish", d), &d, |bch, _| bch.iter(|| fwd_bwd(&[x.clone()], |t, v| t.mish(v[0]))));
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}
criterion_main!(benches);
