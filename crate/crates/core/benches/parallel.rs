use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use motion_cvae::cvae::{ElboOptions, LimbCvae, ModelSet};
use motion_cvae::exec::Execution;
use motion_cvae::nn::Rng;
use motion_cvae::predictor::evaluate_mpe;
use motion_cvae::skeleton::{self, Limb};
use motion_cvae::synth::gen_free_motion;
use motion_cvae::trainer::PairDataset;

const DELTA_T: usize = 50;

fn modes() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ]
}

fn loss_grad(c: &mut Criterion) {
    let recs = [gen_free_motion(1, 800)];
    let (norm, ctx) = skeleton::normalize(&recs[0]).unwrap();
    let data = PairDataset::from_normalized(&[norm], &[ctx], Limb::Right, DELTA_T).unwrap();
    let ids: Vec<usize> = (0..512).collect();
    let (past, future) = data.batch(&ids);
    let model = LimbCvae::new(Limb::Right, DELTA_T, 0);
    let mut rng = Rng::new(2);
    let latent = model.latent_dim();
    let eps_e = Array2::from_shape_vec((512, latent), rng.normals(512 * latent)).unwrap();
    let eps_t = Array2::from_shape_vec((512, latent), rng.normals(512 * latent)).unwrap();

    let mut group = c.benchmark_group("loss_grad_512");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                model.loss_grad_chunked(
                    past.view(),
                    future.view(),
                    eps_e.view(),
                    eps_t.view(),
                    ElboOptions::default(),
                    exec,
                )
            })
        });
    }
    group.finish();
}

fn mpe(c: &mut Criterion) {
    let models = ModelSet::initialized(DELTA_T, 0);
    let test = [gen_free_motion(5, 400), gen_free_motion(6, 400)];
    let mut group = c.benchmark_group("evaluate_mpe");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_mpe(&models, &test, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, loss_grad, mpe);
criterion_main!(benches);
