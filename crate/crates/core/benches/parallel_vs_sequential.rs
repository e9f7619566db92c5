use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lse_core::losses::ce_loss;
use lse_core::model::{backward, conv, forward, predict, ModelConfig, Params};
use lse_core::par;
use lse_core::selection::{score_images, ImageId};
use lse_core::synth::{generate_scenes, DomainPair};
use lse_core::tensor::softmax;

const H: usize = 32;
const W: usize = 64;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        par::sequential(f)
    }
}

fn bench_scoring(c: &mut Criterion) {
    let pair = DomainPair::default_pair(H, W, 0);
    let scenes = generate_scenes(&pair.target, 32).unwrap();
    let model = Params::<f32>::init(ModelConfig::new(6, H, W), 0);
    let mut group = c.benchmark_group("predict_and_score_32");
    group.sample_size(10);
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(parallel, || {
                    let probs = par::map(&scenes, |(x, _)| predict(&model, x).unwrap());
                    let pairs: Vec<(ImageId, _)> = probs.iter().enumerate().map(|(i, p)| (i as ImageId, p)).collect();
                    score_images(&pairs)
                })
            })
        });
    }
    group.finish();
}

fn bench_batch_step(c: &mut Criterion) {
    let pair = DomainPair::default_pair(H, W, 0);
    let scenes = generate_scenes(&pair.source, 10).unwrap();
    let model = Params::<f32>::init(ModelConfig::new(6, H, W), 0);
    let mut group = c.benchmark_group("forward_backward_batch_10");
    group.sample_size(10);
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(parallel, || {
                    par::map(&scenes, |(x, y)| {
                        let (logits, cache) = forward(&model, x).unwrap();
                        let loss = ce_loss(&softmax(&logits).unwrap(), y).unwrap();
                        backward(&model, &cache, &loss.grad).unwrap()
                    })
                })
            })
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let (cin, cout) = (16, 16);
    let input: Vec<f32> = (0..cin * H * W).map(|i| (i % 17) as f32 * 0.05).collect();
    let weight: Vec<f32> = (0..cout * cin * 9).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
    let bias = vec![0.1f32; cout];
    let mut group = c.benchmark_group("conv3x3_16x16");
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(parallel, || conv::conv3x3_forward(&input, cin, H, W, &weight, &bias, cout)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scoring, bench_batch_step, bench_conv);
criterion_main!(benches);
