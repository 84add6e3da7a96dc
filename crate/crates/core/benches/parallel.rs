use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use farlab::ar_engine::{far_generate, BackboneKind, EpisodeSpec, FarModel, GenerateConfig, HeadKind, ModelConfig};
use farlab::conditioner::BackboneConfig;
use farlab::diffcore::RngStream;
use farlab::exec::Parallelism;
use farlab::shortcut_head::{HeadConfig, SamplerSpec};
use farlab::toylab::{energy_distance_with, Mixture2dSpec};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn energy(c: &mut Criterion) {
    let mix = Mixture2dSpec::ring(8, 2.0, 0.1);
    let mut rng = RngStream::new(0, 0);
    let mut points = |n| -> Vec<Vec<f64>> { mix.sample(&mut rng, n).into_iter().map(|(_, x)| x.to_vec()).collect() };
    let a = points(1500);
    let b = points(1500);
    let mut g = c.benchmark_group("energy_distance");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| energy_distance_with(mode, &a, &b).unwrap())
        });
    }
    g.finish();
}

fn generation(c: &mut Criterion) {
    let cfg = ModelConfig {
        backbone_kind: BackboneKind::Masked,
        head_kind: HeadKind::Shortcut,
        backbone: BackboneConfig {
            token_dim: 2,
            embed_dim: 32,
            encoder_depth: 2,
            decoder_depth: 2,
            num_heads: 4,
            num_classes: 1,
            cls_repeat: 1,
            max_sequence: 16,
            ..Default::default()
        },
        head: HeadConfig {
            hidden_width: 64,
            depth: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let (model, params) = FarModel::init(&cfg, &mut RngStream::new(1, 0)).unwrap();
    let episodes = vec![EpisodeSpec { label: Some(0), clamps: vec![] }; 256];
    let mut g = c.benchmark_group("far_generate");
    g.sample_size(10);
    for (name, mode) in MODES {
        let gc = GenerateConfig {
            ar_iters: 8,
            sampler: SamplerSpec {
                steps: 8,
                ..Default::default()
            },
            mode,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| far_generate(&model, &params, &episodes, &gc).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, energy, generation);
criterion_main!(benches);
