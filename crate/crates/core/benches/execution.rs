use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spex_core::engine::{EngineConfig, ExitPolicy};
use spex_core::pipeline::bench_datasets;
use spex_core::predictor::{
    train_predictor_bank, FeatureVector, PredictorTrainConfig, TrainingExample,
};
use spex_core::rng::SplitMix64;
use spex_core::scheduler::{ScheduleConfig, Scheduler};
use spex_core::tree::grouped_speculative_logits;
use spex_core::{Execution, ModelConfig, TransformerModel};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn models() -> (TransformerModel, TransformerModel) {
    let target = TransformerModel::init(ModelConfig::target()).unwrap();
    let draft = TransformerModel::init(ModelConfig::draft()).unwrap();
    (target, draft)
}

fn grouped_logits(c: &mut Criterion) {
    let (target, _) = models();
    let mut rng = SplitMix64::new(3);
    let hidden: Vec<Vec<f32>> = (0..64)
        .map(|_| (0..64).map(|_| rng.uniform(1.0)).collect())
        .collect();
    let ids: Vec<Vec<u32>> = (0..64)
        .map(|i| (0..4).map(|j| ((i * 7 + j * 31) % 256) as u32).collect())
        .collect();
    let h: Vec<&[f32]> = hidden.iter().map(Vec::as_slice).collect();
    let t: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
    let mut group = c.benchmark_group("grouped_logits_64_nodes");
    for mode in MODES {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{mode:?}")),
            &mode,
            |b, &mode| b.iter(|| grouped_speculative_logits(&target, &h, &t, mode).unwrap()),
        );
    }
    group.finish();
}

fn predictor_training(c: &mut Criterion) {
    let mut rng = SplitMix64::new(5);
    let by_layer: Vec<(usize, Vec<TrainingExample>)> = (0..4)
        .map(|layer| {
            let examples = (0..256)
                .map(|_| {
                    let v: Vec<f32> = (0..4).map(|_| rng.uniform(1.0)).collect();
                    TrainingExample {
                        label: v[0] > v[1],
                        features: FeatureVector {
                            spec_logits: v.clone(),
                            local_probs: v.clone(),
                            prob_variation: v,
                        },
                        layer,
                    }
                })
                .collect();
            (layer, examples)
        })
        .collect();
    let cfg = PredictorTrainConfig {
        hidden_dim: 64,
        epochs: 2,
        ..PredictorTrainConfig::default()
    };
    let mut group = c.benchmark_group("predictor_bank_4_layers");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{mode:?}")),
            &mode,
            |b, &mode| b.iter(|| train_predictor_bank(4, &by_layer, &cfg, mode).unwrap()),
        );
    }
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let (target, draft) = models();
    let prompts: Vec<Vec<u32>> = (0..4)
        .map(|i| (0..16).map(|j| ((i * 13 + j * 5) % 256) as u32).collect())
        .collect();
    let datasets = vec![("synthetic".to_string(), prompts)];
    let scheduler = Scheduler::all_layers(target.num_layers());
    let policy = ExitPolicy::Constant(0.0);
    let mut group = c.benchmark_group("bench_4_prompts_16_tokens");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{mode:?}")),
            &mode,
            |b, &mode| {
                b.iter(|| {
                    bench_datasets(
                        &target,
                        &draft,
                        &policy,
                        &scheduler,
                        EngineConfig::default(),
                        ScheduleConfig::default(),
                        &datasets,
                        16,
                        mode,
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

criterion_group!(
    benches,
    grouped_logits,
    predictor_training,
    bench_generation
);
criterion_main!(benches);
