use spex_core::corpus;
use spex_core::engine::{greedy_generate, layer_argmaxes};
use spex_core::predictor::{collect_training_data, CollectConfig};
use spex_core::speculation::propose_topk;
use spex_core::{ModelConfig, TransformerModel};

fn model(layers: usize, seed: u64) -> TransformerModel {
    TransformerModel::init(ModelConfig {
        vocab_size: 256,
        hidden_dim: 16,
        num_layers: layers,
        num_heads: 2,
        ffn_dim: 32,
        max_context: 64,
        seed,
    })
    .unwrap()
}

#[test]
fn labels_and_logits_match_uncached_recomputation() {
    let target = model(4, 31);
    let draft = model(1, 32);
    let text = b"the quick brown fox jumps over the lazy dog while the cat sleeps nearby";
    let config = CollectConfig {
        k: 3,
        prompt_len: 6,
        gen_len: 5,
        num_prompts: 3,
        ..CollectConfig::default()
    };
    let layers = [2, 0, 1];
    let examples = collect_training_data(&target, &draft, text, &layers, &config).unwrap();
    assert_eq!(examples.len(), 3 * 5 * 3);

    let mut expected = Vec::new();
    for prompt in corpus::prompts(text, 6, 3).unwrap() {
        let generated = greedy_generate(&target, &prompt, 5).unwrap();
        for i in 0..generated.len() {
            let mut context = prompt.clone();
            context.extend_from_slice(&generated[..i]);
            let argmax = layer_argmaxes(&target, &context).unwrap();
            assert_eq!(argmax[3], generated[i] as usize);
            let spec = propose_topk(&draft, &context, 3).unwrap();
            let hidden = target.layer_hiddens(&context).unwrap();
            for layer in 0..3 {
                let logits = target
                    .sliced_head_logits(&hidden[layer], &spec.tokens)
                    .unwrap();
                expected.push((layer, argmax[layer] == argmax[3], logits));
            }
        }
    }
    expected.sort_by_key(|e| e.0);

    for (got, (layer, label, logits)) in examples.iter().zip(&expected) {
        assert_eq!(got.layer, *layer);
        assert_eq!(got.label, *label);
        for (a, b) in got.features.spec_logits.iter().zip(logits) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
