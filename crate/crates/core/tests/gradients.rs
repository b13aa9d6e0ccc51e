//! Backpropagated gradients against central differences, parameter group by
//! parameter group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synloc_core::localness::{AnswerSpan, CenterStrategy};
use synloc_core::model::{EncoderConfig, EncoderInput, Model, ModelConfig, NGramLossConfig, SequenceBatch};
use synloc_core::numkit::{finite_diff_grad, relative_error};
use synloc_core::synmask::VisibilityMask;

fn micro_model(center: CenterStrategy, seed: u64) -> Model {
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            localness_layers: vec![1],
            synmask_layers: vec![1],
        },
        decoder_layers: 1,
        vocab_size: 16,
        max_len: 8,
        center_strategy: center,
        ngram: NGramLossConfig::new(2, vec![1.0, 0.5]).unwrap(),
    };
    let mut model = Model::new(config, seed).unwrap();
    // move everything off its init so that zero-initialised projections and
    // unit gains are exercised too
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        for x in model.params.get_mut(&name).unwrap().data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

fn micro_batch(seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 6;
    let mut pairs = Vec::new();
    for i in 0..len {
        for j in i + 1..len {
            if rng.gen_bool(0.3) {
                pairs.push((i, j));
            }
        }
    }
    SequenceBatch {
        input: EncoderInput {
            tokens: (0..len).map(|_| rng.gen_range(4..16)).collect(),
            span: AnswerSpan { start: 2, end: 3 },
            mask: Some(VisibilityMask::from_pairs(len, &pairs).unwrap()),
        },
        targets: (0..4).map(|_| rng.gen_range(0..16)).collect(),
    }
}

fn check(center: CenterStrategy, seed: u64) {
    let model = micro_model(center, seed);
    let batch = micro_batch(seed);
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let base = model.params.get(&name).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut m = model.clone();
                m.params.get_mut(&name).unwrap().data_mut().copy_from_slice(x);
                m.loss(&batch).unwrap()
            },
            base.data(),
            1e-5,
        )
        .unwrap();
        let analytic = grads[&name].data();
        let err = relative_error(analytic, &numeric, 1e-8);
        assert!(err < 1e-4, "{center:?} {name}: relative error {err:e}");
    }
}

#[test]
fn answer_center_gradients_match_finite_differences() {
    check(CenterStrategy::AnswerCenter, 1);
    check(CenterStrategy::AnswerCenter, 2);
}

#[test]
fn predicted_center_gradients_match_finite_differences() {
    check(CenterStrategy::PredictedCenter, 3);
}

#[test]
fn every_parameter_receives_a_gradient_entry() {
    let model = micro_model(CenterStrategy::PredictedCenter, 5);
    let (_, grads) = model.loss_and_grads(&micro_batch(5)).unwrap();
    assert!(grads.keys().eq(model.params.names()));
    assert!(grads["enc1.local.u_d"].frobenius_norm() > 0.0);
    assert!(grads["enc1.local.u_p"].frobenius_norm() > 0.0);
}
