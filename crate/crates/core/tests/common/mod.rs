#![allow(dead_code)]

use duplex_autograd::gradcheck::relative_error;
use duplex_autograd::{Matrix, ParamId, ParamStore};
use duplex_core::config::ModelConfig;
use duplex_core::corpus::{generate_synthetic, CmrcExample, SyntheticConfig};
use duplex_core::model::Model;
use duplex_core::pipeline::{build_vocab, prepare_all, Instance};
use duplex_core::tokenizer::Vocab;

pub fn corpus(n_rules: usize, seed: u64, limit: usize) -> Vec<CmrcExample> {
    let mut ex = generate_synthetic(&SyntheticConfig {
        n_rules,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    ex.truncate(limit);
    ex
}

pub fn small_config(vocab: &Vocab, d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: 2,
        ff_width: 2 * d,
        encoder_layers: 1,
        decoder_layers: 1,
        rgcn_layers: 2,
        inter_layers: 1,
        vocab_size: vocab.len(),
        beam_width: 3,
        ..ModelConfig::default()
    }
}

pub struct Setup {
    pub examples: Vec<CmrcExample>,
    pub vocab: Vocab,
    pub instances: Vec<Instance>,
    pub model: Model,
}

pub fn setup(examples: Vec<CmrcExample>, d: usize, seed: u64, tweak: impl FnOnce(&mut ModelConfig)) -> Setup {
    let vocab = build_vocab(&examples);
    let mut cfg = small_config(&vocab, d);
    tweak(&mut cfg);
    let instances = prepare_all(&examples, &vocab, &cfg).unwrap();
    let model = Model::new(&cfg, seed).unwrap();
    Setup {
        examples,
        vocab,
        instances,
        model,
    }
}

/// Worst relative error between analytic gradients and central differences
/// of `f` over the chosen parameter coordinates.
pub fn check_param_gradients(
    store: &mut ParamStore,
    analytic: &dyn Fn(&ParamStore) -> Vec<(ParamId, Matrix)>,
    f: &dyn Fn(&ParamStore) -> f64,
    coords: &[(ParamId, usize)],
    step: f64,
    floor: f64,
) -> f64 {
    let grads = analytic(store);
    let lookup = |id: ParamId| grads.iter().find(|(g, _)| *g == id).map(|(_, m)| m.clone());
    let mut worst: f64 = 0.0;
    for &(id, k) in coords {
        let a = lookup(id).map_or(0.0, |m| m.data()[k]);
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + step;
        let plus = f(store);
        store.get_mut(id).data_mut()[k] = orig - step;
        let minus = f(store);
        store.get_mut(id).data_mut()[k] = orig;
        let n = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(a, n, floor));
    }
    worst
}
