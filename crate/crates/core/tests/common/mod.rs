#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdomain_core::corpus::{generate_synthetic, Label, SyntheticSpec};
use xdomain_core::losses::{mlm_loss, pmt_loss, ssd_loss, SsdOptions};
use xdomain_core::experiments::{Domains, Settings};
use xdomain_core::model::{ModelConfig, ModelParams, Readout};
use xdomain_numerics::{ParamSet, Tape, Tensor, Var};
use xdomain_core::training::StageConfig;

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        labeled_per_domain: 80,
        unlabeled_per_domain: 80,
        seed: 9,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_domains() -> Domains {
    generate_synthetic(&tiny_spec()).unwrap()
}

pub fn tiny_settings() -> Settings {
    Settings {
        model: ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_positions: 20,
            vocab_size: 0,
            dropout: 0.1,
            tie_output_embeddings: true,
        },
        stage1: StageConfig {
            learning_rate: 1e-3,
            max_epochs: 2,
            batch_size: 8,
            ..StageConfig::stage1()
        },
        stage2: StageConfig {
            learning_rate: 1e-4,
            max_epochs: 2,
            batch_size: 8,
            ..StageConfig::stage2()
        },
        max_len: 20,
        ..Settings::default()
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        ff_dim: 16,
        max_positions: 10,
        vocab_size: 14,
        dropout: 0.0,
        tie_output_embeddings: true,
    }
}

pub fn perturbed(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(&small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, t) in p.params.iter_mut() {
        for v in t.data_mut() {
            *v += rand::Rng::random_range(&mut r, -0.4..0.4);
        }
    }
    p
}

pub const VERBALIZER: [usize; 2] = [12, 13];
// [CLS] a b c . it is [MASK] . [SEP]
pub const ORIGINAL: [usize; 10] = [0, 5, 6, 7, 8, 9, 10, 2, 8, 1];
pub const MASKED: [usize; 10] = [0, 2, 6, 2, 8, 9, 10, 2, 8, 1];
pub const MASK_SLOT: usize = 7;

/// Which loss a closure evaluates against the model.
#[derive(Clone, Copy, Debug)]
pub enum Which {
    Pmt,
    Mlm,
    Ssd([f64; 2]),
}

pub fn model_loss(config: &ModelConfig, ps: &ParamSet, which: Which) -> (Tape, Var) {
    let mp = ModelParams {
        config: config.clone(),
        params: ps.clone(),
    };
    let mut tape = Tape::new();
    let b = mp.bind(&mut tape).unwrap();
    let loss = match which {
        Which::Pmt => {
            let enc = b.encode::<ChaCha8Rng>(&mut tape, &ORIGINAL, None).unwrap();
            let p = b.label_probs(&mut tape, enc.hidden, MASK_SLOT, Readout::Verbalizer, VERBALIZER).unwrap();
            pmt_loss(&mut tape, &[p], &[Label::Negative]).unwrap()
        }
        Which::Mlm => {
            let enc = b.encode::<ChaCha8Rng>(&mut tape, &MASKED, None).unwrap();
            let d = b.token_probs(&mut tape, enc.hidden, &[1, 3]).unwrap();
            mlm_loss(&mut tape, &[d], &[vec![5, 7]]).unwrap()
        }
        Which::Ssd(teacher) => {
            let enc = b.encode::<ChaCha8Rng>(&mut tape, &MASKED, None).unwrap();
            let pm = b.label_probs(&mut tape, enc.hidden, MASK_SLOT, Readout::Verbalizer, VERBALIZER).unwrap();
            let po = tape.constant(Tensor::matrix(1, 2, teacher.to_vec()).unwrap()).unwrap();
            ssd_loss(&mut tape, &[pm], &[po], SsdOptions::default()).unwrap()
        }
    };
    (tape, loss)
}
