use xdomain_core::corpus::{build_vocab, Verbalizer, VocabOptions, Vocabulary};
use xdomain_core::model::{ModelConfig, ModelParams, Readout};
use xdomain_core::prompting::{build_prompt, TEMPLATE_WORDS};
use xdomain_core::rng::{self, Rng};
use xdomain_core::saliency::{compare_checkpoints, token_saliency};
use xdomain_numerics::Tape;

fn setup(seed: u64) -> (ModelParams, Vocabulary) {
    let opts = VocabOptions {
        reserved: TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    let vocab = build_vocab(["battery lasts long but the screen flickers"], &Verbalizer::default(), &opts).unwrap();
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 8,
        ff_dim: 16,
        max_positions: 20,
        vocab_size: vocab.len(),
        dropout: 0.0,
        ..Default::default()
    };
    (ModelParams::init(&cfg, &mut rng::seeded(seed)).unwrap(), vocab)
}

fn label_logit(params: &ModelParams, sentence: &str, vocab: &Vocabulary, column: usize) -> f64 {
    let prompt = build_prompt(&vocab.encode(sentence), vocab, params.config.max_positions).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape).unwrap();
    let enc = b.encode::<Rng>(&mut tape, &prompt.ids, None).unwrap();
    let l = b
        .label_logits(&mut tape, enc.hidden, prompt.mask_slot, Readout::Verbalizer, vocab.verbalizer_ids())
        .unwrap();
    tape.value(l).data()[column]
}

#[test]
fn scores_match_finite_differences_on_embeddings() {
    let (params, vocab) = setup(11);
    // Every word occurs once and none is a verbalizer word, so the gradient
    // at each position equals the gradient on that word's embedding row.
    let sentence = "battery lasts long but screen flickers";
    let report = token_saliency(&params, sentence, &vocab, Readout::Verbalizer, "m").unwrap();
    let column = report.predicted.index();
    let d = params.config.model_dim;
    let h = 1e-5;
    for t in &report.tokens {
        let id = vocab.encode(&t.token)[0];
        let mut sq = 0.0;
        for j in 0..d {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                p.params.get_mut("embeddings.token").unwrap().data_mut()[id * d + j] += delta;
                label_logit(&p, sentence, &vocab, column)
            };
            let g = (shifted(h) - shifted(-h)) / (2.0 * h);
            sq += g * g;
        }
        let numeric = sq.sqrt();
        assert!((numeric - t.raw).abs() <= 1e-4 * t.raw.max(1.0), "{}: {numeric} vs {}", t.token, t.raw);
    }
}

#[test]
fn scores_do_not_depend_on_sentence_order() {
    let (a, vocab) = setup(1);
    let (b, _) = setup(2);
    let sentences: Vec<String> = ["battery lasts long", "the screen flickers", "but battery"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut reversed = sentences.clone();
    reversed.reverse();
    let select = |w: &str| w == "battery";
    let fwd = compare_checkpoints((&a, "a"), (&b, "b"), &sentences, &vocab, Readout::Verbalizer, select).unwrap();
    let rev = compare_checkpoints((&a, "a"), (&b, "b"), &reversed, &vocab, Readout::Verbalizer, select).unwrap();
    for (x, y) in fwd.sentences.iter().zip(rev.sentences.iter().rev()) {
        assert_eq!(x, y);
    }
    assert_eq!(fwd.improved_fraction, rev.improved_fraction);
    assert!((fwd.mean_rank_improvement - rev.mean_rank_improvement).abs() < 1e-12);
}

#[test]
fn frame_tokens_are_never_scored() {
    let (params, vocab) = setup(4);
    let sentence = "the screen is long";
    let report = token_saliency(&params, sentence, &vocab, Readout::Verbalizer, "m").unwrap();
    let prompt = build_prompt(&vocab.encode(sentence), &vocab, params.config.max_positions).unwrap();
    let words: Vec<&str> = report.tokens.iter().map(|t| t.token.as_str()).collect();
    assert_eq!(words, ["the", "screen", "is", "long"]);
    let body = prompt.body();
    assert!(report.tokens.iter().all(|t| body.contains(&t.position)));
    assert!(report.tokens.iter().all(|t| t.position != prompt.mask_slot && t.position != 0));
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let (a, vocab) = setup(1);
    let mut cfg = a.config.clone();
    cfg.model_dim = 16;
    cfg.ff_dim = 32;
    let b = ModelParams::init(&cfg, &mut rng::seeded(1)).unwrap();
    let s = vec!["battery lasts long".to_string()];
    let err = compare_checkpoints((&a, "a"), (&b, "b"), &s, &vocab, Readout::Verbalizer, |_| true).unwrap_err();
    assert!(err.to_string().contains("model_dim"), "{err}");
}
