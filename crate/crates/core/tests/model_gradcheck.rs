//! Finite-difference check of every model parameter, both heads.

use deftri_core::model::{EncoderConfig, HeadConfig, HeadKind, Model, ModelDims};
use deftri_core::tokenizer::{encode, EncodedInput, InputVariant, Vocab, RESERVED};
use deftri_core::TeamLabelRegistry;

fn check(kind: HeadKind, dropout: f64) -> f64 {
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(["search", "cart", "query", "basket", "slow", "broken"].map(String::from));
    let vocab = Vocab::from_tokens(tokens).unwrap();
    let reg = TeamLabelRegistry::new(["search", "cart"]).unwrap();
    let mut enc =
        EncoderConfig::with_dims(vocab.len(), 16, ModelDims { hidden: 16, layers: 2, heads: 4, ffn_dim: None });
    enc.dropout = dropout;
    let mut model: Model<f64> = Model::init(enc, HeadConfig::new(kind, &enc, 2), 17).unwrap();
    let inputs = [
        encode(InputVariant::FuseSep, reg.names(), "query slow broken", &vocab, 16).unwrap(),
        encode(InputVariant::FuseSep, reg.names(), "basket", &vocab, 16).unwrap(),
    ];
    let refs: Vec<&EncodedInput> = inputs.iter().collect();
    let before = model.params().to_vec();
    let report = model.check_gradients(&refs, &[1, 0, 0, 1], &[1.0, 2.0], 1e-5).unwrap();
    assert_eq!(model.params(), &before[..], "parameters restored");
    assert!(report.checked as f64 > 0.9 * model.num_parameters() as f64, "{report:?}");
    eprintln!("{kind} dropout {dropout}: {report:?}");
    report.max_rel_error
}

#[test]
fn linear_head_gradients() {
    assert!(check(HeadKind::Linear, 0.0) < 1e-3);
    assert!(check(HeadKind::Linear, 0.1) < 1e-3);
}

#[test]
fn bilstm_head_gradients() {
    assert!(check(HeadKind::Bilstm, 0.0) < 1e-3);
}
