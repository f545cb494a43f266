mod common;

use fse_core::corpus::{load_pairs, load_snapshot, SyntheticSpec, VariantKind};
use fse_core::engine::stages;
use fse_core::esrm::encode_corpus;
use fse_core::recall::{LogisticConfig, RecallIndexes};
use fse_core::rerank::{classify_variant, train_variant_classifier, RerankContext};
use fse_core::textnorm::Vocab;

#[test]
fn variant_classifier_generalizes_to_held_out_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_pairs: 260,
        ..common::small_spec()
    };
    let cfg = common::trained(dir.path(), &spec);
    let corpus = load_snapshot(&cfg.paths.corpus).unwrap();
    let vocab = Vocab::load(&cfg.paths.vocab).unwrap();
    let encoded = encode_corpus(&corpus, &stages::normalizer(&cfg), &vocab).unwrap();
    let indexes = RecallIndexes::load(&cfg.paths.index).unwrap();
    let ctx = RerankContext {
        exercises: corpus.exercises(),
        encoded: &encoded,
        embeddings: &indexes.vector,
    };
    let flagged: Vec<_> = load_pairs(&cfg.paths.pairs, &corpus)
        .unwrap()
        .into_iter()
        .filter(|p| p.label.is_similar() && p.variant.is_some())
        .collect();
    let (train, test) = flagged.split_at(flagged.len() / 2);
    assert!(test.len() >= 20, "only {} held-out pairs", test.len());
    let clf = train_variant_classifier(train, &ctx, &LogisticConfig::default()).unwrap();
    let mut correct = 0;
    let mut positives = 0;
    for p in test {
        let (a, b) = (corpus.require(&p.a_id).unwrap(), corpus.require(&p.b_id).unwrap());
        let (pred, _) = classify_variant(ctx.side(a), ctx.side(b), &clf).unwrap();
        let truth = p.variant == Some(VariantKind::Variant);
        positives += usize::from(truth);
        correct += usize::from(pred == truth);
    }
    let acc = correct as f64 / test.len() as f64;
    let majority = positives.max(test.len() - positives) as f64 / test.len() as f64;
    assert!(acc > majority, "held-out accuracy {acc} vs majority baseline {majority}");
}
