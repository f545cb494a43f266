mod common;

use fse_core::engine::{Engine, QueryTarget};
use fse_core::recall::{add_year_distractor, raise_degree};

#[test]
fn duplicate_detector_separates_cosmetic_from_substantive_edits() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::load(common::trained(dir.path(), &common::small_spec())).unwrap();
    let corpus = engine.corpus();
    let inline = |e| QueryTarget::Exercise(Box::new(e));
    let mut checked = 0;
    for ex in corpus.iter().step_by(7) {
        let id = QueryTarget::Id(ex.id.clone());
        let year = engine.duplicate(&id, &inline(add_year_distractor(ex, 2021))).unwrap();
        assert!(year.duplicate, "{}: year distractor p = {}", ex.id, year.probability);
        if let Some(raised) = raise_degree(ex) {
            let v = engine.duplicate(&id, &inline(raised)).unwrap();
            assert!(!v.duplicate, "{}: raised degree p = {}", ex.id, v.probability);
            checked += 1;
        }
    }
    assert!(checked > 0);

    // Symmetric: swapping the pair gives the same probability.
    let (a, b) = (QueryTarget::Id(corpus[0].id.clone()), QueryTarget::Id(corpus[1].id.clone()));
    let ab = engine.duplicate(&a, &b).unwrap().probability;
    let ba = engine.duplicate(&b, &a).unwrap().probability;
    assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    // Distinct exercises from the same template are not duplicates.
    assert!(!engine.duplicate(&a, &b).unwrap().duplicate);
}
