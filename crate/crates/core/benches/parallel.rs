//! Parallel vs sequential execution of the bank-wide hot loops: embedding the
//! bank, exact vector search for every exercise, and lexical search.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fse_core::corpus::{generate_synthetic, SyntheticSpec};
use fse_core::esrm::{corpus_vocab, embed_text, encode_corpus, EncodedExercise, EncoderParams, ModelShape};
use fse_core::exec::{parallel, sequential};
use fse_core::recall::{Bm25Params, LexicalIndex, VectorIndex};
use fse_core::textnorm::TextNormalizer;

struct Fixture {
    encoded: Vec<EncodedExercise>,
    params: EncoderParams,
    rows: Vec<Vec<f64>>,
    vector: VectorIndex,
    lexical: LexicalIndex,
}

fn fixture() -> Fixture {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let norm = TextNormalizer::default();
    let vocab = corpus_vocab(&data.corpus, &norm, 1);
    let encoded = encode_corpus(&data.corpus, &norm, &vocab).unwrap();
    let shape = ModelShape::for_schema(data.corpus.schema(), vocab.len(), 64);
    let params = EncoderParams::init(shape, 7).unwrap();
    let embeddings: Vec<_> = encoded.iter().map(|e| embed_text(&e.stem, &params).unwrap()).collect();
    let rows = embeddings.iter().map(|e| e.as_slice().to_vec()).collect();
    let ids = encoded.iter().map(|e| e.id.clone()).collect();
    let vector = VectorIndex::build(ids, &embeddings).unwrap();
    let lexical = LexicalIndex::build(&encoded, Bm25Params::default()).unwrap();
    Fixture {
        encoded,
        params,
        rows,
        vector,
        lexical,
    }
}

fn benches(c: &mut Criterion) {
    let f = fixture();
    let embed = |e: &EncodedExercise| embed_text(&e.stem, &f.params).unwrap();
    let vsearch = |q: usize| f.vector.search(&f.rows[q], Some(q), 200).unwrap();
    let lsearch = |q: usize| {
        let e = &f.encoded[q];
        f.lexical.search(&e.stem, &e.concepts, Some(q), 200)
    };
    let n = f.encoded.len();

    let mut g = c.benchmark_group("embed_bank");
    g.bench_function("sequential", |b| b.iter(|| black_box(sequential::map_collect(&f.encoded, embed))));
    g.bench_function("parallel", |b| b.iter(|| black_box(parallel::map_collect(&f.encoded, embed))));
    g.finish();

    let mut g = c.benchmark_group("vector_search_all");
    g.bench_function("sequential", |b| b.iter(|| black_box(sequential::map_range(n, vsearch))));
    g.bench_function("parallel", |b| b.iter(|| black_box(parallel::map_range(n, vsearch))));
    g.finish();

    let mut g = c.benchmark_group("lexical_search_all");
    g.bench_function("sequential", |b| b.iter(|| black_box(sequential::map_range(n, lsearch))));
    g.bench_function("parallel", |b| b.iter(|| black_box(parallel::map_range(n, lsearch))));
    g.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
