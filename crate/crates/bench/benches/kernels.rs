use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ireid_core::editing::{editing_layer_forward, TokenSequence};
use ireid_core::loss::{adaptive_triplet, TripletConfig};
use ireid_core::metrics::map_tau;
use ireid_core::retrieval::{rank_queries, split_roles, GalleryCache, ModelParams};
use ireid_core::synth::{gen_synthetic, SynthConfig};
use ireid_core::tensor::matmul;
use ireid_core::{Matrix, RankEvalConfig, RetrievalMode};

fn data() -> (Matrix, ModelParams) {
    let d = gen_synthetic(&SynthConfig::default()).unwrap();
    let params = ModelParams::init(d.images.cols(), 1, 0).unwrap();
    (d.images, params)
}

fn kernels(c: &mut Criterion) {
    let (images, mut params) = data();
    let dim = images.cols();
    let block = Matrix::from_rows(&(0..16).map(|r| images.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
    let instr = Matrix::from_rows(&(16..24).map(|r| images.row(r).to_vec()).collect::<Vec<_>>()).unwrap();

    c.bench_function("matmul 400x32 * 32x32", |b| {
        b.iter(|| matmul(black_box(&images), black_box(&params.projection)).unwrap())
    });

    params.set_all_gates(0.5);
    let state = TokenSequence::new(block).unwrap();
    c.bench_function("editing layer 16 tokens, 8 instr", |b| {
        b.iter(|| editing_layer_forward(black_box(&state), black_box(&instr), &params.stack[0]).unwrap())
    });

    let cfg = TripletConfig::default();
    let (a, r1, r2) = (
        images.row_vector(0).unwrap(),
        images.row_vector(1).unwrap(),
        images.row_vector(2).unwrap(),
    );
    c.bench_function(&format!("adaptive triplet dim {dim}"), |b| {
        b.iter(|| adaptive_triplet(black_box(&a), &r1, &r2, 0.9, 0.2, &cfg).unwrap())
    });
}

fn retrieval(c: &mut Criterion) {
    let d = gen_synthetic(&SynthConfig::default()).unwrap();
    let (queries, gallery) = split_roles(&d.records);
    let params = ModelParams::init(d.images.cols(), 1, 0).unwrap();

    for mode in [RetrievalMode::TaskSpecific, RetrievalMode::TaskFree] {
        c.bench_function(&format!("rank 100 queries x 300 gallery, {mode}"), |b| {
            b.iter(|| {
                let mut cache = GalleryCache::new();
                rank_queries(&queries, &gallery, mode, &params, 0, &mut cache).unwrap()
            })
        });
    }

    let mut cache = GalleryCache::new();
    let ranks = rank_queries(&queries, &gallery, RetrievalMode::TaskFree, &params, 0, &mut cache).unwrap();
    let cfg = RankEvalConfig::with_tau(0.5);
    c.bench_function("map_tau 100 rank lists", |b| b.iter(|| map_tau(black_box(&ranks), &cfg).unwrap()));
}

criterion_group!(benches, kernels, retrieval);
criterion_main!(benches);
