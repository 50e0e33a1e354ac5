use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use exprcl::batch::BatchLayout;
use exprcl::contrastive::{dual_contrastive_loss_grad, maskfn_select_from_features, LossConfig};
use exprcl::embedding::EmbeddingMatrix;
use exprcl::face_ops::{face_swap, FaceOpsConfig};
use exprcl::model::{Encoder, EncoderSpec};
use exprcl::rng::rng;
use exprcl::synth::{generate_corpus, CorpusSpec};

fn random_matrix(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut r = rng(seed);
    let data = (0..rows * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    EmbeddingMatrix::new(rows, dim, data).unwrap()
}

fn loss(c: &mut Criterion) {
    let layout = BatchLayout::synthetic(&[true; 64]).unwrap();
    let e = random_matrix(layout.len(), 128, 1);
    let zcat = random_matrix(layout.len(), 256, 2);
    let cfg = LossConfig::default();
    let fns = maskfn_select_from_features(&zcat, &layout, 2).unwrap();
    c.bench_function("dual_loss_grad_192_views", |b| {
        b.iter(|| dual_contrastive_loss_grad(black_box(&e), &layout, &fns, &cfg).unwrap())
    });
    c.bench_function("maskfn_select_192_views", |b| {
        b.iter(|| maskfn_select_from_features(black_box(&zcat), &layout, 2).unwrap())
    });
}

fn face_ops(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusSpec {
        n_identities: 2,
        videos_per_id: 1,
        duration_s: 0.2,
        ..CorpusSpec::default()
    })
    .unwrap();
    let m = &corpus.manifest;
    let render = |pos: usize| {
        let key = m.record(pos).key();
        corpus.labels[&key].render().unwrap()
    };
    let (a, la) = render(0);
    let (b, lb) = render(1);
    let cfg = FaceOpsConfig::default();
    c.bench_function("face_swap_64px", |bench| {
        bench.iter(|| face_swap((black_box(&a), &la), (&b, &lb), &cfg).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusSpec {
        n_identities: 4,
        videos_per_id: 1,
        duration_s: 0.8,
        ..CorpusSpec::default()
    })
    .unwrap();
    let images: Vec<_> = corpus
        .labels
        .values()
        .map(|l| l.render().unwrap().0.crop(4, 4, 56, 56).unwrap())
        .collect();
    let mut enc = Encoder::new(&EncoderSpec::default(), 0).unwrap();
    c.bench_function("small_cnn_encode_16", |b| b.iter(|| enc.encode(black_box(&images)).unwrap()));
    c.bench_function("small_cnn_train_step_16", |b| {
        b.iter(|| {
            let z = enc.forward_train(black_box(&images)).unwrap();
            enc.zero_grad();
            enc.backward(&z).unwrap();
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = loss, face_ops, encoder
}
criterion_main!(benches);
