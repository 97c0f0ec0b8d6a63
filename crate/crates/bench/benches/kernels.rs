use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use notecoder_core::corpus::{Chunk, NUM_SPECIALS};
use notecoder_core::encoder::{encode_infer, init_encoder, EncoderConfig, EncoderParams};
use notecoder_core::eval::auc_binary;
use notecoder_core::heads::{xml_head_forward, XmlHeadParams};
use notecoder_core::numerics::{rng_from_seed, truncated_normal, Tensor};
use rand::Rng;

fn chunk(len: usize, vocab: usize) -> Chunk {
    let mut rng = rng_from_seed(1);
    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(NUM_SPECIALS..vocab)).collect();
    Chunk::truncated(&ids, len + 2, ("bench".into(), 0)).unwrap()
}

fn encoder(c: &mut Criterion) {
    let params: EncoderParams<f32> = init_encoder(&EncoderConfig::desk(200), 3).unwrap();
    let x = chunk(126, 200);
    c.bench_function("encoder_desk_128", |b| {
        b.iter(|| encode_infer(black_box(&x), &params, false).unwrap())
    });
}

fn xml_head(c: &mut Criterion) {
    let mut rng = rng_from_seed(2);
    let (n, d, m) = (128, 64, 50);
    let h: Tensor<f32> = truncated_normal(&[n, d], 1.0, &mut rng);
    let params = XmlHeadParams {
        labels: truncated_normal(&[m, d], 0.1, &mut rng),
        w_b: truncated_normal(&[d, d], 0.1, &mut rng),
        w_a: truncated_normal(&[1, d], 0.1, &mut rng),
    };
    let mask = vec![true; n];
    c.bench_function("xml_head_128x64_50_labels", |b| {
        b.iter(|| xml_head_forward(black_box(&h), &mask, &params).unwrap())
    });
}

fn auc(c: &mut Criterion) {
    let mut rng = rng_from_seed(3);
    let labels: Vec<u8> = (0..10_000).map(|_| rng.random_bool(0.1) as u8).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| (rng.random_range(0..1000) as f64) / 1000.0).collect();
    c.bench_function("auc_10k_tied", |b| b.iter(|| auc_binary(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, encoder, xml_head, auc);
criterion_main!(benches);
