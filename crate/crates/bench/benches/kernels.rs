use std::hint::black_box;

use adversa_core::clip::{AbductiveClip, ClipConfig};
use adversa_core::codec::{LatentCodec, SpaceToDepthCodec};
use adversa_core::metrics::{frechet_distance, FeatureSet, FeatureSource};
use adversa_core::scenario::{generate_layout, ClipSource, FrameRange, GeneratorConfig, CLIP_LEN};
use adversa_core::unet::{Conditioning, GroundingInput, OavdUNet, UNetConfig};
use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn scenario(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    c.bench_function("generate_layout", |b| b.iter(|| generate_layout(black_box(7), &cfg).unwrap()));
    let layout = generate_layout(7, &cfg).unwrap();
    c.bench_function("render_clip", |b| {
        b.iter(|| layout.clip(black_box(FrameRange::new(10, 10 + CLIP_LEN)), false).unwrap())
    });
}

fn codec(c: &mut Criterion) {
    let layout = generate_layout(3, &GeneratorConfig::default()).unwrap();
    let clip = layout.clip(FrameRange::new(0, CLIP_LEN), false).unwrap();
    let codec = SpaceToDepthCodec::new(3);
    let z = codec.encode(&clip).unwrap();
    c.bench_function("codec_encode", |b| b.iter(|| codec.encode(black_box(&clip)).unwrap()));
    c.bench_function("codec_decode", |b| b.iter(|| codec.decode(black_box(&z)).unwrap()));
}

fn clip_encoders(c: &mut Criterion) {
    let model = AbductiveClip::new(ClipConfig::default()).unwrap();
    let layout = generate_layout(5, &GeneratorConfig::default()).unwrap();
    let clips: Vec<_> = (0..8)
        .map(|i| layout.clip(FrameRange::new(i * 4, i * 4 + CLIP_LEN), false).unwrap())
        .collect();
    let refs: Vec<_> = clips.iter().collect();
    c.bench_function("encode_video_x8", |b| b.iter(|| model.encode_clips(black_box(&refs)).unwrap()));
    let text = layout.texts().reason.clone();
    let texts: Vec<&[u32]> = vec![text.as_slice(); 8];
    c.bench_function("encode_text_x8", |b| b.iter(|| model.encode_text(black_box(&texts)).unwrap()));
}

fn unet(c: &mut Criterion) {
    let cfg = UNetConfig::desk();
    let net = OavdUNet::new(cfg.clone()).unwrap();
    let layout = generate_layout(9, &GeneratorConfig::default()).unwrap();
    let tracks = layout.clip_tracks(FrameRange::new(0, CLIP_LEN), false);
    let g = GroundingInput::from_tracks(&tracks, cfg.frames, cfg.fourier_freqs, cfg.max_tokens).unwrap();
    let text = Tensor::zeros((1, 12, cfg.text_width), candle_core::DType::F32, &Device::Cpu).unwrap();
    let mask = Tensor::ones((1, 12), candle_core::DType::F32, &Device::Cpu).unwrap();
    let cond = Conditioning::new(text, mask, &[&g]).unwrap();
    let s = cfg.latent_size;
    let z = Tensor::zeros((1, cfg.frames, s, s, cfg.latent_channels), candle_core::DType::F32, &Device::Cpu).unwrap();
    let mut group = c.benchmark_group("unet");
    group.sample_size(10);
    group.bench_function("forward_desk_b1", |b| b.iter(|| net.forward(black_box(&z), &[100], &cond).unwrap()));
    group.finish();
}

fn frechet(c: &mut Criterion) {
    let rows = |n: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..64).map(|j| ((i * 31 + j * 17) % 97) as f64 / 97.0 + shift).collect())
            .collect()
    };
    let a = FeatureSet::new(&rows(128, 0.0), FeatureSource::Real).unwrap();
    let b = FeatureSet::new(&rows(128, 0.1), FeatureSource::Generated).unwrap();
    c.bench_function("frechet_distance_d64", |bch| bch.iter(|| frechet_distance(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, scenario, codec, clip_encoders, unet, frechet);
criterion_main!(benches);
