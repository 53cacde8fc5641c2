use capsdemm_core::capsnet::{CapsConfig, CapsModel};
use capsdemm_core::slic::{slic, SlicParams};
use capsdemm_core::synth::{generate_wsi, SynthConfig};
use capsdemm_core::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use image::imageops::crop_imm;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (ch, hw) in [(3usize, 96usize), (16, 96), (32, 48)] {
        let x = Tensor::<f32>::full(&[4, ch, hw, hw], 0.1);
        let k = Tensor::<f32>::full(&[ch * 2, ch, 3, 3], 0.01);
        g.bench_with_input(
            BenchmarkId::new("fwd_bwd", format!("{ch}x{hw}")),
            &(x, k),
            |b, (x, k)| {
                b.iter(|| {
                    let mut t = Tape::new();
                    let xv = t.constant(x.clone());
                    let kv = t.param(k.clone());
                    let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
                    let s = t.sum(y).unwrap();
                    t.backward(s).unwrap();
                })
            },
        );
    }
    g.finish();
}

fn superpixels(c: &mut Criterion) {
    let img = generate_wsi(&SynthConfig::default(), 0, true).unwrap().image;
    let mut g = c.benchmark_group("slic");
    g.sample_size(10);
    for n in [300, 700] {
        g.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| slic(&img, SlicParams::new(n)).unwrap())
        });
    }
    g.finish();
}

fn caps_forward(c: &mut Criterion) {
    let model = CapsModel::new(CapsConfig::default(), 1).unwrap();
    let img = generate_wsi(&SynthConfig::default(), 1, true).unwrap().image;
    let patches: Vec<_> = (0..8)
        .map(|i| crop_imm(&img, 20 * i, 100, 224, 224).to_image())
        .collect();
    let refs: Vec<_> = patches.iter().collect();
    let mut g = c.benchmark_group("capsdemm");
    g.sample_size(10);
    g.bench_function("predict_8_patches", |b| b.iter(|| model.predict(&refs).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, superpixels, caps_forward);
criterion_main!(benches);
