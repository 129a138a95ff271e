use candle_core::{DType, Device, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use glomseg::augment::{make_views, StrongAugSpec, WeakAugSpec};
use glomseg::catalog::{decode_rle, encode_rle, PixelOrder};
use glomseg::eval::confusion;
use glomseg::fixture::{render_patch, Stain};
use glomseg::models::{Arch, ModelConfig, SegModel, Variant};
use glomseg::ssl::unimatch_unsup_loss;

fn augmentation(c: &mut Criterion) {
    let (img, mask) = render_patch(256, &Stain::for_center(1, 0, 0.7), 3, 1);
    let (partner, _) = render_patch(128, &Stain::for_center(2, 0, 0.7), 3, 2);
    let weak = WeakAugSpec { crop_size: 128, ..WeakAugSpec::default() };
    let strong = StrongAugSpec::unimatch_default();
    let mut seed = 0u64;
    c.bench_function("views_256_to_128", |b| {
        b.iter(|| {
            seed += 3;
            make_views(&img, Some(&mask), &weak, &strong, (seed, seed + 1, seed + 2), Some(&partner)).unwrap()
        })
    });
}

fn masks(c: &mut Criterion) {
    let (_, gt) = render_patch(512, &Stain::for_center(0, 0, 0.7), 6, 3);
    let (_, pred) = render_patch(512, &Stain::for_center(0, 0, 0.7), 6, 4);
    let rle = encode_rle(&gt, PixelOrder::ColumnMajor);
    c.bench_function("rle_encode_512", |b| b.iter(|| encode_rle(black_box(&gt), PixelOrder::ColumnMajor)));
    c.bench_function("rle_decode_512", |b| b.iter(|| decode_rle(black_box(&rle), 512, 512, PixelOrder::ColumnMajor).unwrap()));
    c.bench_function("confusion_512", |b| b.iter(|| confusion(black_box(&pred), black_box(&gt)).unwrap()));
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::preset(Arch::Segformer, Variant::Toy).unwrap();
    let net = SegModel::build(&cfg, DType::F32).unwrap();
    let x = Tensor::randn(0f32, 1.0, (4, 3, 64, 64), &Device::Cpu).unwrap();
    c.bench_function("toy_segformer_forward_4x64", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));

    let w = net.forward(&x).unwrap();
    let s = Tensor::randn(0f32, 1.0, w.shape(), &Device::Cpu).unwrap();
    c.bench_function("unimatch_loss_4x64", |b| {
        b.iter(|| unimatch_unsup_loss(&w, &s, &s, &s, 0.95, 0.5).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = augmentation, masks, model
}
criterion_main!(benches);
