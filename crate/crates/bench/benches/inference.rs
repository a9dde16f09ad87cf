use criterion::{black_box, criterion_group, criterion_main, Criterion};

use ffssd_core::detector::{Detector, ModelConfig};
use ffssd_core::fusion::FusionConfig;
use ffssd_core::gradcheck::random_tensor;
use ffssd_core::Shape;

fn detector(c: &mut Criterion) {
    let base = ModelConfig::default();
    let x = random_tensor::<f32>(Shape::new(1, 3, base.input_size, base.input_size), 0);
    let mut group = c.benchmark_group("detector infer");
    for (label, cfg) in [
        ("none", base.clone()),
        ("concat@128", base.clone().with_fusion(FusionConfig::concat(128))),
        ("eltsum@128", base.clone().with_fusion(FusionConfig::eltsum(128))),
    ] {
        let model = Detector::<f32>::new(cfg, 0).unwrap();
        group.bench_function(label, |b| b.iter(|| model.infer(black_box(&x)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, detector);
criterion_main!(benches);
