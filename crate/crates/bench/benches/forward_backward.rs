use criterion::{criterion_group, criterion_main, Criterion};
use tbt_bench::fixture;
use tbt_core::encoder::BackboneVariant;
use tbt_core::train::targets_for;
use tbt_core::{Graph, RunConfig};

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for variant in BackboneVariant::ALL {
        let cfg = RunConfig {
            backbone_variant: variant,
            ..RunConfig::default()
        };
        let (det, store, ex) = fixture(&cfg);
        let targets = targets_for(&cfg, &ex).unwrap();
        group.bench_function(variant.name(), |b| {
            b.iter(|| {
                let mut g = Graph::new(&store);
                let out = det.forward(&mut g, &ex.features).unwrap();
                let (loss, _) = det.loss(&mut g, &out, &targets, &cfg.loss).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
