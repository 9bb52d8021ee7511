use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tbt_core::encoder::{
    min_sequence_len, pyramid_geometry, BackboneVariant, Embedding, Encoder, EncoderConfig, TransformerBlock,
};
use tbt_core::model::ModelError;
use tbt_core::nn::zero_biases;
use tbt_core::{Graph, ParamStore, Tensor};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    Tensor::new([rows, cols], data).unwrap()
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        input_dim: 8,
        embed_dim: 16,
        num_heads: 4,
        mlp_ratio: 3,
        window_size: 7,
        num_levels: 3,
        ..EncoderConfig::default()
    }
}

#[test]
fn embed_zeros_and_shape() {
    let mut s = ParamStore::new(3);
    let e = Embedding::new(&mut s, "e", 8, 16).unwrap();
    zero_biases(&mut s);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::zeros([16, 8]));
    let y = e.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros([16, 16]));
    let x = g.constant(random(100, 8, 1));
    let y = e.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[100, 16]);
}

#[test]
fn embed_rejects_wrong_input_dim() {
    let mut s = ParamStore::new(3);
    let e = Embedding::new(&mut s, "e", 8, 16).unwrap();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::zeros([10, 5]));
    assert!(matches!(e.forward(&mut g, x), Err(ModelError::InputDim { expected: 8, got: 5 })));
}

#[test]
fn embed_identical_rows_stay_identical_away_from_edges() {
    let mut s = ParamStore::new(4);
    let e = Embedding::new(&mut s, "e", 8, 16).unwrap();
    let row = random(1, 8, 2);
    let rows: Vec<Vec<f64>> = (0..12).map(|_| row.data().to_vec()).collect();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::from_rows(&rows));
    let y = e.forward(&mut g, x).unwrap();
    let out = g.value(y);
    // two K=3 layers: rows 2..T-2 never see padding
    for t in 3..10 {
        assert_eq!(out.row(t), out.row(2));
    }
}

#[test]
fn transformer_block_zero_and_shape() {
    let mut s = ParamStore::new(5);
    let b = TransformerBlock::new(&mut s, "b", 256, 16, 6, 31).unwrap();
    zero_biases(&mut s);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::zeros([64, 256]));
    let y = b.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros([64, 256]));
    let x = g.constant(random(64, 256, 9));
    let y = b.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[64, 256]);
}

#[test]
fn mlp_parameter_count_closed_form() {
    for (d, r) in [(16usize, 4usize), (16, 6), (32, 6), (8, 1)] {
        let mut s = ParamStore::new(0);
        TransformerBlock::new(&mut s, "b", d, 4.min(d), r, 5).unwrap();
        assert_eq!(s.count_with_prefix("b.mlp."), 2 * r * d * d + (r + 1) * d);
    }
}

fn block_locality(window: usize, seed: u64, t: usize, j: usize) {
    let mut s = ParamStore::new(seed);
    let b = TransformerBlock::new(&mut s, "b", 8, 2, 2, window).unwrap();
    let x0 = random(t, 8, seed + 100);
    let mut x1 = x0.clone();
    for (i, v) in x1.data_mut()[j * 8..(j + 1) * 8].iter_mut().enumerate() {
        *v += 0.25 * i as f64 - 0.9;
    }
    let mut g = Graph::new(&s);
    let a = g.constant(x0);
    let ya = b.forward(&mut g, a).unwrap();
    let c = g.constant(x1);
    let yc = b.forward(&mut g, c).unwrap();
    let r = (window - 1) / 2;
    let mut changed_inside = false;
    for row in 0..t {
        let same = g.value(ya).row(row) == g.value(yc).row(row);
        if row.abs_diff(j) > r {
            assert!(same, "row {row} changed for perturbation at {j} (radius {r})");
        } else if !same && row != j {
            changed_inside = true;
        }
    }
    assert_eq!(changed_inside, r > 0);
}

#[test]
fn attention_is_exactly_local() {
    block_locality(7, 1, 40, 20);
    block_locality(7, 2, 40, 0);
    block_locality(31, 3, 64, 50);
    block_locality(1, 4, 12, 5);
}

#[test]
fn stacked_blocks_receptive_field() {
    let mut s = ParamStore::new(8);
    let blocks: Vec<_> = (0..3)
        .map(|i| TransformerBlock::new(&mut s, &format!("b{i}"), 8, 2, 2, 5).unwrap())
        .collect();
    let x0 = random(40, 8, 77);
    let mut x1 = x0.clone();
    x1.data_mut()[20 * 8] += 1.0;
    let run = |x: Tensor| {
        let mut g = Graph::new(&s);
        let mut h = g.constant(x);
        for b in &blocks {
            h = b.forward(&mut g, h).unwrap();
        }
        g.value(h).clone()
    };
    let (a, b) = (run(x0), run(x1));
    for t in 0..40usize {
        if t.abs_diff(20) > 3 * 2 {
            assert_eq!(a.row(t), b.row(t));
        }
    }
}

#[test]
fn pyramid_examples() {
    let g = pyramid_geometry(128, 6, 2);
    assert_eq!(g.iter().map(|x| x.0).collect::<Vec<_>>(), vec![128, 64, 32, 16, 8, 4]);
    assert_eq!(g.iter().map(|x| x.1).collect::<Vec<_>>(), vec![1, 2, 4, 8, 16, 32]);
    let g = pyramid_geometry(10, 3, 2);
    assert_eq!(g.iter().map(|x| x.0).collect::<Vec<_>>(), vec![10, 5, 3]);
}

#[test]
fn network_pyramid_matches_geometry() {
    let cfg = small_cfg();
    for variant in BackboneVariant::ALL {
        let mut s = ParamStore::new(11);
        let enc = Encoder::new(&mut s, &cfg, variant).unwrap();
        for t in [4usize, 5, 10, 33] {
            let mut g = Graph::new(&s);
            let x = g.constant(random(t, 8, t as u64));
            let p = enc.forward(&mut g, x).unwrap();
            assert_eq!(p.geometry(), pyramid_geometry(t, 3, 2), "{variant:?} T={t}");
            for l in &p.levels {
                assert_eq!(g.shape(l.features), &[l.len, 16]);
            }
        }
    }
}

#[test]
fn too_short_sequence_is_rejected() {
    let cfg = small_cfg();
    let mut s = ParamStore::new(1);
    let enc = Encoder::new(&mut s, &cfg, BackboneVariant::Transformer).unwrap();
    let mut g = Graph::new(&s);
    let x = g.constant(random(3, 8, 0));
    assert!(matches!(
        enc.forward(&mut g, x),
        Err(ModelError::SequenceTooShort { len: 3, required: 4, levels: 3 })
    ));
    assert_eq!(min_sequence_len(6, 2), 32);
}

#[test]
fn same_seed_same_parameters_and_outputs() {
    let cfg = small_cfg();
    let build = || {
        let mut s = ParamStore::new(42);
        let enc = Encoder::new(&mut s, &cfg, BackboneVariant::Transformer).unwrap();
        let mut g = Graph::new(&s);
        let x = g.constant(random(20, 8, 5));
        let p = enc.forward(&mut g, x).unwrap();
        let out: Vec<Tensor> = p.levels.iter().map(|l| g.value(l.features).clone()).collect();
        (s.to_bytes(), out)
    };
    assert_eq!(build(), build());
}

#[test]
fn config_validation() {
    let mut c = EncoderConfig::default();
    assert!(c.validate().is_ok());
    c.num_heads = 5;
    assert_eq!(c.validate().unwrap_err().0, "num_heads");
    let c = EncoderConfig {
        window_size: 30,
        ..EncoderConfig::default()
    };
    assert_eq!(c.validate().unwrap_err().0, "window_size");
    let c = EncoderConfig {
        num_levels: 0,
        ..EncoderConfig::default()
    };
    assert_eq!(c.validate().unwrap_err().0, "num_levels");
}

proptest! {
    #[test]
    fn geometry_law(t in 1usize..512, levels in 1usize..8, stride in 2usize..4) {
        let g = pyramid_geometry(t, levels, stride);
        prop_assert_eq!(g.len(), levels);
        prop_assert_eq!(g[0], (t, 1));
        for w in g.windows(2) {
            prop_assert_eq!(w[1].0, w[0].0.div_ceil(stride));
            prop_assert_eq!(w[1].1, w[0].1 * stride);
        }
    }
}
