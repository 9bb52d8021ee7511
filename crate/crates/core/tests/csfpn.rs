use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tbt_core::csfpn::{fuse_level, nearest_index, upsample_nearest, Fpn, FpnConfig};
use tbt_core::encoder::{pyramid_geometry, PyramidFeatures, PyramidLevel};
use tbt_core::model::ModelError;
use tbt_core::nn::{zero_biases, Conv1d};
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

fn pyramid(g: &mut Graph, maps: Vec<Tensor>, variable: bool) -> PyramidFeatures {
    let mut p = PyramidFeatures::default();
    let mut stride = 1;
    for m in maps {
        let len = m.rows();
        let v = if variable { g.variable(m) } else { g.constant(m) };
        p.levels.push(PyramidLevel { features: v, len, stride });
        stride *= 2;
    }
    p
}

fn cfg(d: usize) -> FpnConfig {
    FpnConfig {
        out_channels: d,
        ..FpnConfig::default()
    }
}

fn set_identity(s: &mut ParamStore, conv: &Conv1d, k: usize, d: usize) {
    let w = s.get_mut(conv.weight).data_mut();
    w.fill(0.0);
    let centre = k / 2;
    for i in 0..d {
        w[(centre * d + i) * d + i] = 1.0;
    }
}

#[test]
fn upsample_examples() {
    let s = ParamStore::new(0);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::new([2, 1], vec![1.0, 2.0]).unwrap());
    let y = upsample_nearest(&mut g, x, 4).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0]);
    let x = g.constant(Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let y = upsample_nearest(&mut g, x, 3).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    let y = upsample_nearest(&mut g, x, 5).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 3.0]);
    assert!(upsample_nearest(&mut g, x, 2).is_err());
}

#[test]
fn fuse_examples() {
    let mut s = ParamStore::new(0);
    let lat = Conv1d::new(&mut s, "l", 1, 1, 1).unwrap();
    s.get_mut(lat.weight).data_mut()[0] = 2.0;
    let mut g = Graph::new(&s);
    let c = g.constant(Tensor::new([2, 1], vec![1.0, 2.0]).unwrap());
    let p = g.constant(Tensor::new([2, 1], vec![10.0, 10.0]).unwrap());
    let y = fuse_level(&mut g, c, p, &lat).unwrap();
    assert_eq!(g.value(y).data(), &[12.0, 14.0]);

    let z = g.constant(Tensor::zeros([2, 1]));
    let y = fuse_level(&mut g, z, z, &lat).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let short = g.constant(Tensor::zeros([3, 1]));
    assert!(matches!(fuse_level(&mut g, c, short, &lat), Err(ModelError::PyramidMismatch(_))));
}

#[test]
fn identity_lateral_passes_through() {
    let mut s = ParamStore::new(0);
    let lat = Conv1d::new(&mut s, "l", 1, 4, 4).unwrap();
    set_identity(&mut s, &lat, 1, 4);
    let x = random(6, 4, 1);
    let mut g = Graph::new(&s);
    let c = g.constant(x.clone());
    let z = g.constant(Tensor::zeros([6, 4]));
    let y = fuse_level(&mut g, c, z, &lat).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn zero_backbone_zero_pyramid_and_shapes() {
    let lens = [128usize, 64, 32, 16, 8, 4];
    let mut s = ParamStore::new(1);
    let fpn = Fpn::new(&mut s, 6, 8, &cfg(8)).unwrap();
    zero_biases(&mut s);
    let mut g = Graph::new(&s);
    let p = pyramid(&mut g, lens.iter().map(|l| Tensor::zeros([*l, 8])).collect(), false);
    let out = fpn.build_fpn(&mut g, &p).unwrap();
    assert_eq!(out.geometry(), p.geometry());
    for l in &out.levels {
        assert!(g.value(l.features).data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn single_level_is_rejected() {
    let mut s = ParamStore::new(1);
    let fpn = Fpn::new(&mut s, 1, 4, &cfg(4)).unwrap();
    let mut g = Graph::new(&s);
    let p = pyramid(&mut g, vec![Tensor::zeros([8, 4])], false);
    assert!(fpn.build_fpn(&mut g, &p).is_err());
    assert!(fpn.forward(&mut g, &p).is_ok());
}

#[test]
fn impulse_follows_nearest_upsampling() {
    let lens = [20usize, 10, 5, 3];
    let d = 2;
    let mut s = ParamStore::new(2);
    let fpn = Fpn::new(&mut s, 4, d, &cfg(d)).unwrap();
    zero_biases(&mut s);
    for l in 0..4 {
        set_identity(&mut s, fpn.lateral(l), 1, d);
        set_identity(&mut s, fpn.refine(l), 3, d);
    }
    let top = lens.len() - 1;
    let pos = 1;
    let mut maps: Vec<Tensor> = lens.iter().map(|l| Tensor::zeros([*l, d])).collect();
    maps[top].data_mut()[pos * d] = 1.0;
    let mut g = Graph::new(&s);
    let p = pyramid(&mut g, maps, false);
    let out = fpn.build_fpn(&mut g, &p).unwrap();
    // hand trace: compose the floor(j*T/target) maps down from the top
    let mut src: Vec<usize> = (0..lens[top]).collect();
    for l in (0..=top).rev() {
        if l < top {
            let up = nearest_index(lens[l + 1], lens[l]);
            src = up.iter().map(|j| src[*j]).collect();
        }
        let v = g.value(out.levels[l].features);
        for j in 0..lens[l] {
            let want = if src[j] == pos { 1.0 } else { 0.0 };
            assert_eq!(v.at(j, 0), want, "level {l} row {j}");
            assert_eq!(v.at(j, 1), 0.0);
        }
    }
}

#[test]
fn linear_with_zero_biases() {
    let lens = [16usize, 8, 4];
    let mut s = ParamStore::new(3);
    let fpn = Fpn::new(&mut s, 3, 4, &cfg(6)).unwrap();
    zero_biases(&mut s);
    let a: Vec<Tensor> = lens.iter().enumerate().map(|(i, l)| random(*l, 4, i as u64)).collect();
    let b: Vec<Tensor> = lens.iter().enumerate().map(|(i, l)| random(*l, 4, 10 + i as u64)).collect();
    let (alpha, beta) = (1.7, -0.4);
    let mix: Vec<Tensor> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            let d = x.data().iter().zip(y.data()).map(|(u, v)| alpha * u + beta * v).collect();
            Tensor::new(x.shape().to_vec(), d).unwrap()
        })
        .collect();
    let run = |maps: Vec<Tensor>| {
        let mut g = Graph::new(&s);
        let p = pyramid(&mut g, maps, false);
        let out = fpn.build_fpn(&mut g, &p).unwrap();
        out.levels.iter().map(|l| g.value(l.features).clone()).collect::<Vec<_>>()
    };
    let (ya, yb, ym) = (run(a), run(b), run(mix));
    for l in 0..3 {
        for k in 0..ym[l].numel() {
            let want = alpha * ya[l].data()[k] + beta * yb[l].data()[k];
            assert!((ym[l].data()[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn finest_output_sees_coarsest_input() {
    let lens: Vec<usize> = pyramid_geometry(128, 6, 2).iter().map(|x| x.0).collect();
    let mut s = ParamStore::new(4);
    let fpn = Fpn::new(&mut s, 6, 8, &cfg(8)).unwrap();
    let mut g = Graph::new(&s);
    let maps = lens.iter().enumerate().map(|(i, l)| random(*l, 8, i as u64)).collect();
    let p = pyramid(&mut g, maps, true);
    let out = fpn.build_fpn(&mut g, &p).unwrap();
    let loss = g.sum(out.levels[0].features).unwrap();
    let grads = g.backward(loss).unwrap();
    let gtop = grads.wrt(p.levels[5].features).expect("coarsest map reaches finest output");
    assert!(gtop.data().iter().any(|v| *v != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn fpn_preserves_geometry(t in 32usize..512) {
        let geom = pyramid_geometry(t, 6, 2);
        let mut s = ParamStore::new(5);
        let fpn = Fpn::new(&mut s, 6, 4, &cfg(4)).unwrap();
        let mut g = Graph::new(&s);
        let maps = geom.iter().map(|(l, _)| Tensor::zeros([*l, 4])).collect();
        let p = pyramid(&mut g, maps, false);
        let out = fpn.build_fpn(&mut g, &p).unwrap();
        prop_assert_eq!(out.geometry(), geom);
    }

    #[test]
    fn nearest_index_is_monotone_and_onto(len in 1usize..64, extra in 0usize..64) {
        let target = len + extra;
        let idx = nearest_index(len, target);
        prop_assert_eq!(idx.len(), target);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(*idx.last().unwrap(), len - 1);
        if extra == 0 {
            prop_assert_eq!(idx, (0..len).collect::<Vec<_>>());
        }
    }
}
