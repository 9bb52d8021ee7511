use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tbt_core::gradcheck::{grad_check_all, GradCheckOptions};
use tbt_core::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `y` against fixed random weights so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let c = g.constant(random(g.shape(y), seed ^ 0xabc));
    let p = g.mul(y, c)?;
    g.sum(p)
}

type Build = fn(&mut Graph, &[ParamId]) -> Result<Var, TensorError>;

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![5, 4], vec![4, 3]], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.matmul(a, b)
        }),
        ("add_bias", vec![vec![5, 4], vec![4]], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.add_bias(a, b)
        }),
        ("mul_sub", vec![vec![3, 4], vec![3, 4]], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            let m = g.mul(a, b)?;
            let s = g.sub(m, b)?;
            g.scale(s, 0.7)
        }),
        ("gelu", vec![vec![4, 5]], |g, p| {
            let a = g.param(p[0]);
            g.gelu(a)
        }),
        ("sigmoid", vec![vec![4, 5]], |g, p| {
            let a = g.param(p[0]);
            g.sigmoid(a)
        }),
        ("softplus", vec![vec![4, 5]], |g, p| {
            let a = g.param(p[0]);
            g.softplus(a)
        }),
        ("silu", vec![vec![4, 5]], |g, p| {
            let a = g.param(p[0]);
            g.silu(a)
        }),
        ("softmax", vec![vec![3, 6]], |g, p| {
            let a = g.param(p[0]);
            g.softmax(a)
        }),
        ("log_softmax", vec![vec![3, 6]], |g, p| {
            let a = g.param(p[0]);
            g.log_softmax(a)
        }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |g, p| {
            let (x, ga, be) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            g.layer_norm(x, ga, be, 1e-5)
        }),
        ("conv1d", vec![vec![9, 3], vec![3, 3, 2], vec![2]], |g, p| {
            let (x, w, b) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            g.conv1d(x, w, Some(b), 2, 1)
        }),
        ("depthwise", vec![vec![9, 3], vec![4, 3], vec![3]], |g, p| {
            let (x, w, b) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            g.depthwise_conv1d(x, w, Some(b), 2, 1, 2)
        }),
        ("local_attention", vec![vec![7, 4], vec![7, 4], vec![7, 4]], |g, p| {
            let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            g.local_attention(q, k, v, 2, 2)
        }),
        ("selective_scan", vec![vec![6, 2], vec![2, 3], vec![6, 3], vec![6, 3]], |g, p| {
            let (x, a, b, c) = (g.param(p[0]), g.param(p[1]), g.param(p[2]), g.param(p[3]));
            let a = g.sigmoid(a)?;
            g.selective_scan(x, a, b, c)
        }),
        ("rows_and_cols", vec![vec![4, 5], vec![2, 5]], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            let up = g.gather_rows(a, vec![0, 0, 3, 1, 3])?;
            let cat = g.concat_rows(&[up, b])?;
            g.slice_cols(cat, 1, 4)
        }),
        ("sigmoid_focal", vec![vec![3, 4]], |g, p| {
            let a = g.param(p[0]);
            let targets = (0..12).map(|i| f64::from(i % 3 == 0)).collect();
            g.sigmoid_focal(a, targets, 0.25, 2.0)
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_over_20_seeds() {
    for (name, shapes, build) in ops() {
        for seed in 0..20u64 {
            let mut s = ParamStore::new(seed);
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, sh)| s.insert(format!("p{i}"), random(sh, seed * 31 + i as u64)).unwrap())
                .collect();
            let opts = GradCheckOptions {
                coords_per_param: 64,
                seed,
                ..GradCheckOptions::default()
            };
            let err = grad_check_all(&s, opts, |g| {
                let y = build(g, &ids)?;
                project(g, y, seed)
            })
            .unwrap();
            assert!(err <= 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut s = ParamStore::new(9);
        let ids: Vec<ParamId> = (0..3).map(|i| s.trunc_normal(format!("p{i}"), &[7, 4], 1.0).unwrap()).collect();
        let mut g = Graph::new(&s);
        let (q, k, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let y = g.local_attention(q, k, v, 2, 3).unwrap();
        let loss = project(&mut g, y, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        let flat: Vec<u64> = grads.params().flat_map(|(_, d)| d.iter().map(|x| x.to_bits())).collect();
        (g.value(loss).item().to_bits(), flat, s.to_bytes())
    };
    assert_eq!(run(), run());
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (t, din) = (x.rows(), x.cols());
    let (k, dout) = (w.shape()[0], w.shape()[2]);
    let out_len = (t + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; out_len * dout];
    for o in 0..out_len {
        for kk in 0..k {
            let src = (o * stride + kk) as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            for i in 0..din {
                for j in 0..dout {
                    y[o * dout + j] += x.at(src as usize, i) * w.data()[(kk * din + i) * dout + j];
                }
            }
        }
    }
    y
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-1e4f64..1e4, 1..12), shift in -50.0f64..50.0) {
        let s = ParamStore::new(0);
        let mut g = Graph::new(&s);
        let n = row.len();
        let x = g.constant(Tensor::new([1, n], row.clone()).unwrap());
        let p = g.softmax(x).unwrap();
        let probs = g.value(p).data().to_vec();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(probs.iter().all(|v| *v >= 0.0));
        let shifted = g.constant(Tensor::new([1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let q = g.softmax(shifted).unwrap();
        for (a, b) in probs.iter().zip(g.value(q).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let (a, b) = (random(&[m, k], seed), random(&[k, n], seed ^ 1));
        let s = ParamStore::new(0);
        let mut g = Graph::new(&s);
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|r| a.at(i, r) * b.at(r, j)).sum();
                prop_assert!((g.value(c).at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_naive_and_is_linear(
        t in 3usize..20, din in 1usize..4, dout in 1usize..4, half in 0usize..3, stride in 1usize..3, seed in any::<u64>(),
        alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
    ) {
        let k = 2 * half + 1;
        prop_assume!(t + 2 * half >= k);
        let w = random(&[k, din, dout], seed);
        let x = random(&[t, din], seed ^ 7);
        let y = random(&[t, din], seed ^ 9);
        let s = ParamStore::new(0);
        let mut g = Graph::new(&s);
        let wv = g.constant(w.clone());
        let conv = |g: &mut Graph, input: &Tensor| {
            let v = g.constant(input.clone());
            let out = g.conv1d(v, wv, None, stride, half).unwrap();
            g.value(out).data().to_vec()
        };
        let cx = conv(&mut g, &x);
        let naive = naive_conv(&x, &w, stride, half);
        prop_assert_eq!(cx.len(), naive.len());
        for (a, b) in cx.iter().zip(&naive) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mix_data = x.data().iter().zip(y.data()).map(|(u, v)| alpha * u + beta * v).collect();
        let mix = Tensor::new([t, din], mix_data).unwrap();
        let cy = conv(&mut g, &y);
        let cm = conv(&mut g, &mix);
        for i in 0..cm.len() {
            prop_assert!((cm[i] - (alpha * cx[i] + beta * cy[i])).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_of_zeros_is_bias() {
    let s = ParamStore::new(0);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::zeros([6, 2]));
    let w = g.constant(random(&[3, 2, 3], 4));
    let b = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let y = g.conv1d(x, w, Some(b), 1, 1).unwrap();
    for t in 0..6 {
        assert_eq!(g.value(y).row(t), &[0.5, -1.0, 2.0]);
    }
}
