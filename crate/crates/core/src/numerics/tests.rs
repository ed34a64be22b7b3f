use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::Result;

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

#[test]
fn matmul_identity_and_zero_row() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t2(&[&[1.0, 0.0]]));
    let b = g.constant(t2(&[&[0.0], &[5.0]]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).data(), &[0.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(1);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 2]);
    let err = finite_diff_check(
        |g, p| {
            let bv = g.constant(b.clone());
            let y = g.matmul(p, bv)?;
            Ok(g.sum(y))
        },
        &a,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|x| libm::exp(*x)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = g.constant(Tensor::from_rows(&[&[1000.0, 1000.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let want = softmax_oracle(&[1.0, 2.0]);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-7);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_sum_and_half_square() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn(&[2, 3, 2], |i| i as f32 - 4.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f32>::new();
    let xv = Tensor::from_fn(&[5], |i| i as f32 * 0.5 - 1.0);
    let x = g.param(xv.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), xv.data());
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[3, 2]));
    let y = g.add(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn matmul_softmax_chain_gradient() {
    let mut rng = SeededRng::new(2);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 5]);
    let w = rand_t(&mut rng, &[3, 5]);
    let err = finite_diff_check(
        |g, p| {
            let bv = g.constant(b.clone());
            let wv = g.constant(w.clone());
            let y = g.matmul(p, bv)?;
            let s = g.softmax_rows(y)?;
            let z = g.mul(s, wv)?;
            Ok(g.sum(z))
        },
        &a,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn finite_diff_check_examples() {
    let p = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.7);
    let err = finite_diff_check(|g, p| Ok(g.sum(p)), &p, 1e-3).unwrap();
    assert!(err <= 1e-6, "{err}");

    let p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let err = finite_diff_check(
        |g, p| {
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        },
        &p,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");

    assert!(finite_diff_check(|g, p| Ok(g.sum(p)), &p, 0.0).is_err());
}

/// Weighted sum with fixed random weights so every output entry matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = SeededRng::new(seed).normal_tensor::<f64>(&shape, 1.0);
    let wv = g.constant(w);
    let z = g.mul(y, wv)?;
    Ok(g.sum(z))
}

fn check(name: &str, p: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
    let err = finite_diff_check(
        |g, v| {
            let y = f(g, v)?;
            probe(g, y, 99)
        },
        p,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{name}: rel err {err}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = SeededRng::new(3);
    let m = rand_t(&mut rng, &[3, 4]);
    let other = rand_t(&mut rng, &[3, 4]);
    let img = rand_t(&mut rng, &[2, 4, 6]);
    let bias4 = rand_t(&mut rng, &[4]);
    let bias2 = rand_t(&mut rng, &[2]);
    let wconv = rand_t(&mut rng, &[3, 2, 3, 3]);

    check("transpose", &m, |g, p| g.transpose(p));
    check("reshape", &m, |g, p| g.reshape(p, &[2, 6]));
    check("add", &m, |g, p| {
        let o = g.constant(other.clone());
        g.add(p, o)
    });
    check("sub", &m, |g, p| {
        let o = g.constant(other.clone());
        let a = g.sub(p, o)?;
        g.sub(o, a)
    });
    check("mul", &m, |g, p| {
        let o = g.constant(other.clone());
        g.mul(o, p)
    });
    check("scale", &m, |g, p| Ok(g.scale(p, -1.7)));
    check("silu", &m, |g, p| Ok(g.silu(p)));
    check("softmax", &m, |g, p| g.softmax_rows(p));
    check("slice_rows", &m, |g, p| g.slice_rows(p, 1, 3));
    check("concat_rows", &m, |g, p| {
        let a = g.slice_rows(p, 2, 3)?;
        let b = g.slice_rows(p, 0, 2)?;
        g.concat_rows(&[a, b, a])
    });
    check("add_row_bias/x", &m, |g, p| {
        let b = g.constant(bias4.clone());
        g.add_row_bias(p, b)
    });
    check("add_row_bias/b", &bias4, |g, p| {
        let x = g.constant(m.clone());
        g.add_row_bias(x, p)
    });
    check("add_channel/x", &img, |g, p| {
        let b = g.constant(bias2.clone());
        g.add_channel(p, b)
    });
    check("add_channel/b", &bias2, |g, p| {
        let x = g.constant(img.clone());
        g.add_channel(x, p)
    });
    check("conv2d/x", &img, |g, p| {
        let w = g.constant(wconv.clone());
        g.conv2d(p, w, 1)
    });
    check("conv2d/w", &wconv, |g, p| {
        let x = g.constant(img.clone());
        g.conv2d(x, p, 1)
    });
    check("conv2d/stride2", &img, |g, p| {
        let w = g.constant(wconv.clone());
        g.conv2d(p, w, 2)
    });
    check("avg_pool2", &img, |g, p| g.avg_pool2(p));
    check("upsample2", &img, |g, p| g.upsample2(p));
    check("mean", &m, |g, p| Ok(g.mean(p)));
    check("mse", &m, |g, p| {
        let o = g.constant(other.clone());
        g.mse(p, o)
    });
    check("mse/rhs", &m, |g, p| {
        let o = g.constant(other.clone());
        g.mse(o, p)
    });
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full(&[2, 2], 1.0));
    let b = g.param(Tensor::full(&[2, 2], 2.0));
    let y = g.matmul(a, b).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(a).is_none());
    assert!(g.grad(b).is_some());
}

#[test]
fn tnsr_rejects_bad_magic_and_truncation() {
    let t = Tensor::from_fn(&[2, 3], |i| i as f32);
    let mut bytes = tnsr::encode(&t);
    assert!(tnsr::decode(&bytes[..bytes.len() - 1]).is_err());
    bytes[0] = b'X';
    assert!(matches!(tnsr::decode(&bytes), Err(crate::Error::Format(_))));
}

#[test]
fn rng_is_reproducible_and_splits() {
    let mut a = SeededRng::new(7);
    let mut b = SeededRng::new(7);
    assert_eq!(a.next_u64(), b.next_u64());
    let mut ca = a.split();
    let mut cb = b.split();
    assert_eq!(ca.normal().to_bits(), cb.normal().to_bits());
    let mut d0 = SeededRng::derive(7, 0);
    let mut d1 = SeededRng::derive(7, 1);
    assert_ne!(d0.next_u64(), d1.next_u64());
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(
        vals in proptest::collection::vec(-1.0e3f32..1.0e3, 1..40),
        cols in 1usize..8,
    ) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(t);
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn tnsr_round_trip_is_bit_exact(
        dims in proptest::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let t: Tensor<f32> = rng.normal_tensor(&dims, 3.0);
        let back = tnsr::decode(&tnsr::encode(&t)).unwrap();
        prop_assert!(back.bit_eq(&t));
    }
}
