//! Operation-level oracles for the tape: hand-evaluated cases, a naive
//! convolution reference, and finite-difference checks per op.

use std::sync::Arc;

use crate::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOL};
use crate::rng::RngStream;
use crate::tape::{SampleCoords, Tape, TensorId};
use crate::tensor::Tensor;

fn randn(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &RngStream::new(seed, tag))
}

/// Naive quadruple-loop cross-correlation used as an independent reference.
fn conv2d_naive(
    x: &Tensor,
    w: &Tensor,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    s += x.at4(img, ic, iy as usize, ix as usize)
                                        * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out[((img * o + oc) * ho + oy) * wo + ox] = s + b[oc];
                }
            }
        }
    }
    Tensor::from_vec(vec![n, o, ho, wo], out).unwrap()
}

#[test]
fn matmul_grad_is_column_sums_of_b() {
    // d sum(A·B) / dA[i,p] = Σ_j B[p,j], identical for every row i.
    let a = randn(&[3, 4], 0, "mm.a");
    let b = randn(&[4, 5], 0, "mm.b");
    let col_sums: Vec<f64> = (0..4)
        .map(|p| (0..5).map(|j| b.data()[p * 5 + j]).sum())
        .collect();

    let mut tape = Tape::new();
    let ia = tape.leaf(a.clone(), true);
    let ib = tape.leaf(b.clone(), false);
    let prod = tape.matmul(ia, ib).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    let ga = tape.grad(ia).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            assert!((ga[i * 4 + p] - col_sums[p]).abs() < 1e-12);
        }
    }

    // And against central finite differences, within 1e-6.
    let params = vec![("a".to_string(), a), ("b".to_string(), b)];
    let rep = gradcheck::check(&params, DEFAULT_STEP, 1e-6, |t, ids| {
        let p = t.matmul(ids[0], ids[1])?;
        t.sum_all(p)
    })
    .unwrap();
    assert!(rep.ok(), "matmul fd: max err {}", rep.max_err);
}

#[test]
fn conv2d_identity_kernel() {
    let x = randn(&[1, 1, 4, 4], 1, "conv.id");
    let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::zeros(&[1]);
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone(), false);
    let iw = tape.leaf(w, false);
    let ib = tape.leaf(b, false);
    let y = tape.conv2d(ix, iw, ib, 1, 0).unwrap();
    assert_eq!(tape.data(y), x.data());
}

#[test]
fn conv2d_all_ones_on_constant_field() {
    let c = 0.7;
    let x = Tensor::full(&[1, 1, 5, 5], c);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let b = Tensor::zeros(&[1]);
    let mut tape = Tape::new();
    let ix = tape.leaf(x, false);
    let iw = tape.leaf(w, false);
    let ib = tape.leaf(b, false);
    let y = tape.conv2d(ix, iw, ib, 1, 1).unwrap();
    // Interior pixels see the full 3x3 support.
    for oy in 1..4 {
        for ox in 1..4 {
            assert!((tape.value(y).at4(0, 0, oy, ox) - 9.0 * c).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_matches_naive_reference_exactly() {
    for seed in 0..5u64 {
        let x = randn(&[1, 2, 5, 5], seed, "conv.ref.x");
        let w = randn(&[3, 2, 3, 3], seed, "conv.ref.w");
        let b = randn(&[3], seed, "conv.ref.b");
        let expect = conv2d_naive(&x, &w, b.data(), 1, 1);
        let mut tape = Tape::new();
        let ix = tape.leaf(x, false);
        let iw = tape.leaf(w, false);
        let ib = tape.leaf(b, false);
        let y = tape.conv2d(ix, iw, ib, 1, 1).unwrap();
        assert_eq!(tape.data(y), expect.data(), "seed {seed}");
    }
}

#[test]
fn conv2d_rejects_non_integer_output() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 7, 7]), false);
    let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
    let b = tape.leaf(Tensor::zeros(&[1]), false);
    assert!(tape.conv2d(x, w, b, 2, 0).is_err());
}

#[test]
fn conv2d_fd_gradients() {
    let params = vec![
        ("x".to_string(), randn(&[1, 2, 5, 5], 3, "conv.fd.x")),
        ("w".to_string(), randn(&[2, 2, 3, 3], 3, "conv.fd.w")),
        ("b".to_string(), randn(&[2], 3, "conv.fd.b")),
    ];
    let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, |t, ids| {
        let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })
    .unwrap();
    assert!(rep.ok(), "conv2d fd: max err {}", rep.max_err);
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = randn(&[7, 9], 4, "softmax.rows");
    let mut tape = Tape::new();
    let ix = tape.leaf(x, false);
    let s = tape.softmax(ix, 1).unwrap();
    for row in tape.data(s).chunks_exact(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layernorm_normalizes_each_group() {
    let x = randn(&[4, 16], 5, "ln.x");
    let mut tape = Tape::new();
    let ix = tape.leaf(x, false);
    let y = tape.layernorm(ix, 1, 0.0).unwrap();
    for row in tape.data(y).chunks_exact(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "var {var}");
    }
}

#[test]
fn grid_sample_at_integer_coordinates_returns_source() {
    let f = randn(&[1, 2, 3, 4], 6, "gs.int");
    let coords = SampleCoords {
        xs: Arc::new(vec![0.0, 1.0, 2.0, 3.0]),
        ys: Arc::new(vec![0.0, 1.0, 2.0]),
    };
    let mut tape = Tape::new();
    let idf = tape.leaf(f.clone(), false);
    let y = tape.grid_sample(idf, coords, None).unwrap();
    assert_eq!(tape.data(y), f.data());
}

#[test]
fn grid_sample_midpoint_averages_neighbors() {
    let f = Tensor::from_vec(vec![1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
    let coords = SampleCoords { xs: Arc::new(vec![0.5]), ys: Arc::new(vec![0.0]) };
    let mut tape = Tape::new();
    let idf = tape.leaf(f, false);
    let y = tape.grid_sample(idf, coords, None).unwrap();
    assert_eq!(tape.data(y), &[4.0]);
}

#[test]
fn grid_sample_offset_gradients_match_fd() {
    // Keep sample points clear of the integer lattice and the borders so
    // the bilinear kernel is smooth at every probe.
    let f = randn(&[1, 3, 6, 6], 7, "gs.fd.f");
    let xs: Vec<f64> = vec![1.3, 2.6, 3.9];
    let ys: Vec<f64> = vec![1.45, 2.85];
    let off = Tensor::from_vec(
        vec![2, 2, 3],
        vec![0.21, -0.17, 0.33, 0.12, -0.29, 0.08, 0.19, 0.27, -0.23, 0.31, 0.11, -0.13],
    )
    .unwrap();
    let params = vec![("f".to_string(), f), ("off".to_string(), off)];
    let coords = SampleCoords { xs: Arc::new(xs), ys: Arc::new(ys) };
    let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, move |t, ids| {
        let y = t.grid_sample(ids[0], coords.clone(), Some(ids[1]))?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })
    .unwrap();
    assert!(rep.ok(), "grid_sample fd: max err {}", rep.max_err);
}

#[test]
fn gather_roundtrip_is_identity() {
    let x = randn(&[2, 3, 4], 8, "gather.x");
    let n = x.numel();
    let perm: Vec<u32> = (0..n as u32).rev().collect();
    let inverse: Vec<u32> = (0..n as u32).rev().collect();
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone(), false);
    let shuffled = tape.gather(ix, Arc::new(perm), vec![n]).unwrap();
    let back = tape.gather(shuffled, Arc::new(inverse), vec![2, 3, 4]).unwrap();
    assert_eq!(tape.data(back), x.data());
}

#[test]
fn elementwise_suite_fd_gradients() {
    // Smooth ops at random points; relu shifted away from its kink.
    for seed in 0..3u64 {
        let x = randn(&[4, 5], seed, "ew.x");
        let params = vec![("x".to_string(), x)];
        for op in ["gelu", "tanh", "softmax", "layernorm", "relu", "abs"] {
            let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, |t, ids| {
                let y = match op {
                    "gelu" => t.gelu(ids[0])?,
                    "tanh" => t.tanh(ids[0])?,
                    "softmax" => t.softmax(ids[0], 1)?,
                    "layernorm" => t.layernorm(ids[0], 1, 1e-5)?,
                    "relu" => {
                        // Shift so no preactivation sits within fd range of 0.
                        let s = t.add_scalar(ids[0], 3.0)?;
                        t.relu(s)?
                    }
                    "abs" => {
                        let s = t.add_scalar(ids[0], 3.0)?;
                        t.abs(s)?
                    }
                    _ => unreachable!(),
                };
                let w = t.mul(y, y)?;
                t.mean_all(w)
            })
            .unwrap();
            assert!(rep.ok(), "{op} fd seed {seed}: max err {}", rep.max_err);
        }
    }
}

#[test]
fn bmm_and_broadcast_fd_gradients() {
    let params = vec![
        ("a".to_string(), randn(&[3, 2, 4], 9, "bmm.a")),
        ("b".to_string(), randn(&[3, 4, 2], 9, "bmm.b")),
        ("bias".to_string(), randn(&[2, 2], 9, "bmm.bias")),
    ];
    let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, |t, ids| {
        let p = t.bmm(ids[0], ids[1])?;
        let q = t.add_bcast(p, ids[2])?;
        let r = t.mul(q, q)?;
        t.mean_all(r)
    })
    .unwrap();
    assert!(rep.ok(), "bmm fd: max err {}", rep.max_err);

    let params = vec![
        ("a".to_string(), randn(&[2, 3, 4], 10, "bmmnt.a")),
        ("b".to_string(), randn(&[2, 5, 4], 10, "bmmnt.b")),
    ];
    let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, |t, ids| {
        let p = t.bmm_nt(ids[0], ids[1])?;
        let r = t.mul(p, p)?;
        t.mean_all(r)
    })
    .unwrap();
    assert!(rep.ok(), "bmm_nt fd: max err {}", rep.max_err);
}

#[test]
fn nchw_bias_ops_fd_gradients() {
    let params = vec![
        ("x".to_string(), randn(&[2, 3, 4, 4], 11, "bias.x")),
        ("c".to_string(), randn(&[3], 11, "bias.c")),
        ("nc".to_string(), randn(&[2, 3], 11, "bias.nc")),
    ];
    let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, |t, ids| {
        let y = t.add_bias_nchw(ids[0], ids[1])?;
        let y = t.mul_bias_nc(y, ids[2])?;
        let y = t.add_bias_nc(y, ids[2])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })
    .unwrap();
    assert!(rep.ok(), "nchw bias fd: max err {}", rep.max_err);
}

#[test]
fn gather_rows_fd_gradients() {
    let params = vec![("x".to_string(), randn(&[4, 3], 12, "gr.x"))];
    let idx = Arc::new(vec![2u32, 0, 2, 3, 1, 1]);
    let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, move |t, ids| {
        let y = t.gather_rows(ids[0], idx.clone())?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })
    .unwrap();
    assert!(rep.ok(), "gather_rows fd: max err {}", rep.max_err);
}

#[test]
fn ops_are_pure() {
    // Same inputs, two fresh tapes: bit-identical outputs.
    let x = randn(&[2, 3, 8, 8], 13, "pure.x");
    let w = randn(&[4, 3, 3, 3], 13, "pure.w");
    let b = randn(&[4], 13, "pure.b");
    let run = || {
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone(), false);
        let iw = tape.leaf(w.clone(), false);
        let ib = tape.leaf(b.clone(), false);
        let y = tape.conv2d(ix, iw, ib, 1, 1).unwrap();
        let z = tape.gelu(y).unwrap();
        let s = tape.softmax(z, 1).unwrap();
        tape.data(s).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 1e308), false);
    let err = tape.mul(x, x);
    assert!(matches!(err, Err(crate::error::Error::NonFinite { .. })));
}

#[test]
fn fd_suite_over_ten_seeds() {
    // Compact form of the gradient acceptance property: a mixed graph
    // touching every differentiable op class, ten seeds.
    for seed in 0..10u64 {
        let params = vec![
            ("x".to_string(), randn(&[1, 2, 4, 4], seed, "suite.x")),
            ("w".to_string(), randn(&[2, 2, 3, 3], seed, "suite.w")),
            ("b".to_string(), randn(&[2], seed, "suite.b")),
            ("m".to_string(), randn(&[8, 6], seed, "suite.m")),
        ];
        let rep = gradcheck::check(&params, DEFAULT_STEP, DEFAULT_TOL, |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let y = t.gelu(y)?;
            let flat = t.reshape(y, vec![4, 8])?;
            let z = t.matmul(flat, ids[3])?;
            let z = t.layernorm(z, 1, 1e-5)?;
            let z = t.softmax(z, 1)?;
            let sq = t.mul(z, z)?;
            t.mean_all(sq)
        })
        .unwrap();
        assert!(rep.ok(), "suite seed {seed}: max err {}", rep.max_err);
    }
}
