use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, FdOptions};
use super::*;
use crate::error::Error;

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Scalar-loop bilinear interpolation with clamping, independent of the
/// kernel's corner bookkeeping.
fn bilinear_oracle(f: &[f64], c: usize, h: usize, w: usize, y: f64, x: f64) -> Vec<f64> {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let pix = |ch: usize, yy: isize, xx: isize| -> f64 {
        let yy = yy.clamp(0, h as isize - 1) as usize;
        let xx = xx.clamp(0, w as isize - 1) as usize;
        f[(ch * h + yy) * w + xx]
    };
    let (yf, xf) = (y.floor(), x.floor());
    let (ty, tx) = (y - yf, x - xf);
    let (yi, xi) = (yf as isize, xf as isize);
    (0..c)
        .map(|ch| {
            (1.0 - ty) * ((1.0 - tx) * pix(ch, yi, xi) + tx * pix(ch, yi, xi + 1))
                + ty * ((1.0 - tx) * pix(ch, yi + 1, xi) + tx * pix(ch, yi + 1, xi + 1))
        })
        .collect()
}

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::new();
    let i = tape.constant(t32(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(t32(&[2, 2], &[3., 4., 5., 6.]));
    assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
    let r = tape.constant(t32(&[1, 2], &[1., 2.]));
    let c = tape.constant(t32(&[2, 1], &[3., 4.]));
    assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f32>::randn(&mut r, &[3, 4], 1.0);
    let b = Tensor::<f32>::randn(&mut r, &[4, 2], 1.0);
    let want = naive_matmul(&a.to_f64(), &b.to_f64(), 3, 4, 2);
    let tape = Tape::new();
    let got = tape.constant(a).matmul(tape.constant(b)).unwrap().value();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() <= 1e-6);
    }
}

#[test]
fn matmul_broadcasts_batch_dims() {
    let mut r = rng(2);
    let a = Tensor::<f64>::randn(&mut r, &[2, 3, 2, 4], 1.0);
    let b = Tensor::<f64>::randn(&mut r, &[3, 4, 5], 1.0);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
    assert_eq!(out.shape(), &[2, 3, 2, 5]);
    let (ad, bd) = (a.to_f64(), b.to_f64());
    for i in 0..2 {
        for j in 0..3 {
            let want = naive_matmul(&ad[(i * 3 + j) * 8..(i * 3 + j + 1) * 8], &bd[j * 20..(j + 1) * 20], 2, 4, 5);
            let got = &out.data()[(i * 3 + j) * 10..(i * 3 + j + 1) * 10];
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let u = tape.constant(t32(&[3], &[0., 0., 0.])).softmax(-1).unwrap().value();
    for v in u.data() {
        assert!((*v as f64 - 1.0 / 3.0).abs() < 1e-7);
    }
    let big = tape.constant(t32(&[2], &[1000., 1000.])).softmax(0).unwrap().value();
    assert_eq!(big.data(), &[0.5, 0.5]);

    let out = tape.constant(t32(&[3], &[1., 2., 3.])).softmax(0).unwrap().value();
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    for (i, v) in out.data().iter().enumerate() {
        let want = ((i + 1) as f64).exp() / z;
        assert!((*v as f64 - want).abs() <= 1e-6);
    }
}

#[test]
fn softmax_along_middle_axis() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn(&mut r, &[2, 3, 4], 2.0);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).softmax(1).unwrap().value();
    for o in 0..2 {
        for i in 0..4 {
            let z: f64 = (0..3).map(|j| x.at(&[o, j, i]).exp()).sum();
            for j in 0..3 {
                assert!((y.at(&[o, j, i]) - x.at(&[o, j, i]).exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn tanh_examples() {
    let tape = Tape::new();
    let x = tape.var(t32(&[3], &[0.0, 0.5, 20.0]));
    let y = x.tanh().unwrap();
    let v = y.value();
    assert_eq!(v.data()[0], 0.0);
    assert!((v.data()[1] as f64 - 0.462_117_16).abs() <= 1e-6);
    assert!(v.data()[2] > 0.999_999);
    y.sum().unwrap().backward().unwrap();
    let g = x.grad().unwrap();
    assert_eq!(g.data()[0], 1.0);
    assert!(g.data()[2].abs() < 1e-6);
}

#[test]
fn bilinear_exact_at_integer_and_mean_at_centre() {
    let mut r = rng(4);
    let f = Tensor::<f32>::randn(&mut r, &[3, 4, 5], 1.0);
    let tape = Tape::new();
    let fv = tape.constant(f.clone());
    let pts = tape.constant(t32(&[2, 2], &[2.0, 3.0, 0.0, 4.0]));
    let out = fv.bilinear_sample(pts).unwrap().value();
    for c in 0..3 {
        assert_eq!(out.at(&[0, c]), f.at(&[c, 2, 3]));
        assert_eq!(out.at(&[1, c]), f.at(&[c, 0, 4]));
    }

    let sq = tape.constant(t32(&[1, 2, 2], &[1., 2., 3., 4.]));
    let mid = sq.bilinear_sample(tape.constant(t32(&[1, 2], &[0.5, 0.5]))).unwrap().value();
    assert_eq!(mid.data(), &[2.5]);
}

#[test]
fn bilinear_matches_scalar_oracle() {
    let mut r = rng(5);
    let f = Tensor::<f32>::randn(&mut r, &[3, 5, 7], 1.0);
    let pts = Tensor::<f32>::from_fn(&[20, 2], |i| {
        let lim = if i % 2 == 0 { 4.0 } else { 6.0 };
        (((i * 7919) % 1000) as f32 / 1000.0) * lim
    });
    let tape = Tape::new();
    let out = tape
        .constant(f.clone())
        .bilinear_sample(tape.constant(pts.clone()))
        .unwrap()
        .value();
    let fd = f.to_f64();
    for p in 0..20 {
        let want = bilinear_oracle(&fd, 3, 5, 7, pts.at(&[p, 0]) as f64, pts.at(&[p, 1]) as f64);
        for c in 0..3 {
            assert!((out.at(&[p, c]) as f64 - want[c]).abs() <= 1e-6);
        }
    }
}

#[test]
fn bilinear_clamps_out_of_range_points() {
    let tape = Tape::new();
    let f = tape.var(t32(&[1, 2, 2], &[1., 2., 3., 4.]));
    let p = tape.var(t32(&[2, 2], &[-3.0, 0.25, 0.5, 9.0]));
    let out = f.bilinear_sample(p).unwrap();
    assert_eq!(out.value().data(), &[1.25, 3.0]);
    out.sum().unwrap().backward().unwrap();
    let gp = p.grad().unwrap();
    // clamped coordinates carry no gradient
    assert_eq!(gp.data()[0], 0.0);
    assert_eq!(gp.data()[3], 0.0);
    assert!(gp.data()[1] != 0.0);
    assert!(gp.data()[2] != 0.0);
}

#[test]
fn bilinear_rejects_non_finite_points() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::<f32>::zeros(&[1, 2, 2]));
    let p = tape.constant(t32(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(f.bilinear_sample(p), Err(Error::Input(_))));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.var(t32(&[3], &[1., 2., 3.]));
    x.sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.var(t32(&[2], &[1., 2.]));
    let loss = x.mul(x).unwrap().sum().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    // repeated calls accumulate
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.var(t32(&[2], &[1., 2.]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::new();
    let x = tape.constant(t32(&[1], &[1e30]));
    assert!(matches!(x.mul(x), Err(Error::NonFinite("mul"))));
}

#[test]
fn tape_is_topologically_ordered() {
    let tape = Tape::<f64>::new();
    let a = tape.var(Tensor::full(&[2], 1.0));
    let b = a.tanh().unwrap();
    let c = b.add(a).unwrap();
    assert!(a.id() < b.id() && b.id() < c.id());
    assert_eq!(tape.len(), 3);
}

#[test]
fn forward_replay_is_bit_identical() {
    let mut r = rng(6);
    let a = Tensor::<f32>::randn(&mut r, &[4, 6], 1.0);
    let b = Tensor::<f32>::randn(&mut r, &[6, 3], 1.0);
    let run = || {
        let tape = Tape::new();
        let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        y.softmax(-1).unwrap().tanh().unwrap().value()
    };
    assert!(run().bit_eq(&run()));
}

fn fd() -> FdOptions {
    FdOptions::default()
}

fn weighted<'t>(y: Var<'t, f64>, seed: u64) -> crate::Result<Var<'t, f64>> {
    // fixed random weighting so that the loss is not a plain sum
    let mut r = rng(seed);
    let w = Tensor::<f64>::randn(&mut r, &y.shape(), 1.0);
    y.mul(y.tape().constant(w))?.sum()
}

fn assert_fd<F>(f: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
{
    let errs = check(f, inputs, fd()).unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e <= tol, "input {i}: rel err {e}");
    }
}

#[test]
fn grad_elementwise_and_broadcast() {
    let mut r = rng(10);
    let a = Tensor::randn(&mut r, &[3, 4], 1.0);
    let b = Tensor::randn(&mut r, &[3, 4], 1.0);
    let v = Tensor::randn(&mut r, &[4], 1.0);
    let c = Tensor::randn(&mut r, &[3], 1.0);
    assert_fd(
        |_, x| weighted(x[0].mul(x[1])?.sub(x[0])?.add(x[1])?.scale(0.7)?, 1),
        &[a.clone(), b],
        1e-3,
    );
    assert_fd(|_, x| weighted(x[0].add_along(x[1], -1)?.mul_along(x[2], 0)?, 2), &[a, v, c], 1e-3);
}

#[test]
fn grad_matmul_batched() {
    let mut r = rng(11);
    let a = Tensor::randn(&mut r, &[2, 3, 4], 1.0);
    let b = Tensor::randn(&mut r, &[4, 5], 1.0);
    assert_fd(|_, x| weighted(x[0].matmul(x[1])?, 3), &[a, b], 1e-3);
}

#[test]
fn grad_shape_ops() {
    let mut r = rng(12);
    let a = Tensor::randn(&mut r, &[2, 3, 4], 1.0);
    let b = Tensor::randn(&mut r, &[2, 2, 4], 1.0);
    assert_fd(
        |_, x| {
            let c = Var::concat(&[x[0], x[1]], 1)?;
            let s = c.slice(1, 1, 3)?.transpose()?.reshape(&[6, 4])?;
            weighted(s, 4)
        },
        &[a, b],
        1e-3,
    );
}

#[test]
fn grad_softmax_tanh_gelu() {
    let mut r = rng(13);
    let a = Tensor::randn(&mut r, &[3, 5], 1.5);
    assert_fd(|_, x| weighted(x[0].softmax(-1)?, 5), std::slice::from_ref(&a), 1e-3);
    assert_fd(|_, x| weighted(x[0].softmax(0)?, 6), std::slice::from_ref(&a), 1e-3);
    assert_fd(|_, x| weighted(x[0].tanh()?, 7), std::slice::from_ref(&a), 1e-3);
    assert_fd(|_, x| weighted(x[0].gelu()?, 8), std::slice::from_ref(&a), 1e-3);
    assert_fd(|_, x| x[0].tanh()?.mean(), &[a], 1e-3);
}

#[test]
fn grad_bilinear_feature_and_coordinates() {
    let mut r = rng(14);
    let f = Tensor::randn(&mut r, &[3, 5, 6], 1.0);
    // interior fractional points away from integer kinks and clamp borders
    let p = Tensor::from_fn(&[12, 2], |i| {
        let base = ((i * 37) % 9) as f64 * 0.45 + 0.2;
        let lim = if i % 2 == 0 { 3.7 } else { 4.7 };
        (base % lim).max(0.13) + 0.05
    });
    assert_fd(|_, x| weighted(x[0].bilinear_sample(x[1])?, 9), &[f, p], 1e-3);
}

#[test]
fn grad_conv_groupnorm_resize_pool() {
    let mut r = rng(15);
    let x = Tensor::randn(&mut r, &[3, 6, 5], 1.0);
    let w = Tensor::randn(&mut r, &[4, 3, 3, 3], 0.5);
    let b = Tensor::randn(&mut r, &[4], 0.5);
    assert_fd(|_, v| weighted(v[0].conv2d(v[1], Some(v[2]), 2, 1)?, 10), &[x.clone(), w, b], 1e-3);

    let g = Tensor::randn(&mut r, &[4], 1.0);
    let bb = Tensor::randn(&mut r, &[4], 1.0);
    let y = Tensor::randn(&mut r, &[4, 3, 3], 1.0);
    assert_fd(|_, v| weighted(v[0].group_norm(v[1], v[2], 2)?, 11), &[y.clone(), g, bb], 1e-3);
    assert_fd(|_, v| weighted(v[0].resize(7, 5)?, 12), std::slice::from_ref(&y), 1e-3);
    assert_fd(|_, v| weighted(v[0].resize(2, 2)?, 13), &[y], 1e-3);
    let z = Tensor::randn(&mut r, &[2, 4, 6], 1.0);
    assert_fd(|_, v| weighted(v[0].avg_pool(2)?, 14), &[z], 1e-3);
}

#[test]
fn grad_cross_entropy() {
    let mut r = rng(16);
    let x = Tensor::randn(&mut r, &[6, 4], 2.0);
    assert_fd(|_, v| v[0].cross_entropy(&[0, 3, 1, 1, 2, 0]), &[x], 1e-3);
}

#[test]
fn grad_composite_through_sampling_coordinates() {
    // coordinates produced by a tanh-bounded linear head, as in deformable attention
    let mut r = rng(17);
    let q = Tensor::randn(&mut r, &[5, 3], 1.0);
    let w = Tensor::randn(&mut r, &[3, 2], 0.5);
    let f = Tensor::randn(&mut r, &[2, 6, 6], 1.0);
    assert_fd(
        |tape, v| {
            let off = v[0].matmul(v[1])?.tanh()?.scale(1.7)?;
            let base = tape.constant(Tensor::from_fn(&[5, 2], |i| 1.3 + (i % 3) as f64 * 0.9));
            let pts = off.add(base)?;
            let s = v[2].bilinear_sample(pts)?;
            weighted(s.softmax(-1)?, 15)
        },
        &[q, w, f],
        1e-3,
    );
}

#[test]
fn injected_fault_breaks_the_check() {
    let mut r = rng(18);
    let a = Tensor::randn(&mut r, &[2, 3], 1.0);
    let b = Tensor::randn(&mut r, &[3, 2], 1.0);
    let errs = check(
        |tape, x| {
            tape.inject_backward_fault(true);
            weighted(x[0].matmul(x[1])?, 19)
        },
        &[a, b],
        fd(),
    )
    .unwrap();
    assert!(errs[0] > 0.1);
}

#[test]
fn tapes_work_on_separate_threads() {
    let handles: Vec<_> = (0..3)
        .map(|i| {
            std::thread::spawn(move || {
                let tape = Tape::<f32>::new();
                let x = tape.var(Tensor::full(&[4], i as f32));
                x.mul(x).unwrap().sum().unwrap().backward().unwrap();
                x.grad().unwrap().data()[0]
            })
        })
        .collect();
    let got: Vec<f32> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(got, vec![0.0, 2.0, 4.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f32..50.0, 1..40), shift in -100.0f32..100.0) {
        let n = v.len();
        let tape = Tape::new();
        let x = Tensor::new(&[n], v.clone()).unwrap();
        let y = tape.constant(x.clone()).softmax(0).unwrap().value();
        let s: f64 = y.data().iter().map(|&p| p as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let shifted = tape.constant(x.map(|a| a + shift)).softmax(0).unwrap().value();
        prop_assert!(y.max_abs_diff(&shifted) < 1e-5);
    }

    #[test]
    fn bilinear_is_linear_between_neighbours(
        seed in 0u64..1000, row in 0usize..4, col in 0usize..5, t in 0.0f64..1.0,
    ) {
        let mut r = rng(seed);
        let f = Tensor::<f64>::randn(&mut r, &[2, 5, 6], 1.0);
        let tape = Tape::new();
        let fv = tape.constant(f.clone());
        let along_x = fv.bilinear_sample(tape.constant(Tensor::from_f64(&[1, 2], &[row as f64, col as f64 + t]).unwrap())).unwrap().value();
        let along_y = fv.bilinear_sample(tape.constant(Tensor::from_f64(&[1, 2], &[row as f64 + t, col as f64]).unwrap())).unwrap().value();
        for c in 0..2 {
            let wx = (1.0 - t) * f.at(&[c, row, col]) + t * f.at(&[c, row, col + 1]);
            let wy = (1.0 - t) * f.at(&[c, row, col]) + t * f.at(&[c, row + 1, col]);
            prop_assert!((along_x.at(&[0, c]) - wx).abs() < 1e-12);
            prop_assert!((along_y.at(&[0, c]) - wy).abs() < 1e-12);
        }
    }
}
