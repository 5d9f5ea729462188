use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::{rng_from_seed, SeededRng};
use crate::Error;

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut t: Tape<f64> = Tape::new();
    let id = t.constant(Tensor::identity(2));
    let x = t.constant(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let y = t.matmul(id, x).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());

    let a = t.constant(Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = t.constant(Tensor::from_f64([2, 1], &[1., 1.]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 1]);
    assert_eq!(t.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = rng_from_seed(1);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0).cast::<f32>();
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0).cast::<f32>();
    let expect = naive_matmul(&a.to_f64_vec(), &b.to_f64_vec(), 3, 4, 2);
    let mut t: Tape = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let c = t.matmul(va, vb).unwrap();
    close(&t.value(c).to_f64_vec(), &expect, 1e-6);
}

#[test]
fn matmul_shape_mismatch() {
    let mut t: Tape = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(Tensor::zeros([3]));
    let s = t.softmax(x, 0).unwrap();
    close(t.value(s).data(), &[1. / 3., 1. / 3., 1. / 3.], 1e-12);

    let x = t.constant(Tensor::from_f64([2], &[1000.0, 0.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    let v = t.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 + 1e-12);
}

#[test]
fn softmax_matches_f64_reference() {
    let mut rng = rng_from_seed(2);
    let x = uniform(&mut rng, &[7], -3.0, 3.0).cast::<f32>();
    let xs = x.to_f64_vec();
    let sum: f64 = xs.iter().map(|v| v.exp()).sum();
    let expect: Vec<f64> = xs.iter().map(|v| v.exp() / sum).collect();
    let mut t: Tape = Tape::new();
    let v = t.constant(x);
    let s = t.softmax(v, 0).unwrap();
    close(&t.value(s).to_f64_vec(), &expect, 1e-6);
}

#[test]
fn softmax_over_leading_axis() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.constant(Tensor::from_f64([2, 2], &[0.0, 1.0, 0.0, 3.0]).unwrap());
    let s = t.softmax(x, 0).unwrap();
    let v = t.value(s).data();
    close(&[v[0] + v[2], v[1] + v[3]], &[1.0, 1.0], 1e-12);
    close(&[v[0]], &[0.5], 1e-12);
}

fn reference_layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.push((row[j] - mean) / (var + eps).sqrt() * gain[j] + bias[j]);
        }
    }
    out
}

#[test]
fn layer_norm_examples() {
    let mut t: Tape<f64> = Tape::new();
    let gain = t.constant(Tensor::filled([2], 1.0));
    let bias = t.constant(Tensor::zeros([2]));
    let c = t.constant(Tensor::filled([2], 3.5));
    let y = t.layer_norm(c, gain, bias, 1e-5).unwrap();
    close(t.value(y).data(), &[0.0, 0.0], 1e-12);

    let x = t.constant(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
    let y = t.layer_norm(x, gain, bias, 1e-12).unwrap();
    close(t.value(y).data(), &[1.0, -1.0], 1e-9);
}

#[test]
fn layer_norm_matches_f64_reference() {
    let mut rng = rng_from_seed(3);
    let x = uniform(&mut rng, &[4, 6], -2.0, 2.0).cast::<f32>();
    let g = uniform(&mut rng, &[6], 0.5, 1.5).cast::<f32>();
    let b = uniform(&mut rng, &[6], -0.5, 0.5).cast::<f32>();
    let expect = reference_layer_norm(&x.to_f64_vec(), 6, &g.to_f64_vec(), &b.to_f64_vec(), 1e-5);
    let mut t: Tape = Tape::new();
    let (vx, vg, vb) = (t.constant(x), t.constant(g), t.constant(b));
    let y = t.layer_norm(vx, vg, vb, 1e-5).unwrap();
    close(&t.value(y).to_f64_vec(), &expect, 1e-5);
}

#[test]
fn cross_entropy_examples() {
    let mut t: Tape<f64> = Tape::new();
    let forced = t.constant(Tensor::from_f64([1, 2], &[800.0, 0.0]).unwrap());
    let l = t.cross_entropy(forced, &[0]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);

    let flat = t.constant(Tensor::zeros([3, 2]));
    let l = t.cross_entropy(flat, &[0, 1, 1]).unwrap();
    assert!((t.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);

    assert!(matches!(
        t.cross_entropy(flat, &[0, 2, 1]),
        Err(Error::LabelOutOfRange { label: 2, classes: 2 })
    ));
}

#[test]
fn cross_entropy_matches_two_step_oracle() {
    let mut rng = rng_from_seed(4);
    let logits = uniform(&mut rng, &[5, 4], -3.0, 3.0).cast::<f32>();
    let labels = [0usize, 3, 1, 2, 3];
    let lv = logits.to_f64_vec();
    let mut expect = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &lv[i * 4..(i + 1) * 4];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let p = row[y].exp() / z;
        expect -= p.ln();
    }
    expect /= 5.0;
    let mut t: Tape = Tape::new();
    let v = t.constant(logits);
    let l = t.cross_entropy(v, &labels).unwrap();
    assert!((t.value(l).item() - expect).abs() < 1e-6);
}

#[test]
fn kl_examples() {
    let mut t: Tape<f64> = Tape::new();
    let p = t.constant(Tensor::from_f64([2, 2], &[0.3, 0.7, 1.0, 0.0]).unwrap());
    let k = t.kl_divergence(p, p).unwrap();
    assert_eq!(t.value(k).item(), 0.0);

    let p = t.constant(Tensor::from_f64([2], &[1.0, 0.0]).unwrap());
    let q = t.constant(Tensor::from_f64([2], &[0.5, 0.5]).unwrap());
    let k = t.kl_divergence(p, q).unwrap();
    assert!((t.value(k).item() - core::f64::consts::LN_2).abs() < 1e-12);

    let bad = t.constant(Tensor::from_f64([2], &[0.5, 0.6]).unwrap());
    assert!(matches!(t.kl_divergence(bad, q), Err(Error::NotNormalized { .. })));
}

fn random_distribution(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

#[test]
fn kl_matches_f64_oracle() {
    let mut rng = rng_from_seed(5);
    for _ in 0..20 {
        let (rows, n) = (3, 5);
        let p: Vec<f64> = (0..rows).flat_map(|_| random_distribution(&mut rng, n)).collect();
        let q: Vec<f64> = (0..rows).flat_map(|_| random_distribution(&mut rng, n)).collect();
        let mut expect = 0.0;
        for i in 0..rows * n {
            expect += p[i] * (p[i] / q[i]).ln();
        }
        expect /= rows as f64;
        let mut t: Tape<f64> = Tape::new();
        let vp = t.constant(Tensor::from_f64([rows, n], &p).unwrap());
        let vq = t.constant(Tensor::from_f64([rows, n], &q).unwrap());
        let kv = t.kl_divergence(vp, vq).unwrap();
        let k = t.value(kv).item();
        assert!(k >= 0.0);
        assert!((k - expect).abs() < 1e-6);
    }
}

#[test]
fn backward_simple_cases() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.variable(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.values(x), vec![1.0, 1.0, 1.0]);

    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.values(x), vec![2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unused() {
    let mut t: Tape<f64> = Tape::new();
    let x = t.variable(Tensor::filled([2], 1.0));
    let unused = t.variable(Tensor::filled([4], 1.0));
    assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.values(unused), vec![0.0; 4]);
}

#[test]
fn gradients_accumulate_additively() {
    let mut x: Tensor<f64> = Tensor::filled([2], 0.0);
    x.accumulate_grad(&[1.0, 2.0]).unwrap();
    x.accumulate_grad(&[0.5, 0.5]).unwrap();
    assert_eq!(x.grad().unwrap(), &[1.5, 2.5]);
    x.zero_grad();
    assert!(x.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn committed_values_are_finite() {
    let mut t: Tape<f32> = Tape::new();
    let x = t.constant(Tensor::filled([2], 3e38));
    assert!(matches!(t.add(x, x), Err(Error::NonFinite { .. })));
    assert!(Tensor::<f32>::new([1], vec![f32::NAN]).is_err());
}

#[test]
fn check_gradient_identity_sum_is_exact() {
    let x: Tensor<f64> = Tensor::from_f64([4], &[0.1, -0.3, 1.2, 2.0]).unwrap();
    let err = check_gradient(|t, v| t.sum(v), &x).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn check_gradient_softmax_sum_of_squares() {
    let mut rng = rng_from_seed(6);
    let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    let err = check_gradient(
        |t, v| {
            let s = t.softmax(v, 1)?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        },
        &x,
    )
    .unwrap();
    assert!(err < 1e-2, "{err}");
}

type Unary = fn(&mut Tape<f64>, Var) -> crate::Result<Var>;

/// Every primitive composed with a fixed random projection so the scalar
/// output depends on all components.
fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Unary)> {
    fn weigh(t: &mut Tape<f64>, v: Var) -> crate::Result<Var> {
        let shape = t.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| libm::sin(1.0 + i as f64 * 0.7)).collect();
        let w = t.constant(Tensor::from_f64(shape, &w)?);
        let p = t.mul(v, w)?;
        t.sum(p)
    }
    vec![
        ("matmul", vec![3, 4], |t, x| {
            let w = t.constant(Tensor::from_f64([4, 2], &[0.3, -1.0, 0.5, 0.2, -0.7, 1.1, 0.9, 0.4])?);
            let y = t.matmul(x, w)?;
            let xt = t.transpose(x)?;
            let y2 = t.matmul(x, xt)?;
            let c = t_const(t, &[3, 3])?;
            let s = t.add(y2, c)?;
            let a = weigh(t, y)?;
            let b = weigh(t, s)?;
            t.add(a, b)
        }),
        ("transpose", vec![2, 3], |t, x| {
            let y = t.transpose(x)?;
            weigh(t, y)
        }),
        ("add_sub_mul", vec![2, 3], |t, x| {
            let c = t_const(t, &[2, 3])?;
            let a = t.add(x, c)?;
            let s = t.sub(a, x)?;
            let m = t.mul(a, x)?;
            let m = t.add(m, s)?;
            weigh(t, m)
        }),
        ("add_bias", vec![3], |t, b| {
            let x = t_const(t, &[4, 3])?;
            let y = t.add_bias(x, b)?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        ("scale", vec![5], |t, x| {
            let y = t.scale(x, -1.7)?;
            weigh(t, y)
        }),
        ("softmax", vec![3, 4], |t, x| {
            let y = t.softmax(x, 1)?;
            weigh(t, y)
        }),
        ("layer_norm", vec![3, 5], |t, x| {
            let g = t.constant(Tensor::from_f64([5], &[1.0, 0.5, 1.5, 0.8, 1.2])?);
            let b = t.constant(Tensor::from_f64([5], &[0.1, 0.0, -0.2, 0.3, 0.0])?);
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weigh(t, y)
        }),
        ("gelu", vec![6], |t, x| {
            let y = t.gelu(x)?;
            weigh(t, y)
        }),
        ("tanh", vec![6], |t, x| {
            let y = t.tanh(x)?;
            weigh(t, y)
        }),
        ("gather_rows", vec![4, 3], |t, x| {
            let y = t.gather_rows(x, &[2, 0, 2, 3])?;
            weigh(t, y)
        }),
        ("gather", vec![4], |t, x| {
            let y = t.gather(x, vec![3, 1, 1, 0, 2, 3], &[2, 3])?;
            let y = t.mul(y, y)?;
            weigh(t, y)
        }),
        ("concat_reshape_stack", vec![2, 3], |t, x| {
            let c = t_const(t, &[2, 3])?;
            let r = t.concat_rows(&[x, c, x])?;
            let k = t.concat_cols(&[x, c])?;
            let k = t.reshape(k, &[3, 4])?;
            let s = t.stack(&[x, c])?;
            let a = weigh(t, r)?;
            let b = weigh(t, k)?;
            let d = weigh(t, s)?;
            let ab = t.add(a, b)?;
            t.add(ab, d)
        }),
        ("mean", vec![2, 2], |t, x| {
            let y = t.mul(x, x)?;
            t.mean(y)
        }),
        ("cross_entropy", vec![3, 4], |t, x| t.cross_entropy(x, &[1, 3, 0])),
        ("kl_divergence", vec![2, 4], |t, x| {
            let q = t.softmax(x, 1)?;
            let p = t.constant(Tensor::from_f64([2, 4], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.0, 0.25, 0.25])?);
            let a = t.kl_divergence(p, q)?;
            let b = t.kl_divergence(q, p)?;
            t.add(a, b)
        }),
    ]
}

fn t_const(t: &mut Tape<f64>, shape: &[usize]) -> crate::Result<Var> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|i| libm::cos(0.3 + i as f64)).collect();
    Ok(t.constant(Tensor::from_f64(shape.to_vec(), &v)?))
}

#[test]
fn every_primitive_passes_gradient_check() {
    for (name, shape, f) in primitive_cases() {
        for trial in 0..20u64 {
            let mut rng = rng_from_seed(100 + trial);
            let x = uniform(&mut rng, &shape, -2.0, 2.0);
            let err = check_gradient(f, &x).unwrap();
            assert!(err < 1e-2, "{name} trial {trial}: {err}");
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = rng_from_seed(9);
        let x = uniform(&mut rng, &[3, 4], -2.0, 2.0).cast::<f32>();
        let mut t: Tape = Tape::new();
        let v = t.variable(x);
        let s = t.softmax(v, 1).unwrap();
        let tv = t_transpose_const(&mut t, v);
        let w = t.matmul(s, tv).unwrap();
        let l = t.sum(w).unwrap();
        t.backward(l).unwrap().values(v)
    };
    assert_eq!(run(), run());
}

fn t_transpose_const(t: &mut Tape<f32>, v: Var) -> Var {
    let tr = t.transpose(v).unwrap();
    t.gelu(tr).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        row in proptest::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let mut t: Tape<f32> = Tape::new();
        let a = t.constant(Tensor::from_f64([n], &row).unwrap());
        let b = t.constant(Tensor::from_f64([n], &shifted).unwrap());
        let sa = t.softmax(a, 0).unwrap();
        let sb = t.softmax(b, 0).unwrap();
        let va = t.value(sa).to_f64_vec();
        let vb = t.value(sb).to_f64_vec();
        prop_assert!((va.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (x, y) in va.iter().zip(&vb) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_self_is_zero_and_never_negative(
        raw_p in proptest::collection::vec(0.0f64..1.0, 2..10),
        raw_q in proptest::collection::vec(0.0f64..1.0, 2..10),
        zero_at in 0usize..10,
    ) {
        let n = raw_p.len().min(raw_q.len());
        let mut p: Vec<f64> = raw_p[..n].to_vec();
        p[zero_at % n] = 0.0;
        let sp: f64 = p.iter().sum();
        prop_assume!(sp > 1e-3);
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let sq: f64 = raw_q[..n].iter().sum();
        prop_assume!(sq > 1e-3);
        let q: Vec<f64> = raw_q[..n].iter().map(|v| v / sq).collect();
        let mut t: Tape<f32> = Tape::new();
        let vp = t.constant(Tensor::from_f64([n], &p).unwrap());
        let vq = t.constant(Tensor::from_f64([n], &q).unwrap());
        let same = t.kl_divergence(vp, vp).unwrap();
        prop_assert_eq!(t.value(same).item(), 0.0);
        let k = t.kl_divergence(vp, vq).unwrap();
        prop_assert!(t.value(k).item() >= -1e-7);
    }

    #[test]
    fn tensor_shape_matches_data(dims in proptest::collection::vec(1usize..5, 0..4)) {
        let n: usize = dims.iter().product();
        let t: Tensor = Tensor::new(dims.clone(), vec![0.5; n]).unwrap();
        prop_assert_eq!(t.numel(), t.data().len());
        prop_assert!(Tensor::<f32>::new(dims, vec![0.5; n + 1]).is_err());
    }
}
