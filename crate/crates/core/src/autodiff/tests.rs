use super::*;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Projects an arbitrary-shaped output onto a scalar with fixed pseudo-random
/// weights so that every output coordinate reaches the gradient.
fn project(t: &mut Tape, out: Var) -> crate::Result<Var> {
    let n = t.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let shape = t.shape(out).to_vec();
    let w = t.constant(&shape, w)?;
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

/// Runs grad_check at ten random points and returns the worst error seen.
fn check_random<F>(seed: u64, shape: &[usize], f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> crate::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|_| {
            let x = random_tensor(&mut rng, shape);
            grad_check(&f, &x, 1e-5).unwrap().max_rel_error
        })
        .fold(0.0, f64::max)
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let eye = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = t.matmul(eye, m).unwrap();
    assert_eq!(t.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let proj = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let b = t.constant(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let out = t.matmul(proj, b).unwrap();
    assert_eq!(t.value(out), &[5.0, 6.0, 0.0, 0.0]);

    let col = t.constant(&[2, 1], vec![2.0, 1.0]).unwrap();
    let out = t.matmul(m, col).unwrap();
    assert_eq!(t.shape(out), &[2, 1]);
    assert_eq!(t.value(out), &[4.0, 10.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    let b = Tensor::new(vec![3, 2], vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9]).unwrap();
    let err = check_random(1, &[4, 3], |t, x| {
        let w = t.leaf(&b);
        let y = t.matmul(x, w)?;
        project(t, y)
    });
    assert!(err < 1e-4, "{err}");
    // gradient with respect to the right operand
    let a = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap();
    let err = check_random(2, &[3, 2], |t, x| {
        let l = t.leaf(&a);
        let y = t.matmul(l, x)?;
        project(t, y)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let ones = t.constant(&[3], vec![1.0; 3]).unwrap();
    let zeros = t.constant(&[3], vec![0.0; 3]).unwrap();
    let x = t.constant(&[3], vec![1.0, 1.0, 1.0]).unwrap();
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

    let g2 = t.constant(&[2], vec![1.0; 2]).unwrap();
    let b2 = t.constant(&[2], vec![0.0; 2]).unwrap();
    let x = t.constant(&[2], vec![0.0, 2.0]).unwrap();
    let y = t.layer_norm(x, g2, b2, 1e-12).unwrap();
    assert!(close(t.value(y), &[-1.0, 1.0], 1e-9));

    let gain = t.constant(&[3], vec![2.0; 3]).unwrap();
    let bias = t.constant(&[3], vec![1.0; 3]).unwrap();
    let x = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
    // sigma = sqrt(2/3): (x - 2) / sigma * 2 + 1
    assert!(close(t.value(y), &[-1.449, 1.0, 3.449], 1e-3), "{:?}", t.value(y));
}

#[test]
fn layer_norm_rows_have_zero_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[5, 8]);
    let mut t = Tape::new();
    let xv = t.leaf(&x);
    let g = t.constant(&[8], vec![1.0; 8]).unwrap();
    let b = t.constant(&[8], vec![0.0; 8]).unwrap();
    let y = t.layer_norm(xv, g, b, 1e-5).unwrap();
    for row in t.value(y).chunks(8) {
        assert!((row.iter().sum::<f64>() / 8.0).abs() < 1e-10);
    }
}

#[test]
fn layer_norm_gradients() {
    let gain = Tensor::vector(vec![1.2, -0.4, 0.8, 1.0]);
    let bias = Tensor::vector(vec![0.1, 0.2, -0.3, 0.0]);
    let err = check_random(4, &[3, 4], |t, x| {
        let g = t.leaf(&gain);
        let b = t.leaf(&bias);
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y)
    });
    assert!(err < 1e-4, "{err}");
    let xin = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.5, -0.2, 0.0]).unwrap();
    let err = check_random(5, &[4], |t, g| {
        let x = t.leaf(&xin);
        let b = t.leaf(&bias);
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![0.5, 1.0, -2.0]).with_grad());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, -2.0]).with_grad());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0]);

    // reuse accumulates: d/dx (x + 3x) = 4
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0]).with_grad());
    let y = t.scale(x, 3.0);
    let z = t.add(x, y).unwrap();
    let s = t.sum(z);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_empty() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
    assert!(t.backward(x).is_err());
    let mut empty = Tape::new();
    assert!(empty.backward(Var(0)).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
    let c = t.constant(&[2], vec![3.0, 4.0]).unwrap();
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn add_sub_mul_examples() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = t.constant(&[2], vec![10.0, 20.0]).unwrap();
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s), &[11.0, 22.0, 13.0, 24.0]);
    let d = t.sub(a, b).unwrap();
    assert_eq!(t.value(d), &[-9.0, -18.0, -7.0, -16.0]);
    let p = t.mul(a, b).unwrap();
    assert_eq!(t.value(p), &[10.0, 40.0, 30.0, 80.0]);
    let same = t.mul(a, a).unwrap();
    assert_eq!(t.value(same), &[1.0, 4.0, 9.0, 16.0]);
    let zero = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let z = t.add(a, zero).unwrap();
    assert_eq!(t.value(z), t.value(a));
    let bad = t.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(t.add(a, bad).is_err());
}

#[test]
fn broadcast_gradients() {
    let big = Tensor::new(vec![3, 2], vec![0.2, -0.5, 1.0, 0.7, -1.2, 0.4]).unwrap();
    for op in 0..3 {
        let err = check_random(10 + op, &[2], |t, b| {
            let a = t.leaf(&big);
            let y = match op {
                0 => t.add(a, b)?,
                1 => t.sub(a, b)?,
                _ => t.mul(a, b)?,
            };
            project(t, y)
        });
        assert!(err < 1e-4, "op {op}: {err}");
    }
    let err = check_random(13, &[3, 2], |t, a| {
        let sq = t.mul(a, a)?;
        project(t, sq)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn unary_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
    let th = t.tanh(x);
    assert!(close(t.value(th), &[-(1f64.tanh()), 0.0, 2f64.tanh()], 1e-15));
    let g = t.gelu(x);
    assert_eq!(t.value(g)[1], 0.0);
    assert!((t.value(g)[2] - 1.954_597_694).abs() < 1e-8);
    assert!((t.value(g)[0] + 0.158_808_009).abs() < 1e-8);
    let e = t.exp(x);
    assert!(close(t.value(e), &[(-1f64).exp(), 1.0, 2f64.exp()], 1e-15));
    let c = t.clamp(x, -0.5, 1.0);
    assert_eq!(t.value(c), &[-0.5, 0.0, 1.0]);
    let s = t.scale(x, -2.0);
    assert_eq!(t.value(s), &[2.0, 0.0, -4.0]);
    let a = t.add_scalar(x, 1.5);
    assert_eq!(t.value(a), &[0.5, 1.5, 3.5]);
    let pos = t.constant(&[2], vec![1.0, std::f64::consts::E]).unwrap();
    let l = t.log(pos);
    assert!(close(t.value(l), &[0.0, 1.0], 1e-15));
}

#[test]
fn unary_gradients() {
    for (i, name) in ["relu", "tanh", "gelu", "exp", "clamp", "scale", "add_scalar"]
        .iter()
        .enumerate()
    {
        let err = check_random(20 + i as u64, &[2, 3], |t, x| {
            let y = match *name {
                "relu" => t.relu(x),
                "tanh" => t.tanh(x),
                "gelu" => t.gelu(x),
                "exp" => t.exp(x),
                "clamp" => t.clamp(x, -0.8, 0.9),
                "scale" => t.scale(x, 1.7),
                _ => t.add_scalar(x, -0.3),
            };
            project(t, y)
        });
        assert!(err < 1e-4, "{name}: {err}");
    }
    let err = check_random(30, &[4], |t, x| {
        let sq = t.mul(x, x)?;
        let pos = t.add_scalar(sq, 0.5);
        let l = t.log(pos);
        project(t, l)
    });
    assert!(err < 1e-4, "log: {err}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let s = t.softmax(x).unwrap();
    let v = t.value(s).to_vec();
    assert!(close(&v[..3], &[1.0 / 3.0; 3], 1e-15));
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    assert!(close(&v[3..], &[e[0] / z, e[1] / z, e[2] / z], 1e-15));
    // shift invariance with large logits
    let big = t.constant(&[2], vec![1000.0, 1000.0]).unwrap();
    let s = t.softmax(big).unwrap();
    assert_eq!(t.value(s), &[0.5, 0.5]);
    let ls = t.log_softmax(x).unwrap();
    assert!(close(&t.value(ls)[..3], &[-(3f64.ln()); 3], 1e-15));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = random_tensor(&mut rng, &[6, 5]);
    let mut t = Tape::new();
    let xv = t.leaf(&x);
    let xv = t.scale(xv, 10.0);
    let s = t.softmax(xv).unwrap();
    for row in t.value(s).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradients() {
    let err = check_random(41, &[3, 4], |t, x| {
        let s = t.softmax(x)?;
        project(t, s)
    });
    assert!(err < 1e-4, "{err}");
    let err = check_random(42, &[3, 4], |t, x| {
        let s = t.log_softmax(x)?;
        project(t, s)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn embedding_and_select_examples() {
    let mut t = Tape::new();
    let table = t
        .constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap();
    let e = t.embedding_lookup(table, &[2, 0]).unwrap();
    assert_eq!(t.value(e), &[5.0, 6.0, 1.0, 2.0]);
    let e = t.embedding_lookup(table, &[1, 1, 1]).unwrap();
    assert_eq!(t.shape(e), &[3, 2]);
    assert_eq!(t.value(e), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    assert!(t.embedding_lookup(table, &[3]).is_err());
}

#[test]
fn embedding_gradients_scatter_add() {
    let mut t = Tape::new();
    let table = t.leaf(&Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap().with_grad());
    let e = t.embedding_lookup(table, &[2, 0, 2]).unwrap();
    let s = t.sum(e);
    t.backward(s).unwrap();
    assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    let err = check_random(50, &[4, 3], |t, x| {
        let e = t.embedding_lookup(x, &[3, 1, 3, 0])?;
        project(t, e)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn concat_and_slice_examples() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
    let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), &[2, 3]);
    assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let d = t.concat(&[b, b], 0).unwrap();
    assert_eq!(t.value(d), &[3.0, 4.0, 5.0, 6.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(t.concat(&[a, b], 0).is_err());

    let s = t.slice(c, 1, 1, 2).unwrap();
    assert_eq!(t.value(s), &[3.0, 4.0, 5.0, 6.0]);
    let s = t.slice(d, 0, 3, 1).unwrap();
    assert_eq!(t.value(s), &[5.0, 6.0]);
    assert!(t.slice(c, 1, 2, 2).is_err());
}

#[test]
fn concat_and_slice_gradients() {
    let other = Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.0, 2.0]).unwrap();
    let err = check_random(60, &[2, 3], |t, x| {
        let o = t.leaf(&other);
        let c = t.concat(&[o, x, o], 1)?;
        project(t, c)
    });
    assert!(err < 1e-4, "{err}");
    let err = check_random(61, &[3, 4], |t, x| {
        let s = t.slice(x, 1, 1, 2)?;
        let sq = t.mul(s, s)?;
        project(t, sq)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn reductions_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let m = t.mean(x);
    assert_eq!(t.item(m), 3.0);
    let s = t.sum(x);
    assert_eq!(t.item(s), 12.0);
    let sl = t.sum_last(x).unwrap();
    assert_eq!(t.value(sl), &[3.0, 9.0]);
    let r = t.reshape(x, &[4]).unwrap();
    assert_eq!(t.shape(r), &[4]);
    assert!(t.reshape(x, &[3]).is_err());
    let one = t.constant(&[1], vec![-4.0]).unwrap();
    let m = t.mean(one);
    assert_eq!(t.item(m), -4.0);
}

#[test]
fn reduction_gradients() {
    let err = check_random(70, &[3, 2], |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    });
    assert!(err < 1e-4, "{err}");
    let err = check_random(71, &[3, 2], |t, x| {
        let s = t.sum_last(x)?;
        let sq = t.mul(s, s)?;
        let r = t.reshape(sq, &[3, 1])?;
        project(t, r)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attention_single_position_returns_value() {
    let mut t = Tape::new();
    let q = t.constant(&[1, 4], vec![0.3, -0.2, 1.0, 0.5]).unwrap();
    let k = t.constant(&[1, 4], vec![1.0, 2.0, -1.0, 0.0]).unwrap();
    let v = t.constant(&[1, 4], vec![7.0, -3.0, 0.25, 9.0]).unwrap();
    let out = t.causal_attention(q, k, v, 1, 2, &[true]).unwrap();
    assert_eq!(t.value(out), &[7.0, -3.0, 0.25, 9.0]);
}

#[test]
fn attention_uniform_tokens_give_uniform_weights() {
    let seq = 5;
    let row = [0.4, -0.1, 0.7, 0.2];
    let data: Vec<f64> = (0..seq).flat_map(|_| row).collect();
    let mut t = Tape::new();
    let x = t.constant(&[seq, 4], data).unwrap();
    let out = t.causal_attention(x, x, x, seq, 2, &[true; 5]).unwrap();
    let probs = t.attention_probs(out).unwrap();
    for h in 0..2 {
        for i in 0..seq {
            for j in 0..seq {
                let p = probs[(h * seq + i) * seq + j];
                let expected = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((p - expected).abs() < 1e-15, "h{h} i{i} j{j}: {p}");
            }
        }
    }
}

#[test]
fn attention_is_causal_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let seq = 6;
    let base: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[seq, 4])).collect();
    let run = |inputs: &[Tensor]| {
        let mut t = Tape::new();
        let q = t.leaf(&inputs[0]);
        let k = t.leaf(&inputs[1]);
        let v = t.leaf(&inputs[2]);
        let out = t.causal_attention(q, k, v, seq, 2, &[true; 6]).unwrap();
        t.value(out).to_vec()
    };
    let reference = run(&base);
    for pos in 1..seq {
        let mut perturbed = base.clone();
        for p in perturbed.iter_mut() {
            for c in 0..4 {
                p.data_mut()[pos * 4 + c] += rng.random_range(-3.0..3.0);
            }
        }
        let out = run(&perturbed);
        assert_eq!(out[..pos * 4], reference[..pos * 4], "position {pos}");
        assert_ne!(out[pos * 4..], reference[pos * 4..]);
    }
}

#[test]
fn attention_skips_invalid_positions() {
    let mut t = Tape::new();
    let q = t.constant(&[3, 2], vec![1.0, 0.0, 0.5, 0.5, 0.2, 0.1]).unwrap();
    let k = t.constant(&[3, 2], vec![9.0, 9.0, 0.1, 0.3, 0.2, 0.0]).unwrap();
    let v = t.constant(&[3, 2], vec![100.0, 100.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = t.causal_attention(q, k, v, 3, 1, &[false, true, true]).unwrap();
    let vals = t.value(out);
    assert_eq!(&vals[..2], &[0.0, 0.0]);
    assert_eq!(&vals[2..4], &[1.0, 2.0]);
    assert!(vals[4] > 1.0 && vals[4] < 3.0);
}

#[test]
fn attention_rejects_bad_heads() {
    let mut t = Tape::new();
    let x = t.constant(&[2, 6], vec![0.0; 12]).unwrap();
    let err = t.causal_attention(x, x, x, 2, 4, &[true; 2]).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn attention_gradients() {
    let seq = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let others: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[2 * seq, 4])).collect();
    let valid = [false, true, true, true, true, true, false, true];
    for which in 0..3 {
        let err = check_random(91 + which as u64, &[2 * seq, 4], |t, x| {
            let a = t.leaf(&others[0]);
            let b = t.leaf(&others[1]);
            let (q, k, v) = match which {
                0 => (x, a, b),
                1 => (a, x, b),
                _ => (a, b, x),
            };
            let out = t.causal_attention(q, k, v, seq, 2, &valid)?;
            project(t, out)
        });
        assert!(err < 1e-4, "input {which}: {err}");
    }
}
