//! Minimal differentiable computation: tensors, a recording tape with
//! reverse-mode gradients, the layers the policy needs, Adam, and categorical
//! sampling.

mod dist;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use dist::{argmax, categorical_sample, log_probs, Draw};
pub use graph::{log_sum_exp, Graph, InputGrads, Var};
pub use layers::{NormMode, RunningStats};
pub use optim::Adam;
pub use params::{decode_named_tensors, encode_named_tensors, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::layers::{batch_norm, multi_head_attention};
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    /// Central finite differences of a scalar function of several inputs,
    /// compared with the tape's gradients. Returns the max relative error.
    fn grad_check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::inference();
            let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vs);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vs);
        let mut store = ParamStore::new();
        let grads = g.backward(out, &mut store).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vs[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = Rng::seed_from_u64(seed);
        let n = g.value(x).len();
        let c: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let y = g.mul_const(x, &c).unwrap();
        g.sum(y)
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap());
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zb = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let z = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.linear(z, eye, Some(b)).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = Rng::seed_from_u64(5);
        let (m, k, n) = (7, 5, 4);
        let x = rand_tensor(&[m, k], &mut rng);
        let w = rand_tensor(&[k, n], &mut rng);
        let b = rand_tensor(&[n], &mut rng);
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = b.data()[j];
                for t in 0..k {
                    acc += x.data()[i * k + t] * w.data()[t * n + j];
                }
                assert!((g.value(y).data()[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for round in 1..=2 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let s = g.sum(x);
            g.backward(s, &mut store).unwrap();
            assert_eq!(store.grad(id), &[round as f64; 3]);
        }
    }

    #[test]
    fn linear_weight_gradient_is_analytic() {
        // d/dW sum(xW) = x^T 1: each column of the gradient is the column sums of x.
        let mut rng = Rng::seed_from_u64(8);
        let x = rand_tensor(&[4, 3], &mut rng);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[3, 2], &mut rng)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(&store, w);
        let y = g.linear(xv, wv, None).unwrap();
        let s = g.sum(y);
        g.backward(s, &mut store).unwrap();
        for i in 0..3 {
            let col: f64 = (0..4).map(|r| x.data()[r * 3 + i]).sum();
            assert!((store.grad(w)[i * 2] - col).abs() < 1e-12);
            assert!((store.grad(w)[i * 2 + 1] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]), true);
        let mut s = ParamStore::new();
        assert!(matches!(g.backward(x, &mut s), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut rng = Rng::seed_from_u64(3);
        let mut g = Graph::inference();
        let q = g.constant(rand_tensor(&[2, 4], &mut rng));
        let kv = rand_tensor(&[1, 4], &mut rng);
        let k = g.constant(rand_tensor(&[1, 4], &mut rng));
        let v = g.constant(kv.clone());
        let w = rand_tensor(&[4, 4], &mut rng);
        let wv = g.constant(w.clone());
        let out = multi_head_attention(&mut g, q, k, v, 2, &[0, 0], 1, None, wv).unwrap();
        let vw = g.linear(v, wv, None).unwrap();
        for r in 0..2 {
            for j in 0..4 {
                assert!((g.value(out).row(r)[j] - g.value(vw).row(0)[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_hand_unrolled_two_tokens() {
        // One head, dim 2, two query rows attending to the same two keys.
        let qd = [0.3, -0.7, 1.1, 0.4];
        let kd = [0.5, 0.2, -0.9, 0.8];
        let vd = [1.0, 2.0, -3.0, 0.5];
        let mut g = Graph::inference();
        let q = g.constant(Tensor::new(vec![2, 2], qd.to_vec()).unwrap());
        let k = g.constant(Tensor::new(vec![2, 2], kd.to_vec()).unwrap());
        let v = g.constant(Tensor::new(vec![2, 2], vd.to_vec()).unwrap());
        let out = g.attention(q, k, v, 1, &[0, 0], 2, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for r in 0..2 {
            let s0 = (qd[2 * r] * kd[0] + qd[2 * r + 1] * kd[1]) * s;
            let s1 = (qd[2 * r] * kd[2] + qd[2 * r + 1] * kd[3]) * s;
            let p0 = s0.exp() / (s0.exp() + s1.exp());
            let p1 = 1.0 - p0;
            let expect = [p0 * vd[0] + p1 * vd[2], p0 * vd[1] + p1 * vd[3]];
            for j in 0..2 {
                assert!((g.value(out).row(r)[j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_key_has_no_influence() {
        let mut rng = Rng::seed_from_u64(4);
        let q = rand_tensor(&[3, 8], &mut rng);
        let k = rand_tensor(&[5, 8], &mut rng);
        let v = rand_tensor(&[5, 8], &mut rng);
        let mut mask = vec![false; 15];
        for r in 0..3 {
            mask[r * 5 + 2] = true;
        }
        let run = |v: &Tensor| {
            let mut g = Graph::inference();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(qv, kv, vv, 2, &[0, 0, 0], 5, Some(&mask)).unwrap();
            g.value(o).clone()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        for j in 0..8 {
            v2.data_mut()[2 * 8 + j] += 100.0;
        }
        assert_eq!(base, run(&v2));
        // Every key masked for a row is a contract violation.
        let mut g = Graph::inference();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let all = vec![true; 15];
        assert!(matches!(g.attention(qv, kv, vv, 2, &[0, 0, 0], 5, Some(&all)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn heads_must_divide_dimension() {
        let mut g = Graph::inference();
        let q = g.constant(Tensor::zeros(&[1, 6]));
        assert!(matches!(g.attention(q, q, q, 4, &[0], 1, None), Err(crate::Error::Config(_))));
    }

    #[test]
    fn attention_invariant_to_permuting_masked_keys() {
        let mut rng = Rng::seed_from_u64(21);
        let q = rand_tensor(&[2, 4], &mut rng);
        let mut k = rand_tensor(&[4, 4], &mut rng);
        let mut v = rand_tensor(&[4, 4], &mut rng);
        let mask = vec![false, true, false, true, false, true, false, true];
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::inference();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(qv, kv, vv, 2, &[0, 0], 4, Some(&mask)).unwrap();
            g.value(o).clone()
        };
        let before = run(&k, &v);
        for t in [&mut k, &mut v] {
            let d = t.data_mut();
            for j in 0..4 {
                d.swap(4 + j, 12 + j);
            }
        }
        let after = run(&k, &v);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_norm_constant_channel_yields_beta() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::filled(&[6, 2], 3.0));
        let gamma = g.constant(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
        let beta = g.constant(Tensor::new(vec![2], vec![0.25, 0.75]).unwrap());
        let mut rs = RunningStats::new(2);
        let y = batch_norm(&mut g, x, gamma, beta, 6, NormMode::Train, &mut rs, true).unwrap();
        for r in 0..6 {
            assert_eq!(g.value(y).row(r), &[0.25, 0.75]);
        }
    }

    #[test]
    fn batch_norm_train_standardizes_each_channel() {
        let mut rng = Rng::seed_from_u64(6);
        let x = Tensor::from_fn(&[50, 3], |i| rng.uniform_range(-2.0, 5.0) * (1 + i % 3) as f64);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::filled(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mut rs = RunningStats::new(3);
        let y = batch_norm(&mut g, xv, gamma, beta, 50, NormMode::Train, &mut rs, false).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..50).map(|r| g.value(y).row(r)[j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6 * 50.0 || (var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batch_norm_single_position_is_degenerate() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let gb = g.constant(Tensor::zeros(&[2]));
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            batch_norm(&mut g, x, gb, gb, 1, NormMode::Train, &mut rs, true),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn batch_norm_eval_converges_to_train_on_stationary_data() {
        // A fixed batch is fed repeatedly, so the running statistics converge to
        // the batch statistics and eval output approaches train output.
        let mut rng = Rng::seed_from_u64(10);
        let x = Tensor::from_fn(&[64, 4], |_| rng.uniform_range(-1.0, 3.0));
        let mut rs = RunningStats::new(4);
        let gamma = Tensor::new(vec![4], vec![1.5, 0.5, 1.0, 2.0]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap();
        let mut train_out = Tensor::zeros(&[1]);
        for _ in 0..200 {
            let mut g = Graph::inference();
            let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
            let y = batch_norm(&mut g, xv, gv, bv, 64, NormMode::Train, &mut rs, true).unwrap();
            train_out = g.value(y).clone();
        }
        let mut g = Graph::inference();
        let (xv, gv, bv) = (g.constant(x), g.constant(gamma), g.constant(beta));
        let y = batch_norm(&mut g, xv, gv, bv, 64, NormMode::Eval, &mut rs, false).unwrap();
        for (a, b) in g.value(y).data().iter().zip(train_out.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let mut rng = Rng::seed_from_u64(12);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        let err = grad_check(vec![a, b], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let m = g.mul(s, v[0]).unwrap();
            let t = g.tanh(m);
            let r = g.relu(v[1]);
            let e = g.exp(r);
            let d = g.sub(t, e).unwrap();
            let sq = g.square(d);
            let sc = g.scale(sq, 0.7);
            let c = g.clamp(v[0], -0.5, 0.5);
            let mx = g.maximum(sc, c).unwrap();
            let ac = g.add_const(mx, &[0.1; 12]).unwrap();
            weighted_sum(g, ac, 1)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradients_of_linear_and_structural_ops() {
        let mut rng = Rng::seed_from_u64(13);
        let x = rand_tensor(&[6, 3], &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let err = grad_check(vec![x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let gm = g.group_mean(y, 3).unwrap();
            let gr = g.gather_rows(gm, &[1, 0, 1, 1]).unwrap();
            let sl = g.slice_cols(y, 1, 2).unwrap();
            let sl = g.gather_rows(sl, &[0, 2, 4, 5]).unwrap();
            let cc = g.concat_cols(&[gr, sl]).unwrap();
            let cr = g.concat_rows(&[cc, cc]).unwrap();
            let rs = g.reshape(cr, &[2, 4, 6]).unwrap();
            let mean = g.mean(rs);
            let ws = weighted_sum(g, rs, 2);
            g.add(ws, mean).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradients_of_batch_norm() {
        let mut rng = Rng::seed_from_u64(14);
        let x = rand_tensor(&[8, 3], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        for groups in [8, 4] {
            let err = grad_check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
                let (y, _, _) = g.batch_norm(v[0], v[1], v[2], groups, 1e-5, None).unwrap();
                let t = g.tanh(y);
                weighted_sum(g, t, 3)
            });
            assert!(err < 1e-4, "groups {groups}: {err}");
        }
        let err = grad_check(vec![x, gamma, beta], |g, v| {
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 8, 1e-5, Some((&[0.1, 0.2, 0.3], &[0.5, 1.0, 2.0]))).unwrap();
            weighted_sum(g, y, 3)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradients_of_attention_and_pointer_ops() {
        let mut rng = Rng::seed_from_u64(15);
        let q = rand_tensor(&[5, 4], &mut rng);
        let k = rand_tensor(&[6, 4], &mut rng);
        let v = rand_tensor(&[6, 4], &mut rng);
        let groups = [0, 1, 1, 0, 1];
        let mut mask = vec![false; 15];
        mask[1] = true;
        mask[7] = true;
        mask[8] = true;
        let err = grad_check(vec![q, k, v], |g, vs| {
            let a = g.attention(vs[0], vs[1], vs[2], 2, &groups, 3, Some(&mask)).unwrap();
            let p = g.group_dot(a, vs[1], &groups, 3, 0.5).unwrap();
            let t = g.tanh(p);
            let m = g.mask_fill(t, &mask, f64::NEG_INFINITY).unwrap();
            let lsm = g.log_softmax(m).unwrap();
            let pick = g.pick_cols(lsm, &[0, 2, 0, 1, 1]).unwrap();
            let ent = g.row_entropy(m).unwrap();
            let s1 = weighted_sum(g, pick, 4);
            let s2 = weighted_sum(g, ent, 5);
            g.add(s1, s2).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_rows_normalize_and_survive_large_logits() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![2, 3], vec![700.0, -700.0, 699.0, f64::NEG_INFINITY, 0.3, -0.2]).unwrap());
        let l = g.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(l).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(g.value(l).row(1)[0], f64::NEG_INFINITY);
    }
}
