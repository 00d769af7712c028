use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::volcore::{check_gradients, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn in_unit_interval(t: &Tensor<f64>) -> bool {
    t.data().iter().all(|&v| (0.0..=1.0).contains(&v))
}

#[test]
fn additive_zero_weight_halves_features() {
    let tape = Tape::new();
    let f = random(&[1, 3, 2, 2, 2], 1);
    let w = tape.constant(Tensor::zeros([1, 3, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros([1]));
    let (att, mask) = soft_additive_attention(tape.constant(f.clone()), w, Some(b)).unwrap();
    assert!(mask.value().data().iter().all(|&m| m == 0.5));
    assert_eq!(mask.shape(), vec![1, 1, 2, 2, 2]);
    assert_eq!(*att.value(), f.map(|v| v / 2.0));
}

#[test]
fn additive_mask_in_unit_interval() {
    for seed in 0..10 {
        let tape = Tape::new();
        let f = tape.constant(random(&[2, 4, 3, 3, 3], seed).map(|v| 20.0 * v));
        let w = tape.constant(random(&[1, 4, 1, 1, 1], seed + 50));
        let (_, mask) = soft_additive_attention(f, w, None).unwrap();
        assert!(in_unit_interval(&mask.value()));
    }
}

fn identity_heads<'t>(tape: &'t Tape<f64>, d: usize) -> (Vec<HeadWeights<'t, f64>>, Var<'t, f64>) {
    let eye = || tape.constant(Tensor::eye(d));
    (
        vec![HeadWeights {
            w_q: eye(),
            w_k: eye(),
            w_v: eye(),
        }],
        eye(),
    )
}

#[test]
fn single_token_attention_weight_is_one() {
    let tape = Tape::new();
    let x = random(&[1, 8], 2);
    let heads: Vec<_> = (0..4)
        .map(|h| HeadWeights {
            w_q: tape.constant(random(&[8, 2], 10 + h)),
            w_k: tape.constant(random(&[8, 2], 20 + h)),
            w_v: tape.constant(random(&[8, 2], 30 + h)),
        })
        .collect();
    let w_o = tape.constant(random(&[8, 8], 40));
    let out = multi_head_attention(tape.constant(x.clone()), &heads, w_o).unwrap();
    for w in &out.weights {
        assert_eq!(w.value().data(), &[1.0]);
    }
    // with unit weights the output is just the value path
    let values: Vec<_> = heads
        .iter()
        .map(|h| tape.constant(x.clone()).matmul(h.w_v).unwrap())
        .collect();
    let expected = concat(&values, 1).unwrap().matmul(w_o).unwrap();
    assert_eq!(*out.output.value(), *expected.value());
}

/// Dense loops for `softmax(x xᵀ / √d) x`.
fn dense_self_attention(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut logits = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            let dot: f64 = (0..d).map(|k| xd[i * d + k] * xd[j * d + k]).sum();
            logits[i * t + j] = dot / (d as f64).sqrt();
        }
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = &logits[i * t..(i + 1) * t];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..d {
            out[i * d + k] = (0..t).map(|j| e[j] / z * xd[j * d + k]).sum();
        }
    }
    (logits, out)
}

#[test]
fn identity_projections_match_dense_oracle() {
    for seed in 0..5 {
        let tape = Tape::new();
        let x = random(&[6, 4], seed).map(|v| 2.0 * v);
        let (heads, w_o) = identity_heads(&tape, 4);
        let out = multi_head_attention(tape.constant(x.clone()), &heads, w_o).unwrap();
        let (logits, expected) = dense_self_attention(&x);
        for (a, b) in out.logits[0].value().data().iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.output.value().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mha = MultiHeadParams::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
    assert_eq!(mha.d_k, 2);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, crate::params::Mode::Eval, false);
    let out = mha.forward(&ctx, ctx.input(random(&[10, 8], 4).map(|v| 5.0 * v))).unwrap();
    assert_eq!(out.output.shape(), vec![10, 8]);
    for w in out.weights {
        for row in w.value().data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(MultiHeadParams::new(&mut store, "bad", 10, 4, &mut rng).is_err());
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let tape = Tape::new();
    let x = random(&[5, 4], 5);
    let perm = [3, 0, 4, 1, 2];
    let px = Tensor::from_fn([5, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
    let heads: Vec<_> = (0..2)
        .map(|h| HeadWeights {
            w_q: tape.constant(random(&[4, 2], 60 + h)),
            w_k: tape.constant(random(&[4, 2], 70 + h)),
            w_v: tape.constant(random(&[4, 2], 80 + h)),
        })
        .collect();
    let w_o = tape.constant(random(&[4, 4], 90));
    let y = multi_head_attention(tape.constant(x), &heads, w_o).unwrap().output.value();
    let py = multi_head_attention(tape.constant(px), &heads, w_o).unwrap().output.value();
    for i in 0..5 {
        for k in 0..4 {
            assert!((py.data()[i * 4 + k] - y.data()[perm[i] * 4 + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn spatial_mask_constant_in_interior_for_constant_input() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::full([1, 3, 8, 8, 8], 0.7));
    let k = tape.constant(random(&[1, 1, 7, 7, 7], 6));
    let mask = spatial_attention(f, k, None).unwrap().value();
    assert_eq!(mask.shape(), &[1, 1, 8, 8, 8]);
    // voxels whose whole 7³ window lies inside the volume
    let interior: Vec<f64> = [3usize, 4]
        .iter()
        .flat_map(|&d| [3usize, 4].into_iter().flat_map(move |h| [3usize, 4].into_iter().map(move |w| (d, h, w))))
        .map(|(d, h, w)| mask.data()[(d * 8 + h) * 8 + w])
        .collect();
    assert!(interior.iter().all(|&v| v == interior[0]));
    assert!(in_unit_interval(&mask));
}

#[test]
fn channel_mask_zero_case_and_range() {
    let tape = Tape::new();
    let zeros = tape.constant(Tensor::zeros([2, 8, 2, 2, 2]));
    let fc1 = [tape.constant(random(&[2, 8], 7)), tape.constant(Tensor::zeros([2]))];
    let fc2 = [tape.constant(random(&[8, 2], 8)), tape.constant(Tensor::zeros([8]))];
    let m = channel_attention(zeros, fc1, fc2).unwrap();
    assert_eq!(m.shape(), vec![2, 8]);
    assert!(m.value().data().iter().all(|&v| v == 0.5));

    let f = tape.constant(random(&[2, 8, 2, 2, 2], 9).map(|v| 30.0 * v));
    assert!(in_unit_interval(&channel_attention(f, fc1, fc2).unwrap().value()));

    let bad = [tape.constant(random(&[3, 8], 7)), tape.constant(Tensor::zeros([3]))];
    let bad2 = [tape.constant(random(&[8, 3], 7)), tape.constant(Tensor::zeros([8]))];
    assert!(matches!(channel_attention(f, bad, bad2), Err(Error::Config(_))));

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(SpatialChannelParams::new(&mut store, "sc", 10, 4, &mut rng).is_err());
}

#[test]
fn spatial_channel_application() {
    let tape = Tape::new();
    let f = random(&[1, 2, 2, 2, 2], 10);
    let fv = tape.constant(f.clone());
    let ones_s = tape.constant(Tensor::ones([1, 1, 2, 2, 2]));
    let ones_c = tape.constant(Tensor::ones([1, 2]));
    assert_eq!(*apply_spatial_channel(fv, ones_s, ones_c).unwrap().value(), f);

    let kill = tape.constant(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
    let y = apply_spatial_channel(fv, ones_s, kill).unwrap().value();
    assert!(y.data()[8..].iter().all(|&v| v == 0.0));

    let s = random(&[1, 1, 2, 2, 2], 11).map(f64::abs);
    let c = random(&[1, 2], 12).map(f64::abs);
    let y = apply_spatial_channel(fv, tape.constant(s.clone()), tape.constant(c.clone()))
        .unwrap()
        .value();
    for ch in 0..2 {
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let v = (d * 2 + h) * 2 + w;
                    let expected = (s.data()[v] * c.data()[ch]) * f.data()[ch * 8 + v];
                    assert!((y.data()[ch * 8 + v] - expected).abs() < 1e-15);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

fn assert_grad<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
{
    for seed in 0..20 {
        let inputs: Vec<_> = shapes.iter().enumerate().map(|(i, s)| random(s, 500 * seed + i as u64)).collect();
        let r = check_gradients(&inputs, seed, &f).unwrap();
        assert!(r.max_rel_err < 1e-4, "{name} seed {seed}: {r:?}");
    }
}

#[test]
fn gradcheck_additive_attention() {
    assert_grad("additive", &[&[2, 3, 2, 2, 2], &[1, 3, 1, 1, 1], &[1]], |_, v| {
        Ok(soft_additive_attention(v[0], v[1], Some(v[2]))?.0)
    });
}

#[test]
fn gradcheck_multi_head() {
    assert_grad(
        "mha",
        &[&[3, 4], &[4, 2], &[4, 2], &[4, 2], &[4, 2], &[4, 2], &[4, 2], &[4, 4]],
        |_, v| {
            let heads = [
                HeadWeights { w_q: v[1], w_k: v[2], w_v: v[3] },
                HeadWeights { w_q: v[4], w_k: v[5], w_v: v[6] },
            ];
            Ok(multi_head_attention(v[0], &heads, v[7])?.output)
        },
    );
}

#[test]
fn gradcheck_spatial_and_channel() {
    assert_grad("spatial", &[&[1, 2, 3, 3, 2], &[1, 1, 3, 3, 3], &[1]], |_, v| {
        spatial_attention(v[0], v[1], Some(v[2]))
    });
    assert_grad("channel", &[&[2, 4, 2, 2, 1], &[2, 4], &[2], &[4, 2], &[4]], |_, v| {
        channel_attention(v[0], [v[1], v[2]], [v[3], v[4]])
    });
    assert_grad("apply", &[&[1, 2, 2, 2, 2], &[1, 1, 2, 2, 2], &[1, 2]], |_, v| {
        apply_spatial_channel(v[0], v[1], v[2])
    });
}

proptest! {
    #[test]
    fn refinement_is_monotone_in_masks(
        f in prop::collection::vec(0.0f64..2.0, 16),
        s in prop::collection::vec(0.0f64..1.0, 8),
        c in prop::collection::vec(0.0f64..1.0, 2),
        bump_s in 0usize..8,
        delta in 0.0f64..0.5,
    ) {
        let tape = Tape::new();
        let fv = tape.constant(Tensor::new([1, 2, 2, 2, 2], f).unwrap());
        let cv = tape.constant(Tensor::new([1, 2], c).unwrap());
        let base = Tensor::new([1, 1, 2, 2, 2], s).unwrap();
        let mut bumped = base.clone();
        bumped.data_mut()[bump_s] = (bumped.data()[bump_s] + delta).min(1.0);
        let y0 = apply_spatial_channel(fv, tape.constant(base), cv).unwrap().value();
        let y1 = apply_spatial_channel(fv, tape.constant(bumped), cv).unwrap().value();
        for (a, b) in y0.data().iter().zip(y1.data()) {
            prop_assert!(b.abs() >= a.abs());
        }
    }
}
