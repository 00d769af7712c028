use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::KvConfig;
use crate::error::{Error, FormatError};
use crate::params::{Ctx, Mode, ParamStore};
use crate::preprocess::Volume;
use crate::volcore::{check_gradients_sampled, Tape, Tensor, DEFAULT_STEP};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

#[test]
fn unet_desk_shape_trace() {
    let mut store = ParamStore::<f32>::new();
    let net = UNet::new(&mut store, UNetConfig::default(), &mut rng(0)).unwrap();
    assert_eq!(net.encoder_channels(), vec![8, 16, 32]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let x = ctx.input(random(&[1, 4, 16, 32, 32], 1).cast());
    let out = net.forward(&ctx, x).unwrap();
    assert_eq!(out.prob.shape(), vec![1, 1, 16, 32, 32]);
    assert!(out.prob.value().data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(out.attention.len(), 2);
    assert_eq!(out.attention[0].shape(), vec![1, 1, 16, 32, 32]);
    assert_eq!(out.attention[1].shape(), vec![1, 1, 8, 16, 16]);
}

#[test]
fn unet_attention_changes_values_not_shapes() {
    let x = random(&[2, 4, 8, 8, 8], 2).cast::<f32>();
    let run = |attention: bool| {
        let mut store = ParamStore::<f32>::new();
        let cfg = UNetConfig {
            attention,
            ..UNetConfig::default()
        };
        let net = UNet::new(&mut store, cfg, &mut rng(3)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
        let p = net.forward(&ctx, ctx.input(x.clone())).unwrap().prob;
        let v = (*p.value()).clone();
        v
    };
    let (with, without) = (run(true), run(false));
    assert_eq!(with.shape(), without.shape());
    assert_ne!(with, without);
}

#[test]
fn unet_rejects_indivisible_input_before_computing() {
    let mut store = ParamStore::<f32>::new();
    let net = UNet::new(&mut store, UNetConfig::default(), &mut rng(0)).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let x = ctx.input(Tensor::zeros([1, 4, 16, 30, 32]));
    let err = net.forward(&ctx, x).err().unwrap();
    assert!(matches!(&err, Error::Config(m) if m.contains("height")), "{err}");
    assert!(tape.op_names().iter().all(|&n| n == "leaf"));
    assert!(UNetConfig { depth: 1, ..UNetConfig::default() }.validate().is_err());
}

#[test]
fn unet_full_layout_has_23_convolutions() {
    let cfg = UNetConfig::full();
    assert_eq!(cfg.conv_count(), 23);
    let mut store = ParamStore::<f32>::new();
    let net = UNet::new(&mut store, cfg, &mut rng(0)).unwrap();
    assert_eq!(net.conv_count(), 23);
    assert_eq!(net.encoder_channels(), vec![64, 128, 256, 512, 1024]);
    assert!(net.config.check_input([64, 128, 128]).is_ok());
    assert!(net.config.check_input([24, 128, 128]).is_err());
}

#[test]
fn unet_channel_plans_for_many_configs() {
    for depth in 2..=4 {
        for base in [1, 2, 3] {
            let cfg = UNetConfig {
                depth,
                base_channels: base,
                ..UNetConfig::default()
            };
            let mut store = ParamStore::<f32>::new();
            let net = UNet::new(&mut store, cfg.clone(), &mut rng(depth as u64)).unwrap();
            let expected: Vec<usize> = (0..depth).map(|l| base * (1 << l)).collect();
            assert_eq!(net.encoder_channels(), expected);
            let side = 1 << (depth - 1);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
            let p = net.forward(&ctx, ctx.input(Tensor::ones([1, 4, side, 2 * side, side]))).unwrap().prob;
            assert_eq!(p.shape(), vec![1, 1, side, 2 * side, side]);
        }
    }
}

#[test]
fn dense_block_growth_rule() {
    let mut store = ParamStore::<f64>::new();
    let block = DenseBlock::new(
        &mut store,
        "b",
        8,
        &DenseBlockConfig {
            n_layers: 4,
            growth: 8,
        },
        &mut rng(0),
    );
    assert_eq!(block.out_channels(), 40);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let y = block.forward(&ctx, ctx.input(random(&[1, 8, 2, 4, 4], 1))).unwrap();
    assert_eq!(y.shape(), vec![1, 40, 2, 4, 4]);

    let mut store0 = ParamStore::<f64>::new();
    let empty = DenseBlock::new(&mut store0, "e", 5, &DenseBlockConfig { n_layers: 0, growth: 3 }, &mut rng(0));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store0, Mode::Eval, false);
    let x = random(&[1, 5, 2, 2, 2], 2);
    assert_eq!(*empty.forward(&ctx, ctx.input(x.clone())).unwrap().value(), x);
}

#[test]
fn dense_block_connections_are_live() {
    let mut store = ParamStore::<f64>::new();
    let cfg = DenseBlockConfig { n_layers: 3, growth: 2 };
    let block = DenseBlock::new(&mut store, "b", 3, &cfg, &mut rng(4));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let x = ctx.input(random(&[1, 3, 2, 4, 4], 5));
    let full = block.forward(&ctx, x).unwrap().value();
    for j in 0..3 {
        let ablated = block.forward_ablated(&ctx, x, Some(j)).unwrap().value();
        let start = (3 + 2 * j) * 32;
        let diff: f64 = full.data()[start..start + 64].iter().zip(&ablated.data()[start..start + 64]).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "layer {j} contributes nothing");
        assert!(ablated.data()[start..start + 64].iter().all(|&v| v == 0.0));
    }
    assert!(block.forward_ablated(&ctx, x, Some(3)).is_err());
}

#[test]
fn transition_rules() {
    assert_eq!(transition_channels(40, 0.5).unwrap(), 20);
    assert!(transition_channels(1, 0.5).is_err());
    assert!(transition_channels(4, 0.0).is_err());
    assert!(transition_channels(4, 1.5).is_err());

    let mut store = ParamStore::<f64>::new();
    let t = Transition::new(&mut store, "t", 3, 1.0, &mut rng(0)).unwrap();
    let w = store.value_mut(t.conv.weight);
    *w = Tensor::from_fn([3, 3, 1, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let x = random(&[1, 3, 4, 6, 8], 1);
    let y = t.forward(&ctx, ctx.input(x.clone())).unwrap().value();
    assert_eq!(y.shape(), &[1, 3, 2, 3, 4]);
    let tape2 = Tape::new();
    let pooled = crate::layers::avgpool3d(tape2.constant(x), 2, 2).unwrap().value();
    for (a, b) in y.data().iter().zip(pooled.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut store = ParamStore::<f64>::new();
    let t = Transition::new(&mut store, "t", 40, 0.5, &mut rng(0)).unwrap();
    assert_eq!(t.conv.c_out, 20);
    assert_eq!(crate::layers::output_extent(16, 2, 2, 0), Some(8));
}

#[test]
fn vgg_branch_shapes_and_receptive_field() {
    let mut store = ParamStore::<f64>::new();
    let vgg = VggBranch::new(&mut store, 4, &VggBranchConfig::default(), &mut rng(0)).unwrap();
    let trace = vgg.trace([4, 16, 32, 32]).unwrap();
    assert_eq!(trace.last().unwrap(), &[32, 4, 8, 8]);
    assert_eq!(trace[1], [16, 8, 16, 16]);
    let rf = vgg.receptive_fields();
    assert!(rf.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(rf, vec![6, 16]);
    assert!(VggBranch::new(&mut ParamStore::<f64>::new(), 4, &VggBranchConfig { stages: vec![(1, 4)] }, &mut rng(0)).is_err());
    assert!(vgg.trace([4, 6, 32, 32]).is_err());
}

#[test]
fn vgg_first_stage_receives_gradient() {
    let mut store = ParamStore::<f64>::new();
    let cfg = VggBranchConfig {
        stages: vec![(1, 3), (1, 4)],
    };
    let vgg = VggBranch::new(&mut store, 2, &cfg, &mut rng(5)).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Train, true);
    let y = vgg.forward(&ctx, ctx.input(random(&[1, 2, 4, 4, 4], 6))).unwrap();
    let r = tape.constant(random(&y.shape(), 7));
    let loss = y.mul(r).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let first = store.find("vgg.stage0.conv0.weight").unwrap();
    let out = ctx.finish(Some(&grads));
    let g = out.grads.iter().find(|(id, _)| *id == first).unwrap();
    assert!(g.1.max_abs() > 0.0);
}

fn tiny_hybrid(seed: u64) -> (Hybrid, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let net = Hybrid::new(&mut store, HybridConfig::tiny(), &mut rng(seed)).unwrap();
    (net, store)
}

#[test]
fn hybrid_default_traces_align() {
    let mut store = ParamStore::<f32>::new();
    let net = Hybrid::new(&mut store, HybridConfig::default(), &mut rng(0)).unwrap();
    assert_eq!(net.dense_trace.last().unwrap(), &[25, 4, 8, 8]);
    assert_eq!(net.vgg_trace.last().unwrap(), &[32, 4, 8, 8]);
    assert_eq!(net.fuse.c_in, 57);

    let bad = HybridConfig {
        dense: DenseBranchConfig {
            blocks: vec![4],
            ..DenseBranchConfig::default()
        },
        ..HybridConfig::default()
    };
    let err = Hybrid::new(&mut ParamStore::<f32>::new(), bad, &mut rng(0)).unwrap_err().to_string();
    assert!(err.contains("dense trace") && err.contains("vgg trace"), "{err}");
}

#[test]
fn hybrid_outputs_distribution() {
    let (net, store) = tiny_hybrid(1);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let out = net.forward(&ctx, ctx.input(random(&[3, 4, 4, 8, 8], 2))).unwrap();
    let p = out.probs.value();
    assert_eq!(p.shape(), &[3, 2]);
    for row in p.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    for per_sample in &out.token_attention {
        for w in per_sample {
            for row in w.value().data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
    assert!(out.spatial_mask.unwrap().value().data().iter().all(|&m| (0.0..=1.0).contains(&m)));
}

#[test]
fn hybrid_eval_has_no_cross_sample_leakage() {
    let (net, store) = tiny_hybrid(2);
    let x = random(&[1, 4, 4, 8, 8], 3);
    let doubled = Tensor::from_fn([2, 4, 4, 8, 8], |i| x.data()[i % x.len()]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let single = net.forward(&ctx, ctx.input(x)).unwrap().probs.value();
    let pair = net.forward(&ctx, ctx.input(doubled)).unwrap().probs.value();
    assert_eq!(&pair.data()[..2], single.data());
    assert_eq!(&pair.data()[2..], single.data());
}

#[test]
fn unit_masks_equal_attention_free_network() {
    let (net, mut store) = tiny_hybrid(3);
    let sc = net.spatial_channel.clone();
    store.value_mut(sc.spatial.weight).data_mut().iter_mut().for_each(|w| *w = 0.0);
    store.value_mut(sc.spatial.bias.unwrap()).data_mut()[0] = 1000.0;
    store.value_mut(sc.fc2.weight).data_mut().iter_mut().for_each(|w| *w = 0.0);
    store.value_mut(sc.fc2.bias).data_mut().iter_mut().for_each(|b| *b = 1000.0);
    let x = random(&[2, 4, 4, 8, 8], 4);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let with = net.forward(&ctx, ctx.input(x.clone())).unwrap();
    assert!(with.spatial_mask.unwrap().value().data().iter().all(|&m| m == 1.0));
    let mut plain = net.clone();
    plain.config.spatial_channel = false;
    let without = plain.forward(&ctx, ctx.input(x)).unwrap();
    assert!(without.spatial_mask.is_none());
    assert_eq!(*with.probs.value(), *without.probs.value());
}

#[test]
fn argmax_invariant_under_logit_shift() {
    let (net, mut store) = tiny_hybrid(4);
    let x = random(&[2, 4, 4, 8, 8], 5);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Eval, false);
        let p = net.forward(&ctx, ctx.input(x.clone())).unwrap().probs.value();
        let v = (*p).clone();
        v
    };
    let before = run(&store);
    store.value_mut(net.classifier.bias).data_mut().iter_mut().for_each(|b| *b += 3.0);
    let after = run(&store);
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn hybrid_end_to_end_gradcheck() {
    for seed in 0..20 {
        let (net, store) = tiny_hybrid(100 + seed);
        let mut inputs = vec![random(&[2, 4, 4, 8, 8], 200 + seed)];
        inputs.extend(store.entries().iter().map(|e| e.value.clone()));
        let report = check_gradients_sampled(&inputs, seed, DEFAULT_STEP, 24, |tape, vars| {
            let ctx = Ctx::from_vars(tape, &store, vars[1..].to_vec(), Mode::Train)?;
            Ok(net.forward(&ctx, vars[0])?.probs)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn handoff_cases() {
    let image = Volume::image(Tensor::from_fn([4, 2, 2, 2], |i| i as f32 + 1.0)).unwrap();
    let all = mask_and_feed(&image, &Tensor::ones([1, 2, 2, 2]), 0.5, HandoffMode::Mask).unwrap();
    assert!(!all.fallback);
    assert_eq!(&all.input, image.tensor());

    let none = mask_and_feed(&image, &Tensor::full([1, 2, 2, 2], 0.2), 0.5, HandoffMode::Mask).unwrap();
    assert!(none.fallback);
    assert_eq!(&none.input, image.tensor());

    let truth = Tensor::from_fn([1, 2, 2, 2], |i| (i == 0 || i == 7) as u8 as f32);
    let fed = mask_and_feed(&image, &truth, 0.5, HandoffMode::Mask).unwrap();
    let oracle = Tensor::from_fn([4, 2, 2, 2], |i| image.data()[i] * truth.data()[i % 8]);
    assert_eq!(fed.input, oracle);
    assert_eq!(fed.region, truth);

    // threshold is inclusive
    let edge = mask_and_feed(&image, &Tensor::full([1, 2, 2, 2], 0.5), 0.5, HandoffMode::Mask).unwrap();
    assert!(!edge.fallback);

    let corner = Tensor::from_fn([1, 2, 2, 2], |i| (i == 0 || i == 3) as u8 as f32);
    let boxed = mask_and_feed(&image, &corner, 0.5, HandoffMode::BoundingBox).unwrap();
    assert_eq!(boxed.region.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(mask_and_feed(&image, &Tensor::ones([1, 2, 2, 1]), 0.5, HandoffMode::Mask).is_err());
}

#[test]
fn checkpoint_round_trip_rebuilds_models() {
    let mut store = ParamStore::<f32>::new();
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let net = UNet::new(&mut store, cfg, &mut rng(9)).unwrap();
    let mut extra = KvConfig::new();
    extra.set("train.seed", 9);
    let ckpt = unet_checkpoint(&net, &store, &extra);
    let bytes = ckpt.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.encode(), bytes);
    let (net2, store2) = back.load_unet::<f32>().unwrap();
    assert_eq!(net2.config, net.config);
    for (a, b) in store.entries().iter().zip(store2.entries()) {
        assert_eq!((&a.name, &a.value), (&b.name, &b.value));
    }
    assert!(back.load_hybrid::<f32>().is_err());

    let mut hstore = ParamStore::<f32>::new();
    let hnet = Hybrid::new(&mut hstore, HybridConfig::tiny(), &mut rng(1)).unwrap();
    let h = Checkpoint::decode(&hybrid_checkpoint(&hnet, &hstore, &KvConfig::new()).encode()).unwrap();
    let (hnet2, _) = h.load_hybrid::<f32>().unwrap();
    assert_eq!(hnet2.config, hnet.config);
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut store = ParamStore::<f32>::new();
    let net = UNet::new(&mut store, UNetConfig { depth: 2, base_channels: 1, ..UNetConfig::default() }, &mut rng(0)).unwrap();
    let bytes = unet_checkpoint(&net, &store, &KvConfig::new()).encode();
    let mut flipped = bytes.clone();
    flipped[40] ^= 0x10;
    assert!(matches!(Checkpoint::decode(&flipped), Err(FormatError::Checksum { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&magic), Err(FormatError::BadMagic { .. })));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::decode(&version), Err(FormatError::VersionMismatch { found: 9, .. })));
    for cut in [0, 3, 5, 7, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn config_round_trip_and_unknown_keys() {
    let cfg = HybridConfig::default();
    assert_eq!(HybridConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    let u = UNetConfig::full();
    assert_eq!(UNetConfig::from_kv(&u.to_kv()).unwrap(), u);
    let mut kv = u.to_kv();
    kv.set("dept", 3);
    assert!(UNetConfig::from_kv(&kv).is_err());
    let kv = KvConfig::parse("vgg.stages = 2x16,oops").unwrap();
    assert!(HybridConfig::from_kv(&kv).is_err());
}
