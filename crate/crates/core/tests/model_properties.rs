use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmanet::data::{generate_clip, SyntheticSceneSpec, VideoClip};
use tmanet::model::{
    aggregate_features, normalize_frame, temporal_memory_attention, Aggregation, AttentionMap, AttentionScaling,
    EncodedFeatures, EncoderKind, ModelConfig, Stage, TmaNet,
};
use tmanet::{GradTape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn leaves(tape: &mut GradTape, mk: Tensor, mv: Tensor, qk: Tensor, qv: Tensor) -> EncodedFeatures {
    EncodedFeatures {
        memory_key: tape.leaf(mk),
        memory_value: tape.leaf(mv),
        query_key: tape.leaf(qk),
        query_value: tape.leaf(qv),
    }
}

/// Explicit exp/sum evaluation of the attention and readout, indexing the
/// memory axis as `t·h·w + position`.
fn brute_force(mk: &Tensor, mv: &Tensor, qk: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (t, ck, h, w) = (mk.shape()[0], mk.shape()[1], mk.shape()[2], mk.shape()[3]);
    let cv = mv.shape()[1];
    let n = h * w;
    let mut s = vec![vec![0.0; t * n]; n];
    let mut readout = vec![vec![0.0; cv]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..t * n)
            .map(|j| {
                let (tt, p) = (j / n, j % n);
                (0..ck).map(|c| qk.data()[c * n + i] * mk.data()[(tt * ck + c) * n + p]).sum()
            })
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..t * n {
            s[i][j] = logits[j].exp() / denom;
            let (tt, p) = (j / n, j % n);
            for c in 0..cv {
                readout[i][c] += s[i][j] * mv.data()[(tt * cv + c) * n + p];
            }
        }
    }
    (s, readout)
}

#[test]
fn attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, ck, cv, h, w) = (3, 4, 5, 2, 3);
    let mk = random(&mut rng, &[t, ck, h, w], 1.0);
    let mv = random(&mut rng, &[t, cv, h, w], 1.0);
    let qk = random(&mut rng, &[ck, h, w], 1.0);
    let qv = random(&mut rng, &[cv, h, w], 1.0);
    let (s_ref, r_ref) = brute_force(&mk, &mv, &qk);
    let mut tape = GradTape::new();
    let enc = leaves(&mut tape, mk, mv, qk, qv);
    let (readout, s) = temporal_memory_attention(&mut tape, &enc, AttentionScaling::None).unwrap();
    let map = AttentionMap::new(tape.value(s).clone(), t, h, w).unwrap();
    let n = h * w;
    for i in 0..n {
        for j in 0..t * n {
            assert!((map.row(i)[j] - s_ref[i][j]).abs() < 1e-12);
        }
        for c in 0..cv {
            assert!((tape.value(readout).data()[c * n + i] - r_ref[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn one_strong_key_takes_all_the_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, ck, cv, h, w) = (2, 4, 3, 2, 2);
    let n = h * w;
    let query_pos = 1;
    let (target_t, target_p) = (1, 2);
    // Query key at `query_pos` lies along channel 0; every memory key except
    // the target has a zero channel 0, so it is orthogonal to that query key.
    let mut qk = random(&mut rng, &[ck, h, w], 1.0);
    for c in 0..ck {
        qk.data_mut()[c * n + query_pos] = if c == 0 { 0.8 } else { 0.0 };
    }
    let mut mk = random(&mut rng, &[t, ck, h, w], 1.0);
    for tt in 0..t {
        for p in 0..n {
            for c in 0..ck {
                let v = &mut mk.data_mut()[(tt * ck + c) * n + p];
                if (tt, p) == (target_t, target_p) {
                    *v = 50.0 * qk.data()[c * n + query_pos];
                } else if c == 0 {
                    *v = 0.0;
                }
            }
        }
    }
    let mv = random(&mut rng, &[t, cv, h, w], 1.0);
    let qv = random(&mut rng, &[cv, h, w], 1.0);
    let (s_ref, r_ref) = brute_force(&mk, &mv, &qk);

    let mut tape = GradTape::new();
    let enc = leaves(&mut tape, mk, mv.clone(), qk, qv);
    let (readout, s) = temporal_memory_attention(&mut tape, &enc, AttentionScaling::None).unwrap();
    let map = AttentionMap::new(tape.value(s).clone(), t, h, w).unwrap();
    let j = target_t * n + target_p;
    assert!(map.row(query_pos)[j] >= 1.0 - 1e-6);
    assert!((map.row(query_pos)[j] - s_ref[query_pos][j]).abs() < 1e-12);
    for c in 0..cv {
        let got = tape.value(readout).data()[c * n + query_pos];
        let value = mv.data()[(target_t * cv + c) * n + target_p];
        assert!((got - value).abs() < 1e-6);
        assert!((got - r_ref[query_pos][c]).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one_over_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let t = 1 + trial % 4;
        let (ck, cv, h, w) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..5));
        let scale = if trial % 10 == 0 { 20.0 } else { 2.0 };
        let mut tape = GradTape::new();
        let enc = leaves(
            &mut tape,
            random(&mut rng, &[t, ck, h, w], scale),
            random(&mut rng, &[t, cv, h, w], 1.0),
            random(&mut rng, &[ck, h, w], scale),
            random(&mut rng, &[cv, h, w], 1.0),
        );
        let scaling = if trial % 2 == 0 { AttentionScaling::None } else { AttentionScaling::InvSqrtKey };
        let (_, s) = temporal_memory_attention(&mut tape, &enc, scaling).unwrap();
        let map = AttentionMap::new(tape.value(s).clone(), t, h, w).unwrap();
        assert!(map.max_row_sum_error() < 1e-9);
        assert!(map.weights().data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn constant_memory_values_collapse_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, ck, cv, h, w) = (4, 3, 5, 3, 3);
    let v: Vec<f64> = (0..cv).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mv = Tensor::from_fn(&[t, cv, h, w], |i| v[i / (h * w) % cv]);
    let mut tape = GradTape::new();
    let enc = leaves(
        &mut tape,
        random(&mut rng, &[t, ck, h, w], 3.0),
        mv,
        random(&mut rng, &[ck, h, w], 3.0),
        random(&mut rng, &[cv, h, w], 1.0),
    );
    let (readout, _) = temporal_memory_attention(&mut tape, &enc, AttentionScaling::None).unwrap();
    for (i, r) in tape.value(readout).data().iter().enumerate() {
        assert!((r - v[i / (h * w)]).abs() < 1e-12);
    }
}

#[test]
fn aggregation_channels_and_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = GradTape::new();
    let readout = tape.leaf(random(&mut rng, &[6, 2, 2], 1.0));
    let qv = tape.leaf(random(&mut rng, &[6, 2, 2], 1.0));
    let cat = aggregate_features(&mut tape, readout, qv, Aggregation::Concat).unwrap();
    assert_eq!(tape.shape(cat), [12, 2, 2]);
    assert_eq!(&tape.value(cat).data()[..24], tape.value(readout).data());
    assert_eq!(&tape.value(cat).data()[24..], tape.value(qv).data());
    let zero = tape.leaf(Tensor::zeros(&[6, 2, 2]));
    let sum = aggregate_features(&mut tape, zero, qv, Aggregation::Sum).unwrap();
    assert_eq!(tape.value(sum), tape.value(qv));
    let narrow = tape.leaf(Tensor::zeros(&[5, 2, 2]));
    assert!(aggregate_features(&mut tape, narrow, qv, Aggregation::Sum).is_err());
}

fn tiny(memory_length: usize) -> ModelConfig {
    ModelConfig::with_key_channels(memory_length, 4, 3, vec![Stage { width: 4, stride: 2 }, Stage { width: 8, stride: 2 }])
}

fn clip(memory_length: usize, size: usize) -> VideoClip {
    let spec = SyntheticSceneSpec { seed: 21, num_classes: 3, ..Default::default() };
    let video = generate_clip(&spec, memory_length, size, size, memory_length + 1).unwrap();
    video.final_snippet()
}

#[test]
fn memory_order_does_not_change_logits() {
    let model = TmaNet::new(tiny(3), 1).unwrap();
    let c = clip(3, 16);
    let base = model.predict(&c).unwrap();
    for order in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        let permuted = VideoClip { memory: order.iter().map(|&i| c.memory[i].clone()).collect(), ..c.clone() };
        let p = model.predict(&permuted).unwrap();
        assert!(p.main_logits.max_abs_diff(&base.main_logits) < 1e-9);
    }
}

#[test]
fn baseline_skips_attention_bitwise() {
    let model = TmaNet::new(tiny(0), 2).unwrap();
    let c = clip(0, 16);
    let pred = model.predict(&c).unwrap();
    assert!(pred.attention.is_none());

    let mut tape = GradTape::new();
    let vars = model.params().bind(&mut tape);
    let q = tape.leaf(normalize_frame(&c.query));
    let (_, high) = model.backbone_forward(&mut tape, &vars, q).unwrap();
    let qv = model.encode_query_value(&mut tape, &vars, high).unwrap();
    let logits = model.segmentation_head(&mut tape, &vars, qv, 16, 16).unwrap();
    assert_eq!(tape.value(logits), &pred.main_logits);
    assert!(model.params().iter().all(|p| !p.name.starts_with("encoder.memory") && !p.name.starts_with("encoder.query_key")));
}

#[test]
fn backbone_is_shared_and_deterministic() {
    let model = TmaNet::new(tiny(2), 3).unwrap();
    let c = clip(2, 16);
    let mut tape = GradTape::new();
    let vars = model.params().bind(&mut tape);
    let a = tape.leaf(c.query.clone());
    let b = tape.leaf(c.query.clone());
    let (_, fa) = model.backbone_forward(&mut tape, &vars, a).unwrap();
    let (_, fb) = model.backbone_forward(&mut tape, &vars, b).unwrap();
    assert_eq!(tape.value(fa), tape.value(fb));

    let (a, b) = (model.predict(&c).unwrap(), model.predict(&c).unwrap());
    assert_eq!(a.main_logits, b.main_logits);
    assert_eq!(a.attention.unwrap().weights(), b.attention.unwrap().weights());
}

#[test]
fn shape_contracts() {
    let cfg = ModelConfig::with_key_channels(
        2,
        8,
        4,
        vec![Stage { width: 8, stride: 2 }, Stage { width: 16, stride: 2 }, Stage { width: 32, stride: 4 }],
    );
    assert_eq!(cfg.output_stride(), 16);
    let model = TmaNet::new(cfg, 0).unwrap();
    let c = clip(2, 32);
    let mut tape = GradTape::new();
    let vars = model.params().bind(&mut tape);
    let q = tape.leaf(c.query.clone());
    let (low, high) = model.backbone_forward(&mut tape, &vars, q).unwrap();
    assert_eq!(tape.shape(high), [32, 2, 2]);
    assert_eq!(tape.shape(low), [16, 8, 8]);
    let out = model.forward(&mut tape, &vars, &c).unwrap();
    assert_eq!(tape.shape(out.main_logits), [4, 32, 32]);
    assert_eq!(tape.shape(out.aux_logits), [4, 32, 32]);

    for classes in [11, 19] {
        let m = TmaNet::new(ModelConfig { num_classes: classes, ..tiny(2) }, 0).unwrap();
        assert_eq!(m.predict(&clip(2, 16)).unwrap().main_logits.shape(), [classes, 16, 16]);
    }

    // Indivisible frames are rejected.
    let odd = VideoClip { query: Tensor::zeros(&[3, 18, 18]), memory: vec![Tensor::zeros(&[3, 18, 18]); 2], ..c };
    assert!(model.predict(&odd).is_err());
}

#[test]
fn full_scale_encoder_shapes() {
    let cfg = ModelConfig { memory_length: 4, ..ModelConfig::default() };
    assert_eq!((cfg.key_channels, cfg.value_channels), (64, 256));
    let model = TmaNet::new(cfg, 0).unwrap();
    let mut tape = GradTape::new();
    let vars = model.params().bind(&mut tape);
    let memory: Vec<_> = (0..4).map(|_| tape.leaf(Tensor::full(&[32, 8, 8], 0.1))).collect();
    let query = tape.leaf(Tensor::full(&[32, 8, 8], 0.2));
    let enc = model.encode(&mut tape, &vars, &memory, query).unwrap();
    assert_eq!(tape.shape(enc.memory_key), [4, 64, 8, 8]);
    assert_eq!(tape.shape(enc.memory_value), [4, 256, 8, 8]);
    assert_eq!(tape.shape(enc.query_key), [64, 8, 8]);
    let (readout, s) = temporal_memory_attention(&mut tape, &enc, AttentionScaling::None).unwrap();
    assert_eq!(tape.shape(s), [64, 256]);
    assert_eq!(tape.shape(readout), [256, 8, 8]);
    let fused = aggregate_features(&mut tape, readout, enc.query_value, Aggregation::Concat).unwrap();
    assert_eq!(tape.shape(fused), [512, 8, 8]);
}

#[test]
fn encoder_variants_and_sum_aggregation_run() {
    for encoder in [EncoderKind::Conv3x3, EncoderKind::Conv1x1, EncoderKind::Conv1x1Conv3x3] {
        for aggregation in [Aggregation::Concat, Aggregation::Sum] {
            let cfg = ModelConfig { encoder, aggregation, ..tiny(2) };
            let p = TmaNet::new(cfg, 0).unwrap().predict(&clip(2, 16)).unwrap();
            assert!(p.main_logits.all_finite());
            assert!(p.attention.unwrap().max_row_sum_error() < 1e-9);
        }
    }
}
