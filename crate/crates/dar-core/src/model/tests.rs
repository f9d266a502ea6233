use super::*;
use crate::data::{GenConfig, PanelMode};
use crate::gradcheck::{central_diff, max_rel_error};
use rand::Rng;

fn stacked_cfg(aggregator: AggregatorKind) -> ModelConfig {
    let (c, h, w) = GenConfig::default().image_dims();
    ModelConfig {
        preset: BackbonePreset::Small,
        input: (c, h, w),
        classes: 4,
        aggregator,
        head: HeadKind::Linear,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn eye(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

#[test]
fn small_preset_maps_32x16_input_to_8x4() {
    let cfg = stacked_cfg(AggregatorKind::Gap);
    assert_eq!(cfg.map_dims(), (32, 8, 4));
    let overlap = ModelConfig { input: (3, 16, 16), ..cfg };
    assert_eq!(overlap.map_dims(), (32, 4, 4));
}

#[test]
fn zero_input_with_zero_bias_gives_zero_map() {
    let cfg = stacked_cfg(AggregatorKind::Gap);
    let params = init_params::<f64>(&cfg, 5).unwrap();
    let mut tape = Tape::new();
    let model = bind(&mut tape, &params).unwrap();
    let x = tape.constant(vec![0.0; 32 * 16], vec![1, 1, 32, 16]).unwrap();
    let map = backbone_forward(&mut tape, &cfg, &model, x).unwrap();
    assert!(tape.data(map).iter().all(|&v| v == 0.0));
}

#[test]
fn bias_free_backbone_is_positively_homogeneous() {
    // Conv biases initialize to zero, so a fresh backbone is bias-free;
    // conv/relu/maxpool are all positively homogeneous and scaling by 2 is
    // exact in floating point.
    let cfg = stacked_cfg(AggregatorKind::Gap);
    let params = init_params::<f64>(&cfg, 6).unwrap();
    let img = randv(&mut rng(1), 32 * 16);
    let doubled: Vec<f64> = img.iter().map(|v| 2.0 * v).collect();

    let run = |input: Vec<f64>| {
        let mut tape = Tape::new();
        let model = bind(&mut tape, &params).unwrap();
        let x = tape.constant(input, vec![1, 1, 32, 16]).unwrap();
        let map = backbone_forward(&mut tape, &cfg, &model, x).unwrap();
        tape.data(map).to_vec()
    };
    let base = run(img);
    let twice = run(doubled);
    for (a, b) in base.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn gap_constant_and_one_hot_channels() {
    let mut tape: Tape<f64> = Tape::new();
    // Channel 0 constant 0.7, channel 1 one-hot of value 3.0.
    let mut data = vec![0.7; 6];
    data.extend_from_slice(&[0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    let x = tape.constant(data, vec![1, 2, 2, 3]).unwrap();
    let h = gap_aggregate(&mut tape, x).unwrap();
    assert!((tape.data(h)[0] - 0.7).abs() < 1e-15);
    assert!((tape.data(h)[1] - 3.0 / 6.0).abs() < 1e-15);
}

#[test]
fn gap_matches_naive_summation() {
    let vals = randv(&mut rng(2), 3 * 2 * 2);
    let mut tape = Tape::new();
    let x = tape.constant(vals.clone(), vec![1, 3, 2, 2]).unwrap();
    let h = gap_aggregate(&mut tape, x).unwrap();
    for ch in 0..3 {
        let mut s = 0.0;
        for i in 0..4 {
            s += vals[ch * 4 + i];
        }
        assert_eq!(tape.data(h)[ch], s * (1.0 / 4.0));
    }
}

#[test]
fn sdpa_with_identical_keys_averages_values() {
    let mut tape: Tape<f64> = Tape::new();
    let q = tape.constant(randv(&mut rng(3), 2 * 3), vec![2, 3]).unwrap();
    let key_row = [0.3, -1.0, 0.5];
    let k = tape.constant(key_row.repeat(4), vec![4, 3]).unwrap();
    let v_data = randv(&mut rng(4), 4 * 3);
    let v = tape.constant(v_data.clone(), vec![4, 3]).unwrap();
    let (out, attn) = sdpa(&mut tape, q, k, v).unwrap();
    for row in 0..2 {
        for col in 0..3 {
            let mean = (0..4).map(|r| v_data[r * 3 + col]).sum::<f64>() / 4.0;
            assert!((tape.data(out)[row * 3 + col] - mean).abs() < 1e-12);
        }
    }
    for &w in tape.data(attn) {
        assert!((w - 0.25).abs() < 1e-12);
    }
}

#[test]
fn sdpa_saturates_to_dominant_value_row() {
    let mut tape: Tape<f64> = Tape::new();
    // One key aligned with the query at +50 logit after scaling; others zero.
    let q = tape.constant(vec![50.0 * (2.0f64).sqrt(), 0.0], vec![1, 2]).unwrap();
    let k = tape.constant(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![3, 2]).unwrap();
    let v = tape.constant(vec![5.0, -1.0, 2.0, 2.0, 9.0, 9.0], vec![3, 2]).unwrap();
    let (out, _) = sdpa(&mut tape, q, k, v).unwrap();
    assert!((tape.data(out)[0] - 5.0).abs() < 1e-6);
    assert!((tape.data(out)[1] + 1.0).abs() < 1e-6);
}

#[test]
fn sdpa_two_location_hand_example() {
    // q = [1, 0], keys [[1,0],[0,1]], values [[2,0],[0,4]], scale 1/sqrt(2).
    let mut tape: Tape<f64> = Tape::new();
    let q = tape.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
    let k = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
    let v = tape.constant(vec![2.0, 0.0, 0.0, 4.0], vec![2, 2]).unwrap();
    let (out, attn) = sdpa(&mut tape, q, k, v).unwrap();
    let s = 1.0 / (2.0f64).sqrt();
    let e0 = (s * 1.0f64).exp();
    let e1 = (s * 0.0f64).exp();
    let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    assert!((tape.data(attn)[0] - w0).abs() < 1e-12);
    assert!((tape.data(attn)[1] - w1).abs() < 1e-12);
    assert!((tape.data(out)[0] - 2.0 * w0).abs() < 1e-12);
    assert!((tape.data(out)[1] - 4.0 * w1).abs() < 1e-12);
}

fn single_head_layer(tape: &mut Tape<f64>, d: usize, wq: Vec<f64>, wk: Vec<f64>, wv: Vec<f64>, wo: Vec<f64>) -> MhaLayer<f64> {
    MhaLayer {
        wq: vec![tape.constant(wq, vec![d, d]).unwrap()],
        wk: vec![tape.constant(wk, vec![d, d]).unwrap()],
        wv: vec![tape.constant(wv, vec![d, d]).unwrap()],
        wo: tape.constant(wo, vec![d, d]).unwrap(),
        _marker: std::marker::PhantomData,
    }
}

#[test]
fn mha_single_head_identity_projections_reduce_to_sdpa() {
    let d = 3;
    let mut tape: Tape<f64> = Tape::new();
    let q = tape.constant(randv(&mut rng(5), 2 * d), vec![2, d]).unwrap();
    let kv = tape.constant(randv(&mut rng(6), 4 * d), vec![4, d]).unwrap();
    let layer = single_head_layer(&mut tape, d, eye(d), eye(d), eye(d), eye(d));
    let (mha_out, _) = mha(&mut tape, q, kv, kv, &layer).unwrap();
    let (sdpa_out, _) = sdpa(&mut tape, q, kv, kv).unwrap();
    assert_eq!(tape.data(mha_out), tape.data(sdpa_out));
}

#[test]
fn mha_is_bitwise_invariant_to_key_value_permutation() {
    let d = 4;
    let n = 6;
    let kv_data = randv(&mut rng(7), n * d);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut permuted = vec![0.0; n * d];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * d..(dst + 1) * d].copy_from_slice(&kv_data[src * d..(src + 1) * d]);
    }
    let run = |kv_rows: Vec<f64>| {
        let mut tape = Tape::new();
        let q = tape.constant(randv(&mut rng(8), 2 * d), vec![2, d]).unwrap();
        let kv = tape.constant(kv_rows, vec![n, d]).unwrap();
        let wq = randv(&mut rng(9), d * d);
        let wk = randv(&mut rng(10), d * d);
        let wv = randv(&mut rng(11), d * d);
        let wo = randv(&mut rng(12), d * d);
        let layer = single_head_layer(&mut tape, d, wq, wk, wv, wo);
        let (out, _) = mha(&mut tape, q, kv, kv, &layer).unwrap();
        tape.data(out).to_vec()
    };
    let a = run(kv_data);
    let b = run(permuted);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn mha_two_heads_decompose_into_independent_sdpa() {
    let d = 4;
    let dh = 2;
    let mut tape: Tape<f64> = Tape::new();
    let q = tape.constant(randv(&mut rng(13), 3 * d), vec![3, d]).unwrap();
    let kv = tape.constant(randv(&mut rng(14), 5 * d), vec![5, d]).unwrap();
    let projs: Vec<Vec<f64>> = (0..6).map(|i| randv(&mut rng(20 + i), d * dh)).collect();
    let wo_data = randv(&mut rng(30), d * d);

    let layer = MhaLayer {
        wq: vec![
            tape.constant(projs[0].clone(), vec![d, dh]).unwrap(),
            tape.constant(projs[1].clone(), vec![d, dh]).unwrap(),
        ],
        wk: vec![
            tape.constant(projs[2].clone(), vec![d, dh]).unwrap(),
            tape.constant(projs[3].clone(), vec![d, dh]).unwrap(),
        ],
        wv: vec![
            tape.constant(projs[4].clone(), vec![d, dh]).unwrap(),
            tape.constant(projs[5].clone(), vec![d, dh]).unwrap(),
        ],
        wo: tape.constant(wo_data.clone(), vec![d, d]).unwrap(),
        _marker: std::marker::PhantomData,
    };
    let (out, _) = mha(&mut tape, q, kv, kv, &layer).unwrap();

    // Manual route: two independent heads, concatenated, times wo.
    let mut heads = Vec::new();
    for t in 0..2 {
        let wq = tape.constant(projs[t].clone(), vec![d, dh]).unwrap();
        let wk = tape.constant(projs[2 + t].clone(), vec![d, dh]).unwrap();
        let wv = tape.constant(projs[4 + t].clone(), vec![d, dh]).unwrap();
        let qp = tape.matmul(q, wq).unwrap();
        let kp = tape.matmul(kv, wk).unwrap();
        let vp = tape.matmul(kv, wv).unwrap();
        let (h, _) = sdpa(&mut tape, qp, kp, vp).unwrap();
        heads.push(h);
    }
    let cat = tape.concat_cols(&heads).unwrap();
    let wo = tape.constant(wo_data, vec![d, d]).unwrap();
    let manual = tape.matmul(cat, wo).unwrap();
    assert_eq!(tape.data(out), tape.data(manual));
}

/// Attention parameters that make the aggregator reproduce GAP: one query of
/// zeros (uniform attention), identity value and output projections.
fn gap_reduction_params(cfg: &ModelConfig) -> ParamSet<f64> {
    let mut set = init_params::<f64>(cfg, 0).unwrap();
    let d = cfg.feature_dim();
    set.get_mut("dar.queries").unwrap().data.fill(0.0);
    let idmat: Vec<f64> = eye(d);
    set.get_mut("dar.layer0.head0.wv").unwrap().data.copy_from_slice(&idmat);
    set.get_mut("dar.layer0.wo").unwrap().data.copy_from_slice(&idmat);
    set
}

#[test]
fn constructed_attention_reproduces_gap() {
    let dar = DarConfig { queries: 1, heads: 1, layers: 1, positional: false };
    let cfg = stacked_cfg(AggregatorKind::Dar(dar));
    let params = gap_reduction_params(&cfg);
    let (d, h, w) = cfg.map_dims();
    let mut r = rng(15);
    for _ in 0..20 {
        let map_data = randv(&mut r, d * h * w);
        let mut tape = Tape::new();
        let model = bind(&mut tape, &params).unwrap();
        let map = tape.constant(map_data, vec![1, d, h, w]).unwrap();
        let (hid, _) = dar_aggregate(&mut tape, &dar, &model, map).unwrap();
        let gap = gap_aggregate(&mut tape, map).unwrap();
        for (a, b) in tape.data(hid).iter().zip(tape.data(gap)) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }
}

#[test]
fn duplicate_query_rows_collapse_to_one() {
    let dar2 = DarConfig { queries: 2, heads: 2, layers: 2, positional: false };
    let cfg2 = stacked_cfg(AggregatorKind::Dar(dar2));
    let mut params2 = init_params::<f64>(&cfg2, 16).unwrap();
    let d = cfg2.feature_dim();
    let row: Vec<f64> = params2.get("dar.queries").unwrap().data[..d].to_vec();
    params2.get_mut("dar.queries").unwrap().data[d..].copy_from_slice(&row);

    let dar1 = DarConfig { queries: 1, ..dar2 };
    let cfg1 = stacked_cfg(AggregatorKind::Dar(dar1));
    let mut params1 = params2.clone();
    *params1.get_mut("dar.queries").unwrap() = crate::tensor::Param::new("dar.queries", vec![1, d], row);

    let (dm, h, w) = cfg1.map_dims();
    let map_data = randv(&mut rng(17), dm * h * w);
    let run = |cfg: &ModelConfig, dar: &DarConfig, params: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let model = bind(&mut tape, params).unwrap();
        let map = tape.constant(map_data.clone(), vec![1, dm, h, w]).unwrap();
        let (hid, attn) = dar_aggregate(&mut tape, dar, &model, map).unwrap();
        let _ = cfg;
        (tape.data(hid).to_vec(), attn)
    };
    let (h2, attn2) = run(&cfg2, &dar2, &params2);
    let (h1, _) = run(&cfg1, &dar1, &params1);
    assert_eq!(h1, h2);
    // Both query rows of the k=2 attention map are identical.
    let hw = h * w;
    assert_eq!(attn2[0][..hw], attn2[0][hw..]);
}

#[test]
fn attention_weights_are_row_stochastic_and_spatially_invariant() {
    let dar = DarConfig::default();
    let cfg = stacked_cfg(AggregatorKind::Dar(dar));
    let params = init_params::<f64>(&cfg, 18).unwrap();
    let (d, h, w) = cfg.map_dims();
    let hw = h * w;
    let map_data = randv(&mut rng(19), d * h * w);

    let run = |data: Vec<f64>, params: &ParamSet<f64>, dar: &DarConfig| {
        let mut tape = Tape::new();
        let model = bind(&mut tape, params).unwrap();
        let map = tape.constant(data, vec![1, d, h, w]).unwrap();
        let (hid, attn) = dar_aggregate(&mut tape, dar, &model, map).unwrap();
        (tape.data(hid).to_vec(), attn)
    };

    let (base, attn) = run(map_data.clone(), &params, &dar);
    for q in 0..dar.queries {
        let row: f64 = attn[0][q * hw..(q + 1) * hw].iter().sum();
        assert!((row - 1.0).abs() < 1e-6);
        assert!(attn[0][q * hw..(q + 1) * hw].iter().all(|&v| v >= 0.0));
    }

    // Spatial permutation: reorder the hw positions of every channel.
    let perm: Vec<usize> = (0..hw).map(|i| (i * 7 + 3) % hw).collect();
    let mut permuted = vec![0.0; d * hw];
    for ch in 0..d {
        for (dst, &src) in perm.iter().enumerate() {
            permuted[ch * hw + dst] = map_data[ch * hw + src];
        }
    }
    let (permuted_h, _) = run(permuted.clone(), &params, &dar);
    assert!(base.iter().zip(&permuted_h).all(|(a, b)| a.to_bits() == b.to_bits()));

    // With a positional table the same permutation changes the output.
    let dar_pos = DarConfig { positional: true, ..dar };
    let cfg_pos = stacked_cfg(AggregatorKind::Dar(dar_pos));
    let params_pos = init_params::<f64>(&cfg_pos, 18).unwrap();
    let (with_pos, _) = run(map_data, &params_pos, &dar_pos);
    let (with_pos_perm, _) = run(permuted, &params_pos, &dar_pos);
    assert_ne!(with_pos, with_pos_perm);
}

#[test]
fn classify_zero_head_and_one_hot_readout() {
    let cfg = stacked_cfg(AggregatorKind::Gap);
    let d = cfg.feature_dim();
    let mut params = init_params::<f64>(&cfg, 20).unwrap();
    params.get_mut("head.weight").unwrap().data.fill(0.0);
    let mut tape = Tape::new();
    let model = bind(&mut tape, &params).unwrap();
    let h = tape.constant(vec![1.0; d], vec![1, d]).unwrap();
    let logits = classify(&mut tape, &cfg, &model, h).unwrap();
    assert!(tape.data(logits).iter().all(|&v| v == 0.0));

    // One-hot feature selects one row of the weight matrix.
    let mut params2 = init_params::<f64>(&cfg, 21).unwrap();
    params2.get_mut("head.bias").unwrap().data.fill(0.0);
    let row3: Vec<f64> = params2.get("head.weight").unwrap().data[3 * cfg.classes..4 * cfg.classes].to_vec();
    let mut tape2 = Tape::new();
    let model2 = bind(&mut tape2, &params2).unwrap();
    let mut onehot = vec![0.0; d];
    onehot[3] = 1.0;
    let h2 = tape2.constant(onehot, vec![1, d]).unwrap();
    let logits2 = classify(&mut tape2, &cfg, &model2, h2).unwrap();
    for (a, b) in tape2.data(logits2).iter().zip(&row3) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn classifier_gradient_matches_central_differences() {
    let cfg = stacked_cfg(AggregatorKind::Gap);
    let d = cfg.feature_dim();
    let h_data = randv(&mut rng(22), 2 * d);
    let w_data = randv(&mut rng(23), d * 4);
    let b_data = randv(&mut rng(24), 4);
    let labels = [2usize, 0];
    let params = vec![w_data, b_data];
    let loss_of = |ps: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let h = tape.constant(h_data.clone(), vec![2, d]).unwrap();
        let w = tape.leaf(ps[0].clone(), vec![d, 4], true).unwrap();
        let b = tape.leaf(ps[1].clone(), vec![4], true).unwrap();
        let l = tape.matmul(h, w).unwrap();
        let l = tape.add_bias(l, b).unwrap();
        let loss = tape.cross_entropy(l, &labels, None).unwrap();
        (tape, loss, w, b)
    };
    let numeric = central_diff(|ps| { let (tp, l, _, _) = loss_of(ps); tp.scalar(l) }, &params, 1e-4);
    let (mut tape, loss, w, b) = loss_of(&params);
    tape.backward(loss).unwrap();
    assert!(max_rel_error(tape.grad(w).unwrap(), &numeric[0]) < 1e-4);
    assert!(max_rel_error(tape.grad(b).unwrap(), &numeric[1]) < 1e-4);
}

#[test]
fn end_to_end_forward_shapes() {
    let gen = GenConfig { train: 32, target: 16, val: 16, test: 16, ..GenConfig::default() };
    let splits = crate::data::generate(&gen, 1).unwrap();
    for aggregator in [AggregatorKind::Gap, AggregatorKind::Dar(DarConfig::default())] {
        let cfg = stacked_cfg(aggregator);
        let params = init_params::<f32>(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let model = bind(&mut tape, &params).unwrap();
        let imgs: Vec<&[f32]> = splits.test[..3].iter().map(|e| e.image.as_slice()).collect();
        let x = batch_input(&mut tape, &imgs, gen.image_dims()).unwrap();
        let out = forward(&mut tape, &cfg, &model, x).unwrap();
        assert_eq!(tape.shape(out.map), &[3, 32, 8, 4]);
        assert_eq!(tape.shape(out.features), &[3, 32]);
        assert_eq!(tape.shape(out.logits), &[3, 4]);
        if let AggregatorKind::Dar(_) = cfg.aggregator {
            assert_eq!(out.attention.as_ref().unwrap().len(), 3);
        }
    }
}

#[test]
fn validate_rejects_indivisible_heads() {
    let dar = DarConfig { heads: 5, ..DarConfig::default() };
    let cfg = stacked_cfg(AggregatorKind::Dar(dar));
    assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    let overlap_tiny = ModelConfig { input: (3, 4, 4), ..stacked_cfg(AggregatorKind::Gap) };
    assert!(matches!(overlap_tiny.validate(), Err(ModelError::Config(_))));
}

#[test]
fn checkpoint_round_trip_and_mismatch_rejection() {
    let cfg = stacked_cfg(AggregatorKind::Dar(DarConfig::default()));
    let params = init_params::<f32>(&cfg, 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &cfg, &params).unwrap();
    let restored = checkpoint::load_expecting(&path, &cfg).unwrap();
    assert!(restored.changed_names(&params).is_empty());
    assert!(params.changed_names(&restored).is_empty());

    let other = ModelConfig { preset: BackbonePreset::Medium, ..cfg };
    assert!(matches!(
        checkpoint::load_expecting(&path, &other),
        Err(ModelError::CheckpointMismatch(_))
    ));
}

#[test]
fn overlap_mode_panels_flow_through() {
    let gen = GenConfig { mode: PanelMode::Overlap, train: 32, target: 16, val: 16, test: 16, ..GenConfig::default() };
    let splits = crate::data::generate(&gen, 3).unwrap();
    let cfg = ModelConfig { input: gen.image_dims(), ..stacked_cfg(AggregatorKind::Gap) };
    cfg.validate().unwrap();
    let params = init_params::<f32>(&cfg, 4).unwrap();
    let mut tape = Tape::new();
    let model = bind(&mut tape, &params).unwrap();
    let imgs: Vec<&[f32]> = splits.test[..2].iter().map(|e| e.image.as_slice()).collect();
    let x = batch_input(&mut tape, &imgs, gen.image_dims()).unwrap();
    let out = forward(&mut tape, &cfg, &model, x).unwrap();
    assert_eq!(tape.shape(out.logits), &[2, 4]);
}
