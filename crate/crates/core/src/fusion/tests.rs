use super::*;
use alloc::vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn reduced(seed: u64) -> FusionConfig {
    FusionConfig {
        rf_width: 8,
        sample_len: 4,
        conv1_channels: 6,
        conv2_channels: 6,
        lstm_hidden: 8,
        embed_dim: 16,
        seed,
        ..FusionConfig::standard(8, 4)
    }
}

fn random_sample(cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> AlignedSample {
    let m = cfg.sample_len;
    let rf = (0..m * cfg.rf_width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mems = (0..m * cfg.mems_width).map(|_| rng.random_range(-1.0..1.0)).collect();
    AlignedSample::new(
        Matrix::from_vec(m, cfg.rf_width, rf).unwrap(),
        Matrix::from_vec(m, cfg.mems_width, mems).unwrap(),
        None,
    )
    .unwrap()
}

fn samples(cfg: &FusionConfig, n: usize, seed: u64) -> Vec<AlignedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_sample(cfg, &mut rng)).collect()
}

#[test]
fn branch_output_shapes() {
    let cfg = FusionConfig::standard(52, 6);
    let model = FusionModel::new(cfg.clone()).unwrap();
    let s = samples(&cfg, 1, 1);
    let x = branch_forward(&model.params.rf, &model.stats.rf, &cfg, &s[0].rf, Mode::Eval).unwrap();
    assert_eq!(x.shape(), (3, 128));
    assert!(x.is_finite());

    let small = FusionConfig::standard(8, 2);
    let model = FusionModel::new(small.clone()).unwrap();
    let seq = Matrix::zeros(2, 8);
    let y = branch_forward(&model.params.mems, &model.stats.mems, &small, &seq, Mode::Eval).unwrap();
    assert_eq!(y.shape(), (1, 128));

    let wrong = Matrix::zeros(2, 5);
    assert!(matches!(
        branch_forward(&model.params.mems, &model.stats.mems, &small, &wrong, Mode::Eval),
        Err(Error::Shape(_))
    ));
}

#[test]
fn identical_zero_inputs_give_identical_outputs() {
    let cfg = reduced(3);
    let mut model = FusionModel::new(cfg.clone()).unwrap();
    for lstm in [&mut model.params.rf.lstm_fwd, &mut model.params.rf.lstm_bwd] {
        lstm.bias.fill(0.0);
    }
    let zero = AlignedSample::new(Matrix::zeros(4, 8), Matrix::zeros(4, 8), None).unwrap();
    let batch = [&zero, &zero, &zero];
    let (rf_in, _) = model.stack_inputs(&batch).unwrap();
    let (x, _) = branch_forward_stacked(&model.params.rf, &model.stats.rf, &cfg, &rf_in, Mode::Eval);
    let per = x.rows() / 3;
    for s in 1..3 {
        assert_eq!(x.slice_rows(0, per), x.slice_rows(s * per, per));
    }
}

#[test]
fn concat_examples() {
    let x = Matrix::from_rows(&[vec![1.0; 128]]).unwrap();
    let y = Matrix::from_rows(&[vec![2.0; 128]]).unwrap();
    let u = concat_features(&x, &y).unwrap();
    assert_eq!(&u.row(0)[..128], &[1.0; 128][..]);
    assert_eq!(&u.row(0)[128..], &[2.0; 128][..]);
    assert_eq!(
        concat_features(&Matrix::zeros(3, 128), &Matrix::zeros(3, 128)).unwrap(),
        Matrix::zeros(3, 256)
    );
    assert!(matches!(
        concat_features(&Matrix::zeros(3, 128), &Matrix::zeros(2, 128)),
        Err(Error::Shape(_))
    ));
}

fn layer_from(rng: &mut ChaCha8Rng, d: usize) -> AttentionLayer {
    let mut mk = || Matrix::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    AttentionLayer {
        wq: mk(),
        wk: mk(),
        wv: mk(),
        wo: mk(),
    }
}

#[test]
fn single_step_attention_is_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = layer_from(&mut rng, 8);
    let u = Matrix::from_rows(&[vec![0.3, -0.1, 0.2, 0.5, -0.7, 0.0, 0.9, 0.4]]).unwrap();
    let out = multi_head_attention(&layer, &u, 4).unwrap();
    let expect = u.matmul(&layer.wv).matmul(&layer.wo);
    for (a, b) in out.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equal_rows_stay_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer = layer_from(&mut rng, 8);
    let row = vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.6, -0.2, 0.8];
    let u = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
    let out = multi_head_attention(&layer, &u, 2).unwrap();
    assert_eq!(out.row(0), out.row(1));
    assert_eq!(out.row(1), out.row(2));
}

#[test]
fn hand_computed_attention() {
    // T = 2, d = 4, one head. Every scalar below is written out by hand.
    let u = Matrix::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 2.0, 0.0, 1.0]]).unwrap();
    let ident = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ])
    .unwrap();
    let mut wk = ident.clone();
    wk.set(0, 0, 2.0);
    let mut wo = ident.clone();
    wo.set(3, 0, 1.0);
    let layer = AttentionLayer {
        wq: ident.clone(),
        wk,
        wv: ident,
        wo,
    };
    // q = u, k = u with first column doubled = [[2,0,1,0],[0,2,0,1]], v = u
    // scores / sqrt(4): row0 = (2+1, 0)/2 = (1.5, 0); row1 = (0, 4+1)/2 = (0, 2.5)
    let p00 = 1.0 / (1.0 + libm::exp(-1.5));
    let p01 = 1.0 - p00;
    let p11 = 1.0 / (1.0 + libm::exp(-2.5));
    let p10 = 1.0 - p11;
    // head = P v; output = head * wo, where wo adds column 3 into column 0
    let h0 = [p00, 2.0 * p01, p00, p01];
    let h1 = [p10, 2.0 * p11, p10, p11];
    let expect = [
        [h0[0] + h0[3], h0[1], h0[2], h0[3]],
        [h1[0] + h1[3], h1[1], h1[2], h1[3]],
    ];
    let out = multi_head_attention(&layer, &u, 1).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            assert!((out.get(i, j) - expect[i][j]).abs() < 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn embed_examples() {
    let zero = Embedding {
        weight: Matrix::zeros(4, 3),
        bias: Matrix::zeros(1, 3),
    };
    assert_eq!(embed(&zero, &[1.0, 2.0, 3.0, 4.0]), Err(Error::Normalization));

    let mut eye = Matrix::zeros(3, 3);
    for i in 0..3 {
        eye.set(i, i, 1.0);
    }
    let ident = Embedding {
        weight: eye,
        bias: Matrix::zeros(1, 3),
    };
    let g = embed(&ident, &[0.6, 0.0, 0.8]).unwrap();
    for (a, b) in g.iter().zip([0.6, 0.0, 0.8]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(embed(&ident, &[1.0, 2.0]), Err(Error::Shape(_))));

    let model = FusionModel::new(reduced(9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let flat: Vec<f64> = (0..model.config.flat_width())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let g = embed(&model.params.embedding, &flat).unwrap();
    assert!((math::norm(&g) - 1.0).abs() < 1e-6);
}

#[test]
fn full_forward_is_unit_norm_and_deterministic() {
    let cfg = FusionConfig::standard(52, 6);
    let model = FusionModel::new(cfg.clone()).unwrap();
    let s = samples(&cfg, 2, 11);
    let g = model.forward_full(&s[0], Mode::Eval).unwrap();
    assert_eq!(g.len(), 256);
    assert!((math::norm(&g) - 1.0).abs() < 1e-9);
    let again = model.forward_full(&s[0], Mode::Eval).unwrap();
    assert!(g.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));

    // embedding width does not depend on K or M
    for (k, m) in [(8, 2), (30, 10)] {
        let model = FusionModel::new(FusionConfig::standard(k, m)).unwrap();
        let s = samples(&model.config, 1, 12);
        assert_eq!(model.forward_full(&s[0], Mode::Eval).unwrap().len(), 256);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = reduced(13);
    let model = FusionModel::new(cfg.clone()).unwrap();
    let s = samples(&cfg, 5, 13);
    let refs: Vec<_> = s.iter().collect();
    let mut tape = Tape::new();
    model.forward_batch(&refs, Mode::Train, Some(&mut tape)).unwrap();
    let weights = tape.attention_weights();
    assert_eq!(weights.len(), 5 * cfg.attention_heads * cfg.attention_layers);
    for p in weights {
        for r in p.iter_rows() {
            assert!(r.iter().all(|&w| w >= 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_requires_a_tape() {
    let model = FusionModel::new(reduced(1)).unwrap();
    let err = model.backward(&Tape::new(), &Matrix::zeros(1, 16)).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let cfg = reduced(2);
    let model = FusionModel::new(cfg.clone()).unwrap();
    let s = samples(&cfg, 3, 2);
    let refs: Vec<_> = s.iter().collect();
    let mut tape = Tape::new();
    model.forward_batch(&refs, Mode::Train, Some(&mut tape)).unwrap();
    let grads = model.backward(&tape, &Matrix::zeros(3, 16)).unwrap();
    assert!(grads.tensors().iter().all(|(_, m)| m.max_abs() == 0.0));
}

#[test]
fn replicated_batch_matches_single_sample_in_frozen_stats_mode() {
    let cfg = reduced(4);
    let model = FusionModel::new(cfg.clone()).unwrap();
    let s = samples(&cfg, 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let upstream: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    model.forward_batch(&[&s[0]], Mode::Eval, Some(&mut tape)).unwrap();
    let single = model
        .backward(&tape, &Matrix::from_vec(1, 16, upstream.clone()).unwrap())
        .unwrap();

    let batch = [&s[0], &s[0], &s[0], &s[0]];
    model.forward_batch(&batch, Mode::Eval, Some(&mut tape)).unwrap();
    let rep: Vec<f64> = upstream.iter().cycle().take(64).copied().collect();
    let replicated = model.backward(&tape, &Matrix::from_vec(4, 16, rep).unwrap()).unwrap();

    for ((name, a), (_, b)) in single.tensors().iter().zip(replicated.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y / 4.0).abs() < 1e-6, "{name}: {x} vs {}", y / 4.0);
        }
    }
}

/// Loss `Σ w ⊙ g` so the upstream gradient is just `w`.
fn linear_loss(model: &FusionModel, batch: &[&AlignedSample], w: &Matrix, mode: Mode) -> f64 {
    let g = model.forward_batch(batch, mode, None).unwrap();
    g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn gradients_match_central_differences() {
    for mode in [Mode::Train, Mode::Eval] {
        let cfg = reduced(21);
        let mut model = FusionModel::new(cfg.clone()).unwrap();
        // move running stats off their defaults so eval mode is exercised properly
        model.stats.rf.bn_in.var.iter_mut().for_each(|v| *v = 0.5);
        let s = samples(&cfg, 4, 22);
        let refs: Vec<_> = s.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = Matrix::from_vec(4, 16, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        model.forward_batch(&refs, mode, Some(&mut tape)).unwrap();
        let grads = model.backward(&tape, &w).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.data().to_vec()))
            .collect();

        let eps = 1e-5;
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            let len = analytic[t].1.len();
            // a handful of coordinates per tensor keeps this fast
            for idx in (0..len).step_by((len / 5).max(1)) {
                let orig = model.params.tensors_mut()[t].data()[idx];
                model.params.tensors_mut()[t].data_mut()[idx] = orig + eps;
                let up = linear_loss(&model, &refs, &w, mode);
                model.params.tensors_mut()[t].data_mut()[idx] = orig - eps;
                let down = linear_loss(&model, &refs, &w, mode);
                model.params.tensors_mut()[t].data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[t].1[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "{mode:?} {}[{idx}]: analytic {a} numeric {numeric}",
                    analytic[t].0
                );
            }
        }
    }
}

#[test]
fn running_stats_follow_momentum() {
    let cfg = reduced(30);
    let mut model = FusionModel::new(cfg.clone()).unwrap();
    let s = samples(&cfg, 3, 30);
    let refs: Vec<_> = s.iter().collect();
    let mut tape = Tape::new();
    assert!(model.update_running_stats(&tape).is_err());
    model.forward_batch(&refs, Mode::Train, Some(&mut tape)).unwrap();
    model.update_running_stats(&tape).unwrap();
    // column 0 of the rf input, over all 12 rows
    let col: Vec<f64> = s.iter().flat_map(|x| (0..4).map(move |r| x.rf.get(r, 0))).collect();
    let expect = 0.1 * math::mean(&col);
    assert!((model.stats.rf.bn_in.mean[0] - expect).abs() < 1e-12);
    model.validate().unwrap();
}

#[test]
fn validate_rejects_bad_shapes() {
    let mut model = FusionModel::new(reduced(1)).unwrap();
    model.params.embedding.bias = Matrix::zeros(1, 3);
    assert!(matches!(model.validate(), Err(Error::Shape(_))));
    let mut cfg = reduced(1);
    cfg.attention_heads = 3;
    assert!(matches!(FusionModel::new(cfg), Err(Error::Config(_))));
}
