use super::*;
use crate::data::LayerEmbedding;
use crate::tensor::grad_check_multi;

fn small_config() -> GLoRIConfig {
    GLoRIConfig {
        n_findings: 2,
        d_model: 8,
        d_glori: 8,
        heads: 2,
        temp_hidden: 4,
        pyramid_ks: vec![8, 4, 2],
        use_global: true,
        use_adaptive_temp: true,
        use_pyramid: true,
        seed: 3,
    }
}

fn record(seed: u64, h: usize, w: usize, d_layer: usize, layers: usize) -> EmbeddingRecord {
    let mut rng = substream(seed, "head-test", 0);
    EmbeddingRecord {
        image_id: seed,
        layers: (0..layers)
            .map(|_| LayerEmbedding {
                cls: Tensor::randn(vec![d_layer], &mut rng),
                patches: Tensor::randn(vec![h, w, d_layer], &mut rng),
            })
            .collect(),
    }
}

fn zero_params(p: &mut GLoRIParams) {
    for t in p.tensors_mut() {
        let z = Tensor::zeros(t.shape().to_vec());
        *t = z;
    }
}

#[test]
fn config_validation() {
    let mut cfg = small_config();
    cfg.heads = 3; // 8 % 3 != 0
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.d_glori = 0;
    assert!(cfg.validate().is_err());
    assert!(small_config().validate().is_ok());
    assert_eq!(small_config().d_key(), 4);
}

#[test]
fn pyramid_widths_preserve_total() {
    let mut cfg = small_config();
    for dm in [6usize, 7, 8, 9, 64, 65] {
        cfg.d_model = dm;
        let widths = cfg.pyramid_widths();
        assert_eq!(widths.iter().sum::<usize>(), dm, "widths {widths:?}");
        assert!(widths.iter().all(|&w| w >= 1));
    }
}

#[test]
fn embed_patches_reference_cases() {
    let tape = Tape::new();
    let u = tape.constant(Tensor::randn(vec![4, 3], &mut substream(1, "head-test", 1)));
    let w0 = tape.constant(Tensor::zeros(vec![3, 5]));
    let b0 = tape.constant(Tensor::zeros(vec![5]));
    let y = embed_patches(&tape, u, w0, b0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let b1 = tape.constant(Tensor::ones(vec![5]));
    let y = embed_patches(&tape, u, w0, b1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 1.0));

    // equals relu(linear(u)) composed from the tensor ops directly
    let w = tape.constant(Tensor::randn(vec![3, 5], &mut substream(1, "head-test", 2)));
    let b = tape.constant(Tensor::randn(vec![5], &mut substream(1, "head-test", 3)));
    let via_helper = embed_patches(&tape, u, w, b).unwrap();
    let direct = tape.relu(tape.linear(u, w, b).unwrap()).unwrap();
    assert_eq!(tape.value(via_helper).data(), tape.value(direct).data());
    assert!(tape.value(via_helper).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn adaptive_temperature_reference_cases() {
    let tape = Tape::new();
    let u = tape.constant(Tensor::randn(vec![6, 4], &mut substream(2, "head-test", 0)));

    // zero MLP -> tau = 1 for every query
    let w1 = tape.constant(Tensor::zeros(vec![4, 3]));
    let b1 = tape.constant(Tensor::zeros(vec![3]));
    let w2 = tape.constant(Tensor::zeros(vec![3, 2]));
    let b2 = tape.constant(Tensor::zeros(vec![2]));
    let tau = adaptive_temperature(&tape, u, w1, b1, w2, b2).unwrap();
    assert_eq!(tape.value(tau).data(), &[1.0, 1.0]);

    // constant u: pooled feature equals that row
    let uc = tape.constant(Tensor::full(vec![5, 4], 2.5));
    let pooled = tape.mean_rows(uc).unwrap();
    assert!(tape.value(pooled).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

    // random weights stay inside [e^-1, e^1]
    let mut rng = substream(2, "head-test", 1);
    let w1 = tape.constant(Tensor::randn(vec![4, 3], &mut rng).map(|v| v * 3.0));
    let b1 = tape.constant(Tensor::randn(vec![3], &mut rng));
    let w2 = tape.constant(Tensor::randn(vec![3, 2], &mut rng).map(|v| v * 3.0));
    let b2 = tape.constant(Tensor::randn(vec![2], &mut rng));
    let tau = adaptive_temperature(&tape, u, w1, b1, w2, b2).unwrap();
    for &t in tape.value(tau).data() {
        assert!(t >= (-1.0f64).exp() && t <= 1.0f64.exp());
    }
}

fn identity_proj(tape: &Tape, d: usize) -> AttnProjVars {
    AttnProjVars {
        wk: tape.constant(Tensor::eye(d)),
        bk: tape.constant(Tensor::zeros(vec![d])),
        wv: tape.constant(Tensor::eye(d)),
        bv: tape.constant(Tensor::zeros(vec![d])),
        wo: tape.constant(Tensor::eye(d)),
        bo: tape.constant(Tensor::zeros(vec![d])),
    }
}

#[test]
fn attention_identical_values_collapse() {
    // every token identical -> output row equals that token whatever the
    // attention weights are
    let tape = Tape::new();
    let d = 4;
    let row = [0.5, -1.0, 2.0, 0.25];
    let tokens = tape.constant(Tensor::from_rows(&[row.to_vec(), row.to_vec(), row.to_vec()]).unwrap());
    let q = tape.constant(Tensor::randn(vec![2, d], &mut substream(3, "head-test", 0)));
    let tau = tape.constant(Tensor::ones(vec![2]));
    let proj = identity_proj(&tape, d);
    let (out, maps) = attention(&tape, q, tokens, tau, &proj, 2).unwrap();
    let v = tape.value(out);
    for m in 0..2 {
        for j in 0..d {
            assert!((v.data()[m * d + j] - row[j]).abs() < 1e-12);
        }
    }
    // maps are probability rows
    let mv = tape.value(maps);
    for m in 0..2 {
        let sum: f64 = mv.data()[m * 3..(m + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(mv.data()[m * 3..(m + 1) * 3].iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn attention_small_temperature_selects_dominant_key() {
    let tape = Tape::new();
    let d = 2;
    let tokens = tape.constant(Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let tau = tape.constant(Tensor::vector(vec![1e-3]));
    let proj = identity_proj(&tape, d);
    let (out, _) = attention(&tape, q, tokens, tau, &proj, 1).unwrap();
    let v = tape.value(out);
    assert!((v.data()[0] - 3.0).abs() < 1e-9);
    assert!(v.data()[1].abs() < 1e-9);
}

#[test]
fn attention_single_head_hand_case() {
    // q=[1,0], keys=values=[[1,0],[0,1]], tau=1, one head of width 2
    let tape = Tape::new();
    let tokens = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let tau = tape.constant(Tensor::vector(vec![1.0]));
    let proj = identity_proj(&tape, 2);
    let (out, maps) = attention(&tape, q, tokens, tau, &proj, 1).unwrap();
    let s = 1.0 / 2.0f64.sqrt();
    let w0 = s.exp() / (s.exp() + 1.0);
    let w1 = 1.0 / (s.exp() + 1.0);
    let v = tape.value(out);
    assert!((v.data()[0] - w0).abs() < 1e-12);
    assert!((v.data()[1] - w1).abs() < 1e-12);
    let mv = tape.value(maps);
    assert!((mv.data()[0] - w0).abs() < 1e-12);
    assert!((mv.data()[1] - w1).abs() < 1e-12);
}

#[test]
fn pyramid_merge_reference_cases() {
    let cfg = small_config();
    let tape = Tape::new();
    let widths = cfg.pyramid_widths();
    let dm = cfg.d_model;

    // constant input, identity affine on the norm -> zeros
    let u = tape.constant(Tensor::full(vec![8, 8, dm], 1.5));
    let scales: Vec<(Var, Var)> = widths
        .iter()
        .map(|&ws| {
            (
                tape.constant(Tensor::ones(vec![dm, ws]).map(|v| v / dm as f64)),
                tape.constant(Tensor::zeros(vec![ws])),
            )
        })
        .collect();
    let gamma = tape.constant(Tensor::ones(vec![dm]));
    let beta = tape.constant(Tensor::zeros(vec![dm]));
    let out = pyramid_merge(&tape, u, &cfg.pyramid_ks, &scales, gamma, beta).unwrap();
    assert_eq!(tape.shape(out), vec![64, dm]);
    assert!(tape.value(out).data().iter().all(|&v| v.abs() < 1e-6));

    // beta passthrough on constant input
    let beta_c = tape.constant(Tensor::full(vec![dm], 4.25));
    let out = pyramid_merge(&tape, u, &cfg.pyramid_ks, &scales, gamma, beta_c).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| (v - 4.25).abs() < 1e-6));

    // indivisible grid
    let bad = tape.constant(Tensor::zeros(vec![12, 8, dm]));
    assert!(pyramid_merge(&tape, bad, &cfg.pyramid_ks, &scales, gamma, beta).is_err());
}

#[test]
fn pyramid_merge_matches_manual_composition() {
    let cfg = small_config();
    let dm = cfg.d_model;
    let mut rng = substream(4, "head-test", 0);
    let u_t = Tensor::randn(vec![8, 8, dm], &mut rng);
    let widths = cfg.pyramid_widths();
    let scale_params: Vec<LinearParams> = widths
        .iter()
        .map(|&ws| LinearParams {
            w: Tensor::randn(vec![dm, ws], &mut rng),
            b: Tensor::randn(vec![ws], &mut rng),
        })
        .collect();
    let gamma_t = Tensor::rand_uniform(vec![dm], 0.5, 1.5, &mut rng);
    let beta_t = Tensor::randn(vec![dm], &mut rng);

    let tape = Tape::new();
    let u = tape.constant(u_t.clone());
    let scales: Vec<(Var, Var)> = scale_params
        .iter()
        .map(|p| (tape.constant(p.w.clone()), tape.constant(p.b.clone())))
        .collect();
    let gamma = tape.constant(gamma_t.clone());
    let beta = tape.constant(beta_t.clone());
    let merged = pyramid_merge(&tape, u, &cfg.pyramid_ks, &scales, gamma, beta).unwrap();

    // independent composition, one scale at a time
    let tape2 = Tape::new();
    let u2 = tape2.constant(u_t);
    let mut parts = Vec::new();
    for (&k, p) in cfg.pyramid_ks.iter().zip(&scale_params) {
        let pooled = tape2.avg_pool2d(u2, k).unwrap();
        let (ph, pw) = (8 / k, 8 / k);
        let flat = tape2.reshape(pooled, vec![ph * pw, dm]).unwrap();
        let w = tape2.constant(p.w.clone());
        let b = tape2.constant(p.b.clone());
        let proj = tape2.relu(tape2.linear(flat, w, b).unwrap()).unwrap();
        let ws = tape2.shape(proj)[1];
        let grid = tape2.reshape(proj, vec![ph, pw, ws]).unwrap();
        parts.push(tape2.upsample_nearest(grid, k).unwrap());
    }
    let cat = tape2.concat(&parts, 2).unwrap();
    let flat = tape2.reshape(cat, vec![64, dm]).unwrap();
    let g2 = tape2.constant(gamma_t);
    let b2 = tape2.constant(beta_t);
    let manual = tape2.layer_norm(flat, g2, b2, LAYER_NORM_EPS).unwrap();

    assert_eq!(tape.value(merged).data(), tape2.value(manual).data());
}

#[test]
fn integrate_global_reference_cases() {
    let tape = Tape::new();
    let mut rng = substream(5, "head-test", 0);
    let fine = Tensor::randn(vec![3, 4], &mut rng);
    let coarse = Tensor::randn(vec![3, 4], &mut rng);
    let proj = Tensor::randn(vec![4], &mut rng);

    // zero branches -> every token is the cls projection
    let zf = tape.constant(Tensor::zeros(vec![3, 4]));
    let zc = tape.constant(Tensor::zeros(vec![3, 4]));
    let p = tape.constant(proj.clone());
    let tokens = integrate_global(&tape, zf, Some(zc), Some(p)).unwrap();
    let v = tape.value(tokens);
    for m in 0..3 {
        assert_eq!(&v.data()[m * 4..(m + 1) * 4], proj.data());
    }

    // no cls projection -> branch sum; additivity holds elementwise
    let f = tape.constant(fine.clone());
    let c = tape.constant(coarse.clone());
    let tokens = integrate_global(&tape, f, Some(c), None).unwrap();
    let v = tape.value(tokens);
    for i in 0..12 {
        assert!((v.data()[i] - (fine.data()[i] + coarse.data()[i])).abs() < 1e-15);
    }

    let tokens = integrate_global(&tape, f, Some(c), Some(p)).unwrap();
    let v = tape.value(tokens);
    for m in 0..3 {
        for j in 0..4 {
            let expect = fine.data()[m * 4 + j] + coarse.data()[m * 4 + j] + proj.data()[j];
            assert!((v.data()[m * 4 + j] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn classify_reference_cases() {
    let tape = Tape::new();
    let tokens = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());

    // zero weights -> logits are the biases
    let w0 = tape.constant(Tensor::zeros(vec![2, 2]));
    let b = tape.constant(Tensor::vector(vec![0.3, -0.7]));
    let logits = classify(&tape, tokens, w0, b).unwrap();
    assert_eq!(tape.value(logits).data(), &[0.3, -0.7]);

    // unit case: token_m = e_m, w_m = e_m, b = 0 -> logit 1
    let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b0 = tape.constant(Tensor::zeros(vec![2]));
    let logits = classify(&tape, tokens, w, b0).unwrap();
    assert_eq!(tape.value(logits).data(), &[1.0, 2.0]);

    // random case matches a per-row dot product
    let mut rng = substream(6, "head-test", 0);
    let t = Tensor::randn(vec![3, 5], &mut rng);
    let wt = Tensor::randn(vec![3, 5], &mut rng);
    let bt = Tensor::randn(vec![3], &mut rng);
    let tv = tape.constant(t.clone());
    let wv = tape.constant(wt.clone());
    let bv = tape.constant(bt.clone());
    let logits = classify(&tape, tv, wv, bv).unwrap();
    let got = tape.value(logits);
    for m in 0..3 {
        let expect: f64 = (0..5).map(|j| t.data()[m * 5 + j] * wt.data()[m * 5 + j]).sum::<f64>()
            + bt.data()[m];
        assert!((got.data()[m] - expect).abs() < 1e-12);
    }
}

#[test]
fn zero_network_outputs_classifier_bias() {
    let mut params = GLoRIParams::init(small_config()).unwrap();
    zero_params(&mut params);
    params.cls_b = Tensor::vector(vec![0.8, -1.2]);
    let rec = record(11, 8, 8, 4, 2);
    let logits = params.forward(&rec).unwrap();
    assert!((logits.data()[0] - 0.8).abs() < 1e-12);
    assert!((logits.data()[1] + 1.2).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let params = GLoRIParams::init(small_config()).unwrap();
    let rec = record(12, 8, 8, 4, 2);
    let a = params.forward(&rec).unwrap();
    let b = params.forward(&rec).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn zero_temp_mlp_equals_fixed_unit_temperature() {
    let mut with_temp = GLoRIParams::init(small_config()).unwrap();
    if let Some(t) = &mut with_temp.temp {
        t.w1 = Tensor::zeros(t.w1.shape().to_vec());
        t.b1 = Tensor::zeros(t.b1.shape().to_vec());
        t.w2 = Tensor::zeros(t.w2.shape().to_vec());
        t.b2 = Tensor::zeros(t.b2.shape().to_vec());
    }
    let mut without = with_temp.clone();
    without.temp = None;
    without.config.use_adaptive_temp = false;

    let rec = record(13, 8, 8, 4, 2);
    let a = with_temp.forward(&rec).unwrap();
    let b = without.forward(&rec).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn fine_branch_is_permutation_equivariant() {
    // pyramid off: permuting patch order leaves logits unchanged and
    // permutes the fine attention maps identically
    let mut cfg = small_config();
    cfg.use_pyramid = false;
    let params = GLoRIParams::init(cfg).unwrap();
    let rec = record(14, 8, 8, 4, 2);

    // build a permuted copy of the record (same permutation per layer)
    let n = 64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = substream(14, "head-test", 9);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let d = rec.d_layer();
    let permuted = EmbeddingRecord {
        image_id: rec.image_id,
        layers: rec
            .layers
            .iter()
            .map(|layer| {
                let src = layer.patches.data();
                let mut dst = vec![0.0; n * d];
                for (new_pos, &old_pos) in perm.iter().enumerate() {
                    dst[new_pos * d..(new_pos + 1) * d]
                        .copy_from_slice(&src[old_pos * d..(old_pos + 1) * d]);
                }
                LayerEmbedding {
                    cls: layer.cls.clone(),
                    patches: Tensor::new(vec![8, 8, d], dst).unwrap(),
                }
            })
            .collect(),
    };

    let a = params.forward(&rec).unwrap();
    let b = params.forward(&permuted).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-9);

    let map_orig = params.attention_map(&rec, 0, Branch::Fine).unwrap();
    let map_perm = params.attention_map(&permuted, 0, Branch::Fine).unwrap();
    for (new_pos, &old_pos) in perm.iter().enumerate() {
        let ov = map_orig.data()[old_pos];
        let pv = map_perm.data()[new_pos];
        assert!((ov - pv).abs() < 1e-9);
    }
}

#[test]
fn attention_maps_are_normalized_and_uniform_for_uniform_keys() {
    let params = GLoRIParams::init(small_config()).unwrap();
    let rec = record(15, 8, 8, 4, 2);
    for branch in [Branch::Fine, Branch::Coarse] {
        let map = params.attention_map(&rec, 1, branch).unwrap();
        assert_eq!(map.shape(), &[8, 8]);
        let sum: f64 = map.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    // constant patches -> identical keys -> uniform attention
    let mut uniform = record(16, 8, 8, 4, 2);
    for layer in &mut uniform.layers {
        layer.patches = Tensor::full(vec![8, 8, 4], 0.7);
    }
    let map = params.attention_map(&uniform, 0, Branch::Fine).unwrap();
    for &v in map.data() {
        assert!((v - 1.0 / 64.0).abs() < 1e-9);
    }

    assert!(params.attention_map(&rec, 99, Branch::Fine).is_err());
}

#[test]
fn linear_probe_reference_cases() {
    let mut probe = LinearProbeParams::init(3, 8, 5).unwrap();
    let rec = record(17, 8, 8, 4, 2);

    probe.w = Tensor::zeros(vec![8, 3]);
    probe.b = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let logits = probe.forward(&rec).unwrap();
    assert_eq!(logits.data(), &[0.1, 0.2, 0.3]);

    // random case matches the linear op directly
    let mut rng = substream(18, "head-test", 0);
    probe.w = Tensor::randn(vec![8, 3], &mut rng);
    probe.b = Tensor::randn(vec![3], &mut rng);
    let logits = probe.forward(&rec).unwrap();
    let (_, cls) = concat_layers(&rec).unwrap();
    for m in 0..3 {
        let expect: f64 = (0..8).map(|j| cls.data()[j] * probe.w.data()[j * 3 + m]).sum::<f64>()
            + probe.b.data()[m];
        assert!((logits.data()[m] - expect).abs() < 1e-12);
    }
}

#[test]
fn full_head_gradient_check_on_small_config() {
    let params = GLoRIParams::init(small_config()).unwrap();
    let rec = record(19, 8, 8, 4, 2);
    let labels = [1.0, 0.0];
    let tensors: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();

    let err = grad_check_multi(
        |tape, vars| {
            let gv = GLoRIVars { vars: vars.to_vec() };
            let out = params.forward_on_tape(tape, &gv, &rec)?;
            tape.bce_with_logits(out.logits, &labels)
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "full head grad error {err}");
}

#[test]
fn loss_and_grads_matches_forward_loss() {
    let params = HeadParams::Glori(Box::new(GLoRIParams::init(small_config()).unwrap()));
    let rec = record(20, 8, 8, 4, 2);
    let labels = [0.0, 1.0];
    let (loss, grads) = params.loss_and_grads(&rec, &labels).unwrap();
    assert!(loss.is_finite());
    assert_eq!(grads.len(), params.named_tensors().len());
    for ((_, t), g) in params.named_tensors().iter().zip(&grads) {
        assert_eq!(t.shape(), g.shape());
    }
}
