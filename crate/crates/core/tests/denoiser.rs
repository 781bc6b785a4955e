use mc2_core::autodiff::Graph;
use mc2_core::denoiser::{
    checkpoint, denoise_forward, encode_prompt, grad_wrt_latent, AdapterKind, AdapterPayload,
    Branch, ConceptAdapter, DenoiserConfig, DenoiserParams, ForwardNodes, Vocabulary,
};
use mc2_core::guidance::{ConceptMaps, GuidanceConfig, GuidanceObjective, Mcg};
use mc2_core::numerics::{finite_diff_grad, relative_l2_error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
}

fn params(seed: u64) -> DenoiserParams {
    DenoiserParams::random(DenoiserConfig::default(), seed).unwrap()
}

fn tokens(v: &Vocabulary, text: &str) -> Vec<mc2_core::denoiser::TokenId> {
    v.tokenize(text).unwrap()
}

#[test]
fn degenerate_network_outputs_bias_and_uniform_attention() {
    let mut p = DenoiserParams::zeros(DenoiserConfig::default()).unwrap();
    p.b_out = Tensor::matrix(1, 4, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    p.time_gain = Tensor::zeros(&[1, 16]);
    let v = Vocabulary::standard();
    let c = encode_prompt(&tokens(&v, "photo of a dog"), &p, None).unwrap();
    let z = Tensor::from_fn(&[3, 3, 4], |i| i as f64 * 0.1);
    let (eps, attn) = denoise_forward(&z, 10, &c, &p, None).unwrap();
    for px in eps.data().chunks(4) {
        assert_eq!(px, &[0.1, -0.2, 0.3, 0.4]);
    }
    for a in attn.maps.iter().flatten() {
        assert!(a.data().iter().all(|x| (x - 1.0 / 12.0).abs() < 1e-15));
    }
}

#[test]
fn forward_is_deterministic_and_rows_normalized() {
    let p = params(3);
    let v = Vocabulary::standard();
    let c = encode_prompt(&tokens(&v, "photo of the <c0> and dog, a <c0>"), &p, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random_tensor(&[8, 8, 4], &mut rng, 1.5);
    let a = denoise_forward(&z, 500, &c, &p, None).unwrap();
    let b = denoise_forward(&z, 500, &c, &p, None).unwrap();
    assert_eq!(a, b);
    for m in a.1.maps.iter().flatten() {
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert!(denoise_forward(&Tensor::zeros(&[8, 8, 3]), 1, &c, &p, None).is_err());
}

#[test]
fn zero_payload_adapters_are_neutral() {
    let p = params(5);
    let v = Vocabulary::standard();
    let trig = v.id("<c0>").unwrap();
    let prompt = tokens(&v, "photo of a <c0>");
    let c0 = encode_prompt(&prompt, &p, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random_tensor(&[4, 4, 4], &mut rng, 1.0);
    let base = denoise_forward(&z, 100, &c0, &p, None).unwrap();
    for kind in [AdapterKind::EmbeddingOffset, AdapterKind::LowRank, AdapterKind::FullDelta] {
        let ad = ConceptAdapter::zero(kind, trig, &p).unwrap();
        let c = encode_prompt(&prompt, &p, Some(&ad)).unwrap();
        assert_eq!(c, c0, "{kind}");
        assert_eq!(denoise_forward(&z, 100, &c, &p, Some(&ad)).unwrap(), base, "{kind}");
    }
    // Low-rank factors with a random `down` and zero `up` are also neutral.
    let ad = ConceptAdapter::init_for_training(AdapterKind::LowRank, trig, &p, &mut rng).unwrap();
    let c = encode_prompt(&prompt, &p, Some(&ad)).unwrap();
    assert_eq!(denoise_forward(&z, 100, &c, &p, Some(&ad)).unwrap(), base);
}

#[test]
fn offset_scale_is_linear() {
    let p = params(8);
    let v = Vocabulary::standard();
    let trig = v.id("<c1>").unwrap();
    let mut ad = ConceptAdapter::zero(AdapterKind::EmbeddingOffset, trig, &p).unwrap();
    ad.payload = AdapterPayload::EmbeddingOffset(Tensor::matrix(1, 8, vec![0.3; 8]).unwrap());
    // Identity mixing and zero bias expose the pre-mix rows through atanh.
    let mut q = p.clone();
    q.w_mix = Tensor::from_fn(&[8, 8], |i| if i % 9 == 0 { 1.0 } else { 0.0 });
    q.b_mix = Tensor::zeros(&[1, 8]);
    let prompt = tokens(&v, "a <c1>");
    let base = encode_prompt(&prompt, &q, None).unwrap();
    let diff = |scale: f64| {
        let mut a = ad.clone();
        a.scale = scale;
        let c = encode_prompt(&prompt, &q, Some(&a)).unwrap();
        (0..8)
            .map(|j| c.get2(1, j).atanh() - base.get2(1, j).atanh())
            .collect::<Vec<_>>()
    };
    let d1 = diff(0.7);
    let d2 = diff(1.4);
    for (a, b) in d1.iter().zip(&d2) {
        assert!((2.0 * a - b).abs() < 1e-9, "{a} {b}");
    }
}

#[test]
fn unknown_token_is_rejected() {
    let p = params(1);
    assert!(encode_prompt(&[mc2_core::denoiser::TokenId(64)], &p, None).is_err());
}

fn mcg_closure(
    cfg: &GuidanceConfig,
    triggers: Vec<Vec<usize>>,
) -> impl Fn(&mut Graph, &[ForwardNodes]) -> mc2_core::Result<mc2_core::autodiff::NodeId> + '_ {
    move |g, nodes| {
        let concepts = nodes
            .iter()
            .zip(&triggers)
            .map(|(n, t)| ConceptMaps::record(g, n, t, cfg))
            .collect::<mc2_core::Result<Vec<_>>>()?;
        Ok(Mcg.record(g, &concepts, cfg)?.total)
    }
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let v = Vocabulary::standard();
    let cfg = GuidanceConfig::default();
    let p1 = tokens(&v, "photo of the <c0> and dog, a <c0>");
    let p2 = tokens(&v, "photo of the cat and <c1>, a <c1>");
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let p = params(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a1 = ConceptAdapter::zero(AdapterKind::EmbeddingOffset, v.id("<c0>").unwrap(), &p).unwrap();
        a1.payload = AdapterPayload::EmbeddingOffset(random_tensor(&[1, 8], &mut rng, 1.0));
        let mut a2 = ConceptAdapter::init_for_training(AdapterKind::LowRank, v.id("<c1>").unwrap(), &p, &mut rng).unwrap();
        for t in a2.tensors_mut() {
            *t = random_tensor(t.shape(), &mut rng, 0.5);
        }
        let branches = [Branch::new(&p, Some(&a1), &p1), Branch::new(&p, Some(&a2), &p2)];
        let trig = vec![vec![4, 8], vec![5, 8]];
        let z = random_tensor(&[8, 8, 4], &mut rng, 1.0);
        let t = rng.gen_range(0..1000);
        let (_, grad) = grad_wrt_latent(&z, t, &branches, mcg_closure(&cfg, trig.clone())).unwrap();
        let fd = finite_diff_grad(
            |x| grad_wrt_latent(x, t, &branches, mcg_closure(&cfg, trig.clone())).map(|r| r.0),
            &z,
            1e-4,
        )
        .unwrap();
        let err = relative_l2_error(&grad, &fd, 1e-12);
        worst = worst.max(err);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn constant_and_row_sum_losses_have_zero_gradient() {
    let v = Vocabulary::standard();
    let p = params(9);
    let prompt = tokens(&v, "photo of a dog");
    let branches = [Branch::new(&p, None, &prompt)];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random_tensor(&[4, 4, 4], &mut rng, 1.0);
    let (_, g) = grad_wrt_latent(&z, 50, &branches, |g, _| Ok(g.scalar(3.0))).unwrap();
    assert!(g.data().iter().all(|x| *x == 0.0));
    let (_, g) = grad_wrt_latent(&z, 50, &branches, |g, nodes| {
        let parts: Vec<_> = nodes[0].attention.iter().flatten().map(|a| g.sum_all(*a)).collect();
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = g.add(acc, *p);
        }
        Ok(acc)
    })
    .unwrap();
    assert!(g.max_abs() < 1e-12, "{}", g.max_abs());
}

#[test]
fn checkpoint_round_trip() {
    let v = Vocabulary::standard();
    let p = params(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in [AdapterKind::EmbeddingOffset, AdapterKind::LowRank, AdapterKind::FullDelta] {
        let mut a = ConceptAdapter::zero(kind, v.id("<c3>").unwrap(), &p).unwrap();
        for t in a.tensors_mut() {
            // Values exactly representable in f32 survive the MCT1 payload.
            *t = Tensor::from_fn(t.shape(), |_| (rng.gen_range(-64i32..64) as f64) / 32.0);
        }
        a.scale = 0.9;
        let text = checkpoint::to_json(&a, &v).unwrap();
        assert!(text.contains("\"format\": 1"));
        let back = checkpoint::from_json(&text, &v).unwrap();
        assert_eq!(back, a);
        back.validate(&p).unwrap();
    }
    assert!(checkpoint::from_json("{\"format\":2,\"kind\":\"embedding-offset\",\"trigger\":\"<c0>\",\"scale\":0.7,\"tensors\":[]}", &v).is_err());
}
