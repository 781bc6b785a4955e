//! Small sampling setups shared by the integration tests and the acceptance
//! suite.

#![allow(dead_code)]

use mc2_core::denoiser::{AdapterKind, ConceptAdapter, DenoiserConfig, DenoiserParams, Vocabulary};
use mc2_core::guidance::GuidanceConfig;
use mc2_core::numerics::Tensor;
use mc2_core::sampler::{
    execute, mc2_plan, run_composed_baseline, sample_plain, ConceptRef, PromptTemplate,
    RunOptions, SamplerConfig,
};

pub fn small_sampler(stepper: &str) -> SamplerConfig {
    SamplerConfig {
        height: 8,
        width: 8,
        stepper: stepper.into(),
        ..Default::default()
    }
}

pub fn small_guidance() -> GuidanceConfig {
    GuidanceConfig {
        guided_steps: 6,
        total_steps: 10,
        ..Default::default()
    }
}

pub fn random_params(seed: u64) -> DenoiserParams {
    DenoiserParams::random(DenoiserConfig::default(), seed).unwrap()
}

/// A one-concept run with a zero-payload adapter, unit weight on branch
/// `which` and zero step size, next to plain single-model sampling from
/// that branch's prompt.
pub fn plain_degeneration(seed: u64, stepper: &str, which: usize) -> (Tensor, Tensor) {
    let vocab = Vocabulary::standard();
    let params = random_params(seed + 1000);
    let adapter = ConceptAdapter::zero(AdapterKind::LowRank, vocab.id("<c0>").unwrap(), &params).unwrap();
    let concepts = [ConceptRef {
        adapter: &adapter,
        category: "dog",
    }];
    let guidance = small_guidance();
    let sampler = small_sampler(stepper);
    let plan = mc2_plan(&params, &vocab, &concepts, &PromptTemplate::default(), &guidance).unwrap();
    let mut weights = vec![0.0; plan.branches.len()];
    weights[which] = 1.0;
    let opts = RunOptions {
        lambda_override: Some(0.0),
        weights_override: Some(weights),
    };
    let guided = execute(&plan, &guidance, &sampler, seed, &opts).unwrap().image;
    let tokens = plan.branches[which].prompt.tokens.clone();
    let plain = sample_plain(&params, None, &tokens, guidance.total_steps, &sampler, seed).unwrap();
    (guided, plain)
}

/// A two-concept run without guided steps, next to the composed-score
/// baseline over the same branches.
pub fn baseline_degeneration(seed: u64, stepper: &str) -> (Tensor, Tensor) {
    let vocab = Vocabulary::standard();
    let params = random_params(seed + 2000);
    let a = ConceptAdapter::zero(AdapterKind::EmbeddingOffset, vocab.id("<c0>").unwrap(), &params).unwrap();
    let mut b = ConceptAdapter::zero(AdapterKind::FullDelta, vocab.id("<c1>").unwrap(), &params).unwrap();
    for t in b.tensors_mut() {
        *t = Tensor::from_fn(t.shape(), |i| 0.01 * ((i % 7) as f64 - 3.0));
    }
    let concepts = [
        ConceptRef { adapter: &a, category: "dog" },
        ConceptRef { adapter: &b, category: "cat" },
    ];
    let guidance = GuidanceConfig {
        guided_steps: 0,
        ..small_guidance()
    };
    let sampler = small_sampler(stepper);
    let plan = mc2_plan(&params, &vocab, &concepts, &PromptTemplate::default(), &guidance).unwrap();
    let guided = execute(&plan, &guidance, &sampler, seed, &RunOptions::default()).unwrap().image;
    let baseline = run_composed_baseline(&plan, guidance.total_steps, &sampler, seed).unwrap();
    (guided, baseline)
}
