//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints its own verdict line; exits nonzero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mc2_core::checks::{network_gradient_case, oracle_descent_case, oracle_gradient_case};
use mc2_core::guidance::{inter_loss, intra_loss, mcg_loss, GuidanceConfig};
use mc2_core::harness::{
    run_grounding_trial, run_scenario, GroundingTrialConfig, ScenarioConfig, ScenarioResult, Variant,
    WorldConfig,
};
use mc2_core::masks::{propose_masks, MaskProposalConfig};
use mc2_core::numerics::{dilate, distance_to_set, Map2D, Tensor};
use mc2_core::sampler::{masked_merge, semantic_merge};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;
#[path = "../../core/tests/fixtures/mod.rs"]
mod fixtures;

type Verdict = Result<(bool, String), String>;

fn gradient_fidelity() -> Verdict {
    let g = GuidanceConfig::default();
    let start = Instant::now();
    let network = (0..20u64)
        .into_par_iter()
        .map(|s| network_gradient_case(s, &g))
        .collect::<mc2_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let oracle = (0..20u64)
        .into_par_iter()
        .map(|s| oracle_gradient_case(s, &g))
        .collect::<mc2_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = |v: &[mc2_core::checks::GradCase]| v.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let (wn, wo) = (worst(&network), worst(&oracle));
    Ok((
        wn < 1e-4 && wo < 1e-6 && secs < 60.0,
        format!("network worst {wn:.2e} (< 1e-4), oracle worst {wo:.2e} (< 1e-6), {secs:.1} s (< 60 s)"),
    ))
}

fn loss_closed_forms() -> Verdict {
    let g = GuidanceConfig::default();
    let reduction = mc2_core::guidance::overlap_registry()
        .create(&g.overlap)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Map2D::new(8, 8, (0..64).map(|_| rng.gen_range(0.1..1.0)).collect()).map_err(|e| e.to_string())?;
    let left = Map2D::from_fn(8, 8, |_, x| if x < 4 { 0.7 } else { 0.0 }).map_err(|e| e.to_string())?;
    let right = Map2D::from_fn(8, 8, |_, x| if x >= 4 { 0.4 } else { 0.0 }).map_err(|e| e.to_string())?;
    let (same, disjoint) = ([a.clone(), a], [left, right]);
    let r = reduction.as_ref();
    let checks = [
        (intra_loss(&[same.to_vec()], r, g.eps_div), 0.5),
        (inter_loss(&same, r, g.eps_div), 0.5),
        (intra_loss(&[disjoint.to_vec()], r, g.eps_div), 1.0),
        (inter_loss(&disjoint, r, g.eps_div), 0.0),
    ];
    let mut worst = (mcg_loss(0.5, 0.5, 0.8) - 0.9).abs();
    for (got, want) in checks {
        worst = worst.max((got.map_err(|e| e.to_string())? - want).abs());
    }
    Ok((worst <= 1e-9, format!("largest deviation {worst:.1e} (<= 1e-9), {} overlap", g.overlap)))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
}

fn degeneration() -> Verdict {
    let mut plain = 0;
    let mut plain_ok = 0;
    let mut base_ok = 0;
    for stepper in ["ddim", "ddpm"] {
        for seed in 0..3 {
            for which in [0, 1] {
                let (g, p) = fixtures::plain_degeneration(seed, stepper, which);
                plain += 1;
                plain_ok += usize::from(g == p);
            }
            let (g, b) = fixtures::baseline_degeneration(seed, stepper);
            base_ok += usize::from(g == b);
        }
    }
    let mut merge_ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, l) = (rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..5));
        let branches = rng.gen_range(1..5);
        let u = random_tensor(&[h, w, l], &mut rng);
        let e: Vec<Tensor> = (0..branches).map(|_| random_tensor(&[h, w, l], &mut rng)).collect();
        let weights: Vec<f64> = (0..branches).map(|_| rng.gen_range(0.0..8.0)).collect();
        let ones = vec![Map2D::filled(h, w, 1.0); branches];
        let masked = masked_merge(&u, &e, &ones, &weights).map_err(|e| e.to_string())?;
        let semantic = semantic_merge(&u, &e, &weights).map_err(|e| e.to_string())?;
        merge_ok += usize::from(masked == semantic);
    }
    Ok((
        plain_ok == plain && base_ok == 6 && merge_ok == 100,
        format!("plain {plain_ok}/{plain}, baseline {base_ok}/6, all-ones merge {merge_ok}/100 bit-exact"),
    ))
}

fn descent() -> Verdict {
    let g = GuidanceConfig::default();
    let cases = (0..100u64)
        .into_par_iter()
        .map(|s| oracle_descent_case(s, 1e-3, &g))
        .collect::<mc2_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let n = cases.iter().filter(|c| c.decreased()).count();
    Ok((n >= 95, format!("{n}/100 steps lowered the loss (>= 95)")))
}

struct Suite {
    runs: BTreeMap<&'static str, ScenarioResult>,
    pair_secs: f64,
}

fn scene_suite() -> Result<Suite, String> {
    let cfg = ScenarioConfig::default();
    let mut runs = BTreeMap::new();
    let mut pair_secs = 0.0;
    for v in [Variant::Full, Variant::NoGuidance, Variant::NoInter, Variant::NoIntra] {
        let start = Instant::now();
        let r = run_scenario(&cfg, v).map_err(|e| e.to_string())?;
        if matches!(v, Variant::Full | Variant::NoGuidance) {
            pair_secs += start.elapsed().as_secs_f64();
        }
        runs.insert(v.name(), r);
    }
    Ok(Suite { runs, pair_secs })
}

fn disentanglement(suite: &Suite) -> Verdict {
    let (full, base) = (&suite.runs["full"].summary, &suite.runs["no-guidance"].summary);
    let (Some(fi), Some(bi)) = (full.mean_final_inter_loss, base.mean_final_inter_loss) else {
        return Err("inter loss missing from a summary".into());
    };
    let drop = 1.0 - fi / bi;
    let gain = full.co_occurrence_rate - base.co_occurrence_rate;
    Ok((
        drop >= 0.20 && gain >= 0.15 - 1e-12 && suite.pair_secs < 600.0,
        format!(
            "inter {fi:.4} vs {bi:.4} ({:.0}% lower, >= 20%), co-occurrence {:.2} vs {:.2} (+{:.0} pp, >= 15), {:.0} s (< 600 s)",
            100.0 * drop,
            full.co_occurrence_rate,
            base.co_occurrence_rate,
            100.0 * gain,
            suite.pair_secs
        ),
    ))
}

fn ablation(suite: &Suite) -> Verdict {
    let rate = |v: &str| suite.runs[v].summary.co_occurrence_rate;
    let full = rate("full");
    let (no_inter, no_intra) = (full - rate("no-inter"), full - rate("no-intra"));
    Ok((
        no_inter > no_intra,
        format!("co-occurrence drop without inter {no_inter:.2}, without intra {no_intra:.2}"),
    ))
}

fn grounding() -> Verdict {
    let (world, trial) = (WorldConfig::default(), GroundingTrialConfig::default());
    let trials = (0..10u64)
        .into_par_iter()
        .map(|s| run_grounding_trial(&world, &trial, s))
        .collect::<mc2_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let n = trials.iter().filter(|t| t.improved()).count();
    Ok((n >= 8, format!("{n}/10 seeds raised in-mask mass (>= 8)")))
}

fn mask_oracle() -> Verdict {
    let cfg = MaskProposalConfig::default();
    let (mut exact, mut disjoint) = (0, 0);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = || Map2D::new(16, 16, (0..256).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let (a1, a2) = (map(), map());
        let p = propose_masks(&a1, &a2, &cfg).map_err(|e| e.to_string())?;
        let (hard, soft) = oracles::brute_masks(&a1, &a2, &cfg);
        exact += usize::from(p.hard == hard && p.masks == soft);
        let apart = p.hard[0].values().iter().zip(p.hard[1].values()).all(|(x, y)| *x == 0.0 || *y == 0.0);
        disjoint += usize::from(apart);
    }
    Ok((exact == 50 && disjoint == 50, format!("{exact}/50 bit-exact, {disjoint}/50 disjoint")))
}

fn geometry_oracles() -> Verdict {
    let (mut dist_ok, mut dil_ok) = (0, 0);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let p = rng.gen_range(0.02..0.6);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(p)).collect();
        let anchor = rng.gen_range(0..h * w);
        let m = Map2D::from_mask(h, w, |y, x| bits[y * w + x] || y * w + x == anchor);
        let d = distance_to_set(&m).map_err(|e| e.to_string())?;
        dist_ok += usize::from(d.values() == oracles::brute_distance(&m).as_slice());
        let r = rng.gen_range(1..=3);
        dil_ok += usize::from(dilate(&m, r).map_err(|e| e.to_string())? == oracles::brute_dilate(&m, r));
    }
    Ok((dist_ok == 200 && dil_ok == 200, format!("distance {dist_ok}/200, dilation {dil_ok}/200 exact")))
}

/// Config small enough that every subcommand finishes in seconds.
const SMALL: &str = "concepts = [\"red_disc\", \"blue_square\"]\n\
[guidance]\nguided_steps = 4\ntotal_steps = 6\n\
[train]\nsteps = 4\nbatch = 2\n\
[dataset]\ncount = 3\n\
[eval]\nvariants = [\"full\"]\n";

fn tensor_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "mct") || path.ends_with("gradcheck.jsonl") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).map_err(|e| e.to_string())?;
    let cfg = cfg.to_string_lossy().into_owned();
    let commands: [&[&str]; 8] = [
        &["generate"],
        &["compgen"],
        &["masks"],
        &["inspect-attn"],
        &["eval"],
        &["gradcheck", "--cases", "2"],
        &["make-dataset"],
        &["train-concept"],
    ];
    let mut failures = Vec::new();
    for args in commands {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{}-{run}", args[0]));
            let status = Command::new(env!("CARGO_BIN_EXE_mc2"))
                .env("RUST_LOG", "error")
                .args(args)
                .args(["--config", &cfg, "--seed", "7", "-o"])
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&status.stderr)));
            }
            outputs.push(tensor_files(&out));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            failures.push(args[0]);
        }
    }
    let detail = if failures.is_empty() {
        "8/8 subcommands byte-identical across runs".to_string()
    } else {
        format!("outputs differ or are missing for {}", failures.join(", "))
    };
    Ok((failures.is_empty(), detail))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        if on(n) {
            let v = f();
            report(n, name, &v);
            results.push((n, name, v));
        }
    };
    run(1, "gradient fidelity", &gradient_fidelity);
    run(2, "loss closed forms", &loss_closed_forms);
    run(3, "degeneration equalities", &degeneration);
    run(4, "descent", &descent);
    if on(5) || on(6) {
        match scene_suite() {
            Ok(suite) => {
                run(5, "disentanglement trend", &|| disentanglement(&suite));
                run(6, "ablation direction", &|| ablation(&suite));
            }
            Err(e) => {
                run(5, "disentanglement trend", &|| Err(e.clone()));
                run(6, "ablation direction", &|| Err(e.clone()));
            }
        }
    }
    run(7, "grounding effect", &grounding);
    run(8, "mask proposal oracle", &mask_oracle);
    run(9, "distance and dilation oracles", &geometry_oracles);
    run(10, "cli determinism", &determinism);

    let passed = results.iter().filter(|(_, _, v)| matches!(v, Ok((true, _)))).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

fn report(n: usize, name: &str, v: &Verdict) {
    match v {
        Ok((true, d)) => println!("criterion {n:>2} {name}: PASS  {d}"),
        Ok((false, d)) => println!("criterion {n:>2} {name}: FAIL  {d}"),
        Err(e) => println!("criterion {n:>2} {name}: FAIL  error: {e}"),
    }
}
