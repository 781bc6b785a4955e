//! Subcommand bodies. Each one reads the resolved [`RunConfig`], writes its
//! artifacts under the output directory and prints a short summary.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use mc2_core::checks::{network_gradient_case, oracle_descent_case, oracle_gradient_case};
use mc2_core::denoiser::{checkpoint, Branch, ConceptAdapter, DenoiserParams, Vocabulary};
use mc2_core::grounding::train_concept;
use mc2_core::harness::render::{read_pgm, write_pgm, write_pgm_scaled, write_png};
use mc2_core::harness::{
    build_scene_dataset, build_scene_samples, builtin_adapter, build_world, caption,
    concept_by_name, ground, image_from_latent, load_dataset, run_grounding_trial, run_scenario,
    save_dataset, ScenarioConfig, Variant,
};
use mc2_core::masks::propose_masks;
use mc2_core::numerics::{mct1, Map2D, Tensor};
use mc2_core::sampler::{
    compgen_plan, mc2_plan, run_compgen, run_mc2, standard_normal, ConceptRef, RunOptions,
    RunOutput, RunPlan,
};

use crate::config::RunConfig;

/// Degenerate-input diagnostics, fatal under `--strict`.
#[derive(Debug)]
pub struct Degenerate(pub Vec<String>);

impl fmt::Display for Degenerate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "degenerate input: {}", self.0.join("; "))
    }
}

impl std::error::Error for Degenerate {}

/// A numerical check that ran but missed its tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Resolved configuration and the global flags.
pub struct Ctx {
    pub cfg: RunConfig,
    pub dry_run: bool,
    pub strict: bool,
}

impl Ctx {
    fn out(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.cfg.output.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn check_diagnostics(&self, diagnostics: Vec<String>) -> Result<()> {
        if diagnostics.is_empty() {
            return Ok(());
        }
        for d in &diagnostics {
            log::warn!("{d}");
        }
        if self.strict {
            return Err(Degenerate(diagnostics).into());
        }
        Ok(())
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Stacks equally sized maps into an `n x h x w` tensor.
fn stack_maps(maps: &[Map2D]) -> Result<Tensor> {
    let (h, w) = maps.first().map(Map2D::dims).unwrap_or((0, 0));
    let data = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    Ok(Tensor::new(vec![maps.len(), h, w], data)?)
}

fn stack_tensors(ts: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts.first().map(Tensor::shape).unwrap_or(&[]));
    let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

fn print_dry_run(ctx: &Ctx, plan: &[String]) -> Result<()> {
    println!("{}", ctx.cfg.dump()?);
    for line in plan {
        println!("# {line}");
    }
    Ok(())
}

struct World {
    vocab: Vocabulary,
    params: DenoiserParams,
}

fn world(cfg: &RunConfig) -> Result<World> {
    let vocab = Vocabulary::standard();
    let params = build_world(&vocab, &cfg.world)?;
    Ok(World { vocab, params })
}

/// Adapters with their category words: checkpoints when configured,
/// built-in adapters of the named concepts otherwise.
fn concept_adapters(cfg: &RunConfig, w: &World) -> Result<Vec<(ConceptAdapter, String)>> {
    if !cfg.adapters.is_empty() {
        return cfg
            .adapters
            .iter()
            .map(|a| {
                let adapter = checkpoint::load(&a.path, &w.vocab)
                    .with_context(|| format!("loading adapter {}", a.path.display()))?;
                adapter.validate(&w.params)?;
                Ok((adapter, a.category.clone()))
            })
            .collect();
    }
    cfg.concepts
        .iter()
        .map(|name| {
            let spec = concept_by_name(name)?;
            Ok((builtin_adapter(&w.params, &w.vocab, &spec, &cfg.world)?, spec.category))
        })
        .collect()
}

fn describe_plan(plan: &RunPlan<'_>, vocab: &Vocabulary) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for (i, b) in plan.branches.iter().enumerate() {
        lines.push(format!(
            "branch {i}: weight {} prompt \"{}\"",
            b.weight,
            vocab.detokenize(&b.prompt.tokens)?
        ));
    }
    for c in &plan.concepts {
        lines.push(format!("guided: branch {} columns {:?}", c.branch, c.triggers));
    }
    Ok(lines)
}

#[derive(Serialize)]
struct RunLine<'a> {
    seed: u64,
    final_inter: Option<f64>,
    guided_steps: usize,
    diagnostics: &'a [String],
}

fn write_run(dir: &Path, seed: u64, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    mct1::write_file(&dir.join("latent.mct"), &out.image)?;
    write_png(&dir.join("image.png"), &image_from_latent(&out.image)?)?;
    write_jsonl(&dir.join("trace.jsonl"), &out.trace.steps)?;
    let maps = &out.trace.final_concept_maps;
    if !maps.is_empty() {
        mct1::write_file(&dir.join("concept_maps.mct"), &stack_maps(maps)?)?;
        for (k, m) in maps.iter().enumerate() {
            write_pgm_scaled(&dir.join(format!("concept_{k}.pgm")), m)?;
        }
    }
    let last = out.trace.steps.len().checked_sub(1);
    write_jsonl(
        &dir.join("run.jsonl"),
        [RunLine {
            seed,
            final_inter: last.and_then(|s| out.trace.inter_at(s)),
            guided_steps: out.trace.guided_steps(),
            diagnostics: &out.trace.diagnostics,
        }],
    )
}

fn run_seeds<F>(ctx: &Ctx, sub: &str, run: F) -> Result<Vec<(u64, RunOutput)>>
where
    F: Fn(u64) -> mc2_core::Result<RunOutput> + Sync,
{
    let dir = ctx.out(sub)?;
    let results = ctx
        .cfg
        .seeds
        .par_iter()
        .map(|&s| run(s).map(|o| (s, o)))
        .collect::<mc2_core::Result<Vec<_>>>()?;
    let mut diagnostics = Vec::new();
    for (seed, out) in &results {
        write_run(&dir.join(format!("seed_{seed}")), *seed, out)?;
        diagnostics.extend(out.trace.diagnostics.iter().map(|d| format!("seed {seed}: {d}")));
        let last = out.trace.steps.len().saturating_sub(1);
        println!(
            "seed {seed}: final inter {}",
            out.trace
                .inter_at(last)
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    println!("wrote {}", dir.display());
    ctx.check_diagnostics(diagnostics)?;
    Ok(results)
}

fn generate_runs(ctx: &Ctx) -> Result<Option<Vec<(u64, RunOutput)>>> {
    let cfg = &ctx.cfg;
    let w = world(cfg)?;
    let adapters = concept_adapters(cfg, &w)?;
    let refs: Vec<ConceptRef<'_>> = adapters
        .iter()
        .map(|(a, c)| ConceptRef {
            adapter: a,
            category: c,
        })
        .collect();
    if ctx.dry_run {
        let plan = mc2_plan(&w.params, &w.vocab, &refs, &cfg.template, &cfg.guidance)?;
        print_dry_run(ctx, &describe_plan(&plan, &w.vocab)?)?;
        return Ok(None);
    }
    let opts = RunOptions::default();
    let runs = run_seeds(ctx, "generate", |seed| {
        run_mc2(
            &w.params,
            &w.vocab,
            &refs,
            &cfg.template,
            &cfg.guidance,
            &cfg.sampler,
            seed,
            &opts,
        )
    })?;
    Ok(Some(runs))
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    generate_runs(ctx).map(|_| ())
}

pub fn compgen(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let w = world(cfg)?;
    let c = &cfg.compgen;
    if ctx.dry_run {
        let plan = compgen_plan(&w.params, &w.vocab, &c.prompt, &c.subjects, &cfg.template, &cfg.guidance)?;
        return print_dry_run(ctx, &describe_plan(&plan, &w.vocab)?);
    }
    let opts = RunOptions::default();
    run_seeds(ctx, "compgen", |seed| {
        run_compgen(
            &w.params,
            &w.vocab,
            &c.prompt,
            &c.subjects,
            &cfg.template,
            &cfg.guidance,
            &cfg.sampler,
            seed,
            &opts,
        )
    })?;
    Ok(())
}

fn read_map(path: &Path) -> Result<Map2D> {
    let is_mct = path.extension().is_some_and(|e| e == "mct");
    if !is_mct {
        return Ok(read_pgm(path).with_context(|| format!("reading {}", path.display()))?);
    }
    let t = mct1::read_file(path).with_context(|| format!("reading {}", path.display()))?;
    match *t.shape() {
        [h, w] | [h, w, 1] => Ok(Map2D::new(h, w, t.into_data())?),
        ref s => bail!("{}: expected an h x w map, got shape {s:?}", path.display()),
    }
}

#[derive(Serialize)]
struct MaskLine<'a> {
    counts: &'a mc2_core::masks::StageCounts,
    diagnostics: &'a [String],
}

/// Proposes masks from two given maps, or from the final concept maps of a
/// generate run at the first seed.
pub fn masks(ctx: &Ctx, maps: Option<(PathBuf, PathBuf)>) -> Result<()> {
    let (a1, a2) = match maps {
        Some((p1, p2)) => {
            if ctx.dry_run {
                return print_dry_run(ctx, &[format!("masks from {} and {}", p1.display(), p2.display())]);
            }
            (read_map(&p1)?, read_map(&p2)?)
        }
        None => {
            let single = Ctx {
                cfg: RunConfig {
                    seeds: vec![ctx.cfg.seeds[0]],
                    ..ctx.cfg.clone()
                },
                dry_run: ctx.dry_run,
                strict: ctx.strict,
            };
            let Some(runs) = generate_runs(&single)? else {
                return Ok(());
            };
            let maps = &runs[0].1.trace.final_concept_maps;
            if maps.len() < 2 {
                bail!("mask proposal needs two concepts, the run has {}", maps.len());
            }
            (maps[0].clone(), maps[1].clone())
        }
    };
    let proposal = propose_masks(&a1, &a2, &ctx.cfg.sampler.masks)?;
    let dir = ctx.out("masks")?;
    for k in 0..2 {
        write_pgm(&dir.join(format!("soft_{}.pgm", k + 1)), &proposal.masks[k])?;
        write_pgm(&dir.join(format!("hard_{}.pgm", k + 1)), &proposal.hard[k])?;
    }
    mct1::write_file(&dir.join("soft.mct"), &stack_maps(&proposal.masks)?)?;
    mct1::write_file(&dir.join("hard.mct"), &stack_maps(&proposal.hard)?)?;
    write_jsonl(
        &dir.join("masks.jsonl"),
        [MaskLine {
            counts: &proposal.counts,
            diagnostics: &proposal.diagnostics,
        }],
    )?;
    println!(
        "assigned {:?} pixels, ring {}; wrote {}",
        proposal.counts.assigned,
        proposal.counts.ring,
        dir.display()
    );
    ctx.check_diagnostics(proposal.diagnostics)
}

fn file_safe(word: &str) -> String {
    word.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Cross-attention of one prompt on a noised render of the first concept.
pub fn inspect_attn(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let w = world(cfg)?;
    let spec = concept_by_name(cfg.concepts.first().context("no concept configured")?)?;
    let prompt = if cfg.inspect.prompt.is_empty() {
        caption(&spec)
    } else {
        cfg.inspect.prompt.clone()
    };
    let tokens = w.vocab.tokenize(&prompt)?;
    let t = cfg.inspect.timestep;
    if ctx.dry_run {
        return print_dry_run(ctx, &[format!("prompt \"{prompt}\" at timestep {t}")]);
    }
    let adapters = concept_adapters(cfg, &w)?;
    let adapter = adapters.iter().map(|(a, _)| a).find(|a| tokens.contains(&a.trigger));
    let seed = cfg.seeds[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, wd) = (cfg.sampler.height, cfg.sampler.width);
    let sample = build_scene_samples(&spec, 1, h, wd, &mut rng)?.remove(0);
    let x0 = ground(&w.vocab, &spec, &sample)?.x0;
    let noise = standard_normal(x0.shape(), &mut rng);
    let ab = w.params.alpha_bar(t);
    let xt = x0.zip_with(&noise, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)?;
    let (_, attn) = Branch::new(&w.params, adapter, &tokens).forward(&xt, t)?;
    let columns: Vec<usize> = (0..tokens.len()).collect();
    let maps = mc2_core::attention::extract_trigger_maps(&attn, &columns, (h, wd))?;

    let dir = ctx.out("inspect")?;
    mct1::write_file(&dir.join("noisy_latent.mct"), &xt)?;
    mct1::write_file(&dir.join("attention.mct"), &stack_maps(&maps)?)?;
    write_pgm(&dir.join("mask.pgm"), &sample.mask)?;
    for (i, (m, id)) in maps.iter().zip(&tokens).enumerate() {
        let word = file_safe(w.vocab.word(*id)?);
        write_pgm_scaled(&dir.join(format!("token_{i:02}_{word}.pgm")), m)?;
    }
    println!("{} token maps of \"{prompt}\" at t={t}; wrote {}", maps.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    variant: &'a str,
    #[serde(flatten)]
    report: std::collections::BTreeMap<String, serde_json::Value>,
}

pub fn eval(ctx: &Ctx, variants: &[String], grounding: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let names = if variants.is_empty() {
        &cfg.eval.variants
    } else {
        variants
    };
    let variants = names
        .iter()
        .map(|v| Variant::parse(v))
        .collect::<mc2_core::Result<Vec<_>>>()?;
    let scenario = ScenarioConfig {
        concepts: cfg.concepts.clone(),
        seeds: cfg.seeds.clone(),
        world: cfg.world.clone(),
        guidance: cfg.guidance.clone(),
        sampler: cfg.sampler.clone(),
        template: cfg.template.clone(),
        presence_threshold: cfg.eval.presence_threshold,
        inter_step: cfg.eval.inter_step,
        adapters: cfg.eval.adapters.clone(),
    };
    scenario.validate()?;
    let grounding = grounding || cfg.eval.grounding;
    if ctx.dry_run {
        let mut plan: Vec<String> = variants.iter().map(|v| format!("variant {}", v.name())).collect();
        if grounding {
            plan.push(format!("grounding trials on {}", cfg.eval.trial.concept));
        }
        return print_dry_run(ctx, &plan);
    }
    let dir = ctx.out("eval")?;
    let mut summaries = Vec::new();
    for v in variants {
        let result = run_scenario(&scenario, v)?;
        let vdir = dir.join(v.name());
        fs::create_dir_all(&vdir)?;
        write_jsonl(&vdir.join("scenes.jsonl"), &result.scenes)?;
        for (img, s) in result.images.iter().zip(&cfg.seeds) {
            write_png(&vdir.join(format!("seed_{s}.png")), img)?;
        }
        mct1::write_file(&vdir.join("images.mct"), &stack_tensors(&result.images)?)?;
        let s = &result.summary;
        println!(
            "{:<13} co-occurrence {:.2}  final inter {}",
            v.name(),
            s.co_occurrence_rate,
            s.mean_final_inter_loss
                .map_or("n/a".to_string(), |x| format!("{x:.4}"))
        );
        summaries.push(SummaryLine {
            variant: v.name(),
            report: s.report(),
        });
    }
    write_jsonl(&dir.join("summary.jsonl"), &summaries)?;
    if grounding {
        let trials = cfg
            .seeds
            .par_iter()
            .map(|&s| run_grounding_trial(&cfg.world, &cfg.eval.trial, s))
            .collect::<mc2_core::Result<Vec<_>>>()?;
        let wins = trials.iter().filter(|t| t.improved()).count();
        println!("grounding improved in-mask mass on {wins}/{} seeds", trials.len());
        write_jsonl(&dir.join("grounding.jsonl"), &trials)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct CheckLine {
    suite: &'static str,
    seed: u64,
    value: f64,
    pass: bool,
}

/// Finite-difference and descent suites.
pub fn gradcheck(ctx: &Ctx, cases: u64) -> Result<()> {
    let g = &ctx.cfg.guidance;
    if ctx.dry_run {
        return print_dry_run(
            ctx,
            &[format!("{cases} network and {cases} oracle gradient cases, 100 descent cases")],
        );
    }
    let network = (0..cases)
        .into_par_iter()
        .map(|s| network_gradient_case(s, g))
        .collect::<mc2_core::Result<Vec<_>>>()?;
    let oracle = (0..cases)
        .into_par_iter()
        .map(|s| oracle_gradient_case(s, g))
        .collect::<mc2_core::Result<Vec<_>>>()?;
    let descent = (0..100)
        .into_par_iter()
        .map(|s| oracle_descent_case(s, 1e-3, g))
        .collect::<mc2_core::Result<Vec<_>>>()?;
    let mut lines = Vec::new();
    lines.extend(network.iter().map(|c| CheckLine {
        suite: "network-gradient",
        seed: c.seed,
        value: c.relative_error,
        pass: c.relative_error < 1e-4,
    }));
    lines.extend(oracle.iter().map(|c| CheckLine {
        suite: "oracle-gradient",
        seed: c.seed,
        value: c.relative_error,
        pass: c.relative_error < 1e-6,
    }));
    lines.extend(descent.iter().map(|c| CheckLine {
        suite: "descent",
        seed: c.seed,
        value: c.after - c.before,
        pass: c.decreased(),
    }));
    let dir = ctx.out("gradcheck")?;
    write_jsonl(&dir.join("gradcheck.jsonl"), &lines)?;

    let worst = |v: &[mc2_core::checks::GradCase]| v.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let descended = descent.iter().filter(|c| c.decreased()).count();
    println!("network gradient: worst relative error {:.3e}", worst(&network));
    println!("oracle gradient:  worst relative error {:.3e}", worst(&oracle));
    println!("descent: {descended}/100 steps lowered the loss");
    let mut failed = Vec::new();
    if worst(&network) >= 1e-4 {
        failed.push("network gradient");
    }
    if worst(&oracle) >= 1e-6 {
        failed.push("oracle gradient");
    }
    if descended < 95 {
        failed.push("descent");
    }
    if !failed.is_empty() {
        return Err(CheckFailed(failed.join(", ")).into());
    }
    Ok(())
}

fn dataset_concepts(ctx: &Ctx, concept: Option<&str>) -> Result<Vec<String>> {
    Ok(match concept {
        Some(c) => vec![concept_by_name(c)?.name],
        None => ctx.cfg.concepts.clone(),
    })
}

pub fn make_dataset(ctx: &Ctx, concept: Option<&str>) -> Result<()> {
    let cfg = &ctx.cfg;
    let names = dataset_concepts(ctx, concept)?;
    if ctx.dry_run {
        let plan: Vec<String> = names
            .iter()
            .map(|n| format!("{} renders of {n}", cfg.dataset.count))
            .collect();
        return print_dry_run(ctx, &plan);
    }
    let (h, w) = (cfg.sampler.height, cfg.sampler.width);
    for (k, name) in names.iter().enumerate() {
        let spec = concept_by_name(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0].wrapping_add(k as u64));
        let samples = build_scene_samples(&spec, cfg.dataset.count, h, w, &mut rng)?;
        save_dataset(&cfg.output, &spec, &samples)?;
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let dir = cfg.output.join("concepts").join(name);
        mct1::write_file(&dir.join("images.mct"), &stack_tensors(&images)?)?;
        println!("{} samples of {name} in {}", samples.len(), dir.display());
    }
    Ok(())
}

pub fn train(ctx: &Ctx, concept: Option<&str>, dataset: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let name = dataset_concepts(ctx, concept)?
        .into_iter()
        .next()
        .context("no concept configured")?;
    let spec = concept_by_name(&name)?;
    if ctx.dry_run {
        let source = dataset.map_or("fresh renders".to_string(), |d| d.display().to_string());
        return print_dry_run(
            ctx,
            &[format!(
                "train {} adapter for {} on {source}, {} steps",
                cfg.train.kind.name(),
                spec.trigger,
                cfg.train.steps
            )],
        );
    }
    let w = world(cfg)?;
    let data = match dataset {
        Some(dir) => {
            let (meta, samples) =
                load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            if meta.concept.name != spec.name {
                bail!("dataset holds {}, not {}", meta.concept.name, spec.name);
            }
            samples
                .iter()
                .map(|s| ground(&w.vocab, &spec, s))
                .collect::<mc2_core::Result<Vec<_>>>()?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
            let (h, wd) = (cfg.sampler.height, cfg.sampler.width);
            build_scene_dataset(&w.vocab, &spec, cfg.dataset.count, h, wd, &mut rng)?
        }
    };
    let trigger = w.vocab.id(&spec.trigger)?;
    let report = train_concept(&w.params, &data, trigger, &cfg.train)?;
    let dir = ctx.out("adapters")?;
    checkpoint::save(&dir.join(format!("{name}.json")), &report.adapter, &w.vocab)?;
    for (i, t) in report.adapter.tensors().into_iter().enumerate() {
        mct1::write_file(&dir.join(format!("{name}.{i}.mct")), t)?;
    }
    write_jsonl(&dir.join(format!("{name}.train.jsonl")), &report.curve)?;
    match report.final_loss() {
        Some(l) => println!(
            "trained {name}: final loss {:.4} (diffusion {:.4}, l1 {:.4}, l2 {:.4})",
            l.total, l.diffusion, l.l1, l.l2
        ),
        None => println!("trained {name}: zero steps, zero adapter"),
    }
    println!("wrote {}", dir.display());
    Ok(())
}
