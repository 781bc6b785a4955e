use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::presence::TemplateBank;
use super::world::ConceptSpec;

pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.6;

/// Measurements of one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub seed: u64,
    /// Presence score per concept, in catalog order of the run.
    pub presence: Vec<f64>,
    pub co_occurrence: bool,
    pub final_inter: Option<f64>,
    pub wall_time_s: f64,
}

/// A generated image with what the sampler reported about it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunImage {
    pub seed: u64,
    /// RGB in `[0, 1]`, `h x w x 3`.
    pub image: Tensor,
    pub final_inter: Option<f64>,
    pub wall_time_s: f64,
}

pub fn score_scene(
    run: &RunImage,
    banks: &[TemplateBank],
    threshold: f64,
) -> Result<SceneMetrics> {
    let presence = banks
        .iter()
        .map(|b| b.score(&run.image))
        .collect::<Result<Vec<_>>>()?;
    let co_occurrence = presence.iter().all(|p| *p >= threshold);
    Ok(SceneMetrics {
        seed: run.seed,
        presence,
        co_occurrence,
        final_inter: run.final_inter,
        wall_time_s: run.wall_time_s,
    })
}

/// Summary over seeds. Means are taken over sorted values so the result does
/// not depend on image order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenes: usize,
    pub co_occurrence_rate: f64,
    pub mean_presence: BTreeMap<String, f64>,
    /// `None` when no scene reported an inter loss.
    pub mean_final_inter_loss: Option<f64>,
    pub total_wall_time_s: f64,
}

impl RunSummary {
    /// Flat report with fixed key names.
    pub fn report(&self) -> BTreeMap<String, serde_json::Value> {
        let mut out = BTreeMap::new();
        out.insert("scenes".to_string(), self.scenes.into());
        out.insert("co_occurrence_rate".to_string(), self.co_occurrence_rate.into());
        for (name, v) in &self.mean_presence {
            out.insert(format!("mean_presence.{name}"), (*v).into());
        }
        out.insert(
            "mean_final_inter_loss".to_string(),
            self.mean_final_inter_loss.map_or(serde_json::Value::Null, Into::into),
        );
        out.insert("total_wall_time_s".to_string(), self.total_wall_time_s.into());
        out
    }
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn summarize(scenes: &[SceneMetrics], specs: &[ConceptSpec]) -> Result<RunSummary> {
    if scenes.is_empty() {
        return Err(Error::EmptySet("no scenes to evaluate".into()));
    }
    if scenes.iter().any(|s| s.presence.len() != specs.len()) {
        return Err(Error::Shape("presence count differs from concept count".into()));
    }
    let n = scenes.len();
    let hits = scenes.iter().filter(|s| s.co_occurrence).count();
    let mean_presence = specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let v = scenes.iter().map(|s| s.presence[k]).collect();
            (spec.name.clone(), sorted_mean(v))
        })
        .collect();
    let inters: Vec<f64> = scenes.iter().filter_map(|s| s.final_inter).collect();
    Ok(RunSummary {
        scenes: n,
        co_occurrence_rate: hits as f64 / n as f64,
        mean_presence,
        mean_final_inter_loss: (!inters.is_empty()).then(|| sorted_mean(inters)),
        total_wall_time_s: sorted_mean(scenes.iter().map(|s| s.wall_time_s).collect()) * n as f64,
    })
}

/// Scores every image against every concept and aggregates.
pub fn evaluate_run(
    runs: &[RunImage],
    specs: &[ConceptSpec],
    threshold: f64,
) -> Result<(Vec<SceneMetrics>, RunSummary)> {
    if runs.is_empty() {
        return Err(Error::EmptySet("no images to evaluate".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("harness.presence_threshold", "must lie in [0, 1]"));
    }
    let banks = specs
        .iter()
        .map(TemplateBank::new)
        .collect::<Result<Vec<_>>>()?;
    let scenes = runs
        .iter()
        .map(|r| score_scene(r, &banks, threshold))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&scenes, specs)?;
    Ok((scenes, summary))
}
