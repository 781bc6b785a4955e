use serde::{Deserialize, Serialize};

use crate::attention::SubPrompt;
use crate::denoiser::{ConceptAdapter, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, SubjectMapSource};

use super::run::{BranchSpec, GuidedConcept, RunPlan};
use crate::denoiser::DenoiserParams;

/// Sub-prompt construction. `{categories}` expands to the category words
/// joined by `joiner`; in a concept prompt the concept's own category is
/// replaced by its trigger word, and `{trigger}` is the trigger word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplate {
    pub global: String,
    pub concept: String,
    pub joiner: String,
    /// Per-subject prompt of compositional generation; `{subject}` is the
    /// subject's words.
    pub subject: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            global: "photo of the {categories}".into(),
            concept: "photo of the {categories}, a {trigger}".into(),
            joiner: "and".into(),
            subject: "photo of a {subject}".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if !self.global.contains("{categories}") {
            return Err(Error::config("template.global", "must contain {categories}"));
        }
        if !self.concept.contains("{trigger}") && !self.concept.contains("{categories}") {
            return Err(Error::config(
                "template.concept",
                "must contain {trigger} or {categories}",
            ));
        }
        if !self.subject.contains("{subject}") {
            return Err(Error::config("template.subject", "must contain {subject}"));
        }
        Ok(())
    }

    fn categories(&self, words: &[String]) -> String {
        words.join(&format!(" {} ", self.joiner))
    }

    /// The global prompt and one prompt per concept, as text.
    pub fn expand(&self, categories: &[String], triggers: &[String]) -> (String, Vec<String>) {
        let global = self.global.replace("{categories}", &self.categories(categories));
        let concepts = triggers
            .iter()
            .enumerate()
            .map(|(k, trig)| {
                let mut words = categories.to_vec();
                words[k] = trig.clone();
                self.concept
                    .replace("{categories}", &self.categories(&words))
                    .replace("{trigger}", trig)
            })
            .collect();
        (global, concepts)
    }
}

/// One customized concept of a multi-concept run.
#[derive(Debug, Clone, Copy)]
pub struct ConceptRef<'a> {
    pub adapter: &'a ConceptAdapter,
    /// Category word standing in for the concept in the global prompt.
    pub category: &'a str,
}

fn ensure_known(vocab: &Vocabulary, word: &str) -> Result<TokenId> {
    vocab.id(word)
}

/// Branches and guided trigger sets of a multi-concept run.
pub fn mc2_plan<'a>(
    params: &'a DenoiserParams,
    vocab: &Vocabulary,
    concepts: &[ConceptRef<'a>],
    template: &PromptTemplate,
    cfg: &GuidanceConfig,
) -> Result<RunPlan<'a>> {
    if concepts.is_empty() {
        return Err(Error::Invalid("at least one concept is required".into()));
    }
    template.validate()?;
    let mut triggers = Vec::with_capacity(concepts.len());
    for c in concepts {
        if triggers.contains(&c.adapter.trigger) {
            return Err(Error::Invalid(format!(
                "duplicate trigger token `{}`",
                vocab.word(c.adapter.trigger)?
            )));
        }
        triggers.push(c.adapter.trigger);
        ensure_known(vocab, c.category)?;
    }
    let categories: Vec<String> = concepts.iter().map(|c| c.category.to_string()).collect();
    let trigger_words = triggers
        .iter()
        .map(|t| vocab.word(*t).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let (global, prompts) = template.expand(&categories, &trigger_words);

    let mut branches = vec![BranchSpec {
        prompt: SubPrompt::new(vocab.tokenize(&global)?, Vec::new())?,
        adapter: None,
        weight: cfg.weights.global,
    }];
    let mut guided = Vec::new();
    for (k, (c, text)) in concepts.iter().zip(&prompts).enumerate() {
        let sp = SubPrompt::with_trigger(vocab.tokenize(text)?, c.adapter.trigger);
        if sp.triggers.is_empty() {
            return Err(Error::Invalid(format!(
                "concept prompt `{text}` does not contain its trigger"
            )));
        }
        guided.push(GuidedConcept {
            branch: k + 1,
            triggers: sp.triggers.clone(),
        });
        branches.push(BranchSpec {
            prompt: sp,
            adapter: Some(c.adapter),
            weight: cfg.weights.concept,
        });
    }
    Ok(RunPlan {
        params,
        branches,
        unconditional: Vec::new(),
        concepts: guided,
        objective: "mcg".into(),
    })
}

fn find_run(tokens: &[TokenId], run: &[TokenId]) -> Option<usize> {
    if run.is_empty() || run.len() > tokens.len() {
        return None;
    }
    (0..=tokens.len() - run.len()).find(|&i| tokens[i..i + run.len()] == *run)
}

/// Branches and subject trigger sets of a compositional-generation run.
pub fn compgen_plan<'a>(
    params: &'a DenoiserParams,
    vocab: &Vocabulary,
    prompt: &str,
    subjects: &[String],
    template: &PromptTemplate,
    cfg: &GuidanceConfig,
) -> Result<RunPlan<'a>> {
    if subjects.is_empty() {
        return Err(Error::Invalid("at least one subject is required".into()));
    }
    template.validate()?;
    let global = vocab.tokenize(prompt)?;
    let mut branches = vec![BranchSpec {
        prompt: SubPrompt::new(global.clone(), Vec::new())?,
        adapter: None,
        weight: cfg.weights.compgen_global,
    }];
    let mut guided = Vec::new();
    for (k, subject) in subjects.iter().enumerate() {
        let words = vocab.tokenize(subject)?;
        let text = template.subject.replace("{subject}", subject);
        let tokens = vocab.tokenize(&text)?;
        let locate = |toks: &[TokenId], what: &str| -> Result<Vec<usize>> {
            let start = find_run(toks, &words).ok_or_else(|| {
                Error::Invalid(format!("subject `{subject}` not found in {what}"))
            })?;
            Ok((start..start + words.len()).collect())
        };
        let own = locate(&tokens, "its sub-prompt")?;
        let in_global = locate(&global, "the prompt")?;
        guided.push(GuidedConcept {
            branch: match cfg.subject_maps {
                SubjectMapSource::PerSubject => k + 1,
                SubjectMapSource::Global => 0,
            },
            triggers: match cfg.subject_maps {
                SubjectMapSource::PerSubject => own.clone(),
                SubjectMapSource::Global => in_global,
            },
        });
        branches.push(BranchSpec {
            prompt: SubPrompt::new(tokens, own)?,
            adapter: None,
            weight: cfg.weights.compgen_subject,
        });
    }
    Ok(RunPlan {
        params,
        branches,
        unconditional: Vec::new(),
        concepts: guided,
        objective: "compgen".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_expansion() {
        let t = PromptTemplate::default();
        let (g, c) = t.expand(
            &["disc".into(), "square".into()],
            &["<c0>".into(), "<c1>".into()],
        );
        assert_eq!(g, "photo of the disc and square");
        assert_eq!(c[0], "photo of the <c0> and square, a <c0>");
        assert_eq!(c[1], "photo of the disc and <c1>, a <c1>");
    }
}
