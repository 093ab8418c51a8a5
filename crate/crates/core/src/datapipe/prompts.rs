//! Prompt templates for category names.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_TRAIN: &str = include_str!("../../data/prompts_train.txt");
const DEFAULT_EVAL: &str = include_str!("../../data/prompts_eval.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// One template drawn uniformly.
    Train,
    /// Every evaluation template.
    Eval,
    /// The first evaluation template only.
    Single,
    /// The bare category name.
    None,
}

/// Templates containing a single `{}` placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_texts(DEFAULT_TRAIN, DEFAULT_EVAL).expect("bundled templates are valid")
    }
}

fn parse(text: &str) -> Result<Vec<String>> {
    let out: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if let Some(bad) = out.iter().find(|t| t.matches("{}").count() != 1) {
        return Err(Error::InvalidData(format!(
            "template {bad:?} needs exactly one {{}}"
        )));
    }
    Ok(out)
}

impl PromptTemplates {
    /// One template per line.
    pub fn from_texts(train: &str, eval: &str) -> Result<Self> {
        Ok(Self {
            train: parse(train)?,
            eval: parse(eval)?,
        })
    }

    pub fn load(train: &Path, eval: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_texts(&read(train)?, &read(eval)?)
    }

    /// Prompted texts for `category` under `mode`.
    pub fn apply(
        &self,
        category: &str,
        mode: PromptMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<String>> {
        match mode {
            PromptMode::None => Ok(vec![category.to_string()]),
            PromptMode::Train => {
                let t = self
                    .train
                    .choose(rng)
                    .ok_or(Error::Empty("training prompt templates"))?;
                Ok(vec![fill(t, category)])
            }
            PromptMode::Single => {
                let t = self
                    .eval
                    .first()
                    .ok_or(Error::Empty("evaluation prompt templates"))?;
                Ok(vec![fill(t, category)])
            }
            PromptMode::Eval => {
                if self.eval.is_empty() {
                    return Err(Error::Empty("evaluation prompt templates"));
                }
                Ok(self.eval.iter().map(|t| fill(t, category)).collect())
            }
        }
    }

    /// Training templates followed by evaluation templates.
    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.train
            .iter()
            .chain(self.eval.iter())
            .map(String::as_str)
    }
}

pub fn fill(template: &str, category: &str) -> String {
    template.replacen("{}", category, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bundled_counts() {
        let t = PromptTemplates::default();
        assert_eq!(t.train.len(), 80);
        assert_eq!(t.eval.len(), 7);
        assert!(t.eval.iter().all(|e| t.train.contains(e)));
    }

    #[test]
    fn substitution_and_modes() {
        assert_eq!(fill("a photo of a {}", "cat"), "a photo of a cat");
        let t = PromptTemplates::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.apply("cat", PromptMode::Eval, &mut rng).unwrap().len(), 7);
        assert_eq!(
            t.apply("cat", PromptMode::None, &mut rng).unwrap(),
            vec!["cat"]
        );
        assert_eq!(
            t.apply("cat", PromptMode::Single, &mut rng).unwrap(),
            vec!["itap of a cat."]
        );
        let one = t.apply("cat", PromptMode::Train, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].contains("cat"));
    }

    #[test]
    fn empty_templates_error() {
        let t = PromptTemplates::from_texts("", "").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(t.apply("x", PromptMode::Train, &mut rng).is_err());
        assert!(t.apply("x", PromptMode::Eval, &mut rng).is_err());
        assert!(PromptTemplates::from_texts("no placeholder", "").is_err());
    }
}
