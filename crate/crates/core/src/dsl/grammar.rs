use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DslError;

const DEFAULT_GRAMMAR: &str = include_str!("../../grammar/calendar.toml");

/// Sort accepted by literal-only argument positions.
pub const LITERAL_SORT: &str = "Str";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSig {
    pub name: String,
    pub args: Vec<String>,
    pub sorts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantSig {
    pub name: String,
    pub sort: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiteralPools {
    pub event_names: Vec<String>,
    pub persons: Vec<String>,
    pub days: Vec<String>,
    pub times: Vec<String>,
}

/// Phrase variants for one constraint slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotPhrases {
    pub phrases: Vec<String>,
    #[serde(default)]
    pub bare: Vec<String>,
}

impl SlotPhrases {
    pub fn style(&self, style: PhraseStyle) -> &[String] {
        match style {
            PhraseStyle::Bare if !self.bare.is_empty() => &self.bare,
            _ => &self.phrases,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseStyle {
    #[default]
    Phrases,
    Bare,
}

/// One constraint argument of an intent's top-level call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintGroup {
    pub slots: Vec<String>,
    #[serde(default)]
    pub required: Vec<String>,
    pub min: usize,
    pub max: usize,
    #[serde(default)]
    pub style: PhraseStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    pub function: String,
    pub templates: Vec<String>,
    pub groups: Vec<ConstraintGroup>,
    #[serde(default = "one")]
    pub weight: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub user: String,
    pub agent: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    /// Fraction of examples that carry a previous (user, agent) turn.
    pub rate: f64,
    /// Fraction of context-carrying examples that refer back into the context.
    pub refer_rate: f64,
    pub person_pronouns: Vec<String>,
    pub event_pronouns: Vec<String>,
    pub person_turns: Vec<ContextTurn>,
    pub event_turns: Vec<ContextTurn>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub typo_rate: f64,
    pub synonym_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitNoise {
    #[serde(default)]
    pub train: NoiseSpec,
    #[serde(default)]
    pub validation: NoiseSpec,
    #[serde(default)]
    pub test: NoiseSpec,
}

/// Declarative description of the DSL and of how utterances are realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    /// People present in the synthetic world directory.
    #[serde(default)]
    pub persons_known: Vec<String>,
    pub literals: LiteralPools,
    pub functions: Vec<FunctionSig>,
    #[serde(default)]
    pub constants: Vec<ConstantSig>,
    pub slots: BTreeMap<String, SlotPhrases>,
    pub intents: Vec<Intent>,
    #[serde(default)]
    pub context: ContextSpec,
    #[serde(default)]
    pub noise: SplitNoise,
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl GrammarSpec {
    /// The built-in calendar grammar.
    pub fn calendar() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("bundled grammar parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, DslError> {
        let spec: GrammarSpec =
            toml::from_str(text).map_err(|e| DslError::GrammarConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self, DslError> {
        let spec: GrammarSpec =
            serde_json::from_str(text).map_err(|e| DslError::GrammarConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Loads a grammar file; `.json` files are read as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, DslError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DslError::GrammarConfig(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    /// Structural checks: every intent has a template and a declared function,
    /// every referenced slot has phrases.
    pub fn validate(&self) -> Result<(), DslError> {
        if self.intents.is_empty() || self.functions.is_empty() {
            return Err(DslError::GrammarEmpty);
        }
        let mut seen = HashMap::new();
        for f in &self.functions {
            if seen.insert(f.name.as_str(), ()).is_some() {
                return Err(DslError::GrammarConfig(format!("duplicate function `{}`", f.name)));
            }
        }
        for c in &self.constants {
            if seen.insert(c.name.as_str(), ()).is_some() {
                return Err(DslError::GrammarConfig(format!("duplicate symbol `{}`", c.name)));
            }
        }
        for intent in &self.intents {
            if intent.templates.is_empty() {
                return Err(DslError::GrammarConfig(format!(
                    "intent `{}` has no templates",
                    intent.name
                )));
            }
            let sig = self
                .functions
                .iter()
                .find(|f| f.name == intent.function)
                .ok_or_else(|| DslError::UnknownSymbol(intent.function.clone()))?;
            if sig.args.len() != intent.groups.len() {
                return Err(DslError::GrammarConfig(format!(
                    "intent `{}` has {} groups but `{}` takes {} arguments",
                    intent.name,
                    intent.groups.len(),
                    sig.name,
                    sig.args.len()
                )));
            }
            for group in &intent.groups {
                if group.min == 0 || group.min > group.max || group.max > group.slots.len() {
                    return Err(DslError::GrammarConfig(format!(
                        "intent `{}` has an unsatisfiable group size",
                        intent.name
                    )));
                }
                for slot in group.slots.iter().chain(&group.required) {
                    let phrases = self.slots.get(slot).ok_or_else(|| {
                        DslError::GrammarConfig(format!("slot `{slot}` has no phrases"))
                    })?;
                    if phrases.phrases.is_empty() {
                        return Err(DslError::GrammarConfig(format!(
                            "slot `{slot}` has no phrases"
                        )));
                    }
                }
            }
        }
        let pools = &self.literals;
        if pools.event_names.is_empty()
            || pools.persons.is_empty()
            || pools.days.is_empty()
            || pools.times.is_empty()
        {
            return Err(DslError::GrammarConfig("every literal pool needs a value".into()));
        }
        Ok(())
    }

    pub fn noise_for(&self, split: super::Split) -> NoiseSpec {
        match split {
            super::Split::Train => self.noise.train,
            super::Split::Validation => self.noise.validation,
            super::Split::Test => self.noise.test,
        }
    }

    /// Returns a copy with every noise rate overridden.
    pub fn with_uniform_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = SplitNoise {
            train: noise,
            validation: noise,
            test: noise,
        };
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_grammar_is_valid() {
        let g = GrammarSpec::calendar();
        assert!(g.functions.len() >= 14);
        assert!(g.intents.iter().all(|i| !i.templates.is_empty()));
    }

    #[test]
    fn json_and_toml_agree() {
        let g = GrammarSpec::calendar();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(GrammarSpec::from_json(&json).unwrap(), g);
    }

    #[test]
    fn rejects_empty_grammar() {
        let mut g = GrammarSpec::calendar();
        g.intents.clear();
        assert!(matches!(g.validate(), Err(DslError::GrammarEmpty)));
    }

    #[test]
    fn rejects_group_arity_mismatch() {
        let mut g = GrammarSpec::calendar();
        let extra = g.intents[0].groups[0].clone();
        g.intents[0].groups.push(extra);
        assert!(matches!(g.validate(), Err(DslError::GrammarConfig(_))));
    }
}
