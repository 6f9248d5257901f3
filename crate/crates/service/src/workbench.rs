//! Corpus, models and predictions built from a [`Config`].

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use dym_core::dsl::{generate_corpus, read_corpus, DialogueExample, Dsl, GrammarSpec, Split, WorldState};
use dym_core::model::{
    confidence_pairs, read_interchange, tune_temperature, Direction, InterchangeRecord, Model, ModelInput,
    ScoredDecode,
};
use dym_core::selective::{tune_threshold_fbeta, PolicyInput, PolicyModels, ThresholdTuning};
use rayon::prelude::*;
use tracing::info;

use crate::config::Config;
use crate::session::Runtime;

pub fn load_grammar(config: &Config) -> anyhow::Result<GrammarSpec> {
    match &config.corpus.grammar {
        Some(p) => GrammarSpec::load(p).with_context(|| format!("grammar {}", p.display())),
        None => Ok(GrammarSpec::calendar()),
    }
}

/// The configured corpus: read from disk, or generated from grammar and seed.
pub fn load_corpus(config: &Config, grammar: &GrammarSpec) -> anyhow::Result<Vec<DialogueExample>> {
    match &config.corpus.path {
        Some(p) => {
            let file = File::open(p).with_context(|| format!("corpus {}", p.display()))?;
            Ok(read_corpus(&Dsl::new(grammar), BufReader::new(file))?)
        }
        None => Ok(generate_corpus(grammar, config.seed, config.corpus.sizes)?),
    }
}

pub fn split_of(corpus: &[DialogueExample], split: Split) -> Vec<DialogueExample> {
    corpus.iter().filter(|e| e.split == split).cloned().collect()
}

fn model_from(path: Option<&Path>, train: impl FnOnce() -> anyhow::Result<Model>) -> anyhow::Result<Model> {
    match path {
        Some(p) => Model::load(p).with_context(|| format!("model {}", p.display())),
        None => train(),
    }
}

#[derive(Debug, Clone)]
pub struct Workbench {
    pub config: Config,
    pub grammar: GrammarSpec,
    pub dsl: Dsl,
    pub corpus: Vec<DialogueExample>,
    pub parse: Arc<Model>,
    pub gloss: Arc<Model>,
}

impl Workbench {
    /// Loads or trains both models on the training split.
    pub fn build(config: Config) -> anyhow::Result<Self> {
        let grammar = load_grammar(&config)?;
        let corpus = load_corpus(&config, &grammar)?;
        let train = split_of(&corpus, Split::Train);
        let validation = split_of(&corpus, Split::Validation);
        let (parse, gloss) = rayon::join(
            || {
                model_from(config.models.parse.as_deref(), || {
                    info!(examples = train.len(), "training parse model");
                    let m = Model::train(&train, Direction::Parse, config.parse)?;
                    if !config.calibration.tune_temperature || validation.is_empty() {
                        return Ok(m);
                    }
                    let curve = tune_temperature(
                        &m,
                        &validation,
                        &config.calibration.temperatures,
                        config.calibration.bins,
                        config.decode.max_len,
                    )?;
                    info!(temperature = curve.best, "tuned parse temperature");
                    Ok(m.with_temperature(curve.best)?)
                })
            },
            || {
                model_from(config.models.gloss.as_deref(), || {
                    info!(examples = train.len(), "training gloss model");
                    Ok(Model::train(&train, Direction::Gloss, config.gloss)?)
                })
            },
        );
        let (parse, gloss) = (parse?, gloss?);
        if parse.direction() != Direction::Parse || gloss.direction() != Direction::Gloss {
            return Err(anyhow!("model files are in the wrong direction"));
        }
        Ok(Self {
            dsl: Dsl::new(&grammar),
            grammar,
            corpus,
            parse: Arc::new(parse),
            gloss: Arc::new(gloss),
            config,
        })
    }

    pub fn split(&self, split: Split) -> Vec<DialogueExample> {
        split_of(&self.corpus, split)
    }

    pub fn max_len(&self) -> usize {
        self.config.decode.max_len
    }

    pub fn world(&self) -> WorldState {
        WorldState::for_grammar(&self.grammar)
    }

    pub fn runtime(&self) -> Runtime {
        Runtime {
            dsl: self.dsl.clone(),
            parse: Some(self.parse.clone()),
            gloss: Some(self.gloss.clone()),
            beam: self.config.decode.beam,
            max_len: self.config.decode.max_len,
            nucleus: self.config.nucleus,
        }
    }

    pub fn policy_models(&self) -> PolicyModels<'_> {
        PolicyModels {
            parse: Some(&self.parse),
            gloss: Some(&self.gloss),
            beam: self.config.decode.beam,
            max_len: self.config.decode.max_len,
        }
    }

    /// Greedy decodes of the built-in parser, in input order.
    pub fn decodes(&self, examples: &[DialogueExample]) -> Vec<ScoredDecode<f64>> {
        examples
            .par_iter()
            .map(|ex| self.parse.decode_greedy(&ModelInput::parse(ex), self.max_len()))
            .collect()
    }

    /// The configured threshold, or the F-beta-optimal one on validation.
    pub fn threshold(&self) -> anyhow::Result<ThresholdTuning<f64>> {
        let pairs = confidence_pairs(&self.parse, &self.split(Split::Validation), self.max_len());
        let mut tuning = tune_threshold_fbeta(&pairs, self.config.selective.beta)?;
        if let Some(t) = self.config.selective.threshold {
            tuning.threshold = t;
        }
        Ok(tuning)
    }
}

/// Decodes for `examples`, from the interchange file when given and from
/// the built-in parser otherwise.
pub fn predictions(
    bench: &Workbench,
    examples: &[DialogueExample],
    interchange: Option<&Path>,
) -> anyhow::Result<Vec<ScoredDecode<f64>>> {
    let Some(path) = interchange else {
        return Ok(bench.decodes(examples));
    };
    let file = File::open(path).with_context(|| format!("predictions {}", path.display()))?;
    let records = read_interchange(BufReader::new(file))?;
    join_interchange(examples, &records)
}

/// Matches interchange records to examples by id. Every example needs a
/// record whose gold tokens agree with the corpus.
pub fn join_interchange(
    examples: &[DialogueExample],
    records: &[InterchangeRecord],
) -> anyhow::Result<Vec<ScoredDecode<f64>>> {
    let by_id: HashMap<&str, &InterchangeRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    examples
        .iter()
        .map(|ex| {
            let r = by_id
                .get(ex.id.as_str())
                .ok_or_else(|| anyhow!("no prediction for example `{}`", ex.id))?;
            if r.gold_tokens != ex.gold.tokens() {
                return Err(anyhow!("gold program of `{}` differs from the corpus", ex.id));
            }
            Ok(r.to_decode()?)
        })
        .collect()
}

/// Examples named by interchange records, in record order.
pub fn examples_for(corpus: &[DialogueExample], records: &[InterchangeRecord]) -> anyhow::Result<Vec<DialogueExample>> {
    let by_id: HashMap<&str, &DialogueExample> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();
    records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|e| (*e).clone())
                .ok_or_else(|| anyhow!("prediction `{}` names no corpus example", r.id))
        })
        .collect()
}

pub fn inputs<'a>(examples: &'a [DialogueExample], decodes: &[ScoredDecode<f64>]) -> Vec<PolicyInput<'a>> {
    examples
        .iter()
        .zip(decodes)
        .map(|(example, d)| PolicyInput {
            example,
            decode: d.clone(),
        })
        .collect()
}
