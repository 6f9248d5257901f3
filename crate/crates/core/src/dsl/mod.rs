//! Synthetic Lisp-like calendar DSL: grammar, content-token programs, a
//! deterministic executor and a seeded corpus generator.

mod corpus;
mod exec;
pub mod grammar;
mod program;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{generate_corpus, read_corpus, write_corpus, DialogueExample, NoiseTags, SplitSizes};
pub use exec::{execute, Denotation, Event, Mutation, Value, WorldState};
pub use grammar::GrammarSpec;
pub use program::{
    decompile, exact_match, literal_text, literal_token, tokens_match, Dsl, Node, Program,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("malformed surface: {0}")]
    MalformedSurface(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("`{symbol}` takes {expected} arguments, found {found}")]
    ArityViolation {
        symbol: String,
        expected: usize,
        found: usize,
    },
    #[error("argument of `{function}` must have sort {expected}")]
    SortMismatch { function: String, expected: String },
    #[error("{0} tokens left after a complete program")]
    TrailingTokens(usize),
    #[error("empty program")]
    EmptyProgram,
    #[error("grammar declares no intents or functions")]
    GrammarEmpty,
    #[error("grammar config: {0}")]
    GrammarConfig(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("execution fault: {0}")]
    ExecutionFault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}
