#![allow(dead_code)]

use std::sync::OnceLock;

use dym_core::dsl::{generate_corpus, DialogueExample, GrammarSpec, Split, SplitSizes};
use dym_core::model::{Direction, Model, TrainParams};

pub const SEED: u64 = 7;
pub const MAX_LEN: usize = 64;

/// Default-size corpus and both models, built once per test binary.
pub struct Desk {
    pub train: Vec<DialogueExample>,
    pub validation: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
    pub parse: Model,
    pub gloss: Model,
}

pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let corpus = generate_corpus(&GrammarSpec::calendar(), SEED, SplitSizes::default()).unwrap();
        let split = |s: Split| corpus.iter().filter(|e| e.split == s).cloned().collect::<Vec<_>>();
        let train = split(Split::Train);
        let parse = Model::train(&train, Direction::Parse, TrainParams::default()).unwrap();
        let gloss = Model::train(&train, Direction::Gloss, TrainParams::for_direction(Direction::Gloss)).unwrap();
        Desk {
            validation: split(Split::Validation),
            test: split(Split::Test),
            train,
            parse,
            gloss,
        }
    })
}
