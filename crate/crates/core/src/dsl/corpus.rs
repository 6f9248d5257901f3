use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{ContextTurn, GrammarSpec, Intent};
use super::program::{decompile, literal_token, Node, Program};
use super::{Dsl, DslError, Split};
use crate::text::tokenize;

/// Which noise operations touched an utterance during generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoiseTags {
    pub typo: bool,
    pub synonym: bool,
}

/// One dialogue turn: optional previous (user, agent) exchange, the current
/// utterance and its gold program.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub id: String,
    pub context_user: Option<String>,
    pub context_agent: Option<String>,
    pub utterance: String,
    pub gold: Program,
    pub split: Split,
    /// Generation-time bookkeeping; not part of the corpus file.
    pub noise: NoiseTags,
}

impl DialogueExample {
    pub fn has_context(&self) -> bool {
        self.context_user.as_deref().is_some_and(|s| !s.is_empty())
            || self.context_agent.as_deref().is_some_and(|s| !s.is_empty())
    }

    /// Tokens of the previous user and agent turns, in dialogue order.
    pub fn context_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for part in [&self.context_user, &self.context_agent].into_iter().flatten() {
            out.extend(tokenize(part));
        }
        out
    }
}

/// Line format of the corpus file. Field order is part of the format.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    context_user: Option<String>,
    context_agent: Option<String>,
    utterance: String,
    program_surface: String,
    split: Split,
}

pub fn write_corpus<W: Write>(out: &mut W, examples: &[DialogueExample]) -> Result<(), DslError> {
    for ex in examples {
        let line = CorpusLine {
            id: ex.id.clone(),
            context_user: ex.context_user.clone(),
            context_agent: ex.context_agent.clone(),
            utterance: ex.utterance.clone(),
            program_surface: decompile(&ex.gold),
            split: ex.split,
        };
        let json = serde_json::to_string(&line).map_err(|e| DslError::Corpus(e.to_string()))?;
        writeln!(out, "{json}").map_err(|e| DslError::Corpus(e.to_string()))?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(dsl: &Dsl, input: R) -> Result<Vec<DialogueExample>, DslError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| DslError::Corpus(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line)
            .map_err(|e| DslError::Corpus(format!("line {}: {e}", n + 1)))?;
        if rec.utterance.trim().is_empty() {
            return Err(DslError::Corpus(format!("line {}: empty utterance", n + 1)));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(DslError::Corpus(format!("line {}: duplicate id {}", n + 1, rec.id)));
        }
        out.push(DialogueExample {
            gold: dsl.compile(&rec.program_surface)?,
            id: rec.id,
            context_user: rec.context_user,
            context_agent: rec.context_agent,
            utterance: rec.utterance,
            split: rec.split,
            noise: NoiseTags::default(),
        });
    }
    Ok(out)
}

/// Per-split example counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 5000,
            validation: 500,
            test: 500,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, PartialEq)]
enum ReferKind {
    Person,
    Event,
}

struct Draft {
    utterance: String,
    program: Node,
    context: Option<(String, String)>,
}

/// Generates a corpus. Pure function of `(grammar, seed, sizes)`.
///
/// Splits are disjoint by utterance; repeats inside one split are allowed.
pub fn generate_corpus(
    grammar: &GrammarSpec,
    seed: u64,
    sizes: SplitSizes,
) -> Result<Vec<DialogueExample>, DslError> {
    grammar.validate()?;
    if sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 {
        return Err(DslError::Corpus("split sizes must be positive".into()));
    }
    let dsl = Dsl::new(grammar);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // utterance -> split that first produced it
    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut out = Vec::with_capacity(sizes.train + sizes.validation + sizes.test);
    for (split, n) in [
        (Split::Train, sizes.train),
        (Split::Validation, sizes.validation),
        (Split::Test, sizes.test),
    ] {
        let noise = grammar.noise_for(split);
        for i in 0..n {
            let mut attempts = 0;
            let (draft, tags) = loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(DslError::Corpus(
                        "grammar cannot produce enough distinct utterances".into(),
                    ));
                }
                let mut draft = draft_example(grammar, &mut rng);
                let mut tags = NoiseTags::default();
                if rng.gen_bool(noise.synonym_rate.clamp(0.0, 1.0)) {
                    if let Some(s) = swap_synonym(grammar, &draft.utterance, &mut rng) {
                        draft.utterance = s;
                        tags.synonym = true;
                    }
                }
                if rng.gen_bool(noise.typo_rate.clamp(0.0, 1.0)) {
                    if let Some(s) = inject_typo(&draft.utterance, &mut rng) {
                        draft.utterance = s;
                        tags.typo = true;
                    }
                }
                match seen.get(&draft.utterance) {
                    Some(&owner) if owner != split => continue,
                    Some(_) => break (draft, tags),
                    None => {
                        seen.insert(draft.utterance.clone(), split);
                        break (draft, tags);
                    }
                }
            };
            let mut tokens = Vec::new();
            node_tokens(&draft.program, &mut tokens);
            let gold = dsl.program_from_tokens(&tokens)?;
            let (context_user, context_agent) = match draft.context {
                Some((u, a)) => (Some(u), Some(a)),
                None => (None, None),
            };
            out.push(DialogueExample {
                id: format!("{}-{:05}", split.as_str(), i),
                context_user,
                context_agent,
                utterance: draft.utterance,
                gold,
                split,
                noise: tags,
            });
        }
    }
    Ok(out)
}

fn node_tokens(node: &Node, out: &mut Vec<String>) {
    match node {
        Node::Call { function, args } => {
            out.push(function.clone());
            for a in args {
                node_tokens(a, out);
            }
        }
        Node::Constant(c) => out.push(c.clone()),
        Node::Literal(t) => out.push(literal_token(t)),
    }
}

fn call(function: &str, args: Vec<Node>) -> Node {
    Node::Call {
        function: function.to_string(),
        args,
    }
}

fn lit_call(function: &str, text: &str) -> Node {
    call(function, vec![Node::Literal(text.to_string())])
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [String]) -> &'a str {
    xs.choose(rng).expect("non-empty pool")
}

fn pick_intent<'a, R: Rng>(grammar: &'a GrammarSpec, rng: &mut R) -> &'a Intent {
    let total: u32 = grammar.intents.iter().map(|i| i.weight).sum();
    let mut r = rng.gen_range(0..total.max(1));
    for intent in &grammar.intents {
        if r < intent.weight {
            return intent;
        }
        r -= intent.weight;
    }
    &grammar.intents[0]
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in vars {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

fn draft_example<R: Rng>(grammar: &GrammarSpec, rng: &mut R) -> Draft {
    let intent = pick_intent(grammar, rng);
    let lits = &grammar.literals;
    let ctx = &grammar.context;

    let with_context = rng.gen_bool(ctx.rate.clamp(0.0, 1.0));
    let mut refer = None;
    if with_context && rng.gen_bool(ctx.refer_rate.clamp(0.0, 1.0)) {
        let mut kinds = Vec::new();
        let first = &intent.groups[0];
        if first.slots.iter().any(|s| s == "attendee")
            && !ctx.person_pronouns.is_empty()
            && !ctx.person_turns.is_empty()
        {
            kinds.push(ReferKind::Person);
        }
        if intent.function != "createEvent"
            && first.slots.iter().any(|s| s == "name")
            && !ctx.event_pronouns.is_empty()
            && !ctx.event_turns.is_empty()
        {
            kinds.push(ReferKind::Event);
        }
        refer = kinds.choose(rng).copied();
    }

    let person = pick(rng, &lits.persons).to_string();
    let event_name = pick(rng, &lits.event_names).to_string();

    let mut args = Vec::new();
    let mut phrases = Vec::new();
    for (gi, group) in intent.groups.iter().enumerate() {
        if gi == 0 && refer == Some(ReferKind::Event) {
            args.push(call("refer", vec![Node::Constant("Event".into())]));
            phrases.push(pick(rng, &ctx.event_pronouns).to_string());
            continue;
        }
        let k = rng.gen_range(group.min..=group.max);
        let mut chosen: Vec<&String> = group.required.iter().collect();
        let mut optional: Vec<&String> = group
            .slots
            .iter()
            .filter(|s| !group.required.contains(s))
            .collect();
        optional.shuffle(rng);
        if gi == 0 && refer == Some(ReferKind::Person) {
            if let Some(pos) = optional.iter().position(|s| *s == "attendee") {
                let a = optional.remove(pos);
                chosen.push(a);
            }
        }
        for s in optional {
            if chosen.len() >= k.max(group.required.len()) {
                break;
            }
            chosen.push(s);
        }
        // canonical program order follows the group's slot order
        chosen.sort_by_key(|s| group.slots.iter().position(|x| x == *s));

        let mut constraints = Vec::new();
        let mut slot_phrases = Vec::new();
        for slot in &chosen {
            let variants = grammar.slots[slot.as_str()].style(group.style);
            let template = pick(rng, variants);
            let (node, phrase) = match slot.as_str() {
                "name" => {
                    let v = pick(rng, &lits.event_names);
                    (lit_call("name", v), fill(template, &[("name", v)]))
                }
                "attendee" => {
                    if gi == 0 && refer == Some(ReferKind::Person) {
                        let pron = pick(rng, &ctx.person_pronouns);
                        (
                            call(
                                "withAttendee",
                                vec![call("refer", vec![Node::Constant("Person".into())])],
                            ),
                            fill(template, &[("person", pron)]),
                        )
                    } else {
                        let v = pick(rng, &lits.persons);
                        (
                            call("withAttendee", vec![lit_call("person", v)]),
                            fill(template, &[("person", v)]),
                        )
                    }
                }
                "date" => {
                    let v = pick(rng, &lits.days);
                    (
                        call("onDate", vec![lit_call("day", v)]),
                        fill(template, &[("day", v)]),
                    )
                }
                "time" => {
                    let v = pick(rng, &lits.times);
                    (
                        call("atTime", vec![lit_call("time", v)]),
                        fill(template, &[("time", v)]),
                    )
                }
                other => panic!("grammar slot `{other}` has no program mapping"),
            };
            constraints.push(node);
            slot_phrases.push((slot.as_str(), phrase));
        }
        // the name phrase leads; the rest appear in random order
        let lead = slot_phrases.iter().position(|(s, _)| *s == "name");
        let mut ordered = Vec::new();
        if let Some(i) = lead {
            ordered.push(slot_phrases.remove(i).1);
        }
        let mut rest: Vec<String> = slot_phrases.into_iter().map(|(_, p)| p).collect();
        rest.shuffle(rng);
        ordered.extend(rest);
        phrases.push(ordered.join(" "));

        let mut it = constraints.into_iter().rev();
        let mut acc = it.next().expect("group has at least one constraint");
        for c in it {
            acc = call("and", vec![c, acc]);
        }
        args.push(acc);
    }

    let template = pick(rng, &intent.templates);
    let mut utterance = template.to_string();
    for (i, p) in phrases.iter().enumerate() {
        utterance = utterance.replace(&format!("{{{i}}}"), p);
    }
    let utterance = tokenize(&utterance).join(" ");
    let program = call(&intent.function, args);

    let context = if with_context {
        let turn: &ContextTurn = match refer {
            Some(ReferKind::Person) => ctx.person_turns.choose(rng),
            Some(ReferKind::Event) => ctx.event_turns.choose(rng),
            None => {
                let all: Vec<&ContextTurn> =
                    ctx.person_turns.iter().chain(&ctx.event_turns).collect();
                all.choose(rng).copied()
            }
        }
        .expect("context turns configured");
        let day = pick(rng, &lits.days).to_string();
        let time = pick(rng, &lits.times).to_string();
        let vars = [
            ("person", person.as_str()),
            ("name", event_name.as_str()),
            ("day", day.as_str()),
            ("time", time.as_str()),
        ];
        Some((fill(&turn.user, &vars), fill(&turn.agent, &vars)))
    } else {
        None
    };

    Draft {
        utterance,
        program,
        context,
    }
}

fn swap_synonym<R: Rng>(grammar: &GrammarSpec, utterance: &str, rng: &mut R) -> Option<String> {
    let mut words: Vec<String> = utterance.split(' ').map(str::to_string).collect();
    let candidates: Vec<usize> = (0..words.len())
        .filter(|&i| grammar.synonyms.contains_key(&words[i]))
        .collect();
    let &i = candidates.choose(rng)?;
    let alt = grammar.synonyms[&words[i]].choose(rng)?.clone();
    words[i] = alt;
    Some(words.join(" "))
}

/// Corrupts one word of length >= 3 by a swap, deletion, duplication or
/// substitution. Returns `None` when no word is eligible.
pub(crate) fn inject_typo<R: Rng>(utterance: &str, rng: &mut R) -> Option<String> {
    let mut words: Vec<String> = utterance.split(' ').map(str::to_string).collect();
    let eligible: Vec<usize> = (0..words.len())
        .filter(|&i| words[i].chars().count() >= 3 && words[i].chars().all(|c| c.is_alphanumeric()))
        .collect();
    let &i = eligible.choose(rng)?;
    let original: Vec<char> = words[i].chars().collect();
    loop {
        let mut w = original.clone();
        let pos = rng.gen_range(0..w.len());
        match rng.gen_range(0..4) {
            0 if pos + 1 < w.len() => w.swap(pos, pos + 1),
            1 if w.len() > 3 => {
                w.remove(pos);
            }
            2 => w.insert(pos, w[pos]),
            _ => w[pos] = (b'a' + rng.gen_range(0..26u8)) as char,
        }
        if w != original {
            words[i] = w.into_iter().collect();
            return Some(words.join(" "));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::grammar::NoiseSpec;

    fn small() -> SplitSizes {
        SplitSizes {
            train: 300,
            validation: 50,
            test: 50,
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let g = GrammarSpec::calendar();
        let a = generate_corpus(&g, 7, small()).unwrap();
        let b = generate_corpus(&g, 7, small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&g, 8, small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_sizes_give_unique_ids_and_disjoint_utterances() {
        let g = GrammarSpec::calendar();
        let corpus = generate_corpus(&g, 7, SplitSizes::default()).unwrap();
        assert_eq!(corpus.len(), 6000);
        let ids: HashSet<_> = corpus.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 6000);
        let by_split = |s: Split| -> HashSet<&String> {
            corpus.iter().filter(|e| e.split == s).map(|e| &e.utterance).collect()
        };
        let (tr, va, te) = (by_split(Split::Train), by_split(Split::Validation), by_split(Split::Test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert!(corpus.iter().all(|e| !e.utterance.is_empty()));
    }

    #[test]
    fn context_fraction_follows_rate() {
        let g = GrammarSpec::calendar();
        let corpus = generate_corpus(&g, 3, SplitSizes::default()).unwrap();
        let with = corpus.iter().filter(|e| e.has_context()).count() as f64;
        let n = corpus.len() as f64;
        let p = g.context.rate;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((with - n * p).abs() <= 3.0 * sigma, "{with} context turns");
    }

    #[test]
    fn typo_rate_is_binomial() {
        let p = 0.1;
        let g = GrammarSpec::calendar().with_uniform_noise(NoiseSpec {
            typo_rate: p,
            synonym_rate: 0.0,
        });
        let corpus = generate_corpus(&g, 11, SplitSizes::default()).unwrap();
        let n = corpus.len() as f64;
        let typos = corpus.iter().filter(|e| e.noise.typo).count() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((typos - n * p).abs() <= 3.0 * sigma, "{typos} typos of {n}");

        // the tag is honest: tagged utterances contain a word outside the clean vocabulary
        let clean = generate_corpus(
            &GrammarSpec::calendar().with_uniform_noise(NoiseSpec::default()),
            11,
            SplitSizes::default(),
        )
        .unwrap();
        let vocab: HashSet<&str> = clean
            .iter()
            .flat_map(|e| e.utterance.split(' '))
            .collect();
        let untagged_oov = corpus
            .iter()
            .filter(|e| !e.noise.typo)
            .filter(|e| e.utterance.split(' ').any(|w| !vocab.contains(w)))
            .count();
        assert_eq!(untagged_oov, 0);
    }

    #[test]
    fn gold_programs_execute_or_fault_cleanly() {
        let g = GrammarSpec::calendar();
        let world = crate::dsl::WorldState::for_grammar(&g);
        let corpus = generate_corpus(&g, 5, small()).unwrap();
        let mut ok = 0;
        for ex in &corpus {
            let w = world.with_salience(&ex.context_tokens());
            match crate::dsl::execute(&ex.gold, &w) {
                Ok(_) => ok += 1,
                Err(DslError::ExecutionFault(_)) => {}
                Err(e) => panic!("unexpected {e}"),
            }
        }
        assert!(ok > corpus.len() / 2);
    }

    #[test]
    fn jsonl_round_trip_keeps_field_order() {
        let g = GrammarSpec::calendar();
        let corpus = generate_corpus(&g, 1, small()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        let keys = ["\"id\"", "\"context_user\"", "\"context_agent\"", "\"utterance\"", "\"program_surface\"", "\"split\""];
        let positions: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));

        let back = read_corpus(&Dsl::new(&g), buf.as_slice()).unwrap();
        assert_eq!(back.len(), corpus.len());
        for (a, b) in back.iter().zip(&corpus) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.gold, b.gold);
            assert_eq!(a.utterance, b.utterance);
            assert_eq!(a.context_user, b.context_user);
        }
    }

    #[test]
    fn empty_grammar_is_rejected() {
        let mut g = GrammarSpec::calendar();
        g.intents.clear();
        assert!(matches!(
            generate_corpus(&g, 1, small()),
            Err(DslError::GrammarEmpty)
        ));
    }

    #[test]
    fn typo_always_changes_the_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = inject_typo("schedule lunch", &mut rng).unwrap();
            assert_ne!(s, "schedule lunch");
            assert_eq!(s.split(' ').count(), 2);
        }
        assert!(inject_typo("at 9", &mut rng).is_none());
    }
}
