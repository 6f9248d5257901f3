use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::grammar::GrammarSpec;
use super::program::{Node, Program};
use super::DslError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub id: u64,
    pub name: Option<String>,
    pub attendees: Vec<String>,
    pub day: Option<String>,
    pub time: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Insert { event: Event },
    Delete { id: u64 },
    Replace { event: Event },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Value {
    Created { event: Event },
    Events { events: Vec<Event> },
    Count { count: usize },
    Deleted { ids: Vec<u64> },
    Updated { events: Vec<Event> },
}

/// Result of executing a program. Mutations are described, not applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denotation {
    pub value: Value,
    pub mutations: Vec<Mutation>,
}

/// Synthetic calendar: a person directory, the valid day/time vocabulary, the
/// current events and the entities made salient by the dialogue context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub persons: BTreeSet<String>,
    pub days: BTreeSet<String>,
    pub times: BTreeSet<String>,
    pub events: Vec<Event>,
    pub salient_persons: Vec<String>,
    pub salient_events: Vec<u64>,
    pub next_id: u64,
}

impl WorldState {
    /// The fixed world for a grammar: known persons plus one seeded event per
    /// event name.
    pub fn for_grammar(grammar: &GrammarSpec) -> Self {
        let persons: BTreeSet<String> = if grammar.persons_known.is_empty() {
            grammar.literals.persons.iter().cloned().collect()
        } else {
            grammar.persons_known.iter().cloned().collect()
        };
        let known: Vec<&String> = persons.iter().collect();
        let days = &grammar.literals.days;
        let times = &grammar.literals.times;
        let events = grammar
            .literals
            .event_names
            .iter()
            .enumerate()
            .map(|(i, name)| Event {
                id: i as u64 + 1,
                name: Some(name.clone()),
                attendees: if known.is_empty() {
                    Vec::new()
                } else {
                    vec![known[i % known.len()].clone()]
                },
                day: Some(days[i % days.len()].clone()),
                time: Some(times[(i * 3) % times.len()].clone()),
            })
            .collect::<Vec<_>>();
        Self {
            persons,
            days: days.iter().cloned().collect(),
            times: times.iter().cloned().collect(),
            next_id: events.len() as u64 + 1,
            events,
            salient_persons: Vec::new(),
            salient_events: Vec::new(),
        }
    }

    /// Marks persons and events mentioned in `context` as salient, most recent
    /// mention first.
    pub fn with_salience<S: AsRef<str>>(&self, context: &[S]) -> Self {
        let mut world = self.clone();
        world.salient_persons.clear();
        world.salient_events.clear();
        for word in context.iter().rev() {
            let w = word.as_ref();
            if world.persons.contains(w) && !world.salient_persons.iter().any(|p| p == w) {
                world.salient_persons.push(w.to_string());
            }
            for e in &self.events {
                if e.name.as_deref() == Some(w) && !world.salient_events.contains(&e.id) {
                    world.salient_events.push(e.id);
                }
            }
        }
        world
    }

    /// Applies mutations, returning the successor state.
    pub fn apply(&self, mutations: &[Mutation]) -> Self {
        let mut world = self.clone();
        for m in mutations {
            match m {
                Mutation::Insert { event } => {
                    world.next_id = world.next_id.max(event.id + 1);
                    world.events.push(event.clone());
                }
                Mutation::Delete { id } => world.events.retain(|e| e.id != *id),
                Mutation::Replace { event } => {
                    if let Some(slot) = world.events.iter_mut().find(|e| e.id == event.id) {
                        *slot = event.clone();
                    }
                }
            }
        }
        world
    }
}

#[derive(Debug, Default, Clone)]
struct Constraint {
    name: Option<String>,
    attendees: Vec<String>,
    day: Option<String>,
    time: Option<String>,
    event: Option<u64>,
}

impl Constraint {
    fn merge(mut self, other: Constraint) -> Result<Self, DslError> {
        fn one(a: Option<String>, b: Option<String>, what: &str) -> Result<Option<String>, DslError> {
            match (a, b) {
                (Some(x), Some(y)) if x != y => Err(fault(format!("conflicting {what}: {x} vs {y}"))),
                (a, b) => Ok(a.or(b)),
            }
        }
        self.name = one(self.name, other.name, "names")?;
        self.day = one(self.day, other.day, "days")?;
        self.time = one(self.time, other.time, "times")?;
        self.event = match (self.event, other.event) {
            (Some(x), Some(y)) if x != y => return Err(fault("conflicting event references".into())),
            (a, b) => a.or(b),
        };
        for a in other.attendees {
            if !self.attendees.contains(&a) {
                self.attendees.push(a);
            }
        }
        Ok(self)
    }

    fn matches(&self, e: &Event) -> bool {
        self.event.is_none_or(|id| e.id == id)
            && self.name.as_ref().is_none_or(|n| e.name.as_ref() == Some(n))
            && self.day.as_ref().is_none_or(|d| e.day.as_ref() == Some(d))
            && self.time.as_ref().is_none_or(|t| e.time.as_ref() == Some(t))
            && self.attendees.iter().all(|a| e.attendees.contains(a))
    }

    fn overwrite(&self, e: &Event) -> Event {
        let mut out = e.clone();
        if let Some(n) = &self.name {
            out.name = Some(n.clone());
        }
        if let Some(d) = &self.day {
            out.day = Some(d.clone());
        }
        if let Some(t) = &self.time {
            out.time = Some(t.clone());
        }
        for a in &self.attendees {
            if !out.attendees.contains(a) {
                out.attendees.push(a.clone());
            }
        }
        out
    }
}

fn fault(msg: String) -> DslError {
    DslError::ExecutionFault(msg)
}

fn literal(node: &Node) -> Result<&str, DslError> {
    match node {
        Node::Literal(t) => Ok(t),
        _ => Err(fault("expected a literal".into())),
    }
}

fn single_arg<'a>(function: &str, args: &'a [Node]) -> Result<&'a Node, DslError> {
    match args {
        [a] => Ok(a),
        _ => Err(fault(format!("`{function}` expects one argument"))),
    }
}

fn eval_person(node: &Node, world: &WorldState) -> Result<String, DslError> {
    match node {
        Node::Call { function, args } if function == "person" => {
            let name = literal(single_arg(function, args)?)?;
            if world.persons.contains(name) {
                Ok(name.to_string())
            } else {
                Err(fault(format!("unknown person `{name}`")))
            }
        }
        Node::Call { function, args } if function == "refer" => match single_arg(function, args)? {
            Node::Constant(k) if k == "Person" => world
                .salient_persons
                .first()
                .cloned()
                .ok_or_else(|| fault("no salient person to refer to".into())),
            _ => Err(fault("refer in a person position must refer to a Person".into())),
        },
        _ => Err(fault("expected a person".into())),
    }
}

fn eval_constraint(node: &Node, world: &WorldState) -> Result<Constraint, DslError> {
    let Node::Call { function, args } = node else {
        return Err(fault("expected a constraint".into()));
    };
    let mut c = Constraint::default();
    match function.as_str() {
        "and" => {
            let [a, b] = args.as_slice() else {
                return Err(fault("`and` expects two arguments".into()));
            };
            return eval_constraint(a, world)?.merge(eval_constraint(b, world)?);
        }
        "name" => c.name = Some(literal(single_arg(function, args)?)?.to_string()),
        "withAttendee" => c.attendees.push(eval_person(single_arg(function, args)?, world)?),
        "onDate" => {
            let Node::Call { function: f, args: a } = single_arg(function, args)? else {
                return Err(fault("expected a date".into()));
            };
            let d = literal(single_arg(f, a)?)?;
            if f != "day" || !world.days.contains(d) {
                return Err(fault(format!("`{d}` is not a day")));
            }
            c.day = Some(d.to_string());
        }
        "atTime" => {
            let Node::Call { function: f, args: a } = single_arg(function, args)? else {
                return Err(fault("expected a time".into()));
            };
            let t = literal(single_arg(f, a)?)?;
            if f != "time" || !world.times.contains(t) {
                return Err(fault(format!("`{t}` is not a time")));
            }
            c.time = Some(t.to_string());
        }
        "refer" => match single_arg(function, args)? {
            Node::Constant(k) if k == "Event" => {
                c.event = Some(
                    *world
                        .salient_events
                        .first()
                        .ok_or_else(|| fault("no salient event to refer to".into()))?,
                );
            }
            _ => return Err(fault("refer in a constraint position must refer to an Event".into())),
        },
        other => return Err(fault(format!("`{other}` is not a constraint"))),
    }
    Ok(c)
}

/// Executes `program` against `world`. Pure: the world is never modified.
pub fn execute(program: &Program, world: &WorldState) -> Result<Denotation, DslError> {
    let Node::Call { function, args } = program.tree() else {
        return Err(fault("program is not an action".into()));
    };
    let matching = |c: &Constraint| -> Vec<Event> {
        world.events.iter().filter(|e| c.matches(e)).cloned().collect()
    };
    match function.as_str() {
        "createEvent" => {
            let c = eval_constraint(single_arg(function, args)?, world)?;
            if c.event.is_some() {
                return Err(fault("cannot create a referenced event".into()));
            }
            let event = Event {
                id: world.next_id,
                name: c.name.or_else(|| Some("event".into())),
                attendees: c.attendees,
                day: c.day,
                time: c.time,
            };
            Ok(Denotation {
                mutations: vec![Mutation::Insert { event: event.clone() }],
                value: Value::Created { event },
            })
        }
        "findEvent" => {
            let c = eval_constraint(single_arg(function, args)?, world)?;
            Ok(Denotation {
                value: Value::Events { events: matching(&c) },
                mutations: Vec::new(),
            })
        }
        "countEvents" => {
            let c = eval_constraint(single_arg(function, args)?, world)?;
            Ok(Denotation {
                value: Value::Count { count: matching(&c).len() },
                mutations: Vec::new(),
            })
        }
        "deleteEvent" => {
            let c = eval_constraint(single_arg(function, args)?, world)?;
            let ids: Vec<u64> = matching(&c).iter().map(|e| e.id).collect();
            Ok(Denotation {
                mutations: ids.iter().map(|&id| Mutation::Delete { id }).collect(),
                value: Value::Deleted { ids },
            })
        }
        "updateEvent" => {
            let [q, s] = args.as_slice() else {
                return Err(fault("`updateEvent` expects two arguments".into()));
            };
            let query = eval_constraint(q, world)?;
            let set = eval_constraint(s, world)?;
            if set.event.is_some() {
                return Err(fault("cannot assign an event reference".into()));
            }
            let events: Vec<Event> = matching(&query).iter().map(|e| set.overwrite(e)).collect();
            Ok(Denotation {
                mutations: events
                    .iter()
                    .map(|e| Mutation::Replace { event: e.clone() })
                    .collect(),
                value: Value::Updated { events },
            })
        }
        other => Err(fault(format!("`{other}` has no execution semantics"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::Dsl;

    fn setup() -> (Dsl, WorldState) {
        let g = GrammarSpec::calendar();
        (Dsl::new(&g), WorldState::for_grammar(&g))
    }

    #[test]
    fn finds_existing_event() {
        let (dsl, world) = setup();
        let p = dsl.compile("(findEvent (name \"standup\"))").unwrap();
        let d = execute(&p, &world).unwrap();
        match d.value {
            Value::Events { events } => {
                assert_eq!(events.len(), 1);
                assert_eq!(events[0].name.as_deref(), Some("standup"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(d.mutations.is_empty());
    }

    #[test]
    fn execution_is_deterministic_and_pure() {
        let (dsl, world) = setup();
        let p = dsl
            .compile("(createEvent (and (name \"lunch\") (withAttendee (person \"bob\"))))")
            .unwrap();
        let before = world.clone();
        let a = execute(&p, &world).unwrap();
        let b = execute(&p, &world).unwrap();
        assert_eq!(a, b);
        assert_eq!(world, before);
        let after = world.apply(&a.mutations);
        assert_eq!(after.events.len(), world.events.len() + 1);
    }

    #[test]
    fn unknown_person_faults() {
        let (dsl, world) = setup();
        let p = dsl
            .compile("(findEvent (withAttendee (person \"mallory\")))")
            .unwrap();
        assert!(matches!(execute(&p, &world), Err(DslError::ExecutionFault(_))));
    }

    #[test]
    fn out_of_domain_day_faults() {
        let (dsl, world) = setup();
        let p = dsl.compile("(findEvent (onDate (day \"alice\")))").unwrap();
        assert!(matches!(execute(&p, &world), Err(DslError::ExecutionFault(_))));
    }

    #[test]
    fn refer_resolves_from_salience() {
        let (dsl, world) = setup();
        let p = dsl.compile("(deleteEvent (refer Event))").unwrap();
        assert!(execute(&p, &world).is_err());
        let focused = world.with_salience(&["when", "is", "lunch"]);
        let d = execute(&p, &focused).unwrap();
        assert_eq!(d.mutations.len(), 1);

        let p = dsl
            .compile("(createEvent (withAttendee (refer Person)))")
            .unwrap();
        let focused = world.with_salience(&["who", "is", "carol"]);
        match execute(&p, &focused).unwrap().value {
            Value::Created { event } => assert_eq!(event.attendees, vec!["carol".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn update_and_delete_mutations_apply() {
        let (dsl, world) = setup();
        let p = dsl
            .compile("(updateEvent (name \"standup\") (onDate (day \"friday\")))")
            .unwrap();
        let d = execute(&p, &world).unwrap();
        let w2 = world.apply(&d.mutations);
        let e = w2.events.iter().find(|e| e.name.as_deref() == Some("standup")).unwrap();
        assert_eq!(e.day.as_deref(), Some("friday"));

        let p = dsl.compile("(deleteEvent (name \"standup\"))").unwrap();
        let d = execute(&p, &w2).unwrap();
        assert!(w2.apply(&d.mutations).events.iter().all(|e| e.name.as_deref() != Some("standup")));
    }

    #[test]
    fn conflicting_constraints_fault() {
        let (dsl, world) = setup();
        let p = dsl
            .compile("(findEvent (and (name \"lunch\") (name \"dinner\")))")
            .unwrap();
        assert!(execute(&p, &world).is_err());
    }
}
