use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::grammar::{FunctionSig, GrammarSpec, LITERAL_SORT};
use super::DslError;

/// A node of the call tree reconstructed from content tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Node {
    Call { function: String, args: Vec<Node> },
    Constant(String),
    /// Literal text without its surrounding quotes.
    Literal(String),
}

impl Node {
    fn write_surface(&self, out: &mut String) {
        match self {
            Node::Call { function, args } => {
                out.push('(');
                out.push_str(function);
                for arg in args {
                    out.push(' ');
                    arg.write_surface(out);
                }
                out.push(')');
            }
            Node::Constant(name) => out.push_str(name),
            Node::Literal(text) => {
                out.push('"');
                out.push_str(text);
                out.push('"');
            }
        }
    }

    fn write_tokens(&self, out: &mut Vec<String>) {
        match self {
            Node::Call { function, args } => {
                out.push(function.clone());
                for arg in args {
                    arg.write_tokens(out);
                }
            }
            Node::Constant(name) => out.push(name.clone()),
            Node::Literal(text) => out.push(literal_token(text)),
        }
    }
}

/// The content-token form of a literal: its text wrapped in double quotes.
pub fn literal_token(text: &str) -> String {
    format!("\"{text}\"")
}

/// Returns the literal text if `token` is a quoted literal token.
pub fn literal_text(token: &str) -> Option<&str> {
    token
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .filter(|t| !t.contains('"'))
}

/// A grammar-valid program in content-token form.
///
/// The token sequence holds functions, constants and quoted literals but no
/// brackets; the tree is rebuilt from declared arities.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    tokens: Vec<String>,
    tree: Node,
}

impl Program {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tree(&self) -> &Node {
        &self.tree
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&decompile(self))
    }
}

/// Renders the canonical surface form: `(f a b)` with single spaces.
pub fn decompile(program: &Program) -> String {
    let mut out = String::new();
    program.tree.write_surface(&mut out);
    out
}

/// True iff the content-token sequences are identical.
pub fn exact_match(pred: &Program, gold: &Program) -> bool {
    pred.tokens == gold.tokens
}

/// Token-level exact match, for predictions that may not be well formed.
pub fn tokens_match<A: AsRef<str>, B: AsRef<str>>(pred: &[A], gold: &[B]) -> bool {
    pred.len() == gold.len() && pred.iter().zip(gold).all(|(p, g)| p.as_ref() == g.as_ref())
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Open,
    Close,
    Symbol(String),
    Literal(String),
}

fn lex(surface: &str) -> Result<Vec<Lexeme>, DslError> {
    let mut out = Vec::new();
    let mut chars = surface.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        match c {
            '(' => {
                out.push(Lexeme::Open);
                chars.next();
            }
            ')' => {
                out.push(Lexeme::Close);
                chars.next();
            }
            '"' => {
                chars.next();
                let mut text = String::new();
                let mut closed = false;
                for (_, c) in chars.by_ref() {
                    if c == '"' {
                        closed = true;
                        break;
                    }
                    if c == '\n' {
                        break;
                    }
                    text.push(c);
                }
                if !closed {
                    return Err(DslError::MalformedSurface(format!(
                        "unterminated literal at byte {i}"
                    )));
                }
                if text.is_empty() {
                    return Err(DslError::MalformedSurface(format!("empty literal at byte {i}")));
                }
                out.push(Lexeme::Literal(text));
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            _ => {
                let mut sym = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                        break;
                    }
                    sym.push(c);
                    chars.next();
                }
                out.push(Lexeme::Symbol(sym));
            }
        }
    }
    Ok(out)
}

/// Symbol table for one grammar: compiles surfaces and token sequences into
/// validated programs.
#[derive(Debug, Clone)]
pub struct Dsl {
    functions: HashMap<String, FunctionSig>,
    constants: HashMap<String, String>,
}

impl Dsl {
    pub fn new(grammar: &GrammarSpec) -> Self {
        Self {
            functions: grammar
                .functions
                .iter()
                .map(|f| (f.name.clone(), f.clone()))
                .collect(),
            constants: grammar
                .constants
                .iter()
                .map(|c| (c.name.clone(), c.sort.clone()))
                .collect(),
        }
    }

    pub fn calendar() -> Self {
        Self::new(&GrammarSpec::calendar())
    }

    pub fn arity(&self, symbol: &str) -> Option<usize> {
        if let Some(f) = self.functions.get(symbol) {
            Some(f.args.len())
        } else if self.constants.contains_key(symbol) {
            Some(0)
        } else {
            None
        }
    }

    /// Parses a bracketed surface form into a program.
    pub fn compile(&self, surface: &str) -> Result<Program, DslError> {
        let lexemes = lex(surface)?;
        if lexemes.is_empty() {
            return Err(DslError::EmptyProgram);
        }
        let mut pos = 0;
        let tree = self.parse_surface(&lexemes, &mut pos)?;
        if pos != lexemes.len() {
            return Err(DslError::MalformedSurface(format!(
                "unexpected input after the program (lexeme {pos})"
            )));
        }
        self.finish(tree)
    }

    /// Rebuilds a program from content tokens using declared arities.
    pub fn program_from_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Program, DslError> {
        if tokens.is_empty() {
            return Err(DslError::EmptyProgram);
        }
        let mut pos = 0;
        let tree = self.parse_tokens(tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(DslError::TrailingTokens(tokens.len() - pos));
        }
        self.finish(tree)
    }

    /// Decompiles a raw token sequence, validating it first.
    pub fn decompile_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<String, DslError> {
        self.program_from_tokens(tokens).map(|p| decompile(&p))
    }

    fn finish(&self, tree: Node) -> Result<Program, DslError> {
        let mut tokens = Vec::new();
        tree.write_tokens(&mut tokens);
        Ok(Program { tokens, tree })
    }

    fn parse_surface(&self, lx: &[Lexeme], pos: &mut usize) -> Result<Node, DslError> {
        match lx.get(*pos) {
            None => Err(DslError::MalformedSurface("unexpected end of input".into())),
            Some(Lexeme::Close) => Err(DslError::MalformedSurface(format!(
                "unbalanced `)` at lexeme {pos}"
            ))),
            Some(Lexeme::Literal(text)) => {
                *pos += 1;
                Ok(Node::Literal(text.clone()))
            }
            Some(Lexeme::Symbol(sym)) => {
                *pos += 1;
                if self.constants.contains_key(sym) {
                    Ok(Node::Constant(sym.clone()))
                } else if let Some(sig) = self.functions.get(sym) {
                    Err(DslError::ArityViolation {
                        symbol: sym.clone(),
                        expected: sig.args.len(),
                        found: 0,
                    })
                } else {
                    Err(DslError::UnknownSymbol(sym.clone()))
                }
            }
            Some(Lexeme::Open) => {
                *pos += 1;
                let name = match lx.get(*pos) {
                    Some(Lexeme::Symbol(s)) => s.clone(),
                    Some(_) => {
                        return Err(DslError::MalformedSurface(format!(
                            "expected a function name at lexeme {pos}"
                        )))
                    }
                    None => return Err(DslError::MalformedSurface("unbalanced `(`".into())),
                };
                *pos += 1;
                let sig = match self.functions.get(&name) {
                    Some(sig) => sig,
                    None if self.constants.contains_key(&name) => {
                        return Err(DslError::MalformedSurface(format!(
                            "constant `{name}` cannot be called"
                        )))
                    }
                    None => return Err(DslError::UnknownSymbol(name)),
                };
                let mut args = Vec::new();
                loop {
                    match lx.get(*pos) {
                        None => return Err(DslError::MalformedSurface("unbalanced `(`".into())),
                        Some(Lexeme::Close) => {
                            *pos += 1;
                            break;
                        }
                        Some(_) => args.push(self.parse_surface(lx, pos)?),
                    }
                }
                if args.len() != sig.args.len() {
                    return Err(DslError::ArityViolation {
                        symbol: name,
                        expected: sig.args.len(),
                        found: args.len(),
                    });
                }
                self.check_sorts(sig, &args)?;
                Ok(Node::Call {
                    function: name,
                    args,
                })
            }
        }
    }

    fn parse_tokens<S: AsRef<str>>(&self, tokens: &[S], pos: &mut usize) -> Result<Node, DslError> {
        let tok = tokens[*pos].as_ref();
        *pos += 1;
        if let Some(text) = literal_text(tok) {
            if text.is_empty() {
                return Err(DslError::MalformedSurface("empty literal".into()));
            }
            return Ok(Node::Literal(text.to_string()));
        }
        if self.constants.contains_key(tok) {
            return Ok(Node::Constant(tok.to_string()));
        }
        let sig = self
            .functions
            .get(tok)
            .ok_or_else(|| DslError::UnknownSymbol(tok.to_string()))?;
        let mut args = Vec::with_capacity(sig.args.len());
        for i in 0..sig.args.len() {
            if *pos >= tokens.len() {
                return Err(DslError::ArityViolation {
                    symbol: tok.to_string(),
                    expected: sig.args.len(),
                    found: i,
                });
            }
            args.push(self.parse_tokens(tokens, pos)?);
        }
        self.check_sorts(sig, &args)?;
        Ok(Node::Call {
            function: tok.to_string(),
            args,
        })
    }

    fn check_sorts(&self, sig: &FunctionSig, args: &[Node]) -> Result<(), DslError> {
        for (want, arg) in sig.args.iter().zip(args) {
            let ok = match arg {
                Node::Literal(_) => want == LITERAL_SORT,
                Node::Constant(c) => self.constants.get(c).is_some_and(|s| s == want),
                Node::Call { function, .. } => self
                    .functions
                    .get(function)
                    .is_some_and(|f| f.sorts.iter().any(|s| s == want)),
            };
            if !ok {
                return Err(DslError::SortMismatch {
                    function: sig.name.clone(),
                    expected: want.clone(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dsl() -> Dsl {
        Dsl::calendar()
    }

    #[test]
    fn compiles_one_call_program() {
        let p = dsl().compile("(createEvent (name \"standup\"))").unwrap();
        assert_eq!(p.tokens(), ["createEvent", "name", "\"standup\""]);
    }

    #[test]
    fn decompiles_back_to_surface() {
        let p = dsl()
            .program_from_tokens(&["createEvent", "name", "\"standup\""])
            .unwrap();
        assert_eq!(decompile(&p), "(createEvent (name \"standup\"))");
    }

    #[test]
    fn unbalanced_input_is_malformed() {
        assert!(matches!(
            dsl().compile("(createEvent"),
            Err(DslError::MalformedSurface(_))
        ));
        assert!(matches!(
            dsl().compile("(name \"x\"))"),
            Err(DslError::MalformedSurface(_))
        ));
    }

    #[test]
    fn unknown_symbol_and_arity_errors() {
        assert!(matches!(
            dsl().compile("(frobnicate \"x\")"),
            Err(DslError::UnknownSymbol(s)) if s == "frobnicate"
        ));
        assert!(matches!(
            dsl().compile("(and (name \"x\"))"),
            Err(DslError::ArityViolation { expected: 2, found: 1, .. })
        ));
        assert!(matches!(
            dsl().program_from_tokens(&["and", "name", "\"x\""]),
            Err(DslError::ArityViolation { .. })
        ));
    }

    #[test]
    fn sort_errors() {
        assert!(matches!(
            dsl().compile("(createEvent \"x\")"),
            Err(DslError::SortMismatch { .. })
        ));
        assert!(matches!(
            dsl().compile("(person (day \"monday\"))"),
            Err(DslError::SortMismatch { .. })
        ));
    }

    #[test]
    fn refer_fills_person_and_constraint_positions() {
        let d = dsl();
        d.compile("(deleteEvent (refer Event))").unwrap();
        d.compile("(createEvent (withAttendee (refer Person)))").unwrap();
    }

    #[test]
    fn empty_program_errors() {
        let empty: [&str; 0] = [];
        assert!(matches!(dsl().program_from_tokens(&empty), Err(DslError::EmptyProgram)));
        assert!(matches!(dsl().decompile_tokens(&empty), Err(DslError::EmptyProgram)));
        assert!(matches!(dsl().compile("   "), Err(DslError::EmptyProgram)));
    }

    #[test]
    fn trailing_tokens_rejected() {
        assert!(matches!(
            dsl().program_from_tokens(&["name", "\"a\"", "\"b\""]),
            Err(DslError::TrailingTokens(1))
        ));
    }

    #[test]
    fn exact_match_is_token_identity() {
        let d = dsl();
        let a = d.compile("(findEvent (name \"lunch\"))").unwrap();
        let b = d.compile("(findEvent (name \"dinner\"))").unwrap();
        assert!(exact_match(&a, &a));
        assert!(!exact_match(&a, &b));
    }
}
