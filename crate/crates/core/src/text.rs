//! The single tokenizer used for utterances and glosses.

const PUNCT: &[char] = &['?', '.', '!', ','];

/// Lowercases, splits on whitespace and detaches trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        let mut body = word.as_str();
        let mut trailing = Vec::new();
        while let Some(c) = body.chars().last().filter(|c| PUNCT.contains(c)) {
            trailing.push(c.to_string());
            body = &body[..body.len() - c.len_utf8()];
        }
        if !body.is_empty() {
            out.push(body.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Joins tokens with spaces, attaching punctuation to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let is_punct = tok.chars().count() == 1 && tok.chars().all(|c| PUNCT.contains(&c));
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("When is Standup?"), vec!["when", "is", "standup", "?"]);
        assert_eq!(tokenize("  a,  b "), vec!["a", ",", "b"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn detokenize_inverts_tokenize_on_canonical_text() {
        let s = "when is standup with alice?";
        assert_eq!(detokenize(&tokenize(s)), s);
    }
}
