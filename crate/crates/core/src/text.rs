//! The tokenization shared by the generator vocabulary and the metrics:
//! lowercase, split on whitespace, and every punctuation character becomes
//! a token of its own. Apostrophes stay inside words ("i'm").

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c == '\'' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn closes(token: &str) -> bool {
    matches!(token, "." | "," | "!" | "?" | ";" | ":" | ")")
}

/// Joins tokens with spaces, without a space before closing punctuation.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !closes(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Hi!  I'm  Bob,ok?"), vec!["hi", "!", "i'm", "bob", ",", "ok", "?"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn detokenize_inverts_on_plain_sentences() {
        let s = "yes, i have two dogs who love the trail.";
        assert_eq!(detokenize(&tokenize(s)), s);
    }
}
