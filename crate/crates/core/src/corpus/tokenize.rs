/// Lowercases, splits on whitespace and emits each punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_ascii_punctuation() || (!ch.is_ascii() && is_unicode_punct(ch)) {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn is_unicode_punct(ch: char) -> bool {
    matches!(
        ch,
        '\u{2010}'..='\u{2027}' | '\u{3000}'..='\u{303f}' | '\u{00a1}' | '\u{00bf}' | '\u{00ab}' | '\u{00bb}'
    )
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Slow but steady, and  INEXPENSIVE."),
            vec!["slow", "but", "steady", ",", "and", "inexpensive", "."]
        );
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("  \n\t").is_empty());
    }

    proptest! {
        #[test]
        fn normalized_sentences_round_trip(words in prop::collection::vec("[a-z0-9]{1,8}|[.,!?]", 1..20)) {
            let sentence = words.join(" ");
            prop_assert_eq!(detokenize(&tokenize(&sentence)), sentence);
        }
    }
}
