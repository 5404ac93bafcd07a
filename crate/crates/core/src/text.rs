//! Transcription cleaning shared by the oracle rules and the TF-IDF baseline.

/// Lowercase, drop `[...]` and `(...)` annotations, replace every character
/// that is neither alphanumeric nor an apostrophe with a space and collapse
/// whitespace.
pub fn clean(text: &str) -> String {
    let stripped = strip_annotations(&text.to_lowercase());
    let mapped: String = stripped
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word tokens of the cleaned text.
pub fn tokens(text: &str) -> Vec<String> {
    clean(text).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

/// Contents of every `[...]` / `(...)` annotation, lowercased and trimmed.
pub fn annotations(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut current: Option<(char, String)> = None;
    for c in lower.chars() {
        match (&mut current, c) {
            (None, '[') => current = Some((']', String::new())),
            (None, '(') => current = Some((')', String::new())),
            (Some((close, buf)), c) => {
                if c == *close {
                    out.push(buf.trim().to_owned());
                    current = None;
                } else {
                    buf.push(c);
                }
            }
            _ => {}
        }
    }
    out
}

fn strip_annotations(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut closing: Option<char> = None;
    for c in text.chars() {
        match closing {
            Some(close) if c == close => {
                closing = None;
                out.push(' ');
            }
            Some(_) => {}
            None if c == '[' => closing = Some(']'),
            None if c == '(' => closing = Some(')'),
            None => out.push(c),
        }
    }
    // An unterminated bracket swallows the rest of the text; that matches how
    // annotation-only transcripts (e.g. "[instrumental") should be treated.
    out
}
