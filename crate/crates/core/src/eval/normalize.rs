/// Lettered options such as `(a) yes (b) no` found in a question, in order.
pub fn parse_options(question: &str) -> Vec<(char, String)> {
    let lower = question.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut marks = Vec::new();
    for i in 0..chars.len().saturating_sub(2) {
        if chars[i] == '(' && chars[i + 1].is_ascii_lowercase() && chars[i + 2] == ')' {
            marks.push((i, chars[i + 1]));
        }
    }
    marks
        .iter()
        .enumerate()
        .map(|(k, &(start, letter))| {
            let end = marks.get(k + 1).map_or(chars.len(), |m| m.0);
            let text: String = chars[start + 3..end].iter().collect();
            (letter, normalize_answer(&text, &[]))
        })
        .filter(|(_, t)| !t.is_empty())
        .collect()
}

/// Lowercases, drops punctuation, and collapses whitespace. `(b)` and `b)`
/// become the text of option b when `options` has one.
pub fn normalize_answer(text: &str, options: &[(char, String)]) -> String {
    let trimmed = text.trim().to_lowercase();
    if !options.is_empty() {
        let t = trimmed.trim_end_matches('.');
        let t = t.strip_prefix('(').unwrap_or(t);
        let mut cs = t.chars();
        if let (Some(letter), Some(')'), None) = (cs.next(), cs.next(), cs.next()) {
            if let Some((_, opt)) = options.iter().find(|(l, _)| *l == letter) {
                return opt.clone();
            }
        }
    }
    trimmed
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}
