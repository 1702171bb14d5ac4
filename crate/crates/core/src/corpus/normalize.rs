use super::{CanonicalIR, TAG_RE};

// Words the -s / -ing / -ed rules would mangle.
const KEEP: &[&str] = &[
    "always", "anything", "bias", "does", "during", "everything", "gas", "lens", "news", "nothing",
    "perhaps", "ping", "series", "something", "species", "status", "string", "this", "thus", "various",
    "whereas",
];

fn has_vowel(s: &str) -> bool {
    s.chars().any(|c| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y'))
}

/// Three-rule suffix stripper (-ing, -ed, plural -s). Expects a lowercase
/// alphabetic word; at most one rule fires.
pub fn lemmatize_word(word: &str) -> String {
    if KEEP.binary_search(&word).is_ok() {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ing") {
        if stem.len() >= 3 && has_vowel(stem) {
            return stem.to_string();
        }
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ed") {
        if stem.len() >= 3 && has_vowel(stem) {
            return stem.to_string();
        }
        return word.to_string();
    }
    if word.len() >= 4
        && word.ends_with('s')
        && !word.ends_with("ss")
        && !word.ends_with("us")
        && !word.ends_with("is")
    {
        let stem = &word[..word.len() - 1];
        if has_vowel(stem) {
            return stem.to_string();
        }
    }
    word.to_string()
}

fn normalize_segment(segment: &str, out: &mut String) {
    let lower = segment.to_lowercase();
    let mut word = String::new();
    for c in lower.chars() {
        if c.is_ascii_alphabetic() {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push_str(&lemmatize_word(&word));
                word.clear();
            }
            out.push(c);
        }
    }
    if !word.is_empty() {
        out.push_str(&lemmatize_word(&word));
    }
}

fn normalize_str(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in TAG_RE.find_iter(text) {
        normalize_segment(&text[last..m.start()], &mut out);
        out.push_str(m.as_str());
        last = m.end();
    }
    normalize_segment(&text[last..], &mut out);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases, collapses whitespace and lemmatizes title and content.
/// Rich-text tags and payloads are left as they are.
pub fn normalize_text(ir: &CanonicalIR) -> CanonicalIR {
    CanonicalIR { title: normalize_str(&ir.title), content: normalize_str(&ir.content), ..ir.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ElementKind, RichTextElement};

    fn with_content(content: &str) -> CanonicalIR {
        CanonicalIR {
            id: "a".into(),
            title: "Title".into(),
            content: content.into(),
            rich_text: vec![],
            created_at: 0,
            label_vul: None,
            cwe_id: None,
            cve_id: None,
            page_missing: false,
        }
    }

    #[test]
    fn keep_list_is_sorted() {
        assert!(KEEP.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn suffix_rules() {
        assert_eq!(normalize_text(&with_content("Injecting  payloads")).content, "inject payload");
        assert_eq!(normalize_text(&with_content("XSS Attacks triggered")).content, "xss attack trigger");
    }

    #[test]
    fn guards_hold() {
        for w in ["xss", "this", "does", "status", "string", "used", "need", "was", "class"] {
            assert_eq!(lemmatize_word(w), w);
        }
    }

    #[test]
    fn tags_and_payloads_untouched() {
        let mut r = with_content("See [CODE1]\n and [SCR2], Clicked");
        r.rich_text = vec![
            RichTextElement::new(ElementKind::Code, 1, "Echo RUNNING;"),
            RichTextElement::new(ElementKind::Scr, 2, "https://x/A.png"),
        ];
        let n = normalize_text(&r);
        assert_eq!(n.content, "see [CODE1] and [SCR2], click");
        assert_eq!(n.rich_text, r.rich_text);
        assert_eq!(n.title, "title");
    }
}
