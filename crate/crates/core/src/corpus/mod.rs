//! Issue-report ingestion: page parsing, rich-text normalization, multi-CWE
//! refinement and time-ordered corpus splitting.

mod normalize;
mod parse;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text_index::{TfIdfIndex, TokenizerConfig};

pub use normalize::{lemmatize_word, normalize_text};
pub use parse::{issue_id_from_url, parse_issue_page};

/// Default cosine threshold for merging near-duplicate rich-text payloads.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.9;

pub(crate) static TAG_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[(SCR|CODE)([1-9][0-9]*)\]").unwrap());
pub(crate) static CWE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^CWE-[0-9]+$").unwrap());

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("page {0} has no extractable title")]
    MalformedPage(String),
    #[error("invalid CWE id list: {0}")]
    InvalidCweId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split proportion {0} is outside (0, 1)")]
    InvalidProportion(f64),
    #[error("tag invariant violated in {id}: {detail}")]
    TagMismatch { id: String, detail: String },
    #[error("{path}:{line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Snapshot of a fetched issue page before parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawIssuePage {
    pub source_url: String,
    pub html: String,
    /// UTC epoch seconds.
    pub fetched_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementKind {
    #[serde(rename = "SCR")]
    Scr,
    #[serde(rename = "CODE")]
    Code,
}

impl ElementKind {
    pub fn label(self) -> &'static str {
        match self {
            ElementKind::Scr => "SCR",
            ElementKind::Code => "CODE",
        }
    }

    pub fn tag(self, n: usize) -> String {
        format!("[{}{}]", self.label(), n)
    }
}

/// One screenshot link or code snippet, referenced from content by its tag.
///
/// Serialized as a single-entry object `{"[SCR1]": "<payload>"}`, which is
/// the shape of the `Rich-Text` list in corpus files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RichTextElement {
    pub kind: ElementKind,
    pub tag: String,
    pub payload: String,
}

impl RichTextElement {
    pub fn new(kind: ElementKind, n: usize, payload: impl Into<String>) -> Self {
        Self { kind, tag: kind.tag(n), payload: payload.into() }
    }

    /// Parses a tag such as `[CODE2]` into its kind and ordinal.
    pub fn parse_tag(tag: &str) -> Option<(ElementKind, usize)> {
        let caps = TAG_RE.captures(tag)?;
        if caps.get(0)?.as_str() != tag {
            return None;
        }
        let kind = if &caps[1] == "SCR" { ElementKind::Scr } else { ElementKind::Code };
        Some((kind, caps[2].parse().ok()?))
    }
}

impl Serialize for RichTextElement {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        map.serialize_entry(&self.tag, &self.payload)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for RichTextElement {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ElementVisitor;
        impl<'de> Visitor<'de> for ElementVisitor {
            type Value = RichTextElement;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a single-entry object mapping a [SCRn]/[CODEn] tag to its payload")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let (tag, payload): (String, String) =
                    map.next_entry()?.ok_or_else(|| de::Error::custom("empty rich-text entry"))?;
                if map.next_entry::<String, String>()?.is_some() {
                    return Err(de::Error::custom("rich-text entry has more than one key"));
                }
                let (kind, _) = RichTextElement::parse_tag(&tag)
                    .ok_or_else(|| de::Error::custom(format!("malformed rich-text tag {tag}")))?;
                if payload.is_empty() {
                    return Err(de::Error::custom(format!("empty payload for {tag}")));
                }
                Ok(RichTextElement { kind, tag, payload })
            }
        }
        deserializer.deserialize_map(ElementVisitor)
    }
}

/// A preprocessed issue report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalIR {
    pub id: String,
    #[serde(rename = "Title", alias = "title")]
    pub title: String,
    #[serde(rename = "Content", alias = "content")]
    pub content: String,
    #[serde(rename = "Rich-Text", alias = "rich_text", default)]
    pub rich_text: Vec<RichTextElement>,
    /// UTC epoch seconds.
    pub created_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_vul: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cve_id: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub page_missing: bool,
}

impl CanonicalIR {
    pub fn element(&self, tag: &str) -> Option<&RichTextElement> {
        self.rich_text.iter().find(|e| e.tag == tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.rich_text.iter().map(|e| e.tag.as_str())
    }

    /// Checks that content tags and rich-text entries correspond one to one.
    pub fn check_tags(&self) -> Result<(), CorpusError> {
        let mismatch = |detail: String| CorpusError::TagMismatch { id: self.id.clone(), detail };
        let in_content: BTreeSet<&str> = TAG_RE.find_iter(&self.content).map(|m| m.as_str()).collect();
        let mut in_table = BTreeSet::new();
        for el in &self.rich_text {
            match RichTextElement::parse_tag(&el.tag) {
                Some((kind, _)) if kind == el.kind => {}
                _ => return Err(mismatch(format!("tag {} does not match its kind", el.tag))),
            }
            if el.payload.is_empty() {
                return Err(mismatch(format!("{} has an empty payload", el.tag)));
            }
            if !in_table.insert(el.tag.as_str()) {
                return Err(mismatch(format!("{} listed twice", el.tag)));
            }
        }
        if in_content != in_table {
            return Err(mismatch(format!("content tags {in_content:?} vs table {in_table:?}")));
        }
        Ok(())
    }
}

/// Time-ordered split into historical and target IRs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub historical: Vec<CanonicalIR>,
    pub target: Vec<CanonicalIR>,
    pub proportion: f64,
}

/// Merges rich-text elements whose payloads are near duplicates.
///
/// Each element is compared against the earlier surviving elements of the
/// same kind; at or above `threshold` it folds into the first such survivor
/// and its tag sites are rewritten. Passes repeat until nothing merges, so
/// the result is a fixed point and the operation is idempotent.
pub fn merge_similar_elements(ir: &CanonicalIR, threshold: f64) -> CanonicalIR {
    let mut current = ir.clone();
    while let Some(next) = merge_pass(&current, threshold) {
        current = next;
    }
    current
}

fn merge_pass(ir: &CanonicalIR, threshold: f64) -> Option<CanonicalIR> {
    if ir.rich_text.len() < 2 {
        return None;
    }
    let payloads: Vec<&str> = ir.rich_text.iter().map(|e| e.payload.as_str()).collect();
    let index = TfIdfIndex::build(&payloads, TokenizerConfig::without_stopwords()).ok()?;
    let vectors: Vec<_> = payloads.iter().map(|p| index.vectorize(p)).collect();

    // survivor index for every element
    let mut target: Vec<usize> = (0..ir.rich_text.len()).collect();
    let mut survivors: Vec<usize> = Vec::new();
    let mut merged_any = false;
    for (j, el) in ir.rich_text.iter().enumerate() {
        let hit = survivors.iter().copied().find(|&i| {
            let other = &ir.rich_text[i];
            other.kind == el.kind
                && (other.payload == el.payload || vectors[i].cosine(&vectors[j]) >= threshold)
        });
        match hit {
            Some(i) => {
                target[j] = i;
                merged_any = true;
            }
            None => survivors.push(j),
        }
    }
    if !merged_any {
        return None;
    }
    Some(reindex(ir, &survivors, &target))
}

/// Keeps `survivors` (in order), renumbers them densely per kind and rewrites
/// every tag site in content through `target`.
fn reindex(ir: &CanonicalIR, survivors: &[usize], target: &[usize]) -> CanonicalIR {
    let mut counters: HashMap<ElementKind, usize> = HashMap::new();
    let mut new_tag: HashMap<usize, String> = HashMap::new();
    let mut rich_text = Vec::with_capacity(survivors.len());
    for &i in survivors {
        let el = &ir.rich_text[i];
        let n = counters.entry(el.kind).or_default();
        *n += 1;
        let fresh = RichTextElement::new(el.kind, *n, el.payload.clone());
        new_tag.insert(i, fresh.tag.clone());
        rich_text.push(fresh);
    }
    let old_to_new: HashMap<&str, &str> = ir
        .rich_text
        .iter()
        .enumerate()
        .map(|(j, el)| (el.tag.as_str(), new_tag[&target[j]].as_str()))
        .collect();
    let content = TAG_RE
        .replace_all(&ir.content, |caps: &regex::Captures| {
            let old = caps.get(0).unwrap().as_str();
            old_to_new.get(old).copied().unwrap_or(old).to_string()
        })
        .into_owned();
    CanonicalIR { content, rich_text, ..ir.clone() }
}

/// Splits a record with several CWE labels into one record per label.
pub fn split_multi_cwe(ir: &CanonicalIR, cwe_ids: &[String]) -> Result<Vec<CanonicalIR>, CorpusError> {
    if cwe_ids.is_empty() {
        return Err(CorpusError::InvalidCweId("empty list".into()));
    }
    if let Some(bad) = cwe_ids.iter().find(|c| !CWE_RE.is_match(c)) {
        return Err(CorpusError::InvalidCweId(bad.clone()));
    }
    let mut seen = BTreeSet::new();
    Ok(cwe_ids
        .iter()
        .filter(|c| seen.insert(c.as_str()))
        .map(|cwe| {
            let number = cwe.trim_start_matches("CWE-");
            CanonicalIR {
                id: format!("{}#cwe-{number}", ir.id),
                cwe_id: Some(cwe.clone()),
                label_vul: Some(true),
                ..ir.clone()
            }
        })
        .collect())
}

/// Sorts by `(created_at, id)` and takes the first `round(proportion * n)`
/// records as historical.
pub fn split_corpus(irs: &[CanonicalIR], proportion: f64) -> Result<CorpusSplit, CorpusError> {
    if !(proportion > 0.0 && proportion < 1.0) {
        return Err(CorpusError::InvalidProportion(proportion));
    }
    if irs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut sorted = irs.to_vec();
    sorted.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
    let n_hist = ((proportion * sorted.len() as f64).round() as usize).min(sorted.len());
    let target = sorted.split_off(n_hist);
    Ok(CorpusSplit { historical: sorted, target, proportion })
}

/// Reads a JSON Lines corpus. Blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| CorpusError::Json {
            path: path.display().to_string(),
            line: 0,
            source,
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn ir(id: &str, created_at: i64, content: &str, rich_text: Vec<RichTextElement>) -> CanonicalIR {
        CanonicalIR {
            id: id.into(),
            title: format!("title of {id}"),
            content: content.into(),
            rich_text,
            created_at,
            label_vul: None,
            cwe_id: None,
            cve_id: None,
            page_missing: false,
        }
    }

    fn code(n: usize, payload: &str) -> RichTextElement {
        RichTextElement::new(ElementKind::Code, n, payload)
    }

    #[test]
    fn rich_text_serializes_as_tag_payload_pairs() {
        let r = ir("o/r#1", 5, "see [SCR1] and [CODE1]", vec![
            RichTextElement::new(ElementKind::Scr, 1, "https://x/a.png"),
            code(1, "echo 1;"),
        ]);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["Content"], "see [SCR1] and [CODE1]");
        assert_eq!(json["Rich-Text"][0]["[SCR1]"], "https://x/a.png");
        assert_eq!(json["Rich-Text"][1]["[CODE1]"], "echo 1;");
        let back: CanonicalIR = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn lowercase_aliases_are_accepted() {
        let raw = r#"{"id":"a","title":"t","content":"x [CODE1]","rich_text":[{"[CODE1]":"ls"}],"created_at":3}"#;
        let r: CanonicalIR = serde_json::from_str(raw).unwrap();
        assert_eq!(r.rich_text[0].kind, ElementKind::Code);
        r.check_tags().unwrap();
    }

    #[test]
    fn malformed_tags_are_rejected_on_read() {
        let raw = r#"{"id":"a","Title":"t","Content":"x","Rich-Text":[{"[IMG1]":"a.png"}],"created_at":3}"#;
        assert!(serde_json::from_str::<CanonicalIR>(raw).is_err());
        let raw = r#"{"id":"a","Title":"t","Content":"x","Rich-Text":[{"[SCR0]":"a.png"}],"created_at":3}"#;
        assert!(serde_json::from_str::<CanonicalIR>(raw).is_err());
    }

    #[test]
    fn check_tags_detects_orphans() {
        let r = ir("a", 0, "x [CODE1] [CODE2]", vec![code(1, "ls")]);
        assert!(matches!(r.check_tags(), Err(CorpusError::TagMismatch { .. })));
    }

    #[test]
    fn identical_payloads_merge() {
        let r = ir("a", 0, "first [CODE1] then [CODE2]", vec![code(1, "rm -rf /tmp/x"), code(2, "rm -rf /tmp/x")]);
        let m = merge_similar_elements(&r, DEFAULT_MERGE_THRESHOLD);
        assert_eq!(m.rich_text, vec![code(1, "rm -rf /tmp/x")]);
        assert_eq!(m.content, "first [CODE1] then [CODE1]");
        m.check_tags().unwrap();
    }

    #[test]
    fn disjoint_payloads_do_not_merge() {
        let r = ir("a", 0, "[CODE1] [CODE2]", vec![code(1, "select name"), code(2, "echo hello")]);
        assert_eq!(merge_similar_elements(&r, DEFAULT_MERGE_THRESHOLD), r);
    }

    #[test]
    fn kinds_never_merge_with_each_other() {
        let r = ir("a", 0, "[SCR1] [CODE1]", vec![
            RichTextElement::new(ElementKind::Scr, 1, "alpha beta"),
            code(1, "alpha beta"),
        ]);
        assert_eq!(merge_similar_elements(&r, 0.5), r);
    }

    #[test]
    fn only_first_and_third_snippet_merge() {
        // Payload tokens over the five-token vocabulary {p, q, r, s, t}.
        // Hand computation with idf = ln(4/(1+df)) + 1, n = 3:
        //   df(p)=2, df(q)=2, df(r)=1, df(s)=1, df(t)=1
        //   idf(p)=idf(q)=ln(4/3)+1=1.287682, idf(r)=idf(s)=idf(t)=ln 2+1=1.693147
        //   #1 = p q r, #2 = s t, #3 = p q
        //   cos(#1,#3) = (2*1.287682^2)/(sqrt(2*1.287682^2+1.693147^2)*sqrt(2*1.287682^2)) = 0.732
        //   cos(#1,#2) = cos(#2,#3) = 0
        let r = ir("a", 0, "[CODE1] [CODE2] [CODE3]", vec![code(1, "p q r"), code(2, "s t"), code(3, "p q")]);
        let m = merge_similar_elements(&r, 0.7);
        assert_eq!(m.rich_text, vec![code(1, "p q r"), code(2, "s t")]);
        assert_eq!(m.content, "[CODE1] [CODE2] [CODE1]");
        // just below the hand-computed cosine nothing merges at 0.75
        assert_eq!(merge_similar_elements(&r, 0.75), r);
    }

    #[test]
    fn single_cwe_gives_one_record() {
        let r = ir("o/r#1", 0, "x", vec![]);
        let out = split_multi_cwe(&r, &["CWE-79".into()]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cwe_id.as_deref(), Some("CWE-79"));
        assert_eq!(out[0].label_vul, Some(true));
    }

    #[test]
    fn two_cwes_share_content() {
        let r = ir("fuel-cms/fuel-cms#536", 0, "stored xss in page title", vec![]);
        let out = split_multi_cwe(&r, &["CWE-79".into(), "CWE-352".into()]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].id, "fuel-cms/fuel-cms#536#cwe-79");
        assert_eq!(out[1].id, "fuel-cms/fuel-cms#536#cwe-352");
        assert_eq!(out[1].cwe_id.as_deref(), Some("CWE-352"));
        assert!(out.iter().all(|o| o.content == r.content));
    }

    #[test]
    fn bad_cwe_lists_fail() {
        let r = ir("a", 0, "x", vec![]);
        assert!(matches!(split_multi_cwe(&r, &[]), Err(CorpusError::InvalidCweId(_))));
        assert!(matches!(split_multi_cwe(&r, &["XSS".into()]), Err(CorpusError::InvalidCweId(_))));
    }

    #[test]
    fn split_sixty_forty() {
        let irs: Vec<_> = (0..10).map(|i| ir(&format!("r{i}"), 100 - i, "x", vec![])).collect();
        let s = split_corpus(&irs, 0.6).unwrap();
        assert_eq!((s.historical.len(), s.target.len()), (6, 4));
        let max_hist = s.historical.iter().map(|r| r.created_at).max().unwrap();
        let min_target = s.target.iter().map(|r| r.created_at).min().unwrap();
        assert!(max_hist <= min_target);
    }

    #[test]
    fn split_single_record_rounds_up() {
        let s = split_corpus(&[ir("a", 0, "x", vec![])], 0.6).unwrap();
        assert_eq!((s.historical.len(), s.target.len()), (1, 0));
    }

    #[test]
    fn split_ties_break_by_id() {
        let irs = vec![ir("c", 7, "", vec![]), ir("a", 7, "", vec![]), ir("b", 7, "", vec![])];
        let s = split_corpus(&irs, 0.5).unwrap();
        let order: Vec<_> = s.historical.iter().chain(&s.target).map(|r| r.id.as_str()).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(matches!(split_corpus(&[], 0.6), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(split_corpus(&[ir("a", 0, "", vec![])], 1.0), Err(CorpusError::InvalidProportion(_))));
    }

    fn arb_ir() -> impl Strategy<Value = CanonicalIR> {
        let payload = proptest::collection::vec(
            prop_oneof![Just("curl"), Just("alert"), Just("png"), Just("select"), Just("script"), Just("x")],
            1..5,
        )
        .prop_map(|w| w.join(" "));
        (proptest::collection::vec((any::<bool>(), payload), 0..6), any::<i32>()).prop_map(|(els, ts)| {
            let mut scr = 0;
            let mut cod = 0;
            let mut content = String::from("body");
            let rich_text = els
                .into_iter()
                .map(|(is_scr, p)| {
                    let el = if is_scr {
                        scr += 1;
                        RichTextElement::new(ElementKind::Scr, scr, p)
                    } else {
                        cod += 1;
                        RichTextElement::new(ElementKind::Code, cod, p)
                    };
                    content.push_str(&format!(" text {}", el.tag));
                    el
                })
                .collect();
            ir("p/q#1", i64::from(ts), &content, rich_text)
        })
    }

    proptest! {
        #[test]
        fn merge_is_idempotent_and_keeps_tag_bijection(r in arb_ir(), threshold in 0.3f64..=1.0) {
            let once = merge_similar_elements(&r, threshold);
            once.check_tags().unwrap();
            let twice = merge_similar_elements(&once, threshold);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn json_round_trip(r in arb_ir()) {
            let line = serde_json::to_string(&r).unwrap();
            let back: CanonicalIR = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
