use std::sync::LazyLock;

use regex::Regex;
use scraper::{ElementRef, Html, Node, Selector};

use super::{CanonicalIR, CorpusError, ElementKind, RawIssuePage, RichTextElement};

const IMAGE_EXTENSIONS: &[&str] = &[".png", ".jpg", ".jpeg", ".gif"];
const SKIPPED: &[&str] = &["script", "style", "noscript", "template", "svg", "head"];
const BLOCKS: &[&str] = &[
    "address", "article", "blockquote", "br", "dd", "div", "dl", "dt", "h1", "h2", "h3", "h4", "h5", "h6",
    "hr", "li", "ol", "p", "section", "table", "td", "th", "tr", "ul",
];

static ISSUE_URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"github\.com/([^/\s]+)/([^/\s]+)/(?:issues|pull)/([0-9]+)").unwrap());

fn sel(s: &str) -> Selector {
    Selector::parse(s).expect("static selector")
}

static TITLE_SELECTORS: LazyLock<Vec<Selector>> = LazyLock::new(|| {
    ["[data-testid=issue-title]", ".js-issue-title", "h1", "title"].into_iter().map(sel).collect()
});
static BODY_SELECTORS: LazyLock<Vec<Selector>> =
    LazyLock::new(|| [".comment-body", ".markdown-body", "body"].into_iter().map(sel).collect());
static TIME_SELECTOR: LazyLock<Selector> = LazyLock::new(|| sel("relative-time[datetime], time[datetime]"));

/// `https://github.com/o/r/issues/7` becomes `o/r#7`; other URLs are kept.
pub fn issue_id_from_url(url: &str) -> String {
    match ISSUE_URL.captures(url) {
        Some(c) => format!("{}/{}#{}", &c[1], &c[2], &c[3]),
        None => url.to_string(),
    }
}

fn is_image_url(url: &str) -> bool {
    let path = url.split(['?', '#']).next().unwrap_or("").to_ascii_lowercase();
    IMAGE_EXTENSIONS.iter().any(|ext| path.ends_with(ext))
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Extractor {
    text: String,
    elements: Vec<RichTextElement>,
    n_scr: usize,
    n_code: usize,
}

impl Extractor {
    fn push_element(&mut self, kind: ElementKind, payload: String) {
        let n = match kind {
            ElementKind::Scr => {
                self.n_scr += 1;
                self.n_scr
            }
            ElementKind::Code => {
                self.n_code += 1;
                self.n_code
            }
        };
        let el = RichTextElement::new(kind, n, payload);
        self.text.push(' ');
        self.text.push_str(&el.tag);
        self.text.push(' ');
        self.elements.push(el);
    }

    fn walk(&mut self, el: ElementRef) {
        for child in el.children() {
            match child.value() {
                Node::Text(t) => self.text.push_str(t),
                Node::Element(_) => {
                    let child = ElementRef::wrap(child).unwrap();
                    self.visit(child);
                }
                _ => {}
            }
        }
    }

    fn visit(&mut self, el: ElementRef) {
        let name = el.value().name();
        if SKIPPED.contains(&name) {
            return;
        }
        match name {
            "pre" | "code" => {
                let payload: String = el.text().collect();
                let payload = payload.trim();
                if !payload.is_empty() {
                    self.push_element(ElementKind::Code, payload.to_string());
                }
                return;
            }
            "img" => {
                if let Some(src) = el.value().attr("src").filter(|s| is_image_url(s)) {
                    self.push_element(ElementKind::Scr, src.to_string());
                }
                return;
            }
            "a" => {
                if let Some(href) = el.value().attr("href").filter(|h| is_image_url(h)) {
                    // the link stands for the screenshot; any wrapped <img> is the same picture
                    self.push_element(ElementKind::Scr, href.to_string());
                    return;
                }
            }
            _ => {}
        }
        let block = BLOCKS.contains(&name);
        if block {
            self.text.push(' ');
        }
        self.walk(el);
        if block {
            self.text.push(' ');
        }
    }
}

fn extract_title(doc: &Html) -> Option<String> {
    for s in TITLE_SELECTORS.iter() {
        for el in doc.select(s) {
            let raw: String = el.text().collect();
            let mut title = collapse(&raw);
            if el.value().name() == "title" {
                // "<issue title> · Issue #7 · owner/repo"
                if let Some((head, _)) = title.split_once(" · ") {
                    title = head.trim().to_string();
                }
            }
            if !title.is_empty() {
                return Some(title);
            }
        }
    }
    None
}

fn extract_created_at(doc: &Html) -> Option<i64> {
    doc.select(&TIME_SELECTOR)
        .filter_map(|el| el.value().attr("datetime"))
        .find_map(|dt| chrono::DateTime::parse_from_rfc3339(dt).ok())
        .map(|dt| dt.timestamp())
}

/// Turns a fetched issue page into a canonical record.
///
/// Screenshot links (`<a href>`/`<img src>` ending in an image extension)
/// become `[SCRn]` tags and `<pre>`/`<code>` blocks become `[CODEn]` tags, both
/// numbered in document order. Everything else is reduced to plain text.
pub fn parse_issue_page(page: &RawIssuePage) -> Result<CanonicalIR, CorpusError> {
    if page.html.trim().is_empty() {
        return Err(CorpusError::MalformedPage(page.source_url.clone()));
    }
    let doc = Html::parse_document(&page.html);
    let title = extract_title(&doc).ok_or_else(|| CorpusError::MalformedPage(page.source_url.clone()))?;
    let body = BODY_SELECTORS.iter().find_map(|s| doc.select(s).next());
    let mut ex = Extractor { text: String::new(), elements: Vec::new(), n_scr: 0, n_code: 0 };
    if let Some(body) = body {
        ex.walk(body);
    }
    Ok(CanonicalIR {
        id: issue_id_from_url(&page.source_url),
        title,
        content: collapse(&ex.text),
        rich_text: ex.elements,
        created_at: extract_created_at(&doc).unwrap_or(page.fetched_at),
        label_vul: None,
        cwe_id: None,
        cve_id: None,
        page_missing: false,
    })
}
