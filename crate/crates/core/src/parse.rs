//! Free-form model text to canonical answers.
//!
//! Every parser is total: arbitrary input yields a [`ParsedAnswer`], never a
//! panic. Extraction looks at the segment after the last `Final answer:`
//! line first and falls back to the whole text only when that segment holds
//! no candidate at all.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::{format_number, BoxKind, GeomBox, Point};

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ParsedAnswer {
    Boxes(Vec<GeomBox>),
    Count(u64),
    #[serde(rename = "option")]
    Choice(char),
    Null,
    Invalid(String),
}

impl ParsedAnswer {
    pub fn is_invalid(&self) -> bool {
        matches!(self, ParsedAnswer::Invalid(_))
    }

    fn invalid(reason: &str) -> Self {
        ParsedAnswer::Invalid(reason.to_string())
    }
}

/// Geometric family a box answer must have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFamily {
    Hbb,
    Obb,
    Either,
}

impl BoxFamily {
    pub fn admits(self, kind: BoxKind) -> bool {
        match self {
            BoxFamily::Either => true,
            BoxFamily::Hbb => kind == BoxKind::Hbb,
            BoxFamily::Obb => kind == BoxKind::Obb,
        }
    }
}

impl From<BoxKind> for BoxFamily {
    fn from(kind: BoxKind) -> Self {
        match kind {
            BoxKind::Hbb => BoxFamily::Hbb,
            BoxKind::Obb => BoxFamily::Obb,
        }
    }
}

/// What a local or final answer is expected to contain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerKind {
    Boxes(BoxFamily),
    Count,
    Choice(Vec<char>),
}

static FINAL_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[\s*#>_`]*final answer\s*[*_`]*\s*:[*_`]*").unwrap());

/// Text after the last line-initial `Final answer:` marker, or the whole
/// text when there is none.
pub fn extract_final_segment(text: &str) -> &str {
    match FINAL_MARKER.find_iter(text).last() {
        Some(m) => text[m.end()..].trim(),
        None => text,
    }
}

fn has_final_marker(text: &str) -> bool {
    FINAL_MARKER.is_match(text)
}

#[derive(Debug)]
enum Node {
    Num(f64),
    Group(Group),
}

#[derive(Debug, Default)]
struct Group {
    items: Vec<Node>,
    junk: bool,
}

impl Group {
    fn numbers(&self) -> Option<Vec<f64>> {
        if self.junk {
            return None;
        }
        self.items
            .iter()
            .map(|n| match n {
                Node::Num(v) => Some(*v),
                Node::Group(_) => None,
            })
            .collect()
    }

    fn children(&self) -> impl Iterator<Item = &Group> {
        self.items.iter().filter_map(|n| match n {
            Node::Group(g) => Some(g),
            Node::Num(_) => None,
        })
    }

    /// Four `[x, y]` pairs and nothing else.
    fn as_pair_quad(&self) -> Option<Vec<f64>> {
        if self.junk || self.items.len() != 4 {
            return None;
        }
        let mut out = Vec::with_capacity(8);
        for n in &self.items {
            match n {
                Node::Group(g) => match g.numbers() {
                    Some(v) if v.len() == 2 => out.extend(v),
                    _ => return None,
                },
                Node::Num(_) => return None,
            }
        }
        Some(out)
    }
}

/// Splits text into top-level bracket groups. `[` and `(` open, `]` and `)`
/// close; unmatched closers are ignored and unclosed groups dropped.
fn bracket_groups(text: &str) -> Vec<Group> {
    let bytes = text.as_bytes();
    let mut roots = Vec::new();
    let mut stack: Vec<Group> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'[' | b'(' if stack.len() < MAX_DEPTH => {
                stack.push(Group::default());
                i += 1;
            }
            b']' | b')' => {
                if let Some(g) = stack.pop() {
                    match stack.last_mut() {
                        Some(parent) => parent.items.push(Node::Group(g)),
                        None => roots.push(g),
                    }
                }
                i += 1;
            }
            b' ' | b'\t' | b'\n' | b'\r' | b',' | b';' => i += 1,
            _ => {
                let attached = i > 0 && bytes[i - 1].is_ascii_alphabetic();
                match scan_number(bytes, i) {
                    Some((v, end)) if !attached && !bytes.get(end).is_some_and(u8::is_ascii_alphabetic) => {
                        if let Some(top) = stack.last_mut() {
                            top.items.push(Node::Num(v));
                        }
                        i = end;
                    }
                    Some((_, end)) => {
                        if let Some(top) = stack.last_mut() {
                            top.junk = true;
                        }
                        i = end;
                    }
                    None => {
                        if let Some(top) = stack.last_mut() {
                            top.junk = true;
                        }
                        i += 1;
                    }
                }
            }
        }
    }
    roots
}

/// `[+-]?digits(.digits)?` starting at `i`; returns value and end offset.
fn scan_number(bytes: &[u8], start: usize) -> Option<(f64, usize)> {
    let mut i = start;
    if matches!(bytes.get(i), Some(b'+' | b'-')) {
        i += 1;
    }
    let digits_start = i;
    while bytes.get(i).is_some_and(u8::is_ascii_digit) {
        i += 1;
    }
    if i == digits_start {
        return None;
    }
    if bytes.get(i) == Some(&b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
        i += 1;
        while bytes.get(i).is_some_and(u8::is_ascii_digit) {
            i += 1;
        }
    }
    let text = std::str::from_utf8(&bytes[start..i]).ok()?;
    let v: f64 = text.parse().ok()?;
    v.is_finite().then_some((v, i))
}

#[derive(Default)]
struct BoxScan {
    valid: Vec<GeomBox>,
    candidates: usize,
    wrong_family: usize,
    degenerate: usize,
}

impl BoxScan {
    fn consider(&mut self, coords: Vec<f64>, expected: BoxFamily) {
        self.candidates += 1;
        let kind = if coords.len() == 4 { BoxKind::Hbb } else { BoxKind::Obb };
        if !expected.admits(kind) {
            self.wrong_family += 1;
            return;
        }
        match GeomBox::from_coords(&coords) {
            Ok(b) => self.valid.push(b),
            Err(_) => self.degenerate += 1,
        }
    }

    fn visit(&mut self, g: &Group, expected: BoxFamily) {
        if let Some(nums) = g.numbers() {
            if nums.len() == 4 || nums.len() == 8 {
                self.consider(nums, expected);
            } else if !nums.is_empty() && nums.len() != 2 {
                self.candidates += 1;
            }
            return;
        }
        if let Some(quad) = g.as_pair_quad() {
            self.consider(quad, expected);
            return;
        }
        for child in g.children() {
            self.visit(child, expected);
        }
    }

    fn into_answer(self) -> ParsedAnswer {
        if !self.valid.is_empty() {
            ParsedAnswer::Boxes(self.valid)
        } else if self.degenerate > 0 {
            ParsedAnswer::invalid("degenerate or misordered box")
        } else if self.wrong_family > 0 {
            ParsedAnswer::invalid("wrong format")
        } else {
            ParsedAnswer::invalid("no valid box")
        }
    }
}

fn scan_boxes(text: &str, expected: BoxFamily) -> BoxScan {
    let mut scan = BoxScan::default();
    for g in bracket_groups(text) {
        scan.visit(&g, expected);
    }
    scan
}

/// Bracketed numeric groups of 4 (HBB) or 8 (OBB) values, or four `[x, y]`
/// pairs. Misordered or degenerate boxes are rejected, never repaired; all
/// valid boxes are returned for downstream selection.
pub fn parse_boxes(text: &str, expected: BoxFamily) -> ParsedAnswer {
    let segment = extract_final_segment(text);
    let scan = scan_boxes(segment, expected);
    if scan.candidates == 0 && segment.len() != text.len() {
        return scan_boxes(text, expected).into_answer();
    }
    scan.into_answer()
}

/// Renders boxes as a bracketed list that [`parse_boxes`] reads back exactly.
pub fn render_boxes(boxes: &[GeomBox]) -> String {
    let parts: Vec<String> = boxes
        .iter()
        .map(|b| {
            let coords: Vec<String> = b.coords().iter().map(|&v| format_number(v)).collect();
            format!("[{}]", coords.join(", "))
        })
        .collect();
    format!("[{}]", parts.join(", "))
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?").unwrap());

enum CountScan {
    None,
    One(u64),
    Conflict,
    Bad(&'static str),
}

fn scan_count(text: &str) -> CountScan {
    let bytes = text.as_bytes();
    let mut seen = BTreeSet::new();
    for m in NUMBER.find_iter(text) {
        let before = m.start().checked_sub(1).map(|i| bytes[i]);
        let after = bytes.get(m.end()).copied();
        if before.is_some_and(|b| b.is_ascii_alphabetic() || b == b'_')
            || after.is_some_and(|b| b.is_ascii_alphabetic() || b == b'_')
        {
            continue;
        }
        if before == Some(b'-') {
            let sign_attached = m
                .start()
                .checked_sub(2)
                .map(|i| bytes[i])
                .is_some_and(|b| b.is_ascii_alphanumeric());
            if sign_attached {
                continue;
            }
            return CountScan::Bad("negative count");
        }
        let digits = m.as_str().replace(',', "");
        if digits.contains('.') {
            return CountScan::Bad("non-integer count");
        }
        match digits.parse::<u64>() {
            Ok(v) => {
                seen.insert(v);
            }
            Err(_) => return CountScan::Bad("count out of range"),
        }
    }
    match seen.len() {
        0 => CountScan::None,
        1 => CountScan::One(*seen.iter().next().unwrap()),
        _ => CountScan::Conflict,
    }
}

/// A single non-negative integer; repeats of the same value are allowed.
pub fn parse_count(text: &str) -> ParsedAnswer {
    let mut scans = vec![];
    if has_final_marker(text) {
        scans.push(scan_count(extract_final_segment(text)));
    }
    scans.push(scan_count(text));
    for scan in scans {
        match scan {
            CountScan::One(v) => return ParsedAnswer::Count(v),
            CountScan::Conflict => return ParsedAnswer::invalid("conflicting numbers"),
            CountScan::Bad(reason) => return ParsedAnswer::invalid(reason),
            CountScan::None => continue,
        }
    }
    ParsedAnswer::invalid("no count")
}

static OPTION_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:option|choice|answer\s+is|answer\s*:|answer\s+would\s+be)\s*[:\-]?\s*[(\[*]?\s*([a-z])\b").unwrap()
});
static LEADING_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[(\[*]*\s*([A-Za-z])\s*[).:\]*](?:\s|$)").unwrap());
static STANDALONE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").unwrap());

fn strip_decoration(s: &str) -> &str {
    s.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '*' | '_' | '`' | '"' | '\'' | '(' | ')' | '[' | ']' | '.' | ':' | ',' | ';' | '!')
    })
}

fn resolve(labels: impl IntoIterator<Item = char>, valid: &[char]) -> Option<ParsedAnswer> {
    let found: BTreeSet<char> = labels
        .into_iter()
        .map(|c| c.to_ascii_uppercase())
        .filter(|c| valid.contains(c))
        .collect();
    match found.len() {
        0 => None,
        1 => Some(ParsedAnswer::Choice(*found.iter().next().unwrap())),
        _ => Some(ParsedAnswer::invalid("conflicting options")),
    }
}

fn option_in(text: &str, valid: &[char]) -> Option<ParsedAnswer> {
    let bare = strip_decoration(text);
    let mut chars = bare.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        return resolve([c], valid).or_else(|| Some(ParsedAnswer::invalid("unknown option")));
    }
    if let Some(found) = resolve(
        OPTION_PHRASE.captures_iter(text).filter_map(|c| {
            let m = c.get(1).unwrap();
            let letter = m.as_str().chars().next().unwrap();
            // A lowercase letter starting a phrase ("is a red car") is prose.
            let prose = letter.is_lowercase()
                && text[m.end()..].trim_start().starts_with(char::is_alphabetic)
                && text[m.end()..].starts_with(char::is_whitespace);
            (!prose).then_some(letter)
        }),
        valid,
    ) {
        return Some(found);
    }
    if let Some(c) = LEADING_LABEL.captures(text) {
        if let Some(found) = resolve(c[1].chars(), valid) {
            return Some(found);
        }
    }
    let standalone = STANDALONE.captures_iter(text).filter_map(|c| {
        let m = c.get(1).unwrap();
        let letter = m.as_str().chars().next().unwrap();
        // "A" followed by a lowercase word reads as the article.
        let rest = &text[m.end()..];
        let next_word: String = rest
            .trim_start()
            .chars()
            .take_while(|c| c.is_alphabetic())
            .collect();
        let article = letter == 'A'
            && rest.starts_with(char::is_whitespace)
            && next_word.chars().next().is_some_and(char::is_lowercase)
            && !matches!(next_word.as_str(), "or" | "and" | "is");
        (!article).then_some(letter)
    });
    resolve(standalone, valid)
}

/// A single option label from `valid_labels`; several distinct labels or
/// none give `Invalid`.
pub fn parse_option(text: &str, valid_labels: &[char]) -> ParsedAnswer {
    let valid: Vec<char> = valid_labels.iter().map(char::to_ascii_uppercase).collect();
    if valid.is_empty() {
        return ParsedAnswer::invalid("no option labels");
    }
    if has_final_marker(text) {
        if let Some(found) = option_in(extract_final_segment(text), &valid) {
            return found;
        }
    }
    option_in(text, &valid).unwrap_or_else(|| ParsedAnswer::invalid("no option"))
}

fn collect_points(g: &Group, out: &mut Vec<Point>) {
    if let Some(nums) = g.numbers() {
        if nums.len() == 2 && nums.iter().all(|v| *v >= 0.0) {
            out.push(Point::new(nums[0], nums[1]));
        }
        return;
    }
    for child in g.children() {
        collect_points(child, out);
    }
}

/// `[x, y]` pairs from any bracket nesting, at most `cap` of them.
/// Malformed and negative pairs are dropped.
pub fn parse_points(text: &str, cap: usize) -> Vec<Point> {
    let mut out = Vec::new();
    for g in bracket_groups(extract_final_segment(text)) {
        collect_points(&g, &mut out);
    }
    if out.is_empty() && has_final_marker(text) {
        for g in bracket_groups(text) {
            collect_points(&g, &mut out);
        }
    }
    out.truncate(cap);
    out
}

static NULL_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bnull\b").unwrap());

fn is_null(text: &str) -> bool {
    strip_decoration(extract_final_segment(text)).eq_ignore_ascii_case("null")
}

/// Local inspection reply: `null` means the target is absent from the ROI.
pub fn parse_local_answer(text: &str, kind: &AnswerKind) -> ParsedAnswer {
    if is_null(text) {
        return ParsedAnswer::Null;
    }
    let parsed = parse_final(text, kind);
    if parsed.is_invalid() && NULL_WORD.is_match(extract_final_segment(text)) {
        return ParsedAnswer::Null;
    }
    parsed
}

/// Dispatches to the parser for `kind`.
pub fn parse_final(text: &str, kind: &AnswerKind) -> ParsedAnswer {
    match kind {
        AnswerKind::Boxes(family) => parse_boxes(text, *family),
        AnswerKind::Count => parse_count(text),
        AnswerKind::Choice(labels) => parse_option(text, labels),
    }
}
