//! Text-level SVG handling: sanitization, a deterministic lexer and token counts.
//!
//! Nothing in here parses SVG into a DOM. The sanitizer works on a flat stream
//! of markup items and re-serializes them, so malformed input survives as-is
//! apart from the cleaning rules.

use serde::{Deserialize, Serialize};
use std::fmt;

/// UTF-8 SVG markup.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SvgSource(String);

impl SvgSource {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<String> for SvgSource {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for SvgSource {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl fmt::Display for SvgSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which vocabulary produced a [`TokenSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vocab {
    /// The markup lexer in this module.
    SvgLexer,
    /// The restricted grammar of the toy policy.
    MiniGrammar,
}

impl Vocab {
    pub fn size(self) -> usize {
        match self {
            Vocab::SvgLexer => LEXER_VOCAB_SIZE,
            Vocab::MiniGrammar => crate::policy::VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("token id {id} at position {position} is outside vocabulary {vocab:?} (size {size})")]
pub struct TokenOutOfRange {
    pub id: u32,
    pub position: usize,
    pub vocab: Vocab,
    pub size: usize,
}

/// Ordered token ids tagged with their vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    vocab: Vocab,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab: Vocab) -> Result<Self, TokenOutOfRange> {
        let size = vocab.size();
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= size)
        {
            return Err(TokenOutOfRange {
                id,
                position,
                vocab,
                size,
            });
        }
        Ok(Self { tokens, vocab })
    }

    pub fn empty(vocab: Vocab) -> Self {
        Self {
            tokens: Vec::new(),
            vocab,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends `other`. Both sequences must come from the same vocabulary.
    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        assert_eq!(
            self.vocab, other.vocab,
            "cannot concatenate sequences from different vocabularies"
        );
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        TokenSequence {
            tokens,
            vocab: self.vocab,
        }
    }
}

pub fn token_length(seq: &TokenSequence) -> usize {
    seq.len()
}

/// Counts of what [`sanitize_svg`] removed or rewrote.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeReport {
    pub removed_headers: usize,
    pub removed_text_elements: usize,
    pub removed_base64_payloads: usize,
    pub decimals_rounded: usize,
}

impl SanitizeReport {
    fn absorb(&mut self, other: SanitizeReport) {
        self.removed_headers += other.removed_headers;
        self.removed_text_elements += other.removed_text_elements;
        self.removed_base64_payloads += other.removed_base64_payloads;
        self.decimals_rounded += other.decimals_rounded;
    }
}

/// `data:` attribute values longer than this are treated as embedded payloads.
pub const DATA_URI_MAX_LEN: usize = 64;

/// Decimal places kept on fractional numeric literals inside attribute values.
pub const KEPT_DECIMALS: usize = 2;

/// Cleans SVG markup:
///
/// - drops `<?xml ...?>` declarations and `<!DOCTYPE ...>`,
/// - drops attributes holding long `data:` payloads,
/// - rounds fractional numeric literals in attribute values to two decimals,
/// - drops whitespace-only text between tags and collapses whitespace inside tags,
/// - with `strip_text`, drops every `<text>` element and its content.
///
/// The result is a fixed point: sanitizing it again changes nothing.
pub fn sanitize_svg(src: &SvgSource, strip_text: bool) -> (SvgSource, SanitizeReport) {
    let mut report = SanitizeReport::default();
    let mut current = src.as_str().to_owned();
    // Removing items can splice stray characters into new markup; a handful of
    // passes always reaches the fixed point on realistic input.
    for _ in 0..16 {
        let (next, pass) = sanitize_pass(&current, strip_text);
        report.absorb(pass);
        if next == current {
            break;
        }
        current = next;
    }
    (SvgSource(current), report)
}

fn sanitize_pass(input: &str, strip_text: bool) -> (String, SanitizeReport) {
    let mut report = SanitizeReport::default();
    let items = scan_markup(input);
    let mut out = String::with_capacity(input.len());
    let mut text_depth = 0usize;

    for item in &items {
        if strip_text {
            match item {
                Item::StartTag(tag) if tag.name == "text" => {
                    if text_depth == 0 {
                        report.removed_text_elements += 1;
                    }
                    if !tag.self_closing {
                        text_depth += 1;
                    }
                    continue;
                }
                Item::EndTag(name) if text_depth > 0 && *name == "text" => {
                    text_depth -= 1;
                    continue;
                }
                _ if text_depth > 0 => continue,
                _ => {}
            }
        }
        match item {
            Item::Declaration | Item::Doctype => report.removed_headers += 1,
            Item::Text(t) => {
                if !t.chars().all(char::is_whitespace) {
                    out.push_str(t);
                }
            }
            Item::StartTag(tag) => write_tag(tag, &mut out, &mut report),
            Item::EndTag(name) => {
                out.push_str("</");
                out.push_str(name);
                out.push('>');
            }
            Item::Verbatim(raw) => out.push_str(raw),
        }
    }
    (out, report)
}

fn write_tag(tag: &StartTag<'_>, out: &mut String, report: &mut SanitizeReport) {
    out.push('<');
    out.push_str(tag.name);
    for attr in &tag.attrs {
        match attr.value {
            Some((quote, value)) => {
                if value.starts_with("data:") && value.len() > DATA_URI_MAX_LEN {
                    report.removed_base64_payloads += 1;
                    continue;
                }
                let (value, rounded) = round_decimals(value);
                report.decimals_rounded += rounded;
                out.push(' ');
                out.push_str(attr.name);
                out.push('=');
                out.push(quote);
                out.push_str(&value);
                out.push(quote);
            }
            None => {
                out.push(' ');
                out.push_str(attr.name);
            }
        }
    }
    out.push_str(if tag.self_closing { "/>" } else { ">" });
}

/// Rounds every plain decimal literal (`12.3456`, `-.125`) to [`KEPT_DECIMALS`]
/// places. Literals with exponents or more than one dot are left alone.
fn round_decimals(value: &str) -> (String, usize) {
    let bytes = value.as_bytes();
    let mut out = String::with_capacity(value.len());
    let mut rounded = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if !(c.is_ascii_digit() || c == b'.') {
            // Sign bytes are ASCII so slicing by one byte is safe here; other
            // characters are copied whole.
            let ch = value[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
            continue;
        }
        let start = i;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        let run = &value[start..i];
        let followed_by_exponent = i < bytes.len()
            && (bytes[i] == b'e' || bytes[i] == b'E')
            && bytes
                .get(i + 1)
                .is_some_and(|b| b.is_ascii_digit() || *b == b'-' || *b == b'+');
        let dots = run.bytes().filter(|&b| b == b'.').count();
        let frac_len = run.find('.').map(|d| run.len() - d - 1).unwrap_or(0);
        if dots != 1 || frac_len <= KEPT_DECIMALS || followed_by_exponent || run == "." {
            out.push_str(run);
            continue;
        }
        let negative = out.ends_with('-');
        let parsed: f64 = run.parse().unwrap_or(0.0);
        let mut formatted = format_rounded(parsed);
        if run.starts_with('.') && formatted.starts_with("0.") {
            formatted.remove(0);
        }
        if negative && formatted == "0" {
            out.pop();
        }
        out.push_str(&formatted);
        rounded += 1;
    }
    (out, rounded)
}

fn format_rounded(v: f64) -> String {
    let s = format!("{:.*}", KEPT_DECIMALS, v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() {
        "0".to_owned()
    } else {
        s.to_owned()
    }
}

// ---------------------------------------------------------------------------
// Markup scanner

#[derive(Debug)]
enum Item<'a> {
    Declaration,
    Doctype,
    StartTag(StartTag<'a>),
    EndTag(&'a str),
    Text(&'a str),
    /// Comments, processing instructions, CDATA and anything unparseable.
    Verbatim(&'a str),
}

#[derive(Debug)]
struct StartTag<'a> {
    name: &'a str,
    attrs: Vec<Attr<'a>>,
    self_closing: bool,
}

#[derive(Debug)]
struct Attr<'a> {
    name: &'a str,
    value: Option<(char, &'a str)>,
}

fn is_name_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b':' || c >= 0x80
}

fn is_name_char(c: u8) -> bool {
    is_name_start(c) || c.is_ascii_digit() || c == b'-' || c == b'.'
}

fn starts_with_ci(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.len() >= needle.len() && haystack[..needle.len()].eq_ignore_ascii_case(needle)
}

fn scan_markup(input: &str) -> Vec<Item<'_>> {
    let bytes = input.as_bytes();
    let mut items = Vec::new();
    let mut text_start = 0;
    let mut i = 0;

    macro_rules! flush_text {
        ($end:expr) => {
            if text_start < $end {
                items.push(Item::Text(&input[text_start..$end]));
            }
        };
    }

    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &bytes[i..];
        let parsed: Option<(Item<'_>, usize)> = if starts_with_ci(rest, b"<?xml")
            && rest
                .get(5)
                .is_some_and(|&c| c.is_ascii_whitespace() || c == b'?')
        {
            find(rest, b"?>").map(|e| (Item::Declaration, e + 2))
        } else if rest.starts_with(b"<!--") {
            find(&rest[4..], b"-->").map(|e| (Item::Verbatim(&input[i..i + e + 7]), e + 7))
        } else if rest.starts_with(b"<![CDATA[") {
            find(rest, b"]]>").map(|e| (Item::Verbatim(&input[i..i + e + 3]), e + 3))
        } else if rest.starts_with(b"<?") {
            find(rest, b"?>").map(|e| (Item::Verbatim(&input[i..i + e + 2]), e + 2))
        } else if starts_with_ci(rest, b"<!doctype") {
            doctype_end(rest).map(|e| (Item::Doctype, e))
        } else if rest.starts_with(b"</") && rest.get(2).is_some_and(|&c| is_name_start(c)) {
            let name_end = 2 + rest[2..].iter().take_while(|&&c| is_name_char(c)).count();
            let close = rest[name_end..].iter().position(|&c| c == b'>');
            match close {
                Some(p)
                    if rest[name_end..name_end + p]
                        .iter()
                        .all(|c| c.is_ascii_whitespace()) =>
                {
                    Some((Item::EndTag(&input[i + 2..i + name_end]), name_end + p + 1))
                }
                Some(_) => {
                    i += 1;
                    continue;
                }
                None => None,
            }
        } else if rest.get(1).is_some_and(|&c| is_name_start(c)) {
            match parse_start_tag(input, i) {
                TagScan::Tag(tag, len) => Some((Item::StartTag(tag), len)),
                TagScan::Eof => None,
                TagScan::Invalid => {
                    i += 1;
                    continue;
                }
            }
        } else {
            // A lone '<' is plain text.
            i += 1;
            continue;
        };

        match parsed {
            Some((item, len)) => {
                flush_text!(i);
                items.push(item);
                i += len;
                text_start = i;
            }
            None => {
                // Unterminated construct: everything from here on is passed through.
                flush_text!(i);
                items.push(Item::Verbatim(&input[i..]));
                return items;
            }
        }
    }
    flush_text!(bytes.len());
    items
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn doctype_end(rest: &[u8]) -> Option<usize> {
    let mut depth = 0i32;
    let mut quote: Option<u8> = None;
    for (k, &c) in rest.iter().enumerate() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                b'"' | b'\'' => quote = Some(c),
                b'[' => depth += 1,
                b']' => depth -= 1,
                b'>' if depth <= 0 => return Some(k + 1),
                _ => {}
            },
        }
    }
    None
}

enum TagScan<'a> {
    Tag(StartTag<'a>, usize),
    /// Input ended inside the tag.
    Eof,
    /// Not a tag after all; the `<` is text.
    Invalid,
}

fn parse_start_tag(input: &str, start: usize) -> TagScan<'_> {
    let bytes = input.as_bytes();
    let mut i = start + 1;
    let name_start = i;
    while i < bytes.len() && is_name_char(bytes[i]) {
        i += 1;
    }
    let name = &input[name_start..i];
    let mut attrs = Vec::new();
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let Some(&c) = bytes.get(i) else {
            return TagScan::Eof;
        };
        match c {
            b'>' => {
                return TagScan::Tag(
                    StartTag {
                        name,
                        attrs,
                        self_closing: false,
                    },
                    i + 1 - start,
                )
            }
            b'/' if i + 1 == bytes.len() => return TagScan::Eof,
            b'/' if bytes[i + 1] == b'>' => {
                return TagScan::Tag(
                    StartTag {
                        name,
                        attrs,
                        self_closing: true,
                    },
                    i + 2 - start,
                )
            }
            c if is_name_start(c) => {
                let attr_start = i;
                while i < bytes.len() && is_name_char(bytes[i]) {
                    i += 1;
                }
                let attr_name = &input[attr_start..i];
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                    j += 1;
                }
                if bytes.get(j) == Some(&b'=') {
                    j += 1;
                    while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                        j += 1;
                    }
                    let Some(&quote) = bytes.get(j) else {
                        return TagScan::Eof;
                    };
                    if quote != b'"' && quote != b'\'' {
                        return TagScan::Invalid;
                    }
                    let value_start = j + 1;
                    let Some(value_len) = bytes[value_start..].iter().position(|&c| c == quote)
                    else {
                        return TagScan::Eof;
                    };
                    let value = &input[value_start..value_start + value_len];
                    attrs.push(Attr {
                        name: attr_name,
                        value: Some((quote as char, value)),
                    });
                    i = value_start + value_len + 1;
                } else {
                    attrs.push(Attr {
                        name: attr_name,
                        value: None,
                    });
                }
            }
            _ => return TagScan::Invalid,
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer

/// Size of the lexer vocabulary. Structural delimiters occupy the first ids,
/// everything else is hashed into the remaining range.
pub const LEXER_VOCAB_SIZE: usize = 4096;

const DELIMITERS: [&str; 14] = [
    "<![CDATA[",
    "<!--",
    "-->",
    "]]>",
    "</",
    "/>",
    "<?",
    "?>",
    "<!",
    "<",
    ">",
    "=",
    "\"",
    "'",
];
const HASHED_BASE: u32 = 16;

/// Splits markup into delimiters, names, numeric literals and single
/// punctuation characters. Whitespace is dropped.
pub fn lex_svg(src: &SvgSource) -> TokenSequence {
    let s = src.as_str();
    let bytes = s.as_bytes();
    let mut tokens = Vec::new();
    // Open quote of the attribute value being lexed. Inside values, names are
    // letter runs only so path data like `M-1L3` splits into command and numbers.
    let mut quote: Option<u8> = None;
    let mut i = 0;
    'outer: while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        for (id, d) in DELIMITERS.iter().enumerate() {
            if bytes[i..].starts_with(d.as_bytes()) {
                if quote.is_some() && d.len() > 1 {
                    continue;
                }
                if c == b'"' || c == b'\'' {
                    quote = match quote {
                        None => Some(c),
                        Some(q) if q == c => None,
                        Some(q) => Some(q),
                    };
                }
                tokens.push(id as u32);
                i += d.len();
                continue 'outer;
            }
        }
        let prev_is_name = quote.is_none() && i > 0 && is_name_char(bytes[i - 1]);
        if let Some(len) = numeric_literal_len(&bytes[i..], prev_is_name) {
            tokens.push(hashed_id(b'n', &bytes[i..i + len]));
            i += len;
            continue;
        }
        let name_len = if quote.is_some() {
            bytes[i..]
                .iter()
                .take_while(|b| b.is_ascii_alphabetic())
                .count()
        } else if is_name_start(c) {
            bytes[i..].iter().take_while(|&&b| is_name_char(b)).count()
        } else {
            0
        };
        if name_len > 0 {
            tokens.push(hashed_id(b'w', &bytes[i..i + name_len]));
            i += name_len;
            continue;
        }
        let len = s[i..].chars().next().map(char::len_utf8).unwrap_or(1);
        tokens.push(hashed_id(b'p', &bytes[i..i + len]));
        i += len;
    }
    TokenSequence {
        tokens,
        vocab: Vocab::SvgLexer,
    }
}

fn numeric_literal_len(b: &[u8], prev_is_name: bool) -> Option<usize> {
    let mut i = 0;
    if matches!(b.first(), Some(b'-') | Some(b'+')) {
        if prev_is_name {
            return None;
        }
        i = 1;
    }
    let int_digits = b[i..].iter().take_while(|c| c.is_ascii_digit()).count();
    i += int_digits;
    let mut frac_digits = 0;
    if b.get(i) == Some(&b'.') {
        frac_digits = b[i + 1..].iter().take_while(|c| c.is_ascii_digit()).count();
        if frac_digits > 0 || int_digits > 0 {
            i += 1 + frac_digits;
        }
    }
    if int_digits == 0 && frac_digits == 0 {
        return None;
    }
    if matches!(b.get(i), Some(b'e') | Some(b'E')) {
        let mut j = i + 1;
        if matches!(b.get(j), Some(b'-') | Some(b'+')) {
            j += 1;
        }
        let exp = b[j.min(b.len())..]
            .iter()
            .take_while(|c| c.is_ascii_digit())
            .count();
        if exp > 0 {
            i = j + exp;
        }
    }
    Some(i)
}

fn hashed_id(class: u8, text: &[u8]) -> u32 {
    // FNV-1a, stable across platforms and runs.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in std::iter::once(&class).chain(text) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    HASHED_BASE + (h % (LEXER_VOCAB_SIZE as u64 - HASHED_BASE as u64)) as u32
}
