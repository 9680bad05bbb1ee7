//! Text utilities shared by grounding, agent memory and the runtime monitor:
//! citation-marker masking, sentence segmentation, numeric-token and quantity
//! extraction, content words and Markdown tables.
//!
//! Numeric consistency checks in hooks and grounding and the preservation
//! check in agent memory all go through [`numeric_tokens`] and [`quantities`],
//! so the three features agree on what a number is.

use serde::{Deserialize, Serialize};

use crate::prelude::*;

/// Byte ranges of `[ev:…]` markers (well-formed or not).
pub fn marker_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(pos) = text[from..].find("[ev:") {
        let start = from + pos;
        match text[start..].find(']') {
            Some(close) if close <= 32 => {
                spans.push((start, start + close + 1));
                from = start + close + 1;
            }
            _ => from = start + 4,
        }
    }
    spans
}

/// Rough token count: one token per four characters.
pub fn token_estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// A number together with its unit, located in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumericToken {
    pub value: String,
    pub unit: String,
    pub start: usize,
    pub end: usize,
}

impl NumericToken {
    /// Spacing-insensitive form used for set comparisons ("12 %" and "12%"
    /// are the same token).
    pub fn canonical(&self) -> String {
        let mut s = self.value.clone();
        s.push_str(&self.unit);
        s
    }
}

const UNITS: &[&str] = &[
    "mg/kg", "mg/ml", "µg/ml", "ng/ml", "µmol", "nmol", "-fold", "fold", "kDa", "µM", "uM", "nM", "pM", "mM", "mg",
    "µg", "ng", "kg", "ml", "mL", "bp", "kb", "Mb", "aa", "%", "×",
];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn char_before(text: &str, at: usize) -> Option<char> {
    text[..at].chars().next_back()
}

fn char_at(text: &str, at: usize) -> Option<char> {
    text[at..].chars().next()
}

fn match_unit(text: &str, at: usize) -> Option<&'static str> {
    let rest = &text[at..];
    UNITS.iter().copied().find(|unit| {
        rest.starts_with(unit)
            && (unit.ends_with(|c: char| !c.is_alphanumeric())
                || char_at(rest, unit.len()).map_or(true, |c| !is_word_char(c)))
    })
}

/// All numeric tokens outside citation markers.
///
/// Digits glued to letters (`TP53`, `CYP3A4`, `17p13`) belong to identifiers
/// and are skipped; a trailing recognised unit (`%`, `mg/kg`, `nM`, `-fold`,
/// …) is attached to the number.
pub fn numeric_tokens(text: &str) -> Vec<NumericToken> {
    let masked = marker_spans(text);
    let in_marker = |i: usize| masked.iter().any(|&(s, e)| i >= s && i < e);
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() || in_marker(i) {
            i += 1;
            continue;
        }
        let glued = char_before(text, i).is_some_and(|c| is_word_char(c) || c == '.');
        if glued {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                i += 1;
            }
            continue;
        }
        let mut start = i;
        if i > 0 && bytes[i - 1] == b'-' {
            let before = if i >= 2 { char_before(text, i - 1) } else { None };
            if before.map_or(true, |c| c.is_whitespace() || c == '(') {
                start = i - 1;
            }
        }
        let mut end = i;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        // Thousands separators: ",ddd" not followed by another digit.
        while end + 3 < bytes.len()
            && bytes[end] == b','
            && bytes[end + 1..end + 4].iter().all(u8::is_ascii_digit)
            && bytes.get(end + 4).map_or(true, |c| !c.is_ascii_digit())
        {
            end += 4;
        }
        if end + 1 < bytes.len() && bytes[end] == b'.' && bytes[end + 1].is_ascii_digit() {
            end += 1;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut j = end + 1;
            if j < bytes.len() && (bytes[j] == b'-' || bytes[j] == b'+') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                end = j;
            }
        }
        let value = text[start..end].to_owned();
        let (unit, token_end) = if let Some(unit) = match_unit(text, end) {
            (unit, end + unit.len())
        } else if bytes.get(end) == Some(&b' ') && end + 1 < bytes.len() {
            match match_unit(text, end + 1) {
                Some(unit) if unit != "-fold" && unit != "×" => (unit, end + 1 + unit.len()),
                _ => ("", end),
            }
        } else {
            ("", end)
        };
        if unit.is_empty() && char_at(text, end).is_some_and(|c| c.is_alphabetic() || c == '_') {
            // "12th", "3A4": an identifier, not a quantity.
            i = end;
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            continue;
        }
        out.push(NumericToken { value, unit: unit.to_owned(), start, end: token_end });
        i = token_end;
    }
    out
}

/// Canonical forms of every numeric token in `text`.
pub fn numeric_token_set(text: &str) -> BTreeSet<String> {
    numeric_tokens(text).iter().map(NumericToken::canonical).collect()
}

/// A number attached to an (entity, quantity-key) pair, e.g.
/// `TP53 … 80% of samples` → entity `TP53`, key `% sample`, value `80`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quantity {
    pub entity: String,
    pub key: String,
    pub value: String,
}

const CONNECTORS: &[&str] = &["of", "in", "the", "all", "across", "among", "distinct", "different", "separate"];

const NON_ENTITIES: &[&str] = &[
    "GWAS", "RNA", "DNA", "HPA", "GTEX", "TPM", "LOF", "PMID", "MGI", "IMPC", "QT", "TSA", "NHGRI", "EBI", "NCBI", "FDA",
    "EMA", "PHASE", "HIGH", "LOW", "RISK", "AND", "THE", "NOT", "NIH",
];

fn is_entity_word(word: &str) -> bool {
    let mut chars = word.chars();
    let Some(first) = chars.next() else { return false };
    if !first.is_ascii_uppercase() || word.len() < 2 {
        return false;
    }
    if !word.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '-') {
        return false;
    }
    let has_digit = word.chars().any(|c| c.is_ascii_digit());
    (has_digit || word.len() >= 3) && !NON_ENTITIES.contains(&word)
}

fn sentence_start_before(text: &str, at: usize) -> usize {
    let head = &text[..at];
    let mut best = 0;
    for pat in [". ", "! ", "? ", "\n"] {
        if let Some(p) = head.rfind(pat) {
            best = best.max(p + pat.len());
        }
    }
    best
}

fn singular(word: &str) -> String {
    let lower = word.to_lowercase();
    if lower.len() > 3 && lower.ends_with('s') && !lower.ends_with("ss") {
        lower[..lower.len() - 1].to_owned()
    } else {
        lower
    }
}

/// Every numeric token that carries a quantity key.
pub fn quantities(text: &str) -> Vec<Quantity> {
    let mut out = Vec::new();
    for token in numeric_tokens(text) {
        let mut noun = None;
        for word in text[token.end..].split_whitespace().take(4) {
            let cleaned: &str = word.trim_matches(|c: char| !c.is_alphanumeric());
            if cleaned.is_empty() {
                break;
            }
            let lower = cleaned.to_lowercase();
            if CONNECTORS.contains(&lower.as_str()) {
                continue;
            }
            if cleaned.chars().all(char::is_alphabetic) && cleaned.len() >= 3 {
                noun = Some(singular(cleaned));
            }
            break;
        }
        let key = match (&token.unit[..], noun) {
            ("", None) => continue,
            (unit, None) => unit.to_owned(),
            ("", Some(n)) => n,
            (unit, Some(n)) => format!("{unit} {n}"),
        };
        let sentence = &text[sentence_start_before(text, token.start)..token.start];
        let entity = sentence
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
            .filter(|w| is_entity_word(w))
            .last()
            .unwrap_or("")
            .to_owned();
        out.push(Quantity { entity, key, value: token.value });
    }
    out
}

/// Two quantities describe the same thing when keys match and entities match,
/// an absent entity matching anything.
pub fn same_subject(a: &Quantity, b: &Quantity) -> bool {
    a.key == b.key && (a.entity.is_empty() || b.entity.is_empty() || a.entity == b.entity)
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "that", "this", "from", "are", "was", "were", "been", "has", "have", "had", "its",
    "into", "onto", "than", "then", "there", "their", "these", "those", "which", "while", "also", "such", "may",
    "might", "can", "could", "would", "should", "not", "but", "all", "any", "each", "per", "via", "between", "both",
    "within", "across", "over", "under", "more", "most", "less", "other", "some", "our", "out", "who", "whom", "whose",
    "what", "when", "where", "why", "how", "does", "did", "being", "upon", "about", "after", "before", "because",
    "including", "include", "includes", "reported", "observed", "shows", "show", "shown",
];

/// Lowercase content words (length ≥ 3, not stopwords, not pure numbers),
/// citation markers excluded.
pub fn content_words(text: &str) -> BTreeSet<String> {
    let stripped = strip_markers(text);
    stripped
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(|w| w.trim_matches('-').to_lowercase())
        .filter(|w| w.chars().count() >= 3)
        .filter(|w| !w.chars().all(|c| c.is_ascii_digit() || c == '.'))
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// `text` with every citation marker removed.
pub fn strip_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (s, e) in marker_spans(text) {
        out.push_str(&text[last..s]);
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

/// Whitespace-separated words that carry at least one alphanumeric character,
/// markers excluded.
pub fn word_count(text: &str) -> usize {
    strip_markers(text).split_whitespace().filter(|w| w.chars().any(char::is_alphanumeric)).count()
}

/// Abbreviations whose trailing period does not end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "e.g", "i.e", "al", "vs", "fig", "figs", "approx", "cf", "dr", "no", "ca", "resp", "incl", "sp", "spp", "ref",
    "refs", "vol", "mr", "ms", "st", "nos",
];

fn ends_with_abbreviation(text: &str, dot: usize) -> bool {
    let head = &text[..dot];
    let word_start = head.rfind(|c: char| c.is_whitespace() || c == '(').map_or(0, |p| p + 1);
    let word = head[word_start..].to_lowercase();
    if word.is_empty() {
        return false;
    }
    if word.chars().count() == 1 && word.chars().all(char::is_alphabetic) {
        return true;
    }
    ABBREVIATIONS.contains(&word.as_str())
}

/// Kind of a Markdown block line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Blank,
    Heading,
    Table,
    Comment,
    ListItem,
    Text,
}

pub fn classify_line(line: &str) -> LineKind {
    let t = line.trim_start();
    if t.trim().is_empty() {
        LineKind::Blank
    } else if t.starts_with('#') {
        LineKind::Heading
    } else if t.starts_with('|') {
        LineKind::Table
    } else if t.starts_with("<!--") {
        LineKind::Comment
    } else if list_prefix_len(t).is_some() {
        LineKind::ListItem
    } else {
        LineKind::Text
    }
}

fn list_prefix_len(t: &str) -> Option<usize> {
    if t.starts_with("- ") || t.starts_with("* ") || t.starts_with("+ ") {
        return Some(2);
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && (t[digits..].starts_with(". ") || t[digits..].starts_with(") ")) {
        return Some(digits + 2);
    }
    None
}

/// Prose blocks as byte ranges: paragraphs (consecutive text lines) and list
/// items with their bullet stripped. Headings, tables and comments are skipped.
pub fn prose_blocks(text: &str) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let line = raw.trim_end_matches(['\n', '\r']);
        let line_start = offset;
        offset += raw.len();
        let kind = classify_line(line);
        match kind {
            LineKind::Text => {
                let lead = line.len() - line.trim_start().len();
                let end = line_start + line.trim_end().len();
                current = Some(match current {
                    Some((s, _)) => (s, end),
                    None => (line_start + lead, end),
                });
            }
            _ => {
                if let Some(block) = current.take() {
                    blocks.push(block);
                }
                if kind == LineKind::ListItem {
                    let lead = line.len() - line.trim_start().len();
                    let prefix = list_prefix_len(line.trim_start()).unwrap_or(0);
                    let start = line_start + lead + prefix;
                    let end = line_start + line.trim_end().len();
                    if end > start {
                        blocks.push((start, end));
                    }
                }
            }
        }
    }
    if let Some(block) = current {
        blocks.push(block);
    }
    blocks
}

/// Sentence spans inside the prose blocks of `text`.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace or the end of the
/// block, unless the period closes a listed abbreviation or a single-letter
/// initial. Citation markers directly after the terminator stay with the
/// sentence they follow.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for (bstart, bend) in prose_blocks(text) {
        let block = &text[bstart..bend];
        let mut start = 0;
        let mut iter = block.char_indices().peekable();
        while let Some((i, c)) = iter.next() {
            if !matches!(c, '.' | '!' | '?') {
                continue;
            }
            let after = i + c.len_utf8();
            let next = char_at(block, after.min(block.len()));
            let boundary = next.map_or(true, char::is_whitespace);
            if !boundary || (c == '.' && ends_with_abbreviation(block, i)) {
                continue;
            }
            let mut end = after;
            loop {
                let rest = &block[end..];
                let trimmed = rest.trim_start_matches([' ', '\t']);
                if trimmed.starts_with("[ev:") {
                    if let Some(close) = trimmed.find(']') {
                        end += (rest.len() - trimmed.len()) + close + 1;
                        continue;
                    }
                }
                break;
            }
            push_trimmed(&mut spans, block, bstart, start, end);
            start = end;
            while let Some(&(j, _)) = iter.peek() {
                if j < end {
                    iter.next();
                } else {
                    break;
                }
            }
        }
        push_trimmed(&mut spans, block, bstart, start, block.len());
    }
    spans
}

fn push_trimmed(spans: &mut Vec<(usize, usize)>, block: &str, base: usize, start: usize, end: usize) {
    let piece = &block[start..end];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed_len = piece.trim().len();
    if trimmed_len > 0 {
        spans.push((base + start + lead, base + start + lead + trimmed_len));
    }
}

/// A Markdown table; the header row is `rows[0]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn cells(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().flatten().map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str("| ");
            out.push_str(&row.join(" | "));
            out.push_str(" |\n");
            if i == 0 {
                out.push('|');
                for _ in row {
                    out.push_str(" --- |");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Markdown tables in `text`, separator rows dropped.
pub fn parse_tables(text: &str) -> Vec<Table> {
    let mut tables = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('|') {
            let inner = t.trim_start_matches('|');
            let inner = inner.strip_suffix('|').unwrap_or(inner);
            let cells: Vec<String> = inner.split('|').map(|c| c.trim().to_owned()).collect();
            let separator = cells.iter().all(|c| !c.is_empty() && c.chars().all(|ch| matches!(ch, '-' | ':' | ' ')));
            if !separator {
                rows.push(cells);
            }
        } else if !rows.is_empty() {
            tables.push(Table { rows: core::mem::take(&mut rows) });
        }
    }
    if !rows.is_empty() {
        tables.push(Table { rows });
    }
    tables
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canon(text: &str) -> Vec<String> {
        numeric_tokens(text).iter().map(NumericToken::canonical).collect()
    }

    #[test]
    fn numbers_with_units() {
        assert_eq!(canon("QT prolongation in 12% of patients"), ["12%"]);
        assert_eq!(canon("dosed at 3.5 mg/kg for 28 days"), ["3.5mg/kg", "28"]);
        assert_eq!(canon("IC50 of 40 nM; 2-fold change; p = 5e-8"), ["40nM", "2-fold", "5e-8"]);
        assert_eq!(canon("1,234 carriers and 1,2 items"), ["1,234", "1", "2"]);
        assert_eq!(canon("shift of -1.5 units"), ["-1.5"]);
    }

    #[test]
    fn identifiers_and_markers_are_not_numbers() {
        assert!(canon("TP53 and CYP3A4 on 17p13.1 [ev:12]").is_empty());
        assert!(canon("the 12th exon").is_empty());
        assert_eq!(canon("range 10-20 [ev:3][ev:4]"), ["10", "20"]);
    }

    #[test]
    fn quantities_carry_entity_and_key() {
        let q = quantities("TP53 is expressed in 12 tissues.");
        assert_eq!(q, [Quantity { entity: "TP53".into(), key: "tissue".into(), value: "12".into() }]);
        let q = quantities("expressed in 80% of samples");
        assert_eq!(q[0].key, "% sample");
        assert_eq!(q[0].entity, "");
        assert!(quantities("year 2019.").is_empty() || quantities("year 2019.")[0].key != "");
    }

    #[test]
    fn sentences_respect_abbreviations_and_markers() {
        let body = "Loss of function is tolerated, e.g. in carriers. [ev:1] Second sentence here [ev:2]!\nThird line wraps\nacross lines.";
        let spans = sentence_spans(body);
        let texts: Vec<&str> = spans.iter().map(|&(s, e)| &body[s..e]).collect();
        assert_eq!(
            texts,
            [
                "Loss of function is tolerated, e.g. in carriers. [ev:1]",
                "Second sentence here [ev:2]!",
                "Third line wraps\nacross lines."
            ]
        );
    }

    #[test]
    fn headings_tables_and_bullets() {
        let body = "## Heading\n| a | b |\n|---|---|\n| 1 | 2 |\n- Item one is a sentence.\n<!-- evidence:clinical -->\nPlain.";
        let texts: Vec<&str> = sentence_spans(body).iter().map(|&(s, e)| &body[s..e]).collect();
        assert_eq!(texts, ["Item one is a sentence.", "Plain."]);
        let tables = parse_tables(body);
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].rows, [vec!["a", "b"], vec!["1", "2"]]);
    }

    #[test]
    fn decimals_do_not_split_sentences() {
        let body = "The ratio was 1.5 in liver. Next one.";
        assert_eq!(sentence_spans(body).len(), 2);
    }

    #[test]
    fn content_words_drop_stopwords_and_numbers() {
        let words = content_words("The TP53 gene was expressed in 12 tissues [ev:3].");
        assert!(words.contains("tp53"));
        assert!(words.contains("tissues"));
        assert!(!words.contains("the"));
        assert!(!words.contains("12"));
        assert!(!words.contains("ev"));
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(token_estimate(""), 0);
        assert_eq!(token_estimate("abcde"), 2);
    }
}
