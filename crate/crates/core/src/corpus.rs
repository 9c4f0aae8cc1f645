//! Documents, annotations, tokenization and IOB conversion.
//!
//! All offsets are Unicode scalar indices into the document text, never
//! byte offsets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("document {doc}: annotation {annot} offsets [{start},{end}) outside text of {len} chars")]
    OffsetOutOfRange { doc: String, annot: String, start: usize, end: usize, len: usize },
    #[error("document {doc}: relation {source_id} -> {target} references a missing annotation")]
    DanglingRelation { doc: String, source_id: String, target: String },
    #[error("document {doc}: annotation {annot} text {found:?} does not match document slice {expected:?}")]
    SurfaceMismatch { doc: String, annot: String, expected: String, found: String },
    #[error("document {doc}: illegal relation {kind} from {source_id} to {target}: {reason}")]
    IllegalRelation { doc: String, kind: RelationKind, source_id: String, target: String, reason: &'static str },
    #[error("document {doc}: annotation {annot}: {reason}")]
    InvalidAnnotation { doc: String, annot: String, reason: &'static str },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("document {0} has empty text")]
    EmptyDocument(String),
    #[error("gold spans [{0},{1}) and [{2},{3}) overlap")]
    OverlappingGold(usize, usize, usize, usize),
    #[error("invalid IOB sequence: I at position {0} does not continue a span")]
    InvalidIob(usize),
    #[error("tag sequence has {tags} tags for {tokens} tokens")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("max_len must be at least 1")]
    InvalidMaxLen,
}

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersection_len(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.intersection_len(other) > 0
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { doc_id: doc_id.into(), text: text.into() }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Text of a character span. Out-of-range ends are clamped.
    pub fn slice(&self, span: Span) -> String {
        slice_chars(&self.text, span)
    }
}

pub fn slice_chars(text: &str, span: Span) -> String {
    text.chars().skip(span.start).take(span.len()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnnotationKind {
    Quantity,
    MeasuredEntity,
    MeasuredProperty,
    Qualifier,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 4] = [
        AnnotationKind::Quantity,
        AnnotationKind::MeasuredEntity,
        AnnotationKind::MeasuredProperty,
        AnnotationKind::Qualifier,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnnotationKind::Quantity => "Quantity",
            AnnotationKind::MeasuredEntity => "MeasuredEntity",
            AnnotationKind::MeasuredProperty => "MeasuredProperty",
            AnnotationKind::Qualifier => "Qualifier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AnnotationKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    HasQuantity,
    HasProperty,
    Qualifies,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] =
        [RelationKind::HasQuantity, RelationKind::HasProperty, RelationKind::Qualifies];

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationKind::HasQuantity => "HasQuantity",
            RelationKind::HasProperty => "HasProperty",
            RelationKind::Qualifies => "Qualifies",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        RelationKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether `source -> target` is a legal endpoint pair for this relation.
    pub fn allows(&self, source: AnnotationKind, target: AnnotationKind) -> bool {
        use AnnotationKind::*;
        match self {
            RelationKind::HasQuantity => {
                matches!(source, MeasuredProperty | MeasuredEntity) && target == Quantity
            }
            RelationKind::HasProperty => source == MeasuredEntity && target == MeasuredProperty,
            RelationKind::Qualifies => source == Qualifier && target != Qualifier,
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unit and value modifiers attached to a quantity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantityDetail {
    pub unit: Option<String>,
    pub mods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub annot_id: String,
    pub annot_set: u32,
    pub kind: AnnotationKind,
    pub span: Span,
    pub surface: String,
    /// Present only on quantities.
    pub payload: Option<QuantityDetail>,
    /// Unrecognised `other` keys, kept as canonical JSON text so they survive a round trip.
    pub extra: BTreeMap<String, String>,
}

impl Annotation {
    pub fn new(
        annot_id: impl Into<String>,
        annot_set: u32,
        kind: AnnotationKind,
        span: Span,
        surface: impl Into<String>,
    ) -> Self {
        let payload = (kind == AnnotationKind::Quantity).then(QuantityDetail::default);
        Annotation {
            annot_id: annot_id.into(),
            annot_set,
            kind,
            span,
            surface: surface.into(),
            payload,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub kind: RelationKind,
    pub source: String,
    pub target: String,
}

/// One document with its annotations and relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocEntry {
    pub doc: Document,
    pub annotations: Vec<Annotation>,
    pub relations: Vec<Relation>,
}

impl DocEntry {
    pub fn new(doc: Document) -> Self {
        DocEntry { doc, annotations: Vec::new(), relations: Vec::new() }
    }

    pub fn annotation(&self, id: &str) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.annot_id == id)
    }

    pub fn spans_of(&self, kind: AnnotationKind) -> Vec<Span> {
        self.annotations.iter().filter(|a| a.kind == kind).map(|a| a.span).collect()
    }

    /// Check every annotation and relation invariant against the document text.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let doc_id = &self.doc.doc_id;
        if self.doc.text.is_empty() {
            return Err(CorpusError::EmptyDocument(doc_id.clone()));
        }
        let chars: Vec<char> = self.doc.text.chars().collect();
        let mut kinds = BTreeMap::new();
        for a in &self.annotations {
            if kinds.insert(a.annot_id.as_str(), a.kind).is_some() {
                return Err(CorpusError::DuplicateId(alloc::format!("{doc_id}/{}", a.annot_id)));
            }
            if a.span.start >= a.span.end || a.span.end > chars.len() {
                return Err(CorpusError::OffsetOutOfRange {
                    doc: doc_id.clone(),
                    annot: a.annot_id.clone(),
                    start: a.span.start,
                    end: a.span.end,
                    len: chars.len(),
                });
            }
            let expected: String = chars[a.span.start..a.span.end].iter().collect();
            if expected != a.surface {
                return Err(CorpusError::SurfaceMismatch {
                    doc: doc_id.clone(),
                    annot: a.annot_id.clone(),
                    expected,
                    found: a.surface.clone(),
                });
            }
            if a.payload.is_some() && a.kind != AnnotationKind::Quantity {
                return Err(CorpusError::InvalidAnnotation {
                    doc: doc_id.clone(),
                    annot: a.annot_id.clone(),
                    reason: "unit/mods payload on a non-quantity annotation",
                });
            }
        }
        for r in &self.relations {
            let dangling = || CorpusError::DanglingRelation {
                doc: doc_id.clone(),
                source_id: r.source.clone(),
                target: r.target.clone(),
            };
            let source = *kinds.get(r.source.as_str()).ok_or_else(dangling)?;
            let target = *kinds.get(r.target.as_str()).ok_or_else(dangling)?;
            let illegal = |reason| CorpusError::IllegalRelation {
                doc: doc_id.clone(),
                kind: r.kind,
                source_id: r.source.clone(),
                target: r.target.clone(),
                reason,
            };
            if r.source == r.target {
                return Err(illegal("source equals target"));
            }
            if !r.kind.allows(source, target) {
                return Err(illegal("endpoint kinds not allowed for this relation"));
            }
        }
        Ok(())
    }
}

/// A set of documents, kept sorted by document id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<DocEntry>,
}

impl Corpus {
    pub fn new(mut docs: Vec<DocEntry>) -> Self {
        docs.sort_by(|a, b| a.doc.doc_id.cmp(&b.doc.doc_id));
        Corpus { docs }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocEntry> {
        match self.docs.binary_search_by(|d| d.doc.doc_id.as_str().cmp(doc_id)) {
            Ok(i) => Some(&self.docs[i]),
            // `docs` is public and may have been reordered in place.
            Err(_) => self.docs.iter().find(|d| d.doc.doc_id == doc_id),
        }
    }

    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.docs.iter().map(|d| d.doc.doc_id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = BTreeSet::new();
        for d in &self.docs {
            if !seen.insert(d.doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateId(d.doc.doc_id.clone()));
            }
            d.validate()?;
        }
        Ok(())
    }

    pub fn count(&self, kind: AnnotationKind) -> usize {
        self.docs.iter().flat_map(|d| &d.annotations).filter(|a| a.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub span: Span,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Split on whitespace, then break each chunk at punctuation and symbols.
///
/// Every non-alphanumeric character becomes a token of its own, except a `.`
/// or `,` sitting between two ASCII digits, which stays inside the number.
pub fn tokenize(doc: &Document) -> Vec<Token> {
    tokenize_str(&doc.text)
}

pub fn tokenize_str(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let n = chars.len();
    while i < n {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if is_word_char(c) {
            i += 1;
            while i < n {
                let c = chars[i];
                if is_word_char(c) {
                    i += 1;
                } else if (c == '.' || c == ',')
                    && chars[i - 1].is_ascii_digit()
                    && i + 1 < n
                    && chars[i + 1].is_ascii_digit()
                {
                    i += 1;
                } else {
                    break;
                }
            }
        } else {
            i += 1;
        }
        tokens.push(Token { surface: chars[start..i].iter().collect(), span: Span::new(start, i) });
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    O,
    B,
    I,
}

impl Tag {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B => 1,
            Tag::I => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        match i {
            0 => Some(Tag::O),
            1 => Some(Tag::B),
            2 => Some(Tag::I),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSequence {
    pub tags: Vec<Tag>,
}

impl TagSequence {
    pub fn new(tags: Vec<Tag>) -> Self {
        TagSequence { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Position of the first `I` that does not continue a `B`/`I` run.
    pub fn first_violation(&self) -> Option<usize> {
        let mut prev = Tag::O;
        for (i, &t) in self.tags.iter().enumerate() {
            if t == Tag::I && prev == Tag::O {
                return Some(i);
            }
            prev = t;
        }
        None
    }

    pub fn is_valid(&self) -> bool {
        self.first_violation().is_none()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.index()).collect()
    }

    pub fn from_indices(ix: &[usize]) -> Option<Self> {
        ix.iter().map(|&i| Tag::from_index(i)).collect::<Option<Vec<_>>>().map(TagSequence::new)
    }
}

/// Tag tokens from gold spans. A token touched by a gold span is labelled
/// with that span even when the span boundary falls inside the token.
pub fn spans_to_iob(tokens: &[Token], gold: &[Span]) -> Result<TagSequence, CorpusError> {
    let mut sorted: Vec<Span> = gold.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) {
            return Err(CorpusError::OverlappingGold(w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    let mut tags = alloc::vec![Tag::O; tokens.len()];
    for g in &sorted {
        let mut first = true;
        for (i, t) in tokens.iter().enumerate() {
            if t.span.overlaps(g) && tags[i] == Tag::O {
                if t.span.start < g.start || t.span.end > g.end {
                    log::warn!("gold span {g} cuts token {:?} {}; widening to token", t.surface, t.span);
                }
                tags[i] = if first { Tag::B } else { Tag::I };
                first = false;
            }
        }
    }
    Ok(TagSequence::new(tags))
}

/// Each maximal `B I*` run becomes one span from its first token start to its last token end.
pub fn iob_to_spans(tokens: &[Token], tags: &TagSequence) -> Result<Vec<Span>, CorpusError> {
    if tokens.len() != tags.len() {
        return Err(CorpusError::LengthMismatch { tags: tags.len(), tokens: tokens.len() });
    }
    if let Some(pos) = tags.first_violation() {
        return Err(CorpusError::InvalidIob(pos));
    }
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (t, &tag) in tokens.iter().zip(&tags.tags) {
        match tag {
            Tag::B => {
                spans.extend(open.take());
                open = Some(t.span);
            }
            Tag::I => {
                if let Some(s) = open.as_mut() {
                    s.end = t.span.end;
                }
            }
            Tag::O => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Result of cutting a token sequence to a maximum length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncation {
    pub tokens: Vec<Token>,
    pub truncated: bool,
    pub original_len: usize,
}

pub const DEFAULT_MAX_LEN: usize = 512;

/// Keep the first `max_len` tokens.
pub fn truncate(tokens: &[Token], max_len: usize) -> Result<Truncation, CorpusError> {
    if max_len == 0 {
        return Err(CorpusError::InvalidMaxLen);
    }
    let keep = tokens.len().min(max_len);
    Ok(Truncation {
        tokens: tokens[..keep].to_vec(),
        truncated: tokens.len() > max_len,
        original_len: tokens.len(),
    })
}

/// Surface form used by word vocabularies: lowercased, digits folded to `0`.
pub fn normalize_word(surface: &str) -> String {
    surface
        .chars()
        .flat_map(|c| c.to_lowercase())
        .map(|c| if c.is_ascii_digit() { '0' } else { c })
        .collect()
}

/// Token span covering a character span, or `None` if no token overlaps it.
pub fn char_span_to_tokens(tokens: &[Token], span: Span) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.span.overlaps(&span) {
            first.get_or_insert(i);
            last = i;
        }
    }
    first.map(|f| (f, last))
}

/// Seeded document-level split: roughly `fraction` of the documents go to the second corpus.
pub fn split_dev(corpus: &Corpus, fraction: f64, seed: u64) -> (Corpus, Corpus) {
    use rand::seq::SliceRandom;
    let n = corpus.len();
    let mut dev_n = libm::round(n as f64 * fraction) as usize;
    if n > 1 {
        dev_n = dev_n.clamp(1, n - 1);
    } else {
        dev_n = 0;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::netcore::rng(seed));
    let dev: BTreeSet<usize> = idx[..dev_n].iter().copied().collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, d) in corpus.docs.iter().enumerate() {
        if dev.contains(&i) {
            b.push(d.clone());
        } else {
            a.push(d.clone());
        }
    }
    (Corpus::new(a), Corpus::new(b))
}

pub fn annot_id_for(doc_id: &str, n: usize) -> String {
    let mut s = doc_id.to_string();
    s.push_str("-T");
    s.push_str(&alloc::format!("{n}"));
    s
}
