//! Corpus directories: one annotation TSV plus a `<docId>.txt` file per document.
//!
//! Columns: `docId annotSet annotType startOffset endOffset annotId text other`.
//! `other` is a JSON object with optional `unit`, `mods` and relation keys
//! (`HasQuantity`, `HasProperty`, `Qualifies`) on the source annotation. A
//! relation value is an id, or a list of ids when there are several targets.
//! Any other key is kept verbatim. Keys are written sorted.
//!
//! Tabs, newlines and backslashes in the `text` column are backslash-escaped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use measx_core::corpus::{Annotation, AnnotationKind, Corpus, CorpusError, DocEntry, Document, QuantityDetail, Relation, RelationKind, Span};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.tsv";
pub const HEADER: [&str; 8] = ["docId", "annotSet", "annotType", "startOffset", "endOffset", "annotId", "text", "other"];

/// Resolve a corpus argument to its TSV file: a directory means `<dir>/annotations.tsv`.
pub fn tsv_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::ParseError { line, msg: msg.into() }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String, CorpusError> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(parse_err(line, format!("bad escape \\{}", other.map(String::from).unwrap_or_default()))),
        }
    }
    Ok(out)
}

fn valid_doc_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && !id.contains(['/', '\\', '\t', '\n', '\r'])
}

/// Parse TSV text against already-loaded documents.
pub fn parse_tsv(text: &str, docs: Vec<Document>) -> Result<Corpus, CorpusError> {
    let mut entries: BTreeMap<String, DocEntry> = docs.into_iter().map(|d| (d.doc_id.clone(), DocEntry::new(d))).collect();
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r').split('\t').eq(HEADER) => {}
        Some((_, "")) | None => {}
        Some(_) => return Err(parse_err(1, format!("header must be {}", HEADER.join("\\t")))),
    }
    // Relations are collected per document and attached after all rows are read.
    let mut relations: BTreeMap<String, Vec<Relation>> = BTreeMap::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != HEADER.len() {
            return Err(parse_err(line, format!("expected {} columns, found {}", HEADER.len(), cols.len())));
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| parse_err(line, format!("{what} {s:?} is not a non-negative integer")));
        let doc_id = cols[0];
        let annot_set = cols[1].parse::<u32>().map_err(|_| parse_err(line, format!("annotSet {:?} is not an integer", cols[1])))?;
        let kind = AnnotationKind::parse(cols[2]).ok_or_else(|| parse_err(line, format!("unknown annotType {:?}", cols[2])))?;
        let span = Span { start: int(cols[3], "startOffset")?, end: int(cols[4], "endOffset")? };
        let annot_id = cols[5];
        if annot_id.is_empty() {
            return Err(parse_err(line, "empty annotId"));
        }
        let surface = unescape(cols[6], line)?;
        let entry = entries
            .get_mut(doc_id)
            .ok_or_else(|| parse_err(line, format!("no text file for document {doc_id:?}")))?;
        let mut a = Annotation::new(annot_id, annot_set, kind, span, surface);
        let other = cols[7].trim();
        let obj: Map<String, Value> = if other.is_empty() {
            Map::new()
        } else {
            match serde_json::from_str::<Value>(other) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(parse_err(line, "other must be a JSON object")),
                Err(e) => return Err(parse_err(line, format!("other is not valid JSON: {e}"))),
            }
        };
        for (key, value) in obj {
            if let Some(rk) = RelationKind::parse(&key) {
                let targets: Vec<String> = match value {
                    Value::String(s) => vec![s],
                    Value::Array(v) => v
                        .into_iter()
                        .map(|t| match t {
                            Value::String(s) => Ok(s),
                            _ => Err(parse_err(line, format!("{key} targets must be strings"))),
                        })
                        .collect::<Result<_, _>>()?,
                    _ => return Err(parse_err(line, format!("{key} must be a string or a list of strings"))),
                };
                let rels = relations.entry(doc_id.to_string()).or_default();
                rels.extend(targets.into_iter().map(|target| Relation { kind: rk, source: annot_id.to_string(), target }));
                continue;
            }
            match key.as_str() {
                "unit" | "mods" => {
                    let p = a.payload.get_or_insert_with(QuantityDetail::default);
                    if key == "unit" {
                        match value {
                            Value::String(s) => p.unit = Some(s),
                            Value::Null => {}
                            _ => return Err(parse_err(line, "unit must be a string")),
                        }
                    } else {
                        let Value::Array(v) = value else {
                            return Err(parse_err(line, "mods must be a list of strings"));
                        };
                        for m in v {
                            match m {
                                Value::String(s) => p.mods.push(s),
                                _ => return Err(parse_err(line, "mods must be a list of strings")),
                            }
                        }
                    }
                }
                _ => {
                    a.extra.insert(key, value.to_string());
                }
            }
        }
        entry.annotations.push(a);
    }
    for (doc_id, mut rels) in relations {
        rels.sort();
        entries.get_mut(&doc_id).expect("relations only recorded for known documents").relations = rels;
    }
    let corpus = Corpus::new(entries.into_values().collect());
    corpus.validate()?;
    Ok(corpus)
}

fn other_json(a: &Annotation, relations: &[&Relation]) -> String {
    let mut m = Map::new();
    for (k, v) in &a.extra {
        m.insert(k.clone(), serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())));
    }
    if let Some(p) = &a.payload {
        if let Some(u) = &p.unit {
            m.insert("unit".into(), Value::String(u.clone()));
        }
        if !p.mods.is_empty() {
            m.insert("mods".into(), Value::Array(p.mods.iter().cloned().map(Value::String).collect()));
        }
    }
    for kind in RelationKind::ALL {
        let targets: Vec<Value> =
            relations.iter().filter(|r| r.kind == kind).map(|r| Value::String(r.target.clone())).collect();
        match targets.len() {
            0 => {}
            1 => {
                m.insert(kind.as_str().into(), targets.into_iter().next().unwrap());
            }
            _ => {
                m.insert(kind.as_str().into(), Value::Array(targets));
            }
        }
    }
    // serde_json's default map is ordered, so this is sorted-key output.
    Value::Object(m).to_string()
}

/// Render the annotation table for a corpus.
pub fn render_tsv(corpus: &Corpus) -> String {
    let mut out = HEADER.join("\t");
    out.push('\n');
    for d in &corpus.docs {
        for a in &d.annotations {
            let rels: Vec<&Relation> = d.relations.iter().filter(|r| r.source == a.annot_id).collect();
            let row = [
                d.doc.doc_id.clone(),
                a.annot_set.to_string(),
                a.kind.as_str().to_string(),
                a.span.start.to_string(),
                a.span.end.to_string(),
                a.annot_id.clone(),
                escape(&a.surface),
                other_json(a, &rels),
            ];
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
    }
    out
}

/// Load a corpus from a directory (or its TSV path); every `<docId>.txt` beside the TSV is a document.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let tsv = tsv_path(path);
    let dir = tsv.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    if !tsv.exists() {
        return Err(Error::io(&tsv, std::io::Error::new(std::io::ErrorKind::NotFound, "corpus not found")));
    }
    let mut docs = Vec::new();
    let listing = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut names: Vec<PathBuf> = Vec::new();
    for item in listing {
        let p = item.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|e| e == "txt") && p.is_file() {
            names.push(p);
        }
    }
    names.sort();
    for p in names {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        docs.push(Document::new(id, text));
    }
    let text = fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
    parse_tsv(&text, docs).map_err(|e| Error::corpus(&tsv, e))
}

/// Write the TSV to `path` (a directory gets `annotations.tsv`) with the document texts beside it.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<PathBuf> {
    let tsv = if path.extension().is_some_and(|e| e == "tsv") { path.to_path_buf() } else { path.join(ANNOTATIONS_FILE) };
    let dir = tsv.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for d in &corpus.docs {
        if !valid_doc_id(&d.doc.doc_id) {
            return Err(Error::Data(format!("document id {:?} cannot be used as a file name", d.doc.doc_id)));
        }
        let p = dir.join(format!("{}.txt", d.doc.doc_id));
        fs::write(&p, &d.doc.text).map_err(|e| Error::io(&p, e))?;
    }
    fs::write(&tsv, render_tsv(corpus)).map_err(|e| Error::io(&tsv, e))?;
    Ok(tsv)
}
