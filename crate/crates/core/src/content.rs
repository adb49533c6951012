//! Reference materials: paragraph-aware chunking and keyword-overlap retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::text::normalize_tokens;

/// Upper bound on words per chunk.
pub const MAX_CHUNK_WORDS: usize = 200;

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("material body is empty")]
    EmptyBody,
    #[error("material `{0}` already exists")]
    DuplicateMaterial(String),
    #[error("reading materials: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Chunk {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Material {
    pub material_id: String,
    pub title: String,
    pub body: String,
    pub chunks: Vec<Chunk>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub material_id: String,
    pub chunk: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ContentStore {
    materials: BTreeMap<String, Material>,
    tokens: BTreeMap<(String, usize), BTreeSet<String>>,
}

impl ContentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `.txt`/`.md` file in `dir`; the file stem is the material id.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ContentError> {
        let mut store = Self::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(p.extension().and_then(|e| e.to_str()), Some("txt") | Some("md"))
            })
            .collect();
        paths.sort();
        for path in paths {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = std::fs::read_to_string(&path)?;
            store.ingest_with_id(stem, stem, &body)?;
        }
        Ok(store)
    }

    /// Ingests a material under an id derived from its title.
    pub fn ingest(&mut self, title: &str, body: &str) -> Result<String, ContentError> {
        let base = slug(title);
        let mut id = base.clone();
        let mut n = 2;
        while self.materials.contains_key(&id) {
            id = format!("{base}-{n}");
            n += 1;
        }
        self.ingest_with_id(&id, title, body)?;
        Ok(id)
    }

    pub fn ingest_with_id(&mut self, id: &str, title: &str, body: &str) -> Result<(), ContentError> {
        if self.materials.contains_key(id) {
            return Err(ContentError::DuplicateMaterial(id.to_string()));
        }
        let chunks: Vec<Chunk> = chunk_body(body)
            .into_iter()
            .enumerate()
            .map(|(index, text)| Chunk { index, text })
            .collect();
        if chunks.is_empty() {
            return Err(ContentError::EmptyBody);
        }
        for chunk in &chunks {
            let tokens = normalize_tokens(&chunk.text).into_iter().collect();
            self.tokens.insert((id.to_string(), chunk.index), tokens);
        }
        self.materials.insert(
            id.to_string(),
            Material {
                material_id: id.to_string(),
                title: title.to_string(),
                body: body.to_string(),
                chunks,
            },
        );
        Ok(())
    }

    pub fn material(&self, id: &str) -> Option<&Material> {
        self.materials.get(id)
    }

    pub fn materials(&self) -> impl Iterator<Item = &Material> {
        self.materials.values()
    }

    pub fn chunk_text(&self, material_id: &str, index: usize) -> Option<&str> {
        self.materials
            .get(material_id)?
            .chunks
            .get(index)
            .map(|c| c.text.as_str())
    }

    /// Top-`k` chunks over the whole corpus.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<Hit> {
        self.rank(query, k, |_| true)
    }

    /// Top-`k` chunks restricted to the given materials.
    pub fn retrieve_from(&self, material_ids: &[String], query: &str, k: usize) -> Vec<Hit> {
        self.rank(query, k, |id| material_ids.iter().any(|m| m == id))
    }

    fn rank(&self, query: &str, k: usize, include: impl Fn(&str) -> bool) -> Vec<Hit> {
        let query: BTreeSet<String> = normalize_tokens(query).into_iter().collect();
        if k == 0 || query.is_empty() {
            return Vec::new();
        }
        let total = query.len();
        let mut scored: Vec<(usize, &str, usize)> = self
            .tokens
            .iter()
            .filter(|((id, _), _)| include(id))
            .map(|((id, index), tokens)| (query.intersection(tokens).count(), id.as_str(), *index))
            .filter(|(hits, _, _)| *hits > 0)
            .collect();
        // Same denominator everywhere, so ordering by hit count is exact.
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        scored
            .into_iter()
            .take(k)
            .map(|(hits, id, chunk)| Hit {
                material_id: id.to_string(),
                chunk,
                score: hits as f64 / total as f64,
            })
            .collect()
    }
}

fn slug(title: &str) -> String {
    let mut out = String::new();
    for c in title.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    let trimmed = out.trim_end_matches('-');
    if trimmed.is_empty() {
        "material".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Splits text into chunks of at most [`MAX_CHUNK_WORDS`] words: one per
/// paragraph, long paragraphs packed by sentence, over-long sentences hard-split.
pub fn chunk_body(body: &str) -> Vec<String> {
    let mut chunks = Vec::new();
    for paragraph in paragraphs(body) {
        let words: Vec<&str> = paragraph.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        if words.len() <= MAX_CHUNK_WORDS {
            chunks.push(words.join(" "));
            continue;
        }
        let mut current: Vec<&str> = Vec::new();
        for sentence in sentences(&words) {
            if sentence.len() > MAX_CHUNK_WORDS {
                if !current.is_empty() {
                    chunks.push(current.join(" "));
                    current.clear();
                }
                for piece in sentence.chunks(MAX_CHUNK_WORDS) {
                    chunks.push(piece.join(" "));
                }
                continue;
            }
            if current.len() + sentence.len() > MAX_CHUNK_WORDS {
                chunks.push(current.join(" "));
                current.clear();
            }
            current.extend_from_slice(sentence);
        }
        if !current.is_empty() {
            chunks.push(current.join(" "));
        }
    }
    chunks
}

fn paragraphs(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn sentences<'a, 'w>(words: &'a [&'w str]) -> Vec<&'a [&'w str]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, word) in words.iter().enumerate() {
        let ends = word
            .trim_end_matches(['"', '\'', ')', ']'])
            .ends_with(['.', '!', '?']);
        if ends {
            out.push(&words[start..=i]);
            start = i + 1;
        }
    }
    if start < words.len() {
        out.push(&words[start..]);
    }
    out
}
