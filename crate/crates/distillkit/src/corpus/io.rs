//! Corpus and vocabulary file formats.
//!
//! Corpus files hold one record per line: language id, provenance,
//! similarity (or "-"), space-joined source tokens, space-joined target
//! tokens, separated by tabs, ordered by (language id, original index).
//! Vocabulary files hold one token per line in rank order. All writes go
//! through a temp-file rename so readers never observe partial output.

use std::fs;
use std::path::Path;

use crate::corpus::subword::{Vocab, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN, WORD_END};
use crate::corpus::types::{Corpus, Provenance, SentencePair};
use crate::error::{Error, Result};

/// Write bytes to `path` via a sibling temp file and rename, creating
/// parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("bad path {}", path.display()))))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn format_similarity(s: Option<f64>) -> String {
    match s {
        // Default f64 formatting is the shortest round-trippable form, so
        // a write/read cycle preserves scores bit-for-bit.
        Some(v) => format!("{v}"),
        None => "-".to_string(),
    }
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.sort_by(|&a, &b| {
        corpus.pairs[a].language.cmp(&corpus.pairs[b].language).then(a.cmp(&b))
    });
    let mut out = String::new();
    for i in order {
        let p = &corpus.pairs[i];
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.language,
            p.provenance.as_str(),
            format_similarity(p.similarity),
            p.source.join(" "),
            p.target.join(" "),
        ));
    }
    out
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    atomic_write(path, corpus_to_string(corpus).as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Corpus(msg) => Error::Corpus(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Corpus(format!(
                "line {}: expected 5 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let similarity = match fields[2] {
            "-" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| {
                    Error::Corpus(format!("line {}: bad similarity '{s}'", lineno + 1))
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Corpus(format!(
                        "line {}: similarity {v} outside [0, 1]",
                        lineno + 1
                    )));
                }
                Some(v)
            }
        };
        let source: Vec<String> = fields[3].split(' ').map(|s| s.to_string()).collect();
        let target: Vec<String> = fields[4].split(' ').map(|s| s.to_string()).collect();
        if fields[0].is_empty() || fields[3].is_empty() || fields[4].is_empty() {
            return Err(Error::Corpus(format!(
                "line {}: language, source, and target must be non-empty",
                lineno + 1
            )));
        }
        pairs.push(SentencePair {
            language: fields[0].to_string(),
            source,
            target,
            similarity,
            provenance: fields[1].parse::<Provenance>().map_err(|e| {
                Error::Corpus(format!("line {}: {e}", lineno + 1))
            })?,
        });
    }
    Ok(Corpus { pairs })
}

fn is_special_token(tok: &str) -> bool {
    // Subword tokens always begin with an alphabet character (the word-end
    // marker only ever appears as a suffix), so a leading '<' marks a
    // reserved special or language tag.
    tok.starts_with('<') && tok.ends_with('>') && !tok.contains(WORD_END)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    let expected = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
    if lines.len() < expected.len() || lines[..4] != expected {
        return Err(Error::Corpus(format!(
            "{}: vocab must start with {PAD_TOKEN}, {BOS_TOKEN}, {EOS_TOKEN}, {UNK_TOKEN}",
            path.display()
        )));
    }
    let rest = &lines[4..];
    let n_tags = rest.iter().take_while(|t| is_special_token(t)).count();
    let tags: Vec<String> = rest[..n_tags].iter().map(|s| s.to_string()).collect();
    let subwords: Vec<String> = rest[n_tags..].iter().map(|s| s.to_string()).collect();
    if let Some(bad) = subwords.iter().find(|t| is_special_token(t)) {
        return Err(Error::Corpus(format!(
            "{}: special token '{bad}' appears after subwords",
            path.display()
        )));
    }
    Vocab::new(&tags, subwords)
}
