//! JSON Lines embedding files, one document per line:
//! `{"id", "sentences", "vectors", "dim", "provider"}`.
//!
//! Floats are written in shortest round-trip form, so a write then read
//! gives back the same bits.

use std::io::{BufRead, Write};

use essaylens_core::embeddings::EmbeddedDocument;

use crate::error::{Error, Result};

pub fn write_embedding_file<W: Write>(docs: &[EmbeddedDocument], mut w: W) -> Result<()> {
    let dim = docs.first().map(|d| d.dim);
    for (i, d) in docs.iter().enumerate() {
        if Some(d.dim) != dim {
            return Err(Error::DimInconsistent {
                line: i + 1,
                expected: dim.unwrap_or(0),
                got: d.dim,
            });
        }
        d.validate().map_err(|e| Error::MalformedLine {
            line: i + 1,
            detail: e.to_string(),
        })?;
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io("<embedding output>", e))?;
    }
    w.flush().map_err(|e| Error::io("<embedding output>", e))?;
    Ok(())
}

/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn read_embedding_file<R: BufRead>(r: R) -> Result<Vec<EmbeddedDocument>> {
    let mut docs: Vec<EmbeddedDocument> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: n,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: EmbeddedDocument = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: n,
            detail: e.to_string(),
        })?;
        doc.validate().map_err(|e| Error::MalformedLine {
            line: n,
            detail: e.to_string(),
        })?;
        if let Some(first) = docs.first() {
            if first.dim != doc.dim {
                return Err(Error::DimInconsistent {
                    line: n,
                    expected: first.dim,
                    got: doc.dim,
                });
            }
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, dim: usize) -> EmbeddedDocument {
        EmbeddedDocument {
            id: id.into(),
            sentences: vec!["a.".into()],
            vectors: vec![vec![0.1; dim]],
            dim,
            provider: "test".into(),
        }
    }

    #[test]
    fn empty_input_reads_empty() {
        assert!(read_embedding_file(&b""[..]).unwrap().is_empty());
        assert!(read_embedding_file(&b"\n\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_its_number() {
        let mut buf = Vec::new();
        write_embedding_file(&[doc("a", 2)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = format!("{}{}", text, &text[..text.len() / 2]);
        match read_embedding_file(cut.as_bytes()) {
            Err(Error::MalformedLine { line: 2, .. }) => {}
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn mixed_dims_rejected() {
        assert!(matches!(
            write_embedding_file(&[doc("a", 2), doc("b", 3)], Vec::new()),
            Err(Error::DimInconsistent { line: 2, expected: 2, got: 3 })
        ));
        let line_a = serde_json::to_string(&doc("a", 2)).unwrap();
        let line_b = serde_json::to_string(&doc("b", 3)).unwrap();
        let text = format!("{}\n{}\n", line_a, line_b);
        assert!(matches!(
            read_embedding_file(text.as_bytes()),
            Err(Error::DimInconsistent { line: 2, .. })
        ));
    }

    #[test]
    fn vector_width_must_match_dim() {
        let mut d = doc("a", 2);
        d.dim = 3;
        let text = serde_json::to_string(&d).unwrap();
        assert!(matches!(read_embedding_file(text.as_bytes()), Err(Error::MalformedLine { line: 1, .. })));
    }
}
