//! Reading corpora and metadata from disk.

use std::fs;
use std::path::Path;

use essaylens_core::corpus::{parse_asap_tsv, Catalog, EssayRecord, EssaySetMeta};

use crate::error::{Error, Result};

/// Decoded text plus whether the bytes were not valid UTF-8 and were read as
/// Windows-1252 instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub text: String,
    pub fell_back: bool,
}

pub fn decode(bytes: &[u8]) -> Decoded {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    match std::str::from_utf8(bytes) {
        Ok(s) => Decoded {
            text: s.to_string(),
            fell_back: false,
        },
        Err(_) => {
            // the ASAP release ships some files in cp1252
            let (text, _) = encoding_rs::WINDOWS_1252.decode_without_bom_handling(bytes);
            Decoded {
                text: text.into_owned(),
                fell_back: true,
            }
        }
    }
}

pub fn read_text(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(&bytes);
    if d.fell_back {
        eprintln!("warning: {} is not valid UTF-8; decoded as Windows-1252", path.display());
    }
    Ok(d)
}

pub fn load_corpus(path: &Path, catalog: &Catalog) -> Result<Vec<EssayRecord>> {
    Ok(parse_asap_tsv(&read_text(path)?.text, catalog)?)
}

/// A JSON array of essay-set metadata. Entries replace built-in sets with the
/// same id and add new ones.
pub fn load_meta(path: &Path) -> Result<Vec<EssaySetMeta>> {
    let text = read_text(path)?.text;
    Ok(serde_json::from_str(&text)?)
}

pub fn catalog(meta_file: Option<&Path>) -> Result<Catalog> {
    let base = Catalog::builtin();
    match meta_file {
        Some(p) => Ok(base.with_overrides(load_meta(p)?)?),
        None => Ok(base),
    }
}
