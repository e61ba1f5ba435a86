//! Resolving provider ids to encoders.
//!
//! Only the built-in hashed provider can be constructed here. Its id is
//! `hashed-bow`, optionally followed by `:seed=S` and `:dim=D` in any order.
//! External encoders reach the system only through embedding files.

use std::sync::Arc;

use essaylens_core::embeddings::{HashedProvider, SentenceEncoder, DEFAULT_DIM, HASHED_PROVIDER};
use essaylens_core::Error as CoreError;

use crate::error::Result;

pub const DEFAULT_PROVIDER_SEED: u64 = 0;

pub fn resolve(id: &str) -> Result<Arc<dyn SentenceEncoder>> {
    let mut parts = id.trim().split(':');
    if parts.next() != Some(HASHED_PROVIDER) {
        return Err(CoreError::ProviderUnavailable(id.to_string()).into());
    }
    let (mut seed, mut dim) = (DEFAULT_PROVIDER_SEED, DEFAULT_DIM);
    for p in parts {
        let bad = || CoreError::ProviderUnavailable(format!("{}: cannot parse `{}`", id, p));
        match p.split_once('=') {
            Some(("seed", v)) => seed = v.parse().map_err(|_| bad())?,
            Some(("dim", v)) => dim = v.parse().map_err(|_| bad())?,
            _ => return Err(bad().into()),
        }
    }
    Ok(Arc::new(HashedProvider::new(seed, dim)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        let p = resolve("hashed-bow:dim=16:seed=5").unwrap();
        assert_eq!(p.dim(), 16);
        assert_eq!(resolve(&p.id()).unwrap().id(), p.id());
        assert_eq!(resolve("hashed-bow").unwrap().dim(), DEFAULT_DIM);
    }

    #[test]
    fn unknown_providers() {
        for id in ["use-512", "hashed-bow:dim=x", "hashed-bow:width=3", "hashed-bow:dim=0"] {
            assert!(resolve(id).is_err(), "{}", id);
        }
    }
}
