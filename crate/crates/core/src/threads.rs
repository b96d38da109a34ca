//! Thread cap from `ORBITFORGE_THREADS`.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "ORBITFORGE_THREADS";

/// Parses a cap value; empty means no cap.
pub fn parse_cap(raw: &str) -> Result<Option<usize>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))),
    }
}

pub fn cap_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => parse_cap(&v),
        Err(_) => Ok(None),
    }
}

/// Sizes the global rayon pool from the environment. Later calls, or a pool
/// built elsewhere first, leave the pool as it is. Returns the pool size.
pub fn init_global_pool() -> Result<usize> {
    if let Some(n) = cap_from_env()? {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_parse() {
        assert_eq!(parse_cap("4").unwrap(), Some(4));
        assert_eq!(parse_cap(" ").unwrap(), None);
        assert!(parse_cap("0").is_err());
        assert!(parse_cap("many").is_err());
    }
}
