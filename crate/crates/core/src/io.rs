//! Shared text-output helpers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Round-trip-exact decimal form with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// `# key=value key=value ...` metadata line, keys sorted.
pub fn metadata_line(tag: &str, meta: &BTreeMap<String, String>) -> String {
    let mut s = format!("# {tag}");
    for (k, v) in meta {
        s.push(' ');
        s.push_str(k);
        s.push('=');
        s.push_str(v);
    }
    s
}

/// Parse a line written by [`metadata_line`], checking the tag.
pub fn parse_metadata_line(line: &str, tag: &str) -> Result<BTreeMap<String, String>> {
    let rest = line
        .strip_prefix("# ")
        .and_then(|r| r.strip_prefix(tag))
        .ok_or_else(|| Error::Format(format!("expected a '# {tag}' header, got {line:?}")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad metadata item {kv:?}")))
        })
        .collect()
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
