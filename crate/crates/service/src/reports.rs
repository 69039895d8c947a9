//! Saved evaluation and classification reports, one JSON file per id.

use std::path::{Path, PathBuf};

use serde_json::Value;

use iotsh_core::{Error, Result};

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn path_for(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

/// Highest numeric suffix among saved ids with this prefix.
fn last_serial(dir: &Path, prefix: &str) -> Result<u64> {
    if !dir.exists() {
        return Ok(0);
    }
    let mut last = 0;
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let name = entry.map_err(io(dir))?.file_name();
        let serial = name
            .to_str()
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.strip_prefix(prefix))
            .and_then(|n| n.strip_prefix('-'))
            .and_then(|n| n.parse::<u64>().ok());
        last = last.max(serial.unwrap_or(0));
    }
    Ok(last)
}

/// Writes `value` under a fresh `<prefix>-<n>` id and returns the id.
pub fn save(dir: &Path, prefix: &str, value: &Value) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let id = format!("{prefix}-{}", last_serial(dir, prefix)? + 1);
    let path = path_for(dir, &id);
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(&tmp, text).map_err(io(&tmp))?;
    std::fs::rename(&tmp, &path).map_err(io(&path))?;
    Ok(id)
}

pub fn load(dir: &Path, id: &str) -> Result<Option<Value>> {
    if !valid_id(id) {
        return Err(Error::param("id", format!("{id:?} is not a report id")));
    }
    let path = path_for(dir, id);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ids_are_sequential_and_safe() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            save(dir.path(), "eval", &json!({"a": 1})).unwrap(),
            "eval-1"
        );
        assert_eq!(
            save(dir.path(), "eval", &json!({"a": 2})).unwrap(),
            "eval-2"
        );
        assert_eq!(save(dir.path(), "cls", &json!({})).unwrap(), "cls-1");
        assert_eq!(load(dir.path(), "eval-2").unwrap(), Some(json!({"a": 2})));
        assert_eq!(load(dir.path(), "eval-9").unwrap(), None);
        assert!(!valid_id("../etc/passwd"));
        assert!(load(dir.path(), "a/b").is_err());
    }
}
