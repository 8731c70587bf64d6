//! `--config <file.json>`: a JSON object of flag values merged into the
//! command line. Flags given explicitly win over the file.
//!
//! Keys are flag names without the leading dashes (`add_intercept` and
//! `add-intercept` both work). `true` sets a switch, `false` and `null` are
//! skipped, arrays become comma-separated lists.

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

use crate::error::CliError;

const FLAG: &str = "--config";

/// Replaces `--config <path>` in `args` (program name first) with the flags it holds.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(pos) = args.iter().position(|a| a == FLAG || a.to_string_lossy().starts_with("--config=")) else {
        return Ok(args);
    };
    let mut args = args;
    let path = match args[pos].to_string_lossy().strip_prefix("--config=") {
        Some(p) => {
            let p = OsString::from(p);
            args.remove(pos);
            p
        }
        None => {
            if pos + 1 >= args.len() {
                return Err(CliError::usage(FLAG, "missing file path"));
            }
            args.remove(pos);
            args.remove(pos)
        }
    };
    if args.len() < 2 || pos < 2 {
        return Err(CliError::usage(FLAG, "must follow a subcommand"));
    }
    let explicit: Vec<String> = args[2..]
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let flags: Vec<OsString> = read_flags(Path::new(&path))?
        .into_iter()
        .filter(|(flag, _)| !explicit.contains(flag))
        .flat_map(|(flag, value)| std::iter::once(flag).chain(value))
        .map(OsString::from)
        .collect();
    args.splice(2..2, flags);
    Ok(args)
}

/// `(flag, value)` pairs; switches have no value.
fn read_flags(path: &Path) -> Result<Vec<(String, Option<String>)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(FLAG, format!("{}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(CliError::usage(FLAG, "expected a JSON object of flag values"));
    };
    let mut flags = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.trim_start_matches('-').replace('_', "-"));
        let text = match value {
            Value::Bool(true) => {
                flags.push((flag, None));
                continue;
            }
            Value::Bool(false) | Value::Null => continue,
            Value::Array(items) => items.iter().map(scalar).collect::<Option<Vec<_>>>().map(|v| v.join(",")),
            other => scalar(&other),
        };
        let text = text.ok_or_else(|| CliError::usage(FLAG, format!("'{key}' must be a scalar or a list of scalars")))?;
        flags.push((flag, Some(text)));
    }
    Ok(flags)
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn explicit_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"kappa": 0.5, "add_intercept": true, "standardize": false, "grid": [-1, 0, 1]}"#).unwrap();
        let path = file.to_str().unwrap();
        let out = expand_args(os(&["gpml", "fit", "--config", path, "--kappa", "1"])).unwrap();
        let expected = os(&[
            "gpml", "fit", "--add-intercept", "--grid", "-1,0,1", "--kappa", "1",
        ]);
        assert_eq!(out, expected);
    }

    #[test]
    fn config_errors() {
        assert!(expand_args(os(&["gpml", "fit", "--config"])).is_err());
        assert!(expand_args(os(&["gpml", "--config", "x.json", "fit"])).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.json");
        std::fs::write(&file, r#"{"kappa": {"nested": 1}}"#).unwrap();
        assert!(expand_args(os(&["gpml", "fit", "--config", file.to_str().unwrap()])).is_err());
        assert_eq!(expand_args(os(&["gpml", "fit"])).unwrap(), os(&["gpml", "fit"]));
    }
}
