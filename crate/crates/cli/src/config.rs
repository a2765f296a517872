//! `--config` files and run provenance.
//!
//! A config file holds `key = value` lines naming long flags of the chosen
//! subcommand. Entries are appended to the command line only for flags that
//! were not given explicitly, so flags always win.

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Command};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys may carry a leading `--` and use `_` in place of `-`.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key = value, got {raw:?}", i + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn subcommand_name(args: &[String]) -> Option<&str> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            it.next();
        } else if !a.starts_with('-') {
            return Some(a);
        }
    }
    None
}

fn given(args: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("{flag}=");
    args.iter().any(|a| *a == flag || a.starts_with(&prefix))
}

/// Returns `args` with the entries of the `--config` file (if any) appended
/// for every flag not already present.
pub fn merge_config(args: Vec<String>, cli: &Command) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(name) = subcommand_name(&args) else {
        return Ok(args);
    };
    let Some(sub) = cli.find_subcommand(name) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config file {path}"))?;
    let mut merged = args.clone();
    for (key, value) in parse_config(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| anyhow!("config file {path}: `{key}` is not a flag of `{name}`"))?;
        if given(&args, &key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue | ArgAction::Count => match value.as_str() {
                "true" => merged.push(format!("--{key}")),
                "false" => {}
                other => bail!("config file {path}: `{key}` expects true or false, got {other:?}"),
            },
            _ => merged.push(format!("--{key}={value}")),
        }
    }
    Ok(merged)
}

/// Provenance block: the normalized settings of the run and their SHA-256.
/// Output locations are not part of the settings, so identical runs written
/// to different places carry identical provenance.
pub fn provenance<T: Serialize>(command: &str, settings: &T) -> Value {
    let config = serde_json::to_value(settings).expect("settings serialize");
    let canonical = serde_json::to_string(&config).expect("settings serialize");
    let digest = Sha256::digest(canonical.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    json!({
        "program": "khorbit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "config_sha256": hex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, Command};

    fn cli() -> Command {
        Command::new("t").arg(Arg::new("config").long("config").global(true)).subcommand(
            Command::new("run")
                .arg(Arg::new("tol").long("tol"))
                .arg(Arg::new("t-final").long("t-final"))
                .arg(Arg::new("fast").long("fast").action(ArgAction::SetTrue)),
        )
    }

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let kv = parse_config("# header\n\n--t_final = 3 # trailing\ntol=1e-9\n").unwrap();
        assert_eq!(kv, vec![("t-final".into(), "3".into()), ("tol".into(), "1e-9".into())]);
        assert!(parse_config("tol 1e-9").is_err());
    }

    #[test]
    fn explicit_flags_win_over_file_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "tol = 1e-3\nt-final = 5\nfast = true\n").unwrap();
        let args = argv(&format!("t --config {} run --tol=1e-9", path.display()));
        let merged = merge_config(args, &cli()).unwrap();
        assert!(merged.contains(&"--tol=1e-9".to_string()));
        assert!(!merged.iter().any(|a| a == "--tol=1e-3"));
        assert!(merged.contains(&"--t-final=5".to_string()));
        assert!(merged.contains(&"--fast".to_string()));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        let args = argv(&format!("t run --config {}", path.display()));
        assert!(merge_config(args, &cli()).is_err());
    }

    #[test]
    fn provenance_hash_depends_only_on_settings() {
        let a = provenance("run", &json!({"k": 3, "tol": 1e-12}));
        let b = provenance("run", &json!({"k": 3, "tol": 1e-12}));
        let c = provenance("run", &json!({"k": 5, "tol": 1e-12}));
        assert_eq!(a, b);
        assert_ne!(a["config_sha256"], c["config_sha256"]);
        assert_eq!(a["config_sha256"].as_str().unwrap().len(), 64);
    }
}
