//! `key=value` config files, spliced into the argument list so that explicit
//! flags win and clap does all parsing and validation.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parsed `key=value` pairs in file order. Keys use flag spelling; `_` is
/// accepted for `-`.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{line}`", no + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", no + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn flag_given(args: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let with_value = format!("--{key}=");
    args.iter().any(|a| {
        a.to_str()
            .is_some_and(|s| s == long || s.starts_with(&with_value))
    })
}

/// Finds `--config <path>` (or `--config=<path>`), removes it and appends
/// the file's settings for every flag not already on the command line.
pub fn expand_config_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => {
                path = Some(it.next().context("--config needs a file path")?);
            }
            Some(s) if s.starts_with("--config=") => {
                path = Some(OsString::from(&s["--config=".len()..]));
            }
            _ => rest.push(a),
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let settings = parse_config(&text)?;
    let mut extra = Vec::new();
    for (key, value) in settings {
        if flag_given(&rest, &key) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(value));
            }
        }
    }
    // settings belong to the subcommand, which sits before any `--`
    let split = rest.iter().position(|a| a == "--").unwrap_or(rest.len());
    rest.splice(split..split, extra);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_comments_and_underscores() {
        let cfg = parse_config("# run\nepochs = 3\n\nn_fsat=2\nrgb=true\n").unwrap();
        assert_eq!(
            cfg,
            vec![
                ("epochs".into(), "3".into()),
                ("n-fsat".into(), "2".into()),
                ("rgb".into(), "true".into())
            ]
        );
        assert!(parse_config("epochs 3").is_err());
        assert!(parse_config("=3").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "epochs=9\nbatch=2\nrgb=false\ndesk=true\n").unwrap();
        let args = os(&[
            "fsat",
            "train",
            "--epochs=4",
            "--config",
            path.to_str().unwrap(),
        ]);
        let out = expand_config_args(args).unwrap();
        assert_eq!(
            out,
            os(&["fsat", "train", "--epochs=4", "--batch", "2", "--desk"])
        );
    }

    #[test]
    fn no_config_leaves_args_alone() {
        let args = os(&["fsat", "eval", "--data", "d"]);
        assert_eq!(expand_config_args(args.clone()).unwrap(), args);
    }
}
