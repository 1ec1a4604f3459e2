//! Flat `key=value` config files, merged under explicit flags.
//!
//! Each `key=value` line becomes `--key value` inserted right after the
//! subcommand, so anything given on the command line later overrides it.
//! `key=true` becomes a bare `--key`; `key=false` is dropped.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

const SUBCOMMANDS: [&str; 8] = ["train", "infer", "bench", "metrics", "rank", "dataset", "dump-features", "ablate"];
const DATASET_ACTIONS: [&str; 4] = ["filter", "categorize", "split", "degrade"];

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got `{line}`", i + 1);
        };
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-') {
            bail!("config line {}: invalid key `{key}`", i + 1);
        }
        if key == "config" {
            bail!("config line {}: config files cannot include other config files", i + 1);
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn take_config(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy().into_owned();
        if s == "--" {
            break;
        }
        if s == "--config" {
            if i + 1 >= args.len() {
                bail!("--config needs a path");
            }
            args.remove(i);
            found = Some(args.remove(i));
        } else if let Some(p) = s.strip_prefix("--config=") {
            args.remove(i);
            found = Some(OsString::from(p));
        } else {
            i += 1;
        }
    }
    Ok(found)
}

/// Index just past the subcommand (and dataset action) tokens.
fn insertion_point(args: &[OsString]) -> usize {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(sub) = strs.iter().skip(1).position(|s| SUBCOMMANDS.contains(&s.as_str())) else {
        return args.len();
    };
    let sub = sub + 1;
    if strs[sub] == "dataset" {
        if let Some(a) = strs.iter().skip(sub + 1).position(|s| DATASET_ACTIONS.contains(&s.as_str())) {
            return sub + 1 + a + 1;
        }
    }
    sub + 1
}

pub fn expand(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = take_config(&mut args)? else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = parse(&text).with_context(|| format!("in {}", path.display()))?;
    let mut injected = Vec::new();
    for (key, value) in pairs {
        match value.as_str() {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{key}")));
                injected.push(OsString::from(value));
            }
        }
    }
    let at = insertion_point(&args);
    args.splice(at..at, injected);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_comments_and_blanks() {
        let p = parse("# run\nsteps = 20\n\nlr=0.001\n").unwrap();
        assert_eq!(p, vec![("steps".into(), "20".into()), ("lr".into(), "0.001".into())]);
        assert!(parse("steps 20").is_err());
        assert!(parse("Steps=1").is_err());
    }

    #[test]
    fn injects_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "steps=5\ncosine-decay=true\nverbose=false\n").unwrap();
        let args = os(&["efrlfn", "--seed", "3", "train", "--config", cfg.to_str().unwrap(), "--steps", "9"]);
        let out = expand(args).unwrap();
        assert_eq!(
            out,
            os(&["efrlfn", "--seed", "3", "train", "--steps", "5", "--cosine-decay", "--steps", "9"])
        );
    }

    #[test]
    fn dataset_action_is_skipped() {
        let args = os(&["efrlfn", "dataset", "categorize", "--clusters", "4"]);
        assert_eq!(insertion_point(&args), 3);
    }
}
