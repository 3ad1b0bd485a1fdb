// SPDX-License-Identifier: MIT OR Apache-2.0

//! `key = value` config files spliced into the argument list.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;
use serde::Serialize;
use vitdecomp::artifact::sha256_hex;

/// Parses a config file into `--key value` tokens.
///
/// Blank lines and `#` comments are skipped. `true` emits a bare flag,
/// `false` emits nothing.
pub fn read_config(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", path.display(), n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("{}:{}: empty key", path.display(), n + 1);
        }
        match value.trim() {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Global options that consume the following token.
const VALUE_GLOBALS: [&str; 2] = ["--root", "--config"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Inserts config tokens right after the subcommand path so that anything
/// given on the command line comes later and wins.
pub fn expand(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let extra = read_config(Path::new(&path))?;
    let mut current = cmd.clone();
    let mut insert_at = args.len().min(1);
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy().into_owned();
        if VALUE_GLOBALS.contains(&s.as_str()) {
            i += 2;
            continue;
        }
        if s.starts_with('-') {
            i += 1;
            continue;
        }
        match current.find_subcommand(&s) {
            Some(sub) => {
                current = sub.clone();
                insert_at = i + 1;
                i += 1;
            }
            None => break,
        }
    }
    let mut out = args;
    out.splice(insert_at..insert_at, extra);
    Ok(out)
}

/// SHA-256 of the canonical JSON of the resolved arguments.
pub fn config_hash<T: Serialize>(command: &str, args: &T) -> Result<String> {
    // serde_json maps are sorted, so the encoding is canonical
    let value = serde_json::json!({ "command": command, "args": serde_json::to_value(args)? });
    Ok(sha256_hex(&serde_json::to_vec(&value)?))
}
