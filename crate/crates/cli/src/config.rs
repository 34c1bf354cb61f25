//! Optional `key=value` configuration files.
//!
//! Keys are long flag names of the chosen subcommand, with either `-` or `_`
//! as the separator. Blank lines and `#` comments are ignored. A value from
//! the file is used only when the flag is absent from the command line.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{CommandFactory, Parser};

use crate::Cli;

pub fn parse_config(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value", k + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", k + 1);
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

/// Parse `args`, then re-parse with values from `--config` appended for any
/// flag the command line left unset.
pub fn parse_with_config<I, T>(args: I) -> anyhow::Result<Cli>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    // Discovery pass: required flags may still come from the file.
    let matches = Cli::command().ignore_errors(true).try_get_matches_from(&argv)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Ok(Cli::try_parse_from(&argv)?);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = parse_config(&text).with_context(|| format!("parsing config {}", path.display()))?;

    let (name, sub) = matches.subcommand().context("missing subcommand")?;
    let command = Cli::command();
    let sub_command = command.find_subcommand(name).context("unknown subcommand")?;
    for (key, value) in pairs {
        let arg = sub_command
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && a.get_id() != "config")
            .with_context(|| format!("config {}: unknown key '{key}' for {name}", path.display()))?;
        if sub.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        argv.push(format!("--{key}={value}").into());
    }
    Ok(Cli::try_parse_from(&argv)?)
}
