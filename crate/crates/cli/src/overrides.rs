//! Effective training configuration: defaults, then the config file, then
//! `--set key=value` overrides, then dedicated flags.

use std::path::Path;

use toml::{Table, Value};
use xview::config::TrainConfig;
use xview::Error;

/// Parses `value` as a TOML literal, falling back to a bare string so that
/// `--set variant=retrieval_only` works without quoting.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `a.b.c=value` assignment to `table`.
pub fn apply(table: &mut Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn resolve(file: Option<&Path>, assignments: &[String]) -> Result<TrainConfig, Error> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => Table::new(),
    };
    for a in assignments {
        apply(&mut table, a)?;
    }
    TrainConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"))
}
