//! TOML config files turned into command-line flags.
//!
//! Keys at the top level apply to every subcommand; keys inside a table named
//! after the subcommand apply to that subcommand only. File flags are
//! inserted before the user's flags, so flags given on the command line win.

use std::ffi::OsString;
use std::path::Path;

use toml::Value;

fn scalar(key: &str, v: &Value) -> Result<Option<String>, String> {
    Ok(Some(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(_) => return Ok(None),
        Value::Array(items) => items
            .iter()
            .map(|i| match scalar(key, i) {
                Ok(Some(s)) => Ok(s),
                _ => Err(format!("config key {key:?}: arrays may hold only strings and numbers")),
            })
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        _ => return Err(format!("config key {key:?}: unsupported value")),
    }))
}

fn push_flags(table: &toml::Table, out: &mut Vec<OsString>) -> Result<(), String> {
    for (key, v) in table {
        if matches!(v, Value::Table(_)) {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match (v, scalar(key, v)?) {
            (Value::Boolean(true), _) => out.push(flag.into()),
            (Value::Boolean(false), _) => {}
            (_, Some(s)) => {
                out.push(flag.into());
                out.push(s.into());
            }
            (_, None) => {}
        }
    }
    Ok(())
}

/// Flags the config file supplies for `subcommand`.
pub fn config_flags(path: &Path, subcommand: &str) -> Result<Vec<OsString>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    push_flags(&table, &mut out)?;
    if let Some(v) = table.get(subcommand) {
        match v {
            Value::Table(t) => push_flags(t, &mut out)?,
            _ => return Err(format!("{}: [{subcommand}] must be a table", path.display())),
        }
    }
    Ok(out)
}

/// Inserts `extra` right after the subcommand name in `args`.
pub fn splice_after_subcommand(args: &[OsString], subcommand_index: usize, extra: Vec<OsString>) -> Vec<OsString> {
    let mut out = args[..=subcommand_index].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[subcommand_index + 1..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_from_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 4\n[run]\nquality = 3\nno_prior = true\nqualities = [2, 4]\n[synth]\ncount = 9\n").unwrap();
        let flags: Vec<String> = config_flags(&p, "run")
            .unwrap()
            .into_iter()
            .map(|s| s.into_string().unwrap())
            .collect();
        assert_eq!(flags, ["--seed", "4", "--no-prior", "--qualities", "2,4", "--quality", "3"]);
    }
}
