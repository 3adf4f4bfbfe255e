//! Population text files and atomic file writes.
//!
//! A population file is UTF-8 text. The first line is a header
//!
//! ```text
//! perfed-population v1 classes=<d> feature_dim=<k> clients=<p>
//! ```
//!
//! (`feature_dim=0` for featureless data), followed by one record per
//! client, tab-separated:
//!
//! ```text
//! <client_id>\t<m_k>\t<label>,<label>,...[\t<x>,<x>,..;<x>,<x>,..;...]
//! ```
//!
//! The feature column is present iff `feature_dim > 0` and holds `m_k`
//! rows separated by `;`. Counts are stored explicitly so truncated
//! records are detected. Floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{ClientDataset, ClientId, Features, LabelSpace, Population};
use crate::error::{Error, Result};

const MAGIC: &str = "perfed-population";
const VERSION: &str = "v1";

pub fn population_to_string(pop: &Population) -> String {
    let mut out = String::new();
    let fd = pop.feature_dim().unwrap_or(0);
    let _ = writeln!(
        out,
        "{MAGIC} {VERSION} classes={} feature_dim={fd} clients={}",
        pop.num_classes(),
        pop.len()
    );
    for c in pop.clients() {
        let labels = c.labels().iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = write!(out, "{}\t{}\t{}", c.id(), c.count(), labels);
        if let Some(f) = c.features() {
            let rows = (0..f.rows())
                .map(|i| f.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .collect::<Vec<_>>()
                .join(";");
            let _ = write!(out, "\t{rows}");
        }
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn header_field(line: usize, token: Option<&str>, key: &str) -> Result<usize> {
    let token = token.ok_or_else(|| parse_err(line, format!("missing header field `{key}`")))?;
    let value = token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected `{key}=<n>`, found `{token}`")))?;
    value
        .parse()
        .map_err(|_| parse_err(line, format!("`{key}` is not a count: `{value}`")))
}

pub fn population_from_str(text: &str) -> Result<Population> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(parse_err(ln, format!("expected `{MAGIC}` header")));
    }
    match tokens.next() {
        Some(VERSION) => {}
        other => return Err(parse_err(ln, format!("unsupported version {other:?}"))),
    }
    let classes = header_field(ln, tokens.next(), "classes")?;
    let feature_dim = header_field(ln, tokens.next(), "feature_dim")?;
    let n_clients = header_field(ln, tokens.next(), "clients")?;
    let space = LabelSpace::new(classes).map_err(|e| parse_err(ln, e.to_string()))?;

    let mut clients = Vec::with_capacity(n_clients);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let want = if feature_dim > 0 { 4 } else { 3 };
        if cols.len() != want {
            return Err(parse_err(ln, format!("expected {want} tab-separated columns, found {}", cols.len())));
        }
        let id: u64 = cols[0]
            .parse()
            .map_err(|_| parse_err(ln, format!("bad client id `{}`", cols[0])))?;
        let count: usize = cols[1]
            .parse()
            .map_err(|_| parse_err(ln, format!("bad sample count `{}`", cols[1])))?;
        let labels = cols[2]
            .split(',')
            .enumerate()
            .map(|(j, t)| {
                t.parse::<usize>()
                    .map_err(|_| parse_err(ln, format!("label {j} of client {id} is not an integer: `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != count {
            return Err(parse_err(
                ln,
                format!("client {id} declares {count} samples but lists {} labels", labels.len()),
            ));
        }
        let features = if feature_dim > 0 {
            let mut values = Vec::with_capacity(count * feature_dim);
            let rows: Vec<&str> = cols[3].split(';').collect();
            if rows.len() != count {
                return Err(parse_err(
                    ln,
                    format!("client {id} declares {count} samples but lists {} feature rows", rows.len()),
                ));
            }
            for (r, row) in rows.iter().enumerate() {
                let before = values.len();
                for t in row.split(',') {
                    values.push(t.parse::<f64>().map_err(|_| {
                        parse_err(ln, format!("feature row {r} of client {id}: bad number `{t}`"))
                    })?);
                }
                if values.len() - before != feature_dim {
                    return Err(parse_err(ln, format!("feature row {r} of client {id} has wrong width")));
                }
            }
            Some(Features::new(feature_dim, values).map_err(|e| parse_err(ln, e.to_string()))?)
        } else {
            None
        };
        clients.push(ClientDataset::new(ClientId(id), labels, features, space)?);
    }
    if clients.len() != n_clients {
        return Err(parse_err(
            text.lines().count(),
            format!("header declares {n_clients} clients, found {}", clients.len()),
        ));
    }
    Population::new(space, clients)
}

pub fn save_population(pop: &Population, path: &Path) -> Result<()> {
    write_atomic(path, population_to_string(pop).as_bytes())
}

pub fn load_population(path: &Path) -> Result<Population> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    population_from_str(&text)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
