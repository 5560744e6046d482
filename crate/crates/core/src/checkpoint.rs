//! Model checkpoints: a directory with `manifest.txt`, the run config
//! snapshot in `config.txt` and one STMX1 file per parameter.
//!
//! The manifest lists `format`, `params=<count>` and then one
//! `param=<name> <d0>x<d1>x...` line per parameter in store order.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::Mode;
use crate::train::Model;

pub const FORMAT: &str = "stmixer-checkpoint-1";
const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "config.txt";

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

fn file_name(name: &str) -> String {
    format!("params/{name}.stmx")
}

pub fn render_manifest(entries: &[ParamEntry]) -> String {
    let mut s = format!("format={FORMAT}\nparams={}\n", entries.len());
    for e in entries {
        let dims: Vec<String> = e.dims.iter().map(usize::to_string).collect();
        writeln!(s, "param={} {}", e.name, dims.join("x")).expect("string write");
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ParamEntry>> {
    let bad = |m: String| Error::Load(format!("checkpoint manifest: {m}"));
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some(l) if l == format!("format={FORMAT}") => {}
        other => return Err(bad(format!("expected format={FORMAT}, got {other:?}"))),
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing params=<count>".into()))?;
    let mut entries = Vec::new();
    for line in lines {
        let rest = line.strip_prefix("param=").ok_or_else(|| bad(format!("unexpected line {line:?}")))?;
        // a scalar has no dims after the name
        let (name, dims) = rest.split_once(' ').unwrap_or((rest, ""));
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(bad(format!("invalid parameter name {name:?}")));
        }
        let dims = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dims in {line:?}"))))
                .collect::<Result<Vec<_>>>()?
        };
        entries.push(ParamEntry { name: name.into(), dims });
    }
    if entries.len() != count {
        return Err(bad(format!("declares {count} params, lists {}", entries.len())));
    }
    Ok(entries)
}

pub fn save(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("params"))?;
    let entries: Vec<ParamEntry> = model
        .store
        .iter()
        .map(|(_, p)| ParamEntry { name: p.name.clone(), dims: p.tensor.dims().to_vec() })
        .collect();
    for (_, p) in model.store.iter() {
        p.tensor.save(dir.join(file_name(&p.name)))?;
    }
    std::fs::write(dir.join(CONFIG), model.config.to_text())?;
    std::fs::write(dir.join(MANIFEST), render_manifest(&entries))?;
    Ok(())
}

/// Rebuilds the model described by `config.txt` and loads every parameter.
/// Any disagreement between manifest, config and tensor files is a load
/// error.
pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|e| Error::Load(format!("{}: {e}", dir.join(name).display())));
    let config = RunConfig::parse(&read(CONFIG)?, Mode::Keyframe).map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
    let entries = parse_manifest(&read(MANIFEST)?)?;
    let mut model = Model::new(&config)?;
    if entries.len() != model.store.len() {
        return Err(Error::Load(format!("manifest lists {} params, config builds {}", entries.len(), model.store.len())));
    }
    for (e, id) in entries.iter().zip(model.store.ids()) {
        let p = model.store.get(id);
        if p.name != e.name || p.tensor.dims() != e.dims.as_slice() {
            return Err(Error::Load(format!("manifest entry {} {:?} does not match {} {:?}", e.name, e.dims, p.name, p.tensor.dims())));
        }
        let t = crate::tensor::Tensor::load(dir.join(file_name(&e.name))).map_err(|err| Error::Load(format!("{}: {err}", e.name)))?;
        if t.dims() != e.dims.as_slice() {
            return Err(Error::Load(format!("{}: file holds {:?}, manifest says {:?}", e.name, t.dims(), e.dims)));
        }
        model.store.set(id, t)?;
    }
    Ok(model)
}
