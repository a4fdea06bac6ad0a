use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::checkpoint::{LayerMeta, ModelCheckpoint};
use crate::error::{Error, Result};

/// Parses an architecture description into a weightless [`ModelCheckpoint`].
///
/// ```text
/// # comment
/// conv1 conv 7 3 64
/// bn1 batchnorm 1 64 64
/// edge conv1 bn1
/// ```
pub fn parse_arch(text: &str) -> Result<ModelCheckpoint> {
    let mut ckpt = ModelCheckpoint::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| Error::MalformedFile(format!("arch line {}: {why}: `{line}`", lineno + 1));
        if fields[0] == "edge" {
            if fields.len() != 3 {
                return Err(bad("edge needs producer and consumer"));
            }
            ckpt.edges.push((fields[1].to_string(), fields[2].to_string()));
            continue;
        }
        if fields.len() != 5 {
            return Err(bad("expected `name kind K C_in C_out`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-integer field"));
        ckpt.layers.push(LayerMeta {
            name: fields[0].to_string(),
            kind: fields[1].parse()?,
            kernel: num(fields[2])?,
            c_in: num(fields[3])?,
            c_out: num(fields[4])?,
        });
    }
    ckpt.validate_graph()?;
    Ok(ckpt)
}

pub fn load_arch(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    parse_arch(&fs::read_to_string(path)?)
}

pub fn format_arch(ckpt: &ModelCheckpoint) -> String {
    let mut out = String::new();
    for l in &ckpt.layers {
        writeln!(out, "{} {} {} {} {}", l.name, l.kind, l.kernel, l.c_in, l.c_out).unwrap();
    }
    for (p, c) in &ckpt.edges {
        writeln!(out, "edge {p} {c}").unwrap();
    }
    out
}
