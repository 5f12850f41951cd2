//! Text checkpoint format for [`EncoderNet`] parameters.
//!
//! ```text
//! ddl-checkpoint 1
//! activation tanh
//! tensor layer0.weight 64 32
//! <64 lines of 32 space-separated values>
//! tensor layer0.bias 1 64
//! <1 line>
//! ...
//! tensor head.weight 100 16
//! <100 lines>
//! ```
//!
//! Every value is written in scientific notation with 17 significant digits
//! (`{:.16e}`), which round-trips `f64` exactly. Biases are stored as 1-row
//! tensors. Layers are numbered from the input side; `head.weight` is last.
//! Lines starting with `#` are ignored on load.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::encoder::{Activation, Dense, EncoderNet};
use crate::error::{DdlError, Result};

pub const MAGIC: &str = "ddl-checkpoint";
pub const VERSION: u32 = 1;

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    writeln!(out, "tensor {name} {rows} {cols}").unwrap();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|&x| format_f64(x)).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

pub fn to_string(net: &EncoderNet) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "activation {}", net.activation.name()).unwrap();
    for (i, l) in net.layers.iter().enumerate() {
        let (r, c) = l.weight.dim();
        write_tensor(&mut out, &format!("layer{i}.weight"), r, c, l.weight.as_slice().unwrap());
        write_tensor(&mut out, &format!("layer{i}.bias"), 1, l.bias.len(), l.bias.as_slice().unwrap());
    }
    let (r, c) = net.head.dim();
    write_tensor(&mut out, "head.weight", r, c, net.head.as_slice().unwrap());
    out
}

pub fn from_str(text: &str) -> Result<EncoderNet> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let perr = |line: usize, msg: String| DdlError::Parse(format!("checkpoint line {}: {msg}", line + 1));

    let (ln, header) = lines.next().ok_or_else(|| DdlError::Parse("empty checkpoint".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(perr(ln, format!("expected `{MAGIC}` header")));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| perr(ln, "missing version".into()))?;
    if version != VERSION {
        return Err(perr(ln, format!("unsupported version {version}")));
    }
    let (ln, act_line) = lines.next().ok_or_else(|| DdlError::Parse("missing activation".into()))?;
    let activation = act_line
        .strip_prefix("activation ")
        .and_then(|s| Activation::from_name(s.trim()))
        .ok_or_else(|| perr(ln, format!("bad activation line `{act_line}`")))?;

    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let mut p = line.split_whitespace();
        if p.next() != Some("tensor") {
            return Err(perr(ln, format!("expected tensor header, got `{line}`")));
        }
        let name = p.next().ok_or_else(|| perr(ln, "missing tensor name".into()))?.to_string();
        let rows: usize = p.next().and_then(|v| v.parse().ok()).ok_or_else(|| perr(ln, "bad rows".into()))?;
        let cols: usize = p.next().and_then(|v| v.parse().ok()).ok_or_else(|| perr(ln, "bad cols".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rl, row) = lines.next().ok_or_else(|| perr(ln, format!("`{name}` truncated")))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|e| perr(rl, format!("`{tok}`: {e}")))?);
            }
            if data.len() - before != cols {
                return Err(perr(rl, format!("`{name}` row has {} values, expected {cols}", data.len() - before)));
            }
        }
        tensors.push((name, rows, cols, data));
    }

    let head_pos = tensors
        .iter()
        .position(|t| t.0 == "head.weight")
        .ok_or_else(|| DdlError::Parse("checkpoint has no head.weight".into()))?;
    let (_, hr, hc, hd) = tensors.remove(head_pos);
    let head = Array2::from_shape_vec((hr, hc), hd).map_err(|e| DdlError::Parse(e.to_string()))?;

    let mut layers = Vec::new();
    let mut it = tensors.into_iter();
    let mut idx = 0;
    while let Some((wname, wr, wc, wd)) = it.next() {
        if wname != format!("layer{idx}.weight") {
            return Err(DdlError::Parse(format!("expected layer{idx}.weight, found {wname}")));
        }
        let (bname, br, bc, bd) = it
            .next()
            .ok_or_else(|| DdlError::Parse(format!("missing layer{idx}.bias")))?;
        if bname != format!("layer{idx}.bias") || br != 1 || bc != wr {
            return Err(DdlError::Parse(format!("bad bias tensor for layer{idx}")));
        }
        layers.push(Dense {
            weight: Array2::from_shape_vec((wr, wc), wd).map_err(|e| DdlError::Parse(e.to_string()))?,
            bias: Array1::from_vec(bd),
        });
        idx += 1;
    }
    EncoderNet::from_parts(layers, activation, head)
}

pub fn save(net: &EncoderNet, path: &Path) -> Result<()> {
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_string(net))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EncoderNet> {
    from_str(&std::fs::read_to_string(path)?)
}
