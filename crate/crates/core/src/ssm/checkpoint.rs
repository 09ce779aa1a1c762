//! Parameter checkpoint: a line-oriented text file of named tensors.
//!
//! ```text
//! flowcast-checkpoint 1
//! hyper {"n_series":5,"d_x":8,...}
//! meta {...}                      # free-form JSON, one line
//! tensor <name> <rows> <cols>
//! <hex f64 bits, column-major, space separated>
//! ...
//! end
//! ```
//!
//! Values are stored as the hexadecimal IEEE-754 bit pattern so a
//! save/load round trip is bitwise exact. Tensor order and names follow
//! [`ModelTheta::tensors`].

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde_json::Value;

use super::model::{Hyper, ModelTheta};
use crate::error::{Error, Result};

const MAGIC: &str = "flowcast-checkpoint";
const VERSION: u32 = 1;

pub fn to_string(model: &ModelTheta, meta: &Value) -> Result<String> {
    let mut out = format!("{MAGIC} {VERSION}\n");
    out.push_str(&format!("hyper {}\n", serde_json::to_string(&model.hyper)?));
    out.push_str(&format!("meta {}\n", serde_json::to_string(meta)?));
    for t in model.tensors() {
        out.push_str(&format!("tensor {} {} {}\n", t.name, t.rows, t.cols));
        let words: Vec<String> = t.data.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn save(path: &Path, model: &ModelTheta, meta: &Value) -> Result<()> {
    fs::write(path, to_string(model, meta)?)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_reader<R: Read>(reader: R) -> Result<(ModelTheta, Value)> {
    let mut lines = BufReader::new(reader).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| bad("unexpected end of file"))
    };
    let header = next()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad("not a flowcast checkpoint"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hyper_line = next()?;
    let hyper: Hyper = serde_json::from_str(
        hyper_line
            .strip_prefix("hyper ")
            .ok_or_else(|| bad("expected hyper line"))?,
    )?;
    let meta_line = next()?;
    let meta: Value = serde_json::from_str(
        meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| bad("expected meta line"))?,
    )?;

    let mut model = ModelTheta::zeros(hyper, 0.0, 0.0)?;
    let expected: Vec<(String, usize, usize)> = model
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.rows, t.cols))
        .collect();
    let mut targets = model.tensors_mut();
    for (i, (name, rows, cols)) in expected.iter().enumerate() {
        let head = next()?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "tensor" {
            return Err(bad(format!("expected tensor header, got `{head}`")));
        }
        if fields[1] != name {
            return Err(bad(format!("expected tensor `{name}`, found `{}`", fields[1])));
        }
        let (r, c): (usize, usize) = (
            fields[2].parse().map_err(|_| bad("bad row count"))?,
            fields[3].parse().map_err(|_| bad("bad column count"))?,
        );
        if (r, c) != (*rows, *cols) {
            return Err(bad(format!(
                "tensor `{name}` has shape {r}x{c}, model expects {rows}x{cols}"
            )));
        }
        let body = next()?;
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("tensor `{name}` has a malformed value")))?;
        if values.len() != rows * cols {
            return Err(bad(format!("tensor `{name}` has {} values", values.len())));
        }
        targets[i].1.copy_from_slice(&values);
    }
    drop(targets);
    if next()?.trim() != "end" {
        return Err(bad("missing end marker"));
    }
    model.validate()?;
    Ok((model, meta))
}

pub fn load(path: &Path) -> Result<(ModelTheta, Value)> {
    from_reader(fs::File::open(path)?)
}
