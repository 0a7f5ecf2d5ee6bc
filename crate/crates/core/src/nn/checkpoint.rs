//! Plain-text checkpoint format.
//!
//! ```text
//! tsrl-checkpoint v1
//! <name>\t<dim0>x<dim1>...\t<v0> <v1> ...
//! ```
//!
//! One line per tensor in parameter order. Values use Rust's shortest
//! round-trip float formatting, so save → load is bit-exact. Rank-0 tensors
//! write an empty shape field. Every loaded tensor is marked trainable.

use std::fs;
use std::path::Path;

use tsrl_autodiff::{ParameterSet, Tensor};

use crate::error::{Error, Result};

const MAGIC: &str = "tsrl-checkpoint v1";

pub fn write_checkpoint(params: &ParameterSet) -> String {
    let mut out = String::from(MAGIC);
    out.push('\n');
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = t.values().iter().map(f64::to_string).collect();
        out.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), values.join(" ")));
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<ParameterSet> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Data("not a tsrl checkpoint (bad header)".into()));
    }
    let mut params = ParameterSet::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let row = i + 2;
        let parse_err = |message: String| Error::Parse { row, message };
        let mut fields = line.split('\t');
        let (Some(name), Some(shape), Some(values), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(parse_err("expected three tab-separated fields".into()));
        };
        let shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| parse_err(format!("bad dimension `{d}`"))))
                .collect::<Result<Vec<_>>>()?
        };
        let values = values
            .split_ascii_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, values).map_err(|e| parse_err(e.to_string()))?;
        params
            .insert(name, tensor.with_grad())
            .map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}
