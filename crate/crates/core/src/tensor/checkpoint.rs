//! Plain-text parameter container.
//!
//! ```text
//! cgfl-ckpt-v1
//! tensors <count>
//! <name> <rows> <cols>
//! <row-major values separated by single spaces>
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "cgfl-ckpt-v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a named tensor. Names must not contain whitespace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "bad checkpoint name {name:?}"
        );
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but fails on a missing name or an unexpected shape.
    pub fn require(&self, name: &str, shape: (usize, usize)) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(Error::Integrity(format!(
                "checkpoint tensor {name:?} is {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        writeln!(w, "tensors {}", self.entries.len())?;
        for (name, t) in &self.entries {
            writeln!(w, "{name} {} {}", t.rows(), t.cols())?;
            let mut first = true;
            for v in t.data() {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                write!(w, "{v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from(r: impl BufRead, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(parse_err(
                    0,
                    format!("unexpected end of file, expected {what}"),
                )),
            }
        };

        let (n, header) = next("header")?;
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(parse_err(n, format!("bad header {header:?}")));
        }
        let (n, count_line) = next("tensor count")?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| parse_err(n, format!("bad count line {count_line:?}")))?;

        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let (n, meta) = next("tensor descriptor")?;
            let parts: Vec<&str> = meta.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(parse_err(n, format!("bad descriptor {meta:?}")));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| parse_err(n, format!("bad rows {rows:?}")))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| parse_err(n, format!("bad cols {cols:?}")))?;
            let (n, values) = next("tensor values")?;
            let data = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| parse_err(n, format!("bad value {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(rows, cols, data).map_err(|e| parse_err(n, e.to_string()))?;
            if ckpt.get(name).is_some() {
                return Err(parse_err(n, format!("duplicate tensor {name:?}")));
            }
            ckpt.insert(name, t);
        }
        Ok(ckpt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_from(BufReader::new(File::open(path)?), path)
    }
}
