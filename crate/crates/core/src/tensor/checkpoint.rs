//! Text checkpoint format.
//!
//! ```text
//! # lge-checkpoint v1
//! net <name>
//! widths <w0> <w1> ... <wL>
//! activation relu|tanh
//! params <count>
//! <one parameter per line, shortest round-trip decimal>
//! scalar <name> <value>
//! ```
//!
//! `net` blocks and `scalar` lines may appear in any order; names are
//! unique within a file. Values are written with Rust's shortest
//! round-trip formatting, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, Mlp};
use crate::error::{Error, Result};

const HEADER: &str = "# lge-checkpoint v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub nets: BTreeMap<String, Mlp>,
    pub scalars: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_net(mut self, name: &str, net: &Mlp) -> Self {
        self.nets.insert(name.to_string(), net.clone());
        self
    }

    pub fn with_scalar(mut self, name: &str, value: f64) -> Self {
        self.scalars.insert(name.to_string(), value);
        self
    }

    pub fn net(&self, name: &str) -> Result<&Mlp> {
        self.nets
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing network '{name}'")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar '{name}'")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        for (name, net) in &self.nets {
            let _ = writeln!(s, "net {name}");
            let widths: Vec<String> = net.widths().iter().map(|w| w.to_string()).collect();
            let _ = writeln!(s, "widths {}", widths.join(" "));
            let _ = writeln!(s, "activation {}", net.activation().name());
            let _ = writeln!(s, "params {}", net.params().len());
            for p in net.params() {
                let _ = writeln!(s, "{p:?}");
            }
        }
        for (name, v) in &self.scalars {
            let _ = writeln!(s, "scalar {name} {v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(Error::Checkpoint(format!("missing header '{HEADER}'"))),
        }
        let mut out = Checkpoint::new();
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
        while let Some((ln, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("net") => {
                    let name = parts.next().ok_or_else(|| bad(ln, "net without name"))?;
                    let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
                        let (ln, l) = lines.next().ok_or_else(|| bad(ln, "truncated net block"))?;
                        let mut it = l.split_whitespace();
                        if it.next() != Some(key) {
                            return Err(bad(ln, &format!("expected '{key}'")));
                        }
                        Ok((ln, it.map(str::to_string).collect()))
                    };
                    let (wl, widths) = field("widths")?;
                    let widths = widths
                        .iter()
                        .map(|w| w.parse::<usize>().map_err(|_| bad(wl, "bad width")))
                        .collect::<Result<Vec<_>>>()?;
                    let (al, act) = field("activation")?;
                    let activation = Activation::parse(act.first().map(String::as_str).unwrap_or(""))
                        .map_err(|e| bad(al, &e.to_string()))?;
                    let (pl, count) = field("params")?;
                    let count: usize = count
                        .first()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| bad(pl, "bad parameter count"))?;
                    let mut params = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (vl, v) = lines.next().ok_or_else(|| bad(pl, "truncated parameters"))?;
                        params.push(v.parse::<f64>().map_err(|_| bad(vl, "bad parameter"))?);
                    }
                    let net = Mlp::from_params(&widths, activation, params).map_err(|e| bad(ln, &e.to_string()))?;
                    if out.nets.insert(name.to_string(), net).is_some() {
                        return Err(bad(ln, &format!("duplicate network '{name}'")));
                    }
                }
                Some("scalar") => {
                    let name = parts.next().ok_or_else(|| bad(ln, "scalar without name"))?;
                    let value: f64 = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(ln, "bad scalar value"))?;
                    if out.scalars.insert(name.to_string(), value).is_some() {
                        return Err(bad(ln, &format!("duplicate scalar '{name}'")));
                    }
                }
                _ => return Err(bad(ln, &format!("unexpected '{line}'"))),
            }
        }
        Ok(out)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::parse(&text)
}
