//! Plain-text network checkpoints.
//!
//! ```text
//! rlqr-network 1
//! output_scale <len> <v>...
//! layers <count>
//! layer <rows> <cols> <activation>
//! w <rows*cols values, row-major>
//! b <rows values>
//! ...
//! ```
//!
//! Values are written as shortest round-trip `f64` decimals, so a
//! write/read cycle is lossless for `f64` and `f32` networks.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use super::{Activation, Layer, NetworkParams};
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

pub const CHECKPOINT_MAGIC: &str = "rlqr-network";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

fn write_values<W: Write, T: Scalar>(out: &mut W, tag: &str, values: impl Iterator<Item = T>) -> Result<()> {
    write!(out, "{tag}").map_err(io_err)?;
    for v in values {
        write!(out, " {}", to_f64(v)).map_err(io_err)?;
    }
    writeln!(out).map_err(io_err)
}

pub fn write_network<W: Write, T: Scalar>(out: &mut W, net: &NetworkParams<T>) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").map_err(io_err)?;
    write_values(
        out,
        &format!("output_scale {}", net.output_scale.len()),
        net.output_scale.iter().copied(),
    )?;
    writeln!(out, "layers {}", net.depth()).map_err(io_err)?;
    for layer in &net.layers {
        writeln!(out, "layer {} {} {}", layer.out_dim(), layer.in_dim(), layer.activation).map_err(io_err)?;
        write_values(out, "w", layer.weight.transpose().iter().copied())?;
        write_values(out, "b", layer.bias.iter().copied())?;
    }
    Ok(())
}

struct Lines<R> {
    inner: R,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_tokens(&mut self, tag: &str) -> Result<Vec<String>> {
        let mut buf = String::new();
        loop {
            buf.clear();
            self.line += 1;
            if self.inner.read_line(&mut buf).map_err(io_err)? == 0 {
                return Err(Error::Format(format!("unexpected end of file, expected `{tag}`")));
            }
            if !buf.trim().is_empty() {
                break;
            }
        }
        let mut tokens = buf.split_whitespace().map(str::to_owned);
        match tokens.next() {
            Some(t) if t == tag => Ok(tokens.collect()),
            other => Err(Error::Format(format!(
                "line {}: expected `{tag}`, found `{}`",
                self.line,
                other.unwrap_or_default()
            ))),
        }
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

fn parse_values<T: Scalar>(tokens: &[String], expected: usize, what: &str) -> Result<Vec<T>> {
    if tokens.len() != expected {
        return Err(Error::Format(format!("{what}: expected {expected} values, got {}", tokens.len())));
    }
    tokens.iter().map(|t| parse::<f64>(t, what).map(lit)).collect()
}

pub fn read_network<R: BufRead, T: Scalar>(input: R) -> Result<NetworkParams<T>> {
    let mut lines = Lines { inner: input, line: 0 };
    let header = lines.next_tokens(CHECKPOINT_MAGIC)?;
    let version: u32 = parse(header.first().map(String::as_str).unwrap_or(""), "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let scale = lines.next_tokens("output_scale")?;
    let len: usize = parse(scale.first().map(String::as_str).unwrap_or(""), "output_scale length")?;
    let output_scale = DVector::from_vec(parse_values(&scale[1..], len, "output_scale")?);
    let count: usize = parse(lines.next_tokens("layers")?.first().map(String::as_str).unwrap_or(""), "layer count")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let head = lines.next_tokens("layer")?;
        if head.len() != 3 {
            return Err(Error::Format("layer header needs rows, cols, activation".into()));
        }
        let rows: usize = parse(&head[0], "rows")?;
        let cols: usize = parse(&head[1], "cols")?;
        let activation: Activation = head[2].parse()?;
        let w = parse_values(&lines.next_tokens("w")?, rows * cols, "weights")?;
        let b = parse_values(&lines.next_tokens("b")?, rows, "bias")?;
        layers.push(Layer {
            weight: DMatrix::from_row_slice(rows, cols, &w),
            bias: DVector::from_vec(b),
            activation,
        });
    }
    NetworkParams::new(layers, output_scale).map_err(|e| Error::Format(e.to_string()))
}
