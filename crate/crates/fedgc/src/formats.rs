//! On-disk formats.
//!
//! Tensor files (`.fgc`), all integers and floats little-endian:
//!
//! ```text
//! b"FGC1"  u32 tensor_count
//! tensor_count × (u32 rows, u32 cols)
//! all tensor data, row-major f64, in header order
//! ```
//!
//! A backbone is stored as `[W1, b1, W2, b2, …]` with biases as `n × 1` tensors.
//!
//! Sample files are plain text: a header `fgc-samples <count> <dim>` followed by one
//! `label,x1,…,xd` line per sample, floats written with 17 significant digits.

use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use fedgc_core::data::{Sample, VerificationPair};
use fedgc_core::linalg::{FeatureVector, Matrix};
use fedgc_core::nn::{Activation, BackboneParams, Layer};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"FGC1";
const SAMPLES_HEADER: &str = "fgc-samples";

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        message: message.into(),
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[&Matrix]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
    }
    for t in tensors {
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a tensor file. `origin` only labels errors.
pub fn read_tensors<R: Read>(mut r: R, origin: &Path) -> Result<Vec<Matrix>> {
    let truncated = |e: std::io::Error| bad(origin, format!("truncated tensor file ({e})"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(bad(origin, "not an FGC1 tensor file"));
    }
    let count = read_u32(&mut r).map_err(truncated)? as usize;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rows = read_u32(&mut r).map_err(truncated)? as usize;
        let cols = read_u32(&mut r).map_err(truncated)? as usize;
        shapes.push((rows, cols));
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut buf = [0u8; 8];
    for (rows, cols) in shapes {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(truncated)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err(origin))?;
    if !rest.is_empty() {
        return Err(bad(origin, format!("{} trailing bytes after tensor data", rest.len())));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[&Matrix]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_tensors(BufWriter::new(f), tensors).map_err(io_err(path))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Matrix>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_tensors(std::io::BufReader::new(f), path)
}

pub fn backbone_tensors(theta: &BackboneParams) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(2 * theta.layers().len());
    for l in theta.layers() {
        out.push(l.weight.clone());
        out.push(Matrix::from_vec(l.bias.dim(), 1, l.bias.0.clone()).expect("bias column"));
    }
    out
}

pub fn backbone_from_tensors(tensors: Vec<Matrix>, activation: Activation, origin: &Path) -> Result<BackboneParams> {
    if tensors.is_empty() || !tensors.len().is_multiple_of(2) {
        return Err(bad(origin, format!("backbone needs weight/bias pairs, found {} tensors", tensors.len())));
    }
    let mut layers = Vec::with_capacity(tensors.len() / 2);
    let mut it = tensors.into_iter();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        if bias.cols() != 1 {
            return Err(bad(origin, format!("bias tensor must have one column, has {}", bias.cols())));
        }
        layers.push(Layer {
            weight,
            bias: FeatureVector(bias.into_vec()),
        });
    }
    Ok(BackboneParams::new(layers, activation)?)
}

pub fn save_backbone(path: &Path, theta: &BackboneParams) -> Result<()> {
    let tensors = backbone_tensors(theta);
    save_tensors(path, &tensors.iter().collect::<Vec<_>>())
}

pub fn load_backbone(path: &Path, activation: Activation) -> Result<BackboneParams> {
    backbone_from_tensors(load_tensors(path)?, activation, path)
}

pub fn write_samples<W: Write>(mut w: W, dim: usize, samples: &[Sample]) -> std::io::Result<()> {
    writeln!(w, "{SAMPLES_HEADER} {} {dim}", samples.len())?;
    for s in samples {
        write!(w, "{}", s.label)?;
        for v in s.input.iter() {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Reads a sample file, returning the declared dimension and the samples.
pub fn read_samples<R: BufRead>(r: R, origin: &Path) -> Result<(usize, Vec<Sample>)> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(io_err(origin))?,
        None => return Err(bad(origin, "empty sample file")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields.as_slice() {
        [tag, n, d] if *tag == SAMPLES_HEADER => (
            n.parse::<usize>().map_err(|_| bad(origin, "bad sample count in header"))?,
            d.parse::<usize>().map_err(|_| bad(origin, "bad dimension in header"))?,
        ),
        _ => return Err(bad(origin, format!("expected `{SAMPLES_HEADER} <count> <dim>` header"))),
    };
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for (idx, line) in lines {
        let line = line.map_err(io_err(origin))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| bad(origin, format!("line {}: {m}", idx + 1));
        let mut parts = line.split(',');
        let label = parts
            .next()
            .and_then(|l| l.trim().parse::<usize>().ok())
            .ok_or_else(|| at("bad label".into()))?;
        let input = parts
            .map(|p| p.trim().parse::<f64>().map_err(|_| at(format!("bad value `{p}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if input.len() != dim {
            return Err(at(format!("expected {dim} values, found {}", input.len())));
        }
        samples.push(Sample {
            input: FeatureVector(input),
            label,
        });
    }
    if samples.len() != count {
        return Err(bad(origin, format!("header declares {count} samples, found {}", samples.len())));
    }
    Ok((dim, samples))
}

pub fn save_samples(path: &Path, dim: usize, samples: &[Sample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_samples(BufWriter::new(f), dim, samples).map_err(io_err(path))
}

pub fn load_samples(path: &Path) -> Result<(usize, Vec<Sample>)> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_samples(std::io::BufReader::new(f), path)
}

/// Verification pairs as CSV `a,b,same` with indices into the test samples.
pub fn write_pairs<W: Write>(mut w: W, pairs: &[VerificationPair]) -> std::io::Result<()> {
    writeln!(w, "a,b,same")?;
    for p in pairs {
        writeln!(w, "{},{},{}", p.a, p.b, u8::from(p.same))?;
    }
    w.flush()
}
