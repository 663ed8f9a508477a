//! Datasets: the two-ring synthetic task, CSV ingestion, optional IDX
//! (MNIST) loading and simple statistics.
//!
//! Randomness comes from xoshiro256++ seeded with `seed_from_u64`; Gaussian
//! draws use `rand_distr::StandardNormal`. Streams are reproducible within
//! this implementation, not across languages.
//!
//! # CSV schema
//!
//! A header row `f0,f1,...,f{m-1},y` followed by one row per sample. The
//! label column `y` holds a class index (`LabelKind::Class`), a real value
//! (`LabelKind::Value`) or is absent (`LabelKind::None`).

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

use crate::attacks::Norm;
use crate::error::{Error, Result};
use crate::model::{Label, Sample};

/// Inner class radius cut-off factor.
pub const MARGIN_FACTOR: f64 = 1.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub margin: f64,
    pub radius: f64,
}

impl SyntheticSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            margin: MARGIN_FACTOR,
            radius: std::f64::consts::SQRT_2,
        }
    }
}

/// `X ~ N(0, I_2)`, class 0 inside radius `sqrt 2`, class 1 outside; points
/// with `||X|| in (sqrt2/1.3, 1.3 sqrt2)` are rejected to open a margin.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Vec<Sample> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let (lo, hi) = (spec.radius / spec.margin, spec.radius * spec.margin);
    let mut out = Vec::with_capacity(spec.n);
    while out.len() < spec.n {
        let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        if r > lo && r < hi {
            continue;
        }
        let class = usize::from(r > spec.radius);
        out.push(Sample::class(x, class));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Class,
    Value,
    None,
}

pub fn parse_csv(text: &str, labels: LabelKind) -> Result<Vec<Sample>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let features = match labels {
        LabelKind::None => cols.len(),
        _ => {
            if cols.last() != Some(&"y") {
                return Err(Error::Parse {
                    line: 1,
                    message: "last header column must be `y`".into(),
                });
            }
            cols.len() - 1
        }
    };
    for (i, c) in cols.iter().take(features).enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column f{i}, found `{c}`"),
            });
        }
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let x = fields[..features]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line: line_no,
                    message: format!("bad feature value `{f}`"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let y = match labels {
            LabelKind::None => Label::None,
            LabelKind::Class => Label::Class(fields[features].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad class label `{}`", fields[features]),
            })?),
            LabelKind::Value => match fields[features].parse::<f64>() {
                Ok(v) if v.is_finite() => Label::Value(v),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("bad label `{}`", fields[features]),
                    })
                }
            },
        };
        out.push(Sample::new(x, y));
    }
    if let Some(first) = out.first() {
        let m = first.dim();
        if let Some(pos) = out.iter().position(|z| z.dim() != m) {
            return Err(Error::Parse {
                line: pos + 2,
                message: "inconsistent feature dimension".into(),
            });
        }
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>, labels: LabelKind) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, labels)
}

/// CSV text for `data`; an empty dataset yields a header with `dim` features.
pub fn to_csv(data: &[Sample], dim: usize) -> String {
    let m = data.first().map_or(dim, Sample::dim);
    let has_label = data.first().is_none_or(|z| z.y != Label::None);
    let mut header: Vec<String> = (0..m).map(|i| format!("f{i}")).collect();
    if has_label {
        header.push("y".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for z in data {
        let mut row: Vec<String> = z.x.iter().map(|v| v.to_string()).collect();
        match &z.y {
            Label::Class(k) => row.push(k.to_string()),
            Label::Value(v) => row.push(v.to_string()),
            Label::None => {}
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, data: &[Sample], dim: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(data, dim)).map_err(|e| Error::io(path, e))
}

/// `E ||X||_p` over the dataset.
pub fn norm_stats(data: &[Sample], norm: Norm) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput { context: "norm_stats" });
    }
    Ok(data.iter().map(|z| norm.of(&z.x)).sum::<f64>() / data.len() as f64)
}

/// SHA-256 of the CSV serialization, hex encoded.
pub fn dataset_hash(data: &[Sample]) -> String {
    let digest = Sha256::digest(to_csv(data, 0).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Parse {
            line: 0,
            message: "truncated IDX header".into(),
        })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Load an IDX image/label pair (the MNIST format, uncompressed). Pixels are
/// scaled to `[0, 1]`; at most `limit` samples are returned.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, limit: usize) -> Result<Vec<Sample>> {
    let img = read_all(images.as_ref())?;
    let lab = read_all(labels.as_ref())?;
    let bad = |message: &str| Error::Parse {
        line: 0,
        message: message.into(),
    };
    if read_be_u32(&img, 0)? != 0x0803 || read_be_u32(&lab, 0)? != 0x0801 {
        return Err(bad("not an IDX ubyte image/label pair"));
    }
    let n = read_be_u32(&img, 4)? as usize;
    let rows = read_be_u32(&img, 8)? as usize;
    let cols = read_be_u32(&img, 12)? as usize;
    if read_be_u32(&lab, 4)? as usize != n {
        return Err(bad("image and label counts differ"));
    }
    let m = rows * cols;
    if img.len() < 16 + n * m || lab.len() < 8 + n {
        return Err(bad("truncated IDX payload"));
    }
    Ok((0..n.min(limit))
        .map(|i| {
            let x = img[16 + i * m..16 + (i + 1) * m].iter().map(|&p| p as f64 / 255.0).collect();
            Sample::class(x, lab[8 + i] as usize)
        })
        .collect())
}
