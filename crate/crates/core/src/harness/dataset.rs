//! Dataset ingestion (CSV and `PCPD` binary) and the synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::normalize_f32;
use crate::error::{PcpError, Result};

const PCPD_MAGIC: &[u8; 4] = b"PCPD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Pcpd,
}

impl DataFormat {
    /// Guess from the file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Pcpd,
        }
    }
}

/// Row-major sample matrix with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(PcpError::DimensionMismatch {
                expected: dim,
                got: features.len(),
            });
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(PcpError::DimensionMismatch {
                    expected: n,
                    got: l.len(),
                });
            }
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = (0..self.dim)
            .map(|j| format!("f{j}"))
            .collect::<Vec<_>>()
            .join(",");
        if self.labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for i in 0..self.len() {
            let cells: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            if let Some(l) = &self.labels {
                out.push_str(&format!(",{}", l[i]));
            }
            out.push('\n');
        }
        out
    }

    /// `PCPD`: magic, u32 N, u32 D, u8 has_labels, N*D LE f32, then N LE i32
    /// labels when present.
    pub fn to_pcpd_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(13 + self.features.len() * 4 + n * 4);
        out.extend_from_slice(PCPD_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.labels.is_some() as u8);
        for x in &self.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for &y in l {
                out.extend_from_slice(&(y as i32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path, format: DataFormat) -> Result<()> {
        let bytes = match format {
            DataFormat::Csv => self.to_csv_string().into_bytes(),
            DataFormat::Pcpd => self.to_pcpd_bytes(),
        };
        fs::write(path, bytes).map_err(|e| PcpError::io(path, e))
    }
}

fn check_size(n: usize, location: &str) -> Result<()> {
    if n < 2 {
        return Err(PcpError::ingest(location, format!("need at least 2 samples, found {n}")));
    }
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| PcpError::ingest("line 1", e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let has_labels = names.last() == Some(&"label");
    let dim = names.len() - has_labels as usize;
    if dim == 0 {
        return Err(PcpError::ingest("line 1", "header has no feature columns"));
    }
    for (j, name) in names[..dim].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(PcpError::ingest(
                "line 1",
                format!("column {j} is named {name:?}, expected \"f{j}\""),
            ));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = format!("line {}", r + 2);
        let record = record.map_err(|e| PcpError::ingest(line.clone(), e.to_string()))?;
        if record.len() != names.len() {
            return Err(PcpError::ingest(
                line,
                format!("expected {} cells, found {}", names.len(), record.len()),
            ));
        }
        for cell in record.iter().take(dim) {
            let v: f32 = cell
                .parse()
                .map_err(|_| PcpError::ingest(line.clone(), format!("bad number {cell:?}")))?;
            if !v.is_finite() {
                return Err(PcpError::ingest(line.clone(), "non-finite value"));
            }
            features.push(v);
        }
        if has_labels {
            let cell = &record[dim];
            let y: usize = cell
                .parse()
                .map_err(|_| PcpError::ingest(line.clone(), format!("bad label {cell:?}")))?;
            labels.push(y);
        }
    }
    check_size(features.len() / dim, "end of file")?;
    Dataset::new(dim, features, has_labels.then_some(labels))
}

pub fn parse_pcpd(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 13 || &bytes[..4] != PCPD_MAGIC {
        return Err(PcpError::ingest("offset 0", "missing PCPD magic"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let has_labels = match bytes[12] {
        0 => false,
        1 => true,
        b => return Err(PcpError::ingest("offset 12", format!("has_labels byte {b}"))),
    };
    if dim == 0 {
        return Err(PcpError::ingest("offset 8", "zero dimension"));
    }
    let expected = 13 + n * dim * 4 + if has_labels { n * 4 } else { 0 };
    if bytes.len() != expected {
        return Err(PcpError::ingest(
            "offset 13",
            format!("expected {expected} bytes for {n}x{dim}, found {}", bytes.len()),
        ));
    }
    check_size(n, "offset 4")?;
    let body = &bytes[13..13 + n * dim * 4];
    let features: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(k) = features.iter().position(|v| !v.is_finite()) {
        return Err(PcpError::ingest(format!("offset {}", 13 + 4 * k), "non-finite value"));
    }
    let labels = if has_labels {
        let mut out = Vec::with_capacity(n);
        for (k, c) in bytes[13 + n * dim * 4..].chunks_exact(4).enumerate() {
            let y = i32::from_le_bytes(c.try_into().unwrap());
            if y < 0 {
                return Err(PcpError::ingest(
                    format!("offset {}", 13 + n * dim * 4 + 4 * k),
                    format!("negative label {y}"),
                ));
            }
            out.push(y as usize);
        }
        Some(out)
    } else {
        None
    };
    Dataset::new(dim, features, labels)
}

/// Read a dataset; `format` defaults to a guess from the extension.
pub fn load_dataset(path: &Path, format: Option<DataFormat>) -> Result<Dataset> {
    let format = format.unwrap_or_else(|| DataFormat::from_path(path));
    let bytes = fs::read(path).map_err(|e| PcpError::ingest(path.display().to_string(), e.to_string()))?;
    let tag = |e: PcpError| match e {
        PcpError::IngestError { location, message } => PcpError::IngestError {
            location: format!("{}:{location}", path.display()),
            message,
        },
        e => e,
    };
    match format {
        DataFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|_| PcpError::ingest(path.display().to_string(), "not UTF-8"))?;
            parse_csv(&text).map_err(tag)
        }
        DataFormat::Pcpd => parse_pcpd(&bytes).map_err(tag),
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DataFormat>,
}

impl DataSource {
    /// Source with the format inferred from the extension.
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            format: None,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        load_dataset(&self.path, self.format)
    }
}

/// Gaussian classes around random centers on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Expected norm of the noise added to a class center before the sample
    /// is projected back onto the sphere; larger means more overlap.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            dim: 32,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Labeled train and test sets sharing class centers, rows shuffled.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes == 0 || self.dim == 0 || self.train_per_class == 0 {
            return Err(PcpError::ConfigError(format!("degenerate synthetic spec {self:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers: Vec<Vec<f32>> = (0..self.classes)
            .map(|_| {
                let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize_f32(&raw)
            })
            .collect::<Result<_>>()?;
        let sigma = self.spread / (self.dim as f64).sqrt();
        let draw = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut labels: Vec<usize> = (0..self.classes)
                .flat_map(|c| std::iter::repeat_n(c, per_class))
                .collect();
            labels.shuffle(rng);
            let mut features = Vec::with_capacity(labels.len() * self.dim);
            for &c in &labels {
                let noisy: Vec<f64> = centers[c]
                    .iter()
                    .map(|&m| {
                        let e: f64 = StandardNormal.sample(rng);
                        m as f64 + sigma * e
                    })
                    .collect();
                features.extend(normalize_f32(&noisy)?);
            }
            Dataset::new(self.dim, features, Some(labels))
        };
        let train = draw(self.train_per_class, &mut rng)?;
        let test = if self.test_per_class > 0 {
            draw(self.test_per_class, &mut rng)?
        } else {
            Dataset {
                dim: self.dim,
                features: Vec::new(),
                labels: Some(Vec::new()),
            }
        };
        Ok((train, test))
    }
}
