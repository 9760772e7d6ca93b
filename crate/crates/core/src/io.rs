//! File formats: frames (binary or CSV grid with a JSON sidecar), response
//! functions (CSV samples with JSON metadata) and run reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::imaging::PixelImage;
use crate::lsf::ResponseLsf;
use crate::noise::NoiseParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFormat {
    /// Row-major little-endian `f64`.
    Binary,
    /// One line per row, comma separated.
    Csv,
}

impl FrameFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            FrameFormat::Binary => "bin",
            FrameFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSidecar {
    /// Data file name, relative to the sidecar.
    pub data: String,
    pub format: FrameFormat,
    pub rows: usize,
    pub cols: usize,
    pub delta_s_um: f64,
    pub delta_p_um: f64,
    pub exposure_s: f64,
    pub noise: NoiseParams,
    pub seed: Option<u64>,
}

fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `img` to `data_path` and its sidecar next to it (same stem,
/// `.json`). Returns the sidecar path.
pub fn write_frame(
    img: &PixelImage,
    data_path: &Path,
    format: FrameFormat,
    noise: &NoiseParams,
    seed: Option<u64>,
) -> Result<PathBuf> {
    match format {
        FrameFormat::Binary => {
            let mut bytes = Vec::with_capacity(img.counts().len() * 8);
            for v in img.counts() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(data_path, bytes)?;
        }
        FrameFormat::Csv => {
            let mut out = String::new();
            for row in img.counts().chunks(img.cols()) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            fs::write(data_path, out)?;
        }
    }
    let name = data_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid("frame path has no file name"))?;
    let sidecar = FrameSidecar {
        data: name.to_string(),
        format,
        rows: img.rows(),
        cols: img.cols(),
        delta_s_um: img.delta_s_um,
        delta_p_um: img.delta_p_um,
        exposure_s: img.exposure_s,
        noise: noise.clone(),
        seed,
    };
    let path = sidecar_path(data_path);
    write_json(&path, &sidecar)?;
    Ok(path)
}

/// Reads a frame from its sidecar.
pub fn read_frame(sidecar_path: &Path) -> Result<(PixelImage, FrameSidecar)> {
    let meta: FrameSidecar = read_json(sidecar_path)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let data = dir.join(&meta.data);
    let counts = match meta.format {
        FrameFormat::Binary => {
            let bytes = fs::read(&data)?;
            if bytes.len() % 8 != 0 {
                return Err(invalid(format!("{} is not a whole number of f64 values", data.display())));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
                .collect()
        }
        FrameFormat::Csv => parse_csv_grid(&fs::read_to_string(&data)?, meta.cols)?,
    };
    let img = PixelImage::new(counts, meta.rows, meta.cols, meta.delta_s_um, meta.delta_p_um, meta.exposure_s)?;
    Ok((img, meta))
}

fn parse_csv_grid(text: &str, cols: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = out.len();
        for field in line.split(',') {
            out.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| invalid(format!("line {}: {e}", i + 1)))?,
            );
        }
        if out.len() - before != cols {
            return Err(invalid(format!("line {} has {} values, expected {cols}", i + 1, out.len() - before)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsfMetadata {
    /// CSV file name, relative to the metadata file.
    pub data: String,
    pub s: usize,
    pub delta_s_um: f64,
    pub x0: f64,
    pub patch_id: Option<String>,
    pub iterations: Option<usize>,
}

/// Writes `x,value` rows to `csv_path` and metadata to the `.json` next to
/// it. Returns the metadata path.
pub fn write_lsf(lsf: &ResponseLsf, csv_path: &Path, iterations: Option<usize>) -> Result<PathBuf> {
    let mut out = String::from("x_px,value\n");
    for (x, v) in lsf.coords().iter().zip(lsf.samples()) {
        out.push_str(&format!("{x},{v}\n"));
    }
    fs::write(csv_path, out)?;
    let name = csv_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid("response path has no file name"))?;
    let meta = LsfMetadata {
        data: name.to_string(),
        s: lsf.s(),
        delta_s_um: lsf.delta_s_um(),
        x0: lsf.x0(),
        patch_id: lsf.patch_id().map(str::to_string),
        iterations,
    };
    let path = sidecar_path(csv_path);
    write_json(&path, &meta)?;
    Ok(path)
}

/// Reads a response from its metadata file.
pub fn read_lsf(meta_path: &Path) -> Result<(ResponseLsf, LsfMetadata)> {
    let meta: LsfMetadata = read_json(meta_path)?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(dir.join(&meta.data))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v = line
            .split(',')
            .nth(1)
            .ok_or_else(|| invalid(format!("line {} lacks a value column", i + 1)))?;
        samples.push(v.trim().parse::<f64>().map_err(|e| invalid(format!("line {}: {e}", i + 1)))?);
    }
    let mut lsf = ResponseLsf::new(samples, meta.s, meta.x0, meta.delta_s_um)?;
    if let Some(id) = &meta.patch_id {
        lsf = lsf.with_patch_id(id.clone());
    }
    Ok((lsf, meta))
}

/// Reads one number per line (a header line is skipped when it does not
/// parse).
pub fn read_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(e) => return Err(invalid(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Provenance written next to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// SHA-256 of the canonical JSON form of `config`.
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Noise parameters in effect after defaults were applied.
    pub noise: NoiseParams,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunMetadata {
    pub fn new<C: Serialize>(command: &str, seed: Option<u64>, config: &C, noise: &NoiseParams) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        Ok(RunMetadata {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: config_hash(&value)?,
            config: value,
            noise: noise.clone(),
            warnings: Vec::new(),
            outputs: Vec::new(),
        })
    }
}

/// Hex SHA-256 of the compact JSON serialization (object keys sorted).
pub fn config_hash(value: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes each `(file name, contents)` into `dir` and the metadata as
/// `<stem>.meta.json`. Returns the written paths.
pub fn emit_reports(dir: &Path, stem: &str, files: &[(String, String)], meta: &RunMetadata) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| unwritable(dir, e))?;
    let mut written = Vec::new();
    let mut meta = meta.clone();
    for (name, contents) in files {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| unwritable(&path, e))?;
        f.write_all(contents.as_bytes()).map_err(|e| unwritable(&path, e))?;
        meta.outputs.push(name.clone());
        written.push(path);
    }
    let path = dir.join(format!("{stem}.meta.json"));
    write_json(&path, &meta).map_err(|e| match e {
        Error::Io(io) => unwritable(&path, io),
        other => other,
    })?;
    written.push(path);
    Ok(written)
}

fn unwritable(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
