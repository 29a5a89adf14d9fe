//! On-disk formats: reference entropy stores, binary matrices, CSV tables and
//! token grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use extravar_core::model::{Generation, TokenMap};
use extravar_core::reference::{ReferenceEntropyStore, ReferenceMetadata};
use extravar_core::rope::{Band, FrequencyTable};
use extravar_core::Matrix;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const REFERENCE_VERSION: u32 = 1;
pub const MATRIX_MAGIC: &[u8; 4] = b"EXVM";
const RECORD_HEADER: &str = "layer,head,step,entropy";

/// `refs/<config-hash>.entropy` under `root`.
pub fn reference_path(root: &Path, config_hash: &str) -> PathBuf {
    root.join("refs").join(format!("{config_hash}.entropy"))
}

/// Writes `contents` after creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing(format!("{} does not exist", path.display())),
        _ => CliError::io(path, e),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing(format!("{} does not exist", path.display())),
        _ => CliError::io(path, e),
    })?;
    Ok(sha256_hex(&bytes))
}

/// Text rendering of a reference store. Entropies use 17 significant digits.
pub fn render_reference(store: &ReferenceEntropyStore) -> String {
    let m = &store.metadata;
    let mut out = String::new();
    let _ = writeln!(out, "format_version={REFERENCE_VERSION}");
    let _ = writeln!(out, "config_hash={}", m.config_hash);
    let _ = writeln!(out, "train_side={}", m.train_side);
    let _ = writeln!(out, "seed={}", m.seed);
    let _ = writeln!(out, "samples={}", m.samples);
    let _ = writeln!(out, "entries={}", store.len());
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for (&(l, h, k), &v) in store.iter() {
        let _ = writeln!(out, "{l},{h},{k},{v:.16e}");
    }
    out.push_str("end\n");
    out
}

pub fn save_reference(store: &ReferenceEntropyStore, path: &Path) -> Result<()> {
    write_file(path, render_reference(store))
}

pub fn load_reference(path: &Path) -> Result<ReferenceEntropyStore> {
    parse_reference(&read_text(path)?, path)
}

/// Parses [`render_reference`] output; `path` only labels errors.
pub fn parse_reference(text: &str, path: &Path) -> Result<ReferenceEntropyStore> {
    let lines: Vec<&str> = text.lines().collect();
    let err = |line: usize, msg: String| CliError::format(path, line, msg);
    // 1-based line numbers; `line(n)` is `None` past the end
    let line = |n: usize| lines.get(n - 1).copied();
    let header = |n: usize, key: &str| -> Result<&str> {
        let l = line(n).ok_or_else(|| err(n, format!("truncated: missing `{key}=` line")))?;
        match l.split_once('=') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(err(n, format!("expected `{key}=...`, found {l:?}"))),
        }
    };
    let number = |n: usize, key: &str| -> Result<u64> {
        let v = header(n, key)?;
        v.parse().map_err(|_| err(n, format!("{key} is not an integer: {v:?}")))
    };

    let version = header(1, "format_version")?;
    if version != REFERENCE_VERSION.to_string() {
        return Err(err(1, format!("unsupported format version {version}, expected {REFERENCE_VERSION}")));
    }
    let config_hash = header(2, "config_hash")?.to_string();
    let train_side = number(3, "train_side")? as usize;
    let seed = number(4, "seed")?;
    let samples = number(5, "samples")? as usize;
    let entries = number(6, "entries")? as usize;
    match line(7) {
        Some(RECORD_HEADER) => {}
        Some(l) => return Err(err(7, format!("expected `{RECORD_HEADER}`, found {l:?}"))),
        None => return Err(err(7, "truncated: missing record header".into())),
    }
    let mut store = ReferenceEntropyStore::new(ReferenceMetadata {
        config_hash,
        train_side,
        seed,
        samples,
    });
    for n in 8..8 + entries {
        let l = line(n).ok_or_else(|| err(n, format!("truncated: expected {entries} records")))?;
        let bad = || err(n, format!("malformed record {l:?}"));
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        let index = |i: usize| fields[i].parse::<usize>().map_err(|_| bad());
        let (layer, head, step) = (index(0)?, index(1)?, index(2)?);
        let v: f64 = fields[3].parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&v) {
            return Err(err(n, format!("entropy {v} outside [0, 1]")));
        }
        if step == 0 {
            return Err(err(n, "scale steps count from 1".into()));
        }
        if store.lookup(layer, head, step).is_some() {
            return Err(err(n, format!("duplicate key ({layer},{head},{step})")));
        }
        store.insert((layer, head, step), v);
    }
    let n = 8 + entries;
    match line(n) {
        Some("end") => {}
        Some(l) => return Err(err(n, format!("expected `end`, found {l:?}"))),
        None => return Err(err(n, "truncated: missing `end` line".into())),
    }
    if let Some(l) = line(n + 1) {
        return Err(err(n + 1, format!("unexpected content after `end`: {l:?}")));
    }
    Ok(store)
}

/// `EXVM`, then rows, cols and element width as little-endian u32, then
/// row-major little-endian f64 values.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&8u32.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < 16 || &bytes[..4] != MATRIX_MAGIC {
        return Err("not a matrix file (bad magic)".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols, width) = (word(4), word(8), word(12));
    if width != 8 {
        return Err(format!("unsupported element width {width}"));
    }
    let expected = 16 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
}

pub fn save_matrix(m: &Matrix, path: &Path) -> Result<()> {
    write_file(path, encode_matrix(m))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_matrix(&bytes).map_err(|msg| CliError::format(path, 0, msg))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// `axis,j,theta,wavelength,band`, pairs numbered from 1.
pub fn frequency_csv(tables: &[FrequencyTable]) -> String {
    let mut out = String::from("axis,j,theta,wavelength,band\n");
    for t in tables {
        for p in &t.pairs {
            let band = p.band.map(Band::name).unwrap_or("");
            let _ = writeln!(out, "{},{},{:?},{:?},{band}", t.axis.name(), p.index, p.theta, p.wavelength);
        }
    }
    out
}

/// One row per (step, layer, head).
pub fn trace_csv(run: &Generation) -> String {
    let mut out = String::from(
        "step,layer,head,omega,alpha,entropy,variance,reference,norm_high,norm_mid,norm_low,norm_verylow\n",
    );
    for step in &run.trace.steps {
        for h in &step.heads {
            let _ = write!(
                out,
                "{},{},{},{},{:?},{:?},{:?},{}",
                step.step,
                h.layer,
                h.head,
                opt(step.omega),
                h.alpha,
                h.entropy,
                h.variance,
                opt(h.reference)
            );
            for band in Band::ALL {
                let _ = write!(out, ",{}", opt(h.band_norms.get(band)));
            }
            out.push('\n');
        }
    }
    out
}

/// `layer,head,step,alpha,entropy,variance`.
pub fn stats_csv(run: &Generation) -> String {
    let mut out = String::from("layer,head,step,alpha,entropy,variance\n");
    for step in &run.trace.steps {
        for h in &step.heads {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?}",
                h.layer, h.head, step.step, h.alpha, h.entropy, h.variance
            );
        }
    }
    out
}

/// Band query norms of step `k`, averaged over every layer and head in
/// layer-then-head order.
pub fn mean_band_norms(run: &Generation) -> Vec<(usize, Band, f64)> {
    let mut out = Vec::new();
    for step in &run.trace.steps {
        for band in Band::ALL {
            let vals: Vec<f64> = step.heads.iter().filter_map(|h| h.band_norms.get(band)).collect();
            if !vals.is_empty() {
                out.push((step.step, band, vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
    }
    out
}

/// `step,band,mean_norm`.
pub fn norms_csv(run: &Generation) -> String {
    let mut out = String::from("step,band,mean_norm\n");
    for (k, band, v) in mean_band_norms(run) {
        let _ = writeln!(out, "{k},{},{v:?}", band.name());
    }
    out
}

/// Space-separated integers, one grid row per line.
pub fn token_grid(map: &TokenMap) -> String {
    let mut out = String::new();
    for i in 0..map.height {
        let row: Vec<String> = (0..map.width).map(|j| map.get(i, j).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_token_grid(text: &str) -> std::result::Result<TokenMap, String> {
    let mut tokens = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in text.lines() {
        let row: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("bad token {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(format!("row {} has {} tokens", height + 1, row.len()));
        }
        tokens.extend(row);
        height += 1;
    }
    Ok(TokenMap {
        height,
        width: width.unwrap_or(0),
        tokens,
    })
}
