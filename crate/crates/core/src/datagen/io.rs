use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Manifest, SpeakerDataset, Split};
use crate::error::{Error, Result};
use crate::network::format_f64;
use crate::numeric::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DATA_FILE: &str = "data.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn csv_bytes(ds: &SpeakerDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = ds.features.cols();
    let mut header = vec!["speaker_id".to_string(), "split".into(), "label".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    let csv_err = |e: csv::Error| Error::parse("csv", e);
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.speaker_ids[i].to_string(),
            ds.splits[i].name().to_string(),
            ds.labels[i].to_string(),
        ];
        rec.extend(ds.features.row(i).iter().map(|&x| format_f64(x)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::parse("csv", e.error()))
}

fn manifest_bytes(m: &Manifest) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serialises");
    s.push('\n');
    s.into_bytes()
}

/// Hex SHA-256 over the exact bytes `save_dataset` writes (CSV then manifest).
pub fn dataset_checksum(ds: &SpeakerDataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(csv_bytes(ds)?);
    h.update(manifest_bytes(&ds.manifest));
    Ok(hex::encode(h.finalize()))
}

/// Writes `DATA_FILE` and `MANIFEST_FILE` into `dir`, creating it if needed.
pub fn save_dataset(ds: &SpeakerDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = dir.join(DATA_FILE);
    fs::write(&data, csv_bytes(ds)?).map_err(|e| Error::io(&data, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, manifest_bytes(&ds.manifest)).map_err(|e| Error::io(&manifest, e))
}

pub fn load_dataset(dir: &Path) -> Result<SpeakerDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse("manifest", e))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::parse(
            "format_version",
            format!("expected {DATASET_FORMAT_VERSION}, found {}", manifest.format_version),
        ));
    }

    let data_path = dir.join(DATA_FILE);
    let mut r = csv::Reader::from_path(&data_path).map_err(|e| Error::parse(DATA_FILE, e))?;
    let d = manifest.dim;
    let expected_cols = 3 + d;
    let header_len = r.headers().map_err(|e| Error::parse("header", e))?.len();
    if header_len != expected_cols {
        return Err(Error::parse("header", format!("expected {expected_cols} columns, found {header_len}")));
    }

    let mut features = Vec::with_capacity(manifest.n_rows * d);
    let mut labels = Vec::with_capacity(manifest.n_rows);
    let mut speaker_ids = Vec::with_capacity(manifest.n_rows);
    let mut splits = Vec::with_capacity(manifest.n_rows);
    for (line, rec) in r.records().enumerate() {
        let row = line + 1;
        let rec = rec.map_err(|e| Error::parse(format!("row {row}"), e))?;
        if rec.len() != expected_cols {
            return Err(Error::parse(format!("row {row}"), format!("expected {expected_cols} fields, found {}", rec.len())));
        }
        speaker_ids.push(rec[0].parse::<u32>().map_err(|e| Error::parse(format!("row {row}.speaker_id"), e))?);
        splits.push(rec[1].parse::<Split>().map_err(|e| Error::parse(format!("row {row}.split"), e))?);
        labels.push(rec[2].parse::<usize>().map_err(|e| Error::parse(format!("row {row}.label"), e))?);
        for j in 0..d {
            let x: f64 = rec[3 + j].parse().map_err(|e| Error::parse(format!("row {row}.f{j}"), e))?;
            if !x.is_finite() {
                return Err(Error::parse(format!("row {row}.f{j}"), "non-finite value"));
            }
            features.push(x);
        }
    }
    let n = labels.len();
    if n != manifest.n_rows {
        return Err(Error::parse("n_rows", format!("manifest says {} rows, {DATA_FILE} has {n}", manifest.n_rows)));
    }
    let ds = SpeakerDataset {
        features: Matrix::from_vec(n, d, features)?,
        labels,
        speaker_ids,
        splits,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}
