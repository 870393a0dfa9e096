use std::path::{Path, PathBuf};

use super::{LabelDistribution, LdlDataset, LdlSample};
use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Optional `key = value` overrides stored next to a dataset as
/// `<file>.cfg` (e.g. `gene.csv.cfg`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSidecar {
    pub name: Option<String>,
    pub k: Option<usize>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
}

impl DatasetSidecar {
    pub fn path_for(dataset: &Path) -> PathBuf {
        let mut s = dataset.as_os_str().to_owned();
        s.push(".cfg");
        PathBuf::from(s)
    }

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        cfg.reject_unknown(&["name", "k", "repeats", "seed"])?;
        Ok(DatasetSidecar {
            name: cfg.get("name").map(str::to_string),
            k: cfg.parse_key("k")?,
            repeats: cfg.parse_key("repeats")?,
            seed: cfg.parse_key("seed")?,
        })
    }
}

fn parse_header(path: &Path, header: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |detail: String| Error::Dataset {
        path: path.to_path_buf(),
        detail,
    };
    let d = header.iter().take_while(|h| h.starts_with('f')).count();
    let l = header.len() - d;
    for (i, h) in header.iter().enumerate() {
        let want = if i < d { format!("f{i}") } else { format!("y{}", i - d) };
        if h.trim() != want {
            return Err(bad(format!("header column {i} is `{h}`, expected `{want}`")));
        }
    }
    if d == 0 || l < 2 {
        return Err(bad(format!("header needs at least one f column and two y columns, got {d} and {l}")));
    }
    Ok((d, l))
}

/// Reads `f0,...,f{d-1},y0,...,y{L-1}` rows. Label rows whose sum deviates
/// from 1 by more than 1e-6 (or that hold negative values) are collected and
/// reported together by their 1-based data row number.
pub fn load_csv(path: &Path) -> Result<LdlDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let (d, l) = parse_header(path, &header)?;

    let mut samples = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: format!("row {row}: {e}"),
        })?;
        if record.len() != d + l {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                detail: format!("row {row}: {} fields, expected {}", record.len(), d + l),
            });
        }
        let mut values = Vec::with_capacity(d + l);
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Dataset {
                path: path.to_path_buf(),
                detail: format!("row {row}, column {}: `{field}` is not a number", header.get(j).unwrap_or("?")),
            })?;
            values.push(v);
        }
        let labels = values.split_off(d);
        match LabelDistribution::new(labels) {
            Ok(target) => samples.push(LdlSample {
                features: values,
                target,
            }),
            Err(_) => bad_rows.push(row),
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::SimplexViolation { rows: bad_rows });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    LdlDataset::new(name, samples).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Loads a dataset and applies its sidecar, if one exists.
pub fn load_with_sidecar(path: &Path) -> Result<(LdlDataset, DatasetSidecar)> {
    let mut ds = load_csv(path)?;
    let side_path = DatasetSidecar::path_for(path);
    let sidecar = if side_path.exists() {
        DatasetSidecar::from_config(&KvConfig::load(&side_path)?)?
    } else {
        DatasetSidecar::default()
    };
    if let Some(name) = &sidecar.name {
        ds.set_name(name.clone());
    }
    Ok((ds, sidecar))
}

/// Writes the dataset with shortest round-trip float formatting.
pub fn write_csv(ds: &LdlDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..ds.n_features())
        .map(|i| format!("f{i}"))
        .chain((0..ds.n_labels()).map(|i| format!("y{i}")))
        .collect();
    w.write_record(&header)?;
    for s in ds.samples() {
        let row: Vec<String> = s
            .features
            .iter()
            .chain(s.target.values())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
