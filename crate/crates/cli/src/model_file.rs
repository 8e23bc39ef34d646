//! On-disk model: configuration, partition indices and content hashes of the
//! training CSVs. Data are re-read and checked on load, never copied.

use std::error::Error;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use odit_core::data::read_csv;
use odit_core::detectors::{train_odit_partitioned, train_odit_with, Odit2Model};
use odit_core::{Backend, Dataset64, DetectorConfig, Label, TrainedModel64};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

type BoxResult<T> = Result<T, Box<dyn Error>>;

/// A CSV referenced by path and SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub path: PathBuf,
    pub sha256: String,
    pub has_header: bool,
    pub rows: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRef {
    pub data: DataRef,
    pub clean: bool,
    pub alpha_clean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: DetectorConfig,
    pub backend: Backend,
    pub nominal: DataRef,
    pub part1_indices: Vec<usize>,
    pub part2_indices: Vec<usize>,
    pub k_rank: usize,
    pub borderline: f64,
    pub anomaly: Option<AnomalyRef>,
}

pub struct LoadedModel {
    pub nominal: Arc<TrainedModel64>,
    pub odit2: Option<Odit2Model<f64>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_ref(path: &Path, has_header: bool) -> BoxResult<(Dataset64, DataRef)> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let data: Dataset64 = read_csv(Cursor::new(&bytes), has_header, name)?;
    let path = fs::canonicalize(path)?;
    let r = DataRef {
        path,
        sha256: sha256_hex(&bytes),
        has_header,
        rows: data.len(),
        dim: data.dim(),
    };
    Ok((data, r))
}

fn reload(r: &DataRef) -> BoxResult<Dataset64> {
    let (data, now) = read_ref(&r.path, r.has_header)?;
    if now.sha256 != r.sha256 {
        return Err(format!(
            "content hash of {} does not match the model file (expected {}, found {})",
            r.path.display(),
            r.sha256,
            now.sha256
        )
        .into());
    }
    Ok(data)
}

fn build_odit2(
    nominal: &Arc<TrainedModel64>,
    raw: &Dataset64,
    clean: bool,
    alpha_clean: Option<f64>,
) -> BoxResult<Odit2Model<f64>> {
    let raw = raw.clone().with_label(Label::Anomalous);
    if clean {
        Ok(Odit2Model::train(Arc::clone(nominal), &raw, alpha_clean)?)
    } else {
        let mut m = Odit2Model::new(Arc::clone(nominal), raw)?;
        m.refresh_baseline()?;
        Ok(m)
    }
}

pub struct TrainRequest<'a> {
    pub nominal: &'a Path,
    pub anomaly: Option<&'a Path>,
    pub has_header: bool,
    pub config: DetectorConfig,
    pub backend: Backend,
    pub clean: bool,
    pub alpha_clean: Option<f64>,
}

/// Trains and returns both the model and its serializable description.
pub fn train(req: &TrainRequest<'_>) -> BoxResult<(ModelFile, LoadedModel)> {
    let (data, nominal_ref) = read_ref(req.nominal, req.has_header)?;
    let model = Arc::new(train_odit_with(&data, &req.config, req.backend)?);
    let (anomaly, odit2) = match req.anomaly {
        Some(path) => {
            let (raw, r) = read_ref(path, req.has_header)?;
            let m2 = build_odit2(&model, &raw, req.clean, req.alpha_clean)?;
            (
                Some(AnomalyRef {
                    data: r,
                    clean: req.clean,
                    alpha_clean: req.alpha_clean,
                }),
                Some(m2),
            )
        }
        None => (None, None),
    };
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        config: req.config.clone(),
        backend: req.backend,
        nominal: nominal_ref,
        part1_indices: model.part1_indices().to_vec(),
        part2_indices: model.part2_indices().to_vec(),
        k_rank: model.k_rank(),
        borderline: model.borderline(),
        anomaly,
    };
    Ok((
        file,
        LoadedModel {
            nominal: model,
            odit2,
        },
    ))
}

impl ModelFile {
    pub fn read(path: &Path) -> BoxResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read model {}: {e}", path.display()))?;
        let file: Self = serde_json::from_str(&text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(format!("unsupported model format version {}", file.format_version).into());
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> BoxResult<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Rebuilds the models from the referenced data; fails on any hash or value mismatch.
    pub fn load(&self) -> BoxResult<LoadedModel> {
        let data = reload(&self.nominal)?;
        let model = train_odit_partitioned(
            &data,
            &self.config,
            self.backend,
            self.part1_indices.clone(),
            self.part2_indices.clone(),
        )?;
        if model.k_rank() != self.k_rank
            || model.borderline().to_bits() != self.borderline.to_bits()
        {
            return Err("model file is inconsistent with the referenced nominal data".into());
        }
        let model = Arc::new(model);
        let odit2 = match &self.anomaly {
            Some(a) => Some(build_odit2(
                &model,
                &reload(&a.data)?,
                a.clean,
                a.alpha_clean,
            )?),
            None => None,
        };
        Ok(LoadedModel {
            nominal: model,
            odit2,
        })
    }
}
