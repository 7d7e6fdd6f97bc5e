//! Versioned JSON bundle for fitted estimator sets: kernels in long
//! (target, source, step, value) form plus the categorical tables and
//! metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CategoricalBlock, EstimatorMeta, EstimatorSet};

pub const BUNDLE_FORMAT: &str = "lobhawkes-estimator";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    meta: EstimatorMeta,
    /// (target i, source j, step r, value), 1-based indices, zeros kept.
    kernels: Option<Vec<(u32, u32, u32, f64)>>,
    /// (target i, source j, step r) tuples that were not estimable.
    kernel_dropped: Option<Vec<(u32, u32, u32)>>,
    liq: Option<CategoricalBlock<f64>>,
    time: Option<CategoricalBlock<f64>>,
    intercept: Option<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: not a {BUNDLE_FORMAT} v{BUNDLE_VERSION} file")]
    BadFormat { path: String },
    #[error("{path}: kernel entry ({i},{j},{r}) out of range")]
    BadKernelEntry { path: String, i: u32, j: u32, r: u32 },
}

pub fn write_estimator_bundle(path: &Path, set: &EstimatorSet<f64>) -> Result<(), BundleError> {
    let io_err = |source| BundleError::Io {
        path: path.display().to_string(),
        source,
    };
    let d = set.meta.dims;
    let p = set.meta.lag_steps;
    let kernels = set.kernels.as_ref().map(|k| {
        let mut out = Vec::with_capacity(d * d * p);
        for i in 0..d {
            for j in 0..d {
                for r in 1..=p {
                    out.push((
                        (i + 1) as u32,
                        (j + 1) as u32,
                        r as u32,
                        k[(i * d + j) * p + (r - 1)],
                    ));
                }
            }
        }
        out
    });
    let kernel_dropped = set.kernel_estimable.as_ref().map(|mask| {
        let mut out = Vec::new();
        for i in 0..d {
            for j in 0..d {
                for r in 1..=p {
                    if !mask[(i * d + j) * p + (r - 1)] {
                        out.push(((i + 1) as u32, (j + 1) as u32, r as u32));
                    }
                }
            }
        }
        out
    });
    let file = BundleFile {
        format: BUNDLE_FORMAT.to_string(),
        version: BUNDLE_VERSION,
        meta: set.meta.clone(),
        kernels,
        kernel_dropped,
        liq: set.liq.clone(),
        time: set.time.clone(),
        intercept: set.intercept.clone(),
    };
    let w = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer(w, &file).map_err(|source| BundleError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_estimator_bundle(path: &Path) -> Result<EstimatorSet<f64>, BundleError> {
    let io_err = |source| BundleError::Io {
        path: path.display().to_string(),
        source,
    };
    let r = BufReader::new(File::open(path).map_err(io_err)?);
    let file: BundleFile = serde_json::from_reader(r).map_err(|source| BundleError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if file.format != BUNDLE_FORMAT || file.version != BUNDLE_VERSION {
        return Err(BundleError::BadFormat {
            path: path.display().to_string(),
        });
    }
    let d = file.meta.dims;
    let p = file.meta.lag_steps;
    let mut kernels = None;
    if let Some(entries) = file.kernels {
        let mut k = vec![0.0; d * d * p];
        for (i, j, r, v) in entries {
            let (iu, ju, ru) = (i as usize, j as usize, r as usize);
            if iu == 0 || iu > d || ju == 0 || ju > d || ru == 0 || ru > p {
                return Err(BundleError::BadKernelEntry {
                    path: path.display().to_string(),
                    i,
                    j,
                    r,
                });
            }
            k[((iu - 1) * d + (ju - 1)) * p + (ru - 1)] = v;
        }
        kernels = Some(k);
    }
    let kernel_estimable = file.kernel_dropped.map(|dropped| {
        let mut mask = vec![true; d * d * p];
        for (i, j, r) in dropped {
            let idx = ((i as usize - 1) * d + (j as usize - 1)) * p + (r as usize - 1);
            if idx < mask.len() {
                mask[idx] = false;
            }
        }
        mask
    });
    Ok(EstimatorSet {
        meta: file.meta,
        kernels,
        kernel_estimable,
        liq: file.liq,
        time: file.time,
        intercept: file.intercept,
    })
}
