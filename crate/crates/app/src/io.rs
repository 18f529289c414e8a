//! File formats: IDX images in, CSV and JSON out.

use std::path::Path;

use evalp_core::data::{parse_idx, Dataset};
use evalp_core::metrics::DensityGrid;
use evalp_core::stage1::EpochLoss;
use evalp_core::stage2::ObjectiveTerms;
use evalp_core::Tensor;
use serde::Serialize;

use crate::error::{AppError, AppResult};

/// Reads an unsigned-byte IDX file as a dataset scaled to `[0, 1]`.
pub fn load_idx(path: &Path) -> AppResult<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    let array = parse_idx(&bytes).map_err(|source| AppError::Idx {
        path: path.into(),
        source,
    })?;
    let name = path
        .file_stem()
        .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset::from_idx(name, &array)?)
}

fn writer(path: &Path) -> AppResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::Config(format!("{}: {other:?}", path.display())),
    })
}

/// One row per tensor row; columns `{prefix}1 .. {prefix}d`.
pub fn write_tensor_csv(path: &Path, prefix: &str, t: &Tensor) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record((1..=t.cols()).map(|j| format!("{prefix}{j}")))?;
    for r in 0..t.rows() {
        w.write_record(t.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_grid_csv(path: &Path, grid: &DensityGrid) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["x", "y", "log_density"])?;
    for (x, y, v) in grid.rows() {
        w.write_record([x.to_string(), y.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_stage1_history(path: &Path, history: &[EpochLoss]) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "total", "recon", "kl"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.total.to_string(),
            h.recon.to_string(),
            h.kl.to_string(),
        ])?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_stage2_history(path: &Path, history: &[ObjectiveTerms]) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "e_q_f", "e_g_f", "kl_g_p0", "gp", "upper", "lower", "logz_est"])?;
    for h in history {
        w.write_record([
            h.iteration.to_string(),
            h.e_q_f.to_string(),
            h.e_g_f.to_string(),
            h.kl_g_p0.to_string(),
            h.gp.to_string(),
            h.upper.to_string(),
            h.lower.to_string(),
            h.logz_est.to_string(),
        ])?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Any serialisable rows, header from field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use evalp_core::data::{encode_idx, IdxArray};

    #[test]
    fn idx_file_loads_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny-images.idx");
        let array = IdxArray {
            dims: vec![2, 2, 2],
            data: vec![0, 255, 51, 102, 1, 2, 3, 4],
        };
        std::fs::write(&path, encode_idx(&array).unwrap()).unwrap();
        let ds = load_idx(&path).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        assert_eq!(ds.samples().row(0), &[0.0, 1.0, 0.2, 0.4]);
        std::fs::write(&path, &encode_idx(&array).unwrap()[..10]).unwrap();
        assert!(matches!(load_idx(&path), Err(AppError::Idx { .. })));
    }

    #[test]
    fn tensor_csv_round_trips_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        let t = Tensor::from_rows(&[vec![0.1, -2.0], vec![1e-300, 3.5]]).unwrap();
        write_tensor_csv(&path, "z", &t).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["z1", "z2"]);
        let back: Vec<Vec<f64>> = r
            .records()
            .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(back, vec![vec![0.1, -2.0], vec![1e-300, 3.5]]);
    }
}
