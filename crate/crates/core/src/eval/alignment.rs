//! Distance between the two branches in score space.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::model::{BranchMode, Model, PreparedDataset};

/// Mean over rows of `||P - OS||_2` on raw scores.
pub fn alignment_norm(p: ArrayView2<f64>, os: ArrayView2<f64>) -> Result<f64> {
    if p.dim() != os.dim() {
        return Err(Error::shape("branch scores", format!("{:?}", p.dim()), format!("{:?}", os.dim())));
    }
    if p.nrows() == 0 {
        return Err(Error::Config("alignment is undefined on an empty dataset".into()));
    }
    let sum: f64 = p
        .outer_iter()
        .zip(os.outer_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(sum / p.nrows() as f64)
}

pub fn model_alignment(model: &Model, data: &PreparedDataset) -> Result<f64> {
    if model.branches != BranchMode::Both {
        return Err(Error::Config(format!(
            "alignment needs both branches, model has {}",
            model.branches.label()
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("alignment is undefined on an empty dataset".into()));
    }
    let out = model.predict(data, 256)?;
    alignment_norm(
        out.p.as_ref().expect("p scores").view(),
        out.os.as_ref().expect("os scores").view(),
    )
}
