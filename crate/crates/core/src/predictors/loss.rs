use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    Mse,
    Mae,
    Rss,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "rss" => Ok(LossKind::Rss),
            _ => Err(Error::invalid(format!("unknown loss {s}"))),
        }
    }
}

pub fn loss(kind: LossKind, predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::invalid("loss of an empty vector"));
    }
    let n = predicted.len() as f64;
    let residuals = predicted.iter().zip(actual).map(|(p, a)| p - a);
    Ok(match kind {
        LossKind::Mse => residuals.map(|r| r * r).sum::<f64>() / n,
        LossKind::Mae => residuals.map(f64::abs).sum::<f64>() / n,
        LossKind::Rss => residuals.map(|r| r * r).sum::<f64>(),
    })
}
