//! Score predictors behind one fit/predict contract, and their versioned
//! JSON model files.

pub mod gbt;
pub mod gp;
pub mod linalg;
pub mod loss;
pub mod mlp;
pub mod mlr;
pub mod scale;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::FeatureSchema;

pub use gbt::{fit_gbt, GbtConfig, GbtModel};
pub use gp::{fit_gp, GpConfig, GpHyper, GpModel};
pub use loss::{loss, LossKind};
pub use mlp::{fit_mlp, MlpConfig, MlpModel};
pub use mlr::{fit_mlr, MlrModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Mlr,
    Mlp,
    Gp,
    Gbt,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 4] = [
        PredictorKind::Mlr,
        PredictorKind::Mlp,
        PredictorKind::Gp,
        PredictorKind::Gbt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PredictorKind::Mlr => "LinReg",
            PredictorKind::Mlp => "DNN",
            PredictorKind::Gp => "Bayes",
            PredictorKind::Gbt => "XGBoost",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictorKind::Mlr => "mlr",
            PredictorKind::Mlp => "mlp",
            PredictorKind::Gp => "gp",
            PredictorKind::Gbt => "gbt",
        })
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlr" | "linreg" | "linear" => Ok(PredictorKind::Mlr),
            "mlp" | "dnn" => Ok(PredictorKind::Mlp),
            "gp" | "bayes" => Ok(PredictorKind::Gp),
            "gbt" | "xgboost" => Ok(PredictorKind::Gbt),
            _ => Err(Error::invalid(format!("unknown predictor kind {s}"))),
        }
    }
}

/// Training configuration for one predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorConfig {
    Mlr,
    Mlp(MlpConfig),
    Gp(GpConfig),
    Gbt(GbtConfig),
}

impl PredictorConfig {
    pub fn default_for(kind: PredictorKind) -> Self {
        match kind {
            PredictorKind::Mlr => PredictorConfig::Mlr,
            PredictorKind::Mlp => PredictorConfig::Mlp(MlpConfig::default()),
            PredictorKind::Gp => PredictorConfig::Gp(GpConfig::default()),
            PredictorKind::Gbt => PredictorConfig::Gbt(GbtConfig::default()),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorConfig::Mlr => PredictorKind::Mlr,
            PredictorConfig::Mlp(_) => PredictorKind::Mlp,
            PredictorConfig::Gp(_) => PredictorKind::Gp,
            PredictorConfig::Gbt(_) => PredictorKind::Gbt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "lowercase")]
pub enum PredictorParams {
    Mlr(MlrModel),
    Mlp(MlpModel),
    Gp(GpModel),
    Gbt(GbtModel),
}

/// A trained predictor bound to the feature schema it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub format_version: u32,
    pub schema_fingerprint: String,
    #[serde(flatten)]
    pub params: PredictorParams,
}

impl PredictorModel {
    pub fn new(schema_fingerprint: String, params: PredictorParams) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            schema_fingerprint,
            params,
        }
    }

    pub fn fit(config: &PredictorConfig, x: &FeatureMatrix, y: &[f64], seed: u64) -> Result<Self> {
        let xv = x.values.view();
        let params = match config {
            PredictorConfig::Mlr => PredictorParams::Mlr(fit_mlr(xv, y)?),
            PredictorConfig::Mlp(c) => PredictorParams::Mlp(fit_mlp(xv, y, c, seed)?),
            PredictorConfig::Gp(c) => PredictorParams::Gp(fit_gp(xv, y, c)?),
            PredictorConfig::Gbt(c) => PredictorParams::Gbt(fit_gbt(xv, y, c, seed)?),
        };
        Ok(Self::new(x.fingerprint.clone(), params))
    }

    pub fn kind(&self) -> PredictorKind {
        match &self.params {
            PredictorParams::Mlr(_) => PredictorKind::Mlr,
            PredictorParams::Mlp(_) => PredictorKind::Mlp,
            PredictorParams::Gp(_) => PredictorKind::Gp,
            PredictorParams::Gbt(_) => PredictorKind::Gbt,
        }
    }

    /// Scores in row order; lower means predicted faster.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.fingerprint != self.schema_fingerprint {
            return Err(Error::SchemaMismatch {
                expected: self.schema_fingerprint.clone(),
                found: x.fingerprint.clone(),
            });
        }
        let xv = x.values.view();
        Ok(match &self.params {
            PredictorParams::Mlr(m) => m.predict(xv),
            PredictorParams::Mlp(m) => m.predict(xv),
            PredictorParams::Gp(m) => m.predict(xv),
            PredictorParams::Gbt(m) => m.predict(xv),
        })
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    /// Load a model file, refusing it unless it was trained on `schema`.
    pub fn load<R: Read>(input: R, schema: &FeatureSchema) -> Result<Self> {
        let model: Self = serde_json::from_reader(input)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                expected: MODEL_FORMAT_VERSION,
                found: model.format_version,
            });
        }
        let expected = schema.fingerprint();
        if model.schema_fingerprint != expected {
            return Err(Error::SchemaMismatch {
                expected,
                found: model.schema_fingerprint,
            });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{feature_schema, CacheTopology};
    use ndarray::Array2;

    fn matrix(schema: &FeatureSchema, rows: usize) -> FeatureMatrix {
        FeatureMatrix {
            fingerprint: schema.fingerprint(),
            values: Array2::from_shape_fn((rows, schema.len()), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0),
        }
    }

    #[test]
    fn model_file_round_trip_and_fingerprint_guard() {
        let schema = feature_schema(&CacheTopology::riscv());
        let x = matrix(&schema, 12);
        let y: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let m = PredictorModel::fit(
            &PredictorConfig::Gbt(GbtConfig {
                n_trees: 5,
                ..Default::default()
            }),
            &x,
            &y,
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(json["format_version"], 1);
        assert_eq!(json["kind"], "gbt");
        assert!(json["parameters"]["trees"].is_array());
        assert_eq!(json["schema_fingerprint"], schema.fingerprint());

        let back = PredictorModel::load(buf.as_slice(), &schema).unwrap();
        assert_eq!(back, m);
        let other = feature_schema(&CacheTopology::x86());
        assert!(matches!(
            PredictorModel::load(buf.as_slice(), &other),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn predict_checks_schema_and_preserves_order() {
        let schema = feature_schema(&CacheTopology::arm());
        let x = matrix(&schema, 5);
        let y = [0.5, -0.1, 0.3, 0.0, 0.2];
        let m = PredictorModel::fit(&PredictorConfig::Mlr, &x, &y, 0).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.len(), 5);
        let single = m.predict(&x.select_rows(&[3])).unwrap();
        assert_eq!(single[0], p[3]);
        assert_eq!(m.predict(&x).unwrap(), p);
        let mut wrong = x.clone();
        wrong.fingerprint = "other".into();
        assert!(m.predict(&wrong).is_err());
    }

    #[test]
    fn kinds_parse() {
        for k in PredictorKind::ALL {
            assert_eq!(k.to_string().parse::<PredictorKind>().unwrap(), k);
        }
        assert!("svm".parse::<PredictorKind>().is_err());
        let cfg: PredictorConfig = serde_json::from_str(r#"{"kind":"gbt","n_trees":7}"#).unwrap();
        assert!(matches!(cfg, PredictorConfig::Gbt(GbtConfig { n_trees: 7, .. })));
    }
}
