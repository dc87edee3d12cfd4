use super::config::ModelConfig;
use super::trainer::{evaluate_model, train};
use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{fmt_metric, MetricsReport};
use crate::text::TextEncoderKind;
use crate::ActivationKind;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

/// What a variant changes relative to the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value", rename_all = "kebab-case")]
pub enum AblationAxis {
    Baseline,
    Activation(ActivationKind),
    /// Randomly initialised image encoder.
    ImageInit,
    /// Randomly initialised text encoder.
    TextInit,
    TextEncoder(TextEncoderKind),
    Dropout(f64),
    /// A variant this implementation cannot run; reported, never skipped.
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub axis: AblationAxis,
}

impl AblationSpec {
    pub fn new(name: impl Into<String>, axis: AblationAxis) -> Self {
        Self { name: name.into(), axis }
    }

    /// Parse `axis=value`, e.g. `activation=gelu`, `text_encoder=simple-recurrent`,
    /// `dropout=0.3`, `image_init=random`.
    pub fn parse(s: &str) -> Result<Self> {
        let (axis, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation spec `{s}` is not axis=value")))?;
        let value = value.trim();
        let axis = match axis.trim().replace('-', "_").as_str() {
            "activation" => AblationAxis::Activation(value.parse()?),
            "image_init" | "text_init" if value != "random" => {
                return Err(Error::Config(format!("{axis} supports only `random`, got `{value}`")))
            }
            "image_init" => AblationAxis::ImageInit,
            "text_init" => AblationAxis::TextInit,
            "text_encoder" => match value {
                "dbn" => AblationAxis::Unsupported("text encoder dbn".into()),
                "lstm" => AblationAxis::TextEncoder(TextEncoderKind::SimpleRecurrent),
                v => AblationAxis::TextEncoder(v.parse()?),
            },
            "image_encoder" => match value {
                "mobilenet" | "separable" => AblationAxis::Baseline,
                "resnet50" | "efficientnet-b3" | "densenet121" | "convnext-tiny" | "inception-v3" => {
                    AblationAxis::Unsupported(format!("image encoder {value}"))
                }
                v => return Err(Error::Config(format!("unknown image encoder `{v}`"))),
            },
            "dropout" => {
                let p: f64 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("dropout `{value}` is not a number")))?;
                AblationAxis::Dropout(p)
            }
            other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        };
        Ok(Self::new(s, axis))
    }

    /// Configuration for this variant, or `None` when unsupported.
    pub fn apply(&self, base: &ModelConfig) -> Result<Option<ModelConfig>> {
        let mut cfg = base.clone();
        match &self.axis {
            AblationAxis::Baseline | AblationAxis::ImageInit | AblationAxis::TextInit => {}
            AblationAxis::Activation(a) => cfg.fusion.activation = *a,
            AblationAxis::TextEncoder(k) => cfg.text.kind = *k,
            AblationAxis::Dropout(p) => cfg.fusion.dropout = *p,
            AblationAxis::Unsupported(_) => return Ok(None),
        }
        cfg.validate()?;
        Ok(Some(cfg))
    }

    fn note(&self) -> Option<String> {
        match &self.axis {
            AblationAxis::ImageInit | AblationAxis::TextInit => {
                Some("no pretrained weights are loaded, so this matches the baseline".into())
            }
            AblationAxis::Unsupported(what) => Some(format!("{what} is not implemented")),
            _ => None,
        }
    }
}

/// Named suites: `activations`, `components`, `dropout`.
pub fn suite(name: &str) -> Result<Vec<AblationSpec>> {
    use AblationAxis::*;
    let specs = match name {
        "activations" => vec![
            AblationSpec::new("Swish", Activation(ActivationKind::Swish)),
            AblationSpec::new("Mish", Activation(ActivationKind::Mish)),
            AblationSpec::new("GoLU", Activation(ActivationKind::Golu)),
            AblationSpec::new("GELU", Activation(ActivationKind::Gelu)),
        ],
        "components" => {
            let mut v = vec![
                AblationSpec::new("Without image pretrained", ImageInit),
                AblationSpec::new("Without text pretrained", TextInit),
                AblationSpec::new("No activation function after fusion", Activation(ActivationKind::Identity)),
                AblationSpec::new("Text vector using simple recurrent", TextEncoder(TextEncoderKind::SimpleRecurrent)),
                AblationSpec::new("Text vector using DBN", Unsupported("text encoder dbn".into())),
            ];
            for enc in ["ResNet50", "EfficientNet-B3", "DenseNet121", "ConvNeXt-Tiny", "Inception-v3"] {
                v.push(AblationSpec::new(
                    format!("Image embedding using {enc}"),
                    Unsupported(format!("image encoder {}", enc.to_lowercase())),
                ));
            }
            v
        }
        "dropout" => [0.1, 0.2, 0.3, 0.4, 0.5]
            .into_iter()
            .map(|p| AblationSpec::new(format!("dropout {p}"), Dropout(p)))
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown suite `{other}` (expected activations, components or dropout)"
            )))
        }
    };
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Completed,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: RowStatus,
    /// Split the metrics were computed on.
    pub split: Option<Split>,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricsReport>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const TABLE_COLUMNS: [&str; 9] = [
    "variant", "status", "MAE", "MSE", "RMSE", "R2", "Pearson-r", "split", "note",
];

impl AblationTable {
    fn cells(row: &AblationRow) -> Vec<String> {
        let mut out = vec![
            row.variant.clone(),
            match row.status {
                RowStatus::Completed => "completed".into(),
                RowStatus::Unsupported => "unsupported".into(),
            },
        ];
        match &row.metrics {
            Some(m) => out.extend(m.columns().into_iter().map(fmt_metric)),
            None => out.extend(std::iter::repeat_n(String::new(), 5)),
        }
        out.push(row.split.map(|s| s.name().to_string()).unwrap_or_default());
        out.push(row.note.clone().unwrap_or_default());
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TABLE_COLUMNS)?;
        for r in &self.rows {
            out.write_record(Self::cells(r))?;
        }
        out.flush().map_err(|e| Error::Io {
            path: "<ablation>".into(),
            source: e,
        })?;
        Ok(())
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        write!(f, "{:<width$}  {:<11}", TABLE_COLUMNS[0], TABLE_COLUMNS[1])?;
        for c in &TABLE_COLUMNS[2..7] {
            write!(f, "  {c:>9}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            let cells = Self::cells(r);
            write!(f, "{:<width$}  {:<11}", cells[0], cells[1])?;
            for c in &cells[2..7] {
                let c = if c.is_empty() { "-" } else { c.as_str() };
                write!(f, "  {c:>9}")?;
            }
            if !cells[8].is_empty() {
                write!(f, "  ({})", cells[8])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Train every supported variant with the same seed and data. All specs are
/// validated before any training starts.
pub fn run_ablation(specs: &[AblationSpec], manifest: &Manifest, base: &ModelConfig) -> Result<AblationTable> {
    base.validate()?;
    let configs: Vec<Option<ModelConfig>> = specs.iter().map(|s| s.apply(base)).collect::<Result<_>>()?;
    let split = [Split::Test, Split::Val, Split::Train]
        .into_iter()
        .find(|s| manifest.indices(*s).len() >= 2)
        .ok_or_else(|| Error::Contract("no split has at least two samples".into()))?;
    let eval_idx = manifest.indices(split);
    let mut rows = Vec::with_capacity(specs.len());
    for (spec, cfg) in specs.iter().zip(configs) {
        let row = match cfg {
            None => AblationRow {
                variant: spec.name.clone(),
                status: RowStatus::Unsupported,
                split: None,
                best_epoch: None,
                metrics: None,
                note: spec.note(),
            },
            Some(cfg) => {
                let outcome = train(manifest, &cfg)?;
                let model = outcome.checkpoint.to_model()?;
                AblationRow {
                    variant: spec.name.clone(),
                    status: RowStatus::Completed,
                    split: Some(split),
                    best_epoch: Some(outcome.best_epoch),
                    metrics: Some(evaluate_model(&model, manifest, &eval_idx)?),
                    note: spec.note(),
                }
            }
        };
        rows.push(row);
    }
    Ok(AblationTable { rows })
}
