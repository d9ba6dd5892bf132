//! Per-record case study: cosine before and after projection for every
//! composition variant the store can serve.

use std::fmt;

use crate::compose::{compose_record, unsupervised_score, ComposeError, CompositionVariant};
use crate::dataset::CstsRecord;
use crate::embstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::projection::ProjectionModel;

#[derive(Debug, Clone, PartialEq)]
pub struct VariantScores {
    pub variant: CompositionVariant,
    /// `None` when a composed vector is zero.
    pub unsupervised: Option<f64>,
    pub projected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectReport {
    pub record: CstsRecord,
    pub rows: Vec<VariantScores>,
}

pub fn inspect(
    record_id: &str,
    records: &[CstsRecord],
    store: &EmbeddingStore,
    model: Option<&ProjectionModel>,
) -> Result<InspectReport> {
    let record = records
        .iter()
        .find(|r| r.id == record_id)
        .ok_or_else(|| Error::MissingRecord(record_id.to_string()))?;
    let mut rows = Vec::new();
    let mut first_missing = None;
    for variant in CompositionVariant::ALL {
        let pair = match compose_record(record, store, variant) {
            Ok(p) => p,
            Err(ComposeError::MissingRow(key)) => {
                first_missing.get_or_insert(key);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let projected = match model {
            Some(m) => Some(m.score_pairs(std::slice::from_ref(&pair))?[0]),
            None => None,
        };
        rows.push(VariantScores {
            variant,
            unsupervised: unsupervised_score(&pair).ok(),
            projected,
        });
    }
    if rows.is_empty() {
        let key = first_missing.expect("at least one variant was tried");
        return Err(ComposeError::MissingRow(key).into());
    }
    Ok(InspectReport {
        record: record.clone(),
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.record;
        writeln!(f, "record    {}", r.id)?;
        writeln!(f, "s1        {}", r.sentence1)?;
        writeln!(f, "s2        {}", r.sentence2)?;
        writeln!(f, "condition {}", r.condition)?;
        writeln!(f, "rating    {}", r.rating)?;
        writeln!(f)?;
        writeln!(f, "{:<10} {:>10} {:>10}", "variant", "cos", "projected")?;
        for row in &self.rows {
            let arrow = match (row.unsupervised, row.projected) {
                (Some(a), Some(b)) => format!("  {a:.4} -> {b:.4}"),
                _ => String::new(),
            };
            writeln!(
                f,
                "{:<10} {:>10} {:>10}{arrow}",
                row.variant.to_string(),
                cell(row.unsupervised),
                cell(row.projected)
            )?;
        }
        Ok(())
    }
}
