//! Flat metric export. Every report flattens to rows of one scalar each;
//! the CSV layout is `metric,method,d,n,value,stderr` with empty cells for
//! fields a row does not use. JSON serialization preserves each report's
//! full structure.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One exported scalar. `method` is empty for rows not tied to a trained
/// model; `d`, `n` and `stderr` are omitted where they have no meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub method: String,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl MetricRow {
    /// Row carrying only a value, with no grid coordinates or error bar.
    pub fn scalar(metric: impl Into<String>, method: impl Into<String>, value: f64) -> Self {
        MetricRow {
            metric: metric.into(),
            method: method.into(),
            d: None,
            n: None,
            value,
            stderr: None,
        }
    }
}

/// Writes rows as CSV. Labels must not contain commas or line breaks; the
/// format has no quoting.
pub fn write_metric_csv(rows: &[MetricRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "metric,method,d,n,value,stderr")?;
    for row in rows {
        for label in [&row.metric, &row.method] {
            if label.contains(',') || label.contains('\n') {
                return Err(Error::invalid(format!(
                    "label {label:?} would corrupt the unquoted CSV layout"
                )));
            }
        }
        let opt = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let err = row.stderr.map(|e| e.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.metric,
            row.method,
            opt(&row.d),
            opt(&row.n),
            row.value,
            err
        )?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline, the on-disk report form.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("json serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}
