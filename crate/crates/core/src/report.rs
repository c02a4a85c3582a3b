//! Human-readable result documents with an embedded machine-readable block.
//!
//! ```text
//! # metric report
//! # <free-form note lines>
//! f1: 0.91
//! iou: 0.84
//! ---
//! {"f1":0.91,"iou":0.84}
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

const SEPARATOR: &str = "---";

pub fn render<S: Serialize>(title: &str, notes: &[&str], value: &S) -> Result<String> {
    let json = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
    let Value::Object(map) = &json else {
        return Err(Error::Config("report must serialize to an object".into()));
    };
    let mut out = format!("# {title}\n");
    for n in notes {
        out.push_str(&format!("# {n}\n"));
    }
    for (k, v) in map {
        match v {
            Value::String(s) => out.push_str(&format!("{k}: {s}\n")),
            other => out.push_str(&format!("{k}: {other}\n")),
        }
    }
    out.push_str(SEPARATOR);
    out.push('\n');
    out.push_str(&json.to_string());
    out.push('\n');
    Ok(out)
}

pub fn write<S: Serialize>(path: &Path, title: &str, notes: &[&str], value: &S) -> Result<()> {
    let text = render(title, notes, value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse the machine-readable block of a rendered document.
pub fn parse<D: DeserializeOwned>(text: &str) -> Result<D> {
    let block = text
        .split_once(&format!("\n{SEPARATOR}\n"))
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Config("report has no machine-readable block".into()))?;
    serde_json::from_str(block.trim()).map_err(|e| Error::Config(e.to_string()))
}

pub fn read<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Aggregation, MetricReport};

    #[test]
    fn metric_report_document() {
        let r = MetricReport {
            f1: 0.5,
            iou: 1.0 / 3.0,
            dice: 0.5,
            aggregation: Aggregation::Macro,
            n_images: 2,
        };
        let text = render("metric report", &["threshold 0.5"], &r).unwrap();
        assert!(text.contains("\naggregation: macro\n"));
        assert!(text.contains("\nn_images: 2\n"));
        let back: MetricReport = parse(&text).unwrap();
        assert_eq!(back, r);
    }
}
