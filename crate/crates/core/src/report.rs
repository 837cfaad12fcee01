//! Layer report (one `key=value` line per layer) and axis statistics.
//!
//! ```text
//! layer=blocks.0.attn.q_proj chosen=row val_mse_col=... end_loss_col=... val_mse_row=... end_loss_row=...
//! summary base_end_loss=... stacked_end_loss=... e2e_initial=... e2e_final=... final_end_loss=...
//! ```
//!
//! Lines starting with `#` are comments. Floats use Rust's shortest
//! round-trip formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::artifact::DeltaArtifact;
use crate::error::{Error, Result};
use crate::fit::{PipelineOutput, ScaleMode};
use crate::model::{LayerId, ProjKind};

const WHAT: &str = "layer report";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLine {
    pub layer: String,
    pub chosen: ScaleMode,
    /// `train_mse_<mode>`, `val_mse_<mode>` and `end_loss_<mode>` per
    /// fitted candidate.
    pub metrics: BTreeMap<String, f64>,
}

impl LayerLine {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerReport {
    pub layers: Vec<LayerLine>,
    pub summary: BTreeMap<String, f64>,
}

impl LayerReport {
    pub fn from_pipeline(out: &PipelineOutput) -> Self {
        let layers = out
            .layers
            .iter()
            .map(|l| {
                let mut metrics = BTreeMap::new();
                for c in &l.candidates {
                    let m = c.mode.as_str();
                    metrics.insert(format!("train_mse_{m}"), c.train_mse);
                    metrics.insert(format!("val_mse_{m}"), c.val_mse);
                    metrics.insert(format!("end_loss_{m}"), c.end_loss);
                }
                LayerLine {
                    layer: l.layer.clone(),
                    chosen: l.chosen,
                    metrics,
                }
            })
            .collect();
        let summary = BTreeMap::from([
            ("base_end_loss".to_string(), out.base_end_loss),
            ("stacked_end_loss".to_string(), out.stacked_end_loss),
            ("e2e_initial".to_string(), out.e2e.initial_loss),
            ("e2e_final".to_string(), out.e2e.final_loss),
            ("final_end_loss".to_string(), out.final_end_loss),
        ]);
        Self { layers, summary }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = write!(s, "layer={} chosen={}", l.layer, l.chosen);
            for (k, v) in &l.metrics {
                let _ = write!(s, " {k}={v:?}");
            }
            s.push('\n');
        }
        s.push_str("summary");
        for (k, v) in &self.summary {
            let _ = write!(s, " {k}={v:?}");
        }
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = LayerReport::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| Error::Malformed {
                what: WHAT,
                detail: format!("line {}: {detail}", no + 1),
            };
            let mut fields = line.split_whitespace();
            let head = fields.next().expect("non-empty line");
            let mut pairs = BTreeMap::new();
            for f in fields {
                let (k, v) = f
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got {f:?}")))?;
                pairs.insert(k.to_string(), v.to_string());
            }
            if head == "summary" {
                for (k, v) in pairs {
                    let x = v.parse().map_err(|_| bad(format!("{k}: not a number")))?;
                    report.summary.insert(k, x);
                }
                continue;
            }
            let layer = head
                .strip_prefix("layer=")
                .ok_or_else(|| bad(format!("unexpected record {head:?}")))?
                .to_string();
            let chosen = pairs
                .remove("chosen")
                .ok_or_else(|| bad("missing chosen".into()))
                .and_then(|c| ScaleMode::from_str(&c).map_err(|e| bad(e.to_string())))?;
            let mut metrics = BTreeMap::new();
            for (k, v) in pairs {
                let x = v.parse().map_err(|_| bad(format!("{k}: not a number")))?;
                metrics.insert(k, x);
            }
            report.layers.push(LayerLine {
                layer,
                chosen,
                metrics,
            });
        }
        Ok(report)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AxisCounts {
    pub row: usize,
    pub col: usize,
    pub scalar: usize,
}

impl AxisCounts {
    fn add(&mut self, mode: ScaleMode) {
        match mode {
            ScaleMode::Row => self.row += 1,
            ScaleMode::Col => self.col += 1,
            ScaleMode::Scalar => self.scalar += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.row + self.col + self.scalar
    }
}

/// Row/col counts per projection sub-type and the axis sequence per block.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AxisStats {
    pub total: AxisCounts,
    pub by_sub_type: BTreeMap<String, AxisCounts>,
    /// Per block, the chosen axis of each projection in q,k,v,o,gate,up,down
    /// order.
    pub by_depth: BTreeMap<usize, Vec<String>>,
}

impl AxisStats {
    fn from_pairs(pairs: impl IntoIterator<Item = (LayerId, ScaleMode)>) -> Self {
        let mut stats = AxisStats::default();
        let mut depth: BTreeMap<usize, BTreeMap<ProjKind, ScaleMode>> = BTreeMap::new();
        for (id, mode) in pairs {
            stats.total.add(mode);
            stats
                .by_sub_type
                .entry(id.kind.sub_type().to_string())
                .or_default()
                .add(mode);
            depth.entry(id.block).or_default().insert(id.kind, mode);
        }
        stats.by_depth = depth
            .into_iter()
            .map(|(b, kinds)| (b, kinds.values().map(|m| m.as_str().to_string()).collect()))
            .collect();
        stats
    }

    /// Axis bytes as stored. Scalar-baseline artifacts store a constant row
    /// vector and count as row here.
    pub fn from_artifact(artifact: &DeltaArtifact) -> Result<Self> {
        let pairs = artifact
            .records
            .iter()
            .map(|r| Ok((r.name.parse::<LayerId>()?, ScaleMode::from(r.axis()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pairs(pairs))
    }

    pub fn from_report(report: &LayerReport) -> Result<Self> {
        let pairs = report
            .layers
            .iter()
            .map(|l| Ok((l.layer.parse::<LayerId>()?, l.chosen)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pairs(pairs))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("sub_type row col scalar\n");
        for (t, c) in &self.by_sub_type {
            let _ = writeln!(s, "{t} {} {} {}", c.row, c.col, c.scalar);
        }
        let _ = writeln!(
            s,
            "total {} {} {}",
            self.total.row, self.total.col, self.total.scalar
        );
        for (b, seq) in &self.by_depth {
            let _ = writeln!(s, "block {b}: {}", seq.join(" "));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("axis stats serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# comment
layer=blocks.0.attn.q_proj chosen=row end_loss_col=2.5 end_loss_row=1.25 val_mse_col=0.1 val_mse_row=0.05
layer=blocks.0.attn.k_proj chosen=col end_loss_col=1 end_loss_row=3
summary final_end_loss=0.5
";

    #[test]
    fn parse_and_reprint() {
        let r = LayerReport::parse(SAMPLE).unwrap();
        assert_eq!(r.layers.len(), 2);
        assert_eq!(r.layers[0].chosen, ScaleMode::Row);
        assert_eq!(r.layers[0].metric("end_loss_row"), Some(1.25));
        assert_eq!(r.summary["final_end_loss"], 0.5);
        assert_eq!(LayerReport::parse(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn floats_roundtrip_exactly() {
        let mut r = LayerReport::default();
        r.summary.insert("x".into(), 0.1 + 0.2);
        r.summary.insert("y".into(), 1e-300);
        assert_eq!(LayerReport::parse(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn malformed_lines() {
        assert!(LayerReport::parse("layer=a chosen=diag").is_err());
        assert!(LayerReport::parse("layer=a val=1").is_err());
        assert!(LayerReport::parse("layer=a chosen=row x=abc").is_err());
        assert!(LayerReport::parse("bogus").is_err());
    }

    #[test]
    fn stats_from_report() {
        let r = LayerReport::parse(SAMPLE).unwrap();
        let s = AxisStats::from_report(&r).unwrap();
        assert_eq!(
            s.total,
            AxisCounts {
                row: 1,
                col: 1,
                scalar: 0
            }
        );
        assert_eq!(s.by_depth[&0], vec!["row", "col"]);
        let json: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(json["by_sub_type"]["k_proj"]["col"], 1);
    }
}
