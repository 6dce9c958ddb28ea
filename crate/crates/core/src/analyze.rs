//! Cost accounting and report emission: multiply-adds and parameter counts
//! per layer for models and compiled plans, merged with optional wall-clock
//! timings into CSV and JSON reports.
//!
//! Multiply-adds count fused multiply-add operations; bias addition,
//! normalization, activation, pooling, and channel movement cost zero.
//! Grouped layers count only their active connections, the sum over groups
//! of channels times filters, so the counts here equal the executor's
//! instrumented tally exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layer_costs, FeatureShape, Model};
use crate::ops::conv_out_dim;
use crate::plan::{Plan, PlanOp};

/// Cost of one layer or plan op: multiply-adds of a single-sample forward
/// pass and the parameter count it deploys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: usize,
    pub kind: String,
    pub madds: u64,
    pub params: u64,
}

/// Per-layer costs of a model. Grouped layers count active connections
/// under the current hard assignment; assignment scores and running
/// statistics are not deployed parameters and are excluded.
pub fn model_costs(model: &Model<f32>) -> Result<Vec<LayerCost>> {
    Ok(layer_costs(model)?
        .into_iter()
        .enumerate()
        .map(|(id, (kind, madds, params))| LayerCost { id, kind, madds, params })
        .collect())
}

/// Shape each plan op consumes, in op order, ending with the plan output.
/// The walk mirrors execution: spatial `[channels, h, w]` until global
/// pooling flattens to features.
pub fn plan_feature_shapes(plan: &Plan) -> Result<Vec<FeatureShape>> {
    let [c, h, w] = plan.input;
    let mut cur = FeatureShape::Spatial { channels: c, height: h, width: w };
    let mut shapes = vec![cur];
    for (i, op) in plan.ops.iter().enumerate() {
        let at = |msg: String| Error::ShapeMismatch(format!("op {i}: {msg}"));
        let spatial = |shape: FeatureShape| match shape {
            FeatureShape::Spatial { channels, height, width } => Ok((channels, height, width)),
            FeatureShape::Flat { .. } => Err(at(format!("{} needs spatial input", op.kind()))),
        };
        cur = match op {
            PlanOp::Conv { w, stride, pad, .. } => {
                let (c, h, wd) = spatial(cur)?;
                let (n, cw, kh, kw) = w.dims4()?;
                if cw != c {
                    return Err(at(format!("conv wants {cw} channels, gets {c}")));
                }
                FeatureShape::Spatial {
                    channels: n,
                    height: conv_out_dim(h, kh, *stride, *pad).map_err(|e| at(e.to_string()))?,
                    width: conv_out_dim(wd, kw, *stride, *pad).map_err(|e| at(e.to_string()))?,
                }
            }
            PlanOp::DwConv { w, stride, pad, .. } => {
                let (c, h, wd) = spatial(cur)?;
                let (cw, _, kh, kw) = w.dims4()?;
                if cw != c {
                    return Err(at(format!("dwconv wants {cw} channels, gets {c}")));
                }
                FeatureShape::Spatial {
                    channels: c,
                    height: conv_out_dim(h, kh, *stride, *pad).map_err(|e| at(e.to_string()))?,
                    width: conv_out_dim(wd, kw, *stride, *pad).map_err(|e| at(e.to_string()))?,
                }
            }
            PlanOp::Grouped(g) => {
                let (c, h, wd) = spatial(cur)?;
                if g.merged.len() != c {
                    return Err(at(format!(
                        "grouped layer reads {} channels, gets {c}",
                        g.merged.len()
                    )));
                }
                FeatureShape::Spatial { channels: g.bias.len(), height: h, width: wd }
            }
            PlanOp::Gather { index } => {
                let (c, h, wd) = spatial(cur)?;
                if index.len() != c {
                    return Err(at(format!("gather of length {} over {c} channels", index.len())));
                }
                FeatureShape::Spatial { channels: c, height: h, width: wd }
            }
            PlanOp::Relu => cur,
            PlanOp::AvgPool { window } => {
                let (c, h, wd) = spatial(cur)?;
                match window {
                    Some(k) => {
                        if *k == 0 || h % k != 0 || wd % k != 0 {
                            return Err(at(format!("window {k} does not tile {h}x{wd}")));
                        }
                        FeatureShape::Spatial { channels: c, height: h / k, width: wd / k }
                    }
                    None => FeatureShape::Flat { features: c },
                }
            }
            PlanOp::Fc { w, .. } => {
                let (o, f) = w.dims2()?;
                if cur.flat_len() != f {
                    return Err(at(format!("fc wants {f} features, gets {}", cur.flat_len())));
                }
                FeatureShape::Flat { features: o }
            }
        };
        shapes.push(cur);
    }
    Ok(shapes)
}

/// Per-op costs of a compiled plan. The counts equal the executor's
/// instrumented multiply-add tally for a single-sample run, exactly.
pub fn plan_costs(plan: &Plan) -> Result<Vec<LayerCost>> {
    let shapes = plan_feature_shapes(plan)?;
    let mut out = Vec::with_capacity(plan.ops.len());
    for (i, op) in plan.ops.iter().enumerate() {
        // Spatial extent of the op's output.
        let hw = match shapes[i + 1] {
            FeatureShape::Spatial { height, width, .. } => height * width,
            FeatureShape::Flat { .. } => 1,
        };
        let (madds, params): (u64, u64) = match op {
            PlanOp::Conv { w, b, .. } => {
                let (n, c, kh, kw) = w.dims4()?;
                ((n * c * kh * kw * hw) as u64, (n * c * kh * kw + b.len()) as u64)
            }
            PlanOp::DwConv { w, b, .. } => {
                let (c, _, kh, kw) = w.dims4()?;
                ((c * kh * kw * hw) as u64, (c * kh * kw + b.len()) as u64)
            }
            PlanOp::Grouped(g) => {
                let active: u64 =
                    g.blocks.iter().map(|blk| (blk.out_len * blk.in_len) as u64).sum();
                (active * hw as u64, active + g.bias.len() as u64)
            }
            PlanOp::Gather { .. } | PlanOp::Relu | PlanOp::AvgPool { .. } => (0, 0),
            PlanOp::Fc { w, b } => {
                let (o, f) = w.dims2()?;
                ((o * f) as u64, (o * f + b.len()) as u64)
            }
        };
        out.push(LayerCost { id: i, kind: op.kind().to_string(), madds, params });
    }
    Ok(out)
}

/// Timing protocol and machine context a report's numbers were taken under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub threads: usize,
    pub precision: String,
    pub reps: usize,
    pub warmup: usize,
    pub parallel_groups: bool,
}

/// One report row: costs, plus timing columns when the source was benched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub id: usize,
    pub kind: String,
    pub madds: u64,
    pub params: u64,
    pub median_us: Option<f64>,
    pub p10_us: Option<f64>,
    pub p90_us: Option<f64>,
}

/// A full analysis report; the CSV and JSON emissions carry the same rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub name: String,
    /// What was analyzed: "model" or "plan".
    pub source: String,
    /// Present when rows carry timings.
    pub environment: Option<Environment>,
    pub rows: Vec<ReportRow>,
}

/// Timing triple per row: (median_us, p10_us, p90_us).
pub type RowTiming = (f64, f64, f64);

impl Report {
    /// Assembles rows from costs and optional per-row timings; the two
    /// lists must be index-aligned.
    pub fn new(
        name: impl Into<String>,
        source: impl Into<String>,
        costs: &[LayerCost],
        timings: Option<&[RowTiming]>,
        environment: Option<Environment>,
    ) -> Result<Self> {
        if let Some(t) = timings {
            if t.len() != costs.len() {
                return Err(Error::Config(format!(
                    "{} timings for {} cost rows",
                    t.len(),
                    costs.len()
                )));
            }
        }
        let rows = costs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let t = timings.map(|t| t[i]);
                ReportRow {
                    id: c.id,
                    kind: c.kind.clone(),
                    madds: c.madds,
                    params: c.params,
                    median_us: t.map(|t| t.0),
                    p10_us: t.map(|t| t.1),
                    p90_us: t.map(|t| t.2),
                }
            })
            .collect();
        Ok(Report {
            name: name.into(),
            source: source.into(),
            environment,
            rows,
        })
    }
}

const CSV_HEADER: &str = "id,kind,madds,params,median_us,p10_us,p90_us";

/// Renders the rows as CSV with a fixed column order. Floats print in
/// shortest round-trip form, so re-parsing reproduces them exactly.
pub fn to_csv(report: &Report) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            r.kind,
            r.madds,
            r.params,
            cell(r.median_us),
            cell(r.p10_us),
            cell(r.p90_us)
        ));
    }
    out
}

/// Parses rows back from [`to_csv`] output.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    let bad = |line: usize, msg: String| Error::Config(format!("csv line {line}: {msg}"));
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(bad(1, format!("expected header {CSV_HEADER:?}, got {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(i + 2, format!("{} fields, expected 7", fields.len())));
        }
        let int = |v: &str, what: &str| {
            v.parse::<u64>().map_err(|e| bad(i + 2, format!("{what} {v:?}: {e}")))
        };
        let float = |v: &str, what: &str| -> Result<Option<f64>> {
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse::<f64>().map(Some).map_err(|e| bad(i + 2, format!("{what} {v:?}: {e}")))
            }
        };
        rows.push(ReportRow {
            id: int(fields[0], "id")? as usize,
            kind: fields[1].to_string(),
            madds: int(fields[2], "madds")?,
            params: int(fields[3], "params")?,
            median_us: float(fields[4], "median_us")?,
            p10_us: float(fields[5], "p10_us")?,
            p90_us: float(fields[6], "p90_us")?,
        });
    }
    Ok(rows)
}

/// Writes the CSV rendering of `report` to `path`.
pub fn write_csv(report: &Report, path: &Path) -> Result<()> {
    fs::write(path, to_csv(report))?;
    Ok(())
}

/// Writes the JSON rendering of `report` to `path`.
pub fn write_json(report: &Report, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
