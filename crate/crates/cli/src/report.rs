//! Side-by-side comparison of probe output directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// How a metric should move for the first run to count as better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = ">=")]
    AtLeast,
}

impl Direction {
    fn holds(self, subject: f64, other: f64) -> bool {
        match self {
            Self::Greater => subject > other,
            Self::AtLeast => subject >= other,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Self::Greater => ">",
            Self::AtLeast => ">=",
        }
    }
}

/// Directional expectation per metric; metrics not listed are reported
/// without a pass/fail line.
fn direction_of(metric: &str) -> Option<Direction> {
    match metric {
        "locality.silhouette" | "compositionality.mean" | "multires.gap" => Some(Direction::Greater),
        m if m.starts_with("linear.accuracy@") => Some(Direction::AtLeast),
        _ => None,
    }
}

fn field(v: &Value, name: &str, file: &Path) -> anyhow::Result<f64> {
    match v.get(name) {
        Some(Value::Number(n)) => Ok(n.as_f64().expect("finite json number")),
        Some(Value::Null) => Ok(f64::NAN),
        Some(_) => bail!("{}: field `{name}` is not a number", file.display()),
        None => bail!("{}: missing field `{name}`", file.display()),
    }
}

/// Flattened `kind.metric -> value` map of every probe report in `dir`.
pub fn collect_metrics(dir: &Path) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let read = |name: &str| -> anyhow::Result<Option<(PathBuf, Value)>> {
        let path = dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let v = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Some((path, v)))
    };
    if let Some((p, v)) = read("locality.json")? {
        for f in ["silhouette", "nearest_centroid_accuracy"] {
            out.insert(format!("locality.{f}"), field(&v, f, &p)?);
        }
    }
    if let Some((p, v)) = read("compositionality.json")? {
        for f in ["mean", "std"] {
            out.insert(format!("compositionality.{f}"), field(&v, f, &p)?);
        }
    }
    if let Some((p, v)) = read("multires.json")? {
        let a = field(&v, "cross_level_same_landmark", &p)?;
        let b = field(&v, "same_level_cross_landmark", &p)?;
        out.insert("multires.cross_level_same_landmark".into(), a);
        out.insert("multires.same_level_cross_landmark".into(), b);
        out.insert("multires.gap".into(), a - b);
    }
    if let Some((p, v)) = read("correspondence.json")? {
        out.insert("correspondence.accuracy".into(), field(&v, "accuracy", &p)?);
        out.insert("correspondence.total_matches".into(), field(&v, "total_matches", &p)?);
    }
    if let Some((p, v)) = read("linear.json")? {
        let results = v
            .get("results")
            .and_then(Value::as_array)
            .ok_or_else(|| anyhow!("{}: missing field `results`", p.display()))?;
        for r in results {
            let shots = field(r, "shots_per_class", &p)?;
            out.insert(format!("linear.accuracy@{shots}"), field(r, "mean_accuracy", &p)?);
        }
    }
    if out.is_empty() {
        bail!("{} contains no probe reports", dir.display());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionLine {
    pub metric: String,
    pub other: String,
    pub relation: Direction,
    pub subject_value: f64,
    pub other_value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub runs: Vec<PathBuf>,
    /// Metric values, one per run in `labels` order.
    pub metrics: BTreeMap<String, Vec<f64>>,
    /// `deltas[label][metric]` = first run minus run `label`.
    pub deltas: BTreeMap<String, BTreeMap<String, f64>>,
    pub criteria: Vec<CriterionLine>,
}

/// Compares the first run against each of the others on the metrics they
/// share. Every run must report every metric of the first run.
pub fn compare(runs: &[PathBuf], labels: &[String]) -> anyhow::Result<Comparison> {
    if runs.len() < 2 {
        bail!("need at least two runs to compare");
    }
    let per_run: Vec<BTreeMap<String, f64>> = runs.iter().map(|r| collect_metrics(r)).collect::<Result<_, _>>()?;
    let subject = &per_run[0];
    for (run, m) in runs.iter().zip(&per_run).skip(1) {
        if let Some(missing) = subject.keys().find(|k| !m.contains_key(*k)) {
            bail!("{}: missing metric `{missing}` reported by {}", run.display(), runs[0].display());
        }
    }
    let mut metrics = BTreeMap::new();
    for k in subject.keys() {
        metrics.insert(k.clone(), per_run.iter().map(|m| m[k]).collect::<Vec<f64>>());
    }
    let mut deltas = BTreeMap::new();
    let mut criteria = Vec::new();
    for (label, m) in labels.iter().zip(&per_run).skip(1) {
        let mut d = BTreeMap::new();
        for (k, &v) in subject {
            d.insert(k.clone(), v - m[k]);
            if let Some(dir) = direction_of(k) {
                criteria.push(CriterionLine {
                    metric: k.clone(),
                    other: label.clone(),
                    relation: dir,
                    subject_value: v,
                    other_value: m[k],
                    pass: dir.holds(v, m[k]),
                });
            }
        }
        deltas.insert(label.clone(), d);
    }
    Ok(Comparison {
        labels: labels.to_vec(),
        runs: runs.to_vec(),
        metrics,
        deltas,
        criteria,
    })
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

fn fmt_delta(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:+.4}")
    }
}

/// Aligned text table followed by one PASS/FAIL line per criterion.
pub fn render_text(c: &Comparison) -> String {
    let mut header = vec!["metric".to_string()];
    header.extend(c.labels.iter().cloned());
    header.extend(c.labels.iter().skip(1).map(|l| format!("d({l})")));
    let mut rows = vec![header];
    for (k, vals) in &c.metrics {
        let mut row = vec![k.clone()];
        row.extend(vals.iter().map(|v| fmt_value(*v)));
        row.extend(c.labels.iter().skip(1).map(|l| fmt_delta(c.deltas[l][k])));
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out.push('\n');
    for l in &c.criteria {
        out.push_str(&format!(
            "{} {}: {} {} {} {} ({} vs {}, delta {})\n",
            if l.pass { "PASS" } else { "FAIL" },
            l.metric,
            c.labels[0],
            l.relation.symbol(),
            l.other,
            l.metric,
            fmt_value(l.subject_value),
            fmt_value(l.other_value),
            fmt_delta(l.subject_value - l.other_value),
        ));
    }
    out
}

pub fn run(runs: &[PathBuf], labels: Option<&[String]>, out: &Path) -> anyhow::Result<()> {
    let labels: Vec<String> = match labels {
        Some(l) if l.len() == runs.len() => l.to_vec(),
        Some(l) => {
            return Err(crate::UsageError(format!("{} labels given for {} runs", l.len(), runs.len())).into());
        }
        None => runs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("run{i}"))
            })
            .collect(),
    };
    let cmp = compare(runs, &labels)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(&cmp)?;
    fs::write(out.join("report.json"), json + "\n")?;
    let text = render_text(&cmp);
    fs::write(out.join("report.txt"), &text)?;
    let record = serde_json::json!({ "command": "report", "runs": runs, "labels": labels, "out": out });
    fs::write(out.join("run_config.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    print!("{text}");
    Ok(())
}
