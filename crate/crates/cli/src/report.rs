use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use crate::config::ExperimentConfig;
use crate::stages::SeedMetrics;

/// Report rows in display order: key, description.
pub const METRICS: [(&str, &str); 7] = [
    ("counter_unfaith", "Counter Unfaith (%)"),
    ("total_unfaith", "Total Unfaith (%)"),
    ("accuracy", "Label accuracy (%)"),
    ("bleu", "BLEU"),
    ("rouge1", "ROUGE-1 F1"),
    ("rouge_l", "ROUGE-L F1"),
    ("semantic", "Semantic similarity"),
];

/// One value per seed and metric. A missing value means the metric could not be computed
/// for that seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub seeds: Vec<u64>,
    pub values: BTreeMap<&'static str, Vec<Option<f64>>>,
}

impl MetricTable {
    pub fn from_seeds(metrics: &[SeedMetrics]) -> Self {
        let mut values: BTreeMap<&'static str, Vec<Option<f64>>> = BTreeMap::new();
        for m in metrics {
            let f = m.faithfulness.as_ref();
            let row = [
                f.map(|f| f.counter_unfaith),
                f.map(|f| f.total_unfaith),
                Some(m.accuracy),
                Some(m.similarity.bleu),
                Some(m.similarity.rouge1),
                Some(m.similarity.rouge_l),
                m.similarity.semantic,
            ];
            for ((key, _), v) in METRICS.iter().zip(row) {
                values.entry(key).or_default().push(v);
            }
        }
        Self {
            seeds: metrics.iter().map(|m| m.seed).collect(),
            values,
        }
    }

    pub fn mean(&self, key: &str) -> Option<f64> {
        let present: Vec<f64> = self.values.get(key)?.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn means(&self) -> BTreeMap<&'static str, Option<f64>> {
        METRICS.iter().map(|(k, _)| (*k, self.mean(k))).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// `key = mean` lines followed by the per-seed vectors.
pub fn render(cfg: &ExperimentConfig, table: &MetricTable) -> String {
    let mut out = String::new();
    let variant = cfg
        .train
        .variant
        .map_or_else(|| "none".to_string(), |v| v.to_string());
    let _ = writeln!(out, "# graphguide report");
    let _ = writeln!(out, "task = {}", cfg.task);
    let _ = writeln!(out, "explanation = {}", cfg.train.explanation);
    let _ = writeln!(out, "variant = {variant}");
    let _ = writeln!(out, "k_percent = {}", cfg.train.k_percent);
    let _ = writeln!(out, "seeds = {:?}", table.seeds);
    let _ = writeln!(out);
    let _ = writeln!(out, "[mean]");
    for (key, label) in METRICS {
        let _ = writeln!(out, "{key} = {}  # {label}", fmt_opt(table.mean(key)));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "[per_seed]");
    for (key, _) in METRICS {
        let vals: Vec<String> = table
            .values
            .get(key)
            .map_or_else(Vec::new, |v| v.iter().map(|x| fmt_opt(*x)).collect());
        let _ = writeln!(out, "{key} = [{}]", vals.join(", "));
    }
    out
}

/// One SVG bar chart per metric with a bar per seed and one for the mean.
pub fn plot(table: &MetricTable, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (key, label) in METRICS {
        let Some(vals) = table.values.get(key) else {
            continue;
        };
        let mut bars: Vec<(String, f64)> = table
            .seeds
            .iter()
            .zip(vals)
            .filter_map(|(s, v)| v.map(|v| (format!("seed {s}"), v)))
            .collect();
        let Some(mean) = table.mean(key) else {
            continue;
        };
        bars.push(("mean".into(), mean));
        let path = dir.join(format!("{key}.svg"));
        draw_bars(&path, label, &bars).map_err(|e| anyhow!("plotting {key}: {e}"))?;
        written.push(path);
    }
    Ok(written)
}

fn draw_bars(
    path: &Path,
    title: &str,
    bars: &[(String, f64)],
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (480, 320)).into_drawing_area();
    root.fill(&WHITE)?;
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(28)
        .y_label_area_size(48)
        .build_cartesian_2d((0..bars.len()).into_segmented(), 0.0..top)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()?;
    chart.draw_series(
        Histogram::vertical(&chart)
            .style(BLUE.mix(0.6).filled())
            .margin(10)
            .data(bars.iter().enumerate().map(|(i, b)| (i, b.1))),
    )?;
    root.present()?;
    Ok(())
}
