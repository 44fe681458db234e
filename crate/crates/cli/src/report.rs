//! The `report` subcommand: parses metric CSVs, renders sweep rows as SVG
//! line charts (one per attack domain and axis) and grid rows as plain-text
//! tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use crate::manifest::RunManifest;
use crate::plot::{self, Series};
use crate::{commands, OutArg};

const HEADER: [&str; 6] = ["model", "attack", "metric", "steps", "epsilon", "value"];

#[derive(Debug, Clone)]
pub struct CsvRow {
    pub model: String,
    pub attack: String,
    pub metric: String,
    pub steps: Option<f64>,
    pub epsilon: Option<f64>,
    pub value: f64,
}

/// Parses a metrics CSV, validating the schema and naming the offending
/// column on mismatch.
pub fn parse_csv(text: &str, name: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        bail!("{name}: empty file (missing header)");
    };
    let fields: Vec<&str> = header.split(',').collect();
    for (i, want) in HEADER.iter().enumerate() {
        match fields.get(i) {
            Some(got) if got == want => {}
            Some(got) => bail!("{name}: column {} is '{got}', expected '{want}'", i + 1),
            None => bail!("{name}: missing column '{want}'"),
        }
    }
    if fields.len() > HEADER.len() {
        bail!("{name}: unexpected extra column '{}'", fields[HEADER.len()]);
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("{name}: line {}: expected 6 fields, got {}", ln + 2, f.len());
        }
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| anyhow::anyhow!("{name}: line {}: bad {what} '{s}'", ln + 2))
            }
        };
        rows.push(CsvRow {
            model: f[0].to_string(),
            attack: f[1].to_string(),
            metric: f[2].to_string(),
            steps: opt(f[3], "steps")?,
            epsilon: opt(f[4], "epsilon")?,
            value: f[5]
                .parse()
                .map_err(|_| anyhow::anyhow!("{name}: line {}: bad value '{}'", ln + 2, f[5]))?,
        });
    }
    Ok(rows)
}

/// Pivot of grid-style records (model rows, attack columns) for map50 rows.
pub fn grid_table(records: &[robdet_core::eval::MetricRecord]) -> String {
    let rows: Vec<CsvRow> = records
        .iter()
        .map(|r| CsvRow {
            model: r.model.clone(),
            attack: r.attack.clone(),
            metric: r.metric.as_str().to_string(),
            steps: r.steps.map(|v| v as f64),
            epsilon: r.epsilon.map(|v| v as f64),
            value: r.value,
        })
        .collect();
    grid_table_rows(&rows)
}

fn grid_table_rows(rows: &[CsvRow]) -> String {
    let mut models: Vec<String> = Vec::new();
    let mut attacks: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in rows {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        if !attacks.contains(&r.attack) {
            attacks.push(r.attack.clone());
        }
        cells.insert((r.model.clone(), r.attack.clone()), r.value);
    }
    plot::text_table("model", &models, &attacks, |ri, ci| {
        cells.get(&(models[ri].clone(), attacks[ci].clone())).copied()
    })
}

pub fn report_cmd(out: OutArg, csv_arg: String) -> Result<()> {
    let dir = commands::resolve_out(&out)?;
    let mut manifest = RunManifest::new("report");
    let mut wrote_any = false;

    for path_str in csv_arg.split(',').filter(|s| !s.is_empty()) {
        let path = PathBuf::from(path_str);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading CSV {}", path.display()))?;
        let rows = parse_csv(&text, &path.display().to_string())?;
        manifest.input(&path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into());

        if rows.is_empty() {
            log::warn!("{}: no data rows; emitting empty chart", path.display());
            let svg_path = dir.join(format!("{stem}_empty.svg"));
            fs::write(&svg_path, plot::line_chart(&stem, "coordinate", &[]))?;
            manifest.output(&svg_path)?;
            wrote_any = true;
            continue;
        }

        // Sweep rows vary along exactly one coordinate per attack; anything
        // else (clean rows, worst-case rows, transfer rows) goes to a table.
        let mut by_attack: BTreeMap<String, Vec<&CsvRow>> = BTreeMap::new();
        let mut table_rows: Vec<CsvRow> = Vec::new();
        for r in &rows {
            if r.metric == "map50" && r.steps.is_some() && r.epsilon.is_some() && r.attack != "worst"
            {
                by_attack.entry(r.attack.clone()).or_default().push(r);
            } else {
                table_rows.push(r.clone());
            }
        }

        for (attack, arows) in &by_attack {
            let steps: Vec<f64> = arows.iter().filter_map(|r| r.steps).collect();
            let eps: Vec<f64> = arows.iter().filter_map(|r| r.epsilon).collect();
            let distinct = |v: &[f64]| {
                let mut v = v.to_vec();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v.dedup();
                v.len()
            };
            // Pick the varying coordinate; single-point data defaults to the
            // budget axis.
            let use_steps = distinct(&steps) > distinct(&eps);
            let axis_name = if use_steps { "steps" } else { "epsilon" };
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in arows {
                let x = if use_steps { r.steps } else { r.epsilon }.unwrap();
                series.entry(r.model.clone()).or_default().push((x, r.value));
            }
            let series: Vec<Series> = series
                .into_iter()
                .map(|(id, mut points)| {
                    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    Series { id, points }
                })
                .collect();
            let title = format!("{stem}: mAP under {attack}");
            let svg_path = dir.join(format!("{stem}_{attack}.svg"));
            fs::write(&svg_path, plot::line_chart(&title, axis_name, &series))?;
            manifest.output(&svg_path)?;
            println!("wrote {}", svg_path.display());
            wrote_any = true;
        }

        if by_attack.is_empty() && !table_rows.is_empty() {
            let txt_path = dir.join(format!("{stem}.txt"));
            fs::write(&txt_path, grid_table_rows(&table_rows))?;
            manifest.output(&txt_path)?;
            println!("wrote {}", txt_path.display());
            wrote_any = true;
        }
    }
    if !wrote_any {
        log::warn!("report produced no artifacts");
    }
    manifest.write(&dir)
}
