use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::runner::{EvalRecord, GridOutput};
use super::{io_err, BenchError};
use crate::graph::export_heatmap_csv;
use crate::models::ModelKind;

#[derive(Serialize)]
struct Row<'a> {
    model: &'a str,
    f_s: u32,
    #[serde(rename = "K")]
    k: usize,
    p: Option<u32>,
    seed: u64,
    status: &'static str,
    mae: Option<f64>,
    rmse: Option<f64>,
    train_windows: usize,
    val_windows: usize,
    test_windows: usize,
    epochs: usize,
    wall_seconds: f64,
    error: Option<&'a str>,
}

/// One row per record, in the order given.
pub fn write_results_csv(records: &[EvalRecord], path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(Row {
            model: &r.model,
            f_s: r.f_s,
            k: r.k,
            p: r.p,
            seed: r.seed,
            status: if r.is_ok() { "ok" } else { "failed" },
            mae: r.mae,
            rmse: r.rmse,
            train_windows: r.train_windows,
            val_windows: r.val_windows,
            test_windows: r.test_windows,
            epochs: r.epochs,
            wall_seconds: r.wall_seconds,
            error: r.error.as_deref(),
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn column_key(r: &EvalRecord) -> (usize, String, Option<u32>) {
    let order = r.model.parse::<ModelKind>().ok().and_then(|k| ModelKind::ALL.iter().position(|m| *m == k));
    (order.unwrap_or(ModelKind::ALL.len()), r.model.clone(), r.p)
}

fn column_name((_, model, p): &(usize, String, Option<u32>)) -> String {
    match p {
        Some(p) => format!("{model} p={p}"),
        None => model.clone(),
    }
}

fn cell_text(recs: &[&EvalRecord]) -> String {
    if recs.is_empty() {
        return String::new();
    }
    if recs.iter().any(|r| !r.is_ok()) {
        return "FAIL".into();
    }
    let n = recs.len() as f64;
    let mae = recs.iter().filter_map(|r| r.mae).sum::<f64>() / n;
    let rmse = recs.iter().filter_map(|r| r.rmse).sum::<f64>() / n;
    format!("{mae:.3}/{rmse:.3}")
}

fn pick<'a>(recs: &[&'a EvalRecord], col: &(usize, String, Option<u32>)) -> Vec<&'a EvalRecord> {
    recs.iter().copied().filter(|r| column_key(r) == *col).collect()
}

/// Rows `f_s x K x seed` (plus a mean row per `(f_s, K)` when several
/// seeds are present), columns per model and redundancy, cells
/// `MAE/RMSE` to three decimals or `FAIL`.
pub fn pivot_table(records: &[EvalRecord]) -> Vec<Vec<String>> {
    let columns: BTreeSet<_> = records.iter().map(column_key).collect();
    let columns: Vec<_> = columns.into_iter().collect();
    let mut groups: BTreeMap<(u32, usize), BTreeMap<u64, Vec<&EvalRecord>>> = BTreeMap::new();
    for r in records {
        groups.entry((r.f_s, r.k)).or_default().entry(r.seed).or_default().push(r);
    }
    let mut header = vec!["f_s".to_string(), "K".to_string(), "seed".to_string()];
    header.extend(columns.iter().map(column_name));
    let mut rows = vec![header];
    for ((f_s, k), seeds) in &groups {
        for (seed, recs) in seeds {
            let mut row = vec![f_s.to_string(), k.to_string(), seed.to_string()];
            row.extend(columns.iter().map(|c| cell_text(&pick(recs, c))));
            rows.push(row);
        }
        if seeds.len() > 1 {
            let all: Vec<&EvalRecord> = seeds.values().flatten().copied().collect();
            let mut row = vec![f_s.to_string(), k.to_string(), "mean".to_string()];
            row.extend(columns.iter().map(|c| cell_text(&pick(&all, c))));
            rows.push(row);
        }
    }
    rows
}

pub fn heatmap_name(rate: u32, k: usize, p: u32) -> String {
    format!("adjacency_fs{rate}_K{k}_p{p}.csv")
}

fn cell_file_name(r: &EvalRecord) -> String {
    let p = r.p.map_or_else(|| "na".to_string(), |p| p.to_string());
    let model: String = r.model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("{model}_fs{}_K{}_p{p}_seed{}.json", r.f_s, r.k, r.seed)
}

/// Writes `results.csv`, `table_pivot.csv`, one JSON file per cell under
/// `cells/`, adjacency heatmaps under `heatmaps/` and subset plans.
pub fn emit_reports(output: &GridOutput, out: &Path) -> Result<(), BenchError> {
    if output.records.is_empty() {
        return Err(BenchError::NoRecords);
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_results_csv(&output.records, &out.join("results.csv"))?;

    let pivot_path = out.join("table_pivot.csv");
    let mut w = csv::Writer::from_path(&pivot_path)?;
    for row in pivot_table(&output.records) {
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(&pivot_path))?;

    let cells = out.join("cells");
    fs::create_dir_all(&cells).map_err(io_err(&cells))?;
    for r in &output.records {
        let path = cells.join(cell_file_name(r));
        fs::write(&path, serde_json::to_string_pretty(r)?).map_err(io_err(&path))?;
    }

    let heatmaps = out.join("heatmaps");
    for g in &output.graphs {
        export_heatmap_csv(g.graph.adjacency.view(), &g.sensor_ids, heatmaps.join(heatmap_name(g.rate, g.k, g.p)))?;
    }
    for plan in &output.subsets {
        let path = out.join(format!("subset_K{}.json", plan.k));
        fs::write(&path, plan.to_json()).map_err(io_err(&path))?;
    }
    Ok(())
}
