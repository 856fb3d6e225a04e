use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use super::{io_err, PipelineError, Result};

/// One CSV row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub dataset: String,
    pub model: String,
    pub eta: f64,
    pub sigma: f64,
    pub zb: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub dp_diff: Option<f64>,
    pub tpr_diff: Option<f64>,
    pub tnr_diff: Option<f64>,
    pub hgr: f64,
    pub mi_sy: f64,
}

impl CsvRow {
    pub fn from_record(record: &RunRecord) -> Result<Self> {
        let config = record.experiment_config()?;
        let r = &record.report;
        Ok(Self {
            run_id: record.run_id.clone(),
            dataset: config.dataset.as_str().into(),
            model: config.model.as_str().into(),
            eta: config.eta,
            sigma: config.sigma,
            zb: config.zb(),
            seed: config.seed,
            accuracy: r.accuracy,
            dp_diff: r.dp_diff,
            tpr_diff: r.tpr_diff,
            tnr_diff: r.tnr_diff,
            hgr: r.hgr,
            mi_sy: r.mi_sy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub index: PathBuf,
    pub plot: PathBuf,
}

#[derive(Serialize)]
struct IndexEntry<'a> {
    run_id: &'a str,
    model: &'a str,
    report: PathBuf,
    record: PathBuf,
}

pub fn write_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| PipelineError::Report(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| PipelineError::Report(e.to_string()))?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::Report(e.to_string()))?;
    reader.deserialize().map(|r| r.map_err(|e| PipelineError::Report(e.to_string()))).collect()
}

/// Fixed colour per model so plots are comparable across reports.
fn model_colour(model: &str) -> Rgb<u8> {
    match model {
        "cflow" => Rgb([214, 39, 40]),
        "cvae" => Rgb([31, 119, 180]),
        "baseline-cnn" | "baseline-mlp" => Rgb([44, 160, 44]),
        "baseline-gray" => Rgb([127, 127, 127]),
        "baseline-entropy" => Rgb([148, 103, 189]),
        _ => Rgb([0, 0, 0]),
    }
}

const SIZE: u32 = 480;
const MARGIN: u32 = 40;

/// Accuracy (vertical) against demographic-parity difference (horizontal),
/// both on `[0, 1]`. Runs without a parity value are skipped.
pub fn scatter_plot(rows: &[CsvRow]) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let span = (SIZE - 2 * MARGIN) as f64;
    let axis = Rgb([0, 0, 0]);
    let grid = Rgb([225, 225, 225]);
    for tick in 0..=10 {
        let offset = MARGIN + (span * tick as f64 / 10.0).round() as u32;
        for t in MARGIN..=SIZE - MARGIN {
            img.put_pixel(offset, t, grid);
            img.put_pixel(t, offset, grid);
        }
    }
    for t in MARGIN..=SIZE - MARGIN {
        img.put_pixel(MARGIN, t, axis);
        img.put_pixel(t, SIZE - MARGIN, axis);
    }
    for row in rows {
        let Some(dp) = row.dp_diff else { continue };
        let px = MARGIN as f64 + dp.clamp(0.0, 1.0) * span;
        let py = (SIZE - MARGIN) as f64 - row.accuracy.clamp(0.0, 1.0) * span;
        let colour = model_colour(&row.model);
        for dx in -3i64..=3 {
            for dy in -3i64..=3 {
                if dx * dx + dy * dy > 9 {
                    continue;
                }
                let (x, y) = (px.round() as i64 + dx, py.round() as i64 + dy);
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    img
}

/// Writes `results.csv`, `index.json` and `accuracy_vs_dp.png` into `out_dir`.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(PipelineError::Report("no runs to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rows = records.iter().map(CsvRow::from_record).collect::<Result<Vec<_>>>()?;
    let files = ReportFiles {
        csv: out_dir.join("results.csv"),
        index: out_dir.join("index.json"),
        plot: out_dir.join("accuracy_vs_dp.png"),
    };
    write_csv(&rows, &files.csv)?;
    let models: Vec<String> = rows.iter().map(|r| r.model.clone()).collect();
    let entries: Vec<IndexEntry> = records
        .iter()
        .zip(&models)
        .map(|(r, model)| IndexEntry {
            run_id: &r.run_id,
            model,
            report: PathBuf::from(&r.run_id).join("report.json"),
            record: PathBuf::from(&r.run_id).join("record.json"),
        })
        .collect();
    let index = serde_json::to_string_pretty(&entries).expect("serialisable");
    std::fs::write(&files.index, index).map_err(io_err(&files.index))?;
    scatter_plot(&rows).save(&files.plot).map_err(|e| PipelineError::Report(e.to_string()))?;
    Ok(files)
}

/// Reads every `record.json` directly under `dir`, ordered by run id.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path().join("record.json");
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let record: RunRecord = serde_json::from_str(&text).map_err(|e| PipelineError::Report(e.to_string()))?;
            records.push(record);
        }
    }
    records.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(records)
}
