//! CSV, JSON and SVG outputs of training and evaluation.

use std::path::Path;

use foley_core::eval::{EvalReport, SweepRow};
use foley_core::training::StepLog;
use plotters::prelude::*;
use serde::Serialize;

use crate::error::{FoleyError, Result};

fn csv_err(path: &Path, e: csv::Error) -> FoleyError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FoleyError::io(path, io),
        other => FoleyError::corrupt(path, format!("{other:?}")),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FoleyError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| FoleyError::io(path, e))
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    loss: f64,
    grad_norm: f64,
}

/// The first, the last and every `every`-th step.
pub fn write_loss_csv(path: &Path, log: &[StepLog], every: usize) -> Result<()> {
    if log.is_empty() {
        return std::fs::write(path, "step,loss,grad_norm\n").map_err(|e| FoleyError::io(path, e));
    }
    let last = log.len() - 1;
    let rows: Vec<LossRow> = log
        .iter()
        .enumerate()
        .filter(|(i, l)| *i == 0 || *i == last || l.step % every.max(1) as u64 == 0)
        .map(|(_, l)| l)
        .map(|l| LossRow {
            step: l.step,
            loss: l.loss,
            grad_norm: l.grad_norm,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct RecordRow {
    scene_id: u64,
    target_class: usize,
    original_class: usize,
    predicted_class: usize,
    open_class: String,
    temporal_offset_s: f64,
    clap_analog: f64,
    gamma: f64,
    alpha: f64,
    steps: usize,
}

pub fn write_records_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let rows: Vec<RecordRow> = report
        .records
        .iter()
        .map(|r| RecordRow {
            scene_id: r.scene_id,
            target_class: r.target_class,
            original_class: r.original_class,
            predicted_class: r.predicted_class,
            open_class: foley_core::eval::class_label(r.open_class),
            temporal_offset_s: r.temporal_offset_s,
            clap_analog: r.clap_analog,
            gamma: r.gamma,
            alpha: r.alpha,
            steps: r.steps,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct SweepCsvRow {
    alpha: f64,
    acc: f64,
    mean_offset: f64,
    frechet: String,
    clap: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let rows: Vec<SweepCsvRow> = rows
        .iter()
        .map(|r| SweepCsvRow {
            alpha: r.alpha,
            acc: r.acc,
            mean_offset: r.mean_offset,
            frechet: r.frechet.map_or_else(String::new, |f| f.to_string()),
            clap: r.clap,
        })
        .collect();
    write_rows(path, &rows)
}

/// Line plot of accuracy and mean offset against α.
pub fn plot_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let max_off = rows.iter().map(|r| r.mean_offset).fold(0.0f64, f64::max).max(1e-3) * 1.1;
        let mut chart = ChartBuilder::on(&root)
            .caption("asymmetric guidance sweep", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .right_y_label_area_size(48)
            .build_cartesian_2d(0.0f64..1.0f64, 0.0f64..1.0f64)?
            .set_secondary_coord(0.0f64..1.0f64, 0.0f64..max_off);
        chart.configure_mesh().x_desc("alpha").y_desc("accuracy").draw()?;
        chart.configure_secondary_axes().y_desc("mean offset (s)").draw()?;
        let acc: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.acc)).collect();
        let off: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.mean_offset)).collect();
        chart
            .draw_series(LineSeries::new(acc.clone(), BLUE.stroke_width(2)))?
            .label("accuracy")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
        chart.draw_series(acc.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))?;
        chart
            .draw_secondary_series(LineSeries::new(off.clone(), RED.stroke_width(2)))?
            .label("mean offset")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
        chart.draw_secondary_series(off.iter().map(|&p| Circle::new(p, 3, RED.filled())))?;
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| FoleyError::io(path, std::io::Error::other(e.to_string())))
}
