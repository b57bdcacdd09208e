//! Result tables and figures.
//!
//! Everything written here is a pure function of the input reports, so
//! regenerating from the same inputs yields byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evalharness::{ProbeReport, ScalingReport};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn task_label(r: &ProbeReport) -> String {
    match &r.tag {
        Some(tag) => format!("{} ({tag})", r.task),
        None => r.task.clone(),
    }
}

fn method_label(r: &ProbeReport) -> String {
    if r.method.is_empty() {
        "model".to_string()
    } else {
        r.method.clone()
    }
}

fn unique(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct Grid<'a> {
    tasks: Vec<String>,
    methods: Vec<String>,
    cells: Vec<Vec<Option<&'a ProbeReport>>>,
}

fn grid(reports: &[ProbeReport]) -> Grid<'_> {
    let tasks = unique(reports.iter().map(task_label));
    let methods = unique(reports.iter().map(method_label));
    let mut cells = vec![vec![None; methods.len()]; tasks.len()];
    for r in reports {
        let t = tasks.iter().position(|x| *x == task_label(r)).unwrap();
        let m = methods.iter().position(|x| *x == method_label(r)).unwrap();
        // Later duplicates replace earlier ones.
        cells[t][m] = Some(r);
    }
    Grid { tasks, methods, cells }
}

fn write(path: PathBuf, contents: &[u8], out: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

/// Writes `results.csv` (one row per task, mean and std columns per method),
/// `results.md` (methods as rows, tasks as columns, best mean per column in
/// bold, plus a majority-class row), `results.json` and `results.svg`.
pub fn render_report(reports: &[ProbeReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to render".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = grid(reports);
    let mut files = Vec::new();

    let mut csv = String::from("task");
    for m in &g.methods {
        write!(csv, ",{},{}", csv_field(&format!("{m}_mean")), csv_field(&format!("{m}_std"))).unwrap();
    }
    csv.push_str(",majority_class\n");
    for (t, task) in g.tasks.iter().enumerate() {
        csv.push_str(&csv_field(task));
        let mut majority = None;
        for cell in &g.cells[t] {
            match cell {
                Some(r) => {
                    write!(csv, ",{:.4},{:.4}", r.accuracy_mean, r.accuracy_std).unwrap();
                    majority.get_or_insert(r.majority_class_accuracy);
                }
                None => csv.push_str(",,"),
            }
        }
        writeln!(csv, ",{:.4}", majority.unwrap_or(f64::NAN)).unwrap();
    }
    write(dir.join("results.csv"), csv.as_bytes(), &mut files)?;

    let mut md = String::from("| Method |");
    for t in &g.tasks {
        write!(md, " {t} |").unwrap();
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(g.tasks.len()));
    md.push('\n');
    md.push_str("| Majority class |");
    for t in 0..g.tasks.len() {
        match g.cells[t].iter().flatten().next() {
            Some(r) => write!(md, " {:.1} |", r.majority_class_accuracy).unwrap(),
            None => md.push_str(" - |"),
        }
    }
    md.push('\n');
    let best: Vec<Option<f64>> = g
        .cells
        .iter()
        .map(|row| row.iter().flatten().map(|r| r.accuracy_mean).reduce(f64::max))
        .collect();
    for (m, method) in g.methods.iter().enumerate() {
        write!(md, "| {method} |").unwrap();
        for t in 0..g.tasks.len() {
            match g.cells[t][m] {
                Some(r) => {
                    let cell = format!("{:.1} ± {:.1}", r.accuracy_mean, r.accuracy_std);
                    if best[t] == Some(r.accuracy_mean) {
                        write!(md, " **{cell}** |").unwrap();
                    } else {
                        write!(md, " {cell} |").unwrap();
                    }
                }
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    write(dir.join("results.md"), md.as_bytes(), &mut files)?;

    let json = serde_json::to_vec_pretty(reports)?;
    write(dir.join("results.json"), &json, &mut files)?;

    let svg = accuracy_figure(&g)?;
    write(dir.join("results.svg"), svg.as_bytes(), &mut files)?;
    Ok(files)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("figure rendering failed: {e}"))
}

fn y_range<'a>(rs: impl Iterator<Item = &'a ProbeReport>) -> (f64, f64) {
    let (lo, hi) = rs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (
            lo.min(r.accuracy_mean - r.accuracy_std).min(r.majority_class_accuracy),
            hi.max(r.accuracy_mean + r.accuracy_std),
        )
    });
    ((lo - 5.0).max(0.0).floor(), (hi + 5.0).min(100.0).ceil())
}

/// Mean accuracy with one-std error bars, one colour per method.
fn accuracy_figure(g: &Grid) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (lo, hi) = y_range(g.cells.iter().flatten().flatten().copied());
        let n_tasks = g.tasks.len() as f64;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .caption("Probe accuracy (%)", ("sans-serif", 18))
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(-0.5..n_tasks - 0.5, lo..hi)
            .map_err(plot_err)?;
        let tasks = g.tasks.clone();
        chart
            .configure_mesh()
            .x_labels(g.tasks.len())
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < tasks.len() {
                    tasks[i as usize].clone()
                } else {
                    String::new()
                }
            })
            .disable_x_mesh()
            .draw()
            .map_err(plot_err)?;
        let width = 0.6 / g.methods.len().max(1) as f64;
        for (m, method) in g.methods.iter().enumerate() {
            let color = PALETTE[m % PALETTE.len()];
            let pts: Vec<(f64, f64, f64)> = (0..g.tasks.len())
                .filter_map(|t| {
                    g.cells[t][m].map(|r| {
                        let x = t as f64 - 0.3 + width * (m as f64 + 0.5);
                        (x, r.accuracy_mean, r.accuracy_std)
                    })
                })
                .collect();
            chart
                .draw_series(pts.iter().map(|&(x, y, s)| {
                    ErrorBar::new_vertical(x, y - s, y, y + s, color.filled(), 6)
                }))
                .map_err(plot_err)?
                .label(method.clone())
                .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
            chart
                .draw_series(pts.iter().map(|&(x, y, _)| Circle::new((x, y), 4, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Writes `scaling.csv`, `scaling.json` and `scaling.svg` (accuracy against
/// pretraining pool size, one line per downstream task).
pub fn render_scaling(report: &ScalingReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.points.is_empty() {
        return Err(Error::InvalidInput("empty scaling report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();

    let mut csv = String::from("n_pools,n_subjects,task,accuracy_mean,accuracy_std\n");
    for p in &report.points {
        for r in &p.reports {
            writeln!(
                csv,
                "{},{},{},{:.4},{:.4}",
                p.n_pools,
                p.n_subjects,
                csv_field(&task_label(r)),
                r.accuracy_mean,
                r.accuracy_std
            )
            .unwrap();
        }
    }
    write(dir.join("scaling.csv"), csv.as_bytes(), &mut files)?;
    write(dir.join("scaling.json"), &serde_json::to_vec_pretty(report)?, &mut files)?;

    let tasks = unique(report.points.iter().flat_map(|p| p.reports.iter().map(task_label)));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (lo, hi) = y_range(report.points.iter().flat_map(|p| p.reports.iter()));
        let xs: Vec<f64> = report.points.iter().map(|p| p.n_subjects as f64).collect();
        let xmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let xmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((xmax - xmin) * 0.1).max(1.0);
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .caption("Accuracy vs pretraining subjects", ("sans-serif", 18))
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(xmin - pad..xmax + pad, lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("pretraining subjects")
            .y_desc("accuracy (%)")
            .draw()
            .map_err(plot_err)?;
        for (k, task) in tasks.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(f64, f64, f64)> = report
                .points
                .iter()
                .filter_map(|p| {
                    p.reports
                        .iter()
                        .find(|r| task_label(r) == *task)
                        .map(|r| (p.n_subjects as f64, r.accuracy_mean, r.accuracy_std))
                })
                .collect();
            chart
                .draw_series(LineSeries::new(pts.iter().map(|&(x, y, _)| (x, y)), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(task.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&(x, y, s)| ErrorBar::new_vertical(x, y - s, y, y + s, color.filled(), 6)))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write(dir.join("scaling.svg"), svg.as_bytes(), &mut files)?;
    Ok(files)
}
