//! PNG plots of training logs and evaluation results.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use adversa_core::pipeline::{EvalReport, RunDir};
use adversa_core::{Error, Result};
use plotters::prelude::*;
use plotters::style::FontStyle;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system font for labels. Plots are drawn without text when
/// none is available.
fn fonts_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let from_env = std::env::var("ADVERSA_FONT").ok();
        for path in from_env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied()) {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots will have no labels");
        false
    })
}

fn draw_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Format(format!("plotting: {e}"))
}

/// Reads a numeric CSV with a header row into named columns.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e.to_string()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!("{}:{}: expected {} fields", path.display(), i + 2, header.len())));
        }
        for (c, f) in cols.iter_mut().zip(fields) {
            c.push(f.parse().map_err(|_| Error::Format(format!("{}:{}: bad number {f:?}", path.display(), i + 2)))?);
        }
    }
    Ok((header, cols))
}

fn bounds(series: &[&[f64]]) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.iter())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Line plot of the named columns against the first column.
pub fn plot_log(csv: &Path, columns: &[&str], title: &str, out: &Path) -> Result<()> {
    let (header, cols) = read_columns(csv)?;
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{} has no column {name}", csv.display())))
    };
    let x = &cols[0];
    let ys = columns.iter().map(|c| Ok((*c, &cols[find(c)?]))).collect::<Result<Vec<_>>>()?;
    let (xlo, xhi) = bounds(&[x]);
    let (ylo, yhi) = bounds(&ys.iter().map(|(_, v)| v.as_slice()).collect::<Vec<_>>());
    let labels = fonts_available();

    let root = BitMapBackend::new(out, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if labels {
        builder.caption(title, ("sans-serif", 22)).x_label_area_size(36).y_label_area_size(56);
    }
    let mut chart = builder.build_cartesian_2d(xlo..xhi, ylo..yhi).map_err(draw_err)?;
    let mut mesh = chart.configure_mesh();
    if labels {
        mesh.x_desc(header[0].as_str()).y_desc("value");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(draw_err)?;
    for (i, (name, y)) in ys.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series = chart
            .draw_series(LineSeries::new(x.iter().copied().zip(y.iter().copied()), color.stroke_width(1)))
            .map_err(draw_err)?;
        if labels {
            series
                .label(*name)
                .legend(move |(px, py)| PathElement::new(vec![(px, py), (px + 20, py)], color));
        }
    }
    if labels {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Per-scenario background versus object error, with the diagonal.
pub fn plot_fidelity(report: &EvalReport, out: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = report.scenarios.iter().map(|s| (s.obj_err, s.bg_err)).collect();
    let hi = pts.iter().fold(1e-6_f64, |m, &(a, b)| m.max(a).max(b)) * 1.05;
    let labels = fonts_available();
    let root = BitMapBackend::new(out, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if labels {
        builder
            .caption("background vs object error", ("sans-serif", 22))
            .x_label_area_size(36)
            .y_label_area_size(56);
    }
    let mut chart = builder.build_cartesian_2d(0.0..hi, 0.0..hi).map_err(draw_err)?;
    let mut mesh = chart.configure_mesh();
    if labels {
        mesh.x_desc("object error").y_desc("background error");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(draw_err)?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (hi, hi)], BLACK.mix(0.4)))
        .map_err(draw_err)?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Renders every plot whose inputs exist and returns the written paths.
pub fn plot_all(run: &RunDir) -> Result<Vec<PathBuf>> {
    let dir = run.plots_dir();
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    if run.clip_log().exists() {
        let out = dir.join("clip_loss.png");
        plot_log(&run.clip_log(), &["loss_o", "loss_r", "loss_p", "loss_a", "total"], "alignment training loss", &out)?;
        written.push(out);
    }
    if run.oavd_log().exists() {
        let out = dir.join("oavd_loss.png");
        plot_log(&run.oavd_log(), &["loss", "mse", "masked"], "diffusion training loss", &out)?;
        written.push(out);
    }
    let report = run.eval_dir().join("report.json");
    if report.exists() {
        let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report)?)?;
        let out = dir.join("fidelity.png");
        plot_fidelity(&r, &out)?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(Error::path(&run.root, "no training logs or evaluation report to plot"));
    }
    Ok(written)
}
