//! Success-rate-vs-epoch charts. Runs of the same variant are averaged and
//! drawn with a one-standard-deviation band.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use demoaug_core::agent::BufferSource;
use demoaug_core::sim::TaskKind;

use crate::commands::{read_metrics, RunManifest, MANIFEST_FILE};
use crate::CliError;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Mean curve of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub runs: usize,
    pub epochs: Vec<usize>,
    pub mean: Vec<f64>,
    /// Sample standard deviation per epoch; `None` for a single run.
    pub std: Option<Vec<f64>>,
}

struct Run {
    label: String,
    task: Option<TaskKind>,
    epochs: Vec<usize>,
    success: Vec<f64>,
}

fn variant_label(m: &RunManifest) -> String {
    let a = &m.config.agent;
    let mut label = match a.buffer_source {
        BufferSource::None => "baseline".to_string(),
        other => other.to_string(),
    };
    if a.preplay_enabled {
        label.push_str(" + pre-play");
    }
    if !a.her_enabled {
        label.push_str(", no HER");
    }
    label
}

fn load_run(path: &Path) -> Result<Run, CliError> {
    let rows = read_metrics(path)?;
    if rows.is_empty() {
        return Err(CliError::config(format!("{}: no metrics rows", path.display())));
    }
    let manifest_path = path.parent().map(|d| d.join(MANIFEST_FILE)).unwrap_or_else(|| PathBuf::from(MANIFEST_FILE));
    let manifest: Option<RunManifest> = fs::read_to_string(&manifest_path).ok().and_then(|t| serde_json::from_str(&t).ok());
    let label = match &manifest {
        Some(m) => variant_label(m),
        None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    Ok(Run {
        label,
        task: manifest.map(|m| m.config.task.kind),
        epochs: rows.iter().map(|r| r.epoch).collect(),
        success: rows.iter().map(|r| r.success_rate).collect(),
    })
}

/// Groups runs by variant and averages them over their common epochs.
pub fn curves(paths: &[PathBuf]) -> Result<(Option<TaskKind>, Vec<Curve>), CliError> {
    if paths.is_empty() {
        return Err(CliError::config("plot: no metrics files given"));
    }
    let runs = paths.iter().map(|p| load_run(p)).collect::<Result<Vec<_>, _>>()?;
    let mut tasks: Vec<TaskKind> = runs.iter().filter_map(|r| r.task).collect();
    tasks.sort_by_key(|t| t.as_str());
    tasks.dedup();
    if tasks.len() > 1 {
        let names: Vec<&str> = tasks.iter().map(|t| t.as_str()).collect();
        return Err(CliError::config(format!("plot: refusing to mix tasks ({})", names.join(", "))));
    }

    let mut labels: Vec<&str> = Vec::new();
    for r in &runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let curves = labels
        .iter()
        .map(|label| {
            let group: Vec<&Run> = runs.iter().filter(|r| r.label == *label).collect();
            let len = group.iter().map(|r| r.success.len()).min().unwrap_or(0);
            let n = group.len() as f64;
            let mean: Vec<f64> = (0..len).map(|i| group.iter().map(|r| r.success[i]).sum::<f64>() / n).collect();
            let std = (group.len() > 1).then(|| {
                (0..len)
                    .map(|i| {
                        let ss: f64 = group.iter().map(|r| (r.success[i] - mean[i]).powi(2)).sum();
                        (ss / (n - 1.0)).sqrt()
                    })
                    .collect()
            });
            Curve { label: label.to_string(), runs: group.len(), epochs: group[0].epochs[..len].to_vec(), mean, std }
        })
        .collect();
    Ok((tasks.first().copied(), curves))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(task: Option<TaskKind>, curves: &[Curve]) -> String {
    let max_epoch = curves.iter().flat_map(|c| c.epochs.iter().copied()).max().unwrap_or(0).max(1) as f64;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let x = |e: f64| MARGIN_LEFT + e / max_epoch * plot_w;
    let y = |s: f64| MARGIN_Y + (1.0 - s.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = match task {
        Some(t) => format!("Success rate ({t})"),
        None => "Success rate".to_string(),
    };
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, MARGIN_LEFT + plot_w / 2.0, escape(&title));
    for i in 0..=5 {
        let s = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{s:.1}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            y(s) + 4.0,
            yy = y(s)
        );
    }
    let ticks = 5.min(max_epoch as usize);
    for i in 0..=ticks {
        let e = (max_epoch * i as f64 / ticks as f64).round();
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#, x(e), HEIGHT - MARGIN_Y + 16.0);
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Epoch</text>"#, MARGIN_LEFT + plot_w / 2.0, HEIGHT - 6.0);

    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if let Some(std) = &c.std {
            let upper = c.epochs.iter().zip(&c.mean).zip(std).map(|((e, m), s)| format!("{:.2},{:.2}", x(*e as f64), y(m + s)));
            let lower = c.epochs.iter().zip(&c.mean).zip(std).rev().map(|((e, m), s)| format!("{:.2},{:.2}", x(*e as f64), y(m - s)));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(svg, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = c.epochs.iter().zip(&c.mean).map(|(e, m)| format!("{:.2},{:.2}", x(*e as f64), y(*m))).collect();
        let _ = writeln!(svg, r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = MARGIN_Y + 14.0 + 20.0 * k as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} (n={})</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&c.label),
            c.runs
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads the metrics files and writes the chart to `out`.
pub fn plot(paths: &[PathBuf], out: &Path) -> Result<Vec<Curve>, CliError> {
    let (task, curves) = curves(paths)?;
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    fs::write(out, render_svg(task, &curves))?;
    Ok(curves)
}
