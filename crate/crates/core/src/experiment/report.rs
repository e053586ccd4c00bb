use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::run::RunLayout;
use crate::metrics::alignment::percent1;
use crate::metrics::{tfr, AlignmentMatrix};
use crate::trainer::TrainingLog;

/// Evaluation results of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub name: String,
    pub matrix: AlignmentMatrix,
    /// `(k, TFR-IA, TFR-TA)` for `k = 2..=K`.
    pub forgetting: Vec<(usize, f64, f64)>,
    pub logs: Vec<TrainingLog>,
}

impl MethodResult {
    pub fn tasks(&self) -> usize {
        self.matrix.tasks()
    }

    pub fn final_tfr(&self) -> Option<(f64, f64)> {
        self.forgetting.last().map(|&(_, ia, ta)| (ia, ta))
    }

    /// Mean IA and TA over all tasks after the last one.
    pub fn final_alignment(&self) -> (f64, f64) {
        let k = self.tasks();
        let row: Vec<(f64, f64)> = (1..=k).filter_map(|l| self.matrix.get(k, l)).collect();
        let n = row.len().max(1) as f64;
        (
            row.iter().map(|r| r.0).sum::<f64>() / n,
            row.iter().map(|r| r.1).sum::<f64>() / n,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    /// Methods ordered by final TFR-IA, lowest first; methods without a
    /// forgetting rate come last.
    pub methods: Vec<MethodResult>,
    pub files: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn ablation_csv(&self) -> String {
        let mut s = String::from("method,tasks,tfr_ia,tfr_ta,final_ia,final_ta\n");
        for m in &self.methods {
            let (ia, ta) = m.final_alignment();
            let (fi, ft) = match m.final_tfr() {
                Some((fi, ft)) => (fi.to_string(), ft.to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(s, "{},{},{fi},{ft},{ia},{ta}", m.name, m.tasks());
        }
        s
    }

    pub fn tfr_csv(&self) -> String {
        let mut s = String::from("method,k,tfr_ia,tfr_ta\n");
        for m in &self.methods {
            for (k, ia, ta) in &m.forgetting {
                let _ = writeln!(s, "{},{k},{ia},{ta}", m.name);
            }
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Lifelong personalization report\n\n");
        s.push_str("## Forgetting (lower is better)\n\n");
        s.push_str("| method | tasks | TFR-IA | TFR-TA | final IA | final TA |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for m in &self.methods {
            let (ia, ta) = m.final_alignment();
            let (fi, ft) = m
                .final_tfr()
                .map_or(("n/a".into(), "n/a".into()), |(a, b)| (percent1(a), percent1(b)));
            let _ = writeln!(
                s,
                "| {} | {} | {fi} | {ft} | {} | {} |",
                m.name,
                m.tasks(),
                percent1(ia),
                percent1(ta)
            );
        }
        for m in &self.methods {
            let _ = write!(s, "\n## {}\n\nIA / TA of task l after learning task k:\n\n", m.name);
            let k_max = m.tasks();
            s.push_str("| k |");
            for l in 1..=k_max {
                let _ = write!(s, " task {l} |");
            }
            s.push_str("\n|---|");
            s.push_str(&"---|".repeat(k_max));
            s.push('\n');
            for k in 1..=k_max {
                let _ = write!(s, "| {k} |");
                for l in 1..=k_max {
                    match m.matrix.get(k, l) {
                        Some((ia, ta)) => {
                            let _ = write!(s, " {} / {} |", percent1(ia), percent1(ta));
                        }
                        None => s.push_str("  |"),
                    }
                }
                s.push('\n');
            }
            let _ = write!(
                s,
                "\n![alignment]({0}-alignment.svg) ![losses]({0}-losses.svg)\n",
                m.name
            );
        }
        s.push_str("\n![forgetting](forgetting.svg)\n");
        s
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(Error::io(path))
}

fn load_method(dir: &Path, name: String) -> Result<MethodResult> {
    let layout = RunLayout::new(dir);
    let matrix = AlignmentMatrix::load(&layout.alignment())?;
    let k_max = matrix.tasks();
    if k_max == 0 {
        return Err(Error::EmptyInput(format!("{}", layout.alignment().display())));
    }
    let forgetting = (2..=k_max)
        .map(|k| tfr(&matrix, k).map(|(ia, ta)| (k, ia, ta)))
        .collect::<Result<_>>()?;
    let logs = (1..=k_max)
        .map(|k| {
            let path = layout.log(k);
            TrainingLog::from_csv(&read_text(&path)?, &path.display().to_string())
        })
        .collect::<Result<_>>()?;
    Ok(MethodResult {
        name,
        matrix,
        forgetting,
        logs,
    })
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

/// Run directories covered by a report on `root`: `root` itself when it
/// holds an evaluation, plus every immediate subdirectory that does.
fn method_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let mut dirs = Vec::new();
    if RunLayout::new(root).alignment().exists() {
        dirs.push(root.to_path_buf());
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && RunLayout::new(p).alignment().exists())
        .collect();
    subs.sort();
    dirs.extend(subs);
    if dirs.is_empty() {
        return Err(Error::MissingArtifact(RunLayout::new(root).alignment()));
    }
    Ok(dirs)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::integrity("plot", e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.5);
    (lo - pad, hi + pad)
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(
    area: &DrawingArea<SVGBackend<'_>, plotters::coord::Shift>,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color.stroke_width(2)));
        if points.len() == 1 {
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)
}

fn alignment_series(m: &MethodResult, metric: impl Fn((f64, f64)) -> f64) -> Vec<Series> {
    (1..=m.tasks())
        .map(|l| {
            let pts = (l..=m.tasks())
                .filter_map(|k| m.matrix.get(k, l).map(|v| (k as f64, metric(v))))
                .collect();
            (format!("task {l}"), pts)
        })
        .collect()
}

fn plot_alignment(m: &MethodResult, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (900, 380)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(450);
    line_chart(&left, &format!("{}: IA", m.name), "after task k", "IA", &alignment_series(m, |v| v.0))?;
    line_chart(&right, &format!("{}: TA", m.name), "after task k", "TA", &alignment_series(m, |v| v.1))?;
    root.present().map_err(plot_err)
}

/// Moving average over `window` rows, sampled every `window / 2` steps.
fn smoothed_losses(log: &TrainingLog, window: usize) -> Vec<(f64, f64)> {
    let window = window.max(1);
    let stride = (window / 2).max(1);
    let totals: Vec<f64> = log.rows.iter().map(|r| r.total).collect();
    (window.min(totals.len())..=totals.len())
        .step_by(stride)
        .map(|end| {
            let start = end.saturating_sub(window);
            let mean = totals[start..end].iter().sum::<f64>() / (end - start) as f64;
            (log.rows[end - 1].step as f64, mean)
        })
        .collect()
}

fn plot_losses(m: &MethodResult, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (500, 380)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let series: Vec<Series> = m
        .logs
        .iter()
        .enumerate()
        .map(|(i, log)| (format!("task {}", i + 1), smoothed_losses(log, 25)))
        .collect();
    line_chart(&root, &format!("{}: training loss", m.name), "step", "total loss", &series)?;
    root.present().map_err(plot_err)
}

fn plot_forgetting(methods: &[MethodResult], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (900, 380)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(450);
    let series = |pick: fn(&(usize, f64, f64)) -> f64| -> Vec<Series> {
        methods
            .iter()
            .map(|m| {
                let pts = m.forgetting.iter().map(|f| (f.0 as f64, pick(f))).collect();
                (m.name.clone(), pts)
            })
            .collect()
    };
    line_chart(&left, "TFR-IA", "after task k", "TFR-IA", &series(|f| f.1))?;
    line_chart(&right, "TFR-TA", "after task k", "TFR-TA", &series(|f| f.2))?;
    root.present().map_err(plot_err)
}

/// Builds the report of `root` from its stored CSVs and writes it to
/// `root/report/`.
pub fn run_report(root: &Path) -> Result<ReportBundle> {
    let mut methods = method_dirs(root)?
        .iter()
        .map(|d| load_method(d, dir_name(d)))
        .collect::<Result<Vec<_>>>()?;
    methods.sort_by(|a, b| match (a.final_tfr(), b.final_tfr()) {
        (Some(x), Some(y)) => x.0.total_cmp(&y.0).then_with(|| a.name.cmp(&b.name)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.name.cmp(&b.name),
    });
    let out = RunLayout::new(root).report();
    fs::create_dir_all(&out).map_err(Error::io(&out))?;
    let mut bundle = ReportBundle {
        methods,
        files: Vec::new(),
    };
    let mut files = Vec::new();
    for m in &bundle.methods {
        let a = out.join(format!("{}-alignment.svg", m.name));
        plot_alignment(m, &a)?;
        let l = out.join(format!("{}-losses.svg", m.name));
        plot_losses(m, &l)?;
        files.extend([a, l]);
    }
    let f = out.join("forgetting.svg");
    plot_forgetting(&bundle.methods, &f)?;
    files.push(f);
    for (name, text) in [
        ("ablation.csv", bundle.ablation_csv()),
        ("tfr.csv", bundle.tfr_csv()),
        ("summary.md", bundle.markdown()),
    ] {
        let p = out.join(name);
        fs::write(&p, text).map_err(Error::io(&p))?;
        files.push(p);
    }
    bundle.files = files;
    Ok(bundle)
}
