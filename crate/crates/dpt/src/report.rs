//! Markdown tables, JSON dump and PNG plots for a [`Report`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dpt_core::dpt::Paradigm;
use dpt_core::eval::{BreakdownTable, Report};
use image::{Rgb, RgbImage};

use crate::error::{Error, IoError, Result};
use crate::io;

pub fn paradigm_color(p: Paradigm) -> Rgb<u8> {
    match p {
        Paradigm::Baseline => Rgb([120, 120, 120]),
        Paradigm::MaskPrompt => Rgb([230, 159, 0]),
        Paradigm::DynamicPrompt => Rgb([86, 180, 233]),
        Paradigm::DptMlm => Rgb([0, 158, 115]),
        Paradigm::DptMlmItm => Rgb([213, 94, 0]),
    }
}

fn color_name(p: Paradigm) -> &'static str {
    match p {
        Paradigm::Baseline => "gray",
        Paradigm::MaskPrompt => "orange",
        Paradigm::DynamicPrompt => "sky blue",
        Paradigm::DptMlm => "green",
        Paradigm::DptMlmItm => "vermilion",
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn breakdown_md(out: &mut String, title: &str, tables: &[BreakdownTable]) {
    if tables.is_empty() {
        return;
    }
    let groups: Vec<String> = {
        let mut seen = Vec::new();
        for t in tables {
            for r in &t.rows {
                if !seen.contains(&r.group) {
                    seen.push(r.group.clone());
                }
            }
        }
        seen
    };
    let _ = writeln!(out, "## {title}\n");
    let _ = write!(out, "| group | n |");
    for t in tables {
        let _ = write!(out, " {} |", t.paradigm.as_str());
    }
    let _ = write!(out, "\n|---|---|");
    for _ in tables {
        let _ = write!(out, "---|");
    }
    out.push('\n');
    for g in &groups {
        let n = tables.iter().flat_map(|t| &t.rows).find(|r| &r.group == g).map_or(0, |r| r.n);
        let _ = write!(out, "| {g} | {n} |");
        for t in tables {
            match t.rows.iter().find(|r| &r.group == g) {
                Some(r) => {
                    let _ = write!(out, " {} |", pct(r.accuracy));
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out.push('\n');
}

/// Markdown rendering; accuracies in percent.
pub fn render_markdown(report: &Report, title: &str) -> String {
    let mut out = format!("# {title}\n\n");
    if !report.supervised.is_empty() {
        out.push_str("## Supervised fine-tuning\n\n| paradigm | runs | accuracy | std | soft accuracy |\n|---|---|---|---|---|\n");
        for r in &report.supervised {
            let _ = writeln!(out, "| {} | {} | {} | {} | {} |", r.paradigm.as_str(), r.runs, pct(r.mean), pct(r.std), pct(r.soft_mean));
        }
        out.push('\n');
    }
    breakdown_md(&mut out, "Accuracy by question type", &report.per_qtype);
    if !report.per_qtype.is_empty() {
        out.push_str("The five synthetic question types stand in for a semantic breakdown; there is no analogue of a \"global\" type.\n\n");
    }
    breakdown_md(&mut out, "Accuracy by question length (tokens)", &report.per_length);
    if !report.few_shot.is_empty() {
        out.push_str("## Zero/few-shot\n\n| shots | paradigm | splits | mean | std | delta vs baseline |\n|---|---|---|---|---|---|\n");
        for r in &report.few_shot {
            let d = r.delta_vs_baseline.map_or("-".to_string(), |d| format!("{:+.2}", 100.0 * d));
            let _ = writeln!(out, "| {} | {} | {} | {} | {} | {} |", r.shots, r.paradigm.as_str(), r.splits, pct(r.mean), pct(r.std), d);
        }
        out.push('\n');
    }
    if !report.k_sweep.is_empty() {
        out.push_str("## Candidates verified by matching (K)\n\n| K | accuracy |\n|---|---|\n");
        for r in &report.k_sweep {
            let _ = writeln!(out, "| {} | {} |", r.k, pct(r.mean));
        }
        out.push('\n');
    }
    let paradigms: BTreeSet<Paradigm> = report
        .supervised
        .iter()
        .map(|r| r.paradigm)
        .chain(report.few_shot.iter().map(|r| r.paradigm))
        .collect();
    if !paradigms.is_empty() {
        out.push_str("Plot colors: ");
        let parts: Vec<String> = paradigms.iter().map(|p| format!("{} = {}", p.as_str(), color_name(*p))).collect();
        out.push_str(&parts.join(", "));
        out.push_str(".\n");
    }
    out
}

struct Canvas {
    img: RgbImage,
    left: i64,
    right: i64,
    top: i64,
    bottom: i64,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        let mut c = Canvas { img: RgbImage::from_pixel(w, h, Rgb([255, 255, 255])), left: 40, right: w as i64 - 20, top: 20, bottom: h as i64 - 30 };
        for i in 0..=4 {
            let y = c.y(i as f64 / 4.0);
            c.hline(y, Rgb([225, 225, 225]));
        }
        c.hline(c.bottom, Rgb([0, 0, 0]));
        for y in c.top..=c.bottom {
            c.put(c.left, y, Rgb([0, 0, 0]));
        }
        c
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn hline(&mut self, y: i64, color: Rgb<u8>) {
        for x in self.left..=self.right {
            self.put(x, y, color);
        }
    }

    /// Accuracy in `[0, 1]` to a pixel row.
    fn y(&self, v: f64) -> i64 {
        let v = v.clamp(0.0, 1.0);
        self.bottom - ((self.bottom - self.top) as f64 * v).round() as i64
    }

    fn slot_x(&self, i: usize, n: usize) -> i64 {
        let w = (self.right - self.left) as f64;
        self.left + (w * (i as f64 + 0.5) / n as f64).round() as i64
    }

    fn rect(&mut self, x0: i64, x1: i64, y0: i64, y1: i64, color: Rgb<u8>) {
        for x in x0.min(x1)..=x0.max(x1) {
            for y in y0.min(y1)..=y0.max(y1) {
                self.put(x, y, color);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + ((x1 - x0) as f64 * t).round() as i64;
            let y = y0 + ((y1 - y0) as f64 * t).round() as i64;
            self.rect(x - 1, x + 1, y - 1, y + 1, color);
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::Plot(format!("{}: {e}", path.display())))
    }
}

fn grouped_bars(path: &Path, groups: &[String], series: &[(Paradigm, Vec<Option<f64>>)]) -> Result<()> {
    let mut c = Canvas::new(640, 360);
    let n = groups.len().max(1);
    let slot = (c.right - c.left) as f64 / n as f64;
    let bar = ((slot * 0.8) / series.len().max(1) as f64).max(1.0);
    for (gi, _) in groups.iter().enumerate() {
        let x0 = c.left as f64 + slot * gi as f64 + slot * 0.1;
        for (si, (p, vals)) in series.iter().enumerate() {
            if let Some(v) = vals[gi] {
                let xa = (x0 + bar * si as f64).round() as i64;
                let xb = (x0 + bar * (si + 1) as f64).round() as i64 - 1;
                let (yb, yv) = (c.bottom, c.y(v));
                c.rect(xa, xb.max(xa), yv, yb, paradigm_color(*p));
            }
        }
    }
    c.save(path)
}

fn shots_plot(path: &Path, report: &Report) -> Result<()> {
    let shots: Vec<usize> = report.few_shot.iter().map(|r| r.shots).collect::<BTreeSet<_>>().into_iter().collect();
    let paradigms: BTreeSet<Paradigm> = report.few_shot.iter().map(|r| r.paradigm).collect();
    let mut c = Canvas::new(640, 360);
    for p in paradigms {
        let color = paradigm_color(p);
        let mut prev = None;
        for (i, &s) in shots.iter().enumerate() {
            let Some(r) = report.few_shot_row(s, p) else { continue };
            let x = c.slot_x(i, shots.len());
            let y = c.y(r.mean);
            let (ylo, yhi) = (c.y(r.mean - r.std), c.y(r.mean + r.std));
            c.rect(x, x, yhi, ylo, color);
            c.rect(x - 4, x + 4, ylo, ylo, color);
            c.rect(x - 4, x + 4, yhi, yhi, color);
            c.rect(x - 3, x + 3, y - 3, y + 3, color);
            if let Some(p0) = prev {
                c.line(p0, (x, y), color);
            }
            prev = Some((x, y));
        }
    }
    c.save(path)
}

fn breakdown_series(tables: &[BreakdownTable]) -> (Vec<String>, Vec<(Paradigm, Vec<Option<f64>>)>) {
    let mut groups: Vec<String> = Vec::new();
    for t in tables {
        for r in &t.rows {
            if !groups.contains(&r.group) {
                groups.push(r.group.clone());
            }
        }
    }
    let series = tables
        .iter()
        .map(|t| (t.paradigm, groups.iter().map(|g| t.rows.iter().find(|r| &r.group == g).map(|r| r.accuracy)).collect()))
        .collect();
    (groups, series)
}

/// Writes every plot the report has data for; returns the written paths.
pub fn render_plots(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    let mut out = Vec::new();
    if !report.few_shot.is_empty() {
        let p = dir.join("accuracy_vs_shots.png");
        shots_plot(&p, report)?;
        out.push(p);
    }
    for (name, tables) in [("breakdown_qtype.png", &report.per_qtype), ("breakdown_length.png", &report.per_length)] {
        if tables.is_empty() {
            continue;
        }
        let (groups, series) = breakdown_series(tables);
        let p = dir.join(name);
        grouped_bars(&p, &groups, &series)?;
        out.push(p);
    }
    if !report.k_sweep.is_empty() {
        let groups: Vec<String> = report.k_sweep.iter().map(|r| r.k.to_string()).collect();
        let vals = report.k_sweep.iter().map(|r| Some(r.mean)).collect();
        let p = dir.join("k_sweep.png");
        grouped_bars(&p, &groups, &[(Paradigm::DptMlmItm, vals)])?;
        out.push(p);
    }
    Ok(out)
}

/// `report.md`, `report.json` and `plots/*.png` under `dir`.
pub fn write_report(report: &Report, dir: &Path, title: &str) -> Result<Vec<PathBuf>> {
    let md = dir.join("report.md");
    fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    fs::write(&md, render_markdown(report, title)).map_err(|e| IoError::at(&md, e))?;
    io::write_json(&dir.join("report.json"), report)?;
    render_plots(report, &dir.join("plots"))
}
