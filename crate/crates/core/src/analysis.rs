//! State/action distribution recording and self-contained SVG figures.
//!
//! Distributions are accumulated in streaming form: fixed 64-bin histograms
//! plus one running mean per iteration, so no raw samples are retained.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::ppo::Trainer;
use crate::rollout::RolloutBatch;

pub const NUM_BINS: usize = 64;

/// Where a channel's samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    JointPos,
    JointVel,
    Action,
    Obs,
}

/// One scalar channel of a rollout batch with its histogram range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub source: Source,
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Channel {
    /// Channel with the default range of its source: joint limits for
    /// positions, +-20 rad/s for speeds, +-3 for actions and +-5 for raw
    /// observation entries.
    pub fn new(source: Source, index: usize, joint_limit: f64) -> Result<Self> {
        let (dim, lo, hi) = match source {
            Source::JointPos => (ACT_DIM, -joint_limit, joint_limit),
            Source::JointVel => (ACT_DIM, -20.0, 20.0),
            Source::Action => (ACT_DIM, -3.0, 3.0),
            Source::Obs => (OBS_DIM, -5.0, 5.0),
        };
        if index >= dim {
            return Err(Error::config("channels", format!("index {index} out of range for {source:?}")));
        }
        Ok(Self { source, index, lo, hi })
    }

    pub fn name(&self) -> String {
        let s = match self.source {
            Source::JointPos => "joint_pos",
            Source::JointVel => "joint_vel",
            Source::Action => "action",
            Source::Obs => "obs",
        };
        format!("{s}{}", self.index)
    }

    /// Parse `kind:index[:lo:hi]`, e.g. `joint_pos:3` or `obs:2:-1:1`.
    pub fn parse(spec: &str, joint_limit: f64) -> Result<Self> {
        let bad = |m: &str| Error::config("channels", format!("`{spec}`: {m}"));
        let parts: Vec<&str> = spec.trim().split(':').collect();
        if parts.len() != 2 && parts.len() != 4 {
            return Err(bad("expected kind:index or kind:index:lo:hi"));
        }
        let source = match parts[0] {
            "joint_pos" => Source::JointPos,
            "joint_vel" => Source::JointVel,
            "action" => Source::Action,
            "obs" => Source::Obs,
            _ => return Err(bad("kind must be joint_pos, joint_vel, action or obs")),
        };
        let index = parts[1].parse().map_err(|_| bad("index is not an integer"))?;
        let mut ch = Self::new(source, index, joint_limit)?;
        if parts.len() == 4 {
            ch.lo = parts[2].parse().map_err(|_| bad("lo is not a number"))?;
            ch.hi = parts[3].parse().map_err(|_| bad("hi is not a number"))?;
            if !(ch.lo < ch.hi) {
                return Err(bad("lo must be below hi"));
            }
        }
        Ok(ch)
    }

    /// Comma-separated list of channel specs.
    pub fn parse_list(spec: &str, joint_limit: f64) -> Result<Vec<Self>> {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| Self::parse(s, joint_limit))
            .collect()
    }

    /// Every joint position, joint speed and action channel.
    pub fn defaults(joint_limit: f64) -> Vec<Self> {
        [Source::JointPos, Source::JointVel, Source::Action]
            .into_iter()
            .flat_map(|s| (0..ACT_DIM).map(move |i| Self::new(s, i, joint_limit).unwrap()))
            .collect()
    }

    /// Samples of this channel in `batch`, in transition order.
    pub fn samples<'a>(&self, batch: &'a RolloutBatch) -> impl Iterator<Item = f64> + 'a {
        let (data, stride) = match self.source {
            Source::JointPos => (&batch.joint_pos, ACT_DIM),
            Source::JointVel => (&batch.joint_vel, ACT_DIM),
            Source::Action => (&batch.actions, ACT_DIM),
            Source::Obs => (&batch.obs, OBS_DIM),
        };
        data.iter().skip(self.index).step_by(stride).copied()
    }
}

/// Fixed-bin histogram; out-of-range samples land in the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self {
            edges,
            counts: vec![0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, x: f64) {
        let lo = self.edges[0];
        let hi = self.edges[self.bins()];
        let b = ((x - lo) / (hi - lo) * self.bins() as f64).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(self.bins() - 1) };
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalised bin masses.
    pub fn masses(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Total-variation distance between two histograms over the same bins.
pub fn tv_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::contract("histograms use different bins"));
    }
    Ok(0.5 * a.masses().iter().zip(b.masses()).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub channel: Channel,
    pub first_iteration: Option<u64>,
    pub last_iteration: Option<u64>,
    pub histogram: Histogram,
    /// `(iteration, mean over all envs and steps)`.
    pub running_means: Vec<(u64, f64)>,
}

impl DistributionRecord {
    pub fn new(channel: Channel) -> Self {
        let histogram = Histogram::new(channel.lo, channel.hi, NUM_BINS);
        Self {
            channel,
            first_iteration: None,
            last_iteration: None,
            histogram,
            running_means: Vec::new(),
        }
    }

    pub fn observe(&mut self, iteration: u64, batch: &RolloutBatch) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for x in self.channel.samples(batch) {
            self.histogram.add(x);
            sum += x;
            n += 1;
        }
        self.first_iteration.get_or_insert(iteration);
        self.last_iteration = Some(iteration);
        self.running_means.push((iteration, if n == 0 { f64::NAN } else { sum / n as f64 }));
    }
}

/// Streams batches of the first `max_iterations` iterations into records.
#[derive(Debug, Clone)]
pub struct DistributionRecorder {
    pub records: Vec<DistributionRecord>,
    pub max_iterations: u64,
}

impl DistributionRecorder {
    pub fn new(channels: Vec<Channel>, max_iterations: u64) -> Self {
        Self {
            records: channels.into_iter().map(DistributionRecord::new).collect(),
            max_iterations,
        }
    }

    pub fn observe(&mut self, iteration: u64, batch: &RolloutBatch) {
        if iteration < self.max_iterations {
            self.records.iter_mut().for_each(|r| r.observe(iteration, batch));
        }
    }
}

/// Train from `config` for `iterations` iterations, recording `channels`.
pub fn record_distributions(
    config: &ExperimentConfig,
    seed: u64,
    channels: Vec<Channel>,
    iterations: u64,
) -> Result<Vec<DistributionRecord>> {
    let mut trainer = Trainer::new(config.clone(), seed)?;
    let mut rec = DistributionRecorder::new(channels, iterations);
    for _ in 0..iterations {
        trainer.run_iteration(&mut |it, b| rec.observe(it, b))?;
    }
    Ok(rec.records)
}

pub const HISTOGRAM_CSV_HEADER: &str = "channel,bin_lo,bin_hi,count";

pub fn write_histograms_csv<W: Write>(records: &[DistributionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTOGRAM_CSV_HEADER.split(','))?;
    for r in records {
        let h = &r.histogram;
        for b in 0..h.bins() {
            w.write_record([
                r.channel.name(),
                h.edges[b].to_string(),
                h.edges[b + 1].to_string(),
                h.counts[b].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<histogram csv>", e))?;
    Ok(())
}

/// `iteration,<channel>...` with one running mean per channel.
pub fn write_running_means_csv<W: Write>(records: &[DistributionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string()];
    header.extend(records.iter().map(|r| r.channel.name()));
    w.write_record(&header)?;
    let len = records.iter().map(|r| r.running_means.len()).min().unwrap_or(0);
    for i in 0..len {
        let mut row = vec![records[0].running_means[i].0.to_string()];
        row.extend(records.iter().map(|r| r.running_means[i].1.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<running mean csv>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV tables

/// A header plus numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Parse CSV text; ragged rows are reported with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric column; row `i` is line `i + 2` of the file.
    pub fn numbers(&self, col: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[col].trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: i as u64 + 2,
                    message: format!("column `{}`: `{}` is not a number", self.header[col], r[col]),
                })
            })
            .collect()
    }

    pub fn named(&self, name: &str) -> Result<Vec<f64>> {
        let col = self
            .column_index(name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column `{name}`") })?;
        self.numbers(col)
    }
}

// ---------------------------------------------------------------------------
// SVG

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 70.0;
const MR: f64 = 150.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Half-width of a shaded band around `y`.
    pub band: Option<Vec<f64>>,
}

impl Series {
    pub fn new(name: &str, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            x,
            y,
            band: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotStyle {
    Line,
    /// Step curve with a marker at every point.
    Step,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in it.filter(|v| v.is_finite()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut { xs });
        let (y0, y1) = span(&mut { ys });
        let pad = 0.05 * (y1 - y0);
        Self {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn open_svg(out: &mut String, f: &Frame, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (ML + W - MR) / 2.0,
        esc(title)
    );
    let (l, r, t, b) = (ML, W - MR, MT, H - MB);
    let _ = writeln!(
        out,
        r##"<path d="M{l:.1} {t:.1} L{l:.1} {b:.1} L{r:.1} {b:.1}" stroke="#000" fill="none"/>"##
    );
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (x, y) = (f.px(fx), f.py(fy));
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{b:.1}" x2="{x:.1}" y2="{:.1}" stroke="#000"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            b + 4.0,
            b + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{l:.1}" y2="{y:.1}" stroke="#000"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            l - 4.0,
            l - 6.0,
            y + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        H - 12.0,
        esc(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        esc(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Line or step plot of several series with an optional std band each.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], style: PlotStyle) -> String {
    let xs = series.iter().flat_map(|s| s.x.iter().copied());
    let ys = series.iter().flat_map(|s| {
        let band = s.band.clone().unwrap_or_else(|| vec![0.0; s.y.len()]);
        s.y.iter()
            .zip(band)
            .flat_map(|(y, b)| [y - b, y + b])
            .collect::<Vec<_>>()
    });
    let f = Frame::fit(xs, ys);
    let mut out = String::new();
    open_svg(&mut out, &f, title, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| (x, y))
            .collect();
        if let Some(band) = &s.band {
            let upper: Vec<String> = s
                .x
                .iter()
                .zip(s.y.iter().zip(band))
                .map(|(x, (y, b))| format!("{:.2},{:.2}", f.px(*x), f.py(y + b)))
                .collect();
            let lower: Vec<String> = s
                .x
                .iter()
                .zip(s.y.iter().zip(band))
                .rev()
                .map(|(x, (y, b))| format!("{:.2},{:.2}", f.px(*x), f.py(y - b)))
                .collect();
            if !upper.is_empty() {
                let _ = writeln!(
                    out,
                    r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                    upper.join(" "),
                    lower.join(" ")
                );
            }
        }
        if !pts.is_empty() {
            let mut d = format!("M{:.2} {:.2}", f.px(pts[0].0), f.py(pts[0].1));
            for w in pts.windows(2) {
                if style == PlotStyle::Step {
                    let _ = write!(d, " L{:.2} {:.2}", f.px(w[1].0), f.py(w[0].1));
                }
                let _ = write!(d, " L{:.2} {:.2}", f.px(w[1].0), f.py(w[1].1));
            }
            let _ = writeln!(out, r#"<path d="{d}" stroke="{color}" fill="none" stroke-width="1.5"/>"#);
            if style == PlotStyle::Step {
                for (x, y) in &pts {
                    let _ = writeln!(
                        out,
                        r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                        f.px(*x),
                        f.py(*y)
                    );
                }
            }
        }
        let ly = MT + 16.0 * k as f64 + 8.0;
        let lx = W - MR + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 24.0,
            ly + 4.0,
            esc(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of a histogram.
pub fn histogram_plot(title: &str, xlabel: &str, hist: &Histogram) -> String {
    let max = hist.counts.iter().copied().max().unwrap_or(0) as f64;
    let f = Frame {
        x0: hist.edges[0],
        x1: *hist.edges.last().unwrap(),
        y0: 0.0,
        y1: if max > 0.0 { max * 1.05 } else { 1.0 },
    };
    let mut out = String::new();
    open_svg(&mut out, &f, title, xlabel, "count");
    for (b, &c) in hist.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let (xa, xb) = (f.px(hist.edges[b]), f.px(hist.edges[b + 1]));
        let (ya, yb) = (f.py(c as f64), f.py(0.0));
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            (xb - xa).max(0.5),
            yb - ya,
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Figures for one CSV, chosen by its header. Returns `(file name, svg)`.
pub fn plots_for_table(stem: &str, table: &Table) -> Result<Vec<(String, String)>> {
    let h: Vec<&str> = table.header.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    if h.first() == Some(&"iteration") && h.contains(&"mean_sigma") {
        let it = table.named("iteration")?;
        out.push((
            format!("{stem}_sigma.svg"),
            line_plot(
                "Action std",
                "iteration",
                "mean sigma",
                &[Series::new("sigma", it.clone(), table.named("mean_sigma")?)],
                PlotStyle::Line,
            ),
        ));
        out.push((
            format!("{stem}_reward.svg"),
            line_plot(
                "Mean reward",
                "iteration",
                "reward per step",
                &[Series::new("reward", it, table.named("mean_reward")?)],
                PlotStyle::Line,
            ),
        ));
    } else if h.first() == Some(&"level") && h.contains(&"success_rate") {
        out.push((
            format!("{stem}.svg"),
            line_plot(
                "Success rate",
                "noise level",
                "success rate",
                &[Series::new("success", table.named("level")?, table.named("success_rate")?)],
                PlotStyle::Step,
            ),
        ));
    } else if h == ["channel", "bin_lo", "bin_hi", "count"] {
        let lo = table.named("bin_lo")?;
        let hi = table.named("bin_hi")?;
        let counts = table.named("count")?;
        let mut names: Vec<&str> = Vec::new();
        for r in &table.rows {
            if !names.contains(&r[0].as_str()) {
                names.push(&r[0]);
            }
        }
        for name in names {
            let idx: Vec<usize> = (0..table.rows.len()).filter(|&i| table.rows[i][0] == name).collect();
            let mut edges: Vec<f64> = idx.iter().map(|&i| lo[i]).collect();
            edges.push(hi[*idx.last().unwrap()]);
            let hist = Histogram {
                edges,
                counts: idx.iter().map(|&i| counts[i] as u64).collect(),
            };
            out.push((format!("{stem}_{name}.svg"), histogram_plot(name, name, &hist)));
        }
    } else if h.first() == Some(&"iteration") && h.len() > 1 {
        let it = table.named("iteration")?;
        let mut series = Vec::new();
        let mut k = 1;
        while k < h.len() {
            let name = h[k];
            if let Some(base) = name.strip_suffix("_mean") {
                let std_col = format!("{base}_std");
                let mut s = Series::new(base, it.clone(), table.numbers(k)?);
                if let Some(j) = table.column_index(&std_col) {
                    s.band = Some(table.numbers(j)?);
                }
                series.push(s);
            } else if !name.ends_with("_std") {
                series.push(Series::new(name, it.clone(), table.numbers(k)?));
            }
            k += 1;
        }
        out.push((format!("{stem}.svg"), line_plot(stem, "iteration", "value", &series, PlotStyle::Line)));
    } else if !table.header.is_empty() {
        // generic: first column against the others
        let x = table.numbers(0)?;
        let series = (1..h.len())
            .map(|k| Ok(Series::new(h[k], x.clone(), table.numbers(k)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((format!("{stem}.svg"), line_plot(stem, h[0], "value", &series, PlotStyle::Line)));
    }
    Ok(out)
}

/// Render every CSV in `inputs` into `out_dir`.
pub fn emit_plots(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = Table::parse(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let plots = plots_for_table(stem, &table).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        for (name, svg) in plots {
            let p = out_dir.join(name);
            fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Empty-axes figure.
pub fn empty_plot(title: &str) -> String {
    line_plot(title, "", "", &[], PlotStyle::Line)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_clamps_and_conserves() {
        let mut h = Histogram::new(-1.0, 1.0, NUM_BINS);
        for x in [-5.0, -1.0, 0.0, 0.999, 1.0, 7.0, f64::NAN] {
            h.add(x);
        }
        assert_eq!(h.total(), 7);
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[63], 3);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tv_of_identical_and_disjoint() {
        let mut a = Histogram::new(0.0, 1.0, 4);
        let mut b = a.clone();
        a.add(0.1);
        b.add(0.1);
        assert_eq!(tv_distance(&a, &b).unwrap(), 0.0);
        b.add(0.9);
        b.add(0.9);
        assert!((tv_distance(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn channel_spec_parsing() {
        let c = Channel::parse("joint_pos:3", 2.6).unwrap();
        assert_eq!((c.source, c.index, c.lo, c.hi), (Source::JointPos, 3, -2.6, 2.6));
        let c = Channel::parse("obs:2:-1:1", 2.6).unwrap();
        assert_eq!((c.lo, c.hi), (-1.0, 1.0));
        assert!(Channel::parse("joint_pos:4", 2.6).is_err());
        assert!(Channel::parse("torque:0", 2.6).is_err());
        assert_eq!(Channel::parse_list("action:0, joint_vel:1", 2.6).unwrap().len(), 2);
    }

    #[test]
    fn parse_error_carries_line() {
        let err = Table::parse("a,b\n1,2\n3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        let t = Table::parse("a,b\n1,2\n3,x\n").unwrap();
        match t.numbers(1).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn success_plot_has_one_marker_per_level() {
        let mut csv = String::from("level,runs,successes,failures_fall,failures_distance,success_rate\n");
        for i in 0..12 {
            csv += &format!("{},100,50,25,25,0.5\n", i as f64 * 0.05);
        }
        let plots = plots_for_table("sweep", &Table::parse(&csv).unwrap()).unwrap();
        assert_eq!(plots.len(), 1);
        assert_eq!(plots[0].1.matches("class=\"point\"").count(), 12);
    }

    #[test]
    fn empty_series_gives_axes() {
        let svg = empty_plot("nothing");
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<circle"));
    }
}
