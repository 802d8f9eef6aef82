//! Deterministic SVG figures: event timelines, decoder cross-attention
//! heatmaps and AR-vs-AN curves.

use std::fmt::Write;

use eventformer::decode::kept_queries;
use eventformer::setmatch::tiou;
use eventformer::{DetectionRecord, Model, SequenceSample, Tensor};

use crate::CliError;

pub const WIDTH: f64 = 800.0;
pub const LEFT: f64 = 90.0;
pub const RIGHT: f64 = 20.0;
pub const TOP: f64 = 30.0;
pub const LANE: f64 = 28.0;
pub const BAR: f64 = 18.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn colour(class_id: usize) -> &'static str {
    PALETTE[(class_id.max(1) - 1) % PALETTE.len()]
}

/// Horizontal pixel of frame position `t` on a sequence of `length` frames.
pub fn x_of(t: f64, length: usize) -> f64 {
    LEFT + (WIDTH - LEFT - RIGHT) * t / length as f64
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{LEFT}" y="16" font-size="13">{}</text>"#, escape(title));
}

fn frame_ticks(out: &mut String, length: usize, y: f64) {
    let step = [1usize, 2, 4, 8, 16, 32, 64, 128, 256]
        .into_iter()
        .find(|s| length / s <= 16)
        .unwrap_or(512);
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#,
        x_of(0.0, length),
        x_of(length as f64, length)
    );
    for t in (0..=length).step_by(step) {
        let x = x_of(t as f64, length);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            y + 4.0,
            y + 16.0
        );
    }
}

/// One lane per class: ground-truth spans as hollow bars, detections as
/// filled bars whose opacity is their score.
pub fn plot_timeline(sample: &SequenceSample, detections: &[DetectionRecord], num_classes: usize) -> String {
    let height = TOP + LANE * num_classes as f64 + 30.0;
    let mut out = String::new();
    header(&mut out, height, &format!("sequence {}", sample.id));
    for c in 1..=num_classes {
        let y = TOP + LANE * (c - 1) as f64;
        let _ = writeln!(
            out,
            r#"<text x="8" y="{:.2}">class {c}</text>"#,
            y + BAR / 2.0 + 4.0
        );
        let _ = writeln!(out, r#"<g class="detections" data-class="{c}">"#);
        for d in detections.iter().filter(|d| d.class_id == c) {
            let (x0, x1) = (x_of(d.start, sample.length), x_of(d.end, sample.length));
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{BAR}" fill="{}" fill-opacity="{:.3}"/>"#,
                y + 3.0,
                x1 - x0,
                colour(c),
                d.score.clamp(0.0, 1.0)
            );
        }
        let _ = writeln!(out, "</g>");
        let _ = writeln!(out, r#"<g class="ground-truth" data-class="{c}">"#);
        for e in sample.events.iter().filter(|e| e.class_id == c) {
            let (x0, x1) = (x_of(e.start, sample.length), x_of(e.end, sample.length));
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black" stroke-width="1.5"/>"#,
                y + 1.0,
                x1 - x0,
                BAR + 4.0
            );
        }
        let _ = writeln!(out, "</g>");
    }
    frame_ticks(&mut out, sample.length, TOP + LANE * num_classes as f64 + 2.0);
    out.push_str("</svg>\n");
    out
}

/// Kept events of `sample` with the final decoder layer's cross-attention
/// row (head mean, one weight per frame) of the query behind each.
pub fn attention_rows(model: &Model, sample: &SequenceSample) -> Result<(Vec<DetectionRecord>, Tensor), CliError> {
    let cfg = model.config();
    let (sets, attn) = model.predict_with_attention(&sample.features)?;
    let attn = attn.ok_or_else(|| CliError::Config("model has no decoder layers, so no cross-attention".into()))?;
    let kept = kept_queries(&sets, cfg.tau_infer, cfg.matching_mode);
    let mut data = Vec::with_capacity(kept.len() * sample.length);
    for (q, _) in &kept {
        data.extend_from_slice(attn.row(*q));
    }
    let rows = Tensor::matrix(kept.len(), sample.length, data)?;
    Ok((kept.into_iter().map(|(_, r)| r).collect(), rows))
}

/// Heatmap with one row per kept event and one column per frame; colour is
/// the weight relative to the row maximum. Ground-truth boundaries are drawn
/// as vertical rules.
pub fn plot_attention(sample: &SequenceSample, events: &[DetectionRecord], rows: &Tensor) -> String {
    let cell_h = 14.0;
    let n = events.len();
    let height = TOP + cell_h * n.max(1) as f64 + 30.0;
    let mut out = String::new();
    header(&mut out, height, &format!("decoder cross-attention, sequence {}", sample.id));
    let cell_w = (WIDTH - LEFT - RIGHT) / sample.length as f64;
    for (i, ev) in events.iter().enumerate() {
        let y = TOP + cell_h * i as f64;
        let row = rows.row(i);
        let max = row.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(
            out,
            r#"<text x="8" y="{:.2}">c{} {:.0}-{:.0}</text>"#,
            y + cell_h - 3.0,
            ev.class_id,
            ev.start,
            ev.end
        );
        let _ = writeln!(out, r#"<g class="attention-row" data-query-class="{}">"#, ev.class_id);
        for (t, w) in row.iter().enumerate() {
            let level = if max > 0.0 { w / max } else { 0.0 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{cell_h}" fill="{}" fill-opacity="{:.3}"/>"#,
                x_of(t as f64, sample.length),
                cell_w,
                colour(ev.class_id),
                level
            );
        }
        let _ = writeln!(out, "</g>");
    }
    let bottom = TOP + cell_h * n.max(1) as f64;
    for e in &sample.events {
        for b in [e.start, e.end] {
            let x = x_of(b, sample.length);
            let _ = writeln!(
                out,
                r#"<line class="boundary" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{bottom:.2}" stroke="{}" stroke-dasharray="3,2"/>"#,
                colour(e.class_id)
            );
        }
    }
    frame_ticks(&mut out, sample.length, bottom + 2.0);
    out.push_str("</svg>\n");
    out
}

/// For each kept event matched (same class, best tIoU > 0) to a ground-truth
/// event: its attention mass on frames within `radius` of that event's
/// boundaries, and the mass a uniform row would put there.
pub fn boundary_focus(
    sample: &SequenceSample,
    events: &[DetectionRecord],
    rows: &Tensor,
    radius: f64,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        let best = sample
            .events
            .iter()
            .filter(|g| g.class_id == ev.class_id)
            .map(|g| (g, tiou(g.segment(), ev.segment()).unwrap_or(0.0)))
            .filter(|(_, t)| *t > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((gt, _)) = best else { continue };
        let near = |t: usize| {
            let c = t as f64 + 0.5;
            (c - gt.start).abs() <= radius || (c - gt.end).abs() <= radius
        };
        let frames: Vec<usize> = (0..sample.length).filter(|&t| near(t)).collect();
        let mass: f64 = frames.iter().map(|&t| rows.get(i, t)).sum();
        out.push((mass, frames.len() as f64 / sample.length as f64));
    }
    out
}

/// AR (percent) against AN = 1..=len for each named curve.
pub fn plot_ar_curves(curves: &[(String, Vec<f64>)]) -> String {
    let height = 360.0;
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT - 140.0, height - 40.0, TOP);
    let max_an = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(2);
    let px = |an: usize| x0 + (x1 - x0) * (an - 1) as f64 / (max_an - 1) as f64;
    let py = |v: f64| y0 - (y0 - y1) * v.clamp(0.0, 100.0) / 100.0;
    let mut out = String::new();
    header(&mut out, height, "AR vs AN");
    let _ = writeln!(out, r#"<rect x="{x0}" y="{y1}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for v in [0, 25, 50, 75, 100] {
        let y = py(v as f64);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v}</text>"#, x0 - 6.0, y + 4.0);
    }
    for an in [1, max_an / 4, max_an / 2, 3 * max_an / 4, max_an] {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{an}</text>"#, px(an.max(1)), y0 + 16.0);
    }
    for (k, (name, curve)) in curves.iter().enumerate() {
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", px(i + 1), py(*v)))
            .collect();
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let ly = y1 + 16.0 * (k + 1) as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x1 + 10.0,
            x1 + 30.0,
            x1 + 36.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
