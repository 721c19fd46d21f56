//! CSV curve loading and dependency-free SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use analogy_core::metrics::METRIC_COLUMNS;
use analogy_core::trainer::HISTORY_HEADER;

use crate::error::{usage, CliError, CliResult};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 72.0;
const TOP: f64 = 56.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#333333", "#1f5fbf", "#c0392b", "#2e8b57", "#8e44ad", "#d35400",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvKind {
    History,
    Metrics,
}

/// One input file: its index column and named numeric columns.
#[derive(Clone, Debug)]
pub struct Curves {
    pub kind: CsvKind,
    pub index_name: String,
    pub x: Vec<f64>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

impl Curves {
    fn column(&self, name: &str) -> Vec<(f64, f64)> {
        self.columns
            .get(name)
            .map(|ys| self.x.iter().copied().zip(ys.iter().copied()).collect())
            .unwrap_or_default()
    }
}

pub fn classify(header: &[String]) -> Option<CsvKind> {
    if header == HISTORY_HEADER {
        return Some(CsvKind::History);
    }
    let (first, rest) = header.split_first()?;
    if (first == "step" || first == "layer") && rest == METRIC_COLUMNS {
        return Some(CsvKind::Metrics);
    }
    None
}

pub fn read_curves(path: &Path) -> CliResult<Curves> {
    if !path.is_file() {
        return Err(usage(format!("input {} does not exist", path.display())));
    }
    let fmt_err = |m: String| CliError::Format(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt_err(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| fmt_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let kind = classify(&header)
        .ok_or_else(|| fmt_err(format!("unrecognised header {:?}", header.join(","))))?;
    let mut x = Vec::new();
    let mut columns: BTreeMap<String, Vec<f64>> = header[1..]
        .iter()
        .map(|h| (h.clone(), Vec::new()))
        .collect();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
        let parse = |i: usize| -> CliResult<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| {
                fmt_err(format!(
                    "row {}: {:?} in column {} is not a number",
                    line + 2,
                    &rec[i],
                    header[i]
                ))
            })
        };
        x.push(parse(0)?);
        for (i, h) in header.iter().enumerate().skip(1) {
            let v = parse(i)?;
            columns.get_mut(h).expect("column from header").push(v);
        }
    }
    Ok(Curves {
        kind,
        index_name: header[0].clone(),
        x,
        columns,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: Option<String>,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub opacity: f64,
    pub width: f64,
    pub axis: Axis,
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y2_label: Option<String>,
    pub y_range: Option<(f64, f64)>,
    pub y2_range: Option<(f64, f64)>,
    pub log_x: bool,
    pub series: Vec<Series>,
}

struct PanelSpec {
    name: &'static str,
    y_label: &'static str,
    y_range: Option<(f64, f64)>,
    left: &'static [(&'static str, &'static str)],
    right: &'static [(&'static str, &'static str)],
    y2_label: &'static str,
}

const HISTORY_PANELS: &[PanelSpec] = &[
    PanelSpec {
        name: "accuracy",
        y_label: "accuracy",
        y_range: Some((0.0, 1.0)),
        left: &[
            ("train_acc", "train (ID)"),
            ("comp_ood_acc", "compositional OOD"),
            ("ana_ood_acc", "analogical OOD"),
        ],
        right: &[],
        y2_label: "",
    },
    PanelSpec {
        name: "probability",
        y_label: "target probability",
        y_range: Some((0.0, 1.0)),
        left: &[
            ("train_prob", "train (ID)"),
            ("comp_prob", "compositional OOD"),
            ("ana_prob", "analogical OOD"),
        ],
        right: &[],
        y2_label: "",
    },
    PanelSpec {
        name: "loss",
        y_label: "training loss",
        y_range: None,
        left: &[("loss", "loss")],
        right: &[],
        y2_label: "",
    },
];

const METRIC_PANELS: &[PanelSpec] = &[
    PanelSpec {
        name: "energy",
        y_label: "Dirichlet energy",
        y_range: None,
        left: &[("energy", "energy")],
        right: &[
            ("prob_id", "probability (ID)"),
            ("prob_ood", "probability (OOD)"),
        ],
        y2_label: "probability",
    },
    PanelSpec {
        name: "attention",
        y_label: "attention f -> e_s",
        y_range: Some((0.0, 1.0)),
        left: &[("attention", "attention")],
        right: &[],
        y2_label: "",
    },
    PanelSpec {
        name: "parallelism",
        y_label: "cosine",
        y_range: Some((-1.0, 1.0)),
        left: &[
            ("parallelism_id", "parallelism (ID)"),
            ("parallelism_ood", "parallelism (OOD)"),
        ],
        right: &[],
        y2_label: "",
    },
];

pub fn panel_names(kind: CsvKind) -> Vec<&'static str> {
    specs(kind).iter().map(|p| p.name).collect()
}

fn specs(kind: CsvKind) -> &'static [PanelSpec] {
    match kind {
        CsvKind::History => HISTORY_PANELS,
        CsvKind::Metrics => METRIC_PANELS,
    }
}

/// Point-wise mean over inputs at every index value any input has.
fn mean_curve(curves: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for c in curves {
        for &(x, y) in c {
            if x.is_finite() && y.is_finite() {
                let e = acc.entry(x.to_bits()).or_insert((x, 0.0, 0));
                e.1 += y;
                e.2 += 1;
            }
        }
    }
    let mut out: Vec<(f64, f64)> = acc
        .into_values()
        .map(|(x, s, n)| (x, s / n as f64))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Builds the named panel from one or more inputs of the same kind: a bold
/// mean line per column plus faint per-input lines when there are several.
pub fn build_panel(
    name: &str,
    inputs: &[Curves],
    log_x: bool,
    title: Option<&str>,
) -> CliResult<Panel> {
    let kind = inputs
        .first()
        .map(|c| c.kind)
        .ok_or_else(|| usage("no input CSVs"))?;
    let spec = specs(kind).iter().find(|p| p.name == name).ok_or_else(|| {
        usage(format!(
            "unknown panel {name:?}; available: {}",
            panel_names(kind).join(", ")
        ))
    })?;
    let mut series = Vec::new();
    let groups = spec
        .left
        .iter()
        .map(|c| (c, Axis::Left))
        .chain(spec.right.iter().map(|c| (c, Axis::Right)));
    for (i, (&(column, label), axis)) in groups.enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let per_input: Vec<Vec<(f64, f64)>> = inputs.iter().map(|c| c.column(column)).collect();
        if inputs.len() > 1 {
            for pts in &per_input {
                series.push(Series {
                    label: None,
                    points: pts.clone(),
                    color,
                    opacity: 0.25,
                    width: 1.0,
                    axis,
                });
            }
        }
        series.push(Series {
            label: Some(label.to_string()),
            points: mean_curve(&per_input),
            color,
            opacity: 1.0,
            width: 2.0,
            axis,
        });
    }
    let has_right = !spec.right.is_empty();
    Ok(Panel {
        title: title.map_or_else(|| spec.name.to_string(), |t| format!("{t}: {}", spec.name)),
        x_label: inputs[0].index_name.clone(),
        y_label: spec.y_label.to_string(),
        y2_label: has_right.then(|| spec.y2_label.to_string()),
        y_range: spec.y_range,
        y2_range: has_right.then_some((0.0, 1.0)),
        log_x,
        series,
    })
}

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let mult = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    mult * mag
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo, 5);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
    (a..=b)
        .map(|k| 10f64.powi(k))
        .filter(|&v| v >= lo * (1.0 - 1e-9) && v <= hi * (1.0 + 1e-9))
        .collect()
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn data_range(series: &[Series], axis: Axis, log_x: bool, pick_x: bool) -> Option<(f64, f64)> {
    let vals = series
        .iter()
        .filter(|s| pick_x || s.axis == axis)
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_x || *x > 0.0))
        .map(|&(x, y)| if pick_x { x } else { y });
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    (lo <= hi).then_some((lo, hi))
}

fn padded(range: Option<(f64, f64)>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = range.unwrap_or((0.0, 1.0));
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let step = nice_step(hi - lo, 5);
    ((lo / step).floor() * step, (hi / step).ceil() * step)
}

/// Renders a panel as a standalone SVG document. Points with a non-finite
/// value break the line; on a log axis, points with `x <= 0` are omitted.
pub fn render_svg(panel: &Panel) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let (x_lo, x_hi) = match data_range(&panel.series, Axis::Left, panel.log_x, true) {
        Some((lo, hi)) if panel.log_x => {
            if hi / lo < 10.0 {
                (lo / 2.0, hi * 2.0)
            } else {
                (lo, hi)
            }
        }
        Some((lo, hi)) if hi > lo => (lo, hi),
        Some((lo, _)) => (lo - 0.5, lo + 0.5),
        None if panel.log_x => (1.0, 10.0),
        None => (0.0, 1.0),
    };
    let y = panel.y_range.unwrap_or_else(|| {
        padded(
            data_range(&panel.series, Axis::Left, panel.log_x, false),
            true,
        )
    });
    let y2 = panel.y2_range.unwrap_or_else(|| {
        padded(
            data_range(&panel.series, Axis::Right, panel.log_x, false),
            true,
        )
    });

    let tx = |x: f64| if panel.log_x { x.log10() } else { x };
    let px = |x: f64| LEFT + (tx(x) - tx(x_lo)) / (tx(x_hi) - tx(x_lo)) * plot_w;
    let py = |v: f64, (lo, hi): (f64, f64)| TOP + plot_h - (v - lo) / (hi - lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(&panel.title)
    );

    let x_ticks = if panel.log_x {
        log_ticks(x_lo, x_hi)
    } else {
        linear_ticks(x_lo, x_hi)
    };
    let _ = writeln!(s, r##"<g class="grid" stroke="#e5e5e5" stroke-width="1">"##);
    for &t in &x_ticks {
        let x = px(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}"/>"#,
            TOP + plot_h
        );
    }
    for t in linear_ticks(y.0, y.1) {
        let yy = py(t, y);
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}"/>"#,
            LEFT + plot_w
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(
        s,
        r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<g class="x-axis" text-anchor="middle">"#);
    for &t in &x_ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            px(t),
            TOP + plot_h + 16.0,
            label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}">{}{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        escape(&panel.x_label),
        if panel.log_x { " (log scale)" } else { "" }
    );
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="y-axis" text-anchor="end">"#);
    for t in linear_ticks(y.0, y.1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            LEFT - 6.0,
            py(t, y) + 4.0,
            label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(&panel.y_label)
    );
    let _ = writeln!(s, "</g>");
    if let Some(l2) = &panel.y2_label {
        let _ = writeln!(s, r#"<g class="y2-axis" text-anchor="start">"#);
        for t in linear_ticks(y2.0, y2.1) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                LEFT + plot_w + 6.0,
                py(t, y2) + 4.0,
                label(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.2},{:.2}) rotate(90)" text-anchor="middle">{}</text>"#,
            WIDTH - 16.0,
            TOP + plot_h / 2.0,
            escape(l2)
        );
        let _ = writeln!(s, "</g>");
    }

    let _ = writeln!(s, r#"<g class="series" fill="none">"#);
    for series in &panel.series {
        let range = if series.axis == Axis::Left { y } else { y2 };
        let dash = if series.axis == Axis::Right {
            r#" stroke-dasharray="6 3""#
        } else {
            ""
        };
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" stroke="{}" stroke-width="{}" stroke-opacity="{}"{dash}/>"#,
                    seg.join(" "),
                    series.color,
                    series.width,
                    series.opacity
                );
            } else if let Some(p) = seg.first() {
                let (cx, cy) = p.split_once(',').unwrap();
                let _ = writeln!(
                    s,
                    r#"<circle cx="{cx}" cy="{cy}" r="{}" fill="{}" fill-opacity="{}"/>"#,
                    series.width + 0.5,
                    series.color,
                    series.opacity
                );
            }
            seg.clear();
        };
        for &(x, v) in &series.points {
            if !x.is_finite() || !v.is_finite() || (panel.log_x && x <= 0.0) {
                flush(&mut segment, &mut s);
                continue;
            }
            segment.push(format!("{:.2},{:.2}", px(x), py(v, range)));
        }
        flush(&mut segment, &mut s);
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="legend">"#);
    let mut lx = LEFT;
    for series in panel.series.iter().filter(|s| s.label.is_some()) {
        let text = series.label.as_deref().unwrap();
        let dash = if series.axis == Axis::Right {
            r#" stroke-dasharray="6 3""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="40" x2="{:.2}" y2="40" stroke="{}" stroke-width="2"{dash}/>"#,
            lx + 18.0,
            series.color
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="44">{}</text>"#,
            lx + 22.0,
            escape(text)
        );
        lx += 34.0 + 7.0 * text.len() as f64;
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curves(x: &[f64], acc: &[f64]) -> Curves {
        let mut columns = BTreeMap::new();
        for h in &HISTORY_HEADER[1..] {
            columns.insert(h.to_string(), acc.to_vec());
        }
        Curves {
            kind: CsvKind::History,
            index_name: "step".into(),
            x: x.to_vec(),
            columns,
        }
    }

    #[test]
    fn ticks_are_round_numbers() {
        assert_eq!(
            linear_ticks(0.0, 1.0),
            vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]
        );
        assert_eq!(log_ticks(1.0, 5000.0), vec![1.0, 10.0, 100.0, 1000.0]);
        assert_eq!(label(0.5), "0.5");
        assert_eq!(label(1e6), "1e6");
        assert_eq!(label(2000.0), "2000");
    }

    #[test]
    fn mean_over_seeds_uses_available_points() {
        let m = mean_curve(&[
            vec![(0.0, 1.0), (1.0, 3.0)],
            vec![(0.0, 3.0)],
            vec![(1.0, f64::NAN)],
        ]);
        assert_eq!(m, vec![(0.0, 2.0), (1.0, 3.0)]);
    }

    #[test]
    fn multi_seed_panel_has_faint_lines() {
        let a = curves(&[0.0, 10.0, 100.0], &[0.0, 0.5, 1.0]);
        let b = curves(&[0.0, 10.0, 100.0], &[0.0, 0.7, 1.0]);
        let p = build_panel("accuracy", &[a.clone(), b], true, None).unwrap();
        assert_eq!(p.series.len(), 9);
        assert_eq!(p.series.iter().filter(|s| s.label.is_some()).count(), 3);
        let svg = render_svg(&p);
        assert!(svg.contains(r#"stroke-opacity="0.25""#));
        assert!(svg.contains("(log scale)"));
        let single = build_panel("accuracy", &[a], false, Some("run")).unwrap();
        assert_eq!(single.series.len(), 3);
        assert_eq!(single.title, "run: accuracy");
        assert!(build_panel("energy", &[curves(&[], &[])], false, None).is_err());
    }

    #[test]
    fn nan_breaks_lines() {
        let p = Panel {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            y2_label: None,
            y_range: None,
            y2_range: None,
            log_x: false,
            series: vec![Series {
                label: Some("s".into()),
                points: vec![
                    (0.0, 1.0),
                    (1.0, 2.0),
                    (2.0, f64::NAN),
                    (3.0, 1.0),
                    (4.0, 0.5),
                ],
                color: PALETTE[0],
                opacity: 1.0,
                width: 2.0,
                axis: Axis::Left,
            }],
        };
        assert_eq!(render_svg(&p).matches("<polyline").count(), 2);
    }
}
