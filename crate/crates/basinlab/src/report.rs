//! Aggregated metric tables and self-contained SVG plots.
//!
//! Tables are computed from stored metric records only — nothing is
//! recomputed at format time — and report mean ± sample std across seeds to
//! two decimals. Plots are deterministic: identical inputs produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::ensemble::Family;
use crate::landscape::{PairCurve, PlanePoint};
use crate::runner::MetricRecord;

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// One aggregated table row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub experiment: String,
    pub family: Family,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Group records by (experiment, family, metric) and aggregate across seeds.
pub fn aggregate(records: &[MetricRecord]) -> Vec<TableRow> {
    let mut groups: BTreeMap<(String, String, String), (Family, Vec<f64>)> = BTreeMap::new();
    for record in records {
        let key = (
            record.experiment.clone(),
            record.family.to_string(),
            record.metric.clone(),
        );
        groups
            .entry(key)
            .or_insert_with(|| (record.family, Vec::new()))
            .1
            .push(record.value);
    }
    groups
        .into_iter()
        .map(|((experiment, _, metric), (family, values))| {
            let (mean, std) = mean_std(&values);
            TableRow { experiment, family, metric, mean, std, seeds: values.len() }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

/// Render aggregated rows as an aligned text table or CSV, two decimals.
pub fn format_table(rows: &[TableRow], format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut out = String::from("experiment,family,metric,mean,std,seeds\n");
            for row in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.2},{:.2},{}",
                    row.experiment, row.family, row.metric, row.mean, row.std, row.seeds
                );
            }
            out
        }
        TableFormat::Text => {
            let headers = ["experiment", "family", "metric", "mean ± std", "seeds"];
            let cells: Vec<[String; 5]> = rows
                .iter()
                .map(|row| {
                    [
                        row.experiment.clone(),
                        row.family.to_string(),
                        row.metric.clone(),
                        format!("{:.2} ± {:.2}", row.mean, row.std),
                        row.seeds.to_string(),
                    ]
                })
                .collect();
            let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
            for row in &cells {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let write_row = |out: &mut String, cols: &[String]| {
                let line = cols
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ");
                out.push_str(line.trim_end());
                out.push('\n');
            };
            write_row(
                &mut out,
                &headers.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            );
            write_row(
                &mut out,
                &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
            );
            for row in cells {
                write_row(&mut out, &row);
            }
            out
        }
    }
}

// ---- SVG plotting --------------------------------------------------------------

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 48.0;

const SERIES_COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

struct Canvas {
    body: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

impl Canvas {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        Canvas { body: String::new(), x_range, y_range }
    }

    fn x(&self, v: f64) -> f64 {
        let (lo, hi) = self.x_range;
        let span = if hi > lo { hi - lo } else { 1.0 };
        MARGIN_L + (v - lo) / span * (PLOT_W - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let (lo, hi) = self.y_range;
        let span = if hi > lo { hi - lo } else { 1.0 };
        PLOT_H - MARGIN_B - (v - lo) / span * (PLOT_H - MARGIN_T - MARGIN_B)
    }

    fn axes(&mut self, x_label: &str, y_label: &str, title: &str) {
        let x0 = MARGIN_L;
        let x1 = PLOT_W - MARGIN_R;
        let y0 = PLOT_H - MARGIN_B;
        let y1 = MARGIN_T;
        let _ = write!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/><line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
            fmt(x0), fmt(y0), fmt(x1), fmt(y0), fmt(x0), fmt(y0), fmt(x0), fmt(y1),
        );
        for i in 0..=4 {
            let fx = self.x_range.0 + (self.x_range.1 - self.x_range.0) * i as f64 / 4.0;
            let fy = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            let px = self.x(fx);
            let py = self.y(fy);
            let _ = write!(
                self.body,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/><text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
                fmt(px), fmt(y0), fmt(px), fmt(y0 + 4.0), fmt(px), fmt(y0 + 18.0), fmt(fx),
            );
            let _ = write!(
                self.body,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/><text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
                fmt(x0 - 4.0), fmt(py), fmt(x0), fmt(py), fmt(x0 - 7.0), fmt(py + 4.0), fmt(fy),
            );
        }
        let _ = write!(
            self.body,
            r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#,
            fmt((x0 + x1) / 2.0),
            fmt(PLOT_H - 10.0),
            x_label
        );
        let _ = write!(
            self.body,
            r#"<text x="14" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            fmt((y0 + y1) / 2.0),
            fmt((y0 + y1) / 2.0),
            y_label
        );
        let _ = write!(
            self.body,
            r#"<text x="{}" y="20" font-size="14" text-anchor="middle" font-weight="bold">{}</text>"#,
            fmt(PLOT_W / 2.0),
            title
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str) {
        if points.is_empty() {
            return;
        }
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{},{}", fmt(self.x(*x)), fmt(self.y(*y))))
            .collect();
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, color: &str) {
        let _ = write!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{}" fill="{color}"/>"#,
            fmt(self.x(x)),
            fmt(self.y(y)),
            fmt(r)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN_T + 14.0 * i as f64 + 8.0;
            let x = PLOT_W - MARGIN_R - 150.0;
            let _ = write!(
                self.body,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                fmt(x), fmt(y - 9.0), fmt(x + 14.0), fmt(y), label,
            );
        }
    }

    fn finish(self) -> String {
        format!(
            concat!(
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
                r#"<rect width="{w}" height="{h}" fill="white"/>{body}</svg>"#,
            ),
            w = PLOT_W,
            h = PLOT_H,
            body = self.body
        )
    }
}

fn bounds<I: Iterator<Item = f64>>(values: I) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo <= hi).then_some((lo, hi))
}

fn pad((lo, hi): (f64, f64)) -> (f64, f64) {
    let span = (hi - lo).max(1e-9);
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// Interpolation curves: q_pair against lambda, one polyline per pair.
pub fn plot_curves(curves: &[PairCurve]) -> String {
    let values = curves.iter().flat_map(|c| c.q_pair.iter().copied());
    let y_range = match bounds(values) {
        Some(b) => pad((b.0.min(0.0), b.1.max(0.0))),
        None => {
            eprintln!("warning: no curves to plot, emitting empty axes");
            (-1.0, 1.0)
        }
    };
    let mut canvas = Canvas::new((0.0, 1.0), y_range);
    canvas.axes("lambda", "q_pair (accuracy points)", "Pairwise linear connectivity");
    // reference zero line
    let zero = canvas.y(0.0);
    let _ = write!(
        canvas.body,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999999" stroke-dasharray="4 3"/>"##,
        fmt(MARGIN_L),
        fmt(zero),
        fmt(PLOT_W - MARGIN_R),
        fmt(zero)
    );
    let mut legend = Vec::new();
    for (i, curve) in curves.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let points: Vec<(f64, f64)> = curve
            .lambdas
            .iter()
            .zip(&curve.q_pair)
            .map(|(&x, &y)| (x, y))
            .collect();
        canvas.polyline(&points, color);
        if legend.len() < 8 {
            legend.push((format!("pair {}-{}", curve.member_i, curve.member_j), color));
        }
    }
    canvas.legend(&legend);
    canvas.finish()
}

/// Scatter of connectivity against ensemble accuracy, one color per family.
pub fn plot_scatter(records: &[MetricRecord]) -> String {
    // join q_joint_mean with ensemble_acc per (experiment, seed)
    let mut by_key: BTreeMap<(String, u64, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in records {
        let key = (r.experiment.clone(), r.seed, r.family.to_string());
        let entry = by_key.entry(key).or_default();
        match r.metric.as_str() {
            "q_joint_mean" => entry.0 = Some(r.value),
            "ensemble_acc" => entry.1 = Some(r.value),
            _ => {}
        }
    }
    let points: Vec<(String, f64, f64)> = by_key
        .into_iter()
        .filter_map(|((_, _, family), (q, acc))| Some((family, q?, acc?)))
        .collect();
    if points.is_empty() {
        eprintln!("warning: no (q_joint, accuracy) pairs to plot, emitting empty axes");
    }
    let x_range = pad(bounds(points.iter().map(|p| p.1)).unwrap_or((-1.0, 1.0)));
    let y_range = pad(bounds(points.iter().map(|p| p.2)).unwrap_or((0.0, 100.0)));
    let mut canvas = Canvas::new(x_range, y_range);
    canvas.axes(
        "joint connectivity (accuracy points)",
        "ensemble accuracy (%)",
        "Connectivity vs accuracy",
    );
    let mut families: Vec<String> = points.iter().map(|p| p.0.clone()).collect();
    families.sort();
    families.dedup();
    for (family, q, acc) in &points {
        let idx = families.iter().position(|f| f == family).unwrap();
        canvas.circle(*q, *acc, 4.0, SERIES_COLORS[idx % SERIES_COLORS.len()]);
    }
    let legend: Vec<(String, &str)> = families
        .iter()
        .enumerate()
        .map(|(i, f)| (f.clone(), SERIES_COLORS[i % SERIES_COLORS.len()]))
        .collect();
    canvas.legend(&legend);
    canvas.finish()
}

/// A named metric as a function of the split epoch `t`, seed-averaged per
/// run directory.
pub fn plot_ablation(records: &[MetricRecord], metric: &str) -> String {
    let mut by_t: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.metric == metric {
            if let Some(t) = r.params.get("t") {
                by_t.entry(*t as i64).or_default().push(r.value);
            }
        }
    }
    if by_t.is_empty() {
        eprintln!("warning: no `{metric}` records with a t parameter, emitting empty axes");
    }
    let series: Vec<(f64, f64)> = by_t
        .iter()
        .map(|(t, values)| (*t as f64, mean_std(values).0))
        .collect();
    let x_range = pad(bounds(series.iter().map(|p| p.0)).unwrap_or((0.0, 1.0)));
    let y_range = pad(bounds(series.iter().map(|p| p.1)).unwrap_or((0.0, 1.0)));
    let mut canvas = Canvas::new(x_range, y_range);
    canvas.axes("split epoch t", metric, &format!("{metric} vs split epoch"));
    canvas.polyline(&series, SERIES_COLORS[0]);
    for (x, y) in &series {
        canvas.circle(*x, *y, 3.0, SERIES_COLORS[0]);
    }
    canvas.finish()
}

/// Loss heatmap over a 2D parameter plane with the three anchors marked.
pub fn plot_plane(cells: &[PlanePoint], anchors: &[PlanePoint]) -> String {
    if cells.is_empty() {
        eprintln!("warning: empty plane grid, emitting empty axes");
        let mut canvas = Canvas::new((0.0, 1.0), (0.0, 1.0));
        canvas.axes("alpha", "beta", "Loss plane");
        return canvas.finish();
    }
    let x_range = bounds(cells.iter().map(|c| c.alpha)).unwrap();
    let y_range = bounds(cells.iter().map(|c| c.beta)).unwrap();
    let (loss_lo, loss_hi) = bounds(cells.iter().map(|c| c.loss)).unwrap();
    let mut canvas = Canvas::new(x_range, y_range);

    // infer the lattice pitch from distinct coordinates
    let mut alphas: Vec<f64> = cells.iter().map(|c| c.alpha).collect();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    alphas.dedup();
    let mut betas: Vec<f64> = cells.iter().map(|c| c.beta).collect();
    betas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    betas.dedup();
    let cell_w = (canvas.x(alphas.get(1).copied().unwrap_or(1.0)) - canvas.x(alphas[0])).abs();
    let cell_h = (canvas.y(betas.get(1).copied().unwrap_or(1.0)) - canvas.y(betas[0])).abs();

    for cell in cells {
        let frac = if loss_hi > loss_lo {
            (cell.loss - loss_lo) / (loss_hi - loss_lo)
        } else {
            0.0
        };
        // low loss dark blue, high loss yellow
        let r = (255.0 * frac) as u8;
        let g = (224.0 * frac + 16.0) as u8;
        let b = (96.0 * (1.0 - frac) + 32.0) as u8;
        let _ = write!(
            canvas.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="rgb({r},{g},{b})"/>"#,
            fmt(canvas.x(cell.alpha) - cell_w / 2.0),
            fmt(canvas.y(cell.beta) - cell_h / 2.0),
            fmt(cell_w.max(1.0)),
            fmt(cell_h.max(1.0)),
        );
    }
    for anchor in anchors {
        canvas.circle(anchor.alpha, anchor.beta, 5.0, "#000000");
        canvas.circle(anchor.alpha, anchor.beta, 3.0, "#ffffff");
    }
    canvas.axes("alpha", "beta", "Loss plane");
    canvas.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(metric: &str, seed: u64, value: f64) -> MetricRecord {
        MetricRecord {
            experiment: "exp".into(),
            seed,
            family: Family::Deep,
            metric: metric.into(),
            value,
            params: Default::default(),
        }
    }

    #[test]
    fn single_seed_std_is_zero() {
        let rows = aggregate(&[record("acc", 1, 3.5)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].std, 0.0);
        assert_eq!(rows[0].seeds, 1);
    }

    #[test]
    fn injected_values_give_sample_std() {
        // {1, 2, 3}: mean 2.00, sample std 1.00
        let rows = aggregate(&[
            record("m", 1, 1.0),
            record("m", 2, 2.0),
            record("m", 3, 3.0),
        ]);
        assert_eq!(rows[0].mean, 2.0);
        assert_eq!(rows[0].std, 1.0);
        let text = format_table(&rows, TableFormat::Text);
        assert!(text.contains("2.00 ± 1.00"), "table:\n{text}");
        let csv = format_table(&rows, TableFormat::Csv);
        assert!(csv.contains("exp,deep,m,2.00,1.00,3"));
    }

    #[test]
    fn deterministic_metrics_have_zero_std() {
        let rows = aggregate(&[
            record("m", 1, 7.25),
            record("m", 2, 7.25),
            record("m", 3, 7.25),
        ]);
        assert_eq!(rows[0].std, 0.0);
    }

    #[test]
    fn curve_plot_has_polyline_with_all_points() {
        let curve = PairCurve {
            member_i: 0,
            member_j: 1,
            lambdas: crate::landscape::lambda_grid(21),
            accuracy: vec![80.0; 21],
            q_pair: {
                let mut q = vec![-5.0; 21];
                q[0] = 0.0;
                q[20] = 0.0;
                q
            },
        };
        let svg = plot_curves(&[curve]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        let polyline = svg
            .split("<polyline")
            .nth(1)
            .expect("one polyline present");
        let points = polyline.split("points=\"").nth(1).unwrap();
        let count = points.split('"').next().unwrap().split(' ').count();
        assert_eq!(count, 21);
    }

    #[test]
    fn empty_series_emit_axes_only() {
        let svg = plot_curves(&[]);
        assert!(svg.contains("<line"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn plane_plot_counts_cells_and_anchors() {
        let mut cells = Vec::new();
        for row in 0..25 {
            for col in 0..25 {
                cells.push(PlanePoint {
                    alpha: col as f64,
                    beta: row as f64,
                    loss: (row + col) as f64,
                    acc: 50.0,
                });
            }
        }
        let anchors = [
            PlanePoint { alpha: 0.0, beta: 0.0, loss: 0.0, acc: 50.0 },
            PlanePoint { alpha: 10.0, beta: 0.0, loss: 1.0, acc: 50.0 },
            PlanePoint { alpha: 5.0, beta: 12.0, loss: 2.0, acc: 50.0 },
        ];
        let svg = plot_plane(&cells, &anchors);
        let rects = svg.matches("<rect").count();
        // 625 heatmap cells plus the white background rect
        assert_eq!(rects, 626);
        let circles = svg.matches("<circle").count();
        assert_eq!(circles, 6); // each anchor is a two-circle marker
    }

    #[test]
    fn plots_are_byte_deterministic() {
        let records = vec![
            record("q_joint_mean", 1, -20.0),
            record("ensemble_acc", 1, 85.0),
        ];
        assert_eq!(plot_scatter(&records), plot_scatter(&records));
    }
}
