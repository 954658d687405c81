//! Minimal SVG renderer for the two plot-data shapes the toolkit emits:
//! ROC curves (with the random-guess diagonal and per-method AUC legend)
//! and threshold sweeps (HM/TPR/FPR versus tau with the operating threshold
//! highlighted). No drawing dependency; the files are small and the shapes
//! are lines, circles, and text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::tables::CsvTable;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Maps data coordinates to SVG pixel coordinates (y grows downward).
struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::MIN_POSITIVE);
        MARGIN_LEFT + (v - self.x_min) / span * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN_BOTTOM - (v - self.y_min) / span * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new() -> Svg {
        let mut body = String::new();
        let _ = writeln!(
            body,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"13\">"
        );
        let _ = writeln!(body, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        Svg { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dash: Option<&str>) {
        let dash_attr =
            dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
        let _ = writeln!(
            self.body,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" \
             stroke-width=\"1.5\"{dash_attr}/>",
            px(x1),
            px(y1),
            px(x2),
            px(y2)
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let coords: Vec<String> =
            points.iter().map(|&(x, y)| format!("{},{}", px(x), px(y))).collect();
        let _ = writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"2\"/>",
            coords.join(" ")
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            "<circle cx=\"{}\" cy=\"{}\" r=\"{r}\" fill=\"{fill}\"/>",
            px(x),
            px(y)
        );
    }

    fn text(&mut self, x: f64, y: f64, content: &str, anchor: &str, fill: &str) {
        let escaped = content.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\" fill=\"{fill}\">{escaped}</text>",
            px(x),
            px(y)
        );
    }

    /// Axis box plus evenly spaced tick labels on both axes.
    fn axes(&mut self, frame: &Frame, x_label: &str, y_label: &str) {
        let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
        let (y0, y1) = (HEIGHT - MARGIN_BOTTOM, MARGIN_TOP);
        self.line(x0, y0, x1, y0, "#333", None);
        self.line(x0, y0, x0, y1, "#333", None);
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = frame.x_min + t * (frame.x_max - frame.x_min);
            let yv = frame.y_min + t * (frame.y_max - frame.y_min);
            self.text(frame.x(xv), y0 + 18.0, &format!("{xv:.2}"), "middle", "#333");
            self.text(x0 - 8.0, frame.y(yv) + 4.0, &format!("{yv:.2}"), "end", "#333");
        }
        self.text((x0 + x1) / 2.0, HEIGHT - 20.0, x_label, "middle", "#333");
        self.text(16.0, (y0 + y1) / 2.0, y_label, "middle", "#333");
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        let x = WIDTH - MARGIN_RIGHT - 10.0;
        let mut y = HEIGHT - MARGIN_BOTTOM - 14.0 * entries.len() as f64 - 12.0;
        for (label, color) in entries {
            self.line(x - 160.0, y - 4.0, x - 130.0, y - 4.0, color, None);
            self.text(x - 124.0, y, label, "start", "#333");
            y += 16.0;
        }
    }

    fn finish(mut self, path: &Path) -> CliResult<()> {
        self.body.push_str("</svg>\n");
        std::fs::write(path, self.body)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// Renders a plot-data CSV, picking the plot kind from the header:
/// `method,auc,fpr,tpr` becomes an ROC figure, a `tau`-led header becomes a
/// threshold-sweep figure.
pub fn render(input: &Path, output: &Path) -> CliResult<()> {
    let table = CsvTable::read(input)?;
    let names: Vec<&str> = table.header.iter().map(|s| s.as_str()).collect();
    if names == ["method", "auc", "fpr", "tpr"] {
        render_roc(&table, input, output)
    } else if names.first() == Some(&"tau") {
        render_threshold(&table, input, output)
    } else {
        Err(CliError::usage(format!(
            "{}: unrecognized plot data header {:?}; expected ROC columns \
             (method,auc,fpr,tpr) or a threshold sweep starting with tau",
            input.display(),
            table.header.join(",")
        )))
    }
}

fn render_roc(table: &CsvTable, input: &Path, output: &Path) -> CliResult<()> {
    // Group rows into curves by method, preserving first-appearance order.
    let mut methods: Vec<(String, f64, Vec<(f64, f64)>)> = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        let fpr = table.f64_at(i, 2, input)?;
        let tpr = table.f64_at(i, 3, input)?;
        let auc = table.f64_at(i, 1, input)?;
        match methods.iter_mut().find(|(m, _, _)| *m == row[0]) {
            Some((_, _, points)) => points.push((fpr, tpr)),
            None => methods.push((row[0].clone(), auc, vec![(fpr, tpr)])),
        }
    }
    if methods.is_empty() {
        return Err(CliError::usage(format!("{}: no curve rows", input.display())));
    }

    let frame = Frame { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 };
    let mut svg = Svg::new();
    svg.axes(&frame, "false positive rate", "TPR");
    // Random-guess reference.
    svg.line(frame.x(0.0), frame.y(0.0), frame.x(1.0), frame.y(1.0), "#999", Some("6 4"));

    let mut legend = Vec::new();
    for (k, (method, auc, points)) in methods.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pixels: Vec<(f64, f64)> =
            points.iter().map(|&(fx, ty)| (frame.x(fx), frame.y(ty))).collect();
        svg.polyline(&pixels, color);
        legend.push((format!("{method} (AUC = {auc:.2})"), color));
    }
    svg.legend(&legend);
    svg.text(WIDTH / 2.0, MARGIN_TOP - 14.0, "seen-vs-unseen ROC", "middle", "#333");
    svg.finish(output)
}

fn render_threshold(table: &CsvTable, input: &Path, output: &Path) -> CliResult<()> {
    let col = |name: &str| {
        table.column(name).ok_or_else(|| {
            CliError::usage(format!("{}: missing column {name:?}", input.display()))
        })
    };
    let (c_tau, c_hm, c_tpr, c_fpr, c_op) =
        (col("tau")?, col("harmonic")?, col("tpr")?, col("fpr")?, col("is_operating")?);
    if table.rows.is_empty() {
        return Err(CliError::usage(format!("{}: no sweep rows", input.display())));
    }

    let mut taus = Vec::with_capacity(table.rows.len());
    for i in 0..table.rows.len() {
        taus.push(table.f64_at(i, c_tau, input)?);
    }
    let x_min = taus.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = taus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame { x_min, x_max, y_min: 0.0, y_max: 1.0 };

    let mut svg = Svg::new();
    svg.axes(&frame, "threshold tau", "rate");

    let series = [(c_hm, "HM"), (c_tpr, "TPR"), (c_fpr, "FPR")];
    let mut legend = Vec::new();
    for (k, (column, label)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut points = Vec::with_capacity(table.rows.len());
        for i in 0..table.rows.len() {
            points.push((frame.x(taus[i]), frame.y(table.f64_at(i, *column, input)?)));
        }
        svg.polyline(&points, color);
        legend.push((label.to_string(), color));
    }

    // Highlight the operating point: the mean training entropy threshold.
    for i in 0..table.rows.len() {
        if table.rows[i][c_op] != "0" {
            let hm = table.f64_at(i, c_hm, input)?;
            let (x, y) = (frame.x(taus[i]), frame.y(hm));
            svg.circle(x, y, 5.0, "#d62728");
            svg.text(
                x,
                y - 10.0,
                &format!("mean entropy tau = {:.3}", taus[i]),
                "middle",
                "#d62728",
            );
        }
    }

    svg.legend(&legend);
    svg.text(WIDTH / 2.0, MARGIN_TOP - 14.0, "gate threshold sweep", "middle", "#333");
    svg.finish(output)
}
