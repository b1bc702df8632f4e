//! Small-multiples SVG of income curves, one panel per state.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CellTable, N_INCOME};
use crate::error::{Error, Result};
use crate::poststrat::{EstimateRow, EstimateSeries, Slice, SERIES_COLUMNS};
use crate::states::{abbreviation, StateFilter, N_STATES};

pub const ALL_COLOR: &str = "#000000";
pub const WHITE_COLOR: &str = "#8B4513";

const PANEL_W: f64 = 110.0;
const PANEL_H: f64 = 90.0;
const PAD_L: f64 = 22.0;
const PAD_R: f64 = 6.0;
const PAD_T: f64 = 16.0;
const PAD_B: f64 = 14.0;
const MARGIN: f64 = 10.0;
const MAX_POINT_R: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PanelOrder {
    /// Ascending state-level predictor (previous election share).
    #[default]
    PreviousShare,
    StateIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FigureOptions {
    pub filter: StateFilter,
    pub slices: Vec<Slice>,
    pub order: PanelOrder,
    pub columns: usize,
    pub title: Option<String>,
}

impl Default for FigureOptions {
    fn default() -> Self {
        FigureOptions {
            filter: StateFilter::All51,
            slices: Slice::BOTH.to_vec(),
            order: PanelOrder::PreviousShare,
            columns: 8,
            title: None,
        }
    }
}

fn slice_color(s: Slice) -> &'static str {
    match s {
        Slice::All => ALL_COLOR,
        Slice::White => WHITE_COLOR,
    }
}

/// States in panel order. Ties on the predictor fall back to state index.
pub fn panel_states(options: &FigureOptions, table: Option<&CellTable>) -> Result<Vec<u8>> {
    let mut states = options.filter.states();
    if options.order == PanelOrder::PreviousShare {
        let table = table.ok_or_else(|| {
            Error::Config("ordering panels by previous share needs the cell table".into())
        })?;
        states.sort_by(|&a, &b| {
            table
                .state_predictor(a)
                .total_cmp(&table.state_predictor(b))
                .then(a.cmp(&b))
        });
    }
    Ok(states)
}

struct Panel<'a> {
    state: u8,
    curves: Vec<(Slice, Vec<&'a EstimateRow>)>,
}

fn collect_panels<'a>(series: &'a EstimateSeries, states: &[u8], slices: &[Slice]) -> Result<Vec<Panel<'a>>> {
    if slices.is_empty() {
        return Err(Error::Config("figure needs at least one slice".into()));
    }
    states
        .iter()
        .map(|&state| {
            let curves = slices
                .iter()
                .map(|&slice| {
                    let pts: Vec<&EstimateRow> = (1..=N_INCOME as u8)
                        .map(|i| series.get(state, i, slice))
                        .collect::<Option<_>>()
                        .ok_or_else(|| {
                            Error::Dataset(format!(
                                "series has no complete {} curve for state {state} ({})",
                                slice.label(),
                                abbreviation(state).unwrap_or("?")
                            ))
                        })?;
                    Ok((slice, pts))
                })
                .collect::<Result<_>>()?;
            Ok(Panel { state, curves })
        })
        .collect()
}

fn band(out: &mut String, xs: &[f64], lo: &[f64], hi: &[f64], color: &str, opacity: f64) {
    let mut pts: Vec<String> = xs.iter().zip(hi).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    pts.extend(xs.iter().zip(lo).rev().map(|(x, y)| format!("{x:.2},{y:.2}")));
    let _ = writeln!(
        out,
        r#"<polygon points="{}" fill="{color}" fill-opacity="{opacity}" stroke="none"/>"#,
        pts.join(" ")
    );
}

/// Renders the figure. Output depends only on the inputs.
pub fn emit_state_grid_figure(series: &EstimateSeries, table: Option<&CellTable>, options: &FigureOptions) -> Result<String> {
    let states = panel_states(options, table)?;
    let panels = collect_panels(series, &states, &options.slices)?;
    let cols = options.columns.clamp(1, N_STATES);
    let rows = panels.len().div_ceil(cols);
    let title_h = if options.title.is_some() { 20.0 } else { 0.0 };
    let width = 2.0 * MARGIN + cols as f64 * PANEL_W;
    let height = 2.0 * MARGIN + title_h + rows as f64 * PANEL_H + 16.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(t) = &options.title {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
            width / 2.0,
            MARGIN + 13.0,
            escape(t)
        );
    }

    let plot_w = PANEL_W - PAD_L - PAD_R;
    let plot_h = PANEL_H - PAD_T - PAD_B;
    for (k, panel) in panels.iter().enumerate() {
        let ox = MARGIN + (k % cols) as f64 * PANEL_W;
        let oy = MARGIN + title_h + (k / cols) as f64 * PANEL_H;
        let x0 = ox + PAD_L;
        let y0 = oy + PAD_T;
        let xs: Vec<f64> = (0..N_INCOME)
            .map(|i| x0 + plot_w * i as f64 / (N_INCOME - 1) as f64)
            .collect();
        let y = |p: f64| y0 + plot_h * (1.0 - p.clamp(0.0, 1.0));

        let _ = writeln!(s, r#"<g class="panel" id="panel-{}">"#, panel.state);
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{y0:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#999999" stroke-width="0.5"/>"##
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.2}" y1="{m:.2}" x2="{:.2}" y2="{m:.2}" stroke="#cccccc" stroke-width="0.5"/>"##,
            x0 + plot_w,
            m = y(0.5)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            x0 + plot_w / 2.0,
            oy + PAD_T - 4.0,
            abbreviation(panel.state).unwrap_or("?")
        );
        if k % cols == 0 {
            for (v, label) in [(0.0, "0"), (0.5, "50%"), (1.0, "100%")] {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-size="7" text-anchor="end">{label}</text>"#,
                    x0 - 2.0,
                    y(v) + 2.5
                );
            }
        }

        for (slice, pts) in &panel.curves {
            let color = slice_color(*slice);
            type Bound = fn(&EstimateRow) -> Option<f64>;
            let bands: [(Bound, Bound, f64); 2] = [(|r| r.q025, |r| r.q975, 0.12), (|r| r.q25, |r| r.q75, 0.25)];
            for (lo, hi, opacity) in bands {
                let l: Option<Vec<f64>> = pts.iter().map(|r| lo(r)).collect();
                let h: Option<Vec<f64>> = pts.iter().map(|r| hi(r)).collect();
                if let (Some(l), Some(h)) = (l, h) {
                    let ly: Vec<f64> = l.iter().map(|&v| y(v)).collect();
                    let hy: Vec<f64> = h.iter().map(|&v| y(v)).collect();
                    band(&mut s, &xs, &ly, &hy, color, opacity);
                }
            }
            let line: Vec<String> = xs
                .iter()
                .zip(pts)
                .map(|(x, r)| format!("{x:.2},{:.2}", y(r.mean)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="curve-{}" points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#,
                slice.label(),
                line.join(" ")
            );
            for (x, r) in xs.iter().zip(pts) {
                if let (Some(p), n) = (r.raw_p, r.raw_n) {
                    if n > 0 {
                        let radius = (0.5 * (n as f64).sqrt()).min(MAX_POINT_R);
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{x:.2}" cy="{:.2}" r="{radius:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                            y(p)
                        );
                    }
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }

    let ly = height - MARGIN - 2.0;
    let mut lx = MARGIN;
    for slice in &options.slices {
        let label = match slice {
            Slice::All => "all voters",
            Slice::White => "white voters",
        };
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"/>"#,
            ly - 3.0,
            lx + 14.0,
            ly - 3.0,
            slice_color(*slice)
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-size="9">{label}</text>"#, lx + 18.0);
        lx += 90.0;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{ly:.2}" font-size="9" text-anchor="end">income category 1 to 5 (x); share voting Republican (y)</text>"#,
        width - MARGIN
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The plotted rows in panel order: the series columns plus a 1-based
/// `panel` position.
pub fn write_figure_csv<W: Write>(series: &EstimateSeries, table: Option<&CellTable>, options: &FigureOptions, out: W) -> Result<()> {
    let states = panel_states(options, table)?;
    let panels = collect_panels(series, &states, &options.slices)?;
    let mut sub = EstimateSeries {
        rows: Vec::new(),
        state_weights: None,
    };
    let mut panel_of = Vec::new();
    for (k, p) in panels.iter().enumerate() {
        for (_, pts) in &p.curves {
            for r in pts {
                sub.rows.push((*r).clone());
                panel_of.push(k + 1);
            }
        }
    }
    let mut buf = Vec::new();
    sub.write_csv(&mut buf)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    let mut w = std::io::BufWriter::new(out);
    let mut lines = text.lines();
    let write_err = |e| Error::io(Path::new("<figure csv>"), e);
    writeln!(w, "{},panel", lines.next().unwrap_or(&SERIES_COLUMNS.join(","))).map_err(write_err)?;
    for (line, panel) in lines.zip(panel_of) {
        writeln!(w, "{line},{panel}").map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// Writes `<stem>.svg` and `<stem>.csv` side by side.
pub fn write_figure(series: &EstimateSeries, table: Option<&CellTable>, options: &FigureOptions, svg_path: &Path) -> Result<()> {
    let svg = emit_state_grid_figure(series, table, options)?;
    std::fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    let csv_path = svg_path.with_extension("csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_figure_csv(series, table, options, f)
}
