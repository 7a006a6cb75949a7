//! Tables, CSV and the per-stage l1 plot built from command artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lotto_core::metrics::{CostRatios, TicketReport};
use lotto_core::model::{BlockId, NetworkSpec};

use crate::error::CliResult;

/// Column order of `metrics.csv`. Reduction columns are percentages; the
/// speedup compares training time per epoch.
pub const CSV_COLUMNS: [&str; 25] = [
    "source",
    "criterion",
    "p",
    "rewind",
    "victims",
    "dense_acc",
    "sub_acc",
    "delta_pp",
    "xi",
    "win",
    "dense_flops",
    "sub_flops",
    "flops_reduction_pct",
    "dense_params",
    "sub_params",
    "params_reduction_pct",
    "dense_memory_bytes",
    "sub_memory_bytes",
    "memory_reduction_pct",
    "dense_seconds",
    "sub_seconds",
    "speedup",
    "dense_co2_g",
    "sub_co2_g",
    "co2_reduction_pct",
];

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_row(source: &str, r: &TicketReport) -> String {
    let p = &r.provenance;
    let victims: Vec<String> = p.victims.iter().map(BlockId::to_string).collect();
    let red = CostRatios::reduction_pct;
    let fields = [
        csv_field(source),
        csv_field(&p.criterion),
        p.p.to_string(),
        p.rewind.to_string(),
        victims.join(";"),
        r.dense_acc.to_string(),
        r.sub_acc.to_string(),
        r.delta_pp.to_string(),
        r.xi.to_string(),
        r.win.to_string(),
        r.dense_cost.flops.to_string(),
        r.sub_cost.flops.to_string(),
        red(r.ratios.flops).to_string(),
        r.dense_cost.params.to_string(),
        r.sub_cost.params.to_string(),
        red(r.ratios.params).to_string(),
        r.dense_cost.memory_bytes.to_string(),
        r.sub_cost.memory_bytes.to_string(),
        red(r.ratios.memory).to_string(),
        r.dense_cost.wall_seconds.to_string(),
        r.sub_cost.wall_seconds.to_string(),
        r.ratios.speedup.to_string(),
        r.dense_cost.co2_grams.to_string(),
        r.sub_cost.co2_grams.to_string(),
        red(r.ratios.co2).to_string(),
    ];
    fields.join(",")
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a TicketReport)>) -> String {
    let mut out = csv_header() + "\n";
    for (source, r) in rows {
        out.push_str(&csv_row(source, r));
        out.push('\n');
    }
    out
}

pub fn markdown_table<'a>(rows: impl IntoIterator<Item = &'a TicketReport>) -> String {
    let mut out = format!("{}\n", TicketReport::MARKDOWN_HEADER);
    for r in rows {
        out.push_str(&r.markdown_row());
        out.push('\n');
    }
    out
}

/// Mean score per stage, in stage order.
pub fn stage_means(scores: &BTreeMap<BlockId, f64>) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (id, s) in scores {
        let e = acc.entry(id.stage).or_default();
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter().map(|(stage, (sum, n))| (stage, sum / n as f64)).collect()
}

const STAGE_COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn nice_ceiling(x: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(x.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].into_iter().map(|m| m * mag).find(|&v| v >= x).unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of raw l1 block scores grouped by stage, each group labelled
/// with its feature-map resolution.
pub fn l1_stage_svg(spec: &NetworkSpec, scores: &BTreeMap<BlockId, f64>, title: &str) -> CliResult<String> {
    let plan = spec.shape_plan()?;
    let resolution: BTreeMap<usize, (usize, usize)> = plan
        .blocks
        .iter()
        .map(|(id, _, out)| (id.stage, (out.height, out.width)))
        .collect();
    let mut stages: BTreeMap<usize, Vec<(BlockId, f64)>> = BTreeMap::new();
    for (id, s) in scores {
        stages.entry(id.stage).or_default().push((*id, *s));
    }

    let (bar, gap, left, right, top, plot_h) = (22.0, 28.0, 70.0, 20.0, 50.0, 240.0);
    let n_bars = scores.len() as f64;
    let width = left + right + n_bars * bar + gap * (stages.len().max(1) as f64 + 1.0);
    let height = top + plot_h + 70.0;
    let ymax = nice_ceiling(scores.values().copied().fold(0.0, f64::max));
    let y = |v: f64| top + plot_h * (1.0 - v / ymax);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            width - right,
            left - 6.0,
            yy + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">l1-norm score</text>"#,
        top + plot_h / 2.0
    );
    let mut x = left + gap;
    for (k, (stage, blocks)) in stages.iter().enumerate() {
        let color = STAGE_COLORS[k % STAGE_COLORS.len()];
        let start = x;
        for (id, s) in blocks {
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"><title>block {id}: {s:.4}</title></rect>"#,
                y(*s),
                bar - 4.0,
                top + plot_h - y(*s)
            );
            x += bar;
        }
        let (h, w) = resolution.get(stage).copied().unwrap_or((0, 0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">stage {} ({h}x{w})</text>"#,
            (start + x - 4.0) / 2.0,
            top + plot_h + 20.0,
            stage + 1
        );
        x += gap;
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h,
        width - right,
        top + plot_h
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">removable residual blocks, grouped by stage (feature-map resolution)</text>"#,
        width / 2.0,
        top + plot_h + 45.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}
