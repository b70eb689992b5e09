//! CSV, plain-text and SVG renderings of grids and sim-to-real series.

use std::fmt::Write;

use super::{centralized_columns, GridReport, Regime, Sim2RealPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Auc,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn value(g: &GridReport, row: usize, col: usize, metric: Metric) -> Option<f64> {
    let c = g.cell(row, col);
    match metric {
        Metric::Accuracy => Some(c.accuracy),
        Metric::Auc => c.auc,
    }
}

/// Header `validation,<columns>`, one line per validation set. An undefined
/// AUC is an empty field.
pub fn grid_csv(g: &GridReport, metric: Metric) -> String {
    let mut out = String::from("validation");
    for c in &g.columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (r, name) in g.rows.iter().enumerate() {
        out.push_str(name);
        for c in 0..g.columns.len() {
            out.push(',');
            out.push_str(&num(value(g, r, c, metric)));
        }
        out.push('\n');
    }
    out
}

pub fn sim2real_csv(series: &[Sim2RealPoint]) -> String {
    let mut out = String::from("combination,regime,accuracy,auc\n");
    for p in series {
        let _ = writeln!(
            out,
            "{},{},{:.6},{}",
            p.combination,
            p.regime,
            p.accuracy,
            num(p.auc)
        );
    }
    out
}

/// Both regimes side by side, one block per metric.
pub fn grid_table(centralized: &GridReport, federated: &GridReport) -> String {
    let mut out = String::new();
    for metric in [Metric::Accuracy, Metric::Auc] {
        let cw = centralized.columns.len() * 7;
        let fw = federated.columns.len() * 7;
        let _ = writeln!(out, "{}", metric.as_str());
        let _ = writeln!(
            out,
            "{:10} |{:^cw$}|{:^fw$}",
            "", "Centralized learning with aggregated data", "Federated learning"
        );
        let mut head = format!("{:10} |", "validation");
        for c in &centralized.columns {
            let _ = write!(head, "{c:>6} ");
        }
        head.push('|');
        for c in &federated.columns {
            let _ = write!(head, "{c:>6} ");
        }
        let _ = writeln!(out, "{}", head.trim_end());
        let _ = writeln!(out, "{}", "-".repeat(head.trim_end().len()));
        for (r, name) in centralized.rows.iter().enumerate() {
            let mut line = format!("{name:10} |");
            for g in [centralized, federated] {
                for c in 0..g.columns.len() {
                    let v = value(g, r, c, metric)
                        .map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
                    let _ = write!(line, "{v:>6} ");
                }
                line.push('|');
            }
            line.pop();
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out.push('\n');
    }
    out
}

/// Scatter plot of R* accuracy per training combination, one series per
/// regime.
pub fn sim2real_svg(series: &[Sim2RealPoint]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
    let labels: Vec<String> = centralized_columns().iter().map(|c| c.label("S")).collect();
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_of = |label: &str| {
        let k = labels.iter().position(|l| l == label).unwrap_or(0);
        left + pw * (k as f64 + 0.5) / labels.len() as f64
    };
    let y_of = |acc: f64| top + ph * (1.0 - acc.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">Sim-to-real accuracy on R*</text>"#,
        w / 2.0
    );
    for k in 0..=5 {
        let acc = f64::from(k) / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{acc:.1}</text>"##,
            w - right,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for l in &labels {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{l}</text>"#,
            x_of(l),
            h - bottom + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (regime, color, dx) in [
        (Regime::Centralized, "#1f77b4", -6.0),
        (Regime::Federated, "#ff7f0e", 6.0),
    ] {
        for p in series.iter().filter(|p| p.regime == regime) {
            let (x, y) = (x_of(&p.combination) + dx, y_of(p.accuracy));
            let mark = match regime {
                Regime::Centralized => {
                    format!(r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="{color}"/>"#)
                }
                Regime::Federated => format!(
                    r#"<rect x="{:.1}" y="{:.1}" width="8" height="8" fill="{color}"/>"#,
                    x - 4.0,
                    y - 4.0
                ),
            };
            let _ = writeln!(
                s,
                r#"{mark}<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="9">{:.3}</text>"#,
                y - 8.0,
                p.accuracy
            );
        }
    }
    let (lx, ly) = (left + 10.0, top + 14.0);
    let _ = writeln!(
        s,
        r##"<circle cx="{lx}" cy="{ly}" r="4" fill="#1f77b4"/><text x="{}" y="{}">centralized</text>"##,
        lx + 10.0,
        ly + 4.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="8" height="8" fill="#ff7f0e"/><text x="{}" y="{}">federated</text>"##,
        lx - 4.0,
        ly + 12.0,
        lx + 10.0,
        ly + 20.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Confusion, EvalReport};

    fn grid(regime: Regime, cols: &[&str]) -> GridReport {
        let cell = |a: f64| EvalReport {
            dataset: "x".into(),
            accuracy: a,
            auc: if a > 0.6 { Some(a) } else { None },
            confusion: Confusion::default(),
        };
        GridReport {
            regime,
            rows: vec!["S0".into(), "S1".into(), "S2".into()],
            columns: cols.iter().map(|c| c.to_string()).collect(),
            cells: (0..3)
                .map(|r| {
                    (0..cols.len())
                        .map(|c| cell(0.5 + 0.05 * (r + c) as f64))
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn csv_layout() {
        let g = grid(Regime::Federated, &["S01", "S02", "S12", "S012"]);
        let csv = grid_csv(&g, Metric::Accuracy);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "validation,S01,S02,S12,S012");
        assert_eq!(lines[1], "S0,0.500000,0.550000,0.600000,0.650000");
        // undefined AUC stays empty
        assert!(grid_csv(&g, Metric::Auc)
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("S0,,"));
    }

    #[test]
    fn table_and_plot_render() {
        let c = grid(
            Regime::Centralized,
            &["S0", "S1", "S2", "S01", "S02", "S12", "S012"],
        );
        let f = grid(Regime::Federated, &["S01", "S02", "S12", "S012"]);
        let t = grid_table(&c, &f);
        assert!(t.contains("Federated learning"));
        assert_eq!(t.lines().filter(|l| l.starts_with("S1 ")).count(), 2);
        let series: Vec<_> = ["S0", "S012"]
            .iter()
            .zip([Regime::Centralized, Regime::Federated])
            .map(|(c, r)| Sim2RealPoint {
                combination: c.to_string(),
                regime: r,
                accuracy: 0.7,
                auc: None,
            })
            .collect();
        let svg = sim2real_svg(&series);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(sim2real_csv(&series).lines().count(), 3);
    }
}
