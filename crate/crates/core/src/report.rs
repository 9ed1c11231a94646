// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-distribution histograms with CSV and SVG renderings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::NeuronId;

/// Share of neuron occurrences per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub label: String,
    pub counts: Vec<usize>,
    /// Percent of all occurrences per layer; sums to 100.
    pub percentages: Vec<f64>,
}

impl LayerHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Percentage held by the last `k` layers.
    pub fn top_layers_share(&self, k: usize) -> f64 {
        let n = self.percentages.len();
        self.percentages[n.saturating_sub(k)..].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,count,percent\n");
        for (l, (c, p)) in self.counts.iter().zip(&self.percentages).enumerate() {
            let _ = writeln!(out, "{l},{c},{p:.4}");
        }
        out
    }

    /// Vertical bar chart, one bar per layer.
    pub fn to_svg(&self) -> String {
        const W: f64 = 520.0;
        const H: f64 = 320.0;
        const LEFT: f64 = 60.0;
        const RIGHT: f64 = 20.0;
        const TOP: f64 = 40.0;
        const BOTTOM: f64 = 50.0;
        let plot_w = W - LEFT - RIGHT;
        let plot_h = H - TOP - BOTTOM;
        let n = self.percentages.len().max(1) as f64;
        let slot = plot_w / n;
        let bar = slot * 0.7;
        let y_of = |p: f64| TOP + plot_h * (1.0 - p / 100.0);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            escape(&self.label)
        );
        for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let y = y_of(tick);
            let _ =
                writeln!(s, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##, W - RIGHT);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.0}</text>"#, LEFT - 6.0, y + 4.0);
        }
        for (l, &p) in self.percentages.iter().enumerate() {
            let x = LEFT + slot * l as f64 + (slot - bar) / 2.0;
            let y = y_of(p);
            let _ = writeln!(
                s,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{bar:.1}" height="{:.1}" fill="#4c72b0"><title>layer {l}: {p:.1}%</title></rect>"##,
                TOP + plot_h - y
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{l}</text>"#,
                x + bar / 2.0,
                TOP + plot_h + 18.0
            );
        }
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, TOP + plot_h);
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            TOP + plot_h,
            W - RIGHT,
            TOP + plot_h
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer</text>"#,
            LEFT + plot_w / 2.0,
            H - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">% of neurons</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Counts every occurrence of a neuron per layer and normalizes to percent.
/// The same neuron fed twice counts twice.
pub fn layer_distribution(
    neurons: impl IntoIterator<Item = NeuronId>,
    n_layers: usize,
    label: &str,
) -> Result<LayerHistogram> {
    let mut counts = vec![0usize; n_layers];
    for n in neurons {
        *counts.get_mut(n.layer).ok_or(Error::NeuronOutOfRange {
            layer: n.layer,
            unit: n.unit,
            layers: n_layers,
            units: usize::MAX,
        })? += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Analysis(format!("histogram `{label}` has no neurons")));
    }
    let percentages = counts.iter().map(|&c| 100.0 * c as f64 / total as f64).collect();
    Ok(LayerHistogram { label: label.to_string(), counts, percentages })
}

/// File-name stem for a histogram label.
pub fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect()
}

/// Writes `<slug>.csv` and `<slug>.svg`, or `<slug>.warning.txt` when the
/// input held no neurons. Returns the written paths.
pub fn write_layer_distribution(
    dir: &Path,
    neurons: impl IntoIterator<Item = NeuronId>,
    n_layers: usize,
    label: &str,
) -> Result<(Option<LayerHistogram>, Vec<PathBuf>)> {
    let stem = slug(label);
    match layer_distribution(neurons, n_layers, label) {
        Ok(h) => {
            let csv = dir.join(format!("{stem}.csv"));
            let svg = dir.join(format!("{stem}.svg"));
            io::write_text(&csv, &h.to_csv())?;
            io::write_text(&svg, &h.to_svg())?;
            Ok((Some(h), vec![csv, svg]))
        }
        Err(Error::Analysis(_)) => {
            let path = dir.join(format!("{stem}.warning.txt"));
            io::write_text(&path, &format!("warning: histogram `{label}` is empty; no neurons were supplied\n"))?;
            Ok((None, vec![path]))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentages_from_counts() {
        let h = layer_distribution([NeuronId::new(0, 1), NeuronId::new(3, 2), NeuronId::new(3, 7)], 4, "English-KN")
            .unwrap();
        let rounded: Vec<String> = h.percentages.iter().map(|p| format!("{p:.1}")).collect();
        assert_eq!(rounded, ["33.3", "0.0", "0.0", "66.7"]);
        assert_eq!(h.total(), 3);
        assert!((h.percentages.iter().sum::<f64>() - 100.0).abs() < 0.01);
    }

    #[test]
    fn last_layer_only() {
        let h = layer_distribution((0..5).map(|u| NeuronId::new(2, u)), 3, "x").unwrap();
        assert_eq!(h.percentages, vec![0.0, 0.0, 100.0]);
        assert_eq!(h.top_layers_share(1), 100.0);
    }

    #[test]
    fn empty_input_is_an_error_and_a_warning_file() {
        assert!(layer_distribution(std::iter::empty(), 4, "x").is_err());
        let dir = tempfile::tempdir().unwrap();
        let (h, paths) = write_layer_distribution(dir.path(), std::iter::empty(), 4, "LIKN").unwrap();
        assert!(h.is_none());
        assert!(paths[0].ends_with("likn.warning.txt"));
    }

    #[test]
    fn renders_csv_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let (h, paths) = write_layer_distribution(dir.path(), [NeuronId::new(1, 0)], 2, "DKN").unwrap();
        assert_eq!(h.unwrap().to_csv(), "layer,count,percent\n0,0,0.0000\n1,1,100.0000\n");
        let svg = std::fs::read_to_string(&paths[1]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 2);
    }
}
