use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, QuantSite};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub layer: String,
    pub beta: f32,
    /// Smallest quantizer input seen on the report batches.
    pub x_min: f32,
    /// Largest single-step offset change during training, if known.
    pub slack: f32,
    pub below_xmin: bool,
    /// `β < x_min − slack`.
    pub beyond_slack: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaReport {
    pub rows: Vec<BetaRow>,
}

impl BetaReport {
    pub fn negative_fraction(&self) -> f32 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.beta < 0.0).count() as f32 / self.rows.len() as f32
    }

    pub fn flagged(&self) -> impl Iterator<Item = &BetaRow> {
        self.rows.iter().filter(|r| r.below_xmin)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Bar chart of `β` per layer with `x_min` drawn as a tick on each bar.
    pub fn to_svg(&self) -> String {
        let (w, h, margin) = (640.0f32, 360.0f32, 48.0f32);
        let values = self.rows.iter().flat_map(|r| [r.beta, r.x_min]);
        let lo = values.clone().fold(0f32, f32::min);
        let hi = values.fold(0f32, f32::max);
        let span = (hi - lo).max(1e-6);
        let y = |v: f32| margin + (hi - v) / span * (h - 2.0 * margin);
        let slot = (w - 2.0 * margin) / self.rows.len().max(1) as f32;
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(svg, r#"<text x="{margin}" y="20">learned offset β per layer (tick: x_min)</text>"#);
        let _ = writeln!(svg, r##"<line x1="{margin}" y1="{0}" x2="{1}" y2="{0}" stroke="#444"/>"##, y(0.0), w - margin);
        for (i, r) in self.rows.iter().enumerate() {
            let x = margin + slot * (i as f32 + 0.2);
            let bw = slot * 0.6;
            let (top, bottom) = (y(r.beta.max(0.0)), y(r.beta.min(0.0)));
            let fill = if r.below_xmin { "#c0392b" } else { "#2e86c1" };
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{top:.1}" width="{bw:.1}" height="{:.1}" fill="{fill}"/>"#,
                (bottom - top).max(0.5)
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{2:.1}" x2="{:.1}" y2="{2:.1}" stroke="#000" stroke-width="2"/>"##,
                x - 3.0,
                x + bw + 3.0,
                y(r.x_min)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x + bw / 2.0,
                h - margin / 2.0,
                r.layer
            );
        }
        for v in [lo, hi] {
            let _ = writeln!(svg, r#"<text x="4" y="{:.1}">{v:.3}</text>"#, y(v) + 4.0);
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Lists every learned or fixed activation offset next to the smallest input
/// its quantizer sees on `batches` (quantized forward pass).
pub fn run_beta_report(net: &Network, batches: &[Tensor], slack: &BTreeMap<QuantSite, f32>) -> Result<BetaReport> {
    let sites: Vec<(QuantSite, f32)> = net
        .quantizers()
        .into_iter()
        .filter(|(s, q)| matches!(s, QuantSite::Activation(_)) && q.config.offset_enabled())
        .map(|(s, q)| (s, q.state.beta()))
        .collect();
    if sites.is_empty() {
        return Err(Error::NoOffset("network has no activation offsets to report".into()));
    }
    if batches.is_empty() {
        return Err(Error::Empty("report batches"));
    }
    let mut mins: BTreeMap<QuantSite, f32> = BTreeMap::new();
    for b in batches {
        net.probe(b, &mut |site, t| {
            if let QuantSite::Activation(_) = site {
                let m = mins.entry(site).or_insert(f32::INFINITY);
                *m = m.min(t.min());
            }
        })?;
    }
    let rows = sites
        .into_iter()
        .map(|(site, beta)| {
            let x_min = mins[&site];
            let s = slack.get(&site).copied().unwrap_or(0.0);
            BetaRow {
                layer: site.to_string(),
                beta,
                x_min,
                slack: s,
                below_xmin: beta < x_min,
                beyond_slack: beta < x_min - s,
            }
        })
        .collect();
    Ok(BetaReport { rows })
}
