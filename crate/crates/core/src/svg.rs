//! Static SVG renderings: layout overlays, training curves, per-measurement
//! error bars and conductivity fields.

use std::fmt::Write as _;

use crate::geometry::{ElectrodeLayout, Point, PolygonDomain};
use crate::mesh::TriangularMesh;
use crate::network::TrainingRecord;

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;

struct Frame {
    lo: Point,
    scale: f64,
    height: f64,
}

impl Frame {
    fn new(domain: &PolygonDomain) -> Self {
        let (lo, hi) = domain.bbox();
        let scale = (SIZE - 2.0 * PAD) / (hi.x - lo.x).max(hi.y - lo.y);
        Frame {
            lo,
            scale,
            height: (hi.y - lo.y) * scale + 2.0 * PAD,
        }
    }

    fn width(&self, domain: &PolygonDomain) -> f64 {
        let (lo, hi) = domain.bbox();
        (hi.x - lo.x) * self.scale + 2.0 * PAD
    }

    fn map(&self, p: Point) -> (f64, f64) {
        (
            PAD + (p.x - self.lo.x) * self.scale,
            self.height - PAD - (p.y - self.lo.y) * self.scale,
        )
    }
}

fn header(w: f64, h: f64, tag: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.1}\" height=\"{h:.1}\" viewBox=\"0 0 {w:.1} {h:.1}\">\n<!-- {tag} -->\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn ring_path(frame: &Frame, ring: &[Point]) -> String {
    let mut d = String::new();
    for (i, p) in ring.iter().enumerate() {
        let (x, y) = frame.map(*p);
        let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
    }
    d.push('Z');
    d
}

fn outline(frame: &Frame, domain: &PolygonDomain) -> String {
    let mut out = String::new();
    for ring in std::iter::once(domain.outer()).chain(domain.holes().iter().map(|h| h.as_slice())) {
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>",
            ring_path(frame, ring)
        );
    }
    out
}

fn electrode_marks(frame: &Frame, domain: &PolygonDomain, layout: &ElectrodeLayout, class: &str, color: &str, r: f64) -> String {
    let sides = domain.sides();
    let mut out = String::new();
    for e in 0..layout.k() {
        let side = &sides[layout.side_of()[e]];
        let (a, b) = layout.extent(e);
        let (x0, y0) = frame.map(side.point_at(a));
        let (x1, y1) = frame.map(side.point_at(b));
        let _ = writeln!(
            out,
            "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"{color}\" stroke-width=\"3\"/>"
        );
        for (x, y) in [(x0, y0), (x1, y1)] {
            let _ = writeln!(
                out,
                "<circle class=\"marker {class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r}\" fill=\"{color}\"/>"
            );
        }
    }
    out
}

/// Optimized electrodes in blue with the uniform layout drawn on top in black.
pub fn layout_overlay(domain: &PolygonDomain, optimized: &ElectrodeLayout, uniform: &ElectrodeLayout, tag: &str) -> String {
    let frame = Frame::new(domain);
    let mut out = header(frame.width(domain), frame.height, tag);
    out += &outline(&frame, domain);
    out += &electrode_marks(&frame, domain, optimized, "optimized", "#1f5fbf", 3.5);
    out += &electrode_marks(&frame, domain, uniform, "uniform", "black", 2.0);
    out += "</svg>\n";
    out
}

/// Mesh edges with electrode edges highlighted.
pub fn mesh_plot(mesh: &TriangularMesh, domain: &PolygonDomain, tag: &str) -> String {
    let frame = Frame::new(domain);
    let mut out = header(frame.width(domain), frame.height, tag);
    for t in &mesh.triangles {
        let pts: Vec<Point> = t.iter().map(|&i| mesh.nodes[i]).collect();
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"#999\" stroke-width=\"0.5\"/>",
            ring_path(&frame, &pts)
        );
    }
    for edges in &mesh.electrode_edges {
        for &[a, b] in edges {
            let (x0, y0) = frame.map(mesh.nodes[a]);
            let (x1, y1) = frame.map(mesh.nodes[b]);
            let _ = writeln!(
                out,
                "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"green\" stroke-width=\"3\"/>"
            );
        }
    }
    out += "</svg>\n";
    out
}

/// Blue-white-red ramp on `[0, 1]`.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t / 0.5;
        (40.0 + 215.0 * s, 70.0 + 185.0 * s, 200.0 + 55.0 * s)
    } else {
        let s = (t - 0.5) / 0.5;
        (255.0, 255.0 - 190.0 * s, 255.0 - 215.0 * s)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

/// Nodal field rendered per triangle at its mean value on the color scale `[lo, hi]`.
pub fn field_plot(mesh: &TriangularMesh, domain: &PolygonDomain, values: &[f64], scale: (f64, f64), title: &str, tag: &str) -> String {
    let frame = Frame::new(domain);
    let w = frame.width(domain);
    let mut out = header(w, frame.height + 30.0, tag);
    let span = (scale.1 - scale.0).max(f64::MIN_POSITIVE);
    for t in &mesh.triangles {
        let pts: Vec<Point> = t.iter().map(|&i| mesh.nodes[i]).collect();
        let v = t.iter().map(|&i| values[i]).sum::<f64>() / 3.0;
        let c = color((v - scale.0) / span);
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"{c}\" stroke=\"{c}\" stroke-width=\"0.3\"/>",
            ring_path(&frame, &pts)
        );
    }
    out += &outline(&frame, domain);
    let _ = writeln!(
        out,
        "<text x=\"{PAD}\" y=\"{:.1}\" font-size=\"12\" font-family=\"sans-serif\">{title} (scale {:.3} to {:.3})</text>",
        frame.height + 16.0,
        scale.0,
        scale.1
    );
    out += "</svg>\n";
    out
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let mut d = String::new();
    for (x, y) in points {
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n", d.trim_end())
}

/// Training loss, gradient norm and validation loss against epoch, log scale.
pub fn training_curves(record: &TrainingRecord, tag: &str) -> String {
    let (w, h) = (640.0, 360.0);
    let mut out = header(w, h, tag);
    let series: [(&[f64], &str, &str); 3] = [
        (&record.loss, "black", "loss"),
        (&record.gradient_norm, "#c03030", "gradient norm"),
        (&record.validation_loss, "#1f5fbf", "validation loss"),
    ];
    let logs = |v: &[f64]| -> Vec<f64> { v.iter().filter(|x| **x > 0.0 && x.is_finite()).map(|x| x.log10()).collect() };
    let all: Vec<f64> = series.iter().flat_map(|s| logs(s.0)).collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = record.loss.len().max(2) as f64 - 1.0;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (i, (vals, color, name)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0 && v.is_finite())
            .map(|(e, v)| (40.0 + (w - 60.0) * e as f64 / n, h - 40.0 - (h - 70.0) * (v.log10() - lo) / span))
            .collect();
        out += &polyline(&pts, color);
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"20\" font-size=\"12\" font-family=\"sans-serif\" fill=\"{color}\">{name}</text>",
            60.0 + 160.0 * i as f64
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"40\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">epoch 0 to {}, log10 range {lo:.2} to {hi:.2}; {}</text>",
        h - 12.0,
        record.epochs,
        record.stop_reason
    );
    out += "</svg>\n";
    out
}

/// Grouped bars of `|mu|` per measurement index for two layouts.
pub fn mu_bars(mu_a: &[f64], mu_b: &[f64], labels: (&str, &str), tag: &str) -> String {
    let (w, h) = (900.0, 360.0);
    let mut out = header(w, h, tag);
    let m = mu_a.len().max(1);
    let top = mu_a.iter().chain(mu_b).map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let slot = (w - 60.0) / m as f64;
    for (i, (a, b)) in mu_a.iter().zip(mu_b).enumerate() {
        for (j, (v, c)) in [(a, "#888"), (b, "#1f5fbf")].into_iter().enumerate() {
            let bh = (h - 70.0) * v.abs() / top;
            let x = 40.0 + slot * i as f64 + 0.5 * slot * j as f64;
            let _ = writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{c}\"/>",
                h - 40.0 - bh,
                0.5 * slot
            );
        }
    }
    let _ = writeln!(
        out,
        "<text x=\"40\" y=\"20\" font-size=\"12\" font-family=\"sans-serif\">|mu| per measurement: {} (grey), {} (blue); max {top:.3e}</text>",
        labels.0, labels.1
    );
    out += "</svg>\n";
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{place_random_electrodes, uniform_layout};

    #[test]
    fn overlay_has_two_markers_per_electrode() {
        let d = PolygonDomain::square(1.0);
        let u = uniform_layout(&d, &[3, 3, 3, 3], 0.075).unwrap();
        let o = place_random_electrodes(&d, &[3, 3, 3, 3], 0.075, 0.075, 1).unwrap();
        let s = layout_overlay(&d, &o, &u, "test");
        assert_eq!(s.matches("marker optimized").count(), 24);
        assert_eq!(s.matches("marker uniform").count(), 24);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }

    #[test]
    fn color_ramp_endpoints() {
        assert_eq!(color(0.0), "#2846c8");
        assert_eq!(color(0.5), "#ffffff");
        assert_eq!(color(1.0), "#ff4128");
    }
}
