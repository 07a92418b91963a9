//! Two-dimensional projection of attention vectors with per-label cluster
//! summaries.
//!
//! The layout is exact t-SNE over the distinct input vectors; repeated
//! vectors share the point of their first occurrence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            seed: 0,
        }
    }
}

/// Centroid and per-axis standard deviation (population) of one label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub label: String,
    pub count: usize,
    pub centroid: [f64; 2],
    pub std: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionMap {
    pub config: ProjectionConfig,
    /// One `[x, y]` per input vector.
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Ordered by label.
    pub clusters: Vec<ClusterSummary>,
}

pub fn cluster_summaries(points: &[[f64; 2]], labels: &[String]) -> Vec<ClusterSummary> {
    let mut groups: BTreeMap<&str, Vec<[f64; 2]>> = BTreeMap::new();
    for (p, l) in points.iter().zip(labels) {
        groups.entry(l).or_default().push(*p);
    }
    groups
        .into_iter()
        .map(|(label, pts)| {
            let n = pts.len() as f64;
            let mean = |d: usize| pts.iter().map(|p| p[d]).sum::<f64>() / n;
            let centroid = [mean(0), mean(1)];
            let sd = |d: usize| (pts.iter().map(|p| (p[d] - centroid[d]).powi(2)).sum::<f64>() / n).sqrt();
            ClusterSummary {
                label: label.to_string(),
                count: pts.len(),
                centroid,
                std: [sd(0), sd(1)],
            }
        })
        .collect()
}

/// Row-conditional affinities with per-row bandwidth matched to the
/// perplexity, symmetrised.
fn affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut row = vec![0.0; n];
        for _ in 0..64 {
            let mut z = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-d2[[i, j]] * beta).exp() };
                z += row[j];
                weighted += d2[[i, j]] * row[j];
            }
            let z = z.max(1e-300);
            let entropy = z.ln() + beta * weighted / z;
            for v in &mut row {
                *v /= z;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-6 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    let sym = (&p + &p.t()) / (2.0 * n as f64);
    sym.mapv(|v| v.max(1e-12))
}

fn tsne(x: ArrayView2<f64>, cfg: &ProjectionConfig) -> Array2<f64> {
    let n = x.nrows();
    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            d2[[i, j]] = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    // scale-free bandwidth search
    let mean = d2.sum() / (n * n) as f64;
    if mean > 0.0 {
        d2 /= mean;
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let p = affinities(&d2, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_simple_fn((n, 2), || init.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let lr = (n as f64 / 12.0).max(50.0);
    let exaggeration_steps = (cfg.iterations / 4).min(250);
    let mut num = Array2::zeros((n, n));
    for it in 0..cfg.iterations {
        let exaggeration = if it < exaggeration_steps { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_steps { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let dx = y[[i, 0]] - y[[j, 0]];
                    let dy = y[[i, 1]] - y[[j, 1]];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[[i, j]] = v;
                z += v;
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                grad[[i, 0]] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, gain), vel) in grad.iter().zip(gains.iter_mut()).zip(velocity.iter_mut()) {
            *gain = if (*g > 0.0) != (*vel > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
            *vel = momentum * *vel - lr * *gain * g;
        }
        y += &velocity;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    y
}

/// Projects `vectors` (one row per item) to 2-D and summarises each label.
pub fn export_projection(vectors: ArrayView2<f64>, labels: &[String], cfg: &ProjectionConfig) -> Result<ProjectionMap> {
    if vectors.nrows() != labels.len() {
        return Err(Error::shape("projection labels", vectors.nrows(), labels.len()));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("projection input contains non-finite values".into()));
    }
    let mut first: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut slot = Vec::with_capacity(vectors.nrows());
    let mut unique_rows = Vec::new();
    for (i, row) in vectors.outer_iter().enumerate() {
        let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        let next = first.len();
        let s = *first.entry(key).or_insert_with(|| {
            unique_rows.push(i);
            next
        });
        slot.push(s);
    }
    if unique_rows.len() < 2 {
        return Err(Error::Config(format!(
            "projection needs at least 2 distinct vectors, got {}",
            unique_rows.len()
        )));
    }
    let unique = vectors.select(ndarray::Axis(0), &unique_rows);
    let y = tsne(unique.view(), cfg);
    let points: Vec<[f64; 2]> = slot.iter().map(|&s| [y[[s, 0]], y[[s, 1]]]).collect();
    Ok(ProjectionMap {
        config: *cfg,
        clusters: cluster_summaries(&points, labels),
        points,
        labels: labels.to_vec(),
    })
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

impl ProjectionMap {
    /// Scatter plot with centroid markers and one-std ellipses.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad, legend) = (640.0, 640.0, 40.0, 180.0);
        let xs = self.points.iter().map(|p| p[0]);
        let ys = self.points.iter().map(|p| p[1]);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = (x1 - x0).max(y1 - y0).max(1e-12);
        let scale = (w - 2.0 * pad) / span;
        let px = |x: f64| pad + (x - x0) * scale;
        let py = |y: f64| h - pad - (y - y0) * scale;
        let colour: BTreeMap<&str, &str> = self
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (c.label.as_str(), PALETTE[i % PALETTE.len()]))
            .collect();

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{h}" viewBox="0 0 {} {h}">"#,
            w + legend,
            w + legend
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="16">{}</text>"#,
            escape(title)
        );
        for (p, l) in self.points.iter().zip(&self.labels) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{}" fill-opacity="0.6"/>"#,
                px(p[0]),
                py(p[1]),
                colour[l.as_str()]
            );
        }
        for c in &self.clusters {
            let (cx, cy) = (px(c.centroid[0]), py(c.centroid[1]));
            let col = colour[c.label.as_str()];
            let _ = writeln!(
                s,
                r#"<ellipse cx="{cx:.3}" cy="{cy:.3}" rx="{:.3}" ry="{:.3}" fill="none" stroke="{col}" stroke-width="1.5"/>"#,
                c.std[0] * scale,
                c.std[1] * scale
            );
            let _ = writeln!(
                s,
                r#"<path d="M {:.3} {cy:.3} H {:.3} M {cx:.3} {:.3} V {:.3}" stroke="black" stroke-width="2"/>"#,
                cx - 6.0,
                cx + 6.0,
                cy - 6.0,
                cy + 6.0
            );
        }
        for (i, c) in self.clusters.iter().enumerate() {
            let y = pad + 20.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{} ({})</text>"#,
                w + 10.0,
                y - 10.0,
                colour[c.label.as_str()],
                w + 28.0,
                y,
                escape(&c.label),
                c.count
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label,x,y\n");
        for (i, (p, l)) in self.points.iter().zip(&self.labels).enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", csv_field(l), p[0], p[1]);
        }
        s
    }

    /// Writes `<stem>.svg`, `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write_files(&self, dir: &Path, stem: &str, title: &str) -> Result<()> {
        let write = |name: String, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(format!("{stem}.svg"), self.to_svg(title))?;
        write(format!("{stem}.csv"), self.to_csv())?;
        write(format!("{stem}.json"), serde_json::to_string_pretty(self)?)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_point_per_vector_and_duplicates_coincide() {
        let x = array![[0.0, 0.0, 1.0], [5.0, 5.0, 5.0], [0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [5.0, 4.9, 5.0]];
        let cfg = ProjectionConfig {
            iterations: 200,
            ..Default::default()
        };
        let m = export_projection(x.view(), &labels(&["a", "b", "a", "a", "b"]), &cfg).unwrap();
        assert_eq!(m.points.len(), 5);
        assert_eq!(m.points[0], m.points[2]);
        assert!(m.points.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        let again = export_projection(x.view(), &labels(&["a", "b", "a", "a", "b"]), &cfg).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn separated_clusters_stay_apart() {
        let mut rows = Vec::new();
        for c in 0..3 {
            for i in 0..10 {
                rows.push([10.0 * c as f64 + 0.01 * i as f64, -3.0 * c as f64, 0.02 * (i % 3) as f64]);
            }
        }
        let x = Array2::from_shape_fn((30, 3), |(i, j)| rows[i][j]);
        let l: Vec<String> = (0..30).map(|i| format!("c{}", i / 10)).collect();
        let m = export_projection(x.view(), &l, &ProjectionConfig::default()).unwrap();
        let spread = m.clusters.iter().map(|c| c.std[0].hypot(c.std[1])).fold(0.0, f64::max);
        for a in 0..3 {
            for b in a + 1..3 {
                let (p, q) = (m.clusters[a].centroid, m.clusters[b].centroid);
                assert!((p[0] - q[0]).hypot(p[1] - q[1]) > 2.0 * spread);
            }
        }
    }

    #[test]
    fn hand_cluster_statistics() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [2.0, 4.0]];
        let s = cluster_summaries(&pts, &labels(&["q", "q", "q", "q"]));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].centroid, [1.0, 2.0]);
        assert_eq!(s[0].std, [1.0, 2.0]);
    }

    #[test]
    fn too_few_points() {
        assert!(export_projection(array![[1.0, 2.0]].view(), &labels(&["a"]), &ProjectionConfig::default()).is_err());
        let dup = array![[1.0, 2.0], [1.0, 2.0]];
        assert!(export_projection(dup.view(), &labels(&["a", "b"]), &ProjectionConfig::default()).is_err());
    }

    #[test]
    fn outputs_render() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [3.0, 3.0]];
        let m = export_projection(x.view(), &labels(&["a<b", "x,y", "a<b"]), &ProjectionConfig::default()).unwrap();
        let svg = m.to_svg("t");
        assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.matches("<ellipse").count() == 2);
        assert!(m.to_csv().contains("\"x,y\""));
    }
}
