//! Pareto frontiers of error vs. training compute and power-law fits
//! `err = (beta * flops)^alpha`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGENERATE_ALPHA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub flops: f64,
    pub error: f64,
    pub group: String,
}

impl RunPoint {
    pub fn new(flops: f64, error: f64, group: impl Into<String>) -> Self {
        RunPoint {
            flops,
            error,
            group: group.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.flops.is_finite() && self.flops > 0.0) {
            return Err(Error::invalid(format!("flops must be positive, got {}", self.flops)));
        }
        if !(self.error.is_finite() && self.error > 0.0) {
            return Err(Error::invalid(format!("error must be positive, got {}", self.error)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    pub rmse_log: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, flops: f64) -> f64 {
        (self.beta * flops).powf(self.alpha)
    }
}

fn by_flops_then_error(a: &RunPoint, b: &RunPoint) -> Ordering {
    a.flops.total_cmp(&b.flops).then(a.error.total_cmp(&b.error))
}

/// Points not dominated by any point with no more compute and strictly lower
/// error, sorted by flops. Along the result error strictly decreases, so for
/// equal errors only the cheapest point survives.
pub fn pareto_frontier(points: &[RunPoint]) -> Vec<RunPoint> {
    let mut sorted: Vec<&RunPoint> = points.iter().collect();
    sorted.sort_by(|a, b| by_flops_then_error(a, b));
    let mut out: Vec<RunPoint> = Vec::new();
    let mut best = f64::INFINITY;
    for p in sorted {
        if p.error < best {
            best = p.error;
            out.push(p.clone());
        }
    }
    out
}

/// Least squares on `(ln flops, ln error)`. The slope is alpha and the
/// intercept is `alpha * ln beta`.
pub fn fit_power_law(points: &[RunPoint]) -> Result<PowerLawFit> {
    for p in points {
        p.validate()?;
    }
    let mut sorted: Vec<&RunPoint> = points.iter().collect();
    sorted.sort_by(|a, b| by_flops_then_error(a, b));
    let distinct = sorted.windows(2).filter(|w| w[0].flops != w[1].flops).count() + usize::from(!sorted.is_empty());
    if distinct < 2 {
        return Err(Error::invalid(format!(
            "power-law fit needs at least 2 distinct flops values, got {distinct}"
        )));
    }
    let xs: Vec<f64> = sorted.iter().map(|p| p.flops.ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.error.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    if alpha.abs() < DEGENERATE_ALPHA_TOL {
        return Err(Error::DegenerateFit {
            tol: DEGENERATE_ALPHA_TOL,
        });
    }
    let intercept = my - alpha * mx;
    let beta = (intercept / alpha).exp();
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + alpha * x);
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        alpha,
        beta,
        rmse_log: (sse / n).sqrt(),
        n_points: xs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFit {
    pub rank: usize,
    pub group: String,
    #[serde(flatten)]
    pub fit: PowerLawFit,
}

/// Most negative alpha first; ties go to the lower log-space RMSE, then name.
pub fn compare_exponents(fits: &BTreeMap<String, PowerLawFit>) -> Vec<RankedFit> {
    let mut v: Vec<(&String, &PowerLawFit)> = fits.iter().collect();
    v.sort_by(|a, b| {
        a.1.alpha
            .total_cmp(&b.1.alpha)
            .then(a.1.rmse_log.total_cmp(&b.1.rmse_log))
            .then(a.0.cmp(b.0))
    });
    v.into_iter()
        .enumerate()
        .map(|(i, (g, f))| RankedFit {
            rank: i + 1,
            group: g.clone(),
            fit: *f,
        })
        .collect()
}

pub fn read_runpoints_csv<R: Read>(reader: R) -> Result<Vec<RunPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<RunPoint>().enumerate() {
        let p = rec.map_err(|e| Error::invalid(format!("runpoints line {}: {e}", i + 2)))?;
        p.validate()
            .map_err(|e| Error::invalid(format!("runpoints line {}: {e}", i + 2)))?;
        out.push(p);
    }
    Ok(out)
}

pub fn group_points(points: &[RunPoint]) -> BTreeMap<String, Vec<RunPoint>> {
    let mut groups: BTreeMap<String, Vec<RunPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.group.clone()).or_default().push(p.clone());
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub n_input: usize,
    pub frontier: Vec<RunPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PowerLawFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub fit_all_points: bool,
    pub groups: Vec<GroupReport>,
    pub ranking: Vec<RankedFit>,
}

/// Fits every group on its frontier (or on all points when `fit_all_points`).
/// A group that cannot be fitted keeps its frontier and records the error.
pub fn analyze(points: &[RunPoint], fit_all_points: bool, baselines: &BTreeMap<String, f64>) -> ScalingReport {
    let mut groups = Vec::new();
    let mut fits = BTreeMap::new();
    for (name, pts) in group_points(points) {
        let frontier = pareto_frontier(&pts);
        let fitted = if fit_all_points {
            fit_power_law(&pts)
        } else {
            fit_power_law(&frontier)
        };
        let (fit, error) = match fitted {
            Ok(f) => {
                fits.insert(name.clone(), f);
                (Some(f), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        groups.push(GroupReport {
            baseline: baselines.get(&name).copied(),
            group: name,
            n_input: pts.len(),
            frontier,
            fit,
            error,
        });
    }
    ScalingReport {
        fit_all_points,
        ranking: compare_exponents(&fits),
        groups,
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained log-log SVG: all points in grey, frontier in blue, the fit
/// as a line and the optional baseline as a dashed horizontal rule.
pub fn render_svg(all: &[RunPoint], group: &GroupReport) -> String {
    let xs: Vec<f64> = all.iter().map(|p| p.flops.log10()).collect();
    let mut ys: Vec<f64> = all.iter().map(|p| p.error.log10()).collect();
    if let Some(b) = group.baseline.filter(|b| *b > 0.0) {
        ys.push(b.log10());
    }
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        SVG_W / 2.0,
        escape_xml(&group.group)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m:.1} {t:.1} V{b:.1} H{r:.1}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">log10 FLOPs [{x0:.2}, {x1:.2}]</text>"#,
        SVG_W / 2.0,
        SVG_H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.1})" text-anchor="middle">log10 error [{y0:.2}, {y1:.2}]</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    for p in all {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#bbbbbb"/>"##,
            px(p.flops.log10()),
            py(p.error.log10())
        );
    }
    for p in &group.frontier {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#1f77b4"/>"##,
            px(p.flops.log10()),
            py(p.error.log10())
        );
    }
    if let Some(fit) = &group.fit {
        let ya = fit.alpha * (x0 + fit.beta.log10());
        let yb = fit.alpha * (x1 + fit.beta.log10());
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
            px(x0),
            py(ya),
            px(x1),
            py(yb)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="44" text-anchor="end" font-family="sans-serif" font-size="12">alpha = {:.4}</text>"#,
            SVG_W - MARGIN,
            fit.alpha
        );
    }
    if let Some(b) = group.baseline.filter(|b| *b > 0.0) {
        let y = py(b.log10());
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#555555" stroke-dasharray="6 4"/>"##,
            MARGIN,
            SVG_W - MARGIN
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(0.05);
    (lo - pad, hi + pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<RunPoint> {
        v.iter().map(|&(f, e)| RunPoint::new(f, e, "g")).collect()
    }

    fn pairs(v: &[RunPoint]) -> Vec<(f64, f64)> {
        v.iter().map(|p| (p.flops, p.error)).collect()
    }

    #[test]
    fn frontier_examples() {
        assert_eq!(pairs(&pareto_frontier(&pts(&[(1.0, 0.5)]))), vec![(1.0, 0.5)]);
        assert_eq!(
            pairs(&pareto_frontier(&pts(&[(1.0, 0.5), (2.0, 0.4), (3.0, 0.45)]))),
            vec![(1.0, 0.5), (2.0, 0.4)]
        );
        assert_eq!(
            pairs(&pareto_frontier(&pts(&[(1.0, 0.5), (1.0, 0.4)]))),
            vec![(1.0, 0.4)]
        );
    }

    #[test]
    fn exact_power_law_recovered() {
        let (alpha, beta) = (-0.15f64, 1e-12f64);
        let p: Vec<RunPoint> = [1e12, 1e13, 1e14]
            .iter()
            .map(|&f| RunPoint::new(f, (beta * f).powf(alpha), "g"))
            .collect();
        let fit = fit_power_law(&p).unwrap();
        assert!((fit.alpha - alpha).abs() < 1e-9);
        assert!((fit.beta / beta - 1.0).abs() < 1e-6);
        assert!(fit.rmse_log < 1e-12);
        assert_eq!(fit.n_points, 3);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        assert!(matches!(
            fit_power_law(&pts(&[(1.0, 0.5), (1.0, 0.4)])),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            fit_power_law(&pts(&[(1.0, 0.5), (10.0, 0.5)])),
            Err(Error::DegenerateFit { .. })
        ));
        assert!(fit_power_law(&pts(&[(1.0, -0.5), (10.0, 0.5)])).is_err());
    }

    #[test]
    fn flops_scaling_divides_beta() {
        let p = pts(&[(1e10, 40.0), (3e10, 35.0), (1e11, 31.0), (5e11, 27.0)]);
        let a = fit_power_law(&pareto_frontier(&p)).unwrap();
        let scaled: Vec<RunPoint> = p.iter().map(|q| RunPoint::new(q.flops * 7.0, q.error, "g")).collect();
        let b = fit_power_law(&pareto_frontier(&scaled)).unwrap();
        assert!((a.alpha - b.alpha).abs() < 1e-9);
        assert!((a.beta / 7.0 / b.beta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ranking_examples() {
        let fit = |alpha, rmse| PowerLawFit {
            alpha,
            beta: 1.0,
            rmse_log: rmse,
            n_points: 3,
        };
        let mut m = BTreeMap::new();
        m.insert("B".to_string(), fit(-0.15, 0.0));
        m.insert("A".to_string(), fit(-0.20, 0.0));
        let r = compare_exponents(&m);
        assert_eq!((r[0].group.as_str(), r[0].rank), ("A", 1));
        m.clear();
        m.insert("X".to_string(), fit(-0.1, 0.3));
        m.insert("Y".to_string(), fit(-0.1, 0.1));
        assert_eq!(compare_exponents(&m)[0].group, "Y");
    }

    #[test]
    fn csv_roundtrip_and_report() {
        let csv = "flops,error,group\n1e10,40,video\n1e11,30,video\n1e12,25,video\n1e10,50,ocr\n1e11,20,ocr\n";
        let p = read_runpoints_csv(csv.as_bytes()).unwrap();
        assert_eq!(p.len(), 5);
        let mut base = BTreeMap::new();
        base.insert("ocr".to_string(), 45.0);
        let rep = analyze(&p, false, &base);
        assert_eq!(rep.groups.len(), 2);
        assert_eq!(rep.ranking[0].group, "ocr");
        let svg = render_svg(&p[3..], &rep.groups[0]);
        assert!(svg.starts_with("<svg") && svg.contains("stroke-dasharray"));
        assert!(read_runpoints_csv("flops,error,group\n-1,3,g\n".as_bytes()).is_err());
    }

    fn brute_frontier(p: &[RunPoint]) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = p
            .iter()
            .filter(|a| !p.iter().any(|b| b.flops <= a.flops && b.error < a.error))
            .map(|a| (a.flops, a.error))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.dedup();
        out
    }

    proptest::proptest! {
        #[test]
        fn frontier_matches_brute_force(v in proptest::collection::vec((1.0f64..1e6, 0.1f64..100.0), 1..60)) {
            let p = pts(&v);
            proptest::prop_assert_eq!(pairs(&pareto_frontier(&p)), brute_frontier(&p));
        }

        #[test]
        fn fit_is_order_invariant(v in proptest::collection::vec((1.0f64..1e6, 0.1f64..100.0), 3..30), rot in 0usize..30) {
            let p = pts(&v);
            let mut q = p.clone();
            let k = rot % q.len();
            q.rotate_left(k);
            q.reverse();
            match (fit_power_law(&p), fit_power_law(&q)) {
                (Ok(a), Ok(b)) => proptest::prop_assert_eq!(a, b),
                (a, b) => proptest::prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }
    }
}
