//! Gaussian-ness statistics of an ERF map.
//!
//! * radial profile: mean value over 1-pixel annuli (pixels whose distance
//!   from the center rounds to the same integer);
//! * monotonicity violation: largest increase between consecutive annuli,
//!   relative to the profile peak;
//! * Gaussian fit: least squares of `ln(profile)` against `a - r^2/(2 s^2)`
//!   over annuli above `1e-3` of the peak, with its R^2;
//! * area ratio: for a mass fraction `t`, the area of the smallest centered
//!   square holding at least `t` of the total mass, over the map area.

use std::fmt::Write as _;

use crate::analysis::erf::ErfMap;
use crate::error::{Error, Result};

pub const FIT_FLOOR: f64 = 1e-3;
pub const AREA_THRESHOLDS: [f64; 3] = [0.2, 0.5, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct AgdMetrics {
    /// `(mean radius, mean value)` per annulus, radii increasing.
    pub radial_profile: Vec<(f64, f64)>,
    pub monotonicity_violation: f64,
    pub gauss_sigma: f64,
    pub gauss_r2: f64,
    /// `(mass fraction, area ratio)` pairs.
    pub area_ratio: Vec<(f64, f64)>,
}

impl AgdMetrics {
    pub fn area_ratio_at(&self, t: f64) -> Option<f64> {
        self.area_ratio
            .iter()
            .find(|(th, _)| (th - t).abs() < 1e-12)
            .map(|&(_, r)| r)
    }

    /// Columns `metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "gauss_sigma,{}", self.gauss_sigma);
        let _ = writeln!(s, "gauss_r2,{}", self.gauss_r2);
        let _ = writeln!(s, "monotonicity_violation,{}", self.monotonicity_violation);
        for (t, r) in &self.area_ratio {
            let _ = writeln!(s, "area_ratio_{t},{r}");
        }
        s
    }

    /// Columns `radius,value`.
    pub fn profile_csv(&self) -> String {
        let mut s = String::from("radius,value\n");
        for (r, v) in &self.radial_profile {
            let _ = writeln!(s, "{r},{v}");
        }
        s
    }
}

struct Annulus {
    sum_r: f64,
    sum_r2: f64,
    sum_v: f64,
    n: usize,
}

pub fn agd_metrics(e: &ErfMap) -> Result<AgdMetrics> {
    let total = e.total();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Degenerate("ERF map has no positive mass".into()));
    }
    let (ch, cw) = (e.center.0 as f64, e.center.1 as f64);

    let mut annuli: Vec<Annulus> = Vec::new();
    for h in 0..e.height {
        for w in 0..e.width {
            let r2 = (h as f64 - ch).powi(2) + (w as f64 - cw).powi(2);
            let r = r2.sqrt();
            let bin = r.round() as usize;
            if annuli.len() <= bin {
                annuli.resize_with(bin + 1, || Annulus {
                    sum_r: 0.0,
                    sum_r2: 0.0,
                    sum_v: 0.0,
                    n: 0,
                });
            }
            let a = &mut annuli[bin];
            a.sum_r += r;
            a.sum_r2 += r2;
            a.sum_v += e.at(h, w);
            a.n += 1;
        }
    }
    let bins: Vec<(f64, f64, f64)> = annuli
        .iter()
        .filter(|a| a.n > 0)
        .map(|a| {
            let n = a.n as f64;
            (a.sum_r / n, a.sum_r2 / n, a.sum_v / n)
        })
        .collect();

    let radial_profile: Vec<(f64, f64)> = bins.iter().map(|&(r, _, v)| (r, v)).collect();
    let peak = radial_profile.iter().map(|p| p.1).fold(0.0, f64::max);
    let monotonicity_violation = radial_profile
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).max(0.0) / peak)
        .fold(0.0, f64::max);

    let (gauss_sigma, gauss_r2) = gaussian_fit(&bins, peak);

    let area_ratio = AREA_THRESHOLDS
        .iter()
        .map(|&t| (t, area_ratio(e, total, t)))
        .collect();

    Ok(AgdMetrics {
        radial_profile,
        monotonicity_violation,
        gauss_sigma,
        gauss_r2,
        area_ratio,
    })
}

/// Returns `(sigma, r2)`. With a single annulus above the floor the profile
/// falls by more than `1/FIT_FLOOR` within one annulus, and the reported
/// sigma is the largest value consistent with that drop.
fn gaussian_fit(bins: &[(f64, f64, f64)], peak: f64) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.2 > FIT_FLOOR * peak)
        .map(|&(_, r2, v)| (r2, v.ln()))
        .collect();
    if pts.len() < 2 {
        let next_r = bins
            .iter()
            .find(|b| b.2 <= FIT_FLOOR * peak)
            .map_or(1.0, |b| b.0);
        return (next_r / (2.0 * (1.0 / FIT_FLOOR).ln()).sqrt(), 0.0);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let sigma = if slope < 0.0 {
        (-1.0 / (2.0 * slope)).sqrt()
    } else {
        f64::INFINITY
    };
    if syy <= 1e-24 * n {
        return (sigma, 0.0);
    }
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    (sigma, (1.0 - ss_res / syy).clamp(0.0, 1.0))
}

fn area_ratio(e: &ErfMap, total: f64, fraction: f64) -> f64 {
    let (ch, cw) = e.center;
    let max_half = ch.max(cw).max(e.height - ch).max(e.width - cw);
    for half in 0..=max_half {
        let (h0, h1) = (ch.saturating_sub(half), (ch + half).min(e.height - 1));
        let (w0, w1) = (cw.saturating_sub(half), (cw + half).min(e.width - 1));
        let mass: f64 = (h0..=h1)
            .map(|h| (w0..=w1).map(|w| e.at(h, w)).sum::<f64>())
            .sum();
        if mass >= fraction * total * (1.0 - 1e-12) {
            let area = (h1 - h0 + 1) * (w1 - w0 + 1);
            return area as f64 / (e.height * e.width) as f64;
        }
    }
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::erf::InputKind;

    fn map(size: usize, f: impl Fn(f64) -> f64) -> ErfMap {
        let c = size / 2;
        let mut grid = Vec::with_capacity(size * size);
        for h in 0..size {
            for w in 0..size {
                let r2 = (h as f64 - c as f64).powi(2) + (w as f64 - c as f64).powi(2);
                grid.push(f(r2));
            }
        }
        ErfMap {
            height: size,
            width: size,
            grid,
            sample_count: 1,
            input_kind: InputKind::RandomUniform,
            center: (c, c),
        }
    }

    #[test]
    fn recovers_gaussian_sigma() {
        let m = agd_metrics(&map(101, |r2| (-r2 / 200.0).exp())).unwrap();
        assert!((m.gauss_sigma - 10.0).abs() < 0.1, "{}", m.gauss_sigma);
        assert!(m.gauss_r2 > 0.999, "{}", m.gauss_r2);
        assert!(m.monotonicity_violation < 1e-12);
        let radii: Vec<f64> = m.radial_profile.iter().map(|p| p.0).collect();
        assert!(radii.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn delta_limit() {
        let m = agd_metrics(&map(21, |r2| if r2 == 0.0 { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(m.area_ratio_at(0.9), Some(1.0 / 441.0));
        assert!(m.gauss_sigma < 1.0);
        assert_eq!(m.gauss_r2, 0.0);
    }

    #[test]
    fn uniform_limit() {
        let m = agd_metrics(&map(21, |_| 2.0)).unwrap();
        assert_eq!(m.monotonicity_violation, 0.0);
        assert!(m.gauss_r2 < 1e-6);
        let a = m.area_ratio_at(0.5).unwrap();
        assert!((0.5..0.6).contains(&a), "{a}");
    }

    #[test]
    fn zero_map_is_degenerate() {
        assert!(matches!(
            agd_metrics(&map(5, |_| 0.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn csv_columns() {
        let m = agd_metrics(&map(11, |r2| (-r2 / 8.0).exp())).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("metric,value\ngauss_sigma,"));
        assert!(csv.contains("area_ratio_0.9,"));
        assert!(m.profile_csv().starts_with("radius,value\n0,1\n"));
    }
}
