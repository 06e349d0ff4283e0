//! Globally adaptive 21-point Gauss–Kronrod quadrature.
//!
//! The error estimate and its rescaling follow QUADPACK's `qk21`/`qag`.
//! [`log_integrate`] works on log-integrands whose mass is concentrated in a
//! small part of a wide window, which is the shape of every marginal
//! likelihood integral in this crate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_600_525_452_531,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

// Gauss weights for XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Settings for adaptive quadrature over constant values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct QuadratureScheme {
    pub rel_tol: f64,
    /// Half-width of the integration window in standard deviations.
    pub window_sds: f64,
    /// Uniform pieces the window is split into before adapting.
    pub initial_intervals: usize,
    pub max_intervals: usize,
    /// Most constants a single tree may carry (nested integration depth).
    pub max_constants: usize,
}

impl Default for QuadratureScheme {
    fn default() -> Self {
        QuadratureScheme {
            rel_tol: 1e-9,
            window_sds: 12.0,
            initial_intervals: 32,
            max_intervals: 2000,
            max_constants: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub converged: bool,
    pub evals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut e = err.abs();
    if res_asc != 0.0 && e != 0.0 {
        let scale = (200.0 * e / res_asc).powf(1.5);
        e = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        e = e.max(50.0 * f64::EPSILON * res_abs);
    }
    e
}

/// One 21-point Kronrod rule on `[a, b]` with its embedded 10-point Gauss
/// error estimate.
pub fn gauss_kronrod_21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let f_center = f(center);
    let mut res_k = WGK[10] * f_center;
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (f_center - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let err = rescale_error((res_k - res_g) * half, res_abs * half.abs(), res_asc * half.abs());
    (res_k * half, err)
}

/// Adaptive integration over consecutive `breakpoints` (at least two,
/// ascending). Stops when the summed error estimate falls below
/// `max(abs_tol, rel_tol * |value|)` or `max_intervals` is reached.
pub fn integrate_pieces<F: FnMut(f64) -> f64>(
    mut f: F,
    breakpoints: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_intervals: usize,
) -> QuadResult {
    assert!(breakpoints.len() >= 2, "need at least one interval");
    let mut heap = BinaryHeap::new();
    let mut evals = 0;
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in breakpoints.windows(2) {
        let (value, error) = gauss_kronrod_21(&mut f, w[0], w[1]);
        evals += 21;
        total += value;
        total_err += error;
        heap.push(Piece { a: w[0], b: w[1], value, error });
    }
    let tol = |v: f64| abs_tol.max(rel_tol * v.abs());
    while total_err > tol(total) && heap.len() < max_intervals {
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let (v1, e1) = gauss_kronrod_21(&mut f, worst.a, mid);
        let (v2, e2) = gauss_kronrod_21(&mut f, mid, worst.b);
        evals += 42;
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Piece { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Piece { a: mid, b: worst.b, value: v2, error: e2 });
    }
    // Re-sum to shed accumulated cancellation in the running totals.
    let pieces = heap.into_vec();
    let value: f64 = pieces.iter().map(|p| p.value).sum();
    let abs_error: f64 = pieces.iter().map(|p| p.error).sum();
    QuadResult { value, abs_error, converged: abs_error <= tol(value), evals }
}

fn uniform_breaks(a: f64, b: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

/// Adaptive integration of `f` over `[a, b]` split uniformly first.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, scheme: &QuadratureScheme) -> QuadResult {
    integrate_pieces(f, &uniform_breaks(a, b, scheme.initial_intervals), scheme.rel_tol, 0.0, scheme.max_intervals)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogQuadResult {
    /// `ln` of the integral.
    pub log_value: f64,
    pub converged: bool,
    /// Window actually used after widening.
    pub window: (f64, f64),
}

/// `ln ∫ exp(log_f(c)) dc` over `center ± half_width`.
///
/// The integrand is shifted by its maximum on a scan grid so the adaptive
/// rule works on values near one, and the scan's arg-max becomes an extra
/// breakpoint. The window is doubled (up to eight times) while the
/// integrand at its edges still carries more than `rel_tol` of the mass.
pub fn log_integrate<F: FnMut(f64) -> f64>(
    mut log_f: F,
    center: f64,
    half_width: f64,
    scheme: &QuadratureScheme,
) -> LogQuadResult {
    let mut half = half_width;
    let mut last = None;
    for _ in 0..=8 {
        let (a, b) = (center - half, center + half);
        let n_scan = 16 * scheme.initial_intervals.max(1);
        let mut shift = f64::NEG_INFINITY;
        let mut arg = center;
        for i in 0..=n_scan {
            let c = a + (b - a) * i as f64 / n_scan as f64;
            let v = log_f(c);
            if v > shift {
                shift = v;
                arg = c;
            }
        }
        if shift == f64::NEG_INFINITY || shift.is_nan() {
            return LogQuadResult { log_value: f64::NEG_INFINITY, converged: shift.is_finite(), window: (a, b) };
        }
        let mut breaks = uniform_breaks(a, b, scheme.initial_intervals);
        if arg > a && arg < b && !breaks.contains(&arg) {
            breaks.push(arg);
            breaks.sort_by(f64::total_cmp);
        }
        let res = integrate_pieces(|c| (log_f(c) - shift).exp(), &breaks, scheme.rel_tol, 0.0, scheme.max_intervals);
        let out = LogQuadResult { log_value: res.value.ln() + shift, converged: res.converged, window: (a, b) };
        let edge = (log_f(a) - shift).exp().max((log_f(b) - shift).exp());
        if edge * (b - a) <= scheme.rel_tol * res.value {
            return out;
        }
        last = Some(out);
        half *= 2.0;
    }
    let mut out = last.expect("at least one pass");
    out.converged = false;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomials_are_exact() {
        // Kronrod 21 integrates degree 31 exactly
        let (v, _) = gauss_kronrod_21(&mut |x: f64| x.powi(7) - 3.0 * x.powi(2) + 1.0, -1.0, 2.0);
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0) + 3.0;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn smooth_integrals() {
        let s = QuadratureScheme { rel_tol: 1e-12, initial_intervals: 1, ..Default::default() };
        let r = integrate(f64::sin, 0.0, PI, &s);
        assert!(r.converged);
        assert!((r.value - 2.0).abs() < 1e-12);
        let r = integrate(|x: f64| (-x * x).exp(), -10.0, 10.0, &s);
        assert!((r.value - PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adapts_to_a_kink() {
        let s = QuadratureScheme { rel_tol: 1e-10, initial_intervals: 3, ..Default::default() };
        let r = integrate(|x: f64| x.abs().sqrt(), -1.0, 1.0, &s);
        assert!(r.converged);
        assert!((r.value - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn narrow_peak_in_wide_window() {
        // N(c; 37.3, 0.05^2) scaled by e^-500 in a window of half-width 120
        let mu = 37.3;
        let sd = 0.05;
        let log_f = |c: f64| -500.0 - 0.5 * ((c - mu) / sd).powi(2) - (sd * (2.0 * PI).sqrt()).ln();
        let s = QuadratureScheme { rel_tol: 1e-11, ..Default::default() };
        let r = log_integrate(log_f, 0.0, 120.0, &s);
        assert!(r.converged);
        assert!((r.log_value + 500.0).abs() < 1e-10);
    }

    #[test]
    fn window_widens_for_heavy_edges() {
        let log_f = |c: f64| -0.5 * (c / 5.0).powi(2);
        let s = QuadratureScheme { rel_tol: 1e-10, ..Default::default() };
        let r = log_integrate(log_f, 0.0, 3.0, &s);
        assert!(r.converged);
        assert!(r.window.1 > 40.0);
        assert!((r.log_value - (5.0 * (2.0 * PI).sqrt()).ln()).abs() < 1e-9);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let s = QuadratureScheme { rel_tol: 1e-14, initial_intervals: 1, max_intervals: 2, ..Default::default() };
        let r = integrate(|x: f64| (1.0 / x).sin(), 0.01, 1.0, &s);
        assert!(!r.converged);
    }
}
