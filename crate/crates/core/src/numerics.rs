//! Shared numerical plumbing: deterministic summation, adaptive 1D
//! quadrature, log-log least squares, and content hashing.

use sha2::{Digest, Sha256};

/// Sums a slice by recursive halving.  The reduction tree depends only on the
/// slice length, so results are bit-identical regardless of how the terms
/// were produced (serially or by a thread pool).
pub fn pairwise_sum(terms: &[f64]) -> f64 {
    if terms.len() <= 32 {
        let mut acc = 0.0;
        for &t in terms {
            acc += t;
        }
        return acc;
    }
    let mid = terms.len() / 2;
    pairwise_sum(&terms[..mid]) + pairwise_sum(&terms[mid..])
}

/// 7-point Gauss / 15-point Kronrod pair on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_7,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_17,
    0.207_784_955_007_898_27,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_93,
    0.279_705_391_489_276_67,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

fn gk15(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = half * XGK[j];
        let fsum = f(mid - x) + f(mid + x);
        kronrod += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    kronrod *= half;
    gauss *= half;
    (kronrod, (kronrod - gauss).abs())
}

/// Result of an adaptive quadrature: the value and an error estimate.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

/// Globally adaptive Gauss-Kronrod integration of `f` on `[a, b]`.
///
/// Endpoints are never evaluated, so integrable endpoint singularities
/// (`r^β` with `β > -1`) are handled by bisection toward the endpoint.
/// Subdivision stops once the summed error estimate drops below
/// `max(atol, rtol * |value|)` or after `max_splits` bisections.
pub fn adaptive_quad(
    f: &mut dyn FnMut(f64) -> f64,
    a: f64,
    b: f64,
    atol: f64,
    rtol: f64,
) -> Quadrature {
    if !(b > a) {
        return Quadrature { value: 0.0, error: 0.0 };
    }
    struct Seg {
        a: f64,
        b: f64,
        value: f64,
        error: f64,
    }
    let (v, e) = gk15(f, a, b);
    let mut segs = vec![Seg { a, b, value: v, error: e }];
    let max_splits = 4000;
    for _ in 0..max_splits {
        let total: f64 = segs.iter().map(|s| s.value).sum();
        let err: f64 = segs.iter().map(|s| s.error).sum();
        if err <= atol.max(rtol * total.abs()) {
            break;
        }
        // Split the segment with the largest error estimate; ties resolve to
        // the earliest segment so the refinement path is deterministic.
        let mut worst = 0;
        for (i, s) in segs.iter().enumerate() {
            if s.error > segs[worst].error {
                worst = i;
            }
        }
        let Seg { a: sa, b: sb, .. } = segs[worst];
        let mid = 0.5 * (sa + sb);
        // Stop only when bisection no longer produces a new point.  Power
        // singularities at an endpoint need segments far narrower than any
        // fixed fraction of the interval before their tail is resolved.
        if !(sa < mid && mid < sb) {
            break;
        }
        let (v1, e1) = gk15(f, sa, mid);
        let (v2, e2) = gk15(f, mid, sb);
        segs[worst] = Seg { a: sa, b: mid, value: v1, error: e1 };
        segs.push(Seg { a: mid, b: sb, value: v2, error: e2 });
    }
    // Sum left to right for reproducibility.
    segs.sort_by(|x, y| x.a.partial_cmp(&y.a).unwrap());
    let values: Vec<f64> = segs.iter().map(|s| s.value).collect();
    Quadrature {
        value: pairwise_sum(&values),
        error: segs.iter().map(|s| s.error).sum(),
    }
}

/// Least-squares slope of `ln y` against `ln x` over the points with
/// positive, finite coordinates.  Returns `None` when fewer than two points
/// qualify.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &logs {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return None;
    }
    Some(num / den)
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_min(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Hex digest (first 16 chars of SHA-256) of a stream of little-endian f64s
/// plus a short tag.  Reports use this to reference field payloads without
/// embedding them.
pub fn content_hash(tag: &str, values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Formats a float with 17 significant digits, the round-trip-safe width
/// used by every CSV emitter in the crate.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}
