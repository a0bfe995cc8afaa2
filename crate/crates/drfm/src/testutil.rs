//! Shared test-only helpers: double-double arithmetic for high-precision
//! oracles, relative-error metrics, and small statistics utilities.
//!
//! The double-double type gives ~31 significant digits using pairs of `f64`
//! (Dekker/Knuth error-free transformations, products via `f64::mul_add`),
//! which is plenty to certify 1e-14-level claims about the f64 pipeline with
//! an independently-coded evaluation route.

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

/// Error-free sum: `a + b = s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Error-free product via FMA: `a * b = p + e` exactly.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = f64::mul_add(a, b, -p);
    (p, e)
}

fn renorm(hi: f64, lo: f64) -> Dd {
    let s = hi + lo;
    Dd {
        hi: s,
        lo: lo - (s - hi),
    }
}

impl Dd {
    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        renorm(s, e + self.lo + o.lo)
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd {
            hi: -o.hi,
            lo: -o.lo,
        })
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::new(q1)));
        let q2 = (r.hi + r.lo) / o.hi;
        let r2 = r.sub(o.mul(Dd::new(q2)));
        let q3 = (r2.hi + r2.lo) / o.hi;
        renorm(q1, q2 + q3)
    }

    /// Newton-refined square root (requires `self >= 0`).
    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::new(0.0);
        }
        let y0 = self.hi.sqrt();
        // One correction step: sqrt(x) ~ y0 + (x - y0^2) / (2 y0).
        let r = self.sub(Dd::new(y0).mul(Dd::new(y0)));
        let corr = (r.hi + r.lo) / (2.0 * y0);
        renorm(y0, corr)
    }
}

/// Relative error with a floor on the denominator so that near-zero expected
/// values are judged on an absolute scale instead of blowing up.
pub fn rel_err_floored(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(floor)
}

/// Plain relative error against the larger magnitude.
pub fn rel_err(got: f64, want: f64) -> f64 {
    rel_err_floored(got, want, f64::MIN_POSITIVE)
}

/// Maximum componentwise relative error between two slices.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&g, &w)| rel_err(g, w))
        .fold(0.0, f64::max)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_basic_identities() {
        // (1/3) * 3 == 1 far beyond f64 precision.
        let third = Dd::new(1.0).div(Dd::new(3.0));
        let one = third.mul(Dd::new(3.0));
        assert!((one.to_f64() - 1.0).abs() < 1e-30);
        assert!((one.hi - 1.0).abs() < 1e-30);

        // sqrt(2)^2 == 2.
        let r = Dd::new(2.0).sqrt();
        let back = r.mul(r);
        assert!(back.sub(Dd::new(2.0)).to_f64().abs() < 1e-30);

        // Known double-double-visible case: 0.1 + 0.2 in exact-f64 inputs.
        let s = Dd::new(0.1).add(Dd::new(0.2));
        // The f64 sum has error ~2.8e-17; dd keeps it.
        let err = s.sub(Dd::new(0.1 + 0.2)).to_f64();
        assert!(err.abs() > 1e-18 && err.abs() < 1e-16);
    }

    #[test]
    fn dd_product_chain_beats_f64() {
        // prod (1 - k/1024), k = 1..200, vs exhaustive f64: dd must agree with
        // itself under reordering far better than f64 roundoff.
        let mut a = Dd::new(1.0);
        let mut b = Dd::new(1.0);
        for k in 1..=200 {
            let f = Dd::new(1.0).sub(Dd::new(k as f64 / 1024.0));
            a = a.mul(f);
            b = f.mul(b);
        }
        assert!(a.sub(b).to_f64().abs() / a.to_f64().abs() < 1e-28);
    }
}
