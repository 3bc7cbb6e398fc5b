//! Softmax, log-softmax and token mismatch against 80-digit fixed-point
//! evaluations.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use dvp_core::perturbation::token_mismatch;
use dvp_core::simplex::{log_softmax, softmax};
use dvp_core::LogitVector;

const DIGITS: u32 = 80;

/// Fixed-point decimal with `DIGITS` fractional digits.
#[derive(Clone, Debug)]
struct Fx(BigInt);

fn scale() -> BigInt {
    BigInt::from(10u32).pow(DIGITS)
}

impl Fx {
    fn int(n: i64) -> Self {
        Fx(BigInt::from(n) * scale())
    }

    /// `n / d` for integers.
    fn ratio(n: i64, d: i64) -> Self {
        Fx(BigInt::from(n) * scale() / BigInt::from(d))
    }

    fn add(&self, o: &Fx) -> Fx {
        Fx(&self.0 + &o.0)
    }

    fn sub(&self, o: &Fx) -> Fx {
        Fx(&self.0 - &o.0)
    }

    fn mul(&self, o: &Fx) -> Fx {
        Fx(&self.0 * &o.0 / scale())
    }

    fn div(&self, o: &Fx) -> Fx {
        Fx(&self.0 * scale() / &o.0)
    }

    fn exp(&self) -> Fx {
        // e^x = e^n * e^r with n the nearest integer and |r| <= 1/2
        let half = scale() / 2;
        let t = &self.0 + &half;
        let mut n: BigInt = &t / scale();
        let rem: BigInt = &t % scale();
        if rem.is_negative() {
            n -= 1;
        }
        let r = Fx(&self.0 - &n * scale());
        let mut term = Fx::int(1);
        let mut sum = Fx::int(1);
        for k in 1..200i64 {
            term = Fx(term.mul(&r).0 / k);
            if term.0.is_zero() {
                break;
            }
            sum = sum.add(&term);
        }
        let n: i64 = n.try_into().expect("small exponent");
        let mut e = Fx::int(1);
        let base = if n >= 0 { euler() } else { Fx::int(1).div(&euler()) };
        for _ in 0..n.abs() {
            e = e.mul(&base);
        }
        e.mul(&sum)
    }

    /// Natural log via `2 atanh((y - 1) / (y + 1))`; fine for `y` near 1.
    fn ln(&self) -> Fx {
        let one = Fx::int(1);
        let u = self.sub(&one).div(&self.add(&one));
        let u2 = u.mul(&u);
        let mut pow = u.clone();
        let mut sum = Fx(BigInt::zero());
        for k in 0..2000i64 {
            let term = Fx(pow.0.clone() / (2 * k + 1));
            if term.0.is_zero() {
                break;
            }
            sum = sum.add(&term);
            pow = pow.mul(&u2);
        }
        Fx(sum.0 * 2)
    }

    fn to_f64(&self) -> f64 {
        let neg = self.0.is_negative();
        let mag = self.0.abs();
        let (q, r) = (&mag / scale(), &mag % scale());
        let s = format!("{}{}.{:0>width$}", if neg { "-" } else { "" }, q, r, width = DIGITS as usize);
        s.parse().unwrap()
    }
}

fn euler() -> Fx {
    let mut term = Fx::int(1);
    let mut sum = Fx::int(1);
    for k in 1..200i64 {
        term = Fx(term.0 / k);
        if term.0.is_zero() {
            break;
        }
        sum = sum.add(&term);
    }
    sum
}

fn close_ulps(got: f64, want: f64, ulps: f64) -> bool {
    (got - want).abs() <= ulps * f64::EPSILON * want.abs()
}

#[test]
fn oracle_self_check() {
    assert!(close_ulps(euler().to_f64(), std::f64::consts::E, 0.5));
    assert!(close_ulps(Fx::int(2).ln().to_f64(), std::f64::consts::LN_2, 0.5));
    assert!(close_ulps(Fx::ratio(-3, 2).exp().to_f64(), (-1.5f64).exp(), 1.0));
}

#[test]
fn softmax_two_one_zero() {
    let e: Vec<Fx> = [2, 1, 0].iter().map(|&n| Fx::int(n).exp()).collect();
    let total = e[0].add(&e[1]).add(&e[2]);
    let p = softmax(&LogitVector::from_f64(&[2.0, 1.0, 0.0]).unwrap()).unwrap();
    for (k, ek) in e.iter().enumerate() {
        let want = ek.div(&total).to_f64();
        assert!(close_ulps(p[k], want, 4.0), "{k}: {} vs {want}", p[k]);
    }
}

#[test]
fn log_softmax_thirty_zero() {
    // [-log(1 + e^-30), -30 - log(1 + e^-30)]
    let l = Fx::int(1).add(&Fx::int(-30).exp()).ln();
    let want = [Fx(-l.0.clone()).to_f64(), Fx::int(-30).sub(&l).to_f64()];
    let got = log_softmax(&LogitVector::from_f64(&[30.0, 0.0]).unwrap()).unwrap();
    for k in 0..2 {
        assert!(close_ulps(got.as_slice()[k], want[k], 8.0), "{k}: {} vs {}", got.as_slice()[k], want[k]);
    }
}

#[test]
fn mismatch_three_tokens() {
    // z = [1, 0, -1], eps = [0.01, -0.01, 0]; delta_a = log p_a - log p'_a
    let z = [Fx::int(1), Fx::int(0), Fx::int(-1)];
    let zi = [Fx::ratio(101, 100), Fx::ratio(-1, 100), Fx::int(-1)];
    let sum = |v: &[Fx]| v.iter().fold(Fx::int(0), |s, x| s.add(&x.exp()));
    let (sz, szi) = (sum(&z), sum(&zi));
    let zt = LogitVector::from_f64(&[1.0, 0.0, -1.0]).unwrap();
    let zinf = LogitVector::from_f64(&[1.01, -0.01, -1.0]).unwrap();
    for a in 0..3 {
        let p = z[a].exp().div(&sz);
        let q = zi[a].exp().div(&szi);
        let want = p.div(&q).ln().to_f64();
        let got = token_mismatch(&zt, &zinf, a).unwrap().delta;
        // inputs 1.01 and -0.01 are themselves rounded in f64
        assert!((got - want).abs() <= 1e-15 + 1e-13 * want.abs(), "{a}: {got} vs {want}");
    }
}

#[test]
fn ratio_one_is_identity() {
    assert!(Fx::int(1).ln().0.is_zero());
    assert!(Fx::int(0).exp().0 == BigInt::one() * scale());
}
