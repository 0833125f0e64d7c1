//! Characteristic-function inversion for the distribution of
//! `Q = sum_j lambda_j * chi2_1` (Davies' algorithm, central components only).
//!
//! The integration follows the published procedure: bound the truncation
//! error with the moment generating function, optionally add a convergence
//! factor, locate the range of the distribution, then integrate the inverted
//! characteristic function on a regular grid.

use std::f64::consts::PI;

const LOG28: f64 = 0.0866; // ln(2) / 8

/// Reasons the integration could not certify the requested accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaviesFault {
    /// Required accuracy not achieved within the term limit.
    AccuracyNotMet,
    /// Round-off error may be significant.
    RoundOff,
    /// Invalid parameters.
    InvalidParameters,
    /// Unable to locate integration parameters.
    NoIntegrationParameters,
}

impl DaviesFault {
    pub fn code(self) -> u8 {
        match self {
            DaviesFault::AccuracyNotMet => 1,
            DaviesFault::RoundOff => 2,
            DaviesFault::InvalidParameters => 3,
            DaviesFault::NoIntegrationParameters => 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DaviesOutput {
    /// `P(Q < c)`.
    pub cdf: f64,
    pub fault: Option<DaviesFault>,
    pub terms: usize,
}

struct TermLimit;

struct Integrator<'a> {
    lambdas: &'a [f64],
    // indices into lambdas sorted by decreasing |lambda|
    order: Vec<usize>,
    sigsq: f64,
    lmax: f64,
    lmin: f64,
    mean: f64,
    c: f64,
    intl: f64,
    ersm: f64,
    count: usize,
    lim: usize,
    fail: bool,
}

fn exp1(x: f64) -> f64 {
    if x < -50.0 {
        0.0
    } else {
        x.exp()
    }
}

/// `ln(1 + x)` when `first`, else `ln(1 + x) - x`.
fn log1(x: f64, first: bool) -> f64 {
    if x.abs() > 0.1 {
        if first {
            x.ln_1p()
        } else {
            x.ln_1p() - x
        }
    } else {
        let mut y = x / (2.0 + x);
        let mut term = 2.0 * y * y * y;
        let mut k = 3.0;
        let mut s = if first { 2.0 } else { -x } * y;
        y *= y;
        let mut s1 = s + term / k;
        while s1 != s {
            k += 2.0;
            term *= y;
            s = s1;
            s1 = s + term / k;
        }
        s
    }
}

impl<'a> Integrator<'a> {
    fn counter(&mut self) -> Result<(), TermLimit> {
        self.count += 1;
        if self.count > self.lim {
            Err(TermLimit)
        } else {
            Ok(())
        }
    }

    /// Bound on the tail probability from the mgf; also returns the cutoff.
    fn errbd(&mut self, u: f64) -> Result<(f64, f64), TermLimit> {
        self.counter()?;
        let mut xconst = u * self.sigsq;
        let mut sum1 = u * xconst;
        let u2 = 2.0 * u;
        for &lj in self.lambdas.iter().rev() {
            let x = u2 * lj;
            let y = 1.0 - x;
            xconst += lj / y;
            sum1 += x * x / y + log1(-x, false);
        }
        Ok((exp1(-0.5 * sum1), xconst))
    }

    /// Finds a cutoff `c` with `P(Q > c) < accx` (upper side when `*upn > 0`).
    fn ctff(&mut self, accx: f64, upn: &mut f64) -> Result<f64, TermLimit> {
        let mut u2 = *upn;
        let mut u1 = 0.0;
        let mut c1 = self.mean;
        let rb = 2.0 * if u2 > 0.0 { self.lmax } else { self.lmin };
        let mut c2;
        loop {
            let u = u2 / (1.0 + u2 * rb);
            let (bound, cut) = self.errbd(u)?;
            c2 = cut;
            if bound <= accx {
                break;
            }
            u1 = u2;
            c1 = c2;
            u2 *= 2.0;
        }
        while (c1 - self.mean) / (c2 - self.mean) < 0.9 {
            let u = (u1 + u2) / 2.0;
            let (bound, cut) = self.errbd(u / (1.0 + u * rb))?;
            if bound > accx {
                u1 = u;
                c1 = cut;
            } else {
                u2 = u;
                c2 = cut;
            }
        }
        *upn = u2;
        Ok(c2)
    }

    /// Bound on the integration error from truncating at `u`.
    fn truncation(&mut self, u: f64, tausq: f64) -> Result<f64, TermLimit> {
        self.counter()?;
        let mut prod2 = 0.0;
        let mut prod3 = 0.0;
        let mut s = 0.0;
        let sum2 = (self.sigsq + tausq) * u * u;
        let mut prod1 = 2.0 * sum2;
        let u = 2.0 * u;
        for &lj in self.lambdas {
            let x = (u * lj) * (u * lj);
            if x > 1.0 {
                prod2 += x.ln();
                prod3 += log1(x, true);
                s += 1.0;
            } else {
                prod1 += log1(x, true);
            }
        }
        prod2 += prod1;
        prod3 += prod1;
        let x = exp1(-0.25 * prod2) / PI;
        let y = exp1(-0.25 * prod3) / PI;
        let mut err1 = if s == 0.0 { 1.0 } else { x * 2.0 / s };
        let err2 = if prod3 > 1.0 { 2.5 * y } else { 1.0 };
        if err2 < err1 {
            err1 = err2;
        }
        let x = 0.5 * sum2;
        let err2 = if x <= y { 1.0 } else { y / x };
        Ok(err1.min(err2))
    }

    /// Finds `u` with `truncation(u) <= accx` and `truncation(u / 1.2) > accx`.
    fn findu(&mut self, utx: &mut f64, accx: f64) -> Result<(), TermLimit> {
        const DIVIS: [f64; 4] = [2.0, 1.4, 1.2, 1.1];
        let mut ut = *utx;
        let mut u = ut / 4.0;
        if self.truncation(u, 0.0)? > accx {
            u = ut;
            while self.truncation(u, 0.0)? > accx {
                ut *= 4.0;
                u = ut;
            }
        } else {
            ut = u;
            u /= 4.0;
            while self.truncation(u, 0.0)? <= accx {
                ut = u;
                u /= 4.0;
            }
        }
        for d in DIVIS {
            let u = ut / d;
            if self.truncation(u, 0.0)? <= accx {
                ut = u;
            }
        }
        *utx = ut;
        Ok(())
    }

    /// Integrates with `nterm` terms at step `interv`; when `!mainx` the
    /// integrand is multiplied by the convergence factor `1 - exp(-tausq u^2 / 2)`.
    fn integrate(&mut self, nterm: usize, interv: f64, tausq: f64, mainx: bool) {
        let inpi = interv / PI;
        for k in (0..=nterm).rev() {
            let u = (k as f64 + 0.5) * interv;
            let mut sum1 = -2.0 * u * self.c;
            let mut sum2 = sum1.abs();
            let mut sum3 = -0.5 * self.sigsq * u * u;
            for &lj in self.lambdas.iter().rev() {
                let x = 2.0 * lj * u;
                sum3 -= 0.25 * log1(x * x, true);
                let z = x.atan();
                sum1 += z;
                sum2 += z.abs();
            }
            let mut x = inpi * exp1(sum3) / u;
            if !mainx {
                x *= 1.0 - exp1(-0.5 * tausq * u * u);
            }
            self.intl += (0.5 * sum1).sin() * x;
            self.ersm += 0.5 * sum2 * x;
        }
    }

    /// Coefficient of `tausq` in the error when a convergence factor is used
    /// and the distribution function is evaluated at `x`.
    fn cfe(&mut self, x: f64) -> Result<f64, TermLimit> {
        self.counter()?;
        let mut axl = x.abs();
        let sxl = if x > 0.0 { 1.0 } else { -1.0 };
        let mut sum1 = 0.0;
        let r = self.order.len();
        for j in (0..r).rev() {
            let t = self.order[j];
            if self.lambdas[t] * sxl > 0.0 {
                let lj = self.lambdas[t].abs();
                let axl1 = axl - lj;
                let axl2 = lj / LOG28;
                if axl1 > axl2 {
                    axl = axl1;
                } else {
                    if axl > axl2 {
                        axl = axl2;
                    }
                    sum1 = (axl - axl1) / lj + j as f64;
                    break;
                }
            }
        }
        if sum1 > 100.0 {
            self.fail = true;
            Ok(1.0)
        } else {
            Ok(2f64.powf(sum1 / 4.0) / (PI * axl * axl))
        }
    }
}

/// `P(sum_j lambda_j chi2_1 < c)` to absolute accuracy `acc`, using at most
/// `lim` integration terms.
pub fn davies_cdf(lambdas: &[f64], c: f64, lim: usize, acc: f64) -> DaviesOutput {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].abs().total_cmp(&lambdas[a].abs()));
    let mut st = Integrator {
        lambdas,
        order,
        sigsq: 0.0,
        lmax: 0.0,
        lmin: 0.0,
        mean: 0.0,
        c,
        intl: 0.0,
        ersm: 0.0,
        count: 0,
        lim,
        fail: false,
    };
    let mut terms = 0usize;
    let result = run(&mut st, acc, &mut terms);
    match result {
        Ok((cdf, fault)) => DaviesOutput { cdf, fault, terms },
        Err(TermLimit) => DaviesOutput {
            cdf: -1.0,
            fault: Some(DaviesFault::NoIntegrationParameters),
            terms,
        },
    }
}

fn run(st: &mut Integrator<'_>, acc: f64, terms: &mut usize) -> Result<(f64, Option<DaviesFault>), TermLimit> {
    let mut acc1 = acc;
    let mut xlim = st.lim as f64;
    let mut sd = st.sigsq;
    for &lj in st.lambdas {
        if !lj.is_finite() {
            return Ok((-1.0, Some(DaviesFault::InvalidParameters)));
        }
        sd += lj * lj * 2.0;
        st.mean += lj;
        if st.lmax < lj {
            st.lmax = lj;
        } else if st.lmin > lj {
            st.lmin = lj;
        }
    }
    if sd == 0.0 {
        return Ok((if st.c > 0.0 { 1.0 } else { 0.0 }, None));
    }
    if st.lmin == 0.0 && st.lmax == 0.0 {
        return Ok((-1.0, Some(DaviesFault::InvalidParameters)));
    }
    let sd = sd.sqrt();
    let almx = if st.lmax < -st.lmin { -st.lmin } else { st.lmax };

    let mut utx = 16.0 / sd;
    let mut up = 4.5 / sd;
    let mut un = -up;
    st.findu(&mut utx, 0.5 * acc1)?;
    // does a convergence factor help?
    if st.c != 0.0 && almx > 0.07 * sd {
        let tausq = 0.25 * acc1 / st.cfe(st.c)?;
        if st.fail {
            st.fail = false;
        } else if st.truncation(utx, tausq)? < 0.2 * acc1 {
            st.sigsq += tausq;
            st.findu(&mut utx, 0.25 * acc1)?;
        }
    }
    acc1 *= 0.5;

    loop {
        // range of the distribution; outside it the answer is 0 or 1
        let d1 = st.ctff(acc1, &mut up)? - st.c;
        if d1 < 0.0 {
            return Ok((1.0, None));
        }
        let d2 = st.c - st.ctff(acc1, &mut un)?;
        if d2 < 0.0 {
            return Ok((0.0, None));
        }
        let intv = 2.0 * PI / d1.max(d2);
        let xnt = utx / intv;
        let xntm = 3.0 / acc1.sqrt();
        if xnt > xntm * 1.5 {
            // auxiliary integration with a convergence factor
            if xntm > xlim {
                return Ok((-1.0, Some(DaviesFault::AccuracyNotMet)));
            }
            let ntm = (xntm + 0.5).floor() as usize;
            let intv1 = utx / ntm as f64;
            let x = 2.0 * PI / intv1;
            if x > st.c.abs() {
                let tausq = 0.33 * acc1 / (1.1 * (st.cfe(st.c - x)? + st.cfe(st.c + x)?));
                if !st.fail {
                    acc1 *= 0.67;
                    st.integrate(ntm, intv1, tausq, false);
                    *terms += ntm + 1;
                    xlim -= xntm;
                    st.sigsq += tausq;
                    st.findu(&mut utx, 0.25 * acc1)?;
                    acc1 *= 0.75;
                    continue;
                }
            }
        }
        // main integration
        if xnt > xlim {
            return Ok((-1.0, Some(DaviesFault::AccuracyNotMet)));
        }
        let nt = (xnt + 0.5).floor() as usize;
        st.integrate(nt, intv, 0.0, true);
        *terms += nt + 1;
        let cdf = 0.5 - st.intl;

        let up = st.ersm;
        let x = up + acc1 / 10.0;
        let mut fault = None;
        for rat in [1.0, 2.0, 4.0, 8.0] {
            if rat * x == rat * up {
                fault = Some(DaviesFault::RoundOff);
            }
        }
        return Ok((cdf, fault));
    }
}
