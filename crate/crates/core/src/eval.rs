//! Concordance, Kaplan–Meier, log-rank, and median risk stratification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact pair counts behind Harrell's C-index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Concordance {
    pub concordant: u64,
    pub tied: u64,
    pub comparable: u64,
}

impl Concordance {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::UndefinedMetric("no comparable pairs".into()));
        }
        Ok((self.concordant as f64 + 0.5 * self.tied as f64) / self.comparable as f64)
    }
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted positions `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let (mut i, mut s) = (i, 0);
        while i > 0 {
            s += self.0[i];
            i &= i - 1;
        }
        s
    }
}

fn check_cohort(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<()> {
    if risks.len() != times.len() || times.len() != censored.len() {
        return Err(Error::dim(
            "c_index",
            format!("{} risks, {} times, {} flags", risks.len(), times.len(), censored.len()),
        ));
    }
    if risks.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "c_index" });
    }
    Ok(())
}

/// Pair counts over comparable pairs: `Tᵢ < Tⱼ` with patient `i` uncensored.
/// The pair is concordant when `riskᵢ > riskⱼ` and tied when the risks are equal.
pub fn concordance(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<Concordance> {
    check_cohort(risks, times, censored)?;
    let n = risks.len();
    // dense risk ranks
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut rank = vec![0; n];
    let mut r = 0;
    for w in 0..n {
        if w > 0 && risks[by_risk[w]] != risks[by_risk[w - 1]] {
            r += 1;
        }
        rank[by_risk[w]] = r;
    }
    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick::new(r + 1);
    let mut inserted = 0u64;
    let mut out = Concordance::default();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && times[by_time[end]] == times[by_time[start]] {
            end += 1;
        }
        // the tree holds exactly the patients with strictly later times
        for &i in &by_time[start..end] {
            if !censored[i] {
                let below = tree.prefix(rank[i]);
                let equal = tree.prefix(rank[i] + 1) - below;
                out.concordant += below;
                out.tied += equal;
                out.comparable += inserted;
            }
        }
        for &i in &by_time[start..end] {
            tree.add(rank[i]);
            inserted += 1;
        }
        start = end;
    }
    Ok(out)
}

/// Harrell's C-index.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    concordance(risks, times, censored)?.index()
}

/// Product-limit survival estimate, one step per distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub survival: Vec<f64>,
}

impl KmCurve {
    /// `S(t)`, right-continuous.
    pub fn survival_at(&self, t: f64) -> f64 {
        let steps = self.times.partition_point(|&e| e <= t);
        if steps == 0 {
            1.0
        } else {
            self.survival[steps - 1]
        }
    }
}

pub fn km_curve(times: &[f64], censored: &[bool]) -> Result<KmCurve> {
    if times.len() != censored.len() {
        return Err(Error::dim("km_curve", format!("{} times vs {} flags", times.len(), censored.len())));
    }
    if times.is_empty() {
        return Err(Error::UndefinedMetric("Kaplan-Meier curve of an empty cohort".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "km_curve" });
    }
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve {
        times: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        survival: Vec::new(),
    };
    let mut s = 1.0;
    let mut remaining = times.len();
    let mut start = 0;
    while start < idx.len() {
        let t = times[idx[start]];
        let mut end = start;
        let mut d = 0;
        while end < idx.len() && times[idx[end]] == t {
            d += usize::from(!censored[idx[end]]);
            end += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            curve.times.push(t);
            curve.at_risk.push(remaining);
            curve.events.push(d);
            curve.survival.push(s);
        }
        remaining -= end - start;
        start = end;
    }
    Ok(curve)
}

/// Times and censoring flags of one group.
#[derive(Debug, Clone, Copy)]
pub struct Group<'a> {
    pub times: &'a [f64],
    pub censored: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with a chi-squared(1) p-value.
pub fn logrank_test(a: Group<'_>, b: Group<'_>) -> Result<LogRank> {
    for g in [&a, &b] {
        if g.times.len() != g.censored.len() {
            return Err(Error::dim("logrank_test", "times and flags differ in length"));
        }
        if g.times.is_empty() {
            return Err(Error::UndefinedMetric("log-rank test with an empty group".into()));
        }
    }
    let mut all: Vec<(f64, bool, bool)> = Vec::with_capacity(a.times.len() + b.times.len());
    for (g, in_a) in [(&a, true), (&b, false)] {
        for (&t, &c) in g.times.iter().zip(g.censored) {
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "logrank_test" });
            }
            all.push((t, c, in_a));
        }
    }
    if all.iter().all(|&(_, c, _)| c) {
        return Err(Error::UndefinedMetric("log-rank test with no events".into()));
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut n = all.len() as f64;
    let mut n_a = a.times.len() as f64;
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < all.len() {
        let t = all[start].0;
        let mut end = start;
        let (mut d, mut d_a, mut leaving_a) = (0.0, 0.0, 0.0);
        while end < all.len() && all[end].0 == t {
            let (_, c, in_a) = all[end];
            if !c {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                leaving_a += 1.0;
            }
            end += 1;
        }
        if d > 0.0 {
            let frac = n_a / n;
            observed += d_a;
            expected += d * frac;
            if n > 1.0 {
                variance += d * frac * (1.0 - frac) * (n - d) / (n - 1.0);
            }
        }
        n -= (end - start) as f64;
        n_a -= leaving_a;
        start = end;
    }
    let diff = observed - expected;
    let chi2 = if variance > 0.0 {
        diff * diff / variance
    } else if diff.abs() < 1e-12 {
        0.0
    } else {
        return Err(Error::UndefinedMetric("log-rank variance is zero".into()));
    };
    Ok(LogRank {
        chi2,
        p: chi2_sf(chi2, 1.0),
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

/// Upper tail of the chi-squared distribution with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_q(0.5 * df, 0.5 * x)
    }
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..1000 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

// modified Lentz evaluation of the continued fraction
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Median with linear interpolation between the middle order statistics.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `true` marks the high-risk group: risk strictly above the median.
pub fn stratify_median(risks: &[f64]) -> Result<Vec<bool>> {
    if risks.len() < 2 {
        return Err(Error::UndefinedMetric("stratification needs at least two patients".into()));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "stratify_median" });
    }
    let m = median(risks);
    Ok(risks.iter().map(|&r| r > m).collect())
}
