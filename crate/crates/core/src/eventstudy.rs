//! Event study of post-jump IV dynamics: jump and randomized reference
//! samples, cumulative changes with and without the jump-minute movement,
//! the direction-indicator regression, bootstrap bands and reference
//! re-draws.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::jumps::{DayClass, DayLabel};
use crate::marketdata::{fmt_num, MinuteOfDay, Stamp};
use crate::pricing::atm_relative_return;
use crate::surface::{Maturity, SmileSample};

/// Windows reported in the regression tables.
pub const WINDOWS: [usize; 5] = [5, 15, 20, 30, 60];
/// Longest cumulative curve, in minutes.
pub const CURVE_MINUTES: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("{day} {start} window {window}: minute {missing} has no value")]
    MissingMinutes {
        day: NaiveDate,
        start: MinuteOfDay,
        window: usize,
        missing: MinuteOfDay,
    },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("{0} samples are too few for the regression")]
    TooFewSamples(usize),
    #[error("window must be at least 1 minute")]
    InvalidWindow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleClass {
    Positive,
    Negative,
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventSample {
    pub day: NaiveDate,
    pub start: MinuteOfDay,
    pub class: SampleClass,
    pub cum: f64,
    pub iv_bar: f64,
}

/// Days with a usable jump, their jump minutes, and the no-jump days.
pub fn jump_minutes(labels: &[DayLabel]) -> Vec<MinuteOfDay> {
    labels
        .iter()
        .filter(|l| matches!(l.class, DayClass::PositiveJump | DayClass::NegativeJump))
        .filter_map(|l| l.jump_minute)
        .collect()
}

pub fn no_jump_days(labels: &[DayLabel]) -> Vec<NaiveDate> {
    labels
        .iter()
        .filter(|l| l.class == DayClass::NoJump)
        .map(|l| l.day)
        .collect()
}

/// One start per no-jump day, drawn with replacement from the empirical
/// jump-minute distribution.
pub fn build_reference_starts(
    days: &[NaiveDate],
    jump_minutes: &[MinuteOfDay],
    seed: u64,
) -> BTreeMap<NaiveDate, MinuteOfDay> {
    if jump_minutes.is_empty() {
        return BTreeMap::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    days.iter()
        .map(|&d| (d, jump_minutes[rng.gen_range(0..jump_minutes.len())]))
        .collect()
}

fn offset(start: MinuteOfDay, k: usize) -> Option<MinuteOfDay> {
    MinuteOfDay::from_session_index(start.session_index()? + k)
}

/// Sum of ΔIV over `start..start+W-1`, or over `start+1..start+W-1` when the
/// jump-minute movement is excluded.
pub fn cumulative_delta(
    series: &HashMap<Stamp, f64>,
    day: NaiveDate,
    start: MinuteOfDay,
    window: usize,
    include_first: bool,
) -> Result<f64, EventError> {
    if window == 0 {
        return Err(EventError::InvalidWindow);
    }
    let term = |k: usize| {
        let missing = || EventError::MissingMinutes {
            day,
            start,
            window,
            missing: offset(start, k).unwrap_or(MinuteOfDay::SESSION_CLOSE),
        };
        let minute = offset(start, k).ok_or_else(missing)?;
        series.get(&Stamp::new(day, minute)).copied().ok_or_else(missing)
    };
    let mut later = 0.0;
    for k in 1..window {
        later += term(k)?;
    }
    // The jump-minute term is added last so that both variants share the
    // same partial sum and differ by exactly that term.
    if include_first {
        Ok(term(0)? + later)
    } else {
        Ok(later)
    }
}

/// Cumulative curve `c(w)` for `w = 0..=max_w`, with `c(w)` the
/// `w`-minute cumulative change (so `c(0) = 0`, and `c(1) = 0` as well when
/// the first movement is excluded).
pub fn cumulative_curve(
    series: &HashMap<Stamp, f64>,
    day: NaiveDate,
    start: MinuteOfDay,
    max_w: usize,
    include_first: bool,
) -> Result<Vec<f64>, EventError> {
    let mut curve = vec![0.0; max_w + 1];
    for w in 1..=max_w {
        let k = w - 1;
        let term = if k == 0 && !include_first {
            0.0
        } else {
            let missing = || EventError::MissingMinutes {
                day,
                start,
                window: w,
                missing: offset(start, k).unwrap_or(MinuteOfDay::SESSION_CLOSE),
            };
            let minute = offset(start, k).ok_or_else(missing)?;
            *series.get(&Stamp::new(day, minute)).ok_or_else(missing)?
        };
        curve[w] = curve[w - 1] + term;
    }
    Ok(curve)
}

/// Mean minute ATM-IV per day over `[from, to]`, scaled by `scale`.
pub fn iv_bars(
    samples: &[SmileSample],
    maturity: Maturity,
    from: MinuteOfDay,
    to: MinuteOfDay,
    scale: f64,
) -> BTreeMap<NaiveDate, f64> {
    let mut acc: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    for s in samples {
        if s.maturity == maturity && s.stamp.minute >= from && s.stamp.minute <= to && s.atm.is_finite() {
            let e = acc.entry(s.stamp.day).or_default();
            e.0 += scale * s.atm;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(d, (sum, n))| (d, sum / n as f64)).collect()
}

/// Upstream data the event samples are cut from.
#[derive(Clone, Copy, Debug)]
pub struct EventInputs<'a> {
    pub labels: &'a [DayLabel],
    /// Deseasonalized one-minute changes of the studied variable.
    pub series: &'a HashMap<Stamp, f64>,
    pub iv_bar: &'a BTreeMap<NaiveDate, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub window: usize,
    pub include_first: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<EventSample>,
    /// Per-class counts of days left out for this window.
    pub missing: BTreeMap<SampleClass, usize>,
}

fn class_of(label: &DayLabel) -> Option<SampleClass> {
    match label.class {
        DayClass::PositiveJump => Some(SampleClass::Positive),
        DayClass::NegativeJump => Some(SampleClass::Negative),
        DayClass::NoJump => Some(SampleClass::Reference),
        DayClass::Excluded => None,
    }
}

fn push_sample(
    set: &mut SampleSet,
    inputs: &EventInputs<'_>,
    spec: WindowSpec,
    day: NaiveDate,
    start: MinuteOfDay,
    class: SampleClass,
) {
    let cum = cumulative_delta(inputs.series, day, start, spec.window, spec.include_first);
    match (cum, inputs.iv_bar.get(&day)) {
        (Ok(cum), Some(&iv_bar)) if iv_bar > 0.0 => set.samples.push(EventSample {
            day,
            start,
            class,
            cum,
            iv_bar,
        }),
        _ => *set.missing.entry(class).or_default() += 1,
    }
}

/// Jump samples only (fixed across reference re-draws).
pub fn jump_samples(inputs: &EventInputs<'_>, spec: WindowSpec) -> SampleSet {
    let mut set = SampleSet::default();
    for label in inputs.labels {
        if let (Some(class @ (SampleClass::Positive | SampleClass::Negative)), Some(start)) =
            (class_of(label), label.jump_minute)
        {
            push_sample(&mut set, inputs, spec, label.day, start, class);
        }
    }
    set
}

pub fn reference_samples(
    inputs: &EventInputs<'_>,
    starts: &BTreeMap<NaiveDate, MinuteOfDay>,
    spec: WindowSpec,
) -> SampleSet {
    let mut set = SampleSet::default();
    for (&day, &start) in starts {
        push_sample(&mut set, inputs, spec, day, start, SampleClass::Reference);
    }
    set
}

pub fn build_samples(
    inputs: &EventInputs<'_>,
    starts: &BTreeMap<NaiveDate, MinuteOfDay>,
    spec: WindowSpec,
) -> SampleSet {
    let mut set = jump_samples(inputs, spec);
    let refs = reference_samples(inputs, starts, spec);
    set.samples.extend(refs.samples);
    for (class, n) in refs.missing {
        *set.missing.entry(class).or_default() += n;
    }
    set
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StandardErrors {
    #[default]
    Classical,
    /// White heteroskedasticity-consistent errors with the n/(n-k) correction.
    Hc1,
}

/// Coefficients are ordered `[beta0, betap, betan, betaiv]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    pub beta: [f64; 4],
    pub se: [f64; 4],
    pub p: [f64; 4],
    pub r_squared: f64,
    pub n: usize,
}

pub fn design_matrix(samples: &[EventSample]) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(samples.len(), 4, |i, j| {
        let s = &samples[i];
        match j {
            0 => 1.0,
            1 => f64::from(u8::from(s.class == SampleClass::Positive)),
            2 => f64::from(u8::from(s.class == SampleClass::Negative)),
            _ => s.iv_bar,
        }
    });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.cum));
    (x, y)
}

/// OLS of cumulative change on `[1, I_P, I_N, IV_bar]` via QR.
pub fn ols_fit(samples: &[EventSample], errors: StandardErrors) -> Result<RegressionFit, EventError> {
    let n = samples.len();
    let k = 4;
    if n <= k {
        return Err(EventError::TooFewSamples(n));
    }
    let (x, y) = design_matrix(samples);
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return Err(EventError::RankDeficientDesign);
    }
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(EventError::RankDeficientDesign)?;
    let resid = &y - &x * &beta;
    let rss = resid.norm_squared();
    let df = (n - k) as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(EventError::RankDeficientDesign)?;
    // (X'X)^{-1} = R^{-1} R^{-T}
    let xtx_inv = &r_inv * r_inv.transpose();
    let cov = match errors {
        StandardErrors::Classical => &xtx_inv * (rss / df),
        StandardErrors::Hc1 => {
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..n {
                let row = x.row(i);
                meat += row.transpose() * row * resid[i].powi(2);
            }
            &xtx_inv * meat * &xtx_inv * (n as f64 / df)
        }
    };
    let t_dist = StudentsT::new(0.0, 1.0, df).map_err(|_| EventError::TooFewSamples(n))?;
    let mut out_beta = [0.0; 4];
    let mut se = [0.0; 4];
    let mut p = [1.0; 4];
    for j in 0..k {
        out_beta[j] = beta[j];
        se[j] = cov[(j, j)].max(0.0).sqrt();
        p[j] = if se[j] > 0.0 {
            (2.0 * t_dist.sf((beta[j] / se[j]).abs())).clamp(0.0, 1.0)
        } else if beta[j] == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    Ok(RegressionFit {
        beta: out_beta,
        se,
        p,
        r_squared,
        n,
    })
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapBand {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Percentile band of the resampled cross-sectional mean, minute by minute.
/// Days are resampled jointly so that each draw uses the same days at every
/// minute.
pub fn bootstrap_band(curves: &[Vec<f64>], draws: usize, level: f64, seed: u64) -> BootstrapBand {
    let n = curves.len();
    let minutes = curves.first().map_or(0, Vec::len);
    if n == 0 || draws == 0 {
        return BootstrapBand {
            level,
            lower: vec![f64::NAN; minutes],
            upper: vec![f64::NAN; minutes],
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![Vec::with_capacity(draws); minutes];
    let mut acc = vec![0.0; minutes];
    for _ in 0..draws {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for _ in 0..n {
            let c = &curves[rng.gen_range(0..n)];
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
        for (m, a) in means.iter_mut().zip(&acc) {
            m.push(a / n as f64);
        }
    }
    let tail = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(minutes);
    let mut upper = Vec::with_capacity(minutes);
    for mut m in means {
        m.sort_by(f64::total_cmp);
        lower.push(quantile(&m, tail));
        upper.push(quantile(&m, 1.0 - tail));
    }
    BootstrapBand { level, lower, upper }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassCurves {
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
}

/// Per-day cumulative curves (minutes `0..=max_w`) for every class; days
/// lacking any needed minute are skipped.
pub fn class_curves(
    inputs: &EventInputs<'_>,
    starts: &BTreeMap<NaiveDate, MinuteOfDay>,
    max_w: usize,
    include_first: bool,
) -> ClassCurves {
    let mut out = ClassCurves::default();
    let curve = |day, start| cumulative_curve(inputs.series, day, start, max_w, include_first).ok();
    for label in inputs.labels {
        match (class_of(label), label.jump_minute) {
            (Some(SampleClass::Positive), Some(start)) => out.positive.extend(curve(label.day, start)),
            (Some(SampleClass::Negative), Some(start)) => out.negative.extend(curve(label.day, start)),
            _ => {}
        }
    }
    for (&day, &start) in starts {
        out.reference.extend(curve(day, start));
    }
    out
}

pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let Some(len) = curves.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut mean = vec![0.0; len];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= curves.len() as f64);
    mean
}

#[derive(Clone, Debug, PartialEq)]
pub struct AverageCurves {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub reference: Vec<f64>,
}

pub fn average_curves(curves: &ClassCurves) -> AverageCurves {
    AverageCurves {
        positive: mean_curve(&curves.positive),
        negative: mean_curve(&curves.negative),
        reference: mean_curve(&curves.reference),
    }
}

/// Moments and central 95% range of a statistic across re-draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Spread {
            mean,
            sd,
            q025: quantile(&sorted, 0.025),
            q975: quantile(&sorted, 0.975),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RedrawSummary {
    pub iterations: usize,
    pub beta: [Spread; 4],
    pub p: [Spread; 4],
    pub fits: Vec<RegressionFit>,
}

/// Re-fits the regression with reference starts drawn from seeds
/// `base_seed + i`, keeping jump samples fixed. Parallel over iterations.
pub fn reference_redraws(
    inputs: &EventInputs<'_>,
    spec: WindowSpec,
    iterations: usize,
    base_seed: u64,
    errors: StandardErrors,
) -> Result<RedrawSummary, EventError> {
    let jumps = jump_samples(inputs, spec);
    let minutes = jump_minutes(inputs.labels);
    let days = no_jump_days(inputs.labels);
    let fits = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let starts = build_reference_starts(&days, &minutes, base_seed.wrapping_add(i as u64));
            let mut samples = jumps.samples.clone();
            samples.extend(reference_samples(inputs, &starts, spec).samples);
            ols_fit(&samples, errors)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let column = |f: &dyn Fn(&RegressionFit) -> f64| Spread::of(&fits.iter().map(f).collect::<Vec<_>>());
    let beta = std::array::from_fn(|j| column(&|fit: &RegressionFit| fit.beta[j]));
    let p = std::array::from_fn(|j| column(&|fit: &RegressionFit| fit.p[j]));
    Ok(RedrawSummary {
        iterations,
        beta,
        p,
        fits,
    })
}

/// Approximate ATM option return, in percent, from an IV effect and base
/// level both in percentage points.
pub fn economic_significance(beta_n: f64, base_vol: f64) -> f64 {
    100.0 * atm_relative_return(beta_n, base_vol)
}

/// Studied variable: ATM-IV or a labelled smile component, per maturity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariableKind {
    AtmIv,
    AtmPc,
    OtmCallPc,
    OtmPutPc,
}

impl fmt::Display for VariableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariableKind::AtmIv => "ATM-IV",
            VariableKind::AtmPc => "ATM-PC",
            VariableKind::OtmCallPc => "OTM-Call-PC",
            VariableKind::OtmPutPc => "OTM-Put-PC",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionRow {
    pub variable: VariableKind,
    pub maturity: Maturity,
    pub spec: WindowSpec,
    pub fit: RegressionFit,
}

pub fn write_regression_report<W: Write>(rows: &[RegressionRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variable", "maturity", "window", "include_first", "beta0", "betap", "betan", "betaiv", "p0", "pp",
        "pn", "piv", "N",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.variable.to_string(),
            r.maturity.label().to_string(),
            r.spec.window.to_string(),
            r.spec.include_first.to_string(),
        ];
        rec.extend(r.fit.beta.iter().map(|v| fmt_num(*v)));
        rec.extend(r.fit.p.iter().map(|v| fmt_num(*v)));
        rec.push(r.fit.n.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves<W: Write>(curves: &AverageCurves, band: &BootstrapBand, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["minute", "pos_mean", "neg_mean", "ref_mean", "band_lo", "band_hi"])?;
    let at = |v: &Vec<f64>, i: usize| v.get(i).map(|x| fmt_num(*x)).unwrap_or_default();
    for i in 0..curves.reference.len() {
        w.write_record([
            i.to_string(),
            at(&curves.positive, i),
            at(&curves.negative, i),
            at(&curves.reference, i),
            at(&band.lower, i),
            at(&band.upper, i),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn d(n: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2012, 1, 1).unwrap() + chrono::Days::new(u64::from(n))
    }

    fn hm(h: u16, m: u16) -> MinuteOfDay {
        MinuteOfDay::from_hm(h, m)
    }

    fn constant_series(day: NaiveDate, value: f64) -> HashMap<Stamp, f64> {
        (1..120)
            .map(|i| (Stamp::new(day, MinuteOfDay::from_session_index(i).unwrap()), value))
            .collect()
    }

    #[test]
    fn constant_change_term_counts() {
        let s = constant_series(d(0), 0.01);
        let inc = cumulative_delta(&s, d(0), hm(9, 45), 5, true).unwrap();
        let exc = cumulative_delta(&s, d(0), hm(9, 45), 5, false).unwrap();
        assert!((inc - 0.05).abs() < 1e-15);
        assert!((exc - 0.04).abs() < 1e-15);
    }

    #[test]
    fn impulse_excluded() {
        let mut s = constant_series(d(0), 0.0);
        s.insert(Stamp::new(d(0), hm(9, 45)), 0.7);
        assert_eq!(cumulative_delta(&s, d(0), hm(9, 45), 5, false).unwrap(), 0.0);
        assert_eq!(cumulative_delta(&s, d(0), hm(9, 45), 5, true).unwrap(), 0.7);
    }

    #[test]
    fn gap_inside_window() {
        let mut s = constant_series(d(0), 0.01);
        s.remove(&Stamp::new(d(0), hm(9, 48)));
        assert!(matches!(
            cumulative_delta(&s, d(0), hm(9, 45), 5, true),
            Err(EventError::MissingMinutes { .. })
        ));
    }

    proptest! {
        #[test]
        fn include_minus_exclude_is_jump_minute_change(
            values in proptest::collection::vec(-1.0f64..1.0, 119),
            start in 1usize..50,
            window in 1usize..60,
        ) {
            let s: HashMap<Stamp, f64> = values
                .iter()
                .enumerate()
                .map(|(i, v)| (Stamp::new(d(0), MinuteOfDay::from_session_index(i + 1).unwrap()), *v))
                .collect();
            let start = MinuteOfDay::from_session_index(start).unwrap();
            let inc = cumulative_delta(&s, d(0), start, window, true).unwrap();
            let exc = cumulative_delta(&s, d(0), start, window, false).unwrap();
            let jump = s[&Stamp::new(d(0), start)];
            prop_assert_eq!(inc, jump + exc);
            prop_assert!((inc - exc - jump).abs() <= f64::EPSILON * (inc.abs() + exc.abs()));
            let inc_curve = cumulative_curve(&s, d(0), start, window, true).unwrap();
            let exc_curve = cumulative_curve(&s, d(0), start, window, false).unwrap();
            prop_assert!((inc_curve[window] - inc).abs() <= 1e-14 * window as f64);
            prop_assert!((exc_curve[window] - exc).abs() <= 1e-14 * window as f64);
        }
    }

    #[test]
    fn point_mass_reference_starts() {
        let days: Vec<_> = (0..50).map(d).collect();
        let starts = build_reference_starts(&days, &[hm(9, 45); 7], 1);
        assert_eq!(starts.len(), 50);
        assert!(starts.values().all(|m| *m == hm(9, 45)));
    }

    #[test]
    fn reference_starts_follow_empirical_frequencies() {
        let days: Vec<_> = (0..100_000).map(d).collect();
        let starts = build_reference_starts(&days, &[hm(9, 40), hm(10, 10)], 9);
        let early = starts.values().filter(|m| **m == hm(9, 40)).count() as f64 / 1e5;
        assert!((early - 0.5).abs() < 0.01);
        assert_eq!(starts, build_reference_starts(&days, &[hm(9, 40), hm(10, 10)], 9));
    }

    fn sample(class: SampleClass, cum: f64, iv_bar: f64) -> EventSample {
        EventSample {
            day: d(0),
            start: hm(9, 45),
            class,
            cum,
            iv_bar,
        }
    }

    fn planted(n: usize, seed: u64) -> Vec<EventSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        (0..n)
            .map(|i| {
                let class = match i % 3 {
                    0 => SampleClass::Positive,
                    1 => SampleClass::Negative,
                    _ => SampleClass::Reference,
                };
                let iv_bar = rng.gen_range(15.0..25.0);
                let i_n = f64::from(u8::from(class == SampleClass::Negative));
                sample(class, 2.0 + 0.5 * i_n + noise.sample(&mut rng), iv_bar)
            })
            .collect()
    }

    #[test]
    fn planted_coefficient_recovery() {
        let samples = planted(600, 4);
        let fit = ols_fit(&samples, StandardErrors::Classical).unwrap();
        assert!((fit.beta[2] - 0.5).abs() < 0.01);
        assert!(fit.p[2] < 1e-10);
        assert_eq!(fit.n, 600);
        // Normal-equations oracle.
        let (x, y) = design_matrix(&samples);
        let oracle = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * y;
        for j in 0..4 {
            assert!((fit.beta[j] - oracle[j]).abs() <= 1e-9 * oracle[j].abs().max(1.0));
        }
        let hc = ols_fit(&samples, StandardErrors::Hc1).unwrap();
        assert_eq!(hc.beta, fit.beta);
        assert!(hc.p[2] < 1e-10);
    }

    #[test]
    fn zero_response_fit() {
        let samples: Vec<_> = planted(90, 5).into_iter().map(|s| EventSample { cum: 0.0, ..s }).collect();
        let fit = ols_fit(&samples, StandardErrors::Classical).unwrap();
        assert!(fit.beta.iter().all(|b| b.abs() < 1e-12));
        assert_eq!(fit.r_squared, 0.0);
        assert!(fit.p.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn missing_class_is_rank_deficient() {
        let samples: Vec<_> = (0..40)
            .map(|i| sample(if i % 2 == 0 { SampleClass::Positive } else { SampleClass::Reference }, i as f64, 20.0 + i as f64))
            .collect();
        assert_eq!(ols_fit(&samples, StandardErrors::Classical), Err(EventError::RankDeficientDesign));
    }

    #[test]
    fn opposite_responses_give_opposite_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<_> = planted(300, 6)
            .into_iter()
            .map(|s| {
                let effect = match s.class {
                    SampleClass::Positive => -0.44,
                    SampleClass::Negative => 0.47,
                    SampleClass::Reference => 0.0,
                };
                let z: f64 = StandardNormal.sample(&mut rng);
                EventSample {
                    cum: effect + 0.1 * z,
                    ..s
                }
            })
            .collect();
        let fit = ols_fit(&samples, StandardErrors::Classical).unwrap();
        assert!(fit.beta[1] < 0.0 && fit.beta[2] > 0.0);
    }

    fn ks_uniform(mut p: Vec<f64>) -> f64 {
        p.sort_by(f64::total_cmp);
        let n = p.len() as f64;
        p.iter()
            .enumerate()
            .map(|(i, v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn permutation_null_p_values_are_uniform() {
        let base = planted(300, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut classes: Vec<SampleClass> = base.iter().map(|s| s.class).collect();
        let mut pp = Vec::new();
        let mut pn = Vec::new();
        for _ in 0..1000 {
            rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng);
            let permuted: Vec<_> = base
                .iter()
                .zip(&classes)
                .map(|(s, c)| EventSample { class: *c, ..*s })
                .collect();
            let fit = ols_fit(&permuted, StandardErrors::Classical).unwrap();
            pp.push(fit.p[1]);
            pn.push(fit.p[2]);
        }
        let (kp, kn) = (ks_uniform(pp), ks_uniform(pn));
        assert!(kp < 0.05 && kn < 0.05, "KS {kp} {kn}");
    }

    #[test]
    fn identical_curves_zero_width_band() {
        let curves = vec![vec![0.0, 0.3, 0.5]; 40];
        let band = bootstrap_band(&curves, 500, 0.9, 1);
        assert_eq!(band.upper, band.lower);
        for (got, want) in band.lower.iter().zip([0.0, 0.3, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn band_matches_normal_theory_and_nests() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let curves: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![0.0, z]
            })
            .collect();
        let b90 = bootstrap_band(&curves, 7000, 0.90, 3);
        let b95 = bootstrap_band(&curves, 7000, 0.95, 3);
        let mean = mean_curve(&curves)[1];
        let sd = (curves.iter().map(|c| (c[1] - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
        let half = (b90.upper[1] - b90.lower[1]) / 2.0;
        let target = 1.645 * sd / 20.0;
        assert!(((half - target) / target).abs() < 0.1);
        assert!(b95.lower[1] <= b90.lower[1] && b95.upper[1] >= b90.upper[1]);
        assert_eq!(b90, bootstrap_band(&curves, 7000, 0.90, 3));
    }

    #[test]
    fn single_day_curves() {
        let s = constant_series(d(0), 0.02);
        let curve = cumulative_curve(&s, d(0), hm(9, 40), 60, true).unwrap();
        let avg = mean_curve(std::slice::from_ref(&curve));
        assert_eq!(avg, curve);
        assert!((curve[60] - 1.2).abs() < 1e-12);
        let exc = cumulative_curve(&s, d(0), hm(9, 40), 60, false).unwrap();
        assert_eq!(exc[1], 0.0);
        assert!((exc[60] - 1.18).abs() < 1e-12);
    }

    #[test]
    fn quantile_type_seven() {
        let data = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&data, 0.0), 1.0);
        assert_eq!(quantile(&data, 1.0), 4.0);
        assert!((quantile(&data, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn economic_significance_values() {
        assert!((economic_significance(0.218, 20.0) - 1.09).abs() < 1e-12);
        assert!((economic_significance(0.218, 15.0) - 1.453_333_333_333_333).abs() < 1e-12);
        assert_eq!(economic_significance(0.0, 17.0), 0.0);
    }

    fn labelled_inputs() -> (Vec<DayLabel>, HashMap<Stamp, f64>, BTreeMap<NaiveDate, f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut labels = Vec::new();
        let mut series = HashMap::new();
        let mut iv_bar = BTreeMap::new();
        for n in 0..200 {
            let day = d(n);
            let class = match n % 4 {
                0 => DayClass::PositiveJump,
                1 => DayClass::NegativeJump,
                _ => DayClass::NoJump,
            };
            let jump_minute = (class != DayClass::NoJump).then(|| MinuteOfDay::from_session_index(rng.gen_range(1..60)).unwrap());
            labels.push(DayLabel {
                day,
                class,
                jump_minute,
                reason: None,
            });
            for i in 1..130 {
                let z: f64 = StandardNormal.sample(&mut rng);
                series.insert(Stamp::new(day, MinuteOfDay::from_session_index(i).unwrap()), 0.05 * z);
            }
            iv_bar.insert(day, rng.gen_range(15.0..25.0));
        }
        (labels, series, iv_bar)
    }

    #[test]
    fn redraws_are_reproducible() {
        let (labels, series, iv_bar) = labelled_inputs();
        let inputs = EventInputs {
            labels: &labels,
            series: &series,
            iv_bar: &iv_bar,
        };
        let spec = WindowSpec {
            window: 30,
            include_first: false,
        };
        let a = reference_redraws(&inputs, spec, 50, 1, StandardErrors::Classical).unwrap();
        let b = reference_redraws(&inputs, spec, 50, 1, StandardErrors::Classical).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fits.len(), 50);
        let starts = build_reference_starts(&no_jump_days(&labels), &jump_minutes(&labels), 1);
        let first = ols_fit(&build_samples(&inputs, &starts, spec).samples, StandardErrors::Classical).unwrap();
        assert_eq!(a.fits[0], first);
    }

    #[test]
    fn report_layouts() {
        let fit = ols_fit(&planted(60, 1), StandardErrors::Classical).unwrap();
        let mut buf = Vec::new();
        write_regression_report(
            &[RegressionRow {
                variable: VariableKind::AtmIv,
                maturity: Maturity::ThreeMonth,
                spec: WindowSpec {
                    window: 5,
                    include_first: false,
                },
                fit,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variable,maturity,window,include_first,beta0,betap,betan,betaiv,p0,pp,pn,piv,N\nATM-IV,3m,5,false,"));
        assert!(text.trim_end().ends_with(",60"));
    }
}
