//! Nonparametric return-jump detection on minute log-returns (Lee-Mykland
//! statistic scaled by local bipower variation) and per-morning labels.
//!
//! Returns live on the session grid: slot 0 of each day holds the overnight
//! close-to-open return, slots 1..405 the intraday one-minute returns.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

use crate::marketdata::{fmt_num, format_date, parse_date, DayPrices, MinuteOfDay, SESSION_MINUTES};

#[derive(Debug, Error)]
pub enum JumpError {
    #[error("series of {len} returns is too short for a local window of {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("invalid jump test configuration: {0}")]
    InvalidConfig(String),
    #[error("report line {line}: {message}")]
    Report { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpTestConfig {
    /// Local-volatility window length in returns.
    pub window: usize,
    /// Significance level of the extreme-value test.
    pub alpha: f64,
    /// Jumps after this minute are ignored when labelling mornings.
    pub cutoff: MinuteOfDay,
}

impl Default for JumpTestConfig {
    fn default() -> Self {
        JumpTestConfig {
            window: 270,
            alpha: 0.01,
            cutoff: MinuteOfDay::from_hm(10, 30),
        }
    }
}

impl JumpTestConfig {
    pub fn validate(&self) -> Result<(), JumpError> {
        if self.window < 3 {
            return Err(JumpError::InvalidConfig(format!("window {} < 3", self.window)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(JumpError::InvalidConfig(format!("alpha {} not in (0,1)", self.alpha)));
        }
        if !self.cutoff.in_session() {
            return Err(JumpError::InvalidConfig(format!("cutoff {} outside session", self.cutoff)));
        }
        Ok(())
    }
}

/// Day-major log returns, `SESSION_MINUTES` slots per day.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnSeries {
    pub days: Vec<NaiveDate>,
    pub returns: Vec<Option<f64>>,
}

impl ReturnSeries {
    /// Builds returns from gridded prices. Consecutive entries of `days` are
    /// treated as consecutive trading days; the overnight return of the first
    /// day is unavailable.
    pub fn from_day_prices(days: &[DayPrices]) -> Self {
        let mut returns = Vec::with_capacity(days.len() * SESSION_MINUTES);
        let mut prev_close: Option<f64> = None;
        for d in days {
            let log_ret = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => Some((b / a).ln()),
                _ => None,
            };
            returns.push(log_ret(prev_close, d.prices[0]));
            for i in 1..SESSION_MINUTES {
                returns.push(log_ret(d.prices[i - 1], d.prices[i]));
            }
            prev_close = d.prices[SESSION_MINUTES - 1];
        }
        ReturnSeries {
            days: days.iter().map(|d| d.day).collect(),
            returns,
        }
    }

    pub fn day_returns(&self, day_index: usize) -> &[Option<f64>] {
        &self.returns[day_index * SESSION_MINUTES..(day_index + 1) * SESSION_MINUTES]
    }
}

/// Statistics `L(i) = r_i / sigma_hat(i)` aligned with a [`ReturnSeries`].
#[derive(Clone, Debug, PartialEq)]
pub struct JumpStatistics {
    pub days: Vec<NaiveDate>,
    pub day_len: usize,
    pub values: Vec<Option<f64>>,
}

/// Lee-Mykland statistics over a day-major series with `day_len` slots per day.
///
/// `sigma_hat(i)^2 = (1/(K-2)) * sum |r_j| |r_{j-1}|` over the `K-2` most recent
/// usable products before `i`. Products involving a missing return are
/// skipped, but the window never reaches back past the start of the previous
/// day; without enough products, or with `sigma_hat = 0`, `L(i)` is missing.
pub fn lee_mykland_statistics(
    returns: &[Option<f64>],
    window: usize,
    day_len: usize,
) -> Result<Vec<Option<f64>>, JumpError> {
    if window < 3 {
        return Err(JumpError::InvalidConfig(format!("window {window} < 3")));
    }
    if returns.len() < window + 2 {
        return Err(JumpError::SeriesTooShort {
            len: returns.len(),
            window,
        });
    }
    let products_needed = window - 2;
    // Usable products: index j and |r_j||r_{j-1}|, with running sums.
    let mut product_index: Vec<usize> = Vec::new();
    let mut prefix: Vec<f64> = vec![0.0];
    let mut out = Vec::with_capacity(returns.len());
    for i in 0..returns.len() {
        // Products with j <= i - 1 are already in the list at this point.
        let count = product_index.len();
        let value = returns[i].and_then(|r| {
            if count < products_needed {
                return None;
            }
            let first = product_index[count - products_needed];
            let lookback_start = (i / day_len).saturating_sub(1) * day_len;
            if first - 1 < lookback_start {
                return None;
            }
            let variance = (prefix[count] - prefix[count - products_needed]) / products_needed as f64;
            (variance > 0.0).then(|| r / variance.sqrt())
        });
        out.push(value);
        if i >= 1 {
            if let (Some(a), Some(b)) = (returns[i], returns[i - 1]) {
                product_index.push(i);
                prefix.push(prefix.last().copied().unwrap_or(0.0) + a.abs() * b.abs());
            }
        }
    }
    Ok(out)
}

pub fn compute_statistics(series: &ReturnSeries, window: usize) -> Result<JumpStatistics, JumpError> {
    Ok(JumpStatistics {
        days: series.days.clone(),
        day_len: SESSION_MINUTES,
        values: lee_mykland_statistics(&series.returns, window, SESSION_MINUTES)?,
    })
}

/// Rejection threshold on `|L|` for `n` observations per day at level `alpha`:
/// `C_n + S_n * (-ln(-ln(1 - alpha)))`.
pub fn rejection_threshold(n: usize, alpha: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let ln_n = (n as f64).ln();
    let root = (2.0 * ln_n).sqrt();
    let c_n = root / c - (PI.ln() + ln_n.ln()) / (2.0 * c * root);
    let s_n = 1.0 / (c * root);
    let beta = -(-(1.0 - alpha).ln()).ln();
    c_n + s_n * beta
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Positive => "positive",
            Direction::Negative => "negative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    pub day: NaiveDate,
    pub minute: MinuteOfDay,
    pub direction: Direction,
    pub statistic: f64,
    pub overnight: bool,
}

pub fn detect_jumps(stats: &JumpStatistics, alpha: f64) -> Vec<JumpEvent> {
    let threshold = rejection_threshold(stats.day_len, alpha);
    stats
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let l = (*v)?;
            if l.abs() <= threshold {
                return None;
            }
            let slot = i % stats.day_len;
            Some(JumpEvent {
                day: stats.days[i / stats.day_len],
                minute: MinuteOfDay::from_session_index(slot)?,
                direction: if l > 0.0 {
                    Direction::Positive
                } else {
                    Direction::Negative
                },
                statistic: l,
                overnight: slot == 0,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DayClass {
    PositiveJump,
    NegativeJump,
    NoJump,
    Excluded,
}

impl DayClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DayClass::PositiveJump => "positive",
            DayClass::NegativeJump => "negative",
            DayClass::NoJump => "none",
            DayClass::Excluded => "excluded",
        }
    }
}

impl FromStr for DayClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(DayClass::PositiveJump),
            "negative" => Ok(DayClass::NegativeJump),
            "none" => Ok(DayClass::NoJump),
            "excluded" => Ok(DayClass::Excluded),
            other => Err(format!("unknown day class `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExclusionReason {
    /// More than one jump before the cutoff.
    Multiple,
    /// Gaps in the data the no-jump sample requires.
    Missing,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::Multiple => "multiple",
            ExclusionReason::Missing => "missing",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DayLabel {
    pub day: NaiveDate,
    pub class: DayClass,
    pub jump_minute: Option<MinuteOfDay>,
    pub reason: Option<ExclusionReason>,
}

/// Labels each morning.
///
/// `gaps` lists, per day, minutes whose data (prices, statistics or IVs) are
/// unavailable. A no-jump day must be gap-free on `[09:31, complete_until]`.
pub fn classify_days(
    days: &[NaiveDate],
    events: &[JumpEvent],
    gaps: &BTreeMap<NaiveDate, Vec<MinuteOfDay>>,
    cutoff: MinuteOfDay,
    complete_until: MinuteOfDay,
) -> Vec<DayLabel> {
    let mut morning: BTreeMap<NaiveDate, Vec<&JumpEvent>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.minute <= cutoff) {
        morning.entry(e.day).or_default().push(e);
    }
    days.iter()
        .map(|&day| {
            let jumps = morning.get(&day).map(Vec::as_slice).unwrap_or(&[]);
            match jumps {
                [single] => DayLabel {
                    day,
                    class: match single.direction {
                        Direction::Positive => DayClass::PositiveJump,
                        Direction::Negative => DayClass::NegativeJump,
                    },
                    jump_minute: Some(single.minute),
                    reason: None,
                },
                [] => {
                    let complete = gaps
                        .get(&day)
                        .is_none_or(|g| g.iter().all(|m| *m > complete_until));
                    if complete {
                        DayLabel {
                            day,
                            class: DayClass::NoJump,
                            jump_minute: None,
                            reason: None,
                        }
                    } else {
                        DayLabel {
                            day,
                            class: DayClass::Excluded,
                            jump_minute: None,
                            reason: Some(ExclusionReason::Missing),
                        }
                    }
                }
                _ => DayLabel {
                    day,
                    class: DayClass::Excluded,
                    jump_minute: None,
                    reason: Some(ExclusionReason::Multiple),
                },
            }
        })
        .collect()
}

/// Gap minutes per day on `[09:31, until]`: missing prices, plus minutes up
/// to the cutoff where the statistic could not be computed.
pub fn morning_gaps(
    prices: &[DayPrices],
    stats: &JumpStatistics,
    cutoff: MinuteOfDay,
    until: MinuteOfDay,
) -> BTreeMap<NaiveDate, Vec<MinuteOfDay>> {
    let mut out = BTreeMap::new();
    for (d, day) in prices.iter().enumerate() {
        let mut missing: BTreeSet<MinuteOfDay> = day
            .missing_minutes()
            .into_iter()
            .filter(|m| *m <= until)
            .collect();
        for slot in 0..stats.day_len {
            let Some(minute) = MinuteOfDay::from_session_index(slot) else {
                continue;
            };
            if minute > cutoff {
                break;
            }
            if stats.values[d * stats.day_len + slot].is_none() {
                missing.insert(minute);
            }
        }
        if !missing.is_empty() {
            out.insert(day.day, missing.into_iter().collect());
        }
    }
    out
}

pub fn write_jump_report<W: Write>(events: &[JumpEvent], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "minute", "direction", "L", "overnight"])?;
    for e in events {
        w.write_record([
            format_date(e.day),
            e.minute.to_string(),
            e.direction.as_str().to_string(),
            fmt_num(e.statistic),
            e.overnight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_label_report<W: Write>(labels: &[DayLabel], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "class", "jump_minute", "reason"])?;
    for l in labels {
        w.write_record([
            format_date(l.day),
            l.class.as_str().to_string(),
            l.jump_minute.map(|m| m.to_string()).unwrap_or_default(),
            l.reason.map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_label_report<R: Read>(input: R) -> Result<Vec<DayLabel>, JumpError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| JumpError::Report { line, message };
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let day = parse_date(field(0)).map_err(bad)?;
        let class: DayClass = field(1).parse().map_err(bad)?;
        let jump_minute = match field(2) {
            "" => None,
            m => Some(m.parse::<MinuteOfDay>().map_err(bad)?),
        };
        let reason = match field(3) {
            "" => None,
            "multiple" => Some(ExclusionReason::Multiple),
            "missing" => Some(ExclusionReason::Missing),
            other => return Err(bad(format!("unknown reason `{other}`"))),
        };
        labels.push(DayLabel {
            day,
            class,
            jump_minute,
            reason,
        });
    }
    Ok(labels)
}
