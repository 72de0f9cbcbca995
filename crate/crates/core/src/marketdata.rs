//! Minute-level market data: on-disk formats, validation and session alignment.
//!
//! Three comma-separated text tables are understood, each with a mandatory
//! header row:
//!
//! * underlying bars: `date,minute,price`
//! * option quotes:   `date,minute,expiry,strike,right,bid,ask`
//! * daily rates:     `date,rate`
//!
//! Dates are ISO `YYYY-MM-DD`, minutes are `HH:MM` exchange time. Missing
//! minutes stay missing: nothing is forward-filled.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

/// Number of one-minute stamps in a session (09:31 through 16:15 inclusive).
pub const SESSION_MINUTES: usize = 405;

const DATE_FMT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("bad header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: duplicate timestamp {stamp}")]
    DuplicateTimestamp { line: u64, stamp: Stamp },
    #[error("line {line}: non-monotone timestamp {stamp} within day")]
    NonMonotone { line: u64, stamp: Stamp },
    #[error("line {line}: nonpositive price {price}")]
    NonPositivePrice { line: u64, price: f64 },
    #[error("line {line}: crossed quote (bid {bid} > ask {ask})")]
    CrossedQuote { line: u64, bid: f64, ask: f64 },
    #[error("line {line}: unknown option right `{token}`")]
    UnknownRight { line: u64, token: String },
    #[error("line {line}: expiry {expiry} not after quote date {day}")]
    ExpiredQuote {
        line: u64,
        expiry: NaiveDate,
        day: NaiveDate,
    },
    #[error("line {line}: minute {minute} outside the 09:31-16:15 session")]
    OutsideSession { line: u64, minute: MinuteOfDay },
    #[error("no rate for trading day {0}")]
    MissingRate(NaiveDate),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MarketDataError>;

/// Minute of the trading day, stored as minutes after midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MinuteOfDay(u16);

impl MinuteOfDay {
    pub const SESSION_OPEN: MinuteOfDay = MinuteOfDay(9 * 60 + 31);
    pub const SESSION_CLOSE: MinuteOfDay = MinuteOfDay(16 * 60 + 15);

    pub const fn from_hm(hour: u16, minute: u16) -> Self {
        MinuteOfDay(hour * 60 + minute)
    }

    pub const fn minutes_since_midnight(self) -> u16 {
        self.0
    }

    pub fn hour(self) -> u16 {
        self.0 / 60
    }

    pub fn minute(self) -> u16 {
        self.0 % 60
    }

    /// Position on the session grid, `None` outside 09:31..=16:15.
    pub fn session_index(self) -> Option<usize> {
        if self < Self::SESSION_OPEN || self > Self::SESSION_CLOSE {
            None
        } else {
            Some((self.0 - Self::SESSION_OPEN.0) as usize)
        }
    }

    /// Inverse of [`session_index`](Self::session_index).
    pub fn from_session_index(index: usize) -> Option<Self> {
        (index < SESSION_MINUTES).then(|| MinuteOfDay(Self::SESSION_OPEN.0 + index as u16))
    }

    pub fn in_session(self) -> bool {
        self.session_index().is_some()
    }
}

impl fmt::Display for MinuteOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.hour(), self.minute())
    }
}

impl FromStr for MinuteOfDay {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (h, m) = s
            .split_once(':')
            .ok_or_else(|| format!("minute `{s}` is not HH:MM"))?;
        let h: u16 = h.parse().map_err(|_| format!("bad hour in `{s}`"))?;
        let m: u16 = m.parse().map_err(|_| format!("bad minute in `{s}`"))?;
        if h > 23 || m > 59 {
            return Err(format!("minute `{s}` out of range"));
        }
        Ok(MinuteOfDay::from_hm(h, m))
    }
}

/// Trading day plus minute of day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stamp {
    pub day: NaiveDate,
    pub minute: MinuteOfDay,
}

impl Stamp {
    pub fn new(day: NaiveDate, minute: MinuteOfDay) -> Self {
        Stamp { day, minute }
    }
}

impl fmt::Display for Stamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.day.format(DATE_FMT), self.minute)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinuteBar {
    pub stamp: Stamp,
    pub price: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Right {
    Call,
    Put,
}

impl Right {
    pub fn as_str(self) -> &'static str {
        match self {
            Right::Call => "call",
            Right::Put => "put",
        }
    }
}

impl FromStr for Right {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "call" | "c" => Ok(Right::Call),
            "put" | "p" => Ok(Right::Put),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionQuote {
    pub stamp: Stamp,
    pub expiry: NaiveDate,
    pub strike: f64,
    pub right: Right,
    pub bid: f64,
    pub ask: f64,
}

impl OptionQuote {
    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }

    /// Time to expiry in years (actual/365 calendar days).
    pub fn maturity(&self) -> f64 {
        year_fraction(self.stamp.day, self.expiry)
    }
}

/// Actual/365 year fraction between two calendar dates.
pub fn year_fraction(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / 365.0
}

/// Continuously-compounded annual rate per calendar date.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateCurve {
    rates: BTreeMap<NaiveDate, f64>,
}

impl RateCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, day: NaiveDate, rate: f64) {
        self.rates.insert(day, rate);
    }

    pub fn rate(&self, day: NaiveDate) -> Result<f64> {
        self.rates
            .get(&day)
            .copied()
            .ok_or(MarketDataError::MissingRate(day))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        self.rates.iter().map(|(d, r)| (*d, *r))
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// The 405 one-minute stamps of one trading day.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionGrid {
    pub day: NaiveDate,
    pub minutes: Vec<MinuteOfDay>,
}

pub fn session_grid(day: NaiveDate) -> SessionGrid {
    SessionGrid {
        day,
        minutes: (0..SESSION_MINUTES)
            .filter_map(MinuteOfDay::from_session_index)
            .collect(),
    }
}

/// Formats a float with at most 12 significant digits, shortest form.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    let magnitude = rounded.abs();
    if magnitude != 0.0 && !(1e-5..1e16).contains(&magnitude) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

pub fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), DATE_FMT).map_err(|e| format!("bad date `{s}`: {e}"))
}

pub fn format_date(day: NaiveDate) -> String {
    day.format(DATE_FMT).to_string()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| MarketDataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn reader<R: Read>(input: R, expected: &[&str]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let found: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(MarketDataError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(rdr)
}

struct Row {
    line: u64,
    record: csv::StringRecord,
}

impl Row {
    fn malformed(&self, message: impl Into<String>) -> MarketDataError {
        MarketDataError::Malformed {
            line: self.line,
            message: message.into(),
        }
    }

    fn field(&self, i: usize) -> Result<&str> {
        self.record
            .get(i)
            .ok_or_else(|| self.malformed(format!("missing column {}", i + 1)))
    }

    fn date(&self, i: usize) -> Result<NaiveDate> {
        parse_date(self.field(i)?).map_err(|m| self.malformed(m))
    }

    fn minute(&self, i: usize) -> Result<MinuteOfDay> {
        let minute: MinuteOfDay = self.field(i)?.parse().map_err(|m: String| self.malformed(m))?;
        if !minute.in_session() {
            return Err(MarketDataError::OutsideSession {
                line: self.line,
                minute,
            });
        }
        Ok(minute)
    }

    fn number(&self, i: usize) -> Result<f64> {
        let raw = self.field(i)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.malformed(format!("bad number `{raw}`"))),
        }
    }
}

fn rows<R: Read>(rdr: &mut csv::Reader<R>, width: usize) -> impl Iterator<Item = Result<Row>> + '_ {
    rdr.records().map(move |rec| {
        let record = rec?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(MarketDataError::Malformed {
                line,
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        Ok(Row { line, record })
    })
}

/// Per-day ordering check shared by the bar and quote readers.
#[derive(Default)]
struct MonotoneCheck {
    last: HashMap<NaiveDate, MinuteOfDay>,
}

impl MonotoneCheck {
    fn bars(&mut self, line: u64, stamp: Stamp) -> Result<()> {
        match self.last.insert(stamp.day, stamp.minute) {
            Some(prev) if prev == stamp.minute => {
                Err(MarketDataError::DuplicateTimestamp { line, stamp })
            }
            Some(prev) if prev > stamp.minute => Err(MarketDataError::NonMonotone { line, stamp }),
            _ => Ok(()),
        }
    }

    /// Quotes share minutes, so only decreasing minutes are rejected.
    fn quotes(&mut self, line: u64, stamp: Stamp) -> Result<()> {
        match self.last.insert(stamp.day, stamp.minute) {
            Some(prev) if prev > stamp.minute => Err(MarketDataError::NonMonotone { line, stamp }),
            _ => Ok(()),
        }
    }
}

pub fn read_underlying<R: Read>(input: R) -> Result<Vec<MinuteBar>> {
    let mut rdr = reader(input, &["date", "minute", "price"])?;
    let mut check = MonotoneCheck::default();
    let mut bars = Vec::new();
    for row in rows(&mut rdr, 3) {
        let row = row?;
        let stamp = Stamp::new(row.date(0)?, row.minute(1)?);
        let price = row.number(2)?;
        if price <= 0.0 {
            return Err(MarketDataError::NonPositivePrice {
                line: row.line,
                price,
            });
        }
        check.bars(row.line, stamp)?;
        bars.push(MinuteBar { stamp, price });
    }
    bars.sort_by_key(|b| b.stamp);
    Ok(bars)
}

pub fn parse_underlying(path: &Path) -> Result<Vec<MinuteBar>> {
    read_underlying(open(path)?)
}

pub fn read_option_quotes<R: Read>(input: R) -> Result<Vec<OptionQuote>> {
    let mut rdr = reader(
        input,
        &["date", "minute", "expiry", "strike", "right", "bid", "ask"],
    )?;
    let mut check = MonotoneCheck::default();
    let mut quotes = Vec::new();
    for row in rows(&mut rdr, 7) {
        let row = row?;
        let stamp = Stamp::new(row.date(0)?, row.minute(1)?);
        let expiry = row.date(2)?;
        let strike = row.number(3)?;
        let token = row.field(4)?;
        let right: Right = token.parse().map_err(|_| MarketDataError::UnknownRight {
            line: row.line,
            token: token.to_string(),
        })?;
        let bid = row.number(5)?;
        let ask = row.number(6)?;
        if strike <= 0.0 {
            return Err(row.malformed(format!("nonpositive strike {strike}")));
        }
        if bid < 0.0 {
            return Err(row.malformed(format!("negative bid {bid}")));
        }
        if bid > ask {
            return Err(MarketDataError::CrossedQuote {
                line: row.line,
                bid,
                ask,
            });
        }
        if expiry <= stamp.day {
            return Err(MarketDataError::ExpiredQuote {
                line: row.line,
                expiry,
                day: stamp.day,
            });
        }
        check.quotes(row.line, stamp)?;
        quotes.push(OptionQuote {
            stamp,
            expiry,
            strike,
            right,
            bid,
            ask,
        });
    }
    quotes.sort_by_key(|q| q.stamp);
    Ok(quotes)
}

pub fn parse_option_quotes(path: &Path) -> Result<Vec<OptionQuote>> {
    read_option_quotes(open(path)?)
}

pub fn read_rates<R: Read>(input: R) -> Result<RateCurve> {
    let mut rdr = reader(input, &["date", "rate"])?;
    let mut curve = RateCurve::new();
    for row in rows(&mut rdr, 2) {
        let row = row?;
        let day = row.date(0)?;
        if curve.rates.contains_key(&day) {
            return Err(row.malformed(format!("duplicate rate for {}", format_date(day))));
        }
        curve.insert(day, row.number(1)?);
    }
    Ok(curve)
}

pub fn parse_rates(path: &Path) -> Result<RateCurve> {
    read_rates(open(path)?)
}

pub fn write_underlying<W: Write>(bars: &[MinuteBar], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "minute", "price"])?;
    for b in bars {
        w.write_record([
            format_date(b.stamp.day),
            b.stamp.minute.to_string(),
            fmt_num(b.price),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_option_quotes<W: Write>(quotes: &[OptionQuote], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    write_quote_header(&mut w)?;
    write_quote_rows(&mut w, quotes)?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_quote_header<W: Write>(w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(["date", "minute", "expiry", "strike", "right", "bid", "ask"])?;
    Ok(())
}

pub fn write_quote_rows<W: Write>(w: &mut csv::Writer<W>, quotes: &[OptionQuote]) -> Result<()> {
    for q in quotes {
        w.write_record([
            format_date(q.stamp.day),
            q.stamp.minute.to_string(),
            format_date(q.expiry),
            fmt_num(q.strike),
            q.right.as_str().to_string(),
            fmt_num(q.bid),
            fmt_num(q.ask),
        ])?;
    }
    Ok(())
}

pub fn write_rates<W: Write>(rates: &RateCurve, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "rate"])?;
    for (day, rate) in rates.iter() {
        w.write_record([format_date(day), fmt_num(rate)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Underlying prices of one day on the session grid; `None` marks a gap.
#[derive(Clone, Debug, PartialEq)]
pub struct DayPrices {
    pub day: NaiveDate,
    pub prices: Vec<Option<f64>>,
}

impl DayPrices {
    pub fn missing_minutes(&self) -> Vec<MinuteOfDay> {
        self.prices
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_none())
            .filter_map(|(i, _)| MinuteOfDay::from_session_index(i))
            .collect()
    }

    pub fn last_price(&self) -> Option<f64> {
        self.prices.iter().rev().find_map(|p| *p)
    }
}

/// Anything that can hand out the option cross-section at a stamp.
pub trait QuoteSource: Sync {
    fn quotes_at(&self, stamp: Stamp) -> Vec<OptionQuote>;
}

/// A loaded, validated dataset. Immutable after construction.
#[derive(Clone, Debug, Default)]
pub struct MarketData {
    bars: Vec<MinuteBar>,
    quotes: Vec<OptionQuote>,
    rates: RateCurve,
    quote_index: BTreeMap<Stamp, Range<usize>>,
}

impl MarketData {
    pub fn new(mut bars: Vec<MinuteBar>, mut quotes: Vec<OptionQuote>, rates: RateCurve) -> Self {
        bars.sort_by_key(|b| b.stamp);
        quotes.sort_by_key(|q| q.stamp);
        let mut quote_index = BTreeMap::new();
        let mut start = 0;
        for i in 1..=quotes.len() {
            if i == quotes.len() || quotes[i].stamp != quotes[start].stamp {
                quote_index.insert(quotes[start].stamp, start..i);
                start = i;
            }
        }
        MarketData {
            bars,
            quotes,
            rates,
            quote_index,
        }
    }

    pub fn load(underlying: &Path, options: &Path, rates: &Path) -> Result<Self> {
        Ok(Self::new(
            parse_underlying(underlying)?,
            parse_option_quotes(options)?,
            parse_rates(rates)?,
        ))
    }

    pub fn bars(&self) -> &[MinuteBar] {
        &self.bars
    }

    pub fn quotes(&self) -> &[OptionQuote] {
        &self.quotes
    }

    pub fn rates(&self) -> &RateCurve {
        &self.rates
    }

    /// Trading days present in the underlying data, ascending.
    pub fn days(&self) -> Vec<NaiveDate> {
        let set: BTreeSet<NaiveDate> = self.bars.iter().map(|b| b.stamp.day).collect();
        set.into_iter().collect()
    }

    pub fn day_prices(&self) -> Vec<DayPrices> {
        let mut out: Vec<DayPrices> = Vec::new();
        for bar in &self.bars {
            if out.last().map(|d| d.day) != Some(bar.stamp.day) {
                out.push(DayPrices {
                    day: bar.stamp.day,
                    prices: vec![None; SESSION_MINUTES],
                });
            }
            if let Some(i) = bar.stamp.minute.session_index() {
                out.last_mut().expect("pushed above").prices[i] = Some(bar.price);
            }
        }
        out
    }

    pub fn quote_stamps(&self) -> impl Iterator<Item = Stamp> + '_ {
        self.quote_index.keys().copied()
    }

    pub fn quote_slice(&self, stamp: Stamp) -> &[OptionQuote] {
        self.quote_index
            .get(&stamp)
            .map(|r| &self.quotes[r.clone()])
            .unwrap_or(&[])
    }

    /// Every trading day must carry a rate.
    pub fn check_rates(&self) -> Result<()> {
        for day in self.days() {
            self.rates.rate(day)?;
        }
        Ok(())
    }
}

impl QuoteSource for MarketData {
    fn quotes_at(&self, stamp: Stamp) -> Vec<OptionQuote> {
        self.quote_slice(stamp).to_vec()
    }
}
