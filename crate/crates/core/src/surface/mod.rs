//! Per-minute implied-volatility surfaces and the binned smiles sliced from
//! them at fixed 3-, 6- and 9-month maturities.

mod tps;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

use crate::marketdata::{fmt_num, format_date, OptionQuote, Right, Stamp};
use crate::pricing::{implied_dividend_yield, implied_vol};

pub use tps::{fit_surface, Scaling, TpsFitter, TpsModel, EXTRAPOLATION_MARGIN};

/// Number of moneyness bins per smile.
pub const BIN_COUNT: usize = 10;
/// Lower edge of the analysed moneyness range.
pub const MONEYNESS_LO: f64 = 0.80;
pub const BIN_WIDTH: f64 = 0.05;
/// Averaging points per bin on the 0.01 grid.
pub const POINTS_PER_BIN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("cross-section unusable: {points} points over {maturities} maturities")]
    EmptyCrossSection { points: usize, maturities: usize },
    #[error("singular spline system: {0}")]
    SingularSystem(String),
    #[error("({moneyness}, {maturity}) lies outside the fitted knot hull")]
    ExtrapolationOutOfRange { moneyness: f64, maturity: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IvPoint {
    pub moneyness: f64,
    pub maturity: f64,
    pub iv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Maturity {
    ThreeMonth,
    SixMonth,
    NineMonth,
}

impl Maturity {
    pub const ALL: [Maturity; 3] = [Maturity::ThreeMonth, Maturity::SixMonth, Maturity::NineMonth];

    pub fn years(self) -> f64 {
        match self {
            Maturity::ThreeMonth => 0.25,
            Maturity::SixMonth => 0.50,
            Maturity::NineMonth => 0.75,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Maturity::ThreeMonth => "3m",
            Maturity::SixMonth => "6m",
            Maturity::NineMonth => "9m",
        }
    }
}

impl fmt::Display for Maturity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Maturity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "3m" => Ok(Maturity::ThreeMonth),
            "6m" => Ok(Maturity::SixMonth),
            "9m" => Ok(Maturity::NineMonth),
            other => Err(format!("unknown maturity `{other}` (expected 3m, 6m or 9m)")),
        }
    }
}

/// Lower edges of the ten moneyness bins, `0.80, 0.85, ..., 1.25`.
pub fn bin_lower_edges() -> [f64; BIN_COUNT] {
    std::array::from_fn(|k| (800 + 50 * k) as f64 / 1000.0)
}

/// Centre moneyness of each bin.
pub fn bin_centers() -> [f64; BIN_COUNT] {
    std::array::from_fn(|k| (825 + 50 * k) as f64 / 1000.0)
}

/// The 0.01-spaced averaging points strictly inside bin `k`.
pub fn bin_grid(k: usize) -> [f64; POINTS_PER_BIN] {
    std::array::from_fn(|j| (805 + 50 * k + 10 * j) as f64 / 1000.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceConfig {
    /// Spline smoothing; 0 interpolates.
    pub lambda: f64,
    /// Half-width of the moneyness band where puts and calls overlap.
    pub atm_band: f64,
    pub min_points: usize,
    pub min_maturities: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            lambda: 1e-6,
            atm_band: 0.005,
            min_points: 12,
            min_maturities: 3,
        }
    }
}

/// Usable points of one cross-section plus the count lost to inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSection {
    pub points: Vec<IvPoint>,
    pub dropped: usize,
}

/// Dividend yields per expiry, solved by parity at the strike nearest spot.
pub type DividendYields = BTreeMap<NaiveDate, f64>;

/// Call mid, put mid, strike, maturity.
type ParityPair = (Option<f64>, Option<f64>, f64, f64);

/// Solves one yield per expiry from the call/put pair whose strike is
/// closest to `spot`. Expiries without a complete pair are skipped.
pub fn solve_dividend_yields(quotes: &[OptionQuote], spot: f64, rate: f64) -> DividendYields {
    let mut pairs: BTreeMap<(NaiveDate, u64), ParityPair> = BTreeMap::new();
    for q in quotes {
        let entry = pairs
            .entry((q.expiry, q.strike.to_bits()))
            .or_insert((None, None, q.strike, q.maturity()));
        match q.right {
            Right::Call => entry.0 = Some(q.mid()),
            Right::Put => entry.1 = Some(q.mid()),
        }
    }
    let mut best: BTreeMap<NaiveDate, (f64, f64)> = BTreeMap::new();
    for ((expiry, _), (call, put, strike, maturity)) in pairs {
        let (Some(c), Some(p)) = (call, put) else {
            continue;
        };
        let distance = (strike - spot).abs();
        if best.get(&expiry).is_some_and(|(d, _)| *d <= distance) {
            continue;
        }
        if let Ok(q) = implied_dividend_yield(c, p, spot, strike, maturity, rate) {
            best.insert(expiry, (distance, q));
        }
    }
    best.into_iter().map(|(e, (_, q))| (e, q)).collect()
}

/// Implied volatilities of the OTM and ATM quotes of one minute.
///
/// Puts contribute for `m <= 1 + band`, calls for `m >= 1 - band`. Quotes
/// whose expiry has no solved yield, or whose mid cannot be inverted, are
/// dropped and counted.
pub fn iv_points(
    quotes: &[OptionQuote],
    spot: f64,
    rate: f64,
    yields: &DividendYields,
    config: &SurfaceConfig,
) -> Result<CrossSection, SurfaceError> {
    let mut points = Vec::with_capacity(quotes.len());
    let mut dropped = 0;
    for q in quotes {
        let m = q.strike / spot;
        let usable = match q.right {
            Right::Put => m <= 1.0 + config.atm_band,
            Right::Call => m >= 1.0 - config.atm_band,
        };
        if !usable {
            continue;
        }
        let tau = q.maturity();
        let Some(&dividend) = yields.get(&q.expiry) else {
            dropped += 1;
            continue;
        };
        match implied_vol(q.mid(), spot, q.strike, tau, rate, dividend, q.right) {
            Ok(iv) => points.push(IvPoint {
                moneyness: m,
                maturity: tau,
                iv,
            }),
            Err(_) => dropped += 1,
        }
    }
    let mut taus: Vec<f64> = points.iter().map(|p| p.maturity).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    if points.len() < config.min_points || taus.len() < config.min_maturities {
        return Err(SurfaceError::EmptyCrossSection {
            points: points.len(),
            maturities: taus.len(),
        });
    }
    Ok(CrossSection { points, dropped })
}

pub fn eval_surface(model: &TpsModel, moneyness: f64, maturity: f64) -> Result<f64, SurfaceError> {
    model.eval(moneyness, maturity)
}

/// One maturity slice of a fitted surface: ten bin averages plus the
/// at-the-money (m = 1) value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmileSample {
    pub stamp: Stamp,
    pub maturity: Maturity,
    pub bins: [f64; BIN_COUNT],
    pub atm: f64,
}

fn usable(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Slices the surface at one maturity. Any extrapolation or nonpositive
/// value marks the sample missing.
pub fn extract_smile(model: &TpsModel, stamp: Stamp, maturity: Maturity) -> Option<SmileSample> {
    let tau = maturity.years();
    let mut bins = [0.0; BIN_COUNT];
    for (k, bin) in bins.iter_mut().enumerate() {
        let mut sum = 0.0;
        for m in bin_grid(k) {
            sum += model.eval(m, tau).ok()?;
        }
        *bin = sum / POINTS_PER_BIN as f64;
    }
    let atm = model.eval(1.0, tau).ok()?;
    (bins.iter().all(|&b| usable(b)) && usable(atm)).then_some(SmileSample {
        stamp,
        maturity,
        bins,
        atm,
    })
}

pub fn extract_smiles(
    model: &TpsModel,
    stamp: Stamp,
    maturities: &[Maturity],
) -> Vec<(Maturity, Option<SmileSample>)> {
    maturities
        .iter()
        .map(|&mat| (mat, extract_smile(model, stamp, mat)))
        .collect()
}

/// At-the-money value only; bins are left as NaN so that smile-based
/// consumers skip the sample. Much cheaper than [`extract_smile`].
pub fn extract_atm(model: &TpsModel, stamp: Stamp, maturity: Maturity) -> Option<SmileSample> {
    let atm = model.eval(1.0, maturity.years()).ok()?;
    usable(atm).then_some(SmileSample {
        stamp,
        maturity,
        bins: [f64::NAN; BIN_COUNT],
        atm,
    })
}

/// Writes `day,minute,maturity,bin_lo,iv` rows; ATM-only samples are skipped.
pub fn write_smile_dump<W: Write>(samples: &[SmileSample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "minute", "maturity", "bin_lo", "iv"])?;
    let edges = bin_lower_edges();
    for s in samples.iter().filter(|s| s.bins.iter().all(|v| v.is_finite())) {
        for (lo, iv) in edges.iter().zip(&s.bins) {
            w.write_record([
                format_date(s.stamp.day),
                s.stamp.minute.to_string(),
                s.maturity.label().to_string(),
                fmt_num(*lo),
                fmt_num(*iv),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `day,minute,maturity,iv` rows of the at-the-money values.
pub fn write_atm_dump<W: Write>(samples: &[SmileSample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "minute", "maturity", "iv"])?;
    for s in samples {
        w.write_record([
            format_date(s.stamp.day),
            s.stamp.minute.to_string(),
            s.maturity.label().to_string(),
            fmt_num(s.atm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("dump line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("dump header {found:?} does not match {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), DumpError> {
    let found: Vec<String> = found.iter().map(|h| h.trim().to_string()).collect();
    if found != expected {
        return Err(DumpError::Header {
            found,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

fn dump_key(rec: &csv::StringRecord) -> Result<((Stamp, Maturity), u64), DumpError> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let bad = |message: String| DumpError::Malformed { line, message };
    let field = |i: usize| rec.get(i).unwrap_or("").trim();
    let day = crate::marketdata::parse_date(field(0)).map_err(bad)?;
    let minute = field(1).parse().map_err(bad)?;
    let maturity = field(2).parse().map_err(bad)?;
    Ok(((Stamp::new(day, minute), maturity), line))
}

fn dump_value(rec: &csv::StringRecord, i: usize, line: u64) -> Result<f64, DumpError> {
    let raw = rec.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| DumpError::Malformed {
        line,
        message: format!("bad number `{raw}`"),
    })
}

/// Reassembles samples from the smile and ATM dumps. A stamp present in
/// only one file keeps NaN for the other part.
pub fn read_smile_dumps<R1: Read, R2: Read>(smiles: R1, atm: R2) -> Result<Vec<SmileSample>, DumpError> {
    let mut acc: BTreeMap<(Stamp, Maturity), SmileSample> = BTreeMap::new();
    let blank = |(stamp, maturity): (Stamp, Maturity)| SmileSample {
        stamp,
        maturity,
        bins: [f64::NAN; BIN_COUNT],
        atm: f64::NAN,
    };
    let edges = bin_lower_edges();
    let mut rdr = csv::Reader::from_reader(smiles);
    check_header(rdr.headers()?, &["day", "minute", "maturity", "bin_lo", "iv"])?;
    for rec in rdr.records() {
        let rec = rec?;
        let (key, line) = dump_key(&rec)?;
        let lo = dump_value(&rec, 3, line)?;
        let k = edges.iter().position(|e| (e - lo).abs() < 1e-9).ok_or(DumpError::Malformed {
            line,
            message: format!("unknown bin edge {lo}"),
        })?;
        acc.entry(key).or_insert_with(|| blank(key)).bins[k] = dump_value(&rec, 4, line)?;
    }
    let mut rdr = csv::Reader::from_reader(atm);
    check_header(rdr.headers()?, &["day", "minute", "maturity", "iv"])?;
    for rec in rdr.records() {
        let rec = rec?;
        let (key, line) = dump_key(&rec)?;
        acc.entry(key).or_insert_with(|| blank(key)).atm = dump_value(&rec, 3, line)?;
    }
    Ok(acc.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::MinuteOfDay;
    use crate::pricing::{bs_price, BsInputs};

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2010, 12, 29).unwrap()
    }

    fn stamp() -> Stamp {
        Stamp::new(day(), MinuteOfDay::from_hm(11, 0))
    }

    /// Parity-exact quotes for both rights on a strike ladder and three expiries.
    fn synthetic_quotes(spot: f64, rate: f64, dividend: f64, vol: impl Fn(f64, f64) -> f64) -> Vec<OptionQuote> {
        let mut out = Vec::new();
        for days in [91i64, 183, 274] {
            let expiry = day() + chrono::Duration::days(days);
            let tau = days as f64 / 365.0;
            for i in 0..=24 {
                let m = 0.75 + 0.025 * i as f64;
                let strike = spot * m;
                for right in [Right::Call, Right::Put] {
                    let price = bs_price(&BsInputs {
                        spot,
                        strike,
                        maturity: tau,
                        rate,
                        dividend,
                        vol: vol(m, tau),
                        right,
                    });
                    out.push(OptionQuote {
                        stamp: stamp(),
                        expiry,
                        strike,
                        right,
                        bid: price,
                        ask: price,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn flat_vol_cross_section_inverts_exactly() {
        let quotes = synthetic_quotes(1260.0, 0.01, 0.02, |_, _| 0.2);
        let yields = solve_dividend_yields(&quotes, 1260.0, 0.01);
        assert_eq!(yields.len(), 3);
        for q in yields.values() {
            assert!((q - 0.02).abs() < 1e-12);
        }
        let cs = iv_points(&quotes, 1260.0, 0.01, &yields, &SurfaceConfig::default()).unwrap();
        assert_eq!(cs.dropped, 0);
        // 25 strikes, the ATM strike contributes a put and a call.
        assert_eq!(cs.points.len(), 3 * 26);
        for p in &cs.points {
            assert!((p.iv - 0.2).abs() <= 1e-8, "{p:?}");
        }
    }

    #[test]
    fn itm_only_cross_section_is_empty() {
        let quotes: Vec<OptionQuote> = synthetic_quotes(1260.0, 0.01, 0.0, |_, _| 0.2)
            .into_iter()
            .filter(|q| {
                let m = q.strike / 1260.0;
                (q.right == Right::Call && m < 0.995) || (q.right == Right::Put && m > 1.005)
            })
            .collect();
        let yields: DividendYields = quotes.iter().map(|q| (q.expiry, 0.0)).collect();
        assert!(matches!(
            iv_points(&quotes, 1260.0, 0.01, &yields, &SurfaceConfig::default()),
            Err(SurfaceError::EmptyCrossSection { points: 0, .. })
        ));
    }

    #[test]
    fn sub_intrinsic_mid_is_dropped() {
        let mut quotes = synthetic_quotes(1260.0, 0.01, 0.0, |_, _| 0.2);
        let yields = solve_dividend_yields(&quotes, 1260.0, 0.01);
        let idx = quotes
            .iter()
            .position(|q| q.right == Right::Put && q.strike < 1000.0)
            .unwrap();
        quotes[idx].bid = 0.0;
        quotes[idx].ask = 0.0;
        let cs = iv_points(&quotes, 1260.0, 0.01, &yields, &SurfaceConfig::default()).unwrap();
        assert_eq!(cs.dropped, 1);
    }

    fn plane_model(f: impl Fn(f64, f64) -> f64, tau_hi: f64) -> TpsModel {
        let mut pts = Vec::new();
        for i in 0..=24 {
            for j in 0..=4 {
                let m = 0.75 + 0.025 * i as f64;
                let t = 0.2 + (tau_hi - 0.2) * j as f64 / 4.0;
                pts.push(IvPoint {
                    moneyness: m,
                    maturity: t,
                    iv: f(m, t),
                });
            }
        }
        fit_surface(&pts, 1e-6).unwrap()
    }

    #[test]
    fn flat_surface_gives_flat_smiles() {
        let model = plane_model(|_, _| 0.2, 0.8);
        for (_, s) in extract_smiles(&model, stamp(), &Maturity::ALL) {
            let s = s.unwrap();
            for b in s.bins {
                assert!((b - 0.2).abs() < 1e-12);
            }
            assert!((s.atm - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_surface_bin_average() {
        let model = plane_model(|m, _| m, 0.8);
        let s = extract_smile(&model, stamp(), Maturity::ThreeMonth).unwrap();
        assert!((s.bins[0] - 0.825).abs() < 1e-9, "{}", s.bins[0]);
        assert!((s.bins[9] - 1.275).abs() < 1e-9);
    }

    #[test]
    fn short_maturity_coverage_drops_nine_month() {
        let model = plane_model(|_, _| 0.2, 0.6);
        let smiles = extract_smiles(&model, stamp(), &Maturity::ALL);
        assert!(smiles[0].1.is_some());
        assert!(smiles[1].1.is_some());
        assert!(smiles[2].1.is_none());
    }

    #[test]
    fn bin_grid_layout() {
        assert_eq!(bin_grid(0), [0.805, 0.815, 0.825, 0.835, 0.845]);
        assert_eq!(bin_lower_edges()[9], 1.25);
        assert_eq!(bin_grid(9)[4], 1.295);
    }

    #[test]
    fn surface_recovers_quadratic_smile() {
        let smile = |m: f64, _t: f64| 0.2 - 0.15 * (m - 1.0) + 0.3 * (m - 1.0).powi(2);
        let quotes = synthetic_quotes(1260.0, 0.01, 0.015, smile);
        let yields = solve_dividend_yields(&quotes, 1260.0, 0.01);
        let cs = iv_points(&quotes, 1260.0, 0.01, &yields, &SurfaceConfig::default()).unwrap();
        let model = fit_surface(&cs.points, 1e-6).unwrap();
        for mat in Maturity::ALL {
            for c in bin_centers() {
                let v = model.eval(c, mat.years()).unwrap();
                assert!((v - smile(c, 0.0)).abs() < 1e-3, "{mat} {c}: {v}");
            }
        }
    }

    #[test]
    fn dumps_round_trip() {
        let stamp = Stamp::new(day(), MinuteOfDay::from_hm(10, 1));
        let full = SmileSample {
            stamp,
            maturity: Maturity::SixMonth,
            bins: std::array::from_fn(|k| 0.2 + 0.001 * k as f64),
            atm: 0.2041,
        };
        let atm_only = SmileSample {
            stamp,
            maturity: Maturity::ThreeMonth,
            bins: [f64::NAN; BIN_COUNT],
            atm: 0.21,
        };
        let samples = vec![atm_only, full];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_smile_dump(&samples, &mut a).unwrap();
        write_atm_dump(&samples, &mut b).unwrap();
        let back = read_smile_dumps(a.as_slice(), b.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].stamp, full.stamp);
        assert_eq!(back[1].maturity, full.maturity);
        for (x, y) in back[1].bins.iter().zip(&full.bins) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(back[0].atm, 0.21);
        assert!(back[0].bins.iter().all(|v| v.is_nan()));
    }
}
