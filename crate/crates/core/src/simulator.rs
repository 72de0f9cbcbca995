//! Synthetic minute market with planted jumps and a known IV response.
//!
//! The underlying follows Gaussian minute log-returns plus jumps. The smile is
//! quadratic in moneyness `m = K/S`, with level, skew and curvature drifting
//! as independent random walks within each day. After a jump of sign `s` the
//! whole smile shifts by `-s * (a0 + a1 * (1 - 2^(-t/h)))` vol points.
//! Option quotes are produced on demand at Black-Scholes prices of the true
//! IV, so the market never has to be held in memory.

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::marketdata::{
    self, fmt_num, format_date, year_fraction, DayPrices, MarketDataError, MinuteBar, MinuteOfDay,
    OptionQuote, QuoteSource, RateCurve, Right, Stamp, SESSION_MINUTES,
};
use crate::pricing::{bs_price, BsInputs};

/// Strike grid as multiples of the previous close.
pub const STRIKE_LO: f64 = 0.75;
pub const STRIKE_HI: f64 = 1.35;
pub const STRIKE_STEP: f64 = 0.025;
/// Calendar days to each listed expiry (about 3, 6 and 9 months).
pub const EXPIRY_DAYS: [u64; 3] = [91, 183, 274];
/// Floor on the true IV so that quotes stay invertible.
const MIN_TRUE_IV: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// IV response to a jump of one sign. `a0`, `a1` in vol points, `h` in
/// minutes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Response {
    pub a0: f64,
    pub a1: f64,
    pub h: f64,
}

impl Response {
    pub const NONE: Response = Response {
        a0: 0.0,
        a1: 0.0,
        h: 5.0,
    };
}

/// How jump times are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JumpSchedule {
    /// Independent arrivals with probability `intensity / 405` per minute.
    Poisson { intensity: f64 },
    /// Exactly one jump on `days` randomly chosen days (never the first),
    /// at a minute drawn uniformly from 09:32 to `latest`.
    Morning { days: usize, latest: MinuteOfDay },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub days: usize,
    pub seed: u64,
    pub start: NaiveDate,
    pub spot: f64,
    /// Annualized diffusion volatility.
    pub sigma: f64,
    pub schedule: JumpSchedule,
    /// Mean and sd of the absolute log-jump.
    pub jump_mean: f64,
    pub jump_sd: f64,
    pub positive_share: f64,
    /// Smile `level + skew (m-1) + curvature (m-1)^2`, decimals.
    pub level: f64,
    pub skew: f64,
    pub curvature: f64,
    /// Sd of the day-to-day level shift.
    pub level_dispersion: f64,
    /// Per-minute random-walk sd of level, skew and curvature.
    pub level_noise: f64,
    pub skew_noise: f64,
    pub curvature_noise: f64,
    pub positive: Response,
    pub negative: Response,
    /// Deterministic opening IV bump `amplitude * exp(-t / decay)`, vol points.
    pub opening_bump: f64,
    pub opening_decay: f64,
    pub rate: f64,
    pub dividend: f64,
    /// Price units. Options cheaper than this are not listed, so a positive
    /// spread thins the short-maturity call wing.
    pub half_spread: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            days: 250,
            seed: 1,
            start: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
            spot: 1000.0,
            sigma: 0.15,
            schedule: JumpSchedule::Poisson { intensity: 0.25 },
            jump_mean: 0.004,
            jump_sd: 0.001,
            positive_share: 0.5,
            level: 0.20,
            skew: -0.40,
            curvature: 0.60,
            level_dispersion: 0.02,
            level_noise: 2e-4,
            skew_noise: 5e-4,
            curvature_noise: 1e-3,
            positive: Response::NONE,
            negative: Response::NONE,
            opening_bump: 0.0,
            opening_decay: 10.0,
            rate: 0.01,
            dividend: 0.015,
            half_spread: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::ConfigInvalid(msg.to_string()));
        if self.days < 1 {
            return bad("days must be at least 1");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.spot > 0.0) {
            return bad("spot must be positive");
        }
        if !(self.positive.h > 0.0 && self.negative.h > 0.0) {
            return bad("response half-life must be positive");
        }
        if !(0.0..=1.0).contains(&self.positive_share) {
            return bad("positive_share must lie in [0, 1]");
        }
        if self.jump_sd < 0.0 || self.level_dispersion < 0.0 || self.half_spread < 0.0 {
            return bad("standard deviations and spreads must be nonnegative");
        }
        if self.level_noise < 0.0 || self.skew_noise < 0.0 || self.curvature_noise < 0.0 {
            return bad("noise levels must be nonnegative");
        }
        if !(self.level > 0.0) {
            return bad("IV level must be positive");
        }
        match self.schedule {
            JumpSchedule::Poisson { intensity } if !(intensity >= 0.0) => bad("jump intensity must be nonnegative"),
            JumpSchedule::Morning { days, .. } if days >= self.days => {
                bad("scheduled jump days must leave the first day free")
            }
            JumpSchedule::Morning { latest, .. } if latest.session_index().is_none_or(|i| i < 1) => {
                bad("latest scheduled jump minute must be after the open")
            }
            _ => Ok(()),
        }
    }

    pub fn response(&self, sign: f64) -> Response {
        if sign > 0.0 {
            self.positive
        } else {
            self.negative
        }
    }
}

/// IV shift, in vol points, `t` minutes after a jump of sign `sign`.
pub fn planted_response(t: f64, sign: f64, response: &Response) -> f64 {
    -sign * (response.a0 + response.a1 * (1.0 - (-t / response.h).exp2()))
}

/// A planted jump as recorded in the truth log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthJump {
    pub day: NaiveDate,
    pub minute: MinuteOfDay,
    pub sign: f64,
    pub log_jump: f64,
    pub response: Response,
}

/// Smile coefficients of one minute, decimals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmileState {
    pub level: f64,
    pub skew: f64,
    pub curvature: f64,
}

impl SmileState {
    pub fn iv(&self, moneyness: f64) -> f64 {
        let x = moneyness - 1.0;
        (self.level + self.skew * x + self.curvature * x * x).max(MIN_TRUE_IV)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayPath {
    pub day: NaiveDate,
    /// Close of the previous day; strikes are listed off this level.
    pub reference: f64,
    pub prices: Vec<f64>,
    pub smiles: Vec<SmileState>,
    pub jumps: Vec<TruthJump>,
}

impl DayPath {
    pub fn strikes(&self) -> Vec<f64> {
        strike_multiples().into_iter().map(|k| k * self.reference).collect()
    }
}

pub fn strike_multiples() -> Vec<f64> {
    let n = ((STRIKE_HI - STRIKE_LO) / STRIKE_STEP).round() as usize;
    (0..=n).map(|i| STRIKE_LO + STRIKE_STEP * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub config: SimConfig,
    pub paths: Vec<DayPath>,
}

/// Weekdays starting at `start` (rolled forward off weekends).
pub fn trading_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Random draws of one day, independent of every other day.
struct DayDraws {
    returns: Vec<f64>,
    smiles: Vec<SmileState>,
    jumps: Vec<(usize, f64, f64)>,
}

fn day_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_day(config: &SimConfig, index: usize, scheduled: bool) -> DayDraws {
    let mut rng = day_rng(config.seed, index as u64 + 1);
    let minute_sd = config.sigma / (252.0 * SESSION_MINUTES as f64).sqrt();
    let mut returns: Vec<f64> = (0..SESSION_MINUTES)
        .map(|_| minute_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let jump_size = Normal::new(config.jump_mean, config.jump_sd.max(0.0)).expect("validated sd");
    let draw_jump = |rng: &mut ChaCha8Rng| {
        let sign = if rng.gen_bool(config.positive_share) { 1.0 } else { -1.0 };
        (sign, sign * jump_size.sample(rng).abs())
    };
    let mut jumps = Vec::new();
    match config.schedule {
        JumpSchedule::Poisson { intensity } => {
            let p = (intensity / SESSION_MINUTES as f64).min(1.0);
            for slot in 0..SESSION_MINUTES {
                if rng.gen_bool(p) {
                    let (sign, size) = draw_jump(&mut rng);
                    jumps.push((slot, sign, size));
                }
            }
        }
        JumpSchedule::Morning { latest, .. } => {
            if scheduled {
                let last = latest.session_index().unwrap_or(1).max(1);
                let slot = rng.gen_range(1..=last);
                let (sign, size) = draw_jump(&mut rng);
                jumps.push((slot, sign, size));
            }
        }
    }
    for &(slot, _, size) in &jumps {
        returns[slot] += size;
    }

    let level = config.level + config.level_dispersion * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    let mut state = SmileState {
        level: level.max(MIN_TRUE_IV),
        skew: config.skew,
        curvature: config.curvature,
    };
    let mut smiles = Vec::with_capacity(SESSION_MINUTES);
    for slot in 0..SESSION_MINUTES {
        if slot > 0 {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            state.level += config.level_noise * z[0];
            state.skew += config.skew_noise * z[1];
            state.curvature += config.curvature_noise * z[2];
        }
        smiles.push(state);
    }
    DayDraws {
        returns,
        smiles,
        jumps,
    }
}

pub fn simulate_market(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let days = trading_days(config.start, config.days);
    let mut scheduled = vec![false; config.days];
    if let JumpSchedule::Morning { days: n, .. } = config.schedule {
        let mut rng = day_rng(config.seed, 0);
        let mut pool: Vec<usize> = (1..config.days).collect();
        for i in 0..n {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            scheduled[pool[i]] = true;
        }
    }
    let draws: Vec<DayDraws> = (0..config.days)
        .into_par_iter()
        .map(|i| draw_day(config, i, scheduled[i]))
        .collect();

    let mut paths = Vec::with_capacity(config.days);
    let mut close = config.spot;
    for (day, draw) in days.into_iter().zip(draws) {
        let reference = close;
        let mut price = reference;
        let prices: Vec<f64> = draw
            .returns
            .iter()
            .map(|r| {
                price *= r.exp();
                price
            })
            .collect();
        close = price;
        let jumps: Vec<TruthJump> = draw
            .jumps
            .iter()
            .filter_map(|&(slot, sign, log_jump)| {
                Some(TruthJump {
                    day,
                    minute: MinuteOfDay::from_session_index(slot)?,
                    sign,
                    log_jump,
                    response: config.response(sign),
                })
            })
            .collect();
        let smiles = draw
            .smiles
            .iter()
            .enumerate()
            .map(|(slot, s)| {
                let mut shift = config.opening_bump * (-(slot as f64) / config.opening_decay).exp();
                for &(jslot, sign, _) in &draw.jumps {
                    if slot >= jslot {
                        shift += planted_response((slot - jslot) as f64, sign, &config.response(sign));
                    }
                }
                SmileState {
                    level: s.level + shift / 100.0,
                    ..*s
                }
            })
            .collect();
        paths.push(DayPath {
            day,
            reference,
            prices,
            smiles,
            jumps,
        });
    }
    Ok(SimOutput {
        config: config.clone(),
        paths,
    })
}

impl SimOutput {
    pub fn days(&self) -> Vec<NaiveDate> {
        self.paths.iter().map(|p| p.day).collect()
    }

    pub fn day_prices(&self) -> Vec<DayPrices> {
        self.paths
            .iter()
            .map(|p| DayPrices {
                day: p.day,
                prices: p.prices.iter().map(|x| Some(*x)).collect(),
            })
            .collect()
    }

    pub fn bars(&self) -> Vec<MinuteBar> {
        self.paths
            .iter()
            .flat_map(|p| {
                p.prices.iter().enumerate().filter_map(move |(i, x)| {
                    Some(MinuteBar {
                        stamp: Stamp::new(p.day, MinuteOfDay::from_session_index(i)?),
                        price: *x,
                    })
                })
            })
            .collect()
    }

    pub fn rates(&self) -> RateCurve {
        let mut curve = RateCurve::new();
        for p in &self.paths {
            curve.insert(p.day, self.config.rate);
        }
        curve
    }

    pub fn truth(&self) -> Vec<TruthJump> {
        self.paths.iter().flat_map(|p| p.jumps.iter().copied()).collect()
    }

    fn path(&self, day: NaiveDate) -> Option<&DayPath> {
        self.paths
            .binary_search_by_key(&day, |p| p.day)
            .ok()
            .map(|i| &self.paths[i])
    }

    /// True smile coefficients at a stamp.
    pub fn smile_at(&self, stamp: Stamp) -> Option<SmileState> {
        let slot = stamp.minute.session_index()?;
        Some(self.path(stamp.day)?.smiles[slot])
    }

    pub fn spot_at(&self, stamp: Stamp) -> Option<f64> {
        let slot = stamp.minute.session_index()?;
        Some(self.path(stamp.day)?.prices[slot])
    }

    /// Theoretical (pre-spread) prices at a stamp, in quote layout.
    pub fn theoretical_quotes(&self, stamp: Stamp) -> Vec<(OptionQuote, f64)> {
        let (Some(path), Some(slot)) = (self.path(stamp.day), stamp.minute.session_index()) else {
            return Vec::new();
        };
        let spot = path.prices[slot];
        let smile = path.smiles[slot];
        let mut out = Vec::with_capacity(EXPIRY_DAYS.len() * 50);
        for offset in EXPIRY_DAYS {
            let expiry = stamp.day + Days::new(offset);
            let maturity = year_fraction(stamp.day, expiry);
            for strike in path.strikes() {
                let vol = smile.iv(strike / spot);
                for right in [Right::Call, Right::Put] {
                    let price = bs_price(&BsInputs {
                        spot,
                        strike,
                        maturity,
                        rate: self.config.rate,
                        dividend: self.config.dividend,
                        vol,
                        right,
                    });
                    let quote = OptionQuote {
                        stamp,
                        expiry,
                        strike,
                        right,
                        bid: price,
                        ask: price,
                    };
                    out.push((quote, price));
                }
            }
        }
        out
    }

    pub fn write_truth<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "minute", "sign", "a0", "a1", "h"])?;
        for j in self.truth() {
            w.write_record([
                format_date(j.day),
                j.minute.to_string(),
                if j.sign > 0.0 { "1" } else { "-1" }.to_string(),
                fmt_num(j.response.a0),
                fmt_num(j.response.a1),
                fmt_num(j.response.h),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `underlying.csv`, `options.csv`, `rates.csv` and `truth.csv`
    /// into `dir`. Option quotes are limited to minutes up to `quotes_until`.
    pub fn write_files(&self, dir: &Path, quotes_until: MinuteOfDay) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>, SimError> {
            Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        marketdata::write_underlying(&self.bars(), create("underlying.csv")?)?;
        marketdata::write_rates(&self.rates(), create("rates.csv")?)?;
        self.write_truth(create("truth.csv")?).map_err(MarketDataError::from)?;
        let mut w = csv::Writer::from_writer(create("options.csv")?);
        marketdata::write_quote_header(&mut w)?;
        for p in &self.paths {
            for slot in 0..SESSION_MINUTES {
                let Some(minute) = MinuteOfDay::from_session_index(slot) else {
                    continue;
                };
                if minute > quotes_until {
                    break;
                }
                marketdata::write_quote_rows(&mut w, &self.quotes_at(Stamp::new(p.day, minute)))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl QuoteSource for SimOutput {
    /// Quotes at the true IV, `price -/+ half_spread`; options cheaper than
    /// the half-spread are not listed.
    fn quotes_at(&self, stamp: Stamp) -> Vec<OptionQuote> {
        let hs = self.config.half_spread;
        self.theoretical_quotes(stamp)
            .into_iter()
            .filter(|(_, price)| *price > hs)
            .map(|(q, price)| OptionQuote {
                bid: price - hs,
                ask: price + hs,
                ..q
            })
            .collect()
    }
}
