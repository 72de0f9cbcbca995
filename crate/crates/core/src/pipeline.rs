//! In-memory orchestration of the analysis: jump detection, per-minute
//! surfaces, IV and smile-component variables, event-study regressions,
//! curves with bootstrap bands, and the robustness drivers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::NaiveDate;
use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::eventstudy::{
    average_curves, bootstrap_band, build_reference_starts, build_samples, class_curves, iv_bars, jump_minutes,
    no_jump_days, ols_fit, reference_redraws, AverageCurves, BootstrapBand, EventError, EventInputs,
    RedrawSummary, RegressionRow, Spread, StandardErrors, VariableKind, WindowSpec, CURVE_MINUTES, WINDOWS,
};
use crate::jumps::{
    classify_days, compute_statistics, detect_jumps, morning_gaps, DayLabel, JumpError, JumpEvent, JumpStatistics,
    JumpTestConfig, ReturnSeries,
};
use crate::marketdata::{fmt_num, DayPrices, MinuteOfDay, QuoteSource, RateCurve, Stamp, SESSION_MINUTES};
use crate::smilepca::{
    delta_atm, delta_panel, deseasonalize, label_components, pca_fit, project, varimax_rotate, PcaConfig, PcaModel,
    Region, SmilePcaError,
};
use crate::surface::{
    extract_atm, extract_smile, iv_points, solve_dividend_yields, Maturity, SmileSample, SurfaceConfig, TpsFitter,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("jump detection: {0}")]
    Jumps(#[from] JumpError),
    #[error("smile components: {0}")]
    Pca(#[from] SmilePcaError),
    #[error("event study: {0}")]
    Event(#[from] EventError),
    #[error("invalid analysis configuration: {0}")]
    Config(String),
}

/// Minutes after the cutoff that no-jump days must cover, and that windows
/// started at the cutoff reach.
pub const POST_CUTOFF_MINUTES: u16 = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub surface: SurfaceConfig,
    pub maturities: Vec<Maturity>,
    pub jump: JumpTestConfig,
    pub pca: PcaConfig,
    /// Build smile-component variables (needs full smiles, not just ATM).
    pub pca_variables: bool,
    pub windows: Vec<usize>,
    pub include_modes: Vec<bool>,
    /// Multiplier taking decimal IV to the reported unit (vol points).
    pub iv_scale: f64,
    /// Use the regression's own maturity for the IV-level control; otherwise
    /// the 3-month ATM-IV.
    pub iv_bar_same_maturity: bool,
    /// Last minute with a fitted surface; `None` means cutoff plus one hour.
    pub surface_until: Option<MinuteOfDay>,
    pub bootstrap_draws: usize,
    pub band_level: f64,
    pub bootstrap_seed: u64,
    pub reference_seed: u64,
    pub errors: StandardErrors,
    pub redraws: usize,
    pub redraw_seed: u64,
    /// Windows re-run by the reference re-draw driver.
    pub redraw_windows: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            surface: SurfaceConfig::default(),
            maturities: Maturity::ALL.to_vec(),
            jump: JumpTestConfig::default(),
            pca: PcaConfig::default(),
            pca_variables: true,
            windows: WINDOWS.to_vec(),
            include_modes: vec![true, false],
            iv_scale: 100.0,
            iv_bar_same_maturity: true,
            surface_until: None,
            bootstrap_draws: 7000,
            band_level: 0.90,
            bootstrap_seed: 7,
            reference_seed: 1,
            errors: StandardErrors::Classical,
            redraws: 1000,
            redraw_seed: 1,
            redraw_windows: WINDOWS.to_vec(),
        }
    }
}

pub fn plus_minutes(m: MinuteOfDay, n: u16) -> MinuteOfDay {
    let t = (m.minutes_since_midnight() + n).min(MinuteOfDay::SESSION_CLOSE.minutes_since_midnight());
    MinuteOfDay::from_hm(t / 60, t % 60)
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.jump.validate()?;
        if self.maturities.is_empty() {
            return Err(PipelineError::Config("no maturities selected".into()));
        }
        if let Some(w) = self.windows.iter().chain(&self.redraw_windows).find(|w| !WINDOWS.contains(w)) {
            return Err(PipelineError::Config(format!("window {w} not in {WINDOWS:?}")));
        }
        if !(self.band_level > 0.0 && self.band_level < 1.0) {
            return Err(PipelineError::Config(format!("band level {} not in (0,1)", self.band_level)));
        }
        if self.include_modes.is_empty() {
            return Err(PipelineError::Config("no include/exclude mode selected".into()));
        }
        Ok(())
    }

    /// Last minute no-jump days must cover.
    pub fn complete_until(&self) -> MinuteOfDay {
        plus_minutes(self.jump.cutoff, POST_CUTOFF_MINUTES)
    }

    pub fn surface_until(&self) -> MinuteOfDay {
        self.surface_until.unwrap_or_else(|| self.complete_until())
    }

    fn iv_bar_maturity(&self, maturity: Maturity) -> Maturity {
        if self.iv_bar_same_maturity {
            maturity
        } else {
            Maturity::ThreeMonth
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub statistics: JumpStatistics,
    pub events: Vec<JumpEvent>,
    pub labels: Vec<DayLabel>,
}

pub fn detect(prices: &[DayPrices], jump: &JumpTestConfig, complete_until: MinuteOfDay) -> Result<Detection, PipelineError> {
    jump.validate()?;
    let series = ReturnSeries::from_day_prices(prices);
    let statistics = compute_statistics(&series, jump.window)?;
    let events = detect_jumps(&statistics, jump.alpha);
    let gaps = morning_gaps(prices, &statistics, jump.cutoff, complete_until);
    let days: Vec<NaiveDate> = prices.iter().map(|d| d.day).collect();
    let labels = classify_days(&days, &events, &gaps, jump.cutoff, complete_until);
    Ok(Detection {
        statistics,
        events,
        labels,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceRun {
    pub samples: Vec<SmileSample>,
    /// Minutes with quotes but no usable surface.
    pub failed_minutes: usize,
    /// Quotes dropped by inversion or missing yields.
    pub dropped_quotes: usize,
}

/// Fits one surface per minute from the open to `until` and slices it at
/// each maturity. Smiles are extracted in full when `full_smiles`, otherwise
/// only the ATM value. Parallel over days.
pub fn build_surfaces(
    source: &dyn QuoteSource,
    prices: &[DayPrices],
    rates: &RateCurve,
    until: MinuteOfDay,
    surface: &SurfaceConfig,
    maturities: &[Maturity],
    full_smiles: bool,
) -> SurfaceRun {
    let runs: Vec<SurfaceRun> = prices
        .par_iter()
        .map(|day| {
            let mut run = SurfaceRun::default();
            let Ok(rate) = rates.rate(day.day) else {
                warn!("{}: no rate, day skipped", day.day);
                return run;
            };
            let mut fitter = TpsFitter::new();
            let mut yields = None;
            for slot in 0..SESSION_MINUTES {
                let Some(minute) = MinuteOfDay::from_session_index(slot) else {
                    continue;
                };
                if minute > until {
                    break;
                }
                let Some(spot) = day.prices[slot] else {
                    continue;
                };
                let stamp = Stamp::new(day.day, minute);
                let quotes = source.quotes_at(stamp);
                if quotes.is_empty() {
                    continue;
                }
                // Yields are solved once per day from the first usable minute.
                let y = yields.get_or_insert_with(|| solve_dividend_yields(&quotes, spot, rate));
                if y.is_empty() {
                    yields = None;
                    run.failed_minutes += 1;
                    continue;
                }
                let fitted = iv_points(&quotes, spot, rate, y, surface)
                    .and_then(|cs| {
                        run.dropped_quotes += cs.dropped;
                        fitter.fit(&cs.points, surface.lambda)
                    });
                let Ok(model) = fitted else {
                    run.failed_minutes += 1;
                    continue;
                };
                for &m in maturities {
                    let sample = if full_smiles {
                        extract_smile(&model, stamp, m)
                    } else {
                        extract_atm(&model, stamp, m)
                    };
                    run.samples.extend(sample);
                }
            }
            run
        })
        .collect();
    let mut out = SurfaceRun::default();
    for r in runs {
        out.samples.extend(r.samples);
        out.failed_minutes += r.failed_minutes;
        out.dropped_quotes += r.dropped_quotes;
    }
    out
}

pub type VariableKey = (VariableKind, Maturity);

/// Fitted smile-component model of one maturity.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentModel {
    pub maturity: Maturity,
    pub model: PcaModel,
    /// `None` when the components did not map onto distinct regions.
    pub regions: Option<Vec<Region>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Variables {
    /// Deseasonalized one-minute changes per variable, in `iv_scale` units.
    pub series: BTreeMap<VariableKey, HashMap<Stamp, f64>>,
    pub models: Vec<ComponentModel>,
    /// Mean first-hour ATM-IV per day and maturity, in `iv_scale` units.
    pub iv_bars: BTreeMap<Maturity, BTreeMap<NaiveDate, f64>>,
}

fn region_kind(region: Region) -> VariableKind {
    match region {
        Region::Atm => VariableKind::AtmPc,
        Region::OtmCall => VariableKind::OtmCallPc,
        Region::OtmPut => VariableKind::OtmPutPc,
    }
}

fn scaled(samples: &[SmileSample], scale: f64) -> Vec<SmileSample> {
    samples
        .iter()
        .map(|s| SmileSample {
            bins: s.bins.map(|v| v * scale),
            atm: s.atm * scale,
            ..*s
        })
        .collect()
}

/// ATM-IV changes and (optionally) smile-component scores, deseasonalized
/// against the no-jump days of `labels`.
pub fn build_variables(
    samples: &[SmileSample],
    labels: &[DayLabel],
    config: &AnalysisConfig,
) -> Result<Variables, PipelineError> {
    let samples = scaled(samples, config.iv_scale);
    let no_jump: BTreeSet<NaiveDate> = no_jump_days(labels).into_iter().collect();
    let mut out = Variables::default();
    let first_hour = (MinuteOfDay::SESSION_OPEN, plus_minutes(MinuteOfDay::SESSION_OPEN, 59));
    for &maturity in &config.maturities {
        out.iv_bars
            .insert(maturity, iv_bars(&samples, maturity, first_hour.0, first_hour.1, 1.0));
        if !out.iv_bars.contains_key(&config.iv_bar_maturity(maturity)) {
            let other = config.iv_bar_maturity(maturity);
            out.iv_bars.insert(other, iv_bars(&samples, other, first_hour.0, first_hour.1, 1.0));
        }
        let atm = deseasonalize(&delta_atm(&samples, maturity), &no_jump)?;
        out.series.insert((VariableKind::AtmIv, maturity), atm.column_map(0));

        if !config.pca_variables {
            continue;
        }
        let panel = delta_panel(&samples, maturity);
        let model = match pca_fit(&panel.values, &config.pca) {
            Ok(m) => varimax_rotate(&m, &config.pca),
            Err(e) => {
                warn!("{maturity}: no smile components ({e})");
                continue;
            }
        };
        let regions = match label_components(&model) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("{maturity}: {e}; component variables skipped");
                None
            }
        };
        if let Some(regions) = &regions {
            let scores = deseasonalize(&project(&model, &panel), &no_jump)?;
            for (j, region) in regions.iter().enumerate() {
                out.series.insert((region_kind(*region), maturity), scores.column_map(j));
            }
        }
        out.models.push(ComponentModel {
            maturity,
            model,
            regions,
        });
    }
    Ok(out)
}

impl Variables {
    pub fn inputs<'a>(&'a self, labels: &'a [DayLabel], key: VariableKey, config: &AnalysisConfig) -> Option<EventInputs<'a>> {
        Some(EventInputs {
            labels,
            series: self.series.get(&key)?,
            iv_bar: self.iv_bars.get(&config.iv_bar_maturity(key.1))?,
        })
    }
}

/// Regression rows for every variable, window and include mode.
pub fn regressions(
    variables: &Variables,
    labels: &[DayLabel],
    config: &AnalysisConfig,
) -> Vec<RegressionRow> {
    let starts = build_reference_starts(&no_jump_days(labels), &jump_minutes(labels), config.reference_seed);
    let mut rows = Vec::new();
    for &key in variables.series.keys() {
        let Some(inputs) = variables.inputs(labels, key, config) else {
            continue;
        };
        for &window in &config.windows {
            for &include_first in &config.include_modes {
                let spec = WindowSpec { window, include_first };
                let set = build_samples(&inputs, &starts, spec);
                match ols_fit(&set.samples, config.errors) {
                    Ok(fit) => rows.push(RegressionRow {
                        variable: key.0,
                        maturity: key.1,
                        spec,
                        fit,
                    }),
                    Err(e) => warn!("{} {} W={window} include={include_first}: {e}", key.0, key.1),
                }
            }
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSet {
    pub variable: VariableKind,
    pub maturity: Maturity,
    pub include_first: bool,
    pub curves: AverageCurves,
    pub band: BootstrapBand,
    pub counts: [usize; 3],
}

pub fn curves(variables: &Variables, labels: &[DayLabel], config: &AnalysisConfig) -> Vec<CurveSet> {
    let starts = build_reference_starts(&no_jump_days(labels), &jump_minutes(labels), config.reference_seed);
    let mut out = Vec::new();
    for &key in variables.series.keys() {
        let Some(inputs) = variables.inputs(labels, key, config) else {
            continue;
        };
        for &include_first in &config.include_modes {
            let per_class = class_curves(&inputs, &starts, CURVE_MINUTES, include_first);
            if per_class.reference.is_empty() {
                warn!("{} {}: no reference curves", key.0, key.1);
                continue;
            }
            out.push(CurveSet {
                variable: key.0,
                maturity: key.1,
                include_first,
                curves: average_curves(&per_class),
                band: bootstrap_band(&per_class.reference, config.bootstrap_draws, config.band_level, config.bootstrap_seed),
                counts: [per_class.positive.len(), per_class.negative.len(), per_class.reference.len()],
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RedrawRow {
    pub variable: VariableKind,
    pub maturity: Maturity,
    pub spec: WindowSpec,
    pub summary: RedrawSummary,
}

pub fn redraw_suite(variables: &Variables, labels: &[DayLabel], config: &AnalysisConfig) -> Vec<RedrawRow> {
    let mut out = Vec::new();
    for &key in variables.series.keys() {
        let Some(inputs) = variables.inputs(labels, key, config) else {
            continue;
        };
        for &window in &config.redraw_windows {
            for &include_first in &config.include_modes {
                let spec = WindowSpec { window, include_first };
                match reference_redraws(&inputs, spec, config.redraws, config.redraw_seed, config.errors) {
                    Ok(summary) => out.push(RedrawRow {
                        variable: key.0,
                        maturity: key.1,
                        spec,
                        summary,
                    }),
                    Err(e) => warn!("re-draws {} {} W={window}: {e}", key.0, key.1),
                }
            }
        }
    }
    out
}

/// Re-draw summaries, one row per statistic (`mean`, `sd`, `q025`, `q975`).
pub fn write_redraw_report<W: Write>(rows: &[RedrawRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variable", "maturity", "window", "include_first", "statistic", "beta0", "betap", "betan", "betaiv", "p0",
        "pp", "pn", "piv", "iterations",
    ])?;
    type Pick = fn(&Spread) -> f64;
    let stats: [(&str, Pick); 4] = [
        ("mean", |s| s.mean),
        ("sd", |s| s.sd),
        ("q025", |s| s.q025),
        ("q975", |s| s.q975),
    ];
    for r in rows {
        for (name, pick) in stats {
            let mut rec = vec![
                r.variable.to_string(),
                r.maturity.label().to_string(),
                r.spec.window.to_string(),
                r.spec.include_first.to_string(),
                name.to_string(),
            ];
            rec.extend(r.summary.beta.iter().map(|s| fmt_num(pick(s))));
            rec.extend(r.summary.p.iter().map(|s| fmt_num(pick(s))));
            rec.push(r.summary.iterations.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything one analysis run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub detection: Detection,
    pub surfaces: SurfaceRun,
    pub variables: Variables,
    pub regressions: Vec<RegressionRow>,
}

pub fn analyse(
    source: &dyn QuoteSource,
    prices: &[DayPrices],
    rates: &RateCurve,
    config: &AnalysisConfig,
) -> Result<Analysis, PipelineError> {
    config.validate()?;
    let detection = detect(prices, &config.jump, config.complete_until())?;
    info!(
        "detected {} jumps; {} positive, {} negative, {} no-jump days",
        detection.events.len(),
        detection.labels.iter().filter(|l| l.class == crate::jumps::DayClass::PositiveJump).count(),
        detection.labels.iter().filter(|l| l.class == crate::jumps::DayClass::NegativeJump).count(),
        detection.labels.iter().filter(|l| l.class == crate::jumps::DayClass::NoJump).count(),
    );
    let surfaces = build_surfaces(
        source,
        prices,
        rates,
        config.surface_until(),
        &config.surface,
        &config.maturities,
        config.pca_variables,
    );
    let variables = build_variables(&surfaces.samples, &detection.labels, config)?;
    let regressions = regressions(&variables, &detection.labels, config);
    Ok(Analysis {
        detection,
        surfaces,
        variables,
        regressions,
    })
}

/// The three robustness drivers on top of a finished analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct Robustness {
    /// Detection at the 5% level.
    pub alpha: Vec<RegressionRow>,
    /// Jumps up to 12:30 and windows reaching 13:30.
    pub extended: Vec<RegressionRow>,
    pub redraws: Vec<RedrawRow>,
}

pub fn robustness(
    analysis: &Analysis,
    prices: &[DayPrices],
    config: &AnalysisConfig,
) -> Result<Robustness, PipelineError> {
    let samples = &analysis.surfaces.samples;
    let alpha_config = AnalysisConfig {
        jump: JumpTestConfig {
            alpha: 0.05,
            ..config.jump
        },
        ..config.clone()
    };
    let detection = detect(prices, &alpha_config.jump, alpha_config.complete_until())?;
    let variables = build_variables(samples, &detection.labels, &alpha_config)?;
    let alpha = regressions(&variables, &detection.labels, &alpha_config);

    let extended_config = AnalysisConfig {
        jump: JumpTestConfig {
            cutoff: MinuteOfDay::from_hm(12, 30),
            ..config.jump
        },
        ..config.clone()
    };
    let extended = if config.surface_until() >= extended_config.complete_until() {
        let detection = detect(prices, &extended_config.jump, extended_config.complete_until())?;
        let variables = build_variables(samples, &detection.labels, &extended_config)?;
        regressions(&variables, &detection.labels, &extended_config)
    } else {
        warn!(
            "surfaces end at {}, extended window needs {}; driver skipped",
            config.surface_until(),
            extended_config.complete_until()
        );
        Vec::new()
    };

    let redraws = redraw_suite(&analysis.variables, &analysis.detection.labels, config);
    Ok(Robustness {
        alpha,
        extended,
        redraws,
    })
}
