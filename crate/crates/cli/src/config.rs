//! Plain `key = value` run configuration with `#` comments.
//!
//! Every key has a default, so an empty file is a valid configuration. The
//! resolved configuration is written back in the same syntax next to the
//! artifacts it produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ivjump::eventstudy::{StandardErrors, WINDOWS};
use ivjump::marketdata::{format_date, parse_date, MinuteOfDay};
use ivjump::pipeline::AnalysisConfig;
use ivjump::simulator::{JumpSchedule, Response, SimConfig};
use ivjump::surface::Maturity;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Poisson,
    Morning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub output: PathBuf,
    /// Input files; `None` reads the simulator's file in `output`.
    pub underlying: Option<PathBuf>,
    pub options: Option<PathBuf>,
    pub rates: Option<PathBuf>,
    pub analysis: AnalysisConfig,
    pub sim: SimConfig,
    pub schedule: ScheduleKind,
    pub intensity: f64,
    pub jump_days: usize,
    pub latest: MinuteOfDay,
    /// Last minute with written option quotes; `None` follows the analysis.
    pub quotes_until: Option<MinuteOfDay>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output: PathBuf::from("ivjump-out"),
            underlying: None,
            options: None,
            rates: None,
            analysis: AnalysisConfig::default(),
            sim: SimConfig {
                days: 120,
                ..SimConfig::default()
            },
            schedule: ScheduleKind::Poisson,
            intensity: 0.25,
            jump_days: 40,
            latest: MinuteOfDay::from_hm(10, 30),
            quotes_until: None,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_minute(v: &str) -> Result<MinuteOfDay, String> {
    v.parse::<MinuteOfDay>().map_err(|e| e.to_string())
}

fn parse_auto_minute(v: &str) -> Result<Option<MinuteOfDay>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_minute(v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (v != "auto").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("auto".into(), |p| p.display().to_string())
}

fn show_minute(m: Option<MinuteOfDay>) -> String {
    m.map_or("auto".into(), |m| m.to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn modes(v: &str) -> Result<Vec<bool>, String> {
    match v {
        "both" => Ok(vec![true, false]),
        "include" => Ok(vec![true]),
        "exclude" => Ok(vec![false]),
        _ => Err("expected both, include or exclude".into()),
    }
}

fn show_modes(m: &[bool]) -> &'static str {
    match m {
        [true] => "include",
        [false] => "exclude",
        _ => "both",
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: body.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match cfg.set(key, value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
                Err(reason) => {
                    return Err(ConfigError::Value {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        reason,
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, anyhow::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        PipelineConfig::parse(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    /// Applies one setting; `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let a = &mut self.analysis;
        let s = &mut self.sim;
        match key {
            "output" => self.output = PathBuf::from(v),
            "underlying" => self.underlying = parse_path(v),
            "options" => self.options = parse_path(v),
            "rates" => self.rates = parse_path(v),
            "maturities" => a.maturities = parse_list::<Maturity>(v)?,
            "lambda" => a.surface.lambda = parse_num(v)?,
            "atm_band" => a.surface.atm_band = parse_num(v)?,
            "min_points" => a.surface.min_points = parse_num(v)?,
            "min_maturities" => a.surface.min_maturities = parse_num(v)?,
            "surface_until" => a.surface_until = parse_auto_minute(v)?,
            "jump_window" => a.jump.window = parse_num(v)?,
            "alpha" => a.jump.alpha = parse_num(v)?,
            "cutoff" => a.jump.cutoff = parse_minute(v)?,
            "pca_variables" => a.pca_variables = parse_bool(v)?,
            "pca_min_rows" => a.pca.min_rows = parse_num(v)?,
            "kaiser" => a.pca.kaiser = parse_bool(v)?,
            "varimax_sweeps" => a.pca.max_sweeps = parse_num(v)?,
            "varimax_tolerance" => a.pca.tolerance = parse_num(v)?,
            "windows" => a.windows = parse_list(v)?,
            "include_first" => a.include_modes = modes(v)?,
            "iv_scale" => a.iv_scale = parse_num(v)?,
            "iv_bar_same_maturity" => a.iv_bar_same_maturity = parse_bool(v)?,
            "standard_errors" => {
                a.errors = match v {
                    "classical" => StandardErrors::Classical,
                    "hc1" => StandardErrors::Hc1,
                    _ => return Err("expected classical or hc1".into()),
                }
            }
            "bootstrap_draws" => a.bootstrap_draws = parse_num(v)?,
            "band_level" => a.band_level = parse_num(v)?,
            "bootstrap_seed" => a.bootstrap_seed = parse_num(v)?,
            "reference_seed" => a.reference_seed = parse_num(v)?,
            "redraws" => a.redraws = parse_num(v)?,
            "redraw_seed" => a.redraw_seed = parse_num(v)?,
            "redraw_windows" => a.redraw_windows = parse_list(v)?,
            "sim.days" => s.days = parse_num(v)?,
            "sim.seed" => s.seed = parse_num(v)?,
            "sim.start" => s.start = parse_date(v)?,
            "sim.spot" => s.spot = parse_num(v)?,
            "sim.sigma" => s.sigma = parse_num(v)?,
            "sim.schedule" => {
                self.schedule = match v {
                    "poisson" => ScheduleKind::Poisson,
                    "morning" => ScheduleKind::Morning,
                    _ => return Err("expected poisson or morning".into()),
                }
            }
            "sim.intensity" => self.intensity = parse_num(v)?,
            "sim.jump_days" => self.jump_days = parse_num(v)?,
            "sim.latest" => self.latest = parse_minute(v)?,
            "sim.jump_mean" => s.jump_mean = parse_num(v)?,
            "sim.jump_sd" => s.jump_sd = parse_num(v)?,
            "sim.positive_share" => s.positive_share = parse_num(v)?,
            "sim.level" => s.level = parse_num(v)?,
            "sim.skew" => s.skew = parse_num(v)?,
            "sim.curvature" => s.curvature = parse_num(v)?,
            "sim.level_dispersion" => s.level_dispersion = parse_num(v)?,
            "sim.level_noise" => s.level_noise = parse_num(v)?,
            "sim.skew_noise" => s.skew_noise = parse_num(v)?,
            "sim.curvature_noise" => s.curvature_noise = parse_num(v)?,
            // Shorthands setting both jump signs.
            "sim.a0" => set_both(s, v, |r, x| r.a0 = x)?,
            "sim.a1" => set_both(s, v, |r, x| r.a1 = x)?,
            "sim.h" => set_both(s, v, |r, x| r.h = x)?,
            "sim.positive.a0" => s.positive.a0 = parse_num(v)?,
            "sim.positive.a1" => s.positive.a1 = parse_num(v)?,
            "sim.positive.h" => s.positive.h = parse_num(v)?,
            "sim.negative.a0" => s.negative.a0 = parse_num(v)?,
            "sim.negative.a1" => s.negative.a1 = parse_num(v)?,
            "sim.negative.h" => s.negative.h = parse_num(v)?,
            "sim.opening_bump" => s.opening_bump = parse_num(v)?,
            "sim.opening_decay" => s.opening_decay = parse_num(v)?,
            "sim.rate" => s.rate = parse_num(v)?,
            "sim.dividend" => s.dividend = parse_num(v)?,
            "sim.half_spread" => s.half_spread = parse_num(v)?,
            "sim.quotes_until" => self.quotes_until = parse_auto_minute(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.analysis
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(w) = self.analysis.windows.iter().find(|w| !WINDOWS.contains(w)) {
            return Err(ConfigError::Invalid(format!("window {w} not in {WINDOWS:?}")));
        }
        self.sim_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Overrides every seed, as `IVJUMP_SEED` does.
    pub fn override_seeds(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.analysis.bootstrap_seed = seed;
        self.analysis.reference_seed = seed;
        self.analysis.redraw_seed = seed;
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            schedule: match self.schedule {
                ScheduleKind::Poisson => JumpSchedule::Poisson {
                    intensity: self.intensity,
                },
                ScheduleKind::Morning => JumpSchedule::Morning {
                    days: self.jump_days,
                    latest: self.latest,
                },
            },
            ..self.sim.clone()
        }
    }

    pub fn quotes_until(&self) -> MinuteOfDay {
        self.quotes_until.unwrap_or_else(|| self.analysis.surface_until())
    }

    fn input(&self, path: &Option<PathBuf>, name: &str) -> PathBuf {
        path.clone().unwrap_or_else(|| self.output.join(name))
    }

    pub fn underlying_path(&self) -> PathBuf {
        self.input(&self.underlying, "underlying.csv")
    }

    pub fn options_path(&self) -> PathBuf {
        self.input(&self.options, "options.csv")
    }

    pub fn rates_path(&self) -> PathBuf {
        self.input(&self.rates, "rates.csv")
    }

    /// The resolved configuration in the input syntax, one key per line.
    pub fn to_text(&self) -> String {
        let a = &self.analysis;
        let s = &self.sim;
        let entries: Vec<(&str, String)> = vec![
            ("output", self.output.display().to_string()),
            ("underlying", show_path(&self.underlying)),
            ("options", show_path(&self.options)),
            ("rates", show_path(&self.rates)),
            ("maturities", join(&a.maturities.iter().map(|m| m.label()).collect::<Vec<_>>())),
            ("lambda", a.surface.lambda.to_string()),
            ("atm_band", a.surface.atm_band.to_string()),
            ("min_points", a.surface.min_points.to_string()),
            ("min_maturities", a.surface.min_maturities.to_string()),
            ("surface_until", show_minute(a.surface_until)),
            ("jump_window", a.jump.window.to_string()),
            ("alpha", a.jump.alpha.to_string()),
            ("cutoff", a.jump.cutoff.to_string()),
            ("pca_variables", a.pca_variables.to_string()),
            ("pca_min_rows", a.pca.min_rows.to_string()),
            ("kaiser", a.pca.kaiser.to_string()),
            ("varimax_sweeps", a.pca.max_sweeps.to_string()),
            ("varimax_tolerance", a.pca.tolerance.to_string()),
            ("windows", join(&a.windows)),
            ("include_first", show_modes(&a.include_modes).to_string()),
            ("iv_scale", a.iv_scale.to_string()),
            ("iv_bar_same_maturity", a.iv_bar_same_maturity.to_string()),
            (
                "standard_errors",
                match a.errors {
                    StandardErrors::Classical => "classical",
                    StandardErrors::Hc1 => "hc1",
                }
                .to_string(),
            ),
            ("bootstrap_draws", a.bootstrap_draws.to_string()),
            ("band_level", a.band_level.to_string()),
            ("bootstrap_seed", a.bootstrap_seed.to_string()),
            ("reference_seed", a.reference_seed.to_string()),
            ("redraws", a.redraws.to_string()),
            ("redraw_seed", a.redraw_seed.to_string()),
            ("redraw_windows", join(&a.redraw_windows)),
            ("sim.days", s.days.to_string()),
            ("sim.seed", s.seed.to_string()),
            ("sim.start", format_date(s.start)),
            ("sim.spot", s.spot.to_string()),
            ("sim.sigma", s.sigma.to_string()),
            (
                "sim.schedule",
                match self.schedule {
                    ScheduleKind::Poisson => "poisson",
                    ScheduleKind::Morning => "morning",
                }
                .to_string(),
            ),
            ("sim.intensity", self.intensity.to_string()),
            ("sim.jump_days", self.jump_days.to_string()),
            ("sim.latest", self.latest.to_string()),
            ("sim.jump_mean", s.jump_mean.to_string()),
            ("sim.jump_sd", s.jump_sd.to_string()),
            ("sim.positive_share", s.positive_share.to_string()),
            ("sim.level", s.level.to_string()),
            ("sim.skew", s.skew.to_string()),
            ("sim.curvature", s.curvature.to_string()),
            ("sim.level_dispersion", s.level_dispersion.to_string()),
            ("sim.level_noise", s.level_noise.to_string()),
            ("sim.skew_noise", s.skew_noise.to_string()),
            ("sim.curvature_noise", s.curvature_noise.to_string()),
            ("sim.positive.a0", s.positive.a0.to_string()),
            ("sim.positive.a1", s.positive.a1.to_string()),
            ("sim.positive.h", s.positive.h.to_string()),
            ("sim.negative.a0", s.negative.a0.to_string()),
            ("sim.negative.a1", s.negative.a1.to_string()),
            ("sim.negative.h", s.negative.h.to_string()),
            ("sim.opening_bump", s.opening_bump.to_string()),
            ("sim.opening_decay", s.opening_decay.to_string()),
            ("sim.rate", s.rate.to_string()),
            ("sim.dividend", s.dividend.to_string()),
            ("sim.half_spread", s.half_spread.to_string()),
            ("sim.quotes_until", show_minute(self.quotes_until)),
        ];
        let mut out = String::from("# resolved ivjump configuration\n");
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn set_both(s: &mut SimConfig, v: &str, f: fn(&mut Response, f64)) -> Result<(), String> {
    let x = parse_num(v)?;
    f(&mut s.positive, x);
    f(&mut s.negative, x);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("# nothing\n\n").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let cfg = PipelineConfig::parse(
            "windows = 5, 30   # short and long\nalpha=0.05\nsim.schedule = morning\nsim.a1 = 0.3\nmaturities = 3m\ninclude_first = exclude\n",
        )
        .unwrap();
        assert_eq!(cfg.analysis.windows, vec![5, 30]);
        assert_eq!(cfg.analysis.jump.alpha, 0.05);
        assert_eq!(cfg.analysis.maturities, vec![Maturity::ThreeMonth]);
        assert_eq!(cfg.analysis.include_modes, vec![false]);
        assert_eq!(cfg.sim.positive.a1, 0.3);
        assert_eq!(cfg.sim.negative.a1, 0.3);
        assert!(matches!(cfg.sim_config().schedule, JumpSchedule::Morning { days: 40, .. }));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = PipelineConfig::parse("sim.negative.a0 = 0.7\nlambda = 0.001\nsurface_until = 13:30\n").unwrap();
        cfg.override_seeds(42);
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(
            PipelineConfig::parse("alpha = 0.01\nwhat = 3\n"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("alpha 0.01\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("\n\nkaiser = maybe\n"),
            Err(ConfigError::Value { line: 3, .. })
        ));
        assert!(matches!(PipelineConfig::parse("windows = 7\n"), Err(ConfigError::Invalid(_))));
    }
}
