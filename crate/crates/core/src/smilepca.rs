//! Principal components of one-minute smile changes: differencing,
//! minute-of-day deseasonalization, covariance PCA, Varimax rotation,
//! score projection and moneyness-region labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use chrono::NaiveDate;
use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::marketdata::{fmt_num, format_date, MinuteOfDay, Stamp};
use crate::surface::{bin_centers, bin_lower_edges, Maturity, SmileSample, BIN_COUNT};

/// Minimum panel rows for a fit.
pub const MIN_ROWS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmilePcaError {
    #[error("panel has {rows} rows, at least {min} required")]
    TooFewRows { rows: usize, min: usize },
    #[error("covariance rank {rank} is below the {needed} requested components")]
    RankDeficient { rank: usize, needed: usize },
    #[error("no no-jump observations at minute {0}")]
    EmptyReferenceMinute(MinuteOfDay),
    #[error("components map to regions {regions:?}, which is not a permutation")]
    AmbiguousLabel { regions: Vec<Region> },
    #[error("invalid component count {0}")]
    InvalidComponents(usize),
}

/// ΔIV panel of one maturity: one row per (day, minute), one column per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaIvPanel {
    pub maturity: Maturity,
    pub stamps: Vec<Stamp>,
    pub values: DMatrix<f64>,
    /// Rows whose difference was undefined because a sample was missing.
    pub dropped: usize,
}

/// Values indexed by (day, minute); ATM-IV changes, scores and the like.
#[derive(Clone, Debug, PartialEq)]
pub struct MinuteSeries {
    pub stamps: Vec<Stamp>,
    pub values: DMatrix<f64>,
    pub deseasonalized: bool,
}

pub type ScoreSeries = MinuteSeries;

impl MinuteSeries {
    pub fn column_map(&self, column: usize) -> HashMap<Stamp, f64> {
        self.stamps
            .iter()
            .enumerate()
            .map(|(i, s)| (*s, self.values[(i, column)]))
            .collect()
    }
}

impl DeltaIvPanel {
    pub fn rows(&self) -> usize {
        self.stamps.len()
    }

    pub fn as_series(&self) -> MinuteSeries {
        MinuteSeries {
            stamps: self.stamps.clone(),
            values: self.values.clone(),
            deseasonalized: false,
        }
    }
}

fn group_by_day<T, F>(items: &[T], stamp: F) -> BTreeMap<NaiveDate, BTreeMap<MinuteOfDay, &T>>
where
    F: Fn(&T) -> Stamp,
{
    let mut out: BTreeMap<NaiveDate, BTreeMap<MinuteOfDay, &T>> = BTreeMap::new();
    for item in items {
        let s = stamp(item);
        out.entry(s.day).or_default().insert(s.minute, item);
    }
    out
}

/// One-minute differences within each day. A row at minute `t` needs samples
/// at both `t` and `t - 1`; rows from 09:32 to the day's last sample that
/// lack either are dropped and counted.
pub fn delta_panel(samples: &[SmileSample], maturity: Maturity) -> DeltaIvPanel {
    let own: Vec<&SmileSample> = samples
        .iter()
        .filter(|s| s.maturity == maturity && s.bins.iter().all(|v| v.is_finite()))
        .collect();
    let by_day = group_by_day(&own, |s| s.stamp);
    let mut stamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut dropped = 0;
    for (day, minutes) in &by_day {
        let Some((&last, _)) = minutes.iter().next_back() else {
            continue;
        };
        let first_row = MinuteOfDay::SESSION_OPEN.session_index().unwrap_or(0) + 1;
        let last_row = last.session_index().unwrap_or(0);
        for slot in first_row..=last_row {
            let (Some(t), Some(prev)) = (
                MinuteOfDay::from_session_index(slot),
                MinuteOfDay::from_session_index(slot - 1),
            ) else {
                continue;
            };
            match (minutes.get(&t), minutes.get(&prev)) {
                (Some(now), Some(before)) => {
                    stamps.push(Stamp::new(*day, t));
                    rows.extend(now.bins.iter().zip(before.bins.iter()).map(|(a, b)| a - b));
                }
                _ => dropped += 1,
            }
        }
    }
    DeltaIvPanel {
        maturity,
        values: DMatrix::from_row_slice(stamps.len(), BIN_COUNT, &rows),
        stamps,
        dropped,
    }
}

/// ATM-IV changes as a one-column series, differenced like [`delta_panel`].
pub fn delta_atm(samples: &[SmileSample], maturity: Maturity) -> MinuteSeries {
    let own: Vec<&SmileSample> = samples
        .iter()
        .filter(|s| s.maturity == maturity && s.atm.is_finite())
        .collect();
    let by_day = group_by_day(&own, |s| s.stamp);
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (day, minutes) in &by_day {
        for (&t, now) in minutes {
            let Some(slot) = t.session_index().filter(|&s| s > 0) else {
                continue;
            };
            let prev = MinuteOfDay::from_session_index(slot - 1).and_then(|p| minutes.get(&p));
            if let Some(before) = prev {
                stamps.push(Stamp::new(*day, t));
                values.push(now.atm - before.atm);
            }
        }
    }
    MinuteSeries {
        values: DMatrix::from_column_slice(stamps.len(), 1, &values),
        stamps,
        deseasonalized: false,
    }
}

/// Subtracts, per minute of day, the mean over no-jump days at that minute.
pub fn deseasonalize(
    series: &MinuteSeries,
    no_jump_days: &BTreeSet<NaiveDate>,
) -> Result<MinuteSeries, SmilePcaError> {
    let cols = series.values.ncols();
    let mut sums: BTreeMap<MinuteOfDay, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, s) in series.stamps.iter().enumerate() {
        if no_jump_days.contains(&s.day) {
            let entry = sums.entry(s.minute).or_insert_with(|| (vec![0.0; cols], 0));
            for c in 0..cols {
                entry.0[c] += series.values[(i, c)];
            }
            entry.1 += 1;
        }
    }
    let mut values = series.values.clone();
    for (i, s) in series.stamps.iter().enumerate() {
        let (sum, count) = sums
            .get(&s.minute)
            .ok_or(SmilePcaError::EmptyReferenceMinute(s.minute))?;
        for c in 0..cols {
            values[(i, c)] -= sum[c] / *count as f64;
        }
    }
    Ok(MinuteSeries {
        stamps: series.stamps.clone(),
        values,
        deseasonalized: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    OtmPut,
    Atm,
    OtmCall,
}

impl Region {
    pub fn of_moneyness(m: f64) -> Region {
        if m < 0.95 {
            Region::OtmPut
        } else if m <= 1.05 {
            Region::Atm
        } else {
            Region::OtmCall
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Region::OtmPut => "OTM-Put-PC",
            Region::Atm => "ATM-PC",
            Region::OtmCall => "OTM-Call-PC",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaConfig {
    pub components: usize,
    pub min_rows: usize,
    /// Row-normalize loadings by communality during Varimax.
    pub kaiser: bool,
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            components: 3,
            min_rows: MIN_ROWS,
            kaiser: false,
            max_sweeps: 500,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// Bins × components.
    pub loadings: DMatrix<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Variance share of each retained component.
    pub explained: Vec<f64>,
    pub rotated: bool,
    /// False when Varimax hit its sweep cap.
    pub converged: bool,
}

impl PcaModel {
    pub fn communalities(&self) -> Vec<f64> {
        self.loadings
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect()
    }
}

pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    centered.transpose() * &centered / (n as f64 - 1.0)
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn normalize_signs(b: &mut DMatrix<f64>) {
    for mut col in b.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

pub fn pca_fit(panel: &DMatrix<f64>, config: &PcaConfig) -> Result<PcaModel, SmilePcaError> {
    let k = config.components;
    if k == 0 || k > panel.ncols() {
        return Err(SmilePcaError::InvalidComponents(k));
    }
    if panel.nrows() < config.min_rows.max(2) {
        return Err(SmilePcaError::TooFewRows {
            rows: panel.nrows(),
            min: config.min_rows.max(2),
        });
    }
    let cov = covariance(panel);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let top = eigenvalues[0];
    let rank = eigenvalues.iter().filter(|&&l| l > 1e-10 * top && top > 0.0).count();
    if rank < k {
        return Err(SmilePcaError::RankDeficient { rank, needed: k });
    }
    let mut loadings = DMatrix::zeros(panel.ncols(), k);
    for (j, &i) in order.iter().take(k).enumerate() {
        loadings.set_column(j, &eig.eigenvectors.column(i));
    }
    normalize_signs(&mut loadings);
    let trace: f64 = eigenvalues.iter().sum();
    Ok(PcaModel {
        loadings,
        explained: eigenvalues[..k].iter().map(|l| l / trace).collect(),
        eigenvalues,
        rotated: false,
        converged: true,
    })
}

/// Raw Varimax criterion: summed per-column variance of squared loadings.
pub fn varimax_criterion(b: &DMatrix<f64>) -> f64 {
    let p = b.nrows() as f64;
    b.column_iter()
        .map(|col| {
            let sq: Vec<f64> = col.iter().map(|v| v * v).collect();
            let mean = sq.iter().sum::<f64>() / p;
            sq.iter().map(|s| s * s).sum::<f64>() / p - mean * mean
        })
        .sum()
}

/// Optimal planar Varimax angle for columns `j`, `k`.
fn pair_angle(b: &DMatrix<f64>, j: usize, k: usize) -> f64 {
    let p = b.nrows() as f64;
    let (mut a, mut bb, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..b.nrows() {
        let (x, y) = (b[(i, j)], b[(i, k)]);
        let u = x * x - y * y;
        let v = 2.0 * x * y;
        a += u;
        bb += v;
        c += u * u - v * v;
        d += 2.0 * u * v;
    }
    let num = d - 2.0 * a * bb / p;
    let den = c - (a * a - bb * bb) / p;
    num.atan2(den) / 4.0
}

fn rotate_pair(b: &mut DMatrix<f64>, j: usize, k: usize, phi: f64) {
    let (s, c) = phi.sin_cos();
    for i in 0..b.nrows() {
        let (x, y) = (b[(i, j)], b[(i, k)]);
        b[(i, j)] = c * x + s * y;
        b[(i, k)] = -s * x + c * y;
    }
}

/// Orthogonal Varimax rotation by cyclic pairwise plane rotations.
///
/// Columns of the result are reordered by explained variance and
/// sign-normalized. Hitting the sweep cap returns the last iterate with
/// `converged = false`.
pub fn varimax_rotate(model: &PcaModel, config: &PcaConfig) -> PcaModel {
    let mut b = model.loadings.clone();
    let k = b.ncols();
    let weights: Vec<f64> = if config.kaiser {
        model.communalities().iter().map(|h| h.sqrt()).collect()
    } else {
        vec![1.0; b.nrows()]
    };
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            b.row_mut(i).scale_mut(1.0 / w);
        }
    }
    let mut value = varimax_criterion(&b);
    let mut converged = false;
    for _ in 0..config.max_sweeps {
        for j in 0..k {
            for l in j + 1..k {
                let phi = pair_angle(&b, j, l);
                rotate_pair(&mut b, j, l, phi);
            }
        }
        let next = varimax_criterion(&b);
        let gain = next - value;
        value = next;
        if gain < config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("varimax stopped after {} sweeps without converging", config.max_sweeps);
    }
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            b.row_mut(i).scale_mut(*w);
        }
    }

    // Rotated columns are B R, so their variances are the diagonal of
    // R' diag(lambda) R.
    let trace: f64 = model.eigenvalues.iter().sum();
    let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&model.eigenvalues[..k]));
    let rotation = model.loadings.transpose() * &b;
    let variance = rotation.transpose() * lambda * &rotation;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| variance[(y, y)].total_cmp(&variance[(x, x)]));
    let mut loadings = DMatrix::zeros(b.nrows(), k);
    for (dst, &src) in order.iter().enumerate() {
        loadings.set_column(dst, &b.column(src));
    }
    normalize_signs(&mut loadings);
    PcaModel {
        loadings,
        eigenvalues: model.eigenvalues.clone(),
        explained: order.iter().map(|&j| variance[(j, j)] / trace).collect(),
        rotated: true,
        converged,
    }
}

/// Moneyness region of each component: the one holding its largest sum of
/// squared loadings.
pub fn component_regions(model: &PcaModel) -> Vec<Region> {
    let centers = bin_centers();
    model
        .loadings
        .column_iter()
        .map(|col| {
            let mut mass: BTreeMap<Region, f64> = BTreeMap::new();
            for (i, v) in col.iter().enumerate() {
                *mass.entry(Region::of_moneyness(centers[i])).or_default() += v * v;
            }
            mass.into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(r, _)| r)
                .unwrap_or(Region::Atm)
        })
        .collect()
}

pub fn label_components(model: &PcaModel) -> Result<Vec<Region>, SmilePcaError> {
    let regions = component_regions(model);
    let distinct: BTreeSet<Region> = regions.iter().copied().collect();
    if distinct.len() != regions.len() {
        return Err(SmilePcaError::AmbiguousLabel { regions });
    }
    Ok(regions)
}

/// Scores `S = X B`.
pub fn project(model: &PcaModel, panel: &DeltaIvPanel) -> ScoreSeries {
    MinuteSeries {
        stamps: panel.stamps.clone(),
        values: &panel.values * &model.loadings,
        deseasonalized: false,
    }
}

pub fn project_and_label(
    model: &PcaModel,
    panel: &DeltaIvPanel,
) -> Result<(ScoreSeries, Vec<Region>), SmilePcaError> {
    let labels = label_components(model)?;
    Ok((project(model, panel), labels))
}

pub fn write_loadings<W: Write>(models: &[(Maturity, PcaModel)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["maturity", "component", "bin_lo", "loading"])?;
    let edges = bin_lower_edges();
    for (maturity, model) in models {
        for (j, col) in model.loadings.column_iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                w.write_record([
                    maturity.label().to_string(),
                    (j + 1).to_string(),
                    format!("{:.2}", edges[i]),
                    fmt_num(*v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores<W: Write>(scores: &ScoreSeries, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["day".to_string(), "minute".to_string()];
    header.extend((1..=scores.values.ncols()).map(|j| format!("pc{j}")));
    w.write_record(&header)?;
    for (i, s) in scores.stamps.iter().enumerate() {
        let mut rec = vec![format_date(s.day), s.minute.to_string()];
        rec.extend(scores.values.row(i).iter().map(|v| fmt_num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
