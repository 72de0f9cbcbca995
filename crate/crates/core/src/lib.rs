//! Intraday option analytics: implied-volatility surfaces from minute
//! quotes, nonparametric return-jump detection, principal components of
//! smile changes and event-study regressions of post-jump IV dynamics,
//! with a synthetic market simulator for end-to-end validation.

pub mod marketdata;
pub mod pricing;
pub mod surface;
pub mod jumps;
pub mod smilepca;
pub mod eventstudy;
pub mod simulator;
pub mod pipeline;
