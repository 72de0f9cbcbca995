//! One function per subcommand. Each reads its inputs from the output
//! directory (running the producing stage first when an artifact is
//! missing), writes its own artifacts and returns a one-line summary.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ivjump::eventstudy::{write_curves, write_regression_report};
use ivjump::jumps::{read_label_report, write_jump_report, write_label_report, DayClass, DayLabel};
use ivjump::marketdata::{parse_option_quotes, parse_rates, parse_underlying, DayPrices, MarketData, RateCurve};
use ivjump::pipeline::{
    build_surfaces, build_variables, curves, detect, regressions, robustness, write_redraw_report, Analysis,
    Detection, SurfaceRun, Variables,
};
use ivjump::simulator::simulate_market;
use ivjump::smilepca::{delta_panel, project, write_loadings, write_scores};
use ivjump::surface::{read_smile_dumps, write_atm_dump, write_smile_dump, SmileSample};
use log::info;

use crate::config::PipelineConfig;
use crate::plot::{read_curve_table, read_loadings, render_curves, render_loadings};

pub const CONFIG_ECHO: &str = "config.resolved";

pub struct Runner {
    pub config: PipelineConfig,
    /// Summaries of stages run implicitly to produce missing inputs.
    pub notes: Vec<String>,
}

fn create(stage: &str, path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("{stage}: creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn require(stage: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{stage}: input {} does not exist", path.display());
    }
    Ok(())
}

fn slug(s: &str) -> String {
    s.to_lowercase()
}

/// `curves_atm-iv_3m_exclude` to `ATM-IV 3m, jump minute excluded`.
fn curve_title(stem: &str) -> String {
    let parts: Vec<&str> = stem.trim_start_matches("curves_").split('_').collect();
    match parts.as_slice() {
        [variable, maturity, mode] => {
            let mode = if *mode == "include" { "included" } else { "excluded" };
            format!("{} {maturity}, jump minute {mode}", variable.to_uppercase().replace("CALL", "Call").replace("PUT", "Put"))
        }
        _ => stem.to_string(),
    }
}

fn count(labels: &[DayLabel], class: DayClass) -> usize {
    labels.iter().filter(|l| l.class == class).count()
}

impl Runner {
    pub fn new(config: PipelineConfig) -> Runner {
        Runner {
            config,
            notes: Vec::new(),
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output.join(name)
    }

    /// Creates the output directory and writes the resolved configuration.
    pub fn prepare(&self, stage: &str) -> Result<()> {
        let dir = &self.config.output;
        std::fs::create_dir_all(dir).with_context(|| format!("{stage}: creating {}", dir.display()))?;
        let echo = self.out(CONFIG_ECHO);
        std::fs::write(&echo, self.config.to_text()).with_context(|| format!("{stage}: writing {}", echo.display()))
    }

    pub fn run(&mut self, stage: &str) -> Result<String> {
        self.prepare(stage)?;
        match stage {
            "simulate" => self.simulate(),
            "detect" => self.detect().map(|(summary, _)| summary),
            "surfaces" => self.surfaces().map(|(summary, _)| summary),
            "pca" => self.pca(),
            "eventstudy" => self.eventstudy(),
            "robustness" => self.robustness(),
            "plot" => self.plot(),
            other => bail!("unknown stage `{other}`"),
        }
    }

    pub fn simulate(&self) -> Result<String> {
        let sim = simulate_market(&self.config.sim_config()).context("simulate")?;
        let dir = &self.config.output;
        sim.write_files(dir, self.config.quotes_until())
            .with_context(|| format!("simulate: writing into {}", dir.display()))?;
        let truth = sim.truth();
        let positive = truth.iter().filter(|j| j.sign > 0.0).count();
        Ok(format!(
            "simulate: {} days, {} planted jumps ({positive} up, {} down), quotes to {} -> {}",
            sim.paths.len(),
            truth.len(),
            truth.len() - positive,
            self.config.quotes_until(),
            dir.display()
        ))
    }

    fn prices(&self, stage: &str) -> Result<Vec<DayPrices>> {
        let path = self.config.underlying_path();
        require(stage, &path)?;
        let bars = parse_underlying(&path).with_context(|| format!("{stage}: reading {}", path.display()))?;
        Ok(MarketData::new(bars, Vec::new(), RateCurve::new()).day_prices())
    }

    pub fn detect(&self) -> Result<(String, Detection)> {
        let prices = self.prices("detect")?;
        let a = &self.config.analysis;
        let detection = detect(&prices, &a.jump, a.complete_until()).context("detect")?;
        let jumps = self.out("jumps.csv");
        write_jump_report(&detection.events, create("detect", &jumps)?)
            .with_context(|| format!("detect: writing {}", jumps.display()))?;
        let labels = self.out("labels.csv");
        write_label_report(&detection.labels, create("detect", &labels)?)
            .with_context(|| format!("detect: writing {}", labels.display()))?;
        let l = &detection.labels;
        let summary = format!(
            "detect: {} days, {} jumps; {} positive, {} negative, {} no-jump, {} excluded days",
            l.len(),
            detection.events.len(),
            count(l, DayClass::PositiveJump),
            count(l, DayClass::NegativeJump),
            count(l, DayClass::NoJump),
            count(l, DayClass::Excluded)
        );
        Ok((summary, detection))
    }

    pub fn surfaces(&self) -> Result<(String, SurfaceRun)> {
        const STAGE: &str = "surfaces";
        let (u, o, r) = (
            self.config.underlying_path(),
            self.config.options_path(),
            self.config.rates_path(),
        );
        for p in [&u, &o, &r] {
            require(STAGE, p)?;
        }
        let read = |p: &Path| format!("{STAGE}: reading {}", p.display());
        let data = MarketData::new(
            parse_underlying(&u).with_context(|| read(&u))?,
            parse_option_quotes(&o).with_context(|| read(&o))?,
            parse_rates(&r).with_context(|| read(&r))?,
        );
        data.check_rates().with_context(|| read(&r))?;
        let a = &self.config.analysis;
        let run = build_surfaces(
            &data,
            &data.day_prices(),
            data.rates(),
            a.surface_until(),
            &a.surface,
            &a.maturities,
            a.pca_variables,
        );
        let smiles = self.out("smiles.csv");
        write_smile_dump(&run.samples, create(STAGE, &smiles)?)
            .with_context(|| format!("{STAGE}: writing {}", smiles.display()))?;
        let atm = self.out("atm.csv");
        write_atm_dump(&run.samples, create(STAGE, &atm)?)
            .with_context(|| format!("{STAGE}: writing {}", atm.display()))?;
        let summary = format!(
            "surfaces: {} slices over {} maturities to {}, {} minutes without a surface, {} quotes dropped",
            run.samples.len(),
            a.maturities.len(),
            a.surface_until(),
            run.failed_minutes,
            run.dropped_quotes
        );
        Ok((summary, run))
    }

    fn labels(&mut self, stage: &str) -> Result<Vec<DayLabel>> {
        let path = self.out("labels.csv");
        if !path.is_file() {
            info!("{stage}: {} missing, running detect", path.display());
            let (summary, _) = self.detect()?;
            self.notes.push(summary);
        }
        let file = File::open(&path).with_context(|| format!("{stage}: opening {}", path.display()))?;
        read_label_report(BufReader::new(file)).with_context(|| format!("{stage}: reading {}", path.display()))
    }

    fn samples(&mut self, stage: &str) -> Result<Vec<SmileSample>> {
        let (smiles, atm) = (self.out("smiles.csv"), self.out("atm.csv"));
        if !(smiles.is_file() && atm.is_file()) {
            info!("{stage}: smile dumps missing, running surfaces");
            let (summary, _) = self.surfaces()?;
            self.notes.push(summary);
        }
        // Always the dumped values, so later runs see exactly the same input.
        let open = |p: &Path| File::open(p).with_context(|| format!("{stage}: opening {}", p.display()));
        read_smile_dumps(BufReader::new(open(&smiles)?), BufReader::new(open(&atm)?))
            .with_context(|| format!("{stage}: reading {} and {}", smiles.display(), atm.display()))
    }

    fn variables(&mut self, stage: &str) -> Result<(Vec<DayLabel>, Vec<SmileSample>, Variables)> {
        let labels = self.labels(stage)?;
        let samples = self.samples(stage)?;
        let variables = build_variables(&samples, &labels, &self.config.analysis).context(stage.to_string())?;
        Ok((labels, samples, variables))
    }

    pub fn pca(&mut self) -> Result<String> {
        const STAGE: &str = "pca";
        let config = PipelineConfig {
            analysis: ivjump::pipeline::AnalysisConfig {
                pca_variables: true,
                ..self.config.analysis.clone()
            },
            ..self.config.clone()
        };
        let saved = std::mem::replace(&mut self.config, config);
        let result = self.variables(STAGE);
        self.config = saved;
        let (_, samples, variables) = result?;
        if variables.models.is_empty() {
            bail!("{STAGE}: no maturity produced a component model (are full smiles in smiles.csv?)");
        }
        let pairs: Vec<_> = variables.models.iter().map(|m| (m.maturity, m.model.clone())).collect();
        let loadings = self.out("loadings.csv");
        write_loadings(&pairs, create(STAGE, &loadings)?)
            .with_context(|| format!("{STAGE}: writing {}", loadings.display()))?;
        let mut parts = Vec::new();
        for cm in &variables.models {
            let panel = delta_panel(&samples, cm.maturity);
            let path = self.out(&format!("scores_{}.csv", cm.maturity.label()));
            write_scores(&project(&cm.model, &panel), create(STAGE, &path)?)
                .with_context(|| format!("{STAGE}: writing {}", path.display()))?;
            let explained: Vec<String> = cm.model.explained.iter().map(|e| format!("{e:.2}")).collect();
            let labels = cm.regions.as_ref().map_or("unlabelled".to_string(), |r| {
                r.iter().map(|r| r.label()).collect::<Vec<_>>().join("/")
            });
            parts.push(format!("{} explained {} ({labels})", cm.maturity, explained.join("/")));
        }
        Ok(format!("pca: {}", parts.join("; ")))
    }

    pub fn eventstudy(&mut self) -> Result<String> {
        const STAGE: &str = "eventstudy";
        let (labels, _, variables) = self.variables(STAGE)?;
        let a = &self.config.analysis;
        let rows = regressions(&variables, &labels, a);
        if rows.is_empty() {
            bail!("{STAGE}: no regression could be fitted");
        }
        let report = self.out("regressions.csv");
        write_regression_report(&rows, create(STAGE, &report)?)
            .with_context(|| format!("{STAGE}: writing {}", report.display()))?;
        let sets = curves(&variables, &labels, a);
        for set in &sets {
            let mode = if set.include_first { "include" } else { "exclude" };
            let path = self.out(&format!(
                "curves_{}_{}_{mode}.csv",
                slug(&set.variable.to_string()),
                set.maturity.label()
            ));
            write_curves(&set.curves, &set.band, create(STAGE, &path)?)
                .with_context(|| format!("{STAGE}: writing {}", path.display()))?;
        }
        let head = rows
            .iter()
            .find(|r| !r.spec.include_first)
            .unwrap_or(&rows[0]);
        Ok(format!(
            "eventstudy: {} regressions, {} curve tables; {} {} W={} betan {:.4} (p {:.2e}, N {})",
            rows.len(),
            sets.len(),
            head.variable,
            head.maturity,
            head.spec.window,
            head.fit.beta[2],
            head.fit.p[2],
            head.fit.n
        ))
    }

    pub fn robustness(&mut self) -> Result<String> {
        const STAGE: &str = "robustness";
        let prices = self.prices(STAGE)?;
        let a = self.config.analysis.clone();
        let detection = detect(&prices, &a.jump, a.complete_until()).context(STAGE)?;
        let samples = self.samples(STAGE)?;
        let variables = build_variables(&samples, &detection.labels, &a).context(STAGE)?;
        let rows = regressions(&variables, &detection.labels, &a);
        let analysis = Analysis {
            detection,
            surfaces: SurfaceRun {
                samples,
                ..SurfaceRun::default()
            },
            variables,
            regressions: rows,
        };
        let report = robustness(&analysis, &prices, &a).context(STAGE)?;
        let alpha = self.out("robustness_alpha.csv");
        write_regression_report(&report.alpha, create(STAGE, &alpha)?)
            .with_context(|| format!("{STAGE}: writing {}", alpha.display()))?;
        let extended = self.out("robustness_extended.csv");
        write_regression_report(&report.extended, create(STAGE, &extended)?)
            .with_context(|| format!("{STAGE}: writing {}", extended.display()))?;
        let redraws = self.out("redraws.csv");
        write_redraw_report(&report.redraws, create(STAGE, &redraws)?)
            .with_context(|| format!("{STAGE}: writing {}", redraws.display()))?;
        Ok(format!(
            "robustness: {} rows at alpha 0.05, {} rows to 12:30, {} re-draw summaries of {} iterations",
            report.alpha.len(),
            report.extended.len(),
            report.redraws.len(),
            a.redraws
        ))
    }

    pub fn plot(&self) -> Result<String> {
        const STAGE: &str = "plot";
        let dir = &self.config.output;
        let mut tables: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("{STAGE}: listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|e| e == "csv")
                    && p.file_stem()
                        .and_then(|s| s.to_str())
                        .is_some_and(|s| s.starts_with("curves_") || s == "loadings")
            })
            .collect();
        tables.sort();
        if tables.is_empty() {
            bail!("{STAGE}: no curves_*.csv or loadings.csv in {}", dir.display());
        }
        let plots = self.out("plots");
        std::fs::create_dir_all(&plots).with_context(|| format!("{STAGE}: creating {}", plots.display()))?;
        let mut written = 0;
        for path in &tables {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem == "loadings" {
                let table = read_loadings(path).with_context(|| STAGE.to_string())?;
                for (maturity, components) in &table {
                    let svg = render_loadings(&format!("Varimax-rotated loadings, {maturity}"), components);
                    let out = plots.join(format!("loadings_{maturity}.svg"));
                    std::fs::write(&out, svg).with_context(|| format!("{STAGE}: writing {}", out.display()))?;
                    written += 1;
                }
            } else {
                let table = read_curve_table(path).with_context(|| STAGE.to_string())?;
                let title = curve_title(stem);
                let out = plots.join(format!("{stem}.svg"));
                std::fs::write(&out, render_curves(&title, &table))
                    .with_context(|| format!("{STAGE}: writing {}", out.display()))?;
                written += 1;
            }
        }
        Ok(format!("plot: {written} charts from {} tables -> {}", tables.len(), plots.display()))
    }
}
