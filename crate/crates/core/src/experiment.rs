//! Experiment specs and the lifecycle that runs one:
//! generate, ingest, warm-up, run, check, report, cleanup.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audit::write_jsonl;
use crate::checkers::{run_all, CheckResults, DEFAULT_REQUIRED_PAIRS};
use crate::consistency::ConsistencyConfig;
use crate::dataset::{generate_data, Dataset};
use crate::driver::{Driver, RunOutput};
use crate::event::EventType;
use crate::fabric::{DeliveryConfig, EventOrdering, FaultRule};
use crate::report::{exit_code, BenchmarkReport, Thresholds, EXIT_SPEC};
use crate::runtime::{Marketplace, RuntimeConfig, StateSnapshot};
use crate::services::ReservationPolicy;
use crate::workload::WorkloadConfig;

/// Environment variables the CLI reads as overrides.
pub const SEED_ENV: &str = "MARKETPLACE_SEED";
pub const CONCURRENCY_ENV: &str = "MARKETPLACE_CONCURRENCY";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("cannot {action} in phase {phase:?}")]
    Lifecycle { action: &'static str, phase: Phase },
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Spec(_) => EXIT_SPEC,
            _ => crate::report::EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceOptions {
    pub reservation_policy: ReservationPolicy,
    pub disable_compensation: bool,
    pub replica_window: usize,
    pub delivery_sellers: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        let r = RuntimeConfig::default();
        Self {
            reservation_policy: r.reservation_policy,
            disable_compensation: r.disable_compensation,
            replica_window: r.replica_window,
            delivery_sellers: r.delivery_sellers,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: String,
    pub workload: WorkloadConfig,
    pub consistency: ConsistencyConfig,
    /// `ordering` follows `consistency.event_ordering`; `seed` is an offset
    /// added to the workload seed.
    pub delivery: DeliveryConfig,
    pub services: ServiceOptions,
    /// Armed after warm-up, so only the measured run is perturbed.
    pub faults: Vec<FaultRule>,
    pub thresholds: Thresholds,
    pub required_pairs: Vec<(EventType, EventType)>,
    pub output: OutputPaths,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            workload: WorkloadConfig::default(),
            consistency: ConsistencyConfig::default(),
            delivery: DeliveryConfig::default(),
            services: ServiceOptions::default(),
            faults: Vec::new(),
            thresholds: Thresholds::default(),
            required_pairs: DEFAULT_REQUIRED_PAIRS.to_vec(),
            output: OutputPaths::default(),
        }
    }
}

impl ExperimentSpec {
    /// Parses TOML or JSON, chosen by extension; other extensions try both.
    pub fn parse(text: &str, path_hint: Option<&Path>) -> Result<Self, ExperimentError> {
        let ext = path_hint.and_then(|p| p.extension()).and_then(|e| e.to_str());
        let spec: Self = match ext {
            Some("json") => serde_json::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?,
            Some("toml") => toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?,
            _ => match toml::from_str(text) {
                Ok(s) => s,
                Err(t) => serde_json::from_str(text)
                    .map_err(|j| ExperimentError::Spec(format!("neither TOML ({t}) nor JSON ({j})")))?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Spec(format!("{}: {e}", path.display())))?;
        Self::parse(&text, Some(path))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.workload
            .validate()
            .map_err(|e| ExperimentError::Spec(e.to_string()))?;
        if self.delivery.ordering == EventOrdering::Causal && self.consistency.event_ordering != EventOrdering::Causal {
            return Err(ExperimentError::Spec(
                "delivery.ordering is CAUSAL but consistency.event_ordering is not; set the latter".into(),
            ));
        }
        if self.services.delivery_sellers == 0 {
            return Err(ExperimentError::Spec(
                "services.delivery_sellers must be positive".into(),
            ));
        }
        self.runtime_config()
            .delivery
            .validate()
            .map_err(|e| ExperimentError::Spec(e.to_string()))
    }

    /// Applies seed and concurrency overrides, then revalidates.
    pub fn apply_overrides(&mut self, seed: Option<u64>, concurrency: Option<u32>) -> Result<(), ExperimentError> {
        if let Some(s) = seed {
            self.workload.seed = s;
        }
        if let Some(c) = concurrency {
            self.workload.concurrency_level = c;
        }
        self.validate()
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        let mut delivery = self.delivery.clone();
        delivery.ordering = self.consistency.event_ordering;
        delivery.seed = self.workload.seed.wrapping_add(self.delivery.seed);
        RuntimeConfig {
            consistency: self.consistency.clone(),
            delivery,
            reservation_policy: self.services.reservation_policy,
            disable_compensation: self.services.disable_compensation,
            replica_window: self.services.replica_window,
            delivery_sellers: self.services.delivery_sellers,
        }
    }

    /// The spec as echoed into the report: effective settings, no paths.
    pub fn echo(&self) -> serde_json::Value {
        let mut echo = self.clone();
        echo.output = OutputPaths::default();
        echo.delivery = self.runtime_config().delivery;
        let mut v = serde_json::to_value(echo).expect("spec serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    Generated,
    Ingested,
    WarmedUp,
    Ran,
    Checked,
    Reported,
    CleanedUp,
}

/// Wall-clock milliseconds per phase. Kept out of the report so reports stay
/// reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phases: Vec<(Phase, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub audit: PathBuf,
    pub measurements: PathBuf,
    pub dashboards: PathBuf,
    pub report: PathBuf,
    pub timing: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            audit: dir.join("audit.jsonl"),
            measurements: dir.join("measurements.jsonl"),
            dashboards: dir.join("dashboards.jsonl"),
            report: dir.join("report.json"),
            timing: dir.join("timing.json"),
        }
    }
}

type Step = fn(&mut Experiment) -> Result<(), ExperimentError>;

pub struct Experiment {
    spec: ExperimentSpec,
    phase: Phase,
    market: Arc<Marketplace>,
    dataset: Option<Dataset>,
    driver: Option<Driver<Arc<Marketplace>>>,
    output: Option<RunOutput>,
    checks: Option<CheckResults>,
    report: Option<BenchmarkReport>,
    failure: Option<String>,
    timing: Timing,
}

impl Experiment {
    pub fn new(spec: ExperimentSpec) -> Result<Self, ExperimentError> {
        spec.validate()?;
        let market = Marketplace::new(spec.runtime_config()).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        Ok(Self {
            spec,
            phase: Phase::Created,
            market: Arc::new(market),
            dataset: None,
            driver: None,
            output: None,
            checks: None,
            report: None,
            failure: None,
            timing: Timing::default(),
        })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn market(&self) -> &Arc<Marketplace> {
        &self.market
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.dataset.as_ref()
    }

    pub fn output(&self) -> Option<&RunOutput> {
        self.output.as_ref()
    }

    pub fn checks(&self) -> Option<&CheckResults> {
        self.checks.as_ref()
    }

    pub fn report(&self) -> Option<&BenchmarkReport> {
        self.report.as_ref()
    }

    pub fn timing(&self) -> &Timing {
        &self.timing
    }

    fn enter(&mut self, expected: Phase, action: &'static str) -> Result<Instant, ExperimentError> {
        if self.phase != expected {
            return Err(ExperimentError::Lifecycle {
                action,
                phase: self.phase,
            });
        }
        Ok(Instant::now())
    }

    fn leave(&mut self, next: Phase, started: Instant) {
        self.timing.phases.push((next, started.elapsed().as_secs_f64() * 1e3));
        self.phase = next;
    }

    /// Records a runtime failure and skips to checking, so a partial report
    /// can still be produced.
    fn fail(&mut self, error: String) {
        tracing::error!(%error, "run aborted");
        self.failure.get_or_insert(error);
        if let Some(d) = &self.driver {
            self.output = Some(d.output());
        }
        self.phase = Phase::Ran;
    }

    pub fn generate(&mut self) -> Result<(), ExperimentError> {
        let t = self.enter(Phase::Created, "generate")?;
        let data = generate_data(&self.spec.workload).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        self.dataset = Some(data);
        self.leave(Phase::Generated, t);
        Ok(())
    }

    pub fn ingest(&mut self) -> Result<(), ExperimentError> {
        let t = self.enter(Phase::Generated, "ingest")?;
        let data = self.dataset.as_ref().expect("generated");
        if let Err(e) = self.market.ingest(data) {
            self.fail(e.to_string());
            return Err(ExperimentError::Runtime(e.to_string()));
        }
        match Driver::new(Arc::clone(&self.market), self.spec.workload.clone(), data) {
            Ok(d) => self.driver = Some(d),
            Err(e) => return Err(ExperimentError::Spec(e.to_string())),
        }
        self.leave(Phase::Ingested, t);
        Ok(())
    }

    pub fn warmup(&mut self) -> Result<(), ExperimentError> {
        let t = self.enter(Phase::Ingested, "warm up")?;
        if let Err(e) = self.driver.as_ref().expect("ingested").warmup() {
            self.fail(e.to_string());
            return Err(ExperimentError::Runtime(e.to_string()));
        }
        for rule in &self.spec.faults {
            self.market.inject_fault(rule.clone());
        }
        self.leave(Phase::WarmedUp, t);
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), ExperimentError> {
        let t = self.enter(Phase::WarmedUp, "run")?;
        let driver = self.driver.as_ref().expect("warmed up");
        if let Err(e) = driver.run_workload() {
            self.fail(e.to_string());
            return Err(ExperimentError::Runtime(e.to_string()));
        }
        self.output = Some(driver.output());
        self.leave(Phase::Ran, t);
        Ok(())
    }

    pub fn check(&mut self) -> Result<(), ExperimentError> {
        let t = self.enter(Phase::Ran, "check")?;
        let audit = self.market.audit().snapshot();
        let stock = self.market.snapshot().stock;
        let dashboards = self
            .output
            .as_ref()
            .map(|o| o.dashboards.as_slice())
            .unwrap_or_default();
        self.checks = Some(run_all(&audit, dashboards, &stock, &self.spec.required_pairs));
        self.leave(Phase::Checked, t);
        Ok(())
    }

    /// Builds the report and, given a directory, writes every artifact.
    pub fn emit_report(&mut self, out_dir: Option<&Path>) -> Result<&BenchmarkReport, ExperimentError> {
        let t = self.enter(Phase::Checked, "emit a report")?;
        let mut report = match &self.output {
            Some(out) => BenchmarkReport::build(
                &self.spec.scenario,
                out,
                self.checks.as_ref().expect("checked"),
                self.market.orphan_compensations(),
                self.spec.echo(),
                &self.spec.thresholds,
            ),
            None => BenchmarkReport::failed(
                &self.spec.scenario,
                self.failure.clone().unwrap_or_else(|| "no run output".into()),
                self.spec.echo(),
            ),
        };
        if let Some(err) = &self.failure {
            report.valid = false;
            report.error = Some(format!("partial: {err}"));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            let paths = Artifacts::in_dir(dir);
            write_jsonl(
                &self.market.audit().snapshot(),
                io::BufWriter::new(fs::File::create(&paths.audit)?),
            )?;
            let out = self.output.clone().unwrap_or(RunOutput {
                measurements: vec![],
                dashboards: vec![],
                accounting: Default::default(),
            });
            write_lines(&paths.measurements, &out.measurements)?;
            write_lines(&paths.dashboards, &out.dashboards)?;
            fs::write(&paths.report, report.to_json())?;
        }
        self.report = Some(report);
        self.leave(Phase::Reported, t);
        if let Some(dir) = out_dir {
            let timing = serde_json::to_string_pretty(&self.timing).expect("timing serializes");
            fs::write(Artifacts::in_dir(dir).timing, timing + "\n")?;
        }
        Ok(self.report.as_ref().expect("just set"))
    }

    /// Resets the services and drops driver state. Idempotent.
    pub fn cleanup(&mut self) -> Result<(), ExperimentError> {
        match self.phase {
            Phase::CleanedUp => return Ok(()),
            Phase::Reported => {}
            phase => {
                return Err(ExperimentError::Lifecycle {
                    action: "clean up",
                    phase,
                })
            }
        }
        let t = Instant::now();
        self.driver = None;
        self.market.reset();
        self.leave(Phase::CleanedUp, t);
        Ok(())
    }

    /// Runs every phase. Runtime failures still yield a report flagged
    /// invalid; only spec and io errors return `Err`.
    pub fn execute(spec: ExperimentSpec, out_dir: Option<&Path>) -> Result<Completed, ExperimentError> {
        let mut exp = Self::new(spec)?;
        exp.generate()?;
        let steps: [Step; 3] = [Self::ingest, Self::warmup, Self::run];
        for step in steps {
            match step(&mut exp) {
                Ok(()) => {}
                Err(ExperimentError::Runtime(_)) => break,
                Err(e) => return Err(e),
            }
        }
        exp.check()?;
        let report = exp.emit_report(out_dir)?.clone();
        let exit = exit_code(&report, &exp.spec.thresholds);
        let audit = exp.market.audit().snapshot();
        let state = exp.market.snapshot();
        let output = exp.output.take();
        let checks = exp.checks.take();
        let timing = exp.timing.clone();
        exp.cleanup()?;
        Ok(Completed {
            report,
            exit_code: exit,
            audit,
            state,
            output,
            checks,
            timing,
        })
    }
}

/// Everything a finished experiment leaves behind.
pub struct Completed {
    pub report: BenchmarkReport,
    pub exit_code: i32,
    pub audit: Vec<crate::audit::AuditEntry>,
    /// Service state at quiescence, taken before cleanup.
    pub state: StateSnapshot,
    pub output: Option<RunOutput>,
    pub checks: Option<CheckResults>,
    pub timing: Timing,
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r).map_err(io::Error::other)?);
        buf.push('\n');
    }
    fs::write(path, buf)
}
