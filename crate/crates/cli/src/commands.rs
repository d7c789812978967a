//! The `run`, `serve` and `compare` subcommands. Each returns the process
//! exit code.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use marketplace::dataset::generate_data;
use marketplace::experiment::{Experiment, ExperimentError, ExperimentSpec};
use marketplace::report::{compare_table, BenchmarkReport, EXIT_OK, EXIT_RUNTIME, EXIT_SPEC};
use marketplace::runtime::Marketplace;

use crate::server;

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub concurrency: Option<u32>,
}

pub fn load(path: &Path, overrides: Overrides) -> Result<ExperimentSpec, ExperimentError> {
    let mut spec = ExperimentSpec::from_path(path)?;
    spec.apply_overrides(overrides.seed, overrides.concurrency)?;
    Ok(spec)
}

/// Runs one experiment and writes its artifacts to `out`, or to the spec's
/// output directory when `out` is absent.
pub fn run(spec_path: &Path, out: Option<&Path>, overrides: Overrides) -> i32 {
    let spec = match load(spec_path, overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let out_dir: PathBuf = match out.map(Path::to_path_buf).or_else(|| spec.output.dir.clone()) {
        Some(d) => d,
        None => {
            eprintln!("error: invalid spec: no output directory (pass --out or set output.dir)");
            return EXIT_SPEC;
        }
    };
    match Experiment::execute(spec, Some(&out_dir)) {
        Ok(done) => {
            let r = &done.report;
            if let Some(err) = &r.error {
                eprintln!("error: {err}");
            }
            for b in &r.breaches {
                eprintln!("threshold exceeded: {b}");
            }
            println!("{}", out_dir.join("report.json").display());
            done.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Ingests the spec's dataset and serves it until interrupted.
pub fn serve(spec_path: &Path, port: u16, overrides: Overrides) -> i32 {
    let spec = match load(spec_path, overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let market = match Marketplace::new(spec.runtime_config()) {
        Ok(m) => Arc::new(m),
        Err(e) => {
            eprintln!("error: invalid spec: {e}");
            return EXIT_SPEC;
        }
    };
    let ingested = generate_data(&spec.workload)
        .map_err(|e| e.to_string())
        .and_then(|d| market.ingest(&d).map_err(|e| e.to_string()));
    if let Err(e) = ingested {
        eprintln!("error: {e}");
        return EXIT_RUNTIME;
    }
    let handle = match server::spawn(market, SocketAddr::from((Ipv4Addr::LOCALHOST, port))) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: cannot listen on port {port}: {e}");
            return EXIT_RUNTIME;
        }
    };
    println!("listening on {}", handle.url());
    let waited = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .and_then(|rt| rt.block_on(tokio::signal::ctrl_c()));
    if let Err(e) = waited.and_then(|()| handle.stop()) {
        eprintln!("error: {e}");
        return EXIT_RUNTIME;
    }
    EXIT_OK
}

/// Runs every spec on the first spec's seed and dataset and renders the
/// comparison table.
pub fn compare_reports(specs: &[PathBuf], overrides: Overrides) -> Result<Vec<BenchmarkReport>, ExperimentError> {
    if specs.len() < 2 {
        return Err(ExperimentError::Spec("compare needs at least two specs".into()));
    }
    let mut loaded = specs
        .iter()
        .map(|p| load(p, overrides))
        .collect::<Result<Vec<_>, _>>()?;
    let base = loaded[0].workload.clone();
    let base_name = loaded[0].scenario.clone();
    for s in &mut loaded[1..] {
        s.workload.seed = base.seed;
        let w = &s.workload;
        let same_data = (
            w.num_customers,
            w.num_sellers,
            w.products_per_seller,
            w.spare_products_per_seller,
        ) == (
            base.num_customers,
            base.num_sellers,
            base.products_per_seller,
            base.spare_products_per_seller,
        ) && (w.min_price, w.max_price, w.initial_stock)
            == (base.min_price, base.max_price, base.initial_stock);
        if !same_data {
            return Err(ExperimentError::Spec(format!(
                "scenario {} generates a different dataset than {}",
                s.scenario, base_name
            )));
        }
    }
    loaded
        .into_iter()
        .map(|s| Experiment::execute(s, None).map(|d| d.report))
        .collect()
}

pub fn compare(specs: &[PathBuf], overrides: Overrides) -> i32 {
    match compare_reports(specs, overrides) {
        Ok(reports) => {
            print!("{}", compare_table(&reports));
            if reports.iter().all(|r| r.valid) {
                EXIT_OK
            } else {
                EXIT_RUNTIME
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
