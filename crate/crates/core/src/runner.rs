//! Runs cells: builds the scenario, instantiates the protocol, drives the simulation.

use crate::engine::{RunOptions, RunReport, Simulation};
use crate::metrics::{finalize, MetricsRecord};
use crate::protocols::{Basic, Etora, Mdart, MdartError, MdartParams, ProtocolKind, RoutingProtocol, Terp};
use crate::scenarios::{build_scenario, Scenario, ScenarioConfig, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Addressing(#[from] MdartError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CellOptions {
    pub trace: bool,
    pub audit: bool,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub record: MetricsRecord,
    pub report: RunReport,
}

/// Schedules the scenario on a fresh simulation and runs it to its end time.
pub fn simulate<P: RoutingProtocol>(cfg: &ScenarioConfig, scenario: &Scenario, protocol: P, opts: CellOptions) -> Simulation<P> {
    let run = RunOptions {
        sizes: cfg.packet_sizes.clone(),
        latency_ms: (cfg.latency_min_ms, cfg.latency_max_ms),
        seed: cfg.seed,
        trace: opts.trace,
        audit: opts.audit,
    };
    let mut sim = Simulation::new(scenario.network.clone(), protocol, run);
    for p in &scenario.workload {
        sim.schedule_payment(p.at, p.src, p.dst, p.amount);
    }
    sim.schedule_samples(scenario.window_start, scenario.window_end, cfg.channel_samples);
    sim.set_end(scenario.end);
    sim.run();
    sim
}

pub fn mdart_params(cfg: &ScenarioConfig) -> MdartParams {
    let mut p = cfg.protocols.mdart.clone();
    if p.register_at_ms == MdartParams::default().register_at_ms {
        p.register_at_ms = cfg.warmup_ms.saturating_sub(2_000);
    }
    p
}

fn finish<P: RoutingProtocol>(cfg: &ScenarioConfig, sim: Simulation<P>) -> CellOutcome {
    let report = sim.finish();
    let record = finalize(
        cfg.scenario.name(),
        cfg.size.name(),
        cfg.protocol.name(),
        cfg.seed,
        &report,
    );
    CellOutcome { record, report }
}

pub fn run_cell_with(cfg: &ScenarioConfig, opts: CellOptions) -> Result<CellOutcome, RunError> {
    let scenario = build_scenario(cfg)?;
    let n = scenario.network.node_count();
    let p = &cfg.protocols;
    Ok(match cfg.protocol {
        ProtocolKind::Basic => finish(cfg, simulate(cfg, &scenario, Basic::new(&scenario.network), opts)),
        ProtocolKind::Etora => finish(cfg, simulate(cfg, &scenario, Etora::new(n, p.etora.clone()), opts)),
        ProtocolKind::Terp => finish(cfg, simulate(cfg, &scenario, Terp::new(n, p.terp.clone()), opts)),
        ProtocolKind::Mdart => {
            let proto = Mdart::new(&scenario.network, mdart_params(cfg))?;
            finish(cfg, simulate(cfg, &scenario, proto, opts))
        }
    })
}

pub fn run_cell(cfg: &ScenarioConfig) -> Result<MetricsRecord, RunError> {
    run_cell_with(cfg, CellOptions::default()).map(|o| o.record)
}

/// Applies `f` to every cell on up to `jobs` workers; results keep the input order.
#[cfg(feature = "parallel")]
pub fn map_cells<T, F>(cells: &[ScenarioConfig], jobs: usize, f: F) -> Result<Vec<T>, RunError>
where
    T: Send,
    F: Fn(&ScenarioConfig) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return Ok(cells.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    Ok(pool.install(|| cells.par_iter().map(f).collect()))
}

#[cfg(not(feature = "parallel"))]
pub fn map_cells<T, F>(cells: &[ScenarioConfig], _jobs: usize, f: F) -> Result<Vec<T>, RunError>
where
    F: Fn(&ScenarioConfig) -> T,
{
    Ok(cells.iter().map(f).collect())
}

pub fn run_cells(cells: &[ScenarioConfig], jobs: usize) -> Result<Vec<MetricsRecord>, RunError> {
    map_cells(cells, jobs, run_cell)?.into_iter().collect()
}

pub fn run_cells_sequential(cells: &[ScenarioConfig]) -> Result<Vec<MetricsRecord>, RunError> {
    cells.iter().map(run_cell).collect()
}
