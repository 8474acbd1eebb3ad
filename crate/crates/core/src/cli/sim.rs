//! Coupled time loop: stress assembly, flow substeps, history transport,
//! monitors, and checkpoints.
//!
//! Age step `n` takes `(u^n, H^n)` to `(u^{n+1}, H^{n+1})` with `τ^n` frozen
//! over the flow substeps, and emits the record for `t^n = n Δs`. The record
//! at `t^N` is emitted by one extra call after the last step.

use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, HistoryInit, SimulationConfig, VelocityInit};
use super::snapshot::{Snapshot, SnapshotError};
use crate::age::{build_age_grid, AgeError, AgeGrid};
use crate::constitutive::{model_catalog, ConstitutiveError, MemoryKernel, StrainMeasure};
use crate::diagnostics::{
    monitor, oldroyd_differential_step, relative_l2_gap, DiagnosticsRecord, MonitorConfig, MonitorInput,
    OracleError, OracleState,
};
use crate::flow::{cfl_dt, FlowError, FlowState, FlowStepper};
use crate::history::{DeformationHistory, HistoryError, InitHistory, VelocitySample};
use crate::spectral::{GridError, Spectral, TensorField2, TorusGrid, VectorField};
use crate::stress::{
    assemble_stress, stress_sup_bound, y_integrand_from_norms, y_integrand_now, StressError,
};
use crate::tensor::Mat2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
    #[error(transparent)]
    Age(#[from] AgeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Stress(#[from] StressError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl SimError {
    /// True when the run diverged to NaN or infinity.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            SimError::Flow(FlowError::NonFinite { .. })
                | SimError::History(HistoryError::NonFinite { .. })
                | SimError::Oracle(OracleError::NonFinite(_))
        )
    }
}

/// A diagnostics record plus the oracle comparison, when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub record: DiagnosticsRecord,
    pub oracle_gap: Option<f64>,
    pub substeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    y_prev: Option<f64>,
    integrand_prev: Option<f64>,
    slices: usize,
    oracle_t: Option<f64>,
    config: String,
}

/// State needed to resume before emitting record `step`.
#[derive(Clone)]
struct Resumable {
    step: usize,
    u: VectorField,
    history: DeformationHistory,
    prev: Option<(f64, f64)>,
    oracle: Option<OracleState>,
}

pub struct Simulation {
    cfg: SimulationConfig,
    sp: Spectral,
    stepper: FlowStepper,
    kernel: MemoryKernel,
    measure: StrainMeasure,
    ages: AgeGrid,
    monitor_cfg: MonitorConfig,
    steps: usize,
    ds: f64,
    step: usize,
    finished: bool,
    flow: FlowState,
    history: DeformationHistory,
    tau: TensorField2,
    /// `(y^{n−1}, I^{n−1})`
    prev: Option<(f64, f64)>,
    /// `prev` as it was before the final record.
    final_prev: Option<(f64, f64)>,
    oracle: Option<OracleState>,
    last_good: Option<Resumable>,
}

/// Divergence-free field with random Fourier coefficients for `1 ≤ |k|∞ ≤ band`,
/// scaled to `|u|∞ = amplitude`.
pub fn random_band_limited(grid: &TorusGrid, seed: u64, band: usize, amplitude: f64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = band as i64;
    let mut modes = Vec::new();
    for k1 in 0..=b {
        for k2 in -b..=b {
            if k1 == 0 && k2 <= 0 {
                continue;
            }
            let decay = 1.0 / ((k1 * k1 + k2 * k2) as f64);
            let a: f64 = rng.sample::<f64, _>(StandardNormal) * decay;
            let c: f64 = rng.sample::<f64, _>(StandardNormal) * decay;
            modes.push((k1 as f64, k2 as f64, a, c));
        }
    }
    // u = (∂₂ψ, −∂₁ψ) with ψ = Σ a cos(k·x) + c sin(k·x)
    let mut u = VectorField::from_fn(grid, |x, y| {
        modes.iter().fold([0.0, 0.0], |[u1, u2], &(k1, k2, a, c)| {
            let ph = k1 * x + k2 * y;
            let d = -a * ph.sin() + c * ph.cos();
            [u1 + k2 * d, u2 - k1 * d]
        })
    });
    let s = u.sup_norm();
    if s > 0.0 {
        u.scale(amplitude / s);
    }
    u
}

pub fn taylor_green(grid: &TorusGrid, amplitude: f64) -> VectorField {
    VectorField::from_fn(grid, |x, y| {
        [amplitude * x.sin() * y.cos(), -amplitude * x.cos() * y.sin()]
    })
}

fn initial_velocity(cfg: &SimulationConfig, grid: &TorusGrid) -> Result<VectorField, SimError> {
    let init = &cfg.initial;
    Ok(match init.velocity {
        VelocityInit::TaylorGreen => taylor_green(grid, init.amplitude),
        VelocityInit::RandomBandLimited => random_band_limited(grid, init.seed, init.band, init.amplitude),
        VelocityInit::Zero => VectorField::zeros(grid),
        VelocityInit::FromSnapshot => {
            let path = init.velocity_snapshot.as_deref().expect("validated");
            let u: VectorField = Snapshot::load(path)?.into_field()?;
            if u.n() != grid.n() {
                return Err(HistoryError::GridMismatch {
                    got: u.n(),
                    expected: grid.n(),
                }
                .into());
            }
            u
        }
    })
}

fn initial_history(
    cfg: &SimulationConfig,
    grid: &TorusGrid,
    ages: &AgeGrid,
) -> Result<DeformationHistory, SimError> {
    let mu = Some(cfg.estimates.mu);
    let spec = match cfg.initial.history {
        HistoryInit::Identity => InitHistory::Identity,
        HistoryInit::ModulatedIdentity => {
            let a = cfg.initial.modulation;
            InitHistory::Explicit(
                ages.nodes()
                    .iter()
                    .map(|&s| {
                        let w = a * (1.0 - (-s).exp());
                        TensorField2::from_mat_fn(grid, |x, _| Mat2::IDENTITY * (1.0 + w * x.sin()))
                    })
                    .collect(),
            )
        }
        HistoryInit::Snapshot => {
            let path = cfg.initial.history_snapshot.as_deref().expect("validated");
            InitHistory::Explicit(Snapshot::load(path)?.into_fields()?)
        }
    };
    Ok(DeformationHistory::init(spec, grid, ages, mu)?)
}

impl Simulation {
    pub fn new(cfg: &SimulationConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let grid = TorusGrid::new(cfg.grid.n)?;
        let u0 = initial_velocity(cfg, &grid)?;
        let mut sim = Self::skeleton(cfg, u0)?;
        sim.history = initial_history(cfg, &grid, &sim.ages)?;
        sim.tau = assemble_stress(&sim.history, &sim.measure, &sim.ages)?;
        if let Some(o) = sim.oracle.as_mut() {
            o.tau = sim.tau.clone();
        }
        Ok(sim)
    }

    fn skeleton(cfg: &SimulationConfig, u0: VectorField) -> Result<Self, SimError> {
        let grid = TorusGrid::new(cfg.grid.n)?;
        let sp = Spectral::new(grid);
        let stepper = FlowStepper::new(sp.clone(), cfg.fluid.eta)?;
        let (kernel, measure) = model_catalog(&cfg.model.name, &cfg.model.params)?;
        let ds = cfg.age_step();
        let ages = build_age_grid(&kernel, ds, cfg.memory.eps_tail, cfg.memory.max_age_nodes)?;
        let mut monitor_cfg = MonitorConfig::new(cfg.estimates.mu, cfg.estimates.q, cfg.estimates.r);
        monitor_cfg.det_tol = cfg.estimates.det_tol;
        monitor_cfg.norm_tol = cfg.estimates.det_tol;
        monitor_cfg.stress_bound = stress_sup_bound(&measure, &ages);
        monitor_cfg.gradient_constant = measure.bounds().map(|b| b.gradient);
        let oracle = if cfg.oracle.enabled {
            let p = &cfg.model.params;
            Some(OracleState::new(TensorField2::zeros(&grid), p.lambda, p.mu_p)?)
        } else {
            None
        };
        debug!(
            "age grid: {} nodes, Δs = {ds}, tail {:.3e}, quadrature tolerance {:.3e}",
            ages.len(),
            ages.tail_error(),
            ages.quad_tol()
        );
        let history = DeformationHistory::init(InitHistory::Identity, &grid, &ages, None)?;
        Ok(Self {
            cfg: cfg.clone(),
            flow: FlowState::new(&sp, 0.0, &u0),
            sp,
            stepper,
            kernel,
            measure,
            monitor_cfg,
            steps: cfg.steps(),
            ds,
            step: 0,
            finished: false,
            tau: TensorField2::zeros(&grid),
            history,
            ages,
            prev: None,
            final_prev: None,
            oracle,
            last_good: None,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn spectral(&self) -> &Spectral {
        &self.sp
    }

    pub fn kernel(&self) -> &MemoryKernel {
        &self.kernel
    }

    pub fn measure(&self) -> &StrainMeasure {
        &self.measure
    }

    pub fn ages(&self) -> &AgeGrid {
        &self.ages
    }

    pub fn monitor_config(&self) -> &MonitorConfig {
        &self.monitor_cfg
    }

    pub fn velocity(&self) -> &VectorField {
        &self.flow.u
    }

    pub fn stress(&self) -> &TensorField2 {
        &self.tau
    }

    pub fn history(&self) -> &DeformationHistory {
        &self.history
    }

    pub fn oracle(&self) -> Option<&OracleState> {
        self.oracle.as_ref()
    }

    pub fn age_step(&self) -> f64 {
        self.ds
    }

    pub fn total_steps(&self) -> usize {
        self.steps
    }

    /// Index of the next record.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn time(&self, n: usize) -> f64 {
        n as f64 * self.ds
    }

    fn resumable(&self) -> Resumable {
        Resumable {
            step: self.step,
            u: self.flow.u.clone(),
            history: self.history.clone(),
            prev: self.prev,
            oracle: self.oracle.clone(),
        }
    }

    fn restore(&mut self, r: Resumable) -> Result<(), SimError> {
        self.step = r.step;
        self.flow = FlowState {
            t: self.time(r.step),
            u: r.u,
        };
        self.history = r.history;
        self.prev = r.prev;
        self.oracle = r.oracle;
        self.finished = false;
        self.tau = assemble_stress(&self.history, &self.measure, &self.ages)?;
        Ok(())
    }

    /// Rolls back to the state before the last failed step, if any.
    pub fn rollback(&mut self) -> Result<bool, SimError> {
        match self.last_good.take() {
            Some(r) => {
                self.restore(r)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn record(&mut self, n: usize, v: &VelocitySample, stats: crate::history::DeformationStats, integrand: f64, substeps: usize) -> StepRecord {
        let y = match self.prev {
            None => 0.0,
            Some((y, i)) => y + 0.5 * self.ds * (i + integrand),
        };
        self.prev = Some((y, integrand));
        let record = monitor(
            &self.sp,
            MonitorInput {
                t: self.time(n),
                u: v,
                tau: &self.tau,
                deformation: stats,
                y_value: y,
                y_integrand: integrand,
            },
            &self.monitor_cfg,
        );
        let oracle_gap = self.oracle.as_ref().map(|o| relative_l2_gap(&self.tau, &o.tau));
        StepRecord {
            step: n,
            record,
            oracle_gap,
            substeps,
        }
    }

    /// Emits the next record, advancing one age step when one remains.
    /// Returns `None` once the final record has been emitted.
    pub fn advance(&mut self) -> Result<Option<StepRecord>, SimError> {
        if self.finished {
            return Ok(None);
        }
        let n = self.step;
        let q = self.cfg.estimates.q;
        let r = self.cfg.estimates.r;
        let v0 = VelocitySample::new(&self.sp, &self.flow.u);
        let stats = self.history.stats();
        if n == self.steps {
            let integrand = y_integrand_now(&self.sp, &self.history, &self.ages, q, r, self.cfg.estimates.mu)?;
            self.finished = true;
            self.final_prev = self.prev;
            return Ok(Some(self.record(n, &v0, stats, integrand, 0)));
        }
        self.last_good = Some(self.resumable());

        let base = self.cfg.time.dt;
        let adv = cfl_dt(&self.flow.u, &self.sp.grid(), self.cfg.time.cfl_safety, base);
        let k = self.cfg.time.age_step_factor;
        let m = if adv < base {
            k.max((self.ds / adv).ceil() as usize)
        } else {
            k
        };
        let h = self.ds / m as f64;
        let forcing = self.stepper.stress_forcing(&self.tau);
        let mut v_prev = v0.clone();
        for i in 0..m {
            self.flow.t = self.time(n) + i as f64 * h;
            self.stepper.step(&mut self.flow, h, &forcing, None)?;
            if let Some(o) = self.oracle.as_mut() {
                let v_next = VelocitySample::new(&self.sp, &self.flow.u);
                oldroyd_differential_step(&self.sp, o, &v_prev, &v_next, h)?;
                v_prev = v_next;
            }
        }
        let t_next = self.time(n + 1);
        self.flow.t = t_next;
        if let Some(o) = self.oracle.as_mut() {
            o.t = t_next;
        }
        let v1 = if self.oracle.is_some() {
            v_prev
        } else {
            VelocitySample::new(&self.sp, &self.flow.u)
        };
        let probe = self
            .history
            .advance(&self.sp, &v0, &v1, self.ds, Some(q))?
            .expect("probe requested");
        let integrand = y_integrand_from_norms(&probe.gradient_ratio_norms, &self.ages, r);
        let out = self.record(n, &v0, stats, integrand, m);
        self.tau = assemble_stress(&self.history, &self.measure, &self.ages)?;
        if !self.tau.is_finite() {
            return Err(FlowError::NonFinite {
                t: self.time(n + 1),
                sup_before: out.record.stress_sup,
            }
            .into());
        }
        self.step = n + 1;
        Ok(Some(out))
    }

    /// Runs to the end, returning every record.
    pub fn run_to_end(&mut self) -> Result<Vec<StepRecord>, SimError> {
        let mut out = Vec::new();
        while let Some(r) = self.advance()? {
            out.push(r);
        }
        Ok(out)
    }

    /// Writes `meta.json`, `u.bin`, `history.bin` and, with the oracle,
    /// `oracle_tau.bin` into `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        let (y_prev, integrand_prev) = match self.prev_for_checkpoint() {
            Some((y, i)) => (Some(y), Some(i)),
            None => (None, None),
        };
        let meta = CheckpointMeta {
            step: self.step,
            y_prev,
            integrand_prev,
            slices: self.history.len(),
            oracle_t: self.oracle.as_ref().map(|o| o.t),
            config: self.cfg.to_toml_string(),
        };
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        Snapshot::from_field(&self.flow.u).save(&dir.join("u.bin"))?;
        let slices: Vec<TensorField2> = self.history.slices().cloned().collect();
        Snapshot::from_fields(&slices, slices.len() as u32).save(&dir.join("history.bin"))?;
        if let Some(o) = &self.oracle {
            Snapshot::from_field(&o.tau).save(&dir.join("oracle_tau.bin"))?;
        }
        Ok(())
    }

    /// `(y, I)` preceding the next record to emit.
    fn prev_for_checkpoint(&self) -> Option<(f64, f64)> {
        if self.finished {
            self.final_prev
        } else {
            self.prev
        }
    }

    /// Resumes from a checkpoint; `cfg` may extend `t_final`.
    pub fn from_checkpoint(cfg: &SimulationConfig, dir: &Path) -> Result<Self, SimError> {
        cfg.validate()?;
        let text = std::fs::read_to_string(dir.join("meta.json"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| SimError::Checkpoint(format!("meta.json: {e}")))?;
        let saved = SimulationConfig::from_toml_str(&meta.config)?;
        let mut same = saved.clone();
        same.time.t_final = cfg.time.t_final;
        same.output = cfg.output.clone();
        if same != *cfg {
            return Err(SimError::Checkpoint(
                "configuration differs from the checkpoint beyond t_final and output".into(),
            ));
        }
        let u: VectorField = Snapshot::load(&dir.join("u.bin"))?.into_field()?;
        let mut sim = Self::skeleton(cfg, VectorField::zeros(&TorusGrid::new(cfg.grid.n)?))?;
        if meta.step > sim.steps {
            return Err(SimError::Checkpoint(format!(
                "checkpoint at step {} is beyond t_final (step {})",
                meta.step, sim.steps
            )));
        }
        let fields: Vec<TensorField2> = Snapshot::load(&dir.join("history.bin"))?.into_fields()?;
        if fields.len() != sim.ages.len() || fields.len() != meta.slices {
            return Err(HistoryError::SliceCount {
                got: fields.len(),
                expected: sim.ages.len(),
            }
            .into());
        }
        let history = DeformationHistory::from_slices(&sim.sp.grid(), fields, meta.step as u64)?;
        let oracle = match (&sim.oracle, meta.oracle_t) {
            (Some(o), Some(t)) => {
                let tau: TensorField2 = Snapshot::load(&dir.join("oracle_tau.bin"))?.into_field()?;
                let mut o = OracleState::new(tau, o.lambda, o.mu_p)?;
                o.t = t;
                Some(o)
            }
            (None, _) => None,
            (Some(_), None) => return Err(SimError::Checkpoint("checkpoint has no oracle state".into())),
        };
        let prev = meta.y_prev.zip(meta.integrand_prev);
        sim.restore(Resumable {
            step: meta.step,
            u,
            history,
            prev,
            oracle,
        })?;
        Ok(sim)
    }
}
