//! The `run`, `verify`, `oracle` and `converge` commands.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use serde::Serialize;

use super::config::SimulationConfig;
use super::sim::{SimError, Simulation, StepRecord};
use super::snapshot::Snapshot;
use crate::constitutive::{default_h1_grid, model_catalog, verify_h1, verify_h2, ModelParams, MODEL_NAMES};
use crate::convergence::coupled_self_convergence;
use crate::diagnostics::{theorem_bound_report, MonitorConfig};
use crate::tensor::{contract, Tensor};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    VerifyFailed = 1,
    NonFinite = 2,
    Violation = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// One CSV row of the diagnostics file.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub t: f64,
    pub stress_sup: f64,
    #[serde(rename = "min_detG")]
    pub min_det_g: f64,
    #[serde(rename = "min_absG")]
    pub min_abs_g: f64,
    pub energy: f64,
    pub gradu_sup: f64,
    pub divu_sup: f64,
    pub y_value: f64,
    pub y_integrand: f64,
    pub stress_grad_norm: f64,
    pub flags: String,
}

impl From<&StepRecord> for CsvRow {
    fn from(s: &StepRecord) -> Self {
        let r = &s.record;
        Self {
            t: r.t,
            stress_sup: r.stress_sup,
            min_det_g: r.min_det_g,
            min_abs_g: r.min_abs_g,
            energy: r.energy,
            gradu_sup: r.gradu_sup,
            divu_sup: r.divu_sup,
            y_value: r.y_value,
            y_integrand: r.y_integrand,
            stress_grad_norm: r.stress_grad_norm,
            flags: r.flags.to_string(),
        }
    }
}

/// Outcome of [`run`].
#[derive(Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub records: Vec<StepRecord>,
    pub csv_path: PathBuf,
    pub message: Option<String>,
    pub monitor: MonitorConfig,
}

pub fn checkpoint_dir(cfg: &SimulationConfig) -> PathBuf {
    cfg.output.dir.join("checkpoint")
}

fn write_snapshots(sim: &Simulation, dir: &Path, step: usize) -> Result<(), SimError> {
    let dir = dir.join("snapshots");
    std::fs::create_dir_all(&dir)?;
    Snapshot::from_field(sim.velocity()).save(&dir.join(format!("u_{step:06}.bin")))?;
    Snapshot::from_field(sim.stress()).save(&dir.join(format!("tau_{step:06}.bin")))?;
    for &j in &sim.config().output.snapshot_slices {
        if j < sim.history().len() {
            Snapshot::from_field(sim.history().slice(j)).save(&dir.join(format!("G_{step:06}_s{j:06}.bin")))?;
        }
    }
    Ok(())
}

/// Runs a configuration to completion, writing `diagnostics.csv` (and
/// `oracle.csv` with the oracle), snapshots and checkpoints under the
/// output directory. With `restart`, resumes from that checkpoint directory.
pub fn run(cfg: &SimulationConfig, restart: Option<&Path>) -> Result<RunOutcome, SimError> {
    let out = &cfg.output;
    std::fs::create_dir_all(&out.dir)?;
    let mut sim = match restart {
        Some(dir) => Simulation::from_checkpoint(cfg, dir)?,
        None => Simulation::new(cfg)?,
    };
    info!(
        "N = {}, Δs = {}, {} age nodes, {} steps, model {}",
        cfg.grid.n,
        sim.age_step(),
        sim.ages().len(),
        sim.total_steps(),
        cfg.model.name
    );
    let csv_path = out.dir.join("diagnostics.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(csv_io)?;
    let mut oracle_csv = match cfg.oracle.enabled {
        true => {
            let mut f = File::create(out.dir.join("oracle.csv"))?;
            writeln!(f, "t,relative_l2_gap")?;
            Some(f)
        }
        false => None,
    };
    let mut records = Vec::new();
    let mut status = ExitStatus::Ok;
    let mut message = None;
    loop {
        let n = sim.step_index();
        if out.snapshot_every > 0 && n % out.snapshot_every == 0 && !sim.is_finished() {
            write_snapshots(&sim, &out.dir, n)?;
        }
        let rec = match sim.advance() {
            Ok(Some(r)) => r,
            Ok(None) => break,
            Err(e) if e.is_non_finite() => {
                error!("{e}");
                if sim.rollback()? {
                    sim.write_checkpoint(&checkpoint_dir(cfg))?;
                }
                status = ExitStatus::NonFinite;
                message = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let last = sim.is_finished();
        if rec.step % out.log_every == 0 || last {
            csv.serialize(CsvRow::from(&rec)).map_err(csv_io)?;
        }
        if let (Some(f), Some(gap)) = (oracle_csv.as_mut(), rec.oracle_gap) {
            writeln!(f, "{},{}", rec.record.t, gap)?;
        }
        let flagged = rec.record.flags.any();
        if flagged {
            warn!("t = {}: bound violation ({})", rec.record.t, rec.record.flags);
        }
        records.push(rec);
        if flagged && out.fatal_on_violation {
            status = ExitStatus::Violation;
            message = Some(format!("violation at t = {}", records.last().expect("pushed").record.t));
            break;
        }
        if out.checkpoint_every > 0 && sim.step_index() % out.checkpoint_every == 0 && !last {
            sim.write_checkpoint(&checkpoint_dir(cfg))?;
        }
    }
    csv.flush()?;
    if status == ExitStatus::Ok && out.final_checkpoint {
        sim.write_checkpoint(&checkpoint_dir(cfg))?;
    }
    Ok(RunOutcome {
        status,
        records,
        csv_path,
        message,
        monitor: *sim.monitor_config(),
    })
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

/// Prints the end-of-run bound summary.
pub fn summarize(outcome: &RunOutcome) -> String {
    let mut s = String::new();
    let records: Vec<_> = outcome.records.iter().map(|r| r.record).collect();
    match theorem_bound_report(&records, &outcome.monitor) {
        Ok(b) => {
            s += &format!(
                "records {}  stress violations {}  gradient violations {}  divergence violations {}\n",
                b.records, b.stress_violations, b.gradient_violations, b.divergence_violations
            );
            s += &format!(
                "min det G {:.6}  max |det G − 1| {:.3e}  min |G| {:.6}  y monotone {}  ln ln(e + y) slope {:.4e}\n",
                b.min_det, b.max_det_deviation, b.min_abs_g, b.y_monotone, b.loglog_slope
            );
        }
        Err(e) => s += &format!("no bound report: {e}\n"),
    }
    if let Some(g) = outcome.records.last().and_then(|r| r.oracle_gap) {
        s += &format!("final oracle gap {g:.3e}\n");
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyRow {
    pub model: String,
    pub h1: bool,
    pub h2_declared: bool,
    /// False for models known to violate the bounded-stress condition.
    pub bounds_expected: bool,
    pub sup_xh: Option<f64>,
    pub sup_x2dh: Option<f64>,
    pub stress_bound: Option<f64>,
    pub gradient_bound: Option<f64>,
    pub pass: bool,
}

impl VerifyRow {
    fn verdict(&self) -> &'static str {
        match (self.pass, self.bounds_expected) {
            (true, _) => "pass",
            (false, false) if self.h1 => "n/a",
            _ => "FAIL",
        }
    }
}

/// Results of the assumption and tensor property suites.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub tensor_trials: usize,
    pub tensor_violations: usize,
    pub tensor_max_ratio: f64,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.tensor_violations == 0 && self.rows.iter().all(|r| r.verdict() != "FAIL")
    }

    pub fn row(&self, model: &str) -> Option<&VerifyRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn table(&self) -> String {
        let fmt_sup = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.9}"));
        let mut s = format!(
            "{:<22} {:>4} {:>12} {:>14} {:>14} {:>7}\n",
            "model", "H1", "h2_declared", "sup x|h|", "sup x²|h′|", "result"
        );
        for r in &self.rows {
            s += &format!(
                "{:<22} {:>4} {:>12} {:>14} {:>14} {:>7}\n",
                r.model,
                if r.h1 { "ok" } else { "FAIL" },
                r.h2_declared,
                fmt_sup(r.sup_xh),
                fmt_sup(r.sup_x2dh),
                r.verdict()
            );
        }
        s += &format!(
            "tensor contraction |A·B| ≤ |A||B|: {} trials, {} violations, max ratio {:.6}\n",
            self.tensor_trials, self.tensor_violations, self.tensor_max_ratio
        );
        s
    }
}

fn random_tensor(rng: &mut impl rand::Rng, order: usize, scale: f64) -> Tensor {
    let comps: Vec<f64> = (0..1usize << order).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_slice(order, &comps).expect("order ≤ 4")
}

/// Random generalized Cauchy–Schwarz checks; returns `(violations, max ratio)`.
pub fn tensor_property_suite(trials: usize, seed: u64) -> (usize, f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let oa = rng.gen_range(1..=4);
        let ob = rng.gen_range(1..=4);
        let s = rng.gen_range(0..=oa.min(ob));
        if oa + ob - 2 * s > 4 {
            continue;
        }
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let a = random_tensor(&mut rng, oa, scale);
        let b = random_tensor(&mut rng, ob, 1.0);
        let c = contract(&a, &b, s).expect("orders fit");
        let bound = a.frobenius_norm() * b.frobenius_norm();
        let lhs = c.frobenius_norm();
        if bound > 0.0 {
            worst = worst.max(lhs / bound);
        }
        if lhs > bound * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    (violations, worst)
}

fn verify_row(label: String, name: &str, params: &ModelParams) -> VerifyRow {
    let Ok((kernel, measure)) = model_catalog(name, params) else {
        return VerifyRow {
            model: label,
            h1: false,
            h2_declared: false,
            bounds_expected: true,
            sup_xh: None,
            sup_x2dh: None,
            stress_bound: None,
            gradient_bound: None,
            pass: false,
        };
    };
    let h1 = verify_h1(&kernel, &default_h1_grid(&kernel), 1e-9).pass;
    let h2 = verify_h2(&measure, 7, 20_000, 1e-9);
    VerifyRow {
        model: label,
        h1,
        h2_declared: h2.h2_declared,
        bounds_expected: name != "oldroyd-b",
        sup_xh: h2.sup_xh.map(|e| e.value),
        sup_x2dh: h2.sup_x2dh.map(|e| e.value),
        stress_bound: h2.declared.map(|b| b.stress),
        gradient_bound: h2.declared.map(|b| b.gradient),
        pass: h1 && h2.pass,
    }
}

/// Runs the catalog (plus an optional custom `h(x) = 1/(1 + a x^p)`) and the tensor suite.
pub fn verify(custom: Option<(f64, f64)>) -> VerifyReport {
    let mut rows: Vec<VerifyRow> = MODEL_NAMES
        .iter()
        .filter(|&&n| n != "kbkz-custom")
        .map(|&n| verify_row(n.to_string(), n, &ModelParams::default()))
        .collect();
    if let Some((a, p)) = custom {
        let params = ModelParams {
            custom_a: a,
            custom_p: p,
            ..ModelParams::default()
        };
        rows.push(verify_row(format!("kbkz-custom({a},{p})"), "kbkz-custom", &params));
    }
    let trials = 10_000;
    let (tensor_violations, tensor_max_ratio) = tensor_property_suite(trials, 11);
    VerifyReport {
        rows,
        tensor_trials: trials,
        tensor_violations,
        tensor_max_ratio,
    }
}

/// Runs with the differential oracle enabled; passes when the final gap is at most `tol`.
pub fn oracle(cfg: &SimulationConfig, tol: f64) -> Result<(RunOutcome, f64), SimError> {
    let mut c = cfg.clone();
    c.oracle.enabled = true;
    c.validate()?;
    let mut outcome = run(&c, None)?;
    let gap = outcome.records.last().and_then(|r| r.oracle_gap).unwrap_or(f64::NAN);
    if outcome.status == ExitStatus::Ok && !(gap <= tol) {
        outcome.status = ExitStatus::VerifyFailed;
        outcome.message = Some(format!("oracle gap {gap:.3e} exceeds {tol:.1e}"));
    }
    Ok((outcome, gap))
}

/// Coupled self-convergence over `levels` halvings of `dt`; writes
/// `convergence.csv` under the output directory.
pub fn converge(cfg: &SimulationConfig, levels: usize) -> anyhow::Result<String> {
    let (report, runs) = coupled_self_convergence(cfg, levels)?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(cfg.output.dir.join("convergence.csv"), report.to_csv())?;
    let mut s = report.to_string();
    for (i, r) in runs.iter().enumerate() {
        s += &format!(
            "  level {i}: det drift {:.3e}, y(T) {:.9e}\n",
            r.det_drift, r.y_final
        );
    }
    Ok(s)
}
