//! Experiment harness: seeded ensembles over schemes and parameter sweeps,
//! artifact emission (per-run trajectory/convergence files, geometry dumps),
//! and aggregate summary tables.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_geometry, ChannelGeometry, ScenarioConfig};
use crate::error::{CtfaError, Result};
use crate::kinematics::plan_to_csv;
use crate::orchestrator::{evaluate_all, Scheme, SchemeOutcome, StoppingRule};

/// Parameter grid swept on top of the base scenario. Each present axis
/// multiplies the run set; absent axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    /// Rician K factors.
    pub rician_k: Option<Vec<f64>>,
    /// Number of propagation paths per side.
    pub path_count: Option<Vec<usize>>,
    /// SNR in dB, applied as transmit power over the configured noise power.
    pub snr_db: Option<Vec<f64>>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            rician_k: None,
            path_count: None,
            snr_db: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioConfig,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepGrid>,
    pub output_dir: PathBuf,
    pub stopping: StoppingRule,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            seeds: (0..20).collect(),
            sweep: None,
            output_dir: PathBuf::from("results"),
            stopping: StoppingRule::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(CtfaError::Config {
                key: "schemes".into(),
                msg: "at least one scheme is required".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(CtfaError::Config {
                key: "seeds".into(),
                msg: "at least one seed is required".into(),
            });
        }
        if let Some(sweep) = &self.sweep {
            for (key, empty) in [
                ("sweep.rician_k", sweep.rician_k.as_ref().is_some_and(|v| v.is_empty())),
                ("sweep.path_count", sweep.path_count.as_ref().is_some_and(|v| v.is_empty())),
                ("sweep.snr_db", sweep.snr_db.as_ref().is_some_and(|v| v.is_empty())),
            ] {
                if empty {
                    return Err(CtfaError::Config {
                        key: key.into(),
                        msg: "sweep axes must be non-empty when present".into(),
                    });
                }
            }
        }
        self.scenario.validate()?;
        self.stopping.validate()?;
        Ok(())
    }

    /// Expands the sweep grid into labelled scenario variants, base scenario
    /// only when no sweep is given. Order: rician_k outer, then path_count,
    /// then snr_db.
    pub fn sweep_points(&self) -> Vec<(String, ScenarioConfig)> {
        let (ks, ls, snrs) = match &self.sweep {
            None => (vec![None], vec![None], vec![None]),
            Some(sweep) => (
                sweep.rician_k.as_ref().map_or(vec![None], |v| v.iter().map(|&x| Some(x)).collect()),
                sweep.path_count.as_ref().map_or(vec![None], |v| v.iter().map(|&x| Some(x)).collect()),
                sweep.snr_db.as_ref().map_or(vec![None], |v| v.iter().map(|&x| Some(x)).collect()),
            ),
        };
        let mut points = Vec::new();
        for &k in &ks {
            for &l in &ls {
                for &snr in &snrs {
                    let mut cfg = self.scenario.clone();
                    let mut label_parts = Vec::new();
                    if let Some(k) = k {
                        cfg.rician_k = k;
                        label_parts.push(format!("k={k}"));
                    }
                    if let Some(l) = l {
                        cfg.l_tx = l;
                        cfg.l_rx = l;
                        label_parts.push(format!("paths={l}"));
                    }
                    if let Some(snr) = snr {
                        cfg.power = cfg.noise_var * 10f64.powf(snr / 10.0);
                        label_parts.push(format!("snr={snr}"));
                    }
                    let label = if label_parts.is_empty() {
                        "base".to_string()
                    } else {
                        label_parts.join(";")
                    };
                    points.push((label, cfg));
                }
            }
        }
        points
    }
}

/// Reads and validates a TOML experiment spec; absent keys take the default
/// scenario values.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path)?;
    let spec: ExperimentSpec = toml::from_str(&text).map_err(|e| CtfaError::Config {
        key: path.display().to_string(),
        msg: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub seed: u64,
    pub sweep_point: String,
    pub throughput_bits: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub failed: bool,
    /// Not written to results.csv (kept byte-reproducible); emitted to the
    /// separate timings file.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub sweep_point: String,
    pub median_throughput_bits: f64,
    pub q1_throughput_bits: f64,
    pub q3_throughput_bits: f64,
    pub median_gain_pct: f64,
    pub median_iterations: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub seed_offset: u64,
    pub workers: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed_offset: 0,
            workers: 1,
        }
    }
}

struct TaskOutput {
    point_idx: usize,
    seed: u64,
    rows: Vec<ResultRow>,
    artifacts: Option<(ChannelGeometry, Vec<SchemeOutcome>)>,
}

fn run_task(
    spec: &ExperimentSpec,
    points: &[(String, ScenarioConfig)],
    point_idx: usize,
    seed: u64,
) -> TaskOutput {
    let (label, cfg) = &points[point_idx];
    let clock = std::time::Instant::now();
    let attempt = cfg
        .validate()
        .and_then(|()| sample_geometry(cfg, seed))
        .and_then(|geometry| {
            evaluate_all(&spec.schemes, cfg, &geometry, &spec.stopping, seed)
                .map(|outcomes| (geometry, outcomes))
        });
    match attempt {
        Ok((geometry, outcomes)) => {
            let wall = clock.elapsed().as_secs_f64();
            let rows = outcomes
                .iter()
                .map(|o| ResultRow {
                    scheme: o.scheme,
                    seed,
                    sweep_point: label.clone(),
                    throughput_bits: o.throughput_bits,
                    outer_iterations: o.outer_iterations,
                    converged: o.converged,
                    failed: false,
                    wall_seconds: wall,
                })
                .collect();
            TaskOutput {
                point_idx,
                seed,
                rows,
                artifacts: Some((geometry, outcomes)),
            }
        }
        Err(_) => TaskOutput {
            point_idx,
            seed,
            rows: spec
                .schemes
                .iter()
                .map(|&scheme| ResultRow {
                    scheme,
                    seed,
                    sweep_point: label.clone(),
                    throughput_bits: 0.0,
                    outer_iterations: 0,
                    converged: false,
                    failed: true,
                    wall_seconds: clock.elapsed().as_secs_f64(),
                })
                .collect(),
            artifacts: None,
        },
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from(
        "scheme,seed,sweep_point,throughput_bits,outer_iterations,converged,failed\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.scheme.name(),
            r.seed,
            csv_field(&r.sweep_point),
            r.throughput_bits,
            r.outer_iterations,
            r.converged,
            r.failed
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_timings_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("scheme,seed,sweep_point,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.scheme.name(),
            r.seed,
            csv_field(&r.sweep_point),
            r.wall_seconds
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from(
        "scheme,sweep_point,median_throughput_bits,q1_throughput_bits,q3_throughput_bits,median_gain_pct,median_iterations,runs\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scheme.name(),
            csv_field(&r.sweep_point),
            r.median_throughput_bits,
            r.q1_throughput_bits,
            r.q3_throughput_bits,
            r.median_gain_pct,
            r.median_iterations,
            r.runs
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '=' || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn write_artifacts(
    dir: &Path,
    seed: u64,
    geometry: &ChannelGeometry,
    outcomes: &[SchemeOutcome],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("geometry_{seed}.json")), geometry.to_json())?;
    for o in outcomes {
        let name = o.scheme.name();
        fs::write(
            dir.join(format!("traj_{name}_{seed}_tx.csv")),
            plan_to_csv(&o.tx_plan),
        )?;
        fs::write(
            dir.join(format!("traj_{name}_{seed}_rx.csv")),
            plan_to_csv(&o.rx_plan),
        )?;
        let mut conv = String::from("iteration,throughput_bits\n");
        for e in &o.history {
            conv.push_str(&format!("{},{}\n", e.outer_iteration, e.throughput_bits));
        }
        fs::write(dir.join(format!("conv_{name}_{seed}.csv")), conv)?;
    }
    Ok(())
}

/// Runs the full (scheme x seed x sweep-point) grid, writes all artifacts
/// under the spec's output directory, and returns the rows in deterministic
/// order. Individual run failures are flagged, not fatal.
pub fn run_experiment(spec: &ExperimentSpec, settings: &RunSettings) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let points = spec.sweep_points();
    let seeds: Vec<u64> = spec.seeds.iter().map(|&s| s + settings.seed_offset).collect();
    fs::create_dir_all(&spec.output_dir)?;

    let tasks: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|pi| seeds.iter().map(move |&s| (pi, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.max(1))
        .build()
        .map_err(|e| CtfaError::Contract(format!("worker pool: {e}")))?;
    let mut outputs: Vec<TaskOutput> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(pi, seed)| run_task(spec, &points, pi, seed))
            .collect()
    });
    outputs.sort_by(|a, b| (a.point_idx, a.seed).cmp(&(b.point_idx, b.seed)));

    let mut rows = Vec::new();
    for output in &outputs {
        // One artifact directory per sweep point; the base point writes at
        // the root so single-point runs keep flat file names.
        let dir = if points.len() == 1 {
            spec.output_dir.clone()
        } else {
            spec.output_dir.join(sanitize_label(&points[output.point_idx].0))
        };
        if let Some((geometry, outcomes)) = &output.artifacts {
            write_artifacts(&dir, output.seed, geometry, outcomes)?;
        }
        rows.extend(output.rows.iter().cloned());
    }

    write_results_csv(&spec.output_dir.join("results.csv"), &rows)?;
    write_timings_csv(&spec.output_dir.join("timings.csv"), &rows)?;
    // Sweep points whose runs all failed have no fpa reference; they stay in
    // results.csv but are left out of the summary.
    let summarizable: Vec<ResultRow> = rows
        .iter()
        .filter(|r| {
            rows.iter().any(|f| {
                f.scheme == Scheme::Fpa && f.sweep_point == r.sweep_point && !f.failed
            })
        })
        .cloned()
        .collect();
    if !summarizable.is_empty() {
        let summary = summarize(&summarizable)?;
        write_summary_csv(&spec.output_dir.join("summary.csv"), &summary)?;
    }
    Ok(rows)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Lower/upper quartiles as medians of the lower/upper halves (exclusive of
/// the middle element for odd lengths).
fn quartiles(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len();
    if n < 2 {
        let m = median(sorted);
        return (m, m);
    }
    let half = n / 2;
    (median(&sorted[..half]), median(&sorted[n - half..]))
}

/// Aggregates rows into per (scheme, sweep-point) medians with gains over
/// the fpa rows of the same sweep point.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    // Group keys in first-appearance order.
    let mut keys: Vec<(Scheme, String)> = Vec::new();
    for r in rows {
        let key = (r.scheme, r.sweep_point.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }

    let collect = |scheme: Scheme, point: &str, f: &dyn Fn(&ResultRow) -> f64| -> Vec<f64> {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.scheme == scheme && r.sweep_point == point && !r.failed)
            .map(f)
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };

    let mut out = Vec::with_capacity(keys.len());
    for (scheme, point) in &keys {
        let fpa_throughputs = collect(Scheme::Fpa, point, &|r| r.throughput_bits);
        if fpa_throughputs.is_empty() {
            return Err(CtfaError::Contract(format!(
                "summarize: no fpa reference rows for sweep point {point}"
            )));
        }
        let throughputs = collect(*scheme, point, &|r| r.throughput_bits);
        let iterations = collect(*scheme, point, &|r| r.outer_iterations as f64);
        let med = median(&throughputs);
        let med_fpa = median(&fpa_throughputs);
        let (q1, q3) = quartiles(&throughputs);
        let gain = if *scheme == Scheme::Fpa {
            0.0
        } else {
            100.0 * (med - med_fpa) / med_fpa
        };
        out.push(SummaryRow {
            scheme: *scheme,
            sweep_point: point.clone(),
            median_throughput_bits: med,
            q1_throughput_bits: q1,
            q3_throughput_bits: q3,
            median_gain_pct: gain,
            median_iterations: median(&iterations),
            runs: throughputs.len(),
        });
    }
    Ok(out)
}
