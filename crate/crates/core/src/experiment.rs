//! The tier × architecture experiment matrix.
//!
//! Each cell generates data, trains, enumerates states, builds and verifies
//! both trees, computes the reduced description and a bound series, and
//! draws its figures. Failures are recorded on the cell; the matrix goes on.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::{bound_series, minimal_description, vc_nodata};
use crate::circuit::{build_logical, build_numeric};
use crate::config::{BoundsSection, Config, GridSection};
use crate::datasets::{gen_synthetic, SyntheticSpec, Tier};
use crate::error::{write_file, Error, Result};
use crate::nn::ArchSpec;
use crate::render::{boundary_figure, bounds_figure, line_figure, render_figure};
use crate::states::{enumerate_states, refine_boundary, GridSpec};
use crate::trainer::{train, TrainConfig, TrainRun};
use crate::verify::{verify_logical, verify_numeric};

pub const SUMMARY_CSV_HEADER: &str = "tier,arch,seed,attempts,params,train_acc,sigma_bar,sigma_zero,k,vc_bool,vc_nodata,numeric_max_diff,numeric_pass,logical_agreement,logical_fine_agreement,logical_pass,error";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrixConfig {
    pub tiers: Vec<Tier>,
    /// Named architectures; each extends the previous one.
    pub arches: Vec<(String, ArchSpec)>,
    pub seeds: Vec<u64>,
    /// The seed field is replaced by the cell's seed.
    pub train: TrainConfig,
    pub grid: GridSection,
    pub bounds: BoundsSection,
    pub max_restarts: usize,
    pub min_train_accuracy: f64,
}

impl Default for ExperimentMatrixConfig {
    fn default() -> Self {
        Self::from_config(&Config::default()).expect("defaults are valid")
    }
}

impl ExperimentMatrixConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.matrix;
        let i = m.arch_i.clone();
        let ii: Vec<usize> = i.iter().chain(&m.arch_ii_extra).copied().collect();
        let iii: Vec<usize> = ii.iter().chain(&m.arch_iii_extra).copied().collect();
        let arches = vec![
            ("ArchI".to_string(), ArchSpec::new(2, i)?),
            ("ArchII".to_string(), ArchSpec::new(2, ii)?),
            ("ArchIII".to_string(), ArchSpec::new(2, iii)?),
        ];
        let c = Self {
            tiers: cfg.tiers(),
            arches,
            seeds: m.seeds.clone(),
            train: cfg.train.to_train_config(cfg.seed),
            grid: cfg.grid.clone(),
            bounds: cfg.bounds.clone(),
            max_restarts: m.max_restarts,
            min_train_accuracy: m.min_train_accuracy,
        };
        c.validate()?;
        Ok(c)
    }

    /// Restricts to one tier and one architecture, keeping the rest.
    pub fn single(&self, tier: Tier, arch: &str) -> Result<Self> {
        let a = self
            .arches
            .iter()
            .find(|(n, _)| n == arch)
            .ok_or_else(|| Error::input(format!("unknown architecture {arch:?}")))?;
        Ok(Self {
            tiers: vec![tier],
            arches: vec![a.clone()],
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.tiers.is_empty() || self.arches.is_empty() || self.seeds.is_empty() {
            return Err(Error::input("matrix needs at least one tier, architecture and seed"));
        }
        for w in self.arches.windows(2) {
            let (a, b) = (&w[0].1, &w[1].1);
            if a.input_dim != b.input_dim || !b.hidden_widths.starts_with(&a.hidden_widths) {
                return Err(Error::input(format!("{} does not extend {}", w[1].0, w[0].0)));
            }
        }
        Ok(())
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub tier: String,
    pub arch: String,
    pub seed: u64,
    /// Training runs needed to reach the accuracy target.
    pub attempts: usize,
    pub params: usize,
    pub train_accuracy: f64,
    pub sigma_bar: usize,
    pub sigma_zero: usize,
    pub k: usize,
    pub vc_bool: f64,
    pub vc_nodata: f64,
    pub numeric_max_diff: f64,
    pub numeric_pass: bool,
    pub logical_agreement: f64,
    pub logical_fine_agreement: f64,
    pub logical_pass: bool,
    pub error: Option<String>,
}

impl CellSummary {
    fn failed(tier: Tier, arch: &str, spec: &ArchSpec, seed: u64, e: Error) -> Self {
        Self {
            tier: tier.name().into(),
            arch: arch.into(),
            seed,
            attempts: 0,
            params: spec.parameter_count(),
            train_accuracy: f64::NAN,
            sigma_bar: 0,
            sigma_zero: 0,
            k: 0,
            vc_bool: f64::NAN,
            vc_nodata: vc_nodata(spec),
            numeric_max_diff: f64::NAN,
            numeric_pass: false,
            logical_agreement: f64::NAN,
            logical_fine_agreement: f64::NAN,
            logical_pass: false,
            error: Some(e.to_string()),
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.numeric_pass && self.logical_pass
    }

    pub fn dir_name(&self) -> String {
        cell_dir_name(&self.tier, &self.arch, self.seed)
    }
}

fn cell_dir_name(tier: &str, arch: &str, seed: u64) -> String {
    format!("{tier}_{arch}_s{seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub cells: Vec<CellSummary>,
}

impl MatrixSummary {
    pub fn all_pass(&self) -> bool {
        self.cells.iter().all(CellSummary::passed)
    }

    pub fn get(&self, tier: Tier, arch: &str, seed: u64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.tier == tier.name() && c.arch == arch && c.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SUMMARY_CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:e},{},{},{},{},{}",
                c.tier,
                c.arch,
                c.seed,
                c.attempts,
                c.params,
                c.train_accuracy,
                c.sigma_bar,
                c.sigma_zero,
                c.k,
                c.vc_bool,
                c.vc_nodata,
                c.numeric_max_diff,
                c.numeric_pass,
                c.logical_agreement,
                c.logical_fine_agreement,
                c.logical_pass,
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }

    /// Markdown table of VC^Bool, |Σ₀| and |Σ̄| per cell, with VC^NoData
    /// for each architecture.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| tier | arch | seed | params | train acc | VC-Bool (|Σ₀|) [|Σ̄|] | VC-NoData | verify |\n|---|---|---|---|---|---|---|---|\n",
        );
        for c in &self.cells {
            let verdict = match (&c.error, c.passed()) {
                (Some(e), _) => format!("error: {e}"),
                (None, true) => "pass".into(),
                (None, false) => "FAIL".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.0} ({}) [{}] | {:.0} | {} |",
                c.tier, c.arch, c.seed, c.params, c.train_accuracy, c.vc_bool, c.sigma_zero, c.sigma_bar, c.vc_nodata, verdict
            );
        }
        s
    }
}

/// Keeps every `stride`-th snapshot and the final one.
pub fn strided(run: &TrainRun, stride: usize) -> TrainRun {
    let n = run.snapshots.len();
    TrainRun {
        snapshots: run
            .snapshots
            .iter()
            .enumerate()
            .filter(|(i, _)| i % stride.max(1) == 0 || i + 1 == n)
            .map(|(_, s)| s.clone())
            .collect(),
    }
}

/// Seed of the `attempt`-th training run of a cell; attempt 0 is the cell seed.
pub fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    seed.wrapping_add(1_000_003 * attempt as u64)
}

/// Trains until the final accuracy reaches `min_accuracy` or the restarts
/// run out, returning the best run, its config and the number of attempts.
/// Small initializations leave deep nets dead now and then; a fresh seed
/// usually fixes that.
pub fn train_with_restarts(
    data: &crate::datasets::Dataset,
    arch: &ArchSpec,
    base: &TrainConfig,
    max_restarts: usize,
    min_accuracy: f64,
) -> Result<(TrainRun, TrainConfig, usize)> {
    let mut best: Option<(TrainRun, TrainConfig)> = None;
    for attempt in 0..=max_restarts {
        let tcfg = TrainConfig {
            seed: attempt_seed(base.seed, attempt),
            ..base.clone()
        };
        let run = train(data, arch, &tcfg)?;
        let acc = run.final_snapshot().train_accuracy;
        let better = best
            .as_ref()
            .is_none_or(|(b, _)| acc > b.final_snapshot().train_accuracy);
        if better {
            best = Some((run, tcfg));
        }
        if acc >= min_accuracy {
            let (run, tcfg) = best.expect("set above");
            return Ok((run, tcfg, attempt + 1));
        }
        log::info!("{} on {}: accuracy {acc:.3} after attempt {}", arch, data.name, attempt + 1);
    }
    let (run, tcfg) = best.expect("at least one attempt");
    Ok((run, tcfg, max_restarts + 1))
}

/// Runs one cell, writing its artifacts under `dir`.
pub fn run_cell(cfg: &ExperimentMatrixConfig, tier: Tier, arch_name: &str, arch: &ArchSpec, seed: u64, dir: &Path) -> CellSummary {
    let started = std::time::Instant::now();
    let out = run_cell_inner(cfg, tier, arch_name, arch, seed, dir)
        .unwrap_or_else(|e| CellSummary::failed(tier, arch_name, arch, seed, e));
    log::info!(
        "{} done in {:.1}s: {}",
        out.dir_name(),
        started.elapsed().as_secs_f64(),
        if out.passed() { "pass" } else { "FAIL" }
    );
    out
}

fn run_cell_inner(cfg: &ExperimentMatrixConfig, tier: Tier, arch_name: &str, arch: &ArchSpec, seed: u64, dir: &Path) -> Result<CellSummary> {
    let data = gen_synthetic(&SyntheticSpec::new(tier, seed))?;
    data.save_csv(&dir.join("data.csv"))?;
    let base = TrainConfig { seed, ..cfg.train.clone() };
    let (run, tcfg, attempts) = train_with_restarts(&data, arch, &base, cfg.max_restarts, cfg.min_train_accuracy)?;
    run.save(&dir.join("run"), seed, tier.name(), &tcfg)?;
    let params = &run.final_model().params;

    let (lo, hi) = data.bounding_box().ok_or_else(|| Error::input("empty dataset"))?;
    let grid = GridSpec::around(&lo, &hi, cfg.grid.margin, cfg.grid.resolution)?;
    let reg = refine_boundary(params, &enumerate_states(params, &grid)?, &grid)?;
    reg.save(&dir.join("states.csv"))?;

    let numeric = build_numeric(params, &reg)?;
    let nrep = verify_numeric(params, &numeric, &reg, &grid)?;
    numeric.save(&dir.join("numeric_tree.json"))?;
    nrep.save(&dir.join("verify_numeric.json"))?;
    drop(numeric);

    let logical = build_logical(params, &reg)?;
    let lrep = verify_logical(params, &logical, &reg, &grid, cfg.grid.fine_factor)?;
    logical.compacted().save(&dir.join("logical_tree.json"))?;
    lrep.save(&dir.join("verify_logical.json"))?;

    let s0 = reg.sigma_zero();
    let desc = minimal_description(&s0, arch)?;
    write_file(&dir.join("description.json"), serde_json::to_string_pretty(&desc)?)?;

    let bgrid = GridSpec::around(&lo, &hi, cfg.grid.margin, cfg.bounds.resolution)?;
    let series = bound_series(&strided(&run, cfg.bounds.stride), &data, &bgrid, true)?;
    series.save_csv(&dir.join("bounds.csv"))?;
    let title = format!("{} {} seed {}", tier.name(), arch_name, seed);
    write_file(&dir.join("bounds.svg"), render_figure(&bounds_figure(&title, &series)))?;

    let pgrid = GridSpec::around(&lo, &hi, cfg.grid.margin, cfg.grid.plot_resolution)?;
    let fig = boundary_figure(&title, params, &pgrid, Some(&data))?;
    write_file(&dir.join("boundaries.svg"), render_figure(&fig))?;

    Ok(CellSummary {
        tier: tier.name().into(),
        arch: arch_name.into(),
        seed,
        attempts,
        params: arch.parameter_count(),
        train_accuracy: run.final_snapshot().train_accuracy,
        sigma_bar: reg.len(),
        sigma_zero: s0.len(),
        k: desc.k,
        vc_bool: desc.vc_bool(),
        vc_nodata: vc_nodata(arch),
        numeric_max_diff: nrep.max_abs_diff_guaranteed,
        numeric_pass: nrep.pass,
        logical_agreement: lrep.agreement,
        logical_fine_agreement: lrep.fine_agreement.unwrap_or(f64::NAN),
        logical_pass: lrep.pass,
        error: None,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    tiers: Vec<&'static str>,
    arches: Vec<(&'a str, String, usize)>,
    seeds: &'a [u64],
    cells: Vec<String>,
    files: Vec<String>,
    all_pass: bool,
}

/// Runs every cell in parallel and writes `summary.csv`, `summary.md`,
/// `capacity.svg` and `manifest.json` under `out_dir`. All outputs are
/// deterministic given the configuration.
pub fn run_experiment_matrix(cfg: &ExperimentMatrixConfig, out_dir: &Path) -> Result<MatrixSummary> {
    cfg.validate()?;
    let jobs: Vec<(Tier, &(String, ArchSpec), u64)> = cfg
        .tiers
        .iter()
        .flat_map(|&t| cfg.arches.iter().flat_map(move |a| cfg.seeds.iter().map(move |&s| (t, a, s))))
        .collect();
    let cells: Vec<CellSummary> = jobs
        .par_iter()
        .map(|&(tier, (name, arch), seed)| {
            let dir = out_dir.join(cell_dir_name(tier.name(), name, seed));
            run_cell(cfg, tier, name, arch, seed, &dir)
        })
        .collect();
    let summary = MatrixSummary { cells };
    write_file(&out_dir.join("summary.csv"), summary.to_csv())?;
    write_file(&out_dir.join("summary.md"), summary.to_markdown())?;
    write_file(&out_dir.join("capacity.svg"), render_figure(&capacity_figure(cfg, &summary)))?;

    let mut files = vec![
        PathBuf::from("summary.csv"),
        PathBuf::from("summary.md"),
        PathBuf::from("capacity.svg"),
    ];
    for c in &summary.cells {
        for f in [
            "data.csv",
            "run/run.json",
            "run/model.json",
            "states.csv",
            "numeric_tree.json",
            "logical_tree.json",
            "verify_numeric.json",
            "verify_logical.json",
            "description.json",
            "bounds.csv",
            "bounds.svg",
            "boundaries.svg",
        ] {
            let p = Path::new(&c.dir_name()).join(f);
            if out_dir.join(&p).exists() {
                files.push(p);
            }
        }
    }
    let manifest = Manifest {
        tiers: cfg.tiers.iter().map(|t| t.name()).collect(),
        arches: cfg
            .arches
            .iter()
            .map(|(n, a)| (n.as_str(), a.to_string(), a.parameter_count()))
            .collect(),
        seeds: &cfg.seeds,
        cells: summary.cells.iter().map(CellSummary::dir_name).collect(),
        files: files.iter().map(|p| p.display().to_string()).collect(),
        all_pass: summary.all_pass(),
    };
    write_file(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(summary)
}

/// VC-Bool per tier against parameter count, with VC-NoData for scale.
/// Seeds are averaged.
pub fn capacity_figure(cfg: &ExperimentMatrixConfig, summary: &MatrixSummary) -> crate::render::Figure {
    let mut series = Vec::new();
    for &tier in &cfg.tiers {
        let pts = cfg
            .arches
            .iter()
            .filter_map(|(name, arch)| {
                let vals: Vec<f64> = summary
                    .cells
                    .iter()
                    .filter(|c| c.tier == tier.name() && &c.arch == name && c.vc_bool.is_finite())
                    .map(|c| c.vc_bool)
                    .collect();
                (!vals.is_empty()).then(|| [arch.parameter_count() as f64, vals.iter().sum::<f64>() / vals.len() as f64])
            })
            .collect();
        series.push((format!("VC-Bool {}", tier.name()), pts));
    }
    series.push((
        "VC-NoData".to_string(),
        cfg.arches
            .iter()
            .map(|(_, a)| [a.parameter_count() as f64, vc_nodata(a)])
            .collect(),
    ));
    line_figure("capacity vs parameters", "parameters", "VC bound", true, &series)
}
