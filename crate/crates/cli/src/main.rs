use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use netlogic::capacity::{bound_series, minimal_description, vc_nodata};
use netlogic::circuit::{build_logical, build_numeric, CircuitTree, Mode};
use netlogic::config::Config;
use netlogic::datasets::{gen_synthetic, load_mnist_binary, Dataset, SyntheticSpec, Tier};
use netlogic::error::write_file;
use netlogic::experiment::{run_experiment_matrix, strided, ExperimentMatrixConfig};
use netlogic::datasets::load_mnist_all;
use netlogic::interpret::{
    diagnose_memorization, embed_dataset, mnist_study, parse_path, path_label, probe_node, probe_paths, probes_csv,
    MnistStudyConfig,
};
use netlogic::nn::{ArchSpec, ModelFile, TrainingMetadata};
use netlogic::render::{boundary_figure, bounds_figure, probe_svg, render_figure};
use netlogic::states::{enumerate_states, refine_boundary, GridSpec, StateRegistry};
use netlogic::trainer::{train, train_bottleneck, TrainRun};
use netlogic::verify::{run_property_suite, verify_logical, verify_numeric};

#[derive(Parser)]
#[command(name = "netlogic", version, about = "Turn ReLU classifiers into logical circuits and bound their capacity")]
struct Cli {
    /// Seed for data generation and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TreeMode {
    Numeric,
    Logical,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic tier, or a binary MNIST subset with --mnist.
    GenData {
        #[arg(long, default_value = "DataI")]
        tier: String,
        /// Directory with the MNIST IDX files.
        #[arg(long)]
        mnist: Option<PathBuf>,
        /// Sample count for MNIST.
        #[arg(long, default_value_t = 1000)]
        m: usize,
        /// Use the test split of MNIST.
        #[arg(long)]
        test: bool,
    },
    /// Train a network on a CSV dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Hidden widths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "4,6,8")]
        arch: Vec<usize>,
        /// Put a linear bottleneck of this width in front of the network.
        #[arg(long)]
        bottleneck: Option<usize>,
    },
    /// Enumerate network states on a grid around the data.
    States {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Build a circuit tree from a model and its states.
    Circuit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        states: PathBuf,
        #[arg(long, value_enum, default_value = "logical")]
        mode: TreeMode,
    },
    /// Check a tree against its network; exits nonzero on failure.
    /// With --properties, runs the randomized identity suite instead.
    Verify {
        #[arg(long, required_unless_present = "properties")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "properties")]
        circuit: Option<PathBuf>,
        #[arg(long, required_unless_present = "properties")]
        states: Option<PathBuf>,
        #[arg(long, required_unless_present = "properties")]
        data: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        properties: bool,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Bound series over the snapshots of a training run.
    Bounds {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw neuron and decision boundaries of a 2D model.
    Plot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-digit probe arrays for the top circuit nodes.
    Probe {
        #[arg(long)]
        circuit: PathBuf,
        /// Model whose bottleneck embeds the data.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Second split for a memorization diagnosis.
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Node paths such as `0.2`; defaults to the top nodes.
        #[arg(long, value_delimiter = ',')]
        node: Vec<String>,
    },
    /// Replace a node of a circuit by another circuit.
    Splice {
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        node: String,
        #[arg(long)]
        prosthetic: PathBuf,
    },
    /// Run the full tier x architecture matrix.
    Matrix,
    /// Overfit an MNIST host, diagnose memorization and splice a prosthetic.
    Mnist {
        /// Directory with the four MNIST IDX files; defaults to the config.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Study seeds; defaults to the global seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        write_file(&p, contents)?;
        println!("wrote {}", p.display());
        Ok(p)
    }
}

fn load_model(p: &Path) -> Result<ModelFile> {
    ModelFile::load(p).with_context(|| format!("loading model {}", p.display()))
}

fn load_data(p: &Path) -> Result<Dataset> {
    Dataset::load_csv(p).with_context(|| format!("loading data {}", p.display()))
}

fn grid_around(data: &Dataset, margin: f64, res: usize) -> Result<GridSpec> {
    let (lo, hi) = data.bounding_box().context("dataset is empty")?;
    Ok(GridSpec::around(&lo, &hi, margin, res)?)
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = Ctx { cfg, out };
    let seed = ctx.cfg.seed;

    match cli.cmd {
        Cmd::GenData { tier, mnist, m, test } => {
            let data = match mnist {
                Some(dir) => {
                    let (img, lbl) = if test {
                        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
                    } else {
                        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
                    };
                    load_mnist_binary(&dir.join(img), &dir.join(lbl), m, seed)?
                }
                None => gen_synthetic(&SyntheticSpec::new(Tier::parse(&tier)?, seed))?,
            };
            ctx.write("data.csv", data.to_csv())?;
        }
        Cmd::Train { data, arch, bottleneck } => {
            let data = load_data(&data)?;
            let tcfg = ctx.cfg.train.to_train_config(seed);
            let run = match bottleneck {
                Some(w) => train_bottleneck(&data, &ArchSpec::new(w, arch)?, &tcfg)?,
                None => train(&data, &ArchSpec::new(data.dim(), arch)?, &tcfg)?,
            };
            let dir = ctx.path("run");
            run.save(&dir, seed, &data.name, &tcfg)?;
            let last = run.final_snapshot();
            println!(
                "trained {} steps: accuracy {:.4}, loss {:.6}; saved {}",
                last.step,
                last.train_accuracy,
                last.loss,
                dir.display()
            );
        }
        Cmd::States { model, data, resolution } => {
            let mf = load_model(&model)?;
            let data = embed_dataset(&mf.model, &load_data(&data)?);
            let res = resolution.unwrap_or(ctx.cfg.grid.resolution);
            let grid = grid_around(&data, ctx.cfg.grid.margin, res)?;
            let params = &mf.model.params;
            let reg = refine_boundary(params, &enumerate_states(params, &grid)?, &grid)?;
            let s0 = reg.sigma_zero();
            let desc = minimal_description(&s0, params.arch())?;
            ctx.write("states.csv", reg.to_csv())?;
            ctx.write("description.json", serde_json::to_string_pretty(&desc)?)?;
            println!(
                "|Σ̄| = {}, |Σ₀| = {}, VC-Bool = {:.1}, VC-NoData = {:.1}",
                reg.len(),
                s0.len(),
                desc.vc_bool(),
                vc_nodata(params.arch())
            );
        }
        Cmd::Circuit { model, states, mode } => {
            let mf = load_model(&model)?;
            let params = &mf.model.params;
            let reg = StateRegistry::load(params.arch().clone(), &states)?;
            let (tree, name) = match mode {
                TreeMode::Numeric => (build_numeric(params, &reg)?, "numeric_tree.json"),
                TreeMode::Logical => (build_logical(params, &reg)?, "logical_tree.json"),
            };
            let tree = tree.compacted();
            ctx.write(name, tree.to_json()?)?;
            println!("{} leaves, {} atoms", tree.leaf_count(), tree.atom_count());
        }
        Cmd::Verify {
            model,
            circuit,
            states,
            data,
            resolution,
            properties,
            trials,
        } => {
            if properties {
                let rep = run_property_suite(seed, trials)?;
                for p in &rep.properties {
                    println!("{:<28} {} / {} failed", p.name, p.failures, p.checks);
                }
                ctx.write("properties.json", rep.to_json()?)?;
                return Ok(rep.pass());
            }
            let (model, circuit, states, data) = (model.unwrap(), circuit.unwrap(), states.unwrap(), data.unwrap());
            let mf = load_model(&model)?;
            let params = &mf.model.params;
            let tree = CircuitTree::load(&circuit)?;
            let reg = StateRegistry::load(params.arch().clone(), &states)?;
            let data = embed_dataset(&mf.model, &load_data(&data)?);
            let grid = grid_around(&data, ctx.cfg.grid.margin, resolution.unwrap_or(ctx.cfg.grid.resolution))?;
            let rep = match tree.mode() {
                Mode::Numeric => verify_numeric(params, &tree, &reg, &grid)?,
                Mode::Logical => verify_logical(params, &tree, &reg, &grid, ctx.cfg.grid.fine_factor)?,
            };
            println!(
                "{:?}: {} points, agreement {:.6}, max |N - tree| on enumerated states {:e}, unexplained {}: {}",
                rep.mode,
                rep.points,
                rep.agreement,
                rep.max_abs_diff_guaranteed,
                rep.unexplained,
                if rep.pass { "PASS" } else { "FAIL" }
            );
            ctx.write("verify.json", rep.to_json()?)?;
            return Ok(rep.pass);
        }
        Cmd::Bounds { run, data } => {
            let tr = TrainRun::load(&run)?;
            let data = load_data(&data)?;
            let data = embed_dataset(tr.final_model(), &data);
            let grid = grid_around(&data, ctx.cfg.grid.margin, ctx.cfg.bounds.resolution)?;
            let rep = bound_series(&strided(&tr, ctx.cfg.bounds.stride), &data, &grid, true)?;
            ctx.write("bounds.csv", rep.to_csv())?;
            ctx.write("bounds.svg", render_figure(&bounds_figure("bounds", &rep)))?;
        }
        Cmd::Plot { model, data } => {
            let mf = load_model(&model)?;
            let data = data.map(|d| load_data(&d)).transpose()?;
            let grid = match &data {
                Some(d) => grid_around(d, ctx.cfg.grid.margin, ctx.cfg.grid.plot_resolution)?,
                None => GridSpec::uniform(vec![-1.0, -1.0], vec![1.0, 1.0], ctx.cfg.grid.plot_resolution)?,
            };
            let fig = boundary_figure("boundaries", &mf.model.params, &grid, data.as_ref())?;
            ctx.write("boundaries.svg", render_figure(&fig))?;
        }
        Cmd::Probe {
            circuit,
            model,
            data,
            test_data,
            node,
        } => {
            let tree = CircuitTree::load(&circuit)?;
            let mf = load_model(&model)?;
            let train_e = embed_dataset(&mf.model, &load_data(&data)?);
            let paths = if node.is_empty() {
                probe_paths(&tree)
            } else {
                node.iter().map(|n| parse_path(n)).collect::<netlogic::Result<_>>()?
            };
            let test_e = test_data.map(|p| load_data(&p).map(|d| embed_dataset(&mf.model, &d))).transpose()?;
            let mut arrays = Vec::new();
            for p in &paths {
                arrays.push(probe_node(&tree, p, &train_e, "train")?);
                if let Some(t) = &test_e {
                    arrays.push(probe_node(&tree, p, t, "test")?);
                }
            }
            ctx.write("probes.csv", probes_csv(&arrays))?;
            let per_node = if test_e.is_some() { 2 } else { 1 };
            for (p, chunk) in paths.iter().zip(arrays.chunks(per_node)) {
                let label = path_label(p);
                ctx.write(&format!("probe_{label}.svg"), probe_svg(&format!("node {label}"), chunk))?;
            }
            if let Some(t) = &test_e {
                let flags = diagnose_memorization(&tree, &train_e, t, ctx.cfg.mnist.gap_threshold)?;
                for f in &flags {
                    println!(
                        "node {} digit {}: train {:.2} test {:.2} gap {:.2}",
                        path_label(&f.path),
                        f.digit,
                        f.train_frac,
                        f.test_frac,
                        f.gap
                    );
                }
                ctx.write("diagnosis.json", serde_json::to_string_pretty(&flags)?)?;
            }
        }
        Cmd::Splice { circuit, node, prosthetic } => {
            let host = CircuitTree::load(&circuit)?;
            let part = CircuitTree::load(&prosthetic)?;
            let spliced = host.splice(&parse_path(&node)?, &part)?;
            ctx.write("spliced_tree.json", spliced.to_json()?)?;
        }
        Cmd::Matrix => {
            let mcfg = ExperimentMatrixConfig::from_config(&ctx.cfg)?;
            let summary = run_experiment_matrix(&mcfg, &ctx.out)?;
            print!("{}", summary.to_markdown());
            println!("artifacts under {}", ctx.out.display());
            if !summary.all_pass() {
                bail!("some cells failed; see summary.md");
            }
        }
        Cmd::Mnist { dir, seeds } => {
            let dir = dir
                .or_else(|| ctx.cfg.mnist.dir.clone())
                .context("pass --dir or set mnist.dir in the config")?;
            let pool = |img: &str, lbl: &str| load_mnist_all(&dir.join(img), &dir.join(lbl));
            let train_pool = pool("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
            let test_pool = pool("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
            let seeds = if seeds.is_empty() { vec![seed] } else { seeds };
            let mut improved = false;
            for s in seeds {
                let scfg = MnistStudyConfig {
                    seed: s,
                    ..MnistStudyConfig::from_config(&ctx.cfg)?
                };
                let study = mnist_study(&train_pool, &test_pool, &scfg)?;
                let r = &study.report;
                let sub = format!("mnist_s{s}");
                let host = ModelFile {
                    model: study.host.clone(),
                    seed: s,
                    training: TrainingMetadata {
                        dataset: "mnist".into(),
                        steps: scfg.train.steps as u64,
                        learning_rate: scfg.train.learning_rate,
                        train_accuracy: r.host_train_accuracy,
                        final_loss: r.host_final_loss,
                    },
                };
                ctx.write(&format!("{sub}/model.json"), host.to_json()?)?;
                ctx.write(&format!("{sub}/logical_tree.json"), study.tree.to_json()?)?;
                ctx.write(&format!("{sub}/probes.csv"), probes_csv(&study.probes))?;
                for pair in study.probes.chunks(2) {
                    let label = &pair[0].node;
                    ctx.write(&format!("{sub}/probe_{label}.svg"), probe_svg(&format!("node {label}"), pair))?;
                }
                if let Some(t) = &study.spliced {
                    ctx.write(&format!("{sub}/spliced_tree.json"), t.to_json()?)?;
                }
                ctx.write(&format!("{sub}/report.json"), serde_json::to_string_pretty(r)?)?;
                println!(
                    "seed {s}: host train {:.3} test {:.3}; |Σ₀| {}; agreement {:.4} on {} enumerated test samples; {} flags",
                    r.host_train_accuracy,
                    r.host_test_accuracy,
                    r.sigma_zero,
                    r.agreement_enumerated,
                    r.enumerated_test,
                    r.flags.len()
                );
                match (&r.splice, &r.splice_error) {
                    (Some(sp), _) => println!(
                        "  splice at {}: test {:.3} -> {:.3}",
                        sp.path, sp.before.test, sp.after.test
                    ),
                    (None, Some(why)) => println!("  no splice: {why}"),
                    (None, None) => {}
                }
                improved |= r.improved();
            }
            return Ok(improved);
        }
    }
    Ok(true)
}
