use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cardiorecon::mesh::{channel_topology, ChannelTopology};
use cardiorecon::metrics::evaluate_case_lenient;
use cardiorecon::nifti::{read_label_volume, read_mask, write_labels, write_vectors};
use cardiorecon::phantom::{generate, generate_broken, Defect, Landmarks, PhantomSpec};
use cardiorecon::pipeline::{
    self, summarize, write_ablation_csv, write_case_csv, write_provenance, write_summary_csv, AblationSpec, CohortConfig, Combo,
    ComboSpec, ExperimentConfig,
};
use cardiorecon::registration::{densify, register, Mode, RegistrationConfig};
use cardiorecon::slicer::{corrupt_stack, extract_stack, plan_slices, read_stack, write_stack, SlicePlanConfig};
use cardiorecon::ssa::{correct, SsaConfig};
use cardiorecon::{build_cardiac_frame, Grid3, Vec3, NUM_CHANNELS};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

/// Every tunable default in one file (TOML or JSON). Missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct Config {
    seed: u64,
    phantom_dims: [usize; 3],
    phantom_spacing_mm: f64,
    plan: SlicePlanConfig,
    inplane_range_mm: f64,
    plan_range_mm: f64,
    ssa: SsaConfig,
    registration: RegistrationConfig,
    cohort: CohortConfig,
    experiment: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom_dims: [160, 160, 160],
            phantom_spacing_mm: 1.25,
            plan: SlicePlanConfig::default(),
            inplane_range_mm: 8.0,
            plan_range_mm: 2.0,
            ssa: SsaConfig::default(),
            registration: RegistrationConfig::default(),
            cohort: CohortConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl Config {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Ok(if is_json { serde_json::from_str(&text)? } else { toml::from_str(&text)? })
    }
}

#[derive(Parser)]
#[command(name = "cardiorecon", version, about = "Dense heart label geometry from sparse, motion-corrupted slice stacks")]
struct Cli {
    /// TOML or JSON configuration; see `cardiorecon config`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sparse,
    Dense,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate a phantom volume and its landmarks.
    Phantom {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// none, handle:<LABEL> or split:<LABEL>
        #[arg(long, default_value = "none")]
        defect: Defect,
    },
    /// Generate a phantom cohort with corrupted stacks and a manifest.
    Cohort {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan and extract a slice stack from a dense volume.
    Slice {
        #[arg(long)]
        volume: PathBuf,
        /// landmarks.json with mv, tv and apex in mm.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply in-plane and planning corruption to a stack.
    Corrupt {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        inplane: Option<f64>,
        #[arg(long)]
        plan: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slice shifting motion correction.
    Ssa {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        window: Option<i32>,
    },
    /// Register an atlas to a sparse or dense target.
    Register {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel Euler characteristic and component count.
    MeshCheck {
        volume: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write one binary STL per channel here.
        #[arg(long)]
        meshes: Option<PathBuf>,
    },
    /// Dice and Hausdorff against a ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one combination over a cohort.
    Experiment {
        #[arg(long)]
        combo: Combo,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prediction file to import in EXT stages, relative to each case.
        #[arg(long)]
        prediction: Option<PathBuf>,
        /// Directory for every intermediate volume.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// LAX-view ablation over a cohort.
    Ablation {
        #[arg(long)]
        cohort: PathBuf,
        /// Repeat for several rows, e.g. --views 2/3/4 --views 2/4 --views 4
        #[arg(long, required = true)]
        views: Vec<AblationSpec>,
        #[arg(long, default_value = "SREG")]
        combo: Combo,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
}

fn ensure_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    let hash = pipeline::config_hash(&cfg);
    match cli.command {
        Command::Config => print!("{}", toml::to_string(&cfg)?),
        Command::Phantom { seed, out, defect } => {
            ensure_dir(&out)?;
            let grid = Grid3::centered(cfg.phantom_dims, cfg.phantom_spacing_mm, Vec3::zeros())?;
            let spec = PhantomSpec::from_seed(grid, seed.unwrap_or(cfg.seed));
            let phantom = generate(&spec)?;
            let vol = generate_broken(&spec, defect)?;
            let path = out.join("phantom.nii");
            write_labels(&path, &vol)?;
            write_provenance(&path, "phantom", &[], &hash)?;
            write_json(&out.join("landmarks.json"), &phantom.landmarks)?;
            write_json(&out.join("spec.json"), &spec)?;
            println!("{}", path.display());
        }
        Command::Cohort { n, seed, out } => {
            let m = pipeline::make_cohort(&out, n, seed.unwrap_or(cfg.seed), &cfg.cohort)?;
            println!("{} cases in {} (config {})", m.n_cases, out.display(), &m.config_hash[..12]);
        }
        Command::Slice { volume, landmarks, out } => {
            let vol = read_label_volume(&volume, NUM_CHANNELS)?;
            let lm: Landmarks = serde_json::from_str(&fs::read_to_string(&landmarks)?)?;
            let frame = build_cardiac_frame(lm.mv, lm.tv, lm.apex)?;
            let planes = plan_slices(&frame, &cfg.plan)?;
            let stack = extract_stack(&vol, &planes);
            println!("{}", write_stack(&stack, &out)?.display());
        }
        Command::Corrupt { stack, seed, inplane, plan, out } => {
            let s = read_stack(&stack)?;
            let c = corrupt_stack(
                &s,
                seed.unwrap_or(cfg.seed),
                inplane.unwrap_or(cfg.inplane_range_mm),
                plan.unwrap_or(cfg.plan_range_mm),
            )?;
            println!("{}", write_stack(&c, &out)?.display());
        }
        Command::Ssa { stack, out, max_iters, window } => {
            let s = read_stack(&stack)?;
            let ssa_cfg = SsaConfig {
                max_iters: max_iters.unwrap_or(cfg.ssa.max_iters),
                window_px: window.unwrap_or(cfg.ssa.window_px),
            };
            let (corrected, state) = correct(&s, &ssa_cfg)?;
            let sidecar = write_stack(&corrected, &out)?;
            write_json(&out.join("ssa_state.json"), &state)?;
            println!(
                "{} iterations, converged: {}, SSD {:?} -> {}",
                state.iterations,
                state.converged,
                state.total_ssd.first(),
                sidecar.display()
            );
        }
        Command::Register { target, atlas, mode, mask, lambda, step, out } => {
            ensure_dir(&out)?;
            let t = read_label_volume(&target, NUM_CHANNELS)?;
            let a = read_label_volume(&atlas, NUM_CHANNELS)?;
            let m = mask.as_deref().map(read_mask).transpose()?;
            let mut rcfg = cfg.registration.clone();
            if let Some(l) = lambda {
                rcfg.lambda = l;
            }
            if let Some(s) = step {
                rcfg.step_size = s;
            }
            let mode = match mode {
                ModeArg::Sparse => Mode::Sparse,
                ModeArg::Dense => Mode::Dense,
            };
            let r = register(&t, &a, mode, m.as_ref(), &rcfg)?;
            let rhash = pipeline::config_hash(&rcfg);
            let inputs: Vec<&Path> = [Some(target.as_path()), Some(atlas.as_path()), mask.as_deref()].into_iter().flatten().collect();
            for (name, data) in [("phi.nii", &r.phi.positions), ("phi_inv.nii", &r.phi_inv.positions), ("velocity.nii", &r.velocity.data)] {
                let p = out.join(name);
                write_vectors(&p, &r.phi.grid, data)?;
                write_provenance(&p, "register", &inputs, &rhash)?;
            }
            let dense = densify(&r, &a)?;
            let p = out.join("densified.nii");
            write_labels(&p, &dense)?;
            write_provenance(&p, "densify", &inputs, &rhash)?;
            let mut csv = String::from("step,L_a2s,L_s2a,L_reg,total\n");
            for rec in &r.trace {
                csv += &format!("{},{},{},{},{}\n", rec.step, rec.a2s, rec.s2a, rec.reg, rec.total);
            }
            fs::write(out.join("loss_trace.csv"), csv)?;
            write_json(
                &out.join("affine.json"),
                &serde_json::json!({ "linear": r.affine.linear, "translation": r.affine.translation }),
            )?;
            let f = r.final_losses();
            println!("final L_a2s {:.4} L_s2a {:.4} L_reg {:.6} total {:.4}", f.a2s, f.s2a, f.reg, f.total);
        }
        Command::MeshCheck { volume, report, meshes } => {
            let vol = read_label_volume(&volume, NUM_CHANNELS)?;
            if let Some(d) = &meshes {
                ensure_dir(d)?;
            }
            let mut rows: Vec<ChannelTopology> = Vec::new();
            for l in 1..vol.channels {
                let (t, mesh) = channel_topology(&vol, l);
                if let (Some(d), Some(m)) = (&meshes, mesh) {
                    m.write_stl(d.join(format!("{}.stl", t.name)))?;
                }
                println!("{:4} chi {:>4} components {} {}", t.name, t.euler.map_or("-".into(), |e| e.to_string()), t.components, if t.pass { "pass" } else { "FAIL" });
                rows.push(t);
            }
            write_json(&report, &rows)?;
        }
        Command::Metrics { pred, gt, out } => {
            let g = read_label_volume(&gt, NUM_CHANNELS)?;
            let p = read_label_volume(&pred, NUM_CHANNELS)?;
            let m = evaluate_case_lenient(&p, &g)?;
            for (l, name) in m.labels.iter().enumerate() {
                println!("{name:4} dice {:.4} hd {:.2} mm", m.dice[l], m.hausdorff_mm[l]);
            }
            write_json(&out, &m)?;
        }
        Command::Experiment { combo, cohort, out, prediction, artifacts } => {
            let spec = ComboSpec { combo, external_prediction: prediction };
            let reports = pipeline::run_experiment(&cohort, &spec, &cfg.experiment, artifacts.as_deref())?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_case_csv(&out, &reports)?;
            let summary = summarize(&reports);
            write_summary_csv(out.with_extension("summary.csv"), &[(combo, summary.clone())])?;
            for s in &summary {
                println!("{combo} {:4} dice {:.4} ± {:.4} hd {:.2} ± {:.2} topology failures {}", s.label, s.dice_mean, s.dice_std, s.hd_mean, s.hd_std, s.topology_failures);
            }
        }
        Command::Ablation { cohort, views, combo, out, artifacts } => {
            let table = pipeline::run_ablation(&cohort, &ComboSpec::new(combo), &views, &cfg.experiment, artifacts.as_deref())?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_ablation_csv(&out, &table)?;
            for row in &table.rows {
                let cells: Vec<String> = row.mean_dice.iter().zip(&row.delta).map(|(d, x)| format!("{d:.4} ({x:+.4})")).collect();
                println!("{:10} {}", row.views, cells.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
