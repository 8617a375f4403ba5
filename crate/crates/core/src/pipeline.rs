//! Cohort generation, the six stage combinations, the LAX ablation and report files.
//!
//! A cohort directory holds `manifest.json`, the shared `atlas.nii` and one
//! `case_NNN/` directory per case with `case.json`, the dense `gt.nii` and the
//! corrupted slice stack under `stack/`.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{build_cardiac_frame, Grid3, LabelVolume, Vec3, LABEL_NAMES};
use crate::mesh::{check_topology, ChannelTopology};
use crate::metrics::{evaluate_case_lenient, LabelMetrics};
use crate::nifti::{read_label_volume, write_labels, write_mask};
use crate::phantom::{generate, Landmarks, PhantomSpec};
use crate::registration::{densify, register, LossRecord, Mode, RegistrationConfig, RegistrationResult};
use crate::slicer::{corrupt_stack, extract_stack, plan_slices, rasterize_stack, read_stack, write_stack, LaxView, SlicePlanConfig, SliceStack};
use crate::ssa::{correct, ShiftState, SsaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Combo {
    #[serde(rename = "SREG")]
    Sreg,
    #[serde(rename = "SSA-SREG")]
    SsaSreg,
    #[serde(rename = "EXT")]
    Ext,
    #[serde(rename = "SSA-EXT")]
    SsaExt,
    #[serde(rename = "EXT-DREG")]
    ExtDreg,
    #[serde(rename = "SSA-EXT-DREG")]
    SsaExtDreg,
}

impl Combo {
    pub const ALL: [Combo; 6] = [Combo::Sreg, Combo::SsaSreg, Combo::Ext, Combo::SsaExt, Combo::ExtDreg, Combo::SsaExtDreg];

    pub fn name(self) -> &'static str {
        match self {
            Combo::Sreg => "SREG",
            Combo::SsaSreg => "SSA-SREG",
            Combo::Ext => "EXT",
            Combo::SsaExt => "SSA-EXT",
            Combo::ExtDreg => "EXT-DREG",
            Combo::SsaExtDreg => "SSA-EXT-DREG",
        }
    }

    pub fn ssa(self) -> bool {
        matches!(self, Combo::SsaSreg | Combo::SsaExt | Combo::SsaExtDreg)
    }

    pub fn external(self) -> bool {
        !matches!(self, Combo::Sreg | Combo::SsaSreg)
    }

    pub fn dense_repair(self) -> bool {
        matches!(self, Combo::ExtDreg | Combo::SsaExtDreg)
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Combo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Combo::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown combo {s:?}")))
    }
}

/// A combination plus the source of its external prediction. Without a file
/// (or when the file is missing from a case) EXT stages fall back to the
/// sparse-registration densification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSpec {
    pub combo: Combo,
    /// Label volume to import, relative to the case directory unless absolute.
    pub external_prediction: Option<PathBuf>,
}

impl ComboSpec {
    pub fn new(combo: Combo) -> Self {
        Self { combo, external_prediction: None }
    }

    pub fn with_prediction(combo: Combo, path: impl Into<PathBuf>) -> Self {
        Self { combo, external_prediction: Some(path.into()) }
    }
}

/// LAX views kept alongside the full SAX stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub views: Vec<LaxView>,
}

impl AblationSpec {
    pub fn new(mut views: Vec<LaxView>) -> Result<Self> {
        views.sort();
        views.dedup();
        if !views.contains(&LaxView::FourChamber) {
            return Err(Error::InvalidArgument("the 4-chamber view is always retained".into()));
        }
        Ok(Self { views })
    }

    pub fn full() -> Self {
        Self { views: LaxView::ALL.to_vec() }
    }

    pub fn is_full(&self) -> bool {
        LaxView::ALL.iter().all(|v| self.views.contains(v))
    }

    /// `2/3/4`, `2/4` or `4`.
    pub fn code(&self) -> String {
        self.views.iter().map(|v| v.short_name().trim_end_matches("ch")).collect::<Vec<_>>().join("/")
    }

    pub fn label(&self) -> String {
        format!("SAX&{}", self.code())
    }
}

impl FromStr for AblationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let views = s
            .trim()
            .trim_start_matches("SAX&")
            .split(['/', ','])
            .map(|t| match t.trim().trim_end_matches("ch") {
                "2" => Ok(LaxView::TwoChamber),
                "3" => Ok(LaxView::ThreeChamber),
                "4" => Ok(LaxView::FourChamber),
                other => Err(Error::InvalidArgument(format!("unknown LAX view {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        AblationSpec::new(views)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    /// Grid of the dense ground truth, the atlas and every registration.
    pub eval_dims: [usize; 3],
    pub eval_spacing_mm: f64,
    /// Grid of the phantom the slices are cut from.
    pub source_dims: [usize; 3],
    pub source_spacing_mm: f64,
    pub atlas_seed: u64,
    pub plan: SlicePlanConfig,
    pub inplane_range_mm: f64,
    pub plan_range_mm: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            eval_dims: [48, 48, 48],
            eval_spacing_mm: 4.0,
            source_dims: [160, 160, 160],
            source_spacing_mm: 1.25,
            atlas_seed: 0,
            plan: SlicePlanConfig::default(),
            inplane_range_mm: 8.0,
            plan_range_mm: 2.0,
        }
    }
}

impl CohortConfig {
    pub fn eval_grid(&self) -> Result<Grid3> {
        Grid3::centered(self.eval_dims, self.eval_spacing_mm, Vec3::zeros())
    }

    pub fn source_grid(&self) -> Result<Grid3> {
        Grid3::centered(self.source_dims, self.source_spacing_mm, Vec3::zeros())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub phantom_seed: u64,
    pub corruption_seed: u64,
    /// Paths relative to the case directory.
    pub gt: String,
    pub stack: String,
    pub atlas: String,
    pub landmarks: Landmarks,
    /// Mean in-plane |shift| per axis over the stack, mm.
    pub mean_abs_shift_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_cases: usize,
    pub seed: u64,
    pub config: CohortConfig,
    pub config_hash: String,
    pub atlas: String,
    pub cases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub inputs: Vec<String>,
    pub config_hash: String,
    pub version: String,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialise");
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes `<file>.json` next to an emitted volume.
pub fn write_provenance(file: &Path, stage: &str, inputs: &[&Path], config_hash: &str) -> Result<()> {
    let mut side = file.as_os_str().to_owned();
    side.push(".json");
    let p = Provenance {
        stage: stage.to_string(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config_hash: config_hash.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(Path::new(&side), &p)
}

/// Seed of the in-plane and planning corruption of a case.
pub fn corruption_seed(phantom_seed: u64) -> u64 {
    phantom_seed ^ 0x5eed_c0de_0000_0000
}

/// Cuts the planned stack of one phantom seed from the source grid.
pub fn synthesize_stack(cfg: &CohortConfig, phantom_seed: u64) -> Result<(SliceStack, Landmarks)> {
    let fine = generate(&PhantomSpec::from_seed(cfg.source_grid()?, phantom_seed))?;
    let lm = fine.landmarks;
    let frame = build_cardiac_frame(lm.mv, lm.tv, lm.apex)?;
    let planes = plan_slices(&frame, &cfg.plan)?;
    Ok((extract_stack(&fine.volume, &planes), lm))
}

/// Builds `n` cases with phantom seeds `seed + 1 ..= seed + n`.
pub fn make_cohort(dir: impl AsRef<Path>, n: usize, seed: u64, cfg: &CohortConfig) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("a cohort needs at least one case".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let hash = config_hash(&(cfg, seed));
    let eval = cfg.eval_grid()?;

    let atlas = generate(&PhantomSpec::from_seed(eval.clone(), cfg.atlas_seed))?.volume;
    let atlas_path = dir.join("atlas.nii");
    write_labels(&atlas_path, &atlas)?;
    write_provenance(&atlas_path, "phantom", &[], &hash)?;

    let ids: Vec<String> = (1..=n).map(|i| format!("case_{i:03}")).collect();
    ids.par_iter()
        .enumerate()
        .map(|(i, id)| -> Result<()> {
            let phantom_seed = seed + 1 + i as u64;
            let case_dir = dir.join(id);
            fs::create_dir_all(&case_dir)?;
            let gt = generate(&PhantomSpec::from_seed(eval.clone(), phantom_seed))?.volume;
            let gt_path = case_dir.join("gt.nii");
            write_labels(&gt_path, &gt)?;
            write_provenance(&gt_path, "phantom", &[], &hash)?;

            let (clean, landmarks) = synthesize_stack(cfg, phantom_seed)?;
            let cseed = corruption_seed(phantom_seed);
            let stack = corrupt_stack(&clean, cseed, cfg.inplane_range_mm, cfg.plan_range_mm)?;
            write_stack(&stack, case_dir.join("stack"))?;
            let shifts: Vec<f64> = stack.slices.iter().flat_map(|s| s.applied_shift.map(f64::abs)).collect();
            let record = CaseRecord {
                id: id.clone(),
                phantom_seed,
                corruption_seed: cseed,
                gt: "gt.nii".into(),
                stack: "stack/stack.json".into(),
                atlas: "../atlas.nii".into(),
                landmarks,
                mean_abs_shift_mm: shifts.iter().sum::<f64>() / shifts.len().max(1) as f64,
            };
            write_json(&case_dir.join("case.json"), &record)
        })
        .collect::<Result<Vec<()>>>()?;

    let manifest = Manifest { n_cases: n, seed, config: cfg.clone(), config_hash: hash, atlas: "atlas.nii".into(), cases: ids };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(cohort_dir: impl AsRef<Path>) -> Result<Manifest> {
    read_json(&cohort_dir.as_ref().join("manifest.json"))
}

/// Everything `run_case` needs, loaded from a case directory.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub dir: PathBuf,
    pub record: CaseRecord,
    pub gt: LabelVolume,
    pub stack: SliceStack,
    pub atlas: LabelVolume,
}

pub fn load_case(case_dir: impl AsRef<Path>) -> Result<CaseData> {
    let dir = case_dir.as_ref().to_path_buf();
    let record: CaseRecord = read_json(&dir.join("case.json")).map_err(|e| e.in_stage("load"))?;
    let stack = read_stack(dir.join(&record.stack)).map_err(|e| e.in_stage("load"))?;
    let gt = read_label_volume(dir.join(&record.gt), stack.channels).map_err(|e| e.in_stage("load"))?;
    let atlas = read_label_volume(dir.join(&record.atlas), stack.channels).map_err(|e| e.in_stage("load"))?;
    Ok(CaseData { dir, record, gt, stack, atlas })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub ssa: SsaConfig,
    /// Atlas to rasterised stack.
    pub sparse: RegistrationConfig,
    /// Atlas to dense prediction (topology repair).
    pub dense: RegistrationConfig,
    /// Extra dense attempts when the repaired volume still fails the
    /// topology check, each with λ multiplied by `repair_lambda_factor`.
    pub repair_retries: usize,
    pub repair_lambda_factor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // The library default λ = 2000 barely lets the atlas deform under the
        // voxel-sum losses used here; λ = 1 is the tuned sparse value.
        let sparse = RegistrationConfig { lambda: 1.0, ..RegistrationConfig::default() };
        // A dense target constrains every voxel, so repair can afford a
        // finer force and a weaker penalty. At σ = 6 mm, λ = 1 the 4 mm
        // grid loses 3-4 Dice points against the imported prediction.
        let dense = RegistrationConfig { lambda: 0.1, svf_smoothing_sigma_mm: 3.0, ..sparse.clone() };
        Self { ssa: SsaConfig::default(), sparse, dense, repair_retries: 2, repair_lambda_factor: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaSummary {
    pub iterations: usize,
    pub converged: bool,
    pub total_ssd: Vec<f64>,
}

impl From<&ShiftState> for SsaSummary {
    fn from(s: &ShiftState) -> Self {
        Self { iterations: s.iterations, converged: s.converged, total_ssd: s.total_ssd.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub case: String,
    pub combo: Combo,
    pub views: String,
    /// Where the pre-repair prediction came from: `sparse-registration` or the imported file.
    pub prediction_source: String,
    pub metrics: LabelMetrics,
    /// Dice of the unregistered atlas against the ground truth.
    pub atlas_dice: Vec<f64>,
    /// Dice of the prediction before dense repair (equal to `metrics.dice` without repair).
    pub prediction_dice: Vec<f64>,
    pub topology: Vec<ChannelTopology>,
    pub ssa: Option<SsaSummary>,
    pub sparse_final: Option<LossRecord>,
    pub dense_final: Option<LossRecord>,
    /// Dense registrations run; 0 without repair.
    pub repair_attempts: usize,
}

impl ExperimentReport {
    pub fn topology_pass(&self) -> bool {
        self.topology.iter().all(|t| t.pass)
    }
}

fn write_trace(path: &Path, result: &RegistrationResult) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,L_a2s,L_s2a,L_reg,total")?;
    for r in &result.trace {
        writeln!(f, "{},{},{},{},{}", r.step, r.a2s, r.s2a, r.reg, r.total)?;
    }
    Ok(())
}

struct Artifacts<'a> {
    dir: Option<PathBuf>,
    hash: &'a str,
}

impl Artifacts<'_> {
    fn volume(&self, name: &str, stage: &str, inputs: &[&Path], vol: &LabelVolume) -> Result<()> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            write_labels(&p, vol)?;
            write_provenance(&p, stage, inputs, self.hash)?;
        }
        Ok(())
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Runs one combination on a loaded case. `views` restricts the LAX views;
/// `out`, when given, receives every intermediate volume with provenance.
pub fn run_loaded_case(
    case: &CaseData,
    combo: &ComboSpec,
    cfg: &ExperimentConfig,
    views: Option<&AblationSpec>,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    let hash = config_hash(&(cfg, combo, views));
    let art = Artifacts { dir: out.map(Path::to_path_buf), hash: &hash };
    if let Some(d) = &art.dir {
        fs::create_dir_all(d)?;
    }
    let stack_path = case.dir.join(&case.record.stack);
    let atlas_path = case.dir.join(&case.record.atlas);

    let mut stack = match views {
        Some(v) => case.stack.retain_lax(&v.views),
        None => case.stack.clone(),
    };
    let mut ssa_summary = None;
    if combo.combo.ssa() {
        let (corrected, state) = correct(&stack, &cfg.ssa).map_err(|e| e.in_stage("ssa"))?;
        if let Some(d) = &art.dir {
            write_stack(&corrected, d.join("ssa_stack"))?;
            write_json(&d.join("ssa_state.json"), &state)?;
        }
        ssa_summary = Some(SsaSummary::from(&state));
        stack = corrected;
    }

    let (sparse, mask) = rasterize_stack(&stack, &case.gt.grid);
    art.volume("sparse.nii", "rasterize", &[&stack_path], &sparse)?;
    if let Some(p) = art.path("mask.nii") {
        write_mask(&p, &mask)?;
        write_provenance(&p, "rasterize", &[&stack_path], &hash)?;
    }

    let imported = match (&combo.external_prediction, combo.combo.external()) {
        (Some(p), true) => {
            let p = if p.is_absolute() { p.clone() } else { case.dir.join(p) };
            p.exists().then_some(p)
        }
        _ => None,
    };
    let mut sparse_final = None;
    let (prediction, source) = match imported {
        Some(p) => {
            let vol = read_label_volume(&p, case.atlas.channels).map_err(|e| e.in_stage("import"))?;
            vol.grid.ensure_same(&case.gt.grid, "imported prediction vs ground truth").map_err(|e| e.in_stage("import"))?;
            (vol, p.display().to_string())
        }
        None => {
            let r = register(&sparse, &case.atlas, Mode::Sparse, Some(&mask), &cfg.sparse).map_err(|e| e.in_stage("sparse registration"))?;
            if let Some(p) = art.path("sparse_trace.csv") {
                write_trace(&p, &r)?;
            }
            sparse_final = Some(r.final_losses());
            (densify(&r, &case.atlas).map_err(|e| e.in_stage("densify"))?, "sparse-registration".to_string())
        }
    };
    art.volume("prediction.nii", "densify", &[&stack_path, &atlas_path], &prediction)?;

    let mut dense_final = None;
    let mut repair_attempts = 0;
    let final_vol = if combo.combo.dense_repair() {
        // A weak penalty fits the prediction closely but can pinch thin
        // walls apart on a coarse grid; stiffen until the topology holds.
        let mut dense = cfg.dense.clone();
        loop {
            repair_attempts += 1;
            let r = register(&prediction, &case.atlas, Mode::Dense, None, &dense).map_err(|e| e.in_stage("dense registration"))?;
            let repaired = densify(&r, &case.atlas).map_err(|e| e.in_stage("repair"))?;
            let done = repair_attempts > cfg.repair_retries || check_topology(&repaired).iter().all(|t| t.pass);
            if done {
                if let Some(p) = art.path("dense_trace.csv") {
                    write_trace(&p, &r)?;
                }
                dense_final = Some(r.final_losses());
                art.volume("repaired.nii", "dense registration", &[&atlas_path], &repaired)?;
                break repaired;
            }
            dense.lambda = if dense.lambda > 0.0 { dense.lambda * cfg.repair_lambda_factor } else { cfg.sparse.lambda };
        }
    } else {
        prediction.clone()
    };

    let metrics = evaluate_case_lenient(&final_vol, &case.gt).map_err(|e| e.in_stage("metrics"))?;
    let prediction_dice = if combo.combo.dense_repair() {
        evaluate_dice(&prediction, &case.gt)?
    } else {
        metrics.dice.clone()
    };
    let report = ExperimentReport {
        case: case.record.id.clone(),
        combo: combo.combo,
        views: views.cloned().unwrap_or_else(AblationSpec::full).label(),
        prediction_source: source,
        atlas_dice: evaluate_dice(&case.atlas, &case.gt)?,
        prediction_dice,
        topology: check_topology(&final_vol),
        metrics,
        ssa: ssa_summary,
        sparse_final,
        dense_final,
        repair_attempts,
    };
    if let Some(d) = &art.dir {
        write_json(&d.join("report.json"), &report)?;
    }
    Ok(report)
}

fn evaluate_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<Vec<f64>> {
    (1..gt.channels).map(|l| crate::metrics::dice(pred, gt, l)).collect()
}

/// Loads `case_dir` and runs one combination on it.
pub fn run_case(case_dir: impl AsRef<Path>, combo: &ComboSpec, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let case = load_case(case_dir)?;
    run_loaded_case(&case, combo, cfg, None, out)
}

fn case_out(out: Option<&Path>, case: &str, tag: &str) -> Option<PathBuf> {
    out.map(|o| o.join(case).join(tag))
}

/// Runs a combination on every case of a cohort, cases in parallel.
pub fn run_experiment(cohort_dir: impl AsRef<Path>, combo: &ComboSpec, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ExperimentReport>> {
    let dir = cohort_dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .cases
        .par_iter()
        .map(|id| {
            let case = load_case(dir.join(id))?;
            run_loaded_case(&case, combo, cfg, None, case_out(out, id, combo.combo.name()).as_deref())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub views: String,
    pub mean_dice: Vec<f64>,
    /// Reference-row Dice minus this row's Dice; positive means a decline.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub combo: Combo,
    pub labels: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<ExperimentReport>,
}

/// Mean Dice per view set with Δ against the full-view row (or the first row
/// when the full set is not among `specs`).
pub fn run_ablation(
    cohort_dir: impl AsRef<Path>,
    combo: &ComboSpec,
    specs: &[AblationSpec],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<AblationTable> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one view set".into()));
    }
    let dir = cohort_dir.as_ref();
    let manifest = read_manifest(dir)?;
    let jobs: Vec<(usize, &String)> = (0..specs.len()).flat_map(|s| manifest.cases.iter().map(move |c| (s, c))).collect();
    let reports: Vec<ExperimentReport> = jobs
        .par_iter()
        .map(|&(s, id)| {
            let case = load_case(dir.join(id))?;
            let tag = format!("{}_{}", combo.combo.name(), specs[s].code().replace('/', ""));
            run_loaded_case(&case, combo, cfg, Some(&specs[s]), case_out(out, id, &tag).as_deref())
        })
        .collect::<Result<_>>()?;
    Ok(ablation_table(combo.combo, specs, reports))
}

/// Groups reports by view set; rows follow `specs`.
pub fn ablation_table(combo: Combo, specs: &[AblationSpec], reports: Vec<ExperimentReport>) -> AblationTable {
    let labels: Vec<String> = LABEL_NAMES[1..].iter().map(|s| s.to_string()).collect();
    let mut rows: Vec<AblationRow> = specs
        .iter()
        .map(|spec| {
            let name = spec.label();
            let group: Vec<&ExperimentReport> = reports.iter().filter(|r| r.views == name).collect();
            let mean_dice = (0..labels.len())
                .map(|l| group.iter().map(|r| r.metrics.dice[l]).sum::<f64>() / group.len().max(1) as f64)
                .collect();
            AblationRow { views: name, mean_dice, delta: vec![] }
        })
        .collect();
    let reference = specs.iter().position(AblationSpec::is_full).unwrap_or(0);
    let ref_dice = rows[reference].mean_dice.clone();
    for row in &mut rows {
        row.delta = ref_dice.iter().zip(&row.mean_dice).map(|(a, b)| a - b).collect();
    }
    AblationTable { combo, labels, rows, reports }
}

/// Per-case rows `case,label,dice,hd_mm`.
pub fn write_case_csv(path: impl AsRef<Path>, reports: &[ExperimentReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "case,label,dice,hd_mm")?;
    for r in reports {
        for (l, name) in r.metrics.labels.iter().enumerate() {
            writeln!(f, "{},{},{},{}", r.case, name, r.metrics.dice[l], r.metrics.hausdorff_mm[l])?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd_mean: f64,
    pub hd_std: f64,
    /// Cases whose topology check failed on this label.
    pub topology_failures: usize,
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Mean ± population std per label; HD ignores cases where a label was empty.
pub fn summarize(reports: &[ExperimentReport]) -> Vec<LabelSummary> {
    let labels: Vec<String> = reports.first().map(|r| r.metrics.labels.clone()).unwrap_or_default();
    labels
        .iter()
        .enumerate()
        .map(|(l, name)| {
            let (dice_mean, dice_std) = mean_std(reports.iter().map(|r| r.metrics.dice[l]));
            let (hd_mean, hd_std) = mean_std(reports.iter().map(|r| r.metrics.hausdorff_mm[l]));
            LabelSummary {
                label: name.clone(),
                dice_mean,
                dice_std,
                hd_mean,
                hd_std,
                topology_failures: reports.iter().filter(|r| !r.topology.get(l).is_some_and(|t| t.pass)).count(),
            }
        })
        .collect()
}

/// One row per combo: mean ± std Dice and HD for every label.
pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[(Combo, Vec<LabelSummary>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let Some((_, first)) = rows.first() else {
        return Ok(());
    };
    let mut header = vec!["combo".to_string()];
    for s in first {
        header.extend([
            format!("{}_dice_mean", s.label),
            format!("{}_dice_std", s.label),
            format!("{}_hd_mean", s.label),
            format!("{}_hd_std", s.label),
        ]);
    }
    writeln!(f, "{}", header.join(","))?;
    for (combo, summary) in rows {
        let mut cells = vec![combo.name().to_string()];
        for s in summary {
            cells.extend([s.dice_mean, s.dice_std, s.hd_mean, s.hd_std].map(|x| x.to_string()));
        }
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Rows `views,<label>...,delta_<label>...`.
pub fn write_ablation_csv(path: impl AsRef<Path>, table: &AblationTable) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header = vec!["views".to_string()];
    header.extend(table.labels.iter().cloned());
    header.extend(table.labels.iter().map(|l| format!("delta_{l}")));
    writeln!(f, "{}", header.join(","))?;
    for row in &table.rows {
        let mut cells = vec![row.views.clone()];
        cells.extend(row.mean_dice.iter().chain(&row.delta).map(|x| x.to_string()));
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cohort() -> CohortConfig {
        CohortConfig {
            eval_dims: [24, 24, 24],
            eval_spacing_mm: 8.0,
            source_dims: [64, 64, 64],
            source_spacing_mm: 3.0,
            plan: SlicePlanConfig { pixel_spacing_mm: 3.0, heart_extent_mm: 190.0, ..SlicePlanConfig::default() },
            ..CohortConfig::default()
        }
    }

    #[test]
    fn combo_names_round_trip() {
        for c in Combo::ALL {
            assert_eq!(c.name().parse::<Combo>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
        assert!("LTN".parse::<Combo>().is_err());
        assert!(Combo::SsaExtDreg.ssa() && Combo::SsaExtDreg.dense_repair() && Combo::SsaExtDreg.external());
        assert!(!Combo::Sreg.ssa() && !Combo::Sreg.external());
    }

    #[test]
    fn ablation_specs_parse() {
        let s: AblationSpec = "2/3/4".parse().unwrap();
        assert!(s.is_full());
        assert_eq!(s.label(), "SAX&2/3/4");
        assert_eq!("SAX&4".parse::<AblationSpec>().unwrap().views, vec![LaxView::FourChamber]);
        assert_eq!("4/2".parse::<AblationSpec>().unwrap().code(), "2/4");
        assert!("2/3".parse::<AblationSpec>().is_err());
        assert!("5".parse::<AblationSpec>().is_err());
    }

    #[test]
    fn cohort_is_deterministic_and_runnable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny_cohort();
        let ma = make_cohort(a.path(), 1, 11, &cfg).unwrap();
        let mb = make_cohort(b.path(), 1, 11, &cfg).unwrap();
        assert_eq!(config_hash(&ma), config_hash(&mb));
        for f in ["atlas.nii", "case_001/gt.nii", "case_001/stack/stack.json", "case_001/case.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert!(a.path().join("case_001/gt.nii.json").exists());

        let out = tempfile::tempdir().unwrap();
        let ecfg = ExperimentConfig {
            sparse: RegistrationConfig { lambda: 1.0, max_steps: 5, affine_steps: 10, ..Default::default() },
            ..ExperimentConfig::default()
        };
        let r = run_case(a.path().join("case_001"), &ComboSpec::new(Combo::SsaSreg), &ecfg, Some(out.path())).unwrap();
        assert_eq!(r.metrics.dice.len(), 5);
        assert!(r.ssa.is_some() && r.sparse_final.is_some() && r.dense_final.is_none());
        for f in ["sparse.nii", "sparse.nii.json", "mask.nii", "prediction.nii", "prediction.nii.json", "sparse_trace.csv", "report.json"] {
            assert!(out.path().join(f).exists(), "{f}");
        }
        let again = run_case(a.path().join("case_001"), &ComboSpec::new(Combo::SsaSreg), &ecfg, None).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn external_prediction_is_imported() {
        let dir = tempfile::tempdir().unwrap();
        make_cohort(dir.path(), 1, 3, &tiny_cohort()).unwrap();
        let case = dir.path().join("case_001");
        fs::copy(case.join("gt.nii"), case.join("pred.nii")).unwrap();
        let r = run_case(&case, &ComboSpec::with_prediction(Combo::Ext, "pred.nii"), &ExperimentConfig::default(), None).unwrap();
        assert!(r.prediction_source.ends_with("pred.nii"));
        assert!(r.metrics.dice.iter().all(|&d| d == 1.0));
        assert!(r.metrics.hausdorff_mm.iter().all(|&h| h == 0.0));
        assert!(r.sparse_final.is_none());
    }

    #[test]
    fn ablation_delta_is_zero_against_itself() {
        let mk = |views: &str, d: f64| ExperimentReport {
            case: "c".into(),
            combo: Combo::Sreg,
            views: views.into(),
            prediction_source: String::new(),
            metrics: LabelMetrics { labels: LABEL_NAMES[1..].iter().map(|s| s.to_string()).collect(), dice: vec![d; 5], hausdorff_mm: vec![1.0; 5] },
            atlas_dice: vec![],
            prediction_dice: vec![],
            topology: vec![],
            ssa: None,
            sparse_final: None,
            dense_final: None,
            repair_attempts: 0,
        };
        let specs = [AblationSpec::full(), "4".parse().unwrap()];
        let t = ablation_table(Combo::Sreg, &specs, vec![mk("SAX&2/3/4", 0.9), mk("SAX&4", 0.8)]);
        assert_eq!(t.rows[0].delta, vec![0.0; 5]);
        assert!(t.rows[1].delta.iter().all(|d| (d - 0.1).abs() < 1e-12));
    }

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_std([1.0, 3.0, f64::NAN].into_iter());
        assert_eq!((m, s), (2.0, 1.0));
    }
}
