//! Experiment orchestration: a TOML-described matrix of (training method,
//! teacher/student scale pair, transfer remedy, seed) cells, each producing a
//! teacher, a from-scratch student, and a distilled student, plus the full
//! measurement battery. Finished cells are cached on disk by content hash, so
//! re-running a matrix is idempotent and reports are byte-identical across
//! repeats (wall time is stored per cell but kept out of the reports).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use crate::analysis::{self, EapGradient, EapResult, Metrics, VennCounts};
use crate::data::{self, DataConfig, DatasetBundle, Split};
use crate::debias::{self, DebiasMethod, TrainConfig};
use crate::distill::{self, DistillConfig, StudentInit};
use crate::models::{self, hex_digest, Family, InputShape, ModelSpec, ScaleTag, TrainedModel};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// What is done to the distillation step to preserve robustness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remedy {
    /// Plain distillation.
    None,
    /// Group-balanced (data-augmented) transfer set.
    Da,
    /// Iterative distillation through every intermediate ladder scale.
    Ikd,
    /// Student warm-started from the teacher's leading weight blocks.
    Init,
}

impl Remedy {
    pub fn name(self) -> &'static str {
        match self {
            Remedy::None => "none",
            Remedy::Da => "da",
            Remedy::Ikd => "ikd",
            Remedy::Init => "init",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub family: Family,
    pub scales: Vec<ScaleTag>,
    pub methods: Vec<DebiasMethod>,
    pub remedies: Vec<Remedy>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSection {
    pub alpha: f64,
    pub tau: f64,
}

fn default_cka_probe() -> usize {
    256
}
fn default_eap_probe() -> usize {
    64
}
fn default_density_bins() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSection {
    #[serde(default = "default_cka_probe")]
    pub cka_probe: usize,
    #[serde(default = "default_eap_probe")]
    pub eap_probe: usize,
    #[serde(default = "default_density_bins")]
    pub density_bins: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            cka_probe: default_cka_probe(),
            eap_probe: default_eap_probe(),
            density_bins: default_density_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub matrix: MatrixConfig,
    pub train: TrainSection,
    pub distill: DistillSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Default output directory for runs; the command line may override it.
    /// Not part of the config hash, so a store can be relocated.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        let token_data = matches!(self.data, DataConfig::Tokspur(_));
        let token_family = self.matrix.family == Family::Attn;
        if token_data != token_family {
            return Err(Error::InvalidConfig(
                "family/data mismatch: mlp pairs with vecspur, attn with tokspur".into(),
            ));
        }
        if self.matrix.scales.is_empty()
            || self.matrix.methods.is_empty()
            || self.matrix.remedies.is_empty()
            || self.matrix.seeds.is_empty()
        {
            return Err(Error::InvalidConfig("matrix axes must all be non-empty".into()));
        }
        let mut sorted = self.matrix.scales.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.matrix.scales.len() || sorted != self.matrix.scales {
            return Err(Error::InvalidConfig("scales must be strictly ascending".into()));
        }
        self.train_config(0).validate()?;
        self.distill_config(0).validate()?;
        if self.analysis.cka_probe < 2 || self.analysis.eap_probe == 0 || self.analysis.density_bins == 0
        {
            return Err(Error::InvalidConfig("analysis probe sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        match &self.data {
            DataConfig::Vecspur(c) => InputShape { input_dim: c.dim, seq_len: 0 },
            DataConfig::Tokspur(c) => InputShape { input_dim: c.vocab as usize, seq_len: c.seq_len },
        }
    }

    pub fn spec_for(&self, scale: ScaleTag) -> ModelSpec {
        models::spec_for(self.matrix.family, scale, self.input_shape())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed,
        }
    }

    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig { alpha: self.distill.alpha, tau: self.distill.tau, train: self.train_config(seed) }
    }

    /// Content hash of the whole configuration (canonical JSON).
    pub fn config_hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.out_dir = None;
        let json = serde_json::to_string(&hashed).expect("config serializes");
        hex_digest(&Sha256::digest(json.as_bytes()))
    }
}

/// Read the config persisted by [`run_matrix`] inside a result store, so
/// reports can be re-emitted from the store directory alone.
pub fn load_store_config(store: &Path) -> Result<ExperimentConfig> {
    let path = store.join("config.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidConfig(format!("no config.json in store {}: {e}", store.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config.json: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One cell of the matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: DebiasMethod,
    pub teacher: ScaleTag,
    pub student: ScaleTag,
    pub remedy: Remedy,
    pub seed: u64,
}

impl CellSpec {
    pub fn label(&self) -> String {
        format!(
            "{}/{}>{}/{}/seed{}",
            self.method.name(),
            self.teacher,
            self.student,
            self.remedy.name(),
            self.seed
        )
    }
}

/// All cells of a matrix: every method x every (teacher >= student) scale
/// pair x every remedy x every seed. Iterative distillation needs at least
/// one rung between teacher and student, so it skips the diagonal.
pub fn enumerate_cells(cfg: &ExperimentConfig, seed_offset: u64) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    for method in &cfg.matrix.methods {
        for &teacher in &cfg.matrix.scales {
            for &student in &cfg.matrix.scales {
                if student > teacher {
                    continue;
                }
                for &remedy in &cfg.matrix.remedies {
                    if remedy == Remedy::Ikd && student == teacher {
                        continue;
                    }
                    for &seed in &cfg.matrix.seeds {
                        cells.push(CellSpec {
                            method: method.clone(),
                            teacher,
                            student,
                            remedy,
                            seed: seed + seed_offset,
                        });
                    }
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellSpec,
    pub key: String,
    pub teacher_metrics: Metrics,
    pub scratch_metrics: Metrics,
    pub distilled_metrics: Metrics,
    /// Teacher ood minus distilled ood: robustness lost in transfer.
    pub c1: f64,
    /// Scratch-student ood minus distilled ood: what distillation costs over
    /// training the same capacity directly.
    pub c2: f64,
    /// Teacher/distilled prediction agreement on the id test split.
    pub agreement_id: f64,
    pub agreement_ood: f64,
    pub venn_ood: VennCounts,
    /// Positive-class probability histogram of the distilled model on ood
    /// data (counts per bin), plus the distilled model's mean confidence in
    /// the predicted class on the id split.
    pub density_ood: Vec<usize>,
    pub mean_confidence_id: f64,
    /// Teacher-vs-distilled layer CKA grids on the id and ood test splits.
    pub cka_teacher_distilled: Vec<Vec<f64>>,
    pub cka_teacher_distilled_ood: Vec<Vec<f64>>,
    /// Attribution grid of the distilled model (attention family only).
    pub eap_distilled: Option<EapResult>,
    /// Wall time of the cell; informational only, never reported.
    pub wall_ms: u64,
}

/// Train-or-reuse store for teachers and scratch students, shared across
/// cells of one run.
struct ModelStore<'a> {
    cfg: &'a ExperimentConfig,
    bundles: Mutex<HashMap<u64, DatasetBundle>>,
    models: Mutex<HashMap<(String, ScaleTag, u64), TrainedModel>>,
}

impl<'a> ModelStore<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg, bundles: Mutex::new(HashMap::new()), models: Mutex::new(HashMap::new()) }
    }

    fn bundle(&self, seed: u64) -> Result<DatasetBundle> {
        if let Some(b) = self.bundles.lock().unwrap().get(&seed) {
            return Ok(b.clone());
        }
        let b = data::generate(&self.cfg.data, seed)?;
        self.bundles.lock().unwrap().insert(seed, b.clone());
        Ok(b)
    }

    fn model(&self, method: &DebiasMethod, scale: ScaleTag, seed: u64) -> Result<TrainedModel> {
        let key = (method.name(), scale, seed);
        if let Some(m) = self.models.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let bundle = self.bundle(seed)?;
        let spec = self.cfg.spec_for(scale);
        // Scale-specific training seed so ladder rungs are independent draws.
        let train_seed = seed ^ ((scale.index() as u64 + 1) << 32);
        let m = debias::train_debias(
            method,
            &spec,
            bundle.split(Split::Train),
            bundle.split(Split::Heldout),
            &bundle.config,
            &self.cfg.train_config(train_seed),
        )?;
        self.models.lock().unwrap().insert(key, m.clone());
        Ok(m)
    }
}

fn cell_key(cfg: &ExperimentConfig, cell: &CellSpec) -> String {
    let payload = serde_json::json!({
        "config": cfg.config_hash(),
        "cell": cell,
    });
    hex_digest(&Sha256::digest(payload.to_string().as_bytes()))
}

fn run_cell(cfg: &ExperimentConfig, cell: &CellSpec, store: &ModelStore) -> Result<CellResult> {
    let start = Instant::now();
    let bundle = store.bundle(cell.seed)?;
    let train_ds = bundle.split(Split::Train);
    let teacher = store.model(&cell.method, cell.teacher, cell.seed)?;
    let scratch = store.model(&cell.method, cell.student, cell.seed)?;

    let student_spec = cfg.spec_for(cell.student);
    let dcfg = cfg.distill_config(cell.seed ^ 0x615d_7a90);
    let distilled = match cell.remedy {
        Remedy::None => distill::distill(&student_spec, &teacher, train_ds, &dcfg, StudentInit::Fresh)?,
        Remedy::Init => {
            distill::distill(&student_spec, &teacher, train_ds, &dcfg, StudentInit::FromTeacher)?
        }
        Remedy::Da => {
            let balanced = data::group_balance(train_ds, cell.seed ^ 0xda)?;
            distill::distill(&student_spec, &teacher, &balanced, &dcfg, StudentInit::Fresh)?
        }
        Remedy::Ikd => {
            let path: Vec<ScaleTag> = cfg
                .matrix
                .scales
                .iter()
                .rev()
                .copied()
                .filter(|&s| s < cell.teacher && s >= cell.student)
                .collect();
            distill::ikd_chain(&path, &teacher, train_ds, &dcfg, StudentInit::Fresh)?
        }
    };

    let teacher_metrics = analysis::evaluate(&teacher, &bundle)?;
    let scratch_metrics = analysis::evaluate(&scratch, &bundle)?;
    let distilled_metrics = analysis::evaluate(&distilled, &bundle)?;
    let id_ds = bundle.split(Split::IdTest);
    let ood_ds = bundle.split(Split::OodTest);
    let cka_grid = |ds: &data::GroupedDataset| -> Result<Vec<Vec<f64>>> {
        let grid = analysis::cka_matrix(
            &teacher,
            &distilled,
            ds,
            cfg.analysis.cka_probe.min(ds.samples.len()),
            cell.seed,
        )?;
        Ok((0..grid.rows()).map(|r| grid.row(r).to_vec()).collect())
    };
    let cka_rows = cka_grid(id_ds)?;
    let cka_rows_ood = cka_grid(ood_ds)?;
    let eap = if cfg.matrix.family == Family::Attn {
        Some(analysis::eap_scores(
            &distilled,
            id_ds,
            &bundle.config,
            cfg.analysis.eap_probe,
            cell.seed,
            EapGradient::Node,
        )?)
    } else {
        None
    };

    Ok(CellResult {
        key: cell_key(cfg, cell),
        c1: teacher_metrics.ood_accuracy - distilled_metrics.ood_accuracy,
        c2: scratch_metrics.ood_accuracy - distilled_metrics.ood_accuracy,
        agreement_id: analysis::agreement(&teacher, &distilled, id_ds)?,
        agreement_ood: analysis::agreement(&teacher, &distilled, ood_ds)?,
        venn_ood: analysis::venn_counts(&teacher, &distilled, ood_ds)?,
        density_ood: analysis::prob_density(&distilled, ood_ds, cfg.analysis.density_bins)?.histogram,
        mean_confidence_id: {
            let rec = analysis::prob_density(&distilled, id_ds, cfg.analysis.density_bins)?;
            rec.probs.iter().map(|&p| p.max(1.0 - p)).sum::<f64>() / rec.probs.len() as f64
        },
        cka_teacher_distilled: cka_rows,
        cka_teacher_distilled_ood: cka_rows_ood,
        eap_distilled: eap,
        teacher_metrics,
        scratch_metrics,
        distilled_metrics,
        cell: cell.clone(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: CellSpec,
    pub key: String,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixReport {
    pub config_hash: String,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

pub struct RunOptions {
    pub jobs: usize,
    pub seed_offset: u64,
    /// Only run cells whose key starts with this prefix or whose label
    /// contains it.
    pub cell_filter: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, seed_offset: 0, cell_filter: None }
    }
}

/// Run every cell of the matrix, reusing on-disk results from `out_dir`.
/// Cell failures are recorded and do not stop the rest of the matrix.
pub fn run_matrix(cfg: &ExperimentConfig, out_dir: &Path, opts: &RunOptions) -> Result<MatrixReport> {
    cfg.validate()?;
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    // Persist the config so the store is self-describing: reports can be
    // re-emitted later from the directory alone.
    let stored = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out_dir.join("config.json"), stored)?;
    let mut cells = enumerate_cells(cfg, opts.seed_offset);
    if let Some(filter) = &opts.cell_filter {
        cells.retain(|c| {
            let key = cell_key(cfg, c);
            key.starts_with(filter.as_str()) || c.label().contains(filter.as_str())
        });
        if cells.is_empty() {
            return Err(Error::InvalidArgument(format!("no cell matches filter {filter}")));
        }
    }

    let store = ModelStore::new(cfg);
    let worker = |cell: &CellSpec| -> std::result::Result<CellResult, CellFailure> {
        let key = cell_key(cfg, cell);
        let path = cells_dir.join(format!("{key}.json"));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(cached) = serde_json::from_str::<CellResult>(&text) {
                return Ok(cached);
            }
        }
        match run_cell(cfg, cell, &store) {
            Ok(result) => {
                let json = serde_json::to_string_pretty(&result)
                    .map_err(|e| CellFailure { cell: cell.clone(), key: key.clone(), error: e.to_string() })?;
                if let Err(e) = fs::write(&path, json) {
                    return Err(CellFailure { cell: cell.clone(), key, error: e.to_string() });
                }
                Ok(result)
            }
            Err(e) => Err(CellFailure { cell: cell.clone(), key, error: e.to_string() }),
        }
    };

    let outcomes: Vec<std::result::Result<CellResult, CellFailure>> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(worker).collect())
    } else {
        cells.iter().map(worker).collect()
    };

    let mut report =
        MatrixReport { config_hash: cfg.config_hash(), cells: Vec::new(), failures: Vec::new() };
    for o in outcomes {
        match o {
            Ok(c) => report.cells.push(c),
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Format with six significant digits, stable across runs.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..=5).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Trim trailing zeros but keep at least one integer digit.
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidArgument(format!("unknown format {s} (csv or json)"))),
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation; zero for a single value.
fn sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

type GroupKey = (String, ScaleTag, ScaleTag, &'static str);

fn grouped<'a>(
    cells: &'a [CellResult],
    mut keep: impl FnMut(&CellResult) -> bool,
) -> Vec<(GroupKey, Vec<&'a CellResult>)> {
    let mut map: HashMap<GroupKey, Vec<&CellResult>> = HashMap::new();
    for c in cells.iter().filter(|c| keep(c)) {
        map.entry((c.cell.method.name(), c.cell.teacher, c.cell.student, c.cell.remedy.name()))
            .or_default()
            .push(c);
    }
    let mut out: Vec<_> = map.into_iter().collect();
    out.sort_by(|a, b| {
        let ka = (&a.0 .0, a.0 .1.index(), a.0 .2.index(), a.0 .3);
        let kb = (&b.0 .0, b.0 .1.index(), b.0 .2.index(), b.0 .3);
        ka.cmp(&kb)
    });
    for (_, v) in &mut out {
        v.sort_by_key(|c| c.cell.seed);
    }
    out
}

/// Write every report file into `out_dir`, returning the paths written.
pub fn emit_reports(
    report: &MatrixReport,
    out_dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    if format == ReportFormat::Json {
        // Strip wall time so repeated runs emit identical bytes.
        let mut stripped = report.clone();
        for c in &mut stripped.cells {
            c.wall_ms = 0;
        }
        let path = out_dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&stripped).map_err(|e| Error::Format(e.to_string()))?)?;
        return Ok(vec![path]);
    }

    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };

    // Seed-averaged transfer heatmap (mean and standard deviation per cell):
    // C1 rows for strict teacher > student pairs, C2 rows for all pairs.
    let mut heat = String::from("metric,method,teacher,student,remedy,mean,sd\n");
    for ((m, t, s, r), group) in grouped(&report.cells, |c| c.cell.teacher > c.cell.student) {
        let vals: Vec<f64> = group.iter().map(|c| c.c1).collect();
        heat.push_str(&format!("c1,{m},{t},{s},{r},{},{}\n", fmt_sig(mean(&vals)), fmt_sig(sd(&vals))));
    }
    for ((m, t, s, r), group) in grouped(&report.cells, |_| true) {
        let vals: Vec<f64> = group.iter().map(|c| c.c2).collect();
        heat.push_str(&format!("c2,{m},{t},{s},{r},{},{}\n", fmt_sig(mean(&vals)), fmt_sig(sd(&vals))));
    }
    write("heatmap.csv", heat)?;

    // Remedy summary: seed-averaged differences per remedy and pair, for both
    // the teacher-vs-distilled and scratch-vs-distilled comparisons, on the
    // id score, the ood score, and the spurious gap.
    let mut summary = String::from(
        "method,remedy,teacher,student,c1_id,c1_ood,c1_gap,c2_id,c2_ood,c2_gap\n",
    );
    for ((m, t, s, r), group) in grouped(&report.cells, |_| true) {
        let f = |sel: fn(&CellResult) -> f64| fmt_sig(mean(&group.iter().map(|c| sel(c)).collect::<Vec<_>>()));
        summary.push_str(&format!(
            "{m},{r},{t},{s},{},{},{},{},{},{}\n",
            f(|c| c.teacher_metrics.id_accuracy - c.distilled_metrics.id_accuracy),
            f(|c| c.c1),
            f(|c| c.distilled_metrics.spurious_gap - c.teacher_metrics.spurious_gap),
            f(|c| c.scratch_metrics.id_accuracy - c.distilled_metrics.id_accuracy),
            f(|c| c.c2),
            f(|c| c.distilled_metrics.spurious_gap - c.scratch_metrics.spurious_gap),
        ));
    }
    write("remedy_summary.csv", summary)?;

    let mut agree = String::from("method,remedy,teacher,student,seed,agreement_id,agreement_ood\n");
    let mut venn = String::from(
        "method,remedy,teacher,student,seed,both_correct,only_teacher,only_distilled,neither\n",
    );
    let mut density = String::from("method,remedy,teacher,student,seed,bin,count\n");
    let mut cka = String::from("method,remedy,teacher,student,seed,split,teacher_layer,student_layer,cka\n");
    let mut eap = String::from("method,remedy,teacher,student,seed,layer,component,score\n");
    let mut by_cell: Vec<&CellResult> = report.cells.iter().collect();
    by_cell.sort_by(|a, b| {
        let ka = (a.cell.method.name(), a.cell.teacher.index(), a.cell.student.index(), a.cell.remedy.name(), a.cell.seed);
        let kb = (b.cell.method.name(), b.cell.teacher.index(), b.cell.student.index(), b.cell.remedy.name(), b.cell.seed);
        ka.cmp(&kb)
    });
    for c in by_cell {
        let id = format!(
            "{},{},{},{},{}",
            c.cell.method.name(),
            c.cell.remedy.name(),
            c.cell.teacher,
            c.cell.student,
            c.cell.seed
        );
        agree.push_str(&format!("{id},{},{}\n", fmt_sig(c.agreement_id), fmt_sig(c.agreement_ood)));
        venn.push_str(&format!(
            "{id},{},{},{},{}\n",
            c.venn_ood.both_correct,
            c.venn_ood.only_a_correct,
            c.venn_ood.only_b_correct,
            c.venn_ood.neither_correct
        ));
        for (bin, count) in c.density_ood.iter().enumerate() {
            density.push_str(&format!("{id},{bin},{count}\n"));
        }
        for (split, grid) in
            [("id", &c.cka_teacher_distilled), ("ood", &c.cka_teacher_distilled_ood)]
        {
            for (i, row) in grid.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    cka.push_str(&format!("{id},{split},{i},{j},{}\n", fmt_sig(*v)));
                }
            }
        }
        if let Some(e) = &c.eap_distilled {
            let heads = e.grid.cols() - 1;
            for l in 0..e.grid.rows() {
                for h in 0..heads {
                    eap.push_str(&format!("{id},{l},head{h},{}\n", fmt_sig(e.grid.at(l, h))));
                }
                eap.push_str(&format!("{id},{l},mlp,{}\n", fmt_sig(e.grid.at(l, heads))));
            }
            eap.push_str(&format!("{id},-1,embed,{}\n", fmt_sig(e.embed_score)));
        }
    }
    write("agreement.csv", agree)?;
    write("venn.csv", venn)?;
    write("density.csv", density)?;
    write("cka.csv", cka)?;
    if report.cells.iter().any(|c| c.eap_distilled.is_some()) {
        write("eap.csv", eap)?;
    }

    if !report.failures.is_empty() {
        let mut fail = String::from("key,cell,error\n");
        for f in &report.failures {
            fail.push_str(&format!("{},{},{}\n", f.key, f.cell.label(), f.error.replace(',', ";")));
        }
        write("failures.csv", fail)?;
    }
    Ok(written)
}
