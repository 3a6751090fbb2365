//! End-to-end driver: scene analysis, cross-validation folds and the on-disk
//! artifacts shared with the command-line stages.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    aggregate_scores, AggregateScores, MetaSegFeatures, MetaSegKind, MetaSegModel,
};
use crate::error::{Error, Result};
use crate::eval::{build_report, Curves, EvalReport, LesionKey, LesionRecord, Method};
use crate::gcnn::{train, GcnnModel, TrainConfig, TrainLog, Variant};
use crate::graph::{
    build_graph, write_graph_dataset, GraphDataset, LesionGraph, DEFAULT_DILATION_ITERS,
};
use crate::lesion::{dice, extract_lesions, DEFAULT_EPSILON};
use crate::maps::{binarize, compute_maps, UncertaintyMaps, DEFAULT_THRESHOLD};
use crate::rng;
use crate::synth::{self, DatasetManifest, SceneEntry, SynthConfig};
use crate::volume::{LabelVolume, McEnsemble, Volume};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FOLDS: usize = 4;
/// Share of the non-test scenes used to fit the auxiliary models.
pub const VALIDATION_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Existing synthetic dataset (a directory with `manifest.json`). When
    /// unset, scenes are generated from `[synth]`.
    pub data: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("out"),
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Overrides `synth.seed`; GCNN seeds are derived from it per fold.
    pub seed: u64,
    pub folds: usize,
    pub threshold: f64,
    /// Overrides `train.epsilon`.
    pub epsilon: f64,
    pub dilation_iters: usize,
    pub jobs: usize,
    /// Write generated scenes under `<out>/data`.
    pub save_volumes: bool,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            folds: DEFAULT_FOLDS,
            threshold: DEFAULT_THRESHOLD,
            epsilon: DEFAULT_EPSILON,
            dilation_iters: DEFAULT_DILATION_ITERS,
            jobs: 1,
            save_volumes: false,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parse any config section from TOML text.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = parse_toml(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0,1)".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be positive".into()));
        }
        if let Some(d) = &self.paths.data {
            if !d.join(synth::MANIFEST_FILE).is_file() {
                return Err(Error::Config(format!(
                    "paths.data: no {} in {}",
                    synth::MANIFEST_FILE,
                    d.display()
                )));
            }
        }
        self.synth_config().validate()?;
        self.train.validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Training settings for one GCNN variant in one fold.
    pub fn train_config(&self, variant: Variant, fold: usize) -> TrainConfig {
        TrainConfig {
            variant,
            epsilon: self.epsilon,
            seed: rng::derive_seed(self.seed, fold as u64, &format!("gcnn-{variant}")),
            ..self.train.clone()
        }
    }
}

/// Raw inputs of one scan.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub scan_id: String,
    pub gt: LabelVolume,
    pub intensity: Vec<Volume>,
    pub ensemble: McEnsemble,
}

impl From<synth::Scene> for SceneInputs {
    fn from(s: synth::Scene) -> Self {
        SceneInputs {
            scan_id: s.manifest.scan_id,
            gt: s.gt,
            intensity: vec![s.intensity],
            ensemble: s.ensemble,
        }
    }
}

pub fn load_scene(root: &Path, entry: &SceneEntry) -> Result<SceneInputs> {
    let samples = entry
        .samples
        .iter()
        .map(|p| Volume::load(root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneInputs {
        scan_id: entry.scan_id.clone(),
        gt: LabelVolume::load(root.join(&entry.gt))?,
        intensity: vec![Volume::load(root.join(&entry.intensity))?],
        ensemble: McEnsemble::new(samples)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub id: u32,
    pub size: usize,
    pub iou_adj: f64,
    pub tp: bool,
}

/// Everything downstream stages need from one scan; volumes are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub scan_id: String,
    pub dice: f64,
    pub lesions: Vec<LesionSummary>,
    pub graphs: Vec<LesionGraph>,
    pub aggregates: Vec<AggregateScores>,
    pub metaseg: Vec<MetaSegFeatures>,
}

impl SceneResult {
    pub fn records(&self) -> impl Iterator<Item = LesionRecord> + '_ {
        self.lesions.iter().map(|l| LesionRecord {
            key: LesionKey::new(&self.scan_id, l.id),
            size: l.size,
            tp: l.tp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisParams {
    pub threshold: f64,
    pub epsilon: f64,
    pub dilation_iters: usize,
}

impl From<&PipelineConfig> for AnalysisParams {
    fn from(c: &PipelineConfig) -> Self {
        AnalysisParams {
            threshold: c.threshold,
            epsilon: c.epsilon,
            dilation_iters: c.dilation_iters,
        }
    }
}

/// Lesions, graphs and baseline features of a scan with precomputed maps.
pub fn analyze_scene(
    scan_id: &str,
    gt: &LabelVolume,
    intensity: &[Volume],
    maps: &UncertaintyMaps,
    mask: &LabelVolume,
    p: AnalysisParams,
) -> Result<SceneResult> {
    let (labeling, lesions) = extract_lesions(mask, gt, p.epsilon)?;
    let mut result = SceneResult {
        scan_id: scan_id.to_string(),
        dice: dice(mask, gt)?,
        lesions: Vec::with_capacity(lesions.len()),
        graphs: Vec::with_capacity(lesions.len()),
        aggregates: Vec::with_capacity(lesions.len()),
        metaseg: Vec::with_capacity(lesions.len()),
    };
    for l in &lesions {
        result.lesions.push(LesionSummary {
            id: l.id,
            size: l.size(),
            iou_adj: l.iou_adj,
            tp: l.tp,
        });
        result.graphs.push(build_graph(
            scan_id,
            l,
            intensity,
            &labeling.labels,
            maps,
            p.dilation_iters,
        )?);
        result.aggregates.push(aggregate_scores(l, maps)?);
        result.metaseg.push(MetaSegFeatures::of(l, maps)?);
    }
    Ok(result)
}

pub fn process_scene(scene: &SceneInputs, p: AnalysisParams) -> Result<SceneResult> {
    let maps = compute_maps(&scene.ensemble)?;
    let mask = binarize(&maps.mean_prob, p.threshold)?;
    analyze_scene(&scene.scan_id, &scene.gt, &scene.intensity, &maps, &mask, p)
}

pub const MAP_FILES: [&str; 4] = [
    "mean_prob.npy",
    "entropy.npy",
    "variance.npy",
    "pcs_uncertainty.npy",
];
pub const MASK_FILE: &str = "mask.npy";

pub fn write_maps(dir: &Path, maps: &UncertaintyMaps, mask: &LabelVolume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vols = [
        &maps.mean_prob,
        &maps.entropy,
        &maps.variance,
        &maps.pcs_uncertainty,
    ];
    for (name, v) in MAP_FILES.iter().zip(vols) {
        v.save(dir.join(name))?;
    }
    mask.save(dir.join(MASK_FILE))
}

pub fn read_maps(dir: &Path) -> Result<(UncertaintyMaps, LabelVolume)> {
    let load = |i: usize| Volume::load(dir.join(MAP_FILES[i]));
    let maps = UncertaintyMaps {
        mean_prob: load(0)?,
        entropy: load(1)?,
        variance: load(2)?,
        pcs_uncertainty: load(3)?,
    };
    let mask = LabelVolume::load(dir.join(MASK_FILE))?;
    if mask.dims() != maps.dims() {
        return Err(Error::Shape("mask and maps dims differ".into()));
    }
    Ok((maps, mask))
}

/// Analyze scenes of an on-disk dataset. Maps are read from
/// `<maps_dir>/<scan_id>/` when present, otherwise computed.
pub fn analyze_dataset(
    data_dir: &Path,
    maps_dir: Option<&Path>,
    scenes: Option<&[String]>,
    p: AnalysisParams,
    jobs: usize,
) -> Result<Vec<SceneResult>> {
    let manifest = synth::read_manifest(data_dir.join(synth::MANIFEST_FILE))?;
    let entries = select_scenes(&manifest, scenes)?;
    with_pool(jobs, || {
        entries
            .par_iter()
            .map(|e| {
                let scene = load_scene(data_dir, e)?;
                let cached = maps_dir
                    .map(|m| m.join(&e.scan_id))
                    .filter(|d| d.join(MASK_FILE).is_file());
                match cached {
                    Some(dir) => {
                        let (maps, mask) = read_maps(&dir)?;
                        analyze_scene(&scene.scan_id, &scene.gt, &scene.intensity, &maps, &mask, p)
                    }
                    None => process_scene(&scene, p),
                }
            })
            .collect()
    })
}

pub fn select_scenes<'a>(
    manifest: &'a DatasetManifest,
    scenes: Option<&[String]>,
) -> Result<Vec<&'a SceneEntry>> {
    match scenes {
        None => Ok(manifest.scenes.iter().collect()),
        Some(ids) => ids
            .iter()
            .map(|id| {
                manifest
                    .scenes
                    .iter()
                    .find(|e| &e.scan_id == id)
                    .ok_or_else(|| Error::Input(format!("scene {id} is not in the manifest")))
            })
            .collect(),
    }
}

pub(crate) fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Per-lesion scores keyed by `(scan_id, lesion_id)`, optionally with the
/// lesion size and TP flag.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub keys: Vec<LesionKey>,
    pub size: Option<Vec<usize>>,
    pub tp: Option<Vec<bool>>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    fn push_column(&mut self, name: &str, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.keys.len());
        self.columns.push((name.to_string(), values));
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec!["scan_id".to_string(), "lesion_id".to_string()];
        if self.size.is_some() {
            header.push("size".into());
        }
        if self.tp.is_some() {
            header.push("tp".into());
        }
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header).map_err(io)?;
        for (i, k) in self.keys.iter().enumerate() {
            let mut row = vec![k.scan_id.clone(), k.lesion_id.to_string()];
            if let Some(s) = &self.size {
                row.push(s[i].to_string());
            }
            if let Some(t) = &self.tp {
                row.push(u8::from(t[i]).to_string());
            }
            row.extend(self.columns.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt = |line: usize, m: String| Error::Format(format!("{}:{line}: {m}", path.display()));
        let mut r =
            csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| fmt(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() < 2 || header[0] != "scan_id" || header[1] != "lesion_id" {
            return Err(fmt(1, "expected columns scan_id,lesion_id first".into()));
        }
        let has_size = header.iter().any(|h| h == "size");
        let has_tp = header.iter().any(|h| h == "tp");
        let mut t = ScoreTable {
            size: has_size.then(Vec::new),
            tp: has_tp.then(Vec::new),
            columns: header[2..]
                .iter()
                .filter(|h| *h != "size" && *h != "tp")
                .map(|h| (h.clone(), Vec::new()))
                .collect(),
            ..Default::default()
        };
        for (row_no, rec) in r.records().enumerate() {
            let line = row_no + 2;
            let rec = rec.map_err(|e| fmt(line, e.to_string()))?;
            let lesion_id = rec[1]
                .parse()
                .map_err(|_| fmt(line, format!("bad lesion_id {:?}", &rec[1])))?;
            t.keys.push(LesionKey::new(&rec[0], lesion_id));
            let mut col = 0;
            for (h, field) in header.iter().zip(rec.iter()).skip(2) {
                match h.as_str() {
                    "size" => t.size.as_mut().unwrap().push(
                        field
                            .parse()
                            .map_err(|_| fmt(line, format!("bad size {field:?}")))?,
                    ),
                    "tp" => t.tp.as_mut().unwrap().push(match field {
                        "1" | "true" => true,
                        "0" | "false" => false,
                        _ => return Err(fmt(line, format!("bad tp {field:?}"))),
                    }),
                    _ => {
                        let v: f64 = field
                            .parse()
                            .map_err(|_| fmt(line, format!("bad value {field:?} for {h}")))?;
                        if !v.is_finite() {
                            return Err(Error::Data(format!(
                                "{}:{line}: non-finite {h}",
                                path.display()
                            )));
                        }
                        t.columns[col].1.push(v);
                        col += 1;
                    }
                }
            }
        }
        Ok(t)
    }
}

/// The six aggregation baselines and Size for every lesion of `scenes`.
pub fn baseline_table(scenes: &[SceneResult]) -> ScoreTable {
    let mut t = ScoreTable {
        keys: scenes
            .iter()
            .flat_map(|s| s.records().map(|r| r.key))
            .collect(),
        size: Some(
            scenes
                .iter()
                .flat_map(|s| s.lesions.iter().map(|l| l.size))
                .collect(),
        ),
        tp: Some(
            scenes
                .iter()
                .flat_map(|s| s.lesions.iter().map(|l| l.tp))
                .collect(),
        ),
        columns: Vec::new(),
    };
    let agg: Vec<&AggregateScores> = scenes.iter().flat_map(|s| &s.aggregates).collect();
    let cols: [(Method, fn(&AggregateScores) -> f64); 7] = [
        (Method::EntropyMean, |a| a.entropy_mean),
        (Method::EntropyLogsum, |a| a.entropy_logsum),
        (Method::VarianceMean, |a| a.variance_mean),
        (Method::VarianceLogsum, |a| a.variance_logsum),
        (Method::PcsMean, |a| a.pcs_mean),
        (Method::PcsLogsum, |a| a.pcs_logsum),
        (Method::Size, |a| a.size),
    ];
    for (m, f) in cols {
        t.push_column(m.name(), agg.iter().map(|a| f(a)).collect());
    }
    t
}

pub fn fit_metaseg(scenes: &[SceneResult], kind: MetaSegKind) -> Result<MetaSegModel> {
    let features: Vec<MetaSegFeatures> = scenes
        .iter()
        .flat_map(|s| s.metaseg.iter().copied())
        .collect();
    let iou: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.lesions.iter().map(|l| l.iou_adj))
        .collect();
    let tp: Vec<bool> = scenes
        .iter()
        .flat_map(|s| s.lesions.iter().map(|l| l.tp))
        .collect();
    MetaSegModel::fit(&features, &iou, &tp, kind)
}

pub fn metaseg_method(kind: MetaSegKind) -> Method {
    match kind {
        MetaSegKind::Classification => Method::MetaSegClassif,
        MetaSegKind::Regression => Method::MetaSegReg,
    }
}

/// Append a MetaSeg column for the lesions of `scenes` (same order as
/// [`baseline_table`]).
pub fn add_metaseg_column(table: &mut ScoreTable, scenes: &[SceneResult], model: &MetaSegModel) {
    let values = scenes
        .iter()
        .flat_map(|s| s.metaseg.iter().map(|f| model.predict(f)))
        .collect();
    table.push_column(metaseg_method(model.kind).name(), values);
}

pub fn gcnn_method(variant: Variant) -> Method {
    match variant {
        Variant::Classification => Method::GcnnClassif,
        Variant::Regression => Method::GcnnReg,
    }
}

/// One score column from a trained GCNN.
pub fn score_graphs(model: &GcnnModel, graphs: &[LesionGraph]) -> Result<ScoreTable> {
    let mut t = ScoreTable {
        keys: graphs
            .iter()
            .map(|g| LesionKey::new(&g.scan_id, g.lesion_id))
            .collect(),
        ..Default::default()
    };
    let values = graphs
        .iter()
        .map(|g| model.predict_uncertainty(g))
        .collect::<Result<Vec<_>>>()?;
    t.push_column(gcnn_method(model.variant).name(), values);
    Ok(t)
}

/// Merge score tables and evaluate every known method column. Lesion sizes
/// and TP flags come from the first table that carries them.
pub fn evaluate_tables(
    tables: &[ScoreTable],
    dice: &[(String, f64)],
) -> Result<(EvalReport, Curves)> {
    let base = tables
        .iter()
        .find(|t| t.size.is_some() && t.tp.is_some())
        .ok_or_else(|| Error::Report("no score table carries size and tp columns".into()))?;
    let (sizes, tps) = (base.size.as_ref().unwrap(), base.tp.as_ref().unwrap());
    let lesions: Vec<LesionRecord> = base
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| LesionRecord {
            key: k.clone(),
            size: sizes[i],
            tp: tps[i],
        })
        .collect();
    let mut by_method: HashMap<String, HashMap<LesionKey, f64>> = HashMap::new();
    for t in tables {
        for (name, values) in &t.columns {
            let m = by_method.entry(name.clone()).or_default();
            for (k, &v) in t.keys.iter().zip(values) {
                if m.insert(k.clone(), v).is_some() {
                    return Err(Error::Report(format!(
                        "duplicate {name} score for lesion {}/{}",
                        k.scan_id, k.lesion_id
                    )));
                }
            }
        }
    }
    let scores: Vec<(String, HashMap<LesionKey, f64>)> = Method::ALL
        .iter()
        .filter_map(|m| {
            by_method
                .remove(m.name())
                .map(|s| (m.name().to_string(), s))
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::Report("no method score columns found".into()));
    }
    build_report(&lesions, &scores, dice)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
    pub train: Vec<usize>,
}

/// Shuffle scene indices and cut them into `folds` test chunks; of the
/// remaining scenes the first [`VALIDATION_SHARE`] (rounded up) are the
/// validation split.
pub fn fold_splits(n_scenes: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 || n_scenes < 2 * folds {
        return Err(Error::Config(format!(
            "{n_scenes} scenes cannot be split into {folds} folds with non-empty test and validation splits"
        )));
    }
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut rng::stream(seed, 0, "folds"));
    Ok((0..folds)
        .map(|f| {
            let (lo, hi) = (f * n_scenes / folds, (f + 1) * n_scenes / folds);
            let mut test = order[lo..hi].to_vec();
            let rest: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            let n_val = ((rest.len() as f64 * VALIDATION_SHARE).ceil() as usize).max(1);
            let mut validation = rest[..n_val].to_vec();
            let mut train = rest[n_val..].to_vec();
            test.sort_unstable();
            validation.sort_unstable();
            train.sort_unstable();
            FoldSplit {
                fold: f,
                test,
                validation,
                train,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub report: EvalReport,
    pub scores: ScoreTable,
    pub gcnn_logs: Vec<(Variant, TrainLog)>,
}

pub fn run_fold(
    split: &FoldSplit,
    scenes: &[SceneResult],
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<FoldOutcome> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenes[i].clone()).collect::<Vec<_>>();
    let val = pick(&split.validation);
    let test = pick(&split.test);
    let val_graphs: Vec<LesionGraph> = val.iter().flat_map(|s| s.graphs.iter().cloned()).collect();
    let test_graphs: Vec<LesionGraph> =
        test.iter().flat_map(|s| s.graphs.iter().cloned()).collect();

    let mut table = baseline_table(&test);
    let mut logs = Vec::new();
    let mut models = Vec::new();
    for variant in [Variant::Classification, Variant::Regression] {
        let t0 = Instant::now();
        let (model, log) = train(&val_graphs, &cfg.train_config(variant, split.fold))
            .map_err(|e| stage(e, "train", split.fold))?;
        log::info!(
            "fold {}: trained GCNN {variant} on {} graphs in {:.1}s (best epoch {})",
            split.fold,
            val_graphs.len(),
            t0.elapsed().as_secs_f64(),
            log.best_epoch
        );
        let scored =
            score_graphs(&model, &test_graphs).map_err(|e| stage(e, "score", split.fold))?;
        table.columns.extend(scored.columns);
        logs.push((variant, log));
        models.push(model);
    }
    let mut metaseg = Vec::new();
    for kind in [MetaSegKind::Classification, MetaSegKind::Regression] {
        let model = fit_metaseg(&val, kind).map_err(|e| stage(e, "baselines", split.fold))?;
        add_metaseg_column(&mut table, &test, &model);
        metaseg.push(model);
    }
    // canonical column order
    table.columns.sort_by_key(|(n, _)| Method::from_name(n));

    let dice: Vec<(String, f64)> = test.iter().map(|s| (s.scan_id.clone(), s.dice)).collect();
    let (report, curves) = evaluate_tables(std::slice::from_ref(&table), &dice)
        .map_err(|e| stage(e, "eval", split.fold))?;

    if let Some(out) = out {
        let dir = out.join(format!("fold_{}", split.fold));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for m in &models {
            m.save(dir.join(format!("gcnn_{}.model", m.variant)))?;
        }
        for m in &metaseg {
            let name = match m.kind {
                MetaSegKind::Classification => "metaseg_classification.json",
                MetaSegKind::Regression => "metaseg_regression.json",
            };
            m.save(dir.join(name))?;
        }
        for (variant, log) in &logs {
            write_train_log(log, &dir.join(format!("train_log_{variant}.csv")))?;
        }
        let split_path = dir.join("split.json");
        fs::write(
            &split_path,
            serde_json::to_string_pretty(split).unwrap() + "\n",
        )
        .map_err(|e| Error::io(&split_path, e))?;
        table.write(dir.join("scores.csv"))?;
        report.write_csv(dir.join("report.csv"))?;
        report.write_summary(dir.join("summary.csv"))?;
        curves.write_csvs(dir.join("curves"))?;
        let svg = dir.join("curves.svg");
        fs::write(&svg, curves.to_svg()).map_err(|e| Error::io(&svg, e))?;
    }
    Ok(FoldOutcome {
        split: split.clone(),
        report,
        scores: table,
        gcnn_logs: logs,
    })
}

fn stage(e: Error, name: &str, fold: usize) -> Error {
    e.with_context(&format!("fold {fold}, stage {name}"))
}

pub fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for e in &log.epochs {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, val));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub folds: Vec<FoldOutcome>,
    pub n_lesions: usize,
}

/// Run every stage and write artifacts under `cfg.paths.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.paths.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let params = AnalysisParams::from(cfg);

    let t0 = Instant::now();
    let scenes: Vec<SceneResult> = match &cfg.paths.data {
        Some(data) => analyze_dataset(data, None, None, params, cfg.jobs),
        None => {
            let synth_cfg = cfg.synth_config();
            let data_dir = out.join("data");
            let entries: Result<Vec<(SceneResult, Option<SceneEntry>)>> =
                with_pool(cfg.jobs, || {
                    (0..synth_cfg.n_scenes as u64)
                        .into_par_iter()
                        .map(|i| {
                            let scene = synth::generate_scene(&synth_cfg, i)?;
                            let entry = if cfg.save_volumes {
                                Some(synth::write_scene(&scene, &data_dir)?)
                            } else {
                                None
                            };
                            Ok((process_scene(&scene.into(), params)?, entry))
                        })
                        .collect()
                });
            let (results, entries): (Vec<_>, Vec<_>) = entries?.into_iter().unzip();
            if cfg.save_volumes {
                synth::write_manifest(
                    &synth_cfg,
                    entries.into_iter().flatten().collect(),
                    &data_dir,
                )?;
            }
            Ok(results)
        }
    }
    .map_err(|e| e.with_context("stage synth/maps/extract/graphs"))?;
    let n_lesions: usize = scenes.iter().map(|s| s.lesions.len()).sum();
    log::info!(
        "analyzed {} scenes ({n_lesions} lesions) in {:.1}s",
        scenes.len(),
        t0.elapsed().as_secs_f64()
    );

    let n_channels = scenes
        .first()
        .map_or(1, |s| s.graphs.first().map_or(1, |g| g.n_features - 4));
    write_graph_dataset(
        &GraphDataset {
            n_channels,
            graphs: scenes
                .iter()
                .flat_map(|s| s.graphs.iter().cloned())
                .collect(),
        },
        out.join("graphs.jsonl"),
    )?;
    write_lesions(&scenes, &out.join("lesions.csv"))?;
    baseline_table(&scenes).write(out.join("baselines.csv"))?;

    let splits = fold_splits(scenes.len(), cfg.folds, cfg.seed)?;
    let folds: Vec<FoldOutcome> = with_pool(cfg.jobs, || {
        splits
            .par_iter()
            .map(|s| run_fold(s, &scenes, cfg, Some(out)))
            .collect::<Result<Vec<_>>>()
    })?;
    let reports: Vec<EvalReport> = folds.iter().map(|f| f.report.clone()).collect();
    let report = EvalReport::average(&reports)?;
    report.write_csv(out.join("report.csv"))?;
    report.write_summary(out.join("summary.csv"))?;
    log::info!("pipeline finished in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(RunOutcome {
        report,
        folds,
        n_lesions,
    })
}

/// `scan_id,lesion_id,size,iou_adj,tp` for every lesion.
pub fn write_lesions(scenes: &[SceneResult], path: &Path) -> Result<()> {
    let mut out = String::from("scan_id,lesion_id,size,iou_adj,tp\n");
    for s in scenes {
        for l in &s.lesions {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.scan_id,
                l.id,
                l.size,
                l.iou_adj,
                u8::from(l.tp)
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_scenes() {
        let splits = fold_splits(20, 4, 7).unwrap();
        let mut tested: Vec<usize> = splits.iter().flat_map(|s| s.test.clone()).collect();
        tested.sort_unstable();
        assert_eq!(tested, (0..20).collect::<Vec<_>>());
        for s in &splits {
            assert_eq!(s.test.len(), 5);
            assert_eq!(s.validation.len(), 3);
            assert_eq!(s.train.len(), 12);
            for i in &s.validation {
                assert!(!s.test.contains(i) && !s.train.contains(i));
            }
        }
        assert!(fold_splits(5, 4, 0).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_are_config_errors() {
        let e = PipelineConfig::from_toml_str("schema_version = 2").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = PipelineConfig::from_toml_str("bogus = 1").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let cfg = PipelineConfig {
            folds: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let partial = PipelineConfig::from_toml_str("seed = 5\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 10);
    }

    #[test]
    fn score_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = ScoreTable {
            keys: vec![LesionKey::new("a", 1), LesionKey::new("b", 2)],
            size: Some(vec![3, 9]),
            tp: Some(vec![true, false]),
            columns: vec![
                ("Size".into(), vec![1.0 / 3.0, 1.0 / 9.0]),
                ("x".into(), vec![0.1, 1e-300]),
            ],
        };
        let p = dir.path().join("s.csv");
        t.write(&p).unwrap();
        assert_eq!(ScoreTable::read(&p).unwrap(), t);
    }
}
