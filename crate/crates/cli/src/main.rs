use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lesionuq::baselines::{MetaSegKind, MetaSegModel};
use lesionuq::gcnn::{train, GcnnModel, Variant};
use lesionuq::graph::{read_graph_dataset, write_graph_dataset, GraphDataset};
use lesionuq::lesion::{extract_lesions, write_lesion_table};
use lesionuq::maps::{binarize, compute_maps};
use lesionuq::pipeline::{
    add_metaseg_column, analyze_dataset, baseline_table, evaluate_tables, fit_metaseg, load_scene,
    run_pipeline, score_graphs, select_scenes, write_lesions, write_maps, write_train_log,
    AnalysisParams, PipelineConfig, ScoreTable,
};
use lesionuq::synth::{read_manifest, write_dataset, MANIFEST_FILE};
use lesionuq::{Error, LabelVolume, McEnsemble, Result, Volume};

#[derive(Parser)]
#[command(
    name = "lesionuq",
    version,
    about = "Lesion-level uncertainty from Monte-Carlo segmentation ensembles"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct AnalysisArgs {
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    dilation_iters: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Synthetic dataset directory (holds manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of per-scene maps written by `maps`.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Restrict to these scan ids.
    #[arg(long, value_delimiter = ',')]
    scenes: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Synth {
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Uncertainty maps and binarized mask from Monte-Carlo samples.
    Maps {
        /// Sample volumes (NPY); alternatively use --data.
        #[arg(long, num_args = 1.., conflicts_with = "data")]
        samples: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        scenes: Option<Vec<String>>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Lesion table (id, size, iou_adj, tp).
    Extract {
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Lesion graph dataset (JSONL).
    Graphs {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Train a GCNN on a graph dataset.
    Train {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Score graphs with a trained GCNN.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
    },
    /// Aggregation, Size and MetaSeg scores per lesion.
    Baselines {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Fit MetaSeg on these scan ids.
        #[arg(long, value_delimiter = ',', conflicts_with = "metaseg_dir")]
        metaseg_train: Option<Vec<String>>,
        /// Load metaseg_classification.json / metaseg_regression.json from here.
        #[arg(long)]
        metaseg_dir: Option<PathBuf>,
    },
    /// AUC, Spearman rho and curves from per-lesion score tables.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        /// Also write curves.svg.
        #[arg(long)]
        svg: bool,
    },
    /// All stages with cross-validation.
    Run {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        n_scenes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let name = stage_name(&cli.command);
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Maps { .. } => "maps",
        Command::Extract { .. } => "extract",
        Command::Graphs { .. } => "graphs",
        Command::Train { .. } => "train",
        Command::Score { .. } => "score",
        Command::Baselines { .. } => "baselines",
        Command::Eval { .. } => "eval",
        Command::Run { .. } => "run",
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn apply_analysis(cfg: &mut PipelineConfig, a: &AnalysisArgs) {
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if let Some(d) = a.dilation_iters {
        cfg.dilation_iters = d;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))
}

fn dataset_dir(cfg: &PipelineConfig, arg: &Option<PathBuf>) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set paths.data".into()))
}

fn analyze(cfg: &PipelineConfig, d: &DatasetArgs) -> Result<Vec<lesionuq::pipeline::SceneResult>> {
    let data = dataset_dir(cfg, &d.data)?;
    analyze_dataset(
        &data,
        d.maps.as_deref(),
        d.scenes.as_deref(),
        AnalysisParams::from(cfg),
        cfg.jobs,
    )
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cfg.paths.out.clone();
    match cli.command {
        Command::Synth { n_scenes } => {
            if let Some(n) = n_scenes {
                cfg.synth.n_scenes = n;
            }
            cfg.validate()?;
            let m = write_dataset(&cfg.synth_config(), &out)?;
            log::info!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Command::Maps {
            samples,
            data,
            scenes,
            threshold,
        } => {
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            cfg.validate()?;
            if !samples.is_empty() {
                let vols = samples
                    .iter()
                    .map(Volume::load)
                    .collect::<Result<Vec<_>>>()?;
                let maps = compute_maps(&McEnsemble::new(vols)?)?;
                let mask = binarize(&maps.mean_prob, cfg.threshold)?;
                write_maps(&out, &maps, &mask)?;
            } else {
                let data = dataset_dir(&cfg, &data)?;
                let manifest = read_manifest(data.join(MANIFEST_FILE))?;
                for e in select_scenes(&manifest, scenes.as_deref())? {
                    let scene = load_scene(&data, e)?;
                    let maps = compute_maps(&scene.ensemble)?;
                    let mask = binarize(&maps.mean_prob, cfg.threshold)?;
                    write_maps(&out.join(&e.scan_id), &maps, &mask)?;
                    log::info!("maps: {}", e.scan_id);
                }
            }
        }
        Command::Extract {
            pred,
            gt,
            dataset,
            analysis,
        } => {
            apply_analysis(&mut cfg, &analysis);
            cfg.validate()?;
            create_dir(&out)?;
            match (pred, gt) {
                (Some(pred), Some(gt)) => {
                    let (labeling, lesions) = extract_lesions(
                        &LabelVolume::load(pred)?,
                        &LabelVolume::load(gt)?,
                        cfg.epsilon,
                    )?;
                    write_lesion_table(&lesions, out.join("lesions.csv"))?;
                    labeling.labels.save(out.join("labels.npy"))?;
                }
                _ => write_lesions(&analyze(&cfg, &dataset)?, &out.join("lesions.csv"))?,
            }
        }
        Command::Graphs { dataset, analysis } => {
            apply_analysis(&mut cfg, &analysis);
            cfg.validate()?;
            let scenes = analyze(&cfg, &dataset)?;
            let graphs: Vec<_> = scenes.into_iter().flat_map(|s| s.graphs).collect();
            let n_channels = graphs.first().map_or(1, |g| g.n_features - 4);
            create_dir(&out)?;
            write_graph_dataset(
                &GraphDataset { n_channels, graphs },
                out.join("graphs.jsonl"),
            )?;
        }
        Command::Train {
            graphs,
            variant,
            epochs,
            epsilon,
        } => {
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            cfg.validate()?;
            let ds = read_graph_dataset(&graphs)?;
            let tc = cfg.train_config(cfg.train.variant, 0);
            let (model, log) = train(&ds.graphs, &tc)?;
            create_dir(&out)?;
            model.save(out.join(format!("gcnn_{}.model", tc.variant)))?;
            write_train_log(&log, &out.join(format!("train_log_{}.csv", tc.variant)))?;
            log::info!("best epoch {} of {}", log.best_epoch, tc.epochs);
        }
        Command::Score { model, graphs } => {
            let model = GcnnModel::load(model)?;
            let ds = read_graph_dataset(&graphs)?;
            create_dir(&out)?;
            score_graphs(&model, &ds.graphs)?
                .write(out.join(format!("scores_{}.csv", model.variant)))?;
        }
        Command::Baselines {
            dataset,
            analysis,
            metaseg_train,
            metaseg_dir,
        } => {
            apply_analysis(&mut cfg, &analysis);
            cfg.validate()?;
            let scenes = analyze(&cfg, &dataset)?;
            let mut table = baseline_table(&scenes);
            create_dir(&out)?;
            let models = match (metaseg_train, metaseg_dir) {
                (Some(ids), _) => {
                    let fit_args = DatasetArgs {
                        scenes: Some(ids),
                        ..dataset
                    };
                    let fit_scenes = analyze(&cfg, &fit_args)?;
                    let mut models = Vec::new();
                    for kind in [MetaSegKind::Classification, MetaSegKind::Regression] {
                        let m = fit_metaseg(&fit_scenes, kind)?;
                        m.save(out.join(metaseg_file(kind)))?;
                        models.push(m);
                    }
                    models
                }
                (None, Some(dir)) => [MetaSegKind::Classification, MetaSegKind::Regression]
                    .iter()
                    .map(|&k| MetaSegModel::load(dir.join(metaseg_file(k))))
                    .collect::<Result<Vec<_>>>()?,
                (None, None) => Vec::new(),
            };
            for m in &models {
                add_metaseg_column(&mut table, &scenes, m);
            }
            table.write(out.join("baselines.csv"))?;
            let mut dice = String::from("scan_id,dice\n");
            for s in &scenes {
                dice.push_str(&format!("{},{}\n", s.scan_id, s.dice));
            }
            let p = out.join("dice.csv");
            fs::write(&p, dice).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
        }
        Command::Eval { scores, svg } => {
            let tables = scores
                .iter()
                .map(ScoreTable::read)
                .collect::<Result<Vec<_>>>()?;
            let (report, curves) = evaluate_tables(&tables, &[])?;
            create_dir(&out)?;
            report.write_csv(out.join("report.csv"))?;
            curves.write_csvs(out.join("curves"))?;
            if svg {
                let p = out.join("curves.svg");
                fs::write(&p, curves.to_svg())
                    .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            }
            for m in &report.methods {
                println!(
                    "{:<16} AUC {:6.2}%  rho {:+.3}",
                    m.method, m.auc, m.spearman_rho
                );
            }
        }
        Command::Run {
            data,
            folds,
            n_scenes,
            epochs,
            analysis,
        } => {
            apply_analysis(&mut cfg, &analysis);
            if data.is_some() {
                cfg.paths.data = data;
            }
            if let Some(f) = folds {
                cfg.folds = f;
            }
            if let Some(n) = n_scenes {
                cfg.synth.n_scenes = n;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let outcome = run_pipeline(&cfg)?;
            for m in &outcome.report.methods {
                println!(
                    "{:<16} AUC {:6.2}%  rho {:+.3}",
                    m.method, m.auc, m.spearman_rho
                );
            }
        }
    }
    Ok(())
}

fn metaseg_file(kind: MetaSegKind) -> &'static str {
    match kind {
        MetaSegKind::Classification => "metaseg_classification.json",
        MetaSegKind::Regression => "metaseg_regression.json",
    }
}
