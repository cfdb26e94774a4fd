//! The six subcommands as library functions writing into an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use hyperlora_core::analysis::{self, FlattenMode, Merge};
use hyperlora_core::datagen::{generate_dataset, rulebook_scores};
use hyperlora_core::eval::{bootstrap_auc_ci, dca_curve, roc_auc, ScoreSet};
use hyperlora_core::hyper::{param_count_full, param_count_lora, HyperArch, HyperConfig, HyperNet, ParamAudit};
use hyperlora_core::tensor::sigmoid;
use hyperlora_core::train::{self, EpochRecord, Model};
use hyperlora_core::vit::{enumerate_target_modules, BackboneConfig};
use hyperlora_core::Tensor;

use crate::checkpoint::CheckpointFile;
use crate::config::RunConfig;
use crate::dataset::{self, DataDir};
use crate::error::{self, AppError, AppResult};
use crate::scores::{self, ScoreRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const AUC_FILE: &str = "auc.csv";
pub const PCA_FILE: &str = "pca.csv";
pub const MDS_FILE: &str = "mds.csv";
pub const CLUSTER_FILE: &str = "cluster.json";
pub const AUDIT_FILE: &str = "audit.csv";
pub const DCA_CONFIG_FILE: &str = "dca_config.json";

pub fn dca_file(task: usize) -> String {
    format!("dca_task{task}.csv")
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("value serializes");
    s.push('\n');
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn gen_data(config: &RunConfig, out: &Path) -> AppResult<()> {
    let ds = generate_dataset(&config.data)?;
    dataset::save_dataset(out, config, &ds)
}

/// Rebuilds the model a checkpoint was trained from and loads its weights.
pub fn model_from_checkpoint(ckpt: &CheckpointFile) -> AppResult<Model> {
    let c = &ckpt.config;
    let mut model = Model::new(&c.backbone, &c.hyperlora, ckpt.num_tasks, c.train.variant, c.seed)?;
    model
        .load_trainables(&ckpt.params)
        .map_err(|e| AppError::Data(format!("checkpoint does not match its own config: {e}")))?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Trains on `data`'s train split, selecting by its val split. The effective
/// config takes its data section from the dataset.
pub fn train(config: &RunConfig, data: &Path, out: &Path) -> AppResult<TrainSummary> {
    let dd = DataDir::open(data)?;
    let mut cfg = config.clone();
    cfg.data = dd.config.data.clone();
    cfg.validate()?;
    let k = dd.num_tasks();
    let mut model = Model::new(&cfg.backbone, &cfg.hyperlora, k, cfg.train.variant, cfg.seed)?;
    let prep = |ids: &[String]| -> AppResult<Vec<_>> {
        dd.samples(ids)?
            .iter()
            .map(|s| model.prepare(s).map_err(AppError::from))
            .collect()
    };
    let tr = prep(&dd.splits.train)?;
    let va = prep(&dd.splits.val)?;
    let outcome = train::train(&mut model, &tr, &va, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  val mean auc {}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_auc_mean.map_or("n/a".into(), |v| format!("{v:.4}"))
        )
    })?;
    error::create_dir(out)?;
    cfg.write_to_dir(out)?;
    let ckpt = CheckpointFile {
        config: cfg,
        num_tasks: k,
        epoch: outcome.best.epoch,
        rng: outcome.best.rng,
        params: outcome.best.params,
    };
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    let log: String = outcome.log.iter().map(json_line).collect();
    error::write(&out.join(METRICS_FILE), log)?;
    Ok(TrainSummary {
        best_epoch: ckpt.epoch,
        log: outcome.log,
    })
}

/// Where `eval` takes its scores from.
#[derive(Clone, Debug)]
pub enum ScoreSource {
    /// Sigmoid of the model logits.
    Checkpoint(PathBuf),
    /// Planted statistic minus rulebook threshold.
    Rulebook,
    /// A precomputed score file.
    Scores(PathBuf),
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub source: ScoreSource,
    pub data: Option<PathBuf>,
    pub config: Option<RunConfig>,
    pub bootstrap_iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucRow {
    pub task: usize,
    pub auc: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub n: usize,
}

fn score_records(source: &ScoreSource, data: Option<&DataDir>, cfg: &RunConfig) -> AppResult<Vec<ScoreRecord>> {
    let need_data = || data.ok_or_else(|| AppError::Usage("--data is required for this score source".into()));
    let mut out = Vec::new();
    match source {
        ScoreSource::Scores(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
            out = scores::decode(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        }
        ScoreSource::Rulebook => {
            let dd = need_data()?;
            for s in dd.samples(dd.split_ids(&cfg.eval.split))? {
                let sc = rulebook_scores(&dd.config.data, &dd.rulebook, &s.volume);
                for (k, l) in s.labels.iter().enumerate() {
                    if let Some(y) = l.binary() {
                        out.push(ScoreRecord {
                            sample_id: s.id.clone(),
                            task: k,
                            score: sc[k],
                            label: y,
                        });
                    }
                }
            }
        }
        ScoreSource::Checkpoint(path) => {
            let dd = need_data()?;
            let ckpt = CheckpointFile::load(path)?;
            if ckpt.num_tasks != dd.num_tasks() {
                return Err(AppError::Data(format!(
                    "checkpoint/config mismatch: checkpoint has {} tasks, dataset has {}",
                    ckpt.num_tasks,
                    dd.num_tasks()
                )));
            }
            let (a, b) = (&ckpt.config.data, &dd.config.data);
            if (a.height, a.width, a.depth) != (b.height, b.width, b.depth) {
                return Err(AppError::Data(format!(
                    "checkpoint/config mismatch: checkpoint expects {}×{}×{} volumes, dataset has {}×{}×{}",
                    a.height, a.width, a.depth, b.height, b.width, b.depth
                )));
            }
            let model = model_from_checkpoint(&ckpt)?;
            let samples = dd.samples(dd.split_ids(&cfg.eval.split))?;
            let prepared = samples
                .iter()
                .map(|s| model.prepare(s))
                .collect::<Result<Vec<_>, _>>()?;
            let logits = model.predict_logits(&prepared, true)?;
            for (p, row) in prepared.iter().zip(&logits) {
                for (k, l) in p.labels.iter().enumerate() {
                    if let (Some(y), Some(z)) = (l.binary(), row[k]) {
                        if !z.is_finite() {
                            return Err(AppError::Numeric(format!("non-finite logit for `{}` task {k}", p.id)));
                        }
                        out.push(ScoreRecord {
                            sample_id: p.id.clone(),
                            task: k,
                            score: sigmoid(z),
                            label: y,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-task AUC with percentile bootstrap intervals. Tasks whose bootstrap
/// is degenerate get no interval.
pub fn auc_table(set: &ScoreSet, iters: usize, seed: u64) -> AppResult<Vec<AucRow>> {
    set.tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let auc = if t.has_both_classes() { Some(roc_auc(&t.scores, &t.labels)?) } else { None };
            let ci = match (auc, iters) {
                (Some(_), n) if n > 0 => match bootstrap_auc_ci(&t.scores, &t.labels, n, seed) {
                    Ok(ci) => Some((ci.lo, ci.hi)),
                    Err(hyperlora_core::Error::BootstrapDegenerate { skipped, iters }) => {
                        eprintln!("task {k}: bootstrap skipped {skipped} of {iters} resamples; no interval");
                        None
                    }
                    Err(e) => return Err(e.into()),
                },
                _ => None,
            };
            Ok(AucRow {
                task: k,
                auc,
                ci,
                n: t.len(),
            })
        })
        .collect()
}

pub fn auc_csv(rows: &[AucRow]) -> String {
    let mut s = String::from("task,auc,ci_lo,ci_hi,n\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.task,
            fmt_opt(r.auc),
            fmt_opt(r.ci.map(|c| c.0)),
            fmt_opt(r.ci.map(|c| c.1)),
            r.n
        );
    }
    s
}

/// Scores a split and writes `auc.csv`, the scores used and the config.
pub fn eval(args: &EvalArgs, out: &Path) -> AppResult<Vec<AucRow>> {
    let dd = args.data.as_deref().map(DataDir::open).transpose()?;
    let mut cfg = match (&args.config, &args.source, &dd) {
        (Some(c), _, _) => c.clone(),
        (None, ScoreSource::Checkpoint(p), _) => CheckpointFile::load(p)?.config,
        (None, _, Some(d)) => d.config.clone(),
        (None, ScoreSource::Scores(_), None) => {
            return Err(AppError::Usage("--scores needs --config or --data to fix the bootstrap seed".into()))
        }
        (None, ScoreSource::Rulebook, None) => return Err(AppError::Usage("--rulebook needs --data".into())),
    };
    if let Some(n) = args.bootstrap_iters {
        cfg.eval.bootstrap_iters = n;
    }
    let records = score_records(&args.source, dd.as_ref(), &cfg)?;
    let k = match (&args.source, &dd) {
        (ScoreSource::Scores(_), _) => None,
        (_, Some(d)) => Some(d.num_tasks()),
        _ => None,
    };
    let set = scores::to_score_set(&records, k).map_err(AppError::Data)?;
    let rows = auc_table(&set, cfg.eval.bootstrap_iters, cfg.seed)?;
    error::create_dir(out)?;
    cfg.write_to_dir(out)?;
    error::write(&out.join(AUC_FILE), auc_csv(&rows))?;
    if !matches!(args.source, ScoreSource::Scores(_)) {
        error::write(&out.join(SCORES_FILE), scores::encode(&records))?;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DcaArgs {
    pub t_lo: f64,
    pub t_hi: f64,
    pub steps: usize,
}

impl Default for DcaArgs {
    fn default() -> Self {
        DcaArgs {
            t_lo: 0.05,
            t_hi: 0.80,
            steps: 76,
        }
    }
}

/// One CSV per task present in the score file.
pub fn dca(scores_path: &Path, args: &DcaArgs, out: &Path) -> AppResult<Vec<usize>> {
    let text = std::fs::read_to_string(scores_path).map_err(|e| AppError::io(scores_path, e))?;
    let records = scores::decode(&text).map_err(|e| AppError::Data(format!("{}: {e}", scores_path.display())))?;
    let set = scores::to_score_set(&records, None).map_err(AppError::Data)?;
    // validate the grid even when there is nothing to score
    hyperlora_core::eval::threshold_grid(args.t_lo, args.t_hi, args.steps).map_err(|e| AppError::Usage(e.to_string()))?;
    error::create_dir(out)?;
    let mut written = Vec::new();
    for (k, t) in set.tasks.iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        let c = dca_curve(&t.scores, &t.labels, args.t_lo, args.t_hi, args.steps)?;
        let mut s = String::from("threshold,nb_model,nb_treat_all,nb_treat_none\n");
        for i in 0..c.thresholds.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                c.thresholds[i], c.nb_model[i], c.nb_treat_all[i], c.nb_treat_none[i]
            );
        }
        error::write(&out.join(dca_file(k)), s)?;
        written.push(k);
    }
    let mut cfg = serde_json::to_string_pretty(args).expect("args serialize");
    cfg.push('\n');
    error::write(&out.join(DCA_CONFIG_FILE), cfg)?;
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub k_star: usize,
    pub silhouette: f64,
    pub labels: Vec<usize>,
    /// Rows `[a, b, height, size]` as in a SciPy linkage matrix.
    pub merge_list: Vec<(usize, usize, f64, usize)>,
}

fn embedding_csv(coords: &Tensor<f64>) -> String {
    let mut s = String::from("task_id,x,y\n");
    for (k, row) in coords.data().chunks(2).enumerate() {
        let _ = writeln!(s, "{k},{},{}", row[0], row[1]);
    }
    s
}

/// Weight-space analysis of a checkpoint's per-task deltas.
pub fn analyze(ckpt_path: &Path, mode: Option<FlattenMode>, out: &Path) -> AppResult<ClusterReport> {
    let ckpt = CheckpointFile::load(ckpt_path)?;
    let mut cfg = ckpt.config.clone();
    if let Some(m) = mode {
        cfg.analysis.mode = m;
    }
    let model = model_from_checkpoint(&ckpt)?;
    let v = analysis::task_weight_matrix(&model, cfg.analysis.mode)?;
    let sel = analysis::select_k(&v, cfg.analysis.k_min, cfg.analysis.k_max)?;
    let pca = analysis::pca_2d(&v)?;
    let mds = analysis::mds_2d(&analysis::cosine_distances(&v)?)?;
    let report = ClusterReport {
        k_star: sel.k_star,
        silhouette: sel.silhouette,
        labels: sel.labels,
        merge_list: sel
            .dendrogram
            .merges
            .iter()
            .map(|&Merge { a, b, height, size }| (a, b, height, size))
            .collect(),
    };
    error::create_dir(out)?;
    cfg.write_to_dir(out)?;
    error::write(&out.join(PCA_FILE), embedding_csv(&pca.coords))?;
    error::write(&out.join(MDS_FILE), embedding_csv(&mds.coords))?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    error::write(&out.join(CLUSTER_FILE), json)?;
    Ok(report)
}

pub fn audit_for(bb: &BackboneConfig, hc: &HyperConfig, num_tasks: usize) -> AppResult<ParamAudit> {
    bb.validate()?;
    Ok(HyperNet::new(hc, num_tasks, &enumerate_target_modules(bb))?.audit())
}

const COMPONENTS: [&str; 4] = ["task_embeddings", "positional_embeddings", "trunk", "heads"];

/// Census against closed forms for the run config and the reference
/// backbone under both hypernetwork trunks.
pub fn param_audit(config: &RunConfig) -> AppResult<String> {
    let k = config.data.num_tasks();
    let runs = [
        ("config", config.backbone.clone(), config.hyperlora.clone()),
        ("reference", BackboneConfig::reference(), HyperConfig::reference()),
        (
            "reference_mlp3",
            BackboneConfig::reference(),
            HyperConfig {
                arch: HyperArch::Mlp3,
                ..HyperConfig::reference()
            },
        ),
    ];
    let mut s = String::from("config,component,census,closed_form,match\n");
    for (name, bb, hc) in &runs {
        let a = audit_for(bb, hc, k)?;
        for r in &a.rows {
            let _ = writeln!(s, "{name},{},{},{},{}", r.component, r.census, r.closed_form, r.census == r.closed_form);
        }
        let closed: u64 = a
            .rows
            .iter()
            .filter(|r| COMPONENTS.contains(&r.component.as_str()))
            .map(|r| r.closed_form)
            .sum();
        let _ = writeln!(s, "{name},total,{},{closed},{}", a.total, a.total == closed);
        let (d, hin, r) = (bb.hidden_dim as u64, hc.head_input() as u64, hc.rank as u64);
        // one square module's head weight, generated at rank r vs at full rank
        let per_square = a
            .row("heads_square_weights_vs_lora_formula")
            .map_or(0, |row| row.census / a.square_modules.max(1) as u64);
        let lora = param_count_lora(hin, d, r);
        let _ = writeln!(s, "{name},lora_head_per_square_module,{per_square},{lora},{}", per_square == lora);
        let _ = writeln!(s, "{name},full_head_per_square_module,,{},", param_count_full(hin, d));
    }
    Ok(s)
}
