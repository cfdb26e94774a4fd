//! On-disk dataset: `config.json`, `manifest.jsonl` (one `{id, labels}`
//! record per sample, `-1` for missing), `splits.json`, `rulebook.json` and
//! `volumes/<id>.hctv`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hyperlora_core::datagen::{Dataset, Label, RuleEntry, Sample, Splits};

use crate::config::{RunConfig, Split, CONFIG_FILE};
use crate::error::{self, AppError, AppResult};
use crate::volume;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const RULEBOOK_FILE: &str = "rulebook.json";
pub const VOLUME_DIR: &str = "volumes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: String,
    pub labels: Vec<i8>,
}

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(VOLUME_DIR).join(format!("{id}.hctv"))
}

pub fn encode_manifest(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        let rec = LabelRecord {
            id: s.id.clone(),
            labels: s.labels.iter().map(|l| l.to_i8()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses label records, checking unique ids and a common label count.
pub fn decode_manifest(text: &str, num_tasks: usize) -> Result<Vec<(String, Vec<Label>)>, String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if rec.labels.len() != num_tasks {
            return Err(format!(
                "line {}: {} labels, expected {num_tasks}",
                i + 1,
                rec.labels.len()
            ));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(format!("line {}: duplicate id `{}`", i + 1, rec.id));
        }
        let labels = rec
            .labels
            .iter()
            .map(|&v| Label::from_i8(v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push((rec.id, labels));
    }
    Ok(out)
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

/// Writes the full dataset directory.
pub fn save_dataset(dir: &Path, config: &RunConfig, ds: &Dataset) -> AppResult<()> {
    error::create_dir(dir)?;
    config.write_to_dir(dir)?;
    error::write(&dir.join(MANIFEST_FILE), encode_manifest(&ds.samples))?;
    error::write(&dir.join(SPLITS_FILE), json_pretty(&ds.splits))?;
    error::write(&dir.join(RULEBOOK_FILE), json_pretty(&ds.rulebook))?;
    if !ds.samples.is_empty() {
        error::create_dir(&dir.join(VOLUME_DIR))?;
    }
    for s in &ds.samples {
        volume::save_volume(&volume_path(dir, &s.id), &s.volume)?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let bytes = error::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
}

/// A dataset directory opened lazily: labels and splits are read up front,
/// volumes on demand.
pub struct DataDir {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub labels: Vec<(String, Vec<Label>)>,
    pub splits: Splits,
    pub rulebook: Vec<RuleEntry>,
}

impl DataDir {
    pub fn open(dir: &Path) -> AppResult<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| AppError::io(&cfg_path, e))?;
        let config = RunConfig::from_json(&text)
            .map_err(|e| AppError::Data(format!("{}: {e}", cfg_path.display())))?;
        let k = config.data.num_tasks();
        let man_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&man_path).map_err(|e| AppError::io(&man_path, e))?;
        let labels = decode_manifest(&text, k).map_err(|e| AppError::Data(format!("{}: {e}", man_path.display())))?;
        let splits: Splits = read_json(&dir.join(SPLITS_FILE))?;
        let rulebook: Vec<RuleEntry> = read_json(&dir.join(RULEBOOK_FILE))?;
        let known: HashSet<&str> = labels.iter().map(|(id, _)| id.as_str()).collect();
        for id in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if !known.contains(id.as_str()) {
                return Err(AppError::Data(format!("split references unknown sample `{id}`")));
            }
        }
        Ok(DataDir {
            dir: dir.to_path_buf(),
            config,
            labels,
            splits,
            rulebook,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.config.data.num_tasks()
    }

    pub fn split_ids(&self, split: &Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Loads the samples of `ids` in order.
    pub fn samples(&self, ids: &[String]) -> AppResult<Vec<Sample>> {
        let d = &self.config.data;
        let index: HashMap<&str, &Vec<Label>> = self.labels.iter().map(|(i, l)| (i.as_str(), l)).collect();
        ids.iter()
            .map(|id| {
                let labels = index
                    .get(id.as_str())
                    .map(|l| (*l).clone())
                    .ok_or_else(|| AppError::Data(format!("no labels for sample `{id}`")))?;
                let path = volume_path(&self.dir, id);
                let volume = volume::load_volume(&path)?;
                if volume.shape() != [d.height, d.width, d.depth] {
                    return Err(AppError::Data(format!(
                        "{}: volume shape {:?} does not match config {:?}",
                        path.display(),
                        volume.shape(),
                        [d.height, d.width, d.depth]
                    )));
                }
                Ok(Sample {
                    id: id.clone(),
                    volume,
                    labels,
                })
            })
            .collect()
    }
}
