//! Corpus assembly, the on-disk layout, and the build-time answer-bias gate.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! manifest.json      generator version, seed, geometry, scene split
//! scenes.jsonl       one scene program per line
//! scenes/NNNNNN.fvol rendered feature volume per scene
//! qa.jsonl           one question record per line
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::question::{generate_question, oracle_answer, Answer, Program, Task, Template};
use super::scene::{channel, generate_scene_with, render_features, SceneConfig, SceneProgram};
use crate::error::{Error, Result};
use crate::language::tokenize;
use crate::params::mix_seed;
use crate::video::FeatureVolume;

pub const GENERATOR_VERSION: &str = "dpvqa-synth/1";

/// Per-template majority share on temporal templates must stay below this.
pub const BIAS_GATE: f64 = 0.6;

/// Templates with fewer items than this are too small for a meaningful majority share.
pub const BIAS_GATE_MIN_ITEMS: usize = 30;

const ITEM_SALT: u64 = 0x9a17;
const SPLIT_SALT: u64 = 0x5b117;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: usize,
    pub scene_id: usize,
    pub task: Task,
    pub template: Template,
    pub question: String,
    pub question_tokens: Vec<String>,
    pub program: Program,
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub seed: u64,
    pub items: usize,
    pub scenes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    /// Scene ids per split.
    pub splits: BTreeMap<Split, Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub items: usize,
    pub scenes: usize,
    pub scene: SceneConfig,
    /// Scene draws per item before the target answer is redrawn.
    pub max_attempts: usize,
}

impl CorpusConfig {
    /// Eight questions per scene on average.
    pub fn new(seed: u64, items: usize) -> Self {
        CorpusConfig {
            seed,
            items,
            scenes: items.div_ceil(8).max(10),
            scene: SceneConfig::default(),
            max_attempts: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub scenes: Vec<SceneProgram>,
    pub items: Vec<QaItem>,
}

/// Majority-class share per template, with item counts.
pub fn majority_rates(items: &[QaItem]) -> BTreeMap<Template, (f64, usize)> {
    let mut counts: BTreeMap<Template, HashMap<&Answer, usize>> = BTreeMap::new();
    for it in items {
        *counts.entry(it.template).or_default().entry(&it.answer).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(t, c)| {
            let n: usize = c.values().sum();
            let top = c.values().copied().max().unwrap_or(0);
            (t, (top as f64 / n as f64, n))
        })
        .collect()
}

/// Fails when any temporal template can be answered from its majority class alone.
pub fn check_bias_gate(items: &[QaItem]) -> Result<()> {
    for (t, (rate, n)) in majority_rates(items) {
        if t.task().is_temporal() && n >= BIAS_GATE_MIN_ITEMS && rate >= BIAS_GATE {
            return Err(Error::Contract(format!(
                "answer bias: template {t:?} majority share {rate:.3} over {n} items (limit {BIAS_GATE})"
            )));
        }
    }
    Ok(())
}

fn pick_template(rng: &mut ChaCha8Rng) -> Template {
    let total: f64 = Template::ALL.iter().map(|t| t.weight()).sum();
    let mut r = rng.gen_range(0.0..total);
    for t in Template::ALL {
        r -= t.weight();
        if r < 0.0 {
            return t;
        }
    }
    Template::RepetitionCount
}

fn make_item(cfg: &CorpusConfig, scenes: &[SceneProgram], id: usize) -> Result<QaItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ ITEM_SALT, id as u64));
    let template = pick_template(&mut rng);
    let space = template.answer_space(cfg.scene.max_objects, cfg.scene.max_repeat);
    for _ in 0..8 {
        let target = space[rng.gen_range(0..space.len())].clone();
        for _ in 0..cfg.max_attempts {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            if let Some((program, answer)) = generate_question(scene, template, &target, &mut rng) {
                let question = program.text();
                return Ok(QaItem {
                    id,
                    scene_id: scene.id,
                    task: template.task(),
                    template,
                    question_tokens: tokenize(&question),
                    question,
                    program,
                    answer,
                });
            }
        }
    }
    Err(Error::contract(format!("template {template:?} could not be instantiated")))
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Maps `f` over `0..n` on scoped threads; results keep index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let w = workers().min(n.max(1));
    if w <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(w);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..w)
            .map(|k| {
                let f = &f;
                s.spawn(move || (k * chunk..((k + 1) * chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Builds a corpus; a pure function of `cfg`. Fails if the bias gate trips.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.items == 0 || cfg.scenes == 0 {
        return Err(Error::contract("corpus needs at least one item and one scene"));
    }
    let scenes = par_map(cfg.scenes, |i| generate_scene_with(&cfg.scene, i, mix_seed(cfg.seed, i as u64)));
    let items = par_map(cfg.items, |i| make_item(cfg, &scenes, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    check_bias_gate(&items)?;

    let mut order: Vec<usize> = (0..cfg.scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SPLIT_SALT)));
    let n_train = cfg.scenes * 7 / 10;
    let n_val = cfg.scenes / 10;
    let mut splits = BTreeMap::new();
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    splits.insert(Split::Train, sorted(&order[..n_train]));
    splits.insert(Split::Val, sorted(&order[n_train..n_train + n_val]));
    splits.insert(Split::Test, sorted(&order[n_train + n_val..]));

    Ok(Corpus {
        manifest: Manifest {
            generator_version: GENERATOR_VERSION.to_string(),
            seed: cfg.seed,
            items: cfg.items,
            scenes: cfg.scenes,
            frames: cfg.scene.frames,
            width: cfg.scene.width,
            height: cfg.scene.height,
            depth: channel::DEPTH,
            splits,
        },
        scenes,
        items,
    })
}

fn scene_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("scenes").join(format!("{id:06}.fvol"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            serde_json::from_str(&l?)
                .map_err(|e| Error::Ingestion(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

impl Corpus {
    pub fn split_of(&self) -> HashMap<usize, Split> {
        self.manifest
            .splits
            .iter()
            .flat_map(|(&s, ids)| ids.iter().map(move |&i| (i, s)))
            .collect()
    }

    pub fn items_in(&self, split: Split) -> Vec<&QaItem> {
        let of = self.split_of();
        self.items.iter().filter(|it| of.get(&it.scene_id) == Some(&split)).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("scenes"))?;
        for s in &self.scenes {
            render_features(s).save(&scene_path(dir, s.id))?;
        }
        write_jsonl(&dir.join("scenes.jsonl"), &self.scenes)?;
        write_jsonl(&dir.join("qa.jsonl"), &self.items)?;
        let mut m = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut m, &self.manifest)?;
        m.write_all(b"\n")?;
        m.flush()?;
        Ok(())
    }

    /// Reads manifest, programs and questions, and checks they agree.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let mtext =
            fs::read_to_string(&mpath).map_err(|e| Error::Ingestion(format!("{}: {e}", mpath.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&mtext).map_err(|e| Error::Ingestion(format!("manifest: {e}")))?;
        if manifest.generator_version != GENERATOR_VERSION {
            return Err(Error::Ingestion(format!(
                "corpus generator `{}`, expected `{GENERATOR_VERSION}`",
                manifest.generator_version
            )));
        }
        let scenes: Vec<SceneProgram> = read_jsonl(&dir.join("scenes.jsonl"))?;
        let items: Vec<QaItem> = read_jsonl(&dir.join("qa.jsonl"))?;
        if scenes.len() != manifest.scenes || items.len() != manifest.items {
            return Err(Error::Ingestion(format!(
                "manifest lists {} scenes / {} items, found {} / {}",
                manifest.scenes,
                manifest.items,
                scenes.len(),
                items.len()
            )));
        }
        if scenes.iter().enumerate().any(|(i, s)| s.id != i) {
            return Err(Error::Ingestion("scene ids are not 0..n in order".into()));
        }
        for it in &items {
            if it.scene_id >= scenes.len() {
                return Err(Error::Ingestion(format!("item {} refers to scene {}", it.id, it.scene_id)));
            }
            if it.question_tokens.is_empty() || it.task != it.template.task() {
                return Err(Error::Ingestion(format!("item {} is malformed", it.id)));
            }
        }
        Ok(Corpus {
            manifest,
            scenes,
            items,
        })
    }

    /// Loads every scene volume using `workers` reader threads feeding a bounded queue.
    pub fn load_volumes(&self, dir: &Path, workers: usize) -> Result<Vec<FeatureVolume>> {
        let n = self.scenes.len();
        let workers = workers.clamp(1, n.max(1));
        let (tx, rx) = sync_channel::<(usize, Result<FeatureVolume>)>(2 * workers);
        let mut out: Vec<Option<FeatureVolume>> = vec![None; n];
        std::thread::scope(|s| -> Result<()> {
            for k in 0..workers {
                let tx = tx.clone();
                s.spawn(move || {
                    for id in (k..n).step_by(workers) {
                        if tx.send((id, FeatureVolume::load(&scene_path(dir, id)))).is_err() {
                            return;
                        }
                    }
                });
            }
            drop(tx);
            for (id, vol) in rx {
                let vol = vol.map_err(|e| Error::Ingestion(format!("scene {id}: {e}")))?;
                let m = &self.manifest;
                if vol.num_frames() != m.frames
                    || vol.width() != m.width
                    || vol.height() != m.height
                    || vol.depth() != m.depth
                {
                    return Err(Error::Ingestion(format!("scene {id} geometry differs from manifest")));
                }
                out[id] = Some(vol);
            }
            Ok(())
        })?;
        Ok(out.into_iter().map(|v| v.expect("every id sent")).collect())
    }

    /// Items whose stored answer disagrees with the oracle.
    pub fn inconsistent_items(&self) -> Vec<usize> {
        self.items
            .iter()
            .filter(|it| oracle_answer(&self.scenes[it.scene_id], &it.program).as_ref() != Some(&it.answer))
            .map(|it| it.id)
            .collect()
    }
}
