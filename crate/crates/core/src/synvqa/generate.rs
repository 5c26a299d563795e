use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::question::{answer_oracle, gold_reasoning, Question};
use super::scene::{SceneGrid, SceneObject, Split, Stage, TaskKind};
use super::serialize::serialized_len;
use super::words::{Category, Color, SceneClass, Shape, Size, MAX_COUNT, MAX_GRID_SIDE};
use crate::error::{config_err, Error, Result};
use crate::seed::{rng_for, sha256_hex};

// Reference split sizes of the source dataset; default ratios are these over their sum.
const REF_SFT: f64 = 19_187.0;
const REF_RL_A: f64 = 5_434.0;
const REF_RL_B: f64 = 9_257.0;
const REF_RL_C: f64 = 8_587.0;
const REF_TEST: f64 = 7_554.0;
const RATIO_TOLERANCE: f64 = 1e-9;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub sft: f64,
    pub rl_a: f64,
    pub rl_b: f64,
    pub rl_c: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Sft => self.sft,
            Split::RlA => self.rl_a,
            Split::RlB => self.rl_b,
            Split::RlC => self.rl_c,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        let total = REF_SFT + REF_RL_A + REF_RL_B + REF_RL_C + REF_TEST;
        Self {
            sft: REF_SFT / total,
            rl_a: REF_RL_A / total,
            rl_b: REF_RL_B / total,
            rl_c: REF_RL_C / total,
            test: REF_TEST / total,
        }
    }
}

/// Stage composition of the mixed-stage splits (SFT and test).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRatios {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl StageRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

impl Default for StageRatios {
    fn default() -> Self {
        let total = REF_RL_A + REF_RL_B + REF_RL_C;
        Self {
            a: REF_RL_A / total,
            b: REF_RL_B / total,
            c: REF_RL_C / total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_total: usize,
    pub split_ratios: SplitRatios,
    pub stage_ratios: StageRatios,
    pub seed: u64,
    pub grid_width: u8,
    pub grid_height: u8,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Token budget for one serialized scene.
    pub context_budget: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_total: 2000,
            split_ratios: SplitRatios::default(),
            stage_ratios: StageRatios::default(),
            seed: 0,
            grid_width: 6,
            grid_height: 6,
            min_objects: 2,
            max_objects: 6,
            context_budget: 256,
        }
    }
}

fn check_ratios(name: &str, ratios: &[f64]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(config_err(format!("{name} must be finite and non-negative")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > RATIO_TOLERANCE {
        return Err(config_err(format!("{name} sum to {sum}, expected 1")));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total < TaskKind::ALL.len() {
            return Err(config_err(format!(
                "n_total {} cannot cover all {} task kinds",
                self.n_total,
                TaskKind::ALL.len()
            )));
        }
        let r = &self.split_ratios;
        check_ratios("split_ratios", &[r.sft, r.rl_a, r.rl_b, r.rl_c, r.test])?;
        check_ratios("stage_ratios", &self.stage_ratios.as_array())?;
        for (name, side) in [("grid_width", self.grid_width), ("grid_height", self.grid_height)] {
            if side == 0 || side > MAX_GRID_SIDE {
                return Err(config_err(format!("{name} must be in 1..={MAX_GRID_SIDE}")));
            }
        }
        let cells = usize::from(self.grid_width) * usize::from(self.grid_height);
        if self.min_objects > self.max_objects || self.max_objects > cells.min(MAX_COUNT) {
            return Err(config_err(format!(
                "object range {}..={} invalid for {cells} cells (cap {MAX_COUNT})",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects == 0 {
            return Err(config_err("max_objects must be at least 1"));
        }
        if serialized_len(self.max_objects) > self.context_budget {
            return Err(config_err(format!(
                "scenes of {} objects exceed the context budget {}",
                self.max_objects, self.context_budget
            )));
        }
        Ok(())
    }

    /// Per-split sample counts.
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let weights: Vec<f64> = Split::ALL.iter().map(|s| self.split_ratios.get(*s)).collect();
        Split::ALL
            .iter()
            .copied()
            .zip(apportion(self.n_total, &weights))
            .collect()
    }
}

/// Largest-remainder apportionment: counts sum to `total` and each lies
/// within one unit of `total * weight / sum(weights)`. Ties go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: String,
    pub scene: SceneGrid,
    pub question: String,
    #[serde(rename = "reasoning")]
    pub gold_reasoning: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    pub task: TaskKind,
    pub stage: Stage,
    pub split: Split,
}

impl VqaSample {
    /// Re-derives the answer with the oracle and checks it against the stored gold answer.
    pub fn verify(&self) -> Result<()> {
        let q = Question::parse(&self.question)?;
        if q.task() != self.task || self.task.stage() != self.stage {
            return Err(Error::Input(format!("{}: task/stage mismatch", self.id)));
        }
        let ans = answer_oracle(&self.scene, &q)?;
        if ans != self.gold_answer {
            return Err(Error::Input(format!(
                "{}: oracle says {ans:?}, gold is {:?}",
                self.id, self.gold_answer
            )));
        }
        if self.gold_reasoning.trim().is_empty() {
            return Err(Error::Input(format!("{}: empty reasoning", self.id)));
        }
        Ok(())
    }
}

/// An immutable, generated or loaded collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<VqaSample>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<VqaSample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[VqaSample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> Vec<&VqaSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// SHA-256 over the canonical JSONL rendering.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(self.to_jsonl()?.as_bytes()))
    }

    /// Writes one `<split>.jsonl` file per split into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("{}.jsonl", split.name())),
            )?);
            for s in self.samples.iter().filter(|s| s.split == split) {
                serde_json::to_writer(&mut f, s)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        Ok(())
    }

    /// Loads the per-split files written by [`Dataset::write_dir`]; missing splits are empty.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.name()));
            if !path.exists() {
                continue;
            }
            let f = std::io::BufReader::new(std::fs::File::open(&path)?);
            for line in f.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: VqaSample = serde_json::from_str(&line)?;
                if s.split != split {
                    return Err(Error::Input(format!(
                        "{} found in {}",
                        s.id,
                        path.display()
                    )));
                }
                samples.push(s);
            }
        }
        Ok(Self { samples })
    }
}

fn random_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> SceneGrid {
    let class = *SceneClass::ALL.choose(rng).unwrap();
    let weights = class.category_weights();
    let total_w: u32 = weights.iter().sum();
    let cells = usize::from(cfg.grid_width) * usize::from(cfg.grid_height);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let chosen = rand::seq::index::sample(rng, cells, n).into_vec();
    let objects = chosen
        .into_iter()
        .map(|cell| {
            let mut pick = rng.random_range(0..total_w);
            let mut cat = 0;
            while pick >= weights[cat] {
                pick -= weights[cat];
                cat += 1;
            }
            SceneObject {
                position: (
                    (cell / usize::from(cfg.grid_width)) as u8,
                    (cell % usize::from(cfg.grid_width)) as u8,
                ),
                color: *Color::ALL.choose(rng).unwrap(),
                size: *Size::ALL.choose(rng).unwrap(),
                shape: *Shape::ALL.choose(rng).unwrap(),
                category: Category::ALL[cat],
            }
        })
        .collect();
    SceneGrid::new(cfg.grid_width, cfg.grid_height, class, objects)
        .expect("generator places objects in distinct in-bounds cells")
}

fn random_question(task: TaskKind, scene: &SceneGrid, rng: &mut ChaCha8Rng) -> Option<Question> {
    let objs = scene.objects();
    let q = match task {
        TaskKind::Color | TaskKind::Size | TaskKind::Shape => {
            let o = objs.choose(rng)?;
            let (row, col) = o.position;
            match task {
                TaskKind::Color => Question::ColorAt { row, col },
                TaskKind::Size => Question::SizeAt { row, col },
                _ => Question::ShapeAt { row, col },
            }
        }
        TaskKind::YesNo => {
            let o = objs.choose(rng)?;
            let color = if rng.random_bool(0.5) {
                o.color
            } else {
                let others: Vec<Color> = Color::ALL.iter().copied().filter(|c| *c != o.color).collect();
                *others.choose(rng).unwrap()
            };
            Question::IsColorAt { row: o.row(), col: o.col(), color }
        }
        TaskKind::Number => {
            let category = match objs.choose(rng) {
                Some(o) if rng.random_bool(0.6) => o.category,
                _ => *Category::ALL.choose(rng).unwrap(),
            };
            Question::Count { category }
        }
        TaskKind::Transportation => {
            let vehicles: Vec<&SceneObject> =
                objs.iter().filter(|o| o.category.is_transportation()).collect();
            let o = vehicles.choose(rng)?;
            Question::VehicleAt { row: o.row(), col: o.col() }
        }
        TaskKind::Location => {
            let unique: Vec<&SceneObject> = objs
                .iter()
                .filter(|o| {
                    objs.iter()
                        .filter(|p| p.color == o.color && p.category == o.category)
                        .count()
                        == 1
                })
                .collect();
            let o = unique.choose(rng)?;
            Question::WhereIs { color: o.color, category: o.category }
        }
        TaskKind::Scene => Question::SceneKind,
    };
    Some(q)
}

fn generate_sample(
    cfg: &GenConfig,
    index: usize,
    task: TaskKind,
    split: Split,
) -> Result<VqaSample> {
    let mut rng = rng_for(cfg.seed, "sample", &[index as u64]);
    for _ in 0..MAX_ATTEMPTS {
        let scene = random_scene(cfg, &mut rng);
        let Some(q) = random_question(task, &scene, &mut rng) else {
            continue;
        };
        let answer = answer_oracle(&scene, &q)?;
        let reasoning = gold_reasoning(&scene, &q)?;
        return Ok(VqaSample {
            id: format!("q{index:06}"),
            question: q.render(),
            gold_reasoning: reasoning,
            gold_answer: answer,
            task,
            stage: task.stage(),
            split,
            scene,
        });
    }
    Err(config_err(format!(
        "could not generate a {} question in {MAX_ATTEMPTS} attempts; widen the object range",
        task.name()
    )))
}

/// Task slots per split: `(split, task)` repeated by count, in allocation order.
fn allocate(cfg: &GenConfig) -> Vec<(Split, TaskKind)> {
    let mut slots = Vec::with_capacity(cfg.n_total);
    // Rotating start per stage so remainders spread over all tasks across splits.
    let mut offsets = [0usize; 3];
    for (split, count) in cfg.split_counts() {
        let stage_counts = match split {
            Split::RlA => [count, 0, 0],
            Split::RlB => [0, count, 0],
            Split::RlC => [0, 0, count],
            Split::Sft | Split::Test => {
                let v = apportion(count, &cfg.stage_ratios.as_array());
                [v[0], v[1], v[2]]
            }
        };
        for stage in Stage::ALL {
            let tasks = stage.tasks();
            let n = stage_counts[stage.index()];
            let base = n / tasks.len();
            let extra = n % tasks.len();
            let off = offsets[stage.index()];
            for (k, &task) in tasks.iter().enumerate() {
                let rank = (k + tasks.len() - off) % tasks.len();
                let c = base + usize::from(rank < extra);
                slots.extend(std::iter::repeat_n((split, task), c));
            }
            offsets[stage.index()] = (off + extra) % tasks.len();
        }
    }
    slots
}

/// Generates a dataset; a pure function of `cfg`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let slots = allocate(cfg);
    let mut by_split: BTreeMap<Split, Vec<VqaSample>> = BTreeMap::new();
    for (i, (split, task)) in slots.into_iter().enumerate() {
        by_split
            .entry(split)
            .or_default()
            .push(generate_sample(cfg, i, task, split)?);
    }
    let mut samples = Vec::with_capacity(cfg.n_total);
    for (split, mut v) in by_split {
        v.shuffle(&mut rng_for(cfg.seed, "split-order", &[split as u64]));
        samples.extend(v);
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn apportion_respects_bounds() {
        let c = apportion(500, &[19187.0, 5434.0, 9257.0, 8587.0, 7554.0]);
        assert_eq!(c, vec![192, 54, 93, 86, 75]);
        assert_eq!(apportion(3, &[1.0, 1.0, 1.0, 1.0]), vec![1, 1, 1, 0]);
    }

    #[test]
    fn minimal_dataset_covers_each_task_once() {
        let cfg = GenConfig {
            n_total: 8,
            split_ratios: SplitRatios { sft: 0.0, rl_a: 3.0 / 8.0, rl_b: 3.0 / 8.0, rl_c: 2.0 / 8.0, test: 0.0 },
            ..GenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.samples().len(), 8);
        for t in TaskKind::ALL {
            assert_eq!(ds.samples().iter().filter(|s| s.task == t).count(), 1, "{t:?}");
        }
    }

    #[test]
    fn config_errors() {
        let small = GenConfig { n_total: 7, ..GenConfig::default() };
        assert!(matches!(generate_dataset(&small), Err(Error::Config(_))));
        let mut bad = GenConfig::default();
        bad.split_ratios.test += 1e-6;
        assert!(matches!(generate_dataset(&bad), Err(Error::Config(_))));
        let crowded = GenConfig { max_objects: 21, grid_width: 10, grid_height: 10, ..GenConfig::default() };
        assert!(crowded.validate().is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = GenConfig { n_total: 120, seed: 7, ..GenConfig::default() };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let other = generate_dataset(&GenConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.fingerprint().unwrap(), other.fingerprint().unwrap());
    }

    #[test]
    fn ids_are_unique_and_samples_verify() {
        let ds = generate_dataset(&GenConfig { n_total: 400, seed: 3, ..GenConfig::default() }).unwrap();
        let ids: std::collections::HashSet<_> = ds.samples().iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 400);
        for s in ds.samples() {
            s.verify().unwrap();
        }
    }

    #[test]
    fn dir_round_trip() {
        let ds = generate_dataset(&GenConfig { n_total: 60, seed: 1, ..GenConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn field_order_is_stable() {
        let ds = generate_dataset(&GenConfig { n_total: 8, ..GenConfig::default() }).unwrap();
        let line = serde_json::to_string(&ds.samples()[0]).unwrap();
        let keys = ["\"id\"", "\"scene\"", "\"question\"", "\"reasoning\"", "\"answer\"", "\"task\"", "\"stage\"", "\"split\""];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn splits_within_one_of_rounded(n in 8usize..3000) {
            let cfg = GenConfig { n_total: n, ..GenConfig::default() };
            let counts = cfg.split_counts();
            prop_assert_eq!(counts.values().sum::<usize>(), n);
            for (split, c) in counts {
                let target = (n as f64 * cfg.split_ratios.get(split)).round() as i64;
                prop_assert!((c as i64 - target).abs() <= 1);
            }
        }

        #[test]
        fn every_task_in_train_and_test(n in 80usize..300, seed in 0u64..1000) {
            let ds = generate_dataset(&GenConfig { n_total: n, seed, ..GenConfig::default() }).unwrap();
            for t in TaskKind::ALL {
                prop_assert!(ds.samples().iter().any(|s| s.task == t && s.split == Split::Test));
                prop_assert!(ds.samples().iter().any(|s| s.task == t && s.split.is_train()));
            }
            for s in ds.samples() {
                prop_assert!(s.verify().is_ok());
            }
        }
    }
}
