//! Procedural scene simulator: objects relocating along class-specific
//! cyclic patterns over static furniture, plus the exact analytic posterior
//! over future pattern positions.
//!
//! Scenes live on the unit canvas. Boxes are `(y, x, h, w)` with `(y, x)`
//! the box center, all components normalized to `[0, 1]`.

pub mod io;

use crate::rng::{stream, Rng64};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported episode file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box; `(y, x)` is the center, all components in canvas units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub y: f64,
    pub x: f64,
    pub h: f64,
    pub w: f64,
}

impl BBox {
    pub fn new(y: f64, x: f64, h: f64, w: f64) -> Self {
        BBox { y, x, h, w }
    }

    /// Whole box inside the unit canvas.
    pub fn in_canvas(&self) -> bool {
        self.h > 0.0
            && self.w > 0.0
            && self.y - self.h / 2.0 >= 0.0
            && self.y + self.h / 2.0 <= 1.0
            && self.x - self.w / 2.0 >= 0.0
            && self.x + self.w / 2.0 <= 1.0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.y, self.x, self.h, self.w]
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let dy = self.y - other.y;
        let dx = self.x - other.x;
        (dy * dy + dx * dx).sqrt()
    }
}

/// Static scene element; never moves within an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FurnitureItem {
    pub anchor_id: u32,
    pub bbox: BBox,
    /// Palette index.
    pub color: u32,
    pub label: String,
}

/// A movable object category and the cyclic anchor pattern it follows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    /// Ordered anchor ids; index arithmetic is mod `pattern.len()`.
    pub pattern: Vec<u32>,
}

impl ObjectClass {
    pub fn cycle_len(&self) -> usize {
        self.pattern.len()
    }
}

/// One movable object at a single timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicObject {
    pub class: String,
    /// Palette index.
    pub color: u32,
    pub label: String,
    pub pattern_index: usize,
    pub bbox: BBox,
}

/// Per-step transition probabilities along a pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub p_advance: f64,
    pub p_stay: f64,
    pub p_skip: f64,
}

impl Default for TransitionModel {
    fn default() -> Self {
        TransitionModel {
            p_advance: 0.7,
            p_stay: 0.2,
            p_skip: 0.1,
        }
    }
}

impl TransitionModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let s = self.p_advance + self.p_stay + self.p_skip;
        if self.p_advance < 0.0 || self.p_stay < 0.0 || self.p_skip < 0.0 {
            return Err(SimError::Config("negative transition probability".into()));
        }
        if (s - 1.0).abs() > 1e-12 {
            return Err(SimError::Config(format!(
                "transition probabilities sum to {s}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Advances a pattern index by one stochastic step.
///
/// Threshold ordering over `u ∈ [0,1)` is fixed as skip < advance < stay:
/// `u < p_skip` skips two positions, `u < p_skip + p_advance` advances one,
/// anything else stays.
pub fn step_index(index: usize, cycle: usize, model: &TransitionModel, u: f64) -> usize {
    if u < model.p_skip {
        (index + 2) % cycle
    } else if u < model.p_skip + model.p_advance {
        (index + 1) % cycle
    } else {
        index
    }
}

/// Probability vector over the positions of one pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, SimError> {
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(SimError::Domain("negative or non-finite probability".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(SimError::Domain(format!("probabilities sum to {s}")));
        }
        Ok(CategoricalDistribution { probs })
    }

    /// Empirical distribution from counts with additive smoothing `eps`.
    pub fn from_counts(counts: &[usize], eps: f64) -> Self {
        let n: usize = counts.iter().sum();
        let k = counts.len();
        let denom = n as f64 + k as f64 * eps;
        CategoricalDistribution {
            probs: counts.iter().map(|c| (*c as f64 + eps) / denom).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Total variation distance; both vectors must have equal length.
    pub fn tv_distance(&self, other: &CategoricalDistribution) -> f64 {
        assert_eq!(self.len(), other.len());
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Exact `delta_tau`-step posterior over pattern positions: row `start_index`
/// of the cycle's transition matrix raised to `delta_tau`.
pub fn exact_posterior(
    cycle: usize,
    start_index: usize,
    delta_tau: u32,
    model: &TransitionModel,
) -> Result<CategoricalDistribution, SimError> {
    model.validate().map_err(|e| match e {
        SimError::Config(m) => SimError::Domain(m),
        other => other,
    })?;
    if cycle == 0 {
        return Err(SimError::Domain("empty pattern".into()));
    }
    if start_index >= cycle {
        return Err(SimError::Domain(format!(
            "start index {start_index} out of range for cycle length {cycle}"
        )));
    }
    let mut row = vec![0.0; cycle];
    row[start_index] = 1.0;
    for _ in 0..delta_tau {
        let mut next = vec![0.0; cycle];
        for (i, p) in row.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            next[i] += p * model.p_stay;
            next[(i + 1) % cycle] += p * model.p_advance;
            next[(i + 2) % cycle] += p * model.p_skip;
        }
        row = next;
    }
    CategoricalDistribution::new(row)
}

/// Furniture placement used by [`EnvironmentConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FurnitureSpec {
    pub anchor_id: u32,
    pub label: String,
    pub color: u32,
    pub bbox: BBox,
}

/// Object class blueprint: pattern plus the per-class object box size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub color: u32,
    pub pattern: Vec<u32>,
    pub h: f64,
    pub w: f64,
}

/// Scene layout and transition defaults for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub palette: Vec<String>,
    pub furniture: Vec<FurnitureSpec>,
    pub classes: Vec<ClassSpec>,
    pub transition: TransitionModel,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        let palette = [
            "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple", "teal",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        // Diamond ring of four anchors around the canvas center plus a wall
        // shelf at the top and a tv stand at the bottom.
        let f = |anchor_id, label: &str, color, y, x, h, w| FurnitureSpec {
            anchor_id,
            label: label.to_string(),
            color,
            bbox: BBox::new(y, x, h, w),
        };
        let furniture = vec![
            f(0, "round table", 0, 0.24, 0.50, 0.16, 0.18),
            f(1, "side shelf", 1, 0.50, 0.76, 0.16, 0.18),
            f(2, "low table", 2, 0.76, 0.50, 0.16, 0.18),
            f(3, "armchair", 3, 0.50, 0.24, 0.16, 0.18),
            f(4, "wall shelf", 4, 0.07, 0.50, 0.10, 0.22),
            f(5, "tv stand", 5, 0.93, 0.50, 0.10, 0.22),
        ];
        let classes = vec![
            // Counterclockwise on the ring (screen coordinates, y grows down).
            ClassSpec {
                name: "bottle".into(),
                color: 6,
                pattern: vec![0, 3, 2, 1],
                h: 0.08,
                w: 0.05,
            },
            // Clockwise on the ring.
            ClassSpec {
                name: "fork".into(),
                color: 7,
                pattern: vec![0, 1, 2, 3],
                h: 0.04,
                w: 0.10,
            },
            // Vertical: wall shelf, ring top, tv stand, ring top again.
            ClassSpec {
                name: "remote".into(),
                color: 8,
                pattern: vec![4, 0, 5, 0],
                h: 0.05,
                w: 0.09,
            },
        ];
        EnvironmentConfig {
            palette,
            furniture,
            classes,
            transition: TransitionModel::default(),
        }
    }
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.palette.is_empty() {
            return Err(SimError::Config("empty palette".into()));
        }
        let mut anchors = std::collections::HashSet::new();
        for item in &self.furniture {
            if !anchors.insert(item.anchor_id) {
                return Err(SimError::Config(format!(
                    "duplicate anchor id {}",
                    item.anchor_id
                )));
            }
            if !item.bbox.in_canvas() {
                return Err(SimError::Config(format!(
                    "furniture '{}' box leaves the canvas",
                    item.label
                )));
            }
        }
        let mut colors = std::collections::HashSet::new();
        for color in self
            .furniture
            .iter()
            .map(|f| f.color)
            .chain(self.classes.iter().map(|c| c.color))
        {
            if color as usize >= self.palette.len() {
                return Err(SimError::Config(format!("color id {color} outside palette")));
            }
            if !colors.insert(color) {
                return Err(SimError::Config(format!(
                    "palette color {color} reused across scene elements"
                )));
            }
        }
        for class in &self.classes {
            if class.pattern.len() < 3 {
                return Err(SimError::Config(format!(
                    "class '{}' pattern has {} anchors, need at least 3",
                    class.name,
                    class.pattern.len()
                )));
            }
            for a in &class.pattern {
                if !anchors.contains(a) {
                    return Err(SimError::Config(format!(
                        "class '{}' references unknown anchor {a}",
                        class.name
                    )));
                }
            }
            if class.h <= 0.0 || class.w <= 0.0 {
                return Err(SimError::Config(format!(
                    "class '{}' has non-positive box size",
                    class.name
                )));
            }
        }
        self.transition.validate()
    }

    pub fn color_name(&self, color: u32) -> &str {
        &self.palette[color as usize]
    }
}

/// A generated scene: furniture, class blueprints, and initial placements.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub furniture: Vec<FurnitureItem>,
    pub classes: Vec<ObjectClass>,
    pub objects: Vec<DynamicObject>,
    config: EnvironmentConfig,
}

impl Environment {
    pub fn config(&self) -> &EnvironmentConfig {
        &self.config
    }

    pub fn anchor_bbox(&self, anchor_id: u32) -> Option<&BBox> {
        self.furniture
            .iter()
            .find(|f| f.anchor_id == anchor_id)
            .map(|f| &f.bbox)
    }

    pub fn class(&self, name: &str) -> Option<&ObjectClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    fn object_box(&self, class: &ClassSpec, pattern_index: usize) -> BBox {
        let anchor = self
            .anchor_bbox(class.pattern[pattern_index])
            .expect("pattern anchors validated at construction");
        BBox::new(anchor.y, anchor.x, class.h, class.w)
    }

    /// One stochastic transition of a single object.
    pub fn step_object(
        &self,
        object: &DynamicObject,
        model: &TransitionModel,
        rng: &mut Rng64,
    ) -> DynamicObject {
        let spec = self
            .config
            .classes
            .iter()
            .find(|c| c.name == object.class)
            .expect("object class exists in the environment");
        let cycle = spec.pattern.len();
        let next = step_index(object.pattern_index, cycle, model, rng.uniform());
        let mut out = object.clone();
        out.pattern_index = next;
        out.bbox = self.object_box(spec, next);
        out
    }
}

/// Deterministically generates an environment from `seed`.
///
/// Furniture and color assignments come straight from the config; the seed
/// only draws each object's initial pattern index (uniform over its cycle).
pub fn generate_environment(seed: u64, config: &EnvironmentConfig) -> Result<Environment, SimError> {
    config.validate()?;
    let furniture: Vec<FurnitureItem> = config
        .furniture
        .iter()
        .map(|f| FurnitureItem {
            anchor_id: f.anchor_id,
            bbox: f.bbox,
            color: f.color,
            label: format!("{} {}", config.color_name(f.color), f.label),
        })
        .collect();
    let classes: Vec<ObjectClass> = config
        .classes
        .iter()
        .map(|c| ObjectClass {
            name: c.name.clone(),
            pattern: c.pattern.clone(),
        })
        .collect();
    let mut env = Environment {
        furniture,
        classes,
        objects: Vec::new(),
        config: config.clone(),
    };
    let mut rng = Rng64::new(seed, stream::ENV);
    let mut objects = Vec::with_capacity(config.classes.len());
    for spec in &config.classes {
        let idx = rng.index(spec.pattern.len());
        objects.push(DynamicObject {
            class: spec.name.clone(),
            color: spec.color,
            label: format!("{} {}", config.color_name(spec.color), spec.name),
            pattern_index: idx,
            bbox: env.object_box(spec, idx),
        });
    }
    env.objects = objects;
    Ok(env)
}

/// The scene at one timestamp, borrowed from an episode.
#[derive(Clone, Copy, Debug)]
pub struct MapSnapshot<'a> {
    pub tau: u32,
    pub objects: &'a [DynamicObject],
    pub furniture: &'a [FurnitureItem],
}

/// Object states at one timestamp (furniture lives on the episode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub tau: u32,
    pub objects: Vec<DynamicObject>,
}

/// A full rollout: `tau_max + 1` snapshots over a fixed environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub furniture: Vec<FurnitureItem>,
    pub classes: Vec<ObjectClass>,
    pub snapshots: Vec<SnapshotRecord>,
    /// `anchor_history[obj][tau]` = pattern index of object `obj` at `tau`.
    pub anchor_history: Vec<Vec<usize>>,
}

impl Episode {
    pub fn tau_max(&self) -> u32 {
        self.snapshots.len() as u32 - 1
    }

    pub fn snapshot(&self, tau: u32) -> MapSnapshot<'_> {
        let rec = &self.snapshots[tau as usize];
        MapSnapshot {
            tau: rec.tau,
            objects: &rec.objects,
            furniture: &self.furniture,
        }
    }

    pub fn class(&self, name: &str) -> Option<&ObjectClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub(crate) fn rebuild_anchor_history(&mut self) {
        let n_obj = self.snapshots.first().map_or(0, |s| s.objects.len());
        self.anchor_history = (0..n_obj)
            .map(|i| {
                self.snapshots
                    .iter()
                    .map(|s| s.objects[i].pattern_index)
                    .collect()
            })
            .collect();
    }
}

/// Rolls an environment forward for `tau_max` steps.
///
/// Each object draws from its own stream (`stream::OBJECT + index`) of the
/// generator keyed by `seed`, so rollouts are reproducible object by object.
pub fn rollout_episode(
    env: &Environment,
    seed: u64,
    tau_max: u32,
    model: &TransitionModel,
) -> Result<Episode, SimError> {
    if tau_max < 1 {
        return Err(SimError::Domain("tau_max must be at least 1".into()));
    }
    model.validate()?;
    let mut rngs: Vec<Rng64> = (0..env.objects.len())
        .map(|i| Rng64::new(seed, stream::OBJECT + i as u64))
        .collect();
    let mut snapshots = Vec::with_capacity(tau_max as usize + 1);
    let mut current = env.objects.clone();
    snapshots.push(SnapshotRecord {
        tau: 0,
        objects: current.clone(),
    });
    for tau in 1..=tau_max {
        current = current
            .iter()
            .zip(rngs.iter_mut())
            .map(|(obj, rng)| env.step_object(obj, model, rng))
            .collect();
        snapshots.push(SnapshotRecord {
            tau,
            objects: current.clone(),
        });
    }
    let mut episode = Episode {
        seed,
        furniture: env.furniture.clone(),
        classes: env.classes.clone(),
        snapshots,
        anchor_history: Vec::new(),
    };
    episode.rebuild_anchor_history();
    Ok(episode)
}

/// Generates `count` episodes with seeds `base_seed..base_seed + count`.
pub fn generate_episodes(
    base_seed: u64,
    count: usize,
    tau_max: u32,
    config: &EnvironmentConfig,
) -> Result<Vec<Episode>, SimError> {
    (0..count as u64)
        .map(|i| {
            let seed = base_seed + i;
            let env = generate_environment(seed, config)?;
            rollout_episode(&env, seed, tau_max, &config.transition)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_environment_has_one_object_per_class() {
        let env = generate_environment(0, &EnvironmentConfig::default()).unwrap();
        let names: Vec<&str> = env.objects.iter().map(|o| o.class.as_str()).collect();
        assert_eq!(names, ["bottle", "fork", "remote"]);
        assert_eq!(env.furniture.len(), 6);
    }

    #[test]
    fn same_seed_gives_identical_environments() {
        let cfg = EnvironmentConfig::default();
        let a = generate_environment(42, &cfg).unwrap();
        let b = generate_environment(42, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearby_seeds_differ_in_some_initial_index() {
        let cfg = EnvironmentConfig::default();
        let a = generate_environment(0, &cfg).unwrap();
        let b = generate_environment(1, &cfg).unwrap();
        let ia: Vec<usize> = a.objects.iter().map(|o| o.pattern_index).collect();
        let ib: Vec<usize> = b.objects.iter().map(|o| o.pattern_index).collect();
        assert_ne!(ia, ib, "seeds 0 and 1 drew identical initial placements");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut short = EnvironmentConfig::default();
        short.classes[0].pattern = vec![0, 1];
        assert!(matches!(short.validate(), Err(SimError::Config(_))));

        let mut dup = EnvironmentConfig::default();
        dup.furniture[1].anchor_id = dup.furniture[0].anchor_id;
        assert!(matches!(dup.validate(), Err(SimError::Config(_))));

        let mut empty = EnvironmentConfig::default();
        empty.palette.clear();
        assert!(matches!(empty.validate(), Err(SimError::Config(_))));
    }

    #[test]
    fn forced_low_draw_skips_two() {
        let model = TransitionModel::default();
        // skip < advance < stay thresholds: u = 0.05 falls in the skip band.
        assert_eq!(step_index(0, 4, &model, 0.05), 2);
        // Advance band.
        assert_eq!(step_index(0, 4, &model, 0.5), 1);
        // Stay band.
        assert_eq!(step_index(0, 4, &model, 0.95), 0);
        // Wrap-around on advance.
        assert_eq!(step_index(3, 4, &model, 0.5), 0);
    }

    #[test]
    fn degenerate_stay_model_never_moves() {
        let model = TransitionModel {
            p_advance: 0.0,
            p_stay: 1.0,
            p_skip: 0.0,
        };
        let env = generate_environment(5, &EnvironmentConfig::default()).unwrap();
        let ep = rollout_episode(&env, 5, 20, &model).unwrap();
        for snap in &ep.snapshots {
            assert_eq!(snap.objects, ep.snapshots[0].objects);
        }
    }

    #[test]
    fn rollout_has_tau_max_plus_one_snapshots() {
        let env = generate_environment(0, &EnvironmentConfig::default()).unwrap();
        let ep = rollout_episode(&env, 0, 20, &TransitionModel::default()).unwrap();
        assert_eq!(ep.snapshots.len(), 21);
        assert_eq!(ep.snapshots[0].objects, env.objects);
        for (tau, snap) in ep.snapshots.iter().enumerate() {
            assert_eq!(snap.tau as usize, tau);
        }
    }

    #[test]
    fn empirical_step_frequencies_match_the_model() {
        let model = TransitionModel::default();
        let mut rng = Rng64::new(11, 0);
        let (mut adv, mut stay, mut skip) = (0u64, 0u64, 0u64);
        let n = 100_000;
        let mut idx = 0usize;
        for _ in 0..n {
            let next = step_index(idx, 4, &model, rng.uniform());
            match (next + 4 - idx) % 4 {
                0 => stay += 1,
                1 => adv += 1,
                2 => skip += 1,
                _ => unreachable!(),
            }
            idx = next;
        }
        assert!((adv as f64 / n as f64 - 0.7).abs() < 0.01);
        assert!((stay as f64 / n as f64 - 0.2).abs() < 0.01);
        assert!((skip as f64 / n as f64 - 0.1).abs() < 0.01);
    }

    #[test]
    fn posterior_zero_steps_is_one_hot() {
        let q = exact_posterior(4, 0, 0, &TransitionModel::default()).unwrap();
        assert_eq!(q.probs(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_one_step_matches_transition_row() {
        let q = exact_posterior(4, 0, 1, &TransitionModel::default()).unwrap();
        let want = [0.2, 0.7, 0.1, 0.0];
        for (a, b) in q.probs().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn posterior_two_steps_matches_squared_matrix() {
        // Row 0 of T^2 for the default model on a 4-cycle. The 0.05 return
        // mass is stay*stay (0.04) plus skip*skip wrapping the cycle (0.01).
        let q = exact_posterior(4, 0, 2, &TransitionModel::default()).unwrap();
        let want = [0.05, 0.28, 0.53, 0.14];
        for (a, b) in q.probs().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn posterior_rejects_bad_start() {
        assert!(exact_posterior(4, 4, 1, &TransitionModel::default()).is_err());
    }

    #[test]
    fn monte_carlo_rollouts_agree_with_posterior() {
        let model = TransitionModel::default();
        let cycle = 4;
        let start = 1usize;
        let n = 100_000;
        for delta in [1u32, 2, 5] {
            let q = exact_posterior(cycle, start, delta, &model).unwrap();
            let mut counts = vec![0usize; cycle];
            let mut rng = Rng64::new(delta as u64 + 99, 0);
            for _ in 0..n {
                let mut idx = start;
                for _ in 0..delta {
                    idx = step_index(idx, cycle, &model, rng.uniform());
                }
                counts[idx] += 1;
            }
            let total: usize = counts.iter().sum();
            let emp: Vec<f64> = counts.iter().map(|c| *c as f64 / total as f64).collect();
            let tv = 0.5
                * emp
                    .iter()
                    .zip(q.probs())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            assert!(tv < 0.02, "delta {delta}: tv {tv}");
        }
    }

    #[test]
    fn simulator_boxes_stay_in_canvas() {
        let cfg = EnvironmentConfig::default();
        for seed in 0..20 {
            let env = generate_environment(seed, &cfg).unwrap();
            let ep = rollout_episode(&env, seed, 20, &cfg.transition).unwrap();
            for snap in &ep.snapshots {
                for obj in &snap.objects {
                    assert!(obj.bbox.in_canvas(), "seed {seed}: {:?}", obj.bbox);
                }
            }
            for item in &ep.furniture {
                assert!(item.bbox.in_canvas());
            }
        }
    }

    #[test]
    fn anchor_history_tracks_snapshot_boxes() {
        let cfg = EnvironmentConfig::default();
        let env = generate_environment(9, &cfg).unwrap();
        let ep = rollout_episode(&env, 9, 20, &cfg.transition).unwrap();
        for (obj_idx, class) in ep.classes.iter().enumerate() {
            for (tau, snap) in ep.snapshots.iter().enumerate() {
                let idx = ep.anchor_history[obj_idx][tau];
                assert_eq!(snap.objects[obj_idx].pattern_index, idx);
                let anchor_id = class.pattern[idx];
                let anchor = env.anchor_bbox(anchor_id).unwrap();
                let b = &snap.objects[obj_idx].bbox;
                assert_eq!((b.y, b.x), (anchor.y, anchor.x));
            }
        }
    }

    proptest! {
        #[test]
        fn posterior_is_normalized(
            cycle in 3usize..8,
            start in 0usize..3,
            delta in 0u32..30,
            advance in 0.0f64..1.0,
            stay_frac in 0.0f64..1.0,
        ) {
            let stay = (1.0 - advance) * stay_frac;
            let skip = 1.0 - advance - stay;
            let model = TransitionModel { p_advance: advance, p_stay: stay, p_skip: skip };
            prop_assume!(model.validate().is_ok());
            let q = exact_posterior(cycle, start.min(cycle - 1), delta, &model).unwrap();
            let sum: f64 = q.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(q.probs().iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn chapman_kolmogorov_composition(
            cycle in 3usize..8,
            start in 0usize..3,
            d1 in 0u32..12,
            d2 in 0u32..12,
        ) {
            let model = TransitionModel::default();
            let start = start.min(cycle - 1);
            let combined = exact_posterior(cycle, start, d1 + d2, &model).unwrap();
            let first = exact_posterior(cycle, start, d1, &model).unwrap();
            let mut composed = vec![0.0; cycle];
            for (i, p) in first.probs().iter().enumerate() {
                let row = exact_posterior(cycle, i, d2, &model).unwrap();
                for (j, r) in row.probs().iter().enumerate() {
                    composed[j] += p * r;
                }
            }
            for (a, b) in combined.probs().iter().zip(&composed) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
