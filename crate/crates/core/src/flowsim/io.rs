//! Episode dataset files: JSON-lines with a header record.
//!
//! Line 1 is `{"format":"flowsim","version":1,"config":...}`; every further
//! line is one episode. Floats are written with 9 significant digits in
//! exponent form, which round-trips every value the simulator produces.

use super::{Episode, EnvironmentConfig, SimError, SnapshotRecord, TransitionModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub const FORMAT_NAME: &str = "flowsim";
pub const FORMAT_VERSION: u32 = 1;

/// Generation parameters echoed in the file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub base_seed: u64,
    pub episodes: usize,
    pub tau_max: u32,
    pub environment: EnvironmentConfig,
}

/// A parsed episode file: header config plus episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub episodes: Vec<Episode>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: DatasetConfig,
}

#[derive(Serialize, Deserialize)]
struct WireFurniture {
    anchor_id: u32,
    bbox: [f64; 4],
    color: u32,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct WireClass {
    name: String,
    pattern: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct WireObject {
    class: String,
    color: u32,
    label: String,
    pattern_index: usize,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct WireSnapshot {
    tau: u32,
    objects: Vec<WireObject>,
}

#[derive(Serialize, Deserialize)]
struct WireEpisode {
    seed: u64,
    furniture: Vec<WireFurniture>,
    classes: Vec<WireClass>,
    snapshots: Vec<WireSnapshot>,
}

impl From<&Episode> for WireEpisode {
    fn from(ep: &Episode) -> Self {
        WireEpisode {
            seed: ep.seed,
            furniture: ep
                .furniture
                .iter()
                .map(|f| WireFurniture {
                    anchor_id: f.anchor_id,
                    bbox: f.bbox.as_array(),
                    color: f.color,
                    label: f.label.clone(),
                })
                .collect(),
            classes: ep
                .classes
                .iter()
                .map(|c| WireClass {
                    name: c.name.clone(),
                    pattern: c.pattern.clone(),
                })
                .collect(),
            snapshots: ep
                .snapshots
                .iter()
                .map(|s| WireSnapshot {
                    tau: s.tau,
                    objects: s
                        .objects
                        .iter()
                        .map(|o| WireObject {
                            class: o.class.clone(),
                            color: o.color,
                            label: o.label.clone(),
                            pattern_index: o.pattern_index,
                            bbox: o.bbox.as_array(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl From<WireEpisode> for Episode {
    fn from(w: WireEpisode) -> Self {
        let mut ep = Episode {
            seed: w.seed,
            furniture: w
                .furniture
                .into_iter()
                .map(|f| super::FurnitureItem {
                    anchor_id: f.anchor_id,
                    bbox: super::BBox::new(f.bbox[0], f.bbox[1], f.bbox[2], f.bbox[3]),
                    color: f.color,
                    label: f.label,
                })
                .collect(),
            classes: w
                .classes
                .into_iter()
                .map(|c| super::ObjectClass {
                    name: c.name,
                    pattern: c.pattern,
                })
                .collect(),
            snapshots: w
                .snapshots
                .into_iter()
                .map(|s| SnapshotRecord {
                    tau: s.tau,
                    objects: s
                        .objects
                        .into_iter()
                        .map(|o| super::DynamicObject {
                            class: o.class,
                            color: o.color,
                            label: o.label,
                            pattern_index: o.pattern_index,
                            bbox: super::BBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
                        })
                        .collect(),
                })
                .collect(),
            anchor_history: Vec::new(),
        };
        ep.rebuild_anchor_history();
        ep
    }
}

/// Writes a JSON value with floats in 9-significant-digit exponent form.
fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format!("{:.8e}", n.as_f64().expect("numeric json value")));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization"))
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serialization"));
                out.push(':');
                write_value(v, out);
            }
            out.push('}');
        }
    }
}

fn to_line<T: Serialize>(record: &T) -> String {
    let value = serde_json::to_value(record).expect("record serialization");
    let mut line = String::new();
    write_value(&value, &mut line);
    line
}

/// Serializes a dataset to its on-disk byte representation.
pub fn dataset_to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut out = String::new();
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        config: dataset.config.clone(),
    };
    out.push_str(&to_line(&header));
    out.push('\n');
    for ep in &dataset.episodes {
        out.push_str(&to_line(&WireEpisode::from(ep)));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn write_episodes(dataset: &Dataset, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, dataset_to_bytes(dataset))?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Dataset, SimError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| SimError::Parse {
        line: 1,
        msg: "empty file, missing header".into(),
    })?;
    let first = first?;
    let header: Header = serde_json::from_str(&first).map_err(|e| SimError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != FORMAT_NAME {
        return Err(SimError::Format(format!(
            "unknown format '{}'",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(SimError::Format(format!(
            "version {} not supported (expected {})",
            header.version, FORMAT_VERSION
        )));
    }

    let mut episodes = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireEpisode = serde_json::from_str(&line).map_err(|e| SimError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        episodes.push(Episode::from(wire));
    }
    Ok(Dataset {
        config: header.config,
        episodes,
    })
}

/// Summary counts written next to a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub snapshots: usize,
    pub class_counts: std::collections::BTreeMap<String, usize>,
    pub observed_advance: f64,
    pub observed_stay: f64,
    pub observed_skip: f64,
    pub max_abs_frequency_error: f64,
}

impl DatasetStats {
    pub fn from_episodes(episodes: &[Episode], model: &TransitionModel) -> Self {
        let mut class_counts = std::collections::BTreeMap::new();
        let mut snapshots = 0usize;
        let (mut adv, mut stay, mut skip, mut total) = (0u64, 0u64, 0u64, 0u64);
        for ep in episodes {
            snapshots += ep.snapshots.len();
            for obj in ep.snapshots.first().map(|s| &s.objects[..]).unwrap_or(&[]) {
                *class_counts.entry(obj.class.clone()).or_insert(0) += 1;
            }
            for (obj_idx, class) in ep.classes.iter().enumerate() {
                let cycle = class.pattern.len();
                let hist = &ep.anchor_history[obj_idx];
                for pair in hist.windows(2) {
                    match (pair[1] + cycle - pair[0]) % cycle {
                        0 => stay += 1,
                        1 => adv += 1,
                        2 => skip += 1,
                        _ => {}
                    }
                    total += 1;
                }
            }
        }
        let total = total.max(1) as f64;
        let observed_advance = adv as f64 / total;
        let observed_stay = stay as f64 / total;
        let observed_skip = skip as f64 / total;
        let max_abs_frequency_error = [
            (observed_advance - model.p_advance).abs(),
            (observed_stay - model.p_stay).abs(),
            (observed_skip - model.p_skip).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        DatasetStats {
            episodes: episodes.len(),
            snapshots,
            class_counts,
            observed_advance,
            observed_stay,
            observed_skip,
            max_abs_frequency_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsim::generate_episodes;

    fn sample_dataset(count: usize) -> Dataset {
        let environment = EnvironmentConfig::default();
        let episodes = generate_episodes(100, count, 20, &environment).unwrap();
        Dataset {
            config: DatasetConfig {
                base_seed: 100,
                episodes: count,
                tau_max: 20,
                environment,
            },
            episodes,
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = sample_dataset(0);
        let bytes = dataset_to_bytes(&ds);
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"format\":\"flowsim\""));
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        let ds = sample_dataset(100);
        write_episodes(&ds, &path).unwrap();
        let back = read_episodes(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let a = dataset_to_bytes(&sample_dataset(5));
        let b = dataset_to_bytes(&sample_dataset(5));
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        let ds = sample_dataset(3);
        let mut text = String::from_utf8(dataset_to_bytes(&ds)).unwrap();
        // Chop the third line (second episode) in half.
        let lines: Vec<&str> = text.lines().collect();
        let broken = format!(
            "{}\n{}\n{}\n{}\n",
            lines[0],
            lines[1],
            &lines[2][..lines[2].len() / 2],
            lines[3]
        );
        text.clear();
        text.push_str(&broken);
        std::fs::write(&path, text).unwrap();
        match read_episodes(&path) {
            Err(SimError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        let ds = sample_dataset(1);
        let text = String::from_utf8(dataset_to_bytes(&ds)).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(read_episodes(&path), Err(SimError::Format(_))));
    }

    #[test]
    fn floats_use_nine_significant_digits() {
        let ds = sample_dataset(1);
        let text = String::from_utf8(dataset_to_bytes(&ds)).unwrap();
        let episode_line = text.lines().nth(1).unwrap();
        assert!(episode_line.contains("e-1") || episode_line.contains("e0"));
        // 0.24 renders as 2.40000000e-1: one leading digit plus eight decimals.
        assert!(episode_line.contains("2.40000000e-1"));
    }

    #[test]
    fn stats_report_transition_frequencies() {
        let ds = sample_dataset(50);
        let stats = DatasetStats::from_episodes(&ds.episodes, &ds.config.environment.transition);
        assert_eq!(stats.episodes, 50);
        assert_eq!(stats.class_counts["bottle"], 50);
        assert!(stats.max_abs_frequency_error < 0.05);
    }
}
