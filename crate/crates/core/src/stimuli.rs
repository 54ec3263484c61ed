//! Experiment stimuli: intensity rescaling, coarse group construction, stimulus
//! records and files, and balanced session assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::PerturbationSummary;
use crate::coarse::CoarsePartition;
use crate::data::{read_json, read_png, write_json, write_png};
use crate::error::{Error, Result, Shortfall};
use crate::tensor::Tensor;

pub const MARGIN_LOW: f64 = 40.0;
pub const MARGIN_HIGH: f64 = 215.0;

/// Maps `[0, 255]` linearly onto `[40, 215]`.
pub fn rescale_to_margin(x: f64) -> f64 {
    MARGIN_LOW + x * ((MARGIN_HIGH - MARGIN_LOW) / 255.0)
}

/// Inverse of [`rescale_to_margin`].
pub fn rescale_from_margin(y: f64) -> f64 {
    (y - MARGIN_LOW) * (255.0 / (MARGIN_HIGH - MARGIN_LOW))
}

pub fn rescale_image_to_margin(image: &Tensor) -> Tensor {
    image.map(rescale_to_margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Image,
    Adv,
    Flip,
    False,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Image, Condition::Adv, Condition::Flip, Condition::False];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Image => "image",
            Condition::Adv => "adv",
            Condition::Flip => "flip",
            Condition::False => "false",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Condition::Image),
            "adv" => Ok(Condition::Adv),
            "flip" => Ok(Condition::Flip),
            "false" => Ok(Condition::False),
            _ => Err(Error::InvalidConfig(format!("unknown condition `{s}`"))),
        }
    }
}

/// Name-level description of coarse classes, groups and distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Coarse class name to the fine label names it contains.
    pub coarse_classes: BTreeMap<String, Vec<String>>,
    /// Group name to its two coarse classes.
    pub groups: BTreeMap<String, [String; 2]>,
    /// Fine label names outside every coarse class.
    pub distractors: Vec<String>,
}

/// Resolves a [`GroupSpec`] against the dataset's fine label list.
pub fn build_coarse_groups(fine_labels: &[String], spec: &GroupSpec) -> Result<CoarsePartition> {
    let index: BTreeMap<&str, usize> = fine_labels
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    if index.len() != fine_labels.len() {
        return Err(Error::Partition("duplicate names in fine label list".into()));
    }
    let mut owner: Vec<Option<&str>> = vec![None; fine_labels.len()];
    let mut resolve = |set: &str, names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                let &i = index
                    .get(n.as_str())
                    .ok_or_else(|| Error::Partition(format!("unknown fine label `{n}` in `{set}`")))?;
                if let Some(prev) = owner[i] {
                    return Err(Error::Partition(format!(
                        "fine label `{n}` listed twice (`{prev}` and `{set}`)"
                    )));
                }
                owner[i] = Some(if set == "distractors" { "distractors" } else { "class" });
                Ok(i)
            })
            .collect()
    };
    let mut coarse_classes = BTreeMap::new();
    for (name, fines) in &spec.coarse_classes {
        coarse_classes.insert(name.clone(), resolve(name, fines)?);
    }
    let distractors = resolve("distractors", &spec.distractors)?;
    if let Some(i) = owner.iter().position(Option::is_none) {
        return Err(Error::Partition(format!(
            "fine label `{}` is in no coarse class and not a distractor",
            fine_labels[i]
        )));
    }
    let p = CoarsePartition {
        fine_labels: fine_labels.to_vec(),
        coarse_classes,
        groups: spec.groups.clone(),
        distractors,
    };
    p.validate()?;
    Ok(p)
}

/// One generated experiment image and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub id: String,
    pub condition: Condition,
    pub group: String,
    /// Absent for the `false` condition.
    #[serde(default)]
    pub true_class: Option<String>,
    /// Present for `adv`, `flip` and `false`.
    #[serde(default)]
    pub target: Option<String>,
    /// PNG file name relative to the stimulus directory.
    pub file: String,
    pub source_id: String,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub perturbation: Option<PerturbationSummary>,
    /// Signed 16-bit perturbation file, relative to the stimulus directory.
    #[serde(default)]
    pub delta_file: Option<String>,
    pub retained: bool,
}

impl StimulusRecord {
    pub fn validate(&self) -> Result<()> {
        let (need_true, need_target) = match self.condition {
            Condition::Image => (true, false),
            Condition::Adv | Condition::Flip => (true, true),
            Condition::False => (false, true),
        };
        if self.true_class.is_some() != need_true || self.target.is_some() != need_target {
            return Err(Error::InvalidConfig(format!(
                "stimulus `{}` ({}) has inconsistent class fields",
                self.id, self.condition
            )));
        }
        if need_target != self.epsilon.is_some() {
            return Err(Error::InvalidConfig(format!(
                "stimulus `{}` ({}) epsilon presence mismatch",
                self.id, self.condition
            )));
        }
        Ok(())
    }

    /// The class this stimulus counts toward when balancing a session.
    pub fn balance_class(&self) -> Option<&str> {
        match self.condition {
            Condition::False => self.target.as_deref(),
            _ => self.true_class.as_deref(),
        }
    }
}

const DELTA_MAGIC: &[u8; 4] = b"ADVD";
const DELTA_VERSION: u32 = 1;

/// Signed 16-bit perturbation file: magic, version, h, w, c (u32 LE), then i16 LE values.
pub fn encode_delta(delta: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = delta.hwc()?;
    let mut out = Vec::with_capacity(20 + 2 * delta.len());
    out.extend_from_slice(DELTA_MAGIC);
    for v in [DELTA_VERSION, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in delta.data() {
        let q = v.round();
        if !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&q) {
            return Err(Error::InvalidConfig(format!("delta value {v} exceeds i16")));
        }
        out.extend_from_slice(&(q as i16).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_delta(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::InvalidConfig(format!("delta file: {m}"));
    if bytes.len() < 20 || &bytes[..4] != DELTA_MAGIC {
        return Err(bad("bad header"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if u(0) != DELTA_VERSION {
        return Err(bad("unsupported version"));
    }
    let (h, w, c) = (u(1) as usize, u(2) as usize, u(3) as usize);
    let body = &bytes[20..];
    if body.len() != 2 * h * w * c {
        return Err(bad("length does not match dims"));
    }
    let data = body
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])))
        .collect();
    Tensor::new(vec![h, w, c], data)
}

/// Writes `<id>.png`, `<id>.json` and, when given, `<id>.delta`.
pub fn write_stimulus(dir: &Path, record: &StimulusRecord, image: &Tensor, delta: Option<&Tensor>) -> Result<()> {
    record.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(&record.file), image)?;
    if let (Some(d), Some(name)) = (delta, &record.delta_file) {
        let p = dir.join(name);
        std::fs::write(&p, encode_delta(d)?).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&dir.join(format!("{}.json", record.id)), record)
}

/// All stimulus sidecars in `dir`, sorted by id.
pub fn load_pool(dir: &Path) -> Result<Vec<StimulusRecord>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Ok(r) = read_json::<StimulusRecord>(&path) {
                r.validate()?;
                out.push(r);
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn load_stimulus_image(dir: &Path, record: &StimulusRecord) -> Result<Tensor> {
    read_png(&dir.join(&record.file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTiming {
    pub exposure_ms: u32,
    pub response_window_ms: u32,
    pub fixation_min_ms: u32,
    pub fixation_max_ms: u32,
    pub mask_count: u32,
    pub mask_ms: u32,
}

impl Default for SessionTiming {
    fn default() -> Self {
        Self {
            exposure_ms: 63,
            response_window_ms: 2200,
            fixation_min_ms: 500,
            fixation_max_ms: 1000,
            mask_count: 10,
            mask_ms: 20,
        }
    }
}

/// One trial as the client sees it. Carries no class or condition information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub index: usize,
    pub stimulus_id: String,
    pub fixation_ms: u32,
    pub exposure_ms: u32,
    pub mask_count: u32,
    pub mask_ms: u32,
    pub response_window_ms: u32,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub group: String,
    pub seed: u64,
    /// Class shown on the left / right response button.
    pub buttons: [String; 2],
    pub trials: Vec<TrialSpec>,
}

impl SessionManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Builds a shuffled session with `trials_per_condition` trials of each of the four
/// conditions, split evenly between the group's two classes (by true class, or by
/// adversarial target for `false`).
pub fn assemble_session(
    pool: &[StimulusRecord],
    group: &str,
    classes: &[String; 2],
    trials_per_condition: usize,
    seed: u64,
    timing: &SessionTiming,
) -> Result<SessionManifest> {
    if trials_per_condition == 0 || trials_per_condition % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "trials per condition must be positive and even, got {trials_per_condition}"
        )));
    }
    if timing.fixation_min_ms > timing.fixation_max_ms {
        return Err(Error::InvalidConfig("fixation range is empty".into()));
    }
    let half = trials_per_condition / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&StimulusRecord> = Vec::with_capacity(4 * trials_per_condition);
    let mut shortfalls = Vec::new();
    for cond in Condition::ALL {
        for class in classes {
            let mut bucket: Vec<&StimulusRecord> = pool
                .iter()
                .filter(|r| {
                    r.retained && r.group == group && r.condition == cond && r.balance_class() == Some(class)
                })
                .collect();
            if bucket.len() < half {
                shortfalls.push(Shortfall {
                    condition: cond.to_string(),
                    class: class.clone(),
                    needed: half,
                    available: bucket.len(),
                });
                continue;
            }
            bucket.shuffle(&mut rng);
            chosen.extend_from_slice(&bucket[..half]);
        }
    }
    if !shortfalls.is_empty() {
        return Err(Error::InsufficientPool(shortfalls));
    }
    chosen.shuffle(&mut rng);
    let mut buttons = classes.clone();
    if rng.random_bool(0.5) {
        buttons.swap(0, 1);
    }
    let trials = chosen
        .iter()
        .enumerate()
        .map(|(index, r)| TrialSpec {
            index,
            stimulus_id: r.id.clone(),
            fixation_ms: rng.random_range(timing.fixation_min_ms..=timing.fixation_max_ms),
            exposure_ms: timing.exposure_ms,
            mask_count: timing.mask_count,
            mask_ms: timing.mask_ms,
            response_window_ms: timing.response_window_ms,
            mask_seed: rng.random(),
        })
        .collect();
    Ok(SessionManifest {
        session_id: format!("{group}-{seed}"),
        group: group.to_owned(),
        seed,
        buttons,
        trials,
    })
}

/// Trial counts per (condition, class) of a manifest, resolved through the pool.
pub fn session_counts(
    manifest: &SessionManifest,
    pool: &[StimulusRecord],
) -> Result<BTreeMap<(Condition, String), usize>> {
    let by_id: BTreeMap<&str, &StimulusRecord> = pool.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut counts = BTreeMap::new();
    for t in &manifest.trials {
        let r = by_id
            .get(t.stimulus_id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("trial references unknown stimulus `{}`", t.stimulus_id)))?;
        if !r.retained {
            return Err(Error::InvalidConfig(format!("trial uses unretained stimulus `{}`", r.id)));
        }
        let class = r.balance_class().unwrap_or_default().to_owned();
        *counts.entry((r.condition, class)).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Checks every balance invariant of a manifest against its pool.
pub fn check_balance(manifest: &SessionManifest, pool: &[StimulusRecord], classes: &[String; 2]) -> Result<()> {
    let counts = session_counts(manifest, pool)?;
    let expected = manifest.trials.len() / 8;
    for cond in Condition::ALL {
        for class in classes {
            let got = counts.get(&(cond, class.clone())).copied().unwrap_or(0);
            if got != expected {
                return Err(Error::InvalidConfig(format!(
                    "{cond}/{class}: {got} trials, expected {expected}"
                )));
            }
        }
    }
    if counts.values().sum::<usize>() != 8 * expected || manifest.trials.len() != 8 * expected {
        return Err(Error::InvalidConfig("trials outside the group's classes".into()));
    }
    let mut sorted_buttons = manifest.buttons.clone();
    sorted_buttons.sort();
    let mut sorted_classes = classes.clone();
    sorted_classes.sort();
    if sorted_buttons != sorted_classes {
        return Err(Error::InvalidConfig("buttons do not match group classes".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_fixtures() {
        assert_eq!(rescale_to_margin(0.0), 40.0);
        assert_eq!(rescale_to_margin(255.0), 215.0);
        assert!((rescale_to_margin(127.5) - 127.5).abs() < 1e-12);
        for x in 0..=255 {
            let y = rescale_to_margin(f64::from(x));
            let back = rescale_from_margin(y.round());
            assert!((back - f64::from(x)).abs() <= 1.0);
        }
    }

    fn spec() -> (Vec<String>, GroupSpec) {
        let labels: Vec<String> = ["husky", "beagle", "tabby", "siamese", "airplane"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let spec = GroupSpec {
            coarse_classes: [
                ("dog".to_string(), vec!["husky".to_string(), "beagle".to_string()]),
                ("cat".to_string(), vec!["tabby".to_string(), "siamese".to_string()]),
            ]
            .into(),
            groups: [("pets".to_string(), ["dog".to_string(), "cat".to_string()])].into(),
            distractors: vec!["airplane".to_string()],
        };
        (labels, spec)
    }

    #[test]
    fn builds_pets_partition() {
        let (labels, spec) = spec();
        let p = build_coarse_groups(&labels, &spec).unwrap();
        assert_eq!(p.class("dog").unwrap(), &[0, 1]);
        assert_eq!(p.class("cat").unwrap(), &[2, 3]);
        assert_eq!(p.distractors, vec![4]);
        for cls in p.coarse_classes.values() {
            assert!(cls.iter().all(|l| !p.distractors.contains(l)));
        }
    }

    #[test]
    fn duplicate_and_unknown_labels_rejected() {
        let (labels, mut spec) = spec();
        spec.coarse_classes.get_mut("cat").unwrap().push("husky".into());
        assert!(matches!(build_coarse_groups(&labels, &spec), Err(Error::Partition(_))));
        let (labels, mut spec) = spec_fresh();
        spec.distractors.push("zebra".into());
        assert!(build_coarse_groups(&labels, &spec).is_err());
        let (labels, mut spec) = spec_fresh();
        spec.distractors.clear();
        assert!(build_coarse_groups(&labels, &spec).is_err());
    }

    fn spec_fresh() -> (Vec<String>, GroupSpec) {
        spec()
    }

    #[test]
    fn record_field_invariants() {
        let mut r = StimulusRecord {
            id: "x".into(),
            condition: Condition::False,
            group: "pets".into(),
            true_class: None,
            target: Some("dog".into()),
            file: "x.png".into(),
            source_id: "s".into(),
            epsilon: Some(40.0),
            perturbation: None,
            delta_file: None,
            retained: true,
        };
        r.validate().unwrap();
        assert_eq!(r.balance_class(), Some("dog"));
        r.true_class = Some("cat".into());
        assert!(r.validate().is_err());
        r.condition = Condition::Image;
        assert!(r.validate().is_err());
        r.target = None;
        r.epsilon = None;
        r.validate().unwrap();
    }

    #[test]
    fn delta_file_roundtrip_and_corruption() {
        let d = Tensor::from_fn(vec![4, 3, 2], |i| i as f64 - 12.0);
        let bytes = encode_delta(&d).unwrap();
        assert_eq!(decode_delta(&bytes).unwrap(), d);
        assert!(decode_delta(&bytes[..bytes.len() - 1]).is_err());
        assert!(encode_delta(&Tensor::filled(vec![1, 1, 1], 1e6)).is_err());
    }

    #[test]
    fn condition_parse() {
        for c in Condition::ALL {
            assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
        }
        assert!("bogus".parse::<Condition>().is_err());
    }
}
