//! Labeled image datasets: PNG directories with a JSON manifest, plus a
//! synthetic textured-shapes generator.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stimuli::GroupSpec;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUPS_FILE: &str = "groups.json";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `[h, w, c]` intensities in `[0, 255]`.
    pub image: Tensor,
    pub fine_label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub id: String,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn with_label(&self, label: usize) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter().filter(move |it| it.fine_label == label)
    }

    /// Deterministic split: every `k`-th item (offset `r`) goes to the second set.
    pub fn split_every(&self, k: usize, r: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, it) in self.items.iter().enumerate() {
            if i % k == r {
                b.push(it.clone());
            } else {
                a.push(it.clone());
            }
        }
        (
            Dataset {
                id: format!("{}-train{k}.{r}", self.id),
                items: a,
            },
            Dataset {
                id: format!("{}-held{k}.{r}", self.id),
                items: b,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub fine_label: usize,
    /// Coarse class name, absent for distractor labels.
    #[serde(default)]
    pub coarse_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub fine_labels: Vec<String>,
    pub items: Vec<ManifestEntry>,
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::from_u8(vec![h as usize, w as usize, 3], img.as_raw())
}

/// Writes an `[h, w, 1]` or `[h, w, 3]` image, rounding to 8 bits.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    let bytes = image.to_u8();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w, 3],
                actual: image.shape().to_vec(),
            })
        }
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Image ids (file stems) listed one per line; blank lines and `#` comments ignored.
pub fn read_exclusions(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_owned())
}

/// Loads every manifest entry not named in `exclude`.
pub fn load_dataset(dir: &Path, exclude: &HashSet<String>) -> Result<(Dataset, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut items = Vec::with_capacity(manifest.items.len());
    for e in &manifest.items {
        let id = stem(&e.path);
        if exclude.contains(&id) {
            continue;
        }
        if e.fine_label >= manifest.fine_labels.len() {
            return Err(Error::LabelOutOfRange {
                label: e.fine_label,
                num_classes: manifest.fine_labels.len(),
            });
        }
        items.push(LabeledImage {
            id,
            image: read_png(&dir.join(&e.path))?,
            fine_label: e.fine_label,
        });
    }
    Ok((
        Dataset {
            id: manifest.dataset_id.clone(),
            items,
        },
        manifest,
    ))
}

/// A generated dataset with its label structure.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub fine_labels: Vec<String>,
    pub groups: GroupSpec,
}

impl SyntheticData {
    pub fn manifest(&self) -> DatasetManifest {
        let coarse_of: BTreeMap<&str, &str> = self
            .groups
            .coarse_classes
            .iter()
            .flat_map(|(c, fines)| fines.iter().map(move |f| (f.as_str(), c.as_str())))
            .collect();
        DatasetManifest {
            dataset_id: self.dataset.id.clone(),
            fine_labels: self.fine_labels.clone(),
            items: self
                .dataset
                .items
                .iter()
                .map(|it| ManifestEntry {
                    path: format!("{}.png", it.id),
                    fine_label: it.fine_label,
                    coarse_group: coarse_of
                        .get(self.fine_labels[it.fine_label].as_str())
                        .map(|s| s.to_string()),
                })
                .collect(),
        }
    }

    /// Writes PNGs, `manifest.json` and `groups.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for it in &self.dataset.items {
            write_png(&dir.join(format!("{}.png", it.id)), &it.image)?;
        }
        write_json(&dir.join(MANIFEST_FILE), &self.manifest())?;
        write_json(&dir.join(GROUPS_FILE), &self.groups)
    }
}

/// Fine label names of the synthetic generator, in label order. Every target
/// shape is upright, so none of them maps onto itself under a vertical flip.
pub const SYNTH_LABELS: [&str; 14] = [
    "solid_triangle",
    "hollow_triangle",
    "solid_arch",
    "hollow_arch",
    "tee",
    "pi",
    "mushroom",
    "lollipop",
    "comb",
    "rake",
    "rect_flag",
    "pennant",
    "dots",
    "ellipse",
];

pub fn synthetic_groups() -> GroupSpec {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    GroupSpec {
        coarse_classes: [
            ("triangle", &["solid_triangle", "hollow_triangle"][..]),
            ("arch", &["solid_arch", "hollow_arch"]),
            ("tee", &["tee", "pi"]),
            ("lamp", &["mushroom", "lollipop"]),
            ("comb", &["comb", "rake"]),
            ("flag", &["rect_flag", "pennant"]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), s(v)))
        .collect(),
        groups: [
            ("peaks", ["triangle", "arch"]),
            ("posts", ["tee", "lamp"]),
            ("hangings", ["comb", "flag"]),
        ]
        .into_iter()
        .map(|(k, [a, b])| (k.to_string(), [a.to_string(), b.to_string()]))
        .collect(),
        distractors: s(&["dots", "ellipse"]),
    }
}

/// Whether the pixel offset `(dx, dy)` from the shape center lies on shape `label`
/// of radius `r`. `dy` grows downward. `period` sets texture spacing.
fn on_shape(label: usize, dx: f64, dy: f64, r: f64, period: f64) -> bool {
    let within = |lo: f64, hi: f64, v: f64| v >= lo * r && v <= hi * r;
    let tri = |s: f64| {
        let top = -s;
        dy >= top && dy <= 0.8 * s && dx.abs() <= (dy - top) * 0.6
    };
    // Half disk with its flat side at 0.4r below center.
    let dome = |s: f64| dx.hypot(dy - 0.4 * r) <= s && dy <= 0.4 * r;
    let top_bar = within(-1.0, -0.6, dy) && dx.abs() <= r;
    let teeth = |p: f64| within(-0.6, 1.0, dy) && dx.abs() <= r && ((dx + 64.0) / p).floor() as i64 % 2 == 0;
    let pole = within(-1.0, -0.75, dx) && dy.abs() <= r;
    match label {
        0 => tri(r),
        1 => tri(r) && !(tri(r - 5.0) && dy < 0.8 * r - 3.5),
        2 => dome(1.2 * r),
        3 => dome(1.2 * r) && !dome(1.2 * r - 4.0),
        4 => top_bar || (dx.abs() <= 0.2 * r && dy.abs() <= r),
        5 => top_bar || ((dx.abs() - 0.6 * r).abs() <= 0.2 * r && dy.abs() <= r),
        6 => (dx.hypot(dy) <= r && dy <= 0.0) || (dx.abs() <= 0.25 * r && within(0.0, 1.0, dy)),
        7 => dx.hypot(dy + 0.5 * r) <= 0.5 * r || (dx.abs() <= 0.15 * r && within(-0.1, 1.0, dy)),
        8 => top_bar || teeth(period),
        9 => top_bar || teeth(2.0 * period),
        10 => pole || (within(-0.75, 1.0, dx) && within(-1.0, -0.1, dy)),
        11 => pole || (dx >= -0.75 * r && dx <= r && within(-1.0, -0.1, dy) && (dy + 0.55 * r).abs() <= 0.45 * (r - dx) / 1.75),
        12 => {
            let mx = (dx + 64.0).rem_euclid(6.0) - 3.0;
            let my = (dy + 64.0).rem_euclid(6.0) - 3.0;
            dx.abs() <= r && dy.abs() <= r && mx.hypot(my) <= 1.6
        }
        13 => (dx / r).powi(2) + (dy / (0.5 * r)).powi(2) <= 1.0,
        _ => false,
    }
}

struct Mark {
    label: usize,
    x: f64,
    y: f64,
    r: f64,
    color: [f64; 3],
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

/// Renders one `size x size` RGB image of fine label `label`.
pub fn render_shape(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = size as f64;
    let bg0 = random_color(rng);
    let bg1 = random_color(rng);
    // Foreground far enough from the background mean to stay visible.
    let fg = loop {
        let c = random_color(rng);
        let dist: f64 = (0..3)
            .map(|i| (c[i] - 0.5 * (bg0[i] + bg1[i])).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist > 120.0 {
            break c;
        }
    };
    // The labeled object sits in the upper half. The lower half carries small marks
    // drawn from random labels, so class evidence there has to be ignored.
    let r = s * rng.random_range(0.13..0.18);
    let cx = s * rng.random_range(0.3..0.7);
    let cy = s * rng.random_range(0.25..0.32);
    let marks: Vec<Mark> = (0..rng.random_range(1..=3))
        .map(|_| Mark {
            label: rng.random_range(0..SYNTH_LABELS.len()),
            x: s * rng.random_range(0.1..0.9),
            y: s * rng.random_range(0.65..0.92),
            r: s * rng.random_range(0.05..0.09),
            color: random_color(rng),
        })
        .collect();
    let period = rng.random_range(3.0..5.0);
    let noise = rng.random_range(4.0..14.0);
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (grad_angle.cos(), grad_angle.sin());
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let t = 0.5 + 0.5 * ((x as f64 / s - 0.5) * ga + (y as f64 / s - 0.5) * gb);
            let inside = on_shape(label, dx, dy, r, period);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mark = marks
                .iter()
                .find(|m| on_shape(m.label, px - m.x, py - m.y, m.r, period));
            for ch in 0..3 {
                let base = if inside {
                    fg[ch]
                } else if let Some(m) = mark {
                    m.color[ch]
                } else {
                    bg0[ch] * (1.0 - t) + bg1[ch] * t
                };
                let v: f64 = base + noise * rng.random_range(-1.0..1.0);
                data.push(v.round().clamp(0.0, 255.0));
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("finite")
}

/// `per_label` images for each of the 14 synthetic fine labels, interleaved by label.
pub fn synthetic_dataset(per_label: usize, size: usize, seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(per_label * SYNTH_LABELS.len());
    for k in 0..per_label {
        for label in 0..SYNTH_LABELS.len() {
            items.push(LabeledImage {
                id: format!("img{:05}", k * SYNTH_LABELS.len() + label),
                image: render_shape(label, size, &mut rng),
                fine_label: label,
            });
        }
    }
    SyntheticData {
        dataset: Dataset {
            id: format!("synthetic-{size}px-{per_label}x{}-seed{seed}", SYNTH_LABELS.len()),
            items,
        },
        fine_labels: SYNTH_LABELS.iter().map(|s| s.to_string()).collect(),
        groups: synthetic_groups(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_dataset(2, 32, 5);
        let b = synthetic_dataset(2, 32, 5);
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.items.len(), 28);
        for it in &a.dataset.items {
            assert_eq!(it.image.shape(), &[32, 32, 3]);
            assert!(it.image.min() >= 0.0 && it.image.max() <= 255.0);
        }
    }

    #[test]
    fn every_label_draws_pixels() {
        for label in 0..SYNTH_LABELS.len() {
            let hits = (0..64 * 64)
                .filter(|i| on_shape(label, (i % 64) as f64 - 32.0, (i / 64) as f64 - 32.0, 14.0, 4.0))
                .count();
            assert!(hits > 30, "label {label} has {hits} pixels");
        }
    }

    #[test]
    fn write_and_reload_with_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_dataset(1, 16, 1);
        data.write(dir.path()).unwrap();
        let excl: HashSet<String> = ["img00003".to_string()].into();
        let (ds, manifest) = load_dataset(dir.path(), &excl).unwrap();
        assert_eq!(manifest.items.len(), 14);
        assert_eq!(ds.items.len(), 13);
        assert!(ds.items.iter().all(|it| it.id != "img00003"));
        assert_eq!(ds.items[0].image, data.dataset.items[0].image);
        assert_eq!(manifest.items[12].coarse_group, None);
        assert_eq!(manifest.items[0].coarse_group.as_deref(), Some("triangle"));
    }

    #[test]
    fn target_shapes_are_not_flip_symmetric() {
        let groups = synthetic_groups();
        for (label, name) in SYNTH_LABELS.iter().enumerate() {
            if groups.distractors.iter().any(|d| d == name) {
                continue;
            }
            let (mut area, mut mismatch) = (0, 0);
            for y in -12..=12 {
                for x in -12..=12 {
                    let (dx, dy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let here = on_shape(label, dx, dy, 10.0, 4.0);
                    area += usize::from(here);
                    mismatch += usize::from(here != on_shape(label, dx, -dy, 10.0, 4.0));
                }
            }
            assert!(mismatch * 4 > area, "{name}: {mismatch} of {area} pixels change under flip");
        }
    }

    #[test]
    fn exclusion_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exclude.txt");
        std::fs::write(&p, "# lawns\nimg00001\n\n  img00007 \n").unwrap();
        let e = read_exclusions(&p).unwrap();
        assert_eq!(e.len(), 2);
        assert!(e.contains("img00007"));
    }
}
