//! Planted-shortcut image datasets and labeled/unlabeled splits.
//!
//! Each class is identified by a high-frequency grayscale glyph drawn in the
//! central half of the image. The surrounding background is a flat color
//! with a faint gradient. Backgrounds belong to a pool with one entry per
//! shortcut-linked class: a linked class shows its own background with
//! probability `shortcut_strength` and otherwise a uniform draw from the
//! pool, while the remaining classes always draw uniformly from the same
//! pool. The background is predictive on the linked classes and misleading
//! everywhere else.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const GLYPH_HI: f64 = 0.85;
const GLYPH_LO: f64 = 0.15;
const GRADIENT_AMPLITUDE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShortcutSpec {
    /// `[height, width]` in pixels; both must be multiples of 4.
    pub image_size: [usize; 2],
    pub channels: usize,
    pub num_known_classes: usize,
    pub num_novel_classes: usize,
    pub samples_per_class: usize,
    /// Probability that a linked-class sample shows its own background.
    pub shortcut_strength: f64,
    pub glyph_noise: f64,
    pub seed: u64,
}

impl Default for ShortcutSpec {
    fn default() -> Self {
        Self {
            image_size: [32, 32],
            channels: 3,
            num_known_classes: 5,
            num_novel_classes: 5,
            samples_per_class: 200,
            shortcut_strength: 0.95,
            glyph_noise: 0.05,
            seed: 0,
        }
    }
}

impl ShortcutSpec {
    pub fn validate(&self) -> Result<()> {
        let rho = self.shortcut_strength;
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid(
                "shortcut_strength",
                alloc::format!("{rho} is outside [0, 1]"),
            ));
        }
        if self.num_known_classes == 0 {
            return Err(Error::invalid("num_known_classes", "must be at least 1"));
        }
        if self.num_novel_classes == 0 {
            return Err(Error::invalid("num_novel_classes", "must be at least 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class", "must be at least 1"));
        }
        let [h, w] = self.image_size;
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "image_size",
                alloc::format!("{h}x{w} must be multiples of 4 and at least 8"),
            ));
        }
        if self.channels != 3 {
            return Err(Error::invalid(
                "channels",
                "only 3-channel images are generated",
            ));
        }
        if !(self.glyph_noise >= 0.0 && self.glyph_noise.is_finite()) {
            return Err(Error::invalid(
                "glyph_noise",
                "must be a finite non-negative std",
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_known_classes + self.num_novel_classes
    }

    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.pixels()
    }

    /// Row and column ranges of the central glyph region.
    pub fn glyph_region(&self) -> (Range<usize>, Range<usize>) {
        let (h, w) = (self.height(), self.width());
        (h / 4..3 * h / 4, w / 4..3 * w / 4)
    }

    pub fn is_glyph_pixel(&self, y: usize, x: usize) -> bool {
        let (rows, cols) = self.glyph_region();
        rows.contains(&y) && cols.contains(&x)
    }

    /// Classes whose own background is planted as a shortcut.
    pub fn linked_classes(&self) -> Vec<usize> {
        let mut linked = class_order(self.num_classes(), self.seed);
        linked.truncate(self.num_known_classes);
        linked.sort_unstable();
        linked
    }
}

/// Seeded permutation of `0..n`; a prefix of it picks the known classes.
pub fn class_order(n: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(seed, "class-order"));
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub background_id: usize,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ShortcutSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Background colors, one per linked class.
#[derive(Debug, Clone)]
struct Palette {
    ids: Vec<usize>,
    colors: Vec<[f64; 3]>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let sector = libm::floor(h6) as usize % 6;
    let f = h6 - libm::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Palette {
    fn new(spec: &ShortcutSpec) -> Self {
        let ids = spec.linked_classes();
        let offset: f64 = rng::stream(spec.seed, "palette").random();
        let n = ids.len() as f64;
        let colors = (0..ids.len())
            .map(|r| hsv_to_rgb(offset + r as f64 / n, 0.65, 0.75))
            .collect();
        Self { ids, colors }
    }

    fn color(&self, background_id: usize) -> [f64; 3] {
        let slot = self
            .ids
            .iter()
            .position(|&i| i == background_id)
            .expect("background id comes from the pool");
        self.colors[slot]
    }
}

/// Glyph bit at local coordinates `(u, v)` of a `gh × gw` glyph box.
///
/// Ten shape families (horizontal bars, vertical bars, checker, two
/// diagonal stripings, square rings, plus, diagonal cross, circular rings,
/// central block) cycle through the class ids. Strokes are a quarter of the
/// box side (square rings use half that); every further ten classes thin
/// them by one pixel.
pub fn glyph_bit(class: usize, u: usize, v: usize, gh: usize, gw: usize) -> bool {
    let half = (gh.min(gw) / 4).saturating_sub(class / 10).max(1);
    // doubled offsets from the box center, so odd sizes stay symmetric
    let du = (2 * u + 1).abs_diff(gh);
    let dv = (2 * v + 1).abs_diff(gw);
    match class % 10 {
        0 => (u / half).is_multiple_of(2),
        1 => (v / half).is_multiple_of(2),
        2 => ((u / half) + (v / half)).is_multiple_of(2),
        3 => ((u + v) / half).is_multiple_of(2),
        4 => ((u + gw - v) / half).is_multiple_of(2),
        5 => (du.max(dv) / 2 / (half / 2).max(1)) % 2 == 1,
        6 => du < 2 * half || dv < 2 * half,
        7 => u.abs_diff(v) < half || (u + v).abs_diff(gw - 1) < half,
        8 => {
            let r = libm::sqrt((du * du + dv * dv) as f64) / 2.0;
            (r as usize / half).is_multiple_of(2)
        }
        _ => du.max(dv) < gh.min(gw) / 2,
    }
}

fn quantize(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

struct Painter<'a> {
    spec: &'a ShortcutSpec,
    palette: &'a Palette,
    noise: Option<Normal<f64>>,
}

impl<'a> Painter<'a> {
    fn new(spec: &'a ShortcutSpec, palette: &'a Palette) -> Self {
        let noise = (spec.glyph_noise > 0.0)
            .then(|| Normal::new(0.0, spec.glyph_noise).expect("validated std"));
        Self {
            spec,
            palette,
            noise,
        }
    }

    fn noise(&self, rng: &mut Rng) -> f64 {
        self.noise.map_or(0.0, |n| n.sample(rng))
    }

    /// Draws background pixels into `data`. Glyph pixels are drawn only when
    /// `glyph` names a class, and left untouched otherwise.
    fn paint(&self, data: &mut [f64], background_id: usize, glyph: Option<usize>, rng: &mut Rng) {
        let spec = self.spec;
        let (h, w) = (spec.height(), spec.width());
        let (rows, cols) = spec.glyph_region();
        let color = self.palette.color(background_id);
        let gy: f64 = rng.random_range(-1.0..1.0);
        let gx: f64 = rng.random_range(-1.0..1.0);
        for ch in 0..spec.channels {
            for y in 0..h {
                for x in 0..w {
                    let in_glyph = rows.contains(&y) && cols.contains(&x);
                    let base = if in_glyph {
                        match glyph {
                            Some(class) => {
                                let bit = glyph_bit(
                                    class,
                                    y - rows.start,
                                    x - cols.start,
                                    rows.len(),
                                    cols.len(),
                                );
                                if bit {
                                    GLYPH_HI
                                } else {
                                    GLYPH_LO
                                }
                            }
                            None => continue,
                        }
                    } else {
                        let fy = y as f64 / (h - 1) as f64 - 0.5;
                        let fx = x as f64 / (w - 1) as f64 - 0.5;
                        color[ch] + GRADIENT_AMPLITUDE * (gy * fy + gx * fx)
                    };
                    data[(ch * h + y) * w + x] = quantize(base + self.noise(rng));
                }
            }
        }
    }
}

fn draw_other(pool: &[usize], exclude: usize, rng: &mut Rng) -> Option<usize> {
    let others: Vec<usize> = pool.iter().copied().filter(|&b| b != exclude).collect();
    (!others.is_empty()).then(|| others[rng.random_range(0..others.len())])
}

/// Generates `samples_per_class` samples for every class, class-major.
/// Pixels are rounded to `f32` precision so the on-disk format is lossless.
pub fn generate_dataset(spec: &ShortcutSpec) -> Result<Dataset> {
    spec.validate()?;
    let palette = Palette::new(spec);
    let painter = Painter::new(spec, &palette);
    let mut rng = rng::stream(spec.seed, "samples");
    let shape = vec![spec.channels, spec.height(), spec.width()];
    let mut samples = Vec::with_capacity(spec.num_classes() * spec.samples_per_class);
    for class in 0..spec.num_classes() {
        let linked = palette.ids.contains(&class);
        for _ in 0..spec.samples_per_class {
            let keep = linked && rng.random_bool(spec.shortcut_strength);
            let background_id = if keep {
                class
            } else {
                palette.ids[rng.random_range(0..palette.ids.len())]
            };
            let mut data = vec![0.0; spec.image_len()];
            painter.paint(&mut data, background_id, Some(class), &mut rng);
            samples.push(Sample {
                image: Tensor::new(shape.clone(), data)?,
                label: class,
                background_id,
                is_labeled: false,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Redraws every background from the pool entries linked to other classes.
/// Glyph pixels, labels and the labeled flag are kept exactly.
pub fn swap_backgrounds(spec: &ShortcutSpec, samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let palette = Palette::new(spec);
    if palette.ids.len() < 2 {
        return Err(Error::invalid(
            "background pool",
            "swapping needs at least 2 background ids",
        ));
    }
    let painter = Painter::new(spec, &palette);
    let mut rng = rng::stream(seed, "swap-backgrounds");
    samples
        .iter()
        .map(|s| {
            let background_id =
                draw_other(&palette.ids, s.label, &mut rng).expect("pool has at least two ids");
            let mut image = s.image.clone();
            painter.paint(image.data_mut(), background_id, None, &mut rng);
            Ok(Sample {
                image,
                label: s.label,
                background_id,
                is_labeled: s.is_labeled,
            })
        })
        .collect()
}

/// Labeled/unlabeled partition. Ground truth for the unlabeled part is kept
/// for evaluation; the trainer only ever sees [`GcdSplit::training_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct GcdSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    /// Sorted known class ids (`Y_l`).
    pub known_classes: Vec<usize>,
    /// Total class count `K`.
    pub num_classes: usize,
    /// Dataset index of every labeled sample, in order.
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

/// What the trainer is allowed to see: labeled images with labels, and
/// unlabeled images without them.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub labeled: Vec<(&'a Tensor, usize)>,
    pub unlabeled: Vec<&'a Tensor>,
    pub known_classes: Vec<usize>,
    pub num_classes: usize,
}

impl GcdSplit {
    pub fn training_data(&self) -> TrainingData<'_> {
        TrainingData {
            labeled: self.labeled.iter().map(|s| (&s.image, s.label)).collect(),
            unlabeled: self.unlabeled.iter().map(|s| &s.image).collect(),
            known_classes: self.known_classes.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Hidden ground truth of the unlabeled part.
    pub fn unlabeled_truth(&self) -> Vec<usize> {
        self.unlabeled.iter().map(|s| s.label).collect()
    }

    pub fn is_known(&self, class: usize) -> bool {
        self.known_classes.binary_search(&class).is_ok()
    }

    /// Rebuilds a split from stored membership.
    pub fn from_membership(
        dataset: &Dataset,
        known_classes: Vec<usize>,
        labeled_indices: &[usize],
    ) -> Result<Self> {
        let n = dataset.len();
        let mut is_labeled = vec![false; n];
        for &i in labeled_indices {
            if i >= n {
                return Err(Error::invalid(
                    "labeled_indices",
                    alloc::format!("{i} out of range"),
                ));
            }
            is_labeled[i] = true;
        }
        let mut known_classes = known_classes;
        known_classes.sort_unstable();
        let mut split = GcdSplit {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            known_classes,
            num_classes: dataset.spec.num_classes(),
            labeled_indices: Vec::new(),
            unlabeled_indices: Vec::new(),
        };
        for (i, s) in dataset.samples.iter().enumerate() {
            let mut s = s.clone();
            s.is_labeled = is_labeled[i];
            if s.is_labeled {
                if !split.is_known(s.label) {
                    return Err(Error::invalid(
                        "labeled_indices",
                        alloc::format!("sample {i} has novel class {}", s.label),
                    ));
                }
                split.labeled.push(s);
                split.labeled_indices.push(i);
            } else {
                split.unlabeled.push(s);
                split.unlabeled_indices.push(i);
            }
        }
        Ok(split)
    }
}

fn check_fraction(field: &'static str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            alloc::format!("{f} is outside (0, 1)"),
        ))
    }
}

/// Picks `⌈known_fraction · K⌉` known classes from a seeded class shuffle and
/// labels `⌊labeled_fraction · n_c⌋` samples of each of them.
pub fn make_gcd_split(
    dataset: &Dataset,
    known_fraction: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<GcdSplit> {
    check_fraction("known_fraction", known_fraction)?;
    check_fraction("labeled_fraction", labeled_fraction)?;
    let k = dataset.spec.num_classes();
    // the epsilon keeps exact products such as 0.5 * 10 from rounding up
    let n_known = libm::ceil(known_fraction * k as f64 - 1e-9) as usize;
    if n_known == 0 || n_known >= k {
        return Err(Error::invalid(
            "known_fraction",
            alloc::format!("{known_fraction} leaves {n_known} of {k} classes known; need at least one known and one novel"),
        ));
    }
    let mut known = class_order(k, seed);
    known.truncate(n_known);
    known.sort_unstable();

    let mut rng = rng::stream(seed, "labeled-subset");
    let mut labeled = Vec::new();
    for &class in &known {
        let mut members: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        let take = libm::floor(labeled_fraction * members.len() as f64 + 1e-9) as usize;
        if take == 0 {
            return Err(Error::invalid(
                "labeled_fraction",
                alloc::format!("known class {class} would have no labeled samples"),
            ));
        }
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..take]);
    }
    labeled.sort_unstable();
    GcdSplit::from_membership(dataset, known, &labeled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rho: f64, seed: u64) -> ShortcutSpec {
        ShortcutSpec {
            samples_per_class: 20,
            shortcut_strength: rho,
            seed,
            ..ShortcutSpec::default()
        }
    }

    #[test]
    fn full_strength_links_every_known_sample() {
        let spec = small(1.0, 4);
        let ds = generate_dataset(&spec).unwrap();
        let linked = spec.linked_classes();
        for s in &ds.samples {
            if linked.contains(&s.label) {
                assert_eq!(s.background_id, s.label);
            } else {
                assert!(linked.contains(&s.background_id));
            }
        }
    }

    #[test]
    fn zero_strength_backgrounds_carry_no_label_information() {
        let spec = ShortcutSpec {
            samples_per_class: 1000,
            shortcut_strength: 0.0,
            image_size: [8, 8],
            seed: 9,
            ..ShortcutSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let k = spec.num_classes();
        let mut joint = vec![0.0f64; k * k];
        for s in &ds.samples {
            joint[s.label * k + s.background_id] += 1.0;
        }
        let n = ds.len() as f64;
        let py: Vec<f64> = (0..k)
            .map(|y| (0..k).map(|b| joint[y * k + b]).sum::<f64>() / n)
            .collect();
        let pb: Vec<f64> = (0..k)
            .map(|b| (0..k).map(|y| joint[y * k + b]).sum::<f64>() / n)
            .collect();
        let mut mi = 0.0;
        for y in 0..k {
            for b in 0..k {
                let p = joint[y * k + b] / n;
                if p > 0.0 {
                    mi += p * (p / (py[y] * pb[b])).ln();
                }
            }
        }
        // plug-in estimator bias is about (k-1)(k_bg-1)/2n ~ 0.002
        assert!(mi < 0.01, "mutual information {mi}");
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let spec = small(0.9, 11);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.image.data().iter().all(|&v| v as f32 as f64 == v));
        }
    }

    #[test]
    fn zero_samples_per_class_is_an_error() {
        let spec = ShortcutSpec {
            samples_per_class: 0,
            ..ShortcutSpec::default()
        };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn split_sizes_match_arithmetic() {
        let spec = ShortcutSpec {
            samples_per_class: 100,
            image_size: [8, 8],
            ..ShortcutSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let split = make_gcd_split(&ds, 0.5, 0.5, 3).unwrap();
        assert_eq!(split.labeled.len(), 250);
        assert_eq!(split.unlabeled.len(), 750);
        assert_eq!(split.known_classes.len(), 5);
    }

    #[test]
    fn split_rejects_empty_novel_set_and_bad_fractions() {
        let ds = generate_dataset(&small(1.0, 0)).unwrap();
        assert!(make_gcd_split(&ds, 0.999, 0.5, 0).is_err());
        assert!(make_gcd_split(&ds, 0.0, 0.5, 0).is_err());
        assert!(make_gcd_split(&ds, 0.5, 1.0, 0).is_err());
        assert!(make_gcd_split(&ds, 1.2, 0.5, 0).is_err());
    }

    #[test]
    fn labeled_samples_are_always_known() {
        let ds = generate_dataset(&small(0.8, 2)).unwrap();
        for seed in 0..20 {
            let split = make_gcd_split(&ds, 0.5, 0.5, seed).unwrap();
            assert!(split
                .labeled
                .iter()
                .all(|s| split.is_known(s.label) && s.is_labeled));
            assert!(split.unlabeled.iter().all(|s| !s.is_labeled));
            let mut seen: Vec<usize> = split.unlabeled.iter().map(|s| s.label).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), split.num_classes);
        }
    }

    #[test]
    fn split_with_the_data_seed_matches_linked_classes() {
        let spec = small(1.0, 21);
        let ds = generate_dataset(&spec).unwrap();
        let split = make_gcd_split(&ds, 0.5, 0.5, spec.seed).unwrap();
        assert_eq!(split.known_classes, spec.linked_classes());
    }

    #[test]
    fn swap_keeps_glyphs_and_labels_and_moves_backgrounds() {
        let spec = small(1.0, 5);
        let ds = generate_dataset(&spec).unwrap();
        let swapped = swap_backgrounds(&spec, &ds.samples, 77).unwrap();
        let (h, w) = (spec.height(), spec.width());
        for (a, b) in ds.samples.iter().zip(&swapped) {
            assert_eq!(a.label, b.label);
            assert_ne!(b.background_id, b.label);
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        if spec.is_glyph_pixel(y, x) {
                            let i = (ch * h + y) * w + x;
                            assert_eq!(a.image.data()[i].to_bits(), b.image.data()[i].to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn swap_needs_two_backgrounds() {
        let spec = ShortcutSpec {
            num_known_classes: 1,
            ..small(1.0, 0)
        };
        let ds = generate_dataset(&spec).unwrap();
        assert!(swap_backgrounds(&spec, &ds.samples, 0).is_err());
    }

    #[test]
    fn glyph_families_are_distinct() {
        for (gh, gw) in [(16, 16), (12, 12), (8, 8), (16, 12)] {
            let pats: Vec<Vec<bool>> = (0..12)
                .map(|c| {
                    (0..gh * gw)
                        .map(|i| glyph_bit(c, i / gw, i % gw, gh, gw))
                        .collect()
                })
                .collect();
            for a in 0..12 {
                for b in a + 1..12 {
                    assert_ne!(
                        pats[a], pats[b],
                        "{gh}x{gw}: classes {a} and {b} share a glyph"
                    );
                }
            }
        }
    }
}
