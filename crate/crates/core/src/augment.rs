//! Weak views and cross-class patch replacement.
//!
//! The strong view blends a source image with a donor of a different class
//! through a cell-constant binary mask, `x̃ = M ⊙ x_i + (1 − M) ⊙ x_j`. The
//! central cells covering the glyph are never replaced, so only background
//! content moves between classes.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::ShortcutSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    /// The image is cut into a `grid × grid` array of cells.
    pub grid: usize,
    /// `[row, col]` cells never replaced. `None` means the central half.
    pub protected: Option<Vec<[usize; 2]>>,
    /// Number of unprotected cells taken from the donor.
    pub replace_count: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            grid: 4,
            protected: None,
            replace_count: 12,
        }
    }
}

impl MaskSpec {
    pub fn protected_cells(&self) -> Vec<[usize; 2]> {
        match &self.protected {
            Some(cells) => cells.clone(),
            None => {
                let g = self.grid;
                let band = g / 4..(3 * g).div_ceil(4);
                band.clone()
                    .flat_map(|r| band.clone().map(move |c| [r, c]))
                    .collect()
            }
        }
    }

    fn is_protected(&self, protected: &[[usize; 2]], r: usize, c: usize) -> bool {
        protected.contains(&[r, c])
    }

    /// Cells eligible for replacement, row-major.
    pub fn free_cells(&self) -> Vec<[usize; 2]> {
        let protected = self.protected_cells();
        (0..self.grid)
            .flat_map(|r| (0..self.grid).map(move |c| [r, c]))
            .filter(|&[r, c]| !self.is_protected(&protected, r, c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::invalid("sva.mask.grid", "must be positive"));
        }
        let protected = self.protected_cells();
        if let Some(cell) = protected
            .iter()
            .find(|[r, c]| *r >= self.grid || *c >= self.grid)
        {
            return Err(Error::invalid(
                "sva.mask.protected",
                alloc::format!("cell {cell:?} outside the grid"),
            ));
        }
        let free = self.free_cells().len();
        if self.replace_count == 0 || self.replace_count > free {
            return Err(Error::invalid(
                "sva.mask.replace_count",
                alloc::format!("{} must be in 1..={free}", self.replace_count),
            ));
        }
        Ok(())
    }

    /// Checks that the grid divides the image and that the protected cells
    /// tile the glyph region exactly.
    pub fn validate_for(&self, spec: &ShortcutSpec) -> Result<()> {
        self.validate()?;
        let (h, w) = (spec.height(), spec.width());
        if h % self.grid != 0 || w % self.grid != 0 {
            return Err(Error::invalid(
                "sva.mask.grid",
                alloc::format!("{} does not divide the {h}x{w} image", self.grid),
            ));
        }
        let (ch, cw) = (h / self.grid, w / self.grid);
        let protected = self.protected_cells();
        for y in 0..h {
            for x in 0..w {
                let cell_protected = self.is_protected(&protected, y / ch, x / cw);
                if cell_protected != spec.is_glyph_pixel(y, x) {
                    return Err(Error::invalid(
                        "sva.mask.protected",
                        "protected cells must tile the glyph region exactly",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `[H, W]` mask with 1 where the source pixel is kept. Exactly
/// `replace_count` unprotected cells are 0.
pub fn sample_mask(spec: &MaskSpec, height: usize, width: usize, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let g = spec.grid;
    if !height.is_multiple_of(g) || !width.is_multiple_of(g) {
        return Err(Error::invalid(
            "sva.mask.grid",
            "grid must divide the image",
        ));
    }
    let mut free = spec.free_cells();
    free.shuffle(&mut rng::from_seed(seed));
    let (ch, cw) = (height / g, width / g);
    let mut mask = vec![1.0; height * width];
    for &[r, c] in &free[..spec.replace_count] {
        for y in r * ch..(r + 1) * ch {
            mask[y * width + c * cw..y * width + (c + 1) * cw].fill(0.0);
        }
    }
    Tensor::new(vec![height, width], mask)
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::ShapeMismatch {
            op: "image",
            left: s.to_vec(),
            right: vec![3, 0, 0],
        }),
    }
}

/// Elementwise blend of two `[C, H, W]` images through an `[H, W]` mask.
pub fn sva_patch_replace(source: &Tensor, donor: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if source.shape() != donor.shape() {
        return Err(Error::ShapeMismatch {
            op: "sva_patch_replace",
            left: source.shape().to_vec(),
            right: donor.shape().to_vec(),
        });
    }
    let (c, h, w) = spatial(source)?;
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "sva_patch_replace",
            left: source.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let m = mask.data();
    let mut out = Vec::with_capacity(source.len());
    for ch in 0..c {
        for (p, &mp) in m.iter().enumerate() {
            let i = ch * h * w + p;
            out.push(mp * source.data()[i] + (1.0 - mp) * donor.data()[i]);
        }
    }
    Tensor::new(source.shape().to_vec(), out)
}

/// One draw of the weak augmentation policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakDraw {
    pub flip: bool,
    /// Crop offset relative to the unpadded image, each in `-2..=2`.
    pub shift: (i32, i32),
    pub brightness: f64,
}

impl WeakDraw {
    pub const IDENTITY: WeakDraw = WeakDraw {
        flip: false,
        shift: (0, 0),
        brightness: 0.0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = rng::from_seed(seed);
        Self {
            flip: rng.random_bool(0.5),
            shift: (rng.random_range(-2..=2), rng.random_range(-2..=2)),
            brightness: rng.random_range(-0.1..=0.1),
        }
    }
}

/// Horizontal flip, pad-2 (edge replicate) random crop and brightness
/// jitter, clamped to `[0, 1]`.
pub fn weak_augment(x: &Tensor, seed: u64) -> Result<Tensor> {
    weak_augment_with(x, WeakDraw::sample(seed))
}

pub fn weak_augment_with(x: &Tensor, draw: WeakDraw) -> Result<Tensor> {
    let (c, h, w) = spatial(x)?;
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    let (dy, dx) = draw.shift;
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i64 + dy as i64).clamp(0, h as i64 - 1) as usize;
            for xx in 0..w {
                let fx = if draw.flip { w - 1 - xx } else { xx };
                let sx = (fx as i64 + dx as i64).clamp(0, w as i64 - 1) as usize;
                let v = src[(ch * h + sy) * w + sx] + draw.brightness;
                out[(ch * h + y) * w + xx] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A sample's views for one step. `strong` and `donor_index` are present
/// together or not at all.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub weak: Tensor,
    strong: Option<(Tensor, usize)>,
}

impl ViewBundle {
    pub fn weak_only(weak: Tensor) -> Self {
        Self { weak, strong: None }
    }

    pub fn with_strong(weak: Tensor, strong: Tensor, donor_index: usize) -> Self {
        Self {
            weak,
            strong: Some((strong, donor_index)),
        }
    }

    pub fn strong(&self) -> Option<&Tensor> {
        self.strong.as_ref().map(|(t, _)| t)
    }

    pub fn donor_index(&self) -> Option<usize> {
        self.strong.as_ref().map(|(_, j)| *j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvaPair {
    /// Batch position of the image that keeps its center.
    pub source: usize,
    /// Batch position of the image lending its background cells.
    pub donor: usize,
}

/// Pairs a seeded half of the batch with donors carrying a different
/// (pseudo-)label. An all-same-label batch yields no pairs.
pub fn make_sva_pairs(labels: &[usize], seed: u64) -> Result<Vec<SvaPair>> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::invalid(
            "batch",
            alloc::format!("SVA pairing needs at least 2 samples, got {b}"),
        ));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        log::warn!("all {b} batch labels are identical; skipping SVA for this batch");
        return Ok(Vec::new());
    }
    let mut rng = rng::from_seed(seed);
    let mut order: Vec<usize> = (0..b).collect();
    order.shuffle(&mut rng);
    let mut sources = order[..b / 2].to_vec();
    sources.sort_unstable();
    let pairs = sources
        .into_iter()
        .map(|i| {
            let candidates: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
            let donor = *candidates.choose(&mut rng).expect("two labels are present");
            SvaPair { source: i, donor }
        })
        .collect();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = rng::from_seed(seed);
        Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    fn zeros_in(mask: &Tensor) -> usize {
        mask.data().iter().filter(|&&v| v == 0.0).count()
    }

    #[test]
    fn identity_draw_returns_input() {
        let x = image(1);
        assert_eq!(weak_augment_with(&x, WeakDraw::IDENTITY).unwrap(), x);
    }

    #[test]
    fn weak_views_stay_in_range_and_repeat() {
        let x = image(2);
        for seed in 0..50 {
            let a = weak_augment(&x, seed).unwrap();
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a, weak_augment(&x, seed).unwrap());
        }
    }

    #[test]
    fn full_replacement_zeroes_every_free_cell() {
        let spec = MaskSpec {
            replace_count: 12,
            ..MaskSpec::default()
        };
        let m = sample_mask(&spec, 32, 32, 0).unwrap();
        assert_eq!(zeros_in(&m), 12 * 64);
        for y in 8..24 {
            for x in 8..24 {
                assert_eq!(m.data()[y * 32 + x], 1.0);
            }
        }
    }

    #[test]
    fn mask_zero_cell_count_over_many_seeds() {
        let spec = MaskSpec {
            replace_count: 4,
            ..MaskSpec::default()
        };
        for seed in 0..1000 {
            let m = sample_mask(&spec, 32, 32, seed).unwrap();
            assert_eq!(zeros_in(&m), spec.replace_count * 64);
            for y in 8..24 {
                assert!(m.data()[y * 32 + 8..y * 32 + 24].iter().all(|&v| v == 1.0));
            }
            // cell-constant
            for r in 0..4 {
                for c in 0..4 {
                    let v = m.data()[r * 8 * 32 + c * 8];
                    for y in r * 8..(r + 1) * 8 {
                        for x in c * 8..(c + 1) * 8 {
                            assert_eq!(m.data()[y * 32 + x], v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn too_many_replacements_is_an_error() {
        let spec = MaskSpec {
            replace_count: 13,
            ..MaskSpec::default()
        };
        assert!(sample_mask(&spec, 32, 32, 0).is_err());
    }

    #[test]
    fn default_protected_cells_tile_the_glyph() {
        MaskSpec::default()
            .validate_for(&ShortcutSpec::default())
            .unwrap();
        let eight = MaskSpec {
            grid: 8,
            ..MaskSpec::default()
        };
        eight.validate_for(&ShortcutSpec::default()).unwrap();
        let off = MaskSpec {
            protected: Some(vec![[0, 0]]),
            ..MaskSpec::default()
        };
        assert!(off.validate_for(&ShortcutSpec::default()).is_err());
    }

    #[test]
    fn blend_with_constant_masks() {
        let (a, b) = (image(3), image(4));
        let ones = Tensor::full(vec![32, 32], 1.0);
        let zeros = Tensor::zeros(vec![32, 32]);
        assert_eq!(sva_patch_replace(&a, &b, &ones).unwrap(), a);
        assert_eq!(sva_patch_replace(&a, &b, &zeros).unwrap(), b);
        assert!(sva_patch_replace(&a, &Tensor::zeros(vec![3, 16, 16]), &ones).is_err());
        assert!(sva_patch_replace(&a, &b, &Tensor::zeros(vec![16, 16])).is_err());
    }

    #[test]
    fn single_cell_replacement_touches_only_that_cell() {
        let (a, b) = (image(5), image(6));
        let spec = MaskSpec {
            replace_count: 1,
            ..MaskSpec::default()
        };
        let m = sample_mask(&spec, 32, 32, 9).unwrap();
        let out = sva_patch_replace(&a, &b, &m).unwrap();
        for ch in 0..3 {
            for p in 0..1024 {
                let i = ch * 1024 + p;
                let expect = if m.data()[p] == 0.0 {
                    b.data()[i]
                } else {
                    a.data()[i]
                };
                assert_eq!(out.data()[i].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn pairs_of_two() {
        let p = make_sva_pairs(&[0, 1], 3).unwrap();
        assert_eq!(p.len(), 1);
        assert_ne!(p[0].source, p[0].donor);
    }

    #[test]
    fn same_label_batch_skips() {
        assert!(make_sva_pairs(&[2, 2, 2, 2], 0).unwrap().is_empty());
        assert!(make_sva_pairs(&[1], 0).is_err());
    }

    proptest! {
        #[test]
        fn self_blend_is_identity(seed in 0u64..10_000, m in 1usize..=12) {
            let x = image(seed);
            let spec = MaskSpec { replace_count: m, ..MaskSpec::default() };
            let mask = sample_mask(&spec, 32, 32, seed).unwrap();
            prop_assert_eq!(sva_patch_replace(&x, &x, &mask).unwrap(), x);
        }

        #[test]
        fn blend_conserves_pixels_and_protects_center(seed in 0u64..10_000) {
            let (a, b) = (image(seed), image(seed + 1));
            let spec = MaskSpec { replace_count: 1 + (seed % 12) as usize, ..MaskSpec::default() };
            let mask = sample_mask(&spec, 32, 32, seed).unwrap();
            let out = sva_patch_replace(&a, &b, &mask).unwrap();
            for i in 0..out.len() {
                let v = out.data()[i];
                prop_assert!(v == a.data()[i] || v == b.data()[i]);
                let (y, x) = ((i % 1024) / 32, i % 32);
                if (8..24).contains(&y) && (8..24).contains(&x) {
                    prop_assert_eq!(v.to_bits(), a.data()[i].to_bits());
                }
            }
        }

        #[test]
        fn donors_differ_in_label(labels in proptest::collection::vec(0usize..4, 2..16), seed in 0u64..1000) {
            let pairs = make_sva_pairs(&labels, seed).unwrap();
            let distinct = labels.iter().any(|&l| l != labels[0]);
            prop_assert_eq!(pairs.len(), if distinct { labels.len() / 2 } else { 0 });
            for p in pairs {
                prop_assert_ne!(labels[p.source], labels[p.donor]);
            }
        }
    }
}
