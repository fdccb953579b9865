//! Soft pseudo-label construction from grid-cell rater annotations.
//!
//! Four stages, composed in order by [`build_soft_labels`]:
//!
//! 1. aggregate rater selections into per-cell probabilities,
//! 2. rasterize onto the image and zero everything outside the bone mask,
//! 3. raise the probability of selected pixels that are unusually bright
//!    within the bone to one,
//! 4. propagate evidence from the neighboring slices, then re-mask.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{BinaryMask, SoftMask, Tensor2D, Tensor3D};

/// Rectangular grid overlay: `cell`-pixel squares, `rows` x `cols`, whose
/// top-left corner sits at `origin` (may be partially outside the image;
/// cells are clipped at rasterization time).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridTemplate {
    pub origin_x: i32,
    pub origin_y: i32,
    pub cell: u32,
    pub rows: u32,
    pub cols: u32,
}

impl GridTemplate {
    pub fn cell_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn validate(&self) -> Result<(), SoftLabelError> {
        if self.cell == 0 || self.rows == 0 || self.cols == 0 {
            return Err(SoftLabelError::InvalidTemplate);
        }
        Ok(())
    }

    /// Pixel bounds of cell (row, col) clipped to an image of the given
    /// dimensions; `None` when the cell lies fully outside.
    pub fn cell_bounds(
        &self,
        row: u32,
        col: u32,
        height: usize,
        width: usize,
    ) -> Option<(usize, usize, usize, usize)> {
        let cell = i64::from(self.cell);
        let x0 = i64::from(self.origin_x) + i64::from(col) * cell;
        let y0 = i64::from(self.origin_y) + i64::from(row) * cell;
        let x1 = (x0 + cell).clamp(0, width as i64);
        let y1 = (y0 + cell).clamp(0, height as i64);
        let x0 = x0.clamp(0, width as i64);
        let y0 = y0.clamp(0, height as i64);
        if x0 >= x1 || y0 >= y1 {
            None
        } else {
            Some((y0 as usize, y1 as usize, x0 as usize, x1 as usize))
        }
    }
}

/// One rater's cell selections on a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RaterGrid {
    pub rater_id: u32,
    pub template: GridTemplate,
    /// Row-major {0,1} per cell.
    pub selection: Vec<u8>,
}

impl RaterGrid {
    pub fn empty(rater_id: u32, template: GridTemplate) -> Self {
        Self {
            rater_id,
            template,
            selection: vec![0; template.cell_count()],
        }
    }

    pub fn select(&mut self, row: u32, col: u32) {
        self.selection[(row * self.template.cols + col) as usize] = 1;
    }

    pub fn is_selected(&self, row: u32, col: u32) -> bool {
        self.selection[(row * self.template.cols + col) as usize] == 1
    }
}

/// Knobs for the intensity and propagation stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLabelParams {
    /// Z-score threshold: pixels brighter than mean + k*std of the bone
    /// intensities count as lesion-bright.
    pub intensity_z_threshold: f64,
    /// Weight for neighbor-slice evidence, in [0, 1]. Zero disables
    /// propagation.
    pub propagation_weight: f32,
}

impl Default for SoftLabelParams {
    fn default() -> Self {
        Self {
            intensity_z_threshold: 1.0,
            propagation_weight: 0.5,
        }
    }
}

impl SoftLabelParams {
    pub fn validate(&self) -> Result<(), SoftLabelError> {
        if !self.intensity_z_threshold.is_finite() {
            return Err(SoftLabelError::InvalidParams);
        }
        if !(0.0..=1.0).contains(&self.propagation_weight) {
            return Err(SoftLabelError::InvalidParams);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SoftLabelError {
    InvalidTemplate,
    InvalidParams,
    /// Rater grids do not share one template, or a selection has the wrong
    /// number of cells.
    MismatchedTemplates,
    /// Fewer declared raters than distinct rater ids.
    RaterCountTooSmall,
    DimMismatch,
    /// Intensity statistics are undefined without bone pixels.
    EmptyBoneMask,
}

impl fmt::Display for SoftLabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SoftLabelError::InvalidTemplate => write!(f, "grid template has a zero dimension"),
            SoftLabelError::InvalidParams => write!(f, "soft label params out of range"),
            SoftLabelError::MismatchedTemplates => write!(f, "rater grids disagree on template"),
            SoftLabelError::RaterCountTooSmall => {
                write!(f, "n_raters smaller than number of distinct rater ids")
            }
            SoftLabelError::DimMismatch => write!(f, "plane dimensions differ"),
            SoftLabelError::EmptyBoneMask => write!(f, "bone mask has no positive pixels"),
        }
    }
}

/// Per-cell selection frequency: count of selecting raters divided by
/// `n_raters`. Order of the grids does not matter.
pub fn aggregate_raters(grids: &[RaterGrid], n_raters: usize) -> Result<Vec<f32>, SoftLabelError> {
    if n_raters == 0 {
        return Err(SoftLabelError::RaterCountTooSmall);
    }
    let template = match grids.first() {
        Some(g) => g.template,
        None => return Err(SoftLabelError::MismatchedTemplates),
    };
    template.validate()?;
    let cells = template.cell_count();
    let mut distinct_ids: Vec<u32> = Vec::new();
    for g in grids {
        if g.template != template || g.selection.len() != cells {
            return Err(SoftLabelError::MismatchedTemplates);
        }
        if !distinct_ids.contains(&g.rater_id) {
            distinct_ids.push(g.rater_id);
        }
    }
    if distinct_ids.len() > n_raters {
        return Err(SoftLabelError::RaterCountTooSmall);
    }
    let mut counts = vec![0u32; cells];
    for g in grids {
        for (c, &sel) in counts.iter_mut().zip(g.selection.iter()) {
            *c += u32::from(sel);
        }
    }
    Ok(counts
        .iter()
        .map(|&c| (f64::from(c) / n_raters as f64) as f32)
        .collect())
}

/// Paint each cell's probability onto an image-sized plane; pixels outside
/// the grid stay zero, cells are clipped at the image border.
pub fn rasterize(
    template: &GridTemplate,
    cell_probs: &[f32],
    height: usize,
    width: usize,
) -> Result<SoftMask, SoftLabelError> {
    template.validate()?;
    if cell_probs.len() != template.cell_count() {
        return Err(SoftLabelError::MismatchedTemplates);
    }
    let mut plane = Tensor2D::zeros(height, width);
    for row in 0..template.rows {
        for col in 0..template.cols {
            let p = cell_probs[(row * template.cols + col) as usize];
            if p == 0.0 {
                continue;
            }
            if let Some((y0, y1, x0, x1)) = template.cell_bounds(row, col, height, width) {
                for y in y0..y1 {
                    for x in x0..x1 {
                        plane.set(y, x, p);
                    }
                }
            }
        }
    }
    SoftMask::new(height, width, plane.data().to_vec()).map_err(|_| SoftLabelError::InvalidParams)
}

/// Zero every probability outside the bone support.
pub fn apply_bone_mask(soft: &SoftMask, bone: &BinaryMask) -> Result<SoftMask, SoftLabelError> {
    if soft.height() != bone.height() || soft.width() != bone.width() {
        return Err(SoftLabelError::DimMismatch);
    }
    let probs: Vec<f32> = soft
        .probs()
        .iter()
        .zip(bone.values().iter())
        .map(|(&p, &b)| if b == 1 { p } else { 0.0 })
        .collect();
    Ok(SoftMask::new(soft.height(), soft.width(), probs).expect("masking preserves [0,1]"))
}

/// Mean and population standard deviation of the image intensities over the
/// bone pixels (f64 accumulation, row-major order).
pub fn bone_intensity_stats(
    image: &Tensor2D,
    bone: &BinaryMask,
) -> Result<(f64, f64), SoftLabelError> {
    if image.height() != bone.height() || image.width() != bone.width() {
        return Err(SoftLabelError::DimMismatch);
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (&v, &b) in image.data().iter().zip(bone.values().iter()) {
        if b == 1 {
            sum += f64::from(v);
            count += 1;
        }
    }
    if count == 0 {
        return Err(SoftLabelError::EmptyBoneMask);
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for (&v, &b) in image.data().iter().zip(bone.values().iter()) {
        if b == 1 {
            let d = f64::from(v) - mean;
            sq += d * d;
        }
    }
    Ok((mean, libm::sqrt(sq / count as f64)))
}

/// Raise already-selected pixels (probability > 0) to probability one when
/// their intensity exceeds mean + k*std of the bone intensities. The strict
/// inequality means a uniform bone (std 0) boosts nothing at the mean.
pub fn intensity_boost(
    soft: &SoftMask,
    image: &Tensor2D,
    bone: &BinaryMask,
    params: &SoftLabelParams,
) -> Result<SoftMask, SoftLabelError> {
    params.validate()?;
    if soft.height() != image.height() || soft.width() != image.width() {
        return Err(SoftLabelError::DimMismatch);
    }
    let (mean, std) = bone_intensity_stats(image, bone)?;
    let threshold = mean + params.intensity_z_threshold * std;
    let probs: Vec<f32> = soft
        .probs()
        .iter()
        .zip(image.data().iter())
        .map(|(&p, &v)| {
            if p > 0.0 && f64::from(v) > threshold {
                1.0
            } else {
                p
            }
        })
        .collect();
    Ok(SoftMask::new(soft.height(), soft.width(), probs).expect("boost preserves [0,1]"))
}

/// Pull evidence from the two neighboring slices:
/// `p'_i = max(p_i, lambda * min(p_{i-1}, p_{i+1}))` for interior slices;
/// the first and last slice pass through unchanged. Reads the pre-update
/// volume, never decreases a probability.
pub fn propagate_slices(
    slices: &[SoftMask],
    params: &SoftLabelParams,
) -> Result<Vec<SoftMask>, SoftLabelError> {
    params.validate()?;
    if slices.is_empty() {
        return Err(SoftLabelError::DimMismatch);
    }
    let lambda = params.propagation_weight;
    let mut out = Vec::with_capacity(slices.len());
    for (i, slice) in slices.iter().enumerate() {
        if i == 0 || i + 1 == slices.len() {
            out.push(slice.clone());
            continue;
        }
        let (prev, next) = (&slices[i - 1], &slices[i + 1]);
        if !prev.plane().same_dims(slice.plane()) || !next.plane().same_dims(slice.plane()) {
            return Err(SoftLabelError::DimMismatch);
        }
        let probs: Vec<f32> = slice
            .probs()
            .iter()
            .zip(prev.probs().iter().zip(next.probs().iter()))
            .map(|(&p, (&a, &b))| p.max(lambda * a.min(b)))
            .collect();
        out.push(SoftMask::new(slice.height(), slice.width(), probs).expect("bounded by inputs"));
    }
    Ok(out)
}

/// Full pipeline over a volume: aggregate + rasterize + bone-mask +
/// intensity-boost per slice, then neighbor propagation, then a final
/// re-mask so nothing survives outside the bone.
///
/// `rater_grids[i]` holds all raters' grids for slice `i`; `bone[i]` and
/// the intensity volume must match the declared image dimensions.
pub fn build_soft_labels(
    rater_grids: &[Vec<RaterGrid>],
    n_raters: usize,
    bone: &[BinaryMask],
    intensities: &Tensor3D,
    params: &SoftLabelParams,
) -> Result<Vec<SoftMask>, SoftLabelError> {
    params.validate()?;
    if rater_grids.len() != intensities.depth() || bone.len() != intensities.depth() {
        return Err(SoftLabelError::DimMismatch);
    }
    let (h, w) = (intensities.height(), intensities.width());
    let mut staged = Vec::with_capacity(rater_grids.len());
    for (i, grids) in rater_grids.iter().enumerate() {
        let cell_probs = aggregate_raters(grids, n_raters)?;
        let raster = rasterize(&grids[0].template, &cell_probs, h, w)?;
        let masked = apply_bone_mask(&raster, &bone[i])?;
        let image = intensities.slice(i).map_err(|_| SoftLabelError::DimMismatch)?;
        let boosted = intensity_boost(&masked, &image, &bone[i], params)?;
        staged.push(boosted);
    }
    let propagated = propagate_slices(&staged, params)?;
    propagated
        .iter()
        .zip(bone.iter())
        .map(|(s, b)| apply_bone_mask(s, b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template_8() -> GridTemplate {
        GridTemplate {
            origin_x: 0,
            origin_y: 0,
            cell: 8,
            rows: 2,
            cols: 2,
        }
    }

    #[test]
    fn aggregate_counts_over_raters() {
        let t = template_8();
        let mut g1 = RaterGrid::empty(0, t);
        let mut g2 = RaterGrid::empty(1, t);
        let g3 = RaterGrid::empty(2, t);
        g1.select(0, 0);
        g2.select(0, 0);
        let probs = aggregate_raters(&[g1, g2, g3], 3).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(probs[1], 0.0);
    }

    #[test]
    fn aggregate_single_rater_full_confidence() {
        let t = template_8();
        let mut g = RaterGrid::empty(0, t);
        g.select(1, 1);
        let probs = aggregate_raters(&[g], 1).unwrap();
        assert_eq!(probs[3], 1.0);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let t = template_8();
        let mut g1 = RaterGrid::empty(0, t);
        let mut g2 = RaterGrid::empty(1, t);
        g1.select(0, 1);
        g2.select(1, 0);
        let a = aggregate_raters(&[g1.clone(), g2.clone()], 2).unwrap();
        let b = aggregate_raters(&[g2, g1], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_rejects_too_many_distinct_ids() {
        let t = template_8();
        let grids = [RaterGrid::empty(0, t), RaterGrid::empty(1, t)];
        assert_eq!(
            aggregate_raters(&grids, 1),
            Err(SoftLabelError::RaterCountTooSmall)
        );
    }

    #[test]
    fn aggregate_rejects_mismatched_templates() {
        let mut other = template_8();
        other.cell = 4;
        let grids = [RaterGrid::empty(0, template_8()), RaterGrid::empty(1, other)];
        assert_eq!(
            aggregate_raters(&grids, 2),
            Err(SoftLabelError::MismatchedTemplates)
        );
    }

    #[test]
    fn rasterize_fills_exactly_one_cell() {
        let t = template_8();
        let probs = alloc::vec![0.5, 0.0, 0.0, 0.0];
        let mask = rasterize(&t, &probs, 16, 16).unwrap();
        let at_half = mask.probs().iter().filter(|&&p| p == 0.5).count();
        let zeros = mask.probs().iter().filter(|&&p| p == 0.0).count();
        assert_eq!(at_half, 64);
        assert_eq!(zeros, 16 * 16 - 64);
    }

    #[test]
    fn rasterize_clips_at_image_border() {
        let t = GridTemplate {
            origin_x: 12,
            origin_y: 12,
            cell: 8,
            rows: 1,
            cols: 1,
        };
        let mask = rasterize(&t, &[1.0], 16, 16).unwrap();
        // only the 4x4 in-bounds corner is painted
        assert_eq!(mask.probs().iter().filter(|&&p| p == 1.0).count(), 16);
    }

    #[test]
    fn rasterize_all_zero_cells_gives_zero_mask() {
        let t = template_8();
        let mask = rasterize(&t, &[0.0; 4], 16, 16).unwrap();
        assert!(mask.probs().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn bone_mask_zeroes_outside_and_keeps_inside() {
        let soft = SoftMask::new(1, 2, alloc::vec![0.8, 0.8]).unwrap();
        let bone = BinaryMask::new(1, 2, alloc::vec![0, 1]).unwrap();
        let out = apply_bone_mask(&soft, &bone).unwrap();
        assert_eq!(out.probs(), &[0.0, 0.8]);
    }

    #[test]
    fn bone_mask_all_ones_is_identity_and_idempotent() {
        let soft = SoftMask::new(2, 2, alloc::vec![0.1, 0.4, 0.9, 0.0]).unwrap();
        let bone = BinaryMask::new(2, 2, alloc::vec![1; 4]).unwrap();
        let once = apply_bone_mask(&soft, &bone).unwrap();
        assert_eq!(once, soft);
        let partial = BinaryMask::new(2, 2, alloc::vec![1, 0, 1, 0]).unwrap();
        let a = apply_bone_mask(&soft, &partial).unwrap();
        let b = apply_bone_mask(&a, &partial).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boost_requires_prior_selection() {
        // bone everywhere; mean 0.3667, std 0.3771, so the 0.9 pixels clear
        // the k=1 threshold 0.7438. One bright pixel selected, one not.
        let image = Tensor2D::new(1, 6, alloc::vec![0.1, 0.1, 0.1, 0.1, 0.9, 0.9]).unwrap();
        let bone = BinaryMask::new(1, 6, alloc::vec![1; 6]).unwrap();
        let soft = SoftMask::new(1, 6, alloc::vec![0.0, 0.0, 0.0, 0.0, 0.33, 0.0]).unwrap();
        let params = SoftLabelParams::default();
        let out = intensity_boost(&soft, &image, &bone, &params).unwrap();
        assert_eq!(out.get(0, 4), 1.0); // selected and bright
        assert_eq!(out.get(0, 5), 0.0); // bright but never selected
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn boost_uses_strict_inequality_on_uniform_bone() {
        let image = Tensor2D::new(1, 4, alloc::vec![0.5; 4]).unwrap();
        let bone = BinaryMask::new(1, 4, alloc::vec![1; 4]).unwrap();
        let soft = SoftMask::new(1, 4, alloc::vec![0.4; 4]).unwrap();
        let out = intensity_boost(&soft, &image, &bone, &SoftLabelParams::default()).unwrap();
        assert_eq!(out.probs(), &[0.4; 4]);
    }

    #[test]
    fn boost_hand_computed_stats() {
        // bone pixels with intensities 0.1,0.2,0.3,0.4: mean 0.25, std ~0.1118.
        // k=1 threshold 0.3618: only the 0.4 pixel exceeds it.
        let image = Tensor2D::new(1, 4, alloc::vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bone = BinaryMask::new(1, 4, alloc::vec![1; 4]).unwrap();
        let (mean, std) = bone_intensity_stats(&image, &bone).unwrap();
        assert!((mean - 0.25).abs() < 1e-7);
        assert!((std - 0.111_803_398_874_989_5).abs() < 1e-7);
        let soft = SoftMask::new(1, 4, alloc::vec![0.33; 4]).unwrap();
        let out = intensity_boost(&soft, &image, &bone, &SoftLabelParams::default()).unwrap();
        assert_eq!(out.probs(), &[0.33, 0.33, 0.33, 1.0]);
    }

    #[test]
    fn boost_rejects_empty_bone() {
        let image = Tensor2D::zeros(2, 2);
        let bone = BinaryMask::zeros(2, 2);
        let soft = SoftMask::zeros(2, 2);
        assert_eq!(
            intensity_boost(&soft, &image, &bone, &SoftLabelParams::default()),
            Err(SoftLabelError::EmptyBoneMask)
        );
    }

    #[test]
    fn propagation_fills_gap_between_positive_neighbors() {
        let hot = SoftMask::new(1, 1, alloc::vec![1.0]).unwrap();
        let cold = SoftMask::new(1, 1, alloc::vec![0.0]).unwrap();
        let out = propagate_slices(&[hot.clone(), cold, hot], &SoftLabelParams::default()).unwrap();
        assert_eq!(out[1].probs(), &[0.5]);
    }

    #[test]
    fn propagation_never_decreases() {
        let a = SoftMask::new(1, 1, alloc::vec![0.9]).unwrap();
        let z = SoftMask::new(1, 1, alloc::vec![0.0]).unwrap();
        let out = propagate_slices(&[z.clone(), a, z], &SoftLabelParams::default()).unwrap();
        assert_eq!(out[1].probs(), &[0.9]);
    }

    #[test]
    fn propagation_single_slice_identity() {
        let a = SoftMask::new(1, 2, alloc::vec![0.3, 0.7]).unwrap();
        let out = propagate_slices(core::slice::from_ref(&a), &SoftLabelParams::default()).unwrap();
        assert_eq!(out[0], a);
    }

    #[test]
    fn propagation_boundary_slices_unchanged() {
        let hot = SoftMask::new(1, 1, alloc::vec![1.0]).unwrap();
        let cold = SoftMask::new(1, 1, alloc::vec![0.0]).unwrap();
        let out =
            propagate_slices(&[cold.clone(), hot.clone(), hot], &SoftLabelParams::default())
                .unwrap();
        assert_eq!(out[0].probs(), &[0.0]);
    }

    #[test]
    fn pipeline_all_zero_raters_gives_zero_volume() {
        let t = template_8();
        let grids: Vec<Vec<RaterGrid>> = (0..3)
            .map(|_| alloc::vec![RaterGrid::empty(0, t), RaterGrid::empty(1, t)])
            .collect();
        let bone: Vec<BinaryMask> = (0..3)
            .map(|_| BinaryMask::new(16, 16, alloc::vec![1; 256]).unwrap())
            .collect();
        let intensities = Tensor3D::zeros(3, 16, 16);
        let out =
            build_soft_labels(&grids, 2, &bone, &intensities, &SoftLabelParams::default()).unwrap();
        assert!(out.iter().all(|s| s.probs().iter().all(|&p| p == 0.0)));
    }

    #[test]
    fn pipeline_output_stays_inside_bone() {
        let t = GridTemplate {
            origin_x: 0,
            origin_y: 0,
            cell: 4,
            rows: 4,
            cols: 4,
        };
        let mut g = RaterGrid::empty(0, t);
        for r in 0..4 {
            for c in 0..4 {
                g.select(r, c);
            }
        }
        let grids: Vec<Vec<RaterGrid>> = (0..4).map(|_| alloc::vec![g.clone()]).collect();
        // bone occupies the left half only
        let mut bone_plane = BinaryMask::zeros(16, 16);
        for y in 0..16 {
            for x in 0..8 {
                bone_plane.set(y, x, 1);
            }
        }
        let bone: Vec<BinaryMask> = (0..4).map(|_| bone_plane.clone()).collect();
        let mut data = alloc::vec![0.2f32; 4 * 256];
        data[0] = 0.9; // a bright selected pixel inside bone
        let intensities = Tensor3D::new(4, 16, 16, data).unwrap();
        let out =
            build_soft_labels(&grids, 1, &bone, &intensities, &SoftLabelParams::default()).unwrap();
        for (slice, b) in out.iter().zip(bone.iter()) {
            for y in 0..16 {
                for x in 0..16 {
                    if slice.get(y, x) > 0.0 {
                        assert_eq!(b.get(y, x), 1, "positive probability outside bone");
                    }
                }
            }
        }
    }

    #[test]
    fn pipeline_single_rater_binarizes_to_selected_cells() {
        // one rater selecting exact cells, no boost (huge k), no propagation
        let t = template_8();
        let mut g = RaterGrid::empty(0, t);
        g.select(0, 0);
        g.select(1, 1);
        let grids: Vec<Vec<RaterGrid>> = (0..2).map(|_| alloc::vec![g.clone()]).collect();
        let bone: Vec<BinaryMask> = (0..2)
            .map(|_| BinaryMask::new(16, 16, alloc::vec![1; 256]).unwrap())
            .collect();
        let intensities = Tensor3D::zeros(2, 16, 16);
        let params = SoftLabelParams {
            intensity_z_threshold: 1e9,
            propagation_weight: 0.0,
        };
        let out = build_soft_labels(&grids, 1, &bone, &intensities, &params).unwrap();
        let expected = rasterize(&t, &aggregate_raters(&[g], 1).unwrap(), 16, 16).unwrap();
        for slice in &out {
            assert_eq!(slice.binarize(0.5), expected.binarize(0.5));
        }
    }
}
