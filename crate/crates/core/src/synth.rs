//! Deterministic synthetic phantoms and a noisy multi-rater annotation
//! simulator.
//!
//! A phantom volume is an elliptical "bone" on a dark background with a
//! handful of bright Gaussian blobs spanning one to three consecutive
//! slices. Ground truth is the blob support at half maximum, so lesion
//! edges fade smoothly while the reference mask stays exact.
//!
//! The rater simulator mirrors the observed annotation failure mode:
//! lesion cells are missed at a configurable rate, dim lesions and the
//! first slice of a lesion are missed more, and a small rate of
//! false-positive cells is sprinkled over the rest of the grid. Every draw
//! comes from one seeded splitmix64 stream in (rater, slice, cell) order.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::SplitMix64;
use crate::softlabel::{GridTemplate, RaterGrid};
use crate::tensor::{BinaryMask, Tensor3D};

/// Geometry and intensity recipe for one phantom volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Bone ellipse semi-axes in pixels (x, y), centered in the image.
    pub bone_semi_axes: (f64, f64),
    /// Inclusive range for the number of lesions.
    pub lesion_count: (u32, u32),
    /// Inclusive range for lesion radius in pixels (half-maximum radius).
    pub lesion_radius: (f64, f64),
    /// Inclusive range for the peak intensity added at a lesion center.
    pub lesion_boost: (f64, f64),
    pub background_intensity: f64,
    pub bone_intensity: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            depth: 12,
            bone_semi_axes: (28.0, 24.0),
            lesion_count: (3, 5),
            lesion_radius: (4.0, 7.0),
            lesion_boost: (0.3, 0.55),
            background_intensity: 0.1,
            bone_intensity: 0.45,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

/// One generated lesion, kept as metadata so the rater simulator can tell
/// dim lesions and starting slices apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub boost: f64,
    pub start_slice: usize,
    /// Inclusive.
    pub end_slice: usize,
}

impl Lesion {
    pub fn active_on(&self, slice: usize) -> bool {
        (self.start_slice..=self.end_slice).contains(&slice)
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 - self.center_x;
        let dy = y as f64 - self.center_y;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// A phantom volume with its reference masks and lesion metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub intensities: Tensor3D,
    pub gt: Vec<BinaryMask>,
    pub bone: Vec<BinaryMask>,
    pub lesions: Vec<Lesion>,
}

/// Noise model for the simulated raters.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterNoiseSpec {
    pub n_raters: u32,
    /// Probability that a rater misses a lesion-overlapping cell.
    pub miss_rate: f64,
    /// Extra miss probability for dim lesions / starting slices, on top of
    /// `miss_rate`, with the total clamped to 0.95.
    pub difficulty_penalty: f64,
    /// Probability that a non-lesion cell is selected anyway.
    pub false_positive_rate: f64,
    /// Probability that a selected cell lands on a 4-neighbor instead.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RaterNoiseSpec {
    fn default() -> Self {
        Self {
            n_raters: 3,
            miss_rate: 0.5,
            difficulty_penalty: 0.2,
            false_positive_rate: 0.05,
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SynthError {
    /// Ranges empty/inverted, probabilities outside [0,1], zero dims.
    InvalidSpec(&'static str),
    /// No placement found that keeps a lesion fully inside the bone.
    Infeasible,
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::InvalidSpec(why) => write!(f, "invalid phantom spec: {why}"),
            SynthError::Infeasible => {
                write!(f, "lesion placement infeasible (radius too large for bone)")
            }
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(SynthError::InvalidSpec("zero volume dimension"));
        }
        if self.bone_semi_axes.0 <= 0.0 || self.bone_semi_axes.1 <= 0.0 {
            return Err(SynthError::InvalidSpec("bone semi-axes must be positive"));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(SynthError::InvalidSpec("inverted lesion count range"));
        }
        if self.lesion_radius.0 > self.lesion_radius.1 || self.lesion_radius.0 <= 0.0 {
            return Err(SynthError::InvalidSpec("bad lesion radius range"));
        }
        if self.lesion_boost.0 > self.lesion_boost.1 || self.lesion_boost.0 < 0.0 {
            return Err(SynthError::InvalidSpec("bad lesion boost range"));
        }
        for v in [
            self.background_intensity,
            self.bone_intensity,
            self.noise_std,
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SynthError::InvalidSpec("negative intensity parameter"));
            }
        }
        if self.background_intensity > 1.0 || self.bone_intensity > 1.0 {
            return Err(SynthError::InvalidSpec("base intensities must be in [0,1]"));
        }
        Ok(())
    }
}

impl RaterNoiseSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_raters == 0 {
            return Err(SynthError::InvalidSpec("need at least one rater"));
        }
        for p in [
            self.miss_rate,
            self.difficulty_penalty,
            self.false_positive_rate,
            self.jitter,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidSpec("rater probabilities must be in [0,1]"));
            }
        }
        Ok(())
    }
}

fn bone_ellipse(height: usize, width: usize, semi_axes: (f64, f64)) -> BinaryMask {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (ax, ay) = semi_axes;
    let mut mask = BinaryMask::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let nx = (x as f64 - cx) / ax;
            let ny = (y as f64 - cy) / ay;
            if nx * nx + ny * ny <= 1.0 {
                mask.set(y, x, 1);
            }
        }
    }
    mask
}

/// Whether the half-maximum disk of a lesion at (cx, cy) stays inside the
/// bone mask, checked pixel by pixel so the GT invariant holds exactly.
fn disk_inside_bone(bone: &BinaryMask, cx: f64, cy: f64, radius: f64) -> bool {
    let y0 = libm::floor(cy - radius).max(0.0) as usize;
    let y1 = (libm::ceil(cy + radius) as usize).min(bone.height().saturating_sub(1));
    let x0 = libm::floor(cx - radius).max(0.0) as usize;
    let x1 = (libm::ceil(cx + radius) as usize).min(bone.width().saturating_sub(1));
    // the disk must not be clipped by the image border either
    if cy - radius < 0.0
        || cx - radius < 0.0
        || cy + radius > bone.height() as f64 - 1.0
        || cx + radius > bone.width() as f64 - 1.0
    {
        return false;
    }
    let mut any = false;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= radius * radius {
                if bone.get(y, x) == 0 {
                    return false;
                }
                any = true;
            }
        }
    }
    any
}

const PLACEMENT_TRIES: usize = 200;

/// Deterministic phantom generation; everything is a function of the spec.
pub fn generate_volume(spec: &PhantomSpec) -> Result<Volume, SynthError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let (h, w, d) = (spec.height, spec.width, spec.depth);
    let bone_plane = bone_ellipse(h, w, spec.bone_semi_axes);

    let count_span = u64::from(spec.lesion_count.1 - spec.lesion_count.0) + 1;
    let n_lesions = spec.lesion_count.0 as u64 + rng.next_below(count_span);

    let mut lesions = Vec::with_capacity(n_lesions as usize);
    for _ in 0..n_lesions {
        let radius = rng.next_range_f64(spec.lesion_radius.0, spec.lesion_radius.1);
        let boost = rng.next_range_f64(spec.lesion_boost.0, spec.lesion_boost.1);
        let start_slice = rng.next_below(d as u64) as usize;
        let span = 1 + rng.next_below(3) as usize;
        let end_slice = (start_slice + span - 1).min(d - 1);

        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.next_range_f64(0.0, w as f64 - 1.0);
            let cy = rng.next_range_f64(0.0, h as f64 - 1.0);
            if disk_inside_bone(&bone_plane, cx, cy, radius) {
                placed = Some((cx, cy));
                break;
            }
        }
        let (center_x, center_y) = placed.ok_or(SynthError::Infeasible)?;
        lesions.push(Lesion {
            center_x,
            center_y,
            radius,
            boost,
            start_slice,
            end_slice,
        });
    }

    // intensities: base + Gaussian bumps + pixel noise, clamped to [0,1].
    // sigma is chosen so the bump crosses half maximum exactly at `radius`,
    // which makes the GT disk the half-maximum support.
    let half_max_factor = libm::sqrt(2.0 * libm::log(2.0));
    let mut data = Vec::with_capacity(d * h * w);
    let mut gt = Vec::with_capacity(d);
    for s in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = if bone_plane.get(y, x) == 1 {
                    spec.bone_intensity
                } else {
                    spec.background_intensity
                };
                for lesion in lesions.iter().filter(|l| l.active_on(s)) {
                    let dx = x as f64 - lesion.center_x;
                    let dy = y as f64 - lesion.center_y;
                    let sigma = lesion.radius / half_max_factor;
                    v += lesion.boost * libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                }
                v += spec.noise_std * rng.next_gaussian();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let mut mask = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if lesions.iter().any(|l| l.active_on(s) && l.covers(y, x)) {
                    mask.set(y, x, 1);
                }
            }
        }
        gt.push(mask);
    }

    let intensities =
        Tensor3D::new(d, h, w, data).expect("generated data matches declared dims");
    Ok(Volume {
        intensities,
        gt,
        bone: vec![bone_plane; d],
        lesions,
    })
}

/// Grid covering the whole image, which in particular covers any bone
/// bounding box.
pub fn full_image_template(height: usize, width: usize, cell: u32) -> GridTemplate {
    GridTemplate {
        origin_x: 0,
        origin_y: 0,
        cell,
        rows: height.div_ceil(cell as usize) as u32,
        cols: width.div_ceil(cell as usize) as u32,
    }
}

fn cell_overlaps_gt(
    template: &GridTemplate,
    row: u32,
    col: u32,
    gt: &BinaryMask,
) -> bool {
    match template.cell_bounds(row, col, gt.height(), gt.width()) {
        Some((y0, y1, x0, x1)) => {
            (y0..y1).any(|y| (x0..x1).any(|x| gt.get(y, x) == 1))
        }
        None => false,
    }
}

fn cell_overlaps_lesion(
    template: &GridTemplate,
    row: u32,
    col: u32,
    lesion: &Lesion,
    height: usize,
    width: usize,
) -> bool {
    match template.cell_bounds(row, col, height, width) {
        Some((y0, y1, x0, x1)) => (y0..y1).any(|y| (x0..x1).any(|x| lesion.covers(y, x))),
        None => false,
    }
}

/// Simulated noisy annotations: one grid per rater per slice, the outer
/// index being the slice. Draws consume one seeded stream in
/// (rater, slice, cell) order, so identical inputs give identical grids.
///
/// The template must cover the bone bounding box (the full-image template
/// always does).
pub fn simulate_raters(
    volume: &Volume,
    template: &GridTemplate,
    noise: &RaterNoiseSpec,
) -> Result<Vec<Vec<RaterGrid>>, SynthError> {
    noise.validate()?;
    template
        .validate()
        .map_err(|_| SynthError::InvalidSpec("invalid template"))?;
    let depth = volume.gt.len();
    let (h, w) = (volume.intensities.height(), volume.intensities.width());
    // dim-lesion threshold: lowest quartile of the boost range actually
    // spanned by this volume's lesions
    let (boost_lo, boost_hi) = volume.lesions.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), l| (lo.min(l.boost), hi.max(l.boost)),
    );
    let dim_threshold = boost_lo + 0.25 * (boost_hi - boost_lo);

    let mut rng = SplitMix64::new(noise.seed);
    let mut per_rater: Vec<Vec<RaterGrid>> = Vec::with_capacity(noise.n_raters as usize);
    for rater in 0..noise.n_raters {
        let mut slices = Vec::with_capacity(depth);
        for s in 0..depth {
            let mut grid = RaterGrid::empty(rater, *template);
            for row in 0..template.rows {
                for col in 0..template.cols {
                    let is_gt_cell = cell_overlaps_gt(template, row, col, &volume.gt[s]);
                    let selected = if is_gt_cell {
                        let difficult = volume.lesions.iter().any(|l| {
                            l.active_on(s)
                                && cell_overlaps_lesion(template, row, col, l, h, w)
                                && (l.boost < dim_threshold || l.start_slice == s)
                        });
                        let miss = if difficult {
                            (noise.miss_rate + noise.difficulty_penalty).min(0.95)
                        } else {
                            noise.miss_rate
                        };
                        rng.next_bool(1.0 - miss)
                    } else {
                        rng.next_bool(noise.false_positive_rate)
                    };
                    if selected {
                        let (mut r_out, mut c_out) = (row, col);
                        if noise.jitter > 0.0 && rng.next_bool(noise.jitter) {
                            let (dr, dc): (i64, i64) = match rng.next_below(4) {
                                0 => (-1, 0),
                                1 => (1, 0),
                                2 => (0, -1),
                                _ => (0, 1),
                            };
                            let nr = i64::from(row) + dr;
                            let nc = i64::from(col) + dc;
                            if (0..i64::from(template.rows)).contains(&nr)
                                && (0..i64::from(template.cols)).contains(&nc)
                            {
                                r_out = nr as u32;
                                c_out = nc as u32;
                            }
                        }
                        grid.select(r_out, c_out);
                    }
                }
            }
            slices.push(grid);
        }
        per_rater.push(slices);
    }

    // transpose to per-slice ordering for the label pipeline
    let mut per_slice: Vec<Vec<RaterGrid>> = (0..depth).map(|_| Vec::new()).collect();
    for rater_slices in per_rater {
        for (s, grid) in rater_slices.into_iter().enumerate() {
            per_slice[s].push(grid);
        }
    }
    Ok(per_slice)
}

/// Split `n` items by ratios using largest remainders, so the counts always
/// sum to `n`. Ratios must be non-negative and sum to 1.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize), SynthError> {
    let rs = [ratios.0, ratios.1, ratios.2];
    if rs.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(SynthError::InvalidSpec("ratios must be in [0,1]"));
    }
    if (rs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidSpec("ratios must sum to 1"));
    }
    let exact: Vec<f64> = rs.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let assigned: usize = counts.iter().sum();
    // hand out the remainder by descending fractional part, ties to the
    // earlier split
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        counts[order[i % 3]] += 1;
    }
    Ok((counts[0], counts[1], counts[2]))
}
