//! Dense float containers and mask types shared by every module.
//!
//! Storage is `f32`, row-major within a slice and slice-major across a
//! volume. Reductions elsewhere accumulate in `f64`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by container constructors and shape-checked operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    /// Data length does not match the product of the dimensions.
    LengthMismatch { expected: usize, got: usize },
    /// Two operands that must share dimensions do not.
    DimMismatch,
    /// A value violates the container's range invariant (finite, [0,1], {0,1}).
    ValueOutOfRange { index: usize },
    /// Slice index outside the parent volume.
    SliceOutOfRange { index: usize, depth: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "data length {got} does not match dims (expected {expected})")
            }
            TensorError::DimMismatch => write!(f, "operand dimensions differ"),
            TensorError::ValueOutOfRange { index } => {
                write!(f, "value at index {index} violates range invariant")
            }
            TensorError::SliceOutOfRange { index, depth } => {
                write!(f, "slice index {index} out of range for depth {depth}")
            }
        }
    }
}

/// 2D plane of finite f32 values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != height * width {
            return Err(TensorError::LengthMismatch {
                expected: height * width,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::ValueOutOfRange { index });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Tensor2D) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Plane flipped left-right (x -> width-1-x).
    pub fn mirror_horizontal(&self) -> Tensor2D {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = &mut out.data[y * self.width..(y + 1) * self.width];
            row.reverse();
        }
        out
    }
}

/// Stack of 2D slices: slice-major, then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3D {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3D {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != depth * height * width {
            return Err(TensorError::LengthMismatch {
                expected: depth * height * width,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::ValueOutOfRange { index });
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
            data: vec![0.0; depth * height * width],
        }
    }

    /// Stack existing planes; all must share dimensions.
    pub fn from_slices(slices: &[Tensor2D]) -> Result<Self, TensorError> {
        let first = slices.first().ok_or(TensorError::DimMismatch)?;
        let mut data = Vec::with_capacity(slices.len() * first.data.len());
        for s in slices {
            if !s.same_dims(first) {
                return Err(TensorError::DimMismatch);
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(slices.len(), first.height, first.width, data)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, index: usize) -> Result<Tensor2D, TensorError> {
        if index >= self.depth {
            return Err(TensorError::SliceOutOfRange {
                index,
                depth: self.depth,
            });
        }
        let plane = self.height * self.width;
        Ok(Tensor2D {
            height: self.height,
            width: self.width,
            data: self.data[index * plane..(index + 1) * plane].to_vec(),
        })
    }

    pub fn slice_data(&self, index: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[index * plane..(index + 1) * plane]
    }
}

/// Per-pixel probability map in [0, 1]: the weak soft label.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(Tensor2D);

impl SoftMask {
    pub fn new(height: usize, width: usize, probs: Vec<f32>) -> Result<Self, TensorError> {
        if let Some(index) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(TensorError::ValueOutOfRange { index });
        }
        Ok(Self(Tensor2D::new(height, width, probs)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor2D::zeros(height, width))
    }

    pub fn plane(&self) -> &Tensor2D {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn probs(&self) -> &[f32] {
        self.0.data()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.get(y, x)
    }

    /// Hard mask: probability strictly greater than the threshold becomes
    /// 1 (an exactly ambivalent pixel stays negative).
    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.0.height,
            width: self.0.width,
            values: self.0.data.iter().map(|&p| u8::from(p > threshold)).collect(),
        }
    }

    pub fn mirror_horizontal(&self) -> SoftMask {
        SoftMask(self.0.mirror_horizontal())
    }
}

/// Hard {0,1} mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, TensorError> {
        if values.len() != height * width {
            return Err(TensorError::LengthMismatch {
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|&v| v > 1) {
            return Err(TensorError::ValueOutOfRange { index });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.values[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Lossless float view, for file storage.
    pub fn to_tensor(&self) -> Tensor2D {
        Tensor2D {
            height: self.height,
            width: self.width,
            data: self.values.iter().map(|&v| f32::from(v)).collect(),
        }
    }

    /// Inverse of [`BinaryMask::to_tensor`]; values must be exactly 0.0 or 1.0.
    pub fn from_tensor(t: &Tensor2D) -> Result<Self, TensorError> {
        let mut values = Vec::with_capacity(t.data.len());
        for (index, &v) in t.data.iter().enumerate() {
            if v == 0.0 {
                values.push(0);
            } else if v == 1.0 {
                values.push(1);
            } else {
                return Err(TensorError::ValueOutOfRange { index });
            }
        }
        Ok(Self {
            height: t.height,
            width: t.width,
            values,
        })
    }

    pub fn mirror_horizontal(&self) -> BinaryMask {
        let mut out = self.clone();
        for y in 0..self.height {
            out.values[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }
}

/// Post-sigmoid model output, one probability per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PredMap(Tensor2D);

impl PredMap {
    pub fn new(height: usize, width: usize, probs: Vec<f32>) -> Result<Self, TensorError> {
        if let Some(index) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(TensorError::ValueOutOfRange { index });
        }
        Ok(Self(Tensor2D::new(height, width, probs)?))
    }

    pub fn plane(&self) -> &Tensor2D {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn probs(&self) -> &[f32] {
        self.0.data()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.get(y, x)
    }

    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.0.height,
            width: self.0.width,
            values: self.0.data.iter().map(|&p| u8::from(p > threshold)).collect(),
        }
    }
}

/// One training sample: a 3-slice input stack with its labels.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub volume_id: String,
    pub slice_index: usize,
    /// Three consecutive intensity slices (2.5D input).
    pub input: Tensor3D,
    /// Weak soft label for the center slice.
    pub soft: SoftMask,
    /// Hard ground truth for the center slice (absent on weak-only splits).
    pub gt: Option<BinaryMask>,
    pub bone: BinaryMask,
}

impl SampleRecord {
    /// All planes must share the center slice's height/width and the input
    /// must have exactly 3 slices.
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input.depth() != 3 {
            return Err(TensorError::DimMismatch);
        }
        let (h, w) = (self.input.height(), self.input.width());
        let soft_ok = self.soft.height() == h && self.soft.width() == w;
        let bone_ok = self.bone.height() == h && self.bone.width() == w;
        let gt_ok = self
            .gt
            .as_ref()
            .is_none_or(|g| g.height() == h && g.width() == w);
        if soft_ok && bone_ok && gt_ok {
            Ok(())
        } else {
            Err(TensorError::DimMismatch)
        }
    }
}

/// Three consecutive slices (i-1, i, i+1) of `volume` as one stack; at the
/// first/last slice the missing neighbor is replaced by slice `i` itself.
pub fn stack_25d(volume: &Tensor3D, slice_index: usize) -> Result<Tensor3D, TensorError> {
    if slice_index >= volume.depth() {
        return Err(TensorError::SliceOutOfRange {
            index: slice_index,
            depth: volume.depth(),
        });
    }
    let prev = if slice_index == 0 { slice_index } else { slice_index - 1 };
    let next = if slice_index + 1 == volume.depth() {
        slice_index
    } else {
        slice_index + 1
    };
    let plane = volume.height() * volume.width();
    let mut data = Vec::with_capacity(3 * plane);
    for idx in [prev, slice_index, next] {
        data.extend_from_slice(volume.slice_data(idx));
    }
    Tensor3D::new(3, volume.height(), volume.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(depth: usize, h: usize, w: usize) -> Tensor3D {
        // slice i filled with the constant i
        let data: Vec<f32> = (0..depth)
            .flat_map(|i| core::iter::repeat(i as f32).take(h * w))
            .collect();
        Tensor3D::new(depth, h, w, data).unwrap()
    }

    #[test]
    fn stack_interior_uses_neighbors() {
        let vol = ramp_volume(12, 4, 4);
        let stack = stack_25d(&vol, 5).unwrap();
        assert_eq!(stack.depth(), 3);
        assert_eq!(stack.slice_data(0)[0], 4.0);
        assert_eq!(stack.slice_data(1)[0], 5.0);
        assert_eq!(stack.slice_data(2)[0], 6.0);
    }

    #[test]
    fn stack_first_slice_duplicates_center() {
        let vol = ramp_volume(12, 4, 4);
        let stack = stack_25d(&vol, 0).unwrap();
        assert_eq!(stack.slice_data(0)[0], 0.0);
        assert_eq!(stack.slice_data(1)[0], 0.0);
        assert_eq!(stack.slice_data(2)[0], 1.0);
    }

    #[test]
    fn stack_last_slice_duplicates_center() {
        let vol = ramp_volume(12, 4, 4);
        let stack = stack_25d(&vol, 11).unwrap();
        assert_eq!(stack.slice_data(0)[0], 10.0);
        assert_eq!(stack.slice_data(1)[0], 11.0);
        assert_eq!(stack.slice_data(2)[0], 11.0);
    }

    #[test]
    fn stack_single_slice_volume() {
        let vol = ramp_volume(1, 4, 4);
        let stack = stack_25d(&vol, 0).unwrap();
        assert_eq!(stack.depth(), 3);
        assert!(stack.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_rejects_out_of_range_index() {
        let vol = ramp_volume(3, 4, 4);
        assert!(matches!(
            stack_25d(&vol, 3),
            Err(TensorError::SliceOutOfRange { .. })
        ));
    }

    #[test]
    fn stack_keeps_parent_spatial_dims() {
        let vol = ramp_volume(5, 7, 9);
        for i in 0..5 {
            let stack = stack_25d(&vol, i).unwrap();
            assert_eq!((stack.depth(), stack.height(), stack.width()), (3, 7, 9));
        }
    }

    #[test]
    fn tensor_rejects_nan() {
        assert!(matches!(
            Tensor2D::new(1, 2, alloc::vec![0.0, f32::NAN]),
            Err(TensorError::ValueOutOfRange { index: 1 })
        ));
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(matches!(
            Tensor2D::new(2, 2, alloc::vec![0.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn soft_mask_rejects_out_of_unit_interval() {
        assert!(SoftMask::new(1, 2, alloc::vec![0.5, 1.5]).is_err());
        assert!(SoftMask::new(1, 2, alloc::vec![0.5, -0.1]).is_err());
        assert!(SoftMask::new(1, 2, alloc::vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn binary_mask_roundtrips_through_tensor() {
        let mask = BinaryMask::new(2, 2, alloc::vec![0, 1, 1, 0]).unwrap();
        let back = BinaryMask::from_tensor(&mask.to_tensor()).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn binary_mask_from_tensor_rejects_fractional() {
        let t = Tensor2D::new(1, 2, alloc::vec![0.0, 0.5]).unwrap();
        assert!(BinaryMask::from_tensor(&t).is_err());
    }

    #[test]
    fn mirror_horizontal_is_involutive() {
        let t = Tensor2D::new(2, 3, alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = t.mirror_horizontal();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 2), 4.0);
        assert_eq!(m.mirror_horizontal(), t);
    }
}
