//! Path-based STF1 tensor IO over the core byte codec.

use std::fs;
use std::path::Path;

use noisyseg_core::stf;
use noisyseg_core::tensor::{Tensor2D, Tensor3D};

use crate::{AppError, AppResult};

pub fn write_tensor2d(path: &Path, t: &Tensor2D) -> AppResult<()> {
    fs::write(path, stf::encode_tensor2d(t))
        .map_err(|e| AppError::data(format!("writing {}: {e}", path.display())))
}

pub fn write_tensor3d(path: &Path, t: &Tensor3D) -> AppResult<()> {
    fs::write(path, stf::encode_tensor3d(t))
        .map_err(|e| AppError::data(format!("writing {}: {e}", path.display())))
}

pub fn read_tensor2d(path: &Path) -> AppResult<Tensor2D> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::data(format!("reading {}: {e}", path.display())))?;
    stf::decode_tensor2d(&bytes)
        .map_err(|e| AppError::data(format!("decoding {}: {e}", path.display())))
}

pub fn read_tensor3d(path: &Path) -> AppResult<Tensor3D> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::data(format!("reading {}: {e}", path.display())))?;
    stf::decode_tensor3d(&bytes)
        .map_err(|e| AppError::data(format!("decoding {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stf");
        let t = Tensor2D::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_tensor2d(&path, &t).unwrap();
        assert_eq!(read_tensor2d(&path).unwrap(), t);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = read_tensor2d(Path::new("/nonexistent/missing.stf")).unwrap_err();
        assert!(matches!(err, AppError::Data(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stf");
        std::fs::write(&path, b"XXXXgarbage").unwrap();
        assert!(matches!(read_tensor2d(&path).unwrap_err(), AppError::Data(_)));
    }
}
