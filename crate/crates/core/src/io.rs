//! Image and label-map files.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::eval::LabelMap;

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| image_error(path, e))
}

/// Loads a PNG or PPM as 8-bit RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(open(path.as_ref())?.to_rgb8())
}

/// Loads a single-channel 8-bit label image.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = match open(path)? {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(image_error(
                path,
                format!("label maps must be 8-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    LabelMap::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(u32::from).collect(),
    )
}

/// Writes labels as an 8-bit grayscale PNG.
pub fn save_labels(path: impl AsRef<Path>, height: usize, width: usize, labels: &[u32]) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != height * width {
        return Err(Error::Shape(format!(
            "{} labels for a {height}x{width} map",
            labels.len()
        )));
    }
    let pixels = labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in an 8-bit PNG")))
        })
        .collect::<Result<Vec<u8>>>()?;
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape("label buffer size".into()))?;
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| image_error(path, e))?;
    write_atomic(path, bytes.get_ref())
}

pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| image_error(path, e))?;
    write_atomic(path, bytes.get_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let labels = vec![0, 1, 2, 255, 7, 3];
        save_labels(&p, 2, 3, &labels).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = load_labels(&p).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        assert_eq!(back.labels, labels);
        save_labels(&p, 2, 3, &labels).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn wide_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        assert!(matches!(save_labels(&p, 1, 1, &[300]), Err(Error::Data(_))));
        assert!(!p.exists());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_rgb("/nonexistent/x.png").unwrap_err();
        assert_eq!(err.category(), "io");
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn rgb_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_rgb(&p, &RgbImage::new(2, 2)).unwrap();
        assert_eq!(load_labels(&p).unwrap_err().category(), "image");
        assert_eq!(load_rgb(&p).unwrap().dimensions(), (2, 2));
    }
}
