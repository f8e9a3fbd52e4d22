//! File helpers shared by the dataset, checkpoint and report writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `round((x + 1) / 2 · 255)` clamped to a byte.
pub fn to_byte(x: f32) -> u8 {
    (((x as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) of NHWC images in `[-1, 1]` laid out as `rows × cols`
/// tiles, image `r * cols + c` at row `r`, column `c`. Grayscale images are
/// replicated over the three channels.
pub fn ppm_grid(images: &crate::tensor::Tensor<f32>, rows: usize, cols: usize) -> crate::error::Result<Vec<u8>> {
    use crate::error::Error;
    let s = images.shape();
    if s.len() != 4 || (s[3] != 1 && s[3] != 3) || s[0] != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("cannot tile {s:?} into {rows}×{cols}")));
    }
    let (h, w, ch) = (s[1], s[2], s[3]);
    let (gw, gh) = (cols * w, rows * h);
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    let d = images.data();
    for y in 0..gh {
        for x in 0..gw {
            let (r, c) = (y / h, x / w);
            let base = (((r * cols + c) * h + y % h) * w + x % w) * ch;
            for k in 0..3 {
                out.push(to_byte(d[base + if ch == 3 { k } else { 0 }]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pixel_mapping() {
        assert_eq!((to_byte(-1.0), to_byte(0.0), to_byte(1.0)), (0, 128, 255));
        assert_eq!((to_byte(-3.0), to_byte(2.0)), (0, 255));
    }

    #[test]
    fn grid_layout() {
        // four 1×1 gray images in a 2×2 grid
        let t = Tensor::from_f64(&[4, 1, 1, 1], &[-1.0, 1.0, 0.0, -1.0]).unwrap();
        let g = ppm_grid(&t, 2, 2).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&g[..header.len()], header);
        assert_eq!(&g[header.len()..], &[0, 0, 0, 255, 255, 255, 128, 128, 128, 0, 0, 0]);
        assert!(ppm_grid(&t, 3, 2).is_err());
    }
}
