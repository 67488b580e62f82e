//! Binary PGM (P5, maxval 255) export for grids and heatmaps.

use std::io::Write;
use std::path::Path;

/// Write an `h` x `w` grid of values in [0, 1] as a P5 image, quantized
/// linearly onto [0, 255]. Rows map to image rows.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> std::io::Result<()> {
    assert_eq!(values.len(), h * w, "value count must match extents");
    let mut buf = Vec::with_capacity(h * w + 32);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in values {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_quantization() {
        let dir = std::env::temp_dir().join("sept_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, 2, 3, &[0.0, 1.0, 0.5, 0.25, 0.75, 1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let expected_header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..expected_header.len()], expected_header);
        assert_eq!(&bytes[expected_header.len()..], &[0, 255, 128, 64, 191, 255]);
    }
}
