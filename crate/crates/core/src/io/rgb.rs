//! 8-bit RGB output as binary PPM or PNG.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::image::RgbImage;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb8(img: &RgbImage) -> Vec<u8> {
    img.data.iter().flat_map(|p| p.map(quantize)).collect()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(rgb8(img));
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Shape(format!("png header: {e}")))?;
        w.write_image_data(&rgb8(img))
            .map_err(|e| Error::Shape(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Picks PNG or PPM from the file extension.
pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(img),
        Some("png") => encode_png(img)?,
        _ => return Err(Error::Config(format!("{}: use a .png or .ppm extension", path.display()))),
    };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    #[test]
    fn ppm_bytes() {
        let img = Image::from_vec(2, 1, vec![[0.0, 1.0, 0.5], [2.0, -1.0, 0.2]]).unwrap();
        let mut want = b"P6\n2 1\n255\n".to_vec();
        want.extend([0, 255, 128, 255, 0, 51]);
        assert_eq!(encode_ppm(&img), want);
        let png = encode_png(&img).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }
}
