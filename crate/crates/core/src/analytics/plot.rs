use image::{ImageBuffer, ImageFormat, Rgb, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("png encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("nothing to plot")]
    Empty,
}

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const PALETTE: [[u8; 3]; 8] = [
    [66, 133, 244],
    [219, 68, 55],
    [244, 180, 0],
    [15, 157, 88],
    [171, 71, 188],
    [0, 172, 193],
    [255, 112, 67],
    [158, 157, 36],
];

/// Unlabelled bar chart, one bar per value, bars scaled to the maximum.
pub fn bar_chart_png(values: &[f64], width: u32, height: u32) -> Result<Vec<u8>, PlotError> {
    if values.is_empty() || width < 16 || height < 16 {
        return Err(PlotError::Empty);
    }
    let mut img: RgbImage = ImageBuffer::from_pixel(width, height, BG);
    let margin = 8u32;
    let plot_w = width - 2 * margin;
    let plot_h = height - 2 * margin;
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let slot = plot_w as f64 / values.len() as f64;
    for (i, v) in values.iter().enumerate() {
        let frac = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let bar_h = (frac * plot_h as f64).round() as u32;
        let x0 = margin + (i as f64 * slot + slot * 0.15) as u32;
        let x1 = margin + ((i + 1) as f64 * slot - slot * 0.15) as u32;
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for x in x0..x1.max(x0 + 1).min(width - margin) {
            for y in (height - margin - bar_h)..(height - margin) {
                img.put_pixel(x, y, color);
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, AXIS);
    }
    for y in margin..=height - margin {
        img.put_pixel(margin, y, AXIS);
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_png() {
        let png = bar_chart_png(&[3.0, 1.0, 0.0, 2.0], 320, 200).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (320, 200));
        // tallest bar reaches near the top margin
        assert_ne!(*img.get_pixel(40, 10), BG);
        assert!(bar_chart_png(&[], 320, 200).is_err());
    }
}
