//! Perceptual colour map for disparity previews.

use ndarray::Array2;

/// Control points of a magma-like ramp, dark to bright.
const STOPS: [[f32; 3]; 9] = [
    [0.001, 0.000, 0.014],
    [0.078, 0.054, 0.212],
    [0.232, 0.060, 0.437],
    [0.390, 0.100, 0.502],
    [0.550, 0.161, 0.506],
    [0.716, 0.215, 0.475],
    [0.868, 0.288, 0.409],
    [0.967, 0.439, 0.360],
    [0.987, 0.991, 0.750],
];

fn ramp(t: f32) -> [f32; 3] {
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f32;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
}

/// RGB8 rendering of `map`, min-max normalised.
pub fn colorize(map: &Array2<f32>) -> image::RgbImage {
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = ramp((map[[y as usize, x as usize]] - lo) / span);
        image::Rgb(c.map(|v| (v * 255.0).round() as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ends_and_size() {
        let m = Array2::from_shape_fn((3, 5), |(_, x)| x as f32);
        let img = colorize(&m);
        assert_eq!(img.dimensions(), (5, 3));
        let dark = img.get_pixel(0, 0).0;
        let bright = img.get_pixel(4, 0).0;
        assert!(dark.iter().sum::<u8>() < bright.iter().map(|&v| v / 4).sum::<u8>());
    }
}
