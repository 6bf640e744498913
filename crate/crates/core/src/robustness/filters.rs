//! Small image-processing kernels on single-channel `Array2<f32>` planes.

use ndarray::{Array2, Array3, Axis};

/// Index into `0..n` after reflecting without repeating the edge (`dcb|abcd|cba`).
pub fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Index after reflecting with the edge repeated (`dcba|abcd|dcba`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

pub fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Normalised 1-D Gaussian taps covering `truncate` standard deviations.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f32> {
    let r = (truncate * sigma + 0.5).floor().max(0.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable convolution with the same 1-D kernel along both axes.
pub fn separable(plane: &Array2<f32>, k: &[f32], border: fn(isize, usize) -> usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (k.len() / 2) as isize;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * plane[[y, border(x as isize + j as isize - r, w)]];
            }
            tmp[[y, x]] = s;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * tmp[[border(y as isize + j as isize - r, h), x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

pub fn gaussian_blur(plane: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    separable(plane, &gaussian_kernel(sigma, 4.0), clamp_index)
}

/// Correlation with a centred 2-D kernel and reflect-101 borders.
pub fn filter2d(plane: &Array2<f32>, kernel: &Array2<f32>) -> Array2<f32> {
    let (h, w) = plane.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps: Vec<(isize, isize, f32)> = kernel
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((i, j), &v)| (i as isize - ry, j as isize - rx, v))
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .map(|&(dy, dx, v)| {
                v * plane[[
                    reflect101(y as isize + dy, h),
                    reflect101(x as isize + dx, w),
                ]]
            })
            .sum()
    })
}

/// Bilinear lookup at fractional `(y, x)` with a custom border rule.
pub fn sample(plane: &Array2<f32>, y: f64, x: f64, border: fn(isize, usize) -> usize) -> f32 {
    let (h, w) = plane.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| plane[[border(yy, h), border(xx, w)]];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
}

/// Zoom about the centre by `zoom >= 1`, keeping the original size.
pub fn clipped_zoom(plane: &Array2<f32>, zoom: f64) -> Array2<f32> {
    let (h, w) = plane.dim();
    let ch = (h as f64 / zoom).ceil();
    let cw = (w as f64 / zoom).ceil();
    let top = ((h as f64 - ch) / 2.0).floor();
    let left = ((w as f64 - cw) / 2.0).floor();
    // Output pixel i of the zoomed crop maps back to crop coordinate
    // i * (crop - 1) / (crop * zoom - 1); the zoomed crop is centre-trimmed.
    let (zh, zw) = ((ch * zoom).round(), (cw * zoom).round());
    let (th, tw) = (
        ((zh - h as f64) / 2.0).floor(),
        ((zw - w as f64) / 2.0).floor(),
    );
    let sy = if zh > 1.0 {
        (ch - 1.0) / (zh - 1.0)
    } else {
        0.0
    };
    let sx = if zw > 1.0 {
        (cw - 1.0) / (zw - 1.0)
    } else {
        0.0
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let yy = top + (y as f64 + th) * sy;
        let xx = left + (x as f64 + tw) * sx;
        sample(plane, yy, xx, clamp_index)
    })
}

/// Rotate by 180 degrees.
pub fn rot180(plane: &Array2<f32>) -> Array2<f32> {
    plane.slice(ndarray::s![..;-1, ..;-1]).to_owned()
}

/// Apply `f` to each channel of a `(C, H, W)` image.
pub fn per_channel(img: &Array3<f32>, f: impl Fn(&Array2<f32>) -> Array2<f32>) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = img.axis_iter(Axis(0)).map(|p| f(&p.to_owned())).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal plane shapes")
}

/// Disk kernel of `radius` smoothed by a small Gaussian.
pub fn disk_kernel(radius: f64, alias_blur: f64) -> Array2<f32> {
    let (half, ksize) = if radius <= 8.0 {
        (8isize, 3usize)
    } else {
        (radius as isize, 5)
    };
    let n = (2 * half + 1) as usize;
    let mut k = Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 - half as f64, j as f64 - half as f64);
        if x * x + y * y <= radius * radius {
            1.0f32
        } else {
            0.0
        }
    });
    let s = k.sum();
    k /= s;
    // Fixed-size Gaussian smoothing of the kernel itself, like an aliasing filter.
    let g = {
        let r = (ksize / 2) as isize;
        let mut v: Vec<f64> = (-r..=r)
            .map(|x| (-(x * x) as f64 / (2.0 * alias_blur * alias_blur)).exp())
            .collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v.into_iter().map(|x| x as f32).collect::<Vec<_>>()
    };
    separable(&k, &g, reflect101)
}

/// Linear motion kernel: Gaussian-weighted taps along a ray at `angle_deg`,
/// starting at the pixel itself.
pub fn motion_kernel(radius: f64, sigma: f64, angle_deg: f64) -> Vec<(f64, f64, f32)> {
    let n = (radius.max(1.0).ceil() as usize) + 1;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut taps: Vec<(f64, f64, f32)> = (0..n)
        .map(|t| {
            let t = t as f64;
            (
                t * s,
                t * c,
                (-(t * t) / (2.0 * sigma * sigma)).exp() as f32,
            )
        })
        .collect();
    let total: f32 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= total);
    taps
}

pub fn motion_blur(plane: &Array2<f32>, taps: &[(f64, f64, f32)]) -> Array2<f32> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .map(|&(dy, dx, wt)| wt * sample(plane, y as f64 - dy, x as f64 - dx, clamp_index))
            .sum()
    })
}
