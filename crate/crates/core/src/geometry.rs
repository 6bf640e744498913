//! Pinhole camera model, rigid-body transforms and differentiable view
//! synthesis.
//!
//! Pixel convention: pixel centres sit at integer coordinates, origin at the
//! top-left pixel, `u` grows to the right and `v` downwards. Every module that
//! builds or reads pixel coordinates (losses, metrics, synthetic data) follows
//! this convention.

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Projected depth below which a point counts as behind the camera.
pub const MIN_PROJECTED_Z: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Build from parameters expressed as fractions of the image size.
    pub fn from_normalized(n: [f64; 4], width: usize, height: usize) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        Self::new(n[0] * w, n[1] * h, n[2] * w, n[3] * h, width, height)
    }

    pub fn normalized(&self) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [self.fx / w, self.fy / h, self.cx / w, self.cy / h]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            bail!(
                Domain,
                "focal lengths must be positive (fx={}, fy={})",
                self.fx,
                self.fy
            );
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            bail!(Domain, "principal point must be finite");
        }
        if self.width == 0 || self.height == 0 {
            bail!(Domain, "image size must be non-zero");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Result<Matrix3<f64>> {
        intrinsics_to_matrix(self)
    }

    /// Project a camera-frame point. `None` when the point is behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= MIN_PROJECTED_Z {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// `[fx, fy, cx, cy]` as a `(1, 4)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            vec![self.fx, self.fy, self.cx, self.cy],
            (1, 4),
            device,
        )?)
    }
}

/// `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
pub fn intrinsics_to_matrix(k: &Intrinsics) -> Result<Matrix3<f64>> {
    k.validate()?;
    Ok(Matrix3::new(
        k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0,
    ))
}

/// Rescale intrinsics for an image resized by `(sx, sy)`.
pub fn scale_intrinsics(k: &Intrinsics, sx: f64, sy: f64) -> Result<Intrinsics> {
    if !(sx > 0.0 && sy > 0.0) {
        bail!(Domain, "scale factors must be positive (sx={sx}, sy={sy})");
    }
    Intrinsics::new(
        k.fx * sx,
        k.fy * sy,
        k.cx * sx,
        k.cy * sy,
        ((k.width as f64) * sx).round().max(1.0) as usize,
        ((k.height as f64) * sy).round().max(1.0) as usize,
    )
}

/// Six-degree-of-freedom relative motion: axis-angle rotation (radians) and
/// translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseVector {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl PoseVector {
    pub fn is_finite(&self) -> bool {
        self.translation
            .iter()
            .chain(self.rotation.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Orthonormality and handedness within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rrt = self.rotation * self.rotation.transpose();
        (rrt - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Rodrigues' formula for an axis-angle vector.
pub fn axis_angle_to_matrix(r: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(r);
    let theta = v.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(&v);
    }
    let k = skew(&(v / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map of a pose vector. With `invert`, the inverse transform is
/// returned, which is what the backward pair of a triplet needs.
pub fn pose_vector_to_transform(v: &PoseVector, invert: bool) -> RigidTransform {
    let t = RigidTransform {
        rotation: axis_angle_to_matrix(v.rotation),
        translation: Vector3::from(v.translation),
    };
    if invert {
        t.inverse()
    } else {
        t
    }
}

/// Homogeneous pixel coordinates of an `H x W` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    /// Homogeneous coordinate of the pixel stored at index `(v, u)`.
    pub fn at(&self, v: usize, u: usize) -> [f64; 3] {
        [u as f64, v as f64, 1.0]
    }

    /// `(3, H*W)` tensor in row-major pixel order.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let n = self.height * self.width;
        let mut data = vec![0.0f64; 3 * n];
        for v in 0..self.height {
            for u in 0..self.width {
                let i = v * self.width + u;
                data[i] = u as f64;
                data[n + i] = v as f64;
                data[2 * n + i] = 1.0;
            }
        }
        Ok(Tensor::from_vec(data, (3, n), device)?)
    }
}

// ---------------------------------------------------------------------------
// Batched, differentiable tensor versions.
// ---------------------------------------------------------------------------

/// Batched rigid transforms: rotation `(B, 3, 3)` and translation `(B, 3, 1)`.
#[derive(Debug, Clone)]
pub struct BatchTransform {
    pub rotation: Tensor,
    pub translation: Tensor,
}

impl BatchTransform {
    pub fn from_transforms(ts: &[RigidTransform], device: &Device) -> Result<Self> {
        let b = ts.len();
        let mut r = Vec::with_capacity(b * 9);
        let mut t = Vec::with_capacity(b * 3);
        for x in ts {
            for i in 0..3 {
                for j in 0..3 {
                    r.push(x.rotation[(i, j)]);
                }
                t.push(x.translation[i]);
            }
        }
        Ok(Self {
            rotation: Tensor::from_vec(r, (b, 3, 3), device)?,
            translation: Tensor::from_vec(t, (b, 3, 1), device)?,
        })
    }

    pub fn identity(batch: usize, device: &Device) -> Result<Self> {
        Self::from_transforms(&vec![RigidTransform::identity(); batch], device)
    }

    /// Read back the `i`-th transform.
    pub fn get(&self, i: usize) -> Result<RigidTransform> {
        let r = self
            .rotation
            .get(i)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        let t = self
            .translation
            .get(i)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        Ok(RigidTransform {
            rotation: Matrix3::from_fn(|a, b| r[a][b]),
            translation: Vector3::new(t[0], t[1], t[2]),
        })
    }
}

/// Rodrigues' formula on a `(B, 3)` batch of axis-angle vectors.
pub fn axis_angle_to_rotation(r: &Tensor) -> Result<Tensor> {
    let b = r.dim(0)?;
    let angle = (r.sqr()?.sum_keepdim(1)? + 1e-14)?.sqrt()?; // (B,1)
    let axis = r.broadcast_div(&angle)?;
    let (x, y, z) = (
        axis.narrow(1, 0, 1)?,
        axis.narrow(1, 1, 1)?,
        axis.narrow(1, 2, 1)?,
    );
    let c = angle.cos()?;
    let s = angle.sin()?;
    let cc = c.affine(-1.0, 1.0)?;
    let entry = |a: &Tensor, bb: &Tensor| -> Result<Tensor> { Ok((a * bb)?.mul(&cc)?) };
    let xx = entry(&x, &x)?;
    let yy = entry(&y, &y)?;
    let zz = entry(&z, &z)?;
    let xy = entry(&x, &y)?;
    let yz = entry(&y, &z)?;
    let zx = entry(&z, &x)?;
    let (xs, ys, zs) = ((&x * &s)?, (&y * &s)?, (&z * &s)?);
    let m = Tensor::cat(
        &[
            (&xx + &c)?,
            (&xy - &zs)?,
            (&zx + &ys)?,
            (&xy + &zs)?,
            (&yy + &c)?,
            (&yz - &xs)?,
            (&zx - &ys)?,
            (&yz + &xs)?,
            (&zz + &c)?,
        ],
        1,
    )?;
    Ok(m.reshape((b, 3, 3))?)
}

/// Batched version of [`pose_vector_to_transform`] from `(B, 3)` axis-angle and
/// `(B, 3)` translation tensors.
pub fn pose_to_transform(
    axis_angle: &Tensor,
    translation: &Tensor,
    invert: bool,
) -> Result<BatchTransform> {
    let r = axis_angle_to_rotation(axis_angle)?;
    let t = translation.unsqueeze(2)?;
    if invert {
        let rt = r.transpose(1, 2)?.contiguous()?;
        let ti = rt.matmul(&t)?.neg()?;
        Ok(BatchTransform {
            rotation: rt,
            translation: ti,
        })
    } else {
        Ok(BatchTransform {
            rotation: r,
            translation: t,
        })
    }
}

/// `(B, 4)` intrinsics `[fx, fy, cx, cy]` to `(K, K^-1)`, each `(B, 3, 3)`.
pub fn intrinsics_matrices(k: &Tensor) -> Result<(Tensor, Tensor)> {
    let b = k.dim(0)?;
    let fx = k.narrow(1, 0, 1)?;
    let fy = k.narrow(1, 1, 1)?;
    let cx = k.narrow(1, 2, 1)?;
    let cy = k.narrow(1, 3, 1)?;
    let zero = fx.zeros_like()?;
    let one = fx.ones_like()?;
    let km = Tensor::cat(&[&fx, &zero, &cx, &zero, &fy, &cy, &zero, &zero, &one], 1)?
        .reshape((b, 3, 3))?;
    let ifx = fx.recip()?;
    let ify = fy.recip()?;
    let kinv = Tensor::cat(
        &[
            ifx.clone(),
            zero.clone(),
            (cx.neg()? * &ifx)?,
            zero.clone(),
            ify.clone(),
            (cy.neg()? * &ify)?,
            zero.clone(),
            zero,
            one,
        ],
        1,
    )?
    .reshape((b, 3, 3))?;
    Ok((km, kinv))
}

/// Source-frame sampling coordinates for every target pixel.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `(B, H*W)` horizontal coordinate, float64.
    pub u: Tensor,
    /// `(B, H*W)` vertical coordinate, float64.
    pub v: Tensor,
    /// `(B, H*W)` projected depth in the source camera.
    pub z: Tensor,
}

/// `p_s ~ K R D(p_t) K^-1 p_t + K t` for every target pixel.
///
/// Coordinates are computed in float64 regardless of the input precision.
pub fn project_pixels(
    depth: &Tensor,
    transform: &BatchTransform,
    intrinsics: &Tensor,
) -> Result<Projection> {
    let (b, _, h, w) = depth.dims4()?;
    let dev = depth.device();
    let depth = depth.to_dtype(DType::F64)?;
    let k = intrinsics.to_dtype(DType::F64)?;
    let rot = transform.rotation.to_dtype(DType::F64)?;
    let trans = transform.translation.to_dtype(DType::F64)?;
    let (km, kinv) = intrinsics_matrices(&k)?;
    let grid = PixelGrid::new(h, w).to_tensor(dev)?.unsqueeze(0)?; // (1,3,N)
    let rays = kinv.broadcast_matmul(&grid)?; // (B,3,N)
    let cam = rays.broadcast_mul(&depth.reshape((b, 1, h * w))?)?;
    let p = km.matmul(&rot.matmul(&cam)?.broadcast_add(&trans)?)?;
    let z = p.narrow(1, 2, 1)?.squeeze(1)?;
    let zc = z.maximum(MIN_PROJECTED_Z)?;
    let u = (p.narrow(1, 0, 1)?.squeeze(1)? / &zc)?;
    let v = (p.narrow(1, 1, 1)?.squeeze(1)? / &zc)?;
    Ok(Projection { u, v, z })
}

/// Output of [`synthesize_view`].
#[derive(Debug, Clone)]
pub struct ViewSynthesis {
    /// `(B, C, H, W)` source image resampled into the target view.
    pub image: Tensor,
    /// `(B, 1, H, W)` 1 where the sample fell inside the source frame and in
    /// front of the camera, 0 elsewhere. Detached.
    pub valid: Tensor,
    pub projection: Projection,
}

/// Warp `source` into the target view using the target depth, the
/// target-to-source transform and the intrinsics `(B, 4)`.
///
/// Bilinear sampling with zero padding; differentiable with respect to
/// the source image, the depth, the transform and the intrinsics.
pub fn synthesize_view(
    source: &Tensor,
    depth: &Tensor,
    transform: &BatchTransform,
    intrinsics: &Tensor,
) -> Result<ViewSynthesis> {
    let (b, c, h, w) = source.dims4()?;
    let (db, dc, dh, dw) = depth.dims4()?;
    if (db, dc, dh, dw) != (b, 1, h, w) {
        bail!(
            Shape,
            "depth {:?} does not match source {:?}",
            depth.dims(),
            source.dims()
        );
    }
    let min_depth = depth.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min_depth > 0.0) {
        bail!(
            Domain,
            "depth must be positive everywhere (min {min_depth})"
        );
    }
    let proj = project_pixels(depth, transform, intrinsics)?;
    let (image, inside) = bilinear_sample(source, &proj.u, &proj.v)?;
    let in_front = proj.z.gt(MIN_PROJECTED_Z)?.to_dtype(source.dtype())?;
    let valid = (inside * in_front)?.reshape((b, 1, h, w))?.detach();
    Ok(ViewSynthesis {
        image: image.reshape((b, c, h, w))?,
        valid,
        projection: proj,
    })
}

/// Bilinear lookup of `image (B, C, H, W)` at float64 coordinates `(B, N)`.
/// Returns the `(B, C, N)` samples and a detached `(B, N)` in-frame indicator.
pub fn bilinear_sample(image: &Tensor, u: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = image.dims4()?;
    let n = u.dim(1)?;
    let dtype = image.dtype();
    let flat = image.reshape((b, c, h * w))?;
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    // Far-away coordinates only matter for masking; keep floor() well-defined.
    let u = u.clamp(-2.0, wf + 2.0)?;
    let v = v.clamp(-2.0, hf + 2.0)?;
    let x0 = u.detach().floor()?;
    let y0 = v.detach().floor()?;
    let ax = (&u - &x0)?; // weight of x0 + 1
    let ay = (&v - &y0)?;
    let corners = [
        (0.0, 0.0, ax.affine(-1.0, 1.0)?, ay.affine(-1.0, 1.0)?),
        (1.0, 0.0, ax.clone(), ay.affine(-1.0, 1.0)?),
        (0.0, 1.0, ax.affine(-1.0, 1.0)?, ay.clone()),
        (1.0, 1.0, ax, ay),
    ];
    let mut acc: Option<Tensor> = None;
    for (dx, dy, wx, wy) in corners {
        let xi = (&x0 + dx)?;
        let yi = (&y0 + dy)?;
        let inb = xi
            .ge(0.0)?
            .mul(&xi.le(wf)?)?
            .mul(&yi.ge(0.0)?)?
            .mul(&yi.le(hf)?)?
            .to_dtype(DType::F64)?;
        let idx = ((yi.clamp(0.0, hf)? * (w as f64))? + xi.clamp(0.0, wf)?)?
            .to_dtype(DType::U32)?
            .unsqueeze(1)?
            .broadcast_as((b, c, n))?
            .contiguous()?;
        let weight = (wx * wy)?.mul(&inb)?.to_dtype(dtype)?.unsqueeze(1)?;
        let term = flat.gather(&idx, 2)?.broadcast_mul(&weight)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    let inside = u
        .ge(0.0)?
        .mul(&u.le(wf)?)?
        .mul(&v.ge(0.0)?)?
        .mul(&v.le(hf)?)?
        .to_dtype(dtype)?;
    Ok((acc.expect("four corners"), inside))
}
