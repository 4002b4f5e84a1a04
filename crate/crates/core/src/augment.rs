//! Seeded differentiable augmentation.
//!
//! Every parameter (shift, flip, scale factors, cutout box) is drawn from the
//! augmentation stream alone, so the same seed applies the same transform to
//! real images during sampling and to synthetic images during optimization.
//! All ops are linear in the pixel values, which makes the backward pass the
//! exact adjoint of the forward map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugOp {
    /// Zero-pad then shift by a uniform sub-pixel offset in `[-max_shift, max_shift]`
    /// along each axis, resampled bilinearly.
    Crop { max_shift: f64 },
    /// Mirror left-right with probability `prob`.
    Flip { prob: f64 },
    /// Multiply all pixels by a factor drawn from `[min, max]`.
    Brightness { min: f64, max: f64 },
    /// Scale each pixel's deviation from its channel mean by a factor in `[min, max]`.
    Saturation { min: f64, max: f64 },
    /// Zero a `size x size` square at a uniformly drawn position.
    Cutout { size: usize },
}

impl AugOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugOp::Crop { .. } => "crop",
            AugOp::Flip { .. } => "flip",
            AugOp::Brightness { .. } => "brightness",
            AugOp::Saturation { .. } => "saturation",
            AugOp::Cutout { .. } => "cutout",
        }
    }
}

/// Parameters drawn for one op.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugParam {
    Shift { dy: f64, dx: f64 },
    Flip(bool),
    Brightness(f64),
    Saturation(f64),
    Cutout { y0: usize, x0: usize, size: usize },
    Skipped,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub ops: Vec<AugOp>,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { ops: Vec::new() }
    }

    /// Crop, flip, brightness, saturation and cutout at modest magnitudes.
    pub fn desk_default() -> Self {
        Self {
            ops: vec![
                AugOp::Crop { max_shift: 1.5 },
                AugOp::Flip { prob: 0.5 },
                AugOp::Brightness { min: 0.8, max: 1.2 },
                AugOp::Saturation { min: 0.7, max: 1.3 },
                AugOp::Cutout { size: 4 },
            ],
        }
    }

    /// Parses a comma-separated op list such as `crop:1.5,flip:0.5,brightness:0.8:1.2`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let mut parts = item.split(':');
            let name = parts.next().unwrap_or_default();
            let nums = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::Validation(format!("bad number {p:?} in augment op {item:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let arity = |n: usize| -> Result<()> {
                ensure!(nums.len() == n, "augment op {name} takes {n} values, got {}", nums.len());
                Ok(())
            };
            let op = match name {
                "crop" => {
                    arity(1)?;
                    AugOp::Crop { max_shift: nums[0] }
                }
                "flip" => {
                    arity(1)?;
                    AugOp::Flip { prob: nums[0] }
                }
                "brightness" => {
                    arity(2)?;
                    AugOp::Brightness {
                        min: nums[0],
                        max: nums[1],
                    }
                }
                "saturation" => {
                    arity(2)?;
                    AugOp::Saturation {
                        min: nums[0],
                        max: nums[1],
                    }
                }
                "cutout" => {
                    arity(1)?;
                    AugOp::Cutout {
                        size: nums[0] as usize,
                    }
                }
                other => return Err(Error::Validation(format!("unknown augment op {other:?}"))),
            };
            ops.push(op);
        }
        let policy = Self { ops };
        policy.validate()?;
        Ok(policy)
    }

    /// Inverse of [`AugmentPolicy::parse`].
    pub fn to_spec_string(&self) -> String {
        self.ops
            .iter()
            .map(|op| match *op {
                AugOp::Crop { max_shift } => format!("crop:{max_shift:?}"),
                AugOp::Flip { prob } => format!("flip:{prob:?}"),
                AugOp::Brightness { min, max } => format!("brightness:{min:?}:{max:?}"),
                AugOp::Saturation { min, max } => format!("saturation:{min:?}:{max:?}"),
                AugOp::Cutout { size } => format!("cutout:{size}"),
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            match *op {
                AugOp::Crop { max_shift } => {
                    ensure!(max_shift >= 0.0 && max_shift.is_finite(), "crop shift must be >= 0")
                }
                AugOp::Flip { prob } => ensure!((0.0..=1.0).contains(&prob), "flip prob must be in [0, 1]"),
                AugOp::Brightness { min, max } | AugOp::Saturation { min, max } => ensure!(
                    min.is_finite() && max.is_finite() && min <= max && min >= 0.0,
                    "{} range [{min}, {max}] is invalid",
                    op.name()
                ),
                AugOp::Cutout { size } => ensure!(size > 0, "cutout size must be positive"),
            }
        }
        Ok(())
    }

    /// Ops that apply to images with `channels` channels; saturation is
    /// meaningless for grayscale and is dropped.
    pub fn effective_ops(&self, channels: usize) -> Vec<AugOp> {
        self.ops
            .iter()
            .copied()
            .filter(|op| channels > 1 || !matches!(op, AugOp::Saturation { .. }))
            .collect()
    }
}

/// Image geometry `(channels, height, width)`.
pub type ImageShape = (usize, usize, usize);

/// Draws the parameters of every op from `zeta`. Depends only on the policy,
/// the image geometry and the stream, never on pixel values.
pub fn sample_params(policy: &AugmentPolicy, zeta: &RngStream, shape: ImageShape) -> Vec<AugParam> {
    let (c, h, w) = shape;
    let mut rng = zeta.rng();
    policy
        .ops
        .iter()
        .map(|op| {
            // Every op consumes its draws even when inactive so that later
            // parameters do not depend on the channel count.
            let p = match *op {
                AugOp::Crop { max_shift } => AugParam::Shift {
                    dy: rng.random_range(-1.0..=1.0) * max_shift,
                    dx: rng.random_range(-1.0..=1.0) * max_shift,
                },
                AugOp::Flip { prob } => AugParam::Flip(rng.random::<f64>() < prob),
                AugOp::Brightness { min, max } => AugParam::Brightness(min + (max - min) * rng.random::<f64>()),
                AugOp::Saturation { min, max } => AugParam::Saturation(min + (max - min) * rng.random::<f64>()),
                AugOp::Cutout { size } => {
                    let cy = rng.random_range(0..h);
                    let cx = rng.random_range(0..w);
                    AugParam::Cutout {
                        y0: cy.saturating_sub(size / 2),
                        x0: cx.saturating_sub(size / 2),
                        size,
                    }
                }
            };
            if c == 1 && matches!(op, AugOp::Saturation { .. }) {
                AugParam::Skipped
            } else {
                p
            }
        })
        .collect()
}

fn check(policy: &AugmentPolicy, x: &[f64], shape: ImageShape) -> Result<()> {
    policy.validate()?;
    let (c, h, w) = shape;
    ensure!(
        x.len() == c * h * w,
        "image has {} values, expected shape {:?}",
        x.len(),
        shape
    );
    Ok(())
}

/// Bilinear shift: `out(y, x) = in(y + dy, x + dx)` with zeros outside.
/// With `adjoint`, scatters instead of gathers.
fn shift(x: &[f64], shape: ImageShape, dy: f64, dx: f64, adjoint: bool) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut out = vec![0.0; x.len()];
    let (fy, fx) = (dy.floor(), dx.floor());
    let (ty, tx) = (dy - fy, dx - fx);
    let (iy0, ix0) = (fy as isize, fx as isize);
    let taps = [
        (0isize, 0isize, (1.0 - ty) * (1.0 - tx)),
        (0, 1, (1.0 - ty) * tx),
        (1, 0, ty * (1.0 - tx)),
        (1, 1, ty * tx),
    ];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                for &(oy, ox, wt) in &taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let sy = y as isize + iy0 + oy;
                    let sx = xx as isize + ix0 + ox;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = base + sy as usize * w + sx as usize;
                    let dst = base + y * w + xx;
                    if adjoint {
                        out[src] += wt * x[dst];
                    } else {
                        out[dst] += wt * x[src];
                    }
                }
            }
        }
    }
    out
}

fn flip(x: &[f64], shape: ImageShape) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * h + y) * w + xx] = x[(ch * h + y) * w + (w - 1 - xx)];
            }
        }
    }
    out
}

/// `gray + s (x - gray)` per pixel, gray being the mean across channels.
/// The map is symmetric, so it is its own adjoint.
fn saturate(x: &[f64], shape: ImageShape, s: f64) -> Vec<f64> {
    let (c, h, w) = shape;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let gray = (0..c).map(|ch| x[ch * plane + p]).sum::<f64>() / c as f64;
        for ch in 0..c {
            out[ch * plane + p] = gray + s * (x[ch * plane + p] - gray);
        }
    }
    out
}

fn cutout(mut x: Vec<f64>, shape: ImageShape, y0: usize, x0: usize, size: usize) -> Vec<f64> {
    let (c, h, w) = shape;
    for ch in 0..c {
        for y in y0..(y0 + size).min(h) {
            for xx in x0..(x0 + size).min(w) {
                x[(ch * h + y) * w + xx] = 0.0;
            }
        }
    }
    x
}

fn apply_param(x: Vec<f64>, shape: ImageShape, p: AugParam, adjoint: bool) -> Vec<f64> {
    match p {
        AugParam::Shift { dy, dx } => shift(&x, shape, dy, dx, adjoint),
        AugParam::Flip(true) => flip(&x, shape),
        AugParam::Flip(false) | AugParam::Skipped => x,
        AugParam::Brightness(s) => x.into_iter().map(|v| v * s).collect(),
        AugParam::Saturation(s) => saturate(&x, shape, s),
        AugParam::Cutout { y0, x0, size } => cutout(x, shape, y0, x0, size),
    }
}

/// Applies the policy with parameters drawn from `zeta`.
pub fn apply(policy: &AugmentPolicy, zeta: &RngStream, x: &[f64], shape: ImageShape) -> Result<Vec<f64>> {
    check(policy, x, shape)?;
    let params = sample_params(policy, zeta, shape);
    Ok(apply_with_params(&params, x, shape))
}

pub fn apply_with_params(params: &[AugParam], x: &[f64], shape: ImageShape) -> Vec<f64> {
    params
        .iter()
        .fold(x.to_vec(), |acc, &p| apply_param(acc, shape, p, false))
}

/// Gradient of `<apply(x), upstream>` with respect to `x`.
pub fn input_gradient(
    policy: &AugmentPolicy,
    zeta: &RngStream,
    x: &[f64],
    upstream: &[f64],
    shape: ImageShape,
) -> Result<Vec<f64>> {
    check(policy, x, shape)?;
    ensure!(
        upstream.len() == x.len(),
        "upstream gradient has {} values, expected {}",
        upstream.len(),
        x.len()
    );
    let params = sample_params(policy, zeta, shape);
    Ok(adjoint_with_params(&params, upstream, shape))
}

pub fn adjoint_with_params(params: &[AugParam], upstream: &[f64], shape: ImageShape) -> Vec<f64> {
    params
        .iter()
        .rev()
        .fold(upstream.to_vec(), |acc, &p| apply_param(acc, shape, p, true))
}

fn tensor_shape(x: &Tensor) -> Result<ImageShape> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Validation(format!(
            "expected a (channels, height, width) image, got shape {:?}",
            x.shape()
        ))),
    }
}

/// Tensor-level [`apply`].
pub fn apply_tensor(policy: &AugmentPolicy, zeta: &RngStream, x: &Tensor) -> Result<Tensor> {
    let shape = tensor_shape(x)?;
    Tensor::new(x.shape().to_vec(), apply(policy, zeta, x.data(), shape)?)
}
