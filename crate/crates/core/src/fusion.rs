//! Resolution-aligned fusion of alignment maps across the P3/P4/P5 pyramid.
//!
//! `Down` is 2x2 average pooling and `Up` is 2x nearest-neighbour replication.
//! Both are linear; their adjoints are provided for the hand-written backward pass.

use crate::eah::AlignmentMap;
use crate::error::{dim, Result};
use crate::scalar::Real;

/// Alignment maps of one image at scales 3, 4 and 5.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePyramid<T> {
    p3: AlignmentMap<T>,
    p4: AlignmentMap<T>,
    p5: AlignmentMap<T>,
}

impl<T: Real> ScalePyramid<T> {
    pub fn new(p3: AlignmentMap<T>, p4: AlignmentMap<T>, p5: AlignmentMap<T>) -> Result<Self> {
        if p3.prompts() != p4.prompts() || p4.prompts() != p5.prompts() {
            return dim("pyramid levels disagree on prompt count");
        }
        check_pyramid_dims((p3.height(), p3.width()), (p4.height(), p4.width()), (p5.height(), p5.width()))?;
        Ok(Self { p3, p4, p5 })
    }

    pub fn p3(&self) -> &AlignmentMap<T> {
        &self.p3
    }
    pub fn p4(&self) -> &AlignmentMap<T> {
        &self.p4
    }
    pub fn p5(&self) -> &AlignmentMap<T> {
        &self.p5
    }
}

/// `H3 = 2 H4 = 4 H5`, same for widths.
pub fn check_pyramid_dims(p3: (usize, usize), p4: (usize, usize), p5: (usize, usize)) -> Result<()> {
    let ok = p3.0 == 2 * p4.0 && p4.0 == 2 * p5.0 && p3.1 == 2 * p4.1 && p4.1 == 2 * p5.1;
    if ok {
        Ok(())
    } else {
        dim(format!("pyramid shapes {p3:?}/{p4:?}/{p5:?} violate H3 = 2 H4 = 4 H5"))
    }
}

/// Mean of every 2x2 block.
pub fn downsample2x<T: Real>(m: &AlignmentMap<T>) -> Result<AlignmentMap<T>> {
    let (h, w) = (m.height(), m.width());
    if h % 2 != 0 || w % 2 != 0 {
        return dim(format!("downsampling needs even dimensions, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(m.prompts() * oh * ow);
    for p in 0..m.prompts() {
        for x in 0..oh {
            for y in 0..ow {
                let s = m.at(p, 2 * x, 2 * y)
                    + m.at(p, 2 * x, 2 * y + 1)
                    + m.at(p, 2 * x + 1, 2 * y)
                    + m.at(p, 2 * x + 1, 2 * y + 1);
                out.push(s * quarter);
            }
        }
    }
    Ok(AlignmentMap::from_raw(m.prompts(), oh, ow, out))
}

/// Each cell fills its 2x2 output block.
pub fn upsample2x<T: Real>(m: &AlignmentMap<T>) -> AlignmentMap<T> {
    let (oh, ow) = (2 * m.height(), 2 * m.width());
    let mut out = Vec::with_capacity(m.prompts() * oh * ow);
    for p in 0..m.prompts() {
        for x in 0..oh {
            for y in 0..ow {
                out.push(m.at(p, x / 2, y / 2));
            }
        }
    }
    AlignmentMap::from_raw(m.prompts(), oh, ow, out)
}

/// Adjoint of [`downsample2x`]: spreads a quarter of each coarse gradient over its block.
pub fn downsample2x_adjoint<T: Real>(grad: &AlignmentMap<T>) -> AlignmentMap<T> {
    let quarter = T::lit(0.25);
    let up = upsample2x(grad);
    let values = up.into_values().into_iter().map(|g| g * quarter).collect();
    AlignmentMap::from_raw(grad.prompts(), 2 * grad.height(), 2 * grad.width(), values)
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_adjoint<T: Real>(grad: &AlignmentMap<T>) -> Result<AlignmentMap<T>> {
    let four = T::lit(4.0);
    let pooled = downsample2x(grad)?;
    let (p, h, w) = (pooled.prompts(), pooled.height(), pooled.width());
    Ok(AlignmentMap::from_raw(p, h, w, pooled.into_values().into_iter().map(|g| g * four).collect()))
}

fn half_sum<T: Real>(a: &AlignmentMap<T>, b: &AlignmentMap<T>) -> AlignmentMap<T> {
    let half = T::lit(0.5);
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| (x + y) * half).collect();
    AlignmentMap::from_raw(a.prompts(), a.height(), a.width(), values)
}

fn scaled<T: Real>(m: &AlignmentMap<T>, k: T) -> AlignmentMap<T> {
    AlignmentMap::from_raw(m.prompts(), m.height(), m.width(), m.values().iter().map(|&v| v * k).collect())
}

/// `(Down((Down(S3) + S4)/2) + S5)/2`, at P5 resolution.
pub fn fuse_down<T: Real>(p: &ScalePyramid<T>) -> Result<AlignmentMap<T>> {
    let mid = half_sum(&downsample2x(&p.p3)?, &p.p4);
    Ok(half_sum(&downsample2x(&mid)?, &p.p5))
}

/// `(Up((Up(S5) + S4)/2) + S3)/2`, at P3 resolution.
pub fn fuse_up<T: Real>(p: &ScalePyramid<T>) -> AlignmentMap<T> {
    let mid = half_sum(&upsample2x(&p.p5), &p.p4);
    half_sum(&upsample2x(&mid), &p.p3)
}

/// Gradients of the three levels given the gradient of [`fuse_down`]'s output.
pub fn fuse_down_backward<T: Real>(grad: &AlignmentMap<T>) -> (AlignmentMap<T>, AlignmentMap<T>, AlignmentMap<T>) {
    let half = T::lit(0.5);
    let g5 = scaled(grad, half);
    let g_mid = downsample2x_adjoint(&g5);
    let g4 = scaled(&g_mid, half);
    let g3 = downsample2x_adjoint(&g4);
    (g3, g4, g5)
}

/// Gradients of the three levels given the gradient of [`fuse_up`]'s output.
pub fn fuse_up_backward<T: Real>(grad: &AlignmentMap<T>) -> Result<(AlignmentMap<T>, AlignmentMap<T>, AlignmentMap<T>)> {
    let half = T::lit(0.5);
    let g3 = scaled(grad, half);
    let g_mid = upsample2x_adjoint(&g3)?;
    let g4 = scaled(&g_mid, half);
    let g5 = upsample2x_adjoint(&g4)?;
    Ok((g3, g4, g5))
}
