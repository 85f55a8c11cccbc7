//! Group actions on whole feature maps: the `T_g` under which equivariance
//! of every layer is stated and tested.
//!
//! Spatial grids must be square so that quarter turns map the grid onto
//! itself; the transform is taken about the plane center, which works for
//! even and odd extents alike (doubled coordinates keep it exact).

use crate::error::{Error, Result};
use crate::group::{GroupSpec, StabilizerElement};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extents and gather map for one plane: `map[out_flat] = in_flat`,
/// where the output position is the image of the input position under `g`.
pub(crate) fn plane_gather(g: StabilizerElement, h: usize, w: usize) -> (usize, usize, Vec<usize>) {
    let (h2, w2) = if g.quarter_turns % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    };
    let mut map = vec![0usize; h * w];
    for row in 0..h {
        for col in 0..w {
            // doubled centered coordinates keep everything integral
            let u = 2 * col as i64 - (w as i64 - 1);
            let v = (h as i64 - 1) - 2 * row as i64;
            let (u2, v2) = g.act_doubled(u, v);
            let col2 = ((u2 + (w2 as i64 - 1)) / 2) as usize;
            let row2 = (((h2 as i64 - 1) - v2) / 2) as usize;
            map[row2 * w2 + col2] = row * w + col;
        }
    }
    (h2, w2, map)
}

fn square_extent<F: Scalar>(x: &Tensor<F>, min_rank: usize) -> Result<(usize, usize)> {
    if x.rank() < min_rank {
        return Err(Error::shape(format!(
            "spatial transform needs rank ≥ {min_rank}, got {:?}",
            x.dims()
        )));
    }
    let h = x.dims()[x.rank() - 2];
    let w = x.dims()[x.rank() - 1];
    if h != w {
        return Err(Error::shape(format!(
            "spatial transform needs a square plane, got {h}×{w}"
        )));
    }
    Ok((h, w))
}

/// `(T_g x)(p) = x(g⁻¹ p)`: rotate/flip the trailing two (spatial) axes.
/// Leading axes are carried through unchanged, so this applies per-channel
/// to `[C,H,W]` images and per-feature to `[B,C,H,W]` batches alike.
pub fn transform_feature_z2<F: Scalar>(g: StabilizerElement, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = square_extent(x, 2)?;
    let (_, _, map) = plane_gather(g, h, w);
    let mut out = Tensor::zeros_like(x);
    let plane = h * w;
    for (src, dst) in x
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        for (o, &s) in map.iter().enumerate() {
            dst[o] = src[s];
        }
    }
    Ok(out)
}

/// Act on a `[B, K, S, H, W]` G-feature map by the regular representation:
/// output at group index `h` and position `p` equals input at group index
/// `g⁻¹h` and position `g⁻¹p`, i.e. slot `s` lands in slot `index(g · hₛ)`
/// and planes are rotated/flipped spatially.
pub fn transform_feature_g<F: Scalar>(
    g: StabilizerElement,
    x: &Tensor<F>,
    group: GroupSpec,
) -> Result<Tensor<F>> {
    if x.rank() != 5 {
        return Err(Error::shape(format!(
            "G-feature map must be [B,K,S,H,W], got {:?}",
            x.dims()
        )));
    }
    let order = group.order();
    if x.dims()[2] != order {
        return Err(Error::shape(format!(
            "stabilizer axis is {} but group order is {order}",
            x.dims()[2]
        )));
    }
    if !group.contains(g) {
        return Err(Error::arg(format!("{g:?} is not in the group")));
    }
    let (h, w) = square_extent(x, 5)?;
    let (b, k) = (x.dims()[0], x.dims()[1]);
    let (_, _, map) = plane_gather(g, h, w);
    let perm: Vec<usize> = group
        .elements()
        .iter()
        .map(|&e| group.index_of(g.compose(e)).expect("closure"))
        .collect();
    let mut out = Tensor::zeros_like(x);
    let plane = h * w;
    for bi in 0..b {
        for ki in 0..k {
            for (s, &s2) in perm.iter().enumerate() {
                let src = &x.data()[((bi * k + ki) * order + s) * plane..][..plane];
                let dst = &mut out.data_mut()[((bi * k + ki) * order + s2) * plane..][..plane];
                for (o, &si) in map.iter().enumerate() {
                    dst[o] = src[si];
                }
            }
        }
    }
    Ok(out)
}
