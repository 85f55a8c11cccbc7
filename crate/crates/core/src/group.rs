//! Exact algebra for the point stabilizers of the wallpaper groups p4 and p4m.
//!
//! The stabilizer of the origin in p4 is the cyclic group of quarter turns
//! (order 4); in p4m it is the dihedral group of order 8 (quarter turns plus
//! reflections). Translations of the full wallpaper group are not represented
//! here — they are realized by the convolution sliding window — so an element
//! is written `F^m · R^r` with `R` a 90° counter-clockwise rotation and `F`
//! the horizontal flip `x → −x`, applied right to left.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// Trivial stabilizer; G-layers collapse to their plain counterparts.
    P1,
    /// Quarter-turn rotations only.
    P4,
    /// Quarter-turn rotations and reflections (dihedral group of order 8).
    P4M,
}

/// Which symmetry group a layer or network is equivariant to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupSpec {
    kind: GroupKind,
}

/// One rotation/reflection symmetry: the planar map `F^m · R^r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StabilizerElement {
    /// 0 or 1: whether the horizontal flip is applied (last).
    pub mirror: u8,
    /// 0..=3 quarter turns, counter-clockwise, applied first.
    pub quarter_turns: u8,
}

pub const IDENTITY: StabilizerElement = StabilizerElement {
    mirror: 0,
    quarter_turns: 0,
};

impl GroupSpec {
    pub fn new(kind: GroupKind) -> Self {
        GroupSpec { kind }
    }

    pub fn p1() -> Self {
        Self::new(GroupKind::P1)
    }

    pub fn p4() -> Self {
        Self::new(GroupKind::P4)
    }

    pub fn p4m() -> Self {
        Self::new(GroupKind::P4M)
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// Number of stabilizer elements: 1, 4 or 8.
    pub fn order(&self) -> usize {
        match self.kind {
            GroupKind::P1 => 1,
            GroupKind::P4 => 4,
            GroupKind::P4M => 8,
        }
    }

    /// All elements in the canonical order: `m = 0` by ascending `r`,
    /// then (for p4m) `m = 1` by ascending `r`. Index 0 is the identity.
    pub fn elements(&self) -> Vec<StabilizerElement> {
        let mirrors: &[u8] = match self.kind {
            GroupKind::P1 | GroupKind::P4 => &[0],
            GroupKind::P4M => &[0, 1],
        };
        let turns: &[u8] = match self.kind {
            GroupKind::P1 => &[0],
            _ => &[0, 1, 2, 3],
        };
        let mut out = Vec::with_capacity(self.order());
        for &m in mirrors {
            for &r in turns {
                out.push(StabilizerElement {
                    mirror: m,
                    quarter_turns: r,
                });
            }
        }
        out
    }

    pub fn contains(&self, g: StabilizerElement) -> bool {
        match self.kind {
            GroupKind::P1 => g == IDENTITY,
            GroupKind::P4 => g.mirror == 0,
            GroupKind::P4M => true,
        }
    }

    /// Position of `g` in the [`GroupSpec::elements`] ordering.
    pub fn index_of(&self, g: StabilizerElement) -> Result<usize> {
        if !self.contains(g) {
            return Err(Error::arg(format!(
                "element {g:?} does not belong to {:?}",
                self.kind
            )));
        }
        Ok(g.mirror as usize * 4 + g.quarter_turns as usize)
    }

    /// Composition table: `table[i][j]` is the index of `element_i ∘ element_j`.
    /// Every row and column is a permutation of `0..order`.
    pub fn cayley_table(&self) -> Vec<Vec<usize>> {
        let elems = self.elements();
        elems
            .iter()
            .map(|&a| {
                elems
                    .iter()
                    .map(|&b| self.index_of(a.compose(b)).expect("closure"))
                    .collect()
            })
            .collect()
    }
}

impl StabilizerElement {
    pub fn new(mirror: u8, quarter_turns: u8) -> Result<Self> {
        if mirror > 1 || quarter_turns > 3 {
            return Err(Error::arg(format!(
                "stabilizer element out of range: m={mirror}, r={quarter_turns}"
            )));
        }
        Ok(StabilizerElement {
            mirror,
            quarter_turns,
        })
    }

    pub fn is_identity(&self) -> bool {
        *self == IDENTITY
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    ///
    /// From `R F = F R⁻¹`: `F^a R^p ∘ F^b R^q = F^(a⊕b) R^((−1)^b·p + q mod 4)`.
    pub fn compose(self, other: StabilizerElement) -> StabilizerElement {
        let m = self.mirror ^ other.mirror;
        let p = self.quarter_turns as i32;
        let q = other.quarter_turns as i32;
        let signed = if other.mirror == 1 { -p } else { p };
        let r = (signed + q).rem_euclid(4) as u8;
        StabilizerElement {
            mirror: m,
            quarter_turns: r,
        }
    }

    /// Element `h` with `h ∘ self == identity`. Reflected elements are
    /// involutions; pure rotations invert by negating the turn count.
    pub fn inverse(self) -> StabilizerElement {
        if self.mirror == 1 {
            self
        } else {
            StabilizerElement {
                mirror: 0,
                quarter_turns: ((4 - self.quarter_turns as i32) % 4) as u8,
            }
        }
    }

    /// Apply the planar map to doubled centered coordinates `(u, v)` with
    /// `u` pointing right and `v` pointing up. Doubling keeps the arithmetic
    /// integral for both odd and even grids.
    pub(crate) fn act_doubled(self, mut u: i64, mut v: i64) -> (i64, i64) {
        for _ in 0..self.quarter_turns {
            let (nu, nv) = (-v, u); // R: (x, y) → (−y, x)
            u = nu;
            v = nv;
        }
        if self.mirror == 1 {
            u = -u; // F: (x, y) → (−x, y)
        }
        (u, v)
    }

    /// Spatial action on an odd `k×k` kernel grid, in (row, col) indexing.
    ///
    /// Converts `(row, col)` to centered Cartesian coordinates about the
    /// grid midpoint, applies `F^m R^r`, and converts back. Even `k` is
    /// rejected: a quarter turn about the midpoint has no lattice fixed
    /// point there.
    pub fn act_on_offset(self, offset: (usize, usize), k: usize) -> Result<(usize, usize)> {
        if k % 2 == 0 {
            return Err(Error::arg(format!(
                "spatial action needs an odd grid size, got {k}"
            )));
        }
        let (row, col) = offset;
        if row >= k || col >= k {
            return Err(Error::arg(format!(
                "offset ({row}, {col}) outside a {k}×{k} grid"
            )));
        }
        let c = (k as i64) - 1;
        let u = 2 * col as i64 - c;
        let v = c - 2 * row as i64;
        let (u, v) = self.act_doubled(u, v);
        let col = (u + c) / 2;
        let row = (c - v) / 2;
        Ok((row as usize, col as usize))
    }
}
