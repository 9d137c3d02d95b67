//! Parameter slot layout of one grid cell.
//!
//! - stage 1 (32 slots): `W1` row-major `8 × 3` at `h*3 + c`, then `b1` at `24 + h`
//! - stage 2 (27 slots): `W2` row-major `3 × 8` at `o*8 + h`, then `b2` at `24 + o`
//! - affine (12 slots): `α` row-major `3 × 3` at `r*3 + c`, then `β` at `9 + r`

/// Color channels in and out of the per-pixel transform.
pub const COLORS: usize = 3;
/// Hidden width of the per-pixel MLP.
pub const HIDDEN: usize = 8;

pub const STAGE1_PARAMS: usize = HIDDEN * COLORS + HIDDEN;
pub const STAGE2_PARAMS: usize = COLORS * HIDDEN + COLORS;
pub const AFFINE_PARAMS: usize = COLORS * COLORS + COLORS;

#[inline(always)]
pub const fn w1(h: usize, c: usize) -> usize {
    h * COLORS + c
}

#[inline(always)]
pub const fn b1(h: usize) -> usize {
    HIDDEN * COLORS + h
}

#[inline(always)]
pub const fn w2(o: usize, h: usize) -> usize {
    o * HIDDEN + h
}

#[inline(always)]
pub const fn b2(o: usize) -> usize {
    COLORS * HIDDEN + o
}

#[inline(always)]
pub const fn alpha(r: usize, c: usize) -> usize {
    r * COLORS + c
}

#[inline(always)]
pub const fn beta(r: usize) -> usize {
    COLORS * COLORS + r
}

/// Stage-1 cell encoding `W1 = [I₃; 0]`, `b1 = 0`.
pub fn identity_stage1<T: num_traits::Float>() -> Vec<T> {
    let mut v = vec![T::zero(); STAGE1_PARAMS];
    for c in 0..COLORS {
        v[w1(c, c)] = T::one();
    }
    v
}

/// Stage-2 cell encoding `W2 = [I₃ | 0]`, `b2 = 0`.
pub fn identity_stage2<T: num_traits::Float>() -> Vec<T> {
    let mut v = vec![T::zero(); STAGE2_PARAMS];
    for c in 0..COLORS {
        v[w2(c, c)] = T::one();
    }
    v
}

/// Affine cell encoding `α = I₃`, `β = 0`.
pub fn identity_affine<T: num_traits::Float>() -> Vec<T> {
    let mut v = vec![T::zero(); AFFINE_PARAMS];
    for c in 0..COLORS {
        v[alpha(c, c)] = T::one();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(STAGE1_PARAMS, 32);
        assert_eq!(STAGE2_PARAMS, 27);
        assert_eq!(AFFINE_PARAMS, 12);
        assert_eq!(b1(HIDDEN - 1), 31);
        assert_eq!(b2(COLORS - 1), 26);
        assert_eq!(beta(2), 11);
    }
}
