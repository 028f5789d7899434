//! Corner-aligned bilinear resampling of row-major grids with interleaved channels.

use crate::scalar::Scalar;

/// Source coordinate sampled by output index `i` when stretching `src` cells onto `dst`
/// cells with the first and last samples pinned to the first and last source cells.
#[inline]
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

#[inline]
fn taps(coord: f64, src: usize) -> (usize, usize, f64) {
    let lo = (coord.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, coord - lo as f64)
}

/// Resizes an `h × w × channels` grid to `out_h × out_w × channels`.
pub(crate) fn bilinear<S: Scalar>(
    src: &[S],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<S> {
    debug_assert_eq!(src.len(), h * w * channels);
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    let cols: Vec<_> = (0..out_w).map(|j| taps(source_coord(j, w, out_w), w)).collect();
    for i in 0..out_h {
        let (r0, r1, fy) = taps(source_coord(i, h, out_h), h);
        for &(c0, c1, fx) in &cols {
            for c in 0..channels {
                let at = |r: usize, col: usize| src[(r * w + col) * channels + c].wide();
                let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * fx;
                let bottom = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * fx;
                out.push(S::of(top + (bottom - top) * fy));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(bilinear(&src, 3, 2, 2, 3, 2), src);
    }

    #[test]
    fn corners_are_preserved() {
        let src = [1.0f64, 5.0, -2.0, 7.0];
        let out = bilinear(&src, 2, 2, 1, 5, 7);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[6], 5.0);
        assert_eq!(out[4 * 7], -2.0);
        assert_eq!(out[4 * 7 + 6], 7.0);
    }

    #[test]
    fn single_cell_broadcasts() {
        let out = bilinear(&[3.5f32], 1, 1, 1, 2, 3);
        assert!(out.iter().all(|&v| v == 3.5));
    }
}
