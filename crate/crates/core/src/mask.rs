//! Binary mask morphology on polar grids.
//!
//! Dilation and erosion use a square (Chebyshev) structuring element of the
//! given radius, implemented as two separable passes. The angle axis (rows)
//! optionally wraps — polar images are periodic in angle — while the depth
//! axis always clamps. Out-of-range neighbors contribute nothing to a
//! dilation and do not veto an erosion.

fn pass_rows(mask: &[bool], h: usize, w: usize, radius: usize, wrap: bool, any: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let r_i = radius as i64;
    for r in 0..h {
        for c in 0..w {
            let mut acc = !any;
            for dr in -r_i..=r_i {
                let rr = r as i64 + dr;
                let rr = if wrap {
                    rr.rem_euclid(h as i64)
                } else if (0..h as i64).contains(&rr) {
                    rr
                } else {
                    continue;
                };
                let v = mask[rr as usize * w + c];
                if any {
                    acc |= v;
                    if acc {
                        break;
                    }
                } else {
                    acc &= v;
                    if !acc {
                        break;
                    }
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn pass_cols(mask: &[bool], h: usize, w: usize, radius: usize, any: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let r_i = radius as i64;
    for r in 0..h {
        let row = &mask[r * w..(r + 1) * w];
        for c in 0..w {
            let lo = (c as i64 - r_i).max(0) as usize;
            let hi = ((c as i64 + r_i) as usize).min(w - 1);
            let slice = &row[lo..=hi];
            out[r * w + c] = if any {
                slice.iter().any(|&v| v)
            } else {
                slice.iter().all(|&v| v)
            };
        }
    }
    out
}

/// True wherever any input pixel lies within Chebyshev distance `radius`.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize, wrap_rows: bool) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "mask length must match its dimensions");
    if radius == 0 {
        return mask.to_vec();
    }
    let tall = pass_rows(mask, h, w, radius, wrap_rows, true);
    pass_cols(&tall, h, w, radius, true)
}

/// True only where every in-range pixel within Chebyshev distance `radius`
/// is set.
pub fn erode(mask: &[bool], h: usize, w: usize, radius: usize, wrap_rows: bool) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "mask length must match its dimensions");
    if radius == 0 {
        return mask.to_vec();
    }
    let tall = pass_rows(mask, h, w, radius, wrap_rows, false);
    pass_cols(&tall, h, w, radius, false)
}

/// Number of set pixels.
pub fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&v| v).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(h: usize, w: usize, r: usize, c: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        m[r * w + c] = true;
        m
    }

    #[test]
    fn dilating_a_point_yields_a_square() {
        let m = single(9, 9, 4, 4);
        let d = dilate(&m, 9, 9, 2, false);
        for r in 0..9 {
            for c in 0..9 {
                let inside = (2..=6).contains(&r) && (2..=6).contains(&c);
                assert_eq!(d[r * 9 + c], inside, "({r},{c})");
            }
        }
        assert_eq!(count(&d), 25);
    }

    #[test]
    fn row_wrap_carries_dilation_across_the_seam() {
        let m = single(8, 5, 0, 2);
        let wrapped = dilate(&m, 8, 5, 1, true);
        assert!(wrapped[7 * 5 + 2], "row below the seam must be reached");
        let clamped = dilate(&m, 8, 5, 1, false);
        assert!(!clamped[7 * 5 + 2]);
    }

    #[test]
    fn columns_clamp_rather_than_wrap() {
        let m = single(4, 6, 2, 0);
        let d = dilate(&m, 4, 6, 2, true);
        assert!(!d[2 * 6 + 5], "dilation must not wrap across depth");
        assert!(d[2 * 6 + 2]);
    }

    #[test]
    fn erosion_shrinks_what_dilation_grew() {
        let m = single(16, 16, 8, 8);
        let grown = dilate(&m, 16, 16, 3, false);
        let back = erode(&grown, 16, 16, 3, false);
        // Closing contains the original; here it is exactly the original
        // point's square-of-radius-0, i.e. the point itself, because the
        // grown region is an exact square of the same radius.
        assert_eq!(back, m);
    }

    #[test]
    fn erosion_ignores_out_of_range_neighbors() {
        let all = vec![true; 5 * 7];
        assert_eq!(erode(&all, 5, 7, 2, false), all);
    }

    #[test]
    fn radius_zero_is_identity() {
        let m = single(3, 3, 1, 1);
        assert_eq!(dilate(&m, 3, 3, 0, true), m);
        assert_eq!(erode(&m, 3, 3, 0, true), m);
    }
}
