//! Raw loops behind the differentiable ops. All images are `[channels, height, width]`
//! slices of a single batch element.

use crate::tensor::Scalar;

/// Unfolds a same-padded `k x k` neighbourhood into a `[c*k*k, h*w]` matrix.
pub(crate) fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    // valid x range: 0 <= x + shift < w
                    let x0 = (-shift).max(0) as usize;
                    let x1 = ((w as isize) - shift).min(w as isize).max(0) as usize;
                    out_row[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + shift) as usize;
                        out_row[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out_row[x1.max(x0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image (accumulating).
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let shift = kx as isize - pad as isize;
                let x0 = (-shift).max(0) as usize;
                let x1 = ((w as isize) - shift).min(w as isize).max(0) as usize;
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + shift) as usize;
                    for (d, &g) in dst[s0..s0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Softmax over `c` channel planes of size `hw`, written into `out`.
pub(crate) fn softmax_channels<T: Scalar>(x: &[T], c: usize, hw: usize, out: &mut [T]) {
    for p in 0..hw {
        let mut max = T::neg_infinity();
        for ci in 0..c {
            max = max.max(x[ci * hw + p]);
        }
        let mut z = T::zero();
        for ci in 0..c {
            let e = (x[ci * hw + p] - max).exp();
            out[ci * hw + p] = e;
            z = z + e;
        }
        for ci in 0..c {
            out[ci * hw + p] = out[ci * hw + p] / z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive_im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> alloc::vec::Vec<f64> {
        let pad = (k / 2) as isize;
        let mut cols = vec![0.0; c * k * k * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for y in 0..h {
                        for x in 0..w {
                            let sy = y as isize + ky as isize - pad;
                            let sx = x as isize + kx as isize - pad;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                cols[row * h * w + y * w + x] =
                                    input[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_naive() {
        for &(c, h, w, k) in &[(2, 5, 4, 3), (1, 3, 3, 1), (3, 2, 6, 3), (1, 1, 1, 3)] {
            let input: alloc::vec::Vec<f64> = (0..c * h * w).map(|v| v as f64 + 0.5).collect();
            let mut cols = vec![f64::NAN; c * k * k * h * w];
            im2col(&input, c, h, w, k, &mut cols);
            assert_eq!(cols, naive_im2col(&input, c, h, w, k));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: alloc::vec::Vec<f64> = (0..c * h * w).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let y: alloc::vec::Vec<f64> = (0..c * k * k * h * w).map(|v| ((v * 5) % 13) as f64 - 6.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = [1.0f64, -2.0, 0.5, 3.0, 0.0, 0.0];
        let mut out = [0.0; 6];
        softmax_channels(&x, 2, 3, &mut out);
        for p in 0..3 {
            assert!((out[p] + out[3 + p] - 1.0).abs() < 1e-12);
        }
    }
}
