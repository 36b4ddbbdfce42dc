//! Per-sample kernels on channel-major volumes (x fastest within a channel).

use biastrial_core::Dims;

use crate::real::Real;

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL * KERNEL;

pub fn voxels(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

pub fn pooled_dims(dims: Dims) -> Dims {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

/// Copies a shifted window of one source row into `out` with zero fill.
#[inline]
fn shifted_row<T: Real>(src: &[T], dx: usize, out: &mut [T]) {
    let nx = out.len();
    match dx {
        0 => {
            out[0] = T::zero();
            out[1..].copy_from_slice(&src[..nx - 1]);
        }
        1 => out.copy_from_slice(src),
        _ => {
            out[..nx - 1].copy_from_slice(&src[1..]);
            out[nx - 1] = T::zero();
        }
    }
}

/// Unfolds a `cin`-channel volume into a `(cin * 27) x voxels` matrix for a
/// 3x3x3 convolution with zero padding 1. Row order is (channel, dz, dy, dx).
pub fn im2col<T: Real>(input: &[T], cin: usize, dims: Dims, col: &mut [T]) {
    let [nx, ny, nz] = dims;
    let s = voxels(dims);
    debug_assert_eq!(input.len(), cin * s);
    debug_assert_eq!(col.len(), cin * TAPS * s);
    for ci in 0..cin {
        let plane = &input[ci * s..(ci + 1) * s];
        for dz in 0..KERNEL {
            for dy in 0..KERNEL {
                for dx in 0..KERNEL {
                    let row = ((ci * KERNEL + dz) * KERNEL + dy) * KERNEL + dx;
                    let out = &mut col[row * s..(row + 1) * s];
                    for z in 0..nz {
                        let sz = z as isize + dz as isize - 1;
                        for y in 0..ny {
                            let sy = y as isize + dy as isize - 1;
                            let o = &mut out[(z * ny + y) * nx..(z * ny + y + 1) * nx];
                            if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                                o.fill(T::zero());
                            } else {
                                let start = (sz as usize * ny + sy as usize) * nx;
                                shifted_row(&plane[start..start + nx], dx, o);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `out`.
pub fn col2im<T: Real>(col: &[T], cin: usize, dims: Dims, out: &mut [T]) {
    let [nx, ny, nz] = dims;
    let s = voxels(dims);
    for ci in 0..cin {
        let plane = &mut out[ci * s..(ci + 1) * s];
        for dz in 0..KERNEL {
            for dy in 0..KERNEL {
                for dx in 0..KERNEL {
                    let row = ((ci * KERNEL + dz) * KERNEL + dy) * KERNEL + dx;
                    let src = &col[row * s..(row + 1) * s];
                    for z in 0..nz {
                        let sz = z as isize + dz as isize - 1;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let c = &src[(z * ny + y) * nx..(z * ny + y + 1) * nx];
                            let start = (sz as usize * ny + sy as usize) * nx;
                            let p = &mut plane[start..start + nx];
                            match dx {
                                0 => p[..nx - 1].iter_mut().zip(&c[1..]).for_each(|(a, &b)| *a += b),
                                1 => p.iter_mut().zip(c).for_each(|(a, &b)| *a += b),
                                _ => p[1..].iter_mut().zip(&c[..nx - 1]).for_each(|(a, &b)| *a += b),
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2x2 max pooling, stride 2, odd trailing planes dropped. `arg` receives
/// the winning input index (first maximum in z, y, x scan order).
pub fn maxpool<T: Real>(input: &[T], channels: usize, dims: Dims, out: &mut [T], arg: &mut [u32]) {
    let [nx, ny, _] = dims;
    let pd = pooled_dims(dims);
    let (s, ps) = (voxels(dims), voxels(pd));
    for c in 0..channels {
        for z in 0..pd[2] {
            for y in 0..pd[1] {
                for x in 0..pd[0] {
                    let mut best = usize::MAX;
                    let mut val = T::neg_infinity();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = c * s + ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx;
                                if best == usize::MAX || input[i] > val {
                                    best = i;
                                    val = input[i];
                                }
                            }
                        }
                    }
                    let o = c * ps + (z * pd[1] + y) * pd[0] + x;
                    out[o] = val;
                    arg[o] = best as u32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(input: &[f64], dims: Dims, kernel: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = dims;
        let mut out = vec![0.0; voxels(dims)];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0;
                    for dz in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sx, sy, sz) = (x + dx, y + dy, z + dz);
                                if sx < 1 || sy < 1 || sz < 1 || sx > nx || sy > ny || sz > nz {
                                    continue;
                                }
                                acc += kernel[(dz * 3 + dy) * 3 + dx] * input[((sz - 1) * ny + sy - 1) * nx + sx - 1];
                            }
                        }
                    }
                    out[(z * ny + y) * nx + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn unfolded_product_is_direct_convolution() {
        let dims = [5, 4, 3];
        let input: Vec<f64> = (0..voxels(dims)).map(|i| (i as f64 * 0.7).sin()).collect();
        let kernel: Vec<f64> = (0..27).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut col = vec![0.0; 27 * voxels(dims)];
        im2col(&input, 1, dims, &mut col);
        let mut out = vec![0.0; voxels(dims)];
        crate::real::gemm_nn(1, 27, voxels(dims), &kernel, &col, 0.0, &mut out);
        let want = direct_conv(&input, dims, &kernel);
        assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let dims = [4, 3, 5];
        let s = voxels(dims);
        let x: Vec<f64> = (0..2 * s).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..2 * 27 * s).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, 2, dims, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&c, 2, dims, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_truncates_odd_dims_and_records_argmax() {
        let dims = [3, 2, 2];
        let input: Vec<f64> = vec![1.0, 5.0, 9.0, 2.0, 0.0, 9.0, 3.0, 4.0, 9.0, 7.0, 1.0, 9.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0u32; 1];
        maxpool(&input, 1, dims, &mut out, &mut arg);
        assert_eq!(out[0], 7.0);
        assert_eq!(arg[0], 9);
    }
}
