//! NCHW convolution geometry and the im2col/col2im transforms shared by the
//! float tape and the integer inference path.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((extent + 2·padding - kernel)/stride) + 1`, or an error when the
/// kernel does not fit.
pub fn output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("convolution stride must be positive".into()));
    }
    let padded = extent + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input extent {extent} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::Shape(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let [out_channels, wc, kernel_h, kernel_w] = *weight else {
            return Err(Error::Shape(format!("conv2d weight must be OCHW, got {weight:?}")));
        };
        if wc != in_channels {
            return Err(Error::Shape(format!(
                "conv2d weight expects {wc} input channels, input has {in_channels}"
            )));
        }
        let out_h = output_extent(height, kernel_h, stride, padding)?;
        let out_w = output_extent(width, kernel_w, stride, padding)?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Columns per patch: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Rows of the im2col matrix: `N·Ho·Wo`.
    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or `None`
    /// when the tap lands in the padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfolds the input into a `[N·Ho·Wo, C·kh·kw]` matrix; padding reads as `pad`.
    pub fn im2col<T: Copy>(&self, x: &[T], pad: T) -> Vec<T> {
        let cols = self.patch_len();
        let mut out = Vec::with_capacity(self.patches() * cols);
        for n in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for c in 0..self.in_channels {
                        let base = (n * self.in_channels + c) * self.height * self.width;
                        for ky in 0..self.kernel_h {
                            let sy = self.source(oy, ky, self.height);
                            for kx in 0..self.kernel_w {
                                let v = match (sy, self.source(ox, kx, self.width)) {
                                    (Some(y), Some(xx)) => x[base + y * self.width + xx],
                                    _ => pad,
                                };
                                out.push(v);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of `im2col`: scatters column gradients back onto the input.
    pub fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let mut dx = vec![0f32; self.batch * self.in_channels * self.height * self.width];
        let mut idx = 0;
        for n in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for c in 0..self.in_channels {
                        let base = (n * self.in_channels + c) * self.height * self.width;
                        for ky in 0..self.kernel_h {
                            let sy = self.source(oy, ky, self.height);
                            for kx in 0..self.kernel_w {
                                if let (Some(y), Some(xx)) = (sy, self.source(ox, kx, self.width)) {
                                    dx[base + y * self.width + xx] += cols[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// For each output position `(oy, ox)` and kernel tap `(c, ky, kx)`, whether
    /// the tap reads real input (not padding). Shape `[Ho·Wo, C·kh·kw]`.
    pub fn tap_mask(&self) -> Vec<bool> {
        let single = Self { batch: 1, ..*self };
        let ones = vec![true; self.in_channels * self.height * self.width];
        single.im2col(&ones, false)
    }

    /// Reorders a `[N·Ho·Wo, O]` matrix into NCHW.
    pub fn rows_to_nchw<T: Copy + Default>(&self, rows: &[T]) -> Vec<T> {
        let hw = self.out_h * self.out_w;
        let mut out = vec![T::default(); rows.len()];
        for n in 0..self.batch {
            for s in 0..hw {
                let r = (n * hw + s) * self.out_channels;
                for o in 0..self.out_channels {
                    out[(n * self.out_channels + o) * hw + s] = rows[r + o];
                }
            }
        }
        out
    }

    /// Inverse of [`rows_to_nchw`](Self::rows_to_nchw).
    pub fn nchw_to_rows(&self, y: &[f32]) -> Vec<f32> {
        let hw = self.out_h * self.out_w;
        let mut out = vec![0f32; y.len()];
        for n in 0..self.batch {
            for o in 0..self.out_channels {
                for s in 0..hw {
                    out[(n * hw + s) * self.out_channels + o] = y[(n * self.out_channels + o) * hw + s];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(output_extent(8, 3, 1, 1).unwrap(), 8);
        assert_eq!(output_extent(8, 3, 2, 1).unwrap(), 4);
        assert_eq!(output_extent(3, 3, 1, 0).unwrap(), 1);
        assert!(output_extent(2, 3, 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(&[1, 2, 4, 4], &[3, 2, 3, 3], 2, 1).unwrap();
        let x: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.patches() * g.patch_len()).map(|i| (i as f32 * 0.11).cos()).collect();
        let lhs: f64 = g.im2col(&x, 0.0).iter().zip(&c).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = x.iter().zip(g.col2im(&c)).map(|(a, b)| (*a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn tap_mask_marks_padding() {
        let g = ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 1).unwrap();
        let mask = g.tap_mask();
        // top-left output: the centre tap and its right/down neighbours are real
        let first = &mask[..9];
        assert_eq!(first, &[false, false, false, false, true, true, false, true, true]);
    }
}
