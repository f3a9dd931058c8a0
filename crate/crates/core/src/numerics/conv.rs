//! im2col / col2im helpers shared by the convolution ops.

use crate::error::{shape_err, Result};

/// Geometry of a 2D convolution (or its transpose) over `[C, H, W]` images.
///
/// For a forward convolution `image` is the input and `grid` the output
/// positions; for a transposed convolution `image` is the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ConvGeom {
    /// Geometry for a strided convolution reading a `[channels, h, w]` image.
    pub fn conv(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return shape_err(format!("kernel {kernel} does not fit {h}x{w} (pad {pad})"));
        }
        Ok(Self {
            channels,
            image_h: h,
            image_w: w,
            kernel,
            stride,
            pad,
            grid_h: (h + 2 * pad - kernel) / stride + 1,
            grid_w: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Geometry for a transposed convolution producing `[channels, H, W]`
    /// from an `h x w` grid.
    pub fn conv_transpose(
        channels: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let oh = (h - 1) * stride + kernel;
        let ow = (w - 1) * stride + kernel;
        if oh < 2 * pad || ow < 2 * pad || stride == 0 {
            return shape_err("transposed convolution padding too large");
        }
        Ok(Self { channels, image_h: oh - 2 * pad, image_w: ow - 2 * pad, kernel, stride, pad, grid_h: h, grid_w: w })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn grid_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_h * self.image_w
    }

    #[inline]
    fn source(&self, gy: usize, gx: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (gy * self.stride + ky) as isize - self.pad as isize;
        let x = (gx * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.image_h as isize || x >= self.image_w as isize {
            None
        } else {
            Some(y as usize * self.image_w + x as usize)
        }
    }
}

/// `cols[(c*k + ky)*k + kx, gy*gw + gx] = image[c, gy*s + ky - p, gx*s + kx - p]`.
pub fn im2col<F: Copy + Default>(image: &[F], g: &ConvGeom, cols: &mut [F]) {
    let k = g.kernel;
    let gl = g.grid_len();
    let plane = g.image_h * g.image_w;
    for c in 0..g.channels {
        let img = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * gl..(row + 1) * gl];
                for gy in 0..g.grid_h {
                    for gx in 0..g.grid_w {
                        out[gy * g.grid_w + gx] = match g.source(gy, gx, ky, kx) {
                            Some(i) => img[i],
                            None => F::default(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `image`.
pub fn col2im<F: Copy + std::ops::AddAssign>(cols: &[F], g: &ConvGeom, image: &mut [F]) {
    let k = g.kernel;
    let gl = g.grid_len();
    let plane = g.image_h * g.image_w;
    for c in 0..g.channels {
        let img = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * gl..(row + 1) * gl];
                for gy in 0..g.grid_h {
                    for gx in 0..g.grid_w {
                        if let Some(i) = g.source(gy, gx, ky, kx) {
                            img[i] += src[gy * g.grid_w + gx];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_of_stride_two_stack() {
        let g = ConvGeom::conv(1, 32, 64, 4, 2, 1).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (16, 32));
        let t = ConvGeom::conv_transpose(1, 16, 32, 4, 2, 1).unwrap();
        assert_eq!((t.image_h, t.image_w), (32, 64));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::conv(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.grid_len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
