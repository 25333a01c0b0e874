use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel convolution geometry.
///
/// Kernels are 3x3 (block convolutions) or 1x1 (skip projections); padding is
/// 0 or 1 and stride 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn same3x3(stride: usize) -> Self {
        Self {
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    pub const fn projection(stride: usize) -> Self {
        Self {
            kernel: 1,
            stride,
            padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::param(format!("kernel {} not in {{1, 3}}", self.kernel)));
        }
        if self.padding > 1 {
            return Err(Error::param(format!("padding {} not in {{0, 1}}", self.padding)));
        }
        if self.stride == 0 || self.stride > 2 {
            return Err(Error::param(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_output_extent(h, *self)?,
            conv_output_extent(w, *self)?,
        ))
    }
}

pub fn conv_output_extent(extent: usize, g: ConvGeometry) -> Result<usize> {
    g.validate()?;
    let padded = extent + 2 * g.padding;
    if padded < g.kernel {
        return Err(Error::param(format!(
            "extent {extent} smaller than kernel {} with padding {}",
            g.kernel, g.padding
        )));
    }
    Ok((padded - g.kernel) / g.stride + 1)
}

/// Unfolds an NCHW tensor into a `(C·k²) x (N·H'·W')` column matrix so that a
/// convolution becomes `weights[out x C·k²] · columns`.
pub fn im2col<T: Scalar>(input: &Tensor<T>, g: ConvGeometry) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = g.output_hw(h, w)?;
    let k = g.kernel;
    let cols = n * oh * ow;
    let mut out = vec![T::zero(); c * k * k * cols];
    let x = input.data();
    for ch in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ch * k + kh) * k + kw;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &x[(b * c + ch) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                        let line = &mut dst[(b * oh + oy) * ow..][..ow];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        for (ox, slot) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *slot = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * k * k, cols], out)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto an NCHW input.
pub fn col2im<T: Scalar>(
    columns: &Tensor<T>,
    input_shape: [usize; 4],
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = g.output_hw(h, w)?;
    let k = g.kernel;
    let cols = n * oh * ow;
    if columns.shape() != [c * k * k, cols] {
        return Err(Error::shape(format!(
            "columns {:?} do not match input {input_shape:?} under {g:?}",
            columns.shape()
        )));
    }
    let mut out = vec![T::zero(); n * c * h * w];
    let src = columns.data();
    for ch in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ch * k + kh) * k + kw;
                let line_src = &src[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &mut out[(b * c + ch) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_src = &line_src[(b * oh + oy) * ow..][..ow];
                        for (ox, &v) in row_src.iter().enumerate() {
                            let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&input_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{gemm, Transpose};

    fn direct_conv(x: &Tensor<f64>, wt: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (o, _, k, _) = wt.dims4().unwrap();
        let (oh, ow) = g.output_hw(h, w).unwrap();
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ic) * k + kh) * k + kw];
                                }
                            }
                        }
                        y.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn single_pixel_padded() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap();
        let cols = im2col(&x, ConvGeometry::same3x3(1)).unwrap();
        assert_eq!(cols.shape(), &[9, 1]);
        let mut want = vec![0.0; 9];
        want[4] = 7.0;
        assert_eq!(cols.data(), &want[..]);
    }

    #[test]
    fn valid_3x3_is_flattened_input() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect())
            .unwrap();
        let g = ConvGeometry {
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        let cols = im2col(&x, g).unwrap();
        assert_eq!(cols.shape(), &[9, 1]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn zero_input_zero_columns() {
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let cols = im2col(&x, ConvGeometry::same3x3(1)).unwrap();
        assert!(cols.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        for g in [
            ConvGeometry { kernel: 3, stride: 1, padding: 2 },
            ConvGeometry { kernel: 3, stride: 0, padding: 1 },
            ConvGeometry { kernel: 3, stride: 1, padding: 0 },
            ConvGeometry { kernel: 5, stride: 1, padding: 1 },
        ] {
            assert!(matches!(im2col(&x, g), Err(Error::Param(_))), "{g:?}");
        }
    }

    #[test]
    fn gemm_convolution_matches_direct_loops() {
        let mut rng = Rng::new(21);
        for (shape, g, o) in [
            ([2usize, 8, 16, 16], ConvGeometry::same3x3(1), 5usize),
            ([1, 3, 7, 5], ConvGeometry::same3x3(2), 4),
            ([2, 4, 6, 6], ConvGeometry::projection(2), 3),
            ([1, 2, 5, 5], ConvGeometry { kernel: 3, stride: 1, padding: 0 }, 2),
        ] {
            let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
            let k = g.kernel;
            let wt = Tensor::<f64>::randn(&[o, shape[1], k, k], 1.0, &mut rng);
            let want = direct_conv(&x, &wt, g);
            let cols = im2col(&x, g).unwrap();
            let wm = wt.clone().reshape(&[o, shape[1] * k * k]).unwrap();
            let ym = gemm(&wm, Transpose::No, &cols, Transpose::No).unwrap();
            let (_, _, oh, ow) = want.dims4().unwrap();
            let p = oh * ow;
            for b in 0..shape[0] {
                for oc in 0..o {
                    for i in 0..p {
                        let got = ym.data()[oc * shape[0] * p + b * p + i];
                        let exp = want.data()[(b * o + oc) * p + i];
                        assert!((got - exp).abs() <= 1e-5 * exp.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = Rng::new(4);
        let g = ConvGeometry::same3x3(2);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 6], 1.0, &mut rng);
        let cx = im2col(&x, g).unwrap();
        let y = Tensor::<f64>::randn(cx.shape(), 1.0, &mut rng);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, [2, 3, 5, 6], g).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
