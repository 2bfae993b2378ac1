//! 3D convolution and transposed convolution for batch size one,
//! `[channels, depth, rows, cols]` layout, via im2col + gemm. 2D variants
//! insert a unit depth axis. Padding is a separate op (see `pad`).

use std::sync::Arc;

use super::linalg::{gemm_acc, transpose};
use crate::error::{Result, TensorError};
use crate::memory::Buffer;
use crate::tensor::{BackwardOp, Gradients, Tensor};

/// Sliding-window geometry over one `[C, D, H, W]` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(channels: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 || kernel[a] > input[a] {
                return None;
            }
            output[a] = (input[a] - kernel[a]) / stride[a] + 1;
        }
        Some(Geometry {
            channels,
            input,
            kernel,
            stride,
            output,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    /// Visits `(col_index, input_index)` pairs in a fixed order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [od, oh, ow] = self.output;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.channels {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let mut col = row * p;
                        for z in 0..od {
                            let zi = z * sd + a;
                            for y in 0..oh {
                                let yi = y * sh + b;
                                let base = ((c * id + zi) * ih + yi) * iw + e;
                                for x in 0..ow {
                                    f(col, base + x * sw);
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.col_rows() * self.positions()];
        self.for_each(|ci, xi| cols[ci] = x[xi]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.input_len()];
        self.for_each(|ci, xi| x[xi] += cols[ci]);
        x
    }
}

fn volume_dims(op: &'static str, t: &Tensor) -> Result<(usize, [usize; 3])> {
    match *t.shape() {
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(TensorError::shape(op, format!("expected [C, D, H, W], got {:?}", t.shape()))),
    }
}

struct Conv3dBackward {
    x: Arc<Buffer>,
    w: Arc<Buffer>,
    geom: Geometry,
    out_channels: usize,
}

impl BackwardOp for Conv3dBackward {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let k = self.geom.col_rows();
        let p = self.geom.positions();
        let co = self.out_channels;
        let cols = self.geom.im2col(self.x.values());
        let mut gw = vec![0.0; co * k];
        gemm_acc(co, p, k, g, &transpose(k, p, &cols), &mut gw);
        drop(cols);
        let mut gcols = vec![0.0; k * p];
        gemm_acc(k, co, p, &transpose(co, k, self.w.values()), g, &mut gcols);
        Ok(vec![Some(self.geom.col2im(&gcols)), Some(gw)])
    }
}

struct ConvTranspose3dBackward {
    x: Arc<Buffer>,
    w: Arc<Buffer>,
    // Geometry of the equivalent forward convolution: its input is our output.
    geom: Geometry,
    in_channels: usize,
}

impl BackwardOp for ConvTranspose3dBackward {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, g: &[f64], _: &mut Gradients) -> Result<Vec<Option<Vec<f64>>>> {
        let k = self.geom.col_rows();
        let p = self.geom.positions();
        let ci = self.in_channels;
        let gcols = self.geom.im2col(g);
        let mut gx = vec![0.0; ci * p];
        gemm_acc(ci, k, p, self.w.values(), &gcols, &mut gx);
        let mut gw = vec![0.0; ci * k];
        gemm_acc(ci, p, k, self.x.values(), &transpose(k, p, &gcols), &mut gw);
        Ok(vec![Some(gx), Some(gw)])
    }
}

impl Tensor {
    /// Valid (unpadded) 3D convolution.
    ///
    /// `self: [Cin, D, H, W]`, `weight: [Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&self, weight: &Tensor, stride: [usize; 3]) -> Result<Tensor> {
        let (cin, input) = volume_dims("conv3d", self)?;
        let [cout, wcin, kd, kh, kw] = *weight.shape() else {
            return Err(TensorError::shape(
                "conv3d",
                format!("weight must be [Cout, Cin, kd, kh, kw], got {:?}", weight.shape()),
            ));
        };
        if wcin != cin {
            return Err(TensorError::shape(
                "conv3d",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        let geom = Geometry::new(cin, input, [kd, kh, kw], stride).ok_or_else(|| {
            TensorError::shape(
                "conv3d",
                format!("kernel {:?} stride {stride:?} does not fit input {:?}", [kd, kh, kw], self.shape()),
            )
        })?;
        let cols = geom.im2col(self.values());
        let p = geom.positions();
        let mut out = vec![0.0; cout * p];
        gemm_acc(cout, geom.col_rows(), p, weight.values(), &cols, &mut out);
        let [od, oh, ow] = geom.output;
        let op = Conv3dBackward {
            x: Arc::clone(self.buffer()),
            w: Arc::clone(weight.buffer()),
            geom,
            out_channels: cout,
        };
        Tensor::from_op(out, &[cout, od, oh, ow], op, &[self, weight])
    }

    /// Transposed 3D convolution (no output padding).
    ///
    /// `self: [Cin, D, H, W]`, `weight: [Cin, Cout, kd, kh, kw]`; output
    /// extents are `(in - 1) * stride + kernel`.
    pub fn conv_transpose3d(&self, weight: &Tensor, stride: [usize; 3]) -> Result<Tensor> {
        let (cin, input) = volume_dims("conv_transpose3d", self)?;
        let [wcin, cout, kd, kh, kw] = *weight.shape() else {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("weight must be [Cin, Cout, kd, kh, kw], got {:?}", weight.shape()),
            ));
        };
        if wcin != cin || stride.contains(&0) {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("input {:?} vs weight {:?}, stride {stride:?}", self.shape(), weight.shape()),
            ));
        }
        let kernel = [kd, kh, kw];
        let mut out_ext = [0; 3];
        for a in 0..3 {
            out_ext[a] = (input[a] - 1) * stride[a] + kernel[a];
        }
        let geom = Geometry::new(cout, out_ext, kernel, stride).expect("transposed geometry fits");
        debug_assert_eq!(geom.output, input);
        let k = geom.col_rows();
        let p = geom.positions();
        let mut cols = vec![0.0; k * p];
        gemm_acc(k, cin, p, &transpose(cin, k, weight.values()), self.values(), &mut cols);
        let out = geom.col2im(&cols);
        let op = ConvTranspose3dBackward {
            x: Arc::clone(self.buffer()),
            w: Arc::clone(weight.buffer()),
            geom,
            in_channels: cin,
        };
        Tensor::from_op(out, &[cout, out_ext[0], out_ext[1], out_ext[2]], op, &[self, weight])
    }

    /// Valid 2D convolution: `self: [Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor, stride: [usize; 2]) -> Result<Tensor> {
        let (x, w) = lift_2d("conv2d", self, weight)?;
        let y = x.conv3d(&w, [1, stride[0], stride[1]])?;
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[2], s[3]])
    }

    /// Transposed 2D convolution: `weight: [Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: [usize; 2]) -> Result<Tensor> {
        let (x, w) = lift_2d("conv_transpose2d", self, weight)?;
        let y = x.conv_transpose3d(&w, [1, stride[0], stride[1]])?;
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[2], s[3]])
    }
}

fn lift_2d(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let ([c, h, wd], [a, b, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(TensorError::shape(
            op,
            format!("expected [C, H, W] and rank-4 weight, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    };
    Ok((x.reshape(&[*c, 1, *h, *wd])?, w.reshape(&[*a, *b, 1, *kh, *kw])?))
}
