use super::{matmul, shape_err, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// Output extent and leading pad along one spatial axis.
    ///
    /// SAME puts the odd padding cell on the bottom/right.
    pub fn geometry(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        if stride == 0 || kernel == 0 || input == 0 {
            return None;
        }
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => {
                if input < kernel {
                    None
                } else {
                    Some(((input - kernel) / stride + 1, 0))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            use_bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.use_bias = true;
        self
    }

    /// Output `(h, w, pad_top, pad_left)` for an `h × w` input.
    pub fn output_geometry(
        &self,
        op: &'static str,
        h: usize,
        w: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("degenerate conv spec {self:?}"),
            });
        }
        let too_small = || TensorError::InvalidArgument {
            op,
            msg: format!(
                "input {h}x{w} smaller than kernel {}x{} under VALID padding",
                self.kernel_h, self.kernel_w
            ),
        };
        let (oh, pt) = self
            .padding
            .geometry(h, self.kernel_h, self.stride)
            .ok_or_else(too_small)?;
        let (ow, pl) = self
            .padding
            .geometry(w, self.kernel_w, self.stride)
            .ok_or_else(too_small)?;
        Ok((oh, ow, pt, pl))
    }
}

/// Standard 2-D cross-correlation (no kernel flip).
///
/// `kernel` is laid out `kh,kw,Cin,Cout`, which is also the row-major layout
/// of the `(kh·kw·Cin) × Cout` matrix multiplied against the patch matrix.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    bias: Option<&[f32]>,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (n, h, w, cin) = input.dims4(OP)?;
    let (kh, kw, kcin, cout) = kernel.dims4(OP)?;
    if kh != spec.kernel_h {
        return Err(shape_err(OP, "kernel height", spec.kernel_h, kh));
    }
    if kw != spec.kernel_w {
        return Err(shape_err(OP, "kernel width", spec.kernel_w, kw));
    }
    if kcin != cin {
        return Err(shape_err(OP, "input channels", kcin, cin));
    }
    match (spec.use_bias, bias) {
        (true, Some(b)) if b.len() != cout => return Err(shape_err(OP, "bias length", cout, b.len())),
        (true, None) => {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "spec requires a bias but none was given".into(),
            })
        }
        (false, Some(_)) => {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "bias given for a bias-free spec".into(),
            })
        }
        _ => {}
    }
    let (oh, ow, pt, pl) = spec.output_geometry(OP, h, w)?;
    let stride = spec.stride;
    let patch = kh * kw * cin;
    let mut out = vec![0.0f32; n * oh * ow * cout];
    let pointwise = kh == 1 && kw == 1 && stride == 1;
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; oh * ow * patch]
    };

    for b in 0..n {
        let img = &input.data()[b * h * w * cin..(b + 1) * h * w * cin];
        let dst = &mut out[b * oh * ow * cout..(b + 1) * oh * ow * cout];
        if pointwise {
            matmul(img, kernel.data(), dst, h * w, cin, cout);
            continue;
        }
        cols.fill(0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * cin;
                        let off = (ky * kw + kx) * cin;
                        row[off..off + cin].copy_from_slice(&img[src..src + cin]);
                    }
                }
            }
        }
        matmul(&cols, kernel.data(), dst, oh * ow, patch, cout);
    }

    if let Some(b) = bias {
        for px in out.chunks_exact_mut(cout) {
            for (v, bb) in px.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    Tensor::new(vec![n, oh, ow, cout], out)
}

/// Per-channel spatial convolution with channel multiplier 1.
/// `kernel` is laid out `kh,kw,C`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    const OP: &str = "depthwise_conv2d";
    let (n, h, w, c) = input.dims4(OP)?;
    let (kh, kw, kc) = match kernel.shape()[..] {
        [a, b, c] => (a, b, c),
        _ => {
            return Err(TensorError::Rank {
                op: OP,
                expected: 3,
                shape: kernel.shape().to_vec(),
            })
        }
    };
    if kc != c {
        return Err(shape_err(OP, "channels", kc, c));
    }
    if kh != spec.kernel_h {
        return Err(shape_err(OP, "kernel height", spec.kernel_h, kh));
    }
    if kw != spec.kernel_w {
        return Err(shape_err(OP, "kernel width", spec.kernel_w, kw));
    }
    if spec.use_bias {
        return Err(TensorError::InvalidArgument {
            op: OP,
            msg: "depthwise stage is bias-free".into(),
        });
    }
    let (oh, ow, pt, pl) = spec.output_geometry(OP, h, w)?;
    let stride = spec.stride;
    let k = kernel.data();
    let mut out = vec![0.0f32; n * oh * ow * c];
    for b in 0..n {
        let img = &input.data()[b * h * w * c..(b + 1) * h * w * c];
        let dst = &mut out[b * oh * ow * c..(b + 1) * oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut dst[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &img[(iy as usize * w + ix as usize) * c..][..c];
                        let kk = &k[(ky * kw + kx) * c..][..c];
                        for ((a, x), wgt) in acc.iter_mut().zip(src).zip(kk) {
                            *a += x * wgt;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

/// Depthwise convolution under `spec` followed by a bias-free 1×1 pointwise
/// convolution. `pointwise_kernel` is `1,1,Cin,Cout`.
pub fn separable_conv2d(
    input: &Tensor,
    depthwise_kernel: &Tensor,
    pointwise_kernel: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let mid = depthwise_conv2d(input, depthwise_kernel, spec)?;
    let (ph, pw, _, _) = pointwise_kernel.dims4("separable_conv2d")?;
    if ph != 1 || pw != 1 {
        return Err(shape_err("separable_conv2d", "pointwise kernel size", 1, ph.max(pw)));
    }
    conv2d(&mid, pointwise_kernel, &ConvSpec::new(1, 1, Padding::Valid), None)
}
