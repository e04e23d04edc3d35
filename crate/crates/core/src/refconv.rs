//! Classical 2-D convolution on `[n x m x C]` grids (or `[B x n x m x C]` batches).
//!
//! Out-of-range taps are skipped, which is the same as zero padding, so a
//! stride-1 output keeps the input size. Strided outputs sample input
//! positions `0, s, 2s, ...` and have `ceil(n / s)` rows.
//!
//! Mask entry `[r][c]` is the tap at row offset `r - radius` and column offset
//! `c - radius`, written in visual order (row 0 is the top). See
//! [`mask_offset`] for how this maps to graph offsets.

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::imagegraph::Offset;
use crate::nn::{glorot, relu_margin, Activation};
use crate::tensor::{gemm, MatRef, Parameter, Parameterized, Tensor};

/// Kernel of side `2 * radius + 1`, weights laid out `[K][K][Cin][Cout]`.
#[derive(Clone, Debug)]
pub struct ConvMask {
    pub radius: usize,
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ConvMask {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let d = weight.dims();
        if d.len() != 4 || d[0] != d[1] || d[0] % 2 == 0 || bias.dims() != [d[3]] {
            return Err(Error::shape("ConvMask", d, bias.dims()));
        }
        Ok(ConvMask {
            radius: d[0] / 2,
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
        })
    }

    /// Single-channel 3x3 mask from visual rows, zero bias.
    pub fn from_3x3(rows: [[f64; 3]; 3]) -> Self {
        let w = rows.iter().flatten().copied().collect();
        ConvMask::new(
            Tensor::from_vec([3, 3, 1, 1], w).expect("sized"),
            Tensor::zeros([1]),
        )
        .expect("valid mask")
    }

    /// Glorot-initialized 3x3 mask with zero bias.
    pub fn random(rng: &mut Rng, cin: usize, cout: usize) -> Self {
        let w = glorot(rng, &[3, 3, cin, cout], 9 * cin, 9 * cout);
        ConvMask::new(w.value, Tensor::zeros([cout])).expect("valid mask")
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[3]
    }

    /// `[K x K]` slice for one input/output channel pair, visual row-major.
    pub fn tap_slice(&self, cin: usize, cout: usize) -> Vec<f64> {
        let (ci, co) = (self.in_channels(), self.out_channels());
        let k = self.side();
        (0..k * k)
            .map(|t| self.weight.value.data()[(t * ci + cin) * co + cout])
            .collect()
    }
}

/// Graph offset of the 3x3 mask entry at visual `(row, col)`.
///
/// Row 0 is the top of the image, where `y` is larger, so `dy = 1 - row`
/// and `dx = col - 1`.
pub fn mask_offset(row: usize, col: usize) -> Offset {
    assert!(row < 3 && col < 3, "3x3 mask entry out of range");
    Offset::new(col as i8 - 1, 1 - row as i8)
}

/// Visual `(row, col)` of a 3x3 mask entry for a graph offset.
pub fn offset_entry(offset: Offset) -> (usize, usize) {
    ((1 - offset.dy) as usize, (offset.dx + 1) as usize)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    side: usize,
    stride: usize,
}

impl Geometry {
    fn new(batch: usize, height: usize, width: usize, side: usize, stride: usize) -> Self {
        Geometry {
            batch,
            height,
            width,
            out_h: height.div_ceil(stride),
            out_w: width.div_ceil(stride),
            side,
            stride,
        }
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input pixel under tap `(kr, kc)` for output `(or, oc)`, if in range.
    #[inline]
    fn source(&self, or: usize, oc: usize, kr: usize, kc: usize) -> Option<(usize, usize)> {
        let r = (or * self.stride + kr) as isize - (self.side / 2) as isize;
        let c = (oc * self.stride + kc) as isize - (self.side / 2) as isize;
        (r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width)
            .then_some((r as usize, c as usize))
    }
}

/// Split a rank-3 or rank-4 grid tensor into `(batch, h, w, c)`.
fn grid_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *x.dims() {
        [h, w, c] => Ok((1, h, w, c, false)),
        [b, h, w, c] => Ok((b, h, w, c, true)),
        _ => Err(Error::shape(op, x.dims(), &[0, 0, 0])),
    }
}

fn grid_tensor(batched: bool, b: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Tensor> {
    if batched {
        Tensor::from_vec([b, h, w, c], data)
    } else {
        Tensor::from_vec([h, w, c], data)
    }
}

/// Patch matrix `[positions x K*K*C]`; out-of-range taps are zero.
fn im2col(x: &[f64], g: &Geometry, c: usize) -> Vec<f64> {
    let cols = g.side * g.side * c;
    let mut out = vec![0.0; g.positions() * cols];
    let mut p = 0;
    for b in 0..g.batch {
        let img = &x[b * g.height * g.width * c..];
        for or in 0..g.out_h {
            for oc in 0..g.out_w {
                let row = &mut out[p * cols..(p + 1) * cols];
                for kr in 0..g.side {
                    for kc in 0..g.side {
                        if let Some((r, cc)) = g.source(or, oc, kr, kc) {
                            let t = (kr * g.side + kc) * c;
                            let src = (r * g.width + cc) * c;
                            row[t..t + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
                p += 1;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the grid.
fn col2im(cols: &[f64], g: &Geometry, c: usize) -> Vec<f64> {
    let width = g.side * g.side * c;
    let mut out = vec![0.0; g.batch * g.height * g.width * c];
    let mut p = 0;
    for b in 0..g.batch {
        let img = &mut out[b * g.height * g.width * c..(b + 1) * g.height * g.width * c];
        for or in 0..g.out_h {
            for oc in 0..g.out_w {
                let row = &cols[p * width..(p + 1) * width];
                for kr in 0..g.side {
                    for kc in 0..g.side {
                        if let Some((r, cc)) = g.source(or, oc, kr, kc) {
                            let t = (kr * g.side + kc) * c;
                            let dst = &mut img[(r * g.width + cc) * c..(r * g.width + cc + 1) * c];
                            for (d, v) in dst.iter_mut().zip(&row[t..t + c]) {
                                *d += v;
                            }
                        }
                    }
                }
                p += 1;
            }
        }
    }
    out
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok(())
}

/// `g_ij = bias + sum over in-range taps of m[r][c] * h[i*s + r - k][j*s + c - k]`.
pub fn conv2d(mask: &ConvMask, h: &Tensor, stride: usize) -> Result<Tensor> {
    Ok(conv_forward(mask, h, stride)?.0)
}

fn conv_forward(mask: &ConvMask, h: &Tensor, stride: usize) -> Result<(Tensor, Vec<f64>, Geometry)> {
    check_stride(stride)?;
    let (b, n, m, c, batched) = grid_dims(h, "conv2d")?;
    if c != mask.in_channels() {
        return Err(Error::shape("conv2d", h.dims(), mask.weight.value.dims()));
    }
    let g = Geometry::new(b, n, m, mask.side(), stride);
    let cols = im2col(h.data(), &g, c);
    let co = mask.out_channels();
    let mut out = vec![0.0; g.positions() * co];
    for row in out.chunks_exact_mut(co) {
        row.copy_from_slice(mask.bias.value.data());
    }
    let kk = g.side * g.side * c;
    gemm(
        g.positions(),
        co,
        kk,
        MatRef::row_major(&cols, kk),
        MatRef::row_major(mask.weight.value.data(), co),
        &mut out,
    );
    Ok((grid_tensor(batched, b, g.out_h, g.out_w, co, out)?, cols, g))
}

/// Adjoint of the linear part of [`conv2d`]: maps `Cout` channels back to
/// `Cin` channels at `in * stride` resolution. The mask bias is not applied.
pub fn transposed_conv2d(mask: &ConvMask, h: &Tensor, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let (b, n, m, c, batched) = grid_dims(h, "transposed_conv2d")?;
    if c != mask.out_channels() {
        return Err(Error::shape("transposed_conv2d", h.dims(), mask.weight.value.dims()));
    }
    let g = Geometry::new(b, n * stride, m * stride, mask.side(), stride);
    let cin = mask.in_channels();
    let kk = g.side * g.side * cin;
    let mut cols = vec![0.0; g.positions() * kk];
    gemm(
        g.positions(),
        kk,
        c,
        MatRef::row_major(h.data(), c),
        MatRef::transposed(mask.weight.value.data(), c),
        &mut cols,
    );
    grid_tensor(batched, b, g.height, g.width, cin, col2im(&cols, &g, cin))
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Vec<f64>,
    geometry: Geometry,
    batched: bool,
    output: Tensor,
}

fn activate(activation: Activation, out: &mut Tensor, pre: &mut Vec<f64>) {
    pre.clear();
    if activation == Activation::Relu {
        pre.extend_from_slice(out.data());
    }
    if activation != Activation::Identity {
        out.data_mut().iter_mut().for_each(|v| *v = activation.apply(*v));
    }
}

fn activation_grad(activation: Activation, upstream: &Tensor, output: &Tensor) -> Result<Vec<f64>> {
    if upstream.dims() != output.dims() {
        return Err(Error::shape("conv_backward", upstream.dims(), output.dims()));
    }
    Ok(if activation == Activation::Identity {
        upstream.data().to_vec()
    } else {
        upstream
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| g * activation.derivative_from_output(y))
            .collect()
    })
}

/// Trainable `activation(conv2d(mask, x, stride))`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub mask: ConvMask,
    pub stride: usize,
    pub activation: Activation,
    cache: Option<ConvCache>,
    pre: Vec<f64>,
}

impl ConvLayer {
    pub fn new(mask: ConvMask, stride: usize, activation: Activation) -> Self {
        ConvLayer {
            mask,
            stride,
            activation,
            cache: None,
            pre: Vec::new(),
        }
    }

    pub fn random(rng: &mut Rng, cin: usize, cout: usize, stride: usize, activation: Activation) -> Self {
        ConvLayer::new(ConvMask::random(rng, cin, cout), stride, activation)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (mut out, cols, geometry) = conv_forward(&self.mask, x, self.stride)?;
        activate(self.activation, &mut out, &mut self.pre);
        self.cache = Some(ConvCache {
            cols,
            geometry,
            batched: x.dims().len() == 4,
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("conv backward before forward".into()))?;
        let dz = activation_grad(self.activation, upstream, &cache.output)?;
        let g = cache.geometry;
        let (cin, co) = (self.mask.in_channels(), self.mask.out_channels());
        let kk = g.side * g.side * cin;
        let p = g.positions();
        gemm(
            kk,
            co,
            p,
            MatRef::transposed(&cache.cols, kk),
            MatRef::row_major(&dz, co),
            self.mask.weight.grad.data_mut(),
        );
        let db = self.mask.bias.grad.data_mut();
        for row in dz.chunks_exact(co) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let mut dcols = vec![0.0; p * kk];
        gemm(
            p,
            kk,
            co,
            MatRef::row_major(&dz, co),
            MatRef::transposed(self.mask.weight.value.data(), co),
            &mut dcols,
        );
        grid_tensor(cache.batched, g.batch, g.height, g.width, cin, col2im(&dcols, &g, cin))
    }

    pub fn kink_margin(&self) -> f64 {
        relu_margin(&self.pre)
    }
}

impl Parameterized for ConvLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("weight", &mut self.mask.weight);
        f("bias", &mut self.mask.bias);
    }
}

/// Trainable `activation(transposed_conv2d(mask, x, stride) + bias)`, taking
/// `mask.out_channels()` channels to `mask.in_channels()` channels.
#[derive(Clone, Debug)]
pub struct TransposedConvLayer {
    pub mask: ConvMask,
    pub bias: Parameter,
    pub stride: usize,
    pub activation: Activation,
    cache: Option<(Tensor, Tensor)>,
    pre: Vec<f64>,
}

impl TransposedConvLayer {
    /// `inputs` channels in, `outputs` channels out; the mask bias is unused.
    pub fn random(rng: &mut Rng, inputs: usize, outputs: usize, stride: usize, activation: Activation) -> Self {
        let w = glorot(rng, &[3, 3, outputs, inputs], 9 * inputs, 9 * outputs);
        let mask = ConvMask::new(w.value, Tensor::zeros([inputs])).expect("valid mask");
        TransposedConvLayer {
            mask,
            bias: Parameter::new(Tensor::zeros([outputs])),
            stride,
            activation,
            cache: None,
            pre: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = transposed_conv2d(&self.mask, x, self.stride)?;
        let c = self.mask.in_channels();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        activate(self.activation, &mut out, &mut self.pre);
        self.cache = Some((x.clone(), out.clone()));
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (x, y) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("transposed conv backward before forward".into()))?;
        let dz = activation_grad(self.activation, upstream, y)?;
        let (b, n, m, _, batched) = grid_dims(y, "transposed_conv_backward")?;
        let g = Geometry::new(b, n, m, self.mask.side(), self.stride);
        let (cin, co) = (self.mask.in_channels(), self.mask.out_channels());
        let kk = g.side * g.side * cin;
        let p = g.positions();

        let db = self.bias.grad.data_mut();
        for row in dz.chunks_exact(cin) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let dcols = im2col(&dz, &g, cin);
        gemm(
            kk,
            co,
            p,
            MatRef::transposed(&dcols, kk),
            MatRef::row_major(x.data(), co),
            self.mask.weight.grad.data_mut(),
        );
        let mut dx = vec![0.0; p * co];
        gemm(
            p,
            co,
            kk,
            MatRef::row_major(&dcols, kk),
            MatRef::row_major(self.mask.weight.value.data(), co),
            &mut dx,
        );
        grid_tensor(batched, b, g.out_h, g.out_w, co, dx)
    }

    pub fn kink_margin(&self) -> f64 {
        relu_margin(&self.pre)
    }
}

impl Parameterized for TransposedConvLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("weight", &mut self.mask.weight);
        f("bias", &mut self.bias);
    }
}
