//! Compiles any 3x3 convolution mask into SGCN parameters that reproduce it.
//!
//! Nine fixed filters span every function on the 3x3 offset grid: four corner
//! indicators, four half-plane "line" filters and a constant. A mask is written
//! in that basis by solving a 9x9 linear system, and the coefficients become the
//! readout weights of a 9-filter [`SgcnLayer`].

use crate::error::{Error, Result};
use crate::graphconv::{SgcnFilter, SgcnLayer};
use crate::imagegraph::{build_graph, pixel_of, IncompleteImage, OFFSETS};
use crate::nn::{Activation, DenseLayer};
use crate::refconv::{conv2d, ConvMask};
use crate::tensor::{Parameter, Tensor};

/// One basis filter: weights `ReLU(u . z + b)` over offsets `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisFilter {
    pub u: [f64; 2],
    pub b: f64,
}

/// The fixed nine-filter basis, in readout order.
#[derive(Clone, Debug)]
pub struct OffsetBasis {
    pub filters: [BasisFilter; 9],
}

impl Default for OffsetBasis {
    fn default() -> Self {
        let f = |ux: f64, uy: f64, b: f64| BasisFilter { u: [ux, uy], b };
        OffsetBasis {
            filters: [
                f(2.0, 2.0, -3.0),
                f(2.0, -2.0, -3.0),
                f(-2.0, 2.0, -3.0),
                f(-2.0, -2.0, -3.0),
                f(2.0, 0.0, -1.0),
                f(-2.0, 0.0, -1.0),
                f(0.0, 2.0, -1.0),
                f(0.0, -2.0, -1.0),
                f(0.0, 0.0, 1.0),
            ],
        }
    }
}

impl OffsetBasis {
    /// `table[z][f]`: weight of filter `f` at offset index `z`.
    pub fn matrix(&self) -> [[f64; 9]; 9] {
        let mut a = [[0.0; 9]; 9];
        for (f, filter) in self.filters.iter().enumerate() {
            let t = weight_table(filter.u, filter.b);
            for z in 0..9 {
                a[z][f] = t[z];
            }
        }
        a
    }

    /// Coefficients `alpha` with `sum_f alpha[f] * w_f(z) = target[z]` for every offset.
    pub fn solve(&self, target: &[f64; 9]) -> Result<[f64; 9]> {
        let a = self.matrix();
        let alpha = gauss_solve(a, *target)?;
        let residual = (0..9)
            .map(|z| ((0..9).map(|f| alpha[f] * a[z][f]).sum::<f64>() - target[z]).abs())
            .fold(0.0, f64::max);
        if residual >= 1e-10 {
            return Err(Error::SingularBasis);
        }
        Ok(alpha)
    }
}

/// `ReLU(u . z + b)` for each offset `z`, indexed by [`Offset::index`](crate::imagegraph::Offset::index)
/// (visual row-major order, top row first).
pub fn weight_table(u: [f64; 2], b: f64) -> [f64; 9] {
    let mut t = [0.0; 9];
    for off in OFFSETS {
        let [dx, dy] = off.as_f64();
        t[off.index()] = (u[0] * dx + u[1] * dy + b).max(0.0);
    }
    t
}

/// Basis coefficients of one 3x3 mask slice given in visual row-major order.
pub fn solve_basis(mask: &[f64; 9]) -> Result<[f64; 9]> {
    OffsetBasis::default().solve(mask)
}

fn gauss_solve(mut a: [[f64; 9]; 9], mut rhs: [f64; 9]) -> Result<[f64; 9]> {
    const N: usize = 9;
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::SingularBasis);
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..N {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                for k in col..N {
                    a[row][k] -= factor * a[col][k];
                }
                rhs[row] -= factor * rhs[col];
            }
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let mut s = rhs[row];
        for k in row + 1..N {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Ok(x)
}

/// A 9-filter SGCN layer equivalent to a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct CompiledLayer {
    pub layer: SgcnLayer,
}

/// Build the SGCN layer that reproduces `mask` (then `activation`) on complete images.
pub fn compile_mask(mask: &ConvMask, activation: Activation) -> Result<CompiledLayer> {
    if mask.side() != 3 {
        return Err(Error::Unsupported(format!(
            "only 3x3 masks can be compiled, got {0}x{0}",
            mask.side()
        )));
    }
    let basis = OffsetBasis::default();
    // beta[d]: basis coefficients of the indicator of offset d.
    let mut beta = [[0.0; 9]; 9];
    for (d, row) in beta.iter_mut().enumerate() {
        let mut e = [0.0; 9];
        e[d] = 1.0;
        *row = basis.solve(&e)?;
    }

    let (ci, co) = (mask.in_channels(), mask.out_channels());
    let m = mask.weight.value.data();
    let mut w = vec![0.0; 9 * ci * co];
    for f in 0..9 {
        for c in 0..ci {
            for o in 0..co {
                let mut acc = 0.0;
                for (d, b) in beta.iter().enumerate() {
                    acc += b[f] * m[(d * ci + c) * co + o];
                }
                w[(f * ci + c) * co + o] = acc;
            }
        }
    }
    let filters = basis
        .filters
        .iter()
        .map(|bf| SgcnFilter::uniform(ci, bf.u, bf.b))
        .collect();
    let readout = DenseLayer::from_params(
        Parameter::new(Tensor::from_vec([9 * ci, co], w)?),
        Parameter::new(mask.bias.value.clone()),
        activation,
    );
    Ok(CompiledLayer {
        layer: SgcnLayer::new(filters, readout)?,
    })
}

impl CompiledLayer {
    /// Run on an image's pixel graph and scatter back to an `[n x m x Cout]` grid
    /// (absent pixels stay 0).
    pub fn apply(&mut self, image: &IncompleteImage) -> Result<Tensor> {
        let graph = build_graph(image)?;
        let out = self.layer.forward(&graph, graph.features())?;
        let co = self.layer.outputs();
        let (h, w) = (image.height(), image.width());
        let mut grid = vec![0.0; h * w * co];
        for (i, c) in graph.coords().iter().enumerate() {
            let (r, col) = pixel_of(h, *c);
            let p = r as usize * w + col as usize;
            grid[p * co..(p + 1) * co].copy_from_slice(out.row(i));
        }
        Tensor::from_vec([h, w, co], grid)
    }
}

/// Max absolute differences between compiled SGCN and convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// Image treated as complete, identity and ReLU readouts.
    pub complete_identity: f64,
    pub complete_relu: f64,
    /// Image with its missing set, compared at observed pixels against the
    /// zero-imputed convolution.
    pub incomplete_identity: f64,
    pub incomplete_relu: f64,
    pub observed: usize,
    pub tol: f64,
}

impl EquivalenceReport {
    pub fn max_diff(&self) -> f64 {
        [
            self.complete_identity,
            self.complete_relu,
            self.incomplete_identity,
            self.incomplete_relu,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_diff() < self.tol
    }
}

/// Check both readout activations on `image` as complete and as given.
pub fn verify_equivalence(mask: &ConvMask, image: &IncompleteImage, tol: f64) -> Result<EquivalenceReport> {
    let complete = IncompleteImage::complete(image.values().clone())?;
    // Missing pixels are stored as zeros, so this is also the zero-imputed tensor.
    let reference = conv2d(mask, image.values(), 1)?;
    let mut diffs = [0.0; 4];
    for (a, activation) in [Activation::Identity, Activation::Relu].into_iter().enumerate() {
        let mut compiled = compile_mask(mask, activation)?;
        let expect = reference.map(|v| activation.apply(v));
        diffs[a] = compiled.apply(&complete)?.max_abs_diff(&expect)?;
        let got = compiled.apply(image)?;
        let co = mask.out_channels();
        let mut worst = 0.0f64;
        for (p, missing) in image.missing_mask().iter().enumerate() {
            if !missing {
                for o in p * co..(p + 1) * co {
                    worst = worst.max((got.data()[o] - expect.data()[o]).abs());
                }
            }
        }
        diffs[2 + a] = worst;
    }
    Ok(EquivalenceReport {
        complete_identity: diffs[0],
        complete_relu: diffs[1],
        incomplete_identity: diffs[2],
        incomplete_relu: diffs[3],
        observed: image.observed_count(),
        tol,
    })
}
