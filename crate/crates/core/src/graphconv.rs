//! Graph convolution layers over [`PixelGraph`]s.
//!
//! [`SgcnLayer`] weights every neighbor feature by `ReLU(U z + b)`, where `z`
//! is the neighbor's offset, then mixes the `k` filter responses with a dense
//! readout. [`GcnLayer`] is the coordinate-blind baseline with fixed
//! degree-normalized edge weights.
//!
//! For a node `i`, aggregation runs over stored edges with `src == i` and
//! reads the features of `dst`; the edge offset is `coord(dst) - coord(src)`.
//! Edges are visited in ascending order, which fixes the summation order.

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::imagegraph::{PixelGraph, OFFSETS};
use crate::nn::{relu_margin, Activation, DenseLayer};
use crate::tensor::{Parameter, Parameterized, Tensor};

/// One spatial filter: `U` is `[I x 2]`, `b` is `[I]`.
#[derive(Clone, Debug)]
pub struct SgcnFilter {
    pub u: Parameter,
    pub b: Parameter,
}

impl SgcnFilter {
    pub fn new(u: Tensor, b: Tensor) -> Result<Self> {
        let (i, two) = u.matrix_dims()?;
        if two != 2 || b.dims() != [i] {
            return Err(Error::shape("SgcnFilter", u.dims(), b.dims()));
        }
        Ok(SgcnFilter {
            u: Parameter::new(u),
            b: Parameter::new(b),
        })
    }

    /// Same `(u, b)` in every input channel.
    pub fn uniform(width: usize, u: [f64; 2], b: f64) -> Self {
        let uu = (0..width).flat_map(|_| u).collect();
        SgcnFilter {
            u: Parameter::new(Tensor::from_vec([width, 2], uu).expect("sized")),
            b: Parameter::new(Tensor::full([width], b)),
        }
    }

    pub fn random(rng: &mut Rng, width: usize) -> Self {
        let u = (0..width * 2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        // Positive biases keep the center tap (offset 0, weight ReLU(b)) alive at start.
        let b = (0..width).map(|_| rng.uniform(0.0, 1.0)).collect();
        SgcnFilter {
            u: Parameter::new(Tensor::from_vec([width, 2], u).expect("sized")),
            b: Parameter::new(Tensor::from_vec([width], b).expect("sized")),
        }
    }

    pub fn width(&self) -> usize {
        self.b.value.numel()
    }

    /// Pre-activations `U z + b` laid out `[9 offsets x I]`.
    fn preactivations(&self, out: &mut [f64]) {
        let i = self.width();
        let u = self.u.value.data();
        let b = self.b.value.data();
        for (o, off) in OFFSETS.iter().enumerate() {
            let [dx, dy] = off.as_f64();
            for c in 0..i {
                out[o * i + c] = u[2 * c] * dx + u[2 * c + 1] * dy + b[c];
            }
        }
    }
}

/// Weighted neighbor sum for one filter: `[N x I]` to `[N x I]`.
pub fn sgcn_aggregate(graph: &PixelGraph, h: &Tensor, filter: &SgcnFilter) -> Result<Tensor> {
    let i = filter.width();
    check_features(graph, h, i, "sgcn_aggregate")?;
    let mut table = vec![0.0; 9 * i];
    filter.preactivations(&mut table);
    table.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = vec![0.0; graph.num_nodes() * i];
    let hd = h.data();
    for e in graph.edges() {
        let w = &table[e.offset.index() * i..(e.offset.index() + 1) * i];
        let src = &hd[e.dst * i..(e.dst + 1) * i];
        let dst = &mut out[e.src * i..(e.src + 1) * i];
        for c in 0..i {
            dst[c] += w[c] * src[c];
        }
    }
    Tensor::from_vec([graph.num_nodes(), i], out)
}

fn check_features(graph: &PixelGraph, h: &Tensor, width: usize, op: &'static str) -> Result<()> {
    let (n, c) = h.matrix_dims()?;
    if n != graph.num_nodes() || c != width {
        return Err(Error::shape(op, h.dims(), &[graph.num_nodes(), width]));
    }
    Ok(())
}

/// `k` spatial filters, concatenated per node in filter order, then a dense readout.
#[derive(Clone, Debug)]
pub struct SgcnLayer {
    pub filters: Vec<SgcnFilter>,
    pub readout: DenseLayer,
    cache: Option<SgcnCache>,
}

#[derive(Clone, Debug)]
struct SgcnCache {
    input: Tensor,
    /// `[9 x k x I]` pre-activations and their ReLUs.
    pre: Vec<f64>,
    weights: Vec<f64>,
}

impl SgcnLayer {
    pub fn new(filters: Vec<SgcnFilter>, readout: DenseLayer) -> Result<Self> {
        let Some(first) = filters.first() else {
            return Err(Error::Config("an SGCN layer needs at least one filter".into()));
        };
        let i = first.width();
        if filters.iter().any(|f| f.width() != i) || readout.inputs() != filters.len() * i {
            return Err(Error::shape(
                "SgcnLayer",
                &[filters.len(), i],
                readout.weight.value.dims(),
            ));
        }
        Ok(SgcnLayer {
            filters,
            readout,
            cache: None,
        })
    }

    pub fn random(rng: &mut Rng, inputs: usize, outputs: usize, k: usize, activation: Activation) -> Self {
        let filters = (0..k).map(|_| SgcnFilter::random(rng, inputs)).collect();
        let readout = DenseLayer::new(rng, k * inputs, outputs, activation);
        SgcnLayer::new(filters, readout).expect("consistent widths")
    }

    pub fn inputs(&self) -> usize {
        self.filters[0].width()
    }

    pub fn outputs(&self) -> usize {
        self.readout.outputs()
    }

    pub fn forward(&mut self, graph: &PixelGraph, h: &Tensor) -> Result<Tensor> {
        let i = self.inputs();
        let k = self.filters.len();
        let ki = k * i;
        check_features(graph, h, i, "sgcn_forward")?;
        let mut pre = vec![0.0; 9 * ki];
        let mut table = vec![0.0; 9 * i];
        for (f, filter) in self.filters.iter().enumerate() {
            filter.preactivations(&mut table);
            for o in 0..9 {
                pre[(o * k + f) * i..(o * k + f + 1) * i].copy_from_slice(&table[o * i..(o + 1) * i]);
            }
        }
        let weights: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();

        let mut hbar = vec![0.0; graph.num_nodes() * ki];
        let hd = h.data();
        for e in graph.edges() {
            let o = e.offset.index();
            let src = &hd[e.dst * i..(e.dst + 1) * i];
            let row = &mut hbar[e.src * ki..(e.src + 1) * ki];
            let wo = &weights[o * ki..(o + 1) * ki];
            for (rf, wf) in row.chunks_exact_mut(i).zip(wo.chunks_exact(i)) {
                for ((r, w), x) in rf.iter_mut().zip(wf).zip(src) {
                    *r += w * x;
                }
            }
        }
        let hbar = Tensor::from_vec([graph.num_nodes(), ki], hbar)?;
        let out = self.readout.forward(&hbar)?;
        self.cache = Some(SgcnCache {
            input: h.clone(),
            pre,
            weights,
        });
        Ok(out)
    }

    pub fn backward(&mut self, graph: &PixelGraph, upstream: &Tensor) -> Result<Tensor> {
        let dhbar = self.readout.backward(upstream)?;
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("sgcn backward before forward".into()))?;
        let i = self.inputs();
        let k = self.filters.len();
        let ki = k * i;
        if cache.input.dims()[0] != graph.num_nodes() {
            return Err(Error::shape("sgcn_backward", cache.input.dims(), &[graph.num_nodes()]));
        }
        let hd = cache.input.data();
        let gd = dhbar.data();
        let mut dh = vec![0.0; graph.num_nodes() * i];
        let mut dw = vec![0.0; 9 * ki];
        for e in graph.edges() {
            let o = e.offset.index();
            let g_row = &gd[e.src * ki..(e.src + 1) * ki];
            let h_src = &hd[e.dst * i..(e.dst + 1) * i];
            let dh_row = &mut dh[e.dst * i..(e.dst + 1) * i];
            let wo = &cache.weights[o * ki..(o + 1) * ki];
            let dwo = &mut dw[o * ki..(o + 1) * ki];
            for ((gf, wf), dwf) in g_row.chunks_exact(i).zip(wo.chunks_exact(i)).zip(dwo.chunks_exact_mut(i)) {
                for ((d, w), g) in dh_row.iter_mut().zip(wf).zip(gf) {
                    *d += w * g;
                }
                for ((d, g), x) in dwf.iter_mut().zip(gf).zip(h_src) {
                    *d += g * x;
                }
            }
        }
        for (f, filter) in self.filters.iter_mut().enumerate() {
            let du = filter.u.grad.data_mut();
            for (o, off) in OFFSETS.iter().enumerate() {
                let [dx, dy] = off.as_f64();
                for c in 0..i {
                    let idx = (o * k + f) * i + c;
                    if cache.pre[idx] > 0.0 {
                        du[2 * c] += dw[idx] * dx;
                        du[2 * c + 1] += dw[idx] * dy;
                    }
                }
            }
            let db = filter.b.grad.data_mut();
            for o in 0..9 {
                for c in 0..i {
                    let idx = (o * k + f) * i + c;
                    if cache.pre[idx] > 0.0 {
                        db[c] += dw[idx];
                    }
                }
            }
        }
        Tensor::from_vec([graph.num_nodes(), i], dh)
    }

    /// Smallest distance from a ReLU kink seen in the last forward, over the
    /// filter weight pre-activations and (if ReLU) the readout.
    pub fn kink_margin(&self) -> f64 {
        let filters = self.cache.as_ref().map_or(f64::INFINITY, |c| relu_margin(&c.pre));
        filters.min(self.readout.kink_margin())
    }
}

impl Parameterized for SgcnLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (n, filter) in self.filters.iter_mut().enumerate() {
            f(&format!("filter{n}.u"), &mut filter.u);
            f(&format!("filter{n}.b"), &mut filter.b);
        }
        self.readout.visit_params(&mut |name, p| f(&format!("readout.{name}"), p));
    }
}

/// Symmetric degree normalization `1 / sqrt(deg_src * deg_dst)` per edge,
/// where degrees count the self-edge.
pub fn gcn_normalize(graph: &PixelGraph) -> Vec<f64> {
    let deg = graph.degrees();
    graph
        .edges()
        .iter()
        .map(|e| 1.0 / ((deg[e.src] * deg[e.dst]) as f64).sqrt())
        .collect()
}

/// Vanilla GCN layer: fixed topology weights, then `ReLU(h W + bias)`.
/// Node coordinates are never read.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub linear: DenseLayer,
    cache: Option<Vec<f64>>,
}

impl GcnLayer {
    pub fn new(linear: DenseLayer) -> Self {
        GcnLayer { linear, cache: None }
    }

    pub fn random(rng: &mut Rng, inputs: usize, outputs: usize) -> Self {
        GcnLayer::new(DenseLayer::new(rng, inputs, outputs, Activation::Relu))
    }

    pub fn inputs(&self) -> usize {
        self.linear.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.linear.outputs()
    }

    pub fn forward(&mut self, graph: &PixelGraph, h: &Tensor) -> Result<Tensor> {
        let i = self.inputs();
        check_features(graph, h, i, "gcn_forward")?;
        let coef = gcn_normalize(graph);
        let mut hbar = vec![0.0; graph.num_nodes() * i];
        let hd = h.data();
        for (e, &u) in graph.edges().iter().zip(&coef) {
            let src = &hd[e.dst * i..(e.dst + 1) * i];
            let dst = &mut hbar[e.src * i..(e.src + 1) * i];
            for c in 0..i {
                dst[c] += u * src[c];
            }
        }
        let out = self.linear.forward(&Tensor::from_vec([graph.num_nodes(), i], hbar)?)?;
        self.cache = Some(coef);
        Ok(out)
    }

    pub fn backward(&mut self, graph: &PixelGraph, upstream: &Tensor) -> Result<Tensor> {
        let dhbar = self.linear.backward(upstream)?;
        let coef = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("gcn backward before forward".into()))?;
        let i = self.inputs();
        let mut dh = vec![0.0; graph.num_nodes() * i];
        let gd = dhbar.data();
        for (e, &u) in graph.edges().iter().zip(coef) {
            let g = &gd[e.src * i..(e.src + 1) * i];
            let d = &mut dh[e.dst * i..(e.dst + 1) * i];
            for c in 0..i {
                d[c] += u * g[c];
            }
        }
        Tensor::from_vec([graph.num_nodes(), i], dh)
    }

    pub fn kink_margin(&self) -> f64 {
        self.linear.kink_margin()
    }
}

impl Parameterized for GcnLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.linear.visit_params(f);
    }
}
