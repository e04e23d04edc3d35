use crate::data::Rng;
use crate::error::{Error, Result};
use crate::graphconv::{GcnLayer, SgcnLayer};
use crate::imagegraph::GraphBatch;
use crate::nn::{Activation, BatchNorm, DenseLayer, GlobalMeanPool};
use crate::refconv::{ConvLayer, TransposedConvLayer};
use crate::tensor::{Parameter, Parameterized, Tensor};

/// Graph convolution used by a graph classifier.
#[derive(Clone, Debug)]
pub enum GraphLayer {
    Sgcn(SgcnLayer),
    Gcn(GcnLayer),
}

impl GraphLayer {
    fn forward(&mut self, batch: &GraphBatch, h: &Tensor) -> Result<Tensor> {
        match self {
            GraphLayer::Sgcn(l) => l.forward(&batch.graph, h),
            GraphLayer::Gcn(l) => l.forward(&batch.graph, h),
        }
    }

    fn backward(&mut self, batch: &GraphBatch, g: &Tensor) -> Result<Tensor> {
        match self {
            GraphLayer::Sgcn(l) => l.backward(&batch.graph, g),
            GraphLayer::Gcn(l) => l.backward(&batch.graph, g),
        }
    }

    pub fn kink_margin(&self) -> f64 {
        match self {
            GraphLayer::Sgcn(l) => l.kink_margin(),
            GraphLayer::Gcn(l) => l.kink_margin(),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        let mut named = |n: &str, p: &mut Parameter| f(&format!("{prefix}.{n}"), p);
        match self {
            GraphLayer::Sgcn(l) => l.visit_params(&mut named),
            GraphLayer::Gcn(l) => l.visit_params(&mut named),
        }
    }
}

fn visit_bn(bn: &mut BatchNorm, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
    bn.visit_params(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

fn visit_bn_buffers(bn: &mut BatchNorm, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    bn.visit_buffers(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

/// Graph layers (each followed by batch norm), global mean pool, dense head.
#[derive(Clone, Debug)]
pub struct GraphClassifier {
    pub layers: Vec<(GraphLayer, BatchNorm)>,
    pub pool: GlobalMeanPool,
    pub head: DenseLayer,
}

impl GraphClassifier {
    /// `filters` is the SGCN filter count; `None` builds the GCN baseline.
    pub fn new(rng: &mut Rng, channels: usize, layers: usize, width: usize, filters: Option<usize>, classes: usize) -> Self {
        let mut stack = Vec::with_capacity(layers);
        let mut inputs = channels;
        for _ in 0..layers {
            let layer = match filters {
                Some(k) => GraphLayer::Sgcn(SgcnLayer::random(rng, inputs, width, k, Activation::Relu)),
                None => GraphLayer::Gcn(GcnLayer::random(rng, inputs, width)),
            };
            stack.push((layer, BatchNorm::new(width)));
            inputs = width;
        }
        GraphClassifier {
            layers: stack,
            pool: GlobalMeanPool::new(),
            head: DenseLayer::new(rng, inputs, classes, Activation::Identity),
        }
    }

    pub fn forward(&mut self, batch: &GraphBatch, training: bool) -> Result<Tensor> {
        let mut h = batch.graph.features().clone();
        for (layer, bn) in &mut self.layers {
            h = layer.forward(batch, &h)?;
            h = bn.forward(&h, training)?;
        }
        let pooled = self.pool.forward(&h, &batch.membership, batch.num_graphs())?;
        self.head.forward(&pooled)
    }

    /// Returns the gradient with respect to the node features.
    pub fn backward(&mut self, batch: &GraphBatch, dlogits: &Tensor) -> Result<Tensor> {
        let mut g = self.pool.backward(&self.head.backward(dlogits)?)?;
        for (layer, bn) in self.layers.iter_mut().rev() {
            g = bn.backward(&g)?;
            g = layer.backward(batch, &g)?;
        }
        Ok(g)
    }

    pub fn kink_margin(&self) -> f64 {
        self.layers.iter().map(|(l, _)| l.kink_margin()).fold(f64::INFINITY, f64::min)
    }
}

impl Parameterized for GraphClassifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, (layer, bn)) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("layer{i}.conv"), f);
            visit_bn(bn, &format!("layer{i}.bn"), f);
        }
        self.head.visit_params(&mut |n, p| f(&format!("head.{n}"), p));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (_, bn)) in self.layers.iter_mut().enumerate() {
            visit_bn_buffers(bn, &format!("layer{i}.bn"), f);
        }
    }
}

/// 3x3 stride-1 ReLU convolutions (each followed by batch norm), global
/// spatial mean pool, dense head. Consumes imputed `[B x n x m x C]` grids.
#[derive(Clone, Debug)]
pub struct CnnClassifier {
    pub layers: Vec<(ConvLayer, BatchNorm)>,
    pub pool: GlobalMeanPool,
    pub head: DenseLayer,
    positions: usize,
}

impl CnnClassifier {
    pub fn new(rng: &mut Rng, channels: usize, layers: usize, width: usize, classes: usize) -> Self {
        let mut stack = Vec::with_capacity(layers);
        let mut inputs = channels;
        for _ in 0..layers {
            stack.push((ConvLayer::random(rng, inputs, width, 1, Activation::Relu), BatchNorm::new(width)));
            inputs = width;
        }
        CnnClassifier {
            layers: stack,
            pool: GlobalMeanPool::new(),
            head: DenseLayer::new(rng, inputs, classes, Activation::Identity),
            positions: 0,
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let &[b, n, m, _] = x.dims() else {
            return Err(Error::shape("cnn_forward", x.dims(), &[0, 0, 0, 0]));
        };
        let mut h = x.clone();
        for (conv, bn) in &mut self.layers {
            h = conv.forward(&h)?;
            h = bn.forward(&h, training)?;
        }
        let c = *h.dims().last().expect("rank 4");
        self.positions = n * m;
        let membership: Vec<usize> = (0..b * n * m).map(|i| i / (n * m)).collect();
        let flat = h.reshape([b * n * m, c])?;
        let pooled = self.pool.forward(&flat, &membership, b)?;
        self.head.forward(&pooled)
    }

    pub fn backward(&mut self, dlogits: &Tensor, input_dims: &[usize]) -> Result<Tensor> {
        let g = self.pool.backward(&self.head.backward(dlogits)?)?;
        let c = g.dims()[1];
        let mut g = g.reshape([input_dims[0], input_dims[1], input_dims[2], c])?;
        for (conv, bn) in self.layers.iter_mut().rev() {
            g = bn.backward(&g)?;
            g = conv.backward(&g)?;
        }
        Ok(g)
    }

    pub fn kink_margin(&self) -> f64 {
        self.layers.iter().map(|(l, _)| l.kink_margin()).fold(f64::INFINITY, f64::min)
    }
}

impl Parameterized for CnnClassifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, (conv, bn)) in self.layers.iter_mut().enumerate() {
            conv.visit_params(&mut |n, p| f(&format!("layer{i}.conv.{n}"), p));
            visit_bn(bn, &format!("layer{i}.bn"), f);
        }
        self.head.visit_params(&mut |n, p| f(&format!("head.{n}"), p));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (_, bn)) in self.layers.iter_mut().enumerate() {
            visit_bn_buffers(bn, &format!("layer{i}.bn"), f);
        }
    }
}

/// Prepared mini-batch for either classifier family.
#[derive(Clone, Debug)]
pub enum ClassifierInput {
    Graph(GraphBatch),
    Grid(Tensor),
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Graph(GraphClassifier),
    Cnn(CnnClassifier),
}

impl Classifier {
    pub fn forward(&mut self, input: &ClassifierInput, training: bool) -> Result<Tensor> {
        match (self, input) {
            (Classifier::Graph(m), ClassifierInput::Graph(b)) => m.forward(b, training),
            (Classifier::Cnn(m), ClassifierInput::Grid(x)) => m.forward(x, training),
            _ => Err(Error::Config("classifier input does not match the backbone".into())),
        }
    }

    pub fn backward(&mut self, input: &ClassifierInput, dlogits: &Tensor) -> Result<Tensor> {
        match (self, input) {
            (Classifier::Graph(m), ClassifierInput::Graph(b)) => m.backward(b, dlogits),
            (Classifier::Cnn(m), ClassifierInput::Grid(x)) => m.backward(dlogits, x.dims()),
            _ => Err(Error::Config("classifier input does not match the backbone".into())),
        }
    }

    pub fn kink_margin(&self) -> f64 {
        match self {
            Classifier::Graph(m) => m.kink_margin(),
            Classifier::Cnn(m) => m.kink_margin(),
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Classifier::Graph(m) => m.layers.iter_mut().map(|(_, bn)| bn).collect(),
            Classifier::Cnn(m) => m.layers.iter_mut().map(|(_, bn)| bn).collect(),
        }
    }
}

impl Parameterized for Classifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        match self {
            Classifier::Graph(m) => m.visit_params(f),
            Classifier::Cnn(m) => m.visit_params(f),
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Classifier::Graph(m) => m.visit_buffers(f),
            Classifier::Cnn(m) => m.visit_buffers(f),
        }
    }
}

/// Grid decoder: two stride-2 convolutions down, two stride-2 transposed
/// convolutions up, and a final 3x3 convolution with sigmoid output.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub down: [ConvLayer; 2],
    pub up: [TransposedConvLayer; 2],
    pub out: ConvLayer,
}

impl Decoder {
    /// `widths` are the channel counts after each of the four resampling layers.
    pub fn new(rng: &mut Rng, inputs: usize, widths: [usize; 4], outputs: usize) -> Self {
        let d0 = ConvLayer::random(rng, inputs, widths[0], 2, Activation::Relu);
        let d1 = ConvLayer::random(rng, widths[0], widths[1], 2, Activation::Relu);
        let u0 = TransposedConvLayer::random(rng, widths[1], widths[2], 2, Activation::Relu);
        let u1 = TransposedConvLayer::random(rng, widths[2], widths[3], 2, Activation::Relu);
        let out = ConvLayer::random(rng, widths[3], outputs, 1, Activation::Sigmoid);
        Decoder {
            down: [d0, d1],
            up: [u0, u1],
            out,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let d = x.dims();
        if d.len() != 4 || d[1] % 4 != 0 || d[2] % 4 != 0 {
            return Err(Error::Unsupported(format!(
                "decoder needs a [B x n x m x C] grid with n and m divisible by 4, got {d:?}"
            )));
        }
        let mut h = self.down[0].forward(x)?;
        h = self.down[1].forward(&h)?;
        h = self.up[0].forward(&h)?;
        h = self.up[1].forward(&h)?;
        self.out.forward(&h)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let mut g = self.out.backward(g)?;
        g = self.up[1].backward(&g)?;
        g = self.up[0].backward(&g)?;
        g = self.down[1].backward(&g)?;
        self.down[0].backward(&g)
    }

    pub fn kink_margin(&self) -> f64 {
        [
            self.down[0].kink_margin(),
            self.down[1].kink_margin(),
            self.up[0].kink_margin(),
            self.up[1].kink_margin(),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }
}

impl Parameterized for Decoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, l) in self.down.iter_mut().enumerate() {
            l.visit_params(&mut |n, p| f(&format!("decoder.down{i}.{n}"), p));
        }
        for (i, l) in self.up.iter_mut().enumerate() {
            l.visit_params(&mut |n, p| f(&format!("decoder.up{i}.{n}"), p));
        }
        self.out.visit_params(&mut |n, p| f(&format!("decoder.out.{n}"), p));
    }
}

/// SGCN encoder on the pixel graph, node embeddings scattered back to the
/// grid with a missing-pixel channel, then a convolutional [`Decoder`].
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Vec<(SgcnLayer, Option<BatchNorm>)>,
    pub decoder: Decoder,
    embedding: usize,
}

impl Autoencoder {
    pub fn new(
        rng: &mut Rng,
        channels: usize,
        encoder_widths: &[usize],
        filters: usize,
        batch_norm: bool,
        decoder_widths: [usize; 4],
    ) -> Result<Self> {
        if encoder_widths.is_empty() || encoder_widths.contains(&0) || filters == 0 {
            return Err(Error::Config("encoder needs at least one layer of positive width".into()));
        }
        let mut encoder = Vec::with_capacity(encoder_widths.len());
        let mut inputs = channels;
        for &w in encoder_widths {
            let layer = SgcnLayer::random(rng, inputs, w, filters, Activation::Relu);
            encoder.push((layer, batch_norm.then(|| BatchNorm::new(w))));
            inputs = w;
        }
        let decoder = Decoder::new(rng, inputs + 1, decoder_widths, channels);
        Ok(Autoencoder {
            encoder,
            decoder,
            embedding: inputs,
        })
    }

    /// Reconstruction `[B x n x m x l]` in (0, 1).
    pub fn forward(&mut self, batch: &GraphBatch, training: bool) -> Result<Tensor> {
        let mut h = batch.graph.features().clone();
        for (layer, bn) in &mut self.encoder {
            h = layer.forward(&batch.graph, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(&h, training)?;
            }
        }
        let grid = batch.scatter(&h, 0.0, true)?;
        self.decoder.forward(&grid)
    }

    /// Returns the gradient with respect to the node features.
    pub fn backward(&mut self, batch: &GraphBatch, g: &Tensor) -> Result<Tensor> {
        let dgrid = self.decoder.backward(g)?;
        let mut g = batch.gather(&dgrid, self.embedding)?;
        for (layer, bn) in self.encoder.iter_mut().rev() {
            if let Some(bn) = bn {
                g = bn.backward(&g)?;
            }
            g = layer.backward(&batch.graph, &g)?;
        }
        Ok(g)
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.encoder.iter_mut().filter_map(|(_, bn)| bn.as_mut()).collect()
    }

    pub fn kink_margin(&self) -> f64 {
        self.encoder
            .iter()
            .map(|(l, _)| l.kink_margin())
            .fold(self.decoder.kink_margin(), f64::min)
    }
}

impl Parameterized for Autoencoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, (layer, bn)) in self.encoder.iter_mut().enumerate() {
            layer.visit_params(&mut |n, p| f(&format!("encoder{i}.conv.{n}"), p));
            if let Some(bn) = bn {
                visit_bn(bn, &format!("encoder{i}.bn"), f);
            }
        }
        self.decoder.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (_, bn)) in self.encoder.iter_mut().enumerate() {
            if let Some(bn) = bn {
                visit_bn_buffers(bn, &format!("encoder{i}.bn"), f);
            }
        }
    }
}
