//! Query/key encoder pair, the momentum (EMA) update, and ghost batch splits.
//!
//! Architectures are registered by id and built from an [`ArchitectureSpec`];
//! every architecture is a backbone followed by a two-layer projection head
//! whose output is L2-normalized into the embedding.

mod network;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::InputShape;
use crate::error::{Error, Result};
use crate::rng::{stable_hash, RngStreams, INIT};

pub use network::{LayerKind, Network, NormMode, Trace, NORM_EPS, NORM_MOMENTUM};

pub const TINY_MLP: &str = "tiny-mlp";
pub const SMALL_CONV: &str = "small-conv";
pub const ARCHITECTURES: [&str; 2] = [TINY_MLP, SMALL_CONV];

/// Enough to rebuild an architecture: registry id, input shape, backbone
/// feature width and embedding dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub id: String,
    pub input: InputShape,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl ArchitectureSpec {
    pub fn tiny_mlp(input_dim: usize, hidden: usize, embedding_dim: usize) -> Self {
        Self { id: TINY_MLP.into(), input: InputShape::Vector { dim: input_dim }, hidden, embedding_dim }
    }

    pub fn build(&self) -> Result<Network> {
        if self.hidden == 0 || self.embedding_dim == 0 {
            return Err(Error::config("hidden width and embedding dimension must be positive"));
        }
        let h = self.hidden;
        let head = [
            LayerKind::Linear { inputs: h, outputs: h },
            LayerKind::Relu { width: h },
            LayerKind::Linear { inputs: h, outputs: self.embedding_dim },
        ];
        let backbone = match (self.id.as_str(), self.input) {
            (TINY_MLP, InputShape::Vector { dim }) => vec![
                LayerKind::Linear { inputs: dim, outputs: h },
                LayerKind::Norm { channels: h, spatial: 1 },
                LayerKind::Relu { width: h },
                LayerKind::Linear { inputs: h, outputs: h },
                LayerKind::Norm { channels: h, spatial: 1 },
                LayerKind::Relu { width: h },
            ],
            (SMALL_CONV, InputShape::Image { channels, height, width }) => {
                let c1 = (h / 2).max(1);
                let (h2, w2) = (height.div_ceil(2), width.div_ceil(2));
                vec![
                    LayerKind::Conv { in_channels: channels, out_channels: c1, height, width, stride: 1 },
                    LayerKind::Norm { channels: c1, spatial: height * width },
                    LayerKind::Relu { width: c1 * height * width },
                    LayerKind::Conv { in_channels: c1, out_channels: h, height, width, stride: 2 },
                    LayerKind::Norm { channels: h, spatial: h2 * w2 },
                    LayerKind::Relu { width: h * h2 * w2 },
                    LayerKind::AvgPool { channels: h, spatial: h2 * w2 },
                ]
            }
            (id @ (TINY_MLP | SMALL_CONV), shape) => {
                return Err(Error::config(format!("architecture {id} does not accept {shape:?} inputs")))
            }
            (id, _) => return Err(Error::config(format!("unknown architecture {id:?}; known: {ARCHITECTURES:?}"))),
        };
        let backbone_layers = backbone.len();
        Network::new(backbone.into_iter().chain(head).collect(), backbone_layers)
    }
}

/// `m·key + (1−m)·query`, coordinate-wise.
pub fn momentum_update(key: &[f64], query: &[f64], m: f64) -> Result<Vec<f64>> {
    let mut out = key.to_vec();
    momentum_update_in_place(&mut out, query, m)?;
    Ok(out)
}

pub fn momentum_update_in_place(key: &mut [f64], query: &[f64], m: f64) -> Result<()> {
    if key.len() != query.len() {
        return Err(Error::shape(format!("key has {} parameters, query {}", key.len(), query.len())));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(Error::config(format!("momentum must lie in [0, 1), got {m}")));
    }
    for (k, q) in key.iter_mut().zip(query) {
        *k = m * *k + (1.0 - m) * q;
    }
    Ok(())
}

/// Splits a batch into `ghost` contiguous, equally sized sub-batches.
pub fn ghost_split<'a>(batch: ArrayView2<'a, f64>, ghost: usize) -> Result<Vec<ArrayView2<'a, f64>>> {
    let rows = batch.nrows();
    if ghost == 0 || !rows.is_multiple_of(ghost) {
        return Err(Error::config(format!("batch of {rows} cannot be split into {ghost} ghost sub-batches")));
    }
    let size = rows / ghost;
    Ok((0..ghost).map(|g| batch.slice_move(s![g * size..(g + 1) * size, ..])).collect())
}

/// Bitwise fingerprint of a parameter vector.
pub fn checksum(values: &[f64]) -> u64 {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    stable_hash(&bytes)
}

/// Row-wise L2 normalization; also returns the pre-normalization norms.
pub fn normalize_rows(raw: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let norms: Vec<f64> = raw.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(Error::Degenerate(format!("encoder output row {i} has norm {}", norms[i])));
    }
    let mut out = raw.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((out, norms))
}

/// Pulls a gradient on normalized rows `z = u/‖u‖` back onto `u`.
pub fn normalize_rows_backward(z: &Array2<f64>, norms: &[f64], grad_z: &Array2<f64>) -> Array2<f64> {
    let mut g = grad_z.clone();
    for ((mut gr, zr), n) in g.rows_mut().into_iter().zip(z.rows()).zip(norms) {
        let proj = gr.dot(&zr);
        gr.scaled_add(-proj, &zr);
        gr.mapv_inplace(|v| v / n);
    }
    g
}

/// Query-side forward pass retained for backpropagation.
#[derive(Debug, Clone)]
pub struct QueryPass {
    pub embeddings: Array2<f64>,
    norms: Vec<f64>,
    trace: Trace,
}

/// Gradients produced by one contrastive step. The key side is always zero:
/// key parameters move only through [`momentum_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub query: Vec<f64>,
    pub key: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    spec: ArchitectureSpec,
    net: Network,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub query_stats: Vec<f64>,
    pub key_stats: Vec<f64>,
}

/// Which side of the pair to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

impl EncoderPair {
    /// Initializes query parameters from the `init` stream and copies them into the key.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let net = spec.build()?;
        let (query, query_stats) = net.init(&mut RngStreams::new(seed).stream(INIT, &[]));
        Ok(Self { key: query.clone(), key_stats: query_stats.clone(), query, query_stats, spec, net })
    }

    pub fn from_parts(
        spec: ArchitectureSpec,
        query: Vec<f64>,
        key: Vec<f64>,
        query_stats: Vec<f64>,
        key_stats: Vec<f64>,
    ) -> Result<Self> {
        let net = spec.build()?;
        if query.len() != net.param_count() || key.len() != net.param_count() {
            return Err(Error::shape(format!(
                "{} expects {} parameters per side, got {} and {}",
                spec.id,
                net.param_count(),
                query.len(),
                key.len()
            )));
        }
        if query_stats.len() != net.stat_count() || key_stats.len() != net.stat_count() {
            return Err(Error::shape("normalization statistics do not match the architecture"));
        }
        Ok(Self { spec, net, query, key, query_stats, key_stats })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn side(&self, side: Side) -> (&[f64], &[f64]) {
        match side {
            Side::Query => (&self.query, &self.query_stats),
            Side::Key => (&self.key, &self.key_stats),
        }
    }

    /// Normalized query embeddings; in training mode also refreshes the query
    /// running statistics.
    pub fn forward_query(&mut self, batch: ArrayView2<'_, f64>, mode: NormMode) -> Result<QueryPass> {
        let trace = self.net.forward(&self.query, &self.query_stats, batch, mode, self.net.layer_count())?;
        let (embeddings, norms) = normalize_rows(trace.output())?;
        if let Some(stats) = &trace.stats {
            self.query_stats.clone_from(stats);
        }
        Ok(QueryPass { embeddings, norms, trace })
    }

    /// Normalized key embeddings as plain values; nothing is retained for
    /// backpropagation.
    pub fn forward_key(&mut self, batch: ArrayView2<'_, f64>, mode: NormMode) -> Result<Array2<f64>> {
        let mut trace = self.net.forward(&self.key, &self.key_stats, batch, mode, self.net.layer_count())?;
        if let Some(stats) = trace.stats.take() {
            self.key_stats = stats;
        }
        Ok(normalize_rows(trace.output())?.0)
    }

    /// Gradient of a loss on the query embeddings w.r.t. the query parameters.
    pub fn query_gradient(&self, pass: &QueryPass, grad_embeddings: &Array2<f64>) -> PairGradients {
        let grad_raw = normalize_rows_backward(&pass.embeddings, &pass.norms, grad_embeddings);
        let (query, _) = self.net.backward(&self.query, &pass.trace, grad_raw);
        PairGradients { query, key: vec![0.0; self.key.len()] }
    }

    /// Evaluation-mode embeddings; pure.
    pub fn embed(&self, side: Side, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (p, s) = self.side(side);
        let trace = self.net.forward(p, s, inputs, NormMode::Eval, self.net.layer_count())?;
        Ok(normalize_rows(trace.output())?.0)
    }

    /// Evaluation-mode backbone features (input to the projection head).
    pub fn features(&self, side: Side, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (p, s) = self.side(side);
        let trace = self.net.forward(p, s, inputs, NormMode::Eval, self.net.backbone_layers())?;
        Ok(trace.output().clone())
    }

    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        momentum_update_in_place(&mut self.key, &self.query, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, dim), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn momentum_examples() {
        let out = momentum_update(&[0.8], &[0.4], 0.95).unwrap();
        assert!((out[0] - 0.78).abs() < 1e-15);
        assert_eq!(momentum_update(&[0.8, -3.0], &[0.4, 2.5], 0.0).unwrap(), vec![0.4, 2.5]);
        assert_eq!(momentum_update(&[0.3, 0.7], &[0.3, 0.7], 0.999).unwrap(), vec![0.3, 0.7]);
        assert!(matches!(momentum_update(&[0.1], &[0.1, 0.2], 0.5), Err(Error::Shape(_))));
        assert!(matches!(momentum_update(&[0.1], &[0.1], 1.0), Err(Error::Config(_))));
        assert!(matches!(momentum_update(&[0.1], &[0.1], -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn momentum_is_coordinatewise() {
        let key = [1.0, 2.0, 3.0];
        let base = momentum_update(&key, &[0.0, 0.0, 0.0], 0.7).unwrap();
        let bumped = momentum_update(&key, &[0.0, 5.0, 0.0], 0.7).unwrap();
        assert_eq!(base[0], bumped[0]);
        assert_eq!(base[2], bumped[2]);
        assert_ne!(base[1], bumped[1]);
    }

    #[test]
    fn ghost_split_examples() {
        let batch = Array2::<f64>::zeros((256, 3));
        let parts = ghost_split(batch.view(), 8).unwrap();
        assert_eq!(parts.len(), 8);
        assert!(parts.iter().all(|p| p.nrows() == 32));
        assert_eq!(ghost_split(batch.view(), 1).unwrap()[0].nrows(), 256);
        assert!(matches!(ghost_split(Array2::<f64>::zeros((7, 1)).view(), 2), Err(Error::Config(_))));
    }

    #[test]
    fn forward_outputs_are_unit_and_deterministic() {
        let mut pair = EncoderPair::new(ArchitectureSpec::tiny_mlp(6, 8, 4), 1).unwrap();
        let row = inputs(1, 6, 2);
        let repeated = Array2::from_shape_fn((5, 6), |(_, j)| row[[0, j]]);
        let out = pair.embed(Side::Query, repeated.view()).unwrap();
        for r in out.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
            assert_eq!(r, out.row(0));
        }
        let train = pair.forward_query(inputs(8, 6, 3).view(), NormMode::Train { ghost: 8 }).unwrap();
        for r in train.embeddings.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            pair.forward_query(inputs(6, 6, 3).view(), NormMode::Train { ghost: 4 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn query_and_key_agree_at_init() {
        let mut pair = EncoderPair::new(ArchitectureSpec::tiny_mlp(5, 8, 3), 4).unwrap();
        assert_eq!(pair.query, pair.key);
        let x = inputs(8, 5, 5);
        let q = pair.clone().forward_query(x.view(), NormMode::Train { ghost: 2 }).unwrap().embeddings;
        let k = pair.forward_key(x.view(), NormMode::Train { ghost: 2 }).unwrap();
        assert!((&q - &k).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn key_outputs_are_values() {
        let mut pair = EncoderPair::new(ArchitectureSpec::tiny_mlp(5, 8, 3), 4).unwrap();
        let x = inputs(4, 5, 6);
        let k = pair.forward_key(x.view(), NormMode::Eval).unwrap();
        let before = k.clone();
        pair.query.iter_mut().for_each(|p| *p += 1.0);
        pair.momentum_update(0.0).unwrap();
        assert_eq!(k, before);
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let u = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let probe = array![[0.7, 0.2, -0.5], [-0.3, 0.9, 0.4]];
        let f = |u: &Array2<f64>| (normalize_rows(u).unwrap().0 * &probe).sum();
        let (z, norms) = normalize_rows(&u).unwrap();
        let g = normalize_rows_backward(&z, &norms, &probe);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let (mut a, mut b) = (u.clone(), u.clone());
                a[[i, j]] += h;
                b[[i, j]] -= h;
                assert!(((f(&a) - f(&b)) / (2.0 * h) - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn small_conv_builds_and_runs() {
        let spec = ArchitectureSpec {
            id: SMALL_CONV.into(),
            input: InputShape::Image { channels: 3, height: 8, width: 8 },
            hidden: 8,
            embedding_dim: 4,
        };
        let mut pair = EncoderPair::new(spec, 0).unwrap();
        let out = pair.forward_query(inputs(4, 192, 1).view(), NormMode::Train { ghost: 2 }).unwrap();
        assert_eq!(out.embeddings.dim(), (4, 4));
        assert_eq!(pair.features(Side::Query, inputs(2, 192, 1).view()).unwrap().dim(), (2, 8));
    }

    #[test]
    fn unknown_or_mismatched_architectures_fail() {
        let mut spec = ArchitectureSpec::tiny_mlp(4, 4, 2);
        spec.id = "resnet-50".into();
        assert!(matches!(spec.build(), Err(Error::Config(_))));
        spec.id = SMALL_CONV.into();
        assert!(matches!(spec.build(), Err(Error::Config(_))));
    }
}
