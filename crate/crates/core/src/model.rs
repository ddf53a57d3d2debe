//! CATT-Net: two unshared ConvNet4 embedders, conditional channel and spatial
//! attention over the pair of cell embeddings, and a linear classifier on the
//! gated union-crop features. Two ablations drop the attention branch or the
//! images altogether.

use std::fmt;
use std::str::FromStr;

use catt_tensor::{BatchNorm2d, Conv2d, Graph, Linear, Mode, ParamStore, Real, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAttention,
    PositionOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoAttention, Variant::PositionOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no_attention",
            Variant::PositionOnly => "position_only",
        }
    }

    pub fn uses_images(self) -> bool {
        self != Variant::PositionOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_attention" | "noatt" => Ok(Variant::NoAttention),
            "position_only" | "pos" => Ok(Variant::PositionOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (full | no_attention | position_only)"
            ))),
        }
    }
}

/// Number of position features per pair: both boxes' normalized corners and
/// the center offset from cell a to cell b.
pub const POSITION_FEATURES: usize = 10;
pub const NUM_CLASSES: usize = 3;
const BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub channels: usize,
    pub attention_hidden: usize,
    pub classifier_hidden: usize,
    pub position_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            input_size: 84,
            channels: 64,
            attention_hidden: 256,
            classifier_hidden: 512,
            position_hidden: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Side of the embedding map after four 2x2 poolings.
    pub fn feature_side(&self) -> usize {
        (0..BLOCKS).fold(self.input_size, |s, _| s / 2)
    }

    pub fn feature_dim(&self) -> usize {
        self.channels * self.feature_side() * self.feature_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 1 << BLOCKS {
            return Err(Error::InvalidArgument(format!(
                "input size {} cannot be pooled {BLOCKS} times",
                self.input_size
            )));
        }
        let widths = [
            ("channels", self.channels),
            ("attention_hidden", self.attention_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("position_hidden", self.position_hidden),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// conv3x3 - batch norm - relu - maxpool2, four times.
#[derive(Clone, Debug)]
pub struct ConvNet4<E> {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d<E>>,
}

impl<E: Real> ConvNet4<E> {
    fn new(store: &mut ParamStore<E>, prefix: &str, channels: usize, seed: u64) -> Result<Self> {
        let mut convs = Vec::with_capacity(BLOCKS);
        let mut norms = Vec::with_capacity(BLOCKS);
        for i in 0..BLOCKS {
            let in_c = if i == 0 { 1 } else { channels };
            convs.push(Conv2d::new(store, &format!("{prefix}.block{i}.conv"), in_c, channels, 3, seed)?);
            norms.push(BatchNorm2d::new(store, &format!("{prefix}.block{i}.bn"), channels)?);
        }
        Ok(Self { convs, norms })
    }

    fn forward(&mut self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&mut self.norms) {
            let c = conv.forward(g, store, h)?;
            let n = bn.forward(g, store, c, mode)?;
            let r = g.relu(n);
            h = g.maxpool2(r)?;
        }
        Ok(h)
    }

    fn infer(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            let c = conv.forward(g, store, h)?;
            let running = bn
                .running
                .as_ref()
                .ok_or_else(|| TensorError::UninitializedRunningStats(bn.name.clone()))?;
            let gamma = g.param(store, bn.gamma);
            let beta = g.param(store, bn.beta);
            let n = g.batch_norm_eval(c, gamma, beta, &running.mean, &running.var, bn.eps)?;
            let r = g.relu(n);
            h = g.maxpool2(r)?;
        }
        Ok(h)
    }

    pub fn norms(&self) -> &[BatchNorm2d<E>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNorm2d<E>] {
        &mut self.norms
    }
}

/// Fully connected layers with relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new<E: Real>(store: &mut ParamStore<E>, prefix: &str, sizes: &[usize], seed: u64) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.fc{}", i + 1), w[0], w[1], seed))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { layers })
    }

    fn forward<E: Real>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

/// One batch of pairs, images already letterboxed and scaled to ink = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<E> {
    pub cell_a: Tensor<E>,
    pub cell_b: Tensor<E>,
    pub union: Tensor<E>,
    pub positions: Tensor<E>,
    pub labels: Vec<usize>,
}

impl<E: Real> PairBatch<E> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The same batch with cell a and cell b exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            cell_a: self.cell_b.clone(),
            cell_b: self.cell_a.clone(),
            ..self.clone()
        }
    }
}

/// Intermediate values of one forward pass, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub channel_attention: Option<Var>,
    pub spatial_attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<E> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    cell_embed: Option<ConvNet4<E>>,
    table_embed: Option<ConvNet4<E>>,
    channel_att: Option<Mlp>,
    spatial_att: Option<Mlp>,
    classifier: Option<Mlp>,
    position: Option<Mlp>,
}

pub fn build_model<E: Real>(config: &ModelConfig) -> Result<Model<E>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let s = config.seed;
    let d = config.feature_dim();
    let side = config.feature_side();
    let mut model = Model {
        config: config.clone(),
        store: ParamStore::new(),
        cell_embed: None,
        table_embed: None,
        channel_att: None,
        spatial_att: None,
        classifier: None,
        position: None,
    };
    match config.variant {
        Variant::Full => {
            model.cell_embed = Some(ConvNet4::new(&mut store, "cell_embed", config.channels, s)?);
            model.table_embed = Some(ConvNet4::new(&mut store, "table_embed", config.channels, s)?);
            let h = config.attention_hidden;
            model.channel_att = Some(Mlp::new(&mut store, "channel_att", &[d, h, config.channels], s)?);
            model.spatial_att = Some(Mlp::new(&mut store, "spatial_att", &[d, h, side * side], s)?);
            model.classifier = Some(Mlp::new(&mut store, "classifier", &[d, config.classifier_hidden, NUM_CLASSES], s)?);
        }
        Variant::NoAttention => {
            model.table_embed = Some(ConvNet4::new(&mut store, "table_embed", config.channels, s)?);
            model.classifier = Some(Mlp::new(&mut store, "classifier", &[d, config.classifier_hidden, NUM_CLASSES], s)?);
        }
        Variant::PositionOnly => {
            let h = config.position_hidden;
            model.position = Some(Mlp::new(&mut store, "position", &[POSITION_FEATURES, h, h, NUM_CLASSES], s)?);
        }
    }
    model.store = store;
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Embedder {
    Cell,
    Table,
}

struct Heads<'a> {
    channel_att: Option<&'a Mlp>,
    spatial_att: Option<&'a Mlp>,
    classifier: Option<&'a Mlp>,
    position: Option<&'a Mlp>,
}

fn missing(part: &str) -> Error {
    Error::InvalidArgument(format!("model has no {part}"))
}

/// `sigmoid(f(e_l) + f(e_m))` for `pair = [e_l; e_m]` flattened, reshaped to
/// `shape`.
fn gate<E: Real>(g: &mut Graph<E>, store: &ParamStore<E>, f: &Mlp, pair: Var, shape: &[usize]) -> Result<Var> {
    let h = f.forward(g, store, pair)?;
    let h = g.fold_halves(h)?;
    let h = g.sigmoid(h);
    Ok(g.reshape(h, shape)?)
}

fn forward_with<E: Real>(
    g: &mut Graph<E>,
    batch: &PairBatch<E>,
    config: &ModelConfig,
    store: &ParamStore<E>,
    heads: Heads<'_>,
    mut embed: impl FnMut(&mut Graph<E>, Embedder, Var) -> Result<Var>,
) -> Result<ForwardVars> {
    let n = batch.len();
    if config.variant == Variant::PositionOnly {
        let x = g.constant(batch.positions.clone());
        let logits = heads.position.ok_or_else(|| missing("position head"))?.forward(g, store, x)?;
        return Ok(ForwardVars {
            logits,
            channel_attention: None,
            spatial_attention: None,
        });
    }
    let union = g.constant(batch.union.clone());
    let table = embed(g, Embedder::Table, union)?;
    let classifier = heads.classifier.ok_or_else(|| missing("classifier"))?;
    if config.variant == Variant::NoAttention {
        let flat = g.flatten(table)?;
        let logits = classifier.forward(g, store, flat)?;
        return Ok(ForwardVars {
            logits,
            channel_attention: None,
            spatial_attention: None,
        });
    }
    // Both cells go through the embedder as one batch [a; b]; the attention
    // MLPs run on all 2N rows and the two halves are summed, which keeps the
    // result symmetric in a and b.
    let a = g.constant(batch.cell_a.clone());
    let b = g.constant(batch.cell_b.clone());
    let cells = g.concat_batch(a, b)?;
    let e = embed(g, Embedder::Cell, cells)?;
    let flat = g.flatten(e)?;
    let side = config.feature_side();

    let channel = heads.channel_att.ok_or_else(|| missing("channel attention"))?;
    let a_ca = gate(g, store, channel, flat, &[n, config.channels, 1, 1])?;
    let spatial = heads.spatial_att.ok_or_else(|| missing("spatial attention"))?;
    let a_sp = gate(g, store, spatial, flat, &[n, 1, side, side])?;

    let attention = g.mul(a_ca, a_sp)?;
    let fused = g.mul(attention, table)?;
    let flat = g.flatten(fused)?;
    let logits = classifier.forward(g, store, flat)?;
    Ok(ForwardVars {
        logits,
        channel_attention: Some(a_ca),
        spatial_attention: Some(a_sp),
    })
}

impl<E: Real> Model<E> {
    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.store.names().map(str::to_string).collect()
    }

    /// Every batch-norm layer, cell embedder first.
    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<E>> {
        self.cell_embed
            .iter()
            .chain(&self.table_embed)
            .flat_map(|n| n.norms().iter())
            .collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<E>> {
        self.cell_embed
            .iter_mut()
            .chain(self.table_embed.iter_mut())
            .flat_map(|n| n.norms_mut().iter_mut())
            .collect()
    }

    fn check_batch(&self, batch: &PairBatch<E>) -> Result<()> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if self.config.variant.uses_images() {
            let s = self.config.input_size;
            let want = [n, 1, s, s];
            let images: &[(&str, &Tensor<E>)] = if self.config.variant == Variant::Full {
                &[("cell_a", &batch.cell_a), ("cell_b", &batch.cell_b), ("union", &batch.union)]
            } else {
                &[("union", &batch.union)]
            };
            for (name, t) in images {
                if t.shape() != want {
                    return Err(Error::InvalidArgument(format!(
                        "{name} images have shape {:?}, expected {want:?}",
                        t.shape()
                    )));
                }
            }
        } else if batch.positions.shape() != [n, POSITION_FEATURES] {
            return Err(Error::InvalidArgument(format!(
                "position features have shape {:?}, expected [{n}, {POSITION_FEATURES}]",
                batch.positions.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass. In training mode batch norms normalise with batch
    /// statistics and update their running averages; evaluation mode defers
    /// to [`Model::infer`].
    pub fn forward(&mut self, g: &mut Graph<E>, batch: &PairBatch<E>, mode: Mode) -> Result<ForwardVars> {
        if mode == Mode::Eval {
            return self.infer(g, batch);
        }
        self.check_batch(batch)?;
        let Model {
            config,
            store,
            cell_embed,
            table_embed,
            channel_att,
            spatial_att,
            classifier,
            position,
        } = self;
        let heads = Heads {
            channel_att: channel_att.as_ref(),
            spatial_att: spatial_att.as_ref(),
            classifier: classifier.as_ref(),
            position: position.as_ref(),
        };
        let store = &*store;
        forward_with(g, batch, config, store, heads, |g, which, x| {
            let net = match which {
                Embedder::Cell => cell_embed.as_mut(),
                Embedder::Table => table_embed.as_mut(),
            };
            net.ok_or_else(|| missing("embedder"))?.forward(g, store, x, Mode::Train)
        })
    }

    /// Evaluation-mode forward pass on a frozen model.
    pub fn infer(&self, g: &mut Graph<E>, batch: &PairBatch<E>) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let heads = Heads {
            channel_att: self.channel_att.as_ref(),
            spatial_att: self.spatial_att.as_ref(),
            classifier: self.classifier.as_ref(),
            position: self.position.as_ref(),
        };
        forward_with(g, batch, &self.config, &self.store, heads, |g, which, x| {
            let net = match which {
                Embedder::Cell => self.cell_embed.as_ref(),
                Embedder::Table => self.table_embed.as_ref(),
            };
            net.ok_or_else(|| missing("embedder"))?.infer(g, &self.store, x)
        })
    }

    /// Cell embedder on `[N, 1, S, S]` images.
    pub fn embed_cell(&mut self, g: &mut Graph<E>, images: Var, mode: Mode) -> Result<Var> {
        self.embed(g, Embedder::Cell, images, mode)
    }

    /// Union-crop embedder on `[N, 1, S, S]` images.
    pub fn embed_table(&mut self, g: &mut Graph<E>, images: Var, mode: Mode) -> Result<Var> {
        self.embed(g, Embedder::Table, images, mode)
    }

    fn embed(&mut self, g: &mut Graph<E>, which: Embedder, images: Var, mode: Mode) -> Result<Var> {
        let s = self.config.input_size;
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1..] != [1, s, s] {
            return Err(Error::InvalidArgument(format!("embedder input {shape:?}, expected [N, 1, {s}, {s}]")));
        }
        let net = match which {
            Embedder::Cell => self.cell_embed.as_mut(),
            Embedder::Table => self.table_embed.as_mut(),
        }
        .ok_or_else(|| missing("embedder"))?;
        match mode {
            Mode::Train => net.forward(g, &self.store, images, mode),
            Mode::Eval => net.infer(g, &self.store, images),
        }
    }

    fn attention(&self, g: &mut Graph<E>, f: Option<&Mlp>, e_l: Var, e_m: Var, channel: bool) -> Result<Var> {
        let f = f.ok_or_else(|| missing("attention branch"))?;
        let c = self.config.channels;
        let side = self.config.feature_side();
        for e in [e_l, e_m] {
            if g.shape(e)[1..] != [c, side, side] {
                return Err(Error::InvalidArgument(format!(
                    "embedding {:?}, expected [N, {c}, {side}, {side}]",
                    g.shape(e)
                )));
            }
        }
        let n = g.shape(e_l)[0];
        let pair = g.concat_batch(e_l, e_m)?;
        let flat = g.flatten(pair)?;
        let shape = if channel { [n, c, 1, 1] } else { [n, 1, side, side] };
        gate(g, &self.store, f, flat, &shape)
    }

    /// `[N, C, 1, 1]` channel gate in (0, 1).
    pub fn channel_attention(&self, g: &mut Graph<E>, e_l: Var, e_m: Var) -> Result<Var> {
        self.attention(g, self.channel_att.as_ref(), e_l, e_m, true)
    }

    /// `[N, 1, H, W]` spatial gate in (0, 1).
    pub fn spatial_attention(&self, g: &mut Graph<E>, e_l: Var, e_m: Var) -> Result<Var> {
        self.attention(g, self.spatial_att.as_ref(), e_l, e_m, false)
    }

    /// Class probabilities per row, evaluation mode.
    pub fn predict_proba(&self, batch: &PairBatch<E>) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mut g = Graph::new();
        let out = self.infer(&mut g, batch)?;
        let logits = g.value(out.logits).data();
        Ok(logits
            .chunks_exact(NUM_CLASSES)
            .map(|row| {
                let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
                let z: f64 = e.iter().sum();
                [e[0] / z, e[1] / z, e[2] / z]
            })
            .collect())
    }

    /// Arg-max class per row, evaluation mode; ties resolve to the lower class.
    pub fn predict(&self, batch: &PairBatch<E>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let out = self.infer(&mut g, batch)?;
        Ok(argmax_rows(g.value(out.logits).data()))
    }
}

pub fn argmax_rows<E: Real>(logits: &[E]) -> Vec<usize> {
    logits
        .chunks_exact(NUM_CLASSES)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_size: 16,
            channels: 4,
            attention_hidden: 8,
            classifier_hidden: 8,
            position_hidden: 8,
            seed: 7,
        }
    }

    fn random_batch(n: usize, s: usize, seed: u64) -> PairBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[n, 1, s, s], |_| if rng.gen_bool(0.3) { rng.gen() } else { 0.0 });
        PairBatch {
            cell_a: img(&mut rng),
            cell_b: img(&mut rng),
            union: img(&mut rng),
            positions: Tensor::from_fn(&[n, POSITION_FEATURES], |_| rng.gen()),
            labels: (0..n).map(|i| i % 3).collect(),
        }
    }

    fn logits(model: &mut Model<f32>, batch: &PairBatch<f32>, mode: Mode) -> Tensor<f32> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, batch, mode).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn reference_embedding_shape() {
        let mut m = build_model::<f32>(&ModelConfig::default()).unwrap();
        for n in [1, 3] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[n, 1, 84, 84]));
            let e = m.embed_cell(&mut g, x, Mode::Train).unwrap();
            assert_eq!(g.shape(e), &[n, 64, 5, 5]);
            assert!(g.value(e).data().iter().all(|v| v.is_finite()));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 80, 84]));
        assert!(m.embed_table(&mut g, x, Mode::Train).is_err());
    }

    #[test]
    fn embedders_do_not_share_parameters() {
        let mut m = build_model::<f32>(&small(Variant::Full)).unwrap();
        let batch = random_batch(3, 16, 1);
        let table = |m: &mut Model<f32>| {
            let mut g = Graph::new();
            let x = g.constant(batch.union.clone());
            let e = m.embed_table(&mut g, x, Mode::Train).unwrap();
            g.value(e).clone()
        };
        let before = table(&mut m);
        let id = m.store.id("cell_embed.block0.conv.weight").unwrap();
        m.store.value_mut(id).data_mut().iter_mut().for_each(|w| *w += 0.5);
        assert_eq!(table(&mut m), before);
        let names = m.parameter_names();
        let cell: Vec<_> = names.iter().filter(|n| n.starts_with("cell_embed.")).collect();
        let tab: Vec<_> = names.iter().filter(|n| n.starts_with("table_embed.")).collect();
        assert_eq!(cell.len(), tab.len());
        assert!(!cell.is_empty());
    }

    #[test]
    fn zeroed_attention_is_one_half() {
        let mut m = build_model::<f32>(&small(Variant::Full)).unwrap();
        for p in m.store.iter_mut().filter(|p| p.name.contains("_att.")) {
            p.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let batch = random_batch(2, 16, 2);
        let mut g = Graph::new();
        let a = g.constant(batch.cell_a.clone());
        let b = g.constant(batch.cell_b.clone());
        let ea = m.embed_cell(&mut g, a, Mode::Train).unwrap();
        let eb = m.embed_cell(&mut g, b, Mode::Train).unwrap();
        let ca = m.channel_attention(&mut g, ea, eb).unwrap();
        let sp = m.spatial_attention(&mut g, ea, eb).unwrap();
        assert_eq!(g.shape(ca), &[2, 4, 1, 1]);
        assert_eq!(g.shape(sp), &[2, 1, 1, 1]);
        assert!(g.value(ca).data().iter().chain(g.value(sp).data()).all(|&v| v == 0.5));
    }

    #[test]
    fn attention_is_symmetric_and_bounded() {
        let m = build_model::<f32>(&small(Variant::Full)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let mut emb = || Tensor::from_fn(&[5, 4, 1, 1], |_| rng.gen_range(-3.0..3.0f32));
        let el = g.constant(emb());
        let em = g.constant(emb());
        for channel in [true, false] {
            let run = |g: &mut Graph<f32>, x, y| {
                let v = if channel { m.channel_attention(g, x, y) } else { m.spatial_attention(g, x, y) };
                g.value(v.unwrap()).clone()
            };
            let ab = run(&mut g, el, em);
            let ba = run(&mut g, em, el);
            assert_eq!(ab, ba);
            assert!(ab.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let bad = g.constant(Tensor::zeros(&[5, 3, 1, 1]));
        assert!(m.channel_attention(&mut g, el, bad).is_err());
    }

    #[test]
    fn swapping_cells_keeps_logits() {
        let mut m = build_model::<f32>(&small(Variant::Full)).unwrap();
        let batch = random_batch(6, 16, 4);
        let train = logits(&mut m, &batch, Mode::Train);
        let train_swapped = logits(&mut m, &batch.swapped(), Mode::Train);
        assert!(train.max_abs_diff(&train_swapped) <= 1e-5);
        let eval = logits(&mut m, &batch, Mode::Eval);
        assert_eq!(eval, logits(&mut m, &batch.swapped(), Mode::Eval));
        for row in m.predict_proba(&batch).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let pred = m.predict(&batch).unwrap();
        assert_eq!(pred, argmax_rows(eval.data()));
        assert!(pred.iter().all(|&p| p < NUM_CLASSES));
    }

    #[test]
    fn reference_parameter_counts() {
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let embedder = conv(1, 64) + 3 * conv(64, 64) + 4 * 2 * 64;
        let fc = |i: usize, o: usize| i * o + o;
        let d = 64 * 5 * 5;
        let full = 2 * embedder + fc(d, 256) + fc(256, 64) + fc(d, 256) + fc(256, 25) + fc(d, 512) + fc(512, 3);
        let noatt = embedder + fc(d, 512) + fc(512, 3);
        let pos = fc(10, 64) + fc(64, 64) + fc(64, 3);
        let count = |v| build_model::<f32>(&ModelConfig::with_variant(v)).unwrap().parameter_count();
        assert_eq!(count(Variant::Full), full);
        assert_eq!(count(Variant::NoAttention), noatt);
        assert_eq!(count(Variant::PositionOnly), pos);
        assert!(noatt < full);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model::<f32>(&small(Variant::Full)).unwrap();
        let b = build_model::<f32>(&small(Variant::Full)).unwrap();
        assert_eq!(a.store, b.store);
        let c = build_model::<f32>(&ModelConfig { seed: 8, ..small(Variant::Full) }).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn no_attention_equals_full_with_saturated_gates() {
        let mut full = build_model::<f32>(&small(Variant::Full)).unwrap();
        let mut plain = build_model::<f32>(&small(Variant::NoAttention)).unwrap();
        // sigmoid(40 + 40) rounds to exactly 1 in f32.
        for p in full.store.iter_mut().filter(|p| p.name.contains("_att.fc2")) {
            let fill = if p.name.ends_with(".bias") { 40.0 } else { 0.0 };
            p.value.data_mut().iter_mut().for_each(|w| *w = fill);
        }
        let batch = random_batch(4, 16, 5);
        assert_eq!(logits(&mut full, &batch, Mode::Train), logits(&mut plain, &batch, Mode::Train));
        assert_eq!(logits(&mut full, &batch, Mode::Eval), logits(&mut plain, &batch, Mode::Eval));
    }

    #[test]
    fn variant_input_mismatch_is_reported() {
        let mut pos = build_model::<f32>(&small(Variant::PositionOnly)).unwrap();
        let mut batch = random_batch(2, 16, 6);
        assert_eq!(logits(&mut pos, &batch, Mode::Train).shape(), &[2, 3]);
        batch.positions = Tensor::zeros(&[2, 0]);
        let mut g = Graph::new();
        assert!(pos.forward(&mut g, &batch, Mode::Train).is_err());
        let mut full = build_model::<f32>(&small(Variant::Full)).unwrap();
        let wrong = random_batch(2, 20, 6);
        assert!(full.forward(&mut g, &wrong, Mode::Train).is_err());
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!("no_attention".parse::<Variant>().unwrap(), Variant::NoAttention);
    }
}
