//! Supervised projection heads trained through a cosine-regression loss.
//!
//! Three head shapes are supported, none with bias terms:
//!
//! * `linear`: `z = W e`
//! * `nonlinear`: `z = Dropout(act(W e))`
//! * `nonlinear2`: `z = Dropout(act(W2 Dropout(act(W1 e))))`
//!
//! Both sides of a pair go through the same weights. The per-pair loss is
//! `(cos(z1, z2) - r)^2` with `r` the normalized rating; gradients are
//! computed analytically in `f64` and summed over the two branches.

mod adam;
mod checkpoint;
mod train;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::ComposedPair;
use crate::embstore::StoreError;
use crate::metrics::{cosine_from_parts, dot, norm};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

/// Norm floor for projected vectors; a collapsed projection scores 0.
pub const COSINE_EPS: f64 = 1e-12;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_HIDDEN_DIM: usize = 1024;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set needs at least two pairs")]
    EmptyValidationSet,
    #[error("train-mode forward with dropout needs a mask")]
    MissingMask,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Nonlinear,
    Nonlinear2,
}

impl std::str::FromStr for HeadKind {
    type Err = ProjectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "nonlinear" => Ok(HeadKind::Nonlinear),
            "nonlinear2" => Ok(HeadKind::Nonlinear2),
            _ => Err(ProjectionError::InvalidConfig(format!("unknown head kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Relu,
    /// tanh approximation.
    Gelu,
    Silu,
}

impl std::str::FromStr for Activation {
    type Err = ProjectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            _ => Err(ProjectionError::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64, slope: f64) -> f64 {
        match self {
            Activation::LeakyRelu => if x > 0.0 { x } else { slope * x },
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64, slope: f64) -> f64 {
        match self {
            Activation::LeakyRelu => if x > 0.0 { 1.0 } else { slope },
            Activation::Relu => if x > 0.0 { 1.0 } else { 0.0 },
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Architecture of a head, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Output dimension.
    pub k: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Intermediate width of `nonlinear2`.
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN_DIM
}

impl HeadSpec {
    pub fn new(kind: HeadKind, k: usize) -> Self {
        HeadSpec {
            kind,
            k,
            activation: Activation::LeakyRelu,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            hidden_dim: DEFAULT_HIDDEN_DIM,
        }
    }

    /// `(rows, cols)` of every weight matrix for input dimension `d`.
    pub fn layer_shapes(&self, d: usize) -> Vec<(usize, usize)> {
        match self.kind {
            HeadKind::Linear | HeadKind::Nonlinear => vec![(self.k, d)],
            HeadKind::Nonlinear2 => vec![(self.hidden_dim, d), (self.k, self.hidden_dim)],
        }
    }

    fn validate(&self, d: usize) -> Result<(), ProjectionError> {
        if self.k == 0 || d == 0 {
            return Err(ProjectionError::InvalidConfig("dimensions must be positive".into()));
        }
        if self.k > d {
            return Err(ProjectionError::InvalidConfig(format!(
                "output dim {} exceeds input dim {d}",
                self.k
            )));
        }
        if self.kind == HeadKind::Nonlinear2 && self.hidden_dim == 0 {
            return Err(ProjectionError::InvalidConfig("hidden_dim must be positive".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(ProjectionError::InvalidConfig("leaky_slope must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep flags for every activated layer of one branch, one `Vec` per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask(pub Vec<Vec<bool>>);

impl DropoutMask {
    pub fn keep_all(model: &ProjectionModel) -> Self {
        DropoutMask(model.activated_widths().map(|w| vec![true; w]).collect())
    }

    /// Draws a mask from a stream keyed by `(seed, epoch, pair, branch)`, so
    /// the draw does not depend on batch layout or evaluation order.
    pub fn draw(model: &ProjectionModel, seed: u64, epoch: u64, pair: u64, branch: u64) -> Self {
        let p = model.dropout_rate;
        let key = mix(mix(mix(mix(seed ^ 0xd1b5_4a32_d192_ed03) ^ epoch) ^ pair) ^ branch);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        DropoutMask(
            model
                .activated_widths()
                .map(|w| (0..w).map(|_| rng.random::<f64>() >= p).collect())
                .collect(),
        )
    }
}

// splitmix64 finalizer
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    spec: HeadSpec,
    dropout_rate: f64,
    layers: Vec<Array2<f64>>,
}

/// Activations kept from a batched forward pass for backpropagation.
struct ForwardCache {
    // inputs[l] feeds layer l; inputs[layers] is the output
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    scales: Vec<Option<Array2<f64>>>,
}

impl ProjectionModel {
    /// Uniform initialization in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn init<R: Rng>(
        spec: HeadSpec,
        d: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self, ProjectionError> {
        spec.validate(d)?;
        let layers = spec
            .layer_shapes(d)
            .into_iter()
            .map(|(rows, cols)| {
                let bound = (1.0 / cols as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
            })
            .collect();
        Self::from_weights(spec, dropout_rate, layers)
    }

    pub fn from_weights(
        spec: HeadSpec,
        dropout_rate: f64,
        layers: Vec<Array2<f64>>,
    ) -> Result<Self, ProjectionError> {
        let d = layers.first().map(|w| w.ncols()).unwrap_or(0);
        spec.validate(d)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(ProjectionError::InvalidConfig(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let expected = spec.layer_shapes(d);
        if layers.len() != expected.len() {
            return Err(ProjectionError::InvalidConfig(format!(
                "{:?} head needs {} weight matrices, got {}",
                spec.kind,
                expected.len(),
                layers.len()
            )));
        }
        for (w, &shape) in layers.iter().zip(&expected) {
            if w.dim() != shape {
                return Err(ProjectionError::ShapeMismatch(w.dim(), shape));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(ProjectionError::NonFinite("weights"));
            }
        }
        Ok(ProjectionModel {
            spec,
            dropout_rate,
            layers,
        })
    }

    /// Linear head with `W = I`.
    pub fn identity(d: usize) -> Self {
        Self::from_weights(HeadSpec::new(HeadKind::Linear, d), 0.0, vec![Array2::eye(d)])
            .expect("identity head is valid")
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.k
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.layers
    }

    fn activated(&self) -> bool {
        self.spec.kind != HeadKind::Linear
    }

    fn activated_widths(&self) -> impl Iterator<Item = usize> + '_ {
        let active = self.activated();
        self.layers
            .iter()
            .filter(move |_| active)
            .map(|w| w.nrows())
    }

    fn uses_dropout(&self, mode: Mode) -> bool {
        mode == Mode::Train && self.activated() && self.dropout_rate > 0.0
    }

    /// Projects one vector. Train mode applies inverted dropout from `mask`
    /// on activated layers; eval mode applies neither dropout nor scaling.
    pub fn forward(
        &self,
        e: &[f64],
        mode: Mode,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<f64>, ProjectionError> {
        self.check_input(e.len())?;
        let input = ArrayView2::from_shape((1, e.len()), e).expect("row vector");
        let scales = self.mask_scales(mode, mask.map(std::slice::from_ref))?;
        let cache = self.forward_batch(input, scales);
        Ok(cache.inputs.last().unwrap().row(0).to_vec())
    }

    fn check_input(&self, len: usize) -> Result<(), ProjectionError> {
        if len != self.input_dim() {
            return Err(ProjectionError::DimMismatch {
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Turns per-row masks into per-layer multiplier matrices (0 or 1/(1-p)).
    fn mask_scales(
        &self,
        mode: Mode,
        masks: Option<&[DropoutMask]>,
    ) -> Result<Vec<Option<Array2<f64>>>, ProjectionError> {
        if !self.uses_dropout(mode) {
            return Ok(vec![None; self.layers.len()]);
        }
        let masks = masks.ok_or(ProjectionError::MissingMask)?;
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        self.layers
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let width = w.nrows();
                let mut scale = Array2::zeros((masks.len(), width));
                for (mut row, mask) in scale.rows_mut().into_iter().zip(masks) {
                    let flags = mask.0.get(l).filter(|f| f.len() == width).ok_or(
                        ProjectionError::DimMismatch {
                            expected: width,
                            got: mask.0.get(l).map_or(0, Vec::len),
                        },
                    )?;
                    for (s, &keep) in row.iter_mut().zip(flags) {
                        *s = if keep { keep_scale } else { 0.0 };
                    }
                }
                Ok(Some(scale))
            })
            .collect()
    }

    fn forward_batch(
        &self,
        input: ArrayView2<f64>,
        scales: Vec<Option<Array2<f64>>>,
    ) -> ForwardCache {
        let (act, slope) = (self.spec.activation, self.spec.leaky_slope);
        let mut inputs = vec![input.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let p = inputs[l].dot(&w.t());
            let mut out = if self.activated() {
                p.mapv(|x| act.apply(x, slope))
            } else {
                p.clone()
            };
            if let Some(s) = &scales[l] {
                out *= s;
            }
            pre.push(p);
            inputs.push(out);
        }
        ForwardCache {
            inputs,
            pre,
            scales,
        }
    }

    /// Eval-mode projection of a batch of row vectors.
    pub fn project_rows(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>, ProjectionError> {
        self.check_input(rows.ncols())?;
        let scales = vec![None; self.layers.len()];
        Ok(self.forward_batch(rows, scales).inputs.pop().unwrap())
    }

    /// Eval-mode C-STS scores: cosine of the two projections, with
    /// collapsed projections scoring 0.
    pub fn score_pairs(&self, pairs: &[ComposedPair]) -> Result<Vec<f64>, ProjectionError> {
        let (e1, e2) = stack_pairs(pairs, self.input_dim())?;
        let z1 = self.project_rows(e1.view())?;
        let z2 = self.project_rows(e2.view())?;
        Ok(z1
            .rows()
            .into_iter()
            .zip(z2.rows())
            .map(|(a, b)| {
                let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
                guarded_cosine(a, b).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Loss and gradient for one pair, with one mask per branch.
    pub fn loss_and_grad(
        &self,
        pair: &ComposedPair,
        mode: Mode,
        masks: Option<[&DropoutMask; 2]>,
    ) -> Result<(f64, Vec<Array2<f64>>), ProjectionError> {
        let (e1, e2) = stack_pairs(std::slice::from_ref(pair), self.input_dim())?;
        let masks = masks.map(|[a, b]| [a.clone(), b.clone()]);
        self.batch_loss_and_grad(
            e1.view(),
            e2.view(),
            &[pair.rating],
            mode,
            masks.as_ref().map(|m| m.as_slice()),
        )
    }

    /// Mean loss and mean gradient (one matrix per layer) over a batch.
    ///
    /// `masks`, when dropout is active, holds the branch-1 masks for every
    /// row followed by the branch-2 masks.
    pub fn batch_loss_and_grad(
        &self,
        e1: ArrayView2<f64>,
        e2: ArrayView2<f64>,
        ratings: &[f64],
        mode: Mode,
        masks: Option<&[DropoutMask]>,
    ) -> Result<(f64, Vec<Array2<f64>>), ProjectionError> {
        let b = ratings.len();
        self.check_input(e1.ncols())?;
        self.check_input(e2.ncols())?;
        if e1.nrows() != b || e2.nrows() != b {
            return Err(ProjectionError::DimMismatch {
                expected: b,
                got: e1.nrows().min(e2.nrows()),
            });
        }
        if b == 0 {
            return Err(ProjectionError::EmptyTrainSet);
        }
        if let Some(m) = masks {
            if self.uses_dropout(mode) && m.len() != 2 * b {
                return Err(ProjectionError::DimMismatch {
                    expected: 2 * b,
                    got: m.len(),
                });
            }
        }
        let input = ndarray::concatenate(Axis(0), &[e1, e2]).expect("same width");
        let scales = self.mask_scales(mode, masks)?;
        let cache = self.forward_batch(input.view(), scales);
        let z = cache.inputs.last().unwrap();
        let k = z.ncols();

        let mut grad_z = Array2::<f64>::zeros((2 * b, k));
        let mut loss = 0.0;
        for i in 0..b {
            let z1 = z.row(i);
            let z2 = z.row(b + i);
            let (z1, z2) = (z1.as_slice().unwrap(), z2.as_slice().unwrap());
            let (l1, l2) = (norm(z1), norm(z2));
            let (n1, n2) = (l1.max(COSINE_EPS), l2.max(COSINE_EPS));
            let y = guarded_cosine(z1, z2);
            let residual = y - ratings[i];
            loss += residual * residual;
            // d loss / d y, already divided by the batch size
            let g = 2.0 * residual / b as f64;
            let inv = 1.0 / (n1 * n2);
            let c1 = if l1 > COSINE_EPS { y / (n1 * n1) } else { 0.0 };
            let c2 = if l2 > COSINE_EPS { y / (n2 * n2) } else { 0.0 };
            for j in 0..k {
                grad_z[[i, j]] = g * (z2[j] * inv - c1 * z1[j]);
                grad_z[[b + i, j]] = g * (z1[j] * inv - c2 * z2[j]);
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(ProjectionError::NonFinite("loss"));
        }
        Ok((loss, self.backward(&cache, grad_z)))
    }

    fn backward(&self, cache: &ForwardCache, mut grad: Array2<f64>) -> Vec<Array2<f64>> {
        let (act, slope) = (self.spec.activation, self.spec.leaky_slope);
        let mut grads = vec![Array2::zeros((0, 0)); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            if let Some(s) = &cache.scales[l] {
                grad *= s;
            }
            if self.activated() {
                Zip::from(&mut grad)
                    .and(&cache.pre[l])
                    .for_each(|g, &x| *g *= act.derivative(x, slope));
            }
            grads[l] = grad.t().dot(&cache.inputs[l]);
            if l > 0 {
                grad = grad.dot(&self.layers[l]);
            }
        }
        grads
    }
}

/// Cosine with each squared norm floored at `COSINE_EPS^2`.
pub(crate) fn guarded_cosine(a: &[f64], b: &[f64]) -> f64 {
    const FLOOR: f64 = COSINE_EPS * COSINE_EPS;
    cosine_from_parts(dot(a, b), dot(a, a).max(FLOOR), dot(b, b).max(FLOOR))
}

pub(crate) fn stack_pairs(
    pairs: &[ComposedPair],
    d: usize,
) -> Result<(Array2<f64>, Array2<f64>), ProjectionError> {
    let mut e1 = Array2::zeros((pairs.len(), d));
    let mut e2 = Array2::zeros((pairs.len(), d));
    for (i, p) in pairs.iter().enumerate() {
        for v in [&p.e1, &p.e2] {
            if v.len() != d {
                return Err(ProjectionError::DimMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        e1.row_mut(i).assign(&ndarray::aview1(&p.e1));
        e2.row_mut(i).assign(&ndarray::aview1(&p.e2));
    }
    Ok((e1, e2))
}
