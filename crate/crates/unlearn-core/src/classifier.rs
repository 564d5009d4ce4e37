//! The image classifier: configuration, seeded construction, training with
//! an explicit budget, softmax inference, and penultimate feature extraction.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::Geometry;
use crate::error::CoreError;
use crate::nn::{softmax, Adam, Layer, Network};
use crate::rng;

/// Convolutional stem variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// A few conv/pool blocks; the desk-scale default.
    SmallConv,
    /// Conv stem followed by residual blocks, mirroring the reference
    /// geometry at a reduced depth.
    Residual34Like,
}

impl Backbone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::SmallConv => "small_conv",
            Backbone::Residual34Like => "residual_34_like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small_conv" => Some(Backbone::SmallConv),
            "residual_34_like" => Some(Backbone::Residual34Like),
            _ => None,
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Normal(0, sqrt(2 / fan_in)) weights, zero biases.
    KaimingLike,
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Default,
}

impl InitScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitScheme::KaimingLike => "kaiming_like",
            InitScheme::Default => "default",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kaiming_like" => Some(InitScheme::KaimingLike),
            "default" => Some(InitScheme::Default),
            _ => None,
        }
    }
}

/// Classifier architecture description. The last head width is the class
/// count K.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub geometry: Geometry,
    /// Channel widths of the conv blocks, one pool after each.
    pub conv_channels: Vec<usize>,
    /// Widths of the fully connected head, ending in K.
    pub head_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub init_scheme: InitScheme,
}

impl ModelConfig {
    /// Reference preset: 224x224 grayscale, residual backbone, head
    /// 256/128/64/16 with dropout 0.5.
    pub fn reference() -> Self {
        ModelConfig {
            backbone: Backbone::Residual34Like,
            geometry: Geometry::new(224, 224, 1),
            conv_channels: vec![16, 16, 32],
            head_widths: vec![256, 128, 64, 16],
            dropout_rate: 0.5,
            init_scheme: InitScheme::KaimingLike,
        }
    }

    /// Desk-scale preset for small grayscale images.
    pub fn desk(geometry: Geometry, num_classes: usize) -> Self {
        ModelConfig {
            backbone: Backbone::SmallConv,
            geometry,
            conv_channels: vec![8, 16],
            head_widths: vec![128, 64, num_classes],
            dropout_rate: 0.5,
            init_scheme: InitScheme::KaimingLike,
        }
    }

    pub fn num_classes(&self) -> usize {
        *self.head_widths.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<(), CoreError> {
        if self.head_widths.is_empty() {
            return Err(CoreError::Config("head_widths must not be empty".into()));
        }
        if self.head_widths.contains(&0) {
            return Err(CoreError::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.conv_channels.is_empty() {
            return Err(CoreError::Config("need at least one conv block".into()));
        }
        Ok(())
    }

    /// Build the untrained layer stack (zero weights, filled in by init).
    fn layer_plan(&self) -> Result<Vec<Layer>, CoreError> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut in_c = self.geometry.c;
        match self.backbone {
            Backbone::SmallConv => {
                for (i, &out_c) in self.conv_channels.iter().enumerate() {
                    layers.push(Layer::Conv {
                        name: format!("conv{i}"),
                        in_c,
                        out_c,
                        w: vec![0.0; out_c * in_c * 9],
                        b: vec![0.0; out_c],
                    });
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2);
                    in_c = out_c;
                }
            }
            Backbone::Residual34Like => {
                let stem = self.conv_channels[0];
                layers.push(Layer::Conv {
                    name: "stem".into(),
                    in_c,
                    out_c: stem,
                    w: vec![0.0; stem * in_c * 9],
                    b: vec![0.0; stem],
                });
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2);
                in_c = stem;
                for (i, &ch) in self.conv_channels[1..].iter().enumerate() {
                    if ch != in_c {
                        layers.push(Layer::Conv {
                            name: format!("proj{i}"),
                            in_c,
                            out_c: ch,
                            w: vec![0.0; ch * in_c * 9],
                            b: vec![0.0; ch],
                        });
                        layers.push(Layer::Relu);
                        in_c = ch;
                    }
                    layers.push(Layer::Residual {
                        name: format!("res{i}"),
                        channels: ch,
                        w1: vec![0.0; ch * ch * 9],
                        b1: vec![0.0; ch],
                        w2: vec![0.0; ch * ch * 9],
                        b2: vec![0.0; ch],
                    });
                    layers.push(Layer::MaxPool2);
                }
            }
        }
        layers.push(Layer::Flatten);
        let pools = self.conv_channels.len() as u32;
        let (h, w) = (
            self.geometry.h >> pools,
            self.geometry.w >> pools,
        );
        let mut in_dim = in_c * h * w;
        for (i, &width) in self.head_widths.iter().enumerate() {
            let last = i + 1 == self.head_widths.len();
            layers.push(Layer::Linear {
                name: format!("head{i}"),
                in_dim,
                out_dim: width,
                w: vec![0.0; width * in_dim],
                b: vec![0.0; width],
            });
            if !last {
                layers.push(Layer::Relu);
                layers.push(Layer::Dropout {
                    rate: self.dropout_rate,
                });
            }
            in_dim = width;
        }
        Ok(layers)
    }
}

/// One record of the training log: loss and validation accuracy after an
/// epoch (or iteration block), plus the per-class count of samples presented.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of this record.
    pub iterations: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
    pub class_counts: Vec<u64>,
}

/// How long and how to train.
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetMode {
    EpochsWithEarlyStop { max_epochs: usize, patience: usize },
    FixedIterations { max_iterations: usize },
}

/// Training budget: schedule, batch size, learning rate, and run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBudget {
    pub mode: BudgetMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainBudget {
    pub fn fixed(iterations: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainBudget {
            mode: BudgetMode::FixedIterations {
                max_iterations: iterations,
            },
            batch_size,
            learning_rate,
            seed,
        }
    }

    pub fn epochs(max_epochs: usize, patience: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainBudget {
            mode: BudgetMode::EpochsWithEarlyStop {
                max_epochs,
                patience,
            },
            batch_size,
            learning_rate,
            seed,
        }
    }

    fn validate(&self) -> Result<(), CoreError> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if let BudgetMode::EpochsWithEarlyStop {
            max_epochs,
            patience,
        } = self.mode
        {
            if patience > max_epochs {
                return Err(CoreError::Config(format!(
                    "patience {patience} exceeds max_epochs {max_epochs}"
                )));
            }
        }
        Ok(())
    }
}

/// An immutable trained (or untrained) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    net: Network,
    digest: [u8; 32],
    train_log: Vec<EpochRecord>,
}

/// Labeled training samples: borrowed pixel slices with their labels.
/// Synthetic and real samples mix freely here.
pub struct TrainData<'a> {
    pub samples: Vec<(&'a [f64], usize)>,
}

impl<'a> TrainData<'a> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Training outcome: the new state plus the optimizer steps actually run.
pub struct TrainReport {
    pub model: ModelState,
    pub iterations_used: usize,
    pub stopped_by_callback: bool,
}

/// Training failure; divergence carries the last finite state.
#[derive(Debug)]
pub enum TrainError {
    Diverged { last_finite: Box<ModelState> },
    Core(CoreError),
}

impl From<CoreError> for TrainError {
    fn from(e: CoreError) -> Self {
        TrainError::Core(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Diverged { .. } => write!(f, "training diverged (non-finite loss)"),
            TrainError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn init_network(net: &mut Network, scheme: InitScheme, rng_: &mut ChaCha8Rng) {
    // Fan-in per slot: conv = in_c * 9, linear = in_dim. Biases stay zero.
    let fans: Vec<Option<usize>> = net
        .layers()
        .iter()
        .flat_map(|layer| match layer {
            Layer::Conv { in_c, .. } => vec![Some(in_c * 9), None],
            Layer::Linear { in_dim, .. } => vec![Some(*in_dim), None],
            Layer::Residual { channels, .. } => {
                vec![Some(channels * 9), None, Some(channels * 9), None]
            }
            _ => vec![],
        })
        .collect();
    net.for_each_param_mut(|slot, params| match fans[slot] {
        Some(fan_in) => {
            let fan = fan_in as f64;
            match scheme {
                InitScheme::KaimingLike => {
                    let std = libm::sqrt(2.0 / fan);
                    for p in params.iter_mut() {
                        *p = rng::normal(rng_) * std;
                    }
                }
                InitScheme::Default => {
                    let bound = 1.0 / libm::sqrt(fan);
                    for p in params.iter_mut() {
                        *p = (rng::uniform(rng_) * 2.0 - 1.0) * bound;
                    }
                }
            }
        }
        None => {
            for p in params.iter_mut() {
                *p = 0.0;
            }
        }
    });
}

fn digest_of(net: &Network) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, values) in net.named_params() {
        hasher.update(name.as_bytes());
        hasher.update((values.len() as u64).to_le_bytes());
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

/// Build a model with seeded initialization and an empty train log.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelState, CoreError> {
    let layers = config.layer_plan()?;
    let mut net = Network::new(config.geometry, layers)?;
    let mut rng_ = rng::substream(seed, 0x1217);
    init_network(&mut net, config.init_scheme, &mut rng_);
    let digest = digest_of(&net);
    Ok(ModelState {
        config: config.clone(),
        net,
        digest,
        train_log: Vec::new(),
    })
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry
    }

    pub fn weight_digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Recompute the digest from the weights; equals `weight_digest`.
    pub fn recompute_digest(&self) -> [u8; 32] {
        digest_of(&self.net)
    }

    pub fn train_log(&self) -> &[EpochRecord] {
        &self.train_log
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        self.net.named_params()
    }

    /// Reassemble a model from a config, parameter tensors, and a train log
    /// (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        params: &[(String, Vec<f64>)],
        train_log: Vec<EpochRecord>,
    ) -> Result<Self, CoreError> {
        let layers = config.layer_plan()?;
        let mut net = Network::new(config.geometry, layers)?;
        net.set_named_params(params)?;
        let digest = digest_of(&net);
        Ok(ModelState {
            config,
            net,
            digest,
            train_log,
        })
    }

    pub(crate) fn network(&self) -> &Network {
        &self.net
    }

    /// Softmax class probabilities for one image, inference mode.
    pub fn predict_probs_one(&self, image: &[f64]) -> Result<Vec<f64>, CoreError> {
        Ok(softmax(&self.net.forward_logits(image)?))
    }

    /// Softmax probabilities for a batch of images.
    pub fn predict_probs(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>, CoreError> {
        images.iter().map(|img| self.predict_probs_one(img)).collect()
    }

    /// Argmax class, ties toward the lower index.
    pub fn predict_class(&self, image: &[f64]) -> Result<usize, CoreError> {
        let probs = self.predict_probs_one(image)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Penultimate-layer activations (input of the output linear layer),
    /// inference mode.
    pub fn extract_features(&self, image: &[f64]) -> Result<Vec<f64>, CoreError> {
        Ok(self.net.forward_eval(image)?.0)
    }

    /// Mean accuracy over borrowed (image, label) pairs.
    pub fn accuracy_on(&self, samples: &[(&[f64], usize)]) -> Result<f64, CoreError> {
        if samples.is_empty() {
            return Err(CoreError::Domain("accuracy over empty sample set".into()));
        }
        let mut correct = 0usize;
        for (img, label) in samples {
            if self.predict_class(img)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

/// Observer invoked every `interval` optimizer steps; returning `true`
/// stops training (used for forget-accuracy stop rules).
pub struct StopCheck<'a> {
    pub interval: usize,
    pub check: &'a mut dyn FnMut(&ModelState) -> bool,
}

/// Train a model on `data`, returning a new state; the input is untouched.
///
/// - `EpochsWithEarlyStop`: one shuffled pass per epoch; stops once val
///   accuracy has not improved for `patience` epochs and returns the
///   best-val snapshot. Requires `val`.
/// - `FixedIterations`: exactly `max_iterations` optimizer steps, cycling
///   reshuffled passes as needed (zero iterations returns the input weights
///   unchanged).
pub fn train(
    model: &ModelState,
    data: &TrainData<'_>,
    val: Option<&TrainData<'_>>,
    budget: &TrainBudget,
    mut stop: Option<StopCheck<'_>>,
) -> Result<TrainReport, TrainError> {
    budget.validate()?;
    if data.is_empty() {
        return Err(CoreError::Domain("training data is empty".into()).into());
    }
    let k = model.num_classes();
    for &(img, label) in &data.samples {
        if label >= k {
            return Err(CoreError::Domain(format!(
                "training label {label} out of range for {k} classes"
            ))
            .into());
        }
        if img.len() != model.geometry().len() {
            return Err(CoreError::Shape("training sample geometry mismatch".into()).into());
        }
    }
    if matches!(budget.mode, BudgetMode::EpochsWithEarlyStop { .. }) && val.is_none() {
        return Err(CoreError::Config("early-stop training needs a validation set".into()).into());
    }

    let mut state = model.clone();
    let mut net = state.net.clone();
    let mut adam = Adam::for_network(budget.learning_rate, &net);
    let mut shuffle_rng = rng::substream(budget.seed, 0x5AFE);
    let mut dropout_rng = rng::substream(budget.seed, 0xD20F);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len(); // force shuffle on first use

    let max_iterations = match budget.mode {
        BudgetMode::FixedIterations { max_iterations } => max_iterations,
        BudgetMode::EpochsWithEarlyStop { max_epochs, .. } => {
            max_epochs * data.len().div_ceil(budget.batch_size)
        }
    };
    let steps_per_epoch = data.len().div_ceil(budget.batch_size);

    let mut iterations = 0usize;
    let mut stopped_by_callback = false;
    let mut epoch = state.train_log.last().map(|r| r.epoch + 1).unwrap_or(0);
    let mut best: Option<(f64, Network, usize)> = None; // (val_acc, weights, epochs since improve)
    let mut epochs_without_improve = 0usize;

    let onehot = |label: usize| {
        let mut t = vec![0.0; k];
        t[label] = 1.0;
        t
    };

    'outer: while iterations < max_iterations {
        // One epoch-equivalent block.
        let mut block_loss = 0.0;
        let mut block_batches = 0usize;
        let mut class_counts = vec![0u64; k];
        let block_start = iterations;
        while iterations < max_iterations && (iterations - block_start) < steps_per_epoch {
            if cursor >= data.len() {
                rng::shuffle(&mut shuffle_rng, &mut order);
                cursor = 0;
            }
            let end = (cursor + budget.batch_size).min(data.len());
            let batch = &order[cursor..end];
            cursor = end;

            let mut grads = net.zero_grads();
            let mut loss = 0.0;
            for &si in batch {
                let (img, label) = data.samples[si];
                let planar = img; // geometry checked above
                let (l, _) = net
                    .backprop_ce(planar, &onehot(label), Some(&mut dropout_rng), &mut grads)
                    .map_err(TrainError::Core)?;
                loss += l;
                class_counts[label] += 1;
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                state.net = match best {
                    Some((_, net, _)) => net,
                    None => state.net,
                };
                state.digest = digest_of(&state.net);
                return Err(TrainError::Diverged {
                    last_finite: Box::new(state),
                });
            }
            // Mean-loss gradients.
            for slot in grads.iter_mut() {
                match slot {
                    crate::nn::LayerGrad::None => {}
                    crate::nn::LayerGrad::WithBias { w, b } => {
                        w.iter_mut().for_each(|v| *v *= scale);
                        b.iter_mut().for_each(|v| *v *= scale);
                    }
                    crate::nn::LayerGrad::ResidualPair { w1, b1, w2, b2 } => {
                        for buf in [w1, b1, w2, b2] {
                            buf.iter_mut().for_each(|v| *v *= scale);
                        }
                    }
                }
            }
            adam.apply(&mut net, &grads);
            iterations += 1;
            block_loss += loss;
            block_batches += 1;

            if let Some(s) = stop.as_mut() {
                if s.interval > 0 && iterations.is_multiple_of(s.interval) {
                    let mut probe = state.clone();
                    probe.net = net.clone();
                    probe.digest = digest_of(&probe.net);
                    if (s.check)(&probe) {
                        stopped_by_callback = true;
                        state.net = net;
                        let record = EpochRecord {
                            epoch,
                            iterations,
                            loss: block_loss / block_batches.max(1) as f64,
                            val_acc: None,
                            class_counts,
                        };
                        state.train_log.push(record);
                        state.digest = digest_of(&state.net);
                        return Ok(TrainReport {
                            model: state,
                            iterations_used: iterations,
                            stopped_by_callback,
                        });
                    }
                }
            }
        }

        let val_acc = match val {
            Some(v) if !v.is_empty() => {
                let mut probe = state.clone();
                probe.net = net.clone();
                Some(probe.accuracy_on(&v.samples).map_err(TrainError::Core)?)
            }
            _ => None,
        };
        state.train_log.push(EpochRecord {
            epoch,
            iterations,
            loss: if block_batches > 0 {
                block_loss / block_batches as f64
            } else {
                0.0
            },
            val_acc,
            class_counts,
        });
        epoch += 1;

        if let BudgetMode::EpochsWithEarlyStop { patience, .. } = budget.mode {
            let acc = val_acc.unwrap_or(0.0);
            let improved = best.as_ref().map(|(b, _, _)| acc > *b).unwrap_or(true);
            if improved {
                best = Some((acc, net.clone(), iterations));
                epochs_without_improve = 0;
            } else {
                epochs_without_improve += 1;
                if epochs_without_improve >= patience && patience > 0 {
                    break 'outer;
                }
            }
        }
    }

    // Early-stop mode returns the best-validation snapshot.
    let iterations_used = match (&budget.mode, &best) {
        (BudgetMode::EpochsWithEarlyStop { .. }, Some((_, best_net, at))) => {
            net = best_net.clone();
            *at
        }
        _ => iterations,
    };
    state.net = net;
    state.digest = digest_of(&state.net);
    Ok(TrainReport {
        model: state,
        iterations_used,
        stopped_by_callback,
    })
}
