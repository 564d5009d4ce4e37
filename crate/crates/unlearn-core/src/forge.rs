//! Label-guided sample generator and the random-noise baseline.
//!
//! The projector maps a class one-hot concatenated with a normal noise
//! vector through two linear layers (ReLU between, sigmoid output) into an
//! image-shaped tensor. It is trained by pushing those images through the
//! frozen classifier and minimizing cross-entropy against label-smoothed
//! one-hot targets; only the projector's weights move.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::classifier::ModelState;
use crate::dataset::Geometry;
use crate::error::CoreError;
use crate::nn::Adam;
use crate::rng;

/// Generator hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Dimension of the noise vector z.
    pub noise_dim: usize,
    pub hidden_width: usize,
    /// Label smoothing epsilon; must keep the target class the argmax.
    pub smoothing_eps: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn desk(seed: u64) -> Self {
        GeneratorConfig {
            noise_dim: 64,
            hidden_width: 256,
            smoothing_eps: 0.1,
            steps: 400,
            learning_rate: 1e-2,
            batch: 32,
            seed,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<(), CoreError> {
        if self.noise_dim == 0 || self.hidden_width == 0 || self.batch == 0 {
            return Err(CoreError::Config(
                "noise_dim, hidden_width, and batch must be positive".into(),
            ));
        }
        if !(self.smoothing_eps > 0.0
            && self.smoothing_eps < (num_classes as f64 - 1.0) / num_classes as f64)
        {
            return Err(CoreError::Config(format!(
                "smoothing eps {} must lie in (0, (K-1)/K) for K={num_classes}",
                self.smoothing_eps
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Label-smoothed one-hot target: (1 - eps) on `class`, eps/(K-1) elsewhere.
pub fn smoothed_target(num_classes: usize, class: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / (num_classes as f64 - 1.0); num_classes];
    t[class] = 1.0 - eps;
    t
}

/// Trained projector weights tied to the frozen classifier they were
/// optimized against.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorState {
    pub noise_dim: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
    pub geometry: Geometry,
    pub classes: BTreeSet<usize>,
    /// `[hidden][K + noise_dim]` flattened.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[h*w*c][hidden]` flattened.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub frozen_model_digest: [u8; 32],
}

impl ProjectorState {
    fn in_dim(&self) -> usize {
        self.num_classes + self.noise_dim
    }

    /// Forward pass for one (class, z) pair. Returns (hidden pre-relu,
    /// hidden post-relu, pre-sigmoid, image).
    fn forward(&self, class: usize, z: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let in_dim = self.in_dim();
        let mut input = vec![0.0; in_dim];
        input[class] = 1.0;
        input[self.num_classes..].copy_from_slice(z);
        let u: Vec<f64> = (0..self.hidden_width)
            .map(|o| {
                let row = &self.w1[o * in_dim..(o + 1) * in_dim];
                self.b1[o] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        let h: Vec<f64> = u.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out_dim = self.geometry.len();
        let s: Vec<f64> = (0..out_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden_width..(o + 1) * self.hidden_width];
                self.b2[o] + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        let img: Vec<f64> = s.iter().map(|&v| 1.0 / (1.0 + libm::exp(-v))).collect();
        (u, h, s, img)
    }

    /// Produce one image for a (class, z) pair.
    pub fn project(&self, class: usize, z: &[f64]) -> Vec<f64> {
        self.forward(class, z).3
    }
}

/// Where a synthetic batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticOrigin {
    Generated,
    Noise,
}

impl SyntheticOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            SyntheticOrigin::Generated => "generated",
            SyntheticOrigin::Noise => "noise",
        }
    }
}

/// A batch of synthetic images, pixel range [0, 1], one source class each.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    geometry: Geometry,
    pixels: Vec<f64>,
    source_classes: Vec<usize>,
    pub origin: SyntheticOrigin,
    pub seed: u64,
    /// Digest of the frozen classifier (generated batches only).
    pub frozen_model_digest: Option<[u8; 32]>,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.source_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_classes.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let stride = self.geometry.len();
        &self.pixels[i * stride..(i + 1) * stride]
    }

    pub fn source_class(&self, i: usize) -> usize {
        self.source_classes[i]
    }

    pub fn source_classes(&self) -> &[usize] {
        &self.source_classes
    }
}

fn probe_pool(
    classes: &[usize],
    noise_dim: usize,
    count: usize,
    rng_: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<f64>)> {
    (0..count)
        .map(|i| {
            let c = classes[i % classes.len()];
            let z: Vec<f64> = (0..noise_dim).map(|_| rng::normal(rng_)).collect();
            (c, z)
        })
        .collect()
}

fn mean_probe_loss(
    projector: &ProjectorState,
    frozen: &ModelState,
    probes: &[(usize, Vec<f64>)],
    eps: f64,
) -> Result<f64, CoreError> {
    let k = projector.num_classes;
    let mut total = 0.0;
    for (class, z) in probes {
        let img = projector.project(*class, z);
        let probs = frozen.predict_probs_one(&img)?;
        let target = smoothed_target(k, *class, eps);
        for (p, q) in probs.iter().zip(&target) {
            if *q > 0.0 {
                total -= q * libm::log(p.max(1e-300));
            }
        }
    }
    Ok(total / probes.len() as f64)
}

/// Train a projector against the frozen classifier.
///
/// Each step samples a fresh batch of (class, z) pairs, projects them to
/// images, forwards through the frozen model in inference mode, and takes an
/// Adam step on the projector weights only. The frozen model is never
/// touched; its digest is checked before and after.
pub fn train_projector(
    frozen: &ModelState,
    target_classes: &BTreeSet<usize>,
    config: &GeneratorConfig,
) -> Result<ProjectorState, CoreError> {
    let k = frozen.num_classes();
    config.validate(k)?;
    if target_classes.is_empty() {
        return Err(CoreError::Domain("target class set is empty".into()));
    }
    if let Some(&bad) = target_classes.iter().find(|&&c| c >= k) {
        return Err(CoreError::Domain(format!(
            "target class {bad} out of range for {k} classes"
        )));
    }
    let digest_before = frozen.weight_digest();
    let geometry = frozen.geometry();
    let in_dim = k + config.noise_dim;
    let out_dim = geometry.len();

    let mut init_rng = rng::substream(config.seed, 0x9E4);
    let mut projector = ProjectorState {
        noise_dim: config.noise_dim,
        hidden_width: config.hidden_width,
        num_classes: k,
        geometry,
        classes: target_classes.clone(),
        w1: (0..config.hidden_width * in_dim)
            .map(|_| rng::normal(&mut init_rng) * libm::sqrt(2.0 / in_dim as f64))
            .collect(),
        b1: vec![0.0; config.hidden_width],
        w2: (0..out_dim * config.hidden_width)
            .map(|_| rng::normal(&mut init_rng) * libm::sqrt(2.0 / config.hidden_width as f64))
            .collect(),
        b2: vec![0.0; out_dim],
        frozen_model_digest: digest_before,
    };

    let classes: Vec<usize> = target_classes.iter().copied().collect();
    let mut probe_rng = rng::substream(config.seed, 0x0BE5);
    let probes = probe_pool(&classes, config.noise_dim, 32, &mut probe_rng);
    let initial_loss = mean_probe_loss(&projector, frozen, &probes, config.smoothing_eps)?;

    let mut adam = Adam::new(
        config.learning_rate,
        &[
            projector.w1.len(),
            projector.b1.len(),
            projector.w2.len(),
            projector.b2.len(),
        ],
    );
    let mut step_rng = rng::substream(config.seed, 0x57E9);
    let net = frozen.network();

    for _ in 0..config.steps {
        let mut gw1 = vec![0.0; projector.w1.len()];
        let mut gb1 = vec![0.0; projector.b1.len()];
        let mut gw2 = vec![0.0; projector.w2.len()];
        let mut gb2 = vec![0.0; projector.b2.len()];
        let mut batch_loss = 0.0;

        for _ in 0..config.batch {
            let class = classes[rng::uniform_index(&mut step_rng, classes.len())];
            let z: Vec<f64> = (0..config.noise_dim).map(|_| rng::normal(&mut step_rng)).collect();
            batch_loss += accumulate_sample_gradient(
                &projector,
                net,
                class,
                &z,
                config.smoothing_eps,
                &mut gw1,
                &mut gb1,
                &mut gw2,
                &mut gb2,
            )?;
        }

        if !batch_loss.is_finite() {
            return Err(CoreError::Diverged(
                "projector training loss went non-finite".into(),
            ));
        }
        let scale = 1.0 / config.batch as f64;
        for buf in [&mut gw1, &mut gb1, &mut gw2, &mut gb2] {
            buf.iter_mut().for_each(|v| *v *= scale);
        }
        adam.apply_flat(
            &mut [
                &mut projector.w1,
                &mut projector.b1,
                &mut projector.w2,
                &mut projector.b2,
            ],
            &[&gw1, &gb1, &gw2, &gb2],
        );
    }

    if frozen.recompute_digest() != digest_before {
        return Err(CoreError::ContractViolation(
            "frozen classifier weights changed during projector training".into(),
        ));
    }
    let final_loss = mean_probe_loss(&projector, frozen, &probes, config.smoothing_eps)?;
    if final_loss.is_nan() || final_loss >= initial_loss {
        return Err(CoreError::Diverged(format!(
            "projector probe loss did not improve: {initial_loss} -> {final_loss}"
        )));
    }
    Ok(projector)
}

/// Backprop one (class, z) sample through frozen classifier and projector,
/// adding this sample's gradients into the four buffers. Returns the loss.
#[allow(clippy::too_many_arguments)]
fn accumulate_sample_gradient(
    projector: &ProjectorState,
    net: &crate::nn::Network,
    class: usize,
    z: &[f64],
    eps: f64,
    gw1: &mut [f64],
    gb1: &mut [f64],
    gw2: &mut [f64],
    gb2: &mut [f64],
) -> Result<f64, CoreError> {
    let k = projector.num_classes;
    let in_dim = k + projector.noise_dim;
    let out_dim = projector.geometry.len();
    let (u, h, _, img) = projector.forward(class, z);
    let target = smoothed_target(k, class, eps);

    // Frozen classifier: inference-mode forward/backward, parameter grads
    // discarded, keep only the image gradient.
    let mut scratch = net.zero_grads();
    let (loss, grad_planar) = net.backprop_ce(&img, &target, None, &mut scratch)?;
    // The classifier returns planar (c,h,w) input gradients; the projector
    // emits interleaved (h,w,c) images.
    let grad_img = net.from_planar(&grad_planar);

    // Backprop through sigmoid output.
    let gs: Vec<f64> = grad_img
        .iter()
        .zip(&img)
        .map(|(&g, &y)| g * y * (1.0 - y))
        .collect();
    // Second linear layer.
    let mut gh = vec![0.0; projector.hidden_width];
    for o in 0..out_dim {
        let g = gs[o];
        if g == 0.0 {
            continue;
        }
        gb2[o] += g;
        let row = &projector.w2[o * projector.hidden_width..(o + 1) * projector.hidden_width];
        let grow = &mut gw2[o * projector.hidden_width..(o + 1) * projector.hidden_width];
        for i in 0..projector.hidden_width {
            grow[i] += g * h[i];
            gh[i] += g * row[i];
        }
    }
    // ReLU + first linear layer.
    let mut input = vec![0.0; in_dim];
    input[class] = 1.0;
    input[k..].copy_from_slice(z);
    for o in 0..projector.hidden_width {
        if u[o] <= 0.0 {
            continue;
        }
        let g = gh[o];
        gb1[o] += g;
        let grow = &mut gw1[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * input[i];
        }
    }
    Ok(loss)
}

/// Per-tensor projector gradients of one sample's smoothed-CE loss.
#[derive(Debug, Clone)]
pub struct ProjectorGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Loss and analytic projector gradients for a single (class, z) sample —
/// the exact computation the training loop performs, exposed so external
/// diagnostics can compare it against finite differences.
pub fn projector_sample_gradient(
    projector: &ProjectorState,
    frozen: &ModelState,
    class: usize,
    z: &[f64],
    eps: f64,
) -> Result<(f64, ProjectorGrads), CoreError> {
    if frozen.num_classes() != projector.num_classes {
        return Err(CoreError::Domain(format!(
            "frozen model has {} classes, projector {}",
            frozen.num_classes(),
            projector.num_classes
        )));
    }
    if z.len() != projector.noise_dim {
        return Err(CoreError::Shape(format!(
            "noise vector has {} entries, projector wants {}",
            z.len(),
            projector.noise_dim
        )));
    }
    let mut grads = ProjectorGrads {
        w1: vec![0.0; projector.w1.len()],
        b1: vec![0.0; projector.b1.len()],
        w2: vec![0.0; projector.w2.len()],
        b2: vec![0.0; projector.b2.len()],
    };
    let loss = accumulate_sample_gradient(
        projector,
        frozen.network(),
        class,
        z,
        eps,
        &mut grads.w1,
        &mut grads.b1,
        &mut grads.w2,
        &mut grads.b2,
    )?;
    Ok((loss, grads))
}

/// Generate `count` images of `class`, deterministic for a fixed seed.
pub fn generate_samples(
    projector: &ProjectorState,
    class: usize,
    count: usize,
    seed: u64,
) -> Result<SyntheticBatch, CoreError> {
    if !projector.classes.contains(&class) {
        return Err(CoreError::Domain(format!(
            "projector was not trained for class {class}"
        )));
    }
    let mut r = rng::substream(seed, 0x6E4E);
    let stride = projector.geometry.len();
    let mut pixels = Vec::with_capacity(count * stride);
    for _ in 0..count {
        let z: Vec<f64> = (0..projector.noise_dim).map(|_| rng::normal(&mut r)).collect();
        let img = projector.project(class, &z);
        pixels.extend(img.iter().map(|&v| v.clamp(0.0, 1.0)));
    }
    Ok(SyntheticBatch {
        geometry: projector.geometry,
        pixels,
        source_classes: vec![class; count],
        origin: SyntheticOrigin::Generated,
        seed,
        frozen_model_digest: Some(projector.frozen_model_digest),
    })
}

/// Uniform-noise baseline batch with the same geometry as real images.
pub fn make_noise_batch(
    geometry: Geometry,
    class: usize,
    count: usize,
    seed: u64,
) -> Result<SyntheticBatch, CoreError> {
    if geometry.is_empty() {
        return Err(CoreError::Shape("noise batch geometry has zero volume".into()));
    }
    let mut r = rng::substream(seed, 0x015E);
    let stride = geometry.len();
    let pixels = (0..count * stride).map(|_| rng::uniform(&mut r)).collect();
    Ok(SyntheticBatch {
        geometry,
        pixels,
        source_classes: vec![class; count],
        origin: SyntheticOrigin::Noise,
        seed,
        frozen_model_digest: None,
    })
}

/// Merge batches of identical geometry (multi-class forget requests).
pub fn concat_batches(batches: &[SyntheticBatch]) -> Result<SyntheticBatch, CoreError> {
    let first = batches
        .first()
        .ok_or_else(|| CoreError::Domain("no batches to concatenate".into()))?;
    let mut out = first.clone();
    for b in &batches[1..] {
        if b.geometry != first.geometry || b.origin != first.origin {
            return Err(CoreError::Domain(
                "cannot concatenate batches with different geometry or origin".into(),
            ));
        }
        out.pixels.extend_from_slice(&b.pixels);
        out.source_classes.extend_from_slice(&b.source_classes);
    }
    Ok(out)
}
