//! Single-stage end-to-end training with Adam, checkpointing and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Pair;
use crate::error::{Error, Result};
use crate::io::{self, Archive};
use crate::losses::{ConvStack, FeatureExtractor, LossParts, LossVariant, LossWeights, Objective};
use crate::metrics::{psnr, ssim, SsimParams, Summary};
use crate::model::{Model, Upscaler};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scale: usize,
    /// HR patch side in pixels; must be a multiple of `scale`.
    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Checkpoint period in steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Log period in steps; the last step is always logged.
    pub log_every: usize,
    /// Training-set PSNR period in steps; 0 disables it.
    pub eval_every: usize,
    /// Cosine-decay the learning rate to 0 over `steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale: 2,
            patch_size: 64,
            batch_size: 16,
            steps: 1000,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            objective: Objective {
                variant: LossVariant::Full,
                weights: LossWeights::default(),
            },
            checkpoint_every: 0,
            log_every: 10,
            eval_every: 0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::config("scale", "must be >= 1"));
        }
        if self.patch_size == 0 || self.patch_size % self.scale != 0 {
            return Err(Error::config(
                "patch_size",
                format!("{} is not a positive multiple of scale {}", self.patch_size, self.scale),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("{} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", format!("{} is outside [0, 1)", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", format!("{} is outside [0, 1)", self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be > 0"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        self.objective.weights.validate()
    }

    fn rate_at(&self, step: usize) -> f64 {
        if self.cosine_decay && self.steps > 0 {
            let t = step as f64 / self.steps as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Adam moments mirroring the parameter list, and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. The step is rejected before any
/// parameter changes if a gradient is non-finite; `step` labels that error.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[&str],
    state: &mut AdamState<T>,
    hyper: AdamHyper,
    step: usize,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || names.len() != n {
        return Err(Error::invalid(format!(
            "adam: {n} params, {} grads, {} names, {} moments",
            grads.len(),
            names.len(),
            state.m.len()
        )));
    }
    for i in 0..n {
        let s = params[i].shape();
        if grads[i].shape() != s || state.m[i].shape() != s || state.v[i].shape() != s {
            return Err(Error::shape("adam", "shape", format!("`{}`: param {s}, grad {}", names[i], grads[i].shape())));
        }
        if !grads[i].is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of `{}`", names[i]),
                step,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let c1 = T::one() - T::of(hyper.beta1.powi(t));
    let c2 = T::one() - T::of(hyper.beta2.powi(t));
    let (lr, eps) = (T::of(hyper.lr), T::of(hyper.eps));
    for i in 0..n {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (T::one() - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (T::one() - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, p) in params[i].data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Aligned random crop: an HR `patch x patch` window at a multiple of `r`
/// and the matching `(patch / r)` LR window.
pub fn sample_patches<T: Scalar, R: Rng + ?Sized>(
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    r: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ls, hs) = (lr.shape(), hr.shape());
    if r == 0 || patch == 0 || patch % r != 0 {
        return Err(Error::invalid(format!("patch {patch} is not a positive multiple of scale {r}")));
    }
    if ls.n != hs.n || ls.c != hs.c || ls.h * r != hs.h || ls.w * r != hs.w {
        return Err(Error::shape("sample_patches", "h/w", format!("LR {ls} is not HR {hs} / {r}")));
    }
    if hs.h < patch || hs.w < patch {
        return Err(Error::shape(
            "sample_patches",
            "h/w",
            format!("HR {}x{} is smaller than the {patch} patch", hs.h, hs.w),
        ));
    }
    let y = r * rng.random_range(0..=(hs.h - patch) / r);
    let x = r * rng.random_range(0..=(hs.w - patch) / r);
    let lp = patch / r;
    Ok((lr.crop(y / r, x / r, lp, lp)?, hr.crop(y, x, patch, patch)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(flatten)]
    pub parts: LossParts,
    pub lr: f64,
    pub elapsed_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_psnr: Option<f64>,
}

/// Default perceptual feature map when no pretrained weights are supplied.
pub fn default_extractor<T: Scalar>(seed: u64) -> ConvStack<T> {
    ConvStack::seeded(seed ^ 0x5eed_f00d, 3, 16)
}

/// Trainer state that can be checkpointed and resumed.
pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    model: Model<T>,
    state: AdamState<T>,
    step: usize,
    extractor: Box<dyn FeatureExtractor<T>>,
    log: Vec<LogEntry>,
    log_sink: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, extractor: Box<dyn FeatureExtractor<T>>) -> Result<Self> {
        config.validate()?;
        if config.scale != model.config().scale {
            return Err(Error::config(
                "scale",
                format!("training at {} but the model upscales by {}", config.scale, model.config().scale),
            ));
        }
        let state = AdamState::new(model.params());
        Ok(Trainer {
            config,
            model,
            state,
            step: 0,
            extractor,
            log: Vec::new(),
            log_sink: None,
            checkpoint_dir: None,
        })
    }

    /// Streams every log entry to `path` as JSON lines.
    pub fn log_to(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(Error::at_path(path))?;
        self.log_sink = Some(BufWriter::new(f));
        Ok(())
    }

    /// Directory receiving `step-NNNNNN/` checkpoints every `checkpoint_every` steps.
    pub fn checkpoint_to(&mut self, dir: impl Into<PathBuf>) {
        self.checkpoint_dir = Some(dir.into());
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// The batch drawn at `step`: a ChaCha8 stream keyed by `(seed, step)`,
    /// so resumed runs draw the same patches as uninterrupted ones.
    fn batch(&self, pairs: &[Pair<T>], step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        let mut lrs = Vec::with_capacity(self.config.batch_size);
        let mut hrs = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let (l, h) = sample_patches(&p.lr, &p.hr, self.config.scale, self.config.patch_size, &mut rng)
                .map_err(|e| Error::invalid(format!("pair `{}`: {e}", p.id)))?;
            lrs.push(l);
            hrs.push(h);
        }
        Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
    }

    /// Loss of the next step's batch under the current weights, without updating.
    pub fn peek_loss(&self, pairs: &[Pair<T>]) -> Result<f64> {
        let (lr, hr) = self.batch(pairs, self.step)?;
        let g = Graph::new();
        let p = self.model.bind(&g, false);
        let sr = self.model.forward_graph(&g, &p, &g.constant(lr), |_, _| {})?;
        let loss = self.config.objective.evaluate(&g, &sr, &g.constant(hr), self.extractor.as_ref())?;
        Ok(loss.total.item()?.to_f64_lossy())
    }

    /// One optimization step; returns the pre-update loss.
    pub fn train_step(&mut self, pairs: &[Pair<T>]) -> Result<(f64, LossParts)> {
        if pairs.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let step = self.step;
        let (lr, hr) = self.batch(pairs, step)?;
        let g = Graph::new();
        let p = self.model.bind(&g, true);
        let sr = self.model.forward_graph(&g, &p, &g.constant(lr), |_, _| {})?;
        let loss = self.config.objective.evaluate(&g, &sr, &g.constant(hr), self.extractor.as_ref())?;
        let value = loss.total.item()?.to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step,
            });
        }
        g.backward(&loss.total)?;
        let grads: Vec<Tensor<T>> = p
            .all
            .iter()
            .zip(self.model.params())
            .map(|(v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let names: Vec<String> = self.model.schema().iter().map(|s| s.name.clone()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let hyper = AdamHyper {
            lr: self.config.rate_at(step),
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
        };
        adam_step(self.model.params_mut(), &grads, &names, &mut self.state, hyper, step)?;
        self.step += 1;
        Ok((value, loss.parts))
    }

    /// Runs until `config.steps` total steps have been taken.
    pub fn run(&mut self, pairs: &[Pair<T>]) -> Result<()> {
        let start = Instant::now();
        while self.step < self.config.steps {
            let step = self.step;
            let (loss, parts) = self.train_step(pairs)?;
            let done = self.step;
            let last = done == self.config.steps;
            if step % self.config.log_every == 0 || last {
                let train_psnr = if self.config.eval_every > 0 && (done % self.config.eval_every == 0 || last) {
                    Some(evaluate(&self.model, pairs)?.psnr.mean)
                } else {
                    None
                };
                let entry = LogEntry {
                    step,
                    loss,
                    parts,
                    lr: self.config.rate_at(step),
                    elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
                    train_psnr,
                };
                log::info!("step {step}: loss {loss:.6}");
                if let Some(sink) = &mut self.log_sink {
                    serde_json::to_writer(&mut *sink, &entry)?;
                    sink.write_all(b"\n")?;
                    sink.flush()?;
                }
                self.log.push(entry);
            }
            if self.config.checkpoint_every > 0 && (done % self.config.checkpoint_every == 0 || last) {
                if let Some(dir) = &self.checkpoint_dir {
                    self.checkpoint().save(dir.join(format!("step-{done:06}")))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            state: self.state.clone(),
            step: self.step,
        }
    }

    /// Restores weights, optimizer moments and the step counter.
    pub fn resume(
        ckpt: Checkpoint<T>,
        config: TrainConfig,
        extractor: Box<dyn FeatureExtractor<T>>,
    ) -> Result<Self> {
        let mut t = Trainer::new(ckpt.model, config, extractor)?;
        if ckpt.state.m.len() != t.state.m.len() {
            return Err(Error::invalid("checkpoint optimizer state does not match the model"));
        }
        t.state = ckpt.state;
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Weights, optimizer state and step counter.
///
/// Saved as a directory holding `weights.efrw` (the portable 32-bit export)
/// and `state.efrt`, which keeps parameters and moments at full precision so
/// a resumed run continues bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub state: AdamState<T>,
    pub step: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        io::save_weights(&self.model, dir.join("weights.efrw"))?;
        let mut a = Archive::new(serde_json::json!({
            "step": self.step,
            "adam_t": self.state.t,
            "config": self.model.config(),
        }));
        for (spec, p) in self.model.schema().iter().zip(self.model.params()) {
            a.push(format!("param.{}", spec.name), p.clone());
        }
        for (spec, (m, v)) in self.model.schema().iter().zip(self.state.m.iter().zip(&self.state.v)) {
            a.push(format!("m.{}", spec.name), m.clone());
            a.push(format!("v.{}", spec.name), v.clone());
        }
        a.save(dir.join("state.efrt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let exported: Model<T> = io::load_weights(dir.join("weights.efrw"))?;
        let a = Archive::<T>::load(dir.join("state.efrt"))?;
        let field = |k: &str| {
            a.meta
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks `{k}`")))
        };
        let step = field("step")? as usize;
        let t = field("adam_t")?;
        let get = |prefix: &str, name: &str| {
            a.get(&format!("{prefix}.{name}"))
                .cloned()
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{prefix}.{name}`")))
        };
        let schema = exported.schema().to_vec();
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for spec in &schema {
            params.push(get("param", &spec.name)?);
            m.push(get("m", &spec.name)?);
            v.push(get("v", &spec.name)?);
        }
        let model = Model::from_params(exported.config().clone(), params)?;
        let check = |ts: &[Tensor<T>]| ts.iter().zip(model.params()).all(|(a, b)| a.shape() == b.shape());
        if !check(&m) || !check(&v) {
            return Err(Error::invalid("checkpoint moments do not match parameter shapes"));
        }
        Ok(Checkpoint {
            model,
            state: AdamState { m, v, t },
            step,
        })
    }
}

/// Trains `model` on `pairs` with the default perceptual extractor.
pub fn train<T: Scalar>(pairs: &[Pair<T>], model: Model<T>, config: &TrainConfig) -> Result<(Model<T>, Vec<LogEntry>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let extractor = Box::new(default_extractor(config.seed));
    let mut t = Trainer::new(model, config.clone(), extractor)?;
    t.run(pairs)?;
    let log = t.log.clone();
    Ok((t.into_model(), log))
}

/// Passes images through unchanged; a reference point for evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityUpscaler;

impl<T: Scalar> Upscaler<T> for IdentityUpscaler {
    fn scale(&self) -> usize {
        1
    }

    fn upscale(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(lr.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_image: Vec<ImageScore>,
    pub psnr: Summary,
    pub ssim: Summary,
}

/// PSNR (RGB, peak 1) and luma SSIM of the clamped upscaler output against
/// each HR image.
pub fn evaluate<T: Scalar>(model: &dyn Upscaler<T>, pairs: &[Pair<T>]) -> Result<Evaluation> {
    let params = SsimParams::default();
    let mut per_image = Vec::with_capacity(pairs.len());
    for p in pairs {
        let sr = model.upscale(&p.lr)?.clamp(T::zero(), T::one());
        if sr.shape() != p.hr.shape() {
            return Err(Error::shape(
                "evaluate",
                "shape",
                format!("`{}`: output {} vs HR {}", p.id, sr.shape(), p.hr.shape()),
            ));
        }
        per_image.push(ImageScore {
            id: p.id.clone(),
            psnr: psnr(&sr, &p.hr, 1.0)?,
            ssim: ssim(&sr, &p.hr, &params)?,
        });
    }
    let ps: Vec<f64> = per_image.iter().map(|s| s.psnr).collect();
    let ss: Vec<f64> = per_image.iter().map(|s| s.ssim).collect();
    Ok(Evaluation {
        psnr: Summary::of(&ps),
        ssim: Summary::of(&ss),
        per_image,
    })
}
