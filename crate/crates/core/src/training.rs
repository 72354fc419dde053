//! Separation loss, training-pair construction for the three modes, and the optimisation loop.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::dataset::{self, DatasetError, Manifest, Split};
use crate::dsp::{self, make_input_features, DspError, MixConfig, Spectrogram, StftPlan};
use crate::model::{ModelError, SeparatorNet};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("no train clips for machine type {0:?}")]
    EmptyPool(String),
    #[error("mode {0} needs at least one non-target machine type with train clips")]
    NoNontargetClasses(TrainMode),
    #[error("mode {0} needs a non-target waveform")]
    MissingNontarget(TrainMode),
    #[error("training diverged in epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 6.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "loss weights ({}, {}, {}) must be >= 0 and not all zero",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    ProposedNontargetSep,
    ConventionalTargetSep,
    Autoencoder,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [
        TrainMode::ProposedNontargetSep,
        TrainMode::ConventionalTargetSep,
        TrainMode::Autoencoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::ProposedNontargetSep => "proposed_nontarget_sep",
            TrainMode::ConventionalTargetSep => "conventional_target_sep",
            TrainMode::Autoencoder => "autoencoder",
        }
    }

    pub fn needs_nontarget(self) -> bool {
        self != TrainMode::Autoencoder
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected proposed_nontarget_sep|conventional_target_sep|autoencoder)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub target_class: String,
    pub nontarget_classes: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub lr_gamma: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub seed: u64,
    pub crop_seconds: f64,
    pub loss: LossWeights,
    /// Absolute values on the real and imaginary planes, as in the written loss.
    pub literal_abs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::ProposedNontargetSep,
            target_class: String::new(),
            nontarget_classes: Vec::new(),
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-2,
            step_size: 10,
            lr_gamma: 0.5,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            seed: 0,
            crop_seconds: 2.0,
            loss: LossWeights::default(),
            literal_abs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.loss.validate()?;
        if self.target_class.is_empty() {
            return bad("target_class is empty".into());
        }
        if self.nontarget_classes.contains(&self.target_class) {
            return bad(format!("target class {:?} is also listed as non-target", self.target_class));
        }
        if self.mode.needs_nontarget() && self.nontarget_classes.is_empty() {
            return Err(TrainError::NoNontargetClasses(self.mode));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.step_size == 0 {
            return bad("epochs, batch_size and step_size must be > 0".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and >= 0".into());
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma = {} must lie in (0, 1]", self.lr_gamma));
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if !(self.crop_seconds > 0.0) {
            return bad("crop_seconds must be > 0".into());
        }
        Ok(())
    }

    /// StepLR rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi(((epoch - 1) / self.step_size) as i32)
    }
}

/// Loss value and its gradients with respect to the estimate.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub d_wave: Vec<f64>,
    pub d_real: Array2<f64>,
    pub d_imag: Array2<f64>,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_loss_inputs(y: &[f64], est: &Spectrogram, target_wave: &[f64], target_spec: &Spectrogram) -> Result<()> {
    if y.len() != target_wave.len() || y.is_empty() {
        return Err(TrainError::ShapeMismatch(format!(
            "waveform lengths {} vs {}",
            y.len(),
            target_wave.len()
        )));
    }
    let shapes = [est.real.dim(), est.imag.dim(), target_spec.real.dim(), target_spec.imag.dim()];
    if shapes.iter().any(|s| *s != shapes[0]) || shapes[0].0 * shapes[0].1 == 0 {
        return Err(TrainError::ShapeMismatch(format!("spectral shapes {shapes:?}")));
    }
    let finite = |w: &[f64], s: &Spectrogram| w.iter().chain(&s.real).chain(&s.imag).all(|v| v.is_finite());
    if !finite(y, est) {
        return Err(TrainError::NonFinite("estimate".into()));
    }
    if !finite(target_wave, target_spec) {
        return Err(TrainError::NonFinite("target".into()));
    }
    Ok(())
}

fn plane_term(t: f64, e: f64, literal_abs: bool) -> (f64, f64) {
    // returns (residual, d residual / d e)
    if literal_abs {
        (t.abs() - e.abs(), -sgn(e))
    } else {
        (t - e, -1.0)
    }
}

/// `α·mean|t − y| + β·mean(|T^R| − |Y^R|)² + γ·mean(|T^I| − |Y^I|)²`.
pub fn separation_loss(
    y: &[f64],
    est: &Spectrogram,
    target_wave: &[f64],
    target_spec: &Spectrogram,
    w: &LossWeights,
    literal_abs: bool,
) -> Result<f64> {
    Ok(separation_loss_grad(y, est, target_wave, target_spec, w, literal_abs)?.value)
}

pub fn separation_loss_grad(
    y: &[f64],
    est: &Spectrogram,
    target_wave: &[f64],
    target_spec: &Spectrogram,
    w: &LossWeights,
    literal_abs: bool,
) -> Result<LossGrad> {
    check_loss_inputs(y, est, target_wave, target_spec)?;
    let l = y.len() as f64;
    let mut wave = 0.0;
    let d_wave = y
        .iter()
        .zip(target_wave)
        .map(|(&yv, &tv)| {
            wave += (tv - yv).abs();
            -w.alpha * sgn(tv - yv) / l
        })
        .collect();
    let mn = est.real.len() as f64;
    let plane = |t: &Array2<f64>, e: &Array2<f64>, k: f64| {
        let mut sum = 0.0;
        let mut d = Array2::zeros(e.raw_dim());
        ndarray::Zip::from(&mut d).and(t).and(e).for_each(|d, &tv, &ev| {
            let (r, dr) = plane_term(tv, ev, literal_abs);
            sum += r * r;
            *d = k * 2.0 * r * dr / mn;
        });
        (sum / mn, d)
    };
    let (re, d_real) = plane(&target_spec.real, &est.real, w.beta);
    let (im, d_imag) = plane(&target_spec.imag, &est.imag, w.gamma);
    Ok(LossGrad {
        value: w.alpha * wave / l + w.beta * re + w.gamma * im,
        d_wave,
        d_real,
        d_imag,
    })
}

/// Records the loss on `tape` given the waveform node `y` and the `(2, frames, bins)` node `spec`.
pub fn loss_on_tape(
    tape: &mut Tape,
    y: Var,
    spec: Var,
    target_wave: &[f64],
    target_spec: &Spectrogram,
    w: &LossWeights,
    literal_abs: bool,
) -> Result<Var> {
    let s = tape.value(spec);
    if s.ndim() != 3 || s.shape()[0] != 2 {
        return Err(TrainError::ShapeMismatch(format!("spectral node shape {:?}", s.shape())));
    }
    let est = Spectrogram {
        real: s.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("plane"),
        imag: s.index_axis(Axis(0), 1).to_owned().into_dimensionality().expect("plane"),
    };
    let yv: Vec<f64> = tape.value(y).iter().copied().collect();
    let g = separation_loss_grad(&yv, &est, target_wave, target_spec, w, literal_abs)?;
    let value = ArrayD::from_elem(IxDyn(&[]), g.value);
    let LossGrad {
        d_wave, d_real, d_imag, ..
    } = g;
    Ok(tape.push_op(value, move |_, seed, grads| {
        let k = seed.first().copied().unwrap_or(0.0);
        let dw = ArrayD::from_shape_vec(IxDyn(&[d_wave.len()]), d_wave.iter().map(|v| v * k).collect())
            .expect("length");
        grads.accumulate(y, dw);
        let ds = ndarray::stack(Axis(0), &[d_real.view(), d_imag.view()]).expect("planes") * k;
        grads.accumulate(spec, ds.into_dyn());
    }))
}

/// Network input and regression target for one training example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub features: ndarray::Array3<f64>,
    pub input_spec: Spectrogram,
    pub target_wave: Vec<f64>,
    pub target_spec: Spectrogram,
    /// Scaling factor applied to the non-target, `0` in autoencoder mode.
    pub scale: f64,
}

pub fn make_training_pair(
    mode: TrainMode,
    d: &[f64],
    n: Option<&[f64]>,
    mix: &MixConfig,
    plan: &StftPlan,
    compression: Option<f64>,
) -> Result<TrainingPair> {
    let pair = |input_spec: Spectrogram, target_wave: Vec<f64>, target_spec: Spectrogram, scale| TrainingPair {
        features: make_input_features(&input_spec, compression),
        input_spec,
        target_wave,
        target_spec,
        scale,
    };
    if mode == TrainMode::Autoencoder {
        let spec = plan.stft(d)?;
        return Ok(pair(spec.clone(), d.to_vec(), spec, 0.0));
    }
    let n = n.ok_or(TrainError::MissingNontarget(mode))?;
    let s = dsp::match_db_scale(d, n, mix)?;
    let m = dsp::mix(d, n, s, plan)?;
    Ok(match mode {
        TrainMode::ProposedNontargetSep => {
            let sn: Vec<f64> = n.iter().map(|v| s * v).collect();
            let target_spec = plan.stft(&sn)?;
            pair(m.spec, sn, target_spec, s)
        }
        _ => pair(m.spec, d.to_vec(), plan.stft(d)?, s),
    })
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a ArrayD<f64>>, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            betas,
            eps,
            weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut ArrayD<f64>>, grads: &[ArrayD<f64>], lr: f64) {
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if *m != 0.0 {
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, r.lr));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Final over first epoch mean loss.
    pub fn loss_ratio(&self) -> Option<f64> {
        Some(self.epochs.last()?.mean_loss / self.epochs.first()?.mean_loss)
    }
}

/// In-memory training pools.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub target: Vec<Vec<f64>>,
    /// Non-target classes with their clips, in class order.
    pub nontarget: Vec<(String, Vec<Vec<f64>>)>,
}

impl Pools {
    pub fn load(manifest: &Manifest, cfg: &TrainConfig) -> Result<Self> {
        let read = |class: &str| -> Result<Vec<Vec<f64>>> {
            let clips = manifest.read_all(manifest.select(class, Split::Train))?;
            if clips.is_empty() {
                return Err(TrainError::EmptyPool(class.to_string()));
            }
            Ok(clips.into_iter().map(|c| c.samples).collect())
        };
        let target = read(&cfg.target_class)?;
        let nontarget = if cfg.mode.needs_nontarget() {
            cfg.nontarget_classes
                .iter()
                .map(|c| Ok((c.clone(), read(c)?)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { target, nontarget })
    }
}

/// Trains `net` on the manifest's train clips.
pub fn fit(net: &mut SeparatorNet, manifest: &Manifest, cfg: &TrainConfig, mix: &MixConfig) -> Result<History> {
    cfg.validate()?;
    let pools = Pools::load(manifest, cfg)?;
    fit_pools(net, &pools, cfg, mix)
}

pub fn fit_pools(net: &mut SeparatorNet, pools: &Pools, cfg: &TrainConfig, mix: &MixConfig) -> Result<History> {
    cfg.validate()?;
    mix.validate()?;
    if pools.target.is_empty() {
        return Err(TrainError::EmptyPool(cfg.target_class.clone()));
    }
    if cfg.mode.needs_nontarget() {
        if pools.nontarget.is_empty() {
            return Err(TrainError::NoNontargetClasses(cfg.mode));
        }
        if let Some((c, _)) = pools.nontarget.iter().find(|(_, clips)| clips.is_empty()) {
            return Err(TrainError::EmptyPool(c.clone()));
        }
    }
    let compression = net.config().input_compression;
    let plan = StftPlan::new(net.stft_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(net.param_values(), cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..pools.target.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<ArrayD<f64>> = net.param_values().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            for &i in batch {
                let d = dataset::random_trim(&pools.target[i], cfg.crop_seconds, &mut rng)?;
                let n = if cfg.mode.needs_nontarget() {
                    let (_, clips) = &pools.nontarget[rng.gen_range(0..pools.nontarget.len())];
                    let clip = &clips[rng.gen_range(0..clips.len())];
                    Some(dataset::random_trim(clip, cfg.crop_seconds, &mut rng)?)
                } else {
                    None
                };
                let pair = make_training_pair(cfg.mode, &d, n.as_deref(), mix, &plan, compression)?;
                let mut tape = Tape::new();
                let out = match net.forward_on_tape(&mut tape, &pair.features, d.len()) {
                    Ok(o) => o,
                    Err(ModelError::NonFinite(_)) => return Err(TrainError::Diverged(epoch)),
                    Err(e) => return Err(e.into()),
                };
                let loss = loss_on_tape(
                    &mut tape,
                    out.y,
                    out.spec,
                    &pair.target_wave,
                    &pair.target_spec,
                    &cfg.loss,
                    cfg.literal_abs,
                )
                .map_err(|e| match e {
                    TrainError::NonFinite(_) => TrainError::Diverged(epoch),
                    e => e,
                })?;
                let value = tape.value(loss).first().copied().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(TrainError::Diverged(epoch));
                }
                total += value;
                let mut grads = tape.backward(loss, ArrayD::from_elem(IxDyn(&[]), 1.0));
                for (a, &p) in acc.iter_mut().zip(&out.params) {
                    if let Some(g) = grads.take(p) {
                        *a += &g;
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|a| *a *= k);
            opt.step(net.param_values_mut(), &acc, lr);
        }
        let mean_loss = total / pools.target.len() as f64;
        if !mean_loss.is_finite() || net.param_values().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged(epoch));
        }
        log::info!(
            "{} [{}] epoch {epoch}/{}: mean loss {mean_loss:.6}, lr {lr:e}",
            cfg.target_class,
            cfg.mode,
            cfg.epochs
        );
        history.epochs.push(EpochRecord { epoch, mean_loss, lr });
    }
    Ok(history)
}
