//! End-to-end training and the inference pipeline.
//!
//! The model couples the semantic encoder, the UNet noise predictor, and
//! the forecasting heads in one parameter store. Training minimizes
//! `L = L_noise + L_forecasting`: per sample, a step index is drawn
//! uniformly from the training grid, Gaussian noise is blended in with the
//! forward-noising rule, and the UNet must recover it while the forecaster
//! predicts the frames after the window. Inference reconstructs a window
//! from its semantic embedding and the DDIM-inverted stochastic tensor.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    decode, encode_stochastic, forward_noise, make_schedule, DiffusionSchedule, NoisePredictor,
    ScheduleSpec,
};
use crate::forecaster::{Forecaster, HEAD_FALLBACK, HEAD_MIN_NORM};
use crate::nn::params::GradAccum;
use crate::nn::{Adam, Graph, ParamStore};
use crate::noise_predictor::{predict_noise_eval, UNet};
use crate::semantic_encoder::{encode_semantic_eval, EncoderKind, SemanticEncoder};
use crate::signals::Sample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint version {0} not supported")]
    VersionMismatch(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Architecture dimensions. Defaults follow the reference sizes; the
/// reduced constructor halves widths for desk-scale CPU runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub dn: usize,
    pub enc_channels: usize,
    pub sem_dim: usize,
    pub unet_channels: usize,
    pub gn_groups: usize,
    pub time_dim: usize,
    pub dropout: f64,
    pub encoder: EncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 40,
            dn: 3,
            enc_channels: 16,
            sem_dim: 128,
            unet_channels: 64,
            gn_groups: 8,
            time_dim: 128,
            dropout: 0.1,
            encoder: EncoderKind::Gcn,
        }
    }
}

impl ModelConfig {
    /// Channels halved for CPU experiments.
    pub fn reduced() -> Self {
        ModelConfig {
            enc_channels: 8,
            sem_dim: 64,
            unet_channels: 32,
            gn_groups: 8,
            time_dim: 64,
            ..Default::default()
        }
    }

    /// Tiny dimensions for finite-difference gradient checks.
    pub fn tiny(n: usize, dn: usize) -> Self {
        ModelConfig {
            n,
            dn,
            enc_channels: 3,
            sem_dim: 6,
            unet_channels: 6,
            gn_groups: 2,
            time_dim: 6,
            dropout: 0.1,
            encoder: EncoderKind::Gcn,
        }
    }
}

/// Optimization settings; defaults echo the reference training recipe
/// (130 epochs, Adam at 1e-4, batch 64).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Hand channels are divided by this scale before the networks.
    pub signal_scale: f64,
    /// Weight on the forecasting term; the reference loss is an unweighted sum.
    pub forecast_weight: f64,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    /// Optional per-epoch multiplicative LR decay; off by default.
    pub lr_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 130,
            learning_rate: 1e-4,
            batch_size: 64,
            seed: 0,
            signal_scale: 1.0,
            forecast_weight: 1.0,
            grad_clip: None,
            lr_decay: None,
        }
    }
}

/// Encoder + noise predictor + forecaster over one parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: SemanticEncoder,
    pub unet: UNet,
    pub forecaster: Forecaster,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = SemanticEncoder::new(
            &mut params,
            &mut rng,
            config.encoder,
            config.n,
            config.enc_channels,
            config.sem_dim,
            config.dropout,
        );
        let unet = UNet::new(
            &mut params,
            &mut rng,
            config.n,
            config.unet_channels,
            config.gn_groups,
            config.time_dim,
            config.sem_dim,
            config.dropout,
            1000,
        );
        let forecaster = Forecaster::new(&mut params, &mut rng, config.enc_channels, config.dn);
        Model { config, params, encoder, unet, forecaster }
    }

    /// Divide hand rows by the signal scale (head rows are already unit).
    pub fn scale_signal(x9: &Array2<f64>, s: f64) -> Array2<f64> {
        let mut out = x9.clone();
        for r in 0..6 {
            for v in out.row_mut(r).iter_mut() {
                *v /= s;
            }
        }
        out
    }

    pub fn unscale_signal(x9: &Array2<f64>, s: f64) -> Array2<f64> {
        let mut out = x9.clone();
        for r in 0..6 {
            for v in out.row_mut(r).iter_mut() {
                *v *= s;
            }
        }
        out
    }

    /// Renormalize the head-direction rows (6..9) to unit columns.
    pub fn renorm_head_rows(x9: &mut Array2<f64>) {
        let mut last = HEAD_FALLBACK;
        for j in 0..x9.ncols() {
            let n = (6..9).map(|r| x9[(r, j)] * x9[(r, j)]).sum::<f64>().sqrt();
            if n < HEAD_MIN_NORM {
                for (k, r) in (6..9).enumerate() {
                    x9[(r, j)] = last[k];
                }
            } else {
                for (k, r) in (6..9).enumerate() {
                    x9[(r, j)] /= n;
                    last[k] = x9[(r, j)];
                }
            }
        }
    }

    /// Eval-mode semantic embedding of a raw (metres) window.
    pub fn embed(&self, x9_raw: &Array2<f64>, signal_scale: f64) -> Array1<f64> {
        let scaled = Self::scale_signal(x9_raw, signal_scale);
        encode_semantic_eval(&self.encoder, &self.params, &scaled).0
    }

    /// Stochastic embedding `H_T` of a raw window (scaled space).
    pub fn encode_stochastic_raw(
        &self,
        x9_raw: &Array2<f64>,
        signal_scale: f64,
        sched: &DiffusionSchedule,
    ) -> Result<(Array1<f64>, Array2<f64>), TrainError> {
        let scaled = Self::scale_signal(x9_raw, signal_scale);
        let (e_sem, _) = encode_semantic_eval(&self.encoder, &self.params, &scaled);
        let h_t = encode_stochastic(&scaled, &e_sem, &ModelPredictor(self), sched)?;
        Ok((e_sem, h_t))
    }

    /// Decode a (scaled-space) stochastic tensor under a semantic embedding,
    /// returning metres with unit head columns.
    pub fn decode_raw(
        &self,
        e_sto: &Array2<f64>,
        e_sem: &Array1<f64>,
        signal_scale: f64,
        sched: &DiffusionSchedule,
    ) -> Result<Array2<f64>, TrainError> {
        let decoded = decode(e_sto, e_sem, &ModelPredictor(self), sched)?;
        let mut out = Self::unscale_signal(&decoded, signal_scale);
        Self::renorm_head_rows(&mut out);
        Ok(out)
    }

    /// Full reconstruction: semantic embedding, stochastic inversion, decode.
    pub fn reconstruct(
        &self,
        x9_raw: &Array2<f64>,
        signal_scale: f64,
        sched: &DiffusionSchedule,
    ) -> Result<Array2<f64>, TrainError> {
        let (e_sem, e_sto) = self.encode_stochastic_raw(x9_raw, signal_scale, sched)?;
        self.decode_raw(&e_sto, &e_sem, signal_scale, sched)
    }
}

/// Eval-mode [`NoisePredictor`] view of a model.
pub struct ModelPredictor<'a>(pub &'a Model);

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, h_t: &Array2<f64>, t: usize, e_sem: &Array1<f64>) -> Array2<f64> {
        predict_noise_eval(&self.0.unet, &self.0.params, h_t, t, e_sem)
    }
}

/// Pre-drawn noising randomness for one sample, so losses stay pure
/// functions of the parameters during gradient checks.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Array2<f64>,
}

pub fn draw_noise<R: Rng>(rng: &mut R, n: usize, t_train: usize) -> NoiseDraw {
    let t = rng.random_range(1..=t_train);
    let normal = rand_distr::StandardNormal;
    let eps = Array2::from_shape_fn((9, n), |_| normal.sample(rng));
    NoiseDraw { t, eps }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub noise: f64,
    pub forecast: f64,
}

/// Loss evaluation knobs; `detach_sem_for_unet` severs the semantic
/// conditioning path into the UNet (wiring diagnostics only).
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub signal_scale: f64,
    pub forecast_weight: f64,
    pub training: bool,
    pub detach_sem_for_unet: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            signal_scale: 1.0,
            forecast_weight: 1.0,
            training: true,
            detach_sem_for_unet: false,
        }
    }
}

/// Combined loss over a batch with caller-supplied noise draws. When
/// `grads` is given, parameter gradients of the batch-mean loss are
/// accumulated into it.
pub fn batch_loss_with_draws<R: Rng>(
    model: &Model,
    batch: &[Sample],
    draws: &[NoiseDraw],
    opts: &LossOptions,
    sched: &DiffusionSchedule,
    rng: &mut R,
    mut grads: Option<&mut GradAccum>,
) -> Result<LossBreakdown, TrainError> {
    assert_eq!(batch.len(), draws.len());
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = model.config.n;
    let dn = model.config.dn;
    let mut sum = LossBreakdown::default();
    for (sample, draw) in batch.iter().zip(draws) {
        if sample.input.len() != n || sample.future.len() != dn {
            return Err(TrainError::ShapeMismatch {
                expected: format!("input {n}, future {dn}"),
                got: format!("input {}, future {}", sample.input.len(), sample.future.len()),
            });
        }
        let x9 = Model::scale_signal(&sample.input.to_matrix(), opts.signal_scale);
        let y9 = Model::scale_signal(&sample.future.to_matrix(), opts.signal_scale);
        let h_t = forward_noise(&x9, draw.t, &draw.eps, sched)?;

        let recording = grads.is_some();
        let mut g = Graph::new(recording);
        let bound = model.params.bind(&mut g);
        let x_var = g.constant(x9.into_dyn());
        let (e_sem, f_map) = model.encoder.forward(&mut g, &bound, x_var, opts.training, rng);

        // noise prediction branch
        let h_t_var = g.constant(h_t.into_dyn());
        let e_sem_unet = if opts.detach_sem_for_unet {
            let detached = g.value(e_sem).clone();
            g.constant(detached)
        } else {
            e_sem
        };
        let eps_hat = model.unet.forward(
            &mut g,
            &bound,
            h_t_var,
            draw.t,
            e_sem_unet,
            opts.training,
            rng,
        );
        let eps_const = g.constant(draw.eps.clone().into_dyn());
        let noise_diff = g.sub(eps_hat, eps_const);
        let noise_sq = g.sum_sq(noise_diff);
        let l_noise = g.scale(noise_sq, 1.0 / n as f64);

        // forecasting branch
        let (ha, he) = model.forecaster.forward(&mut g, &bound, f_map);
        let y_hat = g.concat(0, &[ha, he]);
        let y_const = g.constant(y9.into_dyn());
        let fc_diff = g.sub(y_hat, y_const);
        let fc_sq = g.sum_sq(fc_diff);
        let l_forecast = g.scale(fc_sq, 1.0 / dn as f64);

        let l_fw = g.scale(l_forecast, opts.forecast_weight);
        let total = g.add(l_noise, l_fw);

        sum.total += g.value(total).iter().next().copied().unwrap();
        sum.noise += g.value(l_noise).iter().next().copied().unwrap();
        sum.forecast += g.value(l_forecast).iter().next().copied().unwrap();

        if let Some(acc) = grads.as_deref_mut() {
            let all = g.backward(total);
            acc.add(bound.grads(&all));
        }
    }
    let k = 1.0 / batch.len() as f64;
    Ok(LossBreakdown { total: sum.total * k, noise: sum.noise * k, forecast: sum.forecast * k })
}

/// Draw `(t, eps)` per sample, then evaluate the combined loss.
pub fn compute_loss<R: Rng>(
    model: &Model,
    batch: &[Sample],
    opts: &LossOptions,
    sched: &DiffusionSchedule,
    rng: &mut R,
    grads: Option<&mut GradAccum>,
) -> Result<LossBreakdown, TrainError> {
    let draws: Vec<NoiseDraw> = batch
        .iter()
        .map(|_| draw_noise(rng, model.config.n, sched.t_train()))
        .collect();
    batch_loss_with_draws(model, batch, &draws, opts, sched, rng, grads)
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub l_noise: f64,
    pub l_forecast: f64,
}

/// Train a model on windowed samples. Deterministic for a fixed seed on a
/// single thread: shuffling, step draws, noise, and dropout all come from
/// one seeded stream.
pub fn train(
    dataset: &[Sample],
    model_config: ModelConfig,
    config: &TrainConfig,
    sched: &DiffusionSchedule,
) -> Result<(Model, Vec<LogRow>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = Model::new(model_config, config.seed);
    let log = train_in_place(&mut model, dataset, config, sched)?;
    Ok((model, log))
}

/// Training loop over an existing model (shared by the VAE baselines).
pub fn train_in_place(
    model: &mut Model,
    dataset: &[Sample],
    config: &TrainConfig,
    sched: &DiffusionSchedule,
) -> Result<Vec<LogRow>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(config.learning_rate, model.params.len());
    let opts = LossOptions {
        signal_scale: config.signal_scale,
        forecast_weight: config.forecast_weight,
        training: true,
        detach_sem_for_unet: false,
    };
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut step = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let mut acc = GradAccum::new(&model.params);
            let losses =
                compute_loss(model, &batch, &opts, sched, &mut rng, Some(&mut acc))?;
            let mut grads = acc.mean();
            crate::nn::adam::clip_global_norm(&mut grads, config.grad_clip);
            adam.step(&mut model.params, &grads);
            log.push(LogRow {
                epoch,
                step,
                total: losses.total,
                l_noise: losses.noise,
                l_forecast: losses.forecast,
            });
            step += 1;
        }
        if let Some(decay) = config.lr_decay {
            adam.lr *= decay;
        }
    }
    Ok(log)
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    // Fisher-Yates; index draws come from the shared training stream
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[LogRow]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,step,total,l_noise,l_forecast")?;
    for row in log {
        writeln!(
            f,
            "{},{},{},{},{}",
            row.epoch, row.step, row.total, row.l_noise, row.l_forecast
        )?;
    }
    Ok(())
}

// ---- checkpoint format ----

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    schedule: ScheduleSpec,
}

/// Write `manifest.json` + `weights.bin` (little-endian f32, row-major,
/// manifest order) into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    store: &ParamStore,
    config: &serde_json::Value,
    schedule: &ScheduleSpec,
) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, value) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for v in value.as_standard_layout().iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: 1,
        tensors,
        config: config.clone(),
        schedule: schedule.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Raw checkpoint contents: named tensors plus the stored config/schedule.
pub struct RawCheckpoint {
    pub tensors: Vec<(String, ArrayD<f64>)>,
    pub config: serde_json::Value,
    pub schedule: ScheduleSpec,
}

pub fn load_checkpoint_raw(dir: impl AsRef<Path>) -> Result<RawCheckpoint, CheckpointError> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != 1 {
        return Err(CheckpointError::VersionMismatch(manifest.version));
    }
    let blob = std::fs::read(dir.join("weights.bin"))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * len;
        if end > blob.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{}` runs past the end of weights.bin",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let at = entry.offset + 4 * i;
            let bits = [blob[at], blob[at + 1], blob[at + 2], blob[at + 3]];
            data.push(f32::from_le_bytes(bits) as f64);
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.push((entry.name.clone(), arr));
    }
    Ok(RawCheckpoint { tensors, config: manifest.config, schedule: manifest.schedule })
}

/// Overwrite a parameter store from checkpoint tensors; names, counts and
/// shapes must match the registry exactly.
pub fn load_into_store(
    store: &mut ParamStore,
    tensors: Vec<(String, ArrayD<f64>)>,
) -> Result<(), CheckpointError> {
    if tensors.len() != store.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, checkpoint has {}",
            store.len(),
            tensors.len()
        )));
    }
    for (name, value) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor `{name}`")))?;
        if store.get(id).shape() != value.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}` shape {:?} does not match registry {:?}",
                value.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

/// Checkpoint config payload for the diffusion autoencoder.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelCheckpointConfig {
    pub kind: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Model {
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        train: &TrainConfig,
        schedule: &ScheduleSpec,
    ) -> Result<(), CheckpointError> {
        let config = serde_json::to_value(ModelCheckpointConfig {
            kind: "diffusion-ae".into(),
            model: self.config.clone(),
            train: train.clone(),
        })?;
        save_checkpoint(dir, &self.params, &config, schedule)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Model, TrainConfig, ScheduleSpec), CheckpointError> {
        let raw = load_checkpoint_raw(dir)?;
        let cfg: ModelCheckpointConfig = serde_json::from_value(raw.config.clone())?;
        if cfg.kind != "diffusion-ae" {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint kind `{}` is not a diffusion autoencoder",
                cfg.kind
            )));
        }
        let mut model = Model::new(cfg.model, 0);
        load_into_store(&mut model.params, raw.tensors)?;
        Ok((model, cfg.train, raw.schedule))
    }
}

/// Build the schedule stored in a train config / CLI flag set.
pub fn schedule_for(t_infer: usize) -> Result<DiffusionSchedule, crate::diffusion::DiffusionError> {
    make_schedule(&ScheduleSpec { t_infer, ..Default::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{synth_generate, window, SynthConfig};

    fn small_dataset(n: usize, dn: usize, count: usize) -> Vec<Sample> {
        let mut all = Vec::new();
        for (fi, family) in ["idle", "reach", "bimanual"].iter().enumerate() {
            let cfg = SynthConfig {
                family: family.to_string(),
                user_style: fi % 3,
                frames: 200,
                ..Default::default()
            };
            let rec = synth_generate(&cfg, 40 + fi as u64).unwrap();
            all.extend(window(&rec, n, dn, 10).samples);
        }
        all.truncate(count);
        all
    }

    fn tiny_setup() -> (Model, DiffusionSchedule, Vec<Sample>) {
        let model = Model::new(ModelConfig::tiny(8, 2), 1);
        let sched = schedule_for(10).unwrap();
        let data = small_dataset(8, 2, 6);
        (model, sched, data)
    }

    /// Replace the zero-initialized residual/head convs with random values
    /// so gradients flow through the whole network.
    fn wake_zero_convs(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = model
            .params
            .iter()
            .filter(|(n, v)| {
                (n.contains("conv2") || n.contains("head_conv")) && v.iter().all(|x| *x == 0.0)
            })
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let id = model.params.id_of(&name).unwrap();
            let shape = model.params.get(id).shape().to_vec();
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            *model.params.get_mut(id) =
                crate::nn::params::uniform_fan_in(&mut rng, &shape, fan_in);
        }
    }

    #[test]
    fn loss_zero_for_oracle_predictions() {
        // eps_hat == eps gives zero noise loss: emulate by measuring the
        // loss identity on the formula level against a manual computation
        let (model, sched, data) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<NoiseDraw> =
            data.iter().map(|_| draw_noise(&mut rng, 8, sched.t_train())).collect();
        let opts = LossOptions { training: false, ..Default::default() };
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let run = batch_loss_with_draws(&model, &data, &draws, &opts, &sched, &mut r2, None)
            .unwrap();

        // straight-line reference: eval-mode networks + scalar loops
        let mut ref_noise = 0.0;
        let mut ref_fc = 0.0;
        for (s, d) in data.iter().zip(&draws) {
            let x9 = s.input.to_matrix();
            let (e_sem, f) = crate::semantic_encoder::encode_semantic_eval(
                &model.encoder,
                &model.params,
                &x9,
            );
            let h_t = forward_noise(&x9, d.t, &d.eps, &sched).unwrap();
            let eps_hat = predict_noise_eval(&model.unet, &model.params, &h_t, d.t, &e_sem);
            ref_noise += (&eps_hat - &d.eps).mapv(|v| v * v).sum() / 8.0;
            let out = crate::forecaster::forecast_eval(&model.forecaster, &model.params, &f);
            let y = s.future.to_matrix();
            let mut acc = 0.0;
            for j in 0..2 {
                for r in 0..6 {
                    acc += (out.ha_future[(r, j)] - y[(r, j)]).powi(2);
                }
                for r in 0..3 {
                    acc += (out.he_future[(r, j)] - y[(6 + r, j)]).powi(2);
                }
            }
            ref_fc += acc / 2.0;
        }
        ref_noise /= data.len() as f64;
        ref_fc /= data.len() as f64;
        assert!((run.noise - ref_noise).abs() < 1e-6, "{} vs {ref_noise}", run.noise);
        assert!((run.forecast - ref_fc).abs() < 1e-6, "{} vs {ref_fc}", run.forecast);
        assert!((run.total - (ref_noise + ref_fc)).abs() < 1e-6);
    }

    #[test]
    fn zero_forecast_error_gives_zero_term() {
        // build a sample whose future equals the forecaster output exactly
        let (model, sched, mut data) = tiny_setup();
        let sample = &mut data[0];
        let x9 = sample.input.to_matrix();
        let (_, f) = crate::semantic_encoder::encode_semantic_eval(
            &model.encoder,
            &model.params,
            &x9,
        );
        let out = crate::forecaster::forecast_eval(&model.forecaster, &model.params, &f);
        let mut y = Array2::zeros((9, 2));
        for j in 0..2 {
            for r in 0..6 {
                y[(r, j)] = out.ha_future[(r, j)];
            }
            for r in 0..3 {
                y[(6 + r, j)] = out.he_future[(r, j)];
            }
        }
        sample.future = crate::signals::HandHeadSequence::from_matrix(&y, 30);
        let batch = vec![data[0].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = vec![draw_noise(&mut rng, 8, sched.t_train())];
        let opts = LossOptions { training: false, ..Default::default() };
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let run =
            batch_loss_with_draws(&model, &batch, &draws, &opts, &sched, &mut r2, None).unwrap();
        assert!(run.forecast.abs() < 1e-18, "forecast loss {}", run.forecast);
    }

    #[test]
    fn scaling_contract_is_exact() {
        let (model, sched, data) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<NoiseDraw> =
            data.iter().map(|_| draw_noise(&mut rng, 8, sched.t_train())).collect();

        let opts1 = LossOptions { training: false, signal_scale: 1.0, ..Default::default() };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let base =
            batch_loss_with_draws(&model, &data, &draws, &opts1, &sched, &mut r, None).unwrap();

        // scale every hand channel by s and fold s into the config
        let s = 2.0;
        let scaled: Vec<Sample> = data
            .iter()
            .map(|smp| Sample {
                input: crate::signals::HandHeadSequence::from_matrix(
                    &Model::unscale_signal(&smp.input.to_matrix(), s),
                    smp.input.fps,
                ),
                future: crate::signals::HandHeadSequence::from_matrix(
                    &Model::unscale_signal(&smp.future.to_matrix(), s),
                    smp.future.fps,
                ),
                labels: smp.labels.clone(),
            })
            .collect();
        let opts2 = LossOptions { training: false, signal_scale: s, ..Default::default() };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let eq =
            batch_loss_with_draws(&model, &scaled, &draws, &opts2, &sched, &mut r, None).unwrap();
        assert_eq!(base.total, eq.total, "losses must be bitwise equal under the scaling contract");
    }

    #[test]
    fn detached_semantics_zero_encoder_grads() {
        let (mut model, sched, data) = tiny_setup();
        wake_zero_convs(&mut model, 42);
        let batch = &data[..2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<NoiseDraw> =
            batch.iter().map(|_| draw_noise(&mut rng, 8, sched.t_train())).collect();

        let grads_for = |detach: bool, fw: f64| {
            let opts = LossOptions {
                training: false,
                detach_sem_for_unet: detach,
                forecast_weight: fw,
                ..Default::default()
            };
            let mut acc = GradAccum::new(&model.params);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            batch_loss_with_draws(&model, batch, &draws, &opts, &sched, &mut r, Some(&mut acc))
                .unwrap();
            acc.mean()
        };

        let enc_norm = |grads: &[Option<ArrayD<f64>>]| {
            model
                .params
                .iter()
                .enumerate()
                .filter(|(_, (name, _))| name.starts_with("encoder."))
                .map(|(i, _)| grads[i].as_ref().map_or(0.0, |g| g.mapv(|v| v * v).sum()))
                .sum::<f64>()
                .sqrt()
        };

        // both paths cut: encoder receives nothing
        let cut = grads_for(true, 0.0);
        assert!(enc_norm(&cut) == 0.0, "detached + no forecast must zero encoder grads");
        // noise path alone trains the encoder
        let noise_only = grads_for(false, 0.0);
        assert!(enc_norm(&noise_only) > 0.0);
        // forecast path alone trains the encoder
        let fc_only = grads_for(true, 1.0);
        assert!(enc_norm(&fc_only) > 0.0);
    }

    #[test]
    fn two_epoch_training_reduces_loss_and_is_deterministic() {
        let data = small_dataset(8, 2, 32);
        let config = TrainConfig {
            epochs: 2,
            learning_rate: 2e-3,
            batch_size: 8,
            seed: 11,
            ..Default::default()
        };
        let sched = schedule_for(10).unwrap();
        let (_, log) = train(&data, ModelConfig::tiny(8, 2), &config, &sched).unwrap();
        let steps_per_epoch = log.len() / 2;
        let epoch_mean = |e: usize| {
            log.iter()
                .filter(|r| r.epoch == e)
                .map(|r| r.total)
                .sum::<f64>()
                / steps_per_epoch as f64
        };
        assert!(
            epoch_mean(1) < epoch_mean(0),
            "epoch 1 mean {} should be below epoch 0 mean {}",
            epoch_mean(1),
            epoch_mean(0)
        );

        let (_, log2) = train(&data, ModelConfig::tiny(8, 2), &config, &sched).unwrap();
        let a: Vec<f64> = log.iter().map(|r| r.total).collect();
        let b: Vec<f64> = log2.iter().map(|r| r.total).collect();
        assert_eq!(a, b, "same seed must reproduce the loss log exactly");
    }

    #[test]
    fn config_defaults_echo_reference_values() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 130);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 64);
        let m = ModelConfig::default();
        assert_eq!((m.n, m.dn), (40, 3));
        assert_eq!(m.sem_dim, 128);
        assert_eq!(m.unet_channels, 64);
        assert_eq!(m.enc_channels, 16);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("ckpt_{}", rand::random::<u64>()));
        let model = Model::new(ModelConfig::tiny(8, 2), 3);
        let train_cfg = TrainConfig::default();
        let spec = ScheduleSpec { t_infer: 10, ..Default::default() };
        model.save(&dir, &train_cfg, &spec).unwrap();

        // save -> load -> save must produce byte-identical blobs
        let blob1 = std::fs::read(dir.join("weights.bin")).unwrap();
        let (loaded, _, sched2) = Model::load(&dir).unwrap();
        assert_eq!(sched2, spec);
        let dir2 = std::env::temp_dir().join(format!("ckpt_{}", rand::random::<u64>()));
        loaded.save(&dir2, &train_cfg, &spec).unwrap();
        let blob2 = std::fs::read(dir2.join("weights.bin")).unwrap();
        assert_eq!(blob1, blob2);

        // a second load reproduces every tensor bitwise
        let (loaded2, _, _) = Model::load(&dir2).unwrap();
        for (a, b) in loaded.params.iter().zip(loaded2.params.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }

        // manifest lists every registered tensor exactly once
        let raw = load_checkpoint_raw(&dir).unwrap();
        assert_eq!(raw.tensors.len(), model.params.len());
        let mut names: Vec<&str> = raw.tensors.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), model.params.len());

        // truncated blob is rejected
        let blob = std::fs::read(dir.join("weights.bin")).unwrap();
        std::fs::write(dir.join("weights.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            Model::load(&dir),
            Err(CheckpointError::Corrupt(_))
        ));

        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn reconstruct_is_deterministic() {
        let (model, sched, data) = tiny_setup();
        let x9 = data[0].input.to_matrix();
        let a = model.reconstruct(&x9, 1.0, &sched).unwrap();
        let b = model.reconstruct(&x9, 1.0, &sched).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (9, 8));
        // head rows renormalized
        for j in 0..8 {
            let n = (6..9).map(|r| a[(r, j)] * a[(r, j)]).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
