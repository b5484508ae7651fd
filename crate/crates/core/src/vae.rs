//! Gaussian VAE over valid states.
//!
//! Observations are normalized with dataset statistics kept alongside the
//! weights. The encoder emits `[mean | log_variance]` for an `r`-dimensional
//! latent; the decoder emits the reconstruction mean, with unit variance, so
//! the reconstruction term is a plain mean squared error.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::NavState;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Adam, NetworkParams, NetworkSpec, OutputActivation};
use crate::par;

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            obs_dim: 2,
            latent_dim: 8,
            hidden_sizes: vec![64, 128, 64],
            kl_weight: 1.0,
            learning_rate: 1e-3,
            batch_size: 128,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.latent_dim == 0 || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("vae: dimensions and hidden sizes must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) || !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("vae: kl_weight >= 0, learning_rate > 0, batch_size > 0 required".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    /// `KL(self || N(0, I))` in closed form.
    pub fn kl_to_standard(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(z)
            .map(|((&m, &lv), &x)| -0.5 * (ln_2pi + lv + (x - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// `z = mean + exp(log_var / 2) * eps` with `eps ~ N(0, I)` and the log-variance clamped.
pub fn reparameterized_sample<R: Rng + ?Sized>(gauss: &GaussianParams, rng: &mut R) -> Vec<f64> {
    gauss
        .mean
        .iter()
        .zip(&gauss.log_variance)
        .map(|(&m, &lv)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * eps
        })
        .collect()
}

/// Standard normal log-density.
pub fn log_prior(z: &[f64]) -> f64 {
    let r = z.len() as f64;
    -0.5 * r * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.iter().map(|x| x * x).sum::<f64>()
}

/// Per-dimension affine map into roughly `[-1, 1]`: `(x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Zero mean and unit half-range (largest absolute deviation) per column.
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidConfig("cannot fit normalization to an empty dataset".into()));
        }
        let center = data.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let scale = data
            .axis_iter(Axis(1))
            .zip(&center)
            .map(|(col, &c)| {
                let dev = col.iter().fold(0.0f64, |m, &x| m.max((x - c).abs()));
                if dev > 0.0 {
                    dev
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { center, scale })
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, c), s) in row.iter_mut().zip(&self.center).zip(&self.scale) {
                *v = (*v - c) / s;
            }
        }
        out
    }

    pub fn invert(&self, y: ArrayView2<f64>) -> Array2<f64> {
        let mut out = y.to_owned();
        for mut row in out.rows_mut() {
            for ((v, c), s) in row.iter_mut().zip(&self.center).zip(&self.scale) {
                *v = *v * s + c;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub config: VaeConfig,
    pub normalization: Normalization,
    pub encoder: NetworkParams,
    pub decoder: NetworkParams,
}

/// Scalar loss and its parts, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboLoss {
    pub loss: f64,
    /// Mean squared error per coordinate, in normalized units.
    pub reconstruction: f64,
    pub kl: f64,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, normalization: Normalization, rng: &mut R) -> Result<Self> {
        config.validate()?;
        check_dim("normalization", config.obs_dim, normalization.center.len())?;
        check_dim("normalization", config.obs_dim, normalization.scale.len())?;
        let encoder = NetworkParams::init(
            NetworkSpec::new(config.obs_dim, &config.hidden_sizes, 2 * config.latent_dim, OutputActivation::None),
            rng,
        )?;
        let decoder = NetworkParams::init(
            NetworkSpec::new(config.latent_dim, &config.hidden_sizes, config.obs_dim, OutputActivation::None),
            rng,
        )?;
        Ok(Self {
            config,
            normalization,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encode(&self, s: &[f64]) -> Result<GaussianParams> {
        check_dim("vae observation", self.config.obs_dim, s.len())?;
        let x = ArrayView2::from_shape((1, s.len()), s).expect("contiguous row");
        let out = self.encoder.forward_batch(self.normalization.apply(x).view())?;
        Ok(self.split(out.row(0).as_slice().expect("row-major")))
    }

    pub fn encode_state(&self, s: NavState) -> Result<GaussianParams> {
        self.encode(&s.0)
    }

    fn split(&self, row: &[f64]) -> GaussianParams {
        let r = self.config.latent_dim;
        GaussianParams {
            mean: row[..r].to_vec(),
            log_variance: row[r..].iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect(),
        }
    }

    /// Decoder mean, in observation units.
    pub fn decode_mle(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("latent", self.config.latent_dim, z.len())?;
        let zv = ArrayView2::from_shape((1, z.len()), z).expect("contiguous row");
        Ok(self.decode_batch(zv)?.row(0).to_vec())
    }

    pub fn decode_state(&self, z: &[f64]) -> Result<NavState> {
        let x = self.decode_mle(z)?;
        check_dim("decoded state", 2, x.len())?;
        Ok(NavState([x[0], x[1]]))
    }

    pub fn decode_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("latent", self.config.latent_dim, z.ncols())?;
        let y = self.decoder.forward_batch(z)?;
        Ok(self.normalization.invert(y.view()))
    }

    /// Decoded rows plus the vector-Jacobian product `upstream^T dx/dz` per row.
    pub fn decode_vjp(&self, z: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim("latent", self.config.latent_dim, z.ncols())?;
        let cache = self.decoder.forward_cached(z)?;
        let decoded = self.normalization.invert(cache.output().view());
        let mut up = upstream.to_owned();
        for mut row in up.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.normalization.scale) {
                *v *= s;
            }
        }
        let (_, dz) = self.decoder.backward_batch(&cache, up.view())?;
        Ok((decoded, dz))
    }

    /// ELBO loss on a batch, with one reparameterized sample per row.
    pub fn elbo_loss<R: Rng + ?Sized>(&self, batch: ArrayView2<f64>, rng: &mut R) -> Result<ElboLoss> {
        Ok(self.elbo_step(batch, rng, false)?.0)
    }

    fn elbo_step<R: Rng + ?Sized>(
        &self,
        batch: ArrayView2<f64>,
        rng: &mut R,
        with_grads: bool,
    ) -> Result<(ElboLoss, Option<(crate::nn::Gradients, crate::nn::Gradients)>)> {
        let n = batch.nrows();
        if n == 0 {
            return Err(Error::EmptyBuffer);
        }
        check_dim("vae observation", self.config.obs_dim, batch.ncols())?;
        let r = self.config.latent_dim;
        let d = self.config.obs_dim;
        let beta = self.config.kl_weight;
        let x = self.normalization.apply(batch);
        let enc = self.encoder.forward_cached(x.view())?;
        let h = enc.output();
        let mu = h.slice(s![.., ..r]);
        let raw_lv = h.slice(s![.., r..]);
        let lv = raw_lv.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        let eps = Array2::from_shape_simple_fn((n, r), || rng.sample::<f64, _>(StandardNormal));
        let std = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * &eps);
        let dec = self.decoder.forward_cached(z.view())?;
        let diff = dec.output() - &x;

        let reconstruction = diff.iter().map(|e| e * e).sum::<f64>() / (n * d) as f64;
        let kl = mu
            .iter()
            .zip(lv.iter())
            .map(|(&m, &v)| 0.5 * (m * m + v.exp() - 1.0 - v))
            .sum::<f64>()
            / n as f64;
        let loss = reconstruction + beta * kl;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("vae loss (recon {reconstruction}, kl {kl})")));
        }
        let losses = ElboLoss { loss, reconstruction, kl };
        if !with_grads {
            return Ok((losses, None));
        }

        let up = diff * (2.0 / (n * d) as f64);
        let (dec_grads, dz) = self.decoder.backward_batch(&dec, up.view())?;
        let inv_n = 1.0 / n as f64;
        let mut dh = Array2::zeros((n, 2 * r));
        for i in 0..n {
            for k in 0..r {
                let m = mu[[i, k]];
                dh[[i, k]] = dz[[i, k]] + beta * m * inv_n;
                let raw = raw_lv[[i, k]];
                if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
                    let sd = std[[i, k]];
                    dh[[i, r + k]] = dz[[i, k]] * eps[[i, k]] * 0.5 * sd + beta * 0.5 * (sd * sd - 1.0) * inv_n;
                }
            }
        }
        let (enc_grads, _) = self.encoder.backward_batch(&enc, dh.view())?;
        Ok((losses, Some((enc_grads, dec_grads))))
    }

    /// Fraction of `n` prior samples whose decodes satisfy `accept`.
    pub fn prior_decode_rate<R, F>(&self, n: usize, rng: &mut R, accept: F) -> Result<f64>
    where
        R: Rng + ?Sized,
        F: Fn(&[f64]) -> bool,
    {
        self.shell_decode_rate(n, None, rng, accept)
    }

    /// Like [`Self::prior_decode_rate`], but with latents rescaled to norm `radius` when given.
    pub fn shell_decode_rate<R, F>(&self, n: usize, radius: Option<f64>, rng: &mut R, accept: F) -> Result<f64>
    where
        R: Rng + ?Sized,
        F: Fn(&[f64]) -> bool,
    {
        if n == 0 {
            return Ok(0.0);
        }
        let r = self.config.latent_dim;
        let mut z = Array2::from_shape_simple_fn((n, r), || rng.sample::<f64, _>(StandardNormal));
        if let Some(rad) = radius {
            for mut row in z.rows_mut() {
                let norm = row.dot(&row).sqrt().max(1e-12);
                row.mapv_inplace(|v| v * rad / norm);
            }
        }
        let x = self.decode_batch(z.view())?;
        let ok = x.rows().into_iter().filter(|row| accept(row.as_slice().expect("row-major"))).count();
        Ok(ok as f64 / n as f64)
    }

    /// Mean squared error per coordinate of `decode(encode_mean(x))`, in observation units.
    pub fn reconstruction_mse(&self, data: ArrayView2<f64>) -> Result<f64> {
        let (recon, _) = self.reconstruct(data)?;
        Ok((&recon - &data).iter().map(|e| e * e).sum::<f64>() / data.len().max(1) as f64)
    }

    /// Reconstructions through the encoder mean, plus encoder means.
    pub fn reconstruct(&self, data: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim("vae observation", self.config.obs_dim, data.ncols())?;
        let h = self.encoder.forward_batch(self.normalization.apply(data).view())?;
        let mu = h.slice(s![.., ..self.config.latent_dim]).to_owned();
        Ok((self.decode_batch(mu.view())?, mu))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let vae: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        vae.config.validate()?;
        Ok(vae)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLogRow {
    pub step: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub vae: Vae,
    /// Training-loss averages over consecutive windows of `log_interval` steps.
    pub log: Vec<VaeLogRow>,
}

pub const MIN_DATASET: usize = 1000;

/// Adam on minibatches drawn with replacement from `dataset`.
pub fn train_vae<R: Rng + ?Sized>(
    dataset: ArrayView2<f64>,
    config: &VaeConfig,
    budget_steps: usize,
    log_interval: usize,
    rng: &mut R,
) -> Result<TrainedVae> {
    config.validate()?;
    if dataset.nrows() < MIN_DATASET {
        return Err(Error::InvalidConfig(format!(
            "vae dataset has {} rows, need at least {MIN_DATASET}",
            dataset.nrows()
        )));
    }
    let mut vae = Vae::new(config.clone(), Normalization::fit(dataset)?, rng)?;
    let mut enc_opt = Adam::with_lr(config.learning_rate);
    let mut dec_opt = Adam::with_lr(config.learning_rate);
    let log_interval = log_interval.max(1);
    let mut log = Vec::new();
    let mut acc = (0.0, 0.0, 0.0);
    let mut rows = vec![0usize; config.batch_size];
    for step in 1..=budget_steps {
        for r in rows.iter_mut() {
            *r = rng.gen_range(0..dataset.nrows());
        }
        let batch = dataset.select(Axis(0), &rows);
        let (l, grads) = vae.elbo_step(batch.view(), rng, true)?;
        let (eg, dg) = grads.expect("requested");
        vae.encoder.apply_gradients(&eg, &mut enc_opt)?;
        vae.decoder.apply_gradients(&dg, &mut dec_opt)?;
        acc.0 += l.loss;
        acc.1 += l.reconstruction;
        acc.2 += l.kl;
        if step % log_interval == 0 {
            let k = log_interval as f64;
            log.push(VaeLogRow {
                step,
                loss: acc.0 / k,
                reconstruction: acc.1 / k,
                kl: acc.2 / k,
            });
            acc = (0.0, 0.0, 0.0);
        }
    }
    Ok(TrainedVae { vae, log })
}

/// One candidate of a multi-seed run.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub trained: TrainedVae,
    pub held_out_loss: f64,
}

/// Train one VAE per seed (in parallel when enabled) and score each on `held_out`.
pub fn train_vae_seeds(
    dataset: ArrayView2<f64>,
    held_out: ArrayView2<f64>,
    config: &VaeConfig,
    budget_steps: usize,
    seeds: &[u64],
) -> Result<Vec<SeedResult>> {
    let data = dataset.to_owned();
    let held = held_out.to_owned();
    par::map(seeds, |&seed| -> Result<SeedResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trained = train_vae(data.view(), config, budget_steps, 1000, &mut rng)?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let held_out_loss = trained.vae.elbo_loss(held.view(), &mut eval_rng)?.loss;
        Ok(SeedResult {
            seed,
            trained,
            held_out_loss,
        })
    })
    .into_iter()
    .collect()
}

/// Index of the candidate with the lowest held-out loss (first on ties).
pub fn select_best(results: &[SeedResult]) -> Option<usize> {
    results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.held_out_loss.total_cmp(&b.1.held_out_loss))
        .map(|(i, _)| i)
}

pub fn states_to_array(states: &[NavState]) -> Array2<f64> {
    Array2::from_shape_fn((states.len(), 2), |(i, j)| states[i].0[j])
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    x: f64,
    y: f64,
}

pub fn write_states_csv(path: &Path, states: &[NavState]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in states {
        w.serialize(StateRow { x: s.0[0], y: s.0[1] })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_states_csv(path: &Path) -> Result<Vec<NavState>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<StateRow>()
        .map(|row| {
            let row = row?;
            Ok(NavState([row.x, row.y]))
        })
        .collect()
}
