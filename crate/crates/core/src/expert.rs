//! A single mixture component: a Gaussian VAE used for likelihood scoring,
//! latent inference and generative replay, paired with a classifier.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EmmError, Result};
use crate::memory::Sample;
use crate::nn::{softmax_cross_entropy, Activation, Adam, AdamConfig, Matrix, Mlp, MlpGrads};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub input_dim: usize,
    /// Hidden widths shared by the encoder and (mirrored) decoder.
    pub vae_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub adam: AdamConfig,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.num_classes == 0 {
            return Err(EmmError::Config(
                "input_dim, latent_dim and num_classes must be positive".into(),
            ));
        }
        if self.vae_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            return Err(EmmError::Config("hidden layer width 0".into()));
        }
        Ok(())
    }
}

/// Inner optimization schedule for one outer training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the memory buffer per outer step.
    pub epochs: usize,
    pub minibatch: usize,
    /// Caps the minibatches drawn per pass; `None` means a full pass.
    #[serde(default)]
    pub max_batches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            minibatch: 32,
            max_batches: None,
        }
    }
}

/// Posterior means (or draws) with one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub values: Matrix,
}

/// Closed-form `KL(N(μ, diag(e^logvar)) ‖ N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Negative ELBO broken into its two pieces, one entry per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// `−log p(x | z)` under a unit-variance Gaussian decoder.
    pub reconstruction_nll: Vec<f64>,
    pub kl: Vec<f64>,
}

impl ElboTerms {
    pub fn negative_elbo(&self) -> Vec<f64> {
        self.reconstruction_nll
            .iter()
            .zip(&self.kl)
            .map(|(r, k)| r + k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

/// Encoder `q(z|x)` emitting `[μ, log σ²]` and decoder emitting the mean of `p(x|z)`.
/// The prior is a fixed standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(cfg: &ExpertConfig, rng: &mut R) -> Result<Self> {
        let mut enc_sizes = vec![cfg.input_dim];
        enc_sizes.extend(&cfg.vae_hidden);
        enc_sizes.push(2 * cfg.latent_dim);
        let mut dec_sizes = vec![cfg.latent_dim];
        dec_sizes.extend(cfg.vae_hidden.iter().rev());
        dec_sizes.push(cfg.input_dim);
        let encoder = Mlp::new(&enc_sizes, &hidden_then_identity(enc_sizes.len() - 1), rng)?;
        let decoder = Mlp::new(&dec_sizes, &hidden_then_identity(dec_sizes.len() - 1), rng)?;
        Self::from_parts(encoder, decoder)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() % 2 != 0 {
            return Err(EmmError::shape("encoder output must hold μ and log σ²"));
        }
        let latent_dim = encoder.output_dim() / 2;
        if decoder.input_dim() != latent_dim || decoder.output_dim() != encoder.input_dim() {
            return Err(EmmError::shape(format!(
                "decoder {}→{} does not invert encoder {}→2·{latent_dim}",
                decoder.input_dim(),
                decoder.output_dim(),
                encoder.input_dim()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn split(&self, enc_out: &Matrix) -> (Matrix, Matrix) {
        (
            enc_out.column_slice(0, self.latent_dim),
            enc_out.column_slice(self.latent_dim, 2 * self.latent_dim),
        )
    }

    fn check_noise(&self, rows: usize, noise: &Matrix) -> Result<()> {
        if noise.shape() != (rows, self.latent_dim) {
            return Err(EmmError::shape(format!(
                "noise is {}x{}, expected {rows}x{}",
                noise.rows(),
                noise.cols(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    fn reparameterize(mu: &Matrix, logvar: &Matrix, noise: &Matrix) -> Matrix {
        let mut z = mu.clone();
        for ((zv, lv), e) in z.data_mut().iter_mut().zip(logvar.data()).zip(noise.data()) {
            *zv += (0.5 * lv).exp() * e;
        }
        z
    }

    fn reconstruction_nll(x: &Matrix, recon: &Matrix) -> Vec<f64> {
        let d = x.cols() as f64;
        x.iter_rows()
            .zip(recon.iter_rows())
            .map(|(a, b)| {
                0.5 * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
                    + 0.5 * d * LN_2PI
            })
            .collect()
    }

    /// Per-sample terms for one reparameterized draw per row.
    pub fn elbo_terms(&self, batch: &Matrix, noise: &Matrix) -> Result<ElboTerms> {
        self.check_noise(batch.rows(), noise)?;
        let enc_out = self.encoder.apply(batch)?;
        let (mu, logvar) = self.split(&enc_out);
        let z = Self::reparameterize(&mu, &logvar, noise);
        let recon = self.decoder.apply(&z)?;
        Ok(ElboTerms {
            reconstruction_nll: Self::reconstruction_nll(batch, &recon),
            kl: mu
                .iter_rows()
                .zip(logvar.iter_rows())
                .map(|(m, lv)| kl_divergence(m, lv))
                .collect(),
        })
    }

    /// Mean negative ELBO over the batch and its parameter gradients.
    pub fn elbo_loss(&self, batch: &Matrix, noise: &Matrix) -> Result<(f64, VaeGrads)> {
        self.check_noise(batch.rows(), noise)?;
        let n = batch.rows();
        if n == 0 {
            return Err(EmmError::input("ELBO over an empty batch"));
        }
        let scale = 1.0 / n as f64;
        let (enc_out, enc_tape) = self.encoder.forward(batch)?;
        let (mu, logvar) = self.split(&enc_out);
        let z = Self::reparameterize(&mu, &logvar, noise);
        let (recon, dec_tape) = self.decoder.forward(&z)?;

        let rec = Self::reconstruction_nll(batch, &recon);
        let kl: f64 = mu
            .iter_rows()
            .zip(logvar.iter_rows())
            .map(|(m, lv)| kl_divergence(m, lv))
            .sum();
        let loss = (rec.iter().sum::<f64>() + kl) * scale;
        if !loss.is_finite() {
            return Err(EmmError::Training(format!("non-finite ELBO loss {loss}")));
        }

        let mut d_recon = recon;
        for (r, x) in d_recon.data_mut().iter_mut().zip(batch.data()) {
            *r = (*r - x) * scale;
        }
        let (dec_grads, d_z) = self.decoder.backward(&dec_tape, &d_recon)?;

        let l = self.latent_dim;
        let mut d_enc = Matrix::zeros(n, 2 * l);
        for r in 0..n {
            for c in 0..l {
                let (m, lv, e, dz) = (mu.get(r, c), logvar.get(r, c), noise.get(r, c), d_z.get(r, c));
                d_enc.set(r, c, dz + m * scale);
                d_enc.set(
                    r,
                    l + c,
                    dz * e * 0.5 * (0.5 * lv).exp() + 0.5 * (lv.exp() - 1.0) * scale,
                );
            }
        }
        let (enc_grads, _) = self.encoder.backward(&enc_tape, &d_enc)?;
        Ok((
            loss,
            VaeGrads {
                encoder: enc_grads,
                decoder: dec_grads,
            },
        ))
    }

    /// Decoder means for `n` prior draws.
    pub fn generate_replay<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        if n == 0 {
            return Err(EmmError::input("replay of zero samples"));
        }
        let z = standard_normal(n, self.latent_dim, rng);
        self.decoder.apply(&z)
    }

    /// Posterior means. Consumes no randomness.
    pub fn infer_latents(&self, samples: &Matrix) -> Result<LatentBatch> {
        let out = self.encoder.apply(samples)?;
        Ok(LatentBatch {
            values: out.column_slice(0, self.latent_dim),
        })
    }

    /// ELBO of one sample averaged over the rows of `noise`.
    pub fn loglik_score_with_noise(&self, sample: &[f64], noise: &Matrix) -> Result<f64> {
        if noise.rows() == 0 {
            return Err(EmmError::input("log-likelihood needs at least one draw"));
        }
        let mut data = Vec::with_capacity(noise.rows() * sample.len());
        for _ in 0..noise.rows() {
            data.extend_from_slice(sample);
        }
        let batch = Matrix::from_vec(noise.rows(), sample.len(), data)?;
        let terms = self.elbo_terms(&batch, noise)?;
        let neg = terms.negative_elbo();
        Ok(-neg.iter().sum::<f64>() / neg.len() as f64)
    }

    /// ELBO estimate of `log p(x)`; higher means the expert explains `x` better.
    pub fn loglik_score<R: Rng + ?Sized>(
        &self,
        sample: &[f64],
        n_draws: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_draws == 0 {
            return Err(EmmError::input("n_draws must be at least 1"));
        }
        let noise = standard_normal(n_draws, self.latent_dim, rng);
        self.loglik_score_with_noise(sample, &noise)
    }

    /// Row-wise [`Vae::loglik_score`] for a whole batch. The encoder runs once;
    /// each draw redraws the noise for every row.
    pub fn loglik_scores<R: Rng + ?Sized>(
        &self,
        samples: &Matrix,
        n_draws: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if n_draws == 0 {
            return Err(EmmError::input("n_draws must be at least 1"));
        }
        let enc_out = self.encoder.apply(samples)?;
        let (mu, logvar) = self.split(&enc_out);
        let kl: Vec<f64> = mu
            .iter_rows()
            .zip(logvar.iter_rows())
            .map(|(m, lv)| kl_divergence(m, lv))
            .collect();
        let mut total = vec![0.0; samples.rows()];
        for _ in 0..n_draws {
            let noise = standard_normal(samples.rows(), self.latent_dim, rng);
            let z = Self::reparameterize(&mu, &logvar, &noise);
            let recon = self.decoder.apply(&z)?;
            for (t, r) in total
                .iter_mut()
                .zip(Self::reconstruction_nll(samples, &recon))
            {
                *t += r;
            }
        }
        Ok(total
            .iter()
            .zip(&kl)
            .map(|(r, k)| -(r / n_draws as f64 + k))
            .collect())
    }
}

/// VAE plus classifier, with optimizer state. Frozen experts reject training
/// and no longer carry optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expert {
    pub id: usize,
    pub vae: Vae,
    pub classifier: Mlp,
    optimizers: Option<Optimizers>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Optimizers {
    encoder: Adam,
    decoder: Adam,
    classifier: Adam,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(id: usize, cfg: &ExpertConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let vae = Vae::new(cfg, rng)?;
        let mut sizes = vec![cfg.input_dim];
        sizes.extend(&cfg.classifier_hidden);
        sizes.push(cfg.num_classes);
        let classifier = Mlp::new(&sizes, &hidden_then_identity(sizes.len() - 1), rng)?;
        Self::from_parts(id, vae, classifier, cfg.adam)
    }

    pub fn from_parts(id: usize, vae: Vae, classifier: Mlp, adam: AdamConfig) -> Result<Self> {
        if classifier.input_dim() != vae.input_dim() {
            return Err(EmmError::shape(format!(
                "classifier takes {} features, VAE takes {}",
                classifier.input_dim(),
                vae.input_dim()
            )));
        }
        Ok(Self {
            id,
            optimizers: Some(Optimizers {
                encoder: Adam::new(&vae.encoder, adam),
                decoder: Adam::new(&vae.decoder, adam),
                classifier: Adam::new(&classifier, adam),
            }),
            vae,
            classifier,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.optimizers.is_none()
    }

    pub fn freeze(&mut self) {
        self.optimizers = None;
    }

    pub fn latent_dim(&self) -> usize {
        self.vae.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn elbo_loss(&self, batch: &Matrix, noise: &Matrix) -> Result<(f64, VaeGrads)> {
        self.vae.elbo_loss(batch, noise)
    }

    /// Mean cross-entropy of the classifier over labeled samples.
    pub fn classifier_loss(&self, samples: &[Sample]) -> Result<(f64, MlpGrads)> {
        let labels = labels_of(samples)?;
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let x = Matrix::from_rows(&rows)?;
        self.classifier_loss_batch(&x, &labels)
    }

    pub fn classifier_loss_batch(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, MlpGrads)> {
        let (logits, tape) = self.classifier.forward(x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(EmmError::Training(format!("non-finite classifier loss {loss}")));
        }
        let (grads, _) = self.classifier.backward(&tape, &grad)?;
        Ok((loss, grads))
    }

    pub fn generate_replay<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        self.vae.generate_replay(n, rng)
    }

    pub fn infer_latents(&self, samples: &Matrix) -> Result<LatentBatch> {
        self.vae.infer_latents(samples)
    }

    pub fn loglik_score<R: Rng + ?Sized>(
        &self,
        sample: &[f64],
        n_draws: usize,
        rng: &mut R,
    ) -> Result<f64> {
        self.vae.loglik_score(sample, n_draws, rng)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.classifier.apply(x)
    }

    /// `epochs` shuffled minibatch passes over `(x, labels)`, updating the VAE
    /// with the negative ELBO and the classifier with cross-entropy.
    /// Returns the mean VAE and classifier losses of the last pass.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        x: &Matrix,
        labels: &[usize],
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let Some(opt) = self.optimizers.as_mut() else {
            return Err(EmmError::Frozen(self.id));
        };
        if x.rows() != labels.len() {
            return Err(EmmError::shape(format!(
                "{} rows with {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if cfg.minibatch == 0 {
            return Err(EmmError::Config("minibatch must be positive".into()));
        }
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut last = (0.0, 0.0);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let (mut vae_sum, mut cls_sum, mut batches) = (0.0, 0.0, 0usize);
            let cap = cfg.max_batches.unwrap_or(usize::MAX);
            for chunk in order.chunks(cfg.minibatch).take(cap) {
                let xb = x.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let noise = standard_normal(chunk.len(), self.vae.latent_dim, rng);
                let (vae_loss, g) = self.vae.elbo_loss(&xb, &noise)?;
                opt.encoder.step(&mut self.vae.encoder, &g.encoder)?;
                opt.decoder.step(&mut self.vae.decoder, &g.decoder)?;
                let (logits, tape) = self.classifier.forward(&xb)?;
                let (cls_loss, grad) = softmax_cross_entropy(&logits, &yb)?;
                if !cls_loss.is_finite() {
                    return Err(EmmError::Training(format!("non-finite classifier loss {cls_loss}")));
                }
                let (cg, _) = self.classifier.backward(&tape, &grad)?;
                opt.classifier.step(&mut self.classifier, &cg)?;
                vae_sum += vae_loss;
                cls_sum += cls_loss;
                batches += 1;
            }
            if batches > 0 {
                last = (vae_sum / batches as f64, cls_sum / batches as f64);
            }
        }
        Ok(last)
    }
}

pub(crate) fn labels_of(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                EmmError::input(format!("sample from step {} has no label", s.arrival_step))
            })
        })
        .collect()
}

fn hidden_then_identity(layers: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; layers - 1];
    acts.push(Activation::Identity);
    acts
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}
