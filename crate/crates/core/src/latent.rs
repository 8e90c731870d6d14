//! The Gaussian-mixture latent model over initial velocities.
//!
//! Generative chain: `z ~ Mult(1/C)`, `eps ~ N(0, I)`,
//! `x | z, eps ~ N(mu_z(eps), diag exp(logvar_z(eps)))`, `v = K theta(x)`,
//! and the image is the class template warped by the geodesic shot from `v`.
//! Inference uses `q(x | J, v) q(eps | v)` with `z` marginalized through the
//! mixture responsibilities. All gradients are written out by hand.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{parse_kv, read_grid, KvMap};
use crate::data::{load_mgt, save_mgt, DType, Tensor};
use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, SpectralOperator, VectorField};
use crate::geodesic::{GeodesicWarp, ShootingConfig};
use crate::nn::{Mlp, MlpCache};
use crate::optim::{cosine_lr, Adam};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub components: usize,
    pub latent_dim: usize,
    pub eps_dim: usize,
    pub hidden: usize,
    pub shooting: ShootingConfig,
    /// Image noise level of the likelihood.
    pub lambda: f64,
    pub weight_decay: f64,
    /// Standard deviation of the random offsets given to the initial
    /// component means; without them the components never separate.
    pub prior_init_spread: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            components: 2,
            latent_dim: 16,
            eps_dim: 8,
            hidden: 256,
            shooting: ShootingConfig::default(),
            lambda: 0.02,
            weight_decay: 1e-5,
            prior_init_spread: 0.01,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.latent_dim == 0 || self.eps_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "components, latent_dim, eps_dim and hidden must be positive".into(),
            ));
        }
        if !(self.lambda > 0.0) || !(self.weight_decay >= 0.0) || !(self.prior_init_spread >= 0.0) {
            return Err(Error::Config("lambda > 0, weight_decay >= 0, prior_init_spread >= 0 required".into()));
        }
        self.shooting.validate()
    }
}

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_normal(x, &self.mean, &self.log_var)
    }
}

fn log_normal(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(log_var)
        .map(|((x, m), lv)| (2.0 * PI).ln() + lv + (x - m).powi(2) * (-lv).exp())
        .sum::<f64>()
}

/// `KL(N(mq, e^lq) || N(mp, e^lp))` for diagonal Gaussians.
fn kl_diag(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    0.5 * (0..mq.len())
        .map(|i| lp[i] - lq[i] + ((lq[i]).exp() + (mq[i] - mp[i]).powi(2)) * (-lp[i]).exp() - 1.0)
        .sum::<f64>()
}

fn kl_standard(m: &[f64], l: &[f64]) -> f64 {
    0.5 * m.iter().zip(l).map(|(m, l)| l.exp() + m * m - 1.0 - l).sum::<f64>()
}

/// Softmax of log-weights via log-sum-exp.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Per-sample terms of the variational bound, averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboBreakdown {
    /// Gaussian log-likelihood of the image, constants included.
    pub recon: f64,
    pub kl_x: f64,
    pub kl_eps: f64,
    pub kl_z: f64,
    pub total: f64,
}

/// Per-sample terms of the training loss, averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// `||I o phi(v) - J||^2 / (2 lambda^2)`.
    pub recon: f64,
    pub kl_x: f64,
    pub kl_eps: f64,
    pub kl_z: f64,
    /// `(L v, v) / 2` of the decoded velocity.
    pub regularity: f64,
    pub weight_decay: f64,
    pub total: f64,
}

/// One training example: the image, its registered velocity and its class template.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub image: &'a ScalarField,
    pub velocity: &'a VectorField,
    pub template: &'a ScalarField,
}

/// Standard-normal draws driving the reparameterization of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
}

impl LatentNoise {
    pub fn draw<R: Rng>(latent_dim: usize, eps_dim: usize, rng: &mut R) -> Self {
        LatentNoise {
            x: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            eps: (0..eps_dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn zeros(latent_dim: usize, eps_dim: usize) -> Self {
        LatentNoise {
            x: vec![0.0; latent_dim],
            eps: vec![0.0; eps_dim],
        }
    }
}

/// Gradients, one flat vector per network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub enc_x: Vec<f64>,
    pub enc_eps: Vec<f64>,
    pub prior: Vec<f64>,
    pub dec: Vec<f64>,
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        [&self.enc_x, &self.enc_eps, &self.prior, &self.dec]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }
}

/// The four networks plus the metric operator of the data grid.
#[derive(Debug, Clone)]
pub struct MixtureLatentModel {
    cfg: MixtureConfig,
    grid: Grid,
    op: SpectralOperator,
    /// `psi_x`: `(J, v) -> (mean, logvar)` of `q(x | J, v)`.
    pub enc_x: Mlp,
    /// `psi_eps`: `v -> (mean, logvar)` of `q(eps | v)`.
    pub enc_eps: Mlp,
    /// `beta`: `eps -> (mean_c, logvar_c)` for every component.
    pub prior: Mlp,
    /// `theta`: `x -> ` raw velocity, smoothed by `K` afterwards.
    pub dec: Mlp,
}

struct SampleRecon {
    rec: f64,
    reg: f64,
    v: VectorField,
    warp: GeodesicWarp,
}

struct SampleStats {
    resp: Vec<f64>,
    kl: Vec<f64>,
    kl_x: f64,
    kl_z: f64,
    kl_eps: f64,
}

struct BatchForward {
    enc_x: MlpCache,
    enc_eps: MlpCache,
    prior: MlpCache,
    dec: MlpCache,
    qx: Array2<f64>,
    qe: Array2<f64>,
    x: Array2<f64>,
    prior_out: Array2<f64>,
    recon: Vec<SampleRecon>,
    stats: Vec<SampleStats>,
}

impl MixtureLatentModel {
    pub fn new(cfg: MixtureConfig, grid: Grid, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let op = cfg.shooting.operator(&grid)?;
        let n = grid.len();
        let nd = grid.ndim();
        let (l, e, h, c) = (cfg.latent_dim, cfg.eps_dim, cfg.hidden, cfg.components);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_x = Mlp::new(&[n + nd * n, h, h, 2 * l], &mut rng);
        let enc_eps = Mlp::new(&[nd * n, h, h, 2 * e], &mut rng);
        let mut prior = Mlp::new(&[e, h, h, c * 2 * l], &mut rng);
        let dec = Mlp::new(&[l, h, h, nd * n], &mut rng);
        if cfg.prior_init_spread > 0.0 {
            let bias = prior.output_bias_mut();
            for comp in 0..c {
                for b in &mut bias[comp * 2 * l..comp * 2 * l + l] {
                    let z: f64 = rng.sample(StandardNormal);
                    *b = cfg.prior_init_spread * z;
                }
            }
        }
        Ok(MixtureLatentModel {
            cfg,
            grid,
            op,
            enc_x,
            enc_eps,
            prior,
            dec,
        })
    }

    pub fn config(&self) -> &MixtureConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn operator(&self) -> &SpectralOperator {
        &self.op
    }

    pub fn components(&self) -> usize {
        self.cfg.components
    }

    /// Mixing weights, fixed uniform.
    pub fn pi(&self) -> Vec<f64> {
        vec![1.0 / self.cfg.components as f64; self.cfg.components]
    }

    fn networks(&self) -> [&Mlp; 4] {
        [&self.enc_x, &self.enc_eps, &self.prior, &self.dec]
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    /// All parameters in the order `enc_x, enc_eps, prior, dec`.
    pub fn params_flat(&self) -> Vec<f64> {
        self.networks()
            .iter()
            .flat_map(|n| n.params().iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut off = 0;
        for net in [&mut self.enc_x, &mut self.enc_eps, &mut self.prior, &mut self.dec] {
            let k = net.num_params();
            net.params_mut().copy_from_slice(&p[off..off + k]);
            off += k;
        }
    }

    fn check_grid(&self, g: &Grid, what: &str) -> Result<()> {
        self.grid.check_same(g, what)
    }

    fn encoder_inputs(&self, items: &[ModelInput]) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = self.grid.len();
        let vn = self.grid.ndim() * n;
        let mut xin = Array2::zeros((items.len(), n + vn));
        let mut vin = Array2::zeros((items.len(), vn));
        for (b, it) in items.iter().enumerate() {
            self.check_grid(it.image.grid(), "image")?;
            self.check_grid(it.velocity.grid(), "velocity")?;
            self.check_grid(it.template.grid(), "template")?;
            xin.slice_mut(s![b, ..n]).assign(&ArrayView1::from(it.image.values()));
            xin.slice_mut(s![b, n..]).assign(&ArrayView1::from(it.velocity.data()));
            vin.slice_mut(s![b, ..]).assign(&ArrayView1::from(it.velocity.data()));
        }
        Ok((xin, vin))
    }

    fn split_gaussian(row: ArrayView1<f64>, dim: usize) -> DiagGaussian {
        DiagGaussian {
            mean: row.slice(s![..dim]).to_vec(),
            log_var: row.slice(s![dim..2 * dim]).to_vec(),
        }
    }

    /// Posterior parameters `q(x | J, v)` and `q(eps | v)`.
    pub fn encode(&self, image: &ScalarField, velocity: &VectorField) -> Result<(DiagGaussian, DiagGaussian)> {
        let item = ModelInput {
            image,
            velocity,
            template: image,
        };
        let (xin, vin) = self.encoder_inputs(&[item])?;
        let qx = self.enc_x.infer(xin.view());
        let qe = self.enc_eps.infer(vin.view());
        if qx.iter().chain(qe.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Training {
                batch: 0,
                what: "encoder produced non-finite activations".into(),
            });
        }
        Ok((
            Self::split_gaussian(qx.row(0), self.cfg.latent_dim),
            Self::split_gaussian(qe.row(0), self.cfg.eps_dim),
        ))
    }

    fn components_from_row(&self, row: ArrayView1<f64>) -> Vec<DiagGaussian> {
        let l = self.cfg.latent_dim;
        (0..self.cfg.components)
            .map(|c| Self::split_gaussian(row.slice(s![c * 2 * l..(c + 1) * 2 * l]), l))
            .collect()
    }

    /// The conditional prior `p(x | z = c, eps)` for every component.
    pub fn prior_components(&self, eps: &[f64]) -> Result<Vec<DiagGaussian>> {
        if eps.len() != self.cfg.eps_dim || eps.iter().any(|e| !e.is_finite()) {
            return Err(Error::Input(format!("eps must be {} finite values", self.cfg.eps_dim)));
        }
        let out = self
            .prior
            .infer(Array2::from_shape_vec((1, eps.len()), eps.to_vec()).expect("row").view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                batch: 0,
                what: "prior network produced non-finite activations".into(),
            });
        }
        Ok(self.components_from_row(out.row(0)))
    }

    /// `p(z | x, eps)`.
    pub fn responsibilities(&self, x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        let comps = self.prior_components(eps)?;
        Ok(responsibilities_of(&comps, x))
    }

    /// `K theta(x)`.
    pub fn decode(&self, x: &[f64]) -> Result<VectorField> {
        if x.len() != self.cfg.latent_dim {
            return Err(Error::Input(format!("x must have {} entries", self.cfg.latent_dim)));
        }
        let raw = self
            .dec
            .infer(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row").view());
        let mut data = raw.into_raw_vec_and_offset().0;
        self.op.k_in_place(&mut data);
        VectorField::new(self.grid.clone(), data).map_err(|_| Error::Training {
            batch: 0,
            what: "decoder produced a non-finite velocity".into(),
        })
    }

    fn forward(&self, items: &[ModelInput], noise: &[LatentNoise]) -> Result<BatchForward> {
        if items.is_empty() || items.len() != noise.len() {
            return Err(Error::Input(format!(
                "{} inputs with {} noise draws",
                items.len(),
                noise.len()
            )));
        }
        let (l, e, c) = (self.cfg.latent_dim, self.cfg.eps_dim, self.cfg.components);
        let bsz = items.len();
        let (xin, vin) = self.encoder_inputs(items)?;
        let (qx, enc_x) = self.enc_x.forward(xin.view());
        let (qe, enc_eps) = self.enc_eps.forward(vin.view());
        let mut x = Array2::zeros((bsz, l));
        let mut eps = Array2::zeros((bsz, e));
        for b in 0..bsz {
            for i in 0..l {
                x[[b, i]] = qx[[b, i]] + (0.5 * qx[[b, l + i]]).exp() * noise[b].x[i];
            }
            for i in 0..e {
                eps[[b, i]] = qe[[b, i]] + (0.5 * qe[[b, e + i]]).exp() * noise[b].eps[i];
            }
        }
        let (prior_out, prior) = self.prior.forward(eps.view());
        let (raw, dec) = self.dec.forward(x.view());
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !(finite(&qx) && finite(&qe) && finite(&prior_out) && finite(&raw)) {
            return Err(Error::Training {
                batch: 0,
                what: "non-finite network activations".into(),
            });
        }

        let vol = self.grid.voxel_volume();
        let lam2 = self.cfg.lambda * self.cfg.lambda;
        let steps = self.cfg.shooting.num_steps;
        let recon = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut data = raw.row(b).to_vec();
                self.op.k_in_place(&mut data);
                let v = VectorField::from_raw(self.grid.clone(), data);
                let warp = GeodesicWarp::forward(items[b].template, &v, &self.op, steps)?;
                let rec = warp.warped().ssd(items[b].image) / (2.0 * lam2);
                let mut lv = v.data().to_vec();
                self.op.l_in_place(&mut lv);
                let reg = 0.5 * vol * lv.iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>();
                Ok(SampleRecon { rec, reg, v, warp })
            })
            .collect::<Result<Vec<_>>>()?;

        let stats = (0..bsz)
            .map(|b| {
                let mq = qx.slice(s![b, ..l]).to_vec();
                let lq = qx.slice(s![b, l..]).to_vec();
                let xb = x.row(b).to_vec();
                let comps = self.components_from_row(prior_out.row(b));
                let resp = responsibilities_of(&comps, &xb);
                let kl: Vec<f64> = comps
                    .iter()
                    .map(|g| kl_diag(&mq, &lq, &g.mean, &g.log_var))
                    .collect();
                let kl_x = resp.iter().zip(&kl).map(|(r, k)| r * k).sum();
                let kl_z = (c as f64).ln()
                    + resp
                        .iter()
                        .map(|&r| if r > 0.0 { r * r.ln() } else { 0.0 })
                        .sum::<f64>();
                let kl_eps = kl_standard(
                    qe.slice(s![b, ..e]).as_slice().expect("contiguous row"),
                    qe.slice(s![b, e..]).as_slice().expect("contiguous row"),
                );
                SampleStats {
                    resp,
                    kl,
                    kl_x,
                    kl_z,
                    kl_eps,
                }
            })
            .collect();

        Ok(BatchForward {
            enc_x,
            enc_eps,
            prior,
            dec,
            qx,
            qe,
            x,
            prior_out,
            recon,
            stats,
        })
    }

    fn weight_decay_term(&self) -> f64 {
        self.cfg.weight_decay
            * self
                .networks()
                .iter()
                .map(|n| n.params().iter().map(|p| p * p).sum::<f64>())
                .sum::<f64>()
    }

    fn breakdown(&self, fwd: &BatchForward) -> Result<LossBreakdown> {
        let bsz = fwd.recon.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| (0..fwd.recon.len()).map(f).sum::<f64>() / bsz;
        let mut out = LossBreakdown {
            recon: mean(&|b| fwd.recon[b].rec),
            kl_x: mean(&|b| fwd.stats[b].kl_x),
            kl_eps: mean(&|b| fwd.stats[b].kl_eps),
            kl_z: mean(&|b| fwd.stats[b].kl_z),
            regularity: mean(&|b| fwd.recon[b].reg),
            weight_decay: self.weight_decay_term(),
            total: 0.0,
        };
        for (name, v) in [
            ("reconstruction", out.recon),
            ("kl_x", out.kl_x),
            ("kl_eps", out.kl_eps),
            ("kl_z", out.kl_z),
            ("regularity", out.regularity),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: self.cfg.shooting.num_steps,
                    what: format!("{name} term is not finite"),
                });
            }
        }
        out.total = out.recon + out.kl_x + out.kl_eps + out.kl_z + out.regularity + out.weight_decay;
        Ok(out)
    }

    /// Training loss for fixed reparameterization noise.
    pub fn loss(&self, items: &[ModelInput], noise: &[LatentNoise]) -> Result<LossBreakdown> {
        let fwd = self.forward(items, noise)?;
        self.breakdown(&fwd)
    }

    /// Training loss and its exact gradient for fixed noise.
    pub fn loss_and_grad(&self, items: &[ModelInput], noise: &[LatentNoise]) -> Result<(LossBreakdown, ModelGrads)> {
        let fwd = self.forward(items, noise)?;
        let out = self.breakdown(&fwd)?;
        let (l, e, c) = (self.cfg.latent_dim, self.cfg.eps_dim, self.cfg.components);
        let bsz = items.len();
        let inv_b = 1.0 / bsz as f64;
        let nv = self.grid.ndim() * self.grid.len();
        let vol = self.grid.voxel_volume();
        let lam2 = self.cfg.lambda * self.cfg.lambda;

        // Reconstruction and regularity, back to the raw decoder output.
        let raw_grads: Vec<Vec<f64>> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let r = &fwd.recon[b];
                let cot: Vec<f64> = r
                    .warp
                    .warped()
                    .values()
                    .iter()
                    .zip(items[b].image.values())
                    .map(|(w, j)| (w - j) / lam2)
                    .collect();
                let mut gv = r.warp.backward(items[b].template, &self.op, &cot).into_data();
                let mut lv = r.v.data().to_vec();
                self.op.l_in_place(&mut lv);
                for (g, m) in gv.iter_mut().zip(&lv) {
                    *g += vol * m;
                }
                self.op.k_in_place(&mut gv);
                gv
            })
            .collect();
        let mut d_raw = Array2::zeros((bsz, nv));
        for (b, g) in raw_grads.iter().enumerate() {
            d_raw.row_mut(b).assign(&ArrayView1::from(g.as_slice()));
        }
        d_raw *= inv_b;

        // Mixture KL terms.
        let mut d_qx = Array2::<f64>::zeros((bsz, 2 * l));
        let mut d_qe = Array2::<f64>::zeros((bsz, 2 * e));
        let mut d_prior = Array2::<f64>::zeros((bsz, c * 2 * l));
        let mut d_x = Array2::<f64>::zeros((bsz, l));
        for b in 0..bsz {
            let st = &fwd.stats[b];
            let g: Vec<f64> = (0..c)
                .map(|k| st.kl[k] + st.resp[k].max(f64::MIN_POSITIVE).ln())
                .collect();
            let gbar: f64 = st.resp.iter().zip(&g).map(|(r, g)| r * g).sum();
            for k in 0..c {
                let r = st.resp[k];
                let dlogit = r * (g[k] - gbar);
                for i in 0..l {
                    let mq = fwd.qx[[b, i]];
                    let lq = fwd.qx[[b, l + i]];
                    let mc = fwd.prior_out[[b, k * 2 * l + i]];
                    let lc = fwd.prior_out[[b, k * 2 * l + l + i]];
                    let xi = fwd.x[[b, i]];
                    let prec = (-lc).exp();
                    let dx = xi - mc;
                    let dq = mq - mc;
                    // Responsibilities through log N(x | mu_c, logvar_c).
                    d_x[[b, i]] -= dlogit * dx * prec;
                    d_prior[[b, k * 2 * l + i]] += dlogit * dx * prec;
                    d_prior[[b, k * 2 * l + l + i]] += dlogit * 0.5 * (dx * dx * prec - 1.0);
                    // r_c-weighted KL_c.
                    d_qx[[b, i]] += r * dq * prec;
                    d_qx[[b, l + i]] += r * 0.5 * ((lq - lc).exp() - 1.0);
                    d_prior[[b, k * 2 * l + i]] -= r * dq * prec;
                    d_prior[[b, k * 2 * l + l + i]] += r * 0.5 * (1.0 - (lq.exp() + dq * dq) * prec);
                }
            }
            for i in 0..e {
                d_qe[[b, i]] += fwd.qe[[b, i]];
                d_qe[[b, e + i]] += 0.5 * (fwd.qe[[b, e + i]].exp() - 1.0);
            }
        }
        d_qx *= inv_b;
        d_qe *= inv_b;
        d_prior *= inv_b;
        d_x *= inv_b;

        let mut grads = ModelGrads {
            enc_x: vec![0.0; self.enc_x.num_params()],
            enc_eps: vec![0.0; self.enc_eps.num_params()],
            prior: vec![0.0; self.prior.num_params()],
            dec: vec![0.0; self.dec.num_params()],
        };
        let dx_dec = self
            .dec
            .backward(&fwd.dec, d_raw.view(), &mut grads.dec, true)
            .expect("input gradient requested");
        d_x += &dx_dec;
        let d_eps = self
            .prior
            .backward(&fwd.prior, d_prior.view(), &mut grads.prior, true)
            .expect("input gradient requested");
        for b in 0..bsz {
            for i in 0..l {
                d_qx[[b, i]] += d_x[[b, i]];
                d_qx[[b, l + i]] += d_x[[b, i]] * 0.5 * (0.5 * fwd.qx[[b, l + i]]).exp() * noise[b].x[i];
            }
            for i in 0..e {
                d_qe[[b, i]] += d_eps[[b, i]];
                d_qe[[b, e + i]] += d_eps[[b, i]] * 0.5 * (0.5 * fwd.qe[[b, e + i]]).exp() * noise[b].eps[i];
            }
        }
        self.enc_x.backward(&fwd.enc_x, d_qx.view(), &mut grads.enc_x, false);
        self.enc_eps.backward(&fwd.enc_eps, d_qe.view(), &mut grads.enc_eps, false);

        let wd = 2.0 * self.cfg.weight_decay;
        for (g, net) in [
            (&mut grads.enc_x, &self.enc_x),
            (&mut grads.enc_eps, &self.enc_eps),
            (&mut grads.prior, &self.prior),
            (&mut grads.dec, &self.dec),
        ] {
            for (gi, p) in g.iter_mut().zip(net.params()) {
                *gi += wd * p;
            }
        }
        Ok((out, grads))
    }

    /// The variational bound for fixed noise (one draw per item).
    pub fn elbo_with_noise(&self, items: &[ModelInput], noise: &[LatentNoise]) -> Result<ElboBreakdown> {
        let fwd = self.forward(items, noise)?;
        let m = self.grid.len() as f64;
        let lam2 = self.cfg.lambda * self.cfg.lambda;
        let constant = 0.5 * m * (2.0 * PI * lam2).ln();
        let bsz = items.len() as f64;
        let mut out = ElboBreakdown::default();
        for (r, st) in fwd.recon.iter().zip(&fwd.stats) {
            out.recon += (-r.rec - constant) / bsz;
            out.kl_x += st.kl_x / bsz;
            out.kl_eps += st.kl_eps / bsz;
            out.kl_z += st.kl_z / bsz;
        }
        for (name, v) in [
            ("reconstruction", out.recon),
            ("kl_x", out.kl_x),
            ("kl_eps", out.kl_eps),
            ("kl_z", out.kl_z),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: self.cfg.shooting.num_steps,
                    what: format!("ELBO term {name} is not finite"),
                });
            }
        }
        out.total = out.recon - out.kl_x - out.kl_eps - out.kl_z;
        Ok(out)
    }

    /// Monte-Carlo estimate of the bound with `mc_samples` draws per item.
    pub fn elbo<R: Rng>(&self, items: &[ModelInput], mc_samples: usize, rng: &mut R) -> Result<ElboBreakdown> {
        if mc_samples == 0 {
            return Err(Error::Input("mc_samples must be at least 1".into()));
        }
        let mut acc = ElboBreakdown::default();
        for _ in 0..mc_samples {
            let noise: Vec<LatentNoise> = items
                .iter()
                .map(|_| LatentNoise::draw(self.cfg.latent_dim, self.cfg.eps_dim, rng))
                .collect();
            let e = self.elbo_with_noise(items, &noise)?;
            let w = 1.0 / mc_samples as f64;
            acc.recon += w * e.recon;
            acc.kl_x += w * e.kl_x;
            acc.kl_eps += w * e.kl_eps;
            acc.kl_z += w * e.kl_z;
            acc.total += w * e.total;
        }
        Ok(acc)
    }

    /// Most responsible component of each item, evaluated at the posterior means.
    pub fn assign_components(&self, items: &[ModelInput]) -> Result<Vec<usize>> {
        items
            .iter()
            .map(|it| {
                let (qx, qe) = self.encode(it.image, it.velocity)?;
                let r = self.responsibilities(&qx.mean, &qe.mean)?;
                Ok(argmax(&r))
            })
            .collect()
    }

    /// Writes every parameter tensor as f32 MGT1 plus `manifest.txt` and `model.cfg`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (net_name, net) in self.named_networks() {
            for (name, shape, range) in net.tensors() {
                let full = format!("{net_name}.{name}");
                let file = format!("{full}.mgt");
                let t = Tensor::from_f64(shape.clone(), &net.params()[range], DType::F32)?;
                save_mgt(dir.join(&file), &t)?;
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                manifest.push_str(&format!("{full} f32 {} {file}\n", dims.join("x")));
            }
        }
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("manifest.txt", manifest)?;
        write("model.cfg", self.config_text())
    }

    fn named_networks(&self) -> [(&'static str, &Mlp); 4] {
        [
            ("enc_x", &self.enc_x),
            ("enc_eps", &self.enc_eps),
            ("prior", &self.prior),
            ("dec", &self.dec),
        ]
    }

    fn config_text(&self) -> String {
        let c = &self.cfg;
        let dims: Vec<String> = self.grid.dims().iter().map(|d| d.to_string()).collect();
        let sp: Vec<String> = self.grid.spacing().iter().map(|d| d.to_string()).collect();
        format!(
            "components = {}\nlatent_dim = {}\neps_dim = {}\nhidden = {}\nalpha = {}\nsteps = {}\nlambda = {}\nweight_decay = {}\nprior_init_spread = {}\ndims = {}\nspacing = {}\n",
            c.components,
            c.latent_dim,
            c.eps_dim,
            c.hidden,
            c.shooting.alpha,
            c.shooting.num_steps,
            c.lambda,
            c.weight_decay,
            c.prior_init_spread,
            dims.join("x"),
            sp.join("x"),
        )
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let kv: KvMap = parse_kv(&read("model.cfg")?)?;
        let cfg = MixtureConfig {
            components: kv.get("components")?,
            latent_dim: kv.get("latent_dim")?,
            eps_dim: kv.get("eps_dim")?,
            hidden: kv.get("hidden")?,
            shooting: ShootingConfig {
                num_steps: kv.get("steps")?,
                alpha: kv.get("alpha")?,
            },
            lambda: kv.get("lambda")?,
            weight_decay: kv.get("weight_decay")?,
            prior_init_spread: kv.get("prior_init_spread")?,
        };
        let mut model = MixtureLatentModel::new(cfg, read_grid(&kv)?, 0)?;
        let manifest = read("manifest.txt")?;
        let entries: Vec<(String, String)> = manifest
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let parts: Vec<&str> = l.split_whitespace().collect();
                match parts.as_slice() {
                    [name, _dtype, _shape, file] => Ok((name.to_string(), file.to_string())),
                    _ => Err(Error::Config(format!("malformed manifest line {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        for (net_name, net) in [
            ("enc_x", &mut model.enc_x),
            ("enc_eps", &mut model.enc_eps),
            ("prior", &mut model.prior),
            ("dec", &mut model.dec),
        ] {
            for (name, shape, range) in net.tensors() {
                let full = format!("{net_name}.{name}");
                let file = entries
                    .iter()
                    .find(|(n, _)| *n == full)
                    .map(|(_, f)| f.clone())
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {full}")))?;
                let t = load_mgt(dir.join(&file))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "{full}: expected shape {shape:?}, file has {:?}",
                        t.shape()
                    )));
                }
                net.params_mut()[range].copy_from_slice(&t.to_f64());
            }
        }
        Ok(model)
    }
}

pub(crate) fn responsibilities_of(comps: &[DiagGaussian], x: &[f64]) -> Vec<f64> {
    let log_pi = -(comps.len() as f64).ln();
    let logits: Vec<f64> = comps.iter().map(|g| log_pi + g.log_density(x)).collect();
    softmax(&logits)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Settings of the mixture-model training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Owned training example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: ScalarField,
    pub velocity: VectorField,
    pub template: ScalarField,
}

impl TrainExample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            image: &self.image,
            velocity: &self.velocity,
            template: &self.template,
        }
    }
}

/// Adam states and the epoch counter, so training can resume.
#[derive(Debug, Clone)]
pub struct MixtureTrainer {
    pub cfg: TrainConfig,
    adams: [Adam; 4],
    epoch: usize,
    /// Mean training loss of every completed epoch.
    pub history: Vec<LossBreakdown>,
}

impl MixtureTrainer {
    pub fn new(model: &MixtureLatentModel, cfg: TrainConfig) -> Self {
        let adams = [
            Adam::new(model.enc_x.num_params(), cfg.lr),
            Adam::new(model.enc_eps.num_params(), cfg.lr),
            Adam::new(model.prior.num_params(), cfg.lr),
            Adam::new(model.dec.num_params(), cfg.lr),
        ];
        MixtureTrainer {
            cfg,
            adams,
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Runs one epoch; the learning rate follows a cosine schedule over
    /// `cfg.epochs`. On a non-finite loss the model is left at its state
    /// before the epoch and an error naming the batch is returned.
    pub fn run_epoch(&mut self, model: &mut MixtureLatentModel, data: &[TrainExample]) -> Result<LossBreakdown> {
        use rand::seq::SliceRandom;
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let snapshot = model.clone();
        let adams_snapshot = self.adams.clone();
        let lr = cosine_lr(self.cfg.lr, self.epoch, self.cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let bs = self.cfg.batch.clamp(1, data.len());
        let mut acc = LossBreakdown::default();
        let mut count = 0.0;
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let items: Vec<ModelInput> = chunk.iter().map(|&i| data[i].input()).collect();
            let noise: Vec<LatentNoise> = chunk
                .iter()
                .map(|_| LatentNoise::draw(model.cfg.latent_dim, model.cfg.eps_dim, &mut rng))
                .collect();
            let step = model.loss_and_grad(&items, &noise).and_then(|(loss, grads)| {
                if loss.total.is_finite() && grads.flatten().iter().all(|g| g.is_finite()) {
                    Ok((loss, grads))
                } else {
                    Err(Error::Training {
                        batch: bi,
                        what: "non-finite loss or gradient".into(),
                    })
                }
            });
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(e) => {
                    *model = snapshot;
                    self.adams = adams_snapshot;
                    return Err(match e {
                        Error::Training { what, .. } => Error::Training { batch: bi, what },
                        other => Error::Training {
                            batch: bi,
                            what: other.to_string(),
                        },
                    });
                }
            };
            let w = chunk.len() as f64;
            acc.recon += w * loss.recon;
            acc.kl_x += w * loss.kl_x;
            acc.kl_eps += w * loss.kl_eps;
            acc.kl_z += w * loss.kl_z;
            acc.regularity += w * loss.regularity;
            acc.weight_decay += w * loss.weight_decay;
            acc.total += w * loss.total;
            count += w;
            self.adams[0].step_with_lr(model.enc_x.params_mut(), &grads.enc_x, lr);
            self.adams[1].step_with_lr(model.enc_eps.params_mut(), &grads.enc_eps, lr);
            self.adams[2].step_with_lr(model.prior.params_mut(), &grads.prior, lr);
            self.adams[3].step_with_lr(model.dec.params_mut(), &grads.dec, lr);
        }
        for v in [
            &mut acc.recon,
            &mut acc.kl_x,
            &mut acc.kl_eps,
            &mut acc.kl_z,
            &mut acc.regularity,
            &mut acc.weight_decay,
            &mut acc.total,
        ] {
            *v /= count;
        }
        self.epoch += 1;
        self.history.push(acc);
        Ok(acc)
    }
}

/// Trains for `cfg.epochs` epochs, writing a checkpoint after every epoch
/// when `checkpoint_dir` is given. The returned history holds the mean
/// loss of each epoch.
pub fn train_mgaug(
    model: &mut MixtureLatentModel,
    data: &[TrainExample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LossBreakdown>> {
    let mut trainer = MixtureTrainer::new(model, cfg.clone());
    for _ in 0..cfg.epochs {
        trainer.run_epoch(model, data)?;
        if let Some(dir) = checkpoint_dir {
            model.save_checkpoint(dir)?;
        }
    }
    Ok(trainer.history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(c: usize, spread: f64) -> MixtureLatentModel {
        let cfg = MixtureConfig {
            components: c,
            latent_dim: 3,
            eps_dim: 2,
            hidden: 8,
            prior_init_spread: spread,
            ..Default::default()
        };
        MixtureLatentModel::new(cfg, Grid::new(&[8, 8]).unwrap(), 5).unwrap()
    }

    fn blob(g: &Grid, c: f64) -> ScalarField {
        ScalarField::from_fn(g.clone(), |p| (-((p[0] - c).powi(2) + (p[1] - 3.5).powi(2)) / 5.0).exp())
    }

    #[test]
    fn zero_initialized_heads() {
        let m = small_model(3, 0.0);
        let g = m.grid().clone();
        let img = blob(&g, 3.5);
        let v = VectorField::zeros(g.clone());
        let (qx, qe) = m.encode(&img, &v).unwrap();
        assert!(qx.mean.iter().chain(&qx.log_var).chain(&qe.mean).chain(&qe.log_var).all(|&x| x == 0.0));
        let comps = m.prior_components(&[0.3, -1.0]).unwrap();
        assert!(comps.iter().all(|c| c.mean.iter().chain(&c.log_var).all(|&x| x == 0.0)));
        let r = m.responsibilities(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(r.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(m.decode(&[1.0, 2.0, 3.0]).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matched_posterior_has_zero_kl() {
        let m = small_model(2, 0.0);
        let g = m.grid().clone();
        let img = blob(&g, 3.5);
        let v = VectorField::zeros(g);
        let item = ModelInput {
            image: &img,
            velocity: &v,
            template: &img,
        };
        let loss = m.loss(&[item], &[LatentNoise::zeros(3, 2)]).unwrap();
        assert_eq!(loss.recon, 0.0);
        assert_eq!(loss.regularity, 0.0);
        assert!(loss.kl_x.abs() < 1e-15 && loss.kl_eps.abs() < 1e-15 && loss.kl_z.abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small_model(2, 1.0);
        let dir = tempfile::tempdir().unwrap();
        m.save_checkpoint(dir.path()).unwrap();
        let back = MixtureLatentModel::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params_flat().iter().zip(back.params_flat()) {
            assert_eq!(*a as f32, b as f32);
        }
        let dir2 = tempfile::tempdir().unwrap();
        back.save_checkpoint(dir2.path()).unwrap();
        let again = MixtureLatentModel::load_checkpoint(dir2.path()).unwrap();
        assert_eq!(again.params_flat(), back.params_flat());
    }
}
