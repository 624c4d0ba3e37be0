//! The generative model: fixed standard-Normal prior, residual-MLP decoder,
//! and the decoder likelihood with missing dimensions marginalized out.
//!
//! Under the conditional-independence assumption of the decoder, the
//! integral of p(x_obs, x_mis | z) over x_mis is the product of the
//! observed-dimension factors, so the marginal log-likelihood is a masked
//! sum of per-dimension terms.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::math::{sigmoid, softplus, LN_2PI};
use crate::nn::{ArchConfig, Mlp, ParamBinding, ParamStore};
use crate::tape::{Tape, Var};

/// Floor on Gaussian decoder standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderFamily {
    Gaussian,
    Bernoulli,
}

/// Decoder parameters and architecture; the prior is a fixed standard
/// Normal over `latent_dim` dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VAEModel {
    pub params: ParamStore,
    pub decoder: Mlp,
    pub family: DecoderFamily,
    pub latent_dim: usize,
    pub data_dim: usize,
}

/// Per-sample decoder distribution parameters.
#[derive(Debug, Clone)]
pub enum DecoderOutput {
    Gaussian { mean: Array2<f64>, std: Array2<f64> },
    Bernoulli { raw: Array2<f64>, probs: Array2<f64> },
}

impl DecoderOutput {
    pub fn n_rows(&self) -> usize {
        match self {
            DecoderOutput::Gaussian { mean, .. } => mean.nrows(),
            DecoderOutput::Bernoulli { raw, .. } => raw.nrows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DecoderOutput::Gaussian { mean, .. } => mean.ncols(),
            DecoderOutput::Bernoulli { raw, .. } => raw.ncols(),
        }
    }

    /// Distribution mean per dimension.
    pub fn mean(&self) -> Array2<f64> {
        match self {
            DecoderOutput::Gaussian { mean, .. } => mean.clone(),
            DecoderOutput::Bernoulli { probs, .. } => probs.clone(),
        }
    }
}

/// Tape-side decoder outputs.
pub struct DecoderVars {
    pub family: DecoderFamily,
    /// Gaussian: (mean, std). Bernoulli: (raw logits, raw logits).
    pub a: Var,
    pub b: Var,
}

pub fn softplus_inv(y: f64) -> f64 {
    // Inverse of ln(1 + e^x); valid for y > 0.
    y + (-(-y).exp_m1()).ln()
}

impl VAEModel {
    pub fn new(
        latent_dim: usize,
        data_dim: usize,
        arch: ArchConfig,
        family: DecoderFamily,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamStore::new();
        let heads: Vec<(&str, usize)> = match family {
            DecoderFamily::Gaussian => vec![("mean", data_dim), ("raw_std", data_dim)],
            DecoderFamily::Bernoulli => vec![("logit", data_dim)],
        };
        let decoder = Mlp::new(&mut params, "dec", latent_dim, arch, &heads, rng);
        VAEModel { params, decoder, family, latent_dim, data_dim }
    }

    /// Exact affine Gaussian decoder: mean = z W + b, constant std.
    /// The closed-form marginal is N(b, W^T W + diag(std^2)).
    pub fn affine_gaussian(weight: &Array2<f64>, bias: &Array1<f64>, std: f64) -> Self {
        let latent_dim = weight.nrows();
        let data_dim = weight.ncols();
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::ParamInit);
        let mut model = VAEModel::new(
            latent_dim,
            data_dim,
            ArchConfig { blocks: 0, hidden: 0 },
            DecoderFamily::Gaussian,
            &mut rng,
        );
        let mean_w = model.decoder.head_weight_id(0);
        let mean_b = model.decoder.head_bias_id(0);
        let std_w = model.decoder.head_weight_id(1);
        let std_b = model.decoder.head_bias_id(1);
        model.params.set(mean_w, weight.clone());
        model
            .params
            .set(mean_b, Array2::from_shape_fn((1, data_dim), |(_, j)| bias[j]));
        model.params.set(std_w, Array2::zeros((latent_dim, data_dim)));
        model.params.set(
            std_b,
            Array2::from_elem((1, data_dim), softplus_inv(std - STD_FLOOR)),
        );
        model
    }

    /// Closed-form marginal (mean, covariance) of an affine Gaussian decoder
    /// restricted to the given dimensions.
    pub fn affine_marginal(&self, dims: &[usize]) -> (Array1<f64>, Array2<f64>) {
        assert_eq!(self.decoder.arch.hidden, 0, "affine_marginal requires an affine decoder");
        let w = self.params.get(self.decoder.head_weight_id(0));
        let b = self.params.get(self.decoder.head_bias_id(0));
        let probe = self.decoder_forward(&Array2::zeros((1, self.latent_dim))).unwrap();
        let std = match &probe {
            DecoderOutput::Gaussian { std, .. } => std.clone(),
            _ => unreachable!(),
        };
        let k = dims.len();
        let mean = Array1::from_iter(dims.iter().map(|&j| b[[0, j]]));
        let mut cov = Array2::zeros((k, k));
        for (a, &da) in dims.iter().enumerate() {
            for (c, &dc) in dims.iter().enumerate() {
                let mut v = 0.0;
                for l in 0..self.latent_dim {
                    v += w[[l, da]] * w[[l, dc]];
                }
                if a == c {
                    v += std[[0, da]] * std[[0, da]];
                }
                cov[[a, c]] = v;
            }
        }
        (mean, cov)
    }

    /// Decoder forward pass on a batch of latents.
    pub fn decoder_forward(&self, z: &Array2<f64>) -> Result<DecoderOutput> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("decoder_forward: non-finite latent input"));
        }
        let heads = self.decoder.forward_plain(&self.params, z);
        self.materialize(heads)
    }

    fn materialize(&self, heads: Vec<Array2<f64>>) -> Result<DecoderOutput> {
        for (hi, h) in heads.iter().enumerate() {
            for (i, row) in h.rows().into_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "decoder produced non-finite activation in head {hi}, batch row {i}"
                    )));
                }
            }
        }
        match self.family {
            DecoderFamily::Gaussian => {
                let mean = heads[0].clone();
                let std = heads[1].mapv(|v| softplus(v) + STD_FLOOR);
                Ok(DecoderOutput::Gaussian { mean, std })
            }
            DecoderFamily::Bernoulli => {
                let raw = heads[0].clone();
                let probs = raw.mapv(|v| {
                    sigmoid(v.clamp(-kernels::BERNOULLI_LOGIT_CLAMP, kernels::BERNOULLI_LOGIT_CLAMP))
                });
                Ok(DecoderOutput::Bernoulli { raw, probs })
            }
        }
    }

    /// Tape forward; std transform included for the Gaussian family.
    pub fn decoder_forward_tape(
        &self,
        tape: &mut Tape,
        binding: &mut ParamBinding,
        z: Var,
    ) -> DecoderVars {
        let heads = self.decoder.forward_tape(tape, &self.params, binding, z);
        match self.family {
            DecoderFamily::Gaussian => {
                let std = tape.softplus_shift(heads[1], STD_FLOOR);
                DecoderVars { family: DecoderFamily::Gaussian, a: heads[0], b: std }
            }
            DecoderFamily::Bernoulli => {
                DecoderVars { family: DecoderFamily::Bernoulli, a: heads[0], b: heads[0] }
            }
        }
    }

    /// Tape-side log p(x | eta) summed over dimensions where mask = 1.
    pub fn loglik_tape(
        &self,
        tape: &mut Tape,
        dec: &DecoderVars,
        x: Array2<f64>,
        mask: Array2<f64>,
    ) -> Var {
        match dec.family {
            DecoderFamily::Gaussian => tape.gauss_loglik(dec.a, dec.b, x, mask),
            DecoderFamily::Bernoulli => tape.bernoulli_loglik(dec.a, x, mask),
        }
    }
}

/// log p(x | eta) over observed dimensions, one value per decoder row.
/// `x` and `mask` are row-broadcast if they have a single row.
pub fn marginal_decoder_loglik(
    eta: &DecoderOutput,
    x: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<Array1<f64>> {
    let n = eta.n_rows();
    let (x, mask) = broadcast_rows(x, mask, n, eta.dim())?;
    let out = match eta {
        DecoderOutput::Gaussian { mean, std } => {
            kernels::gauss_loglik_masked_fwd(mean, std, &x, &mask)
        }
        DecoderOutput::Bernoulli { raw, .. } => kernels::bernoulli_loglik_masked_fwd(raw, &x, &mask),
    };
    Ok(out.column(0).to_owned())
}

fn broadcast_rows(
    x: &Array2<f64>,
    mask: &Array2<f64>,
    n: usize,
    d: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.ncols() != d || mask.ncols() != d {
        return Err(Error::parameter("marginal_decoder_loglik: dimension mismatch"));
    }
    let expand = |a: &Array2<f64>| -> Result<Array2<f64>> {
        if a.nrows() == n {
            Ok(a.clone())
        } else if a.nrows() == 1 {
            let mut out = Array2::zeros((n, d));
            for i in 0..n {
                out.row_mut(i).assign(&a.row(0));
            }
            Ok(out)
        } else {
            Err(Error::parameter("marginal_decoder_loglik: row count mismatch"))
        }
    };
    Ok((expand(x)?, expand(mask)?))
}

/// Standard-Normal prior log-density per latent row.
pub fn prior_logpdf(z: &Array2<f64>) -> Array1<f64> {
    let l = z.ncols() as f64;
    Array1::from_iter(
        z.rows()
            .into_iter()
            .map(|row| -0.5 * (l * LN_2PI + row.iter().map(|v| v * v).sum::<f64>())),
    )
}

/// Draws from the standard-Normal prior.
pub fn prior_sample(n: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, latent_dim), |_| StandardNormal.sample(rng))
}

/// Completions drawn from the decoder on missing dims; observed dims are
/// copied from `values`. `changed` is false when the mask is fully observed.
#[derive(Debug, Clone)]
pub struct ConditionalDraws {
    pub rows: Array2<f64>,
    pub changed: bool,
}

/// Sample missing dimensions from the per-dimension decoder distribution.
/// One output row per decoder row; observed positions repeat `values`.
pub fn decoder_conditional_sample(
    eta: &DecoderOutput,
    values: &Array1<f64>,
    mask: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<ConditionalDraws> {
    let n = eta.n_rows();
    let d = eta.dim();
    if values.len() != d || mask.len() != d {
        return Err(Error::parameter("decoder_conditional_sample: shape mismatch"));
    }
    let any_missing = mask.iter().any(|&m| m == 0);
    let mut rows = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            if mask[j] == 1 {
                rows[[i, j]] = values[j];
            } else {
                rows[[i, j]] = match eta {
                    DecoderOutput::Gaussian { mean, std } => {
                        let e: f64 = StandardNormal.sample(rng);
                        mean[[i, j]] + std[[i, j]] * e
                    }
                    DecoderOutput::Bernoulli { probs, .. } => {
                        let u: f64 = rng.random_range(0.0..1.0);
                        f64::from(u < probs[[i, j]])
                    }
                };
            }
        }
    }
    Ok(ConditionalDraws { rows, changed: any_missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{linspace, normal_logpdf, trapezoid_weights};
    use crate::rng::{stream_rng, Stream};
    use ndarray::{arr1, arr2};

    fn small_model(seed: u64) -> VAEModel {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        VAEModel::new(
            2,
            3,
            ArchConfig { blocks: 1, hidden: 12 },
            DecoderFamily::Gaussian,
            &mut rng,
        )
    }

    #[test]
    fn duplicate_latents_give_duplicate_eta() {
        let model = small_model(0);
        let z = arr2(&[[0.3, -0.8], [0.3, -0.8]]);
        match model.decoder_forward(&z).unwrap() {
            DecoderOutput::Gaussian { mean, std } => {
                assert_eq!(mean.row(0), mean.row(1));
                assert_eq!(std.row(0), std.row(1));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn eta_depends_smoothly_on_z_finite_difference() {
        let model = small_model(1);
        let z0 = arr2(&[[0.4, 0.2]]);
        // Analytic dz via tape backward on a linear functional of eta.
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new(&model.params);
        let zv = tape.leaf(z0.clone());
        let dec = model.decoder_forward_tape(&mut tape, &mut binding, zv);
        let obj = tape.mean_all(dec.a);
        let grads = tape.backward(obj).unwrap();
        let gz = grads.of(&tape, zv);

        let h = 1e-5;
        for c in 0..2 {
            let mut zp = z0.clone();
            zp[[0, c]] += h;
            let mut zm = z0.clone();
            zm[[0, c]] -= h;
            let f = |z: &Array2<f64>| -> f64 {
                match model.decoder_forward(z).unwrap() {
                    DecoderOutput::Gaussian { mean, .. } => mean.mean().unwrap(),
                    _ => unreachable!(),
                }
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let rel = (fd - gz[[0, c]]).abs() / (1.0 + gz[[0, c]].abs());
            assert!(rel < 1e-4, "dim {c}: fd {fd} vs {}", gz[[0, c]]);
        }
    }

    #[test]
    fn zeroed_network_is_constant_in_z() {
        let mut model = small_model(2);
        for id in model.params.ids().collect::<Vec<_>>() {
            let shape = model.params.get(id).raw_dim();
            model.params.set(id, Array2::zeros(shape));
        }
        let eta1 = model.decoder_forward(&arr2(&[[1.0, 2.0]])).unwrap();
        let eta2 = model.decoder_forward(&arr2(&[[-3.0, 0.5]])).unwrap();
        assert_eq!(eta1.mean(), eta2.mean());
    }

    #[test]
    fn non_finite_latent_is_rejected() {
        let model = small_model(3);
        assert!(model.decoder_forward(&arr2(&[[f64::NAN, 0.0]])).is_err());
    }

    #[test]
    fn marginal_loglik_masks_terms() {
        let model = small_model(4);
        let z = arr2(&[[0.1, -0.2]]);
        let eta = model.decoder_forward(&z).unwrap();
        let x = arr2(&[[0.5, -0.3, 0.9]]);
        let full = marginal_decoder_loglik(&eta, &x, &arr2(&[[1.0, 1.0, 1.0]])).unwrap();
        let m01 = marginal_decoder_loglik(&eta, &x, &arr2(&[[1.0, 1.0, 0.0]])).unwrap();
        let m2 = marginal_decoder_loglik(&eta, &x, &arr2(&[[0.0, 0.0, 1.0]])).unwrap();
        let none = marginal_decoder_loglik(&eta, &x, &arr2(&[[0.0, 0.0, 0.0]])).unwrap();
        assert!((full[0] - (m01[0] + m2[0])).abs() < 1e-12);
        assert_eq!(none[0], 0.0);
        // Dropping dims removes exactly their terms.
        match &eta {
            DecoderOutput::Gaussian { mean, std } => {
                let want = normal_logpdf(0.9, mean[[0, 2]], std[[0, 2]]);
                assert!((m2[0] - want).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn marginal_loglik_matches_quadrature_over_missing_dim() {
        // D=2 Gaussian decoder with one dim missing: the masked sum equals
        // the 1D quadrature of the joint over the missing dim.
        let mut rng = stream_rng(5, Stream::ParamInit);
        let model = VAEModel::new(
            2,
            2,
            ArchConfig { blocks: 1, hidden: 10 },
            DecoderFamily::Gaussian,
            &mut rng,
        );
        let z = arr2(&[[0.7, -0.4]]);
        let eta = model.decoder_forward(&z).unwrap();
        let x = arr2(&[[0.25, 0.0]]);
        let got = marginal_decoder_loglik(&eta, &x, &arr2(&[[1.0, 0.0]])).unwrap()[0];

        let (mean, std) = match &eta {
            DecoderOutput::Gaussian { mean, std } => (mean.clone(), std.clone()),
            _ => unreachable!(),
        };
        let n = 4001;
        let lo = mean[[0, 1]] - 12.0 * std[[0, 1]];
        let hi = mean[[0, 1]] + 12.0 * std[[0, 1]];
        let grid = linspace(lo, hi, n);
        let w = trapezoid_weights(n, grid[1] - grid[0]);
        let mut total = 0.0;
        for (i, &xm) in grid.iter().enumerate() {
            let joint = normal_logpdf(0.25, mean[[0, 0]], std[[0, 0]])
                + normal_logpdf(xm, mean[[0, 1]], std[[0, 1]]);
            total += w[i] * joint.exp();
        }
        assert!((total.ln() - got).abs() < 1e-4, "quadrature {} vs {}", total.ln(), got);
    }

    #[test]
    fn marginal_loglik_integrates_to_one_over_observed() {
        let model = small_model(6);
        let eta = model.decoder_forward(&arr2(&[[0.0, 0.0]])).unwrap();
        // Integrate over the two observed dims (mask selects dims 0 and 2).
        let (mean, std) = match &eta {
            DecoderOutput::Gaussian { mean, std } => (mean.clone(), std.clone()),
            _ => unreachable!(),
        };
        let n = 501;
        let mut total = 0.0;
        let g0 = linspace(mean[[0, 0]] - 9.0 * std[[0, 0]], mean[[0, 0]] + 9.0 * std[[0, 0]], n);
        let g2 = linspace(mean[[0, 2]] - 9.0 * std[[0, 2]], mean[[0, 2]] + 9.0 * std[[0, 2]], n);
        let w0 = trapezoid_weights(n, g0[1] - g0[0]);
        let w2 = trapezoid_weights(n, g2[1] - g2[0]);
        for (i, &a) in g0.iter().enumerate() {
            for (j, &b) in g2.iter().enumerate() {
                let x = arr2(&[[a, 0.0, b]]);
                let ll =
                    marginal_decoder_loglik(&eta, &x, &arr2(&[[1.0, 0.0, 1.0]])).unwrap()[0];
                total += w0[i] * w2[j] * ll.exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn std_floor_holds_under_parameter_fuzzing() {
        let mut rng = stream_rng(7, Stream::ParamInit);
        for trial in 0..10 {
            let mut model = small_model(100 + trial);
            for id in model.params.ids().collect::<Vec<_>>() {
                let shape = model.params.get(id).raw_dim();
                let extreme =
                    Array2::from_shape_fn(shape, |_| rng.random_range(-60.0..60.0));
                model.params.set(id, extreme);
            }
            let z = Array2::from_shape_fn((4, 2), |_| rng.random_range(-3.0..3.0));
            if let Ok(DecoderOutput::Gaussian { std, .. }) = model.decoder_forward(&z) {
                assert!(std.iter().all(|s| *s >= STD_FLOOR));
            }
        }
    }

    #[test]
    fn prior_reference_values() {
        let z = Array2::zeros((1, 2));
        let lp = prior_logpdf(&z);
        assert!((lp[0] - (-1.8378770664093453)).abs() < 1e-12);
        let z2 = arr2(&[[0.3, -0.7], [-0.3, 0.7]]);
        let lp2 = prior_logpdf(&z2);
        assert!((lp2[0] - lp2[1]).abs() < 1e-15, "symmetric in sign");
        let mut rng = stream_rng(8, Stream::LatentSampling);
        let zs = prior_sample(100_000, 3, &mut rng);
        let mean_sq: f64 = zs.iter().map(|v| v * v).sum::<f64>() / zs.nrows() as f64;
        // E[|z|^2] = L; var of chi2(3)/n gives a ~0.008 CI at 3 sigma.
        assert!((mean_sq - 3.0).abs() < 0.025, "mean |z|^2 = {mean_sq}");
    }

    #[test]
    fn conditional_sample_degenerate_width() {
        let mean = arr2(&[[0.5, -1.0], [0.2, 0.8]]);
        let std = Array2::from_elem((2, 2), STD_FLOOR);
        let eta = DecoderOutput::Gaussian { mean: mean.clone(), std };
        let values = arr1(&[9.0, 0.0]);
        let mut rng = stream_rng(9, Stream::Imputation);
        let draws = decoder_conditional_sample(&eta, &values, &[1, 0], &mut rng).unwrap();
        assert!(draws.changed);
        for i in 0..2 {
            assert_eq!(draws.rows[[i, 0]], 9.0, "observed dim untouched");
            assert!((draws.rows[[i, 1]] - mean[[i, 1]]).abs() < 1e-4);
        }
    }

    #[test]
    fn conditional_sample_bernoulli_certain() {
        let raw = Array2::from_elem((5, 2), 50.0);
        let probs = raw.mapv(sigmoid);
        let eta = DecoderOutput::Bernoulli { raw, probs };
        let values = arr1(&[0.0, 0.0]);
        let mut rng = stream_rng(10, Stream::Imputation);
        let draws = decoder_conditional_sample(&eta, &values, &[0, 0], &mut rng).unwrap();
        assert!(draws.rows.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conditional_sample_fully_observed_flagged() {
        let eta = DecoderOutput::Gaussian {
            mean: Array2::zeros((1, 2)),
            std: Array2::ones((1, 2)),
        };
        let values = arr1(&[1.0, 2.0]);
        let mut rng = stream_rng(11, Stream::Imputation);
        let draws = decoder_conditional_sample(&eta, &values, &[1, 1], &mut rng).unwrap();
        assert!(!draws.changed);
        assert_eq!(draws.rows.row(0).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn conditional_sample_mean_matches_eta() {
        let mean = arr2(&[[0.7, -0.3]]);
        let std = arr2(&[[0.5, 1.5]]);
        let eta = DecoderOutput::Gaussian { mean: mean.clone(), std: std.clone() };
        let values = arr1(&[0.0, 0.0]);
        let mut rng = stream_rng(12, Stream::Imputation);
        let n = 10_000;
        let mut acc = [0.0f64; 2];
        for _ in 0..n {
            let d = decoder_conditional_sample(&eta, &values, &[0, 0], &mut rng).unwrap();
            acc[0] += d.rows[[0, 0]];
            acc[1] += d.rows[[0, 1]];
        }
        for j in 0..2 {
            let m = acc[j] / n as f64;
            let ci = 4.0 * std[[0, j]] / (n as f64).sqrt();
            assert!((m - mean[[0, j]]).abs() < ci, "dim {j}: {m}");
        }
    }

    #[test]
    fn affine_marginal_matches_sampling() {
        let w = arr2(&[[0.8, -0.5, 0.0], [0.2, 0.4, 1.0]]);
        let b = arr1(&[0.1, -0.2, 0.3]);
        let model = VAEModel::affine_gaussian(&w, &b, 0.5);
        let (mean, cov) = model.affine_marginal(&[0, 1, 2]);
        let mut rng = stream_rng(13, Stream::LatentSampling);
        let n = 200_000;
        let z = prior_sample(n, 2, &mut rng);
        let eta = model.decoder_forward(&z).unwrap();
        let (em, es) = match &eta {
            DecoderOutput::Gaussian { mean, std } => (mean.clone(), std.clone()),
            _ => unreachable!(),
        };
        let mut xs = Array2::zeros((n, 3));
        for i in 0..n {
            for j in 0..3 {
                let e: f64 = StandardNormal.sample(&mut rng);
                xs[[i, j]] = em[[i, j]] + es[[i, j]] * e;
            }
        }
        for j in 0..3 {
            let m = xs.column(j).mean().unwrap();
            assert!((m - mean[j]).abs() < 0.02, "mean[{j}] = {m} vs {}", mean[j]);
            let col: Vec<f64> = xs.column(j).to_vec();
            let v = crate::stats::variance(&col);
            assert!((v - cov[[j, j]]).abs() < 0.03, "var[{j}] = {v} vs {}", cov[[j, j]]);
        }
    }
}
