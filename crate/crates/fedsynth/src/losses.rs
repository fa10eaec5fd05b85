//! Training objectives: reference minimax GAN loss, non-saturating losses
//! with the R1 gradient penalty, the multi-scale consistency regularizer,
//! and the cohort-specific generator objectives.

use crate::error::{Error, Result};
use crate::renderer::{discriminator_forward, discriminator_with_input_grad, DiscriminatorParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GanLossCfg {
    /// R1 gradient-penalty weight.
    pub r1_weight: f64,
    /// Weight of the multi-scale consistency regularizer.
    pub reg_weight: f64,
}

impl Default for GanLossCfg {
    fn default() -> Self {
        GanLossCfg {
            r1_weight: 1.0,
            reg_weight: 1.0,
        }
    }
}

impl GanLossCfg {
    pub fn validate(&self) -> Result<()> {
        if self.r1_weight < 0.0 {
            return Err(Error::invalid("gan_loss_cfg", "r1_weight must be >= 0"));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::invalid("gan_loss_cfg", "reg_weight must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VerticalLossCfg {
    /// Number of pixels sampled for the cross-render comparison.
    pub pixel_subsample_count: usize,
    /// EMA decay of the client-local reference generator.
    pub hyper_decay: f64,
}

impl Default for VerticalLossCfg {
    fn default() -> Self {
        VerticalLossCfg {
            pixel_subsample_count: 32,
            hyper_decay: 0.9,
        }
    }
}

impl VerticalLossCfg {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_subsample_count == 0 {
            return Err(Error::invalid(
                "vertical_loss_cfg",
                "pixel_subsample_count must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.hyper_decay) {
            return Err(Error::invalid(
                "vertical_loss_cfg",
                "hyper_decay must be in [0, 1)",
            ));
        }
        Ok(())
    }
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    let flat: Result<Vec<Tensor>> = terms.iter().map(|t| t.reshape(vec![t.len()])).collect();
    Tensor::concat(&flat?)?.mean()
}

/// Saturating reference objective: mean log D(real) + mean log(1 - D(fake)),
/// with logits squashed through a sigmoid. Evaluation-only.
pub fn minimax_gan_loss(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::invalid("minimax_gan_loss", "empty logit batch"));
    }
    // log sigmoid(x) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let a: f64 = real_logits.iter().map(|&x| -softplus(-x)).sum::<f64>() / real_logits.len() as f64;
    let b: f64 = fake_logits.iter().map(|&x| -softplus(x)).sum::<f64>() / fake_logits.len() as f64;
    Ok(a + b)
}

/// Non-saturating discriminator and generator losses.
///
/// `loss_d` = mean f(D(fake)) + mean f(-D(real)) + λ · mean ‖∇_I D(real)‖²
/// with f = softplus; fakes are detached so only discriminator weights
/// receive gradient. `loss_g` = mean f(-D(fake)) through a detached
/// discriminator, so only the generator graph receives gradient.
pub fn nonsat_losses(
    real: &[Tensor],
    fake: &[Tensor],
    disc: &DiscriminatorParams,
    cfg: &GanLossCfg,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid("nonsat_losses", "empty image batch"));
    }
    let mut d_terms = Vec::new();
    for f in fake {
        d_terms.push(discriminator_forward(&f.detach(), disc)?.softplus()?);
    }
    let fake_term = mean_of(d_terms)?;
    let mut r_terms = Vec::new();
    let mut r1_terms = Vec::new();
    for r in real {
        let (logit, grad) = discriminator_with_input_grad(r, disc)?;
        r_terms.push(logit.neg()?.softplus()?);
        r1_terms.push(grad.square()?.sum()?);
    }
    let real_term = mean_of(r_terms)?;
    let r1 = mean_of(r1_terms)?.mul_scalar(cfg.r1_weight)?;
    let loss_d = fake_term.add(&real_term)?.add(&r1)?;

    let d_frozen = disc.detached();
    let mut g_terms = Vec::new();
    for f in fake {
        g_terms.push(discriminator_forward(f, &d_frozen)?.neg()?.softplus()?);
    }
    let loss_g = mean_of(g_terms)?;
    Ok((loss_d, loss_g))
}

/// MSE between a coarse render and the fine output restricted to the shared
/// rays (the even-strided pixels, which the interleaving upsampler leaves
/// exactly on the coarse ray grid).
pub fn consistency_reg(low: &Tensor, high: &Tensor) -> Result<Tensor> {
    let ls = low.shape();
    let hs = high.shape();
    if ls.len() != 3 || hs.len() != 3 || ls[2] != hs[2] {
        return Err(Error::invalid(
            "consistency_reg",
            format!("expects (H, W, C) maps, got {:?} vs {:?}", ls, hs),
        ));
    }
    if hs[0] % ls[0] != 0 || hs[1] % ls[1] != 0 {
        return Err(Error::invalid(
            "consistency_reg",
            format!("non-integer scale {:?} -> {:?}", ls, hs),
        ));
    }
    let (ry, rx) = (hs[0] / ls[0], hs[1] / ls[1]);
    if ry != rx || !ry.is_power_of_two() {
        return Err(Error::invalid(
            "consistency_reg",
            format!("scale must be a shared power of two, got {}x{}", ry, rx),
        ));
    }
    let mut idx = Vec::with_capacity(ls[0] * ls[1]);
    for i in 0..ls[0] {
        for j in 0..ls[1] {
            idx.push(i * ry * hs[1] + j * rx);
        }
    }
    let high_rows = high.reshape(vec![hs[0] * hs[1], hs[2]])?.gather_rows(&idx)?;
    let low_rows = low.reshape(vec![ls[0] * ls[1], ls[2]])?;
    high_rows.sub(&low_rows)?.square()?.mean()
}

/// L = L_GAN + β · L_Reg.
pub fn total_gan_loss(loss_gan: &Tensor, reg: &Tensor, beta: f64) -> Result<Tensor> {
    if beta < 0.0 {
        return Err(Error::invalid("total_gan_loss", "beta must be >= 0"));
    }
    loss_gan.add(&reg.mul_scalar(beta)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Horizontal,
    Vertical,
}

impl ClientKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClientKind::Horizontal => "horizontal",
            ClientKind::Vertical => "vertical",
        }
    }
}

/// The generator term trained by horizontal clients: the non-saturating
/// objective through the client's (frozen-for-this-step) discriminator.
pub fn horizontal_generator_objective(
    kind: ClientKind,
    fake: &[Tensor],
    disc: &DiscriminatorParams,
) -> Result<Tensor> {
    if kind != ClientKind::Horizontal {
        return Err(Error::invalid(
            "horizontal_generator_objective",
            "client is not in the horizontal cohort",
        ));
    }
    if fake.is_empty() {
        return Err(Error::invalid("horizontal_generator_objective", "empty batch"));
    }
    let d_frozen = disc.detached();
    let mut terms = Vec::new();
    for f in fake {
        terms.push(discriminator_forward(f, &d_frozen)?.neg()?.softplus()?);
    }
    mean_of(terms)
}

/// Mean squared difference between two renders of the same latent over a
/// pixel subsample, averaged over channels.
pub fn vertical_generator_loss(
    latent_a: &Tensor,
    latent_b: &Tensor,
    render_a: &Tensor,
    render_b: &Tensor,
    subsample: &[usize],
) -> Result<Tensor> {
    if latent_a.shape() != latent_b.shape() || latent_a.data() != latent_b.data() {
        return Err(Error::invalid(
            "vertical_generator_loss",
            "renders compare different latents",
        ));
    }
    let sa = render_a.shape();
    let sb = render_b.shape();
    if sa != sb || sa.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "vertical_generator_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    if subsample.is_empty() {
        return Err(Error::invalid("vertical_generator_loss", "empty subsample"));
    }
    let n = sa[0] * sa[1];
    if let Some(&bad) = subsample.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(
            "vertical_generator_loss",
            format!("pixel index {} out of range {}", bad, n),
        ));
    }
    let a = render_a.reshape(vec![n, sa[2]])?.gather_rows(subsample)?;
    let b = render_b.reshape(vec![n, sa[2]])?.gather_rows(subsample)?;
    a.sub(&b)?.square()?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::init_discriminator;

    const LN2: f64 = std::f64::consts::LN_2;

    fn zero_disc(input_dim: usize, hidden: &[usize]) -> DiscriminatorParams {
        let d = init_discriminator(input_dim, hidden, 1);
        for (w, _) in &d.layers {
            w.set_data(&vec![0.0; w.len()]);
        }
        d
    }

    fn img(c: f64, n: usize) -> Tensor {
        Tensor::from_vec(vec![n, 1, 1], vec![c; n]).unwrap()
    }

    #[test]
    fn minimax_zero_logits() {
        let v = minimax_gan_loss(&[0.0, 0.0], &[0.0]).unwrap();
        assert!((v - (-2.0 * LN2)).abs() < 1e-12);
    }

    #[test]
    fn minimax_perfect_discriminator_near_zero() {
        let v = minimax_gan_loss(&[40.0], &[-40.0]).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(minimax_gan_loss(&[], &[0.0]).is_err());
    }

    #[test]
    fn nonsat_zero_discriminator_gives_ln2_terms() {
        let d = zero_disc(4, &[3]);
        let cfg = GanLossCfg::default();
        let (ld, lg) = nonsat_losses(&[img(0.3, 4)], &[img(0.7, 4)], &d, &cfg).unwrap();
        // zero weights => zero logits and zero input-gradient
        assert!((ld.item() - 2.0 * LN2).abs() < 1e-12);
        assert!((lg.item() - LN2).abs() < 1e-12);
    }

    #[test]
    fn r1_of_linear_discriminator_is_weight_norm() {
        let d = init_discriminator(3, &[], 2);
        d.layers[0].0.set_data(&[0.5, -1.0, 2.0]);
        let cfg = GanLossCfg {
            r1_weight: 3.0,
            reg_weight: 0.0,
        };
        let (ld, _) = nonsat_losses(&[img(0.2, 3)], &[img(0.8, 3)], &d, &cfg).unwrap();
        let logits_r = 0.2 * (0.5 - 1.0 + 2.0);
        let logits_f = 0.8 * (0.5 - 1.0 + 2.0);
        let sp = |x: f64| x.exp().ln_1p();
        let want = sp(logits_f) + sp(-logits_r) + 3.0 * (0.25 + 1.0 + 4.0);
        assert!((ld.item() - want).abs() < 1e-12);
    }

    #[test]
    fn r1_weight_gradient_matches_finite_differences_with_hidden_layer() {
        let d = init_discriminator(4, &[5], 11);
        let real = img(0.6, 4);
        let r1_value = |dd: &DiscriminatorParams| {
            let (_, g) = discriminator_with_input_grad(&real, dd).unwrap();
            g.square().unwrap().sum().unwrap()
        };
        let loss = r1_value(&d);
        loss.backward().unwrap();
        let w0 = &d.layers[0].0;
        let auto = w0.grad().unwrap();
        let base = w0.data();
        let step = 1e-5;
        for k in 0..w0.len() {
            let mut plus = base.clone();
            plus[k] += step;
            w0.set_data(&plus);
            let up = r1_value(&d).item();
            let mut minus = base.clone();
            minus[k] -= step;
            w0.set_data(&minus);
            let dn = r1_value(&d).item();
            w0.set_data(&base);
            let fd = (up - dn) / (2.0 * step);
            assert!(
                (auto[k] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "k={} auto={} fd={}",
                k,
                auto[k],
                fd
            );
        }
    }

    #[test]
    fn nonsat_loss_d_ignores_generator_graph() {
        let d = zero_disc(2, &[]);
        let gen_param = Tensor::param(vec![2, 1, 1], vec![0.4, 0.6]).unwrap();
        let (ld, _) = nonsat_losses(&[img(0.1, 2)], &[gen_param.clone()], &d, &GanLossCfg::default()).unwrap();
        ld.backward().unwrap();
        assert!(gen_param.grad().is_none());
    }

    #[test]
    fn loss_g_monotone_in_fake_logit() {
        // raising D's response to fakes must lower loss_g
        let d = init_discriminator(1, &[], 3);
        d.layers[0].0.set_data(&[1.0]);
        let cfg = GanLossCfg::default();
        let lo = nonsat_losses(&[img(0.5, 1)], &[img(0.1, 1)], &d, &cfg).unwrap().1;
        let hi = nonsat_losses(&[img(0.5, 1)], &[img(0.9, 1)], &d, &cfg).unwrap().1;
        assert!(hi.item() < lo.item());
    }

    #[test]
    fn consistency_zero_for_exact_upsample() {
        let low = Tensor::from_vec(vec![2, 2, 1], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let high = low.bilinear_upsample_2x().unwrap();
        let r = consistency_reg(&low, &high).unwrap();
        assert_eq!(r.item(), 0.0);
    }

    #[test]
    fn consistency_constant_images() {
        let low = img(0.2, 4).reshape(vec![2, 2, 1]).unwrap();
        let high = Tensor::from_vec(vec![4, 4, 1], vec![0.5; 16]).unwrap();
        let r = consistency_reg(&low, &high).unwrap();
        assert!((r.item() - 0.09) < 1e-12);
    }

    #[test]
    fn consistency_matches_naive_loop() {
        let mut rng = crate::rng::rng_from(&[99]);
        let low_d = crate::rng::normal_vec(&mut rng, 4 * 4 * 2);
        let high_d = crate::rng::normal_vec(&mut rng, 8 * 8 * 2);
        let low = Tensor::from_vec(vec![4, 4, 2], low_d.clone()).unwrap();
        let high = Tensor::from_vec(vec![8, 8, 2], high_d.clone()).unwrap();
        let got = consistency_reg(&low, &high).unwrap().item();
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..2 {
                    let d = high_d[((2 * i) * 8 + 2 * j) * 2 + k] - low_d[(i * 4 + j) * 2 + k];
                    acc += d * d;
                }
            }
        }
        assert!((got - acc / 32.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_rejects_non_integer_scale() {
        let low = Tensor::from_vec(vec![3, 3, 1], vec![0.0; 9]).unwrap();
        let high = Tensor::from_vec(vec![4, 4, 1], vec![0.0; 16]).unwrap();
        assert!(consistency_reg(&low, &high).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let l = Tensor::scalar(1.0);
        let r = Tensor::scalar(0.5);
        assert!((total_gan_loss(&l, &r, 2.0).unwrap().item() - 2.0).abs() < 1e-12);
        assert!((total_gan_loss(&l, &r, 0.0).unwrap().item() - 1.0).abs() < 1e-12);
        assert!(total_gan_loss(&l, &r, -1.0).is_err());
    }

    #[test]
    fn horizontal_objective_equals_loss_g_and_skips_disc_grads() {
        let d = init_discriminator(4, &[3], 5);
        let fake = Tensor::param(vec![4, 1, 1], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let (_, lg) = nonsat_losses(&[img(0.5, 4)], &[fake.clone()], &d, &GanLossCfg::default()).unwrap();
        let h = horizontal_generator_objective(ClientKind::Horizontal, &[fake.clone()], &d).unwrap();
        assert!((h.item() - lg.item()).abs() < 1e-12);
        h.backward().unwrap();
        assert!(fake.grad().is_some());
        assert!(d.layers[0].0.grad().is_none());
        assert!(
            horizontal_generator_objective(ClientKind::Vertical, &[fake], &d).is_err()
        );
    }

    #[test]
    fn vertical_loss_identities() {
        let w = Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap();
        let a = Tensor::from_vec(vec![2, 2, 1], vec![0.3; 4]).unwrap();
        let b = Tensor::from_vec(vec![2, 2, 1], vec![1.3; 4]).unwrap();
        let sub = [0usize, 1, 2, 3];
        assert_eq!(
            vertical_generator_loss(&w, &w, &a, &a, &sub).unwrap().item(),
            0.0
        );
        let v = vertical_generator_loss(&w, &w, &a, &b, &sub).unwrap().item();
        assert!((v - 1.0).abs() < 1e-12);
        // symmetric
        let v2 = vertical_generator_loss(&w, &w, &b, &a, &sub).unwrap().item();
        assert!((v - v2).abs() < 1e-15);
    }

    #[test]
    fn vertical_loss_full_subsample_matches_naive() {
        let mut rng = crate::rng::rng_from(&[7]);
        let ad = crate::rng::normal_vec(&mut rng, 12);
        let bd = crate::rng::normal_vec(&mut rng, 12);
        let w = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let a = Tensor::from_vec(vec![2, 2, 3], ad.clone()).unwrap();
        let b = Tensor::from_vec(vec![2, 2, 3], bd.clone()).unwrap();
        let sub: Vec<usize> = (0..4).collect();
        let got = vertical_generator_loss(&w, &w, &a, &b, &sub).unwrap().item();
        let want: f64 = ad
            .iter()
            .zip(&bd)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 12.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn vertical_loss_rejects_mismatched_latents() {
        let w1 = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let w2 = Tensor::from_vec(vec![1], vec![0.6]).unwrap();
        let a = Tensor::from_vec(vec![1, 1, 1], vec![0.2]).unwrap();
        assert!(vertical_generator_loss(&w1, &w2, &a, &a, &[0]).is_err());
    }
}
