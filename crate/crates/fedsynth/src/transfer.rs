//! Domain-transfer objectives: sliced Wasserstein distance over random unit
//! projections, the internal-distribution and masked geometry losses, the
//! SSIM/perceptual/MSE image-quality loss, and the layer freeze schedule.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::params::{LayerTag, TaggedParamSet};
use crate::renderer::{generator_forward_from_w, CameraPose, GeneratorArch};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;

/// Random unit projection directions approximating the sphere integral in
/// the sliced Wasserstein distance. Directions depend only on (seed, C) and
/// are regenerated on demand, never trained.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSet {
    pub n_proj: usize,
    pub seed: u64,
}

impl ProjectionSet {
    pub fn new(n_proj: usize, seed: u64) -> Result<Self> {
        if n_proj == 0 {
            return Err(Error::invalid("projection_set", "n_proj must be positive"));
        }
        Ok(ProjectionSet { n_proj, seed })
    }

    /// Unit directions for channel count `c`, one Vec per projection.
    pub fn directions(&self, c: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_from(&[self.seed, 0x510d, c as u64]);
        (0..self.n_proj)
            .map(|_| {
                loop {
                    let v = normal_vec(&mut rng, c);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        return v.iter().map(|x| x / norm).collect();
                    }
                }
            })
            .collect()
    }
}

fn flatten_pixels(t: &Tensor, op: &'static str) -> Result<(Tensor, usize, usize)> {
    let s = t.shape();
    if s.is_empty() {
        return Err(Error::invalid(op, "scalar input"));
    }
    let c = s[s.len() - 1];
    let n = t.len() / c;
    Ok((t.reshape(vec![n, c])?, n, c))
}

/// Sliced Wasserstein distance between two feature maps of identical shape:
/// each pixel's channel vector is projected to a scalar per direction, both
/// scalar lists are sorted, and the mean absolute difference is averaged
/// over directions.
pub fn sliced_wasserstein(u: &Tensor, v: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    if u.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "sliced_wasserstein",
            lhs: u.shape(),
            rhs: v.shape(),
        });
    }
    let (fu, n, c) = flatten_pixels(u, "sliced_wasserstein")?;
    let (fv, _, _) = flatten_pixels(v, "sliced_wasserstein")?;
    let mut terms = Vec::with_capacity(proj.n_proj);
    for delta in proj.directions(c) {
        let d = Tensor::from_vec(vec![c, 1], delta)?;
        let pu = fu.matmul(&d)?.reshape(vec![n])?.sort_1d()?;
        let pv = fv.matmul(&d)?.reshape(vec![n])?.sort_1d()?;
        terms.push(pu.sub(&pv)?.abs()?.mean()?);
    }
    let flat: Result<Vec<Tensor>> = terms.iter().map(|t| t.reshape(vec![1])).collect();
    Tensor::concat(&flat?)?.mean()
}

/// Which named activation maps feed the texture (psi) and geometry
/// (psi_hat) distribution losses.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LayerSelection {
    pub psi: Vec<String>,
    pub psi_hat: Vec<String>,
}

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection {
            psi: vec!["render.base".to_string(), "render.up1".to_string()],
            psi_hat: vec!["geometry.alpha".to_string()],
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TransferCfg {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Latent batch size per step.
    pub n_s: usize,
    /// Round at which geometry/viewpoint layers unfreeze.
    pub freeze_round: usize,
}

impl Default for TransferCfg {
    fn default() -> Self {
        TransferCfg {
            lambda1: 5.0,
            lambda2: 0.2,
            lambda3: 1.0,
            n_s: 4,
            freeze_round: 20,
        }
    }
}

impl TransferCfg {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::invalid("transfer_cfg", "lambda weights must be >= 0"));
        }
        if self.n_s == 0 {
            return Err(Error::invalid("transfer_cfg", "n_s must be positive"));
        }
        Ok(())
    }
}

/// Per-branch opacity masks gating one geometry-layer activation.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub target: Tensor,
    pub source: Tensor,
}

impl MaskPair {
    pub fn new(target: Tensor, source: Tensor) -> Result<Self> {
        for (label, m) in [("target", &target), ("source", &source)] {
            if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(
                    "mask_pair",
                    format!("{} mask values must lie in [0, 1]", label),
                ));
            }
        }
        Ok(MaskPair { target, source })
    }
}

fn activation(
    gen: &TaggedParamSet,
    w: &Tensor,
    pose: &CameraPose,
    name: &str,
    arch: &GeneratorArch,
) -> Result<Tensor> {
    let out = generator_forward_from_w(w, pose, gen, arch)?;
    out.activations
        .get(name)
        .cloned()
        .ok_or_else(|| Error::UnknownName(name.to_string()))
}

/// L_s: mean sliced Wasserstein distance between the generator's activation
/// maps at target latents and at source latents, over the psi layers.
pub fn internal_distribution_loss(
    gen: &TaggedParamSet,
    w_target: &[Tensor],
    w_source: &[Tensor],
    pose: &CameraPose,
    psi: &[String],
    proj: &ProjectionSet,
    arch: &GeneratorArch,
) -> Result<Tensor> {
    if psi.is_empty() {
        return Err(Error::invalid("internal_distribution_loss", "empty psi"));
    }
    if w_target.len() != w_source.len() || w_target.is_empty() {
        return Err(Error::invalid(
            "internal_distribution_loss",
            "latent batches must be nonempty and equal-sized",
        ));
    }
    let mut terms = Vec::new();
    for (wt, ws) in w_target.iter().zip(w_source) {
        for name in psi {
            let at = activation(gen, wt, pose, name, arch)?;
            let as_ = activation(gen, ws, pose, name, arch)?;
            terms.push(sliced_wasserstein(&at, &as_, proj)?.reshape(vec![1])?);
        }
    }
    Tensor::concat(&terms)?.mean()
}

/// L_g: the masked variant of the internal-distribution loss over the
/// geometry layers. One mask pair per psi_hat entry; masks scale whole
/// pixels (rows) of the activation map.
pub fn geometry_loss(
    gen: &TaggedParamSet,
    w_target: &[Tensor],
    w_source: &[Tensor],
    pose: &CameraPose,
    psi_hat: &[String],
    masks: &[MaskPair],
    proj: &ProjectionSet,
    arch: &GeneratorArch,
) -> Result<Tensor> {
    if psi_hat.is_empty() {
        return Err(Error::invalid("geometry_loss", "empty psi_hat"));
    }
    if masks.len() != psi_hat.len() {
        return Err(Error::invalid(
            "geometry_loss",
            format!("{} masks for {} layers", masks.len(), psi_hat.len()),
        ));
    }
    if w_target.len() != w_source.len() || w_target.is_empty() {
        return Err(Error::invalid(
            "geometry_loss",
            "latent batches must be nonempty and equal-sized",
        ));
    }
    let mut terms = Vec::new();
    for (wt, ws) in w_target.iter().zip(w_source) {
        for (name, mask) in psi_hat.iter().zip(masks) {
            let at = activation(gen, wt, pose, name, arch)?;
            let as_ = activation(gen, ws, pose, name, arch)?;
            if mask.target.len() != at.shape()[0] || mask.source.len() != as_.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "geometry_loss",
                    lhs: vec![mask.target.len()],
                    rhs: at.shape(),
                });
            }
            let mt = at.mul_cols(&mask.target)?;
            let ms = as_.mul_cols(&mask.source)?;
            terms.push(sliced_wasserstein(&mt, &ms, proj)?.reshape(vec![1])?);
        }
    }
    Tensor::concat(&terms)?.mean()
}

const SSIM_C1: f64 = 1e-4; // (0.01)^2 on unit range
const SSIM_C2: f64 = 9e-4; // (0.03)^2

/// Mean SSIM over a 3x3 uniform window, valid padding.
pub fn ssim_3x3(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mu_a = a.window_mean_3x3()?;
    let mu_b = b.window_mean_3x3()?;
    let e_aa = a.square()?.window_mean_3x3()?;
    let e_bb = b.square()?.window_mean_3x3()?;
    let e_ab = a.mul(b)?.window_mean_3x3()?;
    let var_a = e_aa.sub(&mu_a.square()?)?;
    let var_b = e_bb.sub(&mu_b.square()?)?;
    let cov = e_ab.sub(&mu_a.mul(&mu_b)?)?;
    let num = mu_a
        .mul(&mu_b)?
        .mul_scalar(2.0)?
        .add_scalar(SSIM_C1)?
        .mul(&cov.mul_scalar(2.0)?.add_scalar(SSIM_C2)?)?;
    let den = mu_a
        .square()?
        .add(&mu_b.square()?)?
        .add_scalar(SSIM_C1)?
        .mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2)?)?;
    num.div(&den)?.mean()
}

fn perceptual_kernel(c_in: usize, c_out: usize, layer: u64) -> Vec<f64> {
    let mut rng = rng_from(&[0x9e7c, layer]);
    let scale = (1.0 / (c_in as f64 * 9.0)).sqrt();
    normal_vec(&mut rng, c_out * c_in * 9)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

const PERC_WIDTH: usize = 6;

fn perceptual_features(x: &Tensor) -> Result<Tensor> {
    let mut h = x.conv3x3_const(&perceptual_kernel(x.shape()[2], PERC_WIDTH, 0), x.shape()[2], PERC_WIDTH)?;
    for layer in 1..3u64 {
        h = h
            .leaky_relu(0.2)?
            .conv3x3_const(&perceptual_kernel(PERC_WIDTH, PERC_WIDTH, layer), PERC_WIDTH, PERC_WIDTH)?;
    }
    Ok(h)
}

/// l2 term of the image-quality loss: mean squared distance between
/// activations of a fixed random-weight convolutional stack.
pub fn perceptual_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    perceptual_features(a)?.sub(&perceptual_features(b)?)?.square()?.mean()
}

/// L_i = -SSIM + perceptual distance + MSE, images in [0, 1].
pub fn image_quality_loss(target: &Tensor, source: &Tensor) -> Result<Tensor> {
    let (st, ss) = (target.shape(), source.shape());
    if st != ss || st.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "image_quality_loss",
            lhs: st,
            rhs: ss,
        });
    }
    if st[0] < 7 || st[1] < 7 {
        return Err(Error::invalid(
            "image_quality_loss",
            format!("image {:?} too small for the 3-layer feature stack", st),
        ));
    }
    for (label, img) in [("target", target), ("source", source)] {
        if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(
                "image_quality_loss",
                format!("{} image values must lie in [0, 1]", label),
            ));
        }
    }
    let l1 = ssim_3x3(target, source)?.neg()?;
    let l2 = perceptual_distance(target, source)?;
    let l3 = target.sub(source)?.square()?.mean()?;
    l1.add(&l2)?.add(&l3)
}

/// L_tr = λ1 L_s + λ2 L_g + λ3 L_i.
pub fn transfer_total(ls: &Tensor, lg: &Tensor, li: &Tensor, cfg: &TransferCfg) -> Result<Tensor> {
    cfg.validate()?;
    ls.mul_scalar(cfg.lambda1)?
        .add(&lg.mul_scalar(cfg.lambda2)?)?
        .add(&li.mul_scalar(cfg.lambda3)?)
}

/// Trainable layer tags in transfer round `round` (1-based): geometry and
/// viewpoint layers stay frozen before `freeze_round`, everything trains
/// from then on.
pub fn freeze_plan(round: usize, freeze_round: usize) -> BTreeSet<LayerTag> {
    let mut tags: BTreeSet<LayerTag> = LayerTag::ALL.into_iter().collect();
    if round < freeze_round {
        tags.remove(&LayerTag::Geometry);
        tags.remove(&LayerTag::Viewpoint);
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::init_generator;
    use crate::rng::rng_from;
    use rand::seq::SliceRandom;

    fn map(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rng_from(&[seed]);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, normal_vec(&mut rng, n)).unwrap()
    }

    #[test]
    fn projections_are_unit_norm() {
        let p = ProjectionSet::new(16, 3).unwrap();
        for d in p.directions(5) {
            let n: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(ProjectionSet::new(0, 3).is_err());
    }

    #[test]
    fn swd_identical_maps_is_zero() {
        let u = map(vec![4, 4, 3], 1);
        let p = ProjectionSet::new(8, 2).unwrap();
        assert_eq!(sliced_wasserstein(&u, &u, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn swd_single_channel_matches_sort_oracle() {
        let u = map(vec![5, 3, 1], 4);
        let v = map(vec![5, 3, 1], 5);
        let p = ProjectionSet::new(1, 6).unwrap();
        let got = sliced_wasserstein(&u, &v, &p).unwrap().item();
        let sign = p.directions(1)[0][0]; // ±1
        let mut su: Vec<f64> = u.data().iter().map(|x| x * sign).collect();
        let mut sv: Vec<f64> = v.data().iter().map(|x| x * sign).collect();
        su.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: f64 = su.iter().zip(&sv).map(|(a, b)| (a - b).abs()).sum::<f64>() / 15.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn swd_invariant_to_pixel_permutations() {
        let u = map(vec![4, 4, 2], 7);
        let v = map(vec![4, 4, 2], 8);
        let p = ProjectionSet::new(8, 9).unwrap();
        let base = sliced_wasserstein(&u, &v, &p).unwrap().item();
        let mut rng = rng_from(&[11]);
        for _ in 0..20 {
            let mut order: Vec<usize> = (0..16).collect();
            order.shuffle(&mut rng);
            let ud = u.data();
            let mut perm = vec![0.0; 32];
            for (dst, &src) in order.iter().enumerate() {
                perm[dst * 2] = ud[src * 2];
                perm[dst * 2 + 1] = ud[src * 2 + 1];
            }
            let up = Tensor::from_vec(vec![4, 4, 2], perm).unwrap();
            let got = sliced_wasserstein(&up, &v, &p).unwrap().item();
            assert!((got - base).abs() < 1e-12);
        }
    }

    #[test]
    fn swd_symmetric_and_nonnegative() {
        let p = ProjectionSet::new(8, 1).unwrap();
        for seed in 0..5 {
            let u = map(vec![3, 3, 2], 100 + seed);
            let v = map(vec![3, 3, 2], 200 + seed);
            let uv = sliced_wasserstein(&u, &v, &p).unwrap().item();
            let vu = sliced_wasserstein(&v, &u, &p).unwrap().item();
            assert!(uv >= 0.0);
            assert!((uv - vu).abs() < 1e-12);
        }
    }

    fn tiny_gen() -> (GeneratorArch, TaggedParamSet, CameraPose) {
        let arch = GeneratorArch::tiny();
        let params = init_generator(&arch, 17);
        let pose = CameraPose::orbit(0.1, 0.2, arch.cam_radius).unwrap();
        (arch, params, pose)
    }

    fn w_batch(arch: &GeneratorArch, seed: u64, n: usize) -> Vec<Tensor> {
        let mut rng = rng_from(&[seed]);
        (0..n)
            .map(|_| Tensor::from_vec(vec![1, arch.w_dim], normal_vec(&mut rng, arch.w_dim)).unwrap())
            .collect()
    }

    #[test]
    fn internal_loss_zero_for_identical_latents() {
        let (arch, params, pose) = tiny_gen();
        let w = w_batch(&arch, 3, 2);
        let p = ProjectionSet::new(4, 5).unwrap();
        let psi = LayerSelection::default().psi;
        let l = internal_distribution_loss(&params, &w, &w, &pose, &psi, &p, &arch).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn internal_loss_single_term_reduces_to_swd() {
        let (arch, params, pose) = tiny_gen();
        let wt = w_batch(&arch, 3, 1);
        let ws = w_batch(&arch, 4, 1);
        let p = ProjectionSet::new(4, 5).unwrap();
        let psi = vec!["render.base".to_string()];
        let l = internal_distribution_loss(&params, &wt, &ws, &pose, &psi, &p, &arch)
            .unwrap()
            .item();
        let at = activation(&params, &wt[0], &pose, "render.base", &arch).unwrap();
        let as_ = activation(&params, &ws[0], &pose, "render.base", &arch).unwrap();
        let direct = sliced_wasserstein(&at, &as_, &p).unwrap().item();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn internal_loss_matches_naive_double_loop() {
        let (arch, params, pose) = tiny_gen();
        let wt = w_batch(&arch, 6, 2);
        let ws = w_batch(&arch, 7, 2);
        let p = ProjectionSet::new(3, 8).unwrap();
        let psi = LayerSelection::default().psi;
        let got = internal_distribution_loss(&params, &wt, &ws, &pose, &psi, &p, &arch)
            .unwrap()
            .item();
        let mut acc = 0.0;
        for i in 0..2 {
            for name in &psi {
                let at = activation(&params, &wt[i], &pose, name, &arch).unwrap();
                let as_ = activation(&params, &ws[i], &pose, name, &arch).unwrap();
                acc += sliced_wasserstein(&at, &as_, &p).unwrap().item();
            }
        }
        assert!((got - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn internal_loss_rejects_unknown_layer() {
        let (arch, params, pose) = tiny_gen();
        let w = w_batch(&arch, 3, 1);
        let p = ProjectionSet::new(2, 5).unwrap();
        let psi = vec!["render.bogus".to_string()];
        match internal_distribution_loss(&params, &w, &w, &pose, &psi, &p, &arch) {
            Err(Error::UnknownName(n)) => assert_eq!(n, "render.bogus"),
            other => panic!("expected UnknownName, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn geometry_loss_with_ones_masks_equals_internal_loss() {
        let (arch, params, pose) = tiny_gen();
        let wt = w_batch(&arch, 9, 1);
        let ws = w_batch(&arch, 10, 1);
        let p = ProjectionSet::new(4, 11).unwrap();
        let psi_hat = vec!["geometry.alpha".to_string()];
        let n = arch.base_res * arch.base_res;
        let ones = Tensor::from_vec(vec![n], vec![1.0; n]).unwrap();
        let masks = vec![MaskPair::new(ones.clone(), ones).unwrap()];
        let lg = geometry_loss(&params, &wt, &ws, &pose, &psi_hat, &masks, &p, &arch)
            .unwrap()
            .item();
        let ls = internal_distribution_loss(&params, &wt, &ws, &pose, &psi_hat, &p, &arch)
            .unwrap()
            .item();
        assert!((lg - ls).abs() < 1e-12);
    }

    #[test]
    fn geometry_loss_zero_masks_is_zero() {
        let (arch, params, pose) = tiny_gen();
        let wt = w_batch(&arch, 9, 1);
        let ws = w_batch(&arch, 10, 1);
        let p = ProjectionSet::new(4, 11).unwrap();
        let psi_hat = vec!["geometry.alpha".to_string()];
        let n = arch.base_res * arch.base_res;
        let zeros = Tensor::from_vec(vec![n], vec![0.0; n]).unwrap();
        let masks = vec![MaskPair::new(zeros.clone(), zeros).unwrap()];
        let lg = geometry_loss(&params, &wt, &ws, &pose, &psi_hat, &masks, &p, &arch).unwrap();
        assert_eq!(lg.item(), 0.0);
    }

    #[test]
    fn geometry_loss_half_masks_match_naive_oracle() {
        let (arch, params, pose) = tiny_gen();
        let wt = w_batch(&arch, 12, 1);
        let ws = w_batch(&arch, 13, 1);
        let p = ProjectionSet::new(3, 14).unwrap();
        let psi_hat = vec!["geometry.alpha".to_string()];
        let n = arch.base_res * arch.base_res;
        let half: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(vec![n], half.clone()).unwrap();
        let masks = vec![MaskPair::new(m.clone(), m).unwrap()];
        let got = geometry_loss(&params, &wt, &ws, &pose, &psi_hat, &masks, &p, &arch)
            .unwrap()
            .item();
        let at = activation(&params, &wt[0], &pose, "geometry.alpha", &arch).unwrap();
        let as_ = activation(&params, &ws[0], &pose, "geometry.alpha", &arch).unwrap();
        let masked = |t: &Tensor| {
            let d = t.data();
            let v: Vec<f64> = d.iter().enumerate().map(|(i, x)| x * half[i]).collect();
            Tensor::from_vec(t.shape(), v).unwrap()
        };
        let want = sliced_wasserstein(&masked(&at), &masked(&as_), &p).unwrap().item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mask_range_validated() {
        let good = Tensor::from_vec(vec![2], vec![0.5, 1.0]).unwrap();
        let bad = Tensor::from_vec(vec![2], vec![0.5, 1.5]).unwrap();
        assert!(MaskPair::new(good.clone(), good.clone()).is_ok());
        assert!(MaskPair::new(good, bad).is_err());
    }

    #[test]
    fn image_quality_identical_is_minus_one() {
        let a = map(vec![8, 8, 3], 20)
            .sigmoid()
            .unwrap();
        let l = image_quality_loss(&a, &a).unwrap().item();
        assert!((l + 1.0).abs() < 1e-9);
        let c = Tensor::from_vec(vec![8, 8, 3], vec![0.4; 192]).unwrap();
        let lc = image_quality_loss(&c, &c).unwrap().item();
        assert!((lc + 1.0).abs() < 1e-9);
    }

    #[test]
    fn image_quality_mse_term_matches_naive_loop() {
        let a = map(vec![8, 8, 3], 21).sigmoid().unwrap();
        let b = map(vec![8, 8, 3], 22).sigmoid().unwrap();
        let total = image_quality_loss(&a, &b).unwrap().item();
        let ssim = ssim_3x3(&a, &b).unwrap().item();
        let perc = perceptual_distance(&a, &b).unwrap().item();
        let mse = total + ssim - perc;
        let naive: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 192.0;
        assert!((mse - naive).abs() < 1e-12);
    }

    #[test]
    fn image_quality_rejects_out_of_range() {
        let a = Tensor::from_vec(vec![8, 8, 3], vec![0.4; 192]).unwrap();
        let b = Tensor::from_vec(vec![8, 8, 3], vec![1.4; 192]).unwrap();
        assert!(image_quality_loss(&a, &b).is_err());
    }

    #[test]
    fn transfer_total_default_weights() {
        let one = Tensor::scalar(1.0);
        let cfg = TransferCfg::default();
        let v = transfer_total(&one, &one, &one, &cfg).unwrap().item();
        assert!((v - 6.2).abs() < 1e-12);
        let zero = Tensor::scalar(0.0);
        assert_eq!(transfer_total(&zero, &zero, &zero, &cfg).unwrap().item(), 0.0);
        let no_geo = TransferCfg {
            lambda2: 0.0,
            ..cfg
        };
        let v2 = transfer_total(&one, &one, &one, &no_geo).unwrap().item();
        assert!((v2 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn freeze_plan_schedule() {
        let early = freeze_plan(1, 10);
        assert!(!early.contains(&LayerTag::Geometry));
        assert!(!early.contains(&LayerTag::Viewpoint));
        assert!(early.contains(&LayerTag::Render));
        let at = freeze_plan(10, 10);
        assert_eq!(at.len(), LayerTag::ALL.len());
    }
}
