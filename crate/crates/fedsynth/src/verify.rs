//! Gradient-check battery over every differentiable op and every training
//! loss, shared by the `grad-check` subcommand and the acceptance suite.

use crate::error::Result;
use crate::losses::{
    consistency_reg, horizontal_generator_objective, nonsat_losses, vertical_generator_loss,
    ClientKind, GanLossCfg,
};
use crate::params::LayerTag;
use crate::renderer::{init_discriminator, CameraPose, DiscriminatorParams, GeneratorArch};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::{grad_check, Tensor};
use crate::transfer::{
    geometry_loss, image_quality_loss, internal_distribution_loss, sliced_wasserstein,
    transfer_total, MaskPair, ProjectionSet, TransferCfg,
};

#[derive(Debug, Clone, serde::Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BatteryReport {
    pub tolerance: f64,
    pub seeds: usize,
    pub cases: Vec<CaseResult>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_input(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    (shape.to_vec(), normal_vec(rng, n))
}

/// Positive values, bounded away from zero, for log and division.
fn rand_positive(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (s, v) = rand_input(rng, shape);
    (s, v.into_iter().map(|x| 0.2 + x.abs()).collect())
}

/// Values in (0.05, 0.95) for image-domain losses.
fn rand_unit(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (s, v) = rand_input(rng, shape);
    (
        s,
        v.into_iter()
            .map(|x| 0.5 + 0.45 * (x.sin()))
            .collect(),
    )
}

fn disc_from(tensors: &[Tensor], widths: &[usize], input_dim: usize) -> DiscriminatorParams {
    let mut layers = Vec::new();
    for i in 0..widths.len() + 1 {
        layers.push((tensors[2 * i].clone(), tensors[2 * i + 1].clone()));
    }
    DiscriminatorParams {
        layers,
        lrelu_alpha: 0.2,
        input_dim,
    }
}

type Case = (
    &'static str,
    Box<dyn Fn(&[Tensor]) -> Result<Tensor>>,
    Vec<(Vec<usize>, Vec<f64>)>,
);

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = rng_from(&[seed, 0xba77]);
    let r = &mut rng;
    vec![
        (
            "matmul",
            Box::new(|xs: &[Tensor]| xs[0].matmul(&xs[1])?.sum()),
            vec![rand_input(r, &[2, 3]), rand_input(r, &[3, 2])],
        ),
        (
            "add_mul",
            Box::new(|xs| xs[0].add(&xs[1])?.mul(&xs[0])?.sum()),
            vec![rand_input(r, &[2, 2]), rand_input(r, &[2, 2])],
        ),
        (
            "div",
            Box::new(|xs| xs[0].div(&xs[1])?.sum()),
            vec![rand_input(r, &[3]), rand_positive(r, &[3])],
        ),
        (
            "sin_cos",
            Box::new(|xs| xs[0].sin()?.mul(&xs[0].cos()?)?.sum()),
            vec![rand_input(r, &[4])],
        ),
        (
            "exp_log",
            Box::new(|xs| xs[0].exp()?.add(&xs[1].log()?)?.sum()),
            vec![rand_input(r, &[3]), rand_positive(r, &[3])],
        ),
        (
            "softplus_sigmoid",
            Box::new(|xs| xs[0].softplus()?.mul(&xs[0].sigmoid()?)?.sum()),
            vec![rand_input(r, &[4])],
        ),
        (
            "leaky_relu",
            Box::new(|xs| xs[0].leaky_relu(0.2)?.square()?.sum()),
            // keep inputs off the kink
            vec![{
                let (s, v) = rand_input(r, &[5]);
                (s, v.into_iter().map(|x| if x.abs() < 0.05 { 0.1 } else { x }).collect())
            }],
        ),
        (
            "mean_sum_rows",
            Box::new(|xs| xs[0].sum_rows()?.mean()),
            vec![rand_input(r, &[3, 2])],
        ),
        (
            "concat_reshape",
            Box::new(|xs| {
                Tensor::concat(&[xs[0].reshape(vec![4])?, xs[1].reshape(vec![4])?])?
                    .square()?
                    .mean()
            }),
            vec![rand_input(r, &[2, 2]), rand_input(r, &[4, 1])],
        ),
        (
            "add_rows_mul_cols",
            Box::new(|xs| xs[0].add_rows(&xs[1])?.mul_cols(&xs[2])?.sum()),
            vec![rand_input(r, &[3, 2]), rand_input(r, &[2]), rand_input(r, &[3])],
        ),
        (
            "gather_segment_cumsum",
            Box::new(|xs| {
                let g = xs[0].gather_rows(&[0, 2, 1, 2])?;
                g.cumsum_exclusive_rows()?.segment_sum_rows(2)?.sum()
            }),
            vec![rand_input(r, &[3, 2])],
        ),
        (
            "sort_1d",
            Box::new(|xs| xs[0].sort_1d()?.mul(&Tensor::from_vec(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0])?)?.sum()),
            vec![rand_input(r, &[5])],
        ),
        (
            "project_1x1",
            Box::new(|xs| xs[0].project_1x1(&xs[1])?.sum()),
            vec![rand_input(r, &[2, 2, 3]), rand_input(r, &[3])],
        ),
        (
            "bilinear_upsample_2x",
            Box::new(|xs| xs[0].bilinear_upsample_2x()?.square()?.sum()),
            vec![rand_input(r, &[2, 2, 2])],
        ),
        (
            "downsample_window_mean",
            Box::new(|xs| xs[0].downsample_2x_mean()?.window_mean_3x3()?.sum()),
            vec![rand_input(r, &[8, 8, 1])],
        ),
        (
            "abs_neg",
            Box::new(|xs| xs[0].abs()?.add(&xs[0].neg()?)?.sum()),
            vec![rand_positive(r, &[4])],
        ),
    ]
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = rng_from(&[seed, 0x1055]);
    let r = &mut rng;
    let arch = GeneratorArch::tiny();
    let res = arch.final_res();
    let img_shape = [res, res, 3];
    let input_dim = res * res * 3;
    let widths = [3usize];
    let disc = init_discriminator(input_dim, &widths, seed ^ 0xd1);
    let gen = crate::renderer::init_generator(&arch, seed ^ 0x6e);
    let pose = CameraPose::orbit(0.1, -0.2, arch.cam_radius).unwrap();
    let proj = ProjectionSet::new(2, seed ^ 0x51).unwrap();
    let cfg = GanLossCfg::default();
    let tcfg = TransferCfg::default();

    let mut cases: Vec<Case> = Vec::new();

    // discriminator + generator non-saturating losses wrt D weights,
    // including the R1 penalty path
    {
        let real = Tensor::from_vec(img_shape.to_vec(), rand_unit(r, &img_shape).1).unwrap();
        let fake = Tensor::from_vec(img_shape.to_vec(), rand_unit(r, &img_shape).1).unwrap();
        let shapes: Vec<(Vec<usize>, Vec<f64>)> = disc
            .layers
            .iter()
            .flat_map(|(w, b)| [(w.shape(), w.data()), (b.shape(), b.data())])
            .collect();
        let (real2, fake2, cfg2) = (real.clone(), fake.clone(), cfg);
        cases.push((
            "nonsat_loss_d_wrt_disc",
            Box::new(move |xs| {
                let d = disc_from(xs, &widths, input_dim);
                let (ld, _) = nonsat_losses(
                    std::slice::from_ref(&real2),
                    std::slice::from_ref(&fake2),
                    &d,
                    &cfg2,
                )?;
                Ok(ld)
            }),
            shapes.clone(),
        ));
        // loss_g differentiates through the fake image (D detached inside)
        let (real3, cfg3) = (real, cfg);
        let disc3 = init_discriminator(input_dim, &widths, seed ^ 0xd3);
        let _ = fake;
        cases.push((
            "nonsat_loss_g_wrt_fake",
            Box::new(move |xs| {
                let (_, lg) = nonsat_losses(
                    std::slice::from_ref(&real3),
                    std::slice::from_ref(&xs[0]),
                    &disc3,
                    &cfg3,
                )?;
                Ok(lg)
            }),
            vec![rand_unit(r, &img_shape)],
        ));
    }

    // generator objective wrt the fake image (D detached inside)
    {
        let disc2 = init_discriminator(input_dim, &widths, seed ^ 0xd2);
        cases.push((
            "horizontal_objective_wrt_fake",
            Box::new(move |xs| {
                horizontal_generator_objective(
                    ClientKind::Horizontal,
                    std::slice::from_ref(&xs[0]),
                    &disc2,
                )
            }),
            vec![rand_unit(r, &img_shape)],
        ));
    }

    // consistency regularizer wrt both resolutions
    cases.push((
        "consistency_reg",
        Box::new(|xs| consistency_reg(&xs[0], &xs[1])),
        vec![rand_unit(r, &[2, 2, 3]), rand_unit(r, &[4, 4, 3])],
    ));

    // vertical cross-render loss wrt both renders
    {
        let z = Tensor::from_vec(vec![3], normal_vec(r, 3)).unwrap();
        cases.push((
            "vertical_loss",
            Box::new(move |xs| vertical_generator_loss(&z, &z, &xs[0], &xs[1], &[0, 3, 5])),
            vec![rand_unit(r, &[2, 3, 3]), rand_unit(r, &[2, 3, 3])],
        ));
    }

    // sliced Wasserstein wrt the first distribution
    {
        let proj2 = proj.clone();
        let v_const = Tensor::from_vec(vec![4, 2], normal_vec(r, 8)).unwrap();
        cases.push((
            "sliced_wasserstein",
            Box::new(move |xs| sliced_wasserstein(&xs[0], &v_const, &proj2)),
            vec![rand_input(r, &[4, 2])],
        ));
    }

    // internal-distribution, geometry, and combined transfer losses wrt the
    // adapting latent, through the full generator
    {
        let (gen2, pose2, proj2, arch2) = (gen.deep_clone(false), pose.clone(), proj.clone(), arch);
        let w_s = Tensor::from_vec(vec![arch.w_dim], normal_vec(r, arch.w_dim)).unwrap();
        let psi = vec!["render.base".to_string()];
        cases.push((
            "internal_distribution_wrt_latent",
            Box::new(move |xs| {
                internal_distribution_loss(
                    &gen2,
                    std::slice::from_ref(&xs[0]),
                    std::slice::from_ref(&w_s),
                    &pose2,
                    &psi,
                    &proj2,
                    &arch2,
                )
            }),
            vec![rand_input(r, &[arch.w_dim])],
        ));

        let (gen3, pose3, proj3, arch3) = (gen.deep_clone(false), pose.clone(), proj.clone(), arch);
        let w_s3 = Tensor::from_vec(vec![arch.w_dim], normal_vec(r, arch.w_dim)).unwrap();
        let psi_hat = vec!["geometry.alpha".to_string()];
        let n_rays = arch.base_res * arch.base_res;
        let ones = Tensor::from_vec(vec![n_rays], vec![1.0; n_rays]).unwrap();
        let mask = MaskPair::new(ones.clone(), ones).unwrap();
        cases.push((
            "geometry_loss_wrt_latent",
            Box::new(move |xs| {
                geometry_loss(
                    &gen3,
                    std::slice::from_ref(&xs[0]),
                    std::slice::from_ref(&w_s3),
                    &pose3,
                    &psi_hat,
                    std::slice::from_ref(&mask),
                    &proj3,
                    &arch3,
                )
            }),
            vec![rand_input(r, &[arch.w_dim])],
        ));
    }

    // image-quality loss (SSIM + perceptual + pixel) wrt the target image
    {
        let src = Tensor::from_vec(vec![7, 7, 3], rand_unit(r, &[7, 7, 3]).1).unwrap();
        cases.push((
            "image_quality_loss",
            Box::new(move |xs| image_quality_loss(&xs[0], &src)),
            vec![rand_unit(r, &[7, 7, 3])],
        ));
    }

    // combined transfer objective wrt three scalar component losses
    {
        let tcfg2 = tcfg;
        cases.push((
            "transfer_total",
            Box::new(move |xs| transfer_total(&xs[0], &xs[1], &xs[2], &tcfg2)),
            vec![rand_input(r, &[1]), rand_input(r, &[1]), rand_input(r, &[1])],
        ));
    }

    let _ = LayerTag::ALL; // tags exercised indirectly via generator paths
    cases
}

/// Run the full battery over `n_seeds` seeds derived from `seed0`. Every op
/// and every loss is finite-difference checked with the given step.
pub fn gradient_battery(seed0: u64, n_seeds: usize, step: f64, tolerance: f64) -> Result<BatteryReport> {
    let mut cases_out: Vec<CaseResult> = Vec::new();
    let mut worst: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    for k in 0..n_seeds {
        let seed = crate::rng::derive(&[seed0, 0x6c, k as u64]);
        let mut all = op_cases(seed);
        // the heavier loss cases run on a third of the seeds
        if k % 3 == 0 {
            all.extend(loss_cases(seed));
        }
        for (name, f, inputs) in all {
            let report = grad_check(|xs| f(xs), &inputs, step, tolerance)?;
            let e = worst.entry(name.to_string()).or_insert(0.0);
            *e = e.max(report.max_rel_err);
        }
    }
    let mut max_rel_err: f64 = 0.0;
    for (name, err) in worst {
        max_rel_err = max_rel_err.max(err);
        cases_out.push(CaseResult {
            name,
            max_rel_err: err,
            passed: err < tolerance,
        });
    }
    Ok(BatteryReport {
        tolerance,
        seeds: n_seeds,
        max_rel_err,
        passed: max_rel_err < tolerance,
        cases: cases_out,
    })
}
