//! The 3D-aware generator (mapping net, pose conditioning, NeRF-lite trunk,
//! transmittance compositing, progressive upsampling) and a small MLP
//! discriminator with an exact input-gradient expression for R1.

use std::collections::BTreeMap;

use super::{cast_ray, positional_encode, CameraPose, EncodingCfg, Ray};
use crate::error::{Error, Result};
use crate::params::{LayerTag, TaggedParamSet};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeneratorArch {
    pub z_dim: usize,
    pub w_dim: usize,
    /// Fourier levels for point coordinates.
    pub enc_levels: usize,
    /// Fourier levels for pose / ray-direction angles.
    pub dir_enc_levels: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    /// Width of the feature fed to the color MLP.
    pub feat_dim: usize,
    pub color_hidden: usize,
    /// Feature channels C of the rendered map.
    pub channels: usize,
    /// Base render resolution (feature map is base_res x base_res).
    pub base_res: usize,
    /// Bilinear 2x + 1x1 conv stages after the base render.
    pub upsample_stages: usize,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub cam_radius: f64,
    pub fov_rad: f64,
    pub lrelu_alpha: f64,
    /// Coordinates are divided by this before encoding.
    pub scene_scale: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch {
            z_dim: 8,
            w_dim: 16,
            enc_levels: 10,
            dir_enc_levels: 4,
            trunk_layers: 4,
            trunk_width: 64,
            feat_dim: 16,
            color_hidden: 32,
            channels: 16,
            base_res: 8,
            upsample_stages: 1,
            n_samples: 12,
            near: 0.5,
            far: 2.5,
            cam_radius: 1.5,
            fov_rad: 0.9,
            lrelu_alpha: 0.2,
            scene_scale: 2.0,
        }
    }
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0
            || self.w_dim == 0
            || self.enc_levels == 0
            || self.trunk_layers == 0
            || self.trunk_width == 0
            || self.channels == 0
            || self.base_res == 0
            || self.n_samples == 0
        {
            return Err(Error::invalid("arch", "dimension fields must be positive"));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid("arch", "need 0 < near < far"));
        }
        if !(self.fov_rad > 0.0 && self.fov_rad < std::f64::consts::PI) {
            return Err(Error::invalid("arch", "fov_rad must be in (0, pi)"));
        }
        if self.lrelu_alpha < 0.0 || self.lrelu_alpha >= 1.0 {
            return Err(Error::invalid("arch", "lrelu_alpha must be in [0, 1)"));
        }
        if self.scene_scale <= 0.0 || self.cam_radius <= 0.0 {
            return Err(Error::invalid("arch", "scales must be positive"));
        }
        Ok(())
    }

    /// Tiny variant for gradient checks and fast tests.
    pub fn tiny() -> Self {
        GeneratorArch {
            z_dim: 3,
            w_dim: 4,
            enc_levels: 2,
            dir_enc_levels: 2,
            trunk_layers: 1,
            trunk_width: 8,
            feat_dim: 4,
            color_hidden: 6,
            channels: 3,
            base_res: 4,
            upsample_stages: 1,
            n_samples: 4,
            ..GeneratorArch::default()
        }
    }

    pub fn final_res(&self) -> usize {
        self.base_res << self.upsample_stages
    }

    pub fn point_enc_dim(&self) -> usize {
        2 * self.enc_levels * 3
    }

    pub fn dir_enc_dim(&self) -> usize {
        2 * self.dir_enc_levels * 2
    }
}

fn he_init(rng_label: &[u64], rows: usize, cols: usize) -> Tensor {
    let mut rng = rng_from(rng_label);
    let scale = (1.0 / rows as f64).sqrt();
    let data: Vec<f64> = normal_vec(&mut rng, rows * cols)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Tensor::param(vec![rows, cols], data).expect("init shape")
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::param(vec![n], vec![0.0; n]).expect("init shape")
}

/// Build a freshly initialized tagged generator.
pub fn init_generator(arch: &GeneratorArch, seed: u64) -> TaggedParamSet {
    let mut p = TaggedParamSet::new();
    let mut idx = 0u64;
    let mut mat = |rows, cols| {
        idx += 1;
        he_init(&[seed, 0x6e71, idx], rows, cols)
    };

    p.insert("mapping.w1", LayerTag::Mapping, mat(arch.z_dim, arch.w_dim));
    p.insert("mapping.b1", LayerTag::Mapping, zeros_param(arch.w_dim));
    p.insert("mapping.w2", LayerTag::Mapping, mat(arch.w_dim, arch.w_dim));
    p.insert("mapping.b2", LayerTag::Mapping, zeros_param(arch.w_dim));

    let pd = arch.dir_enc_dim();
    p.insert("viewpoint.w1", LayerTag::Viewpoint, mat(pd, arch.w_dim));
    p.insert("viewpoint.b1", LayerTag::Viewpoint, zeros_param(arch.w_dim));
    p.insert("viewpoint.w2", LayerTag::Viewpoint, mat(arch.w_dim, arch.w_dim));
    p.insert("viewpoint.b2", LayerTag::Viewpoint, zeros_param(arch.w_dim));
    p.insert(
        "viewpoint.dirproj",
        LayerTag::Viewpoint,
        Tensor::param(vec![pd, arch.feat_dim], vec![0.0; pd * arch.feat_dim]).expect("init shape"),
    );
    p.insert("viewpoint.dirproj_b", LayerTag::Viewpoint, zeros_param(arch.feat_dim));

    let mut in_dim = arch.point_enc_dim();
    for l in 0..arch.trunk_layers {
        p.insert(
            &format!("render.w{}", l),
            LayerTag::Render,
            mat(in_dim, arch.trunk_width),
        );
        p.insert(&format!("render.b{}", l), LayerTag::Render, zeros_param(arch.trunk_width));
        in_dim = arch.trunk_width;
    }
    p.insert("render.proj", LayerTag::Render, mat(arch.trunk_width, arch.feat_dim));
    p.insert("render.proj_b", LayerTag::Render, zeros_param(arch.feat_dim));

    p.insert("geometry.w", LayerTag::Geometry, mat(arch.trunk_width, 1));
    p.insert(
        "geometry.b",
        LayerTag::Geometry,
        Tensor::param(vec![1], vec![0.5]).expect("init shape"),
    );

    p.insert(
        "color.w1",
        LayerTag::Color,
        mat(arch.feat_dim + arch.w_dim, arch.color_hidden),
    );
    p.insert("color.b1", LayerTag::Color, zeros_param(arch.color_hidden));
    p.insert("color.w2", LayerTag::Color, mat(arch.color_hidden, arch.channels));
    p.insert("color.b2", LayerTag::Color, zeros_param(arch.channels));

    for s in 0..arch.upsample_stages {
        p.insert(
            &format!("upsample.conv{}", s),
            LayerTag::Upsample,
            mat(arch.channels, arch.channels),
        );
        p.insert(&format!("upsample.conv{}_b", s), LayerTag::Upsample, zeros_param(arch.channels));
    }
    p.insert("upsample.rgb", LayerTag::Upsample, mat(arch.channels, 3));
    p.insert("upsample.rgb_b", LayerTag::Upsample, zeros_param(3));
    p
}

pub struct GeneratorOutput {
    /// Final RGB image, shape (H, W, 3), values in [0, 1].
    pub image: Tensor,
    /// RGB projection of the base feature map, shape (base, base, 3).
    pub low_res_rgb: Tensor,
    /// Pose-conditioned latent, shape (1, w_dim).
    pub w_latent: Tensor,
    /// Per-ray accumulated opacity, shape (base_res^2).
    pub alpha: Tensor,
    /// Named activation maps: rows are pixels/points, columns channels.
    pub activations: BTreeMap<String, Tensor>,
}

struct FieldEval {
    /// Per-sample compositing weights, shape (rays, samples).
    weights: Tensor,
    /// Per-ray accumulated opacity, shape (rays).
    alpha: Tensor,
    /// Per-point color-input features, shape (rays * samples, feat_dim).
    proj_feat: Tensor,
}

fn mlp_layer(x: &Tensor, w: &Tensor, b: &Tensor, alpha: Option<f64>) -> Result<Tensor> {
    let y = x.matmul(w)?.add_rows(b)?;
    match alpha {
        Some(a) => y.leaky_relu(a),
        None => Ok(y),
    }
}

fn mapping_forward(z: &Tensor, params: &TaggedParamSet, arch: &GeneratorArch) -> Result<Tensor> {
    let zr = z.reshape(vec![1, arch.z_dim])?;
    let h = mlp_layer(&zr, params.get("mapping.w1")?, params.get("mapping.b1")?, Some(arch.lrelu_alpha))?;
    mlp_layer(&h, params.get("mapping.w2")?, params.get("mapping.b2")?, None)
}

fn pose_condition(
    w: &Tensor,
    pose: &CameraPose,
    params: &TaggedParamSet,
    arch: &GeneratorArch,
) -> Result<Tensor> {
    let cfg = EncodingCfg::new(arch.dir_enc_levels)?;
    let enc = positional_encode(
        &[
            pose.pitch / std::f64::consts::FRAC_PI_2,
            pose.yaw / std::f64::consts::PI,
        ],
        cfg,
    );
    let e = Tensor::from_vec(vec![1, enc.len()], enc)?;
    let h = mlp_layer(&e, params.get("viewpoint.w1")?, params.get("viewpoint.b1")?, Some(arch.lrelu_alpha))?;
    let delta = mlp_layer(&h, params.get("viewpoint.w2")?, params.get("viewpoint.b2")?, None)?;
    w.add(&delta)
}

/// Evaluate trunk, density head, and color-input projection at every ray
/// sample. Rays are traced with midpoint depths over [near, far].
fn eval_field(rays: &[Ray], params: &TaggedParamSet, arch: &GeneratorArch) -> Result<FieldEval> {
    let s = arch.n_samples;
    let n = rays.len();
    let h_bin = (arch.far - arch.near) / s as f64;
    let depths: Vec<f64> = (0..s).map(|i| arch.near + (i as f64 + 0.5) * h_bin).collect();

    let cfg = EncodingCfg::new(arch.enc_levels)?;
    let mut enc = Vec::with_capacity(n * s * arch.point_enc_dim());
    for ray in rays {
        for &q in &depths {
            let p = ray.point_at(q);
            let scaled = [
                p[0] / arch.scene_scale,
                p[1] / arch.scene_scale,
                p[2] / arch.scene_scale,
            ];
            enc.extend(positional_encode(&scaled, cfg));
        }
    }
    let mut h = Tensor::from_vec(vec![n * s, arch.point_enc_dim()], enc)?;
    for l in 0..arch.trunk_layers {
        h = mlp_layer(
            &h,
            params.get(&format!("render.w{}", l))?,
            params.get(&format!("render.b{}", l))?,
            Some(arch.lrelu_alpha),
        )?;
    }
    let density = mlp_layer(&h, params.get("geometry.w")?, params.get("geometry.b")?, None)?
        .softplus()?
        .reshape(vec![n, s])?;
    // Alpha compositing over uniform bins: w_i = T_i (1 - exp(-density_i h)).
    let tau = density.mul_scalar(h_bin)?;
    let trans = tau.cumsum_exclusive_rows()?.neg()?.exp()?;
    let seg_alpha = tau.neg()?.exp()?.neg()?.add_scalar(1.0)?;
    let weights = trans.mul(&seg_alpha)?;
    let alpha = weights.sum_rows()?;
    let proj_feat = mlp_layer(
        &h,
        params.get("render.proj")?,
        params.get("render.proj_b")?,
        Some(arch.lrelu_alpha),
    )?;
    Ok(FieldEval {
        weights,
        alpha,
        proj_feat,
    })
}

fn color_mlp(features: &Tensor, w_pose: &Tensor, params: &TaggedParamSet, arch: &GeneratorArch) -> Result<Tensor> {
    let n = features.shape()[0];
    let w_rows = w_pose.reshape(vec![arch.w_dim])?.broadcast_rows(n)?;
    let x = features.concat_cols(&w_rows)?;
    let h = mlp_layer(&x, params.get("color.w1")?, params.get("color.b1")?, Some(arch.lrelu_alpha))?;
    mlp_layer(&h, params.get("color.w2")?, params.get("color.b2")?, None)
}

fn frame_rays(pose: &CameraPose, res: usize, arch: &GeneratorArch) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            rays.push(cast_ray(pose, (row, col), (res, res), arch.fov_rad)?);
        }
    }
    Ok(rays)
}

fn rgb_head(flat_features: &Tensor, params: &TaggedParamSet) -> Result<Tensor> {
    flat_features
        .matmul(params.get("upsample.rgb")?)?
        .add_rows(params.get("upsample.rgb_b")?)?
        .sigmoid()
}

/// Full per-sample forward pass: latent + pose -> RGB image.
pub fn generator_forward(
    z: &Tensor,
    pose: &CameraPose,
    params: &TaggedParamSet,
    arch: &GeneratorArch,
) -> Result<GeneratorOutput> {
    for tag in LayerTag::ALL {
        if !params.tags_present().contains(&tag) {
            return Err(Error::MissingTag(tag.as_str().to_string()));
        }
    }
    let w = mapping_forward(z, params, arch)?;
    generator_forward_from_w(&w, pose, params, arch)
}

/// Map a z-space latent through the mapping network to a (1, w_dim) latent.
pub fn map_latent(z: &Tensor, params: &TaggedParamSet, arch: &GeneratorArch) -> Result<Tensor> {
    mapping_forward(z, params, arch)
}

/// Forward pass from an intermediate latent w, bypassing the mapping net.
/// Used when latent batches are supplied directly (domain-transfer losses).
pub fn generator_forward_from_w(
    w: &Tensor,
    pose: &CameraPose,
    params: &TaggedParamSet,
    arch: &GeneratorArch,
) -> Result<GeneratorOutput> {
    let w = w.reshape(vec![1, arch.w_dim])?;
    let w_pose = pose_condition(&w, pose, params, arch)?;
    let rays = frame_rays(pose, arch.base_res, arch)?;
    let field = eval_field(&rays, params, arch)?;
    let n = rays.len();

    // Per-sample colors weighted by transmittance.
    let colors = color_mlp(&field.proj_feat, &w_pose, params, arch)?;
    let w_flat = field.weights.reshape(vec![n * arch.n_samples])?;
    let base = colors.mul_cols(&w_flat)?.segment_sum_rows(arch.n_samples)?; // (n, C)

    let mut activations = BTreeMap::new();
    activations.insert("render.base".to_string(), base.clone());
    activations.insert(
        "geometry.alpha".to_string(),
        field.alpha.reshape(vec![n, 1])?,
    );

    let mut x = base.reshape(vec![arch.base_res, arch.base_res, arch.channels])?;
    for stage in 0..arch.upsample_stages {
        let up = x.bilinear_upsample_2x()?;
        let sh = up.shape();
        let flat = up.reshape(vec![sh[0] * sh[1], arch.channels])?;
        let conv = mlp_layer(
            &flat,
            params.get(&format!("upsample.conv{}", stage))?,
            params.get(&format!("upsample.conv{}_b", stage))?,
            Some(arch.lrelu_alpha),
        )?;
        activations.insert(format!("render.up{}", stage + 1), conv.clone());
        x = conv.reshape(vec![sh[0], sh[1], arch.channels])?;
    }
    let sh = x.shape();
    let flat = x.reshape(vec![sh[0] * sh[1], arch.channels])?;
    let image = rgb_head(&flat, params)?.reshape(vec![sh[0], sh[1], 3])?;
    let low_res_rgb = rgb_head(&base, params)?.reshape(vec![arch.base_res, arch.base_res, 3])?;

    Ok(GeneratorOutput {
        image,
        low_res_rgb,
        w_latent: w_pose,
        alpha: field.alpha,
        activations,
    })
}

/// Ray-set approximation: the direction encoding is integrated against the
/// transmittance once per ray and modulated through the color MLP, replacing
/// per-sample color queries. All rays must share one pose (origin).
pub fn render_feature_plane(
    z: &Tensor,
    rays: &[Ray],
    params: &TaggedParamSet,
    arch: &GeneratorArch,
) -> Result<Tensor> {
    if rays.is_empty() {
        return Err(Error::invalid("render_feature_plane", "empty ray set"));
    }
    let o = rays[0].origin;
    if rays.iter().any(|r| {
        (0..3).any(|c| (r.origin[c] - o[c]).abs() > 1e-9)
    }) {
        return Err(Error::invalid(
            "render_feature_plane",
            "mixed poses in one ray batch",
        ));
    }
    let res = (rays.len() as f64).sqrt() as usize;
    if res * res != rays.len() {
        return Err(Error::invalid(
            "render_feature_plane",
            format!("ray count {} is not a square grid", rays.len()),
        ));
    }
    let w = mapping_forward(z, params, arch)?;
    // Recover a pose for conditioning from the shared origin.
    let radius = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    let pose = CameraPose {
        pitch: (o[1] / radius).asin(),
        yaw: o[0].atan2(o[2]),
        origin: o,
    };
    let w_pose = pose_condition(&w, &pose, params, arch)?;
    let field = eval_field(rays, params, arch)?;
    let n = rays.len();

    // Transmittance-weighted mean of point features per ray.
    let w_flat = field.weights.reshape(vec![n * arch.n_samples])?;
    let integrated = field
        .proj_feat
        .mul_cols(&w_flat)?
        .segment_sum_rows(arch.n_samples)?;
    let ones = Tensor::from_vec(vec![n], vec![1.0; n])?;
    let inv_alpha = ones.div(&field.alpha.add_scalar(1e-8)?)?;
    let mean_feat = integrated.mul_cols(&inv_alpha)?;

    // Direction encoding, one query per ray.
    let cfg = EncodingCfg::new(arch.dir_enc_levels)?;
    let mut dir_enc = Vec::with_capacity(n * arch.dir_enc_dim());
    for ray in rays {
        let d = ray.direction;
        let elev = d[1].clamp(-1.0, 1.0).asin() / std::f64::consts::FRAC_PI_2;
        let azim = d[0].atan2(d[2]) / std::f64::consts::PI;
        dir_enc.extend(positional_encode(&[elev, azim], cfg));
    }
    let dir = Tensor::from_vec(vec![n, arch.dir_enc_dim()], dir_enc)?;
    let dir_feat = dir
        .matmul(params.get("viewpoint.dirproj")?)?
        .add_rows(params.get("viewpoint.dirproj_b")?)?;

    let feat = mean_feat.add(&dir_feat)?;
    let colors = color_mlp(&feat, &w_pose, params, arch)?;
    colors
        .mul_cols(&field.alpha)?
        .reshape(vec![res, res, arch.channels])
}

/// Small MLP discriminator; the final layer emits one scalar logit.
#[derive(Clone)]
pub struct DiscriminatorParams {
    pub layers: Vec<(Tensor, Tensor)>,
    pub lrelu_alpha: f64,
    pub input_dim: usize,
}

pub fn init_discriminator(input_dim: usize, widths: &[usize], seed: u64) -> DiscriminatorParams {
    let mut layers = Vec::new();
    let mut d = input_dim;
    for (i, &w) in widths.iter().enumerate() {
        layers.push((he_init(&[seed, 0xd15c, i as u64], d, w), zeros_param(w)));
        d = w;
    }
    layers.push((he_init(&[seed, 0xd15c, widths.len() as u64], d, 1), zeros_param(1)));
    DiscriminatorParams {
        layers,
        lrelu_alpha: 0.2,
        input_dim,
    }
}

impl DiscriminatorParams {
    pub fn total_elements(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (w, b) in &self.layers {
            w.zero_grad();
            b.zero_grad();
        }
    }

    pub fn sgd_step(&self, lr: f64) {
        for (w, b) in &self.layers {
            w.sgd_step(lr);
            b.sgd_step(lr);
        }
    }

    pub fn detached(&self) -> DiscriminatorParams {
        DiscriminatorParams {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.detach(), b.detach()))
                .collect(),
            lrelu_alpha: self.lrelu_alpha,
            input_dim: self.input_dim,
        }
    }
}

/// Flatten an image and run the MLP; returns the (1, 1) logit.
pub fn discriminator_forward(image: &Tensor, params: &DiscriminatorParams) -> Result<Tensor> {
    if image.len() != params.input_dim {
        return Err(Error::ShapeMismatch {
            op: "discriminator_forward",
            lhs: image.shape(),
            rhs: vec![params.input_dim],
        });
    }
    let mut x = image.reshape(vec![1, params.input_dim])?;
    let last = params.layers.len() - 1;
    for (i, (w, b)) in params.layers.iter().enumerate() {
        x = x.matmul(w)?.add_rows(b)?;
        if i != last {
            x = x.leaky_relu(params.lrelu_alpha)?;
        }
    }
    Ok(x)
}

/// Logit plus the gradient of the logit with respect to the (flattened)
/// input image, expressed with graph ops so the R1 penalty built from it is
/// differentiable with respect to the discriminator weights. Activation
/// masks are detached; with piecewise-linear activations this is exact
/// almost everywhere.
pub fn discriminator_with_input_grad(
    image: &Tensor,
    params: &DiscriminatorParams,
) -> Result<(Tensor, Tensor)> {
    if image.len() != params.input_dim {
        return Err(Error::ShapeMismatch {
            op: "discriminator_with_input_grad",
            lhs: image.shape(),
            rhs: vec![params.input_dim],
        });
    }
    let mut x = image.reshape(vec![1, params.input_dim])?;
    let last = params.layers.len() - 1;
    let mut masks: Vec<Option<Tensor>> = Vec::with_capacity(params.layers.len());
    for (i, (w, b)) in params.layers.iter().enumerate() {
        let z = x.matmul(w)?.add_rows(b)?;
        if i != last {
            let a = params.lrelu_alpha;
            let mask = Tensor::from_vec(
                z.shape(),
                z.data().iter().map(|&v| if v > 0.0 { 1.0 } else { a }).collect(),
            )?;
            masks.push(Some(mask.clone()));
            x = z.mul(&mask)?;
        } else {
            masks.push(None);
            x = z;
        }
    }
    let logit = x;
    // Backward expression: g_{l-1} = (g_l ⊙ mask_l) W_l^T.
    let mut g = Tensor::from_vec(vec![1, 1], vec![1.0])?;
    for i in (0..params.layers.len()).rev() {
        g = g.matmul_t(&params.layers[i].0)?;
        if i > 0 {
            if let Some(mask) = &masks[i - 1] {
                g = g.mul(mask)?;
            }
        }
    }
    Ok((logit, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny_setup() -> (GeneratorArch, TaggedParamSet, Tensor, CameraPose) {
        let arch = GeneratorArch::tiny();
        let params = init_generator(&arch, 7);
        let z = Tensor::from_vec(vec![arch.z_dim], vec![0.3, -0.2, 0.5]).unwrap();
        let pose = CameraPose::orbit(0.1, 0.4, arch.cam_radius).unwrap();
        (arch, params, z, pose)
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let (arch, params, z, pose) = tiny_setup();
        let a = generator_forward(&z, &pose, &params, &arch).unwrap();
        let b = generator_forward(&z, &pose, &params, &arch).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.image.shape(), vec![8, 8, 3]);
        for v in a.image.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn output_shape_doubles_per_stage() {
        let (mut arch, _, z, pose) = tiny_setup();
        arch.base_res = 8;
        arch.upsample_stages = 1;
        let params = init_generator(&arch, 3);
        let out = generator_forward(&z, &pose, &params, &arch).unwrap();
        assert_eq!(out.image.shape(), vec![16, 16, 3]);
        assert_eq!(out.low_res_rgb.shape(), vec![8, 8, 3]);
    }

    #[test]
    fn missing_tag_rejected_by_name() {
        let (arch, params, z, pose) = tiny_setup();
        let partial = params
            .subset(&[LayerTag::Mapping, LayerTag::Render, LayerTag::Geometry].into())
            .unwrap();
        match generator_forward(&z, &pose, &partial, &arch) {
            Err(Error::MissingTag(name)) => assert_eq!(name, "viewpoint"),
            other => panic!("expected MissingTag, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn yaw_continuity() {
        let (arch, params, z, pose) = tiny_setup();
        let eps = 1e-6;
        let pose2 = CameraPose::orbit(pose.pitch, pose.yaw + eps, arch.cam_radius).unwrap();
        let a = generator_forward(&z, &pose, &params, &arch).unwrap();
        let b = generator_forward(&z, &pose2, &params, &arch).unwrap();
        let l2: f64 = a
            .image
            .data()
            .iter()
            .zip(b.image.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(l2 < 1e-3, "l2 {}", l2);
    }

    #[test]
    fn feature_plane_zero_density_is_zero() {
        let (arch, params, z, pose) = tiny_setup();
        // Force softplus output to underflow to exactly zero.
        params.get("geometry.w").unwrap().set_data(&vec![0.0; arch.trunk_width]);
        params.get("geometry.b").unwrap().set_data(&[-800.0]);
        let rays = frame_rays(&pose, arch.base_res, &arch).unwrap();
        let map = render_feature_plane(&z, &rays, &params, &arch).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_plane_rejects_mixed_poses() {
        let (arch, params, z, pose) = tiny_setup();
        let pose2 = CameraPose::orbit(0.3, -0.9, arch.cam_radius).unwrap();
        let mut rays = frame_rays(&pose, arch.base_res, &arch).unwrap();
        let other = frame_rays(&pose2, arch.base_res, &arch).unwrap();
        rays[3] = other[3];
        assert!(render_feature_plane(&z, &rays, &params, &arch).is_err());
    }

    #[test]
    fn feature_plane_matches_full_render_direction() {
        // Cosine similarity between the approximation and per-sample
        // rendering on a blob-like density.
        let (arch, params, z, pose) = tiny_setup();
        let out = generator_forward(&z, &pose, &params, &arch).unwrap();
        let full = out.activations["render.base"].data();
        let rays = frame_rays(&pose, arch.base_res, &arch).unwrap();
        let approx = render_feature_plane(&z, &rays, &params, &arch).unwrap().data();
        let dot: f64 = full.iter().zip(&approx).map(|(a, b)| a * b).sum();
        let na: f64 = full.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = approx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = dot / (na * nb);
        assert!(cos > 0.9, "cosine {}", cos);
    }

    #[test]
    fn discriminator_zero_weights_returns_bias() {
        let d = init_discriminator(12, &[6], 5);
        for (w, _) in &d.layers {
            w.set_data(&vec![0.0; w.len()]);
        }
        d.layers.last().unwrap().1.set_data(&[0.37]);
        let img = Tensor::from_vec(vec![2, 2, 3], vec![0.5; 12]).unwrap();
        let logit = discriminator_forward(&img, &d).unwrap();
        assert!((logit.item() - 0.37).abs() < 1e-12);
    }

    #[test]
    fn discriminator_input_grad_matches_finite_differences() {
        let d = init_discriminator(6, &[5], 9);
        let img_data = vec![0.3, 0.8, 0.1, 0.6, 0.45, 0.9];
        let img = Tensor::from_vec(vec![1, 2, 3], img_data.clone()).unwrap();
        let (_, g) = discriminator_with_input_grad(&img, &d).unwrap();
        let report = grad_check(
            |xs| {
                let l = discriminator_forward(&xs[0], &d)?;
                l.sum()
            },
            &[(vec![1, 2, 3], img_data)],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        // also check the explicit expression agrees with autodiff values
        let img2 = Tensor::param(vec![1, 2, 3], vec![0.3, 0.8, 0.1, 0.6, 0.45, 0.9]).unwrap();
        let logit = discriminator_forward(&img2, &d).unwrap();
        logit.sum().unwrap().backward().unwrap();
        let auto = img2.grad().unwrap();
        for (a, b) in auto.iter().zip(g.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn r1_expression_differentiable_wrt_weights() {
        // For a linear D (no hidden layers) R1 = sum(w^2): exact analytic check.
        let w = Tensor::param(vec![4, 1], vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let b = Tensor::param(vec![1], vec![0.1]).unwrap();
        let d = DiscriminatorParams {
            layers: vec![(w.clone(), b)],
            lrelu_alpha: 0.2,
            input_dim: 4,
        };
        let img = Tensor::from_vec(vec![1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (_, g) = discriminator_with_input_grad(&img, &d).unwrap();
        let r1 = g.square().unwrap().sum().unwrap();
        assert!((r1.item() - (0.09 + 0.49 + 0.04 + 0.81)).abs() < 1e-12);
        r1.backward().unwrap();
        let gw = w.grad().unwrap();
        let want = [0.6, -1.4, 0.4, 1.8];
        for (a, b) in gw.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
