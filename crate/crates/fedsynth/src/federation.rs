//! Federated orchestration: dataset classification into horizontal/vertical
//! cohorts, client selection, local GAN training, layer-tagged partial
//! uploads, size-weighted aggregation, EMA smoothing, and the two training
//! loops (cohort training and domain transfer).

use std::collections::BTreeSet;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::losses::{
    consistency_reg, horizontal_generator_objective, nonsat_losses, total_gan_loss,
    vertical_generator_loss, ClientKind, GanLossCfg, VerticalLossCfg,
};
use crate::params::{LayerTag, TaggedParamSet};
use crate::renderer::{
    generator_forward, generator_forward_from_w, init_discriminator, map_latent, CameraPose,
    DiscriminatorParams, GeneratorArch, SceneOracle,
};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;
use crate::transfer::{
    freeze_plan, geometry_loss, image_quality_loss, internal_distribution_loss, transfer_total,
    LayerSelection, MaskPair, ProjectionSet, TransferCfg,
};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetDescriptor {
    pub features: BTreeSet<String>,
    pub ids: BTreeSet<String>,
    pub size: usize,
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClassifyCfg {
    pub tau_f: f64,
    pub tau_v: f64,
}

impl Default for ClassifyCfg {
    fn default() -> Self {
        ClassifyCfg {
            tau_f: 0.5,
            tau_v: 0.5,
        }
    }
}

/// Horizontal clients share the reference feature space but not sample IDs;
/// vertical clients the reverse. Anything else is unclassifiable.
pub fn classify_dataset(
    client_id: usize,
    desc: &DatasetDescriptor,
    reference_features: &BTreeSet<String>,
    reference_ids: &BTreeSet<String>,
    cfg: &ClassifyCfg,
) -> Result<ClientKind> {
    if desc.features.is_empty() || desc.ids.is_empty() {
        return Err(Error::invalid("classify_dataset", "empty key sets"));
    }
    let f = jaccard(&desc.features, reference_features);
    let v = jaccard(&desc.ids, reference_ids);
    let horizontal = f >= cfg.tau_f && v < cfg.tau_v;
    let vertical = v >= cfg.tau_v && f < cfg.tau_f;
    match (horizontal, vertical) {
        (true, false) => Ok(ClientKind::Horizontal),
        (false, true) => Ok(ClientKind::Vertical),
        _ => Err(Error::Unclassifiable {
            id: client_id,
            feature_score: f,
            id_score: v,
        }),
    }
}

pub struct ClientProfile {
    pub id: usize,
    pub kind: ClientKind,
    pub dataset: DatasetDescriptor,
    pub scene: SceneOracle,
    pub disc: DiscriminatorParams,
    /// Client-local reference generator for vertical supervision; never
    /// uploaded.
    pub hyper: Option<TaggedParamSet>,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.size == 0 {
            return Err(Error::invalid("client_profile", "dataset size must be >= 1"));
        }
        if self.hyper.is_some() != (self.kind == ClientKind::Vertical) {
            return Err(Error::invalid(
                "client_profile",
                "reference generator present iff client is vertical",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UploadPolicy {
    pub horizontal: BTreeSet<LayerTag>,
    pub vertical: BTreeSet<LayerTag>,
}

impl Default for UploadPolicy {
    fn default() -> Self {
        UploadPolicy {
            horizontal: [
                LayerTag::Geometry,
                LayerTag::Render,
                LayerTag::Color,
                LayerTag::Upsample,
            ]
            .into(),
            vertical: [LayerTag::Mapping, LayerTag::Viewpoint].into(),
        }
    }
}

impl UploadPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.horizontal.is_disjoint(&self.vertical) {
            return Err(Error::invalid("upload_policy", "cohort tag sets overlap"));
        }
        let union: BTreeSet<LayerTag> = self.horizontal.union(&self.vertical).copied().collect();
        if union.len() != LayerTag::ALL.len() {
            return Err(Error::invalid(
                "upload_policy",
                "cohort tag sets must cover every generator tag",
            ));
        }
        Ok(())
    }

    pub fn tags_for(&self, kind: ClientKind) -> &BTreeSet<LayerTag> {
        match kind {
            ClientKind::Horizontal => &self.horizontal,
            ClientKind::Vertical => &self.vertical,
        }
    }
}

/// A client's per-round upload: only the tags its cohort owns.
pub fn partial_upload(
    params: &TaggedParamSet,
    kind: ClientKind,
    policy: &UploadPolicy,
) -> Result<TaggedParamSet> {
    policy.validate()?;
    params.subset(policy.tags_for(kind))
}

pub struct Upload {
    pub client_id: usize,
    pub size: usize,
    pub params: TaggedParamSet,
}

/// Size-weighted federated averaging. Each tag must be covered by at least
/// one upload; uploads are consumed in ascending client-id order so the
/// result is independent of arrival order.
pub fn aggregate_weighted(uploads: &[Upload], round: usize) -> Result<TaggedParamSet> {
    if uploads.is_empty() {
        return Err(Error::invalid("aggregate_weighted", "no uploads"));
    }
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut sums: std::collections::BTreeMap<String, (LayerTag, Vec<f64>, f64)> =
        std::collections::BTreeMap::new();
    for u in &order {
        let w = u.size as f64;
        for (name, tag, t) in u.params.iter() {
            let data = t.data();
            let entry = sums
                .entry(name.to_string())
                .or_insert_with(|| (tag, vec![0.0; data.len()], 0.0));
            if entry.1.len() != data.len() {
                return Err(Error::ShapeMismatch {
                    op: "aggregate_weighted",
                    lhs: vec![entry.1.len()],
                    rhs: vec![data.len()],
                });
            }
            for (acc, v) in entry.1.iter_mut().zip(&data) {
                *acc += w * v;
            }
            entry.2 += w;
        }
    }
    let mut out = TaggedParamSet::new();
    let mut covered: BTreeSet<LayerTag> = BTreeSet::new();
    for (name, (tag, sum, total)) in &sums {
        covered.insert(*tag);
        let avg: Vec<f64> = sum.iter().map(|v| v / total).collect();
        let n = avg.len();
        out.insert(name, *tag, Tensor::from_vec(vec![n], avg)?);
    }
    for tag in LayerTag::ALL {
        if !covered.contains(&tag) {
            return Err(Error::UncoveredTag(tag.as_str().to_string(), round));
        }
    }
    Ok(out)
}

pub struct EmaState {
    pub decay: f64,
    pub params: TaggedParamSet,
}

impl EmaState {
    pub fn new(init: &TaggedParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid("ema", "decay must be in [0, 1)"));
        }
        Ok(EmaState {
            decay,
            params: init.deep_clone(false),
        })
    }

    /// θ_ema <- γ θ_ema + (1-γ) θ. The aggregate's tensors may be flattened;
    /// only element counts per name must match.
    pub fn apply(&mut self, aggregate: &TaggedParamSet) -> Result<()> {
        self.params.ema_update(aggregate, self.decay)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub kind: ClientKind,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_aux: f64,
    pub bytes_up: u64,
    pub uploaded_tags: Vec<LayerTag>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub records: Vec<ClientRecord>,
    pub agg_loss_d: f64,
    pub agg_loss_g: f64,
    pub agg_loss_aux: f64,
}

fn sig9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Deterministic round CSV. wall_ms is written as 0 here; real timings go
/// to the companion timing CSV so the main artifact stays byte-identical
/// across runs.
pub fn logs_to_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from("round,client_id,kind,loss_d,loss_g,loss_aux,bytes_up,wall_ms\n");
    for log in logs {
        for r in &log.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},0\n",
                log.round,
                r.client_id,
                r.kind.as_str(),
                sig9(r.loss_d),
                sig9(r.loss_g),
                sig9(r.loss_aux),
                r.bytes_up
            ));
        }
        let bytes: u64 = log.records.iter().map(|r| r.bytes_up).sum();
        out.push_str(&format!(
            "{},-,-,{},{},{},{},0\n",
            log.round,
            sig9(log.agg_loss_d),
            sig9(log.agg_loss_g),
            sig9(log.agg_loss_aux),
            bytes
        ));
    }
    out
}

pub fn timing_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from("round,client_id,wall_ms\n");
    for log in logs {
        for r in &log.records {
            out.push_str(&format!("{},{},{:.3}\n", log.round, r.client_id, r.wall_ms));
        }
    }
    out
}

/// Uniform sample without replacement of ceil(fraction * n) client indices,
/// deterministic in (seed, round); returned sorted.
pub fn select_clients(n_clients: usize, fraction: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::invalid("select_clients", "fraction must be in (0, 1]"));
    }
    if n_clients == 0 {
        return Err(Error::invalid("select_clients", "no clients"));
    }
    let take = ((fraction * n_clients as f64).ceil() as usize).clamp(1, n_clients);
    let mut idx: Vec<usize> = (0..n_clients).collect();
    let mut rng = rng_from(&[seed, 0x5e1e, round as u64]);
    idx.shuffle(&mut rng);
    let mut chosen = idx[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainCfg {
    pub rounds: usize,
    pub local_epochs: usize,
    pub fraction: f64,
    pub seed: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub ema_decay: f64,
    pub gan: GanLossCfg,
    pub vertical: VerticalLossCfg,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            rounds: 10,
            local_epochs: 1,
            fraction: 1.0,
            seed: 1,
            lr_g: 1e-3,
            lr_d: 2e-3,
            ema_decay: 0.95,
            gan: GanLossCfg::default(),
            vertical: VerticalLossCfg::default(),
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.fraction && self.fraction <= 1.0) {
            return Err(Error::Config("schedule.fraction must be in (0, 1]".to_string()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema.decay must be in [0, 1)".to_string()));
        }
        if self.lr_g < 0.0 || self.lr_d < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".to_string()));
        }
        self.gan.validate()?;
        self.vertical.validate()?;
        Ok(())
    }
}

pub struct LocalMetrics {
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_aux: f64,
}

fn sample_pose(rng: &mut impl Rng, radius: f64) -> Result<CameraPose> {
    let pitch = 0.35 * rng.gen::<f64>() - 0.175;
    let yaw = 0.8 * rng.gen::<f64>() - 0.4;
    CameraPose::orbit(pitch, yaw, radius)
}

/// Wider orbit coverage than the data poses; used by the geometry
/// regularizer during transfer.
fn sample_pose_wide(rng: &mut impl Rng, radius: f64) -> Result<CameraPose> {
    let pitch = 0.9 * rng.gen::<f64>() - 0.45;
    let yaw = 2.4 * rng.gen::<f64>() - 1.2;
    CameraPose::orbit(pitch, yaw, radius)
}

fn real_image(scene: &SceneOracle, pose: &CameraPose, arch: &GeneratorArch) -> Result<Tensor> {
    let res = arch.final_res();
    let img = scene.render(pose, res, arch.n_samples, arch.near, arch.far, arch.fov_rad)?;
    Tensor::from_vec(vec![res, res, 3], img)
}

/// One client's local epochs: alternating discriminator and generator steps
/// of the non-saturating objective with consistency regularization, plus the
/// cross-render term against the local reference generator for vertical
/// clients. Returns the updated local generator.
pub fn local_train(
    client: &mut ClientProfile,
    global: &TaggedParamSet,
    arch: &GeneratorArch,
    cfg: &TrainCfg,
    round: usize,
) -> Result<(TaggedParamSet, LocalMetrics)> {
    client.validate()?;
    cfg.validate()?;
    let local = global.deep_clone(true);
    let all_tags: BTreeSet<LayerTag> = LayerTag::ALL.into_iter().collect();
    let mut sum_d = 0.0;
    let mut sum_g = 0.0;
    let mut sum_aux = 0.0;
    for epoch in 0..cfg.local_epochs {
        let mut rng = rng_from(&[cfg.seed, 0x10ca, round as u64, client.id as u64, epoch as u64]);
        let pose = sample_pose(&mut rng, arch.cam_radius)?;
        let real = real_image(&client.scene, &pose, arch)?;
        let z = Tensor::from_vec(vec![arch.z_dim], normal_vec(&mut rng, arch.z_dim))?;

        // discriminator step (fake detached inside nonsat_losses)
        let out = generator_forward(&z, &pose, &local, arch)?;
        let (loss_d, _) = nonsat_losses(
            &[real.clone()],
            &[out.image.clone()],
            &client.disc,
            &cfg.gan,
        )?;
        sum_d += loss_d.item();
        loss_d.backward()?;
        client.disc.sgd_step(cfg.lr_d);
        client.disc.zero_grads();

        // generator step on a fresh graph
        let out = generator_forward(&z, &pose, &local, arch)?;
        let loss_g = horizontal_generator_objective(
            ClientKind::Horizontal,
            std::slice::from_ref(&out.image),
            &client.disc,
        )?;
        let reg = consistency_reg(&out.low_res_rgb, &out.image)?;
        sum_g += loss_g.item();
        let mut total = total_gan_loss(&loss_g, &reg, cfg.gan.reg_weight)?;
        let mut aux = reg.item();
        if let Some(hyper) = &client.hyper {
            // reference render: the local generator's latent compared against
            // the frozen reference generator at a second pose
            let pose2 = sample_pose(&mut rng, arch.cam_radius)?;
            let out2 = generator_forward(&z, &pose2, &local, arch)?;
            let ref_out = generator_forward(&z, &pose2, &hyper.detached(), arch)?;
            let res = arch.final_res();
            let n_pix = res * res;
            let count = cfg.vertical.pixel_subsample_count.min(n_pix);
            let sub: Vec<usize> = (0..count).map(|_| rng.gen_range(0..n_pix)).collect();
            let lv = vertical_generator_loss(&z, &z, &out2.image, &ref_out.image, &sub)?;
            aux += lv.item();
            total = total.add(&lv)?;
        }
        sum_aux += aux;
        total.backward()?;
        local.sgd_step(cfg.lr_g, &all_tags);
        local.zero_grads();
        if let Some(hyper) = &client.hyper {
            hyper.ema_update(&local, cfg.vertical.hyper_decay)?;
        }
    }
    let e = cfg.local_epochs.max(1) as f64;
    Ok((
        local,
        LocalMetrics {
            loss_d: sum_d / e,
            loss_g: sum_g / e,
            loss_aux: sum_aux / e,
        },
    ))
}

/// The full cohort training loop: select, multicast, train locally in
/// parallel (sequential here, but order-independent), partially upload,
/// aggregate by dataset size, smooth with EMA.
pub fn run_training(
    clients: &mut [ClientProfile],
    init: &TaggedParamSet,
    arch: &GeneratorArch,
    cfg: &TrainCfg,
    policy: &UploadPolicy,
) -> Result<(TaggedParamSet, Vec<RoundLog>)> {
    cfg.validate()?;
    policy.validate()?;
    let mut ema = EmaState::new(init, cfg.ema_decay)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let selected = select_clients(clients.len(), cfg.fraction, round, cfg.seed)?;
        let global = ema.params.detached();
        let mut uploads = Vec::new();
        let mut records = Vec::new();
        for &ci in &selected {
            let t0 = Instant::now();
            let client = &mut clients[ci];
            let (trained, metrics) = local_train(client, &global, arch, cfg, round)?;
            let up = partial_upload(&trained, client.kind, policy)?;
            let bytes = up.bytes() as u64;
            records.push(ClientRecord {
                client_id: client.id,
                kind: client.kind,
                loss_d: metrics.loss_d,
                loss_g: metrics.loss_g,
                loss_aux: metrics.loss_aux,
                bytes_up: bytes,
                uploaded_tags: up.tags_present().into_iter().collect(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            uploads.push(Upload {
                client_id: client.id,
                size: client.dataset.size,
                params: up,
            });
        }
        let aggregate = aggregate_weighted(&uploads, round)?;
        ema.apply(&aggregate)?;
        let n = records.len().max(1) as f64;
        logs.push(RoundLog {
            round,
            agg_loss_d: records.iter().map(|r| r.loss_d).sum::<f64>() / n,
            agg_loss_g: records.iter().map(|r| r.loss_g).sum::<f64>() / n,
            agg_loss_aux: records.iter().map(|r| r.loss_aux).sum::<f64>() / n,
            records,
        });
    }
    Ok((ema.params, logs))
}

/// Centralized baseline: the same alternating updates on one pooled client,
/// no aggregation or partial uploads. `steps` counts generator steps.
pub fn run_centralized(
    scene: &SceneOracle,
    init: &TaggedParamSet,
    arch: &GeneratorArch,
    cfg: &TrainCfg,
    steps: usize,
) -> Result<(TaggedParamSet, Vec<(f64, f64)>)> {
    cfg.validate()?;
    let mut client = ClientProfile {
        id: 0,
        kind: ClientKind::Horizontal,
        dataset: DatasetDescriptor {
            features: ["f".to_string()].into(),
            ids: ["i".to_string()].into(),
            size: 1,
        },
        scene: scene.clone(),
        disc: init_discriminator(
            arch.final_res() * arch.final_res() * 3,
            &[32],
            crate::rng::derive(&[cfg.seed, 0xd15c]),
        ),
        hyper: None,
    };
    let mut params = init.deep_clone(true);
    let step_cfg = TrainCfg {
        local_epochs: 1,
        ..cfg.clone()
    };
    let mut history = Vec::with_capacity(steps);
    for step in 1..=steps {
        let (trained, metrics) = local_train(&mut client, &params.detached(), arch, &step_cfg, step)?;
        params = trained;
        history.push((metrics.loss_d, metrics.loss_g));
    }
    Ok((params, history))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TransferRunCfg {
    pub rounds: usize,
    pub fraction: f64,
    pub seed: u64,
    pub lr: f64,
    pub ema_decay: f64,
    pub transfer: TransferCfg,
    pub selection: LayerSelection,
    pub n_proj: usize,
    /// Weight of the target-data reconstruction term that anchors the
    /// adapted model to the target domain.
    pub recon_weight: f64,
    /// Number of distinct data viewpoints each client owns (0 = a fresh
    /// pose every round). Few poses leave geometry underdetermined by the
    /// reconstruction term, which is where the distribution losses matter.
    pub data_poses: usize,
}

impl Default for TransferRunCfg {
    fn default() -> Self {
        TransferRunCfg {
            rounds: 40,
            fraction: 1.0,
            seed: 1,
            lr: 5e-3,
            ema_decay: 0.5,
            transfer: TransferCfg::default(),
            selection: LayerSelection::default(),
            n_proj: 16,
            recon_weight: 1.0,
            data_poses: 0,
        }
    }
}

impl TransferRunCfg {
    pub fn validate(&self) -> Result<()> {
        self.transfer.validate()?;
        if !(0.0 < self.fraction && self.fraction <= 1.0) {
            return Err(Error::Config("transfer.fraction must be in (0, 1]".to_string()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema.decay must be in [0, 1)".to_string()));
        }
        if self.lr < 0.0 || self.recon_weight < 0.0 {
            return Err(Error::Config("transfer weights must be >= 0".to_string()));
        }
        if self.n_proj == 0 {
            return Err(Error::Config("transfer.n_proj must be positive".to_string()));
        }
        Ok(())
    }
}

fn detached_mask(alpha: &Tensor) -> Result<Tensor> {
    let d: Vec<f64> = alpha.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(vec![alpha.len()], d)
}

/// One transfer round on one client: the distribution losses against the
/// source-latent branch plus a reconstruction pull toward the local target
/// scene, stepped only on the trainable tags.
#[allow(clippy::too_many_arguments)]
fn local_transfer_step(
    client: &ClientProfile,
    global: &TaggedParamSet,
    source: &TaggedParamSet,
    arch: &GeneratorArch,
    cfg: &TransferRunCfg,
    trainable: &BTreeSet<LayerTag>,
    proj: &ProjectionSet,
    round: usize,
) -> Result<(TaggedParamSet, LocalMetrics)> {
    let local = global.deep_clone(true);
    let mut rng = rng_from(&[cfg.seed, 0x7af2, round as u64, client.id as u64]);
    let pose = if cfg.data_poses > 0 {
        // each client owns a small fixed set of data viewpoints
        let mut pool_rng = rng_from(&[cfg.seed, 0xda7a, client.id as u64]);
        let mut pool = Vec::with_capacity(cfg.data_poses);
        for _ in 0..cfg.data_poses {
            pool.push(sample_pose(&mut pool_rng, arch.cam_radius)?);
        }
        pool[rng.gen_range(0..cfg.data_poses)].clone()
    } else {
        sample_pose(&mut rng, arch.cam_radius)?
    };
    let n_s = cfg.transfer.n_s;
    let src_frozen = source.detached();
    let mut w_tr = Vec::with_capacity(n_s);
    let mut w_s = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        let zt = Tensor::from_vec(vec![arch.z_dim], normal_vec(&mut rng, arch.z_dim))?;
        let zs = Tensor::from_vec(vec![arch.z_dim], normal_vec(&mut rng, arch.z_dim))?;
        w_tr.push(map_latent(&zt, &local, arch)?);
        w_s.push(map_latent(&zs, &src_frozen, arch)?);
    }
    let ls = internal_distribution_loss(&local, &w_tr, &w_s, &pose, &cfg.selection.psi, proj, arch)?;

    // the geometry term regularizes at an independently sampled pose drawn
    // from the full orbit, so it constrains views the reconstruction term
    // never sees
    let pose_g = sample_pose_wide(&mut rng, arch.cam_radius)?;
    let mut masks = Vec::with_capacity(cfg.selection.psi_hat.len());
    let out_t = generator_forward_from_w(&w_tr[0], &pose, &local, arch)?;
    let out_s = generator_forward_from_w(&w_s[0], &pose, &src_frozen, arch)?;
    let out_tg = generator_forward_from_w(&w_tr[0], &pose_g, &local, arch)?;
    let out_sg = generator_forward_from_w(&w_s[0], &pose_g, &src_frozen, arch)?;
    // the target mask stays differentiable: through it the geometry term
    // pulls the adapted model's opacity distribution toward the frozen
    // source's, which is the whole point of L_g
    for _ in &cfg.selection.psi_hat {
        masks.push(MaskPair::new(
            out_tg.alpha.clone(),
            detached_mask(&out_sg.alpha)?,
        )?);
    }
    let lg = geometry_loss(
        &local,
        &w_tr[..1],
        &w_s[..1],
        &pose_g,
        &cfg.selection.psi_hat,
        &masks,
        proj,
        arch,
    )?;
    let li = image_quality_loss(&out_t.image, &out_s.image.detach())?;
    let ltr = transfer_total(&ls, &lg, &li, &cfg.transfer)?;

    let target = real_image(&client.scene, &pose, arch)?;
    let recon = out_t.image.sub(&target)?.square()?.mean()?;
    let total = ltr.add(&recon.mul_scalar(cfg.recon_weight)?)?;
    let metrics = LocalMetrics {
        loss_d: ls.item(),
        loss_g: ltr.item(),
        loss_aux: recon.item(),
    };
    total.backward()?;
    local.sgd_step(cfg.lr, trainable);
    local.zero_grads();
    Ok((local, metrics))
}

/// Domain-transfer loop: geometry/viewpoint layers frozen before
/// `freeze_round`, uploads and aggregation restricted to trainable tags,
/// EMA applied throughout. loss_d column logs L_s, loss_g logs L_tr, and
/// loss_aux logs the target reconstruction error.
pub fn run_transfer(
    clients: &[ClientProfile],
    source: &TaggedParamSet,
    arch: &GeneratorArch,
    cfg: &TransferRunCfg,
) -> Result<(TaggedParamSet, Vec<RoundLog>)> {
    let (model, logs, _) = run_transfer_snapshots(clients, source, arch, cfg)?;
    Ok((model, logs))
}

/// run_transfer that additionally returns the post-EMA global model after
/// every round, for held-out evaluation of adaptation speed.
pub fn run_transfer_snapshots(
    clients: &[ClientProfile],
    source: &TaggedParamSet,
    arch: &GeneratorArch,
    cfg: &TransferRunCfg,
) -> Result<(TaggedParamSet, Vec<RoundLog>, Vec<TaggedParamSet>)> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("run_transfer", "no clients"));
    }
    let proj = ProjectionSet::new(cfg.n_proj, crate::rng::derive(&[cfg.seed, 0x5d]))?;
    let mut ema = EmaState::new(source, cfg.ema_decay)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    let mut snapshots = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let trainable = freeze_plan(round, cfg.transfer.freeze_round);
        let selected = select_clients(clients.len(), cfg.fraction, round, cfg.seed)?;
        let global = ema.params.detached();
        let mut uploads = Vec::new();
        let mut records = Vec::new();
        for &ci in &selected {
            let t0 = Instant::now();
            let client = &clients[ci];
            let (trained, metrics) = local_transfer_step(
                client, &global, source, arch, cfg, &trainable, &proj, round,
            )?;
            let up = trained.subset(&trainable)?;
            records.push(ClientRecord {
                client_id: client.id,
                kind: client.kind,
                loss_d: metrics.loss_d,
                loss_g: metrics.loss_g,
                loss_aux: metrics.loss_aux,
                bytes_up: up.bytes() as u64,
                uploaded_tags: up.tags_present().into_iter().collect(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            uploads.push(Upload {
                client_id: client.id,
                size: client.dataset.size,
                params: up,
            });
        }
        // frozen tags are carried over from the current global unchanged
        let mut aggregate = aggregate_weighted_partial(&uploads)?;
        for (name, tag, t) in global.iter() {
            if !trainable.contains(&tag) {
                aggregate.insert(name, tag, t.detach());
            }
        }
        for tag in LayerTag::ALL {
            if !aggregate.tags_present().contains(&tag) {
                return Err(Error::UncoveredTag(tag.as_str().to_string(), round));
            }
        }
        ema.apply(&aggregate)?;
        snapshots.push(ema.params.detached());
        let n = records.len().max(1) as f64;
        logs.push(RoundLog {
            round,
            agg_loss_d: records.iter().map(|r| r.loss_d).sum::<f64>() / n,
            agg_loss_g: records.iter().map(|r| r.loss_g).sum::<f64>() / n,
            agg_loss_aux: records.iter().map(|r| r.loss_aux).sum::<f64>() / n,
            records,
        });
    }
    Ok((ema.params, logs, snapshots))
}

/// Weighted averaging without the full-coverage requirement (used when the
/// freeze schedule legitimately restricts uploads to a tag subset).
fn aggregate_weighted_partial(uploads: &[Upload]) -> Result<TaggedParamSet> {
    if uploads.is_empty() {
        return Err(Error::invalid("aggregate_weighted", "no uploads"));
    }
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut sums: std::collections::BTreeMap<String, (LayerTag, Vec<f64>, f64)> =
        std::collections::BTreeMap::new();
    for u in &order {
        let w = u.size as f64;
        for (name, tag, t) in u.params.iter() {
            let data = t.data();
            let entry = sums
                .entry(name.to_string())
                .or_insert_with(|| (tag, vec![0.0; data.len()], 0.0));
            for (acc, v) in entry.1.iter_mut().zip(&data) {
                *acc += w * v;
            }
            entry.2 += w;
        }
    }
    let mut out = TaggedParamSet::new();
    for (name, (tag, sum, total)) in &sums {
        let avg: Vec<f64> = sum.iter().map(|v| v / total).collect();
        let n = avg.len();
        out.insert(name, *tag, Tensor::from_vec(vec![n], avg)?);
    }
    Ok(out)
}

/// Build a roster of toy clients: horizontal clients share the reference
/// feature space with disjoint sample IDs, vertical clients the reverse.
pub fn make_roster(
    n_horizontal: usize,
    n_vertical: usize,
    arch: &GeneratorArch,
    seed: u64,
    shifted_domain: bool,
) -> Result<Vec<ClientProfile>> {
    let reference_features: BTreeSet<String> = (0..8).map(|i| format!("feat{}", i)).collect();
    let reference_ids: BTreeSet<String> = (0..8).map(|i| format!("id{}", i)).collect();
    let classify = ClassifyCfg::default();
    let mut clients = Vec::new();
    let input_dim = arch.final_res() * arch.final_res() * 3;
    for i in 0..n_horizontal + n_vertical {
        let horizontal = i < n_horizontal;
        let dataset = if horizontal {
            DatasetDescriptor {
                features: reference_features.clone(),
                ids: (0..4).map(|j| format!("own{}_{}", i, j)).collect(),
                size: 2 + (i % 3),
            }
        } else {
            DatasetDescriptor {
                features: (0..4).map(|j| format!("pose{}_{}", i, j)).collect(),
                ids: reference_ids.clone(),
                size: 2 + (i % 3),
            }
        };
        let kind = classify_dataset(i, &dataset, &reference_features, &reference_ids, &classify)?;
        let scene_seed = crate::rng::derive(&[seed, 0x5ce, i as u64]);
        let scene = if shifted_domain {
            SceneOracle::toy_shifted(scene_seed)
        } else {
            SceneOracle::toy(scene_seed)
        };
        let hyper = if kind == ClientKind::Vertical {
            Some(crate::renderer::init_generator(
                arch,
                crate::rng::derive(&[seed, 0x47, i as u64]),
            ))
        } else {
            None
        };
        clients.push(ClientProfile {
            id: i,
            kind,
            dataset,
            scene,
            disc: init_discriminator(input_dim, &[32], crate::rng::derive(&[seed, 0xd, i as u64])),
            hyper,
        });
    }
    Ok(clients)
}
