//! Wireless delivery model: Shannon rates over block-fading links, FoV-based
//! user grouping, and the latency decomposition (pre-render, transmit,
//! post-process) of the individual, tile-based, and multicast-synthesizing
//! delivery schemes, plus the AWGN image-degradation channel.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct UserLink {
    pub id: usize,
    /// Linear channel power gain.
    pub gain: f64,
    /// Transmit power, W.
    pub power: f64,
    /// Allocated bandwidth, Hz.
    pub bandwidth: f64,
    /// Noise power, W.
    pub noise: f64,
}

impl UserLink {
    pub fn validate(&self) -> Result<()> {
        if self.gain <= 0.0 || self.power <= 0.0 || self.bandwidth <= 0.0 || self.noise <= 0.0 {
            return Err(Error::invalid(
                "user_link",
                format!("link {} requires positive gain/power/bandwidth/noise", self.id),
            ));
        }
        Ok(())
    }
}

/// Spectral efficiency, bits/s/Hz.
pub fn rate(link: &UserLink) -> f64 {
    (1.0 + link.power * link.gain / link.noise).log2()
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Viewport {
    pub pitch: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ContentItem {
    /// Frame size, bits.
    pub bits: f64,
    /// Render cost, cycles per bit.
    pub cycles_per_bit: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ServerCfg {
    /// Edge CPU capacity, cycles/s.
    pub cpu: f64,
    /// Per-device post-processing constant, s.
    pub post_process_s: f64,
}

#[derive(Debug, Clone)]
pub struct GroupPlan {
    /// Partition of user indices (into the link/viewport slices).
    pub groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn validate(&self, n_users: usize) -> Result<()> {
        let mut seen = vec![false; n_users];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::invalid("group_plan", "empty group"));
            }
            for &u in g {
                if u >= n_users || seen[u] {
                    return Err(Error::invalid(
                        "group_plan",
                        format!("user {} missing or duplicated", u),
                    ));
                }
                seen[u] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::invalid("group_plan", "not a partition"));
        }
        Ok(())
    }

    /// Quantile partition of users sorted by ascending rate. Boundaries at
    /// floor(K·j/G) make the total multicast transmit latency provably
    /// non-decreasing in the group count.
    pub fn quantile(links: &[UserLink], n_groups: usize) -> Result<GroupPlan> {
        if n_groups == 0 || n_groups > links.len() {
            return Err(Error::invalid(
                "group_plan",
                format!("{} groups for {} users", n_groups, links.len()),
            ));
        }
        let mut order: Vec<usize> = (0..links.len()).collect();
        order.sort_by(|&a, &b| rate(&links[a]).partial_cmp(&rate(&links[b])).unwrap());
        let k = links.len();
        let bound = |j: usize| k * j / n_groups;
        let groups = (0..n_groups)
            .map(|j| order[bound(j)..bound(j + 1)].to_vec())
            .collect();
        Ok(GroupPlan { groups })
    }
}

/// Greedy FoV clustering: sweep users in yaw order, starting a new group
/// whenever the distance to the current group's seed exceeds the threshold.
pub fn group_users(viewports: &[Viewport], angular_threshold: f64) -> Result<GroupPlan> {
    if angular_threshold <= 0.0 {
        return Err(Error::invalid("group_users", "threshold must be positive"));
    }
    if viewports.is_empty() {
        return Err(Error::invalid("group_users", "no viewports"));
    }
    let mut order: Vec<usize> = (0..viewports.len()).collect();
    order.sort_by(|&a, &b| {
        viewports[a]
            .yaw
            .partial_cmp(&viewports[b].yaw)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seed_yaw = f64::NEG_INFINITY;
    for u in order {
        if groups.is_empty() || (viewports[u].yaw - seed_yaw).abs() > angular_threshold {
            seed_yaw = viewports[u].yaw;
            groups.push(vec![u]);
        } else {
            groups.last_mut().unwrap().push(u);
        }
    }
    Ok(GroupPlan { groups })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatencyBreakdown {
    pub scheme: String,
    /// Pre-render latency, s.
    pub l_r: f64,
    /// Transmit latency, s.
    pub l_t: f64,
    /// Post-process (+ synthesis) latency, s.
    pub l_p: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.l_r + self.l_t + self.l_p
    }
}

fn check_links(links: &[UserLink]) -> Result<()> {
    if links.is_empty() {
        return Err(Error::invalid("latency", "no users"));
    }
    for l in links {
        l.validate()?;
    }
    Ok(())
}

/// One render and one unicast stream per user.
pub fn individual_latency(
    links: &[UserLink],
    content: &ContentItem,
    server: &ServerCfg,
) -> Result<LatencyBreakdown> {
    check_links(links)?;
    let l_r = links.len() as f64 * content.cycles_per_bit * content.bits / server.cpu;
    let l_t: f64 = links
        .iter()
        .map(|l| content.bits / (l.bandwidth * rate(l)))
        .sum();
    Ok(LatencyBreakdown {
        scheme: "individual".to_string(),
        l_r,
        l_t,
        l_p: server.post_process_s,
    })
}

/// One render and one multicast stream per group, paced by the group's worst
/// link; clients synthesize their own viewpoint, adding synthesis latency.
pub fn multicast_latency(
    plan: &GroupPlan,
    links: &[UserLink],
    content: &ContentItem,
    server: &ServerCfg,
    synthesis_s: f64,
) -> Result<LatencyBreakdown> {
    check_links(links)?;
    plan.validate(links.len())?;
    if synthesis_s < 0.0 {
        return Err(Error::invalid("multicast_latency", "negative synthesis latency"));
    }
    let l_r = plan.groups.len() as f64 * content.cycles_per_bit * content.bits / server.cpu;
    let mut l_t = 0.0;
    for g in &plan.groups {
        let worst = g
            .iter()
            .map(|&u| &links[u])
            .min_by(|a, b| rate(a).partial_cmp(&rate(b)).unwrap())
            .unwrap();
        l_t += content.bits / (worst.bandwidth * rate(worst));
    }
    Ok(LatencyBreakdown {
        scheme: "multicast".to_string(),
        l_r,
        l_t,
        l_p: server.post_process_s + synthesis_s,
    })
}

/// Shared tiles (fraction `s` of the frame) are rendered once and multicast
/// at the worst rate; the remaining tiles are rendered and unicast per user.
pub fn tile_latency(
    links: &[UserLink],
    content: &ContentItem,
    shared_fraction: f64,
    server: &ServerCfg,
) -> Result<LatencyBreakdown> {
    check_links(links)?;
    if !(0.0..=1.0).contains(&shared_fraction) {
        return Err(Error::invalid("tile_latency", "shared_fraction must be in [0, 1]"));
    }
    let s = shared_fraction;
    let k = links.len() as f64;
    let l_r = content.cycles_per_bit * content.bits * (s + k * (1.0 - s)) / server.cpu;
    let worst = links
        .iter()
        .min_by(|a, b| rate(a).partial_cmp(&rate(b)).unwrap())
        .unwrap();
    let shared_t = if s > 0.0 {
        s * content.bits / (worst.bandwidth * rate(worst))
    } else {
        0.0
    };
    let unique_t: f64 = links
        .iter()
        .map(|l| (1.0 - s) * content.bits / (l.bandwidth * rate(l)))
        .sum();
    Ok(LatencyBreakdown {
        scheme: "tile".to_string(),
        l_r,
        l_t: shared_t + unique_t,
        l_p: server.post_process_s,
    })
}

/// Additive white Gaussian noise at a target SNR; the drawn noise is
/// rescaled so its empirical power hits the target exactly before the final
/// clamp to [0, 1]. A zero image uses unit reference power.
pub fn degrade_image(image: &Tensor, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("degrade_image", "snr_db must be finite"));
    }
    let data = image.data();
    if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("degrade_image", "image values must lie in [0, 1]"));
    }
    let n = data.len();
    let p_sig = data.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let p_ref = if p_sig > 0.0 { p_sig } else { 1.0 };
    let p_noise = p_ref / 10f64.powf(snr_db / 10.0);
    let raw = normal_vec(rng, n);
    let p_raw = raw.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = (p_noise / p_raw).sqrt();
    let noisy: Vec<f64> = data
        .iter()
        .zip(&raw)
        .map(|(x, e)| (x + scale * e).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(image.shape(), noisy)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetCfg {
    pub power: f64,
    pub noise: f64,
    pub bandwidth: f64,
    pub frame_bits: f64,
    pub cycles_per_bit: f64,
    pub cpu: f64,
    pub post_process_s: f64,
    pub synthesis_s: f64,
    pub shared_fraction: f64,
}

impl Default for NetCfg {
    fn default() -> Self {
        NetCfg {
            power: 1.0,
            noise: 1e-2,
            bandwidth: 1e7,
            frame_bits: 8e6,
            cycles_per_bit: 10.0,
            cpu: 1e10,
            post_process_s: 0.01,
            synthesis_s: 0.08,
            shared_fraction: 0.2,
        }
    }
}

impl NetCfg {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("power", self.power),
            ("noise", self.noise),
            ("bandwidth", self.bandwidth),
            ("frame_bits", self.frame_bits),
            ("cycles_per_bit", self.cycles_per_bit),
            ("cpu", self.cpu),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("net.{} must be positive", name)));
            }
        }
        if self.post_process_s < 0.0 || self.synthesis_s < 0.0 {
            return Err(Error::Config("net latencies must be nonnegative".to_string()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config("net.shared_fraction must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    pub fn content(&self) -> ContentItem {
        ContentItem {
            bits: self.frame_bits,
            cycles_per_bit: self.cycles_per_bit,
        }
    }

    pub fn server(&self) -> ServerCfg {
        ServerCfg {
            cpu: self.cpu,
            post_process_s: self.post_process_s,
        }
    }

    /// Block-fading links: exponential power gains attenuated by the square
    /// of a random distance in a semicircular cell.
    pub fn random_links(&self, k: usize, seed: u64) -> Vec<UserLink> {
        let mut rng = rng_from(&[seed, 0x11c4]);
        (0..k)
            .map(|id| {
                let fade: f64 = -(1.0 - rng.gen::<f64>()).ln();
                let dist: f64 = 0.2 + 0.8 * rng.gen::<f64>();
                UserLink {
                    id,
                    gain: fade / (dist * dist),
                    power: self.power,
                    bandwidth: self.bandwidth,
                    noise: self.noise,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub enum SweepVariable {
    /// Vary the user count with a fixed group count.
    Users { from: usize, to: usize, groups: usize },
    /// Vary the group count with a fixed user count.
    Groups { users: usize },
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sweep_var: usize,
    pub breakdown: LatencyBreakdown,
}

/// Evaluate all three delivery schemes across the swept variable.
pub fn sweep(var: SweepVariable, cfg: &NetCfg, seed: u64) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut push_point = |x: usize, links: &[UserLink], n_groups: usize| -> Result<()> {
        let plan = GroupPlan::quantile(links, n_groups)?;
        for b in [
            individual_latency(links, &cfg.content(), &cfg.server())?,
            tile_latency(links, &cfg.content(), cfg.shared_fraction, &cfg.server())?,
            multicast_latency(&plan, links, &cfg.content(), &cfg.server(), cfg.synthesis_s)?,
        ] {
            rows.push(SweepRow {
                sweep_var: x,
                breakdown: b,
            });
        }
        Ok(())
    };
    match var {
        SweepVariable::Users { from, to, groups } => {
            if from < groups.max(1) || to < from {
                return Err(Error::invalid("sweep", "bad user range"));
            }
            for k in from..=to {
                let links = cfg.random_links(k, seed);
                push_point(k, &links, groups)?;
            }
        }
        SweepVariable::Groups { users } => {
            if users == 0 {
                return Err(Error::invalid("sweep", "no users"));
            }
            let links = cfg.random_links(users, seed);
            for g in 1..=users {
                push_point(g, &links, g)?;
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sweep_var,scheme,L_r,L_t,L_p,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            r.sweep_var,
            r.breakdown.scheme,
            r.breakdown.l_r,
            r.breakdown.l_t,
            r.breakdown.l_p,
            r.breakdown.total()
        ));
    }
    out
}
