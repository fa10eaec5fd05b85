//! Analytic toy scene: Gaussian density blobs with fixed colors. Serves as
//! the ground-truth data generator for client datasets and oracles.

use rand::Rng;

use super::{cast_ray, render_ray, sample_depths, CameraPose};
use crate::error::Result;
use crate::rng::rng_from;

#[derive(Debug, Clone)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SceneOracle {
    pub blobs: Vec<Blob>,
}

impl SceneOracle {
    /// Density is a sum of Gaussian bumps, nonnegative everywhere.
    pub fn density(&self, p: [f64; 3]) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let d2 = (0..3).map(|i| (p[i] - b.center[i]).powi(2)).sum::<f64>();
                b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    }

    /// Density-weighted blend of blob colors, in [0, 1]^3.
    pub fn color(&self, p: [f64; 3]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut wsum = 1e-12;
        for b in &self.blobs {
            let d2 = (0..3).map(|i| (p[i] - b.center[i]).powi(2)).sum::<f64>();
            let w = b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            wsum += w;
            for c in 0..3 {
                acc[c] += w * b.color[c];
            }
        }
        [
            (acc[0] / wsum).clamp(0.0, 1.0),
            (acc[1] / wsum).clamp(0.0, 1.0),
            (acc[2] / wsum).clamp(0.0, 1.0),
        ]
    }

    /// Seeded scene with a few blobs inside the unit sphere.
    pub fn toy(seed: u64) -> SceneOracle {
        let mut rng = rng_from(&[seed, 0x5ce9e]);
        let n = 3;
        let blobs = (0..n)
            .map(|_| Blob {
                center: [
                    rng.gen_range(-0.45..0.45),
                    rng.gen_range(-0.45..0.45),
                    rng.gen_range(-0.45..0.45),
                ],
                sigma: rng.gen_range(0.18..0.3),
                amplitude: rng.gen_range(2.0..4.0),
                color: [
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                ],
            })
            .collect();
        SceneOracle { blobs }
    }

    /// Target domain for transfer experiments: appearance-dominant shift.
    /// Geometry is almost preserved (small positional jitter) while colors
    /// are remapped strongly, so source-domain geometry remains useful.
    pub fn toy_shifted(seed: u64) -> SceneOracle {
        let mut scene = SceneOracle::toy(seed);
        for (i, b) in scene.blobs.iter_mut().enumerate() {
            b.center[1] += if i % 2 == 0 { 0.05 } else { -0.05 };
            b.color = [1.0 - b.color[1], b.color[2], 1.0 - b.color[0]];
        }
        scene
    }

    /// Render an RGB image (row-major H x W x 3) from the given pose using
    /// the same quadrature as the learned renderer.
    pub fn render(
        &self,
        pose: &CameraPose,
        res: usize,
        n_samples: usize,
        near: f64,
        far: f64,
        fov_rad: f64,
    ) -> Result<Vec<f64>> {
        let mut rng = rng_from(&[0]);
        let depths = sample_depths(near, far, n_samples, false, &mut rng)?;
        let mut img = Vec::with_capacity(res * res * 3);
        for row in 0..res {
            for col in 0..res {
                let ray = cast_ray(pose, (row, col), (res, res), fov_rad)?;
                let pts: Vec<[f64; 3]> = depths.iter().map(|&q| ray.point_at(q)).collect();
                let dens: Vec<f64> = pts.iter().map(|&p| self.density(p)).collect();
                let cols: Vec<[f64; 3]> = pts.iter().map(|&p| self.color(p)).collect();
                let px = render_ray(&dens, &cols, &depths)?;
                img.extend_from_slice(&px);
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_nonnegative_color_bounded() {
        let s = SceneOracle::toy(3);
        let mut rng = rng_from(&[9]);
        for _ in 0..200 {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            assert!(s.density(p) >= 0.0);
            for c in s.color(p) {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn render_pixels_in_unit_range() {
        let s = SceneOracle::toy(5);
        let pose = CameraPose::orbit(0.1, 0.3, 1.5).unwrap();
        let img = s.render(&pose, 8, 16, 0.5, 2.5, 0.9).unwrap();
        assert_eq!(img.len(), 8 * 8 * 3);
        for v in img {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn shifted_domain_differs() {
        let a = SceneOracle::toy(5);
        let b = SceneOracle::toy_shifted(5);
        let pose = CameraPose::orbit(0.0, 0.0, 1.5).unwrap();
        let ia = a.render(&pose, 8, 16, 0.5, 2.5, 0.9).unwrap();
        let ib = b.render(&pose, 8, 16, 0.5, 2.5, 0.9).unwrap();
        let mse: f64 = ia.iter().zip(&ib).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ia.len() as f64;
        assert!(mse > 1e-3, "domains too similar: {}", mse);
    }
}
