//! Random diffeomorphic displacement fields from Gaussian-kernel velocity
//! fields.
//!
//! A field is built by moving every lattice node through `t_max` explicit
//! Euler steps of `v(x) = Σ_k K(x, c_k) α_k`, with momenta and centers redrawn
//! from narrow per-sample windows at every step. Each step must pass two
//! gates: the closed-form W¹,∞ bound of the step map stays below 1, and the
//! accumulated map keeps every voxel above `v_thresh` mm³.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{min_voxel_volume_raw, DisplacementField, Grid};
use crate::{par, Error, Mat3, Result, Vec3};

/// `sup_x |∇K(x, c)| = e^{-1/2} / σ` for the Gaussian kernel.
const GRAD_PEAK: f64 = 0.606_530_659_712_633_4;

/// Gaussian kernel `exp(-|x - c|² / (2σ²))`.
#[inline]
pub fn kernel_eval(x: &Vec3, c: &Vec3, sigma: f64) -> f64 {
    (-(x - c).norm_squared() / (2.0 * sigma * sigma)).exp()
}

/// Control points and momenta of one velocity field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPointSystem {
    centers: Vec<Vec3>,
    momenta: Vec<Vec3>,
    sigma: f64,
}

impl ControlPointSystem {
    pub fn new(centers: Vec<Vec3>, momenta: Vec<Vec3>, sigma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument("need at least one control point".into()));
        }
        if centers.len() != momenta.len() {
            return Err(Error::InvalidArgument(format!(
                "{} centers but {} momenta",
                centers.len(),
                momenta.len()
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel width must be positive, got {sigma}"
            )));
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !centers.iter().all(finite) || !momenta.iter().all(finite) {
            return Err(Error::NonFinite("control point coordinates".into()));
        }
        Ok(ControlPointSystem {
            centers,
            momenta,
            sigma,
        })
    }

    pub fn n_cp(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    pub fn momenta(&self) -> &[Vec3] {
        &self.momenta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `v(x) = Σ_k K(x, c_k) α_k`.
    #[inline]
    pub fn velocity(&self, x: &Vec3) -> Vec3 {
        let inv = -0.5 / (self.sigma * self.sigma);
        self.centers
            .iter()
            .zip(&self.momenta)
            .fold(Vec3::zeros(), |acc, (c, a)| {
                acc + a * ((x - c).norm_squared() * inv).exp()
            })
    }

    /// Velocity and its spatial Jacobian `∂v_a/∂x_b`.
    pub fn velocity_and_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let s2 = self.sigma * self.sigma;
        let mut v = Vec3::zeros();
        let mut jac = Mat3::zeros();
        for (c, a) in self.centers.iter().zip(&self.momenta) {
            let d = x - c;
            let k = (-d.norm_squared() / (2.0 * s2)).exp();
            v += a * k;
            jac += a * (d * (-k / s2)).transpose();
        }
        (v, jac)
    }
}

/// Closed-form upper bound on `sup_x (|v(x)| + |∇v(x)|)`:
/// `Σ_k |α_k| (1 + e^{-1/2}/σ)`.
pub fn w1inf_upper_bound(sys: &ControlPointSystem) -> f64 {
    let total: f64 = sys.momenta.iter().map(|a| a.norm()).sum();
    total * (1.0 + GRAD_PEAK / sys.sigma)
}

/// Probe-based estimate of the same norm: max over `points` of
/// `|v| + |∇v|_F`. Always below [`w1inf_upper_bound`]; diagnostic only.
pub fn w1inf_probe(sys: &ControlPointSystem, points: &[Vec3]) -> f64 {
    points
        .iter()
        .map(|p| {
            let (v, j) = sys.velocity_and_jacobian(p);
            v.norm() + j.norm()
        })
        .fold(0.0, f64::max)
}

/// Domain-randomization parameters for field generation.
///
/// Momenta are millimeters of displacement per unit time; the unit time
/// interval is split into `t_max` Euler steps. Center ranges are measured from
/// the lattice's first node (its `origin`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationParams {
    pub alpha_mean_range: [f64; 2],
    pub center_mean_range: [f64; 2],
    pub w_alpha: f64,
    pub w_c: f64,
    pub t_max: usize,
    pub v_thresh: f64,
    pub n_cp: usize,
    pub sigma: f64,
    pub max_retries: usize,
}

impl Default for RandomizationParams {
    fn default() -> Self {
        RandomizationParams {
            alpha_mean_range: [0.0, 10.0],
            center_mean_range: [12.0, 72.0],
            w_alpha: 0.001,
            w_c: 0.6,
            t_max: 100,
            v_thresh: 0.75,
            n_cp: 4,
            sigma: 15.0,
            max_retries: 20,
        }
    }
}

impl RandomizationParams {
    /// Parameters that generate the zero field.
    pub fn zero() -> Self {
        RandomizationParams {
            alpha_mean_range: [0.0, 0.0],
            w_alpha: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, r) in [
            ("alpha_mean_range", self.alpha_mean_range),
            ("center_mean_range", self.center_mean_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} must be an ordered finite range, got {r:?}"));
            }
        }
        if !(self.w_alpha >= 0.0 && self.w_c >= 0.0) {
            return bad(format!(
                "window widths must be non-negative, got w_alpha={} w_c={}",
                self.w_alpha, self.w_c
            ));
        }
        if !(self.v_thresh > 0.0) {
            return bad(format!("v_thresh must be positive, got {}", self.v_thresh));
        }
        if self.n_cp == 0 {
            return bad("n_cp must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Per-sample record of what the integrator did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub accepted_steps: usize,
    pub total_retries: usize,
    /// Step index at which integration stopped early, if it did.
    pub halted_at: Option<usize>,
    pub final_min_voxel_volume: f64,
    /// W¹,∞ bound of every accepted step map.
    pub step_bounds: Vec<f64>,
    pub alpha_means: Vec<[f64; 3]>,
    pub center_means: Vec<[f64; 3]>,
}

impl GenerationLog {
    pub fn max_step_bound(&self) -> f64 {
        self.step_bounds.iter().copied().fold(0.0, f64::max)
    }
}

#[inline]
fn draw_window<R: Rng + ?Sized>(rng: &mut R, mean: f64, width: f64) -> f64 {
    mean + width * (rng.random::<f64>() - 0.5)
}

#[inline]
fn draw_range<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Generates one random diffeomorphic field on `grid`.
///
/// Steps failing either gate are redrawn up to `max_retries` times; if a step
/// still fails, integration stops and the accumulated field is kept. Failing
/// the very first step is an error.
#[allow(clippy::needless_range_loop)]
pub fn generate_dvf<R: Rng + ?Sized>(
    grid: &Grid,
    params: &RandomizationParams,
    rng: &mut R,
) -> Result<(DisplacementField, GenerationLog)> {
    params.validate()?;
    grid.validate()?;
    if grid.dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidArgument(format!(
            "field lattice needs at least 3 nodes per axis, got {:?}",
            grid.dims
        )));
    }
    let n = grid.len();
    let n_cp = params.n_cp;
    let anchor = Vec3::from(grid.origin);

    let mut alpha_means = Vec::with_capacity(n_cp);
    let mut center_means = Vec::with_capacity(n_cp);
    for _ in 0..n_cp {
        let a = [0; 3].map(|_| draw_range(rng, params.alpha_mean_range));
        alpha_means.push(a);
    }
    for _ in 0..n_cp {
        let c = [0; 3].map(|_| draw_range(rng, params.center_mean_range));
        center_means.push(c);
    }

    // Current node positions, split per axis.
    let mut pos: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for idx in 0..n {
        let [i, j, k] = grid.coords(idx);
        let p = grid.node_world(i, j, k);
        for a in 0..3 {
            pos[a][idx] = p[a];
        }
    }
    let start = pos.clone();
    // Displacement of the trial map, x_{t+1} - x_0.
    let mut trial: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    let mut log = GenerationLog {
        accepted_steps: 0,
        total_retries: 0,
        halted_at: None,
        final_min_voxel_volume: grid.voxel_volume(),
        step_bounds: Vec::with_capacity(params.t_max),
        alpha_means: alpha_means.clone(),
        center_means: center_means.clone(),
    };
    if params.t_max == 0 {
        return Ok((DisplacementField::zeros(*grid, 3)?, log));
    }
    let dt = 1.0 / params.t_max as f64;

    'steps: for t in 0..params.t_max {
        let mut last_reason = String::new();
        for attempt in 0..=params.max_retries {
            if attempt > 0 {
                log.total_retries += 1;
            }
            let mut centers = Vec::with_capacity(n_cp);
            let mut momenta = Vec::with_capacity(n_cp);
            for kp in 0..n_cp {
                let a = Vec3::new(
                    draw_window(rng, alpha_means[kp][0], params.w_alpha),
                    draw_window(rng, alpha_means[kp][1], params.w_alpha),
                    draw_window(rng, alpha_means[kp][2], params.w_alpha),
                );
                let c = Vec3::new(
                    draw_window(rng, center_means[kp][0], params.w_c),
                    draw_window(rng, center_means[kp][1], params.w_c),
                    draw_window(rng, center_means[kp][2], params.w_c),
                );
                momenta.push(a * dt);
                centers.push(anchor + c);
            }
            let sys = ControlPointSystem::new(centers, momenta, params.sigma)?;
            let bound = w1inf_upper_bound(&sys);
            if bound >= 1.0 {
                last_reason = format!("step W1,inf bound {bound:.4} >= 1");
                continue;
            }

            advance(&sys, &pos, &start, &mut trial);
            let vmin = min_voxel_volume_raw(grid, [&trial[0], &trial[1], &trial[2]]);
            if !(vmin >= params.v_thresh) {
                last_reason = format!(
                    "min voxel volume {vmin:.4} mm^3 below threshold {} mm^3",
                    params.v_thresh
                );
                continue;
            }

            for a in 0..3 {
                for idx in 0..n {
                    pos[a][idx] = start[a][idx] + trial[a][idx];
                }
            }
            log.accepted_steps += 1;
            log.step_bounds.push(bound);
            log.final_min_voxel_volume = vmin;
            continue 'steps;
        }
        if t == 0 {
            return Err(Error::Generation {
                step: 0,
                reason: format!(
                    "no admissible first step after {} retries: {last_reason}",
                    params.max_retries
                ),
            });
        }
        log.halted_at = Some(t);
        break;
    }

    let mut data = vec![0.0; 3 * n];
    for a in 0..3 {
        for idx in 0..n {
            data[a * n + idx] = pos[a][idx] - start[a][idx];
        }
    }
    Ok((DisplacementField::new(*grid, 3, data)?, log))
}

/// Writes `x + v(x) - x_0` for every node into `out`.
fn advance(sys: &ControlPointSystem, pos: &[Vec<f64>; 3], start: &[Vec<f64>; 3], out: &mut [Vec<f64>; 3]) {
    const CHUNK: usize = 1024;
    let n = pos[0].len();
    let mut moved: Vec<[f64; 3]> = vec![[0.0; 3]; n];
    par::for_each_chunk(&mut moved, CHUNK, |c, chunk| {
        let base = c * CHUNK;
        for (off, slot) in chunk.iter_mut().enumerate() {
            let idx = base + off;
            let x = Vec3::new(pos[0][idx], pos[1][idx], pos[2][idx]);
            let v = sys.velocity(&x);
            *slot = [
                x.x + v.x - start[0][idx],
                x.y + v.y - start[1][idx],
                x.z + v.z - start[2][idx],
            ];
        }
    });
    for (idx, m) in moved.iter().enumerate() {
        for a in 0..3 {
            out[a][idx] = m[a];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::min_voxel_volume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> Grid {
        Grid::new([16, 16, 16], [5.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn kernel_values() {
        let c = Vec3::new(1.0, -2.0, 3.0);
        assert_eq!(kernel_eval(&c, &c, 2.5), 1.0);
        let sigma = 2.5;
        let x = c + Vec3::new(0.6, 0.0, 0.8) * sigma;
        assert!((kernel_eval(&x, &c, sigma) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel_eval(&x, &c, sigma) - 0.60653).abs() < 1e-5);
        let far = c + Vec3::new(0.0, 10.0 * sigma, 0.0);
        assert!(kernel_eval(&far, &c, sigma) < 1e-21);
    }

    #[test]
    fn velocity_cases() {
        let c1 = Vec3::new(10.0, 20.0, 30.0);
        let c2 = Vec3::new(15.0, 18.0, 33.0);
        let a1 = Vec3::new(1.0, -2.0, 0.5);
        let a2 = Vec3::new(-0.3, 0.7, 2.0);
        let zero = ControlPointSystem::new(vec![c1, c2], vec![Vec3::zeros(); 2], 4.0).unwrap();
        assert_eq!(zero.velocity(&Vec3::new(3.0, 4.0, 5.0)), Vec3::zeros());

        let one = ControlPointSystem::new(vec![c1], vec![a1], 4.0).unwrap();
        assert_eq!(one.velocity(&c1), a1);

        let two = ControlPointSystem::new(vec![c1, c2], vec![a1, a2], 4.0).unwrap();
        let x = Vec3::new(12.0, 19.0, 31.0);
        let oracle = a1 * kernel_eval(&x, &c1, 4.0) + a2 * kernel_eval(&x, &c2, 4.0);
        assert!((two.velocity(&x) - oracle).amax() < 1e-12);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let sys = ControlPointSystem::new(
            vec![Vec3::new(0.0, 1.0, 2.0), Vec3::new(3.0, -1.0, 0.5)],
            vec![Vec3::new(1.0, 0.5, -0.2), Vec3::new(-0.4, 0.9, 0.3)],
            2.0,
        )
        .unwrap();
        let x = Vec3::new(1.0, 0.2, 1.1);
        let (_, jac) = sys.velocity_and_jacobian(&x);
        let h = 1e-6;
        for b in 0..3 {
            let mut e = Vec3::zeros();
            e[b] = h;
            let d = (sys.velocity(&(x + e)) - sys.velocity(&(x - e))) / (2.0 * h);
            for a in 0..3 {
                assert!((jac[(a, b)] - d[a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bound_closed_forms() {
        let zero = ControlPointSystem::new(vec![Vec3::zeros()], vec![Vec3::zeros()], 1.0).unwrap();
        assert_eq!(w1inf_upper_bound(&zero), 0.0);
        let unit = ControlPointSystem::new(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.6, 0.8)], 1.0).unwrap();
        let b = w1inf_upper_bound(&unit);
        assert!((b - (1.0 + (-0.5f64).exp())).abs() < 1e-12);
        assert!((b - 1.60653).abs() < 1e-5);
    }

    #[test]
    fn bound_dominates_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..5);
            let sigma = rng.random_range(0.5..20.0);
            let rv = |rng: &mut ChaCha8Rng, s: f64| {
                Vec3::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                )
            };
            let centers = (0..n).map(|_| rv(&mut rng, 30.0)).collect();
            let momenta = (0..n).map(|_| rv(&mut rng, 3.0)).collect();
            let sys = ControlPointSystem::new(centers, momenta, sigma).unwrap();
            let probes: Vec<Vec3> = (0..2000).map(|_| rv(&mut rng, 40.0)).collect();
            assert!(w1inf_probe(&sys, &probes) <= w1inf_upper_bound(&sys));
        }
    }

    #[test]
    fn system_validation() {
        assert!(ControlPointSystem::new(vec![], vec![], 1.0).is_err());
        assert!(ControlPointSystem::new(vec![Vec3::zeros()], vec![Vec3::zeros()], 0.0).is_err());
        assert!(ControlPointSystem::new(vec![Vec3::zeros()], vec![], 1.0).is_err());
    }

    #[test]
    fn zero_steps_give_zero_field() {
        let params = RandomizationParams {
            t_max: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (field, log) = generate_dvf(&small_grid(), &params, &mut rng).unwrap();
        assert!(field.data().iter().all(|&v| v == 0.0));
        assert_eq!(log.accepted_steps, 0);
    }

    #[test]
    fn zero_momenta_give_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t_max in [1, 7, 50] {
            let params = RandomizationParams {
                t_max,
                ..RandomizationParams::zero()
            };
            let (field, log) = generate_dvf(&small_grid(), &params, &mut rng).unwrap();
            assert!(field.data().iter().all(|&v| v == 0.0));
            assert_eq!(log.accepted_steps, t_max);
        }
    }

    #[test]
    fn generated_field_respects_gates_and_envelope() {
        let grid = small_grid();
        let params = RandomizationParams::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (field, log) = generate_dvf(&grid, &params, &mut rng).unwrap();
            assert!(min_voxel_volume(&field).unwrap() >= params.v_thresh);
            assert!(log.step_bounds.iter().all(|&b| b < 1.0));
            // Σ_k sup|α_k| bounds the displacement of every node.
            let envelope: f64 = log
                .alpha_means
                .iter()
                .map(|m| Vec3::from(*m).abs().add_scalar(params.w_alpha / 2.0).norm())
                .sum();
            let max = field.max_magnitude();
            assert!(max <= envelope, "max {max} envelope {envelope}");
            assert!(max <= params.t_max as f64 * envelope);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let grid = small_grid();
        let params = RandomizationParams::default();
        let run = |seed| generate_dvf(&grid, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, la) = run(11);
        let (b, lb) = run(11);
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        let (c, _) = run(12);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn impossible_first_step_is_error() {
        let params = RandomizationParams {
            alpha_mean_range: [500.0, 500.0],
            max_retries: 2,
            ..Default::default()
        };
        let err = generate_dvf(&small_grid(), &params, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Generation { step: 0, .. })));
    }

    #[test]
    fn volume_gate_halts_integration() {
        // Strong compression: later steps fail the volume gate, earlier ones pass.
        let params = RandomizationParams {
            alpha_mean_range: [20.0, 20.0],
            center_mean_range: [30.0, 30.0],
            sigma: 6.0,
            n_cp: 2,
            v_thresh: 100.0,
            max_retries: 1,
            ..Default::default()
        };
        let grid = small_grid();
        let (field, log) = generate_dvf(&grid, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(log.halted_at.is_some());
        assert!(log.accepted_steps < params.t_max);
        assert!(min_voxel_volume(&field).unwrap() >= params.v_thresh);
        assert!(log.total_retries >= 1);
    }
}
