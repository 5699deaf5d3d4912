//! Driving noise and discrete stochastic integrals.
//!
//! Two sources of randomness: the backward noise `B` driving the SPDE, and
//! batches of forward Brownian paths `W` used for Monte Carlo verification.
//! Both are pure functions of their seeds. Forward paths use counter-based
//! stream splitting, so path `m` is identical regardless of worker count,
//! and the same backward path is shared by every penalization level of a
//! sweep (pathwise comparisons need one fixed noise realization).
//!
//! Three discrete integral conventions operate on node-sampled integrands:
//! forward Itô (left endpoints), backward Itô (right endpoints) and the
//! symmetric integral (their sum), which represents divergence terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;

use crate::problem::SpaceTimeGrid;
use crate::{Error, Result};

/// A realization of the backward driving noise: `nt` Gaussian increments
/// `ΔB_k ~ N(0, Δt·I)` in dimension `d1`, reproducible from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardNoisePath {
    pub seed: u64,
    pub d1: usize,
    pub nt: usize,
    pub dt: f64,
    /// Flat layout `increments[k * d1 + j]`.
    pub increments: Vec<f64>,
}

impl BackwardNoisePath {
    /// Increment `ΔB_k` as a `d1`-slice.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.d1..(k + 1) * self.d1]
    }

    /// Cumulative positions `B_{t_k}`, starting at zero.
    pub fn positions(&self) -> Vec<f64> {
        let mut out = vec![0.0; (self.nt + 1) * self.d1];
        for k in 0..self.nt {
            for j in 0..self.d1 {
                out[(k + 1) * self.d1 + j] =
                    out[k * self.d1 + j] + self.increments[k * self.d1 + j];
            }
        }
        out
    }
}

/// Samples the backward noise path. Same seed, same path, bitwise.
pub fn sample_backward_noise(seed: u64, nt: usize, d1: usize, dt: f64) -> Result<BackwardNoisePath> {
    if nt < 1 || d1 < 1 {
        return Err(Error::Domain(format!("need nt >= 1 and d1 >= 1, got nt={nt}, d1={d1}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("need dt > 0, got {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = dt.sqrt();
    let increments = (0..nt * d1)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect();
    Ok(BackwardNoisePath { seed, d1, nt, dt, increments })
}

/// A batch of forward Brownian paths, started uniformly on the interior
/// core. The batch stores only its description; individual paths are
/// materialized on demand from per-path RNG streams derived by counter-based
/// splitting, so results do not depend on evaluation order or worker count.
///
/// `weight` is the volume of the sampling region, the surrogate for the
/// (non-normalizable) Lebesgue initial law: estimates of integrals against
/// that law are `weight × (sample mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPathBatch {
    pub seed: u64,
    pub m_paths: usize,
    pub dim: usize,
    pub nt: usize,
    pub dt: f64,
    /// Sampling box for initial points (the grid's interior core).
    pub x0_bounds: Vec<(f64, f64)>,
    /// Volume of the sampling box.
    pub weight: f64,
}

/// One realized forward path.
#[derive(Debug, Clone)]
pub struct ForwardPath {
    pub x0: Vec<f64>,
    /// Flat layout `increments[k * dim + a]`, `k = 0..nt-1`.
    pub increments: Vec<f64>,
    /// Flat layout `positions[k * dim + a]`, `k = 0..nt`.
    pub positions: Vec<f64>,
}

impl ForwardPath {
    pub fn position(&self, k: usize, dim: usize) -> &[f64] {
        &self.positions[k * dim..(k + 1) * dim]
    }
}

impl ForwardPathBatch {
    /// Creates a batch sampling initial points uniformly on the grid's
    /// interior core.
    pub fn new(grid: &SpaceTimeGrid, seed: u64, m_paths: usize) -> Result<Self> {
        if m_paths < 1 {
            return Err(Error::Domain("need at least one path".into()));
        }
        let x0_bounds = grid.core_bounds();
        if x0_bounds.iter().any(|&(lo, hi)| hi <= lo) {
            return Err(Error::Domain(
                "interior core is empty; widen the domain relative to 3 sqrt(T)".into(),
            ));
        }
        Ok(Self {
            seed,
            m_paths,
            dim: grid.dim,
            nt: grid.nt,
            dt: grid.dt(),
            weight: grid.core_volume(),
            x0_bounds,
        })
    }

    /// Materializes path `m`. Deterministic in `(seed, m)` alone.
    pub fn realize(&self, m: usize) -> ForwardPath {
        debug_assert!(m < self.m_paths);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(m as u64 + 1);
        let d = self.dim;
        let mut x0 = vec![0.0; d];
        for (a, x) in x0.iter_mut().enumerate() {
            let (lo, hi) = self.x0_bounds[a];
            *x = rng.gen_range(lo..hi);
        }
        let scale = self.dt.sqrt();
        let mut increments = vec![0.0; self.nt * d];
        for v in increments.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * scale;
        }
        let mut positions = vec![0.0; (self.nt + 1) * d];
        positions[..d].copy_from_slice(&x0);
        for k in 0..self.nt {
            for a in 0..d {
                positions[(k + 1) * d + a] = positions[k * d + a] + increments[k * d + a];
            }
        }
        ForwardPath { x0, increments, positions }
    }
}

fn check_lengths(values: &[f64], increments: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::Domain("dim must be positive".into()));
    }
    if increments.len() % dim != 0 {
        return Err(Error::LengthMismatch {
            expected: (increments.len() / dim + 1) * dim,
            got: increments.len(),
        });
    }
    let steps = increments.len() / dim;
    let expected = (steps + 1) * dim;
    if values.len() != expected {
        return Err(Error::LengthMismatch { expected, got: values.len() });
    }
    Ok(steps)
}

/// Forward Itô sum `Σ_k z_k · ΔW_k` with the integrand sampled at all mesh
/// points (`steps + 1` rows of `dim`); left endpoints multiply increments.
pub fn forward_ito_integral(values: &[f64], increments: &[f64], dim: usize) -> Result<f64> {
    let steps = check_lengths(values, increments, dim)?;
    let mut acc = 0.0;
    for k in 0..steps {
        for a in 0..dim {
            acc += values[k * dim + a] * increments[k * dim + a];
        }
    }
    Ok(acc)
}

/// Backward Itô sum `Σ_k z_{k+1} · ΔB_k`: right endpoints multiply
/// increments, matching adaptedness to the backward filtration.
pub fn backward_ito_integral(values: &[f64], increments: &[f64], dim: usize) -> Result<f64> {
    let steps = check_lengths(values, increments, dim)?;
    let mut acc = 0.0;
    for k in 0..steps {
        for a in 0..dim {
            acc += values[(k + 1) * dim + a] * increments[k * dim + a];
        }
    }
    Ok(acc)
}

/// Symmetric integral `Σ_k (g_k + g_{k+1}) · ΔW_k`, the sum of the forward
/// and backward conventions for the same integrand. Represents divergence
/// terms: the drift `div g dt` corresponds to `-½ g∗dW` along the motion.
pub fn symmetric_integral(values: &[f64], increments: &[f64], dim: usize) -> Result<f64> {
    let steps = check_lengths(values, increments, dim)?;
    let mut acc = 0.0;
    for k in 0..steps {
        for a in 0..dim {
            acc += (values[k * dim + a] + values[(k + 1) * dim + a]) * increments[k * dim + a];
        }
    }
    Ok(acc)
}

/// Writes one forward path and the backward noise to CSV for debugging.
/// Columns: `k, t_k, w_0[, w_1], b_0..b_{d1-1}`.
pub fn export_path_csv<W: Write>(
    out: &mut W,
    path: &ForwardPath,
    dim: usize,
    noise: &BackwardNoisePath,
) -> std::io::Result<()> {
    let mut header = String::from("k,t");
    for a in 0..dim {
        header.push_str(&format!(",w{a}"));
    }
    for j in 0..noise.d1 {
        header.push_str(&format!(",b{j}"));
    }
    writeln!(out, "{header}")?;
    let b = noise.positions();
    let nt = noise.nt;
    for k in 0..=nt {
        let mut line = format!("{k},{}", k as f64 * noise.dt);
        for a in 0..dim {
            line.push_str(&format!(",{}", path.positions[k * dim + a]));
        }
        for j in 0..noise.d1 {
            line.push_str(&format!(",{}", b[k * noise.d1 + j]));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::SpaceTimeGrid;

    #[test]
    fn backward_noise_is_reproducible() {
        let a = sample_backward_noise(42, 100, 2, 0.01).unwrap();
        let b = sample_backward_noise(42, 100, 2, 0.01).unwrap();
        assert_eq!(a, b);
        let c = sample_backward_noise(43, 100, 2, 0.01).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn backward_noise_moments() {
        let nt = 100_000;
        let dt = 1e-3;
        let path = sample_backward_noise(7, nt, 1, dt).unwrap();
        let scaled: Vec<f64> = path.increments.iter().map(|v| v / dt.sqrt()).collect();
        let mean = scaled.iter().sum::<f64>() / nt as f64;
        assert!(mean.abs() < 4.0 / (nt as f64).sqrt(), "mean {mean}");
        let var = path.increments.iter().map(|v| v * v).sum::<f64>() / nt as f64;
        assert!((var - dt).abs() < 0.05 * dt, "var {var} vs dt {dt}");
    }

    #[test]
    fn forward_batch_is_order_independent() {
        let grid = SpaceTimeGrid::new_1d(-8.0, 8.0, 41, 50, 0.25).unwrap();
        let batch = ForwardPathBatch::new(&grid, 5, 16).unwrap();
        let forward: Vec<_> = (0..16).map(|m| batch.realize(m)).collect();
        let backward: Vec<_> = (0..16).rev().map(|m| batch.realize(m)).collect();
        for m in 0..16 {
            assert_eq!(forward[m].positions, backward[15 - m].positions);
        }
        // initial points inside the core box
        for p in &forward {
            assert!(p.x0[0] >= -6.5 && p.x0[0] <= 6.5);
        }
        assert!((batch.weight - 13.0).abs() < 1e-12);
    }

    #[test]
    fn forward_ito_basics() {
        let dw = [0.1, -0.2, 0.3];
        let zeros = [0.0; 4];
        assert_eq!(forward_ito_integral(&zeros, &dw, 1).unwrap(), 0.0);
        let ones = [1.0; 4];
        let total: f64 = dw.iter().sum();
        assert!((forward_ito_integral(&ones, &dw, 1).unwrap() - total).abs() < 1e-15);
        assert!(forward_ito_integral(&ones[..3], &dw, 1).is_err());
    }

    #[test]
    fn backward_ito_basics() {
        let db = [0.1, -0.2, 0.3];
        let ones = [1.0; 4];
        let total: f64 = db.iter().sum();
        assert!((backward_ito_integral(&ones, &db, 1).unwrap() - total).abs() < 1e-15);
        assert_eq!(backward_ito_integral(&[0.0; 4], &db, 1).unwrap(), 0.0);
    }

    #[test]
    fn ito_martingale_and_backward_correction() {
        // forward: E Σ W_k ΔW_k = 0; backward: E Σ W_{k+1} ΔW_k = T.
        // Difference per path is exactly Σ (ΔW_k)².
        let grid = SpaceTimeGrid::new_1d(-60.0, 60.0, 41, 200, 1.0).unwrap();
        let m = 10_000;
        let batch = ForwardPathBatch::new(&grid, 11, m).unwrap();
        let mut fsum = Vec::with_capacity(m);
        let mut bsum = Vec::with_capacity(m);
        for i in 0..m {
            let p = batch.realize(i);
            // use centered path W - x0 so the integrand is a martingale from 0
            let centered: Vec<f64> = p.positions.iter().map(|v| v - p.x0[0]).collect();
            let f = forward_ito_integral(&centered, &p.increments, 1).unwrap();
            let b = backward_ito_integral(&centered, &p.increments, 1).unwrap();
            let quad: f64 = p.increments.iter().map(|v| v * v).sum();
            assert!((b - f - quad).abs() < 1e-12);
            fsum.push(f);
            bsum.push(b);
        }
        let fmean = fsum.iter().sum::<f64>() / m as f64;
        let fstd = (fsum.iter().map(|v| (v - fmean) * (v - fmean)).sum::<f64>() / m as f64).sqrt();
        assert!(fmean.abs() <= 3.0 * fstd / (m as f64).sqrt() + 1e-3, "forward mean {fmean}");
        let bmean = bsum.iter().sum::<f64>() / m as f64;
        let bstd = (bsum.iter().map(|v| (v - bmean) * (v - bmean)).sum::<f64>() / m as f64).sqrt();
        // E backward = T = 1 (d1 = 1)
        assert!((bmean - 1.0).abs() <= 3.0 * bstd / (m as f64).sqrt(), "backward mean {bmean}");
    }

    #[test]
    fn symmetric_integral_telescopes_for_identity_integrand() {
        // g(x) = x in 1D: Σ (W_k + W_{k+1}) ΔW_k = W_T² - W_0² exactly
        let grid = SpaceTimeGrid::new_1d(-60.0, 60.0, 41, 128, 1.0).unwrap();
        let batch = ForwardPathBatch::new(&grid, 3, 32).unwrap();
        for i in 0..32 {
            let p = batch.realize(i);
            let s = symmetric_integral(&p.positions, &p.increments, 1).unwrap();
            let w0 = p.positions[0];
            let wt = p.positions[p.positions.len() - 1];
            assert!((s - (wt * wt - w0 * w0)).abs() < 1e-10, "path {i}");
        }
    }

    #[test]
    fn symmetric_integral_of_constant() {
        let grid = SpaceTimeGrid::new_1d(-60.0, 60.0, 41, 64, 1.0).unwrap();
        let batch = ForwardPathBatch::new(&grid, 9, 4).unwrap();
        let p = batch.realize(0);
        let c = 2.5;
        let vals = vec![c; p.positions.len()];
        let s = symmetric_integral(&vals, &p.increments, 1).unwrap();
        let w0 = p.positions[0];
        let wt = p.positions[p.positions.len() - 1];
        assert!((s - 2.0 * c * (wt - w0)).abs() < 1e-10);
    }

    #[test]
    fn symmetric_is_forward_plus_backward() {
        let grid = SpaceTimeGrid::new_1d(-60.0, 60.0, 41, 64, 1.0).unwrap();
        let batch = ForwardPathBatch::new(&grid, 13, 4).unwrap();
        let p = batch.realize(2);
        let vals: Vec<f64> = p.positions.iter().map(|w| (w * 0.3).sin()).collect();
        let s = symmetric_integral(&vals, &p.increments, 1).unwrap();
        let f = forward_ito_integral(&vals, &p.increments, 1).unwrap();
        let b = backward_ito_integral(&vals, &p.increments, 1).unwrap();
        assert!((s - (f + b)).abs() < 1e-12);
    }

    #[test]
    fn export_csv_shape() {
        let grid = SpaceTimeGrid::new_1d(-8.0, 8.0, 41, 4, 0.25).unwrap();
        let batch = ForwardPathBatch::new(&grid, 1, 1).unwrap();
        let path = batch.realize(0);
        let noise = sample_backward_noise(1, 4, 2, grid.dt()).unwrap();
        let mut buf = Vec::new();
        export_path_csv(&mut buf, &path, 1, &noise).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "k,t,w0,b0,b1");
    }
}
