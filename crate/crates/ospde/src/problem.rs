//! Problem instances: grids, fields, discrete norms, the coefficient
//! registry, and hypothesis validation.
//!
//! Coefficients are named built-ins selected by config (linear,
//! sine-saturating and constant families plus spatial bumps), so a run is
//! reproducible from its config alone. The obstacle is always materialized
//! as a mesh field, even when given in closed form.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Truncated rectangular space-time mesh.
///
/// Spatial nodes include both boundary nodes per axis; the time mesh has
/// `nt + 1` levels `t_k = k Δt` with `t_nt = horizon`. Homogeneous Dirichlet
/// data is imposed on the outermost spatial nodes. All probabilistic
/// identities are asserted on the interior core, the sub-box at distance
/// at least `3 √T` from the boundary, where the truncation error of the
/// Gaussian tails is negligible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceTimeGrid {
    pub dim: usize,
    /// Per-axis spatial bounds (lo, hi).
    pub bounds: Vec<(f64, f64)>,
    /// Nodes per axis, boundary included.
    pub nx: Vec<usize>,
    /// Number of time steps; the mesh has `nt + 1` levels.
    pub nt: usize,
    /// Final time T.
    pub horizon: f64,
}

impl SpaceTimeGrid {
    pub fn new(
        dim: usize,
        bounds: Vec<(f64, f64)>,
        nx: Vec<usize>,
        nt: usize,
        horizon: f64,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::Domain(format!("dim must be 1 or 2, got {dim}")));
        }
        if bounds.len() != dim || nx.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "bounds/nx must have {dim} entries"
            )));
        }
        if nt < 1 {
            return Err(Error::Domain("nt must be at least 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be > 0, got {horizon}")));
        }
        for (a, &(lo, hi)) in bounds.iter().enumerate() {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Domain(format!("axis {a}: invalid bounds ({lo},{hi})")));
            }
            if nx[a] < 3 {
                return Err(Error::Domain(format!("axis {a}: nx must be >= 3")));
            }
        }
        Ok(Self { dim, bounds, nx, nt, horizon })
    }

    pub fn new_1d(lo: f64, hi: f64, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        Self::new(1, vec![(lo, hi)], vec![nx], nt, horizon)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn dx(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / (self.nx[axis] - 1) as f64
    }

    /// Volume element Δx (1D) or Δx·Δy (2D).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).product()
    }

    pub fn n_space(&self) -> usize {
        self.nx.iter().product()
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Row-major flat index of the node with per-axis indices `ij`.
    pub fn node_index(&self, ij: &[usize]) -> usize {
        match self.dim {
            1 => ij[0],
            _ => ij[0] * self.nx[1] + ij[1],
        }
    }

    /// Per-axis indices of a flat node index.
    pub fn node_coords(&self, idx: usize) -> [usize; 2] {
        match self.dim {
            1 => [idx, 0],
            _ => [idx / self.nx[1], idx % self.nx[1]],
        }
    }

    /// Spatial position of a node; the second entry is 0 in 1D.
    pub fn position(&self, idx: usize) -> [f64; 2] {
        let ij = self.node_coords(idx);
        let mut p = [0.0; 2];
        for a in 0..self.dim {
            p[a] = self.bounds[a].0 + ij[a] as f64 * self.dx(a);
        }
        p
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let ij = self.node_coords(idx);
        (0..self.dim).any(|a| ij[a] == 0 || ij[a] == self.nx[a] - 1)
    }

    /// Margin of the interior core: 3 √T.
    pub fn core_margin(&self) -> f64 {
        3.0 * self.horizon.sqrt()
    }

    /// Per-axis bounds of the interior core box.
    pub fn core_bounds(&self) -> Vec<(f64, f64)> {
        let m = self.core_margin();
        self.bounds.iter().map(|&(lo, hi)| (lo + m, hi - m)).collect()
    }

    /// Whether a point lies in the interior core box.
    pub fn in_core(&self, p: &[f64]) -> bool {
        self.core_bounds()
            .iter()
            .zip(p)
            .all(|(&(lo, hi), &x)| x >= lo && x <= hi)
    }

    /// Whether a point lies inside the grid domain.
    pub fn in_domain(&self, p: &[f64]) -> bool {
        self.bounds
            .iter()
            .zip(p)
            .all(|(&(lo, hi), &x)| x >= lo && x <= hi)
    }

    pub fn node_in_core(&self, idx: usize) -> bool {
        let p = self.position(idx);
        self.in_core(&p[..self.dim])
    }

    /// Flat indices of the nodes in the interior core.
    pub fn core_nodes(&self) -> Vec<usize> {
        (0..self.n_space()).filter(|&i| self.node_in_core(i)).collect()
    }

    /// Volume of the interior core box (the surrogate weight for the
    /// Lebesgue initial law of the forward motion).
    pub fn core_volume(&self) -> f64 {
        self.core_bounds()
            .iter()
            .map(|&(lo, hi)| (hi - lo).max(0.0))
            .product()
    }
}

/// Scalar field on the full space-time mesh, stored as `nt + 1` slices of
/// `n_space` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub n_space: usize,
    pub nt: usize,
    pub data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            n_space: grid.n_space(),
            nt: grid.nt,
            data: vec![0.0; (grid.nt + 1) * grid.n_space()],
        }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let n = grid.n_space();
        let mut data = Vec::with_capacity((grid.nt + 1) * n);
        for k in 0..=grid.nt {
            for i in 0..n {
                data.push(f(k, i));
            }
        }
        Self { n_space: n, nt: grid.nt, data }
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_space..(k + 1) * self.n_space]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_space..(k + 1) * self.n_space]
    }

    pub fn set_slice(&mut self, k: usize, values: &[f64]) {
        self.slice_mut(k).copy_from_slice(values);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Vector-valued field on the space-time mesh (one `dim`-vector per node),
/// used for gradients and for the `g` coefficient field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeVecField {
    pub n_space: usize,
    pub nt: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SpaceTimeVecField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            n_space: grid.n_space(),
            nt: grid.nt,
            dim: grid.dim,
            data: vec![0.0; (grid.nt + 1) * grid.n_space() * grid.dim],
        }
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let len = self.n_space * self.dim;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let len = self.n_space * self.dim;
        &mut self.data[k * len..(k + 1) * len]
    }
}

/// Central-difference gradient of a spatial slice; one-sided at boundary
/// nodes. Output layout: `out[i * dim + axis]`.
pub fn gradient(grid: &SpaceTimeGrid, field: &[f64], out: &mut [f64]) {
    let d = grid.dim;
    debug_assert_eq!(field.len(), grid.n_space());
    debug_assert_eq!(out.len(), grid.n_space() * d);
    for a in 0..d {
        let dx = grid.dx(a);
        let stride = if a == 0 {
            match d {
                1 => 1,
                _ => grid.nx[1],
            }
        } else {
            1
        };
        for idx in 0..grid.n_space() {
            let ij = grid.node_coords(idx);
            let i = ij[a];
            let v = if i == 0 {
                (field[idx + stride] - field[idx]) / dx
            } else if i == grid.nx[a] - 1 {
                (field[idx] - field[idx - stride]) / dx
            } else {
                (field[idx + stride] - field[idx - stride]) / (2.0 * dx)
            };
            out[idx * d + a] = v;
        }
    }
}

/// Central-difference divergence of a vector slice (`vec[i * dim + axis]`);
/// one-sided at boundary nodes. Discrete adjoint of [`gradient`] up to
/// boundary terms, matching the weak pairing of the divergence term.
pub fn divergence(grid: &SpaceTimeGrid, vec: &[f64], out: &mut [f64]) {
    let d = grid.dim;
    debug_assert_eq!(vec.len(), grid.n_space() * d);
    debug_assert_eq!(out.len(), grid.n_space());
    out.fill(0.0);
    for a in 0..d {
        let dx = grid.dx(a);
        let stride = if a == 0 {
            match d {
                1 => 1,
                _ => grid.nx[1],
            }
        } else {
            1
        };
        for idx in 0..grid.n_space() {
            let ij = grid.node_coords(idx);
            let i = ij[a];
            let v = if i == 0 {
                (vec[(idx + stride) * d + a] - vec[idx * d + a]) / dx
            } else if i == grid.nx[a] - 1 {
                (vec[idx * d + a] - vec[(idx - stride) * d + a]) / dx
            } else {
                (vec[(idx + stride) * d + a] - vec[(idx - stride) * d + a]) / (2.0 * dx)
            };
            out[idx] += v;
        }
    }
}

/// Discrete norms on the mesh.
///
/// `l2` is the Δx-weighted spatial norm, `l2_2` the space-time norm with a
/// trapezoid rule in time, `h1_seminorm` the Δx-weighted central-difference
/// gradient norm over interior nodes, and `t_norm` the solution-space norm
/// `sup_t ‖u_t‖₂ + (∫₀ᵀ ‖∇u_t‖₂ dt)^{1/2}`.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteNorms<'a> {
    pub grid: &'a SpaceTimeGrid,
}

impl<'a> DiscreteNorms<'a> {
    pub fn new(grid: &'a SpaceTimeGrid) -> Self {
        Self { grid }
    }

    pub fn l2_sq(&self, slice: &[f64]) -> f64 {
        let w = self.grid.cell_volume();
        slice.iter().map(|v| v * v).sum::<f64>() * w
    }

    pub fn l2(&self, slice: &[f64]) -> f64 {
        self.l2_sq(slice).sqrt()
    }

    /// Spatial L² restricted to the interior core.
    pub fn l2_sq_core(&self, slice: &[f64]) -> f64 {
        let w = self.grid.cell_volume();
        (0..slice.len())
            .filter(|&i| self.grid.node_in_core(i))
            .map(|i| slice[i] * slice[i])
            .sum::<f64>()
            * w
    }

    pub fn l2_2(&self, field: &SpaceTimeField) -> f64 {
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for k in 0..=field.nt {
            let w = if k == 0 || k == field.nt { 0.5 } else { 1.0 };
            acc += w * self.l2_sq(field.slice(k));
        }
        (acc * dt).sqrt()
    }

    pub fn h1_seminorm_sq(&self, slice: &[f64]) -> f64 {
        let grid = self.grid;
        let d = grid.dim;
        let w = grid.cell_volume();
        let mut acc = 0.0;
        let mut grad = vec![0.0; grid.n_space() * d];
        gradient(grid, slice, &mut grad);
        for idx in 0..grid.n_space() {
            if grid.is_boundary(idx) {
                continue;
            }
            for a in 0..d {
                let g = grad[idx * d + a];
                acc += g * g;
            }
        }
        acc * w
    }

    pub fn h1_seminorm(&self, slice: &[f64]) -> f64 {
        self.h1_seminorm_sq(slice).sqrt()
    }

    /// `sup_t ‖u_t‖₂ + (∫₀ᵀ ‖∇u_t‖₂ dt)^{1/2}` with a trapezoid rule in time.
    pub fn t_norm(&self, field: &SpaceTimeField) -> f64 {
        let dt = self.grid.dt();
        let mut sup = 0.0;
        let mut grad_int = 0.0;
        for k in 0..=field.nt {
            let w = if k == 0 || k == field.nt { 0.5 } else { 1.0 };
            sup = f64::max(sup, self.l2(field.slice(k)));
            grad_int += w * self.h1_seminorm(field.slice(k)) * dt;
        }
        sup + grad_int.sqrt()
    }

    /// Discrete L²([0,T]; H¹) norm, used for Cauchy increments of sweeps.
    pub fn l2_h1(&self, field: &SpaceTimeField) -> f64 {
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for k in 0..=field.nt {
            let w = if k == 0 || k == field.nt { 0.5 } else { 1.0 };
            acc += w * (self.l2_sq(field.slice(k)) + self.h1_seminorm_sq(field.slice(k))) * dt;
        }
        acc.sqrt()
    }

    /// Core-restricted L²([0,T]; H¹) norm: values and central-difference
    /// gradients are summed over interior-core nodes only (gradients still
    /// use full stencils, so no artificial edge terms appear).
    pub fn l2_h1_core(&self, field: &SpaceTimeField) -> f64 {
        let grid = self.grid;
        let d = grid.dim;
        let w = grid.cell_volume();
        let dt = grid.dt();
        let core: Vec<usize> = grid.core_nodes();
        let mut grad = vec![0.0; grid.n_space() * d];
        let mut acc = 0.0;
        for k in 0..=field.nt {
            let tw = if k == 0 || k == field.nt { 0.5 } else { 1.0 };
            let slice = field.slice(k);
            gradient(grid, slice, &mut grad);
            let mut sq = 0.0;
            for &i in &core {
                sq += slice[i] * slice[i];
                for a in 0..d {
                    sq += grad[i * d + a] * grad[i * d + a];
                }
            }
            acc += tw * sq * w * dt;
        }
        acc.sqrt()
    }
}

/// One named coefficient evaluator from the registry.
///
/// Arguments are `(t, x, y, z)` where `y` stands for the solution value and
/// `z` for its gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarCoeff {
    Zero,
    Constant {
        value: f64,
    },
    /// `offset + y_coef · y + z_coef · z`.
    Linear {
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        y_coef: f64,
        #[serde(default)]
        z_coef: Vec<f64>,
    },
    /// Sine-saturating family `amp · sin(freq · y)`.
    SineY {
        amp: f64,
        freq: f64,
    },
    /// Gaussian bump in space, `amp · exp(-|x - center|² / (2 width²))`.
    SpaceBump {
        amp: f64,
        center: Vec<f64>,
        width: f64,
    },
}

impl ScalarCoeff {
    pub fn eval(&self, _t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match self {
            ScalarCoeff::Zero => 0.0,
            ScalarCoeff::Constant { value } => *value,
            ScalarCoeff::Linear { offset, y_coef, z_coef } => {
                let mut v = offset + y_coef * y;
                for (c, zi) in z_coef.iter().zip(z) {
                    v += c * zi;
                }
                v
            }
            ScalarCoeff::SineY { amp, freq } => amp * (freq * y).sin(),
            ScalarCoeff::SpaceBump { amp, center, width } => {
                let mut r2 = 0.0;
                for (c, xi) in center.iter().zip(x) {
                    r2 += (xi - c) * (xi - c);
                }
                amp * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }

    /// Actual Lipschitz constant in `y`.
    pub fn lipschitz_y(&self) -> f64 {
        match self {
            ScalarCoeff::Linear { y_coef, .. } => y_coef.abs(),
            ScalarCoeff::SineY { amp, freq } => (amp * freq).abs(),
            _ => 0.0,
        }
    }

    /// Actual Lipschitz constant in `z` (Euclidean).
    pub fn lipschitz_z(&self) -> f64 {
        match self {
            ScalarCoeff::Linear { z_coef, .. } => {
                z_coef.iter().map(|c| c * c).sum::<f64>().sqrt()
            }
            _ => 0.0,
        }
    }
}

/// The nonlinearities (f, g, h) of an instance together with the declared
/// Lipschitz constants of the standing assumptions: `C` bounds the
/// y-sensitivity of all three and the z-sensitivity of `f`, `alpha` the
/// z-sensitivity of `g`, `beta` the z-sensitivity of `h`. Solvability
/// requires the contraction margin `1/2 - alpha - beta²/2` to be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    pub dim: usize,
    /// Dimension of the backward driving noise.
    pub d1: usize,
    pub f: ScalarCoeff,
    /// One evaluator per spatial component.
    pub g: Vec<ScalarCoeff>,
    /// One evaluator per noise component.
    pub h: Vec<ScalarCoeff>,
    pub lip_c: f64,
    pub lip_alpha: f64,
    pub lip_beta: f64,
}

impl CoefficientSet {
    /// All-zero coefficients (linear heat equation).
    pub fn zero(dim: usize, d1: usize) -> Self {
        Self {
            dim,
            d1,
            f: ScalarCoeff::Zero,
            g: vec![ScalarCoeff::Zero; dim],
            h: vec![ScalarCoeff::Zero; d1],
            lip_c: 0.0,
            lip_alpha: 0.0,
            lip_beta: 0.0,
        }
    }

    pub fn with_f(mut self, f: ScalarCoeff) -> Self {
        self.f = f;
        self
    }

    pub fn validate_shape(&self) -> Result<()> {
        if self.g.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "g must have {} components, got {}",
                self.dim,
                self.g.len()
            )));
        }
        if self.h.len() != self.d1 {
            return Err(Error::ShapeMismatch(format!(
                "h must have {} components, got {}",
                self.d1,
                self.h.len()
            )));
        }
        if self.lip_c < 0.0 || self.lip_alpha < 0.0 || self.lip_beta < 0.0 {
            return Err(Error::Domain("declared Lipschitz constants must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn eval_f(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        self.f.eval(t, x, y, z)
    }

    pub fn eval_g(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]) {
        for (o, gi) in out.iter_mut().zip(&self.g) {
            *o = gi.eval(t, x, y, z);
        }
    }

    pub fn eval_h(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64]) {
        for (o, hi) in out.iter_mut().zip(&self.h) {
            *o = hi.eval(t, x, y, z);
        }
    }

    /// Contraction margin `1/2 - alpha - beta²/2`.
    pub fn contraction_margin(&self) -> f64 {
        0.5 - self.lip_alpha - 0.5 * self.lip_beta * self.lip_beta
    }
}

/// Outcome of [`validate_hypotheses`].
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub margin: f64,
    pub margin_ok: bool,
    /// Worst observed ratio of |Δf| to C(|Δy| + |Δz|).
    pub max_ratio_f: f64,
    /// Worst observed ratio of |Δg| to C|Δy| + α|Δz|.
    pub max_ratio_g: f64,
    /// Worst observed ratio of |Δh| to C|Δy| + β|Δz|.
    pub max_ratio_h: f64,
    /// Base coefficients f⁰, g⁰, h⁰ finite on the grid.
    pub base_finite: bool,
    pub probes: usize,
    pub pass: bool,
}

const LIPSCHITZ_SLACK: f64 = 1.0 + 1e-9;

/// Probabilistic validation of the standing assumptions on a coefficient
/// set: the contraction margin, sampled Lipschitz ratios against the
/// declared constants, and finiteness of the base coefficients on the grid.
///
/// Deterministic given `(coeffs, probe_count, seed)`. An empirical ratio
/// above a declared constant is an error naming the offending coefficient.
pub fn validate_hypotheses(
    coeffs: &CoefficientSet,
    grid: &SpaceTimeGrid,
    probe_count: usize,
    seed: u64,
) -> Result<HypothesisReport> {
    coeffs.validate_shape()?;
    if probe_count < 1 {
        return Err(Error::Domain("probe_count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = coeffs.dim;
    let mut max_f: f64 = 0.0;
    let mut max_g: f64 = 0.0;
    let mut max_h: f64 = 0.0;
    let mut gbuf = vec![0.0; d];
    let mut gbuf2 = vec![0.0; d];
    let mut hbuf = vec![0.0; coeffs.d1];
    let mut hbuf2 = vec![0.0; coeffs.d1];
    for _ in 0..probe_count {
        let t = rng.gen_range(0.0..=grid.horizon);
        let mut x = vec![0.0; d];
        for (a, xa) in x.iter_mut().enumerate() {
            let (lo, hi) = grid.bounds[a];
            *xa = rng.gen_range(lo..=hi);
        }
        let y: f64 = rng.gen_range(-3.0..3.0);
        let y2: f64 = rng.gen_range(-3.0..3.0);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z2: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dy = (y - y2).abs();
        let dz = z
            .iter()
            .zip(&z2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();

        let df = (coeffs.eval_f(t, &x, y, &z) - coeffs.eval_f(t, &x, y2, &z2)).abs();
        let fbound = coeffs.lip_c * (dy + dz);
        if df > 0.0 {
            max_f = max_f.max(df / fbound.max(f64::MIN_POSITIVE));
        }

        coeffs.eval_g(t, &x, y, &z, &mut gbuf);
        coeffs.eval_g(t, &x, y2, &z2, &mut gbuf2);
        let dg = gbuf
            .iter()
            .zip(&gbuf2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let gbound = coeffs.lip_c * dy + coeffs.lip_alpha * dz;
        if dg > 0.0 {
            max_g = max_g.max(dg / gbound.max(f64::MIN_POSITIVE));
        }

        coeffs.eval_h(t, &x, y, &z, &mut hbuf);
        coeffs.eval_h(t, &x, y2, &z2, &mut hbuf2);
        let dh = hbuf
            .iter()
            .zip(&hbuf2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let hbound = coeffs.lip_c * dy + coeffs.lip_beta * dz;
        if dh > 0.0 {
            max_h = max_h.max(dh / hbound.max(f64::MIN_POSITIVE));
        }
    }

    for (name, ratio) in [("f", max_f), ("g", max_g), ("h", max_h)] {
        if ratio > LIPSCHITZ_SLACK {
            return Err(Error::HypothesisViolation {
                coefficient: name.into(),
                ratio,
                declared: match name {
                    "f" => coeffs.lip_c,
                    "g" => coeffs.lip_alpha,
                    _ => coeffs.lip_beta,
                },
            });
        }
    }

    // Finiteness of f⁰, g⁰, h⁰ on the grid (checked at t = 0 and t = T).
    let zf = vec![0.0; d];
    let mut base_finite = true;
    'outer: for k in [0usize, grid.nt] {
        let t = grid.t(k);
        for idx in 0..grid.n_space() {
            let p = grid.position(idx);
            let x = &p[..d];
            if !coeffs.eval_f(t, x, 0.0, &zf).is_finite() {
                base_finite = false;
                break 'outer;
            }
            coeffs.eval_g(t, x, 0.0, &zf, &mut gbuf);
            coeffs.eval_h(t, x, 0.0, &zf, &mut hbuf);
            if gbuf.iter().chain(hbuf.iter()).any(|v| !v.is_finite()) {
                base_finite = false;
                break 'outer;
            }
        }
    }

    let margin = coeffs.contraction_margin();
    let margin_ok = margin > 0.0;
    Ok(HypothesisReport {
        margin,
        margin_ok,
        max_ratio_f: max_f,
        max_ratio_g: max_g,
        max_ratio_h: max_h,
        base_finite,
        probes: probe_count,
        pass: margin_ok && base_finite,
    })
}

/// Registry of terminal conditions Φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Zero,
    Constant { value: f64 },
    /// `max(strike - exp(x₀), 0)`, the put payoff on a log-price axis.
    PutPayoff { strike: f64 },
    /// Gaussian bump `amp · exp(-|x - center|²/(2 width²))`.
    Bump { amp: f64, center: Vec<f64>, width: f64 },
}

impl TerminalSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalSpec::Zero => 0.0,
            TerminalSpec::Constant { value } => *value,
            TerminalSpec::PutPayoff { strike } => (strike - x[0].exp()).max(0.0),
            TerminalSpec::Bump { amp, center, width } => {
                let r2: f64 = center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum();
                amp * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }
}

/// Registry of obstacles v(t, x). An effectively disabled obstacle is a
/// large negative constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleSpec {
    Constant { value: f64 },
    /// Time-independent put payoff, `max(strike - exp(x₀), 0)`.
    PutPayoff { strike: f64 },
    /// `offset + rate · t`, space-independent.
    TimeLinear { offset: f64, rate: f64 },
    Bump { amp: f64, center: Vec<f64>, width: f64 },
}

impl ObstacleSpec {
    /// Obstacle low enough to never bind at desk scale.
    pub fn disabled() -> Self {
        ObstacleSpec::Constant { value: -1e6 }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ObstacleSpec::Constant { value } => *value,
            ObstacleSpec::PutPayoff { strike } => (strike - x[0].exp()).max(0.0),
            ObstacleSpec::TimeLinear { offset, rate } => offset + rate * t,
            ObstacleSpec::Bump { amp, center, width } => {
                let r2: f64 = center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum();
                amp * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }
}

/// Declarative description of a problem instance; JSON-serializable so runs
/// are reproducible from config alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub grid: SpaceTimeGrid,
    pub coefficients: CoefficientSet,
    pub terminal: TerminalSpec,
    pub obstacle: ObstacleSpec,
}

/// A fully materialized instance of the obstacle system: grid, coefficient
/// set, terminal field Φ and obstacle mesh field v, with `v(T,·) ≤ Φ`
/// enforced nodewise.
#[derive(Debug, Clone)]
pub struct ObstacleProblem {
    pub grid: SpaceTimeGrid,
    pub coeffs: CoefficientSet,
    /// Terminal condition Φ on the spatial mesh.
    pub phi: Vec<f64>,
    /// Obstacle on the full space-time mesh.
    pub v: SpaceTimeField,
}

/// Builds and validates an instance: materializes Φ and v on the mesh,
/// rejects non-finite data, and enforces `v(T,·) ≤ Φ` at every node.
pub fn build_problem(config: &ProblemConfig) -> Result<ObstacleProblem> {
    let grid = SpaceTimeGrid::new(
        config.grid.dim,
        config.grid.bounds.clone(),
        config.grid.nx.clone(),
        config.grid.nt,
        config.grid.horizon,
    )?;
    let coeffs = config.coefficients.clone();
    coeffs.validate_shape()?;
    if coeffs.dim != grid.dim {
        return Err(Error::ShapeMismatch(format!(
            "coefficient dim {} does not match grid dim {}",
            coeffs.dim, grid.dim
        )));
    }

    let n = grid.n_space();
    let mut phi = vec![0.0; n];
    for (idx, p) in phi.iter_mut().enumerate() {
        let pos = grid.position(idx);
        *p = config.terminal.eval(&pos[..grid.dim]);
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("terminal condition is not finite on the grid".into()));
    }

    let v = SpaceTimeField::from_fn(&grid, |k, idx| {
        let pos = grid.position(idx);
        config.obstacle.eval(grid.t(k), &pos[..grid.dim])
    });
    if !v.is_finite() {
        return Err(Error::InvalidConfig("obstacle is not finite on the grid".into()));
    }

    let bad: Vec<usize> = (0..n)
        .filter(|&i| v.slice(grid.nt)[i] > phi[i])
        .take(16)
        .collect();
    if !bad.is_empty() {
        return Err(Error::ObstacleAboveTerminal { nodes: bad });
    }

    Ok(ObstacleProblem { grid, coeffs, phi, v })
}

impl ObstacleProblem {
    /// Convenience constructor for tests and internal callers.
    pub fn new(
        grid: SpaceTimeGrid,
        coeffs: CoefficientSet,
        terminal: &TerminalSpec,
        obstacle: &ObstacleSpec,
    ) -> Result<Self> {
        build_problem(&ProblemConfig {
            grid,
            coefficients: coeffs,
            terminal: terminal.clone(),
            obstacle: obstacle.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d() -> SpaceTimeGrid {
        SpaceTimeGrid::new_1d(-8.0, 8.0, 41, 10, 0.25).unwrap()
    }

    #[test]
    fn grid_basics() {
        let g = grid_1d();
        assert_eq!(g.n_space(), 41);
        assert!((g.dx(0) - 0.4).abs() < 1e-12);
        assert!((g.dt() - 0.025).abs() < 1e-12);
        assert!(g.is_boundary(0));
        assert!(g.is_boundary(40));
        assert!(!g.is_boundary(20));
        // core margin 3*sqrt(0.25) = 1.5
        assert!((g.core_margin() - 1.5).abs() < 1e-12);
        assert!(g.in_core(&[0.0]));
        assert!(!g.in_core(&[-7.0]));
        assert!((g.core_volume() - 13.0).abs() < 1e-12);
    }

    #[test]
    fn grid_2d_indexing() {
        let g = SpaceTimeGrid::new(2, vec![(-1.0, 1.0), (-2.0, 2.0)], vec![5, 9], 4, 1.0).unwrap();
        assert_eq!(g.n_space(), 45);
        let idx = g.node_index(&[2, 3]);
        assert_eq!(g.node_coords(idx), [2, 3]);
        let p = g.position(idx);
        assert!((p[0] - 0.0).abs() < 1e-12);
        assert!((p[1] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(SpaceTimeGrid::new_1d(-1.0, 1.0, 2, 10, 1.0).is_err());
        assert!(SpaceTimeGrid::new_1d(-1.0, 1.0, 11, 0, 1.0).is_err());
        assert!(SpaceTimeGrid::new_1d(-1.0, 1.0, 11, 10, 0.0).is_err());
        assert!(SpaceTimeGrid::new(3, vec![(0.0, 1.0); 3], vec![5; 3], 4, 1.0).is_err());
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let g = grid_1d();
        let field: Vec<f64> = (0..g.n_space()).map(|i| 2.0 * g.position(i)[0] + 1.0).collect();
        let mut grad = vec![0.0; g.n_space()];
        gradient(&g, &field, &mut grad);
        for v in &grad {
            assert!((v - 2.0).abs() < 1e-10, "grad {v}");
        }
    }

    #[test]
    fn divergence_matches_gradient_in_1d() {
        let g = grid_1d();
        let field: Vec<f64> = (0..g.n_space()).map(|i| (g.position(i)[0]).sin()).collect();
        let mut grad = vec![0.0; g.n_space()];
        gradient(&g, &field, &mut grad);
        let mut div = vec![0.0; g.n_space()];
        divergence(&g, &grad, &mut div);
        // div of the gradient is the discrete Laplacian; just check shape/finite here
        assert!(div.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn norm_consistency_t_norm_dominates_sup_l2() {
        let g = grid_1d();
        let norms = DiscreteNorms::new(&g);
        let field = SpaceTimeField::from_fn(&g, |k, i| {
            let x = g.position(i)[0];
            (x * 0.3).sin() * (k as f64 + 1.0)
        });
        let sup = (0..=g.nt).map(|k| norms.l2(field.slice(k))).fold(0.0, f64::max);
        assert!(norms.t_norm(&field) >= sup);
        // equality iff the gradient part vanishes
        let flat = SpaceTimeField::from_fn(&g, |_, _| 3.0);
        let supf = (0..=g.nt).map(|k| norms.l2(flat.slice(k))).fold(0.0, f64::max);
        // constant field has one-sided gradients only at the boundary, which
        // the seminorm excludes, so t_norm equals the sup part exactly
        assert!((norms.t_norm(&flat) - supf).abs() < 1e-12);
        // zero only on the zero field
        assert!(norms.l2(flat.slice(0)) > 0.0);
        assert_eq!(norms.l2(&vec![0.0; g.n_space()]), 0.0);
    }

    #[test]
    fn hypothesis_margin_gate() {
        let g = grid_1d();
        // alpha = 0.2, beta = 0.5 -> margin 0.175 > 0
        let mut c = CoefficientSet::zero(1, 1);
        c.lip_alpha = 0.2;
        c.lip_beta = 0.5;
        let rep = validate_hypotheses(&c, &g, 10, 1).unwrap();
        assert!((rep.margin - 0.175).abs() < 1e-15);
        assert!(rep.pass);

        // alpha = 0.4, beta = 0.5 -> margin -0.025 < 0
        c.lip_alpha = 0.4;
        let rep = validate_hypotheses(&c, &g, 10, 1).unwrap();
        assert!((rep.margin + 0.025).abs() < 1e-15);
        assert!(!rep.pass);
    }

    #[test]
    fn hypothesis_sine_respects_declared_constant() {
        let g = grid_1d();
        let mut c = CoefficientSet::zero(1, 1);
        c.f = ScalarCoeff::SineY { amp: 1.0, freq: 1.0 };
        c.lip_c = 1.0;
        let rep = validate_hypotheses(&c, &g, 2000, 42).unwrap();
        assert!(rep.max_ratio_f <= 1.0 + 1e-9, "ratio {}", rep.max_ratio_f);
        assert!(rep.pass);
    }

    #[test]
    fn hypothesis_violation_names_coefficient() {
        let g = grid_1d();
        let mut c = CoefficientSet::zero(1, 1);
        c.f = ScalarCoeff::Linear { offset: 0.0, y_coef: 2.0, z_coef: vec![] };
        c.lip_c = 1.0; // declared too small
        let err = validate_hypotheses(&c, &g, 500, 3).unwrap_err();
        match err {
            Error::HypothesisViolation { coefficient, .. } => assert_eq!(coefficient, "f"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn hypothesis_validation_is_deterministic() {
        let g = grid_1d();
        let mut c = CoefficientSet::zero(1, 1);
        c.f = ScalarCoeff::SineY { amp: 0.5, freq: 2.0 };
        c.lip_c = 1.0;
        let a = validate_hypotheses(&c, &g, 300, 9).unwrap();
        let b = validate_hypotheses(&c, &g, 300, 9).unwrap();
        assert_eq!(a.max_ratio_f.to_bits(), b.max_ratio_f.to_bits());
    }

    #[test]
    fn build_problem_accepts_put_instance() {
        let cfg = ProblemConfig {
            grid: grid_1d(),
            coefficients: CoefficientSet::zero(1, 1),
            terminal: TerminalSpec::PutPayoff { strike: 1.0 },
            obstacle: ObstacleSpec::PutPayoff { strike: 1.0 },
        };
        let p = build_problem(&cfg).unwrap();
        // v(T,.) == phi
        for i in 0..p.grid.n_space() {
            assert!((p.v.slice(p.grid.nt)[i] - p.phi[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn build_problem_rejects_obstacle_above_terminal() {
        let cfg = ProblemConfig {
            grid: grid_1d(),
            coefficients: CoefficientSet::zero(1, 1),
            terminal: TerminalSpec::Zero,
            obstacle: ObstacleSpec::Constant { value: 1.0 },
        };
        match build_problem(&cfg) {
            Err(Error::ObstacleAboveTerminal { nodes }) => assert!(!nodes.is_empty()),
            other => panic!("expected HO violation, got {other:?}"),
        }
    }

    #[test]
    fn build_problem_accepts_disabled_obstacle() {
        let cfg = ProblemConfig {
            grid: grid_1d(),
            coefficients: CoefficientSet::zero(1, 1),
            terminal: TerminalSpec::Zero,
            obstacle: ObstacleSpec::Constant { value: -1.0 },
        };
        assert!(build_problem(&cfg).is_ok());
    }
}
