//! Unrolled first-order primal-dual minimization of the labeling energy.
//!
//! The energy couples a learned convolutional regularizer `W` with the
//! combined per-label datacost: minimize over `u` in `[0,1]` the sum of the
//! per-voxel group l2-norms of `W u` and the inner product of the datacost
//! with `u`, subject to the per-voxel labels summing to one. The constraint
//! is handled by a scalar multiplier volume, the regularizer by dual
//! variables confined to unit balls. Each solver layer performs one
//! multiplier ascent, one projected dual ascent, one projected primal
//! descent and an over-relaxation step.
//!
//! `solve_with_tape` records the per-iteration intermediates needed by
//! `solve_backward`, which differentiates the whole unrolled chain exactly,
//! including both projections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{LabelSet, SemanticDatacost};
use crate::geometry::VoxelGridSpec;

/// Relaxed per-voxel label probabilities, label-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub spec: VoxelGridSpec,
    pub labels: LabelSet,
    pub u: Vec<f64>,
}

impl LabelVolume {
    pub fn uniform(spec: VoxelGridSpec, labels: LabelSet) -> Self {
        let l = labels.len();
        Self {
            spec,
            labels,
            u: vec![1.0 / l as f64; spec.n_voxels() * l],
        }
    }

    #[inline]
    pub fn plane(&self, label: usize) -> &[f64] {
        let n = self.spec.n_voxels();
        &self.u[label * n..(label + 1) * n]
    }

    #[inline]
    pub fn at(&self, label: usize, voxel: usize) -> f64 {
        self.u[label * self.spec.n_voxels() + voxel]
    }
}

/// Learned convolutional regularizer plus the (learnable) step sizes.
///
/// Kernels are 3x3x3 and map the label planes to 3 dual channels per label;
/// taps are laid out z-major: `tap = (dz+1)*9 + (dy+1)*3 + (dx+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerW {
    pub n_labels: usize,
    /// `kernels[(oc * n_labels + ic) * 27 + tap]`, `oc` in `0..3*n_labels`.
    pub kernels: Vec<f64>,
    pub sigma: f64,
    pub tau: f64,
}

pub const KERNEL_TAPS: usize = 27;

#[inline]
fn tap_offset(tap: usize) -> (isize, isize, isize) {
    let dz = (tap / 9) as isize - 1;
    let dy = ((tap / 3) % 3) as isize - 1;
    let dx = (tap % 3) as isize - 1;
    (dz, dy, dx)
}

impl RegularizerW {
    pub fn zeros(n_labels: usize) -> Self {
        Self {
            n_labels,
            kernels: vec![0.0; 3 * n_labels * n_labels * KERNEL_TAPS],
            sigma: 0.1,
            tau: 0.1,
        }
    }

    /// Forward-difference total-variation stencils: dual channel `3l + a`
    /// responds with `weight * (u_l(x + e_a) - u_l(x))`.
    pub fn tv(n_labels: usize, weight: f64) -> Self {
        let mut w = Self::zeros(n_labels);
        let center = 13; // (0,0,0)
        for l in 0..n_labels {
            for (a, plus) in [(0usize, 14usize), (1, 16), (2, 22)] {
                // +x, +y, +z neighbors of the center tap
                let oc = 3 * l + a;
                let base = (oc * n_labels + l) * KERNEL_TAPS;
                w.kernels[base + plus] = weight;
                w.kernels[base + center] = -weight;
            }
        }
        w
    }

    /// TV stencils with seeded Gaussian perturbations; the usual training
    /// start so the regularizer both smooths from epoch 0 and has nonzero
    /// gradients everywhere.
    pub fn tv_with_noise(n_labels: usize, weight: f64, noise_std: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut w = Self::tv(n_labels, weight);
        if noise_std > 0.0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let normal = rand_distr::Normal::new(0.0, noise_std).expect("valid std");
            for k in w.kernels.iter_mut() {
                *k += normal.sample(&mut rng);
            }
        }
        w
    }

    pub fn n_dual_channels(&self) -> usize {
        3 * self.n_labels
    }

    fn check(&self) -> Result<()> {
        if self.kernels.len() != 3 * self.n_labels * self.n_labels * KERNEL_TAPS {
            return Err(Error::contract("regularizer kernel buffer has wrong size"));
        }
        if !(self.sigma > 0.0 && self.tau > 0.0) {
            return Err(Error::contract("step sizes must be positive"));
        }
        Ok(())
    }
}

/// Full iterate of the primal-dual scheme.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub spec: VoxelGridSpec,
    pub n_labels: usize,
    /// Primal label planes.
    pub u: Vec<f64>,
    /// Over-relaxed primal.
    pub u_bar: Vec<f64>,
    /// Dual planes, 3 per label.
    pub xi: Vec<f64>,
    /// Multiplier volume for the sum-to-one constraint.
    pub nu: Vec<f64>,
    pub t: usize,
}

impl SolverState {
    pub fn init(spec: VoxelGridSpec, n_labels: usize) -> Self {
        let n = spec.n_voxels();
        let uniform = 1.0 / n_labels as f64;
        Self {
            spec,
            n_labels,
            u: vec![uniform; n * n_labels],
            u_bar: vec![uniform; n * n_labels],
            xi: vec![0.0; n * 3 * n_labels],
            nu: vec![0.0; n],
            t: 0,
        }
    }

    /// Warm start from an existing primal estimate.
    fn init_from(spec: VoxelGridSpec, n_labels: usize, u0: Vec<f64>) -> Self {
        let n = spec.n_voxels();
        debug_assert_eq!(u0.len(), n * n_labels);
        Self {
            spec,
            n_labels,
            u_bar: u0.clone(),
            u: u0,
            xi: vec![0.0; n * 3 * n_labels],
            nu: vec![0.0; n],
            t: 0,
        }
    }
}

/// Solver schedule.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    /// Unrolled iterations per level.
    pub iterations: usize,
    /// Coarse-to-fine levels; 1 solves at full resolution only.
    pub levels: usize,
    /// Accepted residual of the per-voxel sum-to-one constraint.
    pub constraint_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            levels: 1,
            constraint_tol: 1e-2,
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution, adjoint and kernel gradient
// ---------------------------------------------------------------------------

/// `acc[x] += km * src[x-1] + k0 * src[x] + kp * src[x+1]`, zero padded.
#[inline(always)]
fn row_triple_axpy(acc: &mut [f64], src: &[f64], km: f64, k0: f64, kp: f64) {
    let n = acc.len();
    if n == 1 {
        acc[0] += k0 * src[0];
        return;
    }
    acc[0] += k0 * src[0] + kp * src[1];
    for (a, w) in acc[1..n - 1].iter_mut().zip(src.windows(3)) {
        *a += km * w[0] + k0 * w[1] + kp * w[2];
    }
    acc[n - 1] += km * src[n - 2] + k0 * src[n - 1];
}

/// `(sum_x a[x] src[x-1], sum_x a[x] src[x], sum_x a[x] src[x+1])`, zero padded.
#[inline(always)]
fn row_triple_dots(a: &[f64], src: &[f64]) -> (f64, f64, f64) {
    let n = a.len();
    if n == 1 {
        return (0.0, a[0] * src[0], 0.0);
    }
    let mut dm = 0.0;
    let mut d0 = a[0] * src[0];
    let mut dp = a[0] * src[1];
    for (av, w) in a[1..n - 1].iter().zip(src.windows(3)) {
        dm += av * w[0];
        d0 += av * w[1];
        dp += av * w[2];
    }
    dm += a[n - 1] * src[n - 2];
    d0 += a[n - 1] * src[n - 1];
    (dm, d0, dp)
}

/// `out[oc](x) += k[oc][ic][tap] * input[ic](x + off(tap))`, zero padded.
fn conv_forward(
    kernels: &[f64],
    n_labels: usize,
    spec: &VoxelGridSpec,
    input: &[f64],
    out: &mut [f64],
) {
    let n = spec.n_voxels();
    let (nx, ny, nz) = (spec.dims[0], spec.dims[1], spec.dims[2]);
    out.par_chunks_mut(n).enumerate().for_each(|(oc, plane)| {
        plane.fill(0.0);
        for z in 0..nz {
            let slab = &mut plane[z * ny * nx..(z + 1) * ny * nx];
            for ic in 0..n_labels {
                let in_plane = &input[ic * n..(ic + 1) * n];
                let kbase = (oc * n_labels + ic) * KERNEL_TAPS;
                for dz in -1isize..=1 {
                    let zz = z as isize + dz;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    let in_slab = &in_plane[zz as usize * ny * nx..(zz as usize + 1) * ny * nx];
                    for dy in -1isize..=1 {
                        let t0 = kbase + ((dz + 1) * 9 + (dy + 1) * 3) as usize;
                        let (km, k0, kp) = (kernels[t0], kernels[t0 + 1], kernels[t0 + 2]);
                        if km == 0.0 && k0 == 0.0 && kp == 0.0 {
                            continue;
                        }
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (ny as isize - dy.max(0)) as usize;
                        for y in y0..y1 {
                            let yy = (y as isize + dy) as usize;
                            row_triple_axpy(
                                &mut slab[y * nx..y * nx + nx],
                                &in_slab[yy * nx..yy * nx + nx],
                                km,
                                k0,
                                kp,
                            );
                        }
                    }
                }
            }
        }
    });
}

/// `out[ic](x) += k[oc][ic][tap] * dual[oc](x - off(tap))`: the exact adjoint
/// of [`conv_forward`] under the Euclidean inner product.
fn conv_adjoint(
    kernels: &[f64],
    n_labels: usize,
    spec: &VoxelGridSpec,
    dual: &[f64],
    out: &mut [f64],
) {
    let n = spec.n_voxels();
    let (nx, ny, nz) = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let n_dual = 3 * n_labels;
    out.par_chunks_mut(n).enumerate().for_each(|(ic, plane)| {
        plane.fill(0.0);
        for z in 0..nz {
            let slab = &mut plane[z * ny * nx..(z + 1) * ny * nx];
            for oc in 0..n_dual {
                let in_plane = &dual[oc * n..(oc + 1) * n];
                let kbase = (oc * n_labels + ic) * KERNEL_TAPS;
                // out(x) += k[tap] * dual(x - off): read rows at (z - dz,
                // y - dy) and swap the +-x taps.
                for dz in -1isize..=1 {
                    let zz = z as isize - dz;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    let in_slab = &in_plane[zz as usize * ny * nx..(zz as usize + 1) * ny * nx];
                    for dy in -1isize..=1 {
                        let t0 = kbase + ((dz + 1) * 9 + (dy + 1) * 3) as usize;
                        let (km, k0, kp) = (kernels[t0 + 2], kernels[t0 + 1], kernels[t0]);
                        if km == 0.0 && k0 == 0.0 && kp == 0.0 {
                            continue;
                        }
                        let y0 = dy.max(0) as usize;
                        let y1 = (ny as isize + dy.min(0)) as usize;
                        for y in y0..y1 {
                            let yy = (y as isize - dy) as usize;
                            row_triple_axpy(
                                &mut slab[y * nx..y * nx + nx],
                                &in_slab[yy * nx..yy * nx + nx],
                                km,
                                k0,
                                kp,
                            );
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of `<outgrad, W input>` with respect to the kernels:
/// `g[oc][ic][tap] = sum_x outgrad[oc](x) * input[ic](x + off(tap))`.
fn conv_kernel_grad(
    n_labels: usize,
    spec: &VoxelGridSpec,
    input: &[f64],
    outgrad: &[f64],
    g_kernels: &mut [f64],
    scale: f64,
) {
    let n = spec.n_voxels();
    let (nx, ny, nz) = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let row = n_labels * KERNEL_TAPS;
    g_kernels
        .par_chunks_mut(row)
        .enumerate()
        .for_each(|(oc, grow)| {
            let og = &outgrad[oc * n..(oc + 1) * n];
            let mut local = vec![0.0f64; row];
            for z in 0..nz {
                let og_slab = &og[z * ny * nx..(z + 1) * ny * nx];
                for ic in 0..n_labels {
                    let inp = &input[ic * n..(ic + 1) * n];
                    for dz in -1isize..=1 {
                        let zz = z as isize + dz;
                        if zz < 0 || zz >= nz as isize {
                            continue;
                        }
                        let in_slab = &inp[zz as usize * ny * nx..(zz as usize + 1) * ny * nx];
                        for dy in -1isize..=1 {
                            let t0 = ic * KERNEL_TAPS + ((dz + 1) * 9 + (dy + 1) * 3) as usize;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = (ny as isize - dy.max(0)) as usize;
                            let (mut sm, mut s0, mut sp) = (0.0, 0.0, 0.0);
                            for y in y0..y1 {
                                let yy = (y as isize + dy) as usize;
                                let (dm, d0, dp) = row_triple_dots(
                                    &og_slab[y * nx..y * nx + nx],
                                    &in_slab[yy * nx..yy * nx + nx],
                                );
                                sm += dm;
                                s0 += d0;
                                sp += dp;
                            }
                            local[t0] += sm;
                            local[t0 + 1] += s0;
                            local[t0 + 2] += sp;
                        }
                    }
                }
            }
            for (g, l) in grow.iter_mut().zip(local.iter()) {
                *g += scale * l;
            }
        });
}

/// Applies the regularizer to a label volume; output channels are grouped
/// three per label.
pub fn apply_w(w: &RegularizerW, u: &LabelVolume) -> Result<Vec<f64>> {
    w.check()?;
    if w.n_labels != u.labels.len() {
        return Err(Error::contract(format!(
            "regularizer has {} labels, volume {}",
            w.n_labels,
            u.labels.len()
        )));
    }
    let mut out = vec![0.0; u.spec.n_voxels() * w.n_dual_channels()];
    conv_forward(&w.kernels, w.n_labels, &u.spec, &u.u, &mut out);
    Ok(out)
}

/// Exact adjoint of [`apply_w`].
pub fn apply_w_adjoint(w: &RegularizerW, spec: &VoxelGridSpec, xi: &[f64]) -> Result<Vec<f64>> {
    w.check()?;
    if xi.len() != spec.n_voxels() * w.n_dual_channels() {
        return Err(Error::contract("dual volume has wrong size"));
    }
    let mut out = vec![0.0; spec.n_voxels() * w.n_labels];
    conv_adjoint(&w.kernels, w.n_labels, spec, xi, &mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Primal-dual updates
// ---------------------------------------------------------------------------

/// Projects every per-voxel 3-vector label group of `xi` onto the unit ball.
fn project_dual_ball(xi: &mut [f64], n: usize, n_labels: usize) {
    // Planes (3l, 3l+1, 3l+2) form the group of label l.
    for l in 0..n_labels {
        let (p0, rest) = xi[3 * l * n..].split_at_mut(n);
        let (p1, rest) = rest.split_at_mut(n);
        let p2 = &mut rest[..n];
        p0.par_chunks_mut(4096)
            .zip(p1.par_chunks_mut(4096))
            .zip(p2.par_chunks_mut(4096))
            .for_each(|((a, b), c)| {
                for i in 0..a.len() {
                    let norm = (a[i] * a[i] + b[i] * b[i] + c[i] * c[i]).sqrt();
                    if norm > 1.0 {
                        let inv = 1.0 / norm;
                        a[i] *= inv;
                        b[i] *= inv;
                        c[i] *= inv;
                    }
                }
            });
    }
}

/// One primal-dual update in place: multiplier ascent, projected dual
/// ascent, projected primal descent, over-relaxation.
pub fn pd_iteration(
    state: &mut SolverState,
    datacost: &SemanticDatacost,
    w: &RegularizerW,
) -> Result<()> {
    pd_iteration_with_tape(state, datacost, w, None)
}

struct IterTape {
    u_in: Vec<f64>,
    ubar_in: Vec<f64>,
    /// Dual iterate before the ball projection.
    y_pre: Vec<f64>,
    /// Primal descent direction `W* xi' + nu' + D`.
    t1: Vec<f64>,
}

/// Saved forward pass of an unrolled solve.
pub struct SolveTape {
    spec: VoxelGridSpec,
    n_labels: usize,
    iters: Vec<IterTape>,
    sigma: f64,
    tau: f64,
}

fn pd_iteration_with_tape(
    state: &mut SolverState,
    datacost: &SemanticDatacost,
    w: &RegularizerW,
    tape: Option<&mut Vec<IterTape>>,
) -> Result<()> {
    w.check()?;
    let spec = state.spec;
    if !datacost.spec.same_grid(&spec) || datacost.labels.len() != state.n_labels {
        return Err(Error::contract("datacost does not match solver state"));
    }
    if w.n_labels != state.n_labels {
        return Err(Error::contract("regularizer does not match solver state"));
    }
    let n = spec.n_voxels();
    let n_labels = state.n_labels;
    let (sigma, tau) = (w.sigma, w.tau);

    let u_in = tape.is_some().then(|| state.u.clone());
    let ubar_in = tape.is_some().then(|| state.u_bar.clone());

    // Multiplier ascent on the sum-to-one residual.
    {
        let u_bar = &state.u_bar;
        state
            .nu
            .par_chunks_mut(4096)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let base = ci * 4096;
                for (i, nu) in chunk.iter_mut().enumerate() {
                    let v = base + i;
                    let mut s = -1.0;
                    for l in 0..n_labels {
                        s += u_bar[l * n + v];
                    }
                    *nu += sigma * s;
                }
            });
    }

    // Dual ascent and ball projection.
    let mut wu = vec![0.0; n * 3 * n_labels];
    conv_forward(&w.kernels, n_labels, &spec, &state.u_bar, &mut wu);
    {
        let xi = &mut state.xi;
        xi.par_chunks_mut(4096)
            .zip(wu.par_chunks(4096))
            .for_each(|(x, g)| {
                for (xv, gv) in x.iter_mut().zip(g.iter()) {
                    *xv += sigma * gv;
                }
            });
    }
    let y_pre = tape.is_some().then(|| state.xi.clone());
    project_dual_ball(&mut state.xi, n, n_labels);

    // Primal descent with box projection, then over-relaxation.
    let mut t1 = vec![0.0; n * n_labels];
    conv_adjoint(&w.kernels, n_labels, &spec, &state.xi, &mut t1);
    {
        let nu = &state.nu;
        let cost = &datacost.cost;
        t1.par_chunks_mut(n).enumerate().for_each(|(l, plane)| {
            let dplane = &cost[l * n..(l + 1) * n];
            for i in 0..n {
                plane[i] += nu[i] + dplane[i];
            }
        });
    }
    {
        let u = &mut state.u;
        let u_bar = &mut state.u_bar;
        u.par_chunks_mut(4096)
            .zip(u_bar.par_chunks_mut(4096))
            .zip(t1.par_chunks(4096))
            .for_each(|((uc, bc), tc)| {
                for i in 0..uc.len() {
                    let old = uc[i];
                    let new = (old - tau * tc[i]).clamp(0.0, 1.0);
                    uc[i] = new;
                    bc[i] = 2.0 * new - old;
                }
            });
    }
    state.t += 1;

    if let Some(tape) = tape {
        tape.push(IterTape {
            u_in: u_in.unwrap(),
            ubar_in: ubar_in.unwrap(),
            y_pre: y_pre.unwrap(),
            t1,
        });
    }
    Ok(())
}

/// Runs `config.iterations` unrolled updates from the uniform start and
/// returns the primal iterate. With `levels > 1` the datacost is
/// mean-pooled, solved coarse first, and the upsampled primal warm-starts
/// the next finer level.
pub fn solve(
    datacost: &SemanticDatacost,
    w: &RegularizerW,
    config: &SolverConfig,
) -> Result<LabelVolume> {
    if config.iterations < 1 && config.levels > 0 {
        // K = 0 is allowed and returns the initialization.
    }
    if config.levels <= 1 {
        let mut state = SolverState::init(datacost.spec, datacost.labels.len());
        for _ in 0..config.iterations {
            pd_iteration(&mut state, datacost, w)?;
        }
        return Ok(LabelVolume {
            spec: datacost.spec,
            labels: datacost.labels.clone(),
            u: state.u,
        });
    }

    // Coarse-to-fine: build the pyramid fine -> coarse.
    let mut pyramid = vec![datacost.clone()];
    for _ in 1..config.levels {
        let coarse = downsample_datacost(pyramid.last().unwrap());
        if coarse.spec.dims.iter().any(|&d| d < 2) {
            break;
        }
        pyramid.push(coarse);
    }

    let mut warm: Option<Vec<f64>> = None;
    for level in (0..pyramid.len()).rev() {
        let dc = &pyramid[level];
        let mut state = match warm.take() {
            Some(u0) => SolverState::init_from(dc.spec, dc.labels.len(), u0),
            None => SolverState::init(dc.spec, dc.labels.len()),
        };
        for _ in 0..config.iterations {
            pd_iteration(&mut state, dc, w)?;
        }
        if level == 0 {
            return Ok(LabelVolume {
                spec: dc.spec,
                labels: dc.labels.clone(),
                u: state.u,
            });
        }
        warm = Some(upsample_primal(
            &state.u,
            &dc.spec,
            &pyramid[level - 1].spec,
            dc.labels.len(),
        ));
    }
    unreachable!("level 0 always returns");
}

/// Unrolled solve that records the tape for exact backpropagation.
pub fn solve_with_tape(
    datacost: &SemanticDatacost,
    w: &RegularizerW,
    iterations: usize,
) -> Result<(LabelVolume, SolveTape)> {
    let mut state = SolverState::init(datacost.spec, datacost.labels.len());
    let mut iters = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        pd_iteration_with_tape(&mut state, datacost, w, Some(&mut iters))?;
    }
    Ok((
        LabelVolume {
            spec: datacost.spec,
            labels: datacost.labels.clone(),
            u: state.u,
        },
        SolveTape {
            spec: datacost.spec,
            n_labels: datacost.labels.len(),
            iters,
            sigma: w.sigma,
            tau: w.tau,
        },
    ))
}

/// Gradients of a scalar loss with respect to everything the solver consumed.
#[derive(Clone, Debug)]
pub struct SolverGradients {
    /// Same layout as the combined datacost.
    pub d_datacost: Vec<f64>,
    /// Same layout as `RegularizerW::kernels`.
    pub d_kernels: Vec<f64>,
    pub d_sigma: f64,
    pub d_tau: f64,
}

/// Reverse-mode differentiation through every unrolled update.
///
/// Box projection: gradient passes where the pre-clamp value lies in
/// `[0, 1]`, is zero outside. Ball projection: exact Jacobian of the radial
/// scaling, with norms <= 1 (boundary included) treated as the identity.
pub fn solve_backward(
    tape: &SolveTape,
    w: &RegularizerW,
    g_u_final: &[f64],
) -> Result<SolverGradients> {
    w.check()?;
    let n = tape.spec.n_voxels();
    let n_labels = tape.n_labels;
    if g_u_final.len() != n * n_labels {
        return Err(Error::contract("upstream gradient has wrong size"));
    }
    let (sigma, tau) = (tape.sigma, tape.tau);
    let spec = tape.spec;

    let mut g_u = g_u_final.to_vec();
    let mut g_ubar = vec![0.0; n * n_labels];
    let mut g_xi = vec![0.0; n * 3 * n_labels];
    let mut g_nu = vec![0.0; n];
    let mut grads = SolverGradients {
        d_datacost: vec![0.0; n * n_labels],
        d_kernels: vec![0.0; w.kernels.len()],
        d_sigma: 0.0,
        d_tau: 0.0,
    };

    let mut xi_next = vec![0.0; n * 3 * n_labels];
    for t in (0..tape.iters.len()).rev() {
        let it = &tape.iters[t];

        // Over-relaxation: ubar' = 2 u' - u_in.
        let mut g_u_prev = vec![0.0; n * n_labels];
        for ((gu, gb), gp) in g_u.iter_mut().zip(g_ubar.iter()).zip(g_u_prev.iter_mut()) {
            *gu += 2.0 * gb;
            *gp -= gb;
        }

        // Primal step: u' = clamp(u_in - tau * t1).
        let mut g_z = vec![0.0; n * n_labels];
        {
            let mut d_tau_acc = 0.0;
            for i in 0..n * n_labels {
                let z = it.u_in[i] - tau * it.t1[i];
                if (0.0..=1.0).contains(&z) {
                    let g = g_u[i];
                    g_z[i] = g;
                    g_u_prev[i] += g;
                    d_tau_acc -= g * it.t1[i];
                }
            }
            grads.d_tau += d_tau_acc;
        }
        // t1 = W* xi' + nu' + D.
        let mut g_t1 = g_z;
        for g in g_t1.iter_mut() {
            *g *= -tau;
        }
        for l in 0..n_labels {
            let plane = &g_t1[l * n..(l + 1) * n];
            for (gn, gt) in g_nu.iter_mut().zip(plane.iter()) {
                *gn += gt;
            }
        }
        for (gd, gt) in grads.d_datacost.iter_mut().zip(g_t1.iter()) {
            *gd += gt;
        }
        // Recompute the projected dual of this iteration.
        xi_next.copy_from_slice(&it.y_pre);
        project_dual_ball(&mut xi_next, n, n_labels);
        conv_kernel_grad(n_labels, &spec, &g_t1, &xi_next, &mut grads.d_kernels, 1.0);
        {
            let mut add = vec![0.0; n * 3 * n_labels];
            conv_forward(&w.kernels, n_labels, &spec, &g_t1, &mut add);
            for (gx, a) in g_xi.iter_mut().zip(add.iter()) {
                *gx += a;
            }
        }

        // Dual step: xi' = project(y), y = xi_in + sigma * W ubar_in.
        let mut g_y = vec![0.0; n * 3 * n_labels];
        for l in 0..n_labels {
            let base = 3 * l * n;
            for v in 0..n {
                let y = [
                    it.y_pre[base + v],
                    it.y_pre[base + n + v],
                    it.y_pre[base + 2 * n + v],
                ];
                let g = [
                    g_xi[base + v],
                    g_xi[base + n + v],
                    g_xi[base + 2 * n + v],
                ];
                let norm = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
                if norm <= 1.0 {
                    g_y[base + v] = g[0];
                    g_y[base + n + v] = g[1];
                    g_y[base + 2 * n + v] = g[2];
                } else {
                    let inv = 1.0 / norm;
                    let p = [y[0] * inv, y[1] * inv, y[2] * inv];
                    let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
                    g_y[base + v] = (g[0] - p[0] * dot) * inv;
                    g_y[base + n + v] = (g[1] - p[1] * dot) * inv;
                    g_y[base + 2 * n + v] = (g[2] - p[2] * dot) * inv;
                }
            }
        }
        // d_sigma via W ubar = (y - xi_in) / sigma.
        {
            let mut acc = 0.0;
            if t == 0 {
                for (gy, y) in g_y.iter().zip(it.y_pre.iter()) {
                    acc += gy * y; // xi_0 = 0
                }
            } else {
                xi_next.copy_from_slice(&tape.iters[t - 1].y_pre);
                project_dual_ball(&mut xi_next, n, n_labels);
                for ((gy, y), xp) in g_y.iter().zip(it.y_pre.iter()).zip(xi_next.iter()) {
                    acc += gy * (y - xp);
                }
            }
            grads.d_sigma += acc / sigma;
        }
        let mut g_ubar_new = vec![0.0; n * n_labels];
        conv_adjoint(&w.kernels, n_labels, &spec, &g_y, &mut g_ubar_new);
        for g in g_ubar_new.iter_mut() {
            *g *= sigma;
        }
        conv_kernel_grad(n_labels, &spec, &it.ubar_in, &g_y, &mut grads.d_kernels, sigma);
        g_xi = g_y;

        // Multiplier step: nu' = nu_in + sigma * (sum_l ubar_in - 1).
        {
            let mut acc = 0.0;
            for v in 0..n {
                let mut r = -1.0;
                for l in 0..n_labels {
                    r += it.ubar_in[l * n + v];
                }
                acc += g_nu[v] * r;
            }
            grads.d_sigma += acc;
            for l in 0..n_labels {
                let plane = &mut g_ubar_new[l * n..(l + 1) * n];
                for (gb, gn) in plane.iter_mut().zip(g_nu.iter()) {
                    *gb += sigma * gn;
                }
            }
        }

        g_u = g_u_prev;
        g_ubar = g_ubar_new;
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Energy, labeling, pyramid helpers
// ---------------------------------------------------------------------------

/// Diagnostic value of the minimized objective at `u`.
pub fn energy(u: &LabelVolume, datacost: &SemanticDatacost, w: &RegularizerW) -> Result<f64> {
    if !u.spec.same_grid(&datacost.spec) || u.labels != datacost.labels {
        return Err(Error::contract("label volume does not match datacost"));
    }
    let wu = apply_w(w, u)?;
    let n = u.spec.n_voxels();
    let n_labels = u.labels.len();
    let mut reg = 0.0;
    for l in 0..n_labels {
        let base = 3 * l * n;
        for v in 0..n {
            let a = wu[base + v];
            let b = wu[base + n + v];
            let c = wu[base + 2 * n + v];
            reg += (a * a + b * b + c * c).sqrt();
        }
    }
    let data: f64 = datacost
        .cost
        .iter()
        .zip(u.u.iter())
        .map(|(d, uv)| d * uv)
        .sum();
    Ok(reg + data)
}

/// Per-voxel argmax over labels; ties break toward the lowest label index.
pub fn extract_labels(u: &LabelVolume) -> Vec<u8> {
    let n = u.spec.n_voxels();
    let n_labels = u.labels.len();
    let mut out = vec![0u8; n];
    out.par_chunks_mut(4096).enumerate().for_each(|(ci, chunk)| {
        let base = ci * 4096;
        for (i, o) in chunk.iter_mut().enumerate() {
            let v = base + i;
            let mut best = 0usize;
            let mut best_val = u.u[v];
            for l in 1..n_labels {
                let val = u.u[l * n + v];
                if val > best_val {
                    best_val = val;
                    best = l;
                }
            }
            *o = best as u8;
        }
    });
    out
}

/// Residual of the sum-to-one constraint, max over voxels.
pub fn constraint_residual(u: &LabelVolume) -> f64 {
    let n = u.spec.n_voxels();
    let n_labels = u.labels.len();
    let mut worst = 0.0f64;
    for v in 0..n {
        let mut s = -1.0;
        for l in 0..n_labels {
            s += u.u[l * n + v];
        }
        worst = worst.max(s.abs());
    }
    worst
}

/// Mean-pools each label plane by a factor of two (clamped at odd borders).
fn downsample_datacost(dc: &SemanticDatacost) -> SemanticDatacost {
    let dims = dc.spec.dims;
    let cd = [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)];
    let cspec = VoxelGridSpec::new(dc.spec.origin, dc.spec.voxel_size * 2.0, cd)
        .expect("valid coarse spec");
    let n = dc.spec.n_voxels();
    let cn = cspec.n_voxels();
    let n_labels = dc.labels.len();
    let mut out = SemanticDatacost::zeros(cspec, dc.labels.clone());
    for l in 0..n_labels {
        let src = &dc.cost[l * n..(l + 1) * n];
        let dst = &mut out.cost[l * cn..(l + 1) * cn];
        for cz in 0..cd[2] {
            for cy in 0..cd[1] {
                for cx in 0..cd[0] {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for oz in 0..2 {
                        let z = 2 * cz + oz;
                        if z >= dims[2] {
                            continue;
                        }
                        for oy in 0..2 {
                            let y = 2 * cy + oy;
                            if y >= dims[1] {
                                continue;
                            }
                            for ox in 0..2 {
                                let x = 2 * cx + ox;
                                if x >= dims[0] {
                                    continue;
                                }
                                sum += src[(z * dims[1] + y) * dims[0] + x];
                                count += 1.0;
                            }
                        }
                    }
                    dst[(cz * cd[1] + cy) * cd[0] + cx] = sum / count;
                }
            }
        }
    }
    out
}

/// Trilinear upsampling of label planes onto the finer grid, clamped to
/// [0, 1].
fn upsample_primal(
    u: &[f64],
    coarse: &VoxelGridSpec,
    fine: &VoxelGridSpec,
    n_labels: usize,
) -> Vec<f64> {
    let cn = coarse.n_voxels();
    let fn_ = fine.n_voxels();
    let cd = coarse.dims;
    let fd = fine.dims;
    let mut out = vec![0.0; fn_ * n_labels];
    for l in 0..n_labels {
        let src = &u[l * cn..(l + 1) * cn];
        let dst = &mut out[l * fn_..(l + 1) * fn_];
        for z in 0..fd[2] {
            let gz = (z as f64 + 0.5) / 2.0 - 0.5;
            for y in 0..fd[1] {
                let gy = (y as f64 + 0.5) / 2.0 - 0.5;
                for x in 0..fd[0] {
                    let gx = (x as f64 + 0.5) / 2.0 - 0.5;
                    dst[(z * fd[1] + y) * fd[0] + x] =
                        trilinear(src, cd, gx, gy, gz).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

fn trilinear(src: &[f64], dims: [usize; 3], x: f64, y: f64, z: f64) -> f64 {
    let sample = |xi: isize, yi: isize, zi: isize| -> f64 {
        let xc = xi.clamp(0, dims[0] as isize - 1) as usize;
        let yc = yi.clamp(0, dims[1] as isize - 1) as usize;
        let zc = zi.clamp(0, dims[2] as isize - 1) as usize;
        src[(zc * dims[1] + yc) * dims[0] + xc]
    };
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (xi, yi, zi) = (x0 as isize, y0 as isize, z0 as isize);
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - fz } else { fz };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                acc += wx * wy * wz * sample(xi + dx, yi + dy, zi + dz);
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::LabelSet;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(k: usize) -> LabelSet {
        LabelSet::new((0..k).map(|i| format!("l{i}")).collect()).unwrap()
    }

    fn spec(dims: [usize; 3]) -> VoxelGridSpec {
        VoxelGridSpec::new([0.0, 0.0, 0.0], 1.0, dims).unwrap()
    }

    fn random_datacost(spec: VoxelGridSpec, k: usize, rng: &mut ChaCha8Rng) -> SemanticDatacost {
        let mut dc = SemanticDatacost::zeros(spec, labels(k));
        for c in dc.cost.iter_mut() {
            *c = rng.random_range(-1.0..1.0);
        }
        dc
    }

    #[test]
    fn apply_w_zero_kernel() {
        let s = spec([3, 3, 3]);
        let u = LabelVolume::uniform(s, labels(2));
        let w = RegularizerW::zeros(2);
        let out = apply_w(&w, &u).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tv_of_constant_vanishes_in_interior() {
        let s = spec([4, 4, 4]);
        let u = LabelVolume::uniform(s, labels(2));
        let w = RegularizerW::tv(2, 1.0);
        let out = apply_w(&w, &u).unwrap();
        let n = s.n_voxels();
        // Zero-padded borders see a jump; interior differences of a constant
        // are exactly zero.
        for oc in 0..6 {
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        let v = (z * 4 + y) * 4 + x;
                        assert_eq!(out[oc * n + v], 0.0, "oc {oc} at ({x},{y},{z})");
                    }
                }
            }
        }
    }

    #[test]
    fn tv_of_unit_step_along_x() {
        // 3-voxel line, 2 labels, step 0 0 1 in label 0.
        let s = spec([3, 1, 1]);
        let mut u = LabelVolume::uniform(s, labels(2));
        u.u[0] = 0.0;
        u.u[1] = 0.0;
        u.u[2] = 1.0;
        for i in 3..6 {
            u.u[i] = 0.0;
        }
        let w = RegularizerW::tv(2, 1.0);
        let out = apply_w(&w, &u).unwrap();
        let n = 3;
        // x-channel of label 0 is plane 0: forward difference with zero pad.
        assert_eq!(out[0], 0.0); // u(1) - u(0) = 0
        assert_eq!(out[1], 1.0); // u(2) - u(1) = +1 at the step face
        assert_eq!(out[2], -1.0); // pad(0) - u(2) at the border
        // y/z channels clip to the padding everywhere except via center tap.
        assert_eq!(out[n], 0.0);
        assert_eq!(out[n + 1], 0.0);
    }

    #[test]
    fn delta_kernel_regroups_channels() {
        // 1-voxel grid: only the center tap survives zero padding.
        let s = spec([1, 1, 1]);
        let mut w = RegularizerW::zeros(2);
        // oc 4 reads ic 1 with weight 2 at the center.
        w.kernels[(4 * 2 + 1) * KERNEL_TAPS + 13] = 2.0;
        let mut xi = vec![0.0; 6];
        xi[4] = 3.0;
        let out = apply_w_adjoint(&w, &s, &xi).unwrap();
        assert_eq!(out, vec![0.0, 6.0]);
    }

    #[test]
    fn adjoint_identity_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let k = rng.random_range(2..=4usize);
            let dims = [
                rng.random_range(1..=5usize),
                rng.random_range(1..=5usize),
                rng.random_range(1..=5usize),
            ];
            let s = spec(dims);
            let n = s.n_voxels();
            let mut w = RegularizerW::zeros(k);
            for kv in w.kernels.iter_mut() {
                *kv = rng.random_range(-1.0..1.0);
            }
            let u = LabelVolume {
                spec: s,
                labels: labels(k),
                u: (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let xi: Vec<f64> = (0..n * 3 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wu = apply_w(&w, &u).unwrap();
            let wtxi = apply_w_adjoint(&w, &s, &xi).unwrap();
            let lhs: f64 = wu.iter().zip(xi.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.u.iter().zip(wtxi.iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-9,
                "trial {trial}: <Wu,xi>={lhs} vs <u,W*xi>={rhs}"
            );
        }
    }

    #[test]
    fn pd_iteration_nu_fixed_when_feasible() {
        let s = spec([2, 2, 2]);
        let dc = SemanticDatacost::zeros(s, labels(2));
        let mut state = SolverState::init(s, 2);
        let w = RegularizerW::zeros(2);
        pd_iteration(&mut state, &dc, &w).unwrap();
        assert!(state.nu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_ball_projection_example() {
        let n = 1;
        let mut xi = vec![0.0, 0.0, 3.0];
        project_dual_ball(&mut xi, n, 1);
        assert_relative_eq!(xi[2], 1.0, epsilon = 1e-15);
        assert_eq!(xi[0], 0.0);
    }

    #[test]
    fn primal_update_hand_example() {
        // u = 0.5, W = 0, nu stays 0 (feasible), datacost = -10, tau = 0.1.
        let s = spec([1, 1, 1]);
        let mut dc = SemanticDatacost::zeros(s, labels(2));
        dc.cost[0] = -10.0;
        dc.cost[1] = -10.0;
        let mut w = RegularizerW::zeros(2);
        w.tau = 0.1;
        let mut state = SolverState::init(s, 2);
        pd_iteration(&mut state, &dc, &w).unwrap();
        assert_eq!(state.u[0], 1.0);
        assert_relative_eq!(state.u_bar[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn solve_long_run_oracle() {
        let s = spec([2, 2, 2]);
        let mut dc = SemanticDatacost::zeros(s, labels(2));
        let n = s.n_voxels();
        for v in 0..n {
            dc.cost[v] = -1.0;
        }
        let w = RegularizerW::zeros(2);
        let cfg = SolverConfig {
            iterations: 200,
            levels: 1,
            constraint_tol: 1e-2,
        };
        let u = solve(&dc, &w, &cfg).unwrap();
        for v in 0..n {
            assert!((u.at(0, v) - 1.0).abs() < 0.05, "u0 = {}", u.at(0, v));
            assert!(u.at(1, v) < 0.05);
        }
    }

    #[test]
    fn solve_symmetric_datacost_stays_symmetric() {
        let s = spec([2, 2, 2]);
        let mut dc = SemanticDatacost::zeros(s, labels(2));
        for c in dc.cost.iter_mut() {
            *c = -0.7;
        }
        let w = RegularizerW::zeros(2);
        let n = s.n_voxels();
        // Label symmetry is an exact fixed point of the updates; the common
        // value settles back to 0.5 as the multiplier converges.
        let cfg = SolverConfig {
            iterations: 1000,
            levels: 1,
            constraint_tol: 1e-2,
        };
        let u = solve(&dc, &w, &cfg).unwrap();
        for v in 0..n {
            assert_eq!(u.u[v].to_bits(), u.u[n + v].to_bits());
            assert!((u.u[v] - 0.5).abs() < 1e-3, "u = {}", u.u[v]);
        }
    }

    #[test]
    fn solve_zero_datacost_stays_uniform() {
        // With two labels the sum-to-one residual of the uniform start is
        // exactly zero in floating point, so nothing ever moves.
        let s = spec([3, 2, 1]);
        let dc = SemanticDatacost::zeros(s, labels(2));
        let w = RegularizerW::zeros(2);
        let u = solve(&dc, &w, &SolverConfig::default()).unwrap();
        assert!(u.u.iter().all(|&v| v == 0.5));

        // Odd label counts pick up one-ulp residual noise from summing 1/3
        // three times; the iterates stay uniform to machine precision.
        let dc3 = SemanticDatacost::zeros(s, labels(3));
        let w3 = RegularizerW::zeros(3);
        let u3 = solve(&dc3, &w3, &SolverConfig::default()).unwrap();
        let third = 1.0 / 3.0;
        assert!(u3.u.iter().all(|&v| (v - third).abs() < 1e-12));
    }

    #[test]
    fn solve_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = spec([5, 4, 3]);
        let dc = random_datacost(s, 3, &mut rng);
        let w = RegularizerW::tv_with_noise(3, 0.2, 0.05, 3);
        let a = solve(&dc, &w, &SolverConfig::default()).unwrap();
        let b = solve(&dc, &w, &SolverConfig::default()).unwrap();
        assert_eq!(a.u, b.u);
    }

    /// Per-voxel vote-style datacost: one dominant negative label plus small
    /// perturbations, the shape the fusion stage produces.
    fn vote_datacost(spec: VoxelGridSpec, k: usize, rng: &mut ChaCha8Rng) -> SemanticDatacost {
        let n = spec.n_voxels();
        let mut dc = SemanticDatacost::zeros(spec, labels(k));
        for v in 0..n {
            let l = rng.random_range(0..k);
            dc.cost[l * n + v] = -rng.random_range(0.2..1.0);
            for ll in 0..k {
                dc.cost[ll * n + v] += rng.random_range(-0.05..0.05);
            }
        }
        dc
    }

    #[test]
    fn feasibility_box_and_ball_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let s = spec([4, 4, 4]);
            let k = 2 + (trial % 3);
            let dc = vote_datacost(s, k, &mut rng);
            let n = s.n_voxels();

            // Strong regularizer: box and dual-ball exactness while the
            // projection actively clips.
            let w = RegularizerW::tv(k, 0.2);
            let mut state = SolverState::init(s, k);
            for _ in 0..200 {
                pd_iteration(&mut state, &dc, &w).unwrap();
                assert!(state.u.iter().all(|&v| (0.0..=1.0).contains(&v)));
                for l in 0..k {
                    for v in 0..n {
                        let a = state.xi[3 * l * n + v];
                        let b = state.xi[(3 * l + 1) * n + v];
                        let c = state.xi[(3 * l + 2) * n + v];
                        assert!((a * a + b * b + c * c).sqrt() <= 1.0 + 1e-12);
                    }
                }
            }

            // Weak regularizer: the multiplier settles the sum-to-one
            // constraint inside the 200-iteration budget.
            let w_mild = RegularizerW::tv(k, 0.02);
            let mut state = SolverState::init(s, k);
            for _ in 0..200 {
                pd_iteration(&mut state, &dc, &w_mild).unwrap();
            }
            let u = LabelVolume {
                spec: s,
                labels: labels(k),
                u: state.u.clone(),
            };
            assert!(
                constraint_residual(&u) <= 1e-2,
                "residual {}",
                constraint_residual(&u)
            );
        }
    }

    #[test]
    fn energy_examples() {
        let s = spec([2, 2, 2]);
        let n = s.n_voxels();
        // One-hot for label 0 whose datacost is -1 everywhere.
        let mut u = LabelVolume::uniform(s, labels(2));
        for v in 0..n {
            u.u[v] = 1.0;
            u.u[n + v] = 0.0;
        }
        let mut dc = SemanticDatacost::zeros(s, labels(2));
        for v in 0..n {
            dc.cost[v] = -1.0;
        }
        let w0 = RegularizerW::zeros(2);
        assert_relative_eq!(energy(&u, &dc, &w0).unwrap(), -(n as f64), epsilon = 1e-12);

        // u = 0 everywhere evaluates to 0.
        let zero = LabelVolume {
            spec: s,
            labels: labels(2),
            u: vec![0.0; 2 * n],
        };
        assert_eq!(energy(&zero, &dc, &w0).unwrap(), 0.0);

        // Constant u with TV stencils: interior contributes nothing; compare
        // against the border-only value computed via apply_w directly.
        let w = RegularizerW::tv(2, 0.3);
        let uc = LabelVolume::uniform(s, labels(2));
        let wu = apply_w(&w, &uc).unwrap();
        let mut expected = 0.0;
        for l in 0..2 {
            for v in 0..n {
                let a = wu[3 * l * n + v];
                let b = wu[(3 * l + 1) * n + v];
                let c = wu[(3 * l + 2) * n + v];
                expected += (a * a + b * b + c * c).sqrt();
            }
        }
        let dc0 = SemanticDatacost::zeros(s, labels(2));
        assert_relative_eq!(energy(&uc, &dc0, &w).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn extract_labels_cases() {
        let s = spec([1, 1, 1]);
        let mk = |vals: Vec<f64>| LabelVolume {
            spec: s,
            labels: labels(vals.len()),
            u: vals,
        };
        assert_eq!(extract_labels(&mk(vec![0.0, 1.0]))[0], 1);
        assert_eq!(extract_labels(&mk(vec![0.5, 0.5]))[0], 0);
        assert_eq!(extract_labels(&mk(vec![0.2, 0.3, 0.5]))[0], 2);
    }

    #[test]
    fn backward_zero_iterations_zero_datacost_grad() {
        let s = spec([2, 2, 2]);
        let dc = SemanticDatacost::zeros(s, labels(2));
        let w = RegularizerW::zeros(2);
        let (_, tape) = solve_with_tape(&dc, &w, 0).unwrap();
        let g = solve_backward(&tape, &w, &vec![1.0; 16]).unwrap();
        assert!(g.d_datacost.iter().all(|&v| v == 0.0));
        assert!(g.d_kernels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_one_iteration_matches_hand_derivative() {
        // W = 0, K = 1: u_1 = clamp(u_0 - tau (nu_1 + D)); with uniform u_0,
        // nu_1 = 0, so d u_1 / d D = -tau wherever the clamp is inactive.
        let s = spec([2, 1, 1]);
        let mut dc = SemanticDatacost::zeros(s, labels(2));
        dc.cost[0] = -0.5; // label 0, voxel 0: z = 0.55 stays inside (0,1)
        dc.cost[1] = -20.0; // label 0, voxel 1: z > 1 -> clamped
        let mut w = RegularizerW::zeros(2);
        w.tau = 0.1;
        let (_, tape) = solve_with_tape(&dc, &w, 1).unwrap();
        // Upstream gradient selects u(label 0, voxel 0) and u(label 0, voxel 1).
        let mut g_u = vec![0.0; 4];
        g_u[0] = 1.0;
        g_u[1] = 1.0;
        let g = solve_backward(&tape, &w, &g_u).unwrap();
        assert_relative_eq!(g.d_datacost[0], -0.1, epsilon = 1e-12);
        assert_eq!(g.d_datacost[1], 0.0); // clamped voxel
    }

    /// Central-difference check of the full backward pass on a 3x3x3 grid
    /// with 2 labels and K = 5, for datacost, kernels and step sizes.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = spec([3, 3, 3]);
        let k = 2;
        let dc = {
            let mut dc = SemanticDatacost::zeros(s, labels(k));
            for c in dc.cost.iter_mut() {
                *c = rng.random_range(-0.5..0.5);
            }
            dc
        };
        let mut w = RegularizerW::tv(k, 0.2);
        for kv in w.kernels.iter_mut() {
            *kv += rng.random_range(-0.05..0.05);
        }
        let n = s.n_voxels();
        let g_out: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let iterations = 5;

        let loss = |dc: &SemanticDatacost, w: &RegularizerW| -> f64 {
            let (u, _) = solve_with_tape(dc, w, iterations).unwrap();
            u.u.iter().zip(g_out.iter()).map(|(a, b)| a * b).sum()
        };

        let (_, tape) = solve_with_tape(&dc, &w, iterations).unwrap();
        let grads = solve_backward(&tape, &w, &g_out).unwrap();

        let step = 1e-5;
        let mut checked_dc = 0;
        for i in (0..n * k).step_by(7) {
            let mut dcp = dc.clone();
            dcp.cost[i] += step;
            let fp = loss(&dcp, &w);
            dcp.cost[i] -= 2.0 * step;
            let fm = loss(&dcp, &w);
            let fd = (fp - fm) / (2.0 * step);
            let an = grads.d_datacost[i];
            if fd.abs().max(an.abs()) < 1e-9 {
                continue;
            }
            assert!(
                rel_err(an, fd) < 1e-3,
                "datacost[{i}]: analytic {an}, fd {fd}"
            );
            checked_dc += 1;
        }
        assert!(checked_dc > 3);

        let mut checked_k = 0;
        for i in (0..w.kernels.len()).step_by(13) {
            let mut wp = w.clone();
            wp.kernels[i] += step;
            let fp = loss(&dc, &wp);
            wp.kernels[i] -= 2.0 * step;
            let fm = loss(&dc, &wp);
            let fd = (fp - fm) / (2.0 * step);
            let an = grads.d_kernels[i];
            if fd.abs().max(an.abs()) < 1e-9 {
                continue;
            }
            assert!(rel_err(an, fd) < 1e-3, "kernel[{i}]: analytic {an}, fd {fd}");
            checked_k += 1;
        }
        assert!(checked_k > 3);

        for (name, an, apply) in [
            (
                "sigma",
                grads.d_sigma,
                Box::new(|w: &mut RegularizerW, d: f64| w.sigma += d)
                    as Box<dyn Fn(&mut RegularizerW, f64)>,
            ),
            (
                "tau",
                grads.d_tau,
                Box::new(|w: &mut RegularizerW, d: f64| w.tau += d),
            ),
        ] {
            let mut wp = w.clone();
            apply(&mut wp, step);
            let fp = loss(&dc, &wp);
            let mut wm = w.clone();
            apply(&mut wm, -step);
            let fm = loss(&dc, &wm);
            let fd = (fp - fm) / (2.0 * step);
            assert!(rel_err(an, fd) < 1e-3, "{name}: analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn coarse_to_fine_warm_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = spec([8, 8, 4]);
        let dc = vote_datacost(s, 3, &mut rng);
        let w = RegularizerW::tv(3, 0.1);
        let cfg = SolverConfig {
            iterations: 300,
            levels: 2,
            constraint_tol: 5e-2,
        };
        let u = solve(&dc, &w, &cfg).unwrap();
        assert!(u.u.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(constraint_residual(&u) <= cfg.constraint_tol);
        // Same labeling as the flat solve at equal budget on most voxels.
        let flat = solve(
            &dc,
            &w,
            &SolverConfig {
                iterations: 300,
                levels: 1,
                constraint_tol: 5e-2,
            },
        )
        .unwrap();
        let a = extract_labels(&u);
        let b = extract_labels(&flat);
        let agree = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
        assert!(agree as f64 >= 0.9 * a.len() as f64, "agree {agree}/{}", a.len());
        // Deterministic across runs.
        let u2 = solve(&dc, &w, &cfg).unwrap();
        assert_eq!(u.u, u2.u);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
    }
}
