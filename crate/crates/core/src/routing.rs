//! EM routing-by-agreement.
//!
//! One routing instance clusters `n` child votes (3 imaginary components
//! each) into `P` parent capsules. Responsibilities start uniform; each of the
//! `T` iterations runs an M-step, followed by an E-step on all but the last.
//!
//! M-step, with `r'_ij = R_ij a_i`, mass `M_j = Σ_i r'_ij`, `D_j = M_j + ε_r`:
//!
//! ```text
//! μ_jh  = Σ_i r'_ij V_ijh / D_j            (unweighted vote mean when M_j = 0)
//! σ²_jh = Σ_i r'_ij (V_ijh − μ_jh)² / D_j + ε_var
//! cost_j = M_j Σ_h (β_u,j + ½ ln σ²_jh)
//! a_j   = sigmoid(λ_t (β_a,j − cost_j))
//! ```
//!
//! E-step: `R_ij = softmax_j(ln a_j + Σ_h [−(V_ijh − μ_jh)² / 2σ²_jh − ½ ln 2πσ²_jh])`.
//!
//! The inverse temperature follows `λ_t = lambda_base + lambda_growth · t`.

use rayon::prelude::*;

use crate::autodiff::elementwise::{log_sigmoid, sigmoid};
use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Pose components routed per vote.
pub const POSE_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub lambda_base: f64,
    pub lambda_growth: f64,
    pub eps_var: f64,
    pub eps_r: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iterations: 2,
            lambda_base: 0.01,
            lambda_growth: 0.01,
            eps_var: 1e-6,
            eps_r: 1e-8,
        }
    }
}

impl RoutingConfig {
    pub fn lambda(&self, iteration: usize) -> f64 {
        self.lambda_base + self.lambda_growth * iteration as f64
    }
}

/// Output of one M-step for `P` parents; per-dimension arrays are `[P, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep<T> {
    pub means: Vec<T>,
    pub variances: Vec<T>,
    pub mass: Vec<T>,
    pub activations: Vec<T>,
    pub log_activations: Vec<T>,
}

/// Full routing state after the last iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T> {
    /// `[children, parents]`, row-stochastic.
    pub responsibilities: Vec<T>,
    /// `[parents, 3]`
    pub means: Vec<T>,
    /// `[parents, 3]`
    pub variances: Vec<T>,
    pub activations: Vec<T>,
    pub lambda: f64,
}

/// Dimensions of one routing instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub children: usize,
    pub parents: usize,
}

impl Instance {
    fn pairs(&self) -> usize {
        self.children * self.parents
    }

    fn votes_len(&self) -> usize {
        self.pairs() * POSE_DIM
    }
}

// The kernels below work on planar data: votes are three planes of
// `[children, parents]` (plane `h` at offset `h · n · P`) and per-parent
// statistics are three planes of `[parents]`.

fn to_planar<T: Real>(interleaved: &[T]) -> Vec<T> {
    let rows = interleaved.len() / POSE_DIM;
    let mut out = vec![T::zero(); interleaved.len()];
    for (k, v) in interleaved.chunks_exact(POSE_DIM).enumerate() {
        for h in 0..POSE_DIM {
            out[h * rows + k] = v[h];
        }
    }
    out
}

fn from_planar<T: Real>(planar: &[T]) -> Vec<T> {
    let rows = planar.len() / POSE_DIM;
    let mut out = vec![T::zero(); planar.len()];
    for k in 0..rows {
        for h in 0..POSE_DIM {
            out[k * POSE_DIM + h] = planar[h * rows + k];
        }
    }
    out
}

/// M-step result in planar layout plus what the reverse pass needs.
#[derive(Debug, Clone)]
struct Stats<T> {
    mean: Vec<T>,
    var: Vec<T>,
    /// `Σ_i r'_ij (V_ijh − μ_jh)²`
    scatter: Vec<T>,
    mass: Vec<T>,
    act: Vec<T>,
    log_act: Vec<T>,
    fallback: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn m_step_planar<T: Real>(
    inst: Instance,
    r: &[T],
    acts: &[T],
    votes: &[T],
    beta_a: &[T],
    beta_u: &[T],
    lambda: f64,
    cfg: &RoutingConfig,
    weighted: &mut [T],
) -> Stats<T> {
    let Instance { children: n, parents: p } = inst;
    let np = n * p;
    let mut mass = vec![T::zero(); p];
    for i in 0..n {
        let a = acts[i];
        let row = &r[i * p..(i + 1) * p];
        let w = &mut weighted[i * p..(i + 1) * p];
        for j in 0..p {
            let x = row[j] * a;
            w[j] = x;
            mass[j] += x;
        }
    }
    let mut num = vec![T::zero(); POSE_DIM * p];
    for h in 0..POSE_DIM {
        let plane = &votes[h * np..(h + 1) * np];
        let acc = &mut num[h * p..(h + 1) * p];
        for (w, v) in weighted[..np].chunks_exact(p).zip(plane.chunks_exact(p)) {
            for j in 0..p {
                acc[j] += w[j] * v[j];
            }
        }
    }
    let eps_r = T::from_f64(cfg.eps_r);
    let fallback: Vec<bool> = mass.iter().map(|&m| m == T::zero()).collect();
    let mut mean = vec![T::zero(); POSE_DIM * p];
    for h in 0..POSE_DIM {
        for j in 0..p {
            mean[h * p + j] = if fallback[j] {
                let s: T = (0..n).map(|i| votes[h * np + i * p + j]).sum();
                s / T::from_f64(n as f64)
            } else {
                num[h * p + j] / (mass[j] + eps_r)
            };
        }
    }
    let mut scatter = vec![T::zero(); POSE_DIM * p];
    for h in 0..POSE_DIM {
        let plane = &votes[h * np..(h + 1) * np];
        let mu = &mean[h * p..(h + 1) * p];
        let acc = &mut scatter[h * p..(h + 1) * p];
        for (w, v) in weighted[..np].chunks_exact(p).zip(plane.chunks_exact(p)) {
            for j in 0..p {
                let d = v[j] - mu[j];
                acc[j] += w[j] * d * d;
            }
        }
    }
    let eps_var = T::from_f64(cfg.eps_var);
    let lam = T::from_f64(lambda);
    let half = T::c(0.5);
    let mut var = vec![T::zero(); POSE_DIM * p];
    let mut act = vec![T::zero(); p];
    let mut log_act = vec![T::zero(); p];
    for j in 0..p {
        let d = mass[j] + eps_r;
        let mut per_dim = T::zero();
        for h in 0..POSE_DIM {
            let s = scatter[h * p + j] / d + eps_var;
            var[h * p + j] = s;
            per_dim += beta_u[j] + half * s.ln();
        }
        let z = lam * (beta_a[j] - mass[j] * per_dim);
        act[j] = sigmoid(z);
        log_act[j] = log_sigmoid(z);
    }
    Stats {
        mean,
        var,
        scatter,
        mass,
        act,
        log_act,
        fallback,
    }
}

fn e_step_planar<T: Real>(inst: Instance, stats: &Stats<T>, votes: &[T], out: &mut [T]) {
    let Instance { children: n, parents: p } = inst;
    let np = n * p;
    let half = T::c(0.5);
    let two_pi = T::c(2.0 * std::f64::consts::PI);
    let inv_two_var: Vec<T> = stats.var.iter().map(|&s| half / s).collect();
    let mut base = stats.log_act.clone();
    for h in 0..POSE_DIM {
        for j in 0..p {
            base[j] -= half * (two_pi * stats.var[h * p + j]).ln();
        }
    }
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        row.copy_from_slice(&base);
        for h in 0..POSE_DIM {
            let v = &votes[h * np + i * p..h * np + (i + 1) * p];
            let mu = &stats.mean[h * p..(h + 1) * p];
            let k = &inv_two_var[h * p..(h + 1) * p];
            for j in 0..p {
                let d = v[j] - mu[j];
                row[j] -= d * d * k[j];
            }
        }
        let best = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - best).exp();
            total += *x;
        }
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// M-step over votes laid out `[children, parents, 3]`.
#[allow(clippy::too_many_arguments)]
pub fn m_step<T: Real>(
    inst: Instance,
    responsibilities: &[T],
    child_acts: &[T],
    votes: &[T],
    beta_a: &[T],
    beta_u: &[T],
    lambda: f64,
    cfg: &RoutingConfig,
) -> MStep<T> {
    let planar = to_planar(votes);
    let mut weighted = vec![T::zero(); inst.pairs()];
    let s = m_step_planar(inst, responsibilities, child_acts, &planar, beta_a, beta_u, lambda, cfg, &mut weighted);
    MStep {
        means: from_planar(&s.mean),
        variances: from_planar(&s.var),
        mass: s.mass,
        activations: s.act,
        log_activations: s.log_act,
    }
}

/// E-step: new responsibilities `[children, parents]`, computed in the log
/// domain. `means` and `variances` are `[parents, 3]`, votes `[children,
/// parents, 3]`.
pub fn e_step<T: Real>(inst: Instance, means: &[T], variances: &[T], log_activations: &[T], votes: &[T]) -> Vec<T> {
    let stats = Stats {
        mean: to_planar(means),
        var: to_planar(variances),
        scatter: Vec::new(),
        mass: Vec::new(),
        act: Vec::new(),
        log_act: log_activations.to_vec(),
        fallback: Vec::new(),
    };
    let mut out = vec![T::zero(); inst.pairs()];
    e_step_planar(inst, &stats, &to_planar(votes), &mut out);
    out
}

/// Forward record of one routing instance: the responsibilities entering
/// every M-step and the M-step results.
struct Trace<T> {
    responsibilities: Vec<Vec<T>>,
    steps: Vec<Stats<T>>,
}

/// Scratch buffers reused across the instances handled by one worker.
struct Workspace<T> {
    r: Vec<T>,
    next: Vec<T>,
    weighted: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(inst: Instance) -> Self {
        Workspace {
            r: vec![T::zero(); inst.pairs()],
            next: vec![T::zero(); inst.pairs()],
            weighted: vec![T::zero(); inst.pairs()],
        }
    }
}

/// Runs all iterations on planar votes. On return `ws.r` holds the
/// responsibilities used by the last M-step.
#[allow(clippy::too_many_arguments)]
fn run<T: Real>(
    inst: Instance,
    votes: &[T],
    acts: &[T],
    beta_a: &[T],
    beta_u: &[T],
    cfg: &RoutingConfig,
    ws: &mut Workspace<T>,
    mut trace: Option<&mut Trace<T>>,
) -> Stats<T> {
    let uniform = T::one() / T::from_f64(inst.parents as f64);
    ws.r.iter_mut().for_each(|x| *x = uniform);
    if let Some(tr) = trace.as_deref_mut() {
        tr.responsibilities.clear();
        tr.steps.clear();
    }
    let last = cfg.iterations - 1;
    let mut t = 0;
    loop {
        let stats = m_step_planar(inst, &ws.r, acts, votes, beta_a, beta_u, cfg.lambda(t), cfg, &mut ws.weighted);
        if t < last {
            e_step_planar(inst, &stats, votes, &mut ws.next);
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.responsibilities.push(ws.r.clone());
            tr.steps.push(stats.clone());
        }
        if t == last {
            return stats;
        }
        std::mem::swap(&mut ws.r, &mut ws.next);
        t += 1;
    }
}

/// Gradients of one routing instance (votes planar).
struct InstanceGrads<T> {
    votes: Vec<T>,
    acts: Vec<T>,
    beta_a: Vec<T>,
    beta_u: Vec<T>,
}

impl<T: Real> InstanceGrads<T> {
    fn new(inst: Instance) -> Self {
        InstanceGrads {
            votes: vec![T::zero(); inst.votes_len()],
            acts: vec![T::zero(); inst.children],
            beta_a: vec![T::zero(); inst.parents],
            beta_u: vec![T::zero(); inst.parents],
        }
    }
}

/// Reverse pass through the unrolled iterations. `g_mean` is planar `[3, P]`,
/// `g_act` is `[P]`. Vote and activation gradients overwrite `out`; β
/// gradients accumulate.
#[allow(clippy::too_many_arguments)]
fn backward_instance<T: Real>(
    inst: Instance,
    votes: &[T],
    acts: &[T],
    beta_u: &[T],
    cfg: &RoutingConfig,
    trace: &Trace<T>,
    g_mean: &[T],
    g_act_out: &[T],
    out: &mut InstanceGrads<T>,
) {
    let Instance { children: n, parents: p } = inst;
    let np = n * p;
    let eps_r = T::from_f64(cfg.eps_r);
    let half = T::c(0.5);
    let two = T::c(2.0);
    let inv_n = T::one() / T::from_f64(n as f64);
    out.votes.iter_mut().for_each(|x| *x = T::zero());
    out.acts.iter_mut().for_each(|x| *x = T::zero());

    // Gradients reaching the outputs of the M-step being reversed.
    let mut g_mu = g_mean.to_vec();
    let mut g_var = vec![T::zero(); POSE_DIM * p];
    let mut g_act = g_act_out.to_vec();
    let mut g_logact = vec![T::zero(); p];

    let mut g_s = vec![T::zero(); POSE_DIM * p];
    let mut g_num = vec![T::zero(); POSE_DIM * p];
    let mut g_fb = vec![T::zero(); POSE_DIM * p];
    let mut g_mass = vec![T::zero(); p];
    let mut g_r = vec![T::zero(); np];

    for t in (0..cfg.iterations).rev() {
        let st = &trace.steps[t];
        let resp = &trace.responsibilities[t];
        let lam = T::from_f64(cfg.lambda(t));

        for j in 0..p {
            let a = st.act[j];
            let gz = g_act[j] * a * (T::one() - a) + g_logact[j] * (T::one() - a);
            out.beta_a[j] += lam * gz;
            let g_cost = -lam * gz;
            let m = st.mass[j];
            let d = m + eps_r;
            let mut per_dim = T::zero();
            for h in 0..POSE_DIM {
                let k = h * p + j;
                per_dim += beta_u[j] + half * st.var[k].ln();
                g_var[k] += g_cost * m * half / st.var[k];
            }
            out.beta_u[j] += g_cost * m * T::from_f64(POSE_DIM as f64);
            let mut gm = g_cost * per_dim;
            for h in 0..POSE_DIM {
                let k = h * p + j;
                g_s[k] = g_var[k] / d;
                gm -= g_var[k] * st.scatter[k] / (d * d);
                if st.fallback[j] {
                    g_num[k] = T::zero();
                    g_fb[k] = g_mu[k] * inv_n;
                } else {
                    // ∂S/∂μ = −2 Σ_i r'(V − μ) = −2 μ ε_r for the weighted mean.
                    g_mu[k] -= two * g_s[k] * st.mean[k] * eps_r;
                    g_num[k] = g_mu[k] / d;
                    gm -= g_mu[k] * st.mean[k] / d;
                    g_fb[k] = T::zero();
                }
            }
            g_mass[j] = gm;
        }

        let (v0, v1, v2) = (&votes[..np], &votes[np..2 * np], &votes[2 * np..3 * np]);
        let (mu0, mu1, mu2) = (&st.mean[..p], &st.mean[p..2 * p], &st.mean[2 * p..3 * p]);
        let (s0, s1, s2) = (&g_s[..p], &g_s[p..2 * p], &g_s[2 * p..3 * p]);
        let (n0, n1, n2) = (&g_num[..p], &g_num[p..2 * p], &g_num[2 * p..3 * p]);
        let (f0, f1, f2) = (&g_fb[..p], &g_fb[p..2 * p], &g_fb[2 * p..3 * p]);
        let gm = &g_mass[..p];
        {
            let (gv0, rest) = out.votes.split_at_mut(np);
            let (gv1, gv2) = rest.split_at_mut(np);
            for i in 0..n {
                let a = acts[i];
                let row = &resp[i * p..(i + 1) * p];
                let grow = &mut g_r[i * p..(i + 1) * p];
                let r0 = i * p..(i + 1) * p;
                let (x0, x1, x2) = (&v0[r0.clone()], &v1[r0.clone()], &v2[r0.clone()]);
                let (y0, y1, y2) = (&mut gv0[r0.clone()], &mut gv1[r0.clone()], &mut gv2[r0]);
                let mut g_a = T::zero();
                for j in 0..p {
                    let w = row[j] * a;
                    let (d0, d1, d2) = (x0[j] - mu0[j], x1[j] - mu1[j], x2[j] - mu2[j]);
                    let g_w = gm[j]
                        + s0[j] * d0 * d0
                        + s1[j] * d1 * d1
                        + s2[j] * d2 * d2
                        + n0[j] * x0[j]
                        + n1[j] * x1[j]
                        + n2[j] * x2[j];
                    y0[j] += w * (two * s0[j] * d0 + n0[j]) + f0[j];
                    y1[j] += w * (two * s1[j] * d1 + n1[j]) + f1[j];
                    y2[j] += w * (two * s2[j] * d2 + n2[j]) + f2[j];
                    grow[j] = g_w * a;
                    g_a += g_w * row[j];
                }
                out.acts[i] += g_a;
            }
        }

        if t == 0 {
            break;
        }

        // Reverse of the E-step that produced `resp` from iteration t-1.
        let prev = &trace.steps[t - 1];
        g_mu.iter_mut().for_each(|g| *g = T::zero());
        g_var.iter_mut().for_each(|g| *g = T::zero());
        g_act.iter_mut().for_each(|g| *g = T::zero());
        g_logact.iter_mut().for_each(|g| *g = T::zero());
        let inv_var: Vec<T> = prev.var.iter().map(|&s| T::one() / s).collect();
        let (mu0, mu1, mu2) = (&prev.mean[..p], &prev.mean[p..2 * p], &prev.mean[2 * p..3 * p]);
        let (iv0, iv1, iv2) = (&inv_var[..p], &inv_var[p..2 * p], &inv_var[2 * p..3 * p]);
        let (gmu0, rest) = g_mu.split_at_mut(p);
        let (gmu1, gmu2) = rest.split_at_mut(p);
        let (gvar0, rest) = g_var.split_at_mut(p);
        let (gvar1, gvar2) = rest.split_at_mut(p);
        let (gv0, rest) = out.votes.split_at_mut(np);
        let (gv1, gv2) = rest.split_at_mut(np);
        let mut gl = vec![T::zero(); p];
        for i in 0..n {
            let row = &resp[i * p..(i + 1) * p];
            let gr = &g_r[i * p..(i + 1) * p];
            let dot: T = row.iter().zip(gr).map(|(&r, &g)| r * g).sum();
            for j in 0..p {
                gl[j] = row[j] * (gr[j] - dot);
                g_logact[j] += gl[j];
            }
            let r0 = i * p..(i + 1) * p;
            let (x0, x1, x2) = (&v0[r0.clone()], &v1[r0.clone()], &v2[r0.clone()]);
            let (y0, y1, y2) = (&mut gv0[r0.clone()], &mut gv1[r0.clone()], &mut gv2[r0]);
            for j in 0..p {
                let g = gl[j];
                let z0 = (x0[j] - mu0[j]) * iv0[j];
                let z1 = (x1[j] - mu1[j]) * iv1[j];
                let z2 = (x2[j] - mu2[j]) * iv2[j];
                y0[j] -= g * z0;
                y1[j] -= g * z1;
                y2[j] -= g * z2;
                gmu0[j] += g * z0;
                gmu1[j] += g * z1;
                gmu2[j] += g * z2;
                gvar0[j] += g * half * (z0 * z0 - iv0[j]);
                gvar1[j] += g * half * (z1 * z1 - iv1[j]);
                gvar2[j] += g * half * (z2 * z2 - iv2[j]);
            }
        }
    }
}

fn validate(inst: Instance, cfg: &RoutingConfig) -> Result<()> {
    if inst.children == 0 {
        return Err(Error::EmptyChildren);
    }
    if cfg.iterations == 0 || inst.parents == 0 {
        return Err(Error::ConfigInvalid("routing needs at least one iteration and one parent".into()));
    }
    Ok(())
}

/// Routes `votes` `[children, parents, 3]` weighted by `child_acts`
/// `[children]`; returns the final state (parent poses are its means).
pub fn em_route_state<T: Real>(
    votes: &Tensor<T>,
    child_acts: &Tensor<T>,
    beta_a: &[T],
    beta_u: &[T],
    cfg: &RoutingConfig,
) -> Result<RoutingState<T>> {
    let s = votes.shape();
    if s.len() != 3 || s[2] != POSE_DIM || child_acts.shape() != [s[0]] || beta_a.len() != s[1] || beta_u.len() != s[1] {
        return Err(Error::shape("em_route", &[s, child_acts.shape(), &[beta_a.len(), beta_u.len()]]));
    }
    let inst = Instance {
        children: s[0],
        parents: s[1],
    };
    validate(inst, cfg)?;
    let mut ws = Workspace::new(inst);
    let stats = run(inst, &to_planar(votes.data()), child_acts.data(), beta_a, beta_u, cfg, &mut ws, None);
    Ok(RoutingState {
        responsibilities: ws.r,
        means: from_planar(&stats.mean),
        variances: from_planar(&stats.var),
        activations: stats.act,
        lambda: cfg.lambda(cfg.iterations - 1),
    })
}

/// Parent poses `[parents, 3]` and activations `[parents]`.
pub fn em_route<T: Real>(
    votes: &Tensor<T>,
    child_acts: &Tensor<T>,
    beta_a: &[T],
    beta_u: &[T],
    cfg: &RoutingConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let state = em_route_state(votes, child_acts, beta_a, beta_u, cfg)?;
    let p = beta_a.len();
    Ok((Tensor::new(&[p, POSE_DIM], state.means)?, Tensor::new(&[p], state.activations)?))
}

/// Slice form of [`em_route`]; accepts zero children (which a tensor cannot
/// represent) and reports it as an error.
pub fn em_route_slices<T: Real>(
    children: usize,
    parents: usize,
    votes: &[T],
    child_acts: &[T],
    beta_a: &[T],
    beta_u: &[T],
    cfg: &RoutingConfig,
) -> Result<(Vec<T>, Vec<T>)> {
    let inst = Instance { children, parents };
    validate(inst, cfg)?;
    if votes.len() != inst.votes_len() || child_acts.len() != children || beta_a.len() != parents || beta_u.len() != parents {
        return Err(Error::shape("em_route", &[&[votes.len()], &[child_acts.len()]]));
    }
    let mut ws = Workspace::new(inst);
    let stats = run(inst, &to_planar(votes), child_acts, beta_a, beta_u, cfg, &mut ws, None);
    Ok((from_planar(&stats.mean), stats.act))
}

/// How a fused routing node finds the votes of a window's children.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteLayout {
    /// Votes `[b, H, W, T_in, T_out, 3]` are computed once per input position
    /// and shared by every window covering it.
    Shared,
    /// Votes `[b, H', W', K·K·T_in, T_out, 3]` are specific to each window.
    PerWindow,
}

/// Geometry of windowed routing over a capsule grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub batch: usize,
    pub in_types: usize,
    pub out_types: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl WindowGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn children(&self) -> usize {
        self.kernel * self.kernel * self.in_types
    }

    fn instance(&self) -> Instance {
        Instance {
            children: self.children(),
            parents: self.out_types,
        }
    }
}

struct WindowRouting {
    geo: WindowGeometry,
    layout: VoteLayout,
    cfg: RoutingConfig,
}

impl WindowRouting {
    fn votes_per_sample(&self) -> usize {
        let g = &self.geo;
        match self.layout {
            VoteLayout::Shared => g.height * g.width * g.in_types * g.out_types * POSE_DIM,
            VoteLayout::PerWindow => g.out_height() * g.out_width() * g.children() * g.out_types * POSE_DIM,
        }
    }

    /// Source offset of the `[T_out, 3]` vote block of child `c` of window
    /// (oy, ox) within one sample.
    fn block_offset(&self, oy: usize, ox: usize, c: usize) -> usize {
        let g = &self.geo;
        let block = g.out_types * POSE_DIM;
        match self.layout {
            VoteLayout::Shared => {
                let (kk, i) = (c / g.in_types, c % g.in_types);
                let (y, x) = (oy * g.stride + kk / g.kernel, ox * g.stride + kk % g.kernel);
                ((y * g.width + x) * g.in_types + i) * block
            }
            VoteLayout::PerWindow => ((oy * g.out_width() + ox) * g.children() + c) * block,
        }
    }

    fn act_offset(&self, oy: usize, ox: usize, c: usize) -> usize {
        let g = &self.geo;
        let (kk, i) = (c / g.in_types, c % g.in_types);
        let (y, x) = (oy * g.stride + kk / g.kernel, ox * g.stride + kk % g.kernel);
        (i * g.height + y) * g.width + x
    }

    /// Copies the votes (planar) and activations of window (oy, ox).
    fn gather<T: Real>(&self, votes: &[T], acts: &[T], oy: usize, ox: usize, v_out: &mut [T], a_out: &mut [T]) {
        let inst = self.geo.instance();
        let (n, p) = (inst.children, inst.parents);
        let np = n * p;
        for c in 0..n {
            let src = &votes[self.block_offset(oy, ox, c)..][..p * POSE_DIM];
            for j in 0..p {
                for h in 0..POSE_DIM {
                    v_out[h * np + c * p + j] = src[j * POSE_DIM + h];
                }
            }
            a_out[c] = acts[self.act_offset(oy, ox, c)];
        }
    }

    fn scatter<T: Real>(&self, gv: &[T], ga: &[T], oy: usize, ox: usize, g_votes: &mut [T], g_acts: &mut [T]) {
        let inst = self.geo.instance();
        let (n, p) = (inst.children, inst.parents);
        let np = n * p;
        for c in 0..n {
            let dst = &mut g_votes[self.block_offset(oy, ox, c)..][..p * POSE_DIM];
            for j in 0..p {
                for h in 0..POSE_DIM {
                    dst[j * POSE_DIM + h] += gv[h * np + c * p + j];
                }
            }
            g_acts[self.act_offset(oy, ox, c)] += ga[c];
        }
    }

    /// Output per sample: `[T_out, 4, H', W']` with pose components in
    /// channels 0..3 and the activation in channel 3.
    fn forward_sample<T: Real>(&self, votes: &[T], acts: &[T], beta_a: &[T], beta_u: &[T], out: &mut [T]) {
        let g = &self.geo;
        let inst = g.instance();
        let (oh, ow) = (g.out_height(), g.out_width());
        let p = g.out_types;
        let mut v = vec![T::zero(); inst.votes_len()];
        let mut a = vec![T::zero(); inst.children];
        let mut ws = Workspace::new(inst);
        for oy in 0..oh {
            for ox in 0..ow {
                self.gather(votes, acts, oy, ox, &mut v, &mut a);
                let st = run(inst, &v, &a, beta_a, beta_u, &self.cfg, &mut ws, None);
                for j in 0..p {
                    for h in 0..POSE_DIM {
                        out[((j * 4 + h) * oh + oy) * ow + ox] = st.mean[h * p + j];
                    }
                    out[((j * 4 + 3) * oh + oy) * ow + ox] = st.act[j];
                }
            }
        }
    }
}

struct WindowRoutingOp {
    inner: WindowRouting,
}

impl<T: Real> Backward<T> for WindowRoutingOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let this = &self.inner;
        let g = &this.geo;
        let inst = g.instance();
        let p = g.out_types;
        let (votes, acts, beta_a, beta_u) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (oh, ow) = (g.out_height(), g.out_width());
        let vps = this.votes_per_sample();
        let aps = g.in_types * g.height * g.width;
        let ops = g.out_types * 4 * oh * ow;
        let mut g_votes = vec![T::zero(); votes.len()];
        let mut g_acts = vec![T::zero(); acts.len()];
        let partials: Vec<(Vec<T>, Vec<T>)> = g_votes
            .par_chunks_mut(vps)
            .zip(g_acts.par_chunks_mut(aps))
            .enumerate()
            .map(|(b, (gv_s, ga_s))| {
                let v_s = &votes.data()[b * vps..(b + 1) * vps];
                let a_s = &acts.data()[b * aps..(b + 1) * aps];
                let gout = &grad.data()[b * ops..(b + 1) * ops];
                let mut v = vec![T::zero(); inst.votes_len()];
                let mut a = vec![T::zero(); inst.children];
                let mut ws = Workspace::new(inst);
                let mut trace = Trace {
                    responsibilities: Vec::new(),
                    steps: Vec::new(),
                };
                let mut grads = InstanceGrads::new(inst);
                let mut g_mu = vec![T::zero(); POSE_DIM * p];
                let mut g_a = vec![T::zero(); p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for j in 0..p {
                            for h in 0..POSE_DIM {
                                g_mu[h * p + j] = gout[((j * 4 + h) * oh + oy) * ow + ox];
                            }
                            g_a[j] = gout[((j * 4 + 3) * oh + oy) * ow + ox];
                        }
                        if g_mu.iter().chain(&g_a).all(|&x| x == T::zero()) {
                            continue;
                        }
                        this.gather(v_s, a_s, oy, ox, &mut v, &mut a);
                        run(inst, &v, &a, beta_a.data(), beta_u.data(), &this.cfg, &mut ws, Some(&mut trace));
                        backward_instance(inst, &v, &a, beta_u.data(), &this.cfg, &trace, &g_mu, &g_a, &mut grads);
                        this.scatter(&grads.votes, &grads.acts, oy, ox, gv_s, ga_s);
                    }
                }
                (grads.beta_a, grads.beta_u)
            })
            .collect();
        let mut g_beta_a = vec![T::zero(); p];
        let mut g_beta_u = vec![T::zero(); p];
        for (ga, gu) in partials {
            for j in 0..p {
                g_beta_a[j] += ga[j];
                g_beta_u[j] += gu[j];
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(votes.shape(), g_votes)).transpose()?,
            needs[1].then(|| Tensor::new(acts.shape(), g_acts)).transpose()?,
            Some(Tensor::new(beta_a.shape(), g_beta_a)?),
            Some(Tensor::new(beta_u.shape(), g_beta_u)?),
        ])
    }
}

/// Fused EM routing over every `kernel x kernel` window of a capsule grid.
///
/// * `votes`: `[b, H, W, T_in, T_out, 3]` (shared) or
///   `[b, H', W', K·K·T_in, T_out, 3]` (per window).
/// * `acts`: child activations `[b, T_in, H, W]`.
/// * `beta_a`, `beta_u`: `[T_out]`.
///
/// Returns `[b, T_out, 4, H', W']`: parent pose components in channels 0..3
/// and parent activations in channel 3. Children within a window are ordered
/// by (kernel row, kernel column, type).
pub fn route_windows<'t, T: Real>(
    votes: Var<'t, T>,
    acts: Var<'t, T>,
    beta_a: Var<'t, T>,
    beta_u: Var<'t, T>,
    kernel: usize,
    stride: usize,
    layout: VoteLayout,
    cfg: &RoutingConfig,
) -> Result<Var<'t, T>> {
    let (vs, as_) = (votes.shape(), acts.shape());
    let err = || Error::shape("route_windows", &[&vs, &as_, &beta_a.shape(), &beta_u.shape()]);
    if as_.len() != 4 || vs.len() != 6 || vs[5] != POSE_DIM || stride == 0 || kernel == 0 {
        return Err(err());
    }
    let geo = WindowGeometry {
        batch: as_[0],
        in_types: as_[1],
        out_types: vs[4],
        height: as_[2],
        width: as_[3],
        kernel,
        stride,
    };
    if geo.height < kernel || geo.width < kernel {
        return Err(Error::FieldTooSmall {
            height: geo.height,
            width: geo.width,
            kernel,
        });
    }
    let expected_votes = match layout {
        VoteLayout::Shared => [geo.batch, geo.height, geo.width, geo.in_types, geo.out_types, POSE_DIM],
        VoteLayout::PerWindow => [geo.batch, geo.out_height(), geo.out_width(), geo.children(), geo.out_types, POSE_DIM],
    };
    if vs != expected_votes || beta_a.shape() != [geo.out_types] || beta_u.shape() != [geo.out_types] {
        return Err(err());
    }
    validate(geo.instance(), cfg)?;
    let inner = WindowRouting { geo, layout, cfg: *cfg };
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let vps = inner.votes_per_sample();
    let aps = geo.in_types * geo.height * geo.width;
    let ops = geo.out_types * 4 * oh * ow;
    let (v, a, ba, bu) = (votes.value(), acts.value(), beta_a.value(), beta_u.value());
    let (vd, ad, bad, bud) = (v.data(), a.data(), ba.data(), bu.data());
    let mut out = vec![T::zero(); geo.batch * ops];
    out.par_chunks_mut(ops).enumerate().for_each(|(b, o)| {
        inner.forward_sample(&vd[b * vps..(b + 1) * vps], &ad[b * aps..(b + 1) * aps], bad, bud, o);
    });
    let value = Tensor::new(&[geo.batch, geo.out_types, 4, oh, ow], out)?;
    Ok(votes.tape().push(value, &[votes, acts, beta_a, beta_u], WindowRoutingOp { inner }))
}

/// The same routing recurrence assembled from generic tape primitives for a
/// single instance: `votes [n, P, 3]`, `acts [n]`, `beta_a`/`beta_u` `[P]`.
/// Returns `(poses [P, 3], activations [P])`. Zero-mass fallback is not
/// represented; this path exists to cross-check the fused kernel.
pub fn em_route_graph<'t, T: Real>(
    votes: Var<'t, T>,
    acts: Var<'t, T>,
    beta_a: Var<'t, T>,
    beta_u: Var<'t, T>,
    cfg: &RoutingConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = votes.shape();
    if s.len() != 3 || s[2] != POSE_DIM {
        return Err(Error::shape("em_route_graph", &[&s]));
    }
    let (n, p) = (s[0], s[1]);
    validate(Instance { children: n, parents: p }, cfg)?;
    let tape = votes.tape();
    let mut r = tape.constant(Tensor::full(&[n, p], T::one() / T::from_f64(p as f64)));
    let acts_col = acts.reshape(&[n, 1])?;
    let bu = beta_u.reshape(&[p, 1])?;
    for t in 0..cfg.iterations {
        let rp = r.mul(acts_col)?;
        let mass = rp.sum(0, false)?;
        let denom = mass.offset(cfg.eps_r).reshape(&[p, 1])?;
        let rp3 = rp.reshape(&[n, p, 1])?;
        let mean = rp3.mul(votes)?.sum(0, false)?.div(denom)?;
        let diff = votes.sub(mean.reshape(&[1, p, POSE_DIM])?)?;
        let sq = diff.square();
        let var = rp3.mul(sq)?.sum(0, false)?.div(denom)?.offset(cfg.eps_var);
        let per_dim = bu.add(var.log().scale(0.5))?.sum(1, false)?;
        let cost = per_dim.mul(mass)?;
        let z = beta_a.sub(cost)?.scale(cfg.lambda(t));
        let act = z.sigmoid();
        if t + 1 == cfg.iterations {
            return Ok((mean, act));
        }
        let var3 = var.reshape(&[1, p, POSE_DIM])?;
        let quad = sq.div(var3.scale(2.0))?;
        let norm = var3.scale(2.0 * std::f64::consts::PI).log().scale(0.5);
        let log_p = quad.add(norm)?.sum(2, false)?.neg();
        let logits = log_p.add(act.log().reshape(&[1, p])?)?;
        r = logits.softmax(1)?;
    }
    unreachable!("loop returns on the final iteration")
}
