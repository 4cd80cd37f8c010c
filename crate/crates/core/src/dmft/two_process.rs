use super::gp::{min_eigenvalue, IncrementalCholesky};
use super::{
    check_memory, fd_epsilon, from_flat, gemm_acc, kink_note, to_flat, tri, DmftConfig, DmftModel, DmftTrace,
    KernelMode, Sums, CHUNK, NEGATIVE_PIVOT_TOL, PIVOT_TOL,
};
use crate::error::{Error, Result};
use crate::network::{Readout, MAX_NEURONS};
use crate::rng::{self, tag};
use crate::targets::TargetFunction;
use nalgebra::DMatrix;
use rayon::prelude::*;

struct Replica {
    xi: Vec<f64>,
    hstar: Vec<f64>,
    y: f64,
    gstar: Vec<f64>,
    omega: Vec<f64>,
    h: Vec<f64>,
    f: Vec<f64>,
    /// dF^t/d omega^s, p x p blocks at tri(t, s).
    d: Vec<f64>,
    /// dF^t/dh* through the label at time s, p x k blocks at tri(t, s).
    e: Vec<f64>,
}

struct Ctx<'a> {
    p: usize,
    k: usize,
    t: usize,
    eta: f64,
    /// Q(t, s) flattened at tri(t, s).
    q: &'a [Vec<f64>],
    chol: &'a IncrementalCholesky,
    readout: &'a Readout,
    mode: KernelMode,
    eps: f64,
    layout: Layout,
}

#[derive(Clone, Copy)]
struct Layout {
    gam: usize,
    cl: usize,
    fh: usize,
    tm: usize,
    g: usize,
    g2: usize,
    loss: usize,
    len: usize,
}

impl Layout {
    fn new(t: usize, p: usize, k: usize) -> Self {
        let b = (t + 1) * p * p;
        let gam = 0;
        let cl = gam + b;
        let fh = cl + b;
        let tm = fh + b;
        let g = tm + (t + 1) * p * k;
        let g2 = g + p * k;
        let loss = g2 + p * k;
        Self { gam, cl, fh, tm, g, g2, loss, len: loss + 2 }
    }
}

/// Integrate the two-process effective dynamics of full-batch gradient
/// descent for `cfg.steps` steps.
pub fn dmft_integrate(cfg: &DmftConfig, target: &TargetFunction, model: &DmftModel) -> Result<DmftTrace> {
    cfg.validate()?;
    let (p, k, big_t) = (model.p(), target.k(), cfg.steps);
    let readout = &model.readout;
    let pathwise = cfg.kernel_mode == KernelMode::Pathwise;
    let n_blocks = tri(big_t, big_t) + 1;
    let per_replica = 3 * k
        + 1
        + k
        + p * (big_t + 1) * 4
        + n_blocks * p * k
        + if pathwise { n_blocks * p * p } else { 0 };
    check_memory(cfg, per_replica)?;

    let mut trace = DmftTrace::empty("dmft_two_process", cfg.n_samples);
    kink_note(readout, cfg.kernel_mode, &mut trace.warnings);
    let eps = fd_epsilon(cfg, readout);
    let (eta, alpha, decay) = (cfg.eta, cfg.alpha, cfg.decay());
    let n = cfg.n_samples as f64;

    let mut replicas: Vec<Replica> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, &[tag::REPLICA, i as u64]);
            let mut xi = vec![0.0; k + p * (big_t + 1)];
            rng::fill_normal(&mut r, &mut xi);
            let hstar = xi[..k].to_vec();
            let y = target.eval(&hstar);
            let mut gstar = vec![0.0; k];
            target.grad(&hstar, &mut gstar);
            Replica {
                xi,
                hstar,
                y,
                gstar,
                omega: vec![0.0; p * (big_t + 1)],
                h: vec![0.0; p * (big_t + 1)],
                f: vec![0.0; p * (big_t + 1)],
                d: if pathwise { vec![0.0; n_blocks * p * p] } else { Vec::new() },
                e: vec![0.0; n_blocks * p * k],
            }
        })
        .collect();

    let mut chol = IncrementalCholesky::new(PIVOT_TOL, NEGATIVE_PIVOT_TOL);
    for l in 0..k {
        let mut row = vec![0.0; l + 1];
        row[l] = 1.0;
        chol.push(&row)?;
    }
    chol.push_block(&DMatrix::zeros(p, k), &model.c00)?;

    let eye = DMatrix::<f64>::identity(p, p);
    let mut q: Vec<Vec<f64>> = vec![to_flat(&eye)];
    let mut qm: Vec<Vec<DMatrix<f64>>> = vec![vec![eye.clone()]];
    let mut gam: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut c: Vec<Vec<DMatrix<f64>>> = vec![vec![model.c00.clone()]];
    let mut cl: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut m: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, k)];
    let mut m_se: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, k)];
    trace.min_eig_omega.push(min_eigenvalue(&assemble(&c, &m, k)));

    for t in 0..=big_t {
        let layout = Layout::new(t, p, k);
        let ctx = Ctx { p, k, t, eta, q: &q, chol: &chol, readout, mode: cfg.kernel_mode, eps, layout };
        let partial: Vec<Sums> = replicas
            .par_chunks_mut(CHUNK)
            .map(|chunk| {
                let mut acc = Sums::zeros(layout.len);
                for r in chunk.iter_mut() {
                    step_replica(&ctx, r, &mut acc.v);
                }
                acc
            })
            .collect();
        let mut sums = Sums::zeros(layout.len);
        for s in &partial {
            sums.add(s);
        }
        if sums.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite ensemble average at t = {t}; step size too large?")));
        }
        let v = &sums.v;
        let scale = alpha / n;
        let block = |off: usize, s: usize| from_flat(p, p, &v[off + s * p * p..off + (s + 1) * p * p]) * scale;
        let gam_t: Vec<DMatrix<f64>> = (0..=t).map(|s| block(layout.gam, s)).collect();
        let cl_t: Vec<DMatrix<f64>> = (0..=t).map(|s| block(layout.cl, s)).collect();
        let fh_t: Vec<DMatrix<f64>> = (0..=t).map(|s| block(layout.fh, s)).collect();
        let tm_t: Vec<DMatrix<f64>> =
            (0..=t).map(|s| from_flat(p, k, &v[layout.tm + s * p * k..layout.tm + (s + 1) * p * k]) * scale).collect();
        let g_t = from_flat(p, k, &v[layout.g..layout.g + p * k]) * scale;
        let g_se = DMatrix::from_fn(p, k, |i, l| {
            let mean = v[layout.g + i * k + l] / n;
            let var = (v[layout.g2 + i * k + l] / n - mean * mean).max(0.0);
            alpha * (var / n).sqrt()
        });
        let loss = v[layout.loss] / n;
        let loss_var = (v[layout.loss + 1] / n - loss * loss).max(0.0);

        trace.t.push(t);
        trace.loss.push(loss);
        trace.loss_stderr.push((loss_var / n).sqrt());
        trace.lambda.push(gam_t[t].clone());
        trace.memory.push((0..=t).map(|s| if s < t { gam_t[s].clone() } else { DMatrix::zeros(p, p) }).collect());
        trace.teacher_memory.push((0..=t).map(|s| if s < t { tm_t[s].clone() } else { DMatrix::zeros(p, k) }).collect());
        trace.teacher_direct.push(tm_t[t].clone());
        let cl_block = assemble_loss(&cl, &cl_t);
        trace.min_eig_loss.push(min_eigenvalue(&cl_block));
        trace.g.push(g_t.clone());
        cl.push(cl_t);
        gam.push(gam_t);
        if t == big_t {
            break;
        }

        // response Q(t+1, s)
        let mut q_next: Vec<DMatrix<f64>> = Vec::with_capacity(t + 2);
        for s in 0..=t {
            let mut acc = &qm[t][s] * decay;
            for r in s..=t {
                acc -= &gam[t][r] * &qm[r][s] * eta;
            }
            q_next.push(acc);
        }
        q_next.push(eye.clone());
        for mat in &q_next {
            q.push(to_flat(mat));
        }
        qm.push(q_next);

        // overlaps
        let m_next = &m[t] * decay - &g_t * eta;
        let se_next = DMatrix::from_fn(p, k, |i, l| {
            ((decay * m_se[t][(i, l)]).powi(2) + (eta * g_se[(i, l)]).powi(2)).sqrt()
        });

        // C(t+1, s) by Gaussian integration by parts, so that C is exactly the
        // covariance of omega^{t+1} = (1 - eta lambda) omega^t
        //   - eta [sum_r Gamma(t, r) omega^r + Xi h* + zeta^t],  zeta ~ GP(C_L),
        // and stays positive semi-definite whatever the Monte-Carlo error.
        let mut xi_t = g_t.clone();
        for r in 0..=t {
            xi_t -= &gam[t][r] * &m[r];
        }
        let mut c_next: Vec<DMatrix<f64>> = Vec::with_capacity(t + 2);
        let mut gap = 0.0f64;
        for s in 0..=t {
            let mut field = &xi_t * m[s].transpose();
            for r in 0..=t {
                field += &gam[t][r] * c_row(&c, r, s);
            }
            for r in 0..s {
                field -= &cl[t][r] * qm[s][r + 1].transpose() * eta;
            }
            gap = gap.max((&field - &fh_t[s]).abs().max());
            c_next.push(&c[t][s] * decay - field * eta);
        }
        trace.stein_gap.push(gap);
        let mut diag = c_next[t].transpose() * decay;
        for s in 0..=t {
            diag -= &gam[t][s] * c_next[s].transpose() * eta;
        }
        diag -= &xi_t * m_next.transpose() * eta;
        for r in 0..=t {
            diag += &cl[t][r] * qm[t + 1][r + 1].transpose() * (eta * eta);
        }
        let diag = (&diag + diag.transpose()) * 0.5;
        c_next.push(diag);

        let mut cross = DMatrix::zeros(p, k + p * (t + 1));
        for i in 0..p {
            for l in 0..k {
                cross[(i, l)] = m_next[(i, l)];
            }
            for s in 0..=t {
                for j in 0..p {
                    cross[(i, k + s * p + j)] = c_next[s][(i, j)];
                }
            }
        }
        chol.push_block(&cross, &c_next[t + 1]).map_err(|e| {
            Error::numerical(format!("sampling omega at t = {}: {e}", t + 1))
        })?;
        c.push(c_next);
        m.push(m_next);
        m_se.push(se_next);
        trace.min_eig_omega.push(min_eigenvalue(&assemble(&c, &m, k)));
    }

    if chol.clipped() > 0 {
        trace.warnings.push(format!("{} degenerate noise coordinates sampled as exact copies", chol.clipped()));
    }
    if chol.worst_negative() < -PIVOT_TOL {
        trace.warnings.push(format!("negative pivot {:.2e} clipped to zero", chol.worst_negative()));
    }
    trace.m = m;
    trace.m_stderr = m_se;
    trace.response = qm;
    trace.c_theta = c;
    trace.c_loss = cl;
    Ok(trace)
}

fn step_replica(ctx: &Ctx, r: &mut Replica, acc: &mut [f64]) {
    let (p, k, t, eta) = (ctx.p, ctx.k, ctx.t, ctx.eta);
    let base = ctx.k + t * p;
    for i in 0..p {
        r.omega[t * p + i] = ctx.chol.apply(base + i, &r.xi);
    }
    // h^t = omega^t - eta sum_{s<t} Q(t, s+1) F^s
    let mut h = [0.0f64; MAX_NEURONS];
    h[..p].copy_from_slice(&r.omega[t * p..(t + 1) * p]);
    for s in 0..t {
        gemm_acc(&mut h[..p], -eta, &ctx.q[tri(t, s + 1)], &r.f[s * p..(s + 1) * p], p, p, 1);
    }
    r.h[t * p..(t + 1) * p].copy_from_slice(&h[..p]);
    let href = r.omega[0];
    let mut grad = [0.0f64; MAX_NEURONS];
    let mut hess = vec![0.0f64; p * p];
    let mut twin = [0.0f64; MAX_NEURONS];
    let mut dy = [0.0f64; MAX_NEURONS];
    let resid = ctx.readout.derivatives(&h[..p], href, r.y, &mut grad[..p], &mut hess, &mut twin[..p], &mut dy[..p]);
    r.f[t * p..(t + 1) * p].copy_from_slice(&grad[..p]);
    let twin_on = ctx.readout.frozen_twin;
    let l = ctx.layout;

    // response of F^t to omega^s
    let mut dts = vec![0.0f64; p * p];
    let mut jac = vec![0.0f64; p * p];
    for s in 0..=t {
        match ctx.mode {
            KernelMode::Pathwise => {
                jac.iter_mut().for_each(|x| *x = 0.0);
                if s == t {
                    for i in 0..p {
                        jac[i * p + i] = 1.0;
                    }
                }
                for rr in s..t {
                    let drs = &r.d[tri(rr, s) * p * p..(tri(rr, s) + 1) * p * p];
                    gemm_acc(&mut jac, -eta, &ctx.q[tri(t, rr + 1)], drs, p, p, p);
                }
                dts.iter_mut().for_each(|x| *x = 0.0);
                gemm_acc(&mut dts, 1.0, &hess, &jac, p, p, p);
                if s == 0 && twin_on {
                    for i in 0..p {
                        dts[i * p] += twin[i];
                    }
                }
                r.d[tri(t, s) * p * p..(tri(t, s) + 1) * p * p].copy_from_slice(&dts);
            }
            KernelMode::FiniteDifference => {
                for col in 0..p {
                    let fp = resimulate(ctx, r, s, col, ctx.eps);
                    let fm = resimulate(ctx, r, s, col, -ctx.eps);
                    for i in 0..p {
                        dts[i * p + col] = (fp[i] - fm[i]) / (2.0 * ctx.eps);
                    }
                }
            }
        }
        for (a, b) in acc[l.gam + s * p * p..l.gam + (s + 1) * p * p].iter_mut().zip(&dts) {
            *a += b;
        }
    }

    // teacher response through the label channel
    let mut kt = vec![0.0f64; p * k];
    for tau in 0..=t {
        kt.iter_mut().for_each(|x| *x = 0.0);
        for rr in tau..t {
            let ers = &r.e[tri(rr, tau) * p * k..(tri(rr, tau) + 1) * p * k];
            gemm_acc(&mut kt, -eta, &ctx.q[tri(t, rr + 1)], ers, p, p, k);
        }
        let off = tri(t, tau) * p * k;
        let et = &mut r.e[off..off + p * k];
        et.iter_mut().for_each(|x| *x = 0.0);
        gemm_acc(et, 1.0, &hess, &kt, p, p, k);
        if tau == t {
            for i in 0..p {
                for j in 0..k {
                    et[i * k + j] += dy[i] * r.gstar[j];
                }
            }
        }
        for (a, b) in acc[l.tm + tau * p * k..l.tm + (tau + 1) * p * k].iter_mut().zip(et.iter()) {
            *a += b;
        }
    }

    let ft = &grad[..p];
    for s in 0..=t {
        let fs = &r.f[s * p..(s + 1) * p];
        let hs = &r.h[s * p..(s + 1) * p];
        for i in 0..p {
            for j in 0..p {
                acc[l.cl + s * p * p + i * p + j] += ft[i] * fs[j];
                acc[l.fh + s * p * p + i * p + j] += ft[i] * hs[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..k {
            let v = ft[i] * r.hstar[j];
            acc[l.g + i * k + j] += v;
            acc[l.g2 + i * k + j] += v * v;
        }
    }
    let loss = 0.5 * resid * resid;
    acc[l.loss] += loss;
    acc[l.loss + 1] += loss * loss;
}

/// F^t after shifting omega^s_col by `delta`, holding kernels fixed.
fn resimulate(ctx: &Ctx, r: &Replica, s: usize, col: usize, delta: f64) -> [f64; MAX_NEURONS] {
    let (p, t, eta) = (ctx.p, ctx.t, ctx.eta);
    let mut fs: Vec<f64> = r.f[..(t + 1) * p].to_vec();
    let href = r.omega[0] + if s == 0 && col == 0 { delta } else { 0.0 };
    let mut out = [0.0f64; MAX_NEURONS];
    for rr in s..=t {
        let mut h = [0.0f64; MAX_NEURONS];
        h[..p].copy_from_slice(&r.omega[rr * p..(rr + 1) * p]);
        if rr == s {
            h[col] += delta;
        }
        for q in 0..rr {
            gemm_acc(&mut h[..p], -eta, &ctx.q[tri(rr, q + 1)], &fs[q * p..(q + 1) * p], p, p, 1);
        }
        let mut g = [0.0f64; MAX_NEURONS];
        ctx.readout.grad(&h[..p], href, r.y, &mut g[..p]);
        fs[rr * p..(rr + 1) * p].copy_from_slice(&g[..p]);
        if rr == t {
            out = g;
        }
    }
    out
}

/// C(a, b) for any a, b from lower-triangular storage.
fn c_row(c: &[Vec<DMatrix<f64>>], a: usize, b: usize) -> DMatrix<f64> {
    if b <= a {
        c[a][b].clone()
    } else {
        c[b][a].transpose()
    }
}

/// Joint covariance of (h*, omega^0..omega^t).
fn assemble(c: &[Vec<DMatrix<f64>>], m: &[DMatrix<f64>], k: usize) -> DMatrix<f64> {
    let t = c.len();
    let p = c[0][0].nrows();
    let n = k + p * t;
    let mut out = DMatrix::zeros(n, n);
    for l in 0..k {
        out[(l, l)] = 1.0;
    }
    for a in 0..t {
        for i in 0..p {
            for l in 0..k {
                out[(k + a * p + i, l)] = m[a][(i, l)];
                out[(l, k + a * p + i)] = m[a][(i, l)];
            }
        }
        for b in 0..=a {
            for i in 0..p {
                for j in 0..p {
                    out[(k + a * p + i, k + b * p + j)] = c[a][b][(i, j)];
                    out[(k + b * p + j, k + a * p + i)] = c[a][b][(i, j)];
                }
            }
        }
    }
    out
}

/// Block matrix of C_L(a, b) for a, b <= t, with the newest row appended.
pub(super) fn assemble_loss(prev: &[Vec<DMatrix<f64>>], last: &[DMatrix<f64>]) -> DMatrix<f64> {
    let t = prev.len() + 1;
    let p = last[0].nrows();
    let mut out = DMatrix::zeros(p * t, p * t);
    for a in 0..t {
        let row = if a + 1 == t { last } else { &prev[a][..] };
        for b in 0..=a {
            for i in 0..p {
                for j in 0..p {
                    out[(a * p + i, b * p + j)] = row[b][(i, j)];
                    out[(b * p + j, a * p + i)] = row[b][(i, j)];
                }
            }
        }
    }
    out
}
