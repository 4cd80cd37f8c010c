use super::gp::{min_eigenvalue, IncrementalCholesky};
use super::two_process::assemble_loss;
use super::{
    check_memory, from_flat, gemm_acc, kink_note, to_flat, tri, DmftConfig, DmftModel, DmftTrace, KernelMode, Sums,
    CHUNK, NEGATIVE_PIVOT_TOL, PIVOT_TOL,
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
    h: Vec<f64>,
    f: Vec<f64>,
    /// dh^t / (injection at h^s), p x p blocks at tri(t, s).
    pj: Vec<f64>,
    /// dF^{t-1} / (injection at s) for the previous step, p x p per s.
    dprev: Vec<f64>,
}

struct Ctx<'a> {
    p: usize,
    k: usize,
    t: usize,
    eta: f64,
    decay: f64,
    /// Gamma(t-1, r) for r < t, flattened.
    gam_prev: &'a [Vec<f64>],
    /// Teacher coupling Xi(t-1) = g - sum Gamma M, p x k.
    xi_prev: &'a [f64],
    zeta: &'a IncrementalCholesky,
    readout: &'a Readout,
}

/// Integrate the single-process form
///
/// ```text
/// h^{t+1} = (1 - eta lambda) h^t - eta [F^t + sum_{r<=t} Gamma(t, r) h^r + Xi(t) h* + zeta^t]
/// ```
///
/// with zeta a centered Gaussian process of covariance C_L(t, s) =
/// alpha E[F^t F^s^T] and Xi(t) = g^t - sum_r Gamma(t, r) M^r. Kernels are
/// recovered from responses S(t, s) to injections at h^s through
/// S(t, s) = sum_{r=s..t} Gamma(t, r) Q(r, s).
pub fn single_process_integrate(cfg: &DmftConfig, target: &TargetFunction, model: &DmftModel) -> Result<DmftTrace> {
    cfg.validate()?;
    if cfg.kernel_mode != KernelMode::Pathwise {
        return Err(Error::config("the single-process form supports only pathwise kernels"));
    }
    let (p, k, big_t) = (model.p(), target.k(), cfg.steps);
    let readout = &model.readout;
    let n_blocks = tri(big_t, big_t) + 1;
    check_memory(cfg, 2 * k + p * (big_t + 2) * 3 + n_blocks * p * p + (big_t + 1) * p * p)?;

    let mut trace = DmftTrace::empty("dmft_single_process", cfg.n_samples);
    kink_note(readout, cfg.kernel_mode, &mut trace.warnings);
    let (eta, alpha, decay) = (cfg.eta, cfg.alpha, cfg.decay());
    let n = cfg.n_samples as f64;

    // initial pre-activations share the C(0,0) factor
    let mut init = IncrementalCholesky::new(PIVOT_TOL, NEGATIVE_PIVOT_TOL);
    init.push_block(&DMatrix::zeros(p, 0), &model.c00)?;

    let mut replicas: Vec<Replica> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, &[tag::REPLICA, i as u64]);
            let mut xi = vec![0.0; k + p + p * (big_t + 1)];
            rng::fill_normal(&mut r, &mut xi);
            let hstar = xi[..k].to_vec();
            let y = target.eval(&hstar);
            let mut h = vec![0.0; p * (big_t + 1)];
            for j in 0..p {
                h[j] = init.apply(j, &xi[k..k + p]);
            }
            Replica {
                xi,
                hstar,
                y,
                h,
                f: vec![0.0; p * (big_t + 1)],
                pj: vec![0.0; n_blocks * p * p],
                dprev: vec![0.0; (big_t + 1) * p * p],
            }
        })
        .collect();

    let eye = DMatrix::<f64>::identity(p, p);
    let mut zeta = IncrementalCholesky::new(PIVOT_TOL, NEGATIVE_PIVOT_TOL);
    let mut qm: Vec<Vec<DMatrix<f64>>> = vec![vec![eye.clone()]];
    let mut gam: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut cl: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut m: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, k)];
    let mut m_se: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, k)];
    let mut gam_prev: Vec<Vec<f64>> = Vec::new();
    let mut xi_prev: Vec<f64> = vec![0.0; p * k];

    for t in 0..=big_t {
        let len_s = (t + 1) * p * p;
        let (o_s, o_cl, o_g, o_g2, o_loss) = (0, len_s, 2 * len_s, 2 * len_s + p * k, 2 * len_s + 2 * p * k);
        let len = o_loss + 2;
        let ctx = Ctx { p, k, t, eta, decay, gam_prev: &gam_prev, xi_prev: &xi_prev, zeta: &zeta, readout };
        let partial: Vec<Sums> = replicas
            .par_chunks_mut(CHUNK)
            .map(|chunk| {
                let mut acc = Sums::zeros(len);
                for r in chunk.iter_mut() {
                    step_replica(&ctx, r, &mut acc.v, (o_s, o_cl, o_g, o_g2, o_loss));
                }
                acc
            })
            .collect();
        let mut sums = Sums::zeros(len);
        for s in &partial {
            sums.add(s);
        }
        if sums.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite ensemble average at t = {t}; step size too large?")));
        }
        let v = &sums.v;
        let scale = alpha / n;
        let s_t: Vec<DMatrix<f64>> =
            (0..=t).map(|s| from_flat(p, p, &v[o_s + s * p * p..o_s + (s + 1) * p * p]) * scale).collect();
        let cl_t: Vec<DMatrix<f64>> =
            (0..=t).map(|s| from_flat(p, p, &v[o_cl + s * p * p..o_cl + (s + 1) * p * p]) * scale).collect();
        let g_t = from_flat(p, k, &v[o_g..o_g + p * k]) * scale;
        let g_se = DMatrix::from_fn(p, k, |i, l| {
            let mean = v[o_g + i * k + l] / n;
            alpha * ((v[o_g2 + i * k + l] / n - mean * mean).max(0.0) / n).sqrt()
        });
        let loss = v[o_loss] / n;

        // Gamma(t, s) from S(t, s) = sum_{r=s..t} Gamma(t, r) Q(r, s)
        let mut gam_t = vec![DMatrix::zeros(p, p); t + 1];
        gam_t[t] = s_t[t].clone();
        for s in (0..t).rev() {
            let mut acc = s_t[s].clone();
            for r in s + 1..=t {
                acc -= &gam_t[r] * &qm[r][s];
            }
            gam_t[s] = acc;
        }

        trace.t.push(t);
        trace.loss.push(loss);
        trace.loss_stderr.push(((v[o_loss + 1] / n - loss * loss).max(0.0) / n).sqrt());
        trace.lambda.push(gam_t[t].clone());
        trace.memory.push((0..=t).map(|s| if s < t { gam_t[s].clone() } else { DMatrix::zeros(p, p) }).collect());
        trace.min_eig_loss.push(min_eigenvalue(&assemble_loss(&cl, &cl_t)));
        trace.g.push(g_t.clone());

        let mut xi_t = g_t.clone();
        for r in 0..=t {
            xi_t -= &gam_t[r] * &m[r];
        }
        trace.teacher_direct.push(xi_t.clone());

        if t < big_t {
            // zeta^t joins the history
            let mut cross = DMatrix::zeros(p, p * t);
            for s in 0..t {
                for i in 0..p {
                    for j in 0..p {
                        cross[(i, s * p + j)] = cl_t[s][(i, j)];
                    }
                }
            }
            zeta.push_block(&cross, &cl_t[t]).map_err(|e| Error::numerical(format!("sampling zeta at t = {t}: {e}")))?;

            let mut q_next: Vec<DMatrix<f64>> = Vec::with_capacity(t + 2);
            for s in 0..=t {
                let mut acc = &qm[t][s] * decay;
                for r in s..=t {
                    acc -= &gam_t[r] * &qm[r][s] * eta;
                }
                q_next.push(acc);
            }
            q_next.push(eye.clone());
            qm.push(q_next);
            let m_next = &m[t] * decay - &g_t * eta;
            m_se.push(DMatrix::from_fn(p, k, |i, l| {
                ((decay * m_se[t][(i, l)]).powi(2) + (eta * g_se[(i, l)]).powi(2)).sqrt()
            }));
            m.push(m_next);
        }
        gam_prev = gam_t.iter().map(to_flat).collect();
        xi_prev = to_flat(&xi_t);
        gam.push(gam_t);
        cl.push(cl_t);
    }

    if zeta.clipped() > 0 {
        trace.warnings.push(format!("{} degenerate loss-noise coordinates", zeta.clipped()));
    }
    trace.m = m;
    trace.m_stderr = m_se;
    trace.response = qm;
    trace.c_loss = cl;
    Ok(trace)
}

fn step_replica(ctx: &Ctx, r: &mut Replica, acc: &mut [f64], off: (usize, usize, usize, usize, usize)) {
    let (p, k, t, eta, decay) = (ctx.p, ctx.k, ctx.t, ctx.eta, ctx.decay);
    let (o_s, o_cl, o_g, o_g2, o_loss) = off;
    if t > 0 {
        let tp = t - 1;
        let zoff = k + p;
        let mut drive = [0.0f64; MAX_NEURONS];
        for i in 0..p {
            drive[i] = r.f[tp * p + i] + ctx.zeta.apply(tp * p + i, &r.xi[zoff..]);
        }
        for s in 0..=tp {
            gemm_acc(&mut drive[..p], 1.0, &ctx.gam_prev[s], &r.h[s * p..(s + 1) * p], p, p, 1);
        }
        gemm_acc(&mut drive[..p], 1.0, ctx.xi_prev, &r.hstar, p, k, 1);
        for i in 0..p {
            r.h[t * p + i] = decay * r.h[tp * p + i] - eta * drive[i];
        }
        // P(t, s) = decay P(t-1, s) - eta [D(t-1, s) + sum_{q=s..t-1} Gamma(t-1, q) P(q, s)]
        for s in 0..t {
            let mut blk = vec![0.0f64; p * p];
            let prev = &r.pj[tri(tp, s) * p * p..(tri(tp, s) + 1) * p * p];
            for (b, x) in blk.iter_mut().zip(prev) {
                *b = decay * x;
            }
            for (b, x) in blk.iter_mut().zip(&r.dprev[s * p * p..(s + 1) * p * p]) {
                *b -= eta * x;
            }
            for q in s..=tp {
                let pq = &r.pj[tri(q, s) * p * p..(tri(q, s) + 1) * p * p];
                gemm_acc(&mut blk, -eta, &ctx.gam_prev[q], pq, p, p, p);
            }
            r.pj[tri(t, s) * p * p..(tri(t, s) + 1) * p * p].copy_from_slice(&blk);
        }
    }
    let diag = tri(t, t) * p * p;
    for i in 0..p {
        for j in 0..p {
            r.pj[diag + i * p + j] = if i == j { 1.0 } else { 0.0 };
        }
    }

    let h = &r.h[t * p..(t + 1) * p];
    let href = r.h[0];
    let mut grad = [0.0f64; MAX_NEURONS];
    let mut hess = vec![0.0f64; p * p];
    let mut twin = [0.0f64; MAX_NEURONS];
    let mut dy = [0.0f64; MAX_NEURONS];
    let resid = ctx.readout.derivatives(h, href, r.y, &mut grad[..p], &mut hess, &mut twin[..p], &mut dy[..p]);
    r.f[t * p..(t + 1) * p].copy_from_slice(&grad[..p]);

    for s in 0..=t {
        let mut blk = vec![0.0f64; p * p];
        gemm_acc(&mut blk, 1.0, &hess, &r.pj[tri(t, s) * p * p..(tri(t, s) + 1) * p * p], p, p, p);
        if s == 0 && ctx.readout.frozen_twin {
            for i in 0..p {
                blk[i * p] += twin[i];
            }
        }
        for (a, b) in acc[o_s + s * p * p..o_s + (s + 1) * p * p].iter_mut().zip(&blk) {
            *a += b;
        }
        r.dprev[s * p * p..(s + 1) * p * p].copy_from_slice(&blk);
    }
    let ft = &grad[..p];
    for s in 0..=t {
        for i in 0..p {
            for j in 0..p {
                acc[o_cl + s * p * p + i * p + j] += ft[i] * r.f[s * p + j];
            }
        }
    }
    for i in 0..p {
        for j in 0..k {
            let v = ft[i] * r.hstar[j];
            acc[o_g + i * k + j] += v;
            acc[o_g2 + i * k + j] += v * v;
        }
    }
    let loss = 0.5 * resid * resid;
    acc[o_loss] += loss;
    acc[o_loss + 1] += loss * loss;
}
