use super::gp::IncrementalCholesky;
use super::{from_flat, DmftConfig, DmftModel, DmftTrace, Sums, CHUNK, NEGATIVE_PIVOT_TOL, PIVOT_TOL};
use crate::error::{Error, Result};
use crate::network::MAX_NEURONS;
use crate::rng::{self, tag};
use crate::targets::TargetFunction;
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Theory for one-pass training, where every step sees a fresh batch of
/// n = alpha d samples. The pre-activations of the batch are then Gaussian:
/// (h*, omega^0, omega^t) with covariances I, C(0,0), C(t,t), C(t,0) and M^t.
///
/// ```text
/// M^{t+1}      = (1 - eta lambda) M^t - eta alpha E[F^t h*^T]
/// C(t+1, 0)    = (1 - eta lambda) C(t, 0) - eta alpha E[F^t omega^0^T]
/// C(t+1, t+1)  = (1 - eta lambda)^2 C(t, t) - eta (1 - eta lambda) alpha (E[F^t omega^t^T] + transpose)
///                + eta^2 alpha E[F^t F^t^T] + eta^2 B S^+ B^T
/// ```
///
/// where x = (h*, omega^0, omega^t) has covariance S and B = alpha E[F^t x^T]:
/// distinct samples of one batch interact through the few directions their
/// gradients share.
///
/// omega^0 only matters through the frozen twin of a single neuron.
pub fn one_pass_effective(cfg: &DmftConfig, target: &TargetFunction, model: &DmftModel) -> Result<DmftTrace> {
    cfg.validate()?;
    let (p, k, big_t) = (model.p(), target.k(), cfg.steps);
    let readout = &model.readout;
    let (eta, alpha, decay) = (cfg.eta, cfg.alpha, cfg.decay());
    let n = cfg.n_samples;
    let nf = n as f64;
    let mut trace = DmftTrace::empty("one_pass", n);

    let mut m = DMatrix::<f64>::zeros(p, k);
    let mut m_se = DMatrix::<f64>::zeros(p, k);
    let mut c_tt = model.c00.clone();
    let mut c_t0 = model.c00.clone();
    let dim = k + 2 * p;
    let (o_g, o_g2, o_a0, o_at, o_cl, o_loss) = (0, p * k, 2 * p * k, 2 * p * k + p * p, 2 * p * k + 2 * p * p, 2 * p * k + 3 * p * p);
    let len = o_loss + 2;

    for t in 0..=big_t {
        let mut chol = IncrementalCholesky::new(PIVOT_TOL, NEGATIVE_PIVOT_TOL);
        for l in 0..k {
            let mut row = vec![0.0; l + 1];
            row[l] = 1.0;
            chol.push(&row)?;
        }
        chol.push_block(&DMatrix::zeros(p, k), &model.c00)?;
        let mut cross = DMatrix::zeros(p, k + p);
        for i in 0..p {
            for l in 0..k {
                cross[(i, l)] = m[(i, l)];
            }
            for j in 0..p {
                cross[(i, k + j)] = c_t0[(i, j)];
            }
        }
        chol.push_block(&cross, &c_tt).map_err(|e| Error::numerical(format!("one-pass covariance at t = {t}: {e}")))?;

        let n_chunks = n.div_ceil(CHUNK);
        let partial: Vec<Sums> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = rng::stream(cfg.seed, &[tag::NOISE, t as u64, c as u64]);
                let mut acc = Sums::zeros(len);
                let v = &mut acc.v;
                let count = CHUNK.min(n - c * CHUNK);
                let mut xi = vec![0.0; dim];
                let mut x = vec![0.0; dim];
                for _ in 0..count {
                    rng::fill_normal(&mut rng, &mut xi);
                    for (i, xv) in x.iter_mut().enumerate() {
                        *xv = chol.apply(i, &xi);
                    }
                    let (hs, rest) = x.split_at(k);
                    let (w0, wt) = rest.split_at(p);
                    let y = target.eval(hs);
                    let mut f = [0.0f64; MAX_NEURONS];
                    let resid = readout.grad(wt, w0[0], y, &mut f[..p]);
                    for i in 0..p {
                        for l in 0..k {
                            let val = f[i] * hs[l];
                            v[o_g + i * k + l] += val;
                            v[o_g2 + i * k + l] += val * val;
                        }
                        for j in 0..p {
                            v[o_a0 + i * p + j] += f[i] * w0[j];
                            v[o_at + i * p + j] += f[i] * wt[j];
                            v[o_cl + i * p + j] += f[i] * f[j];
                        }
                    }
                    let loss = 0.5 * resid * resid;
                    v[o_loss] += loss;
                    v[o_loss + 1] += loss * loss;
                }
                acc
            })
            .collect();
        let mut sums = Sums::zeros(len);
        for s in &partial {
            sums.add(s);
        }
        let v = &sums.v;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite one-pass average at t = {t}")));
        }
        let scale = alpha / nf;
        let g = from_flat(p, k, &v[o_g..o_g + p * k]) * scale;
        let g_se = DMatrix::from_fn(p, k, |i, l| {
            let mean = v[o_g + i * k + l] / nf;
            alpha * ((v[o_g2 + i * k + l] / nf - mean * mean).max(0.0) / nf).sqrt()
        });
        let a0 = from_flat(p, p, &v[o_a0..o_a0 + p * p]) * scale;
        let at = from_flat(p, p, &v[o_at..o_at + p * p]) * scale;
        let cl = from_flat(p, p, &v[o_cl..o_cl + p * p]) * scale;
        let loss = v[o_loss] / nf;

        trace.t.push(t);
        trace.m.push(m.clone());
        trace.m_stderr.push(m_se.clone());
        trace.g.push(g.clone());
        trace.loss.push(loss);
        trace.loss_stderr.push(((v[o_loss + 1] / nf - loss * loss).max(0.0) / nf).sqrt());
        trace.c_theta.push(vec![c_t0.clone(), c_tt.clone()]);
        trace.c_loss.push(vec![cl.clone()]);
        if t == big_t {
            break;
        }
        m_se = DMatrix::from_fn(p, k, |i, l| ((decay * m_se[(i, l)]).powi(2) + (eta * g_se[(i, l)]).powi(2)).sqrt());
        m = &m * decay - &g * eta;
        c_t0 = &c_t0 * decay - &a0 * eta;
        let cov = chol.covariance();
        let b = DMatrix::from_fn(p, dim, |i, j| {
            if j < k {
                g[(i, j)]
            } else if j < k + p {
                a0[(i, j - k)]
            } else {
                at[(i, j - k - p)]
            }
        });
        let pinv = cov
            .clone()
            .pseudo_inverse(1e-9 * cov.diagonal().max().max(1.0))
            .map_err(|e| Error::numerical(format!("one-pass pseudo-inverse: {e}")))?;
        let shared = &b * pinv * b.transpose();
        let cross_term = &at + at.transpose();
        c_tt = &c_tt * (decay * decay) - cross_term * (eta * decay) + (cl + shared) * (eta * eta);
        c_tt = (&c_tt + c_tt.transpose()) * 0.5;
    }
    Ok(trace)
}
