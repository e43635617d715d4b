//! Analysis-guided feature synthesizer.
//!
//! Per sample:
//!
//! ```text
//! x      = layer_norm(f_ana · W_down + b_down)            (dim)
//! map    = reshape(x, h × w),  h = w = √dim
//! Q,K,V  = conv3x3(map; k_q|k_k|k_v) + bias               (h × w each)
//! F      = softmax(Q Kᵀ / √dim) V                          (h × w → dim)
//! f_out  = f_emb + F · W_up + b_up                         (dim_o)
//! ```
//!
//! Attention runs over the `h` row tokens of each sample's own map, so
//! samples in a batch never interact. `W_up` and `b_up` start at zero, which
//! makes a fresh block the identity on `f_emb`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    conv3x3, conv3x3_backward, layer_norm_slice, mat_vec_acc, outer_acc, softmax_in_place,
    vec_mat_acc, ParamSet, RngStream, Tensor,
};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfsConfig {
    /// Width of the analysis descriptor.
    pub dim_i: usize,
    /// Width of the attention map; must be a perfect square.
    pub dim: usize,
    /// Width of the multimodal embedding being fused into.
    pub dim_o: usize,
}

impl Default for AfsConfig {
    fn default() -> Self {
        Self {
            dim_i: 128,
            dim: 64,
            dim_o: 96,
        }
    }
}

impl AfsConfig {
    pub fn side(&self) -> usize {
        (self.dim as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_i == 0 || self.dim == 0 || self.dim_o == 0 {
            return Err(Error::Config(format!("AFS dims must be positive: {self:?}")));
        }
        let s = self.side();
        if s * s != self.dim {
            return Err(Error::Config(format!(
                "AFS dim {} is not a perfect square",
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfsParams {
    pub cfg: AfsConfig,
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub k_q: Tensor,
    pub b_q: Tensor,
    pub k_k: Tensor,
    pub b_k: Tensor,
    pub k_v: Tensor,
    pub b_v: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

impl ParamSet for AfsParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_down, &self.b_down, &self.ln_gamma, &self.ln_beta, &self.k_q, &self.b_q,
            &self.k_k, &self.b_k, &self.k_v, &self.b_v, &self.w_up, &self.b_up,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_down, &mut self.b_down, &mut self.ln_gamma, &mut self.ln_beta,
            &mut self.k_q, &mut self.b_q, &mut self.k_k, &mut self.b_k, &mut self.k_v,
            &mut self.b_v, &mut self.w_up, &mut self.b_up,
        ]
    }
}

/// Scaled-uniform projections and kernels, unit layer norm, zero output path.
pub fn afs_init(cfg: AfsConfig, rng: &mut RngStream) -> Result<AfsParams> {
    cfg.validate()?;
    let down = 1.0 / (cfg.dim_i as f64).sqrt();
    let conv = 1.0 / 3.0;
    Ok(AfsParams {
        cfg,
        w_down: Tensor::uniform(&[cfg.dim_i, cfg.dim], down, rng),
        b_down: Tensor::uniform(&[cfg.dim], down, rng),
        ln_gamma: Tensor::filled(&[cfg.dim], 1.0),
        ln_beta: Tensor::zeros(&[cfg.dim]),
        k_q: Tensor::uniform(&[3, 3], conv, rng),
        b_q: Tensor::uniform(&[1], conv, rng),
        k_k: Tensor::uniform(&[3, 3], conv, rng),
        b_k: Tensor::uniform(&[1], conv, rng),
        k_v: Tensor::uniform(&[3, 3], conv, rng),
        b_v: Tensor::uniform(&[1], conv, rng),
        w_up: Tensor::zeros(&[cfg.dim, cfg.dim_o]),
        b_up: Tensor::zeros(&[cfg.dim_o]),
    })
}

/// Intermediates of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct AfsSampleCache {
    f_ana: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
    map: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    fused: Vec<f64>,
}

impl AfsSampleCache {
    /// Row-stochastic `h × h` attention matrix.
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }
}

/// `softmax(Q Kᵀ · scale) V` over `r` tokens of width `c`; returns `(A, F)`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    r: usize,
    c: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            let mut s = 0.0;
            for t in 0..c {
                s += q[i * c + t] * k[j * c + t];
            }
            a[i * r + j] = s * scale;
        }
        softmax_in_place(&mut a[i * r..(i + 1) * r]);
    }
    let mut f = vec![0.0; r * c];
    for i in 0..r {
        vec_mat_acc(&a[i * r..(i + 1) * r], v, c, &mut f[i * c..(i + 1) * c]);
    }
    (a, f)
}

/// Backward of [`attention_forward`]: `(gQ, gK, gV)`.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    a: &[f64],
    gf: &[f64],
    r: usize,
    c: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // gA = gF Vᵀ, gV = Aᵀ gF
    let mut ga = vec![0.0; r * r];
    for i in 0..r {
        mat_vec_acc(v, &gf[i * c..(i + 1) * c], &mut ga[i * r..(i + 1) * r]);
    }
    let mut gv = vec![0.0; r * c];
    for i in 0..r {
        outer_acc(&a[i * r..(i + 1) * r], &gf[i * c..(i + 1) * c], &mut gv);
    }
    // softmax backward, then the scaled score product
    let mut gs = vec![0.0; r * r];
    for i in 0..r {
        let row_a = &a[i * r..(i + 1) * r];
        let row_g = &ga[i * r..(i + 1) * r];
        let dot: f64 = row_a.iter().zip(row_g).map(|(x, y)| x * y).sum();
        for j in 0..r {
            gs[i * r + j] = row_a[j] * (row_g[j] - dot) * scale;
        }
    }
    let mut gq = vec![0.0; r * c];
    let mut gk = vec![0.0; r * c];
    for i in 0..r {
        vec_mat_acc(&gs[i * r..(i + 1) * r], k, c, &mut gq[i * c..(i + 1) * c]);
    }
    for i in 0..r {
        outer_acc(&gs[i * r..(i + 1) * r], &q[i * c..(i + 1) * c], &mut gk);
    }
    (gq, gk, gv)
}

impl AfsParams {
    fn check_inputs(&self, f_ana: &[f64], f_emb: &[f64]) -> Result<()> {
        if f_ana.len() != self.cfg.dim_i || f_emb.len() != self.cfg.dim_o {
            return Err(Error::Dimension(format!(
                "AFS expects f_ana[{}], f_emb[{}]; got [{}], [{}]",
                self.cfg.dim_i,
                self.cfg.dim_o,
                f_ana.len(),
                f_emb.len()
            )));
        }
        Ok(())
    }

    pub fn forward_sample(&self, f_ana: &[f64], f_emb: &[f64]) -> Result<(Vec<f64>, AfsSampleCache)> {
        self.check_inputs(f_ana, f_emb)?;
        let AfsConfig { dim, dim_o, .. } = self.cfg;
        let side = self.cfg.side();

        let mut z = self.b_down.data().to_vec();
        vec_mat_acc(f_ana, self.w_down.data(), dim, &mut z);
        let (mean, inv_std) = layer_norm_slice(&z, LN_EPS);
        let xhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
        let map: Vec<f64> = xhat
            .iter()
            .zip(self.ln_gamma.data().iter().zip(self.ln_beta.data()))
            .map(|(x, (g, b))| g * x + b)
            .collect();

        let mut q = vec![0.0; dim];
        let mut k = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        conv3x3(&map, side, side, self.k_q.data(), self.b_q.data()[0], &mut q);
        conv3x3(&map, side, side, self.k_k.data(), self.b_k.data()[0], &mut k);
        conv3x3(&map, side, side, self.k_v.data(), self.b_v.data()[0], &mut v);

        let scale = 1.0 / (dim as f64).sqrt();
        let (attn, fused) = attention_forward(&q, &k, &v, side, side, scale);

        let mut out = f_emb.to_vec();
        for (o, b) in out.iter_mut().zip(self.b_up.data()) {
            *o += b;
        }
        vec_mat_acc(&fused, self.w_up.data(), dim_o, &mut out);

        Ok((
            out,
            AfsSampleCache {
                f_ana: f_ana.to_vec(),
                xhat,
                inv_std,
                map,
                q,
                k,
                v,
                attn,
                fused,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂f_ana`.
    /// The gradient with respect to `f_emb` is `g_out` itself.
    pub fn backward_sample(&self, cache: &AfsSampleCache, g_out: &[f64], grads: &mut AfsParams) -> Vec<f64> {
        let AfsConfig { dim, .. } = self.cfg;
        let side = self.cfg.side();
        let scale = 1.0 / (dim as f64).sqrt();

        outer_acc(&cache.fused, g_out, grads.w_up.data_mut());
        for (g, o) in grads.b_up.data_mut().iter_mut().zip(g_out) {
            *g += o;
        }
        let mut g_fused = vec![0.0; dim];
        mat_vec_acc(self.w_up.data(), g_out, &mut g_fused);

        let (gq, gk, gv) =
            attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &g_fused, side, side, scale);

        let mut g_map = vec![0.0; dim];
        grads.b_q.data_mut()[0] +=
            conv3x3_backward(&cache.map, side, side, self.k_q.data(), &gq, &mut g_map, grads.k_q.data_mut());
        grads.b_k.data_mut()[0] +=
            conv3x3_backward(&cache.map, side, side, self.k_k.data(), &gk, &mut g_map, grads.k_k.data_mut());
        grads.b_v.data_mut()[0] +=
            conv3x3_backward(&cache.map, side, side, self.k_v.data(), &gv, &mut g_map, grads.k_v.data_mut());

        // layer norm
        let mut g_xhat = vec![0.0; dim];
        for j in 0..dim {
            grads.ln_gamma.data_mut()[j] += g_map[j] * cache.xhat[j];
            grads.ln_beta.data_mut()[j] += g_map[j];
            g_xhat[j] = g_map[j] * self.ln_gamma.data()[j];
        }
        let n = dim as f64;
        let mean_g = g_xhat.iter().sum::<f64>() / n;
        let mean_gx = g_xhat.iter().zip(&cache.xhat).map(|(g, x)| g * x).sum::<f64>() / n;
        let gz: Vec<f64> = g_xhat
            .iter()
            .zip(&cache.xhat)
            .map(|(g, x)| cache.inv_std * (g - mean_g - x * mean_gx))
            .collect();

        outer_acc(&cache.f_ana, &gz, grads.w_down.data_mut());
        for (g, v) in grads.b_down.data_mut().iter_mut().zip(&gz) {
            *g += v;
        }
        let mut g_f_ana = vec![0.0; self.cfg.dim_i];
        mat_vec_acc(self.w_down.data(), &gz, &mut g_f_ana);
        g_f_ana
    }
}

/// Forward state of a batch, tied to the parameters that produced it.
#[derive(Debug, Clone)]
pub struct AfsCache {
    fingerprint: u64,
    samples: Vec<AfsSampleCache>,
}

impl AfsCache {
    pub fn samples(&self) -> &[AfsSampleCache] {
        &self.samples
    }
}

/// Gradients returned by [`afs_backward`].
#[derive(Debug, Clone)]
pub struct AfsGradients {
    pub f_ana: Tensor,
    pub f_emb: Tensor,
    pub params: AfsParams,
}

/// Batched forward: `f_ana[b×dim_i]`, `f_emb[b×dim_o]` → `f_out[b×dim_o]`.
pub fn afs_forward(f_ana: &Tensor, f_emb: &Tensor, p: &AfsParams) -> Result<(Tensor, AfsCache)> {
    if f_ana.rank() != 2 || f_emb.rank() != 2 || f_ana.shape()[0] != f_emb.shape()[0] {
        return Err(Error::Dimension(format!(
            "AFS batch shapes {:?} and {:?}",
            f_ana.shape(),
            f_emb.shape()
        )));
    }
    let b = f_ana.shape()[0];
    let mut out = Vec::with_capacity(b * p.cfg.dim_o);
    let mut samples = Vec::with_capacity(b);
    for i in 0..b {
        let (o, c) = p.forward_sample(f_ana.row(i), f_emb.row(i))?;
        out.extend(o);
        samples.push(c);
    }
    Ok((
        Tensor::new(vec![b, p.cfg.dim_o], out)?,
        AfsCache {
            fingerprint: p.fingerprint(),
            samples,
        },
    ))
}

/// Batched backward. Fails if `p` is not the parameter set used in the forward.
pub fn afs_backward(p: &AfsParams, cache: &AfsCache, grad_out: &Tensor) -> Result<AfsGradients> {
    if cache.fingerprint != p.fingerprint() {
        return Err(Error::Validation("stale AFS cache: parameters changed since forward".into()));
    }
    let b = cache.samples.len();
    if grad_out.shape() != [b, p.cfg.dim_o] {
        return Err(Error::Dimension(format!(
            "grad_out {:?}, expected [{b}, {}]",
            grad_out.shape(),
            p.cfg.dim_o
        )));
    }
    let mut params = p.zeros_like();
    let mut g_ana = Vec::with_capacity(b * p.cfg.dim_i);
    for (i, c) in cache.samples.iter().enumerate() {
        g_ana.extend(p.backward_sample(c, grad_out.row(i), &mut params));
    }
    Ok(AfsGradients {
        f_ana: Tensor::new(vec![b, p.cfg.dim_i], g_ana)?,
        f_emb: grad_out.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn small_cfg() -> AfsConfig {
        AfsConfig {
            dim_i: 6,
            dim: 9,
            dim_o: 5,
        }
    }

    fn random_params(cfg: AfsConfig, seed: u64) -> AfsParams {
        let mut rng = RngStream::new(seed, 0);
        let mut p = afs_init(cfg, &mut rng).unwrap();
        // leave the identity start so every path carries gradient
        p.w_up = Tensor::uniform(&[cfg.dim, cfg.dim_o], 0.5, &mut rng);
        p.b_up = Tensor::uniform(&[cfg.dim_o], 0.5, &mut rng);
        p.ln_gamma = Tensor::uniform(&[cfg.dim], 1.0, &mut rng);
        p.ln_beta = Tensor::uniform(&[cfg.dim], 0.5, &mut rng);
        p
    }

    #[test]
    fn fresh_init_is_identity_on_f_emb() {
        let cfg = AfsConfig::default();
        let mut rng = RngStream::new(3, 1);
        let p = afs_init(cfg, &mut rng).unwrap();
        let f_ana = Tensor::uniform(&[2, cfg.dim_i], 1.0, &mut rng);
        let f_emb = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
        let (out, _) = afs_forward(&f_ana, &f_emb, &p).unwrap();
        assert_eq!(out, f_emb);
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let cfg = AfsConfig::default();
        let a = afs_init(cfg, &mut RngStream::new(9, 2)).unwrap();
        let b = afs_init(cfg, &mut RngStream::new(9, 2)).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let bad = AfsConfig { dim: 60, ..cfg };
        assert!(matches!(afs_init(bad, &mut RngStream::new(9, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn per_sample_independence() {
        let cfg = small_cfg();
        let p = random_params(cfg, 11);
        let mut rng = RngStream::new(11, 5);
        let a = Tensor::uniform(&[1, cfg.dim_i], 1.0, &mut rng);
        let e = Tensor::uniform(&[1, cfg.dim_o], 1.0, &mut rng);
        let (single, _) = afs_forward(&a, &e, &p).unwrap();
        let a2 = Tensor::new(vec![2, cfg.dim_i], [a.data(), a.data()].concat()).unwrap();
        let e2 = Tensor::new(vec![2, cfg.dim_o], [e.data(), e.data()].concat()).unwrap();
        let (double, _) = afs_forward(&a2, &e2, &p).unwrap();
        assert_eq!(double.row(0), single.row(0));
        assert_eq!(double.row(1), single.row(0));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = AfsConfig::default();
        let p = random_params(cfg, 2);
        let mut rng = RngStream::new(2, 9);
        let a = Tensor::uniform(&[2, cfg.dim_i], 3.0, &mut rng);
        let e = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
        let (out, cache) = afs_forward(&a, &e, &p).unwrap();
        assert!(out.is_finite());
        let side = cfg.side();
        for s in cache.samples() {
            for row in s.attention().chunks(side) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_cfg();
        let p = random_params(cfg, 4);
        let mut rng = RngStream::new(4, 1);
        let a = Tensor::uniform(&[2, cfg.dim_i], 1.0, &mut rng);
        let e = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
        let (_, cache) = afs_forward(&a, &e, &p).unwrap();
        let g = afs_backward(&p, &cache, &Tensor::zeros(&[2, cfg.dim_o])).unwrap();
        assert!(g.f_ana.data().iter().all(|v| *v == 0.0));
        assert!(g.f_emb.data().iter().all(|v| *v == 0.0));
        assert_eq!(g.params.sum_sq(), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = small_cfg();
        let mut p = random_params(cfg, 4);
        let mut rng = RngStream::new(4, 1);
        let a = Tensor::uniform(&[1, cfg.dim_i], 1.0, &mut rng);
        let e = Tensor::uniform(&[1, cfg.dim_o], 1.0, &mut rng);
        let (_, cache) = afs_forward(&a, &e, &p).unwrap();
        p.b_up.data_mut()[0] += 1.0;
        assert!(afs_backward(&p, &cache, &Tensor::zeros(&[1, cfg.dim_o])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_cfg();
        for seed in 0..5 {
            let p = random_params(cfg, 100 + seed);
            let mut rng = RngStream::new(200 + seed, 0);
            let a = Tensor::uniform(&[2, cfg.dim_i], 1.0, &mut rng);
            let e = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
            let w = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
            let objective = |p: &AfsParams, a: &Tensor, e: &Tensor| {
                let (o, _) = afs_forward(a, e, p).unwrap();
                o.data().iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>()
            };
            let (_, cache) = afs_forward(&a, &e, &p).unwrap();
            let g = afs_backward(&p, &cache, &w).unwrap();

            let flat = Tensor::from_vec(p.flatten());
            let num = finite_diff_grad(
                |t| {
                    let mut q = p.clone();
                    q.assign_flat(t.data());
                    objective(&q, &a, &e)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&g.params.flatten(), num.data()) < 1e-6);

            let num_a = finite_diff_grad(|t| objective(&p, t, &e), &a, 1e-5).unwrap();
            assert!(relative_error(g.f_ana.data(), num_a.data()) < 1e-6);
            assert_eq!(g.f_emb, w);
        }
    }
}
