//! Interchangeable ways of injecting the analysis descriptor into the
//! multimodal embedding. All variants map `(f_ana[dim_i], f_emb[dim_o])` to
//! `dim_o` and expose exact gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::afs::{attention_backward, attention_forward, afs_init, AfsConfig, AfsParams, AfsSampleCache};
use crate::error::{Error, Result};
use crate::numerics::{mat_vec_acc, outer_acc, vec_mat_acc, ParamSet, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Descriptor ignored: `f_out = f_emb`.
    None,
    /// Affine map of `[f_emb; f_ana]`.
    Concat,
    /// `f_emb + f_ana · W + b`.
    Sum,
    /// One tanh hidden layer over `[f_emb; f_ana]`.
    Mlp,
    /// Embedding tokens attend over descriptor tokens, residual output.
    CrossAttention,
    Afs,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::None,
        FusionKind::Concat,
        FusionKind::Sum,
        FusionKind::Mlp,
        FusionKind::CrossAttention,
        FusionKind::Afs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Concat => "concat",
            FusionKind::Sum => "sum",
            FusionKind::Mlp => "mlp",
            FusionKind::CrossAttention => "cross_attention",
            FusionKind::Afs => "afs",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let s = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Tensor::uniform(&[fan_in, fan_out], s, rng),
            b: Tensor::uniform(&[fan_out], s, rng),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.data().to_vec();
        vec_mat_acc(x, self.w.data(), out.len(), &mut out);
        out
    }

    /// Accumulates `∂W`, `∂b` and returns `∂x`.
    fn backward(&self, x: &[f64], g: &[f64], grads: &mut Linear) -> Vec<f64> {
        outer_acc(x, g, grads.w.data_mut());
        for (gb, v) in grads.b.data_mut().iter_mut().zip(g) {
            *gb += v;
        }
        let mut gx = vec![0.0; x.len()];
        mat_vec_acc(self.w.data(), g, &mut gx);
        gx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFusion {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionFusion {
    pub side: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub up: Linear,
}

/// A fusion block with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fusion {
    None { dim_o: usize },
    Concat(Linear),
    Sum(Linear),
    Mlp(MlpFusion),
    CrossAttention(CrossAttentionFusion),
    Afs(AfsParams),
}

/// Per-sample forward intermediates.
#[derive(Debug, Clone)]
pub enum FusionCache {
    None,
    Concat { input: Vec<f64> },
    Sum { f_ana: Vec<f64> },
    Mlp { input: Vec<f64>, hidden: Vec<f64> },
    CrossAttention {
        f_ana: Vec<f64>,
        f_emb: Vec<f64>,
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        attn: Vec<f64>,
        fused: Vec<f64>,
    },
    Afs(Box<AfsSampleCache>),
}

impl ParamSet for Fusion {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Fusion::None { .. } => vec![],
            Fusion::Concat(l) | Fusion::Sum(l) => vec![&l.w, &l.b],
            Fusion::Mlp(m) => vec![&m.hidden.w, &m.hidden.b, &m.out.w, &m.out.b],
            Fusion::CrossAttention(c) => {
                vec![&c.q.w, &c.q.b, &c.k.w, &c.k.b, &c.v.w, &c.v.b, &c.up.w, &c.up.b]
            }
            Fusion::Afs(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Fusion::None { .. } => vec![],
            Fusion::Concat(l) | Fusion::Sum(l) => vec![&mut l.w, &mut l.b],
            Fusion::Mlp(m) => vec![&mut m.hidden.w, &mut m.hidden.b, &mut m.out.w, &mut m.out.b],
            Fusion::CrossAttention(c) => vec![
                &mut c.q.w, &mut c.q.b, &mut c.k.w, &mut c.k.b, &mut c.v.w, &mut c.v.b,
                &mut c.up.w, &mut c.up.b,
            ],
            Fusion::Afs(p) => p.tensors_mut(),
        }
    }
}

impl Fusion {
    pub fn init(kind: FusionKind, cfg: AfsConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let AfsConfig { dim_i, dim, dim_o } = cfg;
        Ok(match kind {
            FusionKind::None => Fusion::None { dim_o },
            FusionKind::Concat => Fusion::Concat(Linear::init(dim_o + dim_i, dim_o, rng)),
            FusionKind::Sum => Fusion::Sum(Linear::init(dim_i, dim_o, rng)),
            FusionKind::Mlp => Fusion::Mlp(MlpFusion {
                hidden: Linear::init(dim_o + dim_i, dim, rng),
                out: Linear::init(dim, dim_o, rng),
            }),
            FusionKind::CrossAttention => Fusion::CrossAttention(CrossAttentionFusion {
                side: cfg.side(),
                q: Linear::init(dim_o, dim, rng),
                k: Linear::init(dim_i, dim, rng),
                v: Linear::init(dim_i, dim, rng),
                up: Linear::zeros(dim, dim_o),
            }),
            FusionKind::Afs => Fusion::Afs(afs_init(cfg, rng)?),
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::None { .. } => FusionKind::None,
            Fusion::Concat(_) => FusionKind::Concat,
            Fusion::Sum(_) => FusionKind::Sum,
            Fusion::Mlp(_) => FusionKind::Mlp,
            Fusion::CrossAttention(_) => FusionKind::CrossAttention,
            Fusion::Afs(_) => FusionKind::Afs,
        }
    }

    pub fn forward(&self, f_ana: &[f64], f_emb: &[f64]) -> Result<(Vec<f64>, FusionCache)> {
        Ok(match self {
            Fusion::None { dim_o } => {
                if f_emb.len() != *dim_o {
                    return Err(Error::Dimension(format!("f_emb[{}] vs dim_o {dim_o}", f_emb.len())));
                }
                (f_emb.to_vec(), FusionCache::None)
            }
            Fusion::Concat(l) => {
                let input = [f_emb, f_ana].concat();
                check_len(&input, l.w.shape()[0])?;
                (l.apply(&input), FusionCache::Concat { input })
            }
            Fusion::Sum(l) => {
                check_len(f_ana, l.w.shape()[0])?;
                check_len(f_emb, l.w.shape()[1])?;
                let mut out = l.apply(f_ana);
                out.iter_mut().zip(f_emb).for_each(|(o, e)| *o += e);
                (out, FusionCache::Sum { f_ana: f_ana.to_vec() })
            }
            Fusion::Mlp(m) => {
                let input = [f_emb, f_ana].concat();
                check_len(&input, m.hidden.w.shape()[0])?;
                let hidden: Vec<f64> = m.hidden.apply(&input).into_iter().map(f64::tanh).collect();
                (m.out.apply(&hidden), FusionCache::Mlp { input, hidden })
            }
            Fusion::CrossAttention(c) => {
                check_len(f_emb, c.q.w.shape()[0])?;
                check_len(f_ana, c.k.w.shape()[0])?;
                let q = c.q.apply(f_emb);
                let k = c.k.apply(f_ana);
                let v = c.v.apply(f_ana);
                let dim = q.len();
                let scale = 1.0 / (dim as f64).sqrt();
                let (attn, fused) = attention_forward(&q, &k, &v, c.side, c.side, scale);
                let mut out = c.up.apply(&fused);
                out.iter_mut().zip(f_emb).for_each(|(o, e)| *o += e);
                (
                    out,
                    FusionCache::CrossAttention {
                        f_ana: f_ana.to_vec(),
                        f_emb: f_emb.to_vec(),
                        q,
                        k,
                        v,
                        attn,
                        fused,
                    },
                )
            }
            Fusion::Afs(p) => {
                let (out, cache) = p.forward_sample(f_ana, f_emb)?;
                (out, FusionCache::Afs(Box::new(cache)))
            }
        })
    }

    /// Accumulates parameter gradients into `grads` (same variant as `self`)
    /// and returns `(∂f_ana, ∂f_emb)`.
    pub fn backward(&self, cache: &FusionCache, g_out: &[f64], grads: &mut Fusion) -> (Vec<f64>, Vec<f64>) {
        match (self, cache, grads) {
            (Fusion::None { .. }, FusionCache::None, _) => (Vec::new(), g_out.to_vec()),
            (Fusion::Concat(l), FusionCache::Concat { input }, Fusion::Concat(gl)) => {
                let gx = l.backward(input, g_out, gl);
                let dim_o = g_out.len();
                (gx[dim_o..].to_vec(), gx[..dim_o].to_vec())
            }
            (Fusion::Sum(l), FusionCache::Sum { f_ana }, Fusion::Sum(gl)) => {
                (l.backward(f_ana, g_out, gl), g_out.to_vec())
            }
            (Fusion::Mlp(m), FusionCache::Mlp { input, hidden }, Fusion::Mlp(gm)) => {
                let gh = m.out.backward(hidden, g_out, &mut gm.out);
                let gpre: Vec<f64> = gh.iter().zip(hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
                let gx = m.hidden.backward(input, &gpre, &mut gm.hidden);
                let dim_o = g_out.len();
                (gx[dim_o..].to_vec(), gx[..dim_o].to_vec())
            }
            (
                Fusion::CrossAttention(c),
                FusionCache::CrossAttention { f_ana, f_emb, q, k, v, attn, fused },
                Fusion::CrossAttention(gc),
            ) => {
                let g_fused = c.up.backward(fused, g_out, &mut gc.up);
                let scale = 1.0 / (q.len() as f64).sqrt();
                let (gq, gk, gv) = attention_backward(q, k, v, attn, &g_fused, c.side, c.side, scale);
                let mut g_emb = c.q.backward(f_emb, &gq, &mut gc.q);
                g_emb.iter_mut().zip(g_out).for_each(|(a, b)| *a += b);
                let mut g_ana = c.k.backward(f_ana, &gk, &mut gc.k);
                let g_ana_v = c.v.backward(f_ana, &gv, &mut gc.v);
                g_ana.iter_mut().zip(g_ana_v).for_each(|(a, b)| *a += b);
                (g_ana, g_emb)
            }
            (Fusion::Afs(p), FusionCache::Afs(c), Fusion::Afs(gp)) => {
                (p.backward_sample(c, g_out, gp), g_out.to_vec())
            }
            _ => panic!("fusion cache or gradient buffer does not match the variant"),
        }
    }
}

fn check_len(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Dimension(format!("fusion input [{}], expected [{n}]", x.len())));
    }
    Ok(())
}
