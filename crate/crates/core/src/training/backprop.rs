//! Hand-derived backpropagation for `embed → mix → tanh → head`.
//!
//! With `g = q - p̃` the logit gradient of the forward KL:
//!
//! * full:      `∂W = g hᵀ`, `∂h = Wᵀ g`
//! * slimspec:  `u = W_down h`, `∂W_up = g uᵀ`, `∂u = W_upᵀ g`,
//!   `∂W_down = ∂u hᵀ`, `∂h = W_downᵀ ∂u`
//! * truncated: the full-head rule restricted to the kept rows
//! * routed:    the full-head rule on the routed support, plus the router
//!   surrogate below
//! * backbone:  `∂a = ∂h ⊙ (1 - h²)`, `∂mix = ∂a xᵀ`, `∂x = mixᵀ ∂a`,
//!   scattered back into the embedding rows of the window.
//!
//! The routed head only sees targets renormalized onto its own support, and
//! its router is trained with a cross-entropy surrogate: the softmax of the
//! router scores is pulled towards the uniform distribution over the `k`
//! most probable target tokens, `L_r = -(1/k) Σ_{v ∈ topk(p)} log softmax(s)_v`,
//! whose score gradient is `softmax(s) - 1_T / k`.

use crate::dist::{embed_support, LogitVector, ProbDist, SparseLogits, TokenId};
use crate::error::{LabError, Result};
use crate::heads::{top_k, DraftHead};
use crate::linalg::Matrix;
use crate::models::DrafterBackbone;

use super::kl::{kl_grad, kl_loss, mask_probs};

/// One training example: a context and the distribution the drafter should
/// match there (already masked when the head requires it).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context: Vec<TokenId>,
    pub target: ProbDist,
}

/// Gradient buffers shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct DrafterGrads {
    pub backbone: DrafterBackbone,
    pub head: DraftHead,
}

impl DrafterGrads {
    pub fn zeros_like(backbone: &DrafterBackbone, head: &DraftHead) -> Self {
        Self {
            backbone: backbone.zeros_like(),
            head: head.zeros_like(),
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.backbone.embed, &mut self.backbone.mix];
        out.extend(self.head.matrices_mut());
        out
    }

    pub fn reset(&mut self) {
        for m in self.matrices_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Loss of one example; when `grads` is given, accumulates `scale · ∇loss`.
/// Backbone gradients are skipped when `train_backbone` is false.
pub fn example_loss_grad(
    backbone: &DrafterBackbone,
    head: &DraftHead,
    example: &Example,
    grads: Option<&mut DrafterGrads>,
    scale: f64,
    train_backbone: bool,
) -> Result<f64> {
    let trace = backbone.forward_trace(&example.context)?;
    let h = &trace.hidden;
    let p = &example.target;
    if p.len() != head.vocab_size() {
        return Err(LabError::dims("target distribution", head.vocab_size(), p.len()));
    }

    // Forward pass; keep what backprop needs.
    enum Cache {
        Dense(LogitVector),
        Slim {
            u: Vec<f64>,
            z: LogitVector,
        },
        Routed {
            u_r: Vec<f64>,
            scores: Vec<f64>,
            z: LogitVector,
            target: ProbDist,
            top: Vec<TokenId>,
        },
    }
    let cache = match head {
        DraftHead::Full(w) => Cache::Dense(w.forward(h)?),
        DraftHead::Truncated(w) => Cache::Dense(w.forward(h)?),
        DraftHead::SlimSpec(w) => {
            let u = w.w_down.matvec(h);
            let z = LogitVector::dense(w.w_up.matvec(&u));
            Cache::Slim { u, z }
        }
        DraftHead::Routed(w) => {
            let u_r = w.router_down.matvec(h);
            let scores = w.router_up.matvec(&u_r);
            let support = top_k(&scores, w.k);
            let values = support
                .iter()
                .map(|t| crate::linalg::dot(w.weight.row(t.index()), h))
                .collect();
            let z = embed_support(&SparseLogits {
                vocab_size: w.vocab_size(),
                support: support.clone(),
                values,
            })?;
            let target = mask_probs(p, &support)?;
            let top = top_k(p.probs(), w.k);
            Cache::Routed {
                u_r,
                scores,
                z,
                target,
                top,
            }
        }
    };

    let (kl_target, z) = match &cache {
        Cache::Dense(z) | Cache::Slim { z, .. } => (p, z),
        Cache::Routed { z, target, .. } => (target, z),
    };
    let mut loss = kl_loss(kl_target, z)?;
    let router_loss = match &cache {
        Cache::Routed { scores, top, .. } => {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            let l = -top.iter().map(|t| scores[t.index()] - lse).sum::<f64>() / top.len() as f64;
            Some((l, lse))
        }
        _ => None,
    };
    if let Some((l, _)) = router_loss {
        loss += l;
    }

    let Some(grads) = grads else {
        return Ok(loss);
    };

    let g = scaled(&kl_grad(kl_target, z)?, scale);
    let dh = match (head, &mut grads.head, &cache) {
        (DraftHead::Full(w), DraftHead::Full(gw), _) => {
            gw.weight.add_outer(&g, h);
            w.weight.matvec_t(&g)
        }
        (DraftHead::Truncated(w), DraftHead::Truncated(gw), _) => {
            let g_kept: Vec<f64> = w.index_map.iter().map(|t| g[t.index()]).collect();
            gw.weight.add_outer(&g_kept, h);
            w.weight.matvec_t(&g_kept)
        }
        (DraftHead::SlimSpec(w), DraftHead::SlimSpec(gw), Cache::Slim { u, .. }) => {
            gw.w_up.add_outer(&g, u);
            let du = w.w_up.matvec_t(&g);
            gw.w_down.add_outer(&du, h);
            w.w_down.matvec_t(&du)
        }
        (
            DraftHead::Routed(w),
            DraftHead::Routed(gw),
            Cache::Routed {
                u_r, scores, z, top, ..
            },
        ) => {
            let mut dh = vec![0.0; h.len()];
            for t in z
                .support()
                .map(|s| s.to_vec())
                .unwrap_or_else(|| (0..w.vocab_size()).map(TokenId::from_index).collect())
            {
                let gv = g[t.index()];
                for (dst, &x) in gw.weight.row_mut(t.index()).iter_mut().zip(h) {
                    *dst += gv * x;
                }
                for (acc, &wv) in dh.iter_mut().zip(w.weight.row(t.index())) {
                    *acc += gv * wv;
                }
            }
            let (_, lse) = router_loss.expect("routed head computes a router loss");
            let mut ds: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
            let share = 1.0 / top.len() as f64;
            for t in top {
                ds[t.index()] -= share;
            }
            let ds = scaled(&ds, scale);
            gw.router_up.add_outer(&ds, u_r);
            let du = w.router_up.matvec_t(&ds);
            gw.router_down.add_outer(&du, h);
            for (acc, x) in dh.iter_mut().zip(w.router_down.matvec_t(&du)) {
                *acc += x;
            }
            dh
        }
        _ => {
            return Err(LabError::InvalidArgument(
                "gradient buffer does not match head kind".into(),
            ))
        }
    };

    if train_backbone {
        let da: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
        grads.backbone.mix.add_outer(&da, &trace.input);
        let dx = backbone.mix.matvec_t(&da);
        let d = backbone.hidden_dim();
        for (slot, t) in trace.window.iter().enumerate() {
            for (dst, src) in grads
                .backbone
                .embed
                .row_mut(t.index())
                .iter_mut()
                .zip(&dx[slot * d..(slot + 1) * d])
            {
                *dst += src;
            }
        }
    }
    Ok(loss)
}

/// Parameters of backbone and head as one flat vector, in a fixed order.
pub fn flatten_params(backbone: &DrafterBackbone, head: &DraftHead) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(backbone.embed.data());
    out.extend_from_slice(backbone.mix.data());
    for (_, m) in head.matrices() {
        out.extend_from_slice(m.data());
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(backbone: &mut DrafterBackbone, head: &mut DraftHead, flat: &[f64]) -> Result<()> {
    let mut offset = 0;
    let mut mats: Vec<&mut Matrix> = vec![&mut backbone.embed, &mut backbone.mix];
    mats.extend(head.matrices_mut());
    for m in mats {
        let n = m.data().len();
        let src = flat
            .get(offset..offset + n)
            .ok_or_else(|| LabError::dims("flat parameter vector", offset + n, flat.len()))?;
        m.data_mut().copy_from_slice(src);
        offset += n;
    }
    if offset != flat.len() {
        return Err(LabError::dims("flat parameter vector", offset, flat.len()));
    }
    Ok(())
}

pub fn flatten_grads(grads: &DrafterGrads) -> Vec<f64> {
    flatten_params(&grads.backbone, &grads.head)
}
