//! Correlation learner: per-scale cross-attention that transfers the
//! support mask onto query locations.
//!
//! Each scale runs one aggregation step
//! `M' = softmax(f_q f_sᵀ / √d) · M_s` on the raw (unprojected) features.
//! There are no learnable parameters here: every output value is a convex
//! combination of support-mask values, so soft masks stay in [0, 1].

use crate::encoder::Pyramid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// One aggregation step on flattened features: f_q is (H_q·W_q)×d, f_s is
/// (H_s·W_s)×d, m_s is (H_s·W_s)×1. Returns (H_q·W_q)×1.
pub fn amm_forward(g: &Graph, f_q: &Tensor, f_s: &Tensor, m_s: &Tensor) -> Result<Tensor> {
    let d = f_q.shape().get(1).copied().unwrap_or(0);
    if f_s.shape().len() != 2 || f_s.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "amm width mismatch: query {:?} vs support {:?}",
            f_q.shape(),
            f_s.shape()
        )));
    }
    if m_s.shape() != [f_s.shape()[0], 1] {
        return Err(Error::Dimension(format!(
            "amm mask shape {:?}, expected [{}, 1]",
            m_s.shape(),
            f_s.shape()[0]
        )));
    }
    let logits = g.matmul_nt(f_q, f_s)?;
    let scaled = g.scale(&logits, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax_lastdim(&scaled)?;
    g.matmul(&attn, m_s)
}

/// Mask transfer at one scale on c×H×W maps; reshapes to and from the
/// flattened attention layout.
pub fn amm_mask_transfer(
    g: &Graph,
    query_feats: &Tensor,
    support_feats: &Tensor,
    support_mask: &Tensor,
) -> Result<Tensor> {
    let qs = query_feats.shape().to_vec();
    let ss = support_feats.shape().to_vec();
    if qs.len() != 3 || ss.len() != 3 || qs[0] != ss[0] {
        return Err(Error::Dimension(format!(
            "amm expects same-channel map pyramids, got {qs:?} vs {ss:?}"
        )));
    }
    if support_mask.shape() != [ss[1], ss[2]] {
        return Err(Error::Dimension(format!(
            "support mask {:?} does not match features {:?}",
            support_mask.shape(),
            ss
        )));
    }
    let f_q = g.to_rows(query_feats)?;
    let f_s = g.to_rows(support_feats)?;
    let m_s = g.reshape(support_mask, vec![ss[1] * ss[2], 1])?;
    let m = amm_forward(g, &f_q, &f_s, &m_s)?;
    g.reshape(&m, vec![qs[1], qs[2]])
}

/// Apply one aggregation module per scale, producing the coarse query-mask
/// pyramid.
pub fn correlation_forward(
    g: &Graph,
    support_feats: &Pyramid<Tensor>,
    query_feats: &Pyramid<Tensor>,
    support_masks: &Pyramid<Tensor>,
) -> Result<Pyramid<Tensor>> {
    Ok(Pyramid {
        s8: amm_mask_transfer(g, &query_feats.s8, &support_feats.s8, &support_masks.s8)?,
        s16: amm_mask_transfer(g, &query_feats.s16, &support_feats.s16, &support_masks.s16)?,
        s32: amm_mask_transfer(g, &query_feats.s32, &support_feats.s32, &support_masks.s32)?,
    })
}

/// Arithmetic mean of K support feature pyramids and their mask pyramids,
/// per scale, features and masks independently.
pub fn average_supports(
    g: &Graph,
    feats: &[Pyramid<Tensor>],
    masks: &[Pyramid<Tensor>],
) -> Result<(Pyramid<Tensor>, Pyramid<Tensor>)> {
    if feats.is_empty() || feats.len() != masks.len() {
        return Err(Error::Contract("support set must be nonempty and aligned".into()));
    }
    Ok((average_pyramids(g, feats)?, average_pyramids(g, masks)?))
}

fn average_pyramids(g: &Graph, items: &[Pyramid<Tensor>]) -> Result<Pyramid<Tensor>> {
    let k = items.len() as f64;
    let mut acc = items[0].clone();
    for item in &items[1..] {
        acc = acc.try_zip(item, |a, b| g.add(a, b))?;
    }
    acc.try_map(|t| g.scale(t, 1.0 / k))
}
