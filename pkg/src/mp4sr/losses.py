"""Pre-training and fine-tuning objectives.

Both contrastive losses score pairs with f(s, z) = exp(cos(s, z) / tau)
and are evaluated through log-sum-exp, never through raw exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .data import PAD
from .errors import ConfigError, ContractError
from .kernel import NEG_INF, Tensor

NORM_EPS = 1e-12


def _rows_normalized(a: Tensor) -> Tensor:
    norms = K.sqrt(K.tsum(K.mul(a, a), axis=1, keepdims=True))
    return K.div(a, K.add(norms, K.as_tensor(NORM_EPS)))


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows of a (B,d) and b (C,d)."""
    a, b = K.as_tensor(a), K.as_tensor(b)
    return K.matmul(_rows_normalized(a), K.transpose(_rows_normalized(b), (1, 0)))


def similarity(a, b) -> Tensor:
    """Cosine similarity of two vectors with an epsilon norm guard."""
    a, b = K.as_tensor(a), K.as_tensor(b)
    sim = cosine_matrix(K.reshape(a, (1, a.size)), K.reshape(b, (1, b.size)))
    return K.reshape(sim, ())


def _diag(s: Tensor) -> Tensor:
    return K.take_per_row(s, np.arange(s.shape[0]))


def nip_loss(m_hat: Tensor, m_tilde: Tensor, targets: Tensor, tau: float) -> Tensor:
    """Next-item prediction loss in one modality space.

    Per row j the positive mass is f(m_hat_j, z_j) + f(m_tilde_j, z_j); the
    denominator sums both f-values against every target in the batch.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    b = m_hat.shape[0]
    s1 = K.scale(cosine_matrix(m_hat, targets), 1.0 / tau)
    s2 = K.scale(cosine_matrix(m_tilde, targets), 1.0 / tau)
    num = K.logsumexp(
        K.concat([K.reshape(_diag(s1), (b, 1)), K.reshape(_diag(s2), (b, 1))], axis=1), axis=1
    )
    den = K.logsumexp(K.concat([s1, s2], axis=1), axis=1)
    return K.tsum(K.sub(den, num))


def _cmcl_half(anchor: Tensor, other: Tensor, tau: float) -> Tensor:
    """sum_j l(anchor_j, other_j): positives on the diagonal, negatives are
    the full cross matrix plus same-view pairs excluding self."""
    b = anchor.shape[0]
    cross = K.scale(cosine_matrix(anchor, other), 1.0 / tau)
    same = K.scale(cosine_matrix(anchor, anchor), 1.0 / tau)
    same = K.add(same, K.as_tensor(np.eye(b) * NEG_INF))  # drop j' == j
    pos = _diag(cross)
    den = K.logsumexp(K.concat([cross, same], axis=1), axis=1)
    return K.tsum(K.sub(pos, den))


def cmcl_loss(m_hat: Tensor, m_tilde: Tensor, tau: float) -> Tensor:
    """Symmetric cross-modality contrastive loss in one feature space."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return K.scale(K.add(_cmcl_half(m_hat, m_tilde, tau), _cmcl_half(m_tilde, m_hat, tau)), -0.5)


@dataclass
class ProjectionOutput:
    m_hat_t: Tensor
    m_tilde_t: Tensor
    m_hat_v: Tensor
    m_tilde_v: Tensor


def project(h_t: Tensor, h_v: Tensor, proj) -> ProjectionOutput:
    """Map both sequence representations into both modality spaces. A None
    projection (the no-projection-heads variant) passes them through as-is."""
    if proj is None:
        return ProjectionOutput(h_t, h_v, h_v, h_t)
    return ProjectionOutput(
        m_hat_t=K.add(K.matmul(h_t, proj.w_t), proj.b_t),
        m_tilde_t=K.add(K.matmul(h_v, proj.w_t), proj.b_t),
        m_hat_v=K.add(K.matmul(h_v, proj.w_v), proj.b_v),
        m_tilde_v=K.add(K.matmul(h_t, proj.w_v), proj.b_v),
    )


@dataclass
class PretrainLossParts:
    nip_text: Tensor
    nip_image: Tensor
    cmcl_text: Tensor
    cmcl_image: Tensor
    total: Tensor
    tau: float
    lam: float

    def floats(self) -> dict[str, float]:
        return {
            "nip_text": self.nip_text.item(),
            "nip_image": self.nip_image.item(),
            "cmcl_text": self.cmcl_text.item(),
            "cmcl_image": self.cmcl_image.item(),
            "total": self.total.item(),
        }


def pretrain_loss(
    h_t: Tensor,
    h_v: Tensor,
    z_t: Tensor,
    z_v: Tensor,
    proj,
    tau: float,
    lam: float,
    use_nip: bool = True,
    use_cmcl: bool = True,
) -> PretrainLossParts:
    """Combined objective: NIP in both modality spaces plus lam-weighted CMCL.

    z_t, z_v are the target items' modality embeddings from the same
    encoders in the same forward pass.
    """
    if not use_nip and not use_cmcl:
        raise ConfigError("disabling both NIP and CMCL leaves no pre-training objective")
    out = project(h_t, h_v, proj)
    zero = K.as_tensor(0.0)
    nip_t = nip_loss(out.m_hat_t, out.m_tilde_t, z_t, tau) if use_nip else zero
    nip_v = nip_loss(out.m_hat_v, out.m_tilde_v, z_v, tau) if use_nip else zero
    cmcl_t = cmcl_loss(out.m_hat_t, out.m_tilde_t, tau) if use_cmcl else zero
    cmcl_v = cmcl_loss(out.m_hat_v, out.m_tilde_v, tau) if use_cmcl else zero
    total = K.add(K.add(nip_t, nip_v), K.scale(K.add(cmcl_t, cmcl_v), lam))
    return PretrainLossParts(nip_t, nip_v, cmcl_t, cmcl_v, total, tau, lam)


# ---------------------------------------------------------------------------
# Fine-tuning objective
# ---------------------------------------------------------------------------


def finetune_logits(h_t: Tensor, h_v: Tensor, f_t: Tensor, f_v: Tensor, id_table: Tensor | None) -> Tensor:
    """Scores over the catalog: h_t (F_t + E)^T + h_v (F_v + E)^T, with the
    pad column pushed to the mask floor. id_table None means the ID-free
    (cold-start) scoring path."""
    table_t = f_t if id_table is None else K.add(f_t, id_table)
    table_v = f_v if id_table is None else K.add(f_v, id_table)
    logits = K.add(
        K.matmul(h_t, K.transpose(table_t, (1, 0))),
        K.matmul(h_v, K.transpose(table_v, (1, 0))),
    )
    pad_bias = np.zeros(logits.shape[1])
    pad_bias[PAD] = NEG_INF
    return K.add(logits, K.as_tensor(pad_bias))


@dataclass
class ScoreVector:
    logits: Tensor          # (B, n_items+1), pad column at the floor
    probabilities: np.ndarray  # (B, n_items+1); pad probability is exactly 0


def finetune_scores(h_t, h_v, f_t, f_v, id_table) -> ScoreVector:
    logits = finetune_logits(h_t, h_v, f_t, f_v, id_table)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return ScoreVector(logits, e / e.sum(axis=1, keepdims=True))


def finetune_loss(logits: Tensor, targets) -> Tensor:
    """Cross entropy of the targets under stabilized log-softmax."""
    targets = np.asarray(targets)
    if (targets == PAD).any():
        raise ContractError("a padding index appeared as a fine-tuning target")
    lse = K.logsumexp(logits, axis=1)
    picked = K.take_per_row(logits, targets)
    return K.tsum(K.sub(lse, picked))
