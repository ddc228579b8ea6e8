"""Identification, projection-matching and modality-adversarial objectives."""
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError

CMPM_EPS = 1e-8
PROB_CLAMP = 1e-12
_LOG_FLOOR = 1e-300


@dataclass
class ClassifierHead:
    """Identity classifier; rows of ``W`` are unit-normalized at every use."""
    W: Tensor
    b: Tensor

    @property
    def num_classes(self):
        return self.W.shape[0]


@dataclass
class LossBundle:
    l_id_visual: Tensor = None
    l_id_text: Tensor = None
    l_match_v2t: Tensor = None
    l_match_t2v: Tensor = None
    l_disc: Tensor = None
    l_gen_adv: Tensor = None
    total: Tensor = None

    def values(self):
        return {f.name: (float("nan") if getattr(self, f.name) is None else getattr(self, f.name).item())
                for f in fields(self)}


def _labels(labels):
    return np.asarray(labels, dtype=np.int64).reshape(-1)


def identification_loss(emb, labels, head):
    """Norm-softmax cross entropy of ``emb`` rows against their identities."""
    labels = _labels(labels)
    B = emb.shape[0]
    if labels.size != B:
        raise DimensionError(f"{labels.size} labels for {B} embeddings")
    C = head.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range [0, {C})")
    w_unit = ag.l2_normalize_rows(head.W)
    logits = emb @ w_unit.T + head.b
    logp = ag.log_softmax_rows(logits)
    return -logp[np.arange(B), labels].mean()


def matching_probabilities(phi, tau_bar):
    """p[i, j]: softmax over j of the scalar projection of phi_i on tau_bar_j."""
    if phi.shape != tau_bar.shape:
        raise DimensionError(f"embedding shapes differ: {phi.shape} vs {tau_bar.shape}")
    return ag.softmax_rows(phi @ tau_bar.T)


def true_matching_distribution(labels):
    labels = _labels(labels)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    return Tensor(same / same.sum(axis=1, keepdims=True))


def _kl_rows(p, logp, q, eps):
    log_q = np.log(q.data + eps)
    return (p * (logp - log_q)).sum(axis=1).mean()


def cmpm_loss(p, q, eps=CMPM_EPS):
    """Mean KL(p_i || q_i) with ``eps`` guarding log(0) of unmatched pairs."""
    p, q = ag.as_tensor(p), ag.as_tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise DimensionError(f"p {p.shape} and q {q.shape} must be equal-shape matrices")
    if np.abs(p.data.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("rows of p must be probability vectors")
    # 0 * log(floor) == 0, so zero-probability entries drop out
    logp = ag.log(ag.clip(p, _LOG_FLOOR, 1.0))
    return _kl_rows(p, logp, q, eps)


def projection_matching_loss(anchor, other, q, eps=CMPM_EPS):
    """One matching direction: normalize ``other``, project ``anchor`` on it, KL against ``q``.

    Numerically the same as cmpm_loss(matching_probabilities(...)) but works
    from log-probabilities, so saturated rows stay finite.
    """
    if anchor.shape != other.shape:
        raise DimensionError(f"embedding shapes differ: {anchor.shape} vs {other.shape}")
    logits = anchor @ ag.l2_normalize_rows(other).T
    logp = ag.log_softmax_rows(logits)
    return _kl_rows(ag.exp(logp), logp, ag.as_tensor(q), eps)


def _clamped(d):
    return ag.clip(ag.as_tensor(d), PROB_CLAMP, 1.0 - PROB_CLAMP)


def discriminator_loss(d_visual, d_text):
    dv, dt = _clamped(d_visual), _clamped(d_text)
    return -ag.log(dv).mean() - ag.log(1.0 - dt).mean()


def generator_adversarial_loss(d_visual, d_text):
    """Label-flipped objective: encoders win when visual looks textual and vice versa."""
    dv, dt = _clamped(d_visual), _clamped(d_text)
    return -ag.log(dt).mean() - ag.log(1.0 - dv).mean()


def soft_target_bce(d, targets):
    """Binary cross entropy of scores ``d`` against (possibly >1) soft targets."""
    d = _clamped(d)
    t = np.asarray(targets, dtype=np.float64).reshape(d.shape)
    return -(t * ag.log(d) + (1.0 - t) * ag.log(1.0 - d)).mean()


def total_loss(bundle, mode="generator"):
    """Combine bundle parts.

    generator:     L_I + L_M + generator adversarial term
    discriminator: discriminator loss alone
    joint:         L_I + L_M + discriminator loss (used with gradient reversal)
    Missing parts are skipped.
    """
    if mode == "discriminator":
        parts = [bundle.l_disc]
    else:
        parts = [bundle.l_id_visual, bundle.l_id_text, bundle.l_match_v2t, bundle.l_match_t2v]
        parts.append(bundle.l_gen_adv if mode == "generator" else bundle.l_disc)
        if mode not in ("generator", "joint"):
            raise ContractError(f"unknown loss mode {mode!r}")
    parts = [p for p in parts if p is not None]
    if not parts:
        return Tensor(0.0)
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out
