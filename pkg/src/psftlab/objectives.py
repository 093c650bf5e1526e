"""Training objectives as losses to minimize.

Token-level objectives are aggregated with a token mean: the sum over
response-mask positions divided by their count. Every function reads the
policy inside whatever :class:`~psftlab.autodiff.Graph` is active, so calling
one under ``with graph:`` makes ``out.loss`` differentiable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from psftlab import autodiff as ad
from psftlab.policy import Policy, TokenBatch, token_entropy


@dataclass(frozen=True)
class ObjectiveConfig:
    epsilon: float = 0.28
    clip_low: float = 0.2
    clip_high: float = 0.28
    kl_coef: float = 0.5
    kl_direction: str = "forward"
    dpo_beta: float = 0.01
    advantage_std_floor: float = 1e-8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.clip_low < 1 or not self.clip_high > 0:
            raise ValueError("need 0 < clip_low < 1 and clip_high > 0")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if self.kl_direction not in ("forward", "reverse"):
            raise ValueError("kl_direction is 'forward' (pi || ref) or 'reverse'")
        if self.dpo_beta < 0:
            raise ValueError("dpo_beta must be >= 0")

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["epsilon"]):
            d["epsilon"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("epsilon"), str):
            d["epsilon"] = float(d["epsilon"])
        return cls(**d)


@dataclass
class LossOutput:
    loss: ad.Tensor
    ratios: np.ndarray
    clip_mask: np.ndarray
    token_entropy: np.ndarray
    mask: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.loss.data)

    @property
    def clip_fraction(self) -> float:
        return aggregate(self.clip_mask.astype(float), self.mask)

    @property
    def mean_entropy(self) -> float:
        return aggregate(self.token_entropy, self.mask)

    def clipped_tokens(self, tokens):
        """(token_id, ratio) for every clipped response position."""
        sel = self.clip_mask & self.mask
        return list(zip(tokens[sel].tolist(), self.ratios[sel].tolist()))


def aggregate(values, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    n = mask.sum()
    if n == 0:
        raise ValueError("empty response mask")
    return float(np.asarray(values)[mask].sum() / n)


def token_mean(x: ad.Tensor, mask) -> ad.Tensor:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty response mask")
    return ad.sum(x * mask.astype(np.float64)) / n


def _check(batch: TokenBatch):
    if batch.n_response_tokens == 0:
        raise ValueError("empty response mask")


def _shared_config(policy: Policy, other: Policy, what: str):
    if other is None:
        raise ValueError(f"{what} policy is required")
    if other.config.arch != policy.config.arch or other.vocab_size != policy.vocab_size:
        raise ValueError(f"{what} policy config does not match")


def _old_logp(snap: Policy, batch: TokenBatch) -> np.ndarray:
    with ad.no_grad():
        return snap.log_prob(batch).data


def _unit(batch):
    return np.ones(batch.tokens.shape), np.zeros(batch.tokens.shape, dtype=bool)


def sft_loss(policy: Policy, batch: TokenBatch) -> LossOutput:
    _check(batch)
    lsm, logp = policy.forward(batch)
    loss = -token_mean(logp, batch.response_mask)
    ent, _ = token_entropy(lsm.data, batch)
    ratios, clip_mask = _unit(batch)
    return LossOutput(loss, ratios, clip_mask, ent, batch.response_mask)


def _token_advantages(adv, batch: TokenBatch) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    shape = batch.tokens.shape
    if adv.ndim == 0:
        return np.full(shape, float(adv))
    if adv.shape == (shape[0],):
        return np.repeat(adv[:, None], shape[1], axis=1)
    if adv.shape == shape:
        return adv
    raise ValueError(f"advantage shape {adv.shape} does not align with batch {shape}")


def pg_loss(policy: Policy, batch: TokenBatch, adv) -> LossOutput:
    """-token_mean(log pi(a_t|s_t) * A_t); ``adv`` per sequence or per token."""
    _check(batch)
    A = _token_advantages(adv, batch)
    lsm, logp = policy.forward(batch)
    loss = -token_mean(logp * A, batch.response_mask)
    ent, _ = token_entropy(lsm.data, batch)
    ratios, clip_mask = _unit(batch)
    return LossOutput(loss, ratios, clip_mask, ent, batch.response_mask)


def importance_ratios(policy: Policy, snap: Policy, batch: TokenBatch):
    """Returns (ratio tensor, live log-probs, aligned log-distributions).

    Ratios are exp(log pi - log pi_old) with the old side detached; positions
    outside the response mask are computed but carry no meaning.
    """
    _shared_config(policy, snap, "snapshot")
    old = _old_logp(snap, batch)
    lsm, logp = policy.forward(batch)
    return ad.exp(logp - old), logp, lsm


def _clip_output(obj, ratio, lsm, batch, clip_mask, extras=None):
    loss = -token_mean(obj, batch.response_mask)
    ent, _ = token_entropy(lsm.data, batch)
    return LossOutput(loss, ratio.data.copy(), clip_mask & batch.response_mask, ent,
                      batch.response_mask, extras or {})


def ppo_clip_loss(policy: Policy, snap: Policy, batch: TokenBatch, adv,
                  clip_low: float = 0.2, clip_high: float = 0.28) -> LossOutput:
    """Token objective min(r*A, clip(r, 1-clip_low, 1+clip_high)*A).

    ``clip_mask`` marks tokens whose gradient the clip removes: the clipped
    branch is selected and r lies outside the bounds.
    """
    _check(batch)
    A = _token_advantages(adv, batch)
    ratio, _, lsm = importance_ratios(policy, snap, batch)
    lo, hi = 1.0 - clip_low, 1.0 + clip_high
    obj = ad.minimum(ratio * A, ad.clip(ratio, lo, hi) * A)
    r = ratio.data
    clip_mask = ((A > 0) & (r > hi)) | ((A < 0) & (r < lo))
    return _clip_output(obj, ratio, lsm, batch, clip_mask)


def psft_loss(policy: Policy, snap: Policy, batch: TokenBatch, epsilon: float = 0.28,
              lower: float | None = None) -> LossOutput:
    """Proximal SFT: token objective min(r, clip(r, 1-eps, 1+eps)), unit advantage.

    Tokens with r > 1+eps get exactly zero gradient; all others contribute
    r * grad log pi. ``lower`` overrides the lower clip bound (default 1-eps),
    which cannot change the result. ``epsilon = inf`` disables clipping.
    """
    if snap is None:
        raise ValueError("psft_loss needs a snapshot policy")
    _check(batch)
    ratio, _, lsm = importance_ratios(policy, snap, batch)
    if math.isinf(epsilon):
        obj = ratio
        clip_mask = np.zeros(batch.tokens.shape, dtype=bool)
    else:
        lo = 1.0 - epsilon if lower is None else lower
        hi = 1.0 + epsilon
        obj = ad.minimum(ratio, ad.clip(ratio, lo, hi))
        clip_mask = ratio.data > hi
    return _clip_output(obj, ratio, lsm, batch, clip_mask)


def kl_per_token(lsm: ad.Tensor, ref_lsm: np.ndarray, direction: str = "forward") -> ad.Tensor:
    """Full-vocabulary KL per position (B x T)."""
    if direction == "forward":
        return ad.sum(ad.exp(lsm) * (lsm - ref_lsm), axis=-1)
    return ad.sum(-(lsm - ref_lsm) * np.exp(ref_lsm), axis=-1)


def sft_kl_loss(policy: Policy, ref: Policy, batch: TokenBatch, kl_coef: float = 0.5,
                direction: str = "forward") -> LossOutput:
    _shared_config(policy, ref, "reference")
    _check(batch)
    with ad.no_grad():
        ref_lsm = ref.next_token_logp(batch).data
    lsm, logp = policy.forward(batch)
    nll = -token_mean(logp, batch.response_mask)
    kl = kl_per_token(lsm, ref_lsm, direction)
    kl_mean = token_mean(kl, batch.response_mask)
    loss = nll + kl_mean * kl_coef
    ent, _ = token_entropy(lsm.data, batch)
    ratios, clip_mask = _unit(batch)
    return LossOutput(loss, ratios, clip_mask, ent, batch.response_mask,
                      {"kl": float(kl_mean.data), "nll": float(nll.data)})


def grpo_advantages(rewards, std_floor: float = 1e-8):
    """Group-normalised advantages.

    ``rewards`` is (groups x G). Returns (advantages, kept) where groups with
    zero reward variance are dropped (kept False, advantages 0).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] < 2:
        raise ValueError("rewards must be groups x G with G >= 2")
    mean = r.mean(axis=1, keepdims=True)
    std = r.std(axis=1, keepdims=True)
    kept = std[:, 0] > 0
    adv = np.where(kept[:, None], (r - mean) / (std + std_floor), 0.0)
    return adv, kept


def sequence_logp(logp: ad.Tensor, batch: TokenBatch) -> ad.Tensor:
    return ad.sum(logp * batch.response_mask.astype(np.float64), axis=1)


def dpo_loss(policy: Policy, ref: Policy, chosen: TokenBatch, rejected: TokenBatch,
             beta: float = 0.01) -> LossOutput:
    """-log sigmoid(beta * (chosen log-ratio - rejected log-ratio)), mean over pairs.

    Log-ratios use sequence-summed response log-probs. ``extras`` carries the
    per-pair implicit rewards beta * (log pi - log pi_ref) of both sides.
    """
    if len(chosen) != len(rejected):
        raise ValueError("chosen and rejected must have the same number of rows")
    _shared_config(policy, ref, "reference")
    _check(chosen)
    _check(rejected)
    with ad.no_grad():
        ref_c = sequence_logp(ref.log_prob(chosen), chosen).data
        ref_r = sequence_logp(ref.log_prob(rejected), rejected).data
    lsm_c, lp_c = policy.forward(chosen)
    lsm_r, lp_r = policy.forward(rejected)
    delta_c = sequence_logp(lp_c, chosen) - ref_c
    delta_r = sequence_logp(lp_r, rejected) - ref_r
    z = (delta_c - delta_r) * beta
    loss = -ad.mean(ad.log_sigmoid(z))
    ent, _ = token_entropy(lsm_c.data, chosen)
    ratios, clip_mask = _unit(chosen)
    extras = {
        "chosen_reward": beta * delta_c.data,
        "rejected_reward": beta * delta_r.data,
        "accuracy": float(np.mean(z.data > 0)),
    }
    return LossOutput(loss, ratios, clip_mask, ent, chosen.response_mask, extras)
