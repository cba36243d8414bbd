"""Training objectives: SFT cross-entropy, Bradley-Terry reward loss,
KL utilities, DPO, and GRPO with clipped surrogates.

Conventions: "policy" arguments are DecoderLM handles whose weights (or
adapters) carry gradients; "reference" handles are frozen snapshots and
contribute constants only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TokenizedExample
from .errors import ConfigError, ContractError
from .eval import extract_number, has_answer_marker, numbers_equal
from .model import DecoderLM, forward, hidden_states
from .tensor import Tensor

FORMAT_BONUS = 0.1


# ----------------------------------------------------------------------- SFT


def sft_loss(lm: DecoderLM, batch: list[TokenizedExample]) -> Tensor:
    """Mean negative log-likelihood over all non-ignored positions in the
    batch (token-weighted across examples, not a mean of means)."""
    if not batch:
        raise ContractError("sft_loss on an empty batch")
    counts = [ex.non_ignored() for ex in batch]
    total = sum(counts)
    if total == 0:
        raise ContractError("sft_loss batch has no supervisable positions")
    loss: Tensor | None = None
    for ex, n in zip(batch, counts):
        if n == 0:
            continue
        ce = T.cross_entropy_masked(forward(lm, ex.input_ids), ex.labels)
        piece = T.scale(ce, n / total)
        loss = piece if loss is None else T.add(loss, piece)
    return loss


# ------------------------------------------------------------ sequence scores


@dataclass
class SequenceLogProb:
    total: Tensor  # scalar, graph-connected when the policy needs grads
    token_count: int

    @property
    def value(self) -> float:
        return self.total.item()


def per_token_logprobs(lm: DecoderLM, prompt_ids: list[int], response_ids: list[int]) -> Tensor:
    """log pi(response_t | prompt, response_<t) for each response token."""
    if not prompt_ids:
        raise ContractError("empty prompt")
    if not response_ids:
        raise ContractError("empty response")
    ids = list(prompt_ids) + list(response_ids)
    logits = forward(lm, ids)
    p = len(prompt_ids)
    rows = T.slice_rows(logits, p - 1, p - 1 + len(response_ids))
    return T.log_probs_of(rows, response_ids)


def sequence_logprob(lm: DecoderLM, prompt_ids: list[int], response_ids: list[int]) -> SequenceLogProb:
    lp = per_token_logprobs(lm, prompt_ids, response_ids)
    return SequenceLogProb(total=T.tsum(lp), token_count=len(response_ids))


# -------------------------------------------------------------- reward model


def bt_reward_loss(score_chosen: Tensor, score_rejected: Tensor) -> Tensor:
    """-log sigmoid(s_chosen - s_rejected), computed stably."""
    return T.softplus(T.sub(score_rejected, score_chosen))


@dataclass
class RewardScorer:
    """Scores a (prompt, response) pair. exact_match_answer compares the
    extracted final answer against a gold string; learned_head projects the
    final hidden state with a trainable vector."""

    mode: str
    head: Tensor | None = None

    MODES = ("exact_match_answer", "learned_head")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"unknown reward mode {self.mode!r}; valid: {self.MODES}")
        if self.mode == "learned_head" and self.head is None:
            raise ConfigError("learned_head mode needs a head vector")

    @classmethod
    def learned(cls, d_model: int, seed: int) -> "RewardScorer":
        rng = np.random.default_rng(seed)
        return cls("learned_head", Tensor(rng.normal(0, 0.02, size=(d_model,)), requires_grad=True))

    def score_text(self, sample: str, gold: str) -> float:
        if self.mode != "exact_match_answer":
            raise ConfigError("score_text is only valid in exact_match_answer mode")
        return exact_match_reward(sample, gold)

    def score_sequence(self, lm: DecoderLM, ids: list[int]) -> Tensor:
        if self.mode != "learned_head":
            raise ConfigError("score_sequence is only valid in learned_head mode")
        h = hidden_states(lm, ids)
        last = T.take_row(h, h.shape[0] - 1)
        return T.tsum(T.mul(last, T.reshape(self.head, last.shape)))


def exact_match_reward(sample: str, gold: str) -> float:
    """1.0 for a numerically matching extracted answer, plus a 0.1 format
    bonus when a well-formed final-answer marker is present."""
    extracted = extract_number(sample)
    reward = 0.0
    if extracted is not None and numbers_equal(extracted, gold):
        reward += 1.0
    if has_answer_marker(sample):
        reward += FORMAT_BONUS
    return reward


# ------------------------------------------------------------------------ KL


def kl_categorical(p, q) -> float:
    """sum_i p_i ln(p_i / q_i); terms with p_i = 0 contribute zero."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError(f"kl_categorical shapes {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ContractError("kl_categorical needs non-negative entries")
    for name, arr in (("p", p), ("q", q)):
        if abs(arr.sum() - 1.0) > 1e-6:
            raise ContractError(f"{name} sums to {arr.sum()}, not a distribution")
    bad = (q == 0) & (p > 0)
    if bad.any():
        raise ContractError(
            f"q has zero mass at index {int(np.argmax(bad))} where p is positive"
        )
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def kl_adjusted_reward(reward: float, kl: float, beta: float) -> float:
    """R - beta * KL; the penalty keeps the policy near its reference."""
    if beta < 0:
        raise ContractError(f"beta must be >= 0, got {beta}")
    if kl < 0:
        raise ContractError(f"kl must be >= 0, got {kl}")
    return reward - beta * kl


# ----------------------------------------------------------------------- DPO

DPO_BETA_DEFAULT = 0.1


def dpo_loss(
    policy_chosen: Tensor,
    policy_rejected: Tensor,
    ref_chosen: float,
    ref_rejected: float,
    beta: float = DPO_BETA_DEFAULT,
) -> Tensor:
    """-log sigmoid(beta * [(pi - ref) margin on chosen minus rejected]).

    Policy log-probs are graph-connected scalars; reference log-probs are
    plain floats from the frozen snapshot."""
    if beta <= 0:
        raise ConfigError(f"dpo beta must be positive, got {beta}")
    margin = T.add_constant(T.sub(policy_chosen, policy_rejected),
                            -(float(ref_chosen) - float(ref_rejected)))
    return T.softplus(T.scale(margin, -beta))


def dpo_margin(policy_chosen: float, policy_rejected: float,
               ref_chosen: float, ref_rejected: float,
               beta: float = DPO_BETA_DEFAULT) -> float:
    """Implicit reward margin beta*[(pc-rc)-(pl-rl)]; positive means the
    policy prefers the chosen response more than the reference does."""
    return beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected))


# ---------------------------------------------------------------------- GRPO

GRPO_EPS_CLIP_DEFAULT = 0.2
GRPO_BETA_KL_DEFAULT = 0.04
GRPO_GROUP_SIZE_DEFAULT = 4
GRPO_ADV_EPS_DEFAULT = 1e-8


@dataclass
class GrpoGroup:
    prompt_ids: list[int]
    responses: list[list[int]]
    rewards: list[float]
    old_logprobs: list[float]

    def validate(self) -> None:
        g = len(self.responses)
        if g < 2:
            raise ContractError(f"group size must be >= 2, got {g}")
        if len(self.rewards) != g or len(self.old_logprobs) != g:
            raise ContractError(
                f"group fields disagree: {g} responses, {len(self.rewards)} rewards, "
                f"{len(self.old_logprobs)} old logprobs"
            )
        if any(len(r) == 0 for r in self.responses):
            raise ContractError("empty response in group")


def grpo_advantages(rewards: list[float], eps: float = GRPO_ADV_EPS_DEFAULT) -> list[float]:
    """(r - mean) / (population std + eps) within the group."""
    if len(rewards) < 2:
        raise ContractError(f"need >= 2 rewards, got {len(rewards)}")
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    r = np.asarray(rewards, dtype=np.float64)
    if r.max() == r.min():
        # identical rewards carry no ranking signal; mean() residue divided by
        # the tiny eps floor would otherwise manufacture spurious advantages
        return [0.0] * len(rewards)
    return ((r - r.mean()) / (r.std() + eps)).tolist()


def clipped_surrogate(ratio: Tensor, advantage: float, eps_clip: float) -> Tensor:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) for one response."""
    unclipped = T.scale(ratio, advantage)
    clipped = T.scale(T.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip), advantage)
    return T.minimum(unclipped, clipped)


def grpo_loss(
    policy: DecoderLM,
    ref: DecoderLM,
    groups: list[GrpoGroup],
    eps_clip: float = GRPO_EPS_CLIP_DEFAULT,
    beta_kl: float = GRPO_BETA_KL_DEFAULT,
    advantage_eps: float = GRPO_ADV_EPS_DEFAULT,
) -> Tensor:
    """Clipped-surrogate policy loss with group-normalized advantages plus a
    per-token KL penalty against the frozen reference.

    Ratios are sequence-level exp(logpi - logpi_old); the KL estimator is
    exp(delta) - delta - 1 with delta = logpi_ref - logpi per token,
    averaged over tokens, then over responses."""
    if not 0.0 < eps_clip < 1.0:
        raise ConfigError(f"eps_clip must be in (0, 1), got {eps_clip}")
    if beta_kl < 0:
        raise ConfigError(f"beta_kl must be >= 0, got {beta_kl}")
    if not groups:
        raise ContractError("grpo_loss on an empty group list")
    surrogates: list[Tensor] = []
    kls: list[Tensor] = []
    for group in groups:
        group.validate()
        advs = grpo_advantages(group.rewards, advantage_eps)
        for resp, adv, old_lp in zip(group.responses, advs, group.old_logprobs):
            lp_vec = per_token_logprobs(policy, group.prompt_ids, resp)
            total = T.tsum(lp_vec)
            ratio = T.texp(T.add_constant(total, -float(old_lp)))
            surrogates.append(clipped_surrogate(ratio, adv, eps_clip))
            ref_vec = per_token_logprobs(ref, group.prompt_ids, resp).data
            delta = T.add_constant(T.scale(lp_vec, -1.0), ref_vec)
            est = T.add_constant(T.sub(T.texp(delta), delta), -1.0)
            kls.append(T.tmean(est))

    def mean_of(parts: list[Tensor]) -> Tensor:
        acc = parts[0]
        for p in parts[1:]:
            acc = T.add(acc, p)
        return T.scale(acc, 1.0 / len(parts))

    loss = T.scale(mean_of(surrogates), -1.0)
    if beta_kl > 0:
        loss = T.add(loss, T.scale(mean_of(kls), beta_kl))
    return loss
