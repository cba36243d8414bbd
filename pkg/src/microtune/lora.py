"""Low-rank adapters over frozen base weights.

For a base matrix applied as y = W0 @ x (math orientation, W0 in R^{d x k}),
the adapted map is W0 @ x + (alpha/rank) * B @ (A @ x) with A in R^{r x k}
Gaussian-initialized and B in R^{d x r} zero-initialized, so a fresh adapter
is an exact no-op. Model weights are stored [in, out] = W0^T, so an adapter
targeting storage matrix W of shape (k_in, d_out) keeps A with shape
(rank, k_in) and B with shape (d_out, rank).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import LAYER_MATRICES, DecoderLM, DecoderWeights
from .tensor import Tensor

DEFAULT_TARGETS = ("wq", "wk", "wv", "wo")
INIT_STD = 0.02


@dataclass(frozen=True)
class LoraConfig:
    rank: int
    alpha: float
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "targets", tuple(self.targets))
        for t in self.targets:
            if t not in LAYER_MATRICES:
                raise ConfigError(f"unknown adapter target {t!r}; valid: {LAYER_MATRICES}")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(rank=d["rank"], alpha=d["alpha"], targets=tuple(d.get("targets", DEFAULT_TARGETS)))


@dataclass
class LoraAdapter:
    target: str
    A: Tensor  # (rank, k_in)
    B: Tensor  # (d_out, rank)
    rank: int
    alpha: float


def attach_adapters(lm: DecoderLM, config: LoraConfig, seed: int) -> dict[str, LoraAdapter]:
    """Create fresh adapters for every targeted matrix in every layer and
    freeze the base weights. Returns {full parameter name -> adapter} and
    sets it on the model handle."""
    rng = np.random.default_rng(seed)
    adapters: dict[str, LoraAdapter] = {}
    for i in range(lm.config.n_layers):
        for kind in config.targets:
            name = f"layers.{i}.{kind}"
            k_in, d_out = lm.weights[name].shape
            if config.rank > min(k_in, d_out):
                raise ConfigError(
                    f"rank {config.rank} exceeds min dim of {name} with shape {(k_in, d_out)}"
                )
            adapters[name] = LoraAdapter(
                target=name,
                A=Tensor(rng.normal(0.0, INIT_STD, size=(config.rank, k_in)), requires_grad=True),
                B=Tensor(np.zeros((d_out, config.rank)), requires_grad=True),
                rank=config.rank,
                alpha=float(config.alpha),
            )
    lm.weights.set_trainable(False)
    lm.adapters = adapters
    return adapters


def adapter_parameters(adapters: dict[str, LoraAdapter]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name in sorted(adapters):
        out[name + ".A"] = adapters[name].A
        out[name + ".B"] = adapters[name].B
    return out


def adapted_matvec(w0: Tensor, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """W0 @ x + (alpha/rank) * B @ (A @ x), math orientation W0 in R^{d x k}.

    x may be a column vector (k,) or a matrix (k, n). W0 is treated as a
    constant: gradients flow only into A and B."""
    d, k = w0.shape
    if adapter.A.shape != (adapter.rank, k) or adapter.B.shape != (d, adapter.rank):
        raise ConfigError(
            f"adapter shapes A{adapter.A.shape} B{adapter.B.shape} do not fit W0 {(d, k)}"
        )
    vec = x.data.ndim == 1
    xm = T.reshape(x, (k, 1)) if vec else x
    # wrap w0.data in a fresh constant so gradients reach A, B (and x) only
    base = T.matmul(Tensor(w0.data), xm)
    low = T.matmul(adapter.B, T.matmul(adapter.A, xm))
    out = T.add(base, T.scale(low, adapter.alpha / adapter.rank))
    return T.reshape(out, (d,)) if vec else out


def merge(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W0 + (alpha/rank) * B @ A, math orientation; w0 is left untouched."""
    d, k = w0.shape
    if adapter.B.shape[0] != d or adapter.A.shape[1] != k:
        raise ConfigError(
            f"adapter shapes A{adapter.A.shape} B{adapter.B.shape} do not fit W0 {(d, k)}"
        )
    return w0 + (adapter.alpha / adapter.rank) * (adapter.B.data @ adapter.A.data)


def unmerge(w_merged: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    return w_merged - (adapter.alpha / adapter.rank) * (adapter.B.data @ adapter.A.data)


def merged_weights(lm: DecoderLM) -> DecoderWeights:
    """New weight set with every adapter folded into its storage matrix.

    Storage is [in, out] = W0^T, so the folded update is ((alpha/r) B A)^T."""
    if not lm.adapters:
        return lm.weights.copy()
    params = {}
    for name, t in lm.weights.parameters().items():
        if name in lm.adapters:
            a = lm.adapters[name]
            params[name] = Tensor(merge(t.data.T, a).T, requires_grad=True)
        else:
            params[name] = Tensor(t.data.copy(), requires_grad=True)
    return DecoderWeights(lm.config, params)


def interpolate_adapters(
    adapter_sets: list[dict[str, LoraAdapter]], weights: list[float]
) -> dict[str, LoraAdapter]:
    """Weighted average of adapter sets, elementwise over each A and B.

    All sets must share targets, ranks, alphas; weights must sum to 1."""
    if len(adapter_sets) != len(weights) or not adapter_sets:
        raise ContractError(
            f"{len(adapter_sets)} adapter sets vs {len(weights)} weights"
        )
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ContractError(f"interpolation weights sum to {sum(weights)}, expected 1")
    ref = adapter_sets[0]
    for s in adapter_sets[1:]:
        if set(s) != set(ref):
            raise ConfigError(
                f"adapter target mismatch: {sorted(ref)} vs {sorted(s)}"
            )
        for name in ref:
            if (s[name].rank, s[name].alpha, s[name].A.shape, s[name].B.shape) != (
                ref[name].rank, ref[name].alpha, ref[name].A.shape, ref[name].B.shape,
            ):
                raise ConfigError(f"adapter structure mismatch at {name}")
    out: dict[str, LoraAdapter] = {}
    for name in sorted(ref):
        a_avg = sum(w * s[name].A.data for w, s in zip(weights, adapter_sets))
        b_avg = sum(w * s[name].B.data for w, s in zip(weights, adapter_sets))
        out[name] = LoraAdapter(
            target=name,
            A=Tensor(a_avg, requires_grad=True),
            B=Tensor(b_avg, requires_grad=True),
            rank=ref[name].rank,
            alpha=ref[name].alpha,
        )
    return out


def trainable_fraction(lm: DecoderLM) -> float:
    base = sum(t.size for t in lm.weights.parameters().values())
    if not lm.adapters:
        return 1.0
    adapted = sum(a.A.size + a.B.size for a in lm.adapters.values())
    return adapted / (base + adapted)
