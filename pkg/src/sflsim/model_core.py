"""Frozen tanh MLP with per-layer low-rank adapters, split into stages.

The network is a stack of N + 2 stages indexed 0..N+1:

    stage 0      input lift, x (batch, d) -> h (batch, m), linear, frozen
    stage 1..N   hidden layer l: h <- tanh(h @ (W_l + B_l @ A_l))
    stage N+1    head, h (batch, m) -> logits (batch, K), linear, frozen

Only the A_l (r, m) and B_l (m, r) adapter factors are trainable. B_l starts
at zero so the initial model is exactly the frozen stack. All arithmetic is
float64 and every random draw comes from a single seeded generator, so
identical configs produce bit-identical models.

``forward_partial`` / ``backward_partial`` operate on a half-open stage range
[start, stop); composing [0, s) and [s, N+2) for any s reproduces the
monolithic pass exactly, which is what lets one side of a split model run on
a different machine than the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelConfig",
    "FrozenStack",
    "LoraAdapter",
    "AdapterSet",
    "ForwardCache",
    "GradBundle",
    "init_model",
    "forward_partial",
    "loss_and_metrics",
    "backward_partial",
    "sgd_step",
    "merge_delta",
]


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of the toy split model."""

    num_layers: int
    hidden_dim: int
    rank: int
    input_dim: int
    num_classes: int
    seed: int

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.rank >= self.hidden_dim:
            raise ValueError(
                f"rank must be < hidden_dim ({self.hidden_dim}), got {self.rank}"
            )
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def num_stages(self) -> int:
        # lift + N hidden + head
        return self.num_layers + 2


@dataclass
class FrozenStack:
    """Pre-trained weights; never updated after init (arrays are read-only)."""

    input_lift: np.ndarray  # (d, m)
    hidden: list[np.ndarray]  # N matrices, each (m, m)
    head: np.ndarray  # (m, K)

    @property
    def num_layers(self) -> int:
        return len(self.hidden)


@dataclass
class LoraAdapter:
    """Low-rank update for one hidden layer: effective weight W + B @ A."""

    layer_index: int  # 1-based hidden layer position
    A: np.ndarray  # (r, m), Gaussian at init
    B: np.ndarray  # (m, r), zero at init


@dataclass
class AdapterSet:
    """All adapters of one model replica plus the client/server split point.

    ``cut`` is the number of hidden layers held by the client; layers
    1..cut are the client slice and cut+1..N the server slice.
    """

    adapters: list[LoraAdapter]
    cut: int = 0

    def client_slice(self) -> list[LoraAdapter]:
        return [a for a in self.adapters if a.layer_index <= self.cut]

    def server_slice(self) -> list[LoraAdapter]:
        return [a for a in self.adapters if a.layer_index > self.cut]


@dataclass
class ForwardCache:
    """Activations recorded by forward_partial, consumed by backward_partial.

    For every hidden layer in the range we keep the layer input, the
    down-projected intermediate (input @ B) and the post-tanh output; that is
    exactly what the adapter gradients need, with no recomputation.
    """

    start: int
    stop: int
    x_in: np.ndarray
    hidden_inputs: dict[int, np.ndarray] = field(default_factory=dict)
    hidden_mids: dict[int, np.ndarray] = field(default_factory=dict)
    hidden_outputs: dict[int, np.ndarray] = field(default_factory=dict)
    head_in: np.ndarray | None = None
    logits: np.ndarray | None = None
    output: np.ndarray | None = None


@dataclass
class GradBundle:
    """Adapter gradients for a stage range plus the gradient at its entry."""

    start: int
    stop: int
    layer_grads: dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (dA, dB)
    input_grad: np.ndarray


def init_model(config: ModelConfig) -> tuple[FrozenStack, AdapterSet]:
    """Draw the frozen stack and fresh adapters from one seeded stream.

    Frozen matrices are iid Gaussian(0, 1/sqrt(m)); each A is Gaussian
    (0, 1/sqrt(r)) and each B is zero, so the initial low-rank update is
    identically zero. Frozen arrays are marked read-only as a hard guard
    against accidental training of the backbone.
    """
    rng = np.random.default_rng(config.seed)
    m = config.hidden_dim
    frozen_std = 1.0 / math.sqrt(m)

    input_lift = rng.normal(0.0, frozen_std, size=(config.input_dim, m))
    hidden = [
        rng.normal(0.0, frozen_std, size=(m, m)) for _ in range(config.num_layers)
    ]
    head = rng.normal(0.0, frozen_std, size=(m, config.num_classes))
    for arr in (input_lift, head, *hidden):
        arr.flags.writeable = False
    stack = FrozenStack(input_lift=input_lift, hidden=hidden, head=head)

    adapter_std = 1.0 / math.sqrt(config.rank)
    adapters = [
        LoraAdapter(
            layer_index=l,
            A=rng.normal(0.0, adapter_std, size=(config.rank, m)),
            B=np.zeros((m, config.rank)),
        )
        for l in range(1, config.num_layers + 1)
    ]
    return stack, AdapterSet(adapters=adapters, cut=0)


def _adapter_map(adapters: list[LoraAdapter] | None) -> dict[int, LoraAdapter]:
    return {a.layer_index: a for a in adapters} if adapters else {}


def _check_range(stack: FrozenStack, start: int, stop: int) -> None:
    n_stages = stack.num_layers + 2
    if not (0 <= start < stop <= n_stages):
        raise ValueError(
            f"invalid stage range [{start}, {stop}) for {n_stages} stages"
        )


def forward_partial(
    stack: FrozenStack,
    adapters: list[LoraAdapter] | None,
    start: int,
    stop: int,
    x: np.ndarray,
) -> ForwardCache:
    """Run stages [start, stop) and record what backward needs.

    ``x`` is the raw (batch, d) input when start == 0, otherwise the
    (batch, m) activation entering stage ``start``. ``adapters`` must cover
    every hidden layer in the range; an adapter for layer l contributes
    (h @ B_l) @ A_l on top of the frozen h @ W_l. Passing None (or an empty
    list) for a range with no hidden layers, e.g. the head alone, is allowed.
    """
    _check_range(stack, start, stop)
    n = stack.num_layers
    amap = _adapter_map(adapters)

    cache = ForwardCache(start=start, stop=stop, x_in=x)
    h = x
    for stage in range(start, stop):
        if stage == 0:
            if h.shape[1] != stack.input_lift.shape[0]:
                raise ValueError(
                    f"expected raw input with {stack.input_lift.shape[0]} features,"
                    f" got {h.shape[1]}"
                )
            h = h @ stack.input_lift
        elif stage <= n:
            if stage not in amap:
                raise ValueError(f"missing adapter for hidden layer {stage}")
            ad = amap[stage]
            mid = h @ ad.B
            pre = h @ stack.hidden[stage - 1] + mid @ ad.A
            out = np.tanh(pre)
            cache.hidden_inputs[stage] = h
            cache.hidden_mids[stage] = mid
            cache.hidden_outputs[stage] = out
            h = out
        else:
            cache.head_in = h
            h = h @ stack.head
            cache.logits = h
    cache.output = h
    return cache


def loss_and_metrics(logits: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
    """Mean softmax cross-entropy (max-subtracted) and correct-count."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"logits {logits.shape} and labels {labels.shape} are inconsistent"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    batch = logits.shape[0]
    loss = float(-log_probs[np.arange(batch), labels].mean())
    correct = int((logits.argmax(axis=1) == labels).sum())
    return loss, correct


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def backward_partial(
    stack: FrozenStack,
    adapters: list[LoraAdapter] | None,
    cache: ForwardCache,
    upstream: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> GradBundle:
    """Exact reverse-mode pass over the cached range.

    If the range includes the head, ``labels`` seeds the pass with the
    mean-cross-entropy gradient (softmax - onehot) / batch; otherwise
    ``upstream`` is the (batch, m) loss gradient at the range's exit
    activation. Adapter gradients are returned for every hidden layer in the
    range; frozen matrices get no gradient. ``input_grad`` is the gradient at
    the range's entry, i.e. what a downstream segment on another machine
    needs to continue the pass.
    """
    n = stack.num_layers
    amap = _adapter_map(adapters)
    includes_head = cache.stop == n + 2

    if includes_head:
        if labels is None:
            raise ValueError("range includes the head: labels are required")
        if cache.logits is None:
            raise ValueError("cache does not hold logits")
        batch = cache.logits.shape[0]
        dlogits = _softmax(cache.logits)
        dlogits[np.arange(batch), labels] -= 1.0
        dlogits /= batch
        g = dlogits @ stack.head.T
    else:
        if upstream is None:
            raise ValueError("range excludes the head: upstream gradient required")
        g = upstream

    layer_grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    top_hidden = min(cache.stop - 1, n)
    for stage in range(top_hidden, cache.start - 1, -1):
        if stage == 0:
            g = g @ stack.input_lift.T
            continue
        ad = amap.get(stage)
        if ad is None:
            raise ValueError(f"missing adapter for hidden layer {stage}")
        h_out = cache.hidden_outputs[stage]
        h_in = cache.hidden_inputs[stage]
        mid = cache.hidden_mids[stage]
        dpre = g * (1.0 - h_out * h_out)
        dA = mid.T @ dpre
        dB = h_in.T @ (dpre @ ad.A.T)
        layer_grads[stage] = (dA, dB)
        g = dpre @ stack.hidden[stage - 1].T + (dpre @ ad.A.T) @ ad.B.T

    return GradBundle(
        start=cache.start, stop=cache.stop, layer_grads=layer_grads, input_grad=g
    )


def sgd_step(
    adapters: list[LoraAdapter], grads: GradBundle, lr: float
) -> list[LoraAdapter]:
    """Plain SGD on the adapter factors, in place. Returns the same list."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    amap = _adapter_map(adapters)
    for layer, (dA, dB) in grads.layer_grads.items():
        ad = amap.get(layer)
        if ad is None:
            raise ValueError(f"gradient for layer {layer} has no matching adapter")
        ad.A -= lr * dA
        ad.B -= lr * dB
    return adapters


def merge_delta(adapter: LoraAdapter) -> np.ndarray:
    """Dense effective update B @ A (rank <= r by construction)."""
    return adapter.B @ adapter.A
