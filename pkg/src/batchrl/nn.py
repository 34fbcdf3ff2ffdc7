"""Feed-forward networks with hand-written backprop, and an Adam optimizer.

Weights are stored as ``[out, in]`` matrices, so a layer computes
``x @ W.T + b`` on a ``[batch, in]`` input. Hidden layers use ReLU; the
output head is either ``"tanh"`` (bounded action mean) or ``"linear"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from batchrl.errors import ContractViolation

HEADS = ("tanh", "linear")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ContractViolation(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ContractViolation(f"layer {k} input {w.shape[1]} does not chain "
                                        f"onto previous output {self.weights[k - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list, interleaved as W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        if len(arrays) != 2 * len(self.weights):
            raise ContractViolation("array count does not match layer count")
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.head)

    def astype(self, dtype) -> "MlpParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


@dataclass
class GradTape:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


def init_mlp(rng: np.random.Generator, in_dim: int, hidden=(200, 100), head: str = "linear",
             out_dim: int = 1, out_scale: float = 1.0, dtype=np.float32) -> MlpParams:
    """Glorot-uniform weights and zero biases.

    ``out_scale`` multiplies the last layer's weights; the policy uses 0.01 so
    its initial mean action sits near zero.
    """
    dims = [in_dim, *hidden, out_dim]
    if any(int(d) < 1 for d in dims):
        raise ContractViolation(f"layer sizes must be positive: {dims}")
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if k == len(dims) - 2:
            w = w * out_scale
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases, head)


def forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise ContractViolation(f"input shape {x.shape} does not match in_dim {p.in_dim}")
    inputs, preacts = [], []
    h = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        if k < last:
            h = np.maximum(z, 0)
        elif p.head == "tanh":
            # float32 tanh rounds to exactly +-1 past |z| ~ 9; keep outputs strictly inside.
            lim = np.nextafter(z.dtype.type(1), z.dtype.type(0))
            h = np.clip(np.tanh(z), -lim, lim)
        else:
            h = z
    return h, GradTape(inputs, preacts, h)


def backward(p: MlpParams, tape: GradTape, dl_dy: np.ndarray) -> MlpParams:
    """Gradient of a loss w.r.t. every parameter, summed over the batch.

    The result reuses :class:`MlpParams` as a container shaped like ``p``.
    """
    dl_dy = np.asarray(dl_dy)
    if len(tape.inputs) != len(p.weights) or dl_dy.shape != tape.output.shape:
        raise ContractViolation(
            f"upstream gradient {dl_dy.shape} does not match tape output {tape.output.shape}")
    if p.head == "tanh":
        delta = dl_dy * (1 - tape.output * tape.output)
    else:
        delta = dl_dy
    n = len(p.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for k in range(n - 1, -1, -1):
        gw[k] = delta.T @ tape.inputs[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ p.weights[k]) * (tape.preacts[k - 1] > 0)
    return MlpParams(gw, gb, p.head)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], **kwargs) -> "AdamState":
        return cls([np.zeros_like(a) for a in params], [np.zeros_like(a) for a in params], **kwargs)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
              lr: float) -> tuple[AdamState, list[np.ndarray]]:
    """Bias-corrected Adam. Pure: returns a new state and new parameter arrays."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractViolation("parameter, gradient and moment lists differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
        new_p.append((p - update).astype(p.dtype, copy=False))
    return AdamState(new_m, new_v, t, b1, b2, state.eps), new_p

