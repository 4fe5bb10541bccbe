"""Bottleneck MLP with utility-tracked units and selective re-initialization.

The block sits between the pooled backbone feature and the classification
head. Its middle (tracked) units carry an exponential-moving-average utility
combining activation magnitude with outgoing-weight mass, plus an age
counter. After each training batch, mature low-utility units are
re-initialized: input weights resampled, outgoing weights zeroed, so the
block's function is preserved except for the revived unit's contribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numeric import InitSpec, Rng, Tensor, gelu_array, gelu_grad_array, sample


@dataclass
class UnitSnapshot:
    """Per tracked unit: batch-mean |activation| and outgoing-weight sum."""

    abs_activation: np.ndarray
    outgoing_sum: np.ndarray


class EfficientCBPBlock:
    """input layer -> GELU -> tracked linear layer -> GELU -> output layer."""

    def __init__(
        self,
        dim_in: int,
        hidden: int,
        dim_out: int,
        eta: float = 0.99,
        maturity: int = 50,
        rho: float = 1e-3,
        init: InitSpec | None = None,
        rng: Rng | None = None,
        sum_abs_outgoing: bool = False,
    ):
        if not (0.0 <= eta < 1.0):
            raise ConfigError(f"eta must be in [0, 1), got {eta}")
        if not (0.0 <= rho <= 1.0):
            raise ConfigError(f"rho must be in [0, 1], got {rho}")
        if maturity < 0:
            raise ConfigError(f"maturity threshold must be >= 0, got {maturity}")
        if hidden >= dim_in:
            raise ConfigError(f"hidden {hidden} must be a bottleneck (< {dim_in})")
        self.dim_in, self.hidden, self.dim_out = dim_in, hidden, dim_out
        self.eta, self.maturity, self.rho = float(eta), int(maturity), float(rho)
        self.sum_abs_outgoing = bool(sum_abs_outgoing)
        self.init = init or InitSpec("uniform-fan-in", 1.0)
        rng = rng or Rng(0)

        def lin(fan_in, shape):
            return Tensor(sample(self.init, rng, fan_in, int(np.prod(shape))).reshape(shape),
                          trainable=True)

        self.w_in = lin(dim_in, (dim_in, hidden))
        self.b_in = Tensor(np.zeros(hidden), trainable=True)
        self.w_cbp = lin(hidden, (hidden, hidden))
        self.b_cbp = Tensor(np.zeros(hidden), trainable=True)
        self.w_out = lin(hidden, (hidden, dim_out))
        self.b_out = Tensor(np.zeros(dim_out), trainable=True)

        self.utility = np.zeros(hidden)
        self.age = np.zeros(hidden, dtype=np.int64)
        self.reinit_accumulator = 0.0
        self.last_snapshot: UnitSnapshot | None = None

    def params(self) -> dict:
        return {
            "cbp/w_in": self.w_in, "cbp/b_in": self.b_in,
            "cbp/w_cbp": self.w_cbp, "cbp/b_cbp": self.b_cbp,
            "cbp/w_out": self.w_out, "cbp/b_out": self.b_out,
        }

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params().values())

    def zero_grad(self):
        for t in self.params().values():
            t.zero_grad()

    # --- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False):
        """Returns (y B x dim_out, cache). Records a UnitSnapshot when training."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.dim_in:
            raise ShapeError(f"input dim {x.shape[1]} != block dim_in {self.dim_in}")
        pre1 = x @ self.w_in.data + self.b_in.data
        act1 = gelu_array(pre1)
        pre2 = act1 @ self.w_cbp.data + self.b_cbp.data
        act2 = gelu_array(pre2)  # tracked units
        y = act2 @ self.w_out.data + self.b_out.data
        if training:
            self.last_snapshot = UnitSnapshot(
                abs_activation=np.abs(act2).mean(axis=0),
                outgoing_sum=self.w_out.data.sum(axis=1),
            )
        return y, (x, pre1, act1, pre2, act2)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x, pre1, act1, pre2, act2 = cache
        self.w_out.grad += act2.T @ dy
        self.b_out.grad += dy.sum(axis=0)
        dact2 = dy @ self.w_out.data.T
        dpre2 = dact2 * gelu_grad_array(pre2)
        self.w_cbp.grad += act1.T @ dpre2
        self.b_cbp.grad += dpre2.sum(axis=0)
        dact1 = dpre2 @ self.w_cbp.data.T
        dpre1 = dact1 * gelu_grad_array(pre1)
        self.w_in.grad += x.T @ dpre1
        self.b_in.grad += dpre1.sum(axis=0)
        return dpre1 @ self.w_in.data.T

    # --- utility tracking and re-initialization ------------------------------

    def update_utility(self, snapshot: UnitSnapshot | None = None):
        """EMA utility update and age increment for every tracked unit."""
        snapshot = snapshot or self.last_snapshot
        if snapshot is None:
            raise ConfigError("no snapshot recorded; run a training forward first")
        if self.sum_abs_outgoing:
            wmass = np.abs(self.w_out.data).sum(axis=1)
        else:
            wmass = np.abs(snapshot.outgoing_sum)
        signal = snapshot.abs_activation * wmass
        self.utility = self.eta * self.utility + (1.0 - self.eta) * signal
        self.age += 1

    def cbp_step(self, rng: Rng, adam=None) -> list:
        """Re-initialize the lowest-utility mature units at the configured rate.

        The fractional budget rho * |eligible| accumulates across steps; each
        whole unit of budget re-initializes one more unit this step.
        """
        eligible = np.flatnonzero(self.age > self.maturity)
        if eligible.size == 0 or self.rho == 0.0:
            return []
        self.reinit_accumulator += self.rho * eligible.size
        k = int(np.floor(self.reinit_accumulator))
        if k == 0:
            return []
        k = min(k, eligible.size)
        # stable sort: equal utilities resolve to the lowest unit index
        order = eligible[np.argsort(self.utility[eligible], kind="stable")]
        chosen = [int(i) for i in order[:k]]
        for i in chosen:
            self.reinit_unit(i, rng, adam=adam)
        self.reinit_accumulator -= k
        return chosen

    def reinit_unit(self, i: int, rng: Rng, adam=None):
        """Resample unit i's input weights, zero its outgoing weights and stats."""
        if not (0 <= i < self.hidden):
            raise ConfigError(f"unit index {i} out of range [0, {self.hidden})")
        self.w_cbp.data[:, i] = sample(self.init, rng, self.hidden, self.hidden)
        self.b_cbp.data[i] = 0.0
        self.w_out.data[i, :] = 0.0
        self.utility[i] = 0.0
        self.age[i] = 0
        if adam is not None:
            adam.zero_slice("cbp/w_cbp", (slice(None), i))
            adam.zero_slice("cbp/b_cbp", (i,))
            adam.zero_slice("cbp/w_out", (i, slice(None)))

    # --- serialization -------------------------------------------------------

    def state_tensors(self) -> dict:
        out = {name: t.data for name, t in self.params().items()}
        out["cbp/utility"] = self.utility
        out["cbp/age"] = self.age.astype(np.float64)
        out["cbp/scalars"] = np.array(
            [self.reinit_accumulator, self.eta, float(self.maturity), self.rho]
        )
        return out

    def load_state(self, tensors: dict):
        for name, t in self.params().items():
            t.data[...] = tensors[name]
        self.utility = np.array(tensors["cbp/utility"])
        self.age = np.array(tensors["cbp/age"], dtype=np.int64)
        acc, eta, m, rho = tensors["cbp/scalars"]
        self.reinit_accumulator = float(acc)
        self.eta, self.maturity, self.rho = float(eta), int(m), float(rho)
