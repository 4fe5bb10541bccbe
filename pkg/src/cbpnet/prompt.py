"""Shared and per-task prompt storage with key-based task selection.

The shared prompt set attaches to shallow attention layers; each task owns a
keyed prompt entry attached to deeper layers. At inference the task entry is
chosen by cosine similarity between a learned key and the frozen query
feature of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericDomainError
from .numeric import InitSpec, Rng, Tensor, sample

PROMPT_INIT_RANGE = 0.03  # uniform [-r, r]; small so frozen attention barely moves at step 0


@dataclass
class GPrompt:
    """Task-shared prompt pairs on a set of shallow layers."""

    layers: list
    pairs: dict = field(default_factory=dict)  # layer -> (pK, pV) Tensors, L_G x D

    @classmethod
    def create(cls, length: int, dim: int, layers, rng: Rng) -> "GPrompt":
        if length < 1:
            raise ConfigError(f"prompt length must be >= 1, got {length}")
        pairs = {}
        for layer in layers:
            pk = Tensor(rng.gen.uniform(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE, (length, dim)),
                        trainable=True)
            pv = Tensor(rng.gen.uniform(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE, (length, dim)),
                        trainable=True)
            pairs[layer] = (pk, pv)
        return cls(layers=list(layers), pairs=pairs)

    def params(self) -> dict:
        out = {}
        for layer, (pk, pv) in self.pairs.items():
            out[f"g_prompt/{layer}/k"] = pk
            out[f"g_prompt/{layer}/v"] = pv
        return out


@dataclass
class TaskEntry:
    pairs: dict  # layer -> (pK, pV), L_E x D
    key: Tensor  # D


class EPromptPool:
    """One keyed prompt entry per task seen so far."""

    def __init__(self, length: int, dim: int, layers):
        if length < 1:
            raise ConfigError(f"prompt length must be >= 1, got {length}")
        self.length = length
        self.dim = dim
        self.layers = list(layers)
        self.entries: list[TaskEntry] = []

    def __len__(self):
        return len(self.entries)

    def add_task(self, rng: Rng) -> int:
        pairs = {}
        for layer in self.layers:
            pk = Tensor(rng.gen.uniform(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE,
                                        (self.length, self.dim)), trainable=True)
            pv = Tensor(rng.gen.uniform(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE,
                                        (self.length, self.dim)), trainable=True)
            pairs[layer] = (pk, pv)
        key = Tensor(sample(InitSpec("normal-scaled", 1.0), rng, self.dim, self.dim),
                     trainable=True)
        self.entries.append(TaskEntry(pairs=pairs, key=key))
        return len(self.entries) - 1

    def task_params(self, task: int) -> dict:
        entry = self.entries[task]
        out = {f"e_key/{task}": entry.key}
        for layer, (pk, pv) in entry.pairs.items():
            out[f"e_prompt/{task}/{layer}/k"] = pk
            out[f"e_prompt/{task}/{layer}/v"] = pv
        return out

    def all_params(self) -> dict:
        out = {}
        for t in range(len(self.entries)):
            out.update(self.task_params(t))
        return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericDomainError("cosine similarity with a zero vector")
    return float(a @ b / (na * nb))


def select_eprompt(q: np.ndarray, pool: EPromptPool) -> int:
    """Index of the key most cosine-similar to q; ties go to the lowest index."""
    if len(pool) == 0:
        raise ConfigError("prompt pool is empty")
    sims = np.array([_cosine(q, e.key.data) for e in pool.entries])
    return int(np.argmax(sims))


def matching_loss(q: np.ndarray, key: Tensor):
    """1 - cos(q, k); gradient flows to the key only.

    Returns (loss, dkey). q comes from the frozen path and gets no gradient.
    """
    k = key.data
    nq, nk = np.linalg.norm(q), np.linalg.norm(k)
    if nq == 0.0 or nk == 0.0:
        raise NumericDomainError("matching loss with a zero vector")
    cos = float(q @ k / (nq * nk))
    dkey = -(q / (nq * nk) - cos * k / (nk * nk))
    return 1.0 - cos, dkey


def assemble(g: GPrompt | None, pool: EPromptPool | None, task: int) -> dict:
    """Build the layer -> (pK, pV) map for one task's forward pass."""
    prompt_map = {}
    if g is not None:
        prompt_map.update(g.pairs)
    if pool is not None:
        if not (0 <= task < len(pool)):
            raise ConfigError(f"task {task} not in pool of size {len(pool)}")
        entry = pool.entries[task]
        overlap = set(prompt_map) & set(entry.pairs)
        if overlap:
            raise ConfigError(f"shared and task prompts overlap on layers {sorted(overlap)}")
        prompt_map.update(entry.pairs)
    return prompt_map
