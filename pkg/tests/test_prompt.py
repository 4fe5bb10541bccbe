import hashlib

import numpy as np
import pytest

from cbpnet.errors import ConfigError, NumericDomainError
from cbpnet.numeric import Rng
from cbpnet.prompt import EPromptPool, GPrompt, assemble, matching_loss, select_eprompt


def _pool(n_tasks=3, length=2, dim=8, layers=(1, 2)):
    pool = EPromptPool(length, dim, list(layers))
    rng = Rng(0)
    for t in range(n_tasks):
        pool.add_task(rng.child("task", t))
    return pool


class TestSelection:
    def test_exact_key_wins_over_orthogonal(self):
        pool = _pool(2)
        q = np.zeros(8)
        q[0] = 1.0
        pool.entries[0].key.data[...] = q
        pool.entries[1].key.data[...] = 0.0
        pool.entries[1].key.data[1] = 1.0  # orthogonal to q
        assert select_eprompt(q, pool) == 0

    def test_scale_invariance(self):
        pool = _pool(4)
        q = Rng(3).gen.normal(size=8)
        assert select_eprompt(q, pool) == select_eprompt(3.0 * q, pool)

    def test_tie_breaks_to_lowest_index(self):
        pool = _pool(6)
        q = Rng(4).gen.normal(size=8)
        for t in (2, 5):
            pool.entries[t].key.data[...] = q  # cos = 1 for both
        for t in (0, 1, 3, 4):
            pool.entries[t].key.data[...] = -q
        assert select_eprompt(q, pool) == 2

    def test_key_rescaling_does_not_change_argmax(self):
        pool = _pool(3)
        q = Rng(5).gen.normal(size=8)
        before = select_eprompt(q, pool)
        pool.entries[before].key.data *= 42.0
        assert select_eprompt(q, pool) == before

    def test_zero_query_rejected(self):
        with pytest.raises(NumericDomainError):
            select_eprompt(np.zeros(8), _pool())

    def test_empty_pool(self):
        with pytest.raises(ConfigError):
            select_eprompt(np.ones(8), EPromptPool(2, 8, [1]))


class TestMatchingLoss:
    def test_identical_vectors(self):
        pool = _pool(1)
        k = pool.entries[0].key
        loss, _ = matching_loss(k.data.copy(), k)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_vectors(self):
        pool = _pool(1)
        k = pool.entries[0].key
        q = np.zeros(8)
        # build a vector orthogonal to k
        q[0], q[1] = k.data[1], -k.data[0]
        loss, _ = matching_loss(q, k)
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_opposite_vectors(self):
        pool = _pool(1)
        k = pool.entries[0].key
        loss, _ = matching_loss(-2.0 * k.data, k)
        assert loss == pytest.approx(2.0, abs=1e-12)

    def test_range(self):
        rng = Rng(6)
        pool = _pool(1)
        k = pool.entries[0].key
        for _ in range(50):
            loss, _ = matching_loss(rng.gen.normal(size=8), k)
            assert 0.0 <= loss <= 2.0

    def test_gradient_direction(self):
        # a small step along -dkey must reduce the loss
        pool = _pool(1)
        k = pool.entries[0].key
        q = Rng(7).gen.normal(size=8)
        loss, dkey = matching_loss(q, k)
        k.data -= 1e-3 * dkey
        loss2, _ = matching_loss(q, k)
        assert loss2 < loss

    def test_zero_vector_rejected(self):
        pool = _pool(1)
        with pytest.raises(NumericDomainError):
            matching_loss(np.zeros(8), pool.entries[0].key)


class TestAssemble:
    def test_default_attachment_split(self):
        g = GPrompt.create(2, 8, [0, 1], Rng(1))
        pool = _pool(2, layers=(2, 3, 4))
        pm = assemble(g, pool, 1)
        assert set(pm) == {0, 1, 2, 3, 4}

    def test_empty_attachments(self):
        assert assemble(None, None, 0) == {}

    def test_overlap_rejected(self):
        g = GPrompt.create(2, 8, [0, 1], Rng(1))
        pool = _pool(1, layers=(1, 2))
        with pytest.raises(ConfigError):
            assemble(g, pool, 0)

    def test_uses_only_requested_task(self):
        g = GPrompt.create(2, 8, [0], Rng(1))
        pool = _pool(3)
        pm = assemble(g, pool, 1)
        assert pm[1][0] is pool.entries[1].pairs[1][0]
        assert pm[1][0] is not pool.entries[2].pairs[1][0]

    def test_missing_task(self):
        with pytest.raises(ConfigError):
            assemble(None, _pool(2), 5)


def _entry_digest(entry):
    h = hashlib.sha256()
    h.update(entry.key.data.tobytes())
    for layer in sorted(entry.pairs):
        pk, pv = entry.pairs[layer]
        h.update(pk.data.tobytes())
        h.update(pv.data.tobytes())
    return h.hexdigest()


class TestTaskIsolation:
    def test_training_one_task_leaves_others_untouched(self):
        # direct parameter surgery on task 1 must not alter tasks 0 and 2
        pool = _pool(3)
        digests = [_entry_digest(e) for e in pool.entries]
        entry = pool.entries[1]
        entry.key.data += 1.0
        for pk, pv in entry.pairs.values():
            pk.data += 0.5
            pv.data -= 0.5
        assert _entry_digest(pool.entries[0]) == digests[0]
        assert _entry_digest(pool.entries[2]) == digests[2]
        assert _entry_digest(pool.entries[1]) != digests[1]
