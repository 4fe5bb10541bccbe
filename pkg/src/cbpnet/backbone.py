"""A small Vision-Transformer-style encoder with prefix-prompted attention.

Pre-norm blocks, learned position embeddings, mean pooling over final tokens.
Attention layers optionally take per-layer prefix pairs (pK, pV) that are
prepended to the projected keys/values; queries and sequence length are
untouched. All gradients are hand-derived; a hard freeze switch guarantees
backbone parameters never move once frozen while gradients still flow
through to the prompts.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    NumericDomainError,
    ShapeError,
)
from .numeric import (
    InitSpec,
    Rng,
    Tensor,
    gelu_forward,
    gelu_grad_from_cache,
    layer_norm_backward,
    layer_norm_forward,
    sample,
    softmax_array,
)


def _contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over leading (batch, token) axes: 'bnd,bne->de' as one BLAS call."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

LN_EPS = 1e-6

# PromptMap: {layer_index: (pK Tensor, pV Tensor)}, each L_p x D.
PromptMap = dict


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    depth: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    pool: str = "mean"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pool != "mean":
            raise ConfigError(f"unsupported pool: {self.pool!r}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def param_count(self) -> int:
        """Parameter count by pure arithmetic (no allocation)."""
        d, dm = self.dim, self.mlp_dim
        patch = self.patch_dim * d + d
        pos = self.num_tokens * d
        attn = 4 * (d * d + d)
        lns = 4 * d
        mlp = d * dm + dm + dm * d + d
        return patch + pos + self.depth * (attn + lns + mlp) + 2 * d


class FrozenStore:
    """All backbone parameters plus per-parameter frozen flags."""

    def __init__(self, cfg: BackboneConfig, rng: Rng):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.frozen: dict[str, bool] = {}
        d, dm = cfg.dim, cfg.mlp_dim
        init = InitSpec("normal-scaled", gain=1.0)

        def weight(name, fan_in, shape):
            t = Tensor(sample(init, rng, fan_in, int(np.prod(shape))).reshape(shape),
                       trainable=True)
            self._add(name, t)

        def const(name, shape, value):
            self._add(name, Tensor(np.full(shape, value), trainable=True))

        weight("patch/w", cfg.patch_dim, (cfg.patch_dim, d))
        const("patch/b", (d,), 0.0)
        self._add("pos", Tensor(rng.gen.normal(0.0, 0.02, size=(cfg.num_tokens, d)),
                                trainable=True))
        for layer in range(cfg.depth):
            p = f"layer{layer}"
            const(f"{p}/ln1/g", (d,), 1.0)
            const(f"{p}/ln1/b", (d,), 0.0)
            for w in ("wq", "wk", "wv", "wo"):
                weight(f"{p}/attn/{w}", d, (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                const(f"{p}/attn/{b}", (d,), 0.0)
            const(f"{p}/ln2/g", (d,), 1.0)
            const(f"{p}/ln2/b", (d,), 0.0)
            weight(f"{p}/mlp/w1", d, (d, dm))
            const(f"{p}/mlp/b1", (dm,), 0.0)
            weight(f"{p}/mlp/w2", dm, (dm, d))
            const(f"{p}/mlp/b2", (d,), 0.0)
        const("ln_f/g", (d,), 1.0)
        const("ln_f/b", (d,), 0.0)

    def _add(self, name: str, t: Tensor):
        self.params[name] = t
        self.frozen[name] = False

    def freeze_all(self):
        for name in self.frozen:
            self.frozen[name] = True

    def is_frozen(self) -> bool:
        return all(self.frozen.values())

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if not self.frozen[n]}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def accumulate(self, name: str, grad: np.ndarray):
        if not self.frozen[name]:
            self.params[name].grad += grad


def _validate_prompt_map(prompts: PromptMap, cfg: BackboneConfig):
    for layer, (pk, pv) in prompts.items():
        if not (0 <= layer < cfg.depth):
            raise ConfigError(f"prompt attached to layer {layer}, depth is {cfg.depth}")
        if pk.shape != pv.shape:
            raise ShapeError(f"pK/pV shape mismatch at layer {layer}: {pk.shape} vs {pv.shape}")
        if pk.shape[-1] != cfg.dim:
            raise ShapeError(f"prompt dim {pk.shape[-1]} != model dim {cfg.dim}")


def patchify(images: np.ndarray, store: FrozenStore):
    """Split images into patches, linearly embed, add position embeddings.

    Returns (tokens B x N x D, patches cache).
    """
    cfg = store.cfg
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(
            f"image shape {images.shape[1:]} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})"
        )
    b = images.shape[0]
    g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
    patches = (
        images.reshape(b, g, p, g, p, cfg.channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, cfg.num_tokens, cfg.patch_dim)
    )
    tokens = patches @ store.params["patch/w"].data + store.params["patch/b"].data
    tokens = tokens + store.params["pos"].data
    return tokens, patches


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def msa_prefix_forward(h1, pk, pv, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Multi-head attention with prefix keys/values prepended post-projection.

    h1: B x N x D; pk/pv: L x D arrays or None. Returns (y, cache).
    """
    b, n, d = h1.shape
    if d % heads != 0:
        raise ConfigError(f"dim {d} not divisible by heads {heads}")
    dh = d // heads
    q = h1 @ wq + bq
    ks = h1 @ wk + bk
    vs = h1 @ wv + bv
    if pk is not None and pk.shape[0] > 0:
        lp = pk.shape[0]
        k = np.concatenate([np.broadcast_to(pk, (b, lp, d)), ks], axis=1)
        v = np.concatenate([np.broadcast_to(pv, (b, lp, d)), vs], axis=1)
    else:
        lp = 0
        k, v = ks, vs
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    attn = softmax_array(scores, axis=-1)
    oh = attn @ vh
    o = _merge_heads(oh)
    y = o @ wo + bo
    cache = (h1, qh, kh, vh, attn, o, lp, heads, wq, wk, wv, wo)
    return y, cache, attn


def msa_prefix_backward(dy, cache):
    """Backward of msa_prefix_forward.

    Returns (dh1, dpk, dpv, grads) where grads maps the weight/bias slot
    names ("wq", "bq", ...) to their gradient arrays.
    """
    h1, qh, kh, vh, attn, o, lp, heads, wq, wk, wv, wo = cache
    b, n, d = h1.shape
    dh = d // heads
    grads = {}
    grads["wo"] = _contract(o, dy)
    grads["bo"] = dy.sum(axis=(0, 1))
    do = dy @ wo.T
    doh = _split_heads(do, heads)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    if lp > 0:
        dpk = dk[:, :lp].sum(axis=0)
        dpv = dv[:, :lp].sum(axis=0)
        dks, dvs = dk[:, lp:], dv[:, lp:]
    else:
        dpk = dpv = None
        dks, dvs = dk, dv
    grads["wq"] = _contract(h1, dq)
    grads["bq"] = dq.sum(axis=(0, 1))
    grads["wk"] = _contract(h1, dks)
    grads["bk"] = dks.sum(axis=(0, 1))
    grads["wv"] = _contract(h1, dvs)
    grads["bv"] = dvs.sum(axis=(0, 1))
    dh1 = dq @ wq.T + dks @ wk.T + dvs @ wv.T
    return dh1, dpk, dpv, grads


class Backbone:
    """Forward/backward driver over a FrozenStore."""

    def __init__(self, store: FrozenStore):
        self.store = store
        self.cfg = store.cfg

    def _p(self, name: str) -> np.ndarray:
        return self.store.params[name].data

    def forward(self, images: np.ndarray, prompts: PromptMap | None = None):
        """Run the encoder; returns (pooled B x D, cache for backward)."""
        prompts = prompts or {}
        _validate_prompt_map(prompts, self.cfg)
        tokens, patches = patchify(images, self.store)
        h = tokens
        layer_caches = []
        for layer in range(self.cfg.depth):
            p = f"layer{layer}"
            h1, ln1_cache = layer_norm_forward(
                h, self._p(f"{p}/ln1/g"), self._p(f"{p}/ln1/b"), LN_EPS
            )
            pk_t, pv_t = prompts.get(layer, (None, None))
            pk = pk_t.data if pk_t is not None else None
            pv = pv_t.data if pv_t is not None else None
            attn_out, attn_cache, _ = msa_prefix_forward(
                h1, pk, pv,
                self._p(f"{p}/attn/wq"), self._p(f"{p}/attn/bq"),
                self._p(f"{p}/attn/wk"), self._p(f"{p}/attn/bk"),
                self._p(f"{p}/attn/wv"), self._p(f"{p}/attn/bv"),
                self._p(f"{p}/attn/wo"), self._p(f"{p}/attn/bo"),
                self.cfg.heads,
            )
            h = h + attn_out
            h2, ln2_cache = layer_norm_forward(
                h, self._p(f"{p}/ln2/g"), self._p(f"{p}/ln2/b"), LN_EPS
            )
            pre1 = h2 @ self._p(f"{p}/mlp/w1") + self._p(f"{p}/mlp/b1")
            act1, tanh1 = gelu_forward(pre1)
            mlp_out = act1 @ self._p(f"{p}/mlp/w2") + self._p(f"{p}/mlp/b2")
            h = h + mlp_out
            if not np.all(np.isfinite(h)):
                raise NumericDomainError(f"non-finite activation after layer {layer}")
            layer_caches.append((ln1_cache, attn_cache, ln2_cache, h2, pre1, tanh1, act1))
        hf, lnf_cache = layer_norm_forward(h, self._p("ln_f/g"), self._p("ln_f/b"), LN_EPS)
        pooled = hf.mean(axis=1)
        cache = (patches, layer_caches, lnf_cache, prompts, images.shape[0] if images.ndim == 4 else 1)
        return pooled, cache

    def backward(self, cache, dpooled: np.ndarray):
        """Accumulate gradients into unfrozen store params and prompt tensors."""
        patches, layer_caches, lnf_cache, prompts, _ = cache
        n = self.cfg.num_tokens
        dh = np.repeat(dpooled[:, None, :] / n, n, axis=1)
        dh, dg, db = layer_norm_backward(dh, lnf_cache)
        self.store.accumulate("ln_f/g", dg)
        self.store.accumulate("ln_f/b", db)
        for layer in reversed(range(self.cfg.depth)):
            p = f"layer{layer}"
            ln1_cache, attn_cache, ln2_cache, h2, pre1, tanh1, act1 = layer_caches[layer]
            # MLP branch
            dmlp = dh
            dact1 = dmlp @ self._p(f"{p}/mlp/w2").T
            self.store.accumulate(f"{p}/mlp/w2", _contract(act1, dmlp))
            self.store.accumulate(f"{p}/mlp/b2", dmlp.sum(axis=(0, 1)))
            dpre1 = dact1 * gelu_grad_from_cache(pre1, tanh1)
            self.store.accumulate(f"{p}/mlp/w1", _contract(h2, dpre1))
            self.store.accumulate(f"{p}/mlp/b1", dpre1.sum(axis=(0, 1)))
            dh2 = dpre1 @ self._p(f"{p}/mlp/w1").T
            dx, dg, db = layer_norm_backward(dh2, ln2_cache)
            self.store.accumulate(f"{p}/ln2/g", dg)
            self.store.accumulate(f"{p}/ln2/b", db)
            dh = dh + dx
            # attention branch
            dattn_out = dh
            dh1, dpk, dpv, grads = msa_prefix_backward(dattn_out, attn_cache)
            for slot, g in grads.items():
                self.store.accumulate(f"{p}/attn/{slot}", g)
            if layer in prompts and dpk is not None:
                pk_t, pv_t = prompts[layer]
                if pk_t.trainable:
                    pk_t.grad += dpk
                if pv_t.trainable:
                    pv_t.grad += dpv
            dx, dg, db = layer_norm_backward(dh1, ln1_cache)
            self.store.accumulate(f"{p}/ln1/g", dg)
            self.store.accumulate(f"{p}/ln1/b", db)
            dh = dh + dx
        # patch embedding
        self.store.accumulate("patch/w", _contract(patches, dh))
        self.store.accumulate("patch/b", dh.sum(axis=(0, 1)))
        self.store.accumulate("pos", dh.sum(axis=0))

    def query_vector(self, images: np.ndarray) -> np.ndarray:
        """Pooled feature of a prompt-free forward pass (no gradients kept)."""
        pooled, _ = self.forward(images, prompts={})
        return pooled


# --- checkpoint format ------------------------------------------------------
# magic "CBPN", version u16, then per tensor: name_len u16, name utf-8,
# rank u8, dims u32 each, raw little-endian f64 data; finally a u64 checksum
# (CRC-32 of all preceding bytes, zero-extended).

CKPT_MAGIC = b"CBPN"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    body = bytearray()
    body += CKPT_MAGIC
    body += struct.pack("<H", CKPT_VERSION)
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw))
        body += raw
        body += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<I", dim)
        body += arr.astype("<f8").tobytes()
    body += struct.pack("<Q", zlib.crc32(bytes(body)))
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise CorruptionError("checkpoint truncated")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if stored != zlib.crc32(blob[:-8]):
        raise CorruptionError("checkpoint checksum mismatch")
    tensors = {}
    off = 6
    end = len(blob) - 8
    while off < end:
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
        except (struct.error, ValueError) as exc:
            raise CorruptionError(f"checkpoint record truncated: {exc}") from exc
        if off > end:
            raise CorruptionError("checkpoint record overruns checksum trailer")
        tensors[name] = arr.copy()
    return tensors
