"""Continual-learning driver.

Trains one task at a time: prompts (shared + current task's entry and key),
the re-init block, and the current head segment under a combined
classification + key-matching objective with Adam. The re-init step runs
after every training batch. Evaluation is class-incremental: the task entry
is chosen by key similarity, and the head scores all classes seen so far.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .backbone import Backbone, BackboneConfig, FrozenStore, load_checkpoint, save_checkpoint
from .cbp import EfficientCBPBlock
from .errors import ConfigError, DataError, NumericDomainError
from .harness import (
    AccuracyMatrix,
    DatasetContainer,
    generate_synthetic,
    load_container,
    split_class_incremental,
)
from .numeric import InitSpec, Rng, Tensor, sample, softmax_array
from .prompt import EPromptPool, GPrompt, assemble, matching_loss, select_eprompt


# --- configuration ----------------------------------------------------------

VARIANT_NAMES = ("ft-seq", "ft-seq+cbp", "dualprompt", "cbpnet")


@dataclass(frozen=True)
class VariantFlags:
    use_prompts: bool = True
    use_cbp: bool = True
    freeze_backbone: bool = True

    @classmethod
    def named(cls, name: str) -> "VariantFlags":
        table = {
            "ft-seq": cls(False, False, False),
            "ft-seq+cbp": cls(False, True, False),
            "dualprompt": cls(True, False, True),
            "cbpnet": cls(True, True, True),
        }
        if name not in table:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(table)}")
        return table[name]

    @property
    def name(self) -> str:
        for name in VARIANT_NAMES:
            if VariantFlags.named(name) == self:
                return name
        return "custom"


@dataclass(frozen=True)
class PromptConfig:
    g_length: int = 5
    e_length: int = 5
    g_layers: tuple = (0, 1)
    e_layers: tuple = (2, 3, 4)


@dataclass(frozen=True)
class CbpConfig:
    eta: float = 0.99
    m: int = 50
    rho: float = 2e-3
    hidden: int = 0  # 0 means dim // 4
    lr_scale: float = 0.03  # block learning rate relative to the shared lr
    sum_abs_outgoing: bool = False

    def resolve_hidden(self, dim: int) -> int:
        return self.hidden if self.hidden > 0 else dim // 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch: int = 24
    lr: float = 1e-3
    lam: float = 0.1
    seed: int = 0
    variant: VariantFlags = field(default_factory=VariantFlags)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch and lr must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    classes: int = 60
    per_class: int = 30
    height: int = 32
    width: int = 32
    channels: int = 1
    noise: float = 40.0
    base_classes: int = 10
    tasks: int = 10
    path: str = ""  # when set, load a container instead of synthesizing


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    cbp: CbpConfig = field(default_factory=CbpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    variant: VariantFlags = field(default_factory=VariantFlags)
    seed: int = 0
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        def section(name, klass, remap=None):
            raw = dict(doc.get(name, {}))
            for old, new in (remap or {}).items():
                if old in raw:
                    raw[new] = raw.pop(old)
            for key in ("g_layers", "e_layers"):
                if key in raw:
                    raw[key] = tuple(raw[key])
            return klass(**raw)

        train_raw = dict(doc.get("train", {}))
        if "lambda" in train_raw:
            train_raw["lam"] = train_raw.pop("lambda")
        return cls(
            backbone=section("backbone", BackboneConfig),
            prompts=section("prompts", PromptConfig),
            cbp=section("cbp", CbpConfig),
            train=TrainConfig(**train_raw),
            data=section("data", DataConfig),
            variant=section("variant", VariantFlags),
            seed=int(doc.get("seed", 0)),
            pretrain_epochs=int(doc.get("pretrain_epochs", 10)),
            pretrain_lr=float(doc.get("pretrain_lr", 1e-3)),
        )

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["train"]["lambda"] = doc["train"].pop("lam")
        doc["train"].pop("variant")
        return doc

    def with_variant(self, flags: VariantFlags) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, variant=flags,
                       train=TrainConfig(self.train.epochs, self.train.batch,
                                         self.train.lr, self.train.lam,
                                         self.train.seed, flags))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, seed=int(seed))


# --- optimizer ---------------------------------------------------------------


class AdamState:
    """Adam with bias correction; moments and step counts keyed by name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, scales: dict | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.scales = dict(scales or {})  # name prefix -> lr multiplier
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def _lr_for(self, name: str) -> float:
        for prefix, scale in self.scales.items():
            if name.startswith(prefix):
                return self.lr * scale
        return self.lr

    def _ensure(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
            self.t[name] = 0

    def step(self, params: dict):
        for name in sorted(params):
            p = params[name]
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericDomainError(f"non-finite gradient for {name}")
            self._ensure(name, p.data)
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1**t)
            vhat = self.v[name] / (1 - self.beta2**t)
            p.data -= self._lr_for(name) * mhat / (np.sqrt(vhat) + self.eps)

    def zero_slice(self, name: str, idx):
        if name in self.m:
            self.m[name][idx] = 0.0
            self.v[name][idx] = 0.0


def adam_step(params: dict, state: AdamState):
    state.step(params)


# --- classification head -----------------------------------------------------


class Head:
    """Growing linear head; one weight segment per task keeps ranges explicit."""

    def __init__(self, dim: int):
        self.dim = dim
        self.segments: list = []  # (w Tensor dim x k, b Tensor k)
        self.ranges: list = []  # (start, end) per task

    @property
    def total_classes(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0

    def add_task(self, n_classes: int, rng: Rng) -> tuple:
        if n_classes < 1:
            raise ConfigError("a task needs at least one class")
        w = Tensor(sample(InitSpec("normal-scaled", 1.0), rng, self.dim,
                          self.dim * n_classes).reshape(self.dim, n_classes),
                   trainable=True)
        b = Tensor(np.zeros(n_classes), trainable=True)
        start = self.total_classes
        self.segments.append((w, b))
        self.ranges.append((start, start + n_classes))
        return self.ranges[-1]

    def forward(self, z: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [z @ w.data + b.data for w, b in self.segments], axis=1
        )

    def backward(self, z: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        dz = np.zeros_like(z)
        for (w, b), (start, end) in zip(self.segments, self.ranges):
            dseg = dlogits[:, start:end]
            w.grad += z.T @ dseg
            b.grad += dseg.sum(axis=0)
            dz += dseg @ w.data.T
        return dz

    def task_params(self, task: int) -> dict:
        w, b = self.segments[task]
        return {f"head/{task}/w": w, f"head/{task}/b": b}

    def all_params(self) -> dict:
        out = {}
        for t in range(len(self.segments)):
            out.update(self.task_params(t))
        return out


# --- losses -------------------------------------------------------------------


def classification_loss(logits: np.ndarray, labels: np.ndarray, class_range=None):
    """Cross entropy, optionally masked to the current task's class range.

    Masked logits are -inf before the softmax, so their probabilities and
    gradients are exactly zero. Returns (loss, dlogits).
    """
    b, c = logits.shape
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError(f"label outside [0, {c})")
    masked = logits
    if class_range is not None:
        start, end = class_range
        if np.any(labels < start) or np.any(labels >= end):
            raise DataError(f"label outside current task range [{start}, {end})")
        masked = np.full_like(logits, -np.inf)
        masked[:, start:end] = logits[:, start:end]
    probs = softmax_array(masked, axis=-1)
    rows = np.arange(b)
    loss = float(-np.log(np.maximum(probs[rows, labels], 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def combined_loss(logits, labels, queries, key, lam, class_range):
    """Masked cross entropy plus lam * batch-mean key-matching loss.

    Returns (total, dlogits, dkey). dkey is None when key is None.
    """
    ce, dlogits = classification_loss(logits, labels, class_range)
    if key is None:
        return ce, dlogits, None
    match = 0.0
    dkey = np.zeros_like(key.data)
    for q in queries:
        m, dk = matching_loss(q, key)
        match += m
        dkey += dk
    match /= len(queries)
    dkey /= len(queries)
    return ce + lam * match, dlogits, lam * dkey


# --- model --------------------------------------------------------------------


class ContinualModel:
    """Backbone + optional prompts + optional re-init block + growing head."""

    def __init__(self, cfg: ExperimentConfig):
        rng = Rng(cfg.seed)
        self.cfg = cfg
        self.store = FrozenStore(cfg.backbone, rng.child("backbone"))
        self.backbone = Backbone(self.store)
        flags = cfg.variant
        self.flags = flags
        dim = cfg.backbone.dim
        if flags.use_prompts:
            self.g_prompt = GPrompt.create(cfg.prompts.g_length, dim,
                                           cfg.prompts.g_layers, rng.child("gprompt"))
            self.pool = EPromptPool(cfg.prompts.e_length, dim, cfg.prompts.e_layers)
        else:
            self.g_prompt = None
            self.pool = None
        if flags.use_cbp:
            self.block = EfficientCBPBlock(
                dim, cfg.cbp.resolve_hidden(dim), dim,
                eta=cfg.cbp.eta, maturity=cfg.cbp.m, rho=cfg.cbp.rho,
                rng=rng.child("cbp"), sum_abs_outgoing=cfg.cbp.sum_abs_outgoing,
            )
            # The block feeds the head through a residual path (see train_task).
            # Zeroing its output layer makes that path an exact identity at
            # start, so enabling the block never degrades the initial function.
            self.block.w_out.data[...] = 0.0
        else:
            self.block = None
        self.head = Head(dim)
        self.rng = rng
        self.reinit_rng = rng.child("reinit")
        self.adam: AdamState | None = None

    # -- parameter plumbing

    def register_task(self, task: int, n_classes: int):
        if self.pool is not None:
            self.pool.add_task(self.rng.child("eprompt", task))
        self.head.add_task(n_classes, self.rng.child("head", task))

    def trainable_params(self, task: int) -> dict:
        params = dict(self.head.task_params(task))
        if self.flags.use_prompts:
            params.update(self.g_prompt.params())
            params.update(self.pool.task_params(task))
        if self.flags.use_cbp:
            params.update(self.block.params())
        if not self.flags.freeze_backbone:
            params.update(self.store.trainable())
        return params

    def zero_grads(self, params: dict):
        for p in params.values():
            p.zero_grad()
        if self.flags.freeze_backbone:
            self.store.zero_grad()

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (np.asarray(images, dtype=np.float64) / 255.0 - 0.5) / 0.5


def train_task(model: ContinualModel, images: np.ndarray, labels: np.ndarray,
               task: int, cfg: TrainConfig) -> list:
    """One task's optimization loop; returns per-epoch mean losses."""
    if len(images) == 0:
        raise DataError("empty task data")
    if model.adam is None:
        scales = {"cbp/": model.cfg.cbp.lr_scale} if model.flags.use_cbp else {}
        model.adam = AdamState(cfg.lr, scales=scales)
    adam = model.adam
    flags = model.flags
    params = model.trainable_params(task)
    class_range = model.head.ranges[task]
    shuffle = model.rng.child("shuffle", task)
    all_queries = None
    if flags.use_prompts and model.store.is_frozen():
        # frozen backbone: query vectors are constant, compute them once
        all_queries = np.concatenate([
            model.backbone.query_vector(model.normalize(images[lo:lo + cfg.batch]))
            for lo in range(0, len(images), cfg.batch)
        ])
    traces = []
    for epoch in range(cfg.epochs):
        order = shuffle.gen.permutation(len(images))
        epoch_losses = []
        for lo in range(0, len(images), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            batch = model.normalize(images[idx])
            batch_labels = labels[idx]
            if flags.use_prompts:
                if all_queries is not None:
                    queries = all_queries[idx]
                else:
                    queries = model.backbone.query_vector(batch)
                prompt_map = assemble(model.g_prompt, model.pool, task)
                key = model.pool.entries[task].key
            else:
                queries, prompt_map, key = None, {}, None
            pooled, cache = model.backbone.forward(batch, prompt_map)
            if flags.use_cbp:
                # residual wiring: the block refines the feature rather
                # than replacing it, so its bottleneck cannot lose information
                delta, bcache = model.block.forward(pooled, training=True)
                z = pooled + delta
            else:
                z = pooled
            logits = model.head.forward(z)
            total, dlogits, dkey = combined_loss(
                logits, batch_labels, queries, key, cfg.lam, class_range
            )
            if not np.isfinite(total):
                raise NumericDomainError(
                    f"loss diverged (task {task}, epoch {epoch}): {total}"
                )
            model.zero_grads(params)
            dz = model.head.backward(z, dlogits)
            if flags.use_cbp:
                dpooled = dz + model.block.backward(bcache, dz)
            else:
                dpooled = dz
            model.backbone.backward(cache, dpooled)
            if dkey is not None:
                key.grad += dkey
            adam.step(params)
            if flags.use_cbp:
                model.block.update_utility()
                model.block.cbp_step(model.reinit_rng, adam=adam)
            epoch_losses.append(total)
        traces.append(float(np.mean(epoch_losses)))
    return traces


def evaluate(model: ContinualModel, images: np.ndarray, labels: np.ndarray,
             pool: EPromptPool | None = None) -> float:
    """Class-incremental accuracy: key-selected prompts, head over all classes."""
    if len(images) == 0:
        raise DataError("empty test set")
    pool = pool if pool is not None else model.pool
    batch = model.normalize(images)
    preds = np.empty(len(images), dtype=np.int64)
    if model.flags.use_prompts and pool is not None and len(pool) > 0:
        queries = model.backbone.query_vector(batch)
        selected = np.array([select_eprompt(q, pool) for q in queries])
        for t in np.unique(selected):
            idx = np.flatnonzero(selected == t)
            prompt_map = assemble(model.g_prompt, pool, int(t))
            pooled, _ = model.backbone.forward(batch[idx], prompt_map)
            z = (pooled + model.block.forward(pooled)[0]
                 if model.flags.use_cbp else pooled)
            preds[idx] = np.argmax(model.head.forward(z), axis=1)
    else:
        pooled, _ = model.backbone.forward(batch, {})
        z = (pooled + model.block.forward(pooled)[0]
             if model.flags.use_cbp else pooled)
        preds = np.argmax(model.head.forward(z), axis=1)
    return float(np.mean(preds == np.asarray(labels)))


# --- pretraining and full sequences --------------------------------------------


def pretrain_backbone(cfg: ExperimentConfig, train_images, train_labels,
                      n_classes: int) -> FrozenStore:
    """Supervised warm-up of the backbone on base classes; head is discarded.

    Depends only on (seed, backbone config, data), never on variant flags,
    so every variant of one seed shares an identical checkpoint.
    """
    rng = Rng(cfg.seed)
    store = FrozenStore(cfg.backbone, rng.child("backbone"))
    backbone = Backbone(store)
    head = Head(cfg.backbone.dim)
    head.add_task(n_classes, rng.child("pretrain-head"))
    adam = AdamState(cfg.pretrain_lr)
    params = dict(store.trainable())
    params.update(head.task_params(0))
    shuffle = rng.child("pretrain-shuffle")
    norm = lambda x: (np.asarray(x, dtype=np.float64) / 255.0 - 0.5) / 0.5
    for _ in range(cfg.pretrain_epochs):
        order = shuffle.gen.permutation(len(train_images))
        for lo in range(0, len(train_images), cfg.train.batch):
            idx = order[lo:lo + cfg.train.batch]
            batch = norm(train_images[idx])
            pooled, cache = backbone.forward(batch, {})
            logits = head.forward(pooled)
            loss, dlogits = classification_loss(logits, train_labels[idx])
            if not np.isfinite(loss):
                raise NumericDomainError("pretraining loss diverged")
            for p in params.values():
                p.zero_grad()
            dz = head.backward(pooled, dlogits)
            backbone.backward(cache, dz)
            adam.step(params)
    return store


def _prepare_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.path:
        ds = load_container(d.path)
    else:
        ds = generate_synthetic(d.classes, d.per_class, (d.height, d.width, d.channels),
                                seed=cfg.seed * 1_000_003 + 17, noise=d.noise)
    return split_class_incremental(ds, d.base_classes, d.tasks,
                                   seed=cfg.seed * 7_919 + 101)


def run_sequence(cfg: ExperimentConfig,
                 pretrained: dict | None = None) -> AccuracyMatrix:
    """Train tasks in order, evaluating on all earlier tasks after each one."""
    split = _prepare_data(cfg)
    model = ContinualModel(cfg)
    if split.base_train is not None:
        if pretrained is not None:
            for name, arr in pretrained.items():
                model.store.params[name].data[...] = arr
        else:
            base_images, base_labels = split.base_train
            local = _map_labels(base_labels, split.spec.base_classes)
            store = pretrain_backbone(cfg, base_images, local,
                                      len(split.spec.base_classes))
            for name, t in store.params.items():
                model.store.params[name].data[...] = t.data
    if cfg.variant.freeze_backbone:
        model.store.freeze_all()

    t_count = len(split.tasks)
    matrix = AccuracyMatrix(t_count)
    class_maps = []
    train_cfg = TrainConfig(cfg.train.epochs, cfg.train.batch, cfg.train.lr,
                            cfg.train.lam, cfg.seed, cfg.variant)
    offset = 0
    for i, ((tr_images, tr_labels), _) in enumerate(split.tasks):
        classes = split.spec.task_classes[i]
        class_maps.append({c: offset + j for j, c in enumerate(classes)})
        offset += len(classes)
        model.register_task(i, len(classes))
        mapped = np.array([class_maps[i][c] for c in tr_labels])
        train_task(model, tr_images, mapped, i, train_cfg)
        for t in range(i + 1):
            te_images, te_labels = split.tasks[t][1]
            mapped_te = np.array([class_maps[t][c] for c in te_labels])
            matrix.set(i, t, evaluate(model, te_images, mapped_te))
    return matrix


def _map_labels(labels, classes):
    table = {c: j for j, c in enumerate(classes)}
    return np.array([table[c] for c in labels])


def plasticity_probe(cfg: ExperimentConfig, seeds) -> dict:
    """Just-learned accuracy curves a[i][i] for matched runs with the block
    enabled vs disabled; pretraining is shared per seed."""
    if cfg.data.tasks < 10:
        raise ConfigError("plasticity probe needs a long sequence (T >= 10)")
    on_flags = VariantFlags(use_prompts=True, use_cbp=True, freeze_backbone=True)
    off_flags = VariantFlags(use_prompts=True, use_cbp=False, freeze_backbone=True)
    curves = {"cbp-on": [], "cbp-off": []}
    checksums = []
    for seed in seeds:
        seed_cfg = cfg.with_seed(seed)
        pre = _shared_pretrain(seed_cfg)
        checksums.append(_tensors_checksum(pre) if pre is not None else "")
        for label, flags in (("cbp-on", on_flags), ("cbp-off", off_flags)):
            mx = run_sequence(seed_cfg.with_variant(flags), pretrained=pre)
            curves[label].append([mx.get(i, i) for i in range(mx.size)])
    return {"curves": curves, "pretrain_checksums": checksums}


def _shared_pretrain(cfg: ExperimentConfig):
    split = _prepare_data(cfg)
    if split.base_train is None:
        return None
    base_images, base_labels = split.base_train
    local = _map_labels(base_labels, split.spec.base_classes)
    store = pretrain_backbone(cfg, base_images, local, len(split.spec.base_classes))
    return {name: t.data.copy() for name, t in store.params.items()}


def _tensors_checksum(tensors: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()


# --- parameter accounting -------------------------------------------------------


def count_trainable(cfg: ExperimentConfig) -> dict:
    """Trainable-parameter breakdown by pure arithmetic from the config."""
    d = cfg.backbone.dim
    backbone = cfg.backbone.param_count()
    p = cfg.prompts
    g = 2 * len(p.g_layers) * p.g_length * d
    e_per_task = 2 * len(p.e_layers) * p.e_length * d
    tasks = cfg.data.tasks
    keys = tasks * d
    hidden = cfg.cbp.resolve_hidden(d)
    cbp = (d * hidden + hidden) + (hidden * hidden + hidden) + (hidden * d + d)
    if not cfg.variant.use_cbp:
        cbp = 0
    if not cfg.variant.use_prompts:
        g = e_per_task = keys = 0
    continual_classes = cfg.data.classes - cfg.data.base_classes
    head = d * continual_classes + continual_classes
    active = g + e_per_task + keys + cbp + head
    return {
        "backbone": backbone,
        "g_prompt": g,
        "e_prompt_per_task": e_per_task,
        "keys": keys,
        "cbp_block": cbp,
        "head": head,
        "active_per_task": active,
        "active_ratio": active / backbone,
    }


def vitb16_config() -> ExperimentConfig:
    """Full-scale parameter-counting configuration (no weights allocated)."""
    return ExperimentConfig(
        backbone=BackboneConfig(image_size=224, patch_size=16, channels=3,
                                depth=12, dim=768, heads=12, mlp_ratio=4.0),
        prompts=PromptConfig(g_length=5, e_length=5, g_layers=(0, 1),
                             e_layers=(2, 3, 4)),
        cbp=CbpConfig(hidden=24),
        data=DataConfig(classes=100, base_classes=0, tasks=10),
    )
