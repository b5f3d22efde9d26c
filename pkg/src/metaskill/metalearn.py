"""ProtoNet, first-order MAML, and ProtoMAML learners with their training loop.

The inner loop is plain SGD on the support loss; the outer loop sums
first-order query gradients over an episode batch and applies one Adam
step. ProtoMAML builds its episode head from support prototypes
(W_c = 2 v_c, b_c = -||v_c||^2) and discards it after the episode, so only
the query-loss gradient at the adapted backbone flows back.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import seqnet
from .diffcore import Parameter
from .episodes import Episode, TaskDataset, pad_batch, sample_episode
from .seeds import derive_seed
from .seqnet import BackboneConfig, Head

LEARNER_KINDS = ("protonet", "maml", "protomaml")

CHECKPOINT_MAGIC = b"MSKL1"


@dataclass(frozen=True)
class InnerLoopConfig:
    inner_lr: float = 0.1
    train_updates: int = 1
    test_updates: int = 20
    # global-norm cap on support gradients; inactive once the support
    # posterior is confident, it bounds feature drift during long
    # test-time adaptation on a handful of samples
    clip_norm: float = 0.3

    def __post_init__(self):
        if self.inner_lr <= 0 or self.train_updates < 0 or self.test_updates < 0:
            raise ValueError("inner loop config out of range")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


@dataclass(frozen=True)
class OuterLoopConfig:
    outer_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sched_factor: float = 0.6
    sched_patience: int = 10
    min_epochs: int = 40
    stop_patience: int = 10
    meta_batch_size: int = 8

    def __post_init__(self):
        if min(self.outer_lr, self.beta1, self.beta2, self.eps, self.sched_factor) <= 0:
            raise ValueError("outer loop rates must be positive")


@dataclass
class PrototypeSet:
    vectors: np.ndarray  # (C, d_out)
    classes: list[int]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.classes) != self.vectors.shape[0]:
            raise ValueError("prototype vectors and class order disagree")
        if len(self.classes) < 2:
            raise ValueError("need prototypes for at least 2 classes")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite prototype")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, Parameter]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.value) for k, p in params.items()},
                   v={k: np.zeros_like(p.value) for k, p in params.items()})


@dataclass
class AdaptedModel:
    """Episode-local state produced by inner adaptation."""

    kind: str
    config: BackboneConfig
    params: dict[str, Parameter]
    prototypes: PrototypeSet | None = None
    inner_graphs: list = field(default_factory=list)

    def head(self) -> Head | None:
        if "head.weight" not in self.params:
            return None
        return Head(self.params["head.weight"].value, self.params["head.bias"].value)

    def posterior(self, sequences: list[np.ndarray]) -> np.ndarray:
        batch, masks = pad_batch(sequences)
        emb = seqnet.embed_sequences(self.config, self.params, batch, masks)
        if self.kind == "protonet":
            return protonet_posterior(emb, self.prototypes)
        return _stable_softmax(seqnet.head_logits(emb, self.head()))


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def compute_prototypes(embeddings: np.ndarray, labels, n_classes: int | None = None) -> PrototypeSet:
    """Per-class mean of support embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    classes = list(range(n_classes)) if n_classes is not None else sorted(set(labels.tolist()))
    vectors = []
    for c in classes:
        rows = embeddings[labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"no support samples for class {c}")
        vectors.append(rows.mean(axis=0))
    return PrototypeSet(vectors=np.stack(vectors), classes=classes)


def init_head(prototypes: PrototypeSet) -> Head:
    """Prototype-derived linear head: W_c = 2 v_c, b_c = -||v_c||^2."""
    v = prototypes.vectors
    return Head(weights=2.0 * v, bias=-np.sum(v * v, axis=1))


def protonet_posterior(embeddings: np.ndarray, prototypes: PrototypeSet) -> np.ndarray:
    """Softmax over negative squared Euclidean distances to the prototypes."""
    e = np.asarray(embeddings, dtype=np.float64)
    v = prototypes.vectors
    d2 = (e * e).sum(axis=1)[:, None] + (v * v).sum(axis=1)[None, :] - 2.0 * (e @ v.T)
    return _stable_softmax(-d2)


def sgd_step(params: dict[str, Parameter], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, Parameter]:
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None or not p.trainable:
            out[name] = p.copy()
        else:
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.value.shape}")
            out[name] = Parameter(name, p.value - lr * g, p.trainable)
    return out


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Parameter], AdamState]:
    """Bias-corrected Adam update; missing gradients count as zero."""
    t = state.step + 1
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps) if p.trainable else p.value.copy()
        out[name] = Parameter(name, value, p.trainable)
        new_m[name], new_v[name] = m, v
    return out, AdamState(m=new_m, v=new_v, step=t)


def init_meta_params(config: BackboneConfig, kind: str, seed: int,
                     n_classes: int | None = None) -> dict[str, Parameter]:
    """Backbone parameters, plus a meta-learned head for plain fo-MAML."""
    if kind not in LEARNER_KINDS:
        raise ValueError(f"unknown learner kind {kind!r}; expected one of {LEARNER_KINDS}")
    _, params = seqnet.build_backbone(config.d_in, seed, config.se_reduction)
    if kind == "maml":
        if n_classes is None:
            raise ValueError("fo-MAML needs a fixed class count for its meta head")
        rng = np.random.default_rng(derive_seed(seed, "maml-head"))
        limit = np.sqrt(6.0 / config.d_out)
        params["head.weight"] = Parameter(
            "head.weight", rng.uniform(-limit, limit, size=(n_classes, config.d_out)))
        params["head.bias"] = Parameter("head.bias", np.zeros(n_classes))
    return params


def _episode_loss(config: BackboneConfig, params: dict[str, Parameter],
                  sequences: list[np.ndarray], labels: np.ndarray) -> dc.GraphNode:
    """Cross-entropy of the linear head over a padded batch (head in params)."""
    batch, masks = pad_batch(sequences)
    leaves = dc.make_leaves(params)
    emb = seqnet.forward_embed(config, leaves, batch, masks)
    logits = dc.dense(emb, leaves["head.weight"], leaves["head.bias"])
    return dc.softmax_cross_entropy(logits, labels)


def _protonet_episode_loss(config: BackboneConfig, params: dict[str, Parameter],
                           episode: Episode, n_classes: int) -> dc.GraphNode:
    """One graph embedding support and query so prototype gradients flow."""
    sup_seqs, sup_labels = episode.support_arrays()
    qry_seqs, qry_labels = episode.query_arrays()
    leaves = dc.make_leaves(params)
    sup_batch, sup_masks = pad_batch(sup_seqs)
    qry_batch, qry_masks = pad_batch(qry_seqs)
    sup_emb = seqnet.forward_embed(config, leaves, sup_batch, sup_masks)
    qry_emb = seqnet.forward_embed(config, leaves, qry_batch, qry_masks)
    averager = np.zeros((n_classes, len(sup_seqs)))
    for c in range(n_classes):
        members = sup_labels == c
        if not members.any():
            raise ValueError(f"episode from {episode.task!r} lacks support for class {c}")
        averager[c, members] = 1.0 / members.sum()
    protos = dc.matmul(dc.constant(averager), sup_emb)
    logits = dc.neg(dc.pairwise_sqdist(qry_emb, protos))
    return dc.softmax_cross_entropy(logits, qry_labels)


def inner_adapt(config: BackboneConfig, meta_params: dict[str, Parameter],
                support: list, inner_cfg: InnerLoopConfig, kind: str,
                n_updates: int | None = None, n_classes: int | None = None,
                keep_graphs: bool = False) -> AdaptedModel:
    """Task adaptation on the support set; meta parameters are untouched.

    ProtoMAML first builds its head from support prototypes, then takes
    n_updates SGD steps on the support loss through backbone and head.
    ProtoNet's adaptation is the prototype computation itself (no gradient
    steps). Plain fo-MAML updates its meta-learned head like any parameter.
    """
    if not support:
        raise ValueError("inner_adapt needs a non-empty support set")
    if kind not in LEARNER_KINDS:
        raise ValueError(f"unknown learner kind {kind!r}")
    if n_updates is None:
        n_updates = inner_cfg.train_updates
    sequences = [t.sequence for t in support]
    labels = np.array([t.label for t in support])
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    params = dc.clone_params(meta_params)

    if kind == "protonet":
        batch, masks = pad_batch(sequences)
        emb = seqnet.embed_sequences(config, params, batch, masks)
        protos = compute_prototypes(emb, labels, n_classes)
        return AdaptedModel(kind=kind, config=config, params=params, prototypes=protos)

    if kind == "protomaml":
        batch, masks = pad_batch(sequences)
        emb = seqnet.embed_sequences(config, params, batch, masks)
        head = init_head(compute_prototypes(emb, labels, n_classes))
        params["head.weight"] = Parameter("head.weight", head.weights)
        params["head.bias"] = Parameter("head.bias", head.bias)
    elif "head.weight" not in params:
        raise ValueError("fo-MAML meta parameters are missing the head")

    adapted = AdaptedModel(kind=kind, config=config, params=params)
    for _ in range(n_updates):
        loss = _episode_loss(config, adapted.params, sequences, labels)
        grads = dc.backward(loss)
        adapted.params = sgd_step(adapted.params, _clip_global_norm(grads, inner_cfg.clip_norm),
                                  inner_cfg.inner_lr)
        if keep_graphs:
            adapted.inner_graphs.append(loss)
    return adapted


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}


def query_gradients(config: BackboneConfig, adapted: AdaptedModel, episode: Episode,
                    n_classes: int) -> tuple[dict[str, np.ndarray], float]:
    """First-order outer gradients: query loss differentiated at the adapted
    parameters only, never through the inner loop."""
    qry_seqs, qry_labels = episode.query_arrays()
    if not qry_seqs:
        raise ValueError(f"episode from {episode.task!r} has an empty query set")
    loss = _episode_loss(config, adapted.params, qry_seqs, qry_labels)
    grads = dc.backward(loss)
    if adapted.kind == "protomaml":
        # episode-local head: its own gradient is discarded with it
        grads.pop("head.weight", None)
        grads.pop("head.bias", None)
    return grads, float(loss.value)


def outer_step(config: BackboneConfig, meta_params: dict[str, Parameter],
               adam_state: AdamState, episodes: list[Episode],
               inner_cfg: InnerLoopConfig, outer_cfg: OuterLoopConfig, kind: str,
               lr: float | None = None) -> tuple[dict[str, Parameter], AdamState, float]:
    """Adapt on each episode's support, sum the first-order query gradients
    across the batch, and apply a single Adam step to the meta parameters."""
    if not episodes:
        raise ValueError("outer_step needs a non-empty episode batch")
    if lr is None:
        lr = outer_cfg.outer_lr
    grad_sum: dict[str, np.ndarray] = {name: np.zeros_like(p.value)
                                       for name, p in meta_params.items()}
    total_loss = 0.0
    for episode in episodes:
        labels = [t.label for t in episode.support] + [t.label for t in episode.query]
        n_classes = int(max(labels)) + 1
        if kind == "protonet":
            loss = _protonet_episode_loss(config, meta_params, episode, n_classes)
            grads = dc.backward(loss)
            total_loss += float(loss.value)
        else:
            adapted = inner_adapt(config, meta_params, episode.support, inner_cfg, kind,
                                  n_updates=inner_cfg.train_updates, n_classes=n_classes)
            grads, loss_value = query_gradients(config, adapted, episode, n_classes)
            total_loss += loss_value
        for name, g in grads.items():
            if name in grad_sum:
                grad_sum[name] += g
    new_params, new_state = adam_step(meta_params, grad_sum, adam_state, lr,
                                      outer_cfg.beta1, outer_cfg.beta2, outer_cfg.eps)
    return new_params, new_state, total_loss / len(episodes)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float
    sampled_tasks: list[str]


def _validation_accuracy(config, params, task, k, seed, kind, inner_cfg, n_updates):
    try:
        _, metrics = adapt_and_evaluate(config, params, task, k=k, seed=seed, kind=kind,
                                        inner_cfg=inner_cfg, n_updates=n_updates)
    except ValueError:
        # validation task too small for this k; score with the floor shot count
        _, metrics = adapt_and_evaluate(config, params, task, k=1, seed=seed, kind=kind,
                                        inner_cfg=inner_cfg, n_updates=n_updates)
    return metrics["accuracy"]


def meta_train(config: BackboneConfig, sources: list[TaskDataset], val_task: TaskDataset,
               inner_cfg: InnerLoopConfig, outer_cfg: OuterLoopConfig, kind: str, seed: int,
               max_epochs: int | None = None, val_draws: int = 5,
               val_k: int = 1) -> tuple[dict[str, Parameter], list[EpochRecord]]:
    """Episodic meta-training with validation-driven scheduling.

    Each epoch runs enough 8-episode outer steps to see roughly the source
    data once, then scores k=1 adaptation accuracy on the validation task
    (mean of ``val_draws`` seeded draws, train-time update count). The
    learning rate is factored by 0.6 after ``sched_patience`` epochs without
    improvement; training stops once ``min_epochs`` have run and
    ``stop_patience`` epochs bring no improvement. Returns the parameters
    of the best validation epoch. ``max_epochs`` is a hard cap meant for
    desk-scale runs; the reference protocol trains at least 40 epochs.
    """
    if not sources:
        raise ValueError("meta_train needs at least one source task")
    n_classes = sources[0].n_classes
    if kind == "maml":
        widths = {t.n_classes for t in sources} | {val_task.n_classes}
        if len(widths) != 1:
            raise ValueError(f"fo-MAML needs one class count across tasks, got {sorted(widths)}")
    params = init_meta_params(config, kind, derive_seed(seed, "init"), n_classes=n_classes)
    adam = AdamState.zeros(params)
    rng = np.random.default_rng(derive_seed(seed, "episodes"))
    lr = outer_cfg.outer_lr

    total_trials = sum(len(t.trials) for t in sources)
    mean_episode = np.mean([t.min_class_size() * t.n_classes for t in sources])
    batches_per_epoch = max(1, int(np.ceil(total_trials / (mean_episode * outer_cfg.meta_batch_size))))

    best_acc = -np.inf
    best_params = dc.clone_params(params)
    stale = 0
    sched_stale = 0
    history: list[EpochRecord] = []
    epoch = 0
    while True:
        epoch += 1
        epoch_loss = 0.0
        sampled: list[str] = []
        for _ in range(batches_per_epoch):
            episodes = []
            for _ in range(outer_cfg.meta_batch_size):
                task = sources[int(rng.integers(len(sources)))]
                sampled.append(task.name)
                episodes.append(sample_episode(task, task.min_class_size(), seed=rng))
            params, adam, batch_loss = outer_step(config, params, adam, episodes,
                                                  inner_cfg, outer_cfg, kind, lr=lr)
            epoch_loss += batch_loss
        val_acc = float(np.mean([
            _validation_accuracy(config, params, val_task, val_k,
                                 derive_seed(seed, "val", epoch, draw), kind,
                                 inner_cfg, inner_cfg.train_updates)
            for draw in range(val_draws)]))
        history.append(EpochRecord(epoch=epoch, train_loss=epoch_loss / batches_per_epoch,
                                   val_accuracy=val_acc, lr=lr, sampled_tasks=sampled))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = dc.clone_params(params)
            stale = 0
            sched_stale = 0
        else:
            stale += 1
            sched_stale += 1
        if max_epochs is not None and epoch >= max_epochs:
            break
        if epoch >= outer_cfg.min_epochs and stale >= outer_cfg.stop_patience:
            break
        if sched_stale >= outer_cfg.sched_patience:
            lr *= outer_cfg.sched_factor
            sched_stale = 0
    return best_params, history


def adapt_and_evaluate(config: BackboneConfig, params: dict[str, Parameter],
                       task: TaskDataset, k: int, seed: int, kind: str,
                       inner_cfg: InnerLoopConfig, n_updates: int | None = None):
    """k-shot adaptation on a target task, scored on all remaining samples.

    Draws k support trials per class (seeded), adapts with the test-time
    update count, and returns per-sample prediction records plus
    micro-averaged accuracy (and ROC-AUC for binary tasks, scoring the
    second class as positive).
    """
    from .metrics import PredictionRecord, micro_accuracy, roc_auc

    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = task.class_counts()
    for c, n in enumerate(counts):
        if n <= k:
            raise ValueError(
                f"task {task.name!r}: class {task.classes[c]!r} has {n} trials, "
                f"needs more than k={k}")
    if n_updates is None:
        n_updates = inner_cfg.test_updates
    rng = np.random.default_rng(seed)
    support, query = [], []
    for c in range(task.n_classes):
        idx = task.indices_of(c)
        order = rng.permutation(len(idx))
        support.extend(task.trials[idx[i]] for i in order[:k])
        query.extend(task.trials[idx[i]] for i in order[k:])
    adapted = inner_adapt(config, params, support, inner_cfg, kind,
                          n_updates=n_updates, n_classes=task.n_classes)
    probs = adapted.posterior([t.sequence for t in query])
    records = [PredictionRecord(softmax=probs[i], predicted=int(np.argmax(probs[i])),
                                actual=int(t.label))
               for i, t in enumerate(query)]
    metrics = {"accuracy": micro_accuracy(records), "n_support": len(support),
               "n_query": len(query), "auc": None}
    if task.n_classes == 2:
        labels = np.array([t.label for t in query])
        metrics["auc"] = roc_auc(probs[:, 1], labels == 1)
    return records, metrics


def save_checkpoint(path, config: BackboneConfig, params: dict[str, Parameter],
                    meta: dict | None = None) -> None:
    """Binary checkpoint: MSKL1 magic, JSON header, little-endian float64 blob."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        p = params[name]
        raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.value.shape),
                        "trainable": p.trainable, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(config), "meta": meta or {},
                         "params": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[BackboneConfig, dict[str, Parameter], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    cfg_doc = dict(header["config"])
    cfg_doc["filters"] = tuple(cfg_doc["filters"])
    cfg_doc["dilations"] = tuple(cfg_doc["dilations"])
    config = BackboneConfig(**cfg_doc)
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        params[entry["name"]] = Parameter(entry["name"], arr.astype(np.float64),
                                          entry["trainable"])
    return config, params, header["meta"]
