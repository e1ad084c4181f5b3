"""Adversarial meta-training of the small model.

Each epoch samples a batch of cross-system meta-tasks, then

1. steps the domain head down its BCE (it learns to tell source from target),
2. steps the anomaly head down the source classification BCE,
3. meta-updates the extractor: adapt a copy on every support set with the
   objective ``gamma * L_c - beta * L_ad``, take the same objective's
   gradient on the query set at the adapted weights (first-order), sum over
   tasks and step the shared extractor.

Heads stay frozen inside adaptation and the meta step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import neural
from .embedding import EventEmbedding
from .errors import (DivergedTask, EmptySequence, GeneralLogError, InsufficientData, MetaStepFailed,
                     NoLabels, NonFiniteError, OneDomainOnly, UnknownTemplate)

logger = logging.getLogger(__name__)

# domain loss of a head that cannot separate the two systems
ADV_CAP = math.log(2.0)


@dataclass
class TrainConfig:
    delta: float = 0.01
    alpha: float = 0.001
    beta: float = 0.1
    gamma: float = 1.0
    inner_steps: int = 1
    tasks_per_meta_batch: int = 4
    support_size: int = 32
    query_size: int = 32
    epochs: int = 100
    seed: int = 0
    head_lr: float = 0.05
    hidden: int = 64
    decision_threshold: float = 0.5
    cap_adversarial: bool = True

    def __post_init__(self):
        if not self.head_lr > 0:
            raise ValueError("head_lr must be positive")
        # zero rates/weights are allowed: they switch a term or an update off
        for name in ("delta", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.inner_steps < 1 or self.tasks_per_meta_batch < 1:
            raise ValueError("inner_steps and tasks_per_meta_batch must be at least 1")
        if self.support_size < 2 or self.query_size < 2:
            raise ValueError("support_size and query_size must be at least 2")
        if self.epochs < 0 or self.hidden < 1:
            raise ValueError("epochs must be >= 0 and hidden >= 1")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must lie in (0, 1)")


def sequence_matrix(template_ids: Sequence[int], embeddings: Mapping[int, EventEmbedding]) -> np.ndarray:
    """Model input for one sequence: its event vectors scaled to unit length (zero rows stay zero)."""
    if len(template_ids) == 0:
        raise EmptySequence("empty sequence")
    rows = []
    for tid in template_ids:
        emb = embeddings.get(tid)
        if emb is None:
            raise UnknownTemplate(tid)
        rows.append(emb.vector / emb.norm if emb.norm > 0 else emb.vector)
    return np.vstack(rows)


@dataclass
class DomainDataset:
    """Embedded source sequences with labels, and unlabelled target sequences."""

    source_x: list[np.ndarray]
    source_y: np.ndarray
    target_x: list[np.ndarray]

    def __post_init__(self):
        self.source_y = np.asarray(self.source_y, dtype=np.int64)
        if len(self.source_x) != len(self.source_y):
            raise ValueError("source inputs and labels differ in length")
        if len(self.source_y) and not set(np.unique(self.source_y)) <= {0, 1}:
            raise ValueError("source labels must be 0 or 1")

    @classmethod
    def from_sequences(cls, source, target, embeddings) -> "DomainDataset":
        return cls(
            [sequence_matrix(s.template_ids, embeddings) for s in source],
            [s.truth_label for s in source],
            [sequence_matrix(s.template_ids, embeddings) for s in target],
        )

    @property
    def d(self) -> int:
        return (self.source_x or self.target_x)[0].shape[1]


@dataclass
class Side:
    source: np.ndarray
    target: np.ndarray


@dataclass
class MetaTask:
    task_id: int
    support: Side
    query: Side
    unstratified: bool = False


def _stratified(rng, anomalies, normals, size, rate):
    n_anom = int(round(rate * size))
    if len(anomalies) and len(normals):
        n_anom = min(max(n_anom, 1), size - 1)
    n_anom = min(n_anom, len(anomalies))
    n_norm = size - n_anom
    if n_norm > len(normals):
        n_norm = len(normals)
        n_anom = min(size - n_norm, len(anomalies))
    picked = list(anomalies[:n_anom]) + list(normals[:n_norm])
    return np.array(sorted(picked), dtype=np.int64), anomalies[n_anom:], normals[n_norm:]


def sample_meta_task(data: DomainDataset, cfg: TrainConfig, rng: np.random.Generator, task_id: int = 0) -> MetaTask:
    """Stratified, disjoint support/query draw from the source; uniform draw from the target."""
    n_src = len(data.source_x)
    need = cfg.support_size + cfg.query_size
    if n_src < need:
        raise InsufficientData(f"source has {n_src} sequences, a task needs {need}")
    if not data.target_x:
        raise InsufficientData("target corpus is empty")
    y = data.source_y
    anomalies = rng.permutation(np.flatnonzero(y == 1))
    normals = rng.permutation(np.flatnonzero(y == 0))
    unstratified = len(anomalies) == 0 or len(normals) == 0
    if unstratified:
        logger.warning("task %d: source sample has a single class; proceeding unstratified", task_id)
    rate = len(anomalies) / n_src
    sup, anomalies, normals = _stratified(rng, anomalies, normals, cfg.support_size, rate)
    que, _, _ = _stratified(rng, anomalies, normals, cfg.query_size, rate)

    n_tgt = len(data.target_x)
    if n_tgt >= need:
        perm = rng.permutation(n_tgt)
        t_sup, t_que = perm[: cfg.support_size], perm[cfg.support_size : need]
    else:
        t_sup = rng.choice(n_tgt, size=min(cfg.support_size, n_tgt), replace=False)
        t_que = rng.choice(n_tgt, size=min(cfg.query_size, n_tgt), replace=False)
    return MetaTask(
        task_id,
        Side(sup, np.sort(t_sup)),
        Side(que, np.sort(t_que)),
        unstratified,
    )


def side_batch(data: DomainDataset, side: Side):
    """Batch, anomaly labels (-1 for target items) and domain labels (0 source, 1 target)."""
    seqs = [data.source_x[i] for i in side.source] + [data.target_x[i] for i in side.target]
    labels = np.concatenate([data.source_y[side.source], -np.ones(len(side.target), dtype=np.int64)])
    domains = np.concatenate([np.zeros(len(side.source)), np.ones(len(side.target))])
    return neural.make_batch(seqs), labels, domains


def domain_loss(data: DomainDataset, side: Side, params) -> float:
    if len(side.source) == 0 or len(side.target) == 0:
        raise OneDomainOnly("domain loss needs both source and target sequences")
    batch, labels, domains = side_batch(data, side)
    value, _ = neural.objective(params, batch, labels, domains, 0.0, 1.0, wrt=())
    return value.domain_loss


def class_loss(data: DomainDataset, side: Side, params) -> float:
    if len(side.source) == 0:
        raise NoLabels("no labelled source sequences in this set")
    batch, labels, domains = side_batch(data, side)
    value, _ = neural.objective(params, batch, labels, domains, 1.0, 0.0, wrt=())
    return value.class_loss


def task_objective(data, side: Side, params, cfg: TrainConfig, wrt=neural.EXTRACTOR_NAMES):
    """``gamma * L_c - beta * min(L_ad, ln 2)`` on one side of a task, with gradients.

    ``ln 2`` is the domain loss of a head that cannot tell the systems apart,
    so the extractor gains nothing by pushing ``L_ad`` past it.  Without the
    cap ``-beta * L_ad`` is unbounded below and training can run away.
    """
    batch, labels, domains = side_batch(data, side)
    return neural.objective(params, batch, labels, domains, cfg.gamma, -cfg.beta, wrt=wrt,
                            domain_cap=ADV_CAP if cfg.cap_adversarial else None)


def inner_adapt(params, task: MetaTask, data: DomainDataset, cfg: TrainConfig) -> neural.Params:
    """Adapted copy of the parameters after ``cfg.inner_steps`` steps on the support set."""
    adapted = dict(params)
    for _ in range(cfg.inner_steps):
        try:
            value, grads = task_objective(data, task.support, adapted, cfg)
        except NonFiniteError as exc:
            raise DivergedTask(task.task_id) from exc
        adapted = neural.sgd_step(adapted, grads, cfg.delta)
    return adapted


def meta_gradient(params, tasks: Sequence[MetaTask], data: DomainDataset, cfg: TrainConfig):
    """Summed first-order meta-gradient over ``tasks`` and the summed query objective."""
    total = None
    objective_sum = 0.0
    ok = 0
    for task in tasks:
        try:
            adapted = inner_adapt(params, task, data, cfg)
            value, grads = task_objective(data, task.query, adapted, cfg)
        except (DivergedTask, NonFiniteError) as exc:
            logger.warning("skipping meta-task %d: %s", task.task_id, exc)
            continue
        total = neural.add_grads(total, grads)
        objective_sum += value.total
        ok += 1
    if ok == 0:
        raise MetaStepFailed(f"all {len(tasks)} meta-tasks diverged")
    return total, objective_sum


def meta_step(params, tasks: Sequence[MetaTask], data: DomainDataset, cfg: TrainConfig) -> neural.Params:
    grads, _ = meta_gradient(params, tasks, data, cfg)
    return neural.sgd_step(params, grads, cfg.alpha)


@dataclass
class EpochLog:
    epoch: int
    class_loss: float
    domain_loss: float
    meta_objective: float


@dataclass
class TrainedModel:
    params: neural.Params
    d: int
    h: int
    config: TrainConfig
    decision_threshold: float = 0.5
    history: list[EpochLog] = field(default_factory=list)

    def save(self, path) -> None:
        neural.write_checkpoint(path, self.params, self.config.seed,
                                {"meta.decision_threshold": np.array([self.decision_threshold])})

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "TrainedModel":
        tensors, seed = neural.read_checkpoint(path)
        threshold = float(tensors.pop("meta.decision_threshold", np.array([0.5]))[0])
        neural.check_shapes(tensors)
        d, h = neural.dims(tensors)
        cfg = config or TrainConfig(seed=seed, hidden=h, decision_threshold=threshold)
        return cls(tensors, d, h, cfg, threshold)


def _summed_domain_loss(reps, domains, w, b) -> float:
    return sum(float(neural.bce_with_logits(r @ w + b[0], y).mean()) for r, y in zip(reps, domains))


def head_step(params, tasks: Sequence[MetaTask], data: DomainDataset, cfg: TrainConfig, max_halvings: int = 30):
    """One descent step for each head on the summed support-set losses.

    The domain head descends ``L_ad`` (it learns to tell the systems apart);
    the anomaly head descends ``L_c``.  The domain step is halved until it
    does not increase the summed ``L_ad`` of the batch it was computed on;
    features are fixed during a head step, so each retry is a dot product.
    Returns the new parameters and the summed losses before the step.
    """
    head_grads = None
    l_c = l_ad = 0.0
    reps, doms = [], []
    for task in tasks:
        batch, labels, domains = side_batch(data, task.support)
        value, g = neural.objective(params, batch, labels, domains, 1.0, 1.0,
                                    wrt=neural.ANOMALY_NAMES + neural.DOMAIN_NAMES)
        head_grads = neural.add_grads(head_grads, g)
        l_c += value.class_loss
        l_ad += value.domain_loss
        reps.append(neural.features(params, batch))
        doms.append(domains)

    lr = cfg.head_lr
    base = _summed_domain_loss(reps, doms, params["domain.w"], params["domain.b"])
    for _ in range(max_halvings):
        trial = neural.sgd_step(params, {n: head_grads[n] for n in neural.DOMAIN_NAMES}, lr)
        if _summed_domain_loss(reps, doms, trial["domain.w"], trial["domain.b"]) <= base:
            break
        lr /= 2
    else:
        trial = params
    params = neural.sgd_step(trial, {n: head_grads[n] for n in neural.ANOMALY_NAMES}, cfg.head_lr)
    return params, l_c, l_ad


def train(data: DomainDataset, cfg: TrainConfig, params: neural.Params | None = None) -> TrainedModel:
    rng = np.random.default_rng(cfg.seed)
    d = data.d
    params = params or neural.init_params(d, cfg.hidden, cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        tasks = [sample_meta_task(data, cfg, rng, task_id=i) for i in range(cfg.tasks_per_meta_batch)]

        params, l_c, l_ad = head_step(params, tasks, data, cfg)
        grads, meta_obj = meta_gradient(params, tasks, data, cfg)
        params = neural.sgd_step(params, grads, cfg.alpha)

        n = len(tasks)
        entry = EpochLog(epoch, l_c / n, l_ad / n, meta_obj)
        history.append(entry)
        if not math.isfinite(meta_obj):
            raise MetaStepFailed(f"epoch {epoch}: non-finite meta objective")
        logger.debug("epoch %d L_c=%.4f L_ad=%.4f meta=%.4f", epoch, entry.class_loss, entry.domain_loss, meta_obj)
    return TrainedModel(params, d, cfg.hidden, cfg, cfg.decision_threshold, history)


_P_LO = float(np.nextafter(0.0, 1.0))
_P_HI = float(np.nextafter(1.0, 0.0))


def predict_proba(model: TrainedModel, xs: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(xs), batch_size):
        batch = neural.make_batch(list(xs[start : start + batch_size]))
        out.append(neural.sigmoid(neural.logits(model.params, batch, "anomaly")))
    if not out:
        return np.zeros(0)
    return np.clip(np.concatenate(out), _P_LO, _P_HI)


def predict(model: TrainedModel, seq, embeddings) -> tuple[float, int]:
    ids = getattr(seq, "template_ids", seq)
    x = sequence_matrix(ids, embeddings)
    p = float(predict_proba(model, [x])[0])
    return p, int(p >= model.decision_threshold)


def predict_many(model: TrainedModel, seqs, embeddings) -> list[tuple[float, int]]:
    xs = [sequence_matrix(s.template_ids, embeddings) for s in seqs]
    probs = predict_proba(model, xs)
    return [(float(p), int(p >= model.decision_threshold)) for p in probs]


def write_train_log(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in history:
            fh.write(f"{e.epoch}\t{e.class_loss!r}\t{e.domain_loss!r}\t{e.meta_objective!r}\n")


def config_snapshot(cfg: TrainConfig) -> dict:
    return asdict(cfg)
