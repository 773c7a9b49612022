"""Episode sampling, prototypes and the distance-softmax (ProtoNet) loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterVector, Tensor

DISTANCES = ("sqeuclidean",)


class EpisodeError(ValueError):
    pass


class WindowSource(Protocol):
    def windows(self, clip_id: str) -> np.ndarray: ...


@dataclass
class TaskSpec:
    """One auxiliary classification task over a pool of labelled clips."""

    task_name: str
    classes: list[str]
    label_of: dict[str, int]

    def __post_init__(self):
        bad = {v for v in self.label_of.values() if not 0 <= v < len(self.classes)}
        if bad:
            raise ValueError(f"task {self.task_name!r}: class indices {sorted(bad)} outside [0, {len(self.classes)})")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def clips_by_class(self) -> list[list[str]]:
        groups: list[list[str]] = [[] for _ in self.classes]
        for clip_id in sorted(self.label_of):
            groups[self.label_of[clip_id]].append(clip_id)
        return groups

    @classmethod
    def from_labels(cls, task_name: str, labels: Mapping[str, str]) -> "TaskSpec":
        classes = sorted(set(labels.values()))
        index = {c: i for i, c in enumerate(classes)}
        return cls(task_name, classes, {cid: index[c] for cid, c in labels.items()})


@dataclass
class Episode:
    task: TaskSpec
    support_ids: list[list[str]]
    query_ids: list[list[str]]
    support: list[np.ndarray] = field(repr=False)
    query: list[np.ndarray] = field(repr=False)

    @property
    def support_clips_per_class(self) -> int:
        return len(self.support_ids[0]) if self.support_ids else 0

    @property
    def query_clips_per_class(self) -> int:
        return len(self.query_ids[0]) if self.query_ids else 0

    def stacked(self):
        """(all windows, support class per row or -1, query rows, query labels)."""
        if self.query is self.support:
            x = np.concatenate(self.support)
            labels = np.concatenate([np.full(len(w), k) for k, w in enumerate(self.support)])
            return x, labels, np.arange(labels.size), labels
        blocks, support_label, query_label = [], [], []
        for k, w in enumerate(self.support):
            blocks.append(w)
            support_label.append(np.full(len(w), k))
            query_label.append(np.full(len(w), -1))
        for k, w in enumerate(self.query):
            blocks.append(w)
            support_label.append(np.full(len(w), -1))
            query_label.append(np.full(len(w), k))
        support_label = np.concatenate(support_label)
        query_label = np.concatenate(query_label)
        query_rows = np.flatnonzero(query_label >= 0)
        return np.concatenate(blocks), support_label, query_rows, query_label[query_rows]


@dataclass
class PrototypeSet:
    task_name: str
    prototypes: np.ndarray
    class_names: list[str]

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def nearest(self, embeddings: np.ndarray) -> np.ndarray:
        """Nearest prototype per row; ties go to the lowest class index."""
        return np.argmin(sqdist(embeddings, self.prototypes), axis=-1)


def _rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_episode(
    dataset: WindowSource,
    task: TaskSpec,
    support_size: int = 3,
    query_size: int = 5,
    rng_seed=0,
) -> Episode:
    """Class-balanced support/query split at clip granularity.

    Every window of a chosen clip enters the episode, so support and query
    are disjoint at clip level.
    """
    if support_size < 1 or query_size < 1:
        raise EpisodeError("support and query sizes must be >= 1")
    rng = _rng(rng_seed)
    need = support_size + query_size
    groups = task.clips_by_class()
    for name, pool in zip(task.classes, groups):
        if len(pool) < need:
            raise EpisodeError(
                f"task {task.task_name!r}: class {name!r} has {len(pool)} clips, needs {need}"
            )
    support_ids, query_ids, support, query = [], [], [], []
    for pool in groups:
        picked = [pool[i] for i in rng.choice(len(pool), size=need, replace=False)]
        s, q = picked[:support_size], picked[support_size:]
        support_ids.append(s)
        query_ids.append(q)
        support.append(np.concatenate([dataset.windows(c) for c in s]))
        query.append(np.concatenate([dataset.windows(c) for c in q]))
    return Episode(task, support_ids, query_ids, support, query)


def fixed_episode(dataset: WindowSource, task: TaskSpec, clip_ids_per_class: Sequence[Sequence[str]]) -> Episode:
    """Episode whose support and query are the same given clips (fine-tuning)."""
    ids = [list(c) for c in clip_ids_per_class]
    if any(not c for c in ids):
        raise EpisodeError("every class needs at least one clip")
    windows = [np.concatenate([dataset.windows(c) for c in cs]) for cs in ids]
    return Episode(task, ids, ids, windows, windows)


# ---------------------------------------------------------------------------
# distances and likelihoods (plain numpy)
# ---------------------------------------------------------------------------

def sqdist(z: np.ndarray, c: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    diff = z[..., None, :] - c
    return np.einsum("...kd,...kd->...k", diff, diff)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def distance_softmax(embedding: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """p_k proportional to exp(-d(z, c_k))."""
    return np.exp(_log_softmax(-sqdist(embedding, prototypes)))


def prior_weighted_assignment(embedding: np.ndarray, prototypes: np.ndarray, priors) -> np.ndarray:
    """p_k = pi_k exp(-d_k) / sum_j pi_j exp(-d_j); the mixture's posterior."""
    priors = np.asarray(priors, dtype=np.float64)
    d = sqdist(embedding, prototypes)
    if priors.shape != d.shape[-1:]:
        raise ad.ShapeError("prior_weighted_assignment", priors.shape, d.shape)
    with np.errstate(divide="ignore"):
        logits = np.log(priors) - d
    return np.exp(_log_softmax(logits))


def class_likelihood(embedding, protos: PrototypeSet | np.ndarray, priors=None) -> np.ndarray:
    """Class posterior for one embedding (or a stack of them).

    ``priors=None`` means a flat prior.
    """
    c = protos.prototypes if isinstance(protos, PrototypeSet) else np.asarray(protos, dtype=np.float64)
    if c.shape[0] == 0:
        raise ValueError("no prototypes")
    if priors is None:
        return distance_softmax(embedding, c)
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
        raise ValueError("priors must lie on the simplex")
    return prior_weighted_assignment(embedding, c, priors)


def log_class_likelihood(embedding, protos: PrototypeSet | np.ndarray) -> np.ndarray:
    c = protos.prototypes if isinstance(protos, PrototypeSet) else np.asarray(protos, dtype=np.float64)
    return _log_softmax(-sqdist(embedding, c))


# ---------------------------------------------------------------------------
# prototypes and loss
# ---------------------------------------------------------------------------

def compute_prototypes(encoder, params: ParameterVector, support: Sequence[np.ndarray],
                       class_names: Sequence[str] | None = None, task_name: str = "") -> PrototypeSet:
    """Class centroids of the embedded support windows."""
    rows = []
    for k, windows in enumerate(support):
        if len(windows) == 0:
            raise EpisodeError(f"class {k} has no support windows")
        rows.append(encoder.embed(params, windows).mean(axis=0))
    names = list(class_names) if class_names is not None else [str(k) for k in range(len(rows))]
    return PrototypeSet(task_name, np.stack(rows), names)


def averaging_matrix(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(K, N) matrix whose product with embeddings gives per-class means of
    the rows labelled k; rows labelled -1 are ignored."""
    a = np.zeros((n_classes, labels.size))
    for k in range(n_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise EpisodeError(f"class {k} has no support windows")
        a[k, idx] = 1.0 / idx.size
    return a


@dataclass
class EpisodeGraph:
    loss: Tensor
    prototypes: Tensor


def episode_graph(encoder, leaves: Mapping[str, Tensor], episode: Episode) -> EpisodeGraph:
    """Query cross-entropy against support prototypes, with the graph attached.

    Support and query go through the encoder in one batch; prototypes are an
    averaging-matrix product so gradients reach both.
    """
    x, support_label, query_rows, query_label = episode.stacked()
    z = encoder(leaves, x)
    protos = ad.matmul(Tensor(averaging_matrix(support_label, episode.task.n_classes)), z)
    dist = ad.pairwise_sqdist(ad.take_rows(z, query_rows), protos)
    loss = ad.nll_from_logits(ad.scale(dist, -1.0), query_label)
    return EpisodeGraph(loss, protos)


def episode_loss(encoder, leaves: Mapping[str, Tensor], episode: Episode) -> Tensor:
    return episode_graph(encoder, leaves, episode).loss
