"""Anomaly scores, the mixture-density view and outlier exposure."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .episodic import PrototypeSet, sqdist

PROB_FLOOR = 1e-12
MAX_SCORE = -math.log(PROB_FLOOR)
AGGREGATIONS = ("mean", "max")
OUTLIER_MODES = ("other_machines", "freq_warp")


@dataclass
class ScoredClip:
    clip_id: str
    section: str
    domain: str
    truth: str
    score: float
    machine: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score) or self.score < 0:
            raise ValueError(f"{self.clip_id}: anomaly score must be finite and >= 0, got {self.score}")


def window_scores(embeddings: np.ndarray, protos: PrototypeSet | np.ndarray, true_class: int) -> np.ndarray:
    """Per-window negative log-likelihood of the claimed class, floored at 1e-12.

    Evaluated as logsumexp_k(d_y - d_k) with the true-class term split off,
    so confident windows keep distinct tiny scores instead of rounding to 0.
    """
    c = protos.prototypes if isinstance(protos, PrototypeSet) else np.asarray(protos, dtype=np.float64)
    d = sqdist(embeddings, c)
    if not 0 <= true_class < d.shape[-1]:
        raise IndexError(f"true_class {true_class} outside [0, {d.shape[-1]})")
    rel = d[..., true_class:true_class + 1] - d
    m = np.maximum(rel.max(axis=-1), 0.0)
    others = np.delete(rel, true_class, axis=-1)
    rest = np.exp(others - m[..., None]).sum(axis=-1)
    with np.errstate(divide="ignore"):
        score = np.where(m > 0, m + np.log(np.exp(-m) + rest), np.log1p(rest))
    return np.minimum(score, MAX_SCORE)


def aggregate(scores: Sequence[float], how: str = "mean") -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no window scores to aggregate")
    if how == "mean":
        return float(scores.mean())
    if how == "max":
        return float(scores.max())
    raise ValueError(f"unknown aggregation {how!r}; expected one of {AGGREGATIONS}")


def anomaly_score(encoder, params, windows, protos: PrototypeSet, true_class: int, how: str = "mean") -> float:
    """Clip anomaly score: aggregated window NLL of the clip's claimed class."""
    if len(windows) == 0:
        raise ValueError("empty window list")
    if not isinstance(windows, np.ndarray):
        windows = np.stack([getattr(w, "matrix", w) for w in windows])
    z = encoder.embed(params, windows)
    return aggregate(window_scores(z, protos, true_class), how)


def mixture_density(embedding, protos: PrototypeSet | np.ndarray, priors=None) -> np.ndarray | float:
    """Unnormalised mixture density sum_k pi_k exp(-d(z, c_k))."""
    c = protos.prototypes if isinstance(protos, PrototypeSet) else np.asarray(protos, dtype=np.float64)
    k = c.shape[0]
    pi = np.full(k, 1.0 / k) if priors is None else np.asarray(priors, dtype=np.float64)
    if pi.shape != (k,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise ValueError("priors must be a length-K vector on the simplex")
    out = np.exp(-sqdist(embedding, c)) @ pi
    return float(out) if np.ndim(out) == 0 else out


def outlier_exposure_loss(encoder, leaves, outlier_windows, protos: Tensor | PrototypeSet) -> Tensor:
    """Cross-entropy between the class posterior of each outlier and uniform.

    Per window: -(1/K) sum_k log p_k = mean_k d_k + logsumexp_k(-d_k).
    """
    if len(outlier_windows) == 0:
        raise ValueError("empty outlier batch")
    if isinstance(protos, PrototypeSet):
        protos = Tensor(protos.prototypes)
    if protos.shape[0] < 2:
        raise ValueError("outlier exposure needs at least two classes")
    z = encoder(leaves, outlier_windows)
    dist = ad.pairwise_sqdist(z, protos)
    per_window = ad.add(ad.mean(dist, axis=1), ad.logsumexp(ad.scale(dist, -1.0), axis=1))
    return ad.mean(per_window)


def combined_loss(task_loss, oe_loss, lam: float):
    """task + lam * oe; works for Tensors and plain floats."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(task_loss, Tensor):
        if lam == 0 or oe_loss is None:
            return task_loss
        return ad.add(task_loss, ad.scale(oe_loss, lam))
    return task_loss + lam * (oe_loss or 0.0)


# ---------------------------------------------------------------------------
# outlier synthesis
# ---------------------------------------------------------------------------

def freq_warp(windows: np.ndarray, factor: float) -> np.ndarray:
    """Stretch the mel axis by ``factor`` using linear interpolation.

    Output bin j reads input position j / factor, so factor > 1 moves content
    to higher bins; positions past the top bin hold the edge value.
    """
    w = np.asarray(windows, dtype=np.float64)
    if factor == 1.0:
        return w.copy()
    n = w.shape[-1]
    pos = np.arange(n) / factor
    lo = np.clip(np.floor(pos).astype(int), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    frac = np.where(lo == n - 1, 0.0, frac)
    return w[..., lo] * (1.0 - frac) + w[..., hi] * frac


def draw_warp_factor(rng: np.random.Generator, low: float = 0.9, high: float = 1.1,
                     exclude: float = 0.01) -> float:
    """Uniform on [low, high] minus (1 - exclude, 1 + exclude)."""
    span = (high - low) - 2 * exclude
    u = rng.uniform(0.0, span)
    left = (1.0 - exclude) - low
    return low + u if u < left else 1.0 + exclude + (u - left)


@dataclass
class OutlierPool:
    """Outlier clips available for exposure while training one machine."""

    windows: list[np.ndarray]
    sources: list[str]

    def __len__(self):
        return len(self.windows)

    def sample(self, rng: np.random.Generator, n_clips: int) -> np.ndarray:
        if not self.windows:
            raise ValueError("empty outlier pool")
        idx = rng.choice(len(self.windows), size=min(n_clips, len(self.windows)), replace=False)
        return np.concatenate([self.windows[i] for i in sorted(idx)])


def synthesize_outliers(dataset, machine: str, modes: Iterable[str] = OUTLIER_MODES,
                        rng_seed=0, max_clips: int | None = None) -> OutlierPool:
    """Build the exposure pool for ``machine``.

    ``other_machines`` takes source-domain training normals of every other
    machine; ``freq_warp`` warps this machine's training normals along the
    mel axis with a random factor per clip.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    modes = list(modes)
    windows, sources = [], []
    for mode in modes:
        if mode not in OUTLIER_MODES:
            raise ValueError(f"unknown outlier mode {mode!r}; expected one of {OUTLIER_MODES}")
        if mode == "other_machines":
            others = [m for m in dataset.machines if m != machine]
            if not others:
                raise ValueError("other_machines outliers need at least two machine types")
            ids = [c.clip_id for c in dataset.clips(split="train", domain="source", condition="normal")
                   if c.machine != machine]
            if max_clips is not None and len(ids) > max_clips:
                ids = sorted(rng.choice(ids, size=max_clips, replace=False).tolist())
            for cid in ids:
                windows.append(dataset.windows(cid))
                sources.append(cid)
        else:
            ids = [c.clip_id for c in dataset.clips(machine=machine, split="train", domain="source",
                                                     condition="normal")]
            if max_clips is not None and len(ids) > max_clips:
                ids = sorted(rng.choice(ids, size=max_clips, replace=False).tolist())
            for cid in ids:
                factor = draw_warp_factor(rng)
                windows.append(freq_warp(dataset.windows(cid), factor))
                sources.append(f"warp({cid},{factor:.4f})")
    return OutlierPool(windows, sources)


# ---------------------------------------------------------------------------
# score CSV
# ---------------------------------------------------------------------------

SCORE_COLUMNS = ("clip_id", "section", "domain", "truth", "score", "machine")


def write_scores(path: str | Path, scores: Iterable[ScoredClip]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for s in scores:
            w.writerow([s.clip_id, s.section, s.domain, s.truth, repr(float(s.score)), s.machine])


def read_scores(path: str | Path) -> list[ScoredClip]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"clip_id", "section", "domain", "truth", "score"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing score columns {sorted(missing)}")
        return [
            ScoredClip(r["clip_id"], r["section"], r["domain"], r["truth"], float(r["score"]),
                       r.get("machine") or "")
            for r in reader
        ]
