"""AUROC, partial AUROC and harmonic-mean aggregation of scored clips."""
from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .anomaly import ScoredClip

MAX_FPR = 0.1


def _split(scores) -> tuple[np.ndarray, np.ndarray]:
    """Accept ScoredClips or a (normal, anomalous) pair of score arrays."""
    if isinstance(scores, tuple) and len(scores) == 2:
        normal, anomalous = (np.asarray(s, dtype=np.float64) for s in scores)
    else:
        scores = list(scores)
        normal = np.array([s.score for s in scores if s.truth == "normal"], dtype=np.float64)
        anomalous = np.array([s.score for s in scores if s.truth == "anomalous"], dtype=np.float64)
    if normal.size == 0 or anomalous.size == 0:
        raise ValueError(
            f"need at least one normal and one anomalous clip (got {normal.size} normal, {anomalous.size} anomalous)"
        )
    return normal, anomalous


def auroc(scores) -> float:
    """Mann-Whitney statistic: P(anomalous scores above normal), ties count 1/2."""
    normal, anomalous = _split(scores)
    ranks = rankdata(np.concatenate([anomalous, normal]))
    n_a, n_n = anomalous.size, normal.size
    u = ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0
    return float(u / (n_a * n_n))


def roc_points(scores) -> tuple[np.ndarray, np.ndarray]:
    """ROC vertices (fpr, tpr) from (0, 0) to (1, 1), one per unique threshold."""
    normal, anomalous = _split(scores)
    values = np.concatenate([anomalous, normal])
    is_anom = np.concatenate([np.ones(anomalous.size), np.zeros(normal.size)])
    order = np.argsort(-values, kind="mergesort")
    values, is_anom = values[order], is_anom[order]
    tp = np.cumsum(is_anom)
    fp = np.cumsum(1.0 - is_anom)
    # last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(values) != 0), values.size - 1]
    fpr = np.r_[0.0, fp[last] / normal.size]
    tpr = np.r_[0.0, tp[last] / anomalous.size]
    return fpr, tpr


def pauroc(scores, max_fpr: float = MAX_FPR) -> float:
    """Area under the ROC for FPR in [0, max_fpr], divided by max_fpr.

    Tied scores give diagonal ROC segments; the curve is linearly
    interpolated at max_fpr.  No McClish standardisation.
    """
    if not 0.0 < max_fpr <= 1.0:
        raise ValueError(f"max_fpr must lie in (0, 1], got {max_fpr}")
    fpr, tpr = roc_points(scores)
    stop = np.searchsorted(fpr, max_fpr, side="right")
    if stop < fpr.size:
        x0, x1, y0, y1 = fpr[stop - 1], fpr[stop], tpr[stop - 1], tpr[stop]
        y_cut = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)
        fpr = np.r_[fpr[:stop], max_fpr]
        tpr = np.r_[tpr[:stop], y_cut]
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return area / max_fpr


def harmonic_aggregate(values: Iterable[float]) -> float:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values to aggregate")
    if np.any(values <= 0):
        raise ValueError("harmonic mean needs strictly positive values")
    return float(values.size / np.sum(1.0 / values))


def harmonic_or_zero(values: Iterable[float]) -> float:
    """Harmonic mean, taking its limit 0 when any value is 0."""
    values = list(values)
    if any(v <= 0 for v in values):
        return 0.0
    return harmonic_aggregate(values)


@dataclass
class SectionResult:
    machine: str
    section: str
    domain: str
    auroc: float
    pauroc: float
    n_normal: int
    n_anomalous: int


@dataclass
class EvalReport:
    rows: list[SectionResult]
    max_fpr: float = MAX_FPR
    metadata: dict = field(default_factory=dict)

    def domain_summary(self, domain: str) -> dict[str, float]:
        rows = [r for r in self.rows if r.domain == domain]
        if not rows:
            return {}
        au = [r.auroc for r in rows]
        pa = [r.pauroc for r in rows]
        return {
            "auroc": harmonic_or_zero(au),
            "pauroc": harmonic_or_zero(pa),
            "score": harmonic_or_zero(au + pa),
        }

    def per_machine(self, domain: str) -> OrderedDict[str, dict[str, float]]:
        out: OrderedDict[str, dict[str, float]] = OrderedDict()
        for m in sorted({r.machine for r in self.rows if r.domain == domain}):
            rows = [r for r in self.rows if r.domain == domain and r.machine == m]
            au = [r.auroc for r in rows]
            pa = [r.pauroc for r in rows]
            out[m] = {"auroc": harmonic_or_zero(au), "pauroc": harmonic_or_zero(pa),
                      "score": harmonic_or_zero(au + pa)}
        return out

    @property
    def domains(self) -> list[str]:
        return [d for d in ("source", "target") if any(r.domain == d for r in self.rows)]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["machine", "section", "domain", "auroc", "pauroc", "n_normal", "n_anomalous"])
            for r in self.rows:
                w.writerow([r.machine, r.section, r.domain, f"{r.auroc:.6f}", f"{r.pauroc:.6f}",
                            r.n_normal, r.n_anomalous])
            for d in self.domains:
                for m, s in self.per_machine(d).items():
                    w.writerow([m, "hmean", d, f"{s['auroc']:.6f}", f"{s['pauroc']:.6f}", "", ""])
                s = self.domain_summary(d)
                w.writerow(["all", "hmean", d, f"{s['auroc']:.6f}", f"{s['pauroc']:.6f}", "", ""])

    def table(self) -> str:
        head = f"{'machine':<12}{'section':<10}{'domain':<8}{'AUROC':>8}{'pAUROC':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.machine or '-':<12}{r.section:<10}{r.domain:<8}{r.auroc:>8.4f}{r.pauroc:>8.4f}")
        lines.append("-" * len(head))
        for d in self.domains:
            s = self.domain_summary(d)
            lines.append(f"{'hmean':<12}{'all':<10}{d:<8}{s['auroc']:>8.4f}{s['pauroc']:>8.4f}"
                         f"   score={s['score']:.4f}")
        return "\n".join(lines)


def evaluate(scores: Sequence[ScoredClip], max_fpr: float = MAX_FPR, metadata: dict | None = None) -> EvalReport:
    """Per (machine, section, domain) metrics; groups lacking either class are skipped."""
    if not scores:
        raise ValueError("no scores to evaluate")
    groups: OrderedDict[tuple[str, str, str], list[ScoredClip]] = OrderedDict()
    for s in sorted(scores, key=lambda s: (s.machine, s.section, s.domain)):
        groups.setdefault((s.machine, s.section, s.domain), []).append(s)
    rows = []
    for (machine, section, domain), group in groups.items():
        n_n = sum(1 for s in group if s.truth == "normal")
        n_a = sum(1 for s in group if s.truth == "anomalous")
        if n_n == 0 or n_a == 0:
            continue
        rows.append(SectionResult(machine, section, domain, auroc(group), pauroc(group, max_fpr), n_n, n_a))
    if not rows:
        raise ValueError("no (machine, section, domain) group has both normal and anomalous clips")
    return EvalReport(rows, max_fpr, dict(metadata or {}))
