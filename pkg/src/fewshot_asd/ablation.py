"""Ablation runner: all-task vs single-task, with/without OE, with/without fine-tuning."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .benchgen import Dataset
from .config import RunConfig
from .evaluation import evaluate
from .pipeline import machines_for, score_machine, train_machine

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    tasks: str
    oe: bool
    finetune: bool


# the ablation ladder: single-task ProtoNet, + Reptile over all tasks, + OE, and
# the full model scored without fine-tuning
ARMS = (
    Arm("protonet", "section_only", False, True),
    Arm("protonet_reptile", "all", False, True),
    Arm("full", "all", True, True),
    Arm("no_finetune", "all", True, False),
)

# (name, better arm, worse arm): the better arm is expected to score at least as high
COMPARISONS = (
    ("all_tasks", "protonet_reptile", "protonet"),
    ("finetune", "full", "no_finetune"),
    ("outlier_exposure", "full", "protonet_reptile"),
)


@dataclass
class ArmResult:
    arm: str
    seed: int
    target_auroc: float
    target_pauroc: float
    source_auroc: float
    seconds: float


@dataclass
class Check:
    name: str
    better: str
    worse: str
    better_mean: float
    worse_mean: float
    margin: float

    @property
    def diff(self) -> float:
        return self.better_mean - self.worse_mean

    @property
    def passed(self) -> bool:
        return self.diff >= self.margin


@dataclass
class AblationResult:
    results: list[ArmResult] = field(default_factory=list)

    def mean(self, arm: str, metric: str = "target_auroc") -> float:
        vals = [getattr(r, metric) for r in self.results if r.arm == arm]
        if not vals:
            raise KeyError(f"no results for arm {arm!r}")
        return float(np.mean(vals))

    def checks(self, margin: float = 0.01) -> list[Check]:
        return [Check(name, hi, lo, self.mean(hi), self.mean(lo), margin)
                for name, hi, lo in COMPARISONS]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["arm", "seed", "target_auroc", "target_pauroc", "source_auroc"])
            for r in self.results:
                w.writerow([r.arm, r.seed, f"{r.target_auroc:.6f}", f"{r.target_pauroc:.6f}",
                            f"{r.source_auroc:.6f}"])

    def table(self, margin: float = 0.01) -> str:
        arms = list(dict.fromkeys(r.arm for r in self.results))
        lines = [f"{'arm':<18}{'target AUROC':>14}{'target pAUROC':>15}{'source AUROC':>14}"]
        for a in arms:
            lines.append(f"{a:<18}{self.mean(a):>14.4f}{self.mean(a, 'target_pauroc'):>15.4f}"
                         f"{self.mean(a, 'source_auroc'):>14.4f}")
        for c in self.checks(margin):
            verdict = "PASS" if c.passed else "FAIL"
            lines.append(f"{verdict} {c.name}: {c.better} {c.better_mean:.4f} - {c.worse} "
                         f"{c.worse_mean:.4f} = {c.diff:+.4f} (need >= {c.margin})")
        return "\n".join(lines)


def _summaries(scores):
    report = evaluate(scores)
    tgt = report.domain_summary("target")
    src = report.domain_summary("source")
    return tgt.get("auroc", 0.0), tgt.get("pauroc", 0.0), src.get("auroc", 0.0)


def run_ablation(dataset: Dataset, base: RunConfig, seeds: Sequence[int],
                 arms: Sequence[Arm] = ARMS, progress: Callable[[ArmResult], None] | None = None
                 ) -> AblationResult:
    """Train and score every arm for every seed.

    Arms that differ only in fine-tuning share one trained model.  Metrics are
    harmonic means over all (machine, section) pairs of the dataset.
    """
    out = AblationResult()
    machines = machines_for(dataset, base)
    for seed in seeds:
        trained: dict[tuple[str, bool], dict] = {}
        for arm in arms:
            t0 = time.perf_counter()
            cfg = base.override(seed=seed, tasks=arm.tasks, oe=arm.oe)
            key = (arm.tasks, arm.oe)
            if key not in trained:
                trained[key] = {m: train_machine(dataset, m, cfg)[0] for m in machines}
            scores = []
            for m in machines:
                scores.extend(score_machine(dataset, trained[key][m], cfg,
                                            finetune_iters=None if arm.finetune else 0))
            tau, tpa, sau = _summaries(scores)
            res = ArmResult(arm.name, seed, tau, tpa, sau, time.perf_counter() - t0)
            log.info("ablation seed=%d arm=%s target_auroc=%.4f", seed, arm.name, tau)
            out.results.append(res)
            if progress:
                progress(res)
    return out
