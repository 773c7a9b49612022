"""Fast numerical self-checks: gradients, likelihood equivalence, AUROC oracles."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .anomaly import outlier_exposure_loss, window_scores
from .encoder import Encoder
from .episodic import Episode, TaskSpec, distance_softmax, episode_graph, episode_loss, \
    prior_weighted_assignment
from .evaluation import auroc, pauroc

GRAD_TOL = 1e-4
EQUIV_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}, {self.seconds:.2f}s)"


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

@dataclass
class GradientFixture:
    encoder: Encoder
    params: ad.ParameterVector
    episode: Episode
    outliers: np.ndarray


def gradient_fixture(seed: int, n_classes: int = 3, support: int = 2, query: int = 3,
                     windows_per_clip: int = 2, frames: int = 4, mels: int = 5,
                     hidden: int = 7, bottleneck: int = 4) -> GradientFixture:
    """Tiny random encoder and episode; small enough for full finite differences."""
    rng = np.random.default_rng(seed)
    enc = Encoder([frames * mels, hidden, bottleneck])
    params = enc.init_params(seed)
    # widen the bottleneck so distances are O(1) and every term matters
    params = params.map(lambda k, v: v * 5.0 if k == "layer1.weight" else v)
    task = TaskSpec("fixture", [f"c{k}" for k in range(n_classes)], {})

    def clips(n, k):
        centre = rng.normal(size=(1, frames, mels))
        return centre + 0.7 * rng.normal(size=(n * windows_per_clip, frames, mels))

    sup = [clips(support, k) for k in range(n_classes)]
    qry = [clips(query, k) for k in range(n_classes)]
    ids = lambda n, k, tag: [f"{tag}{k}_{i}" for i in range(n)]
    episode = Episode(task, [ids(support, k, "s") for k in range(n_classes)],
                      [ids(query, k, "q") for k in range(n_classes)], sup, qry)
    outliers = rng.normal(size=(3 * windows_per_clip, frames, mels)) * 1.5
    return GradientFixture(enc, params, episode, outliers)


def episode_objective(fx: GradientFixture) -> Callable:
    return lambda leaves: episode_loss(fx.encoder, leaves, fx.episode)


def oe_objective(fx: GradientFixture) -> Callable:
    """Outlier-exposure loss with prototypes taken from the support set (graph attached)."""
    def fn(leaves):
        protos = episode_graph(fx.encoder, leaves, fx.episode).prototypes
        return outlier_exposure_loss(fx.encoder, leaves, fx.outliers, protos)
    return fn


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def brute_force_auroc(normal, anomalous) -> float:
    total = 0.0
    for a in anomalous:
        for n in normal:
            total += 1.0 if a > n else 0.5 if a == n else 0.0
    return total / (len(normal) * len(anomalous))


def brute_force_pauroc(normal, anomalous, max_fpr: float) -> float:
    """Sweep every distinct threshold from high to low, integrating TPR over FPR."""
    normal = np.asarray(normal, dtype=float)
    anomalous = np.asarray(anomalous, dtype=float)
    pts = [(0.0, 0.0)]
    for t in sorted(set(normal.tolist()) | set(anomalous.tolist()), reverse=True):
        pts.append((float(np.mean(normal >= t)), float(np.mean(anomalous >= t))))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= max_fpr:
            break
        if x1 > max_fpr:
            y1 = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)
            x1 = max_fpr
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / max_fpr


def random_score_set(rng: np.random.Generator, max_clips: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Score sets with frequent ties (coarse rounding) and varied class balance."""
    n_norm = int(rng.integers(1, max_clips))
    n_anom = int(rng.integers(1, max_clips - n_norm + 1))
    decimals = int(rng.integers(0, 3))
    shift = rng.uniform(-1, 2)
    return (np.round(rng.normal(size=n_norm), decimals),
            np.round(rng.normal(loc=shift, size=n_anom), decimals))


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def _timed(name, tol, fn) -> CheckResult:
    t0 = time.perf_counter()
    value = float(fn())
    return CheckResult(name, bool(value <= tol), value, tol, time.perf_counter() - t0)


def check_gradients(seeds=range(3)) -> CheckResult:
    def worst():
        out = 0.0
        for s in seeds:
            fx = gradient_fixture(s)
            out = max(out, ad.finite_difference_check(episode_objective(fx), fx.params),
                      ad.finite_difference_check(oe_objective(fx), fx.params))
        return out
    return _timed("gradients (episode + outlier exposure vs central differences)", GRAD_TOL, worst)


def check_flat_prior(draws: int = 200, seed: int = 0) -> CheckResult:
    """Distance softmax vs the flat-prior mixture posterior, and the NLL identity."""
    def worst():
        rng = np.random.default_rng(seed)
        out = 0.0
        for _ in range(draws):
            k = int(rng.integers(2, 8))
            d = int(rng.integers(1, 16))
            z = rng.normal(scale=rng.uniform(0.1, 3), size=d)
            c = rng.normal(scale=rng.uniform(0.1, 3), size=(k, d))
            p2 = distance_softmax(z, c)
            p5 = prior_weighted_assignment(z, c, np.full(k, 1.0 / k))
            y = int(rng.integers(k))
            score = window_scores(z[None], c, y)[0]
            out = max(out, np.max(np.abs(p2 - p5)), abs(score - (-np.log(max(p5[y], 1e-12)))))
        return out
    return _timed("flat-prior posterior equivalence and NLL score", EQUIV_TOL, worst)


def check_auroc(sets: int = 100, seed: int = 0) -> CheckResult:
    def worst():
        rng = np.random.default_rng(seed)
        out = 0.0
        for _ in range(sets):
            n, a = random_score_set(rng)
            out = max(out, abs(auroc((n, a)) - brute_force_auroc(n, a)),
                      abs(pauroc((n, a), 0.1) - brute_force_pauroc(n, a, 0.1)),
                      abs(pauroc((n, a), 1.0) - auroc((n, a))))
        return out
    return _timed("AUROC / pAUROC vs brute force", EQUIV_TOL, worst)


CHECKS = (check_gradients, check_flat_prior, check_auroc)


@contextlib.contextmanager
def injected_gradient_bug() -> Iterator[None]:
    """Test hook: ReLU backward leaks 10% of the gradient through inactive units."""
    original = ad.relu

    def leaky(a):
        mask = a.values > 0
        return ad._record(np.where(mask, a.values, 0.0), "relu", (a,),
                          lambda g: (g * np.where(mask, 1.0, 0.1),))

    ad.relu = leaky
    try:
        yield
    finally:
        ad.relu = original


def run_all(inject_bug: bool = False) -> list[CheckResult]:
    ctx = injected_gradient_bug() if inject_bug else contextlib.nullcontext()
    with ctx:
        return [check() for check in CHECKS]
