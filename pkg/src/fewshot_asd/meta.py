"""Inner-loop training, Reptile meta-updates and few-shot adaptation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .anomaly import OutlierPool, ScoredClip, aggregate, combined_loss, outlier_exposure_loss, window_scores
from .autodiff import ParameterVector
from .episodic import (
    EpisodeError,
    TaskSpec,
    compute_prototypes,
    episode_graph,
    fixed_episode,
    sample_episode,
)

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


class InnerOptState:
    """Per-task optimiser state; a new one is created on every task visit."""

    def __init__(self, config: OptimizerConfig, params: ParameterVector):
        self.config = config
        self.step_count = 0
        self.m = params.map(lambda _, v: np.zeros_like(v))
        self.v = params.map(lambda _, v: np.zeros_like(v))

    def step(self, params: ParameterVector, grads: ParameterVector) -> ParameterVector:
        params.check_aligned(grads, "optimizer step")
        c = self.config
        if c.kind == "sgd":
            return ParameterVector((k, p - c.lr * grads[k]) for k, p in params.items())
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        out = []
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += c.eps
            upd = m / bc1
            upd /= denom
            upd *= c.lr
            out.append((k, p - upd))
        return ParameterVector(out)


@dataclass
class MetaSchedule:
    outer_steps: int = 10_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.0
    inner_iters: int = 8
    finetune_iters: int = 50

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ValueError("inner_iters (T) must be >= 1")
        if self.finetune_iters < 0:
            raise ValueError("finetune_iters (T_test) must be >= 0")
        if self.outer_steps < 0:
            raise ValueError("outer_steps must be >= 0")

    def epsilon(self, step: int) -> float:
        """Linear anneal from epsilon_start (step 0) to epsilon_end (last step)."""
        if self.outer_steps <= 1:
            return self.epsilon_start
        frac = step / (self.outer_steps - 1)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


@dataclass
class OEConfig:
    """Outlier exposure during inner-loop training."""

    pool: OutlierPool | None = None
    lam: float = 0.2
    clips_per_step: int = 4

    @property
    def active(self) -> bool:
        return self.pool is not None and len(self.pool) > 0 and self.lam > 0


@dataclass
class LogEntry:
    step: int
    task: str
    epsilon: float
    loss: float
    first_loss: float
    last_loss: float


@dataclass
class TrainResult:
    params: ParameterVector
    log: list[LogEntry] = field(default_factory=list)


def reptile_meta_update(theta: ParameterVector, theta_T: ParameterVector, epsilon: float) -> ParameterVector:
    """theta + epsilon (theta_T - theta), evaluated as (1-eps) theta + eps theta_T.

    That form is exact at both ends: eps=0 returns theta and eps=1 returns
    theta_T bit for bit.
    """
    theta.check_aligned(theta_T, "reptile_meta_update")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    return ParameterVector(
        (k, (1.0 - epsilon) * v + epsilon * theta_T[k]) for k, v in theta.items()
    )


def task_loss_and_grad(encoder, params: ParameterVector, episode, oe: OEConfig | None,
                       rng: np.random.Generator):
    leaves = params.leaves()
    graph = episode_graph(encoder, leaves, episode)
    loss = graph.loss
    if oe is not None and oe.active:
        outliers = oe.pool.sample(rng, oe.clips_per_step)
        loss = combined_loss(loss, outlier_exposure_loss(encoder, leaves, outliers, graph.prototypes), oe.lam)
    ad.backward(loss)
    return loss.item(), ad.grads_of(leaves)


def inner_train(encoder, params: ParameterVector, task: TaskSpec, T: int, opt: OptimizerConfig,
                dataset, rng: np.random.Generator, support_size: int = 3, query_size: int = 5,
                oe: OEConfig | None = None) -> tuple[ParameterVector, list[float]]:
    """T gradient steps on freshly sampled episodes of ``task``; returns theta^(T).

    ``params`` is not modified.
    """
    state = InnerOptState(opt, params)
    theta = params.copy()
    losses = []
    for _ in range(T):
        episode = sample_episode(dataset, task, support_size, query_size, rng)
        value, grads = task_loss_and_grad(encoder, theta, episode, oe, rng)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss on task {task.task_name!r}")
        losses.append(value)
        theta = state.step(theta, grads)
    return theta, losses


def check_tasks(tasks: Sequence[TaskSpec], support_size: int, query_size: int) -> None:
    if not tasks:
        raise EpisodeError("at least one task is required")
    need = support_size + query_size
    for task in tasks:
        for name, pool in zip(task.classes, task.clips_by_class()):
            if len(pool) < need:
                raise EpisodeError(
                    f"task {task.task_name!r}: class {name!r} has {len(pool)} clips, needs {need}"
                )


def train(encoder, params: ParameterVector, dataset, tasks: Sequence[TaskSpec], schedule: MetaSchedule,
          opt: OptimizerConfig, seed: int, support_size: int = 3, query_size: int = 5,
          oe: OEConfig | None = None,
          callback: Callable[[LogEntry], None] | None = None) -> TrainResult:
    """Reptile over ``tasks`` visited round-robin, one task per outer step."""
    check_tasks(tasks, support_size, query_size)
    rng = np.random.default_rng([seed, 1])
    theta = params.copy()
    entries = []
    for step in range(schedule.outer_steps):
        task = tasks[step % len(tasks)]
        theta_T, losses = inner_train(encoder, theta, task, schedule.inner_iters, opt, dataset, rng,
                                      support_size, query_size, oe)
        eps = schedule.epsilon(step)
        theta = reptile_meta_update(theta, theta_T, eps)
        entry = LogEntry(step, task.task_name, eps, float(np.mean(losses)), losses[0], losses[-1])
        entries.append(entry)
        if callback is not None:
            callback(entry)
        log.debug("step %d task=%s eps=%.4f loss=%.4f", step, task.task_name, eps, entry.loss)
    return TrainResult(theta, entries)


def finetune(encoder, params: ParameterVector, dataset, task: TaskSpec,
             fewshot: Sequence[Sequence[str]], iters: int, opt: OptimizerConfig) -> ParameterVector:
    """``iters`` steps with support = query = the few-shot clips; no outlier exposure."""
    theta = params.copy()
    if iters == 0:
        return theta
    episode = fixed_episode(dataset, task, fewshot)
    state = InnerOptState(opt, theta)
    rng = np.random.default_rng(0)
    for _ in range(iters):
        _, grads = task_loss_and_grad(encoder, theta, episode, None, rng)
        theta = state.step(theta, grads)
    return theta


def adapt_and_score(encoder, params: ParameterVector, dataset, task: TaskSpec,
                    fewshot: Sequence[Sequence[str]], test_clips: Sequence, finetune_iters: int,
                    opt: OptimizerConfig, how: str = "mean", label_of_test: Callable | None = None
                    ) -> tuple[list[ScoredClip], ParameterVector]:
    """Fine-tune on few-shot clips, rebuild prototypes from them, score tests.

    ``fewshot`` holds clip ids per class of ``task``; each test clip is
    scored against the class given by ``label_of_test`` (its section by
    default).
    """
    if any(len(c) == 0 for c in fewshot):
        raise EpisodeError("few-shot set must have at least one clip per class")
    theta = finetune(encoder, params, dataset, task, fewshot, finetune_iters, opt)
    protos = compute_prototypes(
        encoder, theta, [np.concatenate([dataset.windows(c) for c in ids]) for ids in fewshot],
        task.classes, task.task_name,
    )
    index = {c: i for i, c in enumerate(task.classes)}
    label_of_test = label_of_test or (lambda clip: clip.section)
    scored = []
    for clip in test_clips:
        z = encoder.embed(theta, dataset.windows(clip.clip_id))
        score = aggregate(window_scores(z, protos, index[label_of_test(clip)]), how)
        scored.append(ScoredClip(clip.clip_id, clip.section, clip.domain, clip.condition, score, clip.machine))
    return scored, theta
