"""Per-machine training and scoring built from a RunConfig."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .anomaly import ScoredClip, synthesize_outliers
from .autodiff import ParameterVector
from .benchgen import DataError, Dataset
from .config import RunConfig
from .encoder import Encoder
from .episodic import TaskSpec
from .meta import MetaSchedule, OEConfig, OptimizerConfig, TrainResult, adapt_and_score, train

log = logging.getLogger(__name__)


@dataclass
class Model:
    machine: str
    encoder: Encoder
    params: ParameterVector
    task_names: list[str]
    config_hash: str = ""
    seed: int = 0

    def save(self, path: str | Path) -> None:
        meta = {
            "machine": self.machine,
            "encoder_sizes": self.encoder.sizes,
            "tasks": self.task_names,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }
        checkpoint.save(path, self.params, self.encoder.buffers(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        params, buffers, meta = checkpoint.load(path)
        try:
            encoder = Encoder(meta["encoder_sizes"])
            machine = meta["machine"]
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"{path}: checkpoint metadata lacks {exc}") from None
        encoder.set_buffers(buffers)
        expected = encoder.init_params(0).shapes()
        if params.shapes() != expected:
            raise checkpoint.CheckpointError(f"{path}: parameter shapes do not match encoder sizes")
        return cls(machine, encoder, params, list(meta.get("tasks", [])), meta.get("config_hash", ""),
                   int(meta.get("seed", 0)))


def optimizer_config(cfg: RunConfig) -> OptimizerConfig:
    return OptimizerConfig(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def schedule(cfg: RunConfig) -> MetaSchedule:
    return MetaSchedule(cfg.outer_steps, cfg.epsilon_start, cfg.epsilon_end, cfg.inner_iters, cfg.finetune_iters)


def select_tasks(all_tasks: list[TaskSpec], wanted) -> list[TaskSpec]:
    """``wanted`` is "all", "section_only", or a list/comma string of task names."""
    if wanted == "all":
        return list(all_tasks)
    if wanted == "section_only":
        wanted = ["section"]
    if isinstance(wanted, str):
        wanted = [w.strip() for w in wanted.split(",") if w.strip()]
    by_name = {t.task_name: t for t in all_tasks}
    missing = [w for w in wanted if w not in by_name]
    if missing:
        raise DataError(f"tasks {missing} not available; have {sorted(by_name)}")
    return [by_name[w] for w in wanted]


def machines_for(dataset: Dataset, cfg: RunConfig) -> list[str]:
    if cfg.machine:
        if cfg.machine not in dataset.machines:
            raise DataError(f"machine {cfg.machine!r} not in dataset (have {dataset.machines})")
        return [cfg.machine]
    return dataset.machines


def train_machine(dataset: Dataset, machine: str, cfg: RunConfig, callback=None) -> tuple[Model, TrainResult]:
    tasks = select_tasks(dataset.tasks(machine), cfg.tasks)
    train_ids = [c.clip_id for c in dataset.clips(machine=machine, domain="source", split="train")]
    sample = dataset.windows(train_ids[0])
    encoder = Encoder(cfg.encoder_sizes(sample[0].size))
    encoder.fit_normalizer(np.concatenate([dataset.windows(c) for c in train_ids]))
    params = encoder.init_params(int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0]))

    oe = None
    if cfg.oe and cfg.oe_lambda > 0 and cfg.oe_modes:
        modes = [m for m in cfg.oe_modes if m != "other_machines" or len(dataset.machines) > 1]
        if len(modes) < len(cfg.oe_modes):
            log.warning("%s: single-machine dataset, skipping other_machines outliers", machine)
        if modes:
            pool = synthesize_outliers(dataset, machine, modes, np.random.default_rng([cfg.seed, 2]),
                                       max_clips=cfg.oe_pool_clips)
            oe = OEConfig(pool, cfg.oe_lambda, cfg.oe_clips_per_step)

    result = train(encoder, params, dataset, tasks, schedule(cfg), optimizer_config(cfg), cfg.seed,
                   cfg.support_size, cfg.query_size, oe, callback)
    model = Model(machine, encoder, result.params, [t.task_name for t in tasks], cfg.training_hash(), cfg.seed)
    return model, result


def section_task(dataset: Dataset, machine: str) -> TaskSpec:
    """Inference task: section identity, classes in sorted section order."""
    sections = dataset.sections(machine)
    fewshot = dataset.clips(machine=machine, domain="target", split="train")
    return TaskSpec.from_labels("section", {c.clip_id: c.section for c in fewshot}) if fewshot else \
        TaskSpec("section", sections, {})


def score_machine(dataset: Dataset, model: Model, cfg: RunConfig,
                  finetune_iters: int | None = None) -> list[ScoredClip]:
    machine = model.machine
    task = section_task(dataset, machine)
    if task.classes != dataset.sections(machine):
        missing = sorted(set(dataset.sections(machine)) - set(task.classes))
        raise DataError(f"{machine}: no few-shot target clips for sections {missing}")
    fewshot = task.clips_by_class()
    tests = dataset.clips(machine=machine, split="test")
    iters = cfg.finetune_iters if finetune_iters is None else finetune_iters
    scores, _ = adapt_and_score(model.encoder, model.params, dataset, task, fewshot, tests, iters,
                                optimizer_config(cfg), cfg.aggregation)
    return scores


def write_loss_log(path: str | Path, result: TrainResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "task", "epsilon", "loss", "first_loss", "last_loss"])
        for e in result.log:
            w.writerow([e.step, e.task, repr(e.epsilon), repr(e.loss), repr(e.first_loss), repr(e.last_loss)])
