"""Acceptance criteria. Each test prints one PASS/FAIL line, then asserts.

The ablation test trains four arms for five seeds and takes several minutes.
"""
import time

import numpy as np
import pytest

from fewshot_asd import ablation, benchgen
from fewshot_asd import autodiff as ad
from fewshot_asd.anomaly import window_scores
from fewshot_asd.autodiff import ParameterVector
from fewshot_asd.cli import main
from fewshot_asd.config import RunConfig
from fewshot_asd.encoder import Encoder
from fewshot_asd.episodic import (TaskSpec, distance_softmax, episode_loss, prior_weighted_assignment,
                                  sample_episode)
from fewshot_asd.evaluation import auroc, pauroc
from fewshot_asd.frontend import SAMPLE_RATE, featurize
from fewshot_asd.meta import MetaSchedule, OptimizerConfig, train
from fewshot_asd.selfcheck import (brute_force_auroc, brute_force_pauroc, episode_objective,
                                   gradient_fixture, oe_objective, random_score_set)

from conftest import DictSource

ABLATION_SEEDS = [0, 1, 2, 3, 4]
ABLATION_MARGIN = 0.01
ABLATION_BUDGET_S = 600.0


@pytest.fixture
def report(capsys):
    def emit(ok, name, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok
    return emit


def random_draw(rng):
    k = int(rng.integers(2, 9))
    d = int(rng.integers(1, 33))
    z = rng.normal(scale=rng.uniform(0.05, 4.0), size=d)
    c = rng.normal(scale=rng.uniform(0.05, 4.0), size=(k, d))
    return z, c


def test_gradient_correctness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        fx = gradient_fixture(seed)
        worst = max(worst, ad.finite_difference_check(episode_objective(fx), fx.params),
                    ad.finite_difference_check(oe_objective(fx), fx.params))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    assert report(ok, "gradient correctness", f"max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")


def test_flat_prior_equivalence(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        z, c = random_draw(rng)
        k = len(c)
        worst = max(worst, float(np.max(np.abs(distance_softmax(z, c) - prior_weighted_assignment(z, c, np.full(k, 1 / k))))))
    assert report(worst <= 1e-12, "flat-prior posterior equivalence", f"max abs diff {worst:.2e} (<= 1e-12)")


def test_mixture_density_consistency(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        z, c = random_draw(rng)
        k = len(c)
        y = int(rng.integers(k))
        post = prior_weighted_assignment(z, c, np.full(k, 1 / k))
        if post[y] < 1e-12:
            continue  # score is capped there by design
        worst = max(worst, abs(window_scores(z[None], c, y)[0] + np.log(post[y])))
    assert report(worst <= 1e-12, "NLL score equals -log posterior", f"max abs diff {worst:.2e} (<= 1e-12)")


@pytest.fixture
def single_task():
    rng = np.random.default_rng(0)
    data, labels = {}, {}
    for k in range(3):
        for i in range(8):
            cid = f"k{k}_{i}"
            data[cid] = rng.normal(loc=0.5 * k, size=(2, 3, 4))
            labels[cid] = f"c{k}"
    return DictSource(data), TaskSpec.from_labels("section", labels)


def test_reptile_degeneracy(single_task, report):
    src, task = single_task
    enc = Encoder([12, 6, 3])
    init = enc.init_params(0)
    opt = OptimizerConfig("sgd", lr=0.05)
    steps, inner = 6, 2

    # plain episodic training: one continuous SGD run over the same episode stream
    rng = np.random.default_rng([11, 1])
    theta, trajectory = init.copy(), []
    for _ in range(steps):
        for _ in range(inner):
            ep = sample_episode(src, task, 2, 2, rng)
            _, g = ad.value_and_grad(lambda lv: episode_loss(enc, lv, ep), theta)
            theta = ParameterVector((k, v - 0.05 * g[k]) for k, v in theta.items())
        trajectory.append(theta)

    matches = [train(enc, init, src, [task], MetaSchedule(n, 1.0, 1.0, inner_iters=inner), opt, seed=11,
                     support_size=2, query_size=2).params.equals(trajectory[n - 1])
               for n in range(1, steps + 1)]
    frozen = train(enc, init, src, [task], MetaSchedule(steps, 0.0, 0.0, inner_iters=inner),
                   OptimizerConfig("adam", lr=0.05), seed=11, support_size=2, query_size=2).params.equals(init)
    ok = all(matches) and frozen
    assert report(ok, "Reptile degeneracy",
                  f"eps=1 matches plain training at {sum(matches)}/{steps} steps; eps=0 bit-identical: {frozen}")


def test_auroc_oracle(report):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(200):
        n, a = random_score_set(rng, max_clips=50)
        worst = max(worst, abs(auroc((n, a)) - brute_force_auroc(n, a)),
                    abs(pauroc((n, a), 0.1) - brute_force_pauroc(n, a, 0.1)),
                    abs(pauroc((n, a), 1.0) - auroc((n, a))))
    assert report(worst <= 1e-12, "AUROC/pAUROC oracle", f"max abs diff {worst:.2e} over 200 sets (<= 1e-12)")


def test_frontend_window_count(report):
    x = np.random.default_rng(0).normal(scale=0.1, size=10 * SAMPLE_RATE)
    shape = featurize(x).shape
    assert report(shape == (32, 64, 128), "frontend windows per 10 s clip", f"shape {shape} (want (32, 64, 128))")


def ablation_fixture(out):
    counts = benchgen.Counts(train_source=24, fewshot_target=3, test_normal_per_domain=20,
                             test_anomalous_per_domain=20)
    return benchgen.generate(benchgen.default_spec(2, 2, seed=0, counts=counts, clip_seconds=3.0), out)


@pytest.mark.slow
def test_ablation_ordering(tmp_path, report):
    t0 = time.perf_counter()
    root = ablation_fixture(tmp_path / "bench")
    ds = benchgen.load(root)
    ds.preload()
    base = RunConfig(dataset=str(root), encoder_hidden=[64], bottleneck=32, outer_steps=60, lr=1e-3,
                     oe_pool_clips=32)
    result = ablation.run_ablation(ds, base, ABLATION_SEEDS)
    elapsed = time.perf_counter() - t0
    checks = result.checks(ABLATION_MARGIN)
    lines = [report(c.passed, f"ablation {c.name}",
                    f"{c.better} {c.better_mean:.4f} - {c.worse} {c.worse_mean:.4f} = {c.diff:+.4f} "
                    f"(need >= {ABLATION_MARGIN})") for c in checks]
    in_budget = report(elapsed <= ABLATION_BUDGET_S, "ablation runtime", f"{elapsed:.0f}s (<= {ABLATION_BUDGET_S:.0f}s)")
    failed = [c.name for c, ok in zip(checks, lines) if not ok]
    assert in_budget and not failed, f"ablation comparisons failed: {failed}\n{result.table(ABLATION_MARGIN)}"


def test_determinism(tiny_dataset_dir, tmp_path, report):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        cfg = RunConfig(dataset=str(tiny_dataset_dir), encoder_hidden=[8], bottleneck=4, outer_steps=4,
                        inner_iters=2, finetune_iters=3, support_size=2, query_size=2, oe_pool_clips=4,
                        oe_clips_per_step=2, seed=5, checkpoint_dir=str(d / "ckpt"), scores=str(d / "s.csv"))
        cfg.dump(tmp_path / f"{run}.json")
        assert main(["train", "--config", str(tmp_path / f"{run}.json")]) == 0
        assert main(["adapt-score", "--config", str(tmp_path / f"{run}.json")]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((d / "ckpt").glob("*.ckpt"))}
                       | {"s.csv": (d / "s.csv").read_bytes()})
    same = outputs[0] == outputs[1]
    assert report(same, "determinism", f"{len(outputs[0])} files byte-identical across two runs: {same}")
