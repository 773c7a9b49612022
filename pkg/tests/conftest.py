import numpy as np
import pytest

from fewshot_asd import benchgen
from fewshot_asd.config import RunConfig
from fewshot_asd.episodic import TaskSpec


class DictSource:
    """Window source backed by a dict of clip id -> (windows, frames, mels)."""

    def __init__(self, data):
        self.data = data

    def windows(self, clip_id):
        return self.data[clip_id]


@pytest.fixture
def toy_source():
    """Two-class toy data plus a second task that splits the clips differently."""
    rng = np.random.default_rng(0)
    data, section, parity = {}, {}, {}
    for k in range(2):
        for i in range(10):
            cid = f"k{k}_{i:02d}"
            data[cid] = rng.normal(loc=k, size=(2, 2, 3))
            section[cid] = f"s{k}"
            parity[cid] = "even" if i % 2 == 0 else "odd"
    tasks = [TaskSpec.from_labels("section", section), TaskSpec.from_labels("parity", parity)]
    return DictSource(data), tasks


TINY_COUNTS = benchgen.Counts(train_source=8, fewshot_target=2, test_normal_per_domain=4,
                              test_anomalous_per_domain=4)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Two machines x two sections, 2.5 s clips (two context windows each)."""
    out = tmp_path_factory.mktemp("bench")
    spec = benchgen.default_spec(n_machines=2, n_sections=2, seed=0, counts=TINY_COUNTS, clip_seconds=2.5)
    benchgen.generate(spec, out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return benchgen.load(tiny_dataset_dir)


@pytest.fixture
def tiny_config(tiny_dataset_dir, tmp_path):
    return RunConfig(dataset=str(tiny_dataset_dir), encoder_hidden=[8], bottleneck=4, outer_steps=4,
                     inner_iters=2, finetune_iters=2, support_size=2, query_size=2, oe_pool_clips=4,
                     oe_clips_per_step=2, seed=0, checkpoint_dir=str(tmp_path / "ckpt"),
                     scores=str(tmp_path / "scores.csv"), report=str(tmp_path / "report.csv"))
