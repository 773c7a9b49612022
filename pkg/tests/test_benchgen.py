import csv
import hashlib
import json
import shutil

import numpy as np
import pytest

from fewshot_asd import benchgen
from fewshot_asd.benchgen import (AnomalyInjection, BenchmarkSpec, Counts, DataError, TargetShift,
                                  default_spec, generate, load, plan_clips, synthesize)
from fewshot_asd.frontend import SAMPLE_RATE

SMALL = Counts(train_source=2, fewshot_target=1, test_normal_per_domain=1, test_anomalous_per_domain=3)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSpec:
    def test_default_clip_count(self):
        spec = default_spec(1, 2)
        assert len(plan_clips(spec)) == (100 + 3 + 100) * 2

    def test_plan_layout(self):
        plans = plan_clips(default_spec(2, 2, counts=SMALL))
        assert len({p.clip_id for p in plans}) == len(plans)
        anomalies = [p for p in plans if p.condition == "anomalous"]
        assert all(p.split == "test" and p.injection in benchgen.INJECTIONS for p in anomalies)
        assert all(p.injection is None for p in plans if p.condition == "normal")

    def test_attributes_balanced(self):
        plans = [p for p in plan_clips(default_spec(1, 1, counts=Counts(train_source=8)))
                 if p.split == "train" and p.domain == "source"]
        combos = [(p.attributes["model"], p.attributes["speed"]) for p in plans]
        assert len(set(combos)) == 4 and all(combos.count(c) == 2 for c in set(combos))

    def test_sections_differ_in_harmonics(self):
        spec = default_spec(1, 2)
        a, b = spec.machines[0].sections
        assert [f for f, _ in a.base_harmonics] != [f for f, _ in b.base_harmonics]

    def test_json_roundtrip(self, tmp_path):
        spec = default_spec(2, 2, seed=3, counts=SMALL)
        spec.dump(tmp_path / "s.json")
        again = BenchmarkSpec.from_file(tmp_path / "s.json")
        assert again.to_dict() == spec.to_dict()

    def test_attribute_list_shorthand(self):
        d = default_spec(1, 1).to_dict()
        d["machines"][0]["sections"][0]["attributes"] = {"model": ["A", "B"]}
        spec = BenchmarkSpec.from_dict(json.loads(json.dumps(d)))
        assert list(spec.machines[0].sections[0].attributes["model"]) == ["A", "B"]

    @pytest.mark.parametrize("edit, match", [
        (lambda s: setattr(s, "target_shift", TargetShift()), "target domain must differ"),
        (lambda s: setattr(s, "anomaly_injection", AnomalyInjection()), "anomaly injection"),
        (lambda s: setattr(s, "base_harmonics", []), "no base harmonics"),
        (lambda s: setattr(s, "base_harmonics", [(-5.0, 0.1)]), "invalid harmonic"),
    ])
    def test_section_validation(self, edit, match):
        spec = default_spec(1, 1)
        edit(spec.machines[0].sections[0])
        with pytest.raises(ValueError, match=match):
            spec.validate()

    def test_bad_counts(self):
        with pytest.raises(ValueError, match="fewshot_target"):
            default_spec(1, 1, counts=Counts(fewshot_target=0))

    def test_unknown_key(self):
        d = default_spec(1, 1).to_dict()
        d["colour"] = "red"
        with pytest.raises(ValueError, match="unknown"):
            BenchmarkSpec.from_dict(d)

    def test_too_many_machines(self):
        with pytest.raises(ValueError):
            default_spec(9, 2)


class TestSynthesis:
    def plan(self, condition="anomalous", injection="transient_clicks", domain="source"):
        spec = default_spec(1, 2, counts=SMALL)
        for p in plan_clips(spec):
            if p.condition == condition and p.domain == domain and p.injection == injection:
                return p
        raise AssertionError("no such plan")

    @pytest.mark.parametrize("injection", benchgen.INJECTIONS)
    def test_injection_changes_waveform(self, injection):
        p = self.plan(injection=injection)
        clean = synthesize(p, 0, 1.0, SAMPLE_RATE, injection=None)
        faulty = synthesize(p, 0, 1.0, SAMPLE_RATE)
        assert clean.shape == faulty.shape == (SAMPLE_RATE,)
        assert np.sqrt(np.mean((faulty - clean) ** 2)) > 0.05 * np.sqrt(np.mean(clean ** 2))

    def test_deterministic_per_clip(self):
        p = self.plan()
        np.testing.assert_array_equal(synthesize(p, 0, 1.0, SAMPLE_RATE), synthesize(p, 0, 1.0, SAMPLE_RATE))
        assert not np.array_equal(synthesize(p, 0, 1.0, SAMPLE_RATE), synthesize(p, 1, 1.0, SAMPLE_RATE))

    def test_target_domain_is_shifted(self):
        src = self.plan(condition="normal", injection=None, domain="source")
        tgt = self.plan(condition="normal", injection=None, domain="target")
        assert not np.allclose(synthesize(src, 0, 1.0, SAMPLE_RATE), synthesize(tgt, 0, 1.0, SAMPLE_RATE))

    def test_unknown_injection(self):
        with pytest.raises(ValueError, match="unknown injection"):
            synthesize(self.plan(), 0, 1.0, SAMPLE_RATE, injection="meteor")

    def test_level_is_reasonable(self):
        x = synthesize(self.plan(condition="normal", injection=None), 0, 2.0, SAMPLE_RATE)
        assert 0.005 < np.sqrt(np.mean(x ** 2)) and np.max(np.abs(x)) < 1.0


class TestGenerate:
    def test_byte_identical_reruns(self, tmp_path):
        spec = default_spec(1, 2, seed=4, counts=SMALL, clip_seconds=0.5)
        a = generate(spec, tmp_path / "a")
        b = generate(spec, tmp_path / "b")
        assert tree_digest(a) == tree_digest(b)
        c = generate(default_spec(1, 2, seed=5, counts=SMALL, clip_seconds=0.5), tmp_path / "c")
        assert tree_digest(a) != tree_digest(c)

    def test_metadata_columns(self, tiny_dataset_dir):
        with open(tiny_dataset_dir / benchgen.METADATA_FILE, newline="") as f:
            header = next(csv.reader(f))
        assert header == list(benchgen.BASE_COLUMNS) + ["model", "speed"]

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate(default_spec(1, 1, counts=SMALL, clip_seconds=0.5), blocker / "out")


class TestLoad:
    def test_counts_and_splits(self, tiny_dataset):
        assert tiny_dataset.machines == ["toycar", "toytrain"]
        assert tiny_dataset.sections("toycar") == ["00", "01"]
        assert len(tiny_dataset.clips(machine="toycar", section="00", split="train", domain="source")) == 8
        assert len(tiny_dataset.clips(machine="toycar", split="test", condition="anomalous")) == 16

    def test_windows(self, tiny_dataset):
        cid = tiny_dataset.clips()[0].clip_id
        assert tiny_dataset.windows(cid).shape == (2, 64, 128)

    def test_three_tasks(self, tiny_dataset):
        tasks = tiny_dataset.tasks("toycar")
        assert [t.task_name for t in tasks] == ["section", "model", "speed"]
        assert tasks[1].classes == ["A", "B"]
        assert all(len(t.label_of) == 16 for t in tasks)

    def test_constant_attribute_dropped_with_warning(self, tmp_path, tiny_dataset_dir):
        root = tmp_path / "d"
        shutil.copytree(tiny_dataset_dir, root)
        (root / benchgen.SPEC_FILE).unlink()
        meta = root / benchgen.METADATA_FILE
        rows = list(csv.reader(meta.open()))
        idx = rows[0].index("model")
        for r in rows[1:]:
            r[idx] = "A"
        with meta.open("w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)
        with pytest.warns(UserWarning, match="model"):
            tasks = load(root).tasks("toycar")
        assert [t.task_name for t in tasks] == ["section", "speed"]

    def test_dangling_wav_names_clip(self, tmp_path, tiny_dataset_dir):
        root = tmp_path / "d"
        shutil.copytree(tiny_dataset_dir, root)
        victim = sorted((root / "toycar").glob("*.wav"))[0]
        victim.unlink()
        with pytest.raises(DataError, match=victim.stem):
            load(root)

    def test_missing_metadata(self, tmp_path):
        with pytest.raises(DataError, match="metadata"):
            load(tmp_path)

    @pytest.mark.parametrize("column, value, match", [
        ("domain", "moon", "bad domain"),
        ("condition", "anomalous", "not normal"),
    ])
    def test_bad_rows(self, tmp_path, tiny_dataset_dir, column, value, match):
        root = tmp_path / "d"
        shutil.copytree(tiny_dataset_dir, root)
        meta = root / benchgen.METADATA_FILE
        rows = list(csv.reader(meta.open()))
        rows[1][rows[0].index(column)] = value
        with meta.open("w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)
        with pytest.raises(DataError, match=match):
            load(root)

    def test_count_mismatch_against_spec(self, tmp_path, tiny_dataset_dir):
        root = tmp_path / "d"
        shutil.copytree(tiny_dataset_dir, root)
        meta = root / benchgen.METADATA_FILE
        lines = meta.read_text().splitlines()
        meta.write_text("\n".join(lines[:1] + lines[2:]) + "\n")
        with pytest.raises(DataError, match="expected 8 clips"):
            load(root)

    def test_sections_separable_by_nearest_centroid(self, tiny_dataset):
        # log-mel means of source training normals, classified against per-section centroids
        for machine in tiny_dataset.machines:
            feats, labels = [], []
            for c in tiny_dataset.clips(machine=machine, domain="source", split="train"):
                feats.append(tiny_dataset.logmel(c.clip_id).mean(axis=0))
                labels.append(c.section)
            feats, labels = np.array(feats), np.array(labels)
            sections = sorted(set(labels))
            centroids = np.stack([feats[labels == s].mean(axis=0) for s in sections])
            d = ((feats[:, None] - centroids[None]) ** 2).sum(axis=-1)
            predicted = np.array(sections)[d.argmin(axis=1)]
            assert np.all(predicted == labels), machine
