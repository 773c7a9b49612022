"""Synthetic machine-sound benchmark with source/target domains.

Machines are stacks of harmonics over filtered background noise.  Each
section has its own harmonic signature; clip-level attributes (e.g. model,
speed) perturb pitch, spectral tilt and amplitude modulation so that every
attribute column defines a non-trivial auxiliary classification task.  The
target domain applies a declared shift (pitch ratio, SNR change, extra
tone); anomalous test clips carry one injected fault each.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import signal as sps

from . import frontend
from .episodic import TaskSpec

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")
SPLITS = ("train", "test")
CONDITIONS = ("normal", "anomalous")
INJECTIONS = ("transient_clicks", "harmonic_detune", "band_noise_burst")
BASE_COLUMNS = ("clip_id", "file", "machine", "section", "domain", "split", "condition")
METADATA_FILE = "metadata.csv"
SPEC_FILE = "benchmark.json"


class DataError(ValueError):
    """Dataset on disk is missing pieces or inconsistent."""


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------

@dataclass
class AttributeEffect:
    pitch_ratio: float = 1.0
    harmonic_tilt_db: float = 0.0  # per kHz of (unshifted) partial frequency
    am_rate_hz: float = 0.0
    am_depth: float = 0.0


@dataclass
class TargetShift:
    pitch_ratio: float = 1.0
    noise_snr_delta: float = 0.0
    extra_tone_hz: float = 0.0
    extra_tone_amp: float = 0.0

    def is_identity(self) -> bool:
        return self.pitch_ratio == 1.0 and self.noise_snr_delta == 0.0 and self.extra_tone_amp == 0.0


@dataclass
class AnomalyInjection:
    transient_clicks: float = 0.0
    harmonic_detune: float = 0.0
    band_noise_burst: float = 0.0

    def active(self) -> list[str]:
        return [name for name in INJECTIONS if getattr(self, name) != 0.0]


@dataclass
class SectionSpec:
    section_id: str
    base_harmonics: list[tuple[float, float]]
    attributes: dict[str, dict[str, AttributeEffect]] = field(default_factory=dict)
    source_noise_snr: float = 10.0
    target_shift: TargetShift = field(default_factory=TargetShift)
    anomaly_injection: AnomalyInjection = field(default_factory=AnomalyInjection)

    def validate(self, machine: str) -> None:
        where = f"{machine}/{self.section_id}"
        if not self.base_harmonics:
            raise ValueError(f"{where}: no base harmonics")
        for f, a in self.base_harmonics:
            if f <= 0 or a < 0:
                raise ValueError(f"{where}: invalid harmonic ({f}, {a})")
        if self.target_shift.is_identity():
            raise ValueError(f"{where}: target domain must differ from source in at least one shift parameter")
        if not self.anomaly_injection.active():
            raise ValueError(f"{where}: at least one anomaly injection must have nonzero magnitude")
        for task, classes in self.attributes.items():
            if not classes:
                raise ValueError(f"{where}: attribute {task!r} has no classes")


@dataclass
class MachineSpec:
    name: str
    sections: list[SectionSpec]


@dataclass
class Counts:
    train_source: int = 100
    fewshot_target: int = 3
    test_normal_per_domain: int = 25
    test_anomalous_per_domain: int = 25


@dataclass
class BenchmarkSpec:
    machines: list[MachineSpec]
    seed: int = 0
    clip_seconds: float = 10.0
    sample_rate: int = frontend.SAMPLE_RATE
    counts: Counts = field(default_factory=Counts)

    def validate(self) -> None:
        if not self.machines:
            raise ValueError("benchmark needs at least one machine")
        for name, value in asdict(self.counts).items():
            if value < 1:
                raise ValueError(f"counts.{name} must be >= 1, got {value}")
        if self.clip_seconds <= 0 or self.sample_rate <= 0:
            raise ValueError("clip_seconds and sample_rate must be positive")
        names = [m.name for m in self.machines]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate machine names in {names}")
        for m in self.machines:
            if not m.sections:
                raise ValueError(f"machine {m.name!r} has no sections")
            ids = [s.section_id for s in m.sections]
            if len(set(ids)) != len(ids):
                raise ValueError(f"machine {m.name!r}: duplicate section ids {ids}")
            for s in m.sections:
                s.validate(m.name)

    # -- (de)serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        known = {"machines", "seed", "clip_seconds", "sample_rate", "counts"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
        machines = []
        for m in d["machines"]:
            sections = []
            for s in m["sections"]:
                attrs = {}
                for task, classes in s.get("attributes", {}).items():
                    if isinstance(classes, str):
                        classes = {classes: {}}
                    elif isinstance(classes, list):
                        classes = {c: {} for c in classes}
                    attrs[task] = {c: AttributeEffect(**(e or {})) for c, e in classes.items()}
                sections.append(SectionSpec(
                    section_id=str(s["section_id"]),
                    base_harmonics=[(float(f), float(a)) for f, a in s["base_harmonics"]],
                    attributes=attrs,
                    source_noise_snr=float(s.get("source_noise_snr", 10.0)),
                    target_shift=TargetShift(**s.get("target_shift", {})),
                    anomaly_injection=AnomalyInjection(**s.get("anomaly_injection", {})),
                ))
            machines.append(MachineSpec(str(m["name"]), sections))
        spec = cls(
            machines=machines,
            seed=int(d.get("seed", 0)),
            clip_seconds=float(d.get("clip_seconds", 10.0)),
            sample_rate=int(d.get("sample_rate", frontend.SAMPLE_RATE)),
            counts=Counts(**d.get("counts", {})),
        )
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path: str | Path) -> "BenchmarkSpec":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


# machine templates for default_spec: (base f0, harmonic decay)
_MACHINE_TEMPLATES = [
    ("toycar", 110.0, 0.72),
    ("toytrain", 165.0, 0.65),
    ("gearbox", 230.0, 0.8),
    ("slider", 310.0, 0.6),
]


_HARMONIC_CEILING_HZ = 1500.0


def _envelope(f: float, decay: float) -> float:
    """Smooth band-pass amplitude envelope shared by all sections of a machine."""
    rise = (f / 250.0) ** 2 / (1.0 + (f / 250.0) ** 2)
    fall = 1.0 / (1.0 + (f / (0.8 * _HARMONIC_CEILING_HZ)) ** 6)
    return 0.02 * rise * fall * (1.0 + f / 500.0) ** -decay


def default_spec(n_machines: int = 1, n_sections: int = 2, seed: int = 0,
                 counts: Counts | None = None, clip_seconds: float = 10.0) -> BenchmarkSpec:
    """Default benchmark: every section has ``model`` and ``speed`` attributes."""
    if not 1 <= n_machines <= len(_MACHINE_TEMPLATES):
        raise ValueError(f"n_machines must be in [1, {len(_MACHINE_TEMPLATES)}]")
    machines = []
    for m, (name, f0, decay) in enumerate(_MACHINE_TEMPLATES[:n_machines]):
        sections = []
        for s in range(n_sections):
            # same spacing and envelope in every section; the comb is offset by s/n of a spacing
            offset = f0 * s / n_sections
            harmonics = [(f, _envelope(f, decay))
                         for f in (f0 * h + offset for h in range(1, int(_HARMONIC_CEILING_HZ // f0) + 1))]
            sections.append(SectionSpec(
                section_id=f"{s:02d}",
                base_harmonics=harmonics,
                attributes={
                    "model": {
                        "A": AttributeEffect(harmonic_tilt_db=0.0),
                        "B": AttributeEffect(harmonic_tilt_db=-4.0),
                    },
                    "speed": {
                        "low": AttributeEffect(pitch_ratio=0.996, am_rate_hz=3.0, am_depth=0.3),
                        "high": AttributeEffect(pitch_ratio=1.004, am_rate_hz=8.0, am_depth=0.3),
                    },
                },
                source_noise_snr=12.0,
                target_shift=TargetShift(pitch_ratio=1.004,
                                         noise_snr_delta=-4.0,
                                         extra_tone_hz=1800.0 + 150.0 * m,
                                         extra_tone_amp=0.03),
                anomaly_injection=AnomalyInjection(transient_clicks=5.0, harmonic_detune=0.06,
                                                   band_noise_burst=1.5),
            ))
        machines.append(MachineSpec(name, sections))
    spec = BenchmarkSpec(machines=machines, seed=seed, clip_seconds=clip_seconds,
                         counts=counts or Counts())
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def clip_rng(seed: int, clip_id: str) -> np.random.SeedSequence:
    """Independent RNG stream per (seed, clip_id); order of synthesis is irrelevant."""
    digest = hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:16], "little"))


def _coloured_noise(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    white = rng.standard_normal(n)
    b, a = sps.butter(2, 2500.0 / (sample_rate / 2.0), btype="low")
    return sps.lfilter(b, a, white) + 0.15 * white


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)) + 1e-12)


@dataclass
class ClipPlan:
    """Everything needed to synthesise one clip deterministically."""

    clip_id: str
    machine: str
    section: SectionSpec
    domain: str
    split: str
    condition: str
    attributes: dict[str, str]
    injection: str | None = None


def synthesize(plan: ClipPlan, seed: int, clip_seconds: float, sample_rate: int,
               injection: str | None = "planned") -> np.ndarray:
    """Waveform for ``plan``.

    ``injection`` overrides the planned fault (None disables it) while
    keeping every other random draw identical.
    """
    if injection == "planned":
        injection = plan.injection
    base_ss, fault_ss = clip_rng(seed, plan.clip_id).spawn(2)
    rng = np.random.default_rng(base_ss)
    sec = plan.section
    n = int(round(clip_seconds * sample_rate))
    t = np.arange(n) / sample_rate

    pitch = 1.0
    tilt = 0.0
    am_rate = am_depth = 0.0
    for task, cls in plan.attributes.items():
        eff = sec.attributes.get(task, {}).get(cls)
        if eff is None:
            continue
        pitch *= eff.pitch_ratio
        tilt += eff.harmonic_tilt_db
        am_rate = max(am_rate, eff.am_rate_hz)
        am_depth = max(am_depth, eff.am_depth)
    shift = sec.target_shift if plan.domain == "target" else TargetShift()
    pitch *= shift.pitch_ratio
    pitch *= 1.0 + 0.001 * rng.standard_normal()

    harmonics = list(sec.base_harmonics)
    freqs = np.array([f for f, _ in harmonics]) * pitch
    amps = np.array([a for _, a in harmonics]) * 10.0 ** (tilt * freqs / pitch / 1000.0 / 20.0)
    amps = amps * (1.0 + 0.05 * rng.standard_normal(len(harmonics)))
    phases = rng.uniform(0, 2 * np.pi, len(harmonics))
    wobble = 1.0 + 0.002 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 2 * np.pi))

    fault_rng = np.random.default_rng(fault_ss)
    inj = sec.anomaly_injection
    if injection == "harmonic_detune":
        # push every other upper harmonic off the harmonic grid
        detune = np.ones(len(freqs))
        detune[1::2] += inj.harmonic_detune
        freqs = freqs * detune

    nyquist = sample_rate / 2.0
    tone = np.zeros(n)
    for f, a, ph in zip(freqs, amps, phases):
        if f < nyquist * 0.95:
            tone += a * np.sin(2 * np.pi * f * t * wobble + ph)
    if am_depth > 0:
        tone *= 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    if shift.extra_tone_amp > 0:
        tone += shift.extra_tone_amp * np.sin(2 * np.pi * shift.extra_tone_hz * t + rng.uniform(0, 2 * np.pi))

    noise = _coloured_noise(rng, n, sample_rate)
    snr = sec.source_noise_snr + shift.noise_snr_delta
    noise *= _rms(tone) / (_rms(noise) * 10.0 ** (snr / 20.0))
    x = tone + noise

    if injection == "transient_clicks":
        level = inj.transient_clicks * _rms(tone)
        n_clicks = max(1, int(round(clip_seconds * 3)))
        length = int(0.02 * sample_rate)
        env = np.exp(-np.arange(length) / (0.004 * sample_rate))
        clicks = np.zeros(n)
        for start in fault_rng.integers(0, n - length, size=n_clicks):
            clicks[start:start + length] += env * fault_rng.standard_normal(length)
        # knocks excite the machine body, so they stay below the harmonic ceiling
        b, a = sps.butter(2, _HARMONIC_CEILING_HZ / nyquist, btype="low")
        clicks = sps.lfilter(b, a, clicks)
        x += level * clicks / (np.abs(clicks).max() + 1e-12)
    elif injection == "band_noise_burst":
        # one-octave band inside the harmonic region
        lo = fault_rng.uniform(0.1, 0.5) * _HARMONIC_CEILING_HZ
        b, a = sps.butter(4, [lo / nyquist, min(2.0 * lo, 0.95 * nyquist) / nyquist], btype="band")
        burst = sps.lfilter(b, a, fault_rng.standard_normal(n))
        gate = np.zeros(n)
        seg = int(0.4 * sample_rate)
        for start in fault_rng.integers(0, n - seg, size=max(1, int(clip_seconds / 2))):
            gate[start:start + seg] = 1.0
        x += inj.band_noise_burst * _rms(tone) / _rms(burst) * burst * gate
    elif injection not in (None, "harmonic_detune"):
        raise ValueError(f"unknown injection {injection!r}")
    return x


def plan_clips(spec: BenchmarkSpec) -> list[ClipPlan]:
    """Deterministic list of every clip the spec describes."""
    c = spec.counts
    plans = []
    for m in spec.machines:
        for sec in m.sections:
            tasks = sorted(sec.attributes)

            def attrs_for(i):
                out = {}
                for j, task in enumerate(tasks):
                    classes = list(sec.attributes[task])
                    # mixed radix so attribute combinations are balanced
                    stride = int(np.prod([len(sec.attributes[t]) for t in tasks[:j]])) if j else 1
                    out[task] = classes[(i // stride) % len(classes)]
                return out

            def add(domain, split, condition, count, faults=None):
                for i in range(count):
                    cid = f"{m.name}_sec{sec.section_id}_{domain}_{split}_{condition}_{i:04d}"
                    inj = faults[i % len(faults)] if faults else None
                    plans.append(ClipPlan(cid, m.name, sec, domain, split, condition, attrs_for(i), inj))

            faults = sec.anomaly_injection.active()
            add("source", "train", "normal", c.train_source)
            add("target", "train", "normal", c.fewshot_target)
            for domain in DOMAINS:
                add(domain, "test", "normal", c.test_normal_per_domain)
                add(domain, "test", "anomalous", c.test_anomalous_per_domain, faults)
    return plans


def attribute_columns(spec: BenchmarkSpec) -> list[str]:
    cols: list[str] = []
    for m in spec.machines:
        for s in m.sections:
            for task in sorted(s.attributes):
                if task not in cols and task != "section":
                    cols.append(task)
    return cols


def generate(spec: BenchmarkSpec, out_dir: str | Path) -> Path:
    """Write WAV clips, ``metadata.csv`` and a copy of the spec to ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = attribute_columns(spec)
    rows = []
    for plan in plan_clips(spec):
        rel = f"{plan.machine}/{plan.clip_id}.wav"
        (out / plan.machine).mkdir(exist_ok=True)
        wav = synthesize(plan, spec.seed, spec.clip_seconds, spec.sample_rate)
        peak = np.max(np.abs(wav))
        if peak >= 1.0:
            log.warning("%s clipped (peak %.2f)", plan.clip_id, peak)
        frontend.write_wav(out / rel, wav, spec.sample_rate)
        rows.append([plan.clip_id, rel, plan.machine, plan.section.section_id, plan.domain, plan.split,
                     plan.condition] + [plan.attributes.get(c, "") for c in cols])
    with open(out / METADATA_FILE, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + cols)
        w.writerows(rows)
    spec.dump(out / SPEC_FILE)
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass
class ClipMeta:
    clip_id: str
    file: str
    machine: str
    section: str
    domain: str
    split: str
    condition: str
    attributes: dict[str, str]


class Dataset:
    """Clip metadata plus lazily computed, cached log-mel windows."""

    def __init__(self, root: Path, clips: list[ClipMeta], attribute_names: list[str],
                 spec: BenchmarkSpec | None = None):
        self.root = root
        self._clips = clips
        self._by_id = {c.clip_id: c for c in clips}
        self.attribute_names = attribute_names
        self.spec = spec
        self._logmel: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self._clips)

    @property
    def machines(self) -> list[str]:
        seen: list[str] = []
        for c in self._clips:
            if c.machine not in seen:
                seen.append(c.machine)
        return seen

    def sections(self, machine: str) -> list[str]:
        return sorted({c.section for c in self._clips if c.machine == machine})

    def clip(self, clip_id: str) -> ClipMeta:
        return self._by_id[clip_id]

    def clips(self, machine=None, section=None, domain=None, split=None, condition=None) -> list[ClipMeta]:
        def ok(c):
            return ((machine is None or c.machine == machine)
                    and (section is None or c.section == section)
                    and (domain is None or c.domain == domain)
                    and (split is None or c.split == split)
                    and (condition is None or c.condition == condition))
        return [c for c in self._clips if ok(c)]

    def logmel(self, clip_id: str) -> np.ndarray:
        if clip_id not in self._logmel:
            meta = self._by_id[clip_id]
            samples, sr = frontend.read_wav(self.root / meta.file)
            self._logmel[clip_id] = frontend.stft_logmel(samples, sample_rate=sr)
        return self._logmel[clip_id]

    def windows(self, clip_id: str) -> np.ndarray:
        return frontend.window_array(self.logmel(clip_id))

    def preload(self, clip_ids: Iterable[str] | None = None) -> None:
        for cid in clip_ids if clip_ids is not None else self._by_id:
            self.logmel(cid)

    def drop_cache(self) -> None:
        self._logmel.clear()

    def tasks(self, machine: str) -> list[TaskSpec]:
        """Auxiliary tasks for ``machine``: section first, then each attribute.

        Labels cover source-domain training normals.  Tasks with fewer than
        two classes are dropped with a warning.
        """
        pool = self.clips(machine=machine, domain="source", split="train", condition="normal")
        if not pool:
            raise DataError(f"machine {machine!r} has no source-domain training clips")
        tasks = []
        for name in ["section"] + self.attribute_names:
            labels = {c.clip_id: (c.section if name == "section" else c.attributes.get(name, ""))
                      for c in pool}
            labels = {k: v for k, v in labels.items() if v != ""}
            classes = set(labels.values())
            if len(classes) < 2:
                warnings.warn(f"{machine}: task {name!r} has {len(classes)} class(es); dropped",
                              stacklevel=2)
                continue
            tasks.append(TaskSpec.from_labels(name, labels))
        if not tasks or tasks[0].task_name != "section":
            raise DataError(f"machine {machine!r}: the section task needs at least two sections")
        return tasks


def load(dataset_dir: str | Path) -> Dataset:
    root = Path(dataset_dir)
    meta_path = root / METADATA_FILE
    if not meta_path.is_file():
        raise DataError(f"{root}: no {METADATA_FILE}")
    with open(meta_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{meta_path}: empty metadata") from None
        missing = [c for c in BASE_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{meta_path}: missing columns {missing}")
        attr_names = [c for c in header if c not in BASE_COLUMNS]
        clips = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{meta_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            clip = ClipMeta(
                clip_id=rec["clip_id"], file=rec["file"], machine=rec["machine"], section=rec["section"],
                domain=rec["domain"], split=rec["split"], condition=rec["condition"],
                attributes={a: rec[a] for a in attr_names},
            )
            if clip.domain not in DOMAINS:
                raise DataError(f"{meta_path}:{lineno}: bad domain {clip.domain!r}")
            if clip.split not in SPLITS:
                raise DataError(f"{meta_path}:{lineno}: bad split {clip.split!r}")
            if clip.condition not in CONDITIONS:
                raise DataError(f"{meta_path}:{lineno}: bad condition {clip.condition!r}")
            if clip.split == "train" and clip.condition != "normal":
                raise DataError(f"{meta_path}:{lineno}: training clip {clip.clip_id} is not normal")
            if not (root / clip.file).is_file():
                raise DataError(f"clip {clip.clip_id}: missing audio file {clip.file}")
            clips.append(clip)
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise DataError(f"{meta_path}: duplicate clip ids")
    spec = None
    if (root / SPEC_FILE).is_file():
        spec = BenchmarkSpec.from_file(root / SPEC_FILE)
        _check_counts(spec, clips)
    return Dataset(root, clips, attr_names, spec)


def _check_counts(spec: BenchmarkSpec, clips: list[ClipMeta]) -> None:
    c = spec.counts
    expected = {
        ("source", "train", "normal"): c.train_source,
        ("target", "train", "normal"): c.fewshot_target,
        ("source", "test", "normal"): c.test_normal_per_domain,
        ("target", "test", "normal"): c.test_normal_per_domain,
        ("source", "test", "anomalous"): c.test_anomalous_per_domain,
        ("target", "test", "anomalous"): c.test_anomalous_per_domain,
    }
    for m in spec.machines:
        for s in m.sections:
            for key, want in expected.items():
                got = sum(1 for x in clips if x.machine == m.name and x.section == s.section_id
                          and (x.domain, x.split, x.condition) == key)
                if got != want:
                    raise DataError(f"{m.name}/{s.section_id} {'/'.join(key)}: expected {want} clips, found {got}")
