"""Average precision and the corruption sweep.

A sweep walks corruption kinds x corruption levels x fusion schemes x model
variants. The corrupted subset at each level is a prefix of one seeded video
order, so higher levels corrupt the same videos as lower levels plus more.
Raw scenes are corrupted and re-featurized; features are never perturbed
directly.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .core import ContractError, Modality
from .corruptions import (
    ALLOWED_FRACTIONS,
    AUDIO_KINDS,
    DEFAULT_SEVERITY,
    VISUAL_KINDS,
    CorruptionKind,
    check_fraction,
    check_severity,
    corrupt_scene,
    corruption_order,
    subset_size,
)
from .detector import Mode, TrainedModel
from .extractors import ExtractorConfig, extract_bag
from .fusion import ModalityGate, Scheme, score_video
from .seeding import derive_seed_sequence

REPORT_HEADER = ["kind", "modality", "level", "scheme", "variant", "ap", "n_segments"]
VARIANT_MODES = {"shared": Mode.SHARED, "padding": Mode.PADDING, "concat": Mode.CONCAT}
MIXED = {"mixed_visual": VISUAL_KINDS, "mixed_audio": AUDIO_KINDS}
MISSING = {"missing_audio": Modality.AUDIO, "missing_visual": Modality.VISUAL}


def average_precision(scores, truth) -> float:
    """Mean over positives of the precision at each positive's rank.

    Items are ranked by descending score; equal scores keep their input order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise ContractError(f"scores ({scores.size}) and truth ({truth.size}) differ in length")
    positives = truth.astype(bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, n_pos + 1) / ranks
    return float(precisions.mean())


def compatible(scheme, variant) -> bool:
    return (Scheme(scheme) is Scheme.CONCAT) == (VARIANT_MODES[variant] is Mode.CONCAT)


def evaluate(bags, model: TrainedModel, scheme, gates: Optional[Mapping[Modality, ModalityGate]] = None):
    """Segment-level AP of fused scores over all segments of ``bags``."""
    scores, truth = [], []
    for bag in bags:
        if bag.segment_truth is None:
            raise ContractError(f"bag {bag.id!r} has no segment_truth; evaluation needs it")
        scores.append(score_video(bag, model, scheme, gates))
        truth.append(bag.segment_truth)
    return average_precision(np.concatenate(scores), np.concatenate(truth))


@dataclass(frozen=True)
class KindSpec:
    """One sweep row family: a single kind, a dual-modality pair, a mixture or a removal."""

    name: str
    kinds: tuple = ()
    mixed: bool = False
    missing: Optional[Modality] = None

    @property
    def modality(self) -> str:
        if self.missing is not None:
            return self.missing.value
        mods = {k.modality for k in self.kinds}
        if mods == {Modality.AUDIO, Modality.VISUAL}:
            return "audio+visual"
        return next(iter(mods)).value

    @classmethod
    def parse(cls, text: str) -> "KindSpec":
        key = text.strip().lower()
        if key in MIXED:
            return cls(key, MIXED[key], mixed=True)
        if key in MISSING:
            return cls(key, (), missing=MISSING[key])
        parts = [CorruptionKind.parse(p) for p in key.split("+")]
        if len(parts) > 2 or (len(parts) == 2 and parts[0].modality is parts[1].modality):
            raise ContractError(f"combined kinds need one visual and one audio kind, got {text!r}")
        name = "+".join(p.value for p in parts)
        return cls(name, tuple(parts))


ALL_KINDS = tuple(k.value for k in VISUAL_KINDS + AUDIO_KINDS)


@dataclass(frozen=True)
class SweepConfig:
    kinds: tuple = ALL_KINDS
    levels: tuple = ALLOWED_FRACTIONS
    severity: int = DEFAULT_SEVERITY
    schemes: tuple = ("naive", "dynamic", "concat")
    variants: tuple = ("shared", "padding", "concat")
    seed: int = 0

    def validate(self):
        if not self.kinds or not self.levels:
            raise ContractError("sweep needs at least one kind and one level")
        for lvl in self.levels:
            check_fraction(lvl)
        check_severity(self.severity)
        for s in self.schemes:
            Scheme(s)
        for v in self.variants:
            if v not in VARIANT_MODES:
                raise ContractError(f"unknown model variant {v!r}")
        for k in self.kinds:
            KindSpec.parse(k)

    def methods(self):
        """(scheme, variant) pairs to evaluate; a concat scheme only pairs with the concat model."""
        return [(s, v) for s in self.schemes for v in self.variants if compatible(s, v)]


@dataclass(frozen=True)
class SweepRow:
    kind: str
    modality: str
    level: float
    scheme: str
    variant: str
    ap: float
    n_segments: int


@dataclass
class SweepReport:
    rows: List[SweepRow] = field(default_factory=list)

    def lookup(self, kind, level, scheme, variant) -> float:
        for r in self.rows:
            if r.kind == kind and abs(r.level - level) < 1e-12 and r.scheme == scheme and r.variant == variant:
                return r.ap
        raise KeyError((kind, level, scheme, variant))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for r in self.rows:
                writer.writerow([r.kind, r.modality, f"{r.level:.1f}", r.scheme, r.variant, f"{r.ap:.6f}", r.n_segments])

    @classmethod
    def from_csv(cls, path) -> "SweepReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != REPORT_HEADER:
                raise ContractError(f"unexpected report header {reader.fieldnames}")
            rows = [
                SweepRow(r["kind"], r["modality"], float(r["level"]), r["scheme"], r["variant"],
                         float(r["ap"]), int(r["n_segments"]))
                for r in reader
            ]
        return cls(rows)


def video_seed(seed, video_id) -> int:
    """Per-video corruption seed."""
    return int(derive_seed_sequence(seed, "video-corruption", video_id).generate_state(1, np.uint64)[0])


def thread_count(default=1) -> int:
    value = os.environ.get("ROBUSTA_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise ContractError(f"ROBUSTA_THREADS must be an integer, got {value!r}") from None


def _corrupted_bag(scene, clean_bag, spec: KindSpec, position, severity, seed, ext_cfg):
    if spec.missing is Modality.AUDIO:
        return clean_bag.replace(audio=None)
    if spec.missing is Modality.VISUAL:
        return clean_bag.replace(visual=None)
    kinds = (spec.kinds[position % len(spec.kinds)],) if spec.mixed else spec.kinds
    vseed = video_seed(seed, scene.id)
    for kind in kinds:
        scene = corrupt_scene(scene, kind, severity, vseed)
    return extract_bag(scene, ext_cfg, with_truth=True)


def run_sweep(
    cfg: SweepConfig,
    test_scenes: Sequence,
    models: Dict[str, TrainedModel],
    gates: Optional[Mapping[Modality, ModalityGate]] = None,
    ext_cfg: ExtractorConfig = ExtractorConfig(),
    clean_bags: Optional[Sequence] = None,
    threads: Optional[int] = None,
) -> SweepReport:
    """Evaluate every (kind, level, scheme, variant) cell on corrupted copies of ``test_scenes``.

    ``models`` maps variant names (``shared``, ``padding``, ``concat``) to
    trained detectors. Scheme/variant pairs that cannot work together are
    skipped (see :meth:`SweepConfig.methods`).
    """
    cfg.validate()
    threads = threads or thread_count()
    methods = cfg.methods()
    for _, variant in methods:
        if variant not in models:
            raise ContractError(f"no model for variant {variant!r}")
        if models[variant].mode is not VARIANT_MODES[variant]:
            raise ContractError(f"model for variant {variant!r} was trained as {models[variant].mode.value}")
    ids = [s.id for s in test_scenes]
    order = corruption_order(ids, cfg.seed)
    position = {vid: i for i, vid in enumerate(order)}
    by_id = {s.id: s for s in test_scenes}

    def run_parallel(fn, items):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    if clean_bags is None:
        clean_bags = run_parallel(lambda s: extract_bag(s, ext_cfg, with_truth=True), test_scenes)
    clean = {b.id: b for b in clean_bags}
    n_segments = sum(b.segment_count for b in clean_bags)
    max_count = max(subset_size(len(ids), lvl) for lvl in cfg.levels)

    report = SweepReport()
    for kind_text in cfg.kinds:
        spec = KindSpec.parse(kind_text)
        targets = order[:max_count]
        corrupted_list = run_parallel(
            lambda vid: _corrupted_bag(by_id[vid], clean[vid], spec, position[vid], cfg.severity, cfg.seed, ext_cfg),
            targets,
        )
        corrupted = dict(zip(targets, corrupted_list))
        for level in cfg.levels:
            chosen = set(order[: subset_size(len(ids), level)])
            bags = [corrupted[vid] if vid in chosen else clean[vid] for vid in ids]
            for scheme, variant in methods:
                ap = evaluate(bags, models[variant], scheme, gates)
                report.rows.append(
                    SweepRow(spec.name, spec.modality, check_fraction(level), scheme, variant, ap, n_segments)
                )
    return report
