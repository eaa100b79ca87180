"""In-memory end-to-end runs: generate, featurize, train, fit gates, sweep."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np

from .core import Modality
from .detector import TrainConfig, TrainedModel, train_concat, train_shared
from .evalbench import SweepConfig, SweepReport, run_sweep, thread_count
from .extractors import ExtractorConfig, extract_bag
from .fusion import ModalityGate
from .gmm import calibrate_sigmoid, fit_gmm, nll
from .synthgen import GenConfig, generate_dataset

log = logging.getLogger(__name__)


@dataclass
class GateConfig:
    k: int = 8
    max_iter: int = 200
    tol: float = 1e-6
    target_clean_weight: float = 0.45
    quantile: float = 0.95


def stack_modality(bags, modality: Modality):
    return np.concatenate([(b.audio if modality is Modality.AUDIO else b.visual).values for b in bags], axis=0)


def fit_gates(train_bags, cfg: GateConfig = GateConfig(), seed=0) -> Dict[Modality, ModalityGate]:
    """Fit one mixture per modality on clean training segments and calibrate its weight curve."""
    gates = {}
    for modality in (Modality.AUDIO, Modality.VISUAL):
        feats = stack_modality(train_bags, modality)
        gmm = fit_gmm(feats, cfg.k, seed, cfg.max_iter, cfg.tol, modality=modality)
        cal = calibrate_sigmoid(nll(feats, gmm), cfg.target_clean_weight, cfg.quantile)
        gates[modality] = ModalityGate(gmm, cal)
    return gates


@dataclass
class Benchmark:
    seed: int
    train_bags: list
    test_scenes: list
    test_bags: list
    models: Dict[str, TrainedModel]
    gates: Dict[Modality, ModalityGate]
    ext_cfg: ExtractorConfig = field(default_factory=ExtractorConfig)


def build_benchmark(
    seed: int,
    gen_cfg: GenConfig = GenConfig(),
    ext_cfg: ExtractorConfig = ExtractorConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    gate_cfg: GateConfig = GateConfig(),
    variants=("shared", "padding", "concat"),
    threads=None,
) -> Benchmark:
    threads = threads or thread_count()
    gen_cfg = replace(gen_cfg, seed=seed)
    train_cfg = replace(train_cfg, seed=seed)
    train_scenes, test_scenes = generate_dataset(gen_cfg, workers=threads)
    train_bags = [extract_bag(s, ext_cfg, with_truth=False) for s in train_scenes]
    test_bags = [extract_bag(s, ext_cfg, with_truth=True) for s in test_scenes]
    models = {}
    for variant in variants:
        if variant == "concat":
            models[variant] = train_concat(train_bags, train_cfg)
        else:
            models[variant] = train_shared(train_bags, train_cfg, "linear" if variant == "shared" else "pad")
        log.info("seed %d: trained %s, final loss %.4f", seed, variant, models[variant].history[-1])
    gates = fit_gates(train_bags, gate_cfg, seed)
    return Benchmark(seed, train_bags, test_scenes, test_bags, models, gates, ext_cfg)


def sweep_benchmark(bench: Benchmark, cfg: SweepConfig = SweepConfig(), threads=None) -> SweepReport:
    cfg = replace(cfg, seed=bench.seed)
    return run_sweep(cfg, bench.test_scenes, bench.models, bench.gates, bench.ext_cfg, bench.test_bags, threads)
