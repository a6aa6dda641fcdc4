"""End-to-end stages shared by the CLI: data, pretraining, finetuning, evaluation."""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time

import numpy as np

from . import tensor as tn
from .config import RunConfig
from .data import (generate_synthetic_dataset, preprocess_sequence, segments_from_labels,
                   split_dataset)
from .errors import ConfigError
from .evaluation import (EvalReport, detect, knn_frame_classify, map_report, normalize_rows)
from .fusion import LocalizationModel, build_model, finetune
from .pretrain import PretrainState, init_pretrain, pretrain

logger = logging.getLogger(__name__)


def prepare(dataset) -> list:
    """Preprocess every sequence of a ``[(sequence, segments), ...]`` dataset."""
    return [preprocess_sequence(seq) for seq, _ in dataset]


def train_test(cfg: RunConfig, dataset):
    train, test = split_dataset(dataset, 1.0 - cfg.eval.test_fraction)
    if not train or not test:
        raise ConfigError(f"split of {len(dataset)} sequences left an empty side")
    return prepare(train), prepare(test)


def run_pretrain(cfg: RunConfig, sequences, on_step=None) -> tuple[PretrainState, list]:
    state = init_pretrain(cfg.encoder, cfg.pretrain, cfg.run.seed)
    history = pretrain(sequences, state, cfg.augment, cfg.run.seed, on_step=on_step)
    return state, history


def random_encoder(cfg: RunConfig) -> PretrainState:
    return init_pretrain(cfg.encoder, cfg.pretrain, cfg.run.seed)


def run_finetune(cfg: RunConfig, encoder_params, adjacency, sequences,
                 on_step=None) -> tuple[LocalizationModel, list]:
    model = build_model(cfg.encoder, cfg.fusion, cfg.data.num_classes, encoder_params,
                        cfg.run.seed, adjacency)
    history = finetune(sequences, model, cfg.finetune, cfg.run.seed, on_step=on_step)
    return model, history


def _ground_truth(sequences) -> list:
    gts = []
    for v, seq in enumerate(sequences):
        gts += segments_from_labels(seq.frame_labels, v)
    return gts


def _report(cfg: RunConfig, probs_per_seq, sequences) -> EvalReport:
    preds = []
    for v, probs in enumerate(probs_per_seq):
        preds += detect(probs, cfg.eval.segment_thresholds, cfg.eval.nms_iou, video=v)
    classes = list(range(1, cfg.data.num_classes + 1))
    return map_report(preds, _ground_truth(sequences), cfg.eval.tiou_thresholds, classes)


def evaluate_linear(cfg: RunConfig, model: LocalizationModel, test) -> EvalReport:
    return _report(cfg, [model.probabilities(s.joints[None])[0] for s in test], test)


def evaluate_knn(cfg: RunConfig, model: LocalizationModel, train, test) -> EvalReport:
    """Frozen-feature KNN over fused frame features (training frames subsampled)."""
    stride = cfg.finetune.knn_stride
    with tn.no_grad():
        bank = [model.features(s.joints[None], grad=False).data[0][::stride] for s in train]
    feats = normalize_rows(np.concatenate(bank))
    labels = np.concatenate([s.frame_labels[::stride] for s in train])
    probs = []
    for s in test:
        with tn.no_grad():
            f = normalize_rows(model.features(s.joints[None], grad=False).data[0])
        _, scores = knn_frame_classify(feats, labels, f, cfg.finetune.knn_k, cfg.data.num_classes + 1)
        probs.append(scores)
    return _report(cfg, probs, test)


def evaluate(cfg: RunConfig, model: LocalizationModel, train, test) -> EvalReport:
    if cfg.eval.protocol == "knn":
        return evaluate_knn(cfg, model, train, test)
    return evaluate_linear(cfg, model, test)


# ---------------------------------------------------------------------------
# directional experiment

ARMS = ("random", "global", "dense")


def arm_config(base: RunConfig, arm: str, seed: int) -> RunConfig:
    cfg = dataclasses.replace(base)
    cfg.run = dataclasses.replace(base.run, seed=seed)
    cfg.data = dataclasses.replace(base.data, seed=seed)
    cfg.finetune = dataclasses.replace(base.finetune, mode="linear")
    cfg.eval = dataclasses.replace(base.eval, protocol="linear")
    if arm == "global":
        cfg.pretrain = dataclasses.replace(base.pretrain, lam=0.0, dense_loss=False)
    elif arm == "dense":
        cfg.pretrain = dataclasses.replace(base.pretrain, dense_loss=True)
    elif arm != "random":
        raise ConfigError(f"unknown arm {arm!r}")
    return cfg


def run_arm(base: RunConfig, arm: str, seed: int, dataset=None) -> dict:
    cfg = arm_config(base, arm, seed)
    if dataset is None:
        dataset = generate_synthetic_dataset(cfg.data)
    train, test = train_test(cfg, dataset)
    t0 = time.perf_counter()
    if arm == "random":
        state, history = random_encoder(cfg), []
    else:
        state, history = run_pretrain(cfg, train)
    model, ft_history = run_finetune(cfg, state.params.query, state.adjacency, train)
    report = evaluate_linear(cfg, model, test)
    logger.info("arm=%s seed=%d avg_mAP=%.4f (%.0fs)", arm, seed, report.avg_map, time.perf_counter() - t0)
    return {"arm": arm, "seed": seed, "report": report, "pretrain": history, "finetune": ft_history}


def summarize(results: list[dict], min_gap: float = 0.05) -> dict:
    """Median avg mAP per arm and the ordering checks."""
    med = {arm: statistics.median(r["report"].avg_map for r in results if r["arm"] == arm)
           for arm in ARMS if any(r["arm"] == arm for r in results)}
    checks = {}
    if set(med) == set(ARMS):
        checks = {
            "dense>=global": med["dense"] >= med["global"],
            "global>=random": med["global"] >= med["random"],
            "dense-random>=gap": med["dense"] - med["random"] >= min_gap,
        }
    return {"median_avg_map": med, "checks": checks, "passed": bool(checks) and all(checks.values())}


def run_experiment(base: RunConfig, seeds, on_result=None) -> tuple[list[dict], dict]:
    results = []
    for seed in seeds:
        cfg = arm_config(base, "random", seed)
        dataset = generate_synthetic_dataset(cfg.data)
        for arm in ARMS:
            r = run_arm(base, arm, seed, dataset)
            results.append(r)
            if on_result is not None:
                on_result(r)
    return results, summarize(results)
