"""Batch experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import Dataset, generate_dataset, make_pairs, score_pairs, tar_at_far, verification_accuracy
from .federation import Engine, ProtocolKind, central_finetune, init_class_embedding, ClientState
from .model import FeatureExtractor, ModelParams, init_params, layer_shapes

SCHEMA_VERSION = 1
SWEEP_METHODS = ("finetune", "fce", "ipfed")


def initial_params(cfg: RunConfig) -> ModelParams:
    shapes = layer_shapes(cfg.input_dim, cfg.widths, cfg.d)
    return init_params(shapes, np.random.default_rng([cfg.seed, 7]))


class Evaluator:
    """Verification metrics on the held-out identities."""

    def __init__(self, dataset: Dataset, cfg: RunConfig):
        self.X = dataset.eval.X
        self.pairs = make_pairs(dataset.eval.labels, cfg.impostor_ratio, cfg.seed)
        self.far_target = cfg.far_target

    def scores(self, params: ModelParams):
        return score_pairs(FeatureExtractor(params), self.X, self.pairs)

    def __call__(self, params: ModelParams) -> dict:
        gen, imp = self.scores(params)
        res = tar_at_far(gen, imp, self.far_target)
        return {"tar_at_far": res.tar, "threshold": res.threshold, "accuracy": verification_accuracy(gen, imp)}


def pretrain(cfg: RunConfig, dataset: Dataset, callback=None) -> ModelParams:
    """Centralized cosine-margin training on the pre-training identities."""
    params = initial_params(cfg)
    if cfg.pretrain_epochs == 0:
        return params
    labels = dataset.pretrain.labels
    classes, y = np.unique(labels, return_inverse=True)
    rows = np.random.default_rng([cfg.seed, 8]).standard_normal((len(classes), cfg.d))
    params, _ = central_finetune(
        params, dataset.pretrain.X, y, rows, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.cosine_params, callback
    )
    return ModelParams(params.shapes, params.values, version=0)


@dataclass
class TrainingResult:
    protocol: str
    params: ModelParams
    embeddings: np.ndarray
    initial_embeddings: np.ndarray
    history: list
    reports: list = field(default_factory=list, repr=False)
    log: object = field(default=None, repr=False)


def _record(cfg, t, mean_pos, spread, degenerate, train_loss, metrics, wall_ms):
    return {
        "schema_version": SCHEMA_VERSION,
        "protocol": cfg.protocol,
        "round": t,
        "mean_positive_loss": mean_pos,
        "spreadout_loss": spread,
        "degenerate_pairs": degenerate,
        "train_loss": train_loss,
        "tar_at_far": None if metrics is None else metrics["tar_at_far"],
        "accuracy": None if metrics is None else metrics["accuracy"],
        "wall_clock_ms": wall_ms if cfg.record_timing else None,
    }


def run_training(cfg: RunConfig, params: ModelParams, dataset: Dataset, evaluator=None) -> TrainingResult:
    """Run ``cfg.rounds`` rounds of the configured protocol from ``params``."""
    should_eval = lambda t: evaluator is not None and cfg.eval_every > 0 and (t % cfg.eval_every == 0 or t == cfg.rounds)
    protocol = ProtocolKind(cfg.protocol)
    history = []

    if protocol is ProtocolKind.FINETUNE:
        fx = FeatureExtractor(params)
        init_w = np.stack([init_class_embedding(ClientState(i, X), fx) for i, X in zip(dataset.client_ids, dataset.clients)])
        X = np.concatenate(dataset.clients)
        y = np.repeat(np.arange(len(dataset.clients)), [len(c) for c in dataset.clients])
        clock = [time.perf_counter()]

        def cb(epoch, p, rows, loss):
            now = time.perf_counter()
            metrics = evaluator(p) if should_eval(epoch) else None
            history.append(_record(cfg, epoch, None, None, 0, loss, metrics, (now - clock[0]) * 1000.0))
            clock[0] = now

        rows = init_w
        if cfg.rounds:
            params, rows = central_finetune(params, X, y, init_w, cfg.rounds, cfg.eta, cfg.cosine_params, cb)
        params = ModelParams(params.shapes, params.values, version=cfg.rounds)
        return TrainingResult(cfg.protocol, params, rows, init_w, history)

    engine = Engine(
        protocol,
        params,
        dataset.clients,
        dataset.client_ids,
        positive=cfg.positive_params,
        spreadout=cfg.spreadout_params,
        eta=cfg.eta,
        local_steps=cfg.local_steps,
        seed=cfg.seed,
        transform_mode=cfg.transform_mode,
        client_fraction=cfg.client_fraction,
        record_timing=cfg.record_timing,
    )
    reports = []
    for t in range(1, cfg.rounds + 1):
        rep = engine.run_round()
        reports.append(rep)
        metrics = evaluator(engine.global_params) if should_eval(t) else None
        history.append(
            _record(cfg, t, rep.mean_positive_loss, rep.spreadout_loss, rep.degenerate_pairs, rep.mean_positive_loss, metrics, rep.wall_clock_ms)
        )
    return TrainingResult(cfg.protocol, engine.global_params, engine.embeddings(), engine.initial_embeddings, history, reports, engine.log)


def write_metrics_jsonl(history, path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def final_tar(cfg: RunConfig, pretrained: ModelParams, dataset: Dataset, evaluator: Evaluator) -> float:
    result = run_training(cfg.replace(eval_every=0), pretrained, dataset)
    return evaluator(result.params)["tar_at_far"]


def sweep_subjects(cfg: RunConfig, c_list, seeds=None, methods=SWEEP_METHODS):
    """Final TAR@FAR per (method, num_subjects), averaged over ``seeds``.

    Pre-training and evaluation identities do not depend on the number of
    clients, so each seed pre-trains once and reuses the extractor.
    """
    seeds = [cfg.seed] if seeds is None else list(seeds)
    tars = {(m, c): [] for m in methods for c in c_list}
    for seed in seeds:
        pretrained = None
        for c in c_list:
            run_cfg = cfg.replace(seed=seed, num_clients=c)
            ds = generate_dataset(run_cfg.dataset_spec, seed)
            if pretrained is None:
                pretrained = pretrain(run_cfg, ds)
            evaluator = Evaluator(ds, run_cfg)
            for m in methods:
                tars[(m, c)].append(final_tar(run_cfg.replace(protocol=m), pretrained, ds, evaluator))
    return [
        {"method": m, "num_subjects": c, "tar_at_far_0.1pct": 100.0 * float(np.mean(tars[(m, c)]))}
        for m in methods
        for c in c_list
    ]


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "num_subjects", "tar_at_far_0.1pct"])
        writer.writeheader()
        writer.writerows(rows)
