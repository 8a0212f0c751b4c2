"""Desk-scale comparison of the layer cascade against its baselines.

One synthetic task, one backbone. The LC and DSN runs share the same
initial-phase weights and differ only in the second phase: LC trains at
``rho``, DSN at 1.0 (no routing). MC trains stage by stage from scratch with
the same total epoch budget.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass

from .backbone import BackboneConfig, build_model
from .toolkit.data import gen_dataset, stack
from .training import TrainConfig, cascade_train, evaluate, initial_train, mc_baseline_train

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    n_train: int = 2000
    n_val: int = 200
    image_size: int = 64
    class_count: int = 4
    ambiguity: float = 0.2
    data_seed: int = 0
    seed: int = 0
    rho: float = 0.985
    lr: float = 0.02
    batch_size: int = 8
    epochs_initial: int = 6
    epochs_cascade: int = 6
    drop_every: int = 4
    run_baselines: bool = True

    def train_config(self, rho):
        return TrainConfig(batch_size=self.batch_size, lr_initial=self.lr, drop_every_initial=self.drop_every,
                           drop_every_cascade=self.drop_every, epochs_initial=self.epochs_initial,
                           epochs_cascade=self.epochs_cascade, rho=rho, seed=self.seed)

    def backbone(self, rho):
        return BackboneConfig(class_count=self.class_count, rho=rho, seed=self.seed)


def make_data(cfg: DeskConfig):
    train = stack(gen_dataset(cfg.n_train, cfg.image_size, cfg.class_count, cfg.data_seed, cfg.ambiguity))
    val = stack(gen_dataset(cfg.n_val, cfg.image_size, cfg.class_count, cfg.data_seed + 1, cfg.ambiguity))
    return train, val


def _summary(ev):
    return {k: ev[k] for k in ("miou", "exit_fractions", "flops")} | {"ious": ev["ious"].tolist()}


def run_desk(cfg: DeskConfig, data=None):
    """Train LC (and optionally DSN and MC). Returns models, data and metrics."""
    t0 = time.perf_counter()
    train, val = make_data(cfg) if data is None else data
    out = {"config": asdict(cfg), "train": train, "val": val, "models": {}, "metrics": {}}

    model = build_model(cfg.backbone(cfg.rho))
    initial_train(model, train, cfg.train_config(cfg.rho))
    snapshot = copy.deepcopy(model)
    out["models"]["initial"] = snapshot

    lc = copy.deepcopy(snapshot)
    # val each epoch: tracks how stage-1 exits evolve during cascade training
    _, out["lc_report"] = cascade_train(lc, train, cfg.train_config(cfg.rho), val)
    out["models"]["lc"] = lc
    out["metrics"]["lc"] = _summary(evaluate(lc, *val, rho=cfg.rho))
    out["metrics"]["lc_dense"] = _summary(evaluate(lc, *val, rho=1.0))
    log.info("LC done after %.0fs: %s", time.perf_counter() - t0, out["metrics"]["lc"])

    if cfg.run_baselines:
        dsn = copy.deepcopy(snapshot)
        dsn.rho = 1.0
        cascade_train(dsn, train, cfg.train_config(1.0))
        out["models"]["dsn"] = dsn
        out["metrics"]["dsn"] = _summary(evaluate(dsn, *val, rho=1.0))

        # default MC budget: the LC epoch total split evenly over stages
        mc = build_model(cfg.backbone(cfg.rho))
        mc_baseline_train(mc, train, cfg.train_config(cfg.rho))
        out["models"]["mc"] = mc
        out["metrics"]["mc"] = _summary(evaluate(mc, *val, rho=cfg.rho))
        log.info("baselines done after %.0fs", time.perf_counter() - t0)
    out["seconds"] = time.perf_counter() - t0
    return out
