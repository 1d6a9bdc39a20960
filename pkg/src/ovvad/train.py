"""Two-stage optimization: weakly supervised training on balanced batches,
then fine-tuning with pseudo novel anomalies mixed with base anomalies.

Every run is seed-deterministic: batches, parameter init, and pseudo/base
draws all flow from one generator, and reductions follow manifest order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .data import (
    Manifest,
    epoch_batches,
    read_features,
    sample_frames,
)
from .errors import NumericalError, UsageError
from .losses import LossBreakdown, train_loss, tune_loss
from .model import (
    ClassCatalog,
    KnowledgeBank,
    ModelConfig,
    ModelParams,
    forward,
    load_class_catalog,
    load_knowledge_bank,
    param_vars,
)
from .nas import PseudoVideo
from .numkernel import Tape


@dataclass
class TrainConfig:
    stage1_lr: float = 1e-4
    stage1_epochs: int = 20
    batch_size: int = 64
    stage2_lr: float = 1e-5
    stage2_epochs: int = 10
    pseudo_per_batch: int = 10
    base_per_batch: int = 10
    lam: float = 0.1
    sigma: float = 0.07
    hidden: int | None = None
    use_ta: bool = True
    use_ski: bool = True
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_len: int = 256

    def __post_init__(self):
        # lr 0 is allowed: it makes training a provable no-op, which the
        # determinism tests rely on
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise UsageError("learning rates must be >= 0")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise UsageError("epoch counts must be positive")
        if self.lam < 0:
            raise UsageError("lambda must be >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            sigma=self.sigma, hidden=self.hidden, use_ta=self.use_ta, use_ski=self.use_ski
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown train config keys: {sorted(unknown)}")
        if "betas" in raw:
            raw = dict(raw, betas=tuple(raw["betas"]))
        return cls(**raw)


class TrainingDiverged(NumericalError):
    """Non-finite loss; carries the last finite parameters."""

    def __init__(self, message: str, params: ModelParams, history: list[LossBreakdown]):
        super().__init__(message)
        self.params = params
        self.history = history


def _mean_breakdown(rows: list[LossBreakdown]) -> LossBreakdown:
    def avg(name: str) -> float | None:
        vals = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else None

    return LossBreakdown(
        l_bce=avg("l_bce"),
        l_ce=avg("l_ce"),
        l_sim_n=avg("l_sim_n"),
        l_sim_a=avg("l_sim_a"),
        l_bce2=avg("l_bce2"),
        l_ce2=avg("l_ce2"),
        total=avg("total") or 0.0,
    )


def _load_train_features(manifest: Manifest, cfg: TrainConfig, rng) -> dict[str, object]:
    cache = {}
    for rec in manifest.split("train"):
        seq = read_features(manifest.resolve(rec.feature_path))
        cache[rec.id] = sample_frames(seq, cfg.max_len, rng)
    return cache


def _step(params: ModelParams, tape: Tape, pv, total, state) -> None:
    tape.backward(total)
    grads = {name: tape.gradient(pv[name]) for name in pv}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r}")
    tensors = params.tensors()
    nk.adamw_step(tensors, grads, state)


def train_stage1(
    manifest: Manifest, cfg: TrainConfig
) -> tuple[ModelParams, list[LossBreakdown]]:
    """Weakly supervised stage: balanced batches, composite weak loss."""
    catalog = load_class_catalog(manifest.resolve(manifest.class_catalog_path))
    bank = load_knowledge_bank(manifest.resolve(manifest.knowledge_bank_path))
    mcfg = cfg.model_config()
    rng = np.random.default_rng([cfg.seed, 1])
    cache = _load_train_features(manifest, cfg, rng)
    train_records = manifest.split("train")

    params = ModelParams.init(manifest.feature_dim, bank, mcfg, rng)
    state = nk.adamw_init(
        params.tensors(), lr=cfg.stage1_lr, betas=cfg.betas, eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    history: list[LossBreakdown] = []
    last_good = params.copy()
    for epoch in range(cfg.stage1_epochs):
        rows = []
        for batch in epoch_batches(train_records, cfg.batch_size, rng):
            tape = Tape()
            pv = param_vars(tape, params)
            outputs = [
                (forward(tape, cache[rec.id], pv, catalog, mcfg), rec.label, rec.is_abnormal)
                for rec in batch
            ]
            total, breakdown = train_loss(outputs, catalog, bank, pv["knowledge"])
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", last_good, history
                )
            last_good = params.copy()
            _step(params, tape, pv, total, state)
            rows.append(breakdown)
        history.append(_mean_breakdown(rows))
    return params, history


def finetune_stage2(
    params: ModelParams,
    pseudo_set: list[PseudoVideo],
    manifest: Manifest,
    cfg: TrainConfig,
) -> tuple[ModelParams, list[LossBreakdown]]:
    """Fine-tune on pseudo novel anomalies plus (optionally) base anomalies.

    One epoch is one pass over the pseudo set; base videos are drawn with
    replacement. base_per_batch=0 with lam=0 gives the pseudo-only arm.
    """
    if not pseudo_set:
        raise UsageError("pseudo set is empty")
    for pv_ in pseudo_set:
        if pv_.frame_gt is None:
            raise UsageError("pseudo video lacks frame-level labels")
    catalog = load_class_catalog(manifest.resolve(manifest.class_catalog_path))
    mcfg = cfg.model_config()
    rng = np.random.default_rng([cfg.seed, 2])
    cache = _load_train_features(manifest, cfg, rng)
    base_pool = [r for r in manifest.split("train") if r.is_abnormal]
    if cfg.base_per_batch > 0 and not base_pool:
        raise UsageError("no base anomaly videos available for fine-tuning")

    params = params.copy()
    state = nk.adamw_init(
        params.tensors(), lr=cfg.stage2_lr, betas=cfg.betas, eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    history: list[LossBreakdown] = []
    last_good = params.copy()
    for epoch in range(cfg.stage2_epochs):
        order = rng.permutation(len(pseudo_set))
        rows = []
        for lo in range(0, len(order), cfg.pseudo_per_batch):
            chunk = [pseudo_set[i] for i in order[lo : lo + cfg.pseudo_per_batch]]
            base_batch = (
                [base_pool[int(i)] for i in rng.integers(0, len(base_pool), cfg.base_per_batch)]
                if cfg.base_per_batch > 0
                else []
            )
            tape = Tape()
            pv = param_vars(tape, params)
            pseudo_outputs = [
                (forward(tape, p.features, pv, catalog, mcfg), p.category, p.frame_gt)
                for p in chunk
            ]
            base_outputs = [
                (forward(tape, cache[rec.id], pv, catalog, mcfg), rec.label)
                for rec in base_batch
            ]
            total, breakdown = tune_loss(pseudo_outputs, base_outputs, catalog, cfg.lam)
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at fine-tune epoch {epoch}", last_good, history
                )
            last_good = params.copy()
            _step(params, tape, pv, total, state)
            rows.append(breakdown)
        history.append(_mean_breakdown(rows))
    return params, history


HISTORY_COLUMNS = ["epoch", "l_bce", "l_ce", "l_sim_n", "l_sim_a", "l_bce2", "l_ce2", "total"]


def save_history_csv(history: list[LossBreakdown], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for epoch, row in enumerate(history):
            vals = row.as_row()
            writer.writerow(
                [epoch] + ["" if vals[c] is None else f"{vals[c]:.8f}" for c in HISTORY_COLUMNS[1:]]
            )
