"""Gradient verification suite: every tape primitive and both composite
losses against central finite differences on random micro-instances.

Used by the command-line gradcheck and by the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import losses, numkernel as nk
from .model import ClassCatalog, KnowledgeBank, ModelConfig, ModelParams, forward


def micro_catalog(rng: np.random.Generator, k: int = 3, c: int = 6) -> ClassCatalog:
    emb = rng.standard_normal((k, c))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    is_base = np.ones(k, dtype=bool)
    is_base[-1] = False
    return ClassCatalog(class_names=[f"class_{i}" for i in range(k)], embeddings=emb, is_base=is_base)


def micro_bank(rng: np.random.Generator, l: int = 5, c: int = 6) -> KnowledgeBank:
    groups = ["normal"] * (l // 2) + ["abnormal"] * (l - l // 2)
    return KnowledgeBank(
        embeddings=rng.standard_normal((l, c)),
        groups=groups,
        phrases=[f"phrase {i}" for i in range(l)],
    )


def primitive_checks(rng: np.random.Generator) -> dict[str, float]:
    """One finite-difference check per tape primitive.

    Weight constants are drawn up front: the loss closures must be
    deterministic, or the finite differences are meaningless.
    """
    r = lambda *s: rng.standard_normal(s)
    w23, w33, w34, w35, w43, w45, w26, w36, w31, w42, w4 = (
        r(2, 3), r(3, 3), r(3, 4), r(3, 5), r(4, 3), r(4, 5), r(2, 6), r(3, 6), r(3, 1), r(4, 2), r(4),
    )
    idx_rows = np.array([0, 2, 2])
    idx_cols = np.array([1, 3, 1])
    idx_along = rng.integers(0, 5, size=(4, 2))

    cases = {
        "add_sub": ({"a": r(3, 4), "b": r(4)}, lambda p: nk.vsum((p["a"] + p["b"]) * (p["a"] - p["b"]))),
        "mul_div": ({"a": r(3, 4), "b": r(3, 4) + 3.0}, lambda p: nk.vsum(p["a"] * p["b"] / (p["b"] + 2.0))),
        "neg": ({"a": r(2, 3)}, lambda p: nk.vsum(-p["a"] * w23)),
        "matmul": ({"a": r(3, 4), "b": r(4, 5)}, lambda p: nk.vsum(nk.matmul_v(p["a"], p["b"]) * w35)),
        "transpose": ({"a": r(3, 4)}, lambda p: nk.vsum(nk.transpose(p["a"]) * w43)),
        "reshape": ({"a": r(3, 4)}, lambda p: nk.vsum(nk.reshape(p["a"], (2, 6)) * w26)),
        "concat": ({"a": r(4, 2), "b": r(4, 3)}, lambda p: nk.vsum(nk.concat_cols(p["a"], p["b"]) * w45)),
        "row_softmax": ({"a": r(4, 5)}, lambda p: nk.vsum(nk.row_softmax_v(p["a"]) * w45)),
        "sigmoid": ({"a": r(3, 4)}, lambda p: nk.vsum(nk.sigmoid_v(p["a"]) * w34)),
        "gelu": ({"a": 2.0 * r(3, 4)}, lambda p: nk.vsum(nk.gelu_v(p["a"]) * w34)),
        "layer_norm": (
            {"x": 2.0 * r(3, 6), "g": 1.0 + 0.2 * r(6), "b": r(6)},
            lambda p: nk.vsum(nk.layer_norm_v(p["x"], p["g"], p["b"]) * w36),
        ),
        "log": ({"a": np.abs(r(3, 3)) + 0.5}, lambda p: nk.vsum(nk.log_v(p["a"]))),
        "sqrt": ({"a": np.abs(r(3, 3)) + 0.5}, lambda p: nk.vsum(nk.sqrt_v(p["a"]))),
        "clip": ({"a": 3.0 * r(3, 3)}, lambda p: nk.vsum(nk.clip_v(p["a"], -1.0, 1.0))),
        "sum_mean": (
            {"a": r(3, 4)},
            lambda p: nk.vsum(nk.vmean(p["a"], axis=1, keepdims=True) * w31)
            + nk.vsum(nk.vsum(p["a"], axis=0) * w4),
        ),
        "take_rows": ({"a": r(4, 3)}, lambda p: nk.vsum(nk.take_rows(p["a"], idx_rows) * w33)),
        "take_cols": ({"a": r(4, 5)}, lambda p: nk.vsum(nk.take_cols(p["a"], idx_cols) * w43)),
        "take_along_cols": ({"a": r(4, 5)}, lambda p: nk.vsum(nk.take_along_cols(p["a"], idx_along) * w42)),
    }
    return {name: nk.grad_check(fn, params) for name, (params, fn) in cases.items()}


def _micro_videos(rng: np.random.Generator, c: int, with_gt: bool):
    vids = []
    for is_abnormal in (False, True):
        n = int(rng.integers(3, 10))
        feats = rng.standard_normal((n, c))
        gt = None
        if with_gt:
            gt = np.zeros(n, dtype=int)
            lo = int(rng.integers(0, n - 1))
            gt[lo : lo + max(1, n // 3)] = 1
        vids.append((feats, is_abnormal, gt))
    return vids


def train_loss_check(rng: np.random.Generator, c: int = 6, l: int = 5, k: int = 3) -> float:
    """Finite-difference check of the full weak-supervision loss."""
    catalog = micro_catalog(rng, k, c)
    bank = micro_bank(rng, l, c)
    mcfg = ModelConfig(sigma=0.8, hidden=4)
    params = ModelParams.random(c, l, mcfg, rng)
    vids = _micro_videos(rng, c, with_gt=False)

    def loss_fn(pv):
        tape = next(iter(pv.values())).tape
        outs = [
            (forward(tape, feats, pv, catalog, mcfg), "class_0" if ab else "normal", ab)
            for feats, ab, _ in vids
        ]
        total, _ = losses.train_loss(outs, catalog, bank, pv["knowledge"])
        return total

    return nk.grad_check(loss_fn, params.tensors())


def tune_loss_check(rng: np.random.Generator, c: int = 6, l: int = 5, k: int = 3) -> float:
    """Finite-difference check of the full fine-tuning loss."""
    catalog = micro_catalog(rng, k, c)
    mcfg = ModelConfig(sigma=0.8, hidden=4)
    params = ModelParams.random(c, l, mcfg, rng)
    pseudo = [(f, g) for f, _, g in _micro_videos(rng, c, with_gt=True)]
    base = [f for f, _, _ in _micro_videos(rng, c, with_gt=False)]
    novel_name = catalog.class_names[-1]
    base_name = catalog.class_names[0]
    lam = 0.5

    def loss_fn(pv):
        tape = next(iter(pv.values())).tape
        pseudo_outs = [
            (forward(tape, feats, pv, catalog, mcfg), novel_name, gt) for feats, gt in pseudo
        ]
        base_outs = [(forward(tape, feats, pv, catalog, mcfg), base_name) for feats in base]
        total, _ = losses.tune_loss(pseudo_outs, base_outs, catalog, lam)
        return total

    return nk.grad_check(loss_fn, params.tensors())


def run_suite(trials: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst finite-difference error per check over ``trials`` random instances."""
    worst: dict[str, float] = {}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for name, err in primitive_checks(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
        worst["train_loss"] = max(worst.get("train_loss", 0.0), train_loss_check(rng))
        worst["tune_loss"] = max(worst.get("tune_loss", 0.0), tune_loss_check(rng))
    return worst
