"""The forward computation: distance-based temporal mixing, knowledge
injection, the GeLU detector head, soft-attention aggregation, and the
text-alignment classifier.

All stages run on the reverse-mode tape so one code path serves both
training and inference; inference just reads the cached forward values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .data import FeatureSequence, read_features
from .errors import DataError, NumericalError, UsageError
from .numkernel import Tape, Var

CKPT_MAGIC = b"OVCK"
DEFAULT_LOGIT_SCALE = 1.0 / 0.07  # contrastive temperature, fixed (not learned)


@dataclass
class KnowledgeBank:
    """Trainable phrase embeddings split into normal/abnormal groups."""

    embeddings: np.ndarray  # (l, c)
    groups: list[str]
    phrases: list[str]

    def __post_init__(self):
        self.embeddings = nk.as_matrix(self.embeddings)
        l = self.embeddings.shape[0]
        if len(self.groups) != l or len(self.phrases) != l:
            raise DataError("knowledge bank sidecar lengths disagree with the embedding rows")
        if l < 2 or not self.normal_idx.size or not self.abnormal_idx.size:
            raise DataError("knowledge bank needs at least one normal and one abnormal row")

    @property
    def normal_idx(self) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.groups) if g == "normal"], dtype=np.intp)

    @property
    def abnormal_idx(self) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.groups) if g == "abnormal"], dtype=np.intp)


@dataclass
class ClassCatalog:
    """Frozen per-class text embeddings plus base/novel flags."""

    class_names: list[str]
    embeddings: np.ndarray  # (k, c), unit-norm rows
    is_base: np.ndarray  # (k,) bool
    logit_scale: float = DEFAULT_LOGIT_SCALE

    def __post_init__(self):
        self.embeddings = nk.as_matrix(self.embeddings)
        self.is_base = np.asarray(self.is_base, dtype=bool)
        k = self.embeddings.shape[0]
        if len(self.class_names) != k or self.is_base.shape != (k,):
            raise DataError("catalog sidecar lengths disagree with the embedding rows")
        if not self.is_base.any():
            raise DataError("catalog needs at least one base class")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-3:
            raise DataError("catalog embeddings must be unit-norm per row")
        self.embeddings = self.embeddings / norms[:, None]

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise UsageError(f"unknown class {name!r}") from None


def load_knowledge_bank(path) -> KnowledgeBank:
    path = Path(path)
    raw = json.loads(path.read_text())
    emb = read_features(path.parent / raw["embeddings_path"], stride=1)
    return KnowledgeBank(embeddings=emb.features, groups=raw["groups"], phrases=raw["phrases"])


def load_class_catalog(path) -> ClassCatalog:
    path = Path(path)
    raw = json.loads(path.read_text())
    emb = read_features(path.parent / raw["embeddings_path"], stride=1)
    return ClassCatalog(
        class_names=raw["class_names"], embeddings=emb.features, is_base=np.array(raw["is_base"])
    )


@dataclass
class ModelConfig:
    """Structural knobs; these select which parameters exist, so they live
    outside ModelParams and inside the run configuration."""

    sigma: float = 0.07
    hidden: int | None = None  # None -> feature dim
    use_ta: bool = True
    use_ski: bool = True
    ln_eps: float = 1e-5

    def detector_input_dim(self, c: int) -> int:
        return 2 * c if self.use_ski else c

    def hidden_dim(self, c: int) -> int:
        return self.hidden if self.hidden is not None else c


@dataclass
class ModelParams:
    """Every trainable tensor, in checkpoint order."""

    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    prompt_offset: np.ndarray
    knowledge: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def init(
        cls,
        c: int,
        bank: KnowledgeBank,
        mcfg: ModelConfig,
        rng: np.random.Generator,
    ) -> "ModelParams":
        d_in = mcfg.detector_input_dim(c)
        h = mcfg.hidden_dim(c)
        return cls(
            ln_gamma=np.ones(c),
            ln_beta=np.zeros(c),
            w1=rng.standard_normal((d_in, h)) / np.sqrt(d_in),
            b1=np.zeros(h),
            # zero-initialized output layer: frame logits start at exactly 0
            w2=np.zeros((h, 1)),
            b2=np.zeros(1),
            prompt_offset=np.zeros(c),
            knowledge=bank.embeddings.copy(),
        )

    @classmethod
    def random(
        cls, c: int, l: int, mcfg: ModelConfig, rng: np.random.Generator
    ) -> "ModelParams":
        """Fully random parameters; used by gradient checks so every backward
        path is exercised."""
        d_in = mcfg.detector_input_dim(c)
        h = mcfg.hidden_dim(c)
        return cls(
            ln_gamma=1.0 + 0.3 * rng.standard_normal(c),
            ln_beta=0.3 * rng.standard_normal(c),
            w1=rng.standard_normal((d_in, h)) / np.sqrt(d_in),
            b1=0.1 * rng.standard_normal(h),
            w2=rng.standard_normal((h, 1)) / np.sqrt(h),
            b2=0.1 * rng.standard_normal(1),
            prompt_offset=0.2 * rng.standard_normal(c),
            knowledge=rng.standard_normal((l, c)) / np.sqrt(c),
        )


def param_vars(tape: Tape, params: ModelParams) -> dict[str, Var]:
    return {name: tape.leaf(arr, name=name) for name, arr in params.tensors().items()}


# ---------------------------------------------------------------------------
# forward stages


def build_adjacency(n: int, sigma: float) -> np.ndarray:
    """Proximity matrix H[i][j] = -|i-j| / sigma (symmetric, Toeplitz, zero diagonal)."""
    if sigma <= 0:
        raise UsageError("sigma must be > 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n, dtype=np.float64)
    return -np.abs(idx[:, None] - idx[None, :]) / sigma


_MIX_CACHE: dict[tuple[int, float], np.ndarray] = {}


def adjacency_mix(n: int, sigma: float) -> np.ndarray:
    """Row-softmax of the adjacency; cached per (n, sigma)."""
    key = (n, sigma)
    if key not in _MIX_CACHE:
        _MIX_CACHE[key] = nk.row_softmax(build_adjacency(n, sigma))
    return _MIX_CACHE[key]


def temporal_adapt(
    tape: Tape,
    features: np.ndarray,
    ln_gamma: Var,
    ln_beta: Var,
    sigma: float,
    ln_eps: float = 1e-5,
) -> Var:
    """Distance-weighted frame mixing followed by layer normalization.

    The mixing matrix is a constant given (n, sigma), so the product with the
    input features is folded before it enters the tape.
    """
    mixed = adjacency_mix(features.shape[0], sigma) @ features
    return nk.layer_norm_v(tape.leaf(mixed, name="x_mixed"), ln_gamma, ln_beta, eps=ln_eps)


def inject_knowledge(x_t: Var, knowledge: Var) -> Var:
    """Sigmoid-gated mixture of knowledge rows per frame: sigmoid(x K^T) K / l."""
    if x_t.shape[1] != knowledge.shape[1]:
        raise ValueError(
            f"feature dim {x_t.shape[1]} != knowledge dim {knowledge.shape[1]}"
        )
    l = knowledge.shape[0]
    gates = nk.sigmoid_v(x_t @ knowledge.T)
    return (gates @ knowledge) / float(l)


def detect(x_t: Var, f_know: Var | None, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    """Per-frame anomaly logits from the two-layer GeLU head. Returns (n, 1)."""
    z = nk.concat_cols(x_t, f_know) if f_know is not None else x_t
    hidden = nk.gelu_v(z @ w1 + b1)
    return hidden @ w2 + b2


def aggregate(p: Var, x_t: Var) -> Var:
    """Soft-attention pooling: softmax over frame logits weighting x_t rows."""
    if p.shape[0] != x_t.shape[0]:
        raise ValueError(f"logit count {p.shape[0]} != frame count {x_t.shape[0]}")
    attn = nk.row_softmax_v(p.reshape((1, p.shape[0])))
    return attn @ x_t


def classify(x_agg: Var, catalog: ClassCatalog, prompt_offset: Var) -> Var:
    """Scaled cosine similarity against prompt-shifted, re-normalized class rows."""
    e = prompt_offset + catalog.embeddings  # broadcast offset over rows
    norms = nk.sqrt_v(nk.vsum(e * e, axis=1, keepdims=True))
    e_unit = e / norms
    agg_norm = nk.sqrt_v(nk.vsum(x_agg * x_agg))
    if float(agg_norm.data) < 1e-12:
        raise NumericalError("degenerate aggregation: zero-norm video feature")
    return (x_agg @ e_unit.T) * (catalog.logit_scale / agg_norm)


@dataclass
class ForwardOutput:
    """All intermediates of one video's forward pass, as tape nodes."""

    p: Var  # (n, 1) frame logits
    x_t: Var  # (n, c)
    f_know: Var | None  # (n, c) when knowledge injection is enabled
    x_agg: Var  # (1, c)
    class_logits: Var  # (1, k)

    @property
    def n(self) -> int:
        return self.p.shape[0]


def forward(
    tape: Tape,
    seq: FeatureSequence | np.ndarray,
    pv: dict[str, Var],
    catalog: ClassCatalog,
    mcfg: ModelConfig,
) -> ForwardOutput:
    """Compose the full pipeline for one video."""
    features = seq.features if isinstance(seq, FeatureSequence) else np.asarray(seq, np.float64)
    if mcfg.use_ta:
        x_t = temporal_adapt(
            tape, features, pv["ln_gamma"], pv["ln_beta"], mcfg.sigma, ln_eps=mcfg.ln_eps
        )
    else:
        x_t = tape.leaf(features, name="x_f")
    f_know = inject_knowledge(x_t, pv["knowledge"]) if mcfg.use_ski else None
    p = detect(x_t, f_know, pv["w1"], pv["b1"], pv["w2"], pv["b2"])
    x_agg = aggregate(p, x_t)
    class_logits = classify(x_agg, catalog, pv["prompt_offset"])
    return ForwardOutput(p=p, x_t=x_t, f_know=f_know, x_agg=x_agg, class_logits=class_logits)


def run_inference(
    seq: FeatureSequence | np.ndarray,
    params: ModelParams,
    catalog: ClassCatalog,
    mcfg: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Frame logits (n,) and class logits (k,) as plain arrays."""
    tape = Tape()
    out = forward(tape, seq, param_vars(tape, params), catalog, mcfg)
    return out.p.data.reshape(-1).copy(), out.class_logits.data.reshape(-1).copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary container: u32 count, then per tensor
    {u16 name length, name, u8 rank, u32 dims..., float32 payload LE}."""
    tensors = params.tensors()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CKPT_MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        tensors[name] = arr.astype(np.float64)
    expected = {f.name for f in fields(ModelParams)}
    if set(tensors) != expected:
        raise DataError(f"checkpoint {path} tensors {sorted(tensors)} != expected {sorted(expected)}")
    return ModelParams(**tensors)
