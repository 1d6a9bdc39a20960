"""Feature-file I/O, manifests, frame sampling, batch assembly, and the
synthetic desk-scale corpus generator.

Feature files are a fixed little-endian binary layout ("OVFF"): 4-byte
magic, u32 version=1, u32 n, u32 c, then n*c float32 values row-major.
Manifests, catalogs, knowledge banks, and frame ground truth are JSON
sidecars; frame ground truth is stored at the sampled (1-in-stride) rate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .numkernel import as_matrix

MAGIC = b"OVFF"
VERSION = 1
MAX_ELEMENTS = 1 << 31  # refuse absurd n*c products before allocating

DEFAULT_STRIDE = 16
MAX_SEQ_LEN = 256


@dataclass
class FeatureSequence:
    """Per-frame embeddings (n x c, float64 in memory) plus sampling metadata."""

    features: np.ndarray
    stride: int = DEFAULT_STRIDE
    original_frame_count: int | None = None

    def __post_init__(self):
        self.features = as_matrix(self.features)
        if self.features.shape[0] < 1:
            raise ValueError("feature sequence must contain at least one frame")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.original_frame_count is None:
            self.original_frame_count = self.features.shape[0] * self.stride

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def c(self) -> int:
        return self.features.shape[1]


def write_features(seq: FeatureSequence, path) -> None:
    payload = seq.features.astype("<f4")
    n, c = payload.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, n, c))
        fh.write(payload.tobytes(order="C"))


def read_features(path, stride: int = DEFAULT_STRIDE) -> FeatureSequence:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < 16:
        raise DataError(f"truncated header in {path}")
    if blob[:4] != MAGIC:
        raise DataError(f"bad magic {blob[:4]!r} in {path} (expected {MAGIC!r})")
    version, n, c = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported version {version} in {path}")
    if n < 1 or c < 1 or n * c > MAX_ELEMENTS:
        raise DataError(f"implausible dimensions {n}x{c} in {path}")
    expected = 16 + 4 * n * c
    if len(blob) != expected:
        raise DataError(f"truncated payload in {path}: {len(blob)} bytes, expected {expected}")
    raw = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, c)
    return FeatureSequence(features=raw.astype(np.float64), stride=stride)


@dataclass
class VideoRecord:
    id: str
    feature_path: str
    label: str  # "normal" or an anomaly category name
    split: str  # "train" | "test"
    frame_gt: list[int] | None = None

    @property
    def is_abnormal(self) -> bool:
        return self.label != "normal"


@dataclass
class Manifest:
    videos: list[VideoRecord]
    feature_dim: int
    class_catalog_path: str
    knowledge_bank_path: str
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def split(self, name: str) -> list[VideoRecord]:
        return [v for v in self.videos if v.split == name]


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    for key in ("videos", "feature_dim", "class_catalog_path", "knowledge_bank_path"):
        if key not in raw:
            raise DataError(f"manifest {path} missing key {key!r}")
    root = path.parent
    videos = []
    seen = set()
    for entry in raw["videos"]:
        rec = VideoRecord(
            id=entry["id"],
            feature_path=entry["feature_path"],
            label=entry["label"],
            split=entry["split"],
            frame_gt=entry.get("frame_gt"),
        )
        if rec.id in seen:
            raise DataError(f"duplicate video id {rec.id!r} in {path}")
        seen.add(rec.id)
        if rec.split not in ("train", "test"):
            raise DataError(f"video {rec.id!r} has unknown split {rec.split!r}")
        if not (root / rec.feature_path).exists():
            raise DataError(f"video {rec.id!r} references missing file {rec.feature_path}")
        if rec.label == "normal" and rec.frame_gt is not None and any(rec.frame_gt):
            raise DataError(f"normal video {rec.id!r} carries nonzero frame ground truth")
        videos.append(rec)
    for sidecar in (raw["class_catalog_path"], raw["knowledge_bank_path"]):
        if not (root / sidecar).exists():
            raise DataError(f"manifest {path} references missing sidecar {sidecar}")
    return Manifest(
        videos=videos,
        feature_dim=int(raw["feature_dim"]),
        class_catalog_path=raw["class_catalog_path"],
        knowledge_bank_path=raw["knowledge_bank_path"],
        root=root,
    )


def save_manifest(manifest: Manifest, path) -> None:
    payload = {
        "videos": [
            {k: v for k, v in asdict(rec).items() if v is not None} for rec in manifest.videos
        ],
        "feature_dim": manifest.feature_dim,
        "class_catalog_path": manifest.class_catalog_path,
        "knowledge_bank_path": manifest.knowledge_bank_path,
    }
    Path(path).write_text(json.dumps(payload, indent=1))


# ---------------------------------------------------------------------------
# frame sampling


def stratified_indices(n: int, max_len: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per equal bin of [0, n); order-preserving."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if n <= max_len:
        return np.arange(n)
    edges = (np.arange(max_len + 1) * n) // max_len
    return np.array([int(rng.integers(edges[i], edges[i + 1])) for i in range(max_len)])


def sample_frames(
    seq: FeatureSequence, max_len: int = MAX_SEQ_LEN, rng: np.random.Generator | None = None
) -> FeatureSequence:
    """Cap a sequence at max_len frames via stratified-bin uniform sampling."""
    if seq.n <= max_len:
        return seq
    if rng is None:
        rng = np.random.default_rng(0)
    idx = stratified_indices(seq.n, max_len, rng)
    return FeatureSequence(
        features=seq.features[idx],
        stride=seq.stride,
        original_frame_count=seq.original_frame_count,
    )


# ---------------------------------------------------------------------------
# batch assembly


def epoch_batches(
    records: list[VideoRecord], batch_size: int, rng: np.random.Generator
) -> list[list[VideoRecord]]:
    """Class-balanced batches, sampled without replacement within the epoch."""
    if batch_size % 2 != 0:
        raise UsageError("batch_size must be even")
    half = batch_size // 2
    normals = [r for r in records if not r.is_abnormal]
    abnormals = [r for r in records if r.is_abnormal]
    if len(normals) < half or len(abnormals) < half:
        raise UsageError(
            f"need at least {half} normal and {half} abnormal videos, "
            f"got {len(normals)} / {len(abnormals)}"
        )
    normals = [normals[i] for i in rng.permutation(len(normals))]
    abnormals = [abnormals[i] for i in rng.permutation(len(abnormals))]
    n_batches = min(len(normals), len(abnormals)) // half
    batches = []
    for b in range(n_batches):
        lo, hi = b * half, (b + 1) * half
        batches.append(normals[lo:hi] + abnormals[lo:hi])
    return batches


def make_batch(
    records: list[VideoRecord], batch_size: int = 64, rng: np.random.Generator | None = None
) -> list[VideoRecord]:
    if rng is None:
        rng = np.random.default_rng(0)
    return epoch_batches(records, batch_size, rng)[0]


# ---------------------------------------------------------------------------
# synthetic corpus generator


@dataclass
class SyntheticConfig:
    """Desk-scale stand-in for a real feature corpus.

    Normal frames are isotropic noise around a shared mean direction; each
    anomaly class shifts one contiguous segment along its own unit direction
    by mean_separation * noise_scale. Class and knowledge embeddings are
    unit-normalized noisy copies of those directions.
    """

    c: int = 64
    n_classes_base: int = 3
    n_classes_novel: int = 2
    videos_per_class: int = 24
    n_normal: int = 48
    mean_separation: float = 3.0
    noise_scale: float = 1.0
    segment_length_range: tuple[int, int] = (6, 12)
    video_length_range: tuple[int, int] = (40, 64)
    seed: int = 7
    # plumbing knobs, not part of the corpus geometry
    test_fraction: float = 1.0 / 3.0
    knowledge_per_class: int = 4
    knowledge_normal_rows: int = 8
    embedding_noise: float = 0.3
    snippets_per_class: int = 4
    stride: int = DEFAULT_STRIDE

    def validate(self) -> None:
        # 0 produces a label-independent corpus, useful as a null control
        if self.mean_separation < 0:
            raise UsageError("mean_separation must be >= 0")
        if self.noise_scale < 0:
            raise UsageError("noise_scale must be >= 0")
        for lo, hi in (self.segment_length_range, self.video_length_range):
            if not (1 <= lo <= hi <= MAX_SEQ_LEN):
                raise UsageError(f"length range ({lo}, {hi}) must fit in [1, {MAX_SEQ_LEN}]")
        if self.segment_length_range[1] >= self.video_length_range[0]:
            raise UsageError("anomaly segments must be shorter than the shortest video")
        if self.n_classes_base < 1:
            raise UsageError("need at least one base class")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _noisy_unit(direction: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(direction.shape)
    return _unit(direction + scale * _unit(noise))


def gen_synthetic(cfg: SyntheticConfig, out_dir) -> Manifest:
    """Write a complete corpus (features, manifest, catalog, knowledge bank,
    snippet bank) under out_dir and return the loaded manifest."""
    cfg.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "snippets").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    normal_mean = _unit(rng.standard_normal(cfg.c))
    classes = [f"base_{i}" for i in range(cfg.n_classes_base)]
    classes += [f"novel_{i}" for i in range(cfg.n_classes_novel)]
    is_base = [True] * cfg.n_classes_base + [False] * cfg.n_classes_novel
    directions = {name: _unit(rng.standard_normal(cfg.c)) for name in classes}
    shift = cfg.mean_separation * cfg.noise_scale

    def normal_frames(length: int) -> np.ndarray:
        return normal_mean + cfg.noise_scale * rng.standard_normal((length, cfg.c))

    def segment_frames(length: int, name: str) -> np.ndarray:
        return normal_frames(length) + shift * directions[name]

    videos: list[VideoRecord] = []

    def emit(vid: str, frames: np.ndarray, label: str, split: str, gt: np.ndarray) -> None:
        rel = f"features/{vid}.ovff"
        write_features(FeatureSequence(frames, stride=cfg.stride), out / rel)
        videos.append(
            VideoRecord(
                id=vid,
                feature_path=rel,
                label=label,
                split=split,
                frame_gt=[int(x) for x in gt],
            )
        )

    n_normal_test = max(1, round(cfg.n_normal * cfg.test_fraction))
    for i in range(cfg.n_normal):
        length = int(rng.integers(cfg.video_length_range[0], cfg.video_length_range[1] + 1))
        split = "test" if i < n_normal_test else "train"
        emit(f"normal_{i:03d}", normal_frames(length), "normal", split, np.zeros(length, dtype=int))

    for name, base_flag in zip(classes, is_base):
        n_test = cfg.videos_per_class if not base_flag else max(
            1, round(cfg.videos_per_class * cfg.test_fraction)
        )
        for j in range(cfg.videos_per_class):
            length = int(rng.integers(cfg.video_length_range[0], cfg.video_length_range[1] + 1))
            seg_len = int(
                rng.integers(cfg.segment_length_range[0], cfg.segment_length_range[1] + 1)
            )
            start = int(rng.integers(0, length - seg_len + 1))
            frames = normal_frames(length)
            frames[start : start + seg_len] += shift * directions[name]
            gt = np.zeros(length, dtype=int)
            gt[start : start + seg_len] = 1
            split = "test" if j < n_test else "train"
            emit(f"{name}_{j:03d}", frames, name, split, gt)

    # class catalog: frozen unit-norm noisy copies of the class directions
    catalog_rows = np.stack(
        [_noisy_unit(directions[name], cfg.embedding_noise, rng) for name in classes]
    )
    write_features(FeatureSequence(catalog_rows, stride=1), out / "catalog.ovff")
    (out / "catalog.json").write_text(
        json.dumps(
            {"class_names": classes, "is_base": is_base, "embeddings_path": "catalog.ovff"},
            indent=1,
        )
    )

    # knowledge bank: noisy copies of the normal mean and of every class direction
    know_rows, groups, phrases = [], [], []
    for i in range(cfg.knowledge_normal_rows):
        know_rows.append(_noisy_unit(normal_mean, cfg.embedding_noise, rng))
        groups.append("normal")
        phrases.append(f"synthetic normal scene {i}")
    for name in classes:
        for i in range(cfg.knowledge_per_class):
            know_rows.append(_noisy_unit(directions[name], cfg.embedding_noise, rng))
            groups.append("abnormal")
            phrases.append(f"synthetic {name} cue {i}")
    write_features(FeatureSequence(np.stack(know_rows), stride=1), out / "knowledge.ovff")
    (out / "knowledge.json").write_text(
        json.dumps(
            {"groups": groups, "phrases": phrases, "embeddings_path": "knowledge.ovff"}, indent=1
        )
    )

    # snippet bank: anomaly-style segments for the potential-novel classes
    snippets = []
    for name, base_flag in zip(classes, is_base):
        if base_flag:
            continue
        for s in range(cfg.snippets_per_class):
            seg_len = int(
                rng.integers(cfg.segment_length_range[0], cfg.segment_length_range[1] + 1)
            )
            sid = f"snippet_{name}_{s:02d}"
            rel = f"snippets/{sid}.ovff"
            write_features(
                FeatureSequence(segment_frames(seg_len, name), stride=cfg.stride), out / rel
            )
            snippets.append({"id": sid, "path": rel, "category": name, "source": "synthetic-fixture"})
    (out / "snippet_bank.json").write_text(json.dumps({"snippets": snippets}, indent=1))

    manifest = Manifest(
        videos=videos,
        feature_dim=cfg.c,
        class_catalog_path="catalog.json",
        knowledge_bank_path="knowledge.json",
        root=out,
    )
    save_manifest(manifest, out / "manifest.json")
    return load_manifest(out / "manifest.json")
