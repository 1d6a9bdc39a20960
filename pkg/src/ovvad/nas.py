"""Feature-space synthesis of pseudo novel-anomaly videos: splice anomaly
snippet features into normal videos at a random position and keep exact
frame-level labels for the inserted region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSequence, MAX_SEQ_LEN, read_features, stratified_indices
from .errors import DataError, UsageError


@dataclass
class Snippet:
    id: str
    seq: FeatureSequence
    category: str
    source: str  # generated-image | generated-video | synthetic-fixture


@dataclass
class SnippetBank:
    snippets: list[Snippet]

    def by_category(self, category: str) -> list[Snippet]:
        return [s for s in self.snippets if s.category == category]

    @property
    def categories(self) -> list[str]:
        seen: list[str] = []
        for s in self.snippets:
            if s.category not in seen:
                seen.append(s.category)
        return seen


def load_snippet_bank(path) -> SnippetBank:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read snippet bank {path}: {exc}") from exc
    snippets = []
    for entry in raw["snippets"]:
        seq = read_features(path.parent / entry["path"])
        snippets.append(
            Snippet(id=entry["id"], seq=seq, category=entry["category"], source=entry["source"])
        )
    if not snippets:
        raise DataError(f"snippet bank {path} is empty")
    return SnippetBank(snippets=snippets)


def validate_against_catalog(bank: SnippetBank, class_names: list[str], is_base) -> None:
    """Every snippet category must be a declared potential-novel class."""
    novel = {name for name, base in zip(class_names, is_base) if not base}
    for s in bank.snippets:
        if s.category not in novel:
            raise DataError(
                f"snippet {s.id!r} category {s.category!r} is not a potential-novel class"
            )


@dataclass
class Provenance:
    normal_id: str
    snippet_id: str
    insert_index: int


@dataclass
class PseudoVideo:
    """A normal sequence with an inserted snippet and exact frame labels."""

    features: FeatureSequence
    frame_gt: np.ndarray  # 0/1 per sampled frame
    category: str
    provenance: Provenance


def splice_insert(
    normal: FeatureSequence,
    snippet: FeatureSequence,
    rng: np.random.Generator,
    *,
    category: str = "",
    normal_id: str = "",
    snippet_id: str = "",
) -> PseudoVideo:
    """Insert the snippet at a uniform position u in [0, n]; nothing is
    overwritten. frame_gt marks exactly the inserted rows."""
    if normal.c != snippet.c:
        raise ValueError(f"feature dim mismatch: normal {normal.c} vs snippet {snippet.c}")
    u = int(rng.integers(0, normal.n + 1))
    features = np.concatenate([normal.features[:u], snippet.features, normal.features[u:]])
    gt = np.zeros(normal.n + snippet.n, dtype=int)
    gt[u : u + snippet.n] = 1
    return PseudoVideo(
        features=FeatureSequence(features, stride=normal.stride),
        frame_gt=gt,
        category=category,
        provenance=Provenance(normal_id=normal_id, snippet_id=snippet_id, insert_index=u),
    )


def build_pseudo_set(
    normals: list[tuple[str, FeatureSequence]],
    bank: SnippetBank,
    per_category: int,
    rng: np.random.Generator,
    max_len: int = MAX_SEQ_LEN,
) -> list[PseudoVideo]:
    """per_category pseudo videos for every category the bank covers.

    Sources and insertion points are drawn independently; sequences longer
    than max_len are reduced with the same stratified index set applied to
    both features and labels, so they stay aligned.
    """
    if per_category < 1:
        raise UsageError("per_category must be >= 1")
    if not normals:
        raise UsageError("need at least one normal video to splice into")
    pseudos = []
    for category in bank.categories:
        pool = bank.by_category(category)
        if not pool:
            raise DataError(f"no snippets available for category {category!r}")
        for _ in range(per_category):
            normal_id, normal = normals[int(rng.integers(0, len(normals)))]
            snippet = pool[int(rng.integers(0, len(pool)))]
            pv = splice_insert(
                normal,
                snippet.seq,
                rng,
                category=category,
                normal_id=normal_id,
                snippet_id=snippet.id,
            )
            if pv.features.n > max_len:
                idx = stratified_indices(pv.features.n, max_len, rng)
                pv = PseudoVideo(
                    features=FeatureSequence(pv.features.features[idx], stride=pv.features.stride),
                    frame_gt=pv.frame_gt[idx],
                    category=pv.category,
                    provenance=pv.provenance,
                )
            pseudos.append(pv)
    return pseudos


def save_pseudo_set(pseudos: list[PseudoVideo], out_dir) -> None:
    """Write pseudo features as OVFF plus one provenance/label sidecar."""
    from .data import write_features

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pv in enumerate(pseudos):
        rel = f"pseudo_{i:04d}.ovff"
        write_features(pv.features, out / rel)
        entries.append(
            {
                "path": rel,
                "category": pv.category,
                "frame_gt": [int(x) for x in pv.frame_gt],
                "provenance": {
                    "normal_id": pv.provenance.normal_id,
                    "snippet_id": pv.provenance.snippet_id,
                    "insert_index": pv.provenance.insert_index,
                },
            }
        )
    (out / "pseudo_set.json").write_text(json.dumps({"pseudo_videos": entries}, indent=1))


def load_pseudo_set(path) -> list[PseudoVideo]:
    path = Path(path)
    raw = json.loads(path.read_text())
    pseudos = []
    for entry in raw["pseudo_videos"]:
        seq = read_features(path.parent / entry["path"])
        prov = entry["provenance"]
        pseudos.append(
            PseudoVideo(
                features=seq,
                frame_gt=np.array(entry["frame_gt"], dtype=int),
                category=entry["category"],
                provenance=Provenance(
                    normal_id=prov["normal_id"],
                    snippet_id=prov["snippet_id"],
                    insert_index=prov["insert_index"],
                ),
            )
        )
    return pseudos
