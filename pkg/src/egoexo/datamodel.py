"""Clips, ego/exo pairings, video-level splits and the JSON manifest."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import rng

VIEWS = ("ego", "side", "top")
EXO_VIEWS = ("side", "top")
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

_ROT = re.compile(r"^rot\((\d+)\)$")


class ManifestError(ValueError):
    """Malformed manifest content (bad JSON, wrong field types)."""


class DatasetInvariantError(ValueError):
    """A structurally valid dataset that breaks a pairing/split rule."""


class MissingFeatureError(LookupError):
    pass


def parse_augmentation(tag: str) -> tuple[str, int]:
    """``"none"`` -> ("none", 0), ``"hflip"`` -> ("hflip", 0), ``"rot(3)"`` -> ("rot", 3)."""
    if tag in ("none", "hflip"):
        return tag, 0
    m = _ROT.match(tag)
    if m is None:
        raise ValueError(f"unknown augmentation {tag!r}")
    k = int(m.group(1))
    if not 1 <= k <= 11:
        raise ValueError(f"rotation index must be in 1..11, got {k}")
    return "rot", k


def rotation_tag(k: int) -> str:
    return f"rot({k})"


@dataclass(frozen=True)
class ClipRef:
    clip_id: str
    video_id: str
    view: str
    actor: str = ""
    action: str = ""
    frame_count: int = 16
    feature_keys: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.view not in VIEWS:
            raise DatasetInvariantError(f"clip {self.clip_id!r}: unknown view {self.view!r}")
        if self.frame_count < 2:
            raise DatasetInvariantError(f"clip {self.clip_id!r}: frame_count must be >= 2")

    def feature_key(self, kind: str) -> str:
        return self.feature_keys.get(kind, self.clip_id)

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "video_id": self.video_id,
            "view": self.view,
            "actor": self.actor,
            "action": self.action,
            "frame_count": self.frame_count,
            "feature_keys": dict(sorted(self.feature_keys.items())),
        }


@dataclass(frozen=True)
class ClipPair:
    ego: str
    exo: str
    view: str
    augmentation: str = "none"

    def __post_init__(self):
        if self.view not in EXO_VIEWS:
            raise DatasetInvariantError(f"pair ({self.ego}, {self.exo}): pair view must be side or top")
        try:
            kind, _ = parse_augmentation(self.augmentation)
        except ValueError as exc:
            raise DatasetInvariantError(f"pair ({self.ego}, {self.exo}): {exc}") from None
        if kind == "rot" and self.view != "top":
            raise DatasetInvariantError(
                f"pair ({self.ego}, {self.exo}): rotation augmentation requires top view"
            )

    def to_json(self) -> dict:
        return {"ego": self.ego, "exo": self.exo, "view": self.view, "augmentation": self.augmentation}


@dataclass(frozen=True)
class Dataset:
    clips: tuple[ClipRef, ...]
    pairs: tuple[ClipPair, ...]
    splits: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(
            self, "splits", {k: tuple(v) for k, v in self.splits.items()}
        )
        self.validate()

    @cached_property
    def clip_by_id(self) -> dict[str, ClipRef]:
        return {c.clip_id: c for c in self.clips}

    def validate(self) -> None:
        seen: set[str] = set()
        for c in self.clips:
            if c.clip_id in seen:
                raise DatasetInvariantError(f"duplicate clip_id {c.clip_id!r}")
            seen.add(c.clip_id)
        by_id = {c.clip_id: c for c in self.clips}
        for p in self.pairs:
            for cid in (p.ego, p.exo):
                if cid not in by_id:
                    raise DatasetInvariantError(f"pair ({p.ego}, {p.exo}) references missing clip {cid!r}")
            ego, exo = by_id[p.ego], by_id[p.exo]
            if ego.view != "ego":
                raise DatasetInvariantError(f"pair ego clip {p.ego!r} has view {ego.view!r}")
            if exo.view != p.view:
                raise DatasetInvariantError(
                    f"pair exo clip {p.exo!r} has view {exo.view!r}, pair says {p.view!r}"
                )
            if ego.video_id != exo.video_id:
                raise DatasetInvariantError(
                    f"pair ({p.ego}, {p.exo}) spans videos {ego.video_id!r} and {exo.video_id!r}"
                )
        owner: dict[str, str] = {}
        for name, videos in self.splits.items():
            if name not in SPLITS:
                raise DatasetInvariantError(f"unknown split {name!r}")
            for v in videos:
                if v in owner and owner[v] != name:
                    raise DatasetInvariantError(
                        f"video {v!r} appears in both {owner[v]!r} and {name!r} splits"
                    )
                owner[v] = name

    def pair_video(self, pair: ClipPair) -> str:
        return self.clip_by_id[pair.ego].video_id

    @property
    def paired_videos(self) -> list[str]:
        return sorted({self.pair_video(p) for p in self.pairs})

    def pairs_in(self, split: str, view: str | None = None) -> list[ClipPair]:
        videos = set(self.splits.get(split, ()))
        out = [
            p for p in self.pairs
            if self.pair_video(p) in videos and (view is None or p.view == view)
        ]
        return sorted(out, key=lambda p: (p.ego, p.exo))

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "clips": [c.to_json() for c in sorted(self.clips, key=lambda c: c.clip_id)],
            "pairs": [p.to_json() for p in sorted(self.pairs, key=lambda p: (p.ego, p.exo))],
            "splits": {k: sorted(v) for k, v in sorted(self.splits.items())},
        }


def _require(obj: dict, key: str, typ, where: str):
    if key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    val = obj[key]
    if not isinstance(val, typ) or isinstance(val, bool):
        raise ManifestError(f"{where}: field {key!r} has type {type(val).__name__}")
    return val


def dataset_from_json(doc) -> Dataset:
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a JSON object")
    for key in ("clips", "pairs", "splits"):
        if key not in doc:
            raise ManifestError(f"manifest: missing top-level key {key!r}")
    clips = []
    for i, c in enumerate(_require(doc, "clips", list, "manifest")):
        where = f"clips[{i}]"
        if not isinstance(c, dict):
            raise ManifestError(f"{where}: expected object")
        keys = c.get("feature_keys", {})
        if not isinstance(keys, dict):
            raise ManifestError(f"{where}: field 'feature_keys' must be an object")
        frame_count = _require(c, "frame_count", int, where) if "frame_count" in c else 16
        clips.append(ClipRef(
            clip_id=_require(c, "clip_id", str, where),
            video_id=_require(c, "video_id", str, where),
            view=_require(c, "view", str, where),
            actor=c.get("actor", ""),
            action=c.get("action", ""),
            frame_count=frame_count,
            feature_keys=dict(keys),
        ))
    pairs = []
    for i, p in enumerate(_require(doc, "pairs", list, "manifest")):
        where = f"pairs[{i}]"
        if not isinstance(p, dict):
            raise ManifestError(f"{where}: expected object")
        pairs.append(ClipPair(
            ego=_require(p, "ego", str, where),
            exo=_require(p, "exo", str, where),
            view=_require(p, "view", str, where),
            augmentation=p.get("augmentation", "none"),
        ))
    splits = _require(doc, "splits", dict, "manifest")
    for name, videos in splits.items():
        if not isinstance(videos, list) or not all(isinstance(v, str) for v in videos):
            raise ManifestError(f"splits[{name!r}]: expected list of video ids")
    return Dataset(clips=clips, pairs=pairs, splits=splits)


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return dataset_from_json(doc)


def dumps_manifest(d: Dataset) -> str:
    return json.dumps(d.to_json(), indent=2, sort_keys=True) + "\n"


def save_manifest(d: Dataset, path) -> None:
    Path(path).write_text(dumps_manifest(d), encoding="utf-8")


def split_dataset(d: Dataset, counts: Mapping[str, int], seed: int) -> Dataset:
    """Random video-level split; every clip of a video (augmented copies
    included) lands in the same split."""
    if any(d.splits.get(s) for s in SPLITS):
        raise DatasetInvariantError("dataset already has splits assigned")
    videos = d.paired_videos
    want = [int(counts.get(s, 0)) for s in SPLITS]
    if any(n < 0 for n in want) or sum(want) != len(videos):
        raise DatasetInvariantError(
            f"split counts {dict(zip(SPLITS, want))} sum to {sum(want)}, "
            f"dataset has {len(videos)} paired videos"
        )
    order = rng.stream(seed, "split").permutation(len(videos))
    shuffled = [videos[i] for i in order]
    splits, start = {}, 0
    for name, n in zip(SPLITS, want):
        splits[name] = sorted(shuffled[start:start + n])
        start += n
    return replace(d, splits=splits)


class FeaturePair(NamedTuple):
    ego: np.ndarray
    exo: np.ndarray
    pair: ClipPair


def enumerate_feature_pairs(
    d: Dataset, split: str, feature_kind: str, store, view: str | None = None
) -> list[FeaturePair]:
    """One (ego vector, exo vector, pair) per pair of ``split``, sorted by clip id.

    ``store`` is anything indexable by feature key, normally a
    :class:`egoexo.features.FeatureMatrix`.
    """
    out = []
    for p in d.pairs_in(split, view):
        vecs = []
        for cid in (p.ego, p.exo):
            key = d.clip_by_id[cid].feature_key(feature_kind)
            try:
                vecs.append(np.asarray(store[key], dtype=np.float64))
            except KeyError:
                raise MissingFeatureError(
                    f"no {feature_kind} feature for clip {cid!r} (key {key!r})"
                ) from None
        out.append(FeaturePair(vecs[0], vecs[1], p))
    return out


def stack_pairs(entries: Sequence[FeaturePair], source: str, dim: int | None = None):
    """(X_source, Y_target) row matrices; ``source`` is "ego" or "exo"."""
    if not entries:
        if dim is None:
            raise ValueError("empty pair list and no dim given")
        return np.zeros((0, dim)), np.zeros((0, dim))
    ego = np.stack([e.ego for e in entries])
    exo = np.stack([e.exo for e in entries])
    return (ego, exo) if source == "ego" else (exo, ego)
