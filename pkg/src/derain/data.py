"""Aligned image pairs: validation, loading, splitting and lossless storage.

Images live in memory as ``float32`` arrays of shape ``(H, W, 3)`` with
values in ``[0, 1]``. On disk they are 8-bit RGB PNG files; an 8-bit value
``k`` maps to ``k / 255``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DecodeFailure,
    DimensionMismatch,
    InsufficientPairs,
    IoFailure,
    MissingCounterpart,
)

MIN_SIDE = 8
FULL_SPLIT = (40000, 500, 500)
SPLIT_RATIO = (80, 1, 1)


def as_raster(values, *, copy: bool = False) -> np.ndarray:
    """Validate ``values`` as an RGB raster and return a float32 view of it."""
    arr = np.array(values, dtype=np.float32) if copy else np.asarray(values, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatch(f"expected an (H, W, 3) image, got shape {arr.shape}")
    h, w, _ = arr.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DimensionMismatch(f"image {w}x{h} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("raster values must be finite and lie in [0, 1]")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


def image_dims(img: np.ndarray) -> tuple[int, int]:
    """(width, height) of a raster."""
    return int(img.shape[1]), int(img.shape[0])


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap a raster onto the 8-bit grid used for storage."""
    return (np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def read_image(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DecodeFailure(f"cannot decode {path}: {exc}") from exc
    return (rgb.astype(np.float32) / 255.0).astype(np.float32)


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    img = as_raster(img)
    u8 = np.rint(img * 255.0).astype(np.uint8)
    try:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class AlignedPair:
    distorted: np.ndarray
    clear: np.ndarray
    id: str

    def __post_init__(self):
        d = _frozen(as_raster(self.distorted))
        c = _frozen(as_raster(self.clear))
        if d.shape != c.shape:
            raise DimensionMismatch(
                f"pair {self.id}: distorted {d.shape[1]}x{d.shape[0]} vs clear {c.shape[1]}x{c.shape[0]}"
            )
        object.__setattr__(self, "distorted", d)
        object.__setattr__(self, "clear", c)

    @property
    def dims(self) -> tuple[int, int]:
        return image_dims(self.clear)


@dataclass(frozen=True)
class EvaluationTrio:
    input: np.ndarray
    predicted: np.ndarray
    ground_truth: np.ndarray
    id: str

    def __post_init__(self):
        imgs = [_frozen(as_raster(getattr(self, k))) for k in ("input", "predicted", "ground_truth")]
        if len({im.shape for im in imgs}) != 1:
            raise DimensionMismatch(f"trio {self.id}: images differ in size {[im.shape for im in imgs]}")
        for k, im in zip(("input", "predicted", "ground_truth"), imgs):
            object.__setattr__(self, k, im)


@dataclass(frozen=True)
class SceneGroundTruth:
    """Car boxes as ``(x, y, w, h)`` pixel rectangles."""

    boxes: tuple[tuple[int, int, int, int], ...] = ()
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(tuple(int(v) for v in b) for b in self.boxes))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels must have the same length")
        if any(lbl != "car" for lbl in self.labels):
            raise ValueError("only the 'car' category is supported")

    def validate(self, dims: tuple[int, int]) -> None:
        w, h = dims
        for x, y, bw, bh in self.boxes:
            if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > w or y + bh > h:
                raise DimensionMismatch(f"box {(x, y, bw, bh)} outside {w}x{h} image")

    def to_json(self) -> dict:
        return {"boxes": [list(b) for b in self.boxes], "labels": list(self.labels)}

    @classmethod
    def from_json(cls, obj: dict) -> "SceneGroundTruth":
        return cls(boxes=tuple(tuple(b) for b in obj.get("boxes", [])), labels=tuple(obj.get("labels", [])))


def write_boxes(path: str | os.PathLike, gt: SceneGroundTruth) -> None:
    _write_json(path, gt.to_json())


def read_boxes(path: str | os.PathLike) -> SceneGroundTruth:
    with open(path, encoding="utf-8") as fh:
        return SceneGroundTruth.from_json(json.load(fh))


# --- pair directory layout -------------------------------------------------

# A locator maps a root directory onto (id, distorted_path, clear_path)
# triples. Adapters for other dataset layouts register here.
Locator = Callable[[Path], list[tuple[str, Path, Path]]]
IMAGE_EXTS = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def _suffix_locator(distorted_tag: str, clear_tag: str) -> Locator:
    def locate(root: Path) -> list[tuple[str, Path, Path]]:
        files = {p.name: p for p in root.iterdir() if p.is_file()}
        clear_by_id = {}
        for name, p in files.items():
            stem, ext = os.path.splitext(name)
            if ext.lower() in IMAGE_EXTS and stem.endswith(clear_tag):
                clear_by_id[stem[: -len(clear_tag)]] = p
        out = []
        for name, p in files.items():
            stem, ext = os.path.splitext(name)
            if ext.lower() not in IMAGE_EXTS or not stem.endswith(distorted_tag):
                continue
            pid = stem[: -len(distorted_tag)]
            if pid not in clear_by_id:
                raise MissingCounterpart(f"{p} has no matching '{pid}{clear_tag}.*' image")
            out.append((pid, p, clear_by_id[pid]))
        return out

    return locate


def _subdir_locator(distorted_dir: str, clear_dir: str) -> Locator:
    def locate(root: Path) -> list[tuple[str, Path, Path]]:
        clear = {p.stem: p for p in (root / clear_dir).iterdir() if p.suffix.lower() in IMAGE_EXTS}
        out = []
        for p in (root / distorted_dir).iterdir():
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            if p.stem not in clear:
                raise MissingCounterpart(f"{p} has no matching image in {root / clear_dir}")
            out.append((p.stem, p, clear[p.stem]))
        return out

    return locate


NAMING_SCHEMES: dict[str, Locator] = {
    "rain_clear": _suffix_locator("_rain", "_clear"),
    # stereo-style layout: root/data/<id>.png paired with root/gt/<id>.png
    "data_gt": _subdir_locator("data", "gt"),
}


def register_naming_scheme(name: str, locator: Locator) -> None:
    NAMING_SCHEMES[name] = locator


def load_pair_directory(
    root_path: str | os.PathLike,
    naming_scheme: str | Locator = "rain_clear",
    max_workers: int | None = None,
) -> list[AlignedPair]:
    """Load every aligned pair under ``root_path``, sorted by id.

    Raises MissingCounterpart, DimensionMismatch or DecodeFailure.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IoFailure(f"{root} is not a directory")
    locate = NAMING_SCHEMES[naming_scheme] if isinstance(naming_scheme, str) else naming_scheme
    entries = sorted(locate(root), key=lambda e: e[0])

    def load(entry):
        pid, dpath, cpath = entry
        return AlignedPair(distorted=read_image(dpath), clear=read_image(cpath), id=pid)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(load, entries))


# --- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[AlignedPair, ...] = ()
    validation: tuple[AlignedPair, ...] = ()
    test: tuple[AlignedPair, ...] = ()

    def __post_init__(self):
        seen: set[str] = set()
        for part in (self.train, self.validation, self.test):
            ids = {p.id for p in part}
            if len(ids) != len(part) or ids & seen:
                raise ValueError("split partitions must be disjoint by id")
            seen |= ids

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def default_split_counts(n: int) -> tuple[int, int, int]:
    """40000/500/500 when available, otherwise the same 80:1:1 ratio rounded down."""
    if n >= sum(FULL_SPLIT):
        return FULL_SPLIT
    total = sum(SPLIT_RATIO)
    return tuple(n * r // total for r in SPLIT_RATIO)  # type: ignore[return-value]


def split_dataset(
    pairs: Sequence[AlignedPair],
    counts: tuple[int, int, int] | None = None,
    seed: int = 0,
) -> DatasetSplit:
    if counts is None:
        counts = default_split_counts(len(pairs))
    if any(c < 0 for c in counts):
        raise ValueError(f"split counts must be non-negative, got {counts}")
    if sum(counts) > len(pairs):
        raise InsufficientPairs(f"requested {sum(counts)} pairs {tuple(counts)} but only {len(pairs)} available")
    order = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    n_train, n_val, n_test = counts
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:n_train + n_val + n_test]),
    )


# --- on-disk sets ------------------------------------------------------------

def _write_json(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_trio_set(trios: Iterable[EvaluationTrio], out_path: str | os.PathLike, extra: dict | None = None) -> Path:
    """Store trios as PNG files next to a ``manifest.json``; returns the manifest path."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    entries = []
    for trio in trios:
        entry = {"id": trio.id}
        for role in ("input", "predicted", "ground_truth"):
            rel = f"{trio.id}_{role}.png"
            write_image(out / rel, getattr(trio, role))
            entry[role] = rel
        entries.append(entry)
    manifest = {"trios": entries}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    _write_json(path, manifest)
    return path


def read_trio_set(manifest_path: str | os.PathLike) -> list[EvaluationTrio]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return [
        EvaluationTrio(
            input=read_image(base / e["input"]),
            predicted=read_image(base / e["predicted"]),
            ground_truth=read_image(base / e["ground_truth"]),
            id=e["id"],
        )
        for e in manifest["trios"]
    ]


PAIR_MANIFEST = "pairs.json"


@dataclass
class PairSet:
    """A pair directory as written by :func:`write_pair_set`."""

    pairs: list[AlignedPair]
    scenes: dict[str, SceneGroundTruth] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, name: str) -> list[AlignedPair]:
        ids = self.meta.get("splits", {}).get(name)
        if ids is None:
            return list(self.pairs)
        by_id = {p.id: p for p in self.pairs}
        return [by_id[i] for i in ids]


def write_pair_set(
    out_dir: str | os.PathLike,
    pairs: Sequence[AlignedPair],
    scenes: Sequence[SceneGroundTruth] | None = None,
    meta: dict | None = None,
) -> Path:
    """Write ``<id>_rain.png``, ``<id>_clear.png`` and optional ``<id>_boxes.json`` files."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    for i, pair in enumerate(pairs):
        write_image(out / f"{pair.id}_rain.png", pair.distorted)
        write_image(out / f"{pair.id}_clear.png", pair.clear)
        if scenes is not None:
            write_boxes(out / f"{pair.id}_boxes.json", scenes[i])
    manifest = {"ids": [p.id for p in pairs]}
    manifest.update(meta or {})
    path = out / PAIR_MANIFEST
    _write_json(path, manifest)
    return path


def read_pair_set(root: str | os.PathLike, naming_scheme: str | Locator = "rain_clear") -> PairSet:
    root = Path(root)
    pairs = load_pair_directory(root, naming_scheme)
    scenes = {}
    for p in pairs:
        sidecar = root / f"{p.id}_boxes.json"
        if sidecar.exists():
            scenes[p.id] = read_boxes(sidecar)
    meta = {}
    if (root / PAIR_MANIFEST).exists():
        with open(root / PAIR_MANIFEST, encoding="utf-8") as fh:
            meta = json.load(fh)
    return PairSet(pairs=pairs, scenes=scenes, meta=meta)
