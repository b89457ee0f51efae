"""Class-per-directory corpus ingestion, preprocessing and seeded splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

INPUT_SIZE = 244
# ResNet v2 ("tf" mode) convention: uint8 [0, 255] -> float [-1, 1].
PIXEL_RANGE = (-1.0, 1.0)
OTHERS = "others"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
TEST_FRACTION = 0.20
VAL_FRACTION = 0.10


class ConfigurationError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, source_path, reason: str):
        super().__init__(f"cannot decode image {source_path}: {reason}")
        self.source_path = str(source_path)


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered known classes; the order fixes output-neuron and ejector indices."""

    classes: tuple[str, ...]
    others_id: str = OTHERS

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ConfigurationError(f"duplicate class identifiers in {self.classes}")
        if self.others_id in self.classes:
            raise ConfigurationError(f"{self.others_id!r} cannot also be a known class")
        if not self.classes:
            raise ConfigurationError("catalog needs at least one class")

    @classmethod
    def from_names(cls, names: Iterable[str], others_id: str = OTHERS) -> "ClassCatalog":
        return cls(tuple(sorted(names)), others_id)

    @classmethod
    def from_directory(cls, root, others_id: str = OTHERS) -> "ClassCatalog":
        root = Path(root)
        if not root.is_dir():
            raise ConfigurationError(f"dataset root not found: {root}")
        names = [p.name for p in root.iterdir() if p.is_dir() and p.name != others_id and not p.name.startswith(".")]
        return cls.from_names(names, others_id)

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, label: str) -> int:
        return self.classes.index(label)

    def is_valid(self, label: str) -> bool:
        return label == self.others_id or label in self.classes


@dataclass(frozen=True)
class CorpusItem:
    item_id: str
    label: str
    path: Path
    evaluation_only: bool = False


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: str
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.shape != (INPUT_SIZE, INPUT_SIZE, 3):
            raise ValueError(f"pixels must be {INPUT_SIZE}x{INPUT_SIZE}x3, got {self.pixels.shape}")


class Corpus(list):
    """List of :class:`CorpusItem` plus the files skipped while loading."""

    def __init__(self, items=(), catalog: ClassCatalog | None = None, skipped=None):
        super().__init__(items)
        self.catalog = catalog
        self.skipped: list[tuple[str, str]] = list(skipped or [])

    def known(self) -> list[CorpusItem]:
        return [it for it in self if not it.evaluation_only]

    def others(self) -> list[CorpusItem]:
        return [it for it in self if it.evaluation_only]

    def write_load_report(self, path) -> None:
        lines = [f"loaded {len(self.known())} in-catalog, {len(self.others())} others, skipped {len(self.skipped)}"]
        lines += [f"SKIP {p}: {reason}" for p, reason in self.skipped]
        Path(path).write_text("\n".join(lines) + "\n")


def _readable(path: Path) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        return str(exc) or type(exc).__name__
    return None


def load_corpus(root_dir, catalog: ClassCatalog) -> Corpus:
    root = Path(root_dir)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root not found: {root}")
    items: list[CorpusItem] = []
    skipped: list[tuple[str, str]] = []
    labels = list(catalog.classes)
    if (root / catalog.others_id).is_dir():
        labels.append(catalog.others_id)
    for label in labels:
        class_dir = root / label
        if not class_dir.is_dir():
            raise ConfigurationError(f"missing directory for class {label!r}: {class_dir}")
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.name.startswith("."):
                continue
            rel = f"{label}/{path.name}"
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                skipped.append((rel, "unsupported format"))
                continue
            reason = _readable(path)
            if reason is not None:
                log.warning("skipping unreadable image %s: %s", path, reason)
                skipped.append((rel, reason))
                continue
            items.append(CorpusItem(rel, label, path, evaluation_only=(label == catalog.others_id)))
    items.sort(key=lambda it: it.item_id)
    return Corpus(items, catalog, skipped)


def load_image(path) -> np.ndarray:
    """Decode to an RGB uint8 array; grayscale and palette images are expanded."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(path, str(exc)) from exc
    if arr.size == 0:
        raise DecodeError(path, "zero-sized image")
    return arr


def preprocess(raw, source_path: str = "<array>") -> np.ndarray:
    """Resize to 244x244x3 (bilinear) and map to the backbone range [-1, 1].

    Integer inputs are read as 0..255. Float inputs are taken to be in the
    model range already and are only resized, which makes this idempotent.
    """
    if isinstance(raw, Image.Image):
        raw = np.asarray(raw.convert("RGB"))
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DecodeError(source_path, f"bad image shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[..., :3]
    if arr.shape[2] != 3:
        raise DecodeError(source_path, f"expected 3 channels, got {arr.shape[2]}")
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        x = arr.astype(np.float32) / 127.5 - 1.0
    else:
        x = arr.astype(np.float32)
        if not np.isfinite(x).all() or x.min() < PIXEL_RANGE[0] - 1e-4 or x.max() > PIXEL_RANGE[1] + 1e-4:
            raise DecodeError(source_path, "float input outside [-1, 1]")
    if x.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
        t = F.interpolate(t, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear", align_corners=False)
        x = t[0].numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(np.clip(x, *PIXEL_RANGE), dtype=np.float32)


def load_labeled(item: CorpusItem) -> LabeledImage:
    return LabeledImage(preprocess(load_image(item.path), str(item.path)), item.label, str(item.path))


@dataclass
class ImageSet:
    """Preprocessed in-memory corpus: known-class images plus the others pool."""

    catalog: ClassCatalog
    ids: list[str]
    pixels: np.ndarray  # (N, 244, 244, 3) float32
    labels: np.ndarray  # (N,) int64 indices into catalog.classes
    others_ids: list[str] = field(default_factory=list)
    others_pixels: np.ndarray | None = None

    def __post_init__(self):
        self._index = {item_id: i for i, item_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, item_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.array([self._index[i] for i in item_ids], dtype=np.int64)
        return self.pixels[idx], self.labels[idx]

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "ImageSet":
        catalog = corpus.catalog
        known, others = corpus.known(), corpus.others()
        pixels = np.stack([load_labeled(it).pixels for it in known]) if known else np.zeros((0, INPUT_SIZE, INPUT_SIZE, 3), np.float32)
        labels = np.array([catalog.index(it.label) for it in known], dtype=np.int64)
        others_pixels = np.stack([load_labeled(it).pixels for it in others]) if others else None
        return cls(catalog, [it.item_id for it in known], pixels, labels, [it.item_id for it in others], others_pixels)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes for ``n`` items."""
    # round-half-up in exact integer arithmetic (0.20 and 0.10 fractions)
    n_test = (2 * n + 5) // 10
    n_val = (n - n_test + 5) // 10
    return n - n_test - n_val, n_val, n_test


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    test_fraction: float = TEST_FRACTION
    val_fraction_of_train: float = VAL_FRACTION

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "ratios": {"test_fraction": self.test_fraction, "val_fraction_of_train": self.val_fraction_of_train},
                "train_ids": list(self.train_ids),
                "val_ids": list(self.val_ids),
                "test_ids": list(self.test_ids),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(d["seed"], tuple(d["train_ids"]), tuple(d["val_ids"]), tuple(d["test_ids"]))


def make_split(items: Sequence, seed: int) -> SplitPlan:
    """Seeded permutation of the (sorted) items, sliced into test, val, train."""
    ids = []
    for it in items:
        if isinstance(it, CorpusItem):
            if it.evaluation_only:
                raise SplitError(f"{it.item_id} is an others item and cannot be split")
            ids.append(it.item_id)
        else:
            ids.append(str(it))
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate item ids")
    n_train, n_val, n_test = split_sizes(len(ids))
    if n_test == 0 or n_train == 0:
        raise SplitError(f"{len(ids)} items are too few for a non-empty test and train set")
    ids.sort()
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return SplitPlan(
        seed,
        train_ids=tuple(shuffled[n_test + n_val :]),
        val_ids=tuple(shuffled[n_test : n_test + n_val]),
        test_ids=tuple(shuffled[:n_test]),
    )
