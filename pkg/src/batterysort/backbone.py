"""Staged classifier built on a ResNet v2 trunk.

Units are split into three stages: ``F`` (frozen, inherited), ``V`` (trainable,
inherited) and ``A`` (the application head). The head for a target task is
global-average-pool -> dropout -> dense(K) -> softmax.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import INPUT_SIZE, PIXEL_RANGE, ClassCatalog, ConfigurationError
from .resnet import ARCHITECTURES, ArchSpec, ResNetV2Trunk, init_default, load_keras_h5

CACHE_ENV = "BATTERYSORT_CACHE"
IMAGENET_CLASSES = 1000


class LoadError(RuntimeError):
    pass


class IntegrityError(LoadError):
    pass


class ShapeError(ValueError):
    def __init__(self, index: int, shape):
        super().__init__(f"input {index} has shape {tuple(shape)}, expected ({INPUT_SIZE}, {INPUT_SIZE}, 3)")
        self.index = index


class InputRangeError(ValueError):
    pass


class Stage(str, Enum):
    F = "F"
    V = "V"
    A = "A"


class Regime(str, Enum):
    NO_KNOWLEDGE = "no_knowledge"
    NON_OPTIMAL = "non_optimal"
    FINE_TUNED = "fine_tuned"


@dataclass(frozen=True)
class KnowledgeRegime:
    kind: Regime
    v_depth: int = 0

    def __post_init__(self):
        kind = Regime(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.v_depth < 0:
            raise ValueError("v_depth must be >= 0")
        if kind is Regime.NON_OPTIMAL and self.v_depth != 0:
            raise ValueError("the non-optimal regime trains the head only (v_depth 0)")
        if kind is Regime.FINE_TUNED and self.v_depth < 1:
            raise ValueError("the fine-tuned regime needs v_depth >= 1")


@dataclass
class Unit:
    name: str
    modules: list[str]
    stage: Stage
    trainable: bool
    in_backbone: bool = True


class Head(nn.Module):
    def __init__(self, feature_dim: int, num_classes: int, dropout_rate: float | None):
        super().__init__()
        self.dropout = nn.Dropout(dropout_rate) if dropout_rate is not None else None
        self.fc = nn.Linear(feature_dim, num_classes)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        x = fmap.mean(dim=(2, 3))
        if self.dropout is not None:
            x = self.dropout(x)
        return self.fc(x)


class StagedModel(nn.Module):
    """Trunk + head with per-unit stage assignment and trainability.

    ``bn_inference`` keeps every backbone batch-norm on its stored statistics
    during training (usual when fine-tuning inherited weights); models trained
    from scratch switch it off.
    """

    def __init__(self, arch: ArchSpec, num_classes: int, dropout_rate: float | None,
                 catalog: ClassCatalog | None = None, bn_inference: bool = True):
        super().__init__()
        self.arch = arch
        self.trunk = ResNetV2Trunk(arch)
        self.head = Head(arch.feature_dim, num_classes, dropout_rate)
        self.catalog = catalog
        self.dropout_rate = dropout_rate
        self.bn_inference = bn_inference
        self.units: list[Unit] = [
            Unit(name, [f"trunk.{m}" for m in mods], Stage.F, False) for name, mods in self.trunk.unit_layout()
        ]
        head_units = [Unit("avg_pool", [], Stage.A, True, False)]
        if dropout_rate is not None:
            head_units.append(Unit("dropout", [], Stage.A, True, False))
        head_units.append(Unit("predictions", ["head.fc"], Stage.A, True, False))
        self.units += head_units
        self._apply_flags()

    @property
    def feature_dim(self) -> int:
        return self.arch.feature_dim

    @property
    def num_classes(self) -> int:
        return self.head.fc.out_features

    @property
    def backbone_units(self) -> list[Unit]:
        return [u for u in self.units if u.in_backbone]

    @property
    def v_depth(self) -> int:
        return sum(u.stage is Stage.V for u in self.units)

    @property
    def stage_map(self) -> dict[str, str]:
        return {u.name: u.stage.value for u in self.units}

    def unit_modules(self, unit: Unit) -> list[nn.Module]:
        return [self.get_submodule(path) for path in unit.modules]

    def unit_tensors(self, unit: Unit) -> list[tuple[str, torch.Tensor]]:
        out = []
        for path in unit.modules:
            mod = self.get_submodule(path)
            out += [(f"{path}.{k}", v) for k, v in mod.state_dict().items()]
        return out

    def _apply_flags(self) -> None:
        for unit in self.units:
            for mod in self.unit_modules(unit):
                for p in mod.parameters():
                    p.requires_grad_(unit.trainable)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        if mode:
            for unit in self.backbone_units:
                if self.bn_inference or not unit.trainable:
                    for mod in self.unit_modules(unit):
                        if isinstance(mod, nn.BatchNorm2d):
                            mod.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def first_trainable_block(self) -> int:
        """Index of the first trunk block whose forward pass involves a trainable
        unit; everything before it is a fixed function of the input."""
        if not self.bn_inference:
            return 0
        if self.units[0].trainable:
            return 0
        for i, _ in enumerate(self.trunk.blocks):
            prefix = f"trunk.blocks.{i}."
            for unit in self.backbone_units:
                if unit.trainable and any(m.startswith(prefix) for m in unit.modules):
                    return i
        return len(self.trunk.blocks)

    def logits(self, x: torch.Tensor, start_block: int = 0) -> torch.Tensor:
        return self.head(self.trunk(x, start_block=start_block))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)

    def unit_fingerprint(self, unit: Unit) -> str:
        h = hashlib.sha256()
        for name, t in self.unit_tensors(unit):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def fingerprint(self, stage: Stage | str) -> str:
        stage = Stage(stage)
        h = hashlib.sha256()
        for unit in self.units:
            if unit.stage is stage:
                h.update(unit.name.encode())
                h.update(self.unit_fingerprint(unit).encode())
        return h.hexdigest()

    def fingerprints(self) -> dict[str, str]:
        return {u.name: self.unit_fingerprint(u) for u in self.units}


def build_model(arch: str | ArchSpec = "resnet50v2", num_classes: int = IMAGENET_CLASSES, seed: int = 0,
                dropout_rate: float | None = None, catalog: ClassCatalog | None = None,
                bn_inference: bool = True) -> StagedModel:
    """Randomly initialised model (every unit drawn from ``seed``)."""
    spec = ARCHITECTURES[arch] if isinstance(arch, str) else arch
    model = StagedModel(spec, num_classes, dropout_rate, catalog, bn_inference)
    init_default(model, torch.Generator().manual_seed(seed))
    return model


def default_weights_path(arch: str = "resnet50v2") -> Path:
    root = Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "batterysort"))
    return root / f"{arch}.pt"


def packaged_weights_path(arch: str) -> Path:
    """Weights shipped inside the package (only the surrogate-pretrained mini network)."""
    return Path(__file__).parent / "data" / f"{arch}-surrogate.pt"


def resolve_weights_path(arch: str, explicit=None) -> Path:
    """Explicit path, else the cache file, else packaged weights for ``arch``."""
    if explicit:
        return Path(explicit)
    cached = default_weights_path(arch)
    if cached.is_file():
        return cached
    packaged = packaged_weights_path(arch)
    return packaged if packaged.is_file() else cached


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_pretrained(model: StagedModel, path) -> Path:
    """Write a source-form weights archive and its ``.sha256`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"arch": model.arch.name, "num_classes": model.num_classes, "state_dict": model.state_dict()}, path)
    Path(str(path) + ".sha256").write_text(file_sha256(path) + "\n")
    return path


def load_pretrained(path=None, arch: str = "resnet50v2") -> StagedModel:
    """Source-form model (original head intact) from a local weights file.

    Accepts the archive written by :func:`save_pretrained` or a Keras
    ``ResNet50V2`` ``.h5`` file. A ``<file>.sha256`` sidecar, when present, must
    match the file contents.
    """
    path = Path(path) if path is not None else default_weights_path(arch)
    if not path.is_file():
        raise LoadError(f"pretrained weights not found: {path} (set ${CACHE_ENV} or pass a path)")
    sidecar = Path(str(path) + ".sha256")
    if sidecar.is_file():
        expected = sidecar.read_text().split()[0].strip()
        actual = file_sha256(path)
        if actual != expected:
            raise IntegrityError(f"checksum mismatch for {path}: expected {expected}, got {actual}")
    if path.suffix == ".h5":
        model = StagedModel(ARCHITECTURES[arch], IMAGENET_CLASSES, None)
        try:
            load_keras_h5(model.trunk, model.head.fc, path)
        except (KeyError, OSError) as exc:
            raise LoadError(f"cannot read Keras weights {path}: {exc}") from exc
    else:
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
            model = StagedModel(ARCHITECTURES[blob["arch"]], int(blob["num_classes"]), None)
            model.load_state_dict(blob["state_dict"])
        except Exception as exc:  # torch raises a zoo of types on corrupt archives
            raise LoadError(f"cannot read weights archive {path}: {exc}") from exc
    model.eval()
    return model


def _glorot_head(fc: nn.Linear, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    limit = float(np.sqrt(6.0 / (fc.in_features + fc.out_features)))
    with torch.no_grad():
        fc.weight.copy_((torch.rand(fc.weight.shape, generator=g) * 2 - 1) * limit)
        fc.bias.zero_()


def reconfigure_head(source: StagedModel, catalog: ClassCatalog, dropout_rate: float, head_seed: int) -> StagedModel:
    """Drop the source head, attach pool -> dropout -> dense(K); backbone all stage F."""
    k = len(catalog)
    if k <= 0 or k > source.feature_dim:
        raise ConfigurationError(f"number of classes must be in [1, {source.feature_dim}], got {k}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    target = StagedModel(source.arch, k, dropout_rate, catalog, source.bn_inference)
    target.trunk.load_state_dict(copy.deepcopy(source.trunk.state_dict()))
    _glorot_head(target.head.fc, head_seed)
    target.eval()
    return set_stage_boundary(target, 0)


def set_stage_boundary(model: StagedModel, v_depth: int) -> StagedModel:
    """Make the last ``v_depth`` backbone units stage V (trainable), the rest stage F.

    Mutates and returns ``model``. The head is always trainable.
    """
    backbone = model.backbone_units
    if not 0 <= v_depth <= len(backbone):
        raise ValueError(f"v_depth {v_depth} outside [0, {len(backbone)}]")
    boundary = len(backbone) - v_depth
    for i, unit in enumerate(backbone):
        unit.stage = Stage.F if i < boundary else Stage.V
        unit.trainable = i >= boundary
    model._apply_flags()
    return model


def make_trainable_from_scratch(model: StagedModel) -> StagedModel:
    """Every unit trainable, batch-norm statistics learned (no inherited knowledge)."""
    model.bn_inference = False
    return set_stage_boundary(model, len(model.backbone_units))


def to_tensor(batch) -> torch.Tensor:
    """Validate a batch of HxWxC rasters in [-1, 1] and return NCHW float32."""
    if isinstance(batch, np.ndarray) and batch.ndim == 4:
        items = batch
    else:
        items = list(batch)
    for i, x in enumerate(items):
        if tuple(np.shape(x)) != (INPUT_SIZE, INPUT_SIZE, 3):
            raise ShapeError(i, np.shape(x))
    arr = np.asarray(items, dtype=np.float32)
    if arr.size and (not np.isfinite(arr).all() or arr.min() < PIXEL_RANGE[0] - 1e-4 or arr.max() > PIXEL_RANGE[1] + 1e-4):
        raise InputRangeError(f"inputs must be preprocessed into {PIXEL_RANGE}; got [{arr.min():.3f}, {arr.max():.3f}]")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def forward(model: StagedModel, batch: Sequence | np.ndarray, chunk: int = 32) -> np.ndarray:
    """Inference-mode class probabilities, shape (N, K)."""
    x = to_tensor(batch)
    was_training = model.training
    model.eval()
    try:
        out = [model(x[i : i + chunk]) for i in range(0, len(x), chunk)]
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return torch.cat(out).numpy()


def save_checkpoint(model: StagedModel, path, head_seed: int | None = None) -> Path:
    """Self-describing checkpoint plus a ``manifest.txt`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "arch": model.arch.name,
            "state_dict": model.state_dict(),
            "stage_map": model.stage_map,
            "catalog": list(model.catalog.classes) if model.catalog else None,
            "others_id": model.catalog.others_id if model.catalog else None,
            "dropout_rate": model.dropout_rate,
            "bn_inference": model.bn_inference,
            "num_classes": model.num_classes,
            "fingerprints": model.fingerprints(),
        },
        path,
    )
    (path.parent / "manifest.txt").write_text(
        f"head_seed = {head_seed}\nv_depth = {model.v_depth}\narch = {model.arch.name}\n"
        f"checkpoint_sha256 = {file_sha256(path)}\n"
    )
    return path


def load_checkpoint(path) -> StagedModel:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.pt"
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    catalog = ClassCatalog(tuple(blob["catalog"]), blob["others_id"]) if blob["catalog"] else None
    model = StagedModel(ARCHITECTURES[blob["arch"]], blob["num_classes"], blob["dropout_rate"], catalog, blob["bn_inference"])
    model.load_state_dict(blob["state_dict"])
    for unit in model.units:
        unit.stage = Stage(blob["stage_map"][unit.name])
        unit.trainable = unit.stage is not Stage.F
    model._apply_flags()
    if model.fingerprints() != blob["fingerprints"]:
        raise IntegrityError(f"checkpoint {path} does not match its stored fingerprints")
    return model.eval()

