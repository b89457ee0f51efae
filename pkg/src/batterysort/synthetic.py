"""Synthetic image corpora for CPU-only experiments.

``render_battery`` draws a cylinder-like object with a body colour, a wrap
pattern, a terminal cap and an optional logo, on a cluttered background with
random pose and lighting. Object classes are combinations of these
attributes. A *source* task (many attribute combinations, plenty of images)
stands in for large-scale pretraining, and a *target* task with nine held-out
combinations and ~50 images per class stands in for the scarce battery data.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SIZE = 244

BODY_COLORS = {
    "black": (40, 40, 45),
    "copper": (190, 110, 50),
    "blue": (40, 80, 190),
    "green": (50, 150, 70),
    "silver": (170, 170, 175),
}
PATTERNS = ("plain", "rings", "stripes", "diagonal")
CAP_COLORS = {"gold": (220, 180, 40), "red": (200, 40, 40), "white": (235, 235, 235)}
LOGOS = ("none", "disc", "bar")
# Logo shapes that never occur in the source task.
TARGET_ONLY_LOGOS = ("ring", "cross")


@dataclass(frozen=True)
class Attributes:
    body: str
    pattern: str
    cap: str
    logo: str

    @property
    def name(self) -> str:
        return f"{self.body}-{self.pattern}-{self.cap}-{self.logo}"


ALL_COMBOS = tuple(Attributes(*c) for c in itertools.product(BODY_COLORS, PATTERNS, CAP_COLORS, LOGOS))

# Nine target classes; most pairs differ in a single attribute, and several
# hinge on logo shapes the source task never shows.
TARGET_COMBOS = (
    Attributes("copper", "rings", "gold", "ring"),
    Attributes("copper", "rings", "gold", "disc"),
    Attributes("copper", "stripes", "gold", "cross"),
    Attributes("black", "rings", "gold", "cross"),
    Attributes("black", "rings", "gold", "ring"),
    Attributes("blue", "diagonal", "white", "ring"),
    Attributes("blue", "diagonal", "white", "cross"),
    Attributes("green", "plain", "red", "bar"),
    Attributes("silver", "stripes", "red", "disc"),
)
SOURCE_COMBOS = tuple(c for c in ALL_COMBOS if c not in TARGET_COMBOS)


def _background(rng: np.random.Generator, yy, xx) -> np.ndarray:
    c0, c1 = rng.uniform(30, 225, 3), rng.uniform(30, 225, 3)
    angle = rng.uniform(0, 2 * np.pi)
    t = ((np.cos(angle) * xx + np.sin(angle) * yy) / SIZE + 1) / 2
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, SIZE, 2)
        ry, rx = rng.uniform(8, 40, 2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[mask] = rng.uniform(20, 235, 3)
    return img


def render_battery(attrs: Attributes, rng: np.random.Generator) -> np.ndarray:
    """One 244x244x3 uint8 image of an object with the given attributes."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float32)
    img = _background(rng, yy, xx)

    scale = rng.uniform(0.75, 1.15)
    length, width = 150 * scale, 52 * scale
    angle = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(80, SIZE - 80, 2)
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa  # along the body axis
    v = -(xx - cx) * sa + (yy - cy) * ca
    body = (np.abs(u) < length / 2) & (np.abs(v) < width / 2)

    base = np.array(BODY_COLORS[attrs.body], np.float32)
    period = width * 0.45
    if attrs.pattern == "rings":
        band = np.sin(2 * np.pi * u / period) > 0.3
    elif attrs.pattern == "stripes":
        band = np.sin(2 * np.pi * v / (width / 3)) > 0.3
    elif attrs.pattern == "diagonal":
        band = np.sin(2 * np.pi * (u + v) / period) > 0.3
    else:
        band = np.zeros_like(body)
    shade = 0.75 + 0.25 * np.cos(np.clip(v / (width / 2), -1, 1) * np.pi / 2)  # cylinder shading
    body_rgb = np.where(band[..., None], base * 0.55 + 90, base)
    img = np.where(body[..., None], body_rgb * shade[..., None], img)

    cap = body & (u > length / 2 - length * 0.12)
    img[cap] = np.array(CAP_COLORS[attrs.cap], np.float32) * shade[cap][:, None]
    nub = (u >= length / 2) & (u < length / 2 + 7 * scale) & (np.abs(v) < width / 5)
    img[nub] = np.array(CAP_COLORS[attrs.cap], np.float32) * 0.8

    if attrs.logo == "disc":
        logo = (u + length * 0.1) ** 2 + v ** 2 < (width * 0.3) ** 2
    elif attrs.logo == "bar":
        logo = (np.abs(u + length * 0.1) < width * 0.5) & (np.abs(v) < width * 0.12)
    elif attrs.logo == "ring":
        r2 = (u + length * 0.1) ** 2 + v ** 2
        logo = (r2 < (width * 0.34) ** 2) & (r2 > (width * 0.2) ** 2)
    elif attrs.logo == "cross":
        du = np.abs(u + length * 0.1)
        logo = ((du < width * 0.32) & (np.abs(v) < width * 0.09)) | ((du < width * 0.09) & (np.abs(v) < width * 0.32))
    else:
        logo = np.zeros_like(body)
    img[logo & body] = (255, 250, 240)

    img = img * rng.uniform(0.75, 1.2) + rng.uniform(-20, 20, 3)
    img = img + rng.normal(0, 8, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def render_set(combos, n_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    images = np.empty((len(combos) * n_per_class, SIZE, SIZE, 3), np.uint8)
    labels = np.repeat(np.arange(len(combos)), n_per_class)
    for i, label in enumerate(labels):
        images[i] = render_battery(combos[label], rng)
    return images, labels


def source_domain_set(n_per_class: int = 30, seed: int = 1) -> tuple[np.ndarray, np.ndarray]:
    return render_set(SOURCE_COMBOS, n_per_class, seed)


def target_class_names() -> list[str]:
    return [c.name for c in TARGET_COMBOS]


def others_pool(n: int = 50, seed: int = 2) -> np.ndarray:
    """Objects whose attribute combination is outside the target classes."""
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(SOURCE_COMBOS), n)
    return np.stack([render_battery(SOURCE_COMBOS[i], rng) for i in picks])


def target_imageset(n_per_class: int = 50, n_others: int = 50, seed: int = 11):
    """The nine target classes plus an others pool, preprocessed and ready for experiments."""
    from .dataset import ClassCatalog, ImageSet, preprocess

    names = target_class_names()
    catalog = ClassCatalog.from_names(names)
    images, labels = render_set(TARGET_COMBOS, n_per_class, seed)
    # catalog order is lexicographic; remap render order onto it
    labels = np.array([catalog.index(names[label]) for label in labels], dtype=np.int64)
    ids = [f"{catalog.classes[label]}/{i:04d}.png" for i, label in enumerate(labels)]
    pixels = np.stack([preprocess(im) for im in images])
    others = np.stack([preprocess(im) for im in others_pool(n_others, seed + 1)]) if n_others else None
    others_ids = [f"others/{i:04d}.png" for i in range(n_others)]
    return ImageSet(catalog, ids, pixels, labels, others_ids, others)


def toy_imageset(n_per_class: int = 50, seed: int = 0):
    """The nine-class colour/stripe toy set as an ImageSet."""
    from .dataset import ClassCatalog, ImageSet, preprocess

    images, labels = toy_patches(n_per_class, seed)
    catalog = ClassCatalog(tuple(f"toy{k}" for k in range(len(TOY_COLORS))))
    ids = [f"{catalog.classes[label]}/{i:04d}.png" for i, label in enumerate(labels)]
    return ImageSet(catalog, ids, np.stack([preprocess(im) for im in images]), labels.astype(np.int64))


TOY_COLORS = (
    (230, 30, 30), (30, 200, 30), (30, 30, 230), (230, 230, 30), (230, 30, 230),
    (30, 220, 220), (250, 250, 250), (15, 15, 15), (240, 140, 20),
)


def toy_patches(n_per_class: int = 50, seed: int = 0, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Nine trivially separable classes: a saturated colour with a class-specific
    stripe count, plus mild noise."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(TOY_COLORS)), n_per_class)
    images = np.empty((len(labels), size, size, 3), np.uint8)
    cols = np.arange(size)
    for i, label in enumerate(labels):
        img = np.tile(np.array(TOY_COLORS[label], np.float32), (size, size, 1))
        stripes = (cols * (label + 1) // size) % 2 == 1
        img[:, stripes] *= 0.8
        img += rng.normal(0, 6, img.shape)
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels


def write_corpus(root, images: np.ndarray, labels: np.ndarray, class_names, others: np.ndarray | None = None,
                 others_id: str = "others") -> Path:
    """Lay images out as ``root/<class>/<n>.png`` (plus ``root/others``)."""
    root = Path(root)
    for name in class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(images, labels)):
        Image.fromarray(img).save(root / class_names[label] / f"{i:04d}.png")
    if others is not None:
        (root / others_id).mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(others):
            Image.fromarray(img).save(root / others_id / f"{i:04d}.png")
    return root


def pretrain_surrogate(out_path, pool_size: int = 6000, refresh: int = 2000, epochs: int = 30, seed: int = 0,
                       arch: str = "resnet-mini", learning_rate: float = 1e-3, log=print):
    """Train ``arch`` from scratch on the source task and save it as pretrained weights.

    Images come from a pool of ``pool_size`` renders of which ``refresh`` are
    replaced by fresh renders after every epoch, so the network sees far more
    distinct images than fit in memory.
    """
    import torch

    from .backbone import build_model, make_trainable_from_scratch, save_pretrained
    from .training import cross_entropy_loss

    rng = np.random.default_rng(seed)
    n_cls = len(SOURCE_COMBOS)

    def render(n):
        labels = rng.integers(n_cls, size=n)
        return np.stack([render_battery(SOURCE_COMBOS[c], rng) for c in labels]), labels

    val_x, val_y = render(512)
    images, labels = render(pool_size)
    model = make_trainable_from_scratch(build_model(arch, n_cls, seed=seed))
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)

    def batch(x, y):
        return torch.from_numpy(x).permute(0, 3, 1, 2).float() / 127.5 - 1, torch.from_numpy(y)

    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(labels))
        for i in range(0, len(order), 64):
            x, y = batch(images[order[i : i + 64]], labels[order[i : i + 64]])
            loss = cross_entropy_loss(model.logits(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        model.eval()
        with torch.no_grad():
            correct = sum(int((model.logits(batch(val_x[i : i + 128], val_y[i : i + 128])[0]).argmax(1)
                               == torch.from_numpy(val_y[i : i + 128])).sum()) for i in range(0, len(val_y), 128))
        log(f"source epoch {epoch + 1}/{epochs}: loss {loss.item():.3f} held-out acc {correct / len(val_y):.3f}")
        if refresh and epoch + 1 < epochs:
            slots = rng.choice(len(labels), refresh, replace=False)
            images[slots], labels[slots] = render(refresh)
    model.bn_inference = True
    return save_pretrained(model, out_path)
