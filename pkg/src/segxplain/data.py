"""Synthetic endoscopy-like datasets, PNG I/O, manifests, segmentation metrics
and relevance heatmap rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

KINDS = ("polyp", "instrument")
EMPTY_FRACTION = 0.15


class ImageFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# --- image I/O --------------------------------------------------------------

def to_bytes(x: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to uint8 with round-half-away-from-zero."""
    scaled = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def from_bytes(b: np.ndarray) -> np.ndarray:
    # computed in float64 so each byte lands on the nearest float32 of 2p/255 - 1
    return (b.astype(np.float64) * (2.0 / 255.0) - 1.0).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as a (1, c, h, w) float32 tensor in [-1, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from None
    if img.format != "PNG":
        raise ImageFormatError(f"{path}: expected PNG, got {img.format}")
    if img.mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported PNG mode {img.mode!r} (need 8-bit L or RGB)")
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return from_bytes(arr)[None]


def save_image(x: np.ndarray, path) -> None:
    """Write a (c, h, w) or (1, c, h, w) tensor with c in {1, 3} as an 8-bit PNG."""
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"save_image takes a single image, got batch of {x.shape[0]}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ValueError(f"save_image needs (1|3, h, w), got {x.shape}")
    b = to_bytes(x)
    img = Image.fromarray(b[0], "L") if b.shape[0] == 1 else Image.fromarray(b.transpose(1, 2, 0), "RGB")
    img.save(path, format="PNG")


def binarize(mask: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    return np.where(mask > threshold, 1.0, -1.0).astype(np.float32)


# --- synthetic data -----------------------------------------------------------

def _mucosa(rng: np.random.Generator, size: int) -> np.ndarray:
    """Pinkish tissue with blotchy low-frequency texture, (3, h, w) in [0, 1]."""
    base = np.array([0.72, 0.42, 0.38]) + rng.uniform(-0.05, 0.05, 3)
    blotch = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    blotch /= blotch.std() + 1e-12
    grain = rng.standard_normal((3, size, size)) * 0.03
    shade = np.array([0.10, 0.07, 0.06])[:, None, None] * blotch
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    # endoscope light falls off away from the centre
    vignette = 1.0 - 0.35 * (xx ** 2 + yy ** 2)
    return (base[:, None, None] + shade + grain) * vignette


def _add_polyps(rng, img, count):
    size = img.shape[-1]
    mask = np.zeros((size, size), bool)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(count):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
        ay, ax = rng.uniform(0.12 * size, 0.25 * size, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / ax
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ay
        r = np.sqrt(u * u + v * v)
        inside = r <= 1.0
        # soft shoulder: the bump fades out across the rim
        bump = np.clip((1.25 - r) / 0.6, 0, 1)
        bump = bump * bump * (3 - 2 * bump)
        tint = np.array([0.09, 0.04, 0.03]) * rng.uniform(0.8, 1.2)
        img += tint[:, None, None] * bump
        mask |= inside
    return mask


def _add_instrument(rng, img):
    size = img.shape[-1]
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    side = rng.integers(4)
    t = rng.uniform(0.15, 0.85) * size
    start = [(t, -1.0), (t, size + 1.0), (-1.0, t), (size + 1.0, t)][side]
    inward = [(0, 1), (0, -1), (1, 0), (-1, 0)][side]
    angle = np.arctan2(inward[0], inward[1]) + rng.uniform(-0.6, 0.6)
    length = rng.uniform(0.55, 1.0) * size
    direction = np.array([np.sin(angle), np.cos(angle)])
    end = np.array(start) + length * direction
    width0 = rng.uniform(0.18, 0.28) * size
    taper = rng.uniform(0.6, 1.0) if rng.random() < 0.5 else 1.0  # wedge or rod
    p = np.stack([yy - start[0], xx - start[1]])
    seg = end - np.array(start)
    s = np.clip((p[0] * seg[0] + p[1] * seg[1]) / (seg @ seg), 0, 1)
    dist = np.hypot(p[0] - s * seg[0], p[1] - s * seg[1])
    mask = dist <= width0 * (1 - (1 - taper) * s) / 2
    metal = np.array([0.80, 0.83, 0.88]) + rng.uniform(-0.05, 0.05)
    glint = 0.12 * np.exp(-(dist / (0.25 * width0)) ** 2)
    steel = metal[:, None, None] + glint[None] + rng.standard_normal((3, size, size)) * 0.02
    img[:, mask] = steel[:, mask]
    return mask


def synth_sample(kind: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image (3,h,w) in [-1,1] on the 8-bit grid, mask (1,h,w) in {-1,+1}) pair."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {KINDS}")
    img = _mucosa(rng, size)
    empty = rng.random() < EMPTY_FRACTION
    if kind == "polyp":
        mask = _add_polyps(rng, img, 0 if empty else int(rng.integers(1, 3)))
    elif empty:
        mask = np.zeros((size, size), bool)
    else:
        mask = _add_instrument(rng, img)
    image = from_bytes(to_bytes(np.clip(img, 0, 1) * 2 - 1))
    return image, np.where(mask, 1.0, -1.0).astype(np.float32)[None]


# --- manifests ------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, Path, Path]] = field(default_factory=list)
    split: str = "train"

    def write(self, path) -> None:
        lines = [f"{i}\t{img.relative_to(self.root).as_posix()}\t{msk.relative_to(self.root).as_posix()}"
                 for i, img, msk in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    root = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected id<TAB>image<TAB>mask")
        ident, img, msk = parts
        if ident in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {ident!r}")
        seen.add(ident)
        img, msk = root / img, root / msk
        for f in (img, msk):
            if not f.is_file():
                raise ManifestError(f"{path}:{lineno}: missing file {f}")
        entries.append((ident, img, msk))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return DatasetManifest(root, entries, split or path.stem)


def load_dataset(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, list[str]]:
    images, masks = [], []
    for _, img, msk in manifest.entries:
        images.append(load_image(img)[0])
        m = load_image(msk)[0]
        masks.append(binarize(m[:1]))
    shapes = {i.shape for i in images} | {(3, *m.shape[1:]) for m in masks}
    if len(shapes) != 1 or images[0].shape[0] != 3:
        raise ManifestError(f"{manifest.root}: images/masks must share one size with 3-channel images, "
                            f"found {sorted(shapes)}")
    return np.stack(images), np.stack(masks), [e[0] for e in manifest.entries]


def gen_synthetic(kind: str, count: int, size: int, seed: int, out_dir,
                  test_fraction: float = 0.2) -> tuple[DatasetManifest, DatasetManifest]:
    """Write `count` image/mask PNG pairs plus train.tsv / test.tsv manifests.

    Sample i draws from its own PCG64 stream keyed by (seed, kind, i), so the
    output is byte-identical for a given seed. The last `test_fraction` of the
    samples form the held-out split.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if size < 8:
        raise ValueError("size must be >= 8")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_test = int(round(count * test_fraction)) if count > 1 else 0
    n_train = count - n_test
    train = DatasetManifest(out, split="train")
    test = DatasetManifest(out, split="test")
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64([seed, KINDS.index(kind), i]))
        image, mask = synth_sample(kind, size, rng)
        ident = f"{kind}_{i:04d}"
        img_path, mask_path = out / "images" / f"{ident}.png", out / "masks" / f"{ident}.png"
        save_image(image, img_path)
        save_image(mask, mask_path)
        (train if i < n_train else test).entries.append((ident, img_path, mask_path))
    train.write(out / "train.tsv")
    if test.entries:
        test.write(out / "test.tsv")
    return train, test


# --- metrics --------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Pixel counts with foreground = +1 in both masks."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for name, m in (("prediction", pred), ("truth", truth)):
        if not np.isin(m, (-1.0, 1.0)).all():
            raise ValueError(f"{name} mask must be two-valued in {{-1, +1}}")
    p, t = pred > 0, truth > 0
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


METRIC_NAMES = ("accuracy", "jaccard", "dice", "recall", "precision")


@dataclass(frozen=True)
class ImageMetrics:
    accuracy: float
    jaccard: float
    dice: float
    recall: float
    precision: float
    flag: str = ""  # "both_empty", "truth_empty", "pred_empty" or ""
    counts: ConfusionCounts | None = None

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics(c: ConfusionCounts) -> ImageMetrics:
    """Accuracy, Jaccard, Dice, recall and precision from one image's counts.

    If both masks are empty the overlap scores are 1.0 and the image is
    flagged; if only one is empty the undefined ratios are 0.
    """
    acc = (c.tp + c.tn) / c.total
    truth_empty = c.tp + c.fn == 0
    pred_empty = c.tp + c.fp == 0
    if truth_empty and pred_empty:
        return ImageMetrics(acc, 1.0, 1.0, 1.0, 1.0, "both_empty", c)
    flag = "truth_empty" if truth_empty else "pred_empty" if pred_empty else ""
    return ImageMetrics(
        acc,
        _ratio(c.tp, c.tp + c.fp + c.fn),
        _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        _ratio(c.tp, c.tp + c.fn),
        _ratio(c.tp, c.tp + c.fp),
        flag,
        c,
    )


@dataclass
class MetricsReport:
    ids: list[str]
    per_image: list[ImageMetrics]
    threshold: float = 0.0
    aggregation: str = "macro"

    @property
    def mean(self) -> dict[str, float]:
        table = np.array([m.values() for m in self.per_image], dtype=np.float64)
        return dict(zip(METRIC_NAMES, (float(v) for v in table.mean(axis=0))))

    def aggregate_line(self) -> str:
        mean = self.mean
        return "aggregate\t" + "\t".join(f"{mean[k]:.6f}" for k in METRIC_NAMES) + f"\tn={len(self.ids)}"

    def to_text(self) -> str:
        lines = [
            "# segmentation metrics report",
            f"# aggregation = {self.aggregation} (unweighted mean of per-image scores)",
            f"# threshold = {self.threshold}",
            "# empty_mask_policy = both masks empty -> jaccard/dice/recall/precision 1.0 (flag both_empty); "
            "one mask empty -> undefined ratios 0",
            "id\t" + "\t".join(METRIC_NAMES) + "\ttp\tfp\tfn\ttn\tflag",
        ]
        for ident, m in zip(self.ids, self.per_image):
            c = m.counts
            lines.append(f"{ident}\t" + "\t".join(f"{v:.6f}" for v in m.values())
                         + f"\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}\t{m.flag or '-'}")
        lines.append(self.aggregate_line())
        return "\n".join(lines) + "\n"


def aggregate(per_image: list[ImageMetrics], ids: list[str] | None = None,
              threshold: float = 0.0) -> MetricsReport:
    if not per_image:
        raise ValueError("no images to aggregate")
    ids = ids if ids is not None else [str(i) for i in range(len(per_image))]
    return MetricsReport(list(ids), list(per_image), threshold)


# --- heatmaps -----------------------------------------------------------------

def diverging_rgb(values: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to uint8 RGB: blue (-1) through white (0) to red (+1)."""
    v = np.clip(values, -1.0, 1.0)
    fade = 1.0 - np.abs(v)
    r = np.where(v < 0, fade, 1.0)
    b = np.where(v > 0, fade, 1.0)
    rgb = np.stack([r, fade, b], axis=-1)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def normalize_relevance(rel: np.ndarray) -> np.ndarray:
    """Channel-summed map scaled by 1/max|value| into [-1, 1]; zero maps stay zero."""
    rel = np.asarray(rel, dtype=np.float64)
    if rel.ndim == 4:
        if rel.shape[0] != 1:
            raise ValueError("render one map at a time")
        rel = rel[0]
    if rel.ndim == 3:
        rel = rel.sum(axis=0)
    if not np.isfinite(rel).all():
        raise ValueError("relevance map contains non-finite values")
    peak = np.abs(rel).max()
    return rel / peak if peak > 0 else np.zeros_like(rel)


def render_heatmap(rel: np.ndarray, path=None) -> np.ndarray:
    rgb = diverging_rgb(normalize_relevance(rel))
    if path is not None:
        Image.fromarray(rgb, "RGB").save(path, format="PNG")
    return rgb
