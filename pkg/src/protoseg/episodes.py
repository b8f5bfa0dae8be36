"""Datasets and N-way K-shot episodes.

Two dataset sources share one small interface (``classes``, ``folds``,
``count(cid)``, ``load(cid, index)``):

* :class:`SyntheticSource` renders shape scenes on demand;
* :class:`DirectorySource` reads PPM images and PGM masks listed in
  per-class index files (see :func:`ingest_directory`).

Global class ids start at 1; 0 is background. Masks returned by sources
use ``-1`` for ignored pixels (stored as 255 on disk).
"""

from __future__ import annotations

import colorsys
import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import arraydiff as ad
from . import netpbm

SHAPES = ("circle", "square", "triangle", "ring", "cross", "bar", "diamond", "l_shape")
N_FOLDS = 4
IGNORE_ON_DISK = 255


class DatasetError(ValueError):
    pass


class SceneError(RuntimeError):
    pass


# -- synthetic scenes -----------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    num_classes: int = 8
    max_instances: int = 3
    min_radius: float = 4.0
    max_radius: float | None = None  # defaults to image_size / 4
    noise: float = 0.04
    texture_amplitude: float = 0.12
    distractor_prob: float = 0.5
    texture_seed: int = 0
    hue_jitter: float | None = 0.08  # None: fill hue uniform, unrelated to class

    def __post_init__(self):
        if self.num_classes < N_FOLDS:
            raise ValueError(f"need ≥ {N_FOLDS} classes for {N_FOLDS} folds")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} shape classes are available")
        if self.min_radius < 4:
            raise ValueError("min_radius must be >= 4 pixels")
        if self.image_size < 2 * self.min_radius:
            raise ValueError("image too small for the minimum shape radius")
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")
        if self.hue_jitter is not None and not self.hue_jitter >= 0:
            raise ValueError("hue_jitter must be >= 0 or None")

    @property
    def radius_range(self) -> tuple[float, float]:
        hi = self.max_radius if self.max_radius is not None else self.image_size / 4
        return self.min_radius, max(self.min_radius, hi)


def shape_mask(kind: str, size: int, cy: float, cx: float, radius: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    au, av = np.abs(u), np.abs(v)
    if kind == "circle":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (au <= 0.8) & (av <= 0.8)
    if kind == "triangle":
        return (v <= 0.7) & (au <= 0.9 * (v + 0.9) / 1.6)
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.5**2)
    if kind == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if kind == "bar":
        return (au <= 1.0) & (av <= 0.35)
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "l_shape":
        return ((u >= -0.9) & (u <= -0.3) & (av <= 0.9)) | ((au <= 0.9) & (v >= 0.3) & (v <= 0.9))
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    size = config.image_size
    hue, sat, val = rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.3, 0.7)
    base = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    yy, xx = np.mgrid[0:size, 0:size] / size
    texture = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(1, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    texture *= config.texture_amplitude / 3
    tint = rng.uniform(0.5, 1.0, size=3)
    return base[:, None, None] + tint[:, None, None] * texture[None]


def _fill_hue(rng: np.random.Generator, config: SynthConfig, cid: int) -> float:
    if config.hue_jitter is None:
        return float(rng.uniform())
    # each class has its own hue; instances scatter around it
    return float(((cid - 1) / config.num_classes + rng.normal(0.0, config.hue_jitter)) % 1.0)


def generate_scene(config: SynthConfig, class_ids, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render a scene containing every class in ``class_ids``.

    Returns a float32 [3, S, S] image in [0, 1] and an int64 [S, S] mask
    labelled with global class ids (0 elsewhere). Each instance keeps at
    least ``min_visible`` pixels after later instances are painted over it.
    """
    ids = sorted({int(c) for c in class_ids})
    if not ids:
        raise ValueError("generate_scene needs at least one class")
    if ids[0] < 1 or ids[-1] > config.num_classes:
        raise ValueError(f"class ids must lie in 1..{config.num_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), config.texture_seed, *ids]))
    size = config.image_size
    image = _background(rng, config)
    mask = np.zeros((size, size), dtype=np.int64)

    n_inst = max(len(ids), int(rng.integers(1, config.max_instances + 1)))
    kinds = ids + [int(c) for c in rng.choice(ids, size=n_inst - len(ids))]
    r_lo, r_hi = config.radius_range
    min_visible = 4
    placed: list[np.ndarray] = []
    for cid in kinds:
        for _ in range(100):
            r = rng.uniform(r_lo, r_hi)
            cy, cx = rng.uniform(r * 0.6, size - r * 0.6, size=2)
            m = shape_mask(SHAPES[cid - 1], size, cy, cx, r, rng.uniform(0, np.pi))
            if m.sum() >= min_visible and all((p & ~m).sum() >= min_visible for p in placed):
                break
        else:
            raise SceneError(f"could not place a {SHAPES[cid - 1]} after 100 attempts")
        placed = [p & ~m for p in placed] + [m]
        rgb = colorsys.hsv_to_rgb(_fill_hue(rng, config, cid), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
        image[:, m] = np.array(rgb)[:, None]
        mask[m] = cid
    image += rng.normal(0.0, config.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def default_folds(classes: Sequence[int], n_folds: int = N_FOLDS) -> dict[int, int]:
    """Contiguous blocks of classes per fold (classes 1, 2 -> fold 0 for 8 classes)."""
    classes = sorted(classes)
    if len(classes) < n_folds:
        raise DatasetError(f"need >= {n_folds} classes for {n_folds} folds")
    return {c: i * n_folds // len(classes) for i, c in enumerate(classes)}


class Source(Protocol):
    classes: list[int]
    folds: dict[int, int] | None

    def count(self, class_id: int) -> int: ...

    def load(self, class_id: int, index: int) -> tuple[np.ndarray, np.ndarray]: ...


class SyntheticSource:
    """``per_class`` scenes per class, rendered lazily and deterministically.

    Scene ``index`` of class ``c`` contains ``c`` and, with probability
    ``distractor_prob``, a distractor from another class of the same fold,
    so held-out silhouettes never appear in training scenes.
    """

    def __init__(self, config: SynthConfig = SynthConfig(), per_class: int = 200, seed: int = 0):
        self.config = config
        self.per_class = per_class
        self.seed = int(seed)
        self.classes = list(range(1, config.num_classes + 1))
        self.folds = default_folds(self.classes)
        self._cache = functools.lru_cache(maxsize=1024)(self._render)

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_cache"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._cache = functools.lru_cache(maxsize=1024)(self._render)

    def count(self, class_id: int) -> int:
        return self.per_class if class_id in self.folds else 0

    def scene_classes(self, class_id: int, index: int) -> list[int]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, class_id, index, 1]))
        ids = [class_id]
        mates = [c for c in self.classes if c != class_id and self.folds[c] == self.folds[class_id]]
        if mates and rng.uniform() < self.config.distractor_prob:
            ids.append(int(rng.choice(mates)))
        return ids

    def _render(self, class_id: int, index: int):
        seed = int(np.random.SeedSequence([self.seed, class_id, index, 2]).generate_state(1)[0])
        return generate_scene(self.config, self.scene_classes(class_id, index), seed)

    def load(self, class_id: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        if class_id not in self.folds or not 0 <= index < self.per_class:
            raise IndexError(f"no scene {index} for class {class_id}")
        image, mask = self._cache(class_id, index)
        return image.copy(), mask.copy()


# -- directory datasets ---------------------------------------------------


@dataclass(frozen=True)
class DirectoryLayout:
    """Where things live under a dataset root.

    ``index_dir/<class_id>.tsv`` has one line per image:
    ``image.ppm<TAB>mask.pgm<TAB>id,id,...`` (paths relative to the root).
    ``fold_file`` has lines ``<fold><TAB>id,id,...``.
    """

    index_dir: str = "index"
    fold_file: str = "folds.txt"
    image_size: int | None = None


def read_folds(path) -> dict[int, int]:
    folds = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            fold, ids = line.split("\t")
            for c in ids.split(","):
                folds[int(c)] = int(fold)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed fold line") from None
    return folds


def write_folds(path, folds: Mapping[int, int]) -> None:
    by_fold: dict[int, list[int]] = {}
    for c, f in sorted(folds.items()):
        by_fold.setdefault(f, []).append(c)
    Path(path).write_text("".join(f"{f}\t{','.join(map(str, cs))}\n" for f, cs in sorted(by_fold.items())))


def _parse_ids(text: str) -> list[int]:
    return [int(c) for c in text.split(",") if c.strip()]


class DirectorySource:
    def __init__(self, root, layout: DirectoryLayout, entries: dict[int, list[tuple[Path, Path, list[int]]]], folds):
        self.root = Path(root)
        self.layout = layout
        self.entries = entries
        self.classes = sorted(entries)
        self.folds = folds

    def count(self, class_id: int) -> int:
        return len(self.entries.get(class_id, ()))

    def load(self, class_id: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        image_path, mask_path, _ = self.entries[class_id][index]
        rgb = netpbm.read(image_path)
        if rgb.ndim != 3:
            raise DatasetError(f"{image_path}: expected a P6 colour image")
        raw = netpbm.read(mask_path)
        if raw.ndim != 2:
            raise DatasetError(f"{mask_path}: expected a P5 grey mask")
        if raw.shape != rgb.shape[:2]:
            raise DatasetError(f"{mask_path}: size {raw.shape} disagrees with image {rgb.shape[:2]}")
        values = set(np.unique(raw).tolist()) - {0, IGNORE_ON_DISK}
        unknown = sorted(values - set(self.classes))
        if unknown:
            raise DatasetError(f"{mask_path}: unknown class id(s) {unknown}")
        mask = raw.astype(np.int64)
        mask[raw == IGNORE_ON_DISK] = -1
        image = netpbm.image_to_chw(rgb)
        size = self.layout.image_size
        if size is not None and raw.shape != (size, size):
            image = ad.bilinear_resize(ad.Tensor(image), size, size).value.astype(np.float32)
            mask = ad.nearest_resize(mask, size, size)
        return image, mask

    def load_raw_mask(self, class_id: int, index: int) -> np.ndarray:
        return netpbm.read(self.entries[class_id][index][1])


def ingest_directory(root, layout: DirectoryLayout = DirectoryLayout()) -> DirectorySource:
    """Index a dataset directory; pixel data is read lazily by ``load``."""
    root = Path(root)
    index_dir = root / layout.index_dir
    files = sorted(index_dir.glob("*.tsv")) if index_dir.is_dir() else []
    if not files:
        raise DatasetError(f"no classes found under {index_dir}")
    known = set()
    for f in files:
        try:
            known.add(int(f.stem))
        except ValueError:
            raise DatasetError(f"{f}: index file name must be a class id") from None
    entries: dict[int, list[tuple[Path, Path, list[int]]]] = {}
    for f in files:
        cid = int(f.stem)
        rows = []
        for lineno, line in enumerate(f.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{f}:{lineno}: expected image<TAB>mask<TAB>class ids")
            image_path, mask_path = root / parts[0], root / parts[1]
            if not image_path.is_file():
                raise DatasetError(f"{f}:{lineno}: missing image {image_path}")
            if not mask_path.is_file():
                raise DatasetError(f"{f}:{lineno}: missing mask {mask_path}")
            try:
                ids = _parse_ids(parts[2])
            except ValueError:
                raise DatasetError(f"{f}:{lineno}: malformed class ids {parts[2]!r}") from None
            unknown = sorted(set(ids) - known)
            if unknown:
                raise DatasetError(f"{f}:{lineno}: unknown class id(s) {unknown} for {mask_path}")
            rows.append((image_path, mask_path, ids))
        entries[cid] = rows
    fold_path = root / layout.fold_file
    folds = read_folds(fold_path) if fold_path.is_file() else None
    return DirectorySource(root, layout, entries, folds)


def export_dataset(source: Source, out_dir, layout: DirectoryLayout = DirectoryLayout()) -> None:
    """Write ``source`` in the directory layout read by :func:`ingest_directory`."""
    out = Path(out_dir)
    (out / layout.index_dir).mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    for cid in source.classes:
        lines = []
        for i in range(source.count(cid)):
            image, mask = source.load(cid, i)
            stem = f"c{cid:03d}_{i:05d}"
            netpbm.write(out / "images" / f"{stem}.ppm", netpbm.chw_to_image(image))
            netpbm.write(out / "masks" / f"{stem}.pgm", mask_to_pgm(mask))
            ids = sorted(set(np.unique(mask).tolist()) - {0, -1})
            lines.append(f"images/{stem}.ppm\tmasks/{stem}.pgm\t{','.join(map(str, ids))}\n")
        (out / layout.index_dir / f"{cid}.tsv").write_text("".join(lines))
    if source.folds is not None:
        write_folds(out / layout.fold_file, source.folds)


def mask_to_pgm(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.max(initial=0) >= IGNORE_ON_DISK:
        raise ValueError("class ids must be < 255 to be stored in PGM")
    out = mask.astype(np.uint8)
    out[mask < 0] = IGNORE_ON_DISK
    return out


# -- splits and episodes --------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    """Classes of ``test_fold`` are for testing, all others for training."""

    folds: Mapping[int, int]
    test_fold: int
    role: str = "train"

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError("role must be 'train' or 'test'")
        if self.test_fold not in set(self.folds.values()):
            raise DatasetError(f"fold {self.test_fold} has no classes")
        assert not set(self.train_classes) & set(self.test_classes)

    @property
    def train_classes(self) -> list[int]:
        return sorted(c for c, f in self.folds.items() if f != self.test_fold)

    @property
    def test_classes(self) -> list[int]:
        return sorted(c for c, f in self.folds.items() if f == self.test_fold)

    @property
    def classes(self) -> list[int]:
        return self.train_classes if self.role == "train" else self.test_classes

    def with_role(self, role: str) -> "DatasetSplit":
        return DatasetSplit(self.folds, self.test_fold, role)


@dataclass
class Episode:
    support_images: list[list[np.ndarray]]  # [N][K] float32 [3, H, W]
    support_masks: list[list[np.ndarray]]  # [N][K] labels in {-1, 0..N}
    query_images: list[np.ndarray]
    query_masks: list[np.ndarray]
    class_map: dict[int, int]  # episode id 1..N -> global class id
    seed: int = 0

    @property
    def n_ways(self) -> int:
        return len(self.support_images)

    @property
    def k_shots(self) -> int:
        return len(self.support_images[0])

    @property
    def n_queries(self) -> int:
        return len(self.query_images)

    def global_ids(self) -> np.ndarray:
        """Lookup table mapping episode ids (index) to global ids; 0 -> 0."""
        table = np.zeros(self.n_ways + 1, dtype=np.int64)
        for local, glob in self.class_map.items():
            table[local] = glob
        return table


def remap_mask(mask: np.ndarray, global_to_local: Mapping[int, int]) -> np.ndarray:
    """Episode classes -> 1..N, other foreground -> 0, ignore (-1) kept."""
    out = np.zeros_like(mask)
    out[mask < 0] = -1
    for glob, local in global_to_local.items():
        out[mask == glob] = local
    return out


def sample_episode(
    source: Source,
    split: DatasetSplit,
    n_ways: int,
    k_shots: int,
    n_queries: int = 1,
    seed: int = 0,
    max_retries: int = 100,
) -> Episode:
    """Draw ``n_ways`` classes uniformly from ``split`` and build an episode.

    Each query is a scene of one of the episode classes chosen uniformly;
    support and query scenes of a class are distinct. Supports are redrawn
    until every class has labelled pixels, queries until they contain
    some episode foreground.
    """
    if n_ways < 1 or k_shots < 1 or n_queries < 1:
        raise ValueError("n_ways, k_shots and n_queries must be >= 1")
    pool = [c for c in split.classes if source.count(c) > 0]
    if len(pool) < n_ways:
        raise DatasetError(f"split has {len(pool)} usable classes, episode needs {n_ways}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x455053]))
    chosen = [int(c) for c in rng.choice(pool, size=n_ways, replace=False)]
    to_local = {g: i + 1 for i, g in enumerate(chosen)}
    query_cls = [chosen[int(rng.integers(n_ways))] for _ in range(n_queries)]
    for c in chosen:
        need = k_shots + query_cls.count(c)
        if source.count(c) < need:
            raise DatasetError(f"class {c} has {source.count(c)} images, episode needs {need}")

    for _ in range(max_retries):
        picks = {c: [int(i) for i in rng.permutation(source.count(c))] for c in chosen}
        s_imgs, s_masks = [], []
        for n, c in enumerate(chosen, 1):
            shots = [source.load(c, i) for i in picks[c][:k_shots]]
            masks = [remap_mask(m, to_local) for _, m in shots]
            if not any((m == n).any() for m in masks):
                break
            s_imgs.append([img for img, _ in shots])
            s_masks.append(masks)
        else:
            break
    else:
        raise DatasetError("could not draw a support set covering every class")

    q_imgs, q_masks = [], []
    used = {c: k_shots for c in chosen}
    for c in query_cls:
        for _ in range(max_retries):
            if used[c] >= len(picks[c]):
                raise DatasetError(f"ran out of query scenes for class {c}")
            img, m = source.load(c, picks[c][used[c]])
            used[c] += 1
            m = remap_mask(m, to_local)
            if (m > 0).any():
                break
        else:
            raise DatasetError("could not draw a query with foreground")
        q_imgs.append(img)
        q_masks.append(m)
    class_map = {local: glob for glob, local in to_local.items()}
    return Episode(s_imgs, s_masks, q_imgs, q_masks, class_map, int(seed))


def flip_episode(episode: Episode, rng: np.random.Generator, prob: float = 0.5) -> Episode:
    """Horizontally flip each image together with its mask with probability ``prob``."""

    def maybe(img, mask):
        if rng.uniform() < prob:
            return img[:, :, ::-1].copy(), mask[:, ::-1].copy()
        return img, mask

    s_imgs, s_masks = [], []
    for imgs, masks in zip(episode.support_images, episode.support_masks):
        pairs = [maybe(i, m) for i, m in zip(imgs, masks)]
        s_imgs.append([p[0] for p in pairs])
        s_masks.append([p[1] for p in pairs])
    q = [maybe(i, m) for i, m in zip(episode.query_images, episode.query_masks)]
    return Episode(s_imgs, s_masks, [p[0] for p in q], [p[1] for p in q], dict(episode.class_map), episode.seed)


# -- episode dumps --------------------------------------------------------


def dump_episode(episode: Episode, out_dir) -> None:
    """Write an episode as PPM/PGM files with global class ids, an
    ``index.tsv`` in the dataset index format and a ``class_map.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = episode.global_ids()
    lines = []

    def write(stem, image, mask):
        glob = np.where(mask > 0, table[np.clip(mask, 0, None)], mask)
        netpbm.write(out / f"{stem}.ppm", netpbm.chw_to_image(image))
        netpbm.write(out / f"{stem}.pgm", mask_to_pgm(glob))
        ids = sorted(set(np.unique(glob).tolist()) - {0, -1})
        lines.append(f"{stem}.ppm\t{stem}.pgm\t{','.join(map(str, ids))}\n")

    for n, (imgs, masks) in enumerate(zip(episode.support_images, episode.support_masks), 1):
        for k, (img, m) in enumerate(zip(imgs, masks)):
            write(f"support_{n}_{k}", img, m)
    for t, (img, m) in enumerate(zip(episode.query_images, episode.query_masks)):
        write(f"query_{t}", img, m)
    (out / "index.tsv").write_text("".join(lines))
    (out / "class_map.txt").write_text(
        "".join(f"{local}\t{glob}\n" for local, glob in sorted(episode.class_map.items()))
    )
