"""Procedural two-domain image benchmark and the N-way K-shot episode sampler.

Every class is a shape program: a regular polygon family (vertex count),
radial star modulation, aspect ratio, filled vs outlined body, and a number of
parallel strokes. Programs are shuffled under the seed and dealt out to the
four splits, so class parameter sets never overlap between splits. Images of
one program vary by rotation, scale and position.

The two domains render programs with different styles:

* source: smooth two-colour gradient fill over a low-frequency background;
* target: inverted palette, fill modulated by a high-frequency texture, a
  high-frequency background and heavier pixel noise.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, SamplingError

SOURCE = "source"
TARGET = "target"

SPLIT_NAMES = ("source_train", "source_test", "target_aux", "target_test")
SPLIT_DOMAINS = {"source_train": SOURCE, "source_test": SOURCE, "target_aux": TARGET, "target_test": TARGET}

_VERTICES = (3, 4, 5, 6, 7, 8)
_STAR = (0.0, 0.45)
_ASPECT = (1.0, 0.55)
_OUTLINE = (False, True)
_STROKES = (0, 1, 2)


@dataclass(frozen=True)
class ShapeProgram:
    vertices: int
    star: float
    aspect: float
    outline: bool
    strokes: int


def all_programs() -> list[ShapeProgram]:
    return [ShapeProgram(*p) for p in itertools.product(_VERTICES, _STAR, _ASPECT, _OUTLINE, _STROKES)]


@dataclass
class SyntheticSpec:
    image_size: int = 32
    source_train_classes: int = 20
    target_aux_classes: int = 10
    target_test_classes: int = 10
    source_test_classes: int = 10
    source_train_images: int = 200
    target_aux_images: int = 5
    target_test_images: int = 50
    source_test_images: int = 50
    source_noise: float = 0.03
    target_noise: float = 0.08
    source_bg_freq: tuple[float, float] = (0.5, 1.5)
    target_bg_freq: tuple[float, float] = (4.0, 7.0)
    target_texture_freq: tuple[float, float] = (5.0, 8.0)
    seed: int = 0

    def validate(self) -> None:
        counts = {"source_train_classes": self.source_train_classes,
                  "target_aux_classes": self.target_aux_classes,
                  "target_test_classes": self.target_test_classes,
                  "source_test_classes": self.source_test_classes}
        for k, v in counts.items():
            if v < 1:
                raise ConfigError(f"{k} must be positive, got {v}")
        for k in ("source_train_images", "target_aux_images", "target_test_images", "source_test_images"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        total = sum(counts.values())
        if total > len(all_programs()):
            raise ConfigError(f"{total} classes requested but only {len(all_programs())} shape programs exist")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")

    def class_counts(self) -> dict[str, int]:
        return {"source_train": self.source_train_classes, "source_test": self.source_test_classes,
                "target_aux": self.target_aux_classes, "target_test": self.target_test_classes}

    def images_per_class(self) -> dict[str, int]:
        return {"source_train": self.source_train_images, "source_test": self.source_test_images,
                "target_aux": self.target_aux_images, "target_test": self.target_test_images}


@dataclass
class DatasetSplit:
    name: str
    domain: str
    images: np.ndarray          # [n x 3 x h x w] float32 in [0, 1]
    labels: np.ndarray          # [n] global class ids
    class_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_ids:
            self.class_ids = sorted(int(c) for c in np.unique(self.labels))
        self._by_class = {c: np.flatnonzero(self.labels == c) for c in self.class_ids}

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, class_id: int) -> np.ndarray:
        return self._by_class[class_id]

    def min_images_per_class(self) -> int:
        return min(len(v) for v in self._by_class.values())


@dataclass
class Benchmark:
    spec: SyntheticSpec
    splits: dict[str, DatasetSplit]
    programs: dict[int, ShapeProgram]

    def __getitem__(self, name: str) -> DatasetSplit:
        return self.splits[name]

    @property
    def source_train(self) -> DatasetSplit:
        return self.splits["source_train"]

    @property
    def target_aux(self) -> DatasetSplit:
        return self.splits["target_aux"]

    @property
    def target_test(self) -> DatasetSplit:
        return self.splits["target_test"]

    @property
    def source_test(self) -> DatasetSplit:
        return self.splits["source_test"]


# ---------------------------------------------------------------- rendering


def _shape_alpha(prog: ShapeProgram, size: int, n: int, rng: np.random.Generator):
    """Soft coverage masks [n x size x size] and the rotated coordinate frame."""
    lin = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    rot = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    scale = rng.uniform(0.5, 0.7, n)[:, None, None]
    shift = rng.uniform(-0.15, 0.15, (2, n))[:, :, None, None]
    x = xx[None] - shift[0]
    y = yy[None] - shift[1]
    xr = np.cos(rot) * x + np.sin(rot) * y
    yr = -np.sin(rot) * x + np.cos(rot) * y
    yr = yr / prog.aspect
    r = np.hypot(xr, yr)
    theta = np.arctan2(yr, xr)
    v = prog.vertices
    sector = 2 * np.pi / v
    edge = np.cos(np.pi / v) / np.cos(np.mod(theta, sector) - np.pi / v)
    edge = edge * (1 + prog.star * np.cos(v * theta)) / (1 + prog.star)
    sharp = size * 0.75
    inside = 1 / (1 + np.exp(-(scale * edge - r) * sharp))
    if prog.outline:
        inner = 1 / (1 + np.exp(-(0.55 * scale * edge - r) * sharp))
        body = inside - inner
    else:
        body = inside
    if prog.strokes:
        offsets = np.linspace(-0.3, 0.3, prog.strokes + 2)[1:-1] if prog.strokes > 1 else np.array([0.0])
        bars = np.zeros_like(r)
        for o in offsets:
            bars = np.maximum(bars, 1 / (1 + np.exp((np.abs(yr * prog.aspect - o * scale) - 0.07) * sharp)))
        bars = bars * inside
        body = np.maximum(body, bars) if prog.outline else body * (1 - bars)
    return np.clip(body, 0, 1), xx, yy


def _wave(xx, yy, freq, rng, n):
    phi = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    psi = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    f = rng.uniform(*freq, n)[:, None, None]
    return np.sin(np.pi * f * (xx[None] * np.cos(phi) + yy[None] * np.sin(phi)) + psi)


def _scaled(freq: tuple[float, float], rel: float) -> tuple[float, float]:
    return (freq[0] * rel, freq[1] * rel)


def _palette(rng: np.random.Generator, n: int) -> np.ndarray:
    """Warm-biased RGB colours [n x 3]; the target domain inverts them."""
    hue = rng.uniform(0.0, 0.35, n)
    base = np.stack([np.cos(2 * np.pi * (hue + k / 3)) for k in range(3)], axis=1)
    return np.clip(0.55 + 0.4 * base, 0, 1)


def render_class(prog: ShapeProgram, domain: str, n: int, spec: SyntheticSpec,
                 rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    alpha, xx, yy = _shape_alpha(prog, size, n, rng)
    c0, c1 = _palette(rng, n), _palette(rng, n)
    phi = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    t = 0.5 + 0.5 * (xx[None] * np.cos(phi) + yy[None] * np.sin(phi)) / np.sqrt(2)
    fg = c0[:, :, None, None] + (c1 - c0)[:, :, None, None] * t[:, None]
    bg_col = _palette(rng, n)[:, :, None, None] * 0.35
    # wave frequencies are given in cycles per 32 px and scale with the image
    rel = size / 32.0
    if domain == SOURCE:
        bg = bg_col + 0.12 * _wave(xx, yy, _scaled(spec.source_bg_freq, rel), rng, n)[:, None]
        noise = spec.source_noise
    else:
        fg = 1 - 0.6 * fg
        tex = np.sign(_wave(xx, yy, _scaled(spec.target_texture_freq, rel), rng, n)
                      * _wave(xx, yy, _scaled(spec.target_texture_freq, rel), rng, n))
        fg = fg * (0.8 + 0.2 * tex[:, None])
        bg = (1 - bg_col) * 0.3 + 0.08 * np.sign(_wave(xx, yy, _scaled(spec.target_bg_freq, rel), rng, n))[:, None]
        noise = spec.target_noise
    img = bg * (1 - alpha[:, None]) + fg * alpha[:, None]
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- benchmark


def assign_programs(spec: SyntheticSpec) -> dict[str, list[tuple[int, ShapeProgram]]]:
    """Deal shuffled programs to the splits; global class ids are consecutive per split."""
    progs = all_programs()
    order = np.random.default_rng([spec.seed, 7919]).permutation(len(progs))
    out, cursor = {}, 0
    for name in SPLIT_NAMES:
        k = spec.class_counts()[name]
        out[name] = [(cursor + j, progs[order[cursor + j]]) for j in range(k)]
        cursor += k
    return out


def generate_benchmark(spec: SyntheticSpec | None = None) -> Benchmark:
    spec = spec or SyntheticSpec()
    spec.validate()
    splits, programs = {}, {}
    per_class = spec.images_per_class()
    for split_code, (name, classes) in enumerate(assign_programs(spec).items()):
        domain = SPLIT_DOMAINS[name]
        imgs, labels = [], []
        for cid, prog in classes:
            rng = np.random.default_rng([spec.seed, split_code, cid])
            imgs.append(render_class(prog, domain, per_class[name], spec, rng))
            labels.append(np.full(per_class[name], cid, dtype=np.int64))
            programs[cid] = prog
        splits[name] = DatasetSplit(name, domain, np.concatenate(imgs), np.concatenate(labels),
                                    [cid for cid, _ in classes])
    return Benchmark(spec, splits, programs)


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray      # fsl labels 0..N-1
    query_images: np.ndarray
    query_labels: np.ndarray
    support_global: np.ndarray
    query_global: np.ndarray
    domain: str
    classes: np.ndarray             # global id of fsl label i
    support_index: np.ndarray | None = None
    query_index: np.ndarray | None = None   # -1 marks a jittered reuse of a support image

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.support_images, self.query_images])

    @property
    def global_labels(self) -> np.ndarray:
        return np.concatenate([self.support_global, self.query_global])


def jitter(image: np.ndarray, rng: np.random.Generator, max_degrees: float = 15.0,
           max_shift: float = 2.0) -> np.ndarray:
    """Small rotation plus translation of one [c x h x w] image."""
    angle = rng.uniform(-max_degrees, max_degrees)
    dy, dx = rng.uniform(-max_shift, max_shift, 2)
    out = ndimage.rotate(image, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    out = ndimage.shift(out, (0, dy, dx), order=1, mode="nearest")
    return np.clip(out, 0, 1).astype(image.dtype)


def sample_episode(split: DatasetSplit, n_way: int, k_shot: int, m_query: int,
                   rng: np.random.Generator, reuse_jitter: bool = False) -> Episode:
    """Draw classes then images uniformly without replacement.

    When a class holds fewer than K+M images and ``reuse_jitter`` is set, the
    K support images are drawn normally and each query is a jittered copy of a
    randomly chosen support image; otherwise the shortfall is an error.
    """
    if n_way < 1 or k_shot < 1 or m_query < 1:
        raise SamplingError(f"episode needs positive N, K, M; got N={n_way} K={k_shot} M={m_query}")
    if len(split.class_ids) < n_way:
        raise SamplingError(f"split {split.name!r} has {len(split.class_ids)} classes, episode needs {n_way}")
    need = k_shot + m_query
    have = split.min_images_per_class()
    if have < need and not (reuse_jitter and have >= k_shot):
        raise SamplingError(f"split {split.name!r} has {have} images per class, episode needs "
                            f"K+M = {k_shot}+{m_query} = {need}")
    classes = rng.choice(np.asarray(split.class_ids), n_way, replace=False)
    s_idx, q_idx, q_imgs = [], [], []
    for cid in classes:
        pool = split.indices(int(cid))
        if len(pool) >= need:
            pick = rng.choice(pool, need, replace=False)
            s_idx.append(pick[:k_shot])
            q_idx.append(pick[k_shot:])
            q_imgs.append(split.images[pick[k_shot:]])
        else:
            pick = rng.choice(pool, k_shot, replace=False)
            s_idx.append(pick)
            src = rng.choice(pick, m_query, replace=True)
            q_idx.append(np.full(m_query, -1))
            q_imgs.append(np.stack([jitter(split.images[i], rng) for i in src]))
    s_idx = np.concatenate(s_idx)
    fsl = np.arange(n_way)
    return Episode(
        support_images=split.images[s_idx],
        support_labels=np.repeat(fsl, k_shot),
        query_images=np.concatenate(q_imgs),
        query_labels=np.repeat(fsl, m_query),
        support_global=np.repeat(classes, k_shot),
        query_global=np.repeat(classes, m_query),
        domain=split.domain,
        classes=classes,
        support_index=s_idx,
        query_index=np.concatenate(q_idx),
    )


# ---------------------------------------------------------------- export


def export_benchmark(bench: Benchmark, directory: str | os.PathLike) -> Path:
    """Write raw little-endian tensors plus a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "med2n-benchmark/1", "spec": asdict(bench.spec), "splits": {},
                "programs": {str(k): asdict(v) for k, v in sorted(bench.programs.items())}}
    for name, split in bench.splits.items():
        split.images.astype("<f4").tofile(d / f"{name}.images.f32")
        split.labels.astype("<i4").tofile(d / f"{name}.labels.i32")
        manifest["splits"][name] = {"domain": split.domain, "shape": list(split.images.shape),
                                    "class_ids": list(map(int, split.class_ids))}
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(d / "manifest.json")
    return d / "manifest.json"


def load_benchmark(directory: str | os.PathLike) -> Benchmark:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spec_fields = manifest["spec"]
    for k in ("source_bg_freq", "target_bg_freq", "target_texture_freq"):
        spec_fields[k] = tuple(spec_fields[k])
    spec = SyntheticSpec(**spec_fields)
    splits = {}
    for name, meta in manifest["splits"].items():
        imgs = np.fromfile(d / f"{name}.images.f32", dtype="<f4").reshape(meta["shape"]).astype(np.float32)
        labels = np.fromfile(d / f"{name}.labels.i32", dtype="<i4").astype(np.int64)
        splits[name] = DatasetSplit(name, meta["domain"], imgs, labels, meta["class_ids"])
    programs = {int(k): ShapeProgram(**v) for k, v in manifest["programs"].items()}
    return Benchmark(spec, splits, programs)
