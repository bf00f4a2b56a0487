"""Embedding provision: on-disk caches, the trainable vision adapter, and mocks.

The engine never runs a neural backbone.  Real embeddings arrive through
cache files produced offline; synthetic runs use the mock encoders below,
which leak exactly the information a real egocentric image carries (scene
content plus implied viewpoint) so the learning problem stays well posed.

Cache binary format: magic "AFFEMB1\\0", u32 LE dimension, u64 LE entry
count, then per entry a u16 LE key byte-length, the UTF-8 key, and
dimension f32 LE values.  A JSONL alternative ({"key": str, "v": [...]})
is accepted for hand-written fixtures.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheFormatError, MissingEmbeddingError, ShapeError
from .seeding import stable_rng

CACHE_MAGIC = b"AFFEMB1\x00"

REAL_DIM = 512  # typical backbone width
MOCK_DIM = 64  # synthetic desk-scale width
REPHRASE_NOISE = 0.01


@dataclass(eq=False)
class EmbeddingCache:
    """Immutable key -> vector store; every entry shares one dimension."""

    dimension: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def get(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for key {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def save_cache(cache: EmbeddingCache, path: str) -> None:
    """Write the binary format; entries sorted by key for byte determinism."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", cache.dimension))
        fh.write(struct.pack("<Q", len(cache.entries)))
        for key in sorted(cache.entries):
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CacheFormatError(f"key longer than 65535 bytes: {key[:40]!r}...")
            vec = np.asarray(cache.entries[key], dtype="<f4")
            if vec.shape != (cache.dimension,):
                raise CacheFormatError(f"entry {key!r} has shape {vec.shape}, want ({cache.dimension},)")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())


def _load_cache_jsonl(path: str) -> EmbeddingCache:
    entries: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                key, values = rec["key"], rec["v"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CacheFormatError(f"{path}:{lineno}: bad record ({exc})") from exc
            vec = np.asarray(values, dtype=np.float64)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape != (dim,):
                raise CacheFormatError(f"{path}:{lineno}: dimension {vec.shape} != ({dim},)")
            if key in entries:
                raise CacheFormatError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = vec
    if dim is None:
        raise CacheFormatError(f"{path}: empty JSONL cache has no dimension")
    return EmbeddingCache(dim, entries)


def load_cache(path: str) -> EmbeddingCache:
    """Load a cache file, sniffing binary magic and falling back to JSONL."""
    with open(path, "rb") as fh:
        head = fh.read(len(CACHE_MAGIC))
        if head != CACHE_MAGIC:
            if path.endswith(".jsonl"):
                return _load_cache_jsonl(path)
            raise CacheFormatError(f"{path}: bad magic {head!r}")
        raw = fh.read()
    try:
        dim = struct.unpack_from("<I", raw, 0)[0]
        count = struct.unpack_from("<Q", raw, 4)[0]
    except struct.error as exc:
        raise CacheFormatError(f"{path}: truncated header") from exc
    entries: dict[str, np.ndarray] = {}
    off = 12
    for i in range(count):
        if off + 2 > len(raw):
            raise CacheFormatError(f"{path}: truncated at entry {i} (key length)")
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + klen + 4 * dim > len(raw):
            raise CacheFormatError(f"{path}: truncated at entry {i}")
        key = raw[off : off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        if key in entries:
            raise CacheFormatError(f"{path}: duplicate key {key!r}")
        if not np.all(np.isfinite(vec)):
            raise CacheFormatError(f"{path}: non-finite values under key {key!r}")
        entries[key] = vec
    if off != len(raw):
        raise CacheFormatError(f"{path}: {len(raw) - off} trailing bytes after {count} entries")
    return EmbeddingCache(int(dim), entries)


@dataclass(eq=False)
class VisionAdapter:
    """Trainable affine map over frozen backbone image embeddings.

    Stands in for vision-encoder fine-tuning: identity/zero initialization
    makes the first epoch see exactly the raw cached embeddings.
    """

    weight: np.ndarray
    bias: np.ndarray
    trainable: bool = True

    @classmethod
    def identity(cls, dim: int, trainable: bool = True) -> "VisionAdapter":
        return cls(np.eye(dim), np.zeros(dim), trainable)

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    def apply(self, e: np.ndarray) -> np.ndarray:
        """weight @ e + bias; accepts a single vector or a (n, d) batch."""
        e = np.asarray(e, dtype=np.float64)
        if e.shape[-1] != self.dim:
            raise ShapeError(f"embedding dimension {e.shape[-1]} != adapter dimension {self.dim}")
        return e @ self.weight.T + self.bias

    def copy(self) -> "VisionAdapter":
        return VisionAdapter(self.weight.copy(), self.bias.copy(), self.trainable)


def encode_text(query: str, source) -> np.ndarray:
    """Frozen text embedding for an exact phrase, from a cache or mock."""
    return source.get(query)


def encode_image(image_key: str, source, adapter: VisionAdapter | None = None) -> np.ndarray:
    """Image embedding for a cached key, optionally passed through the adapter."""
    e = source.get(image_key)
    if adapter is None:
        return e
    return adapter.apply(e)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class MockTextEncoder:
    """Deterministic stand-in for a frozen language encoder.

    Each registered task gets a seeded unit vector; when a semantic anchor is
    supplied (see MockVisionEncoder.appearance_anchor) the vector is pulled
    toward it, so tasks that happen at the same place land near each other the
    way real language embeddings of related phrases do.  Rephrasings add
    isotropic noise of scale `noise` and renormalize, modelling synonymy with
    a controllable spread.
    """

    def __init__(self, dim: int = MOCK_DIM, seed: int = 0, noise: float = REPHRASE_NOISE,
                 task_weight: float = 0.35):
        self.dim = dim
        self.seed = seed
        self.noise = noise
        self.task_weight = task_weight
        self.entries: dict[str, np.ndarray] = {}

    def register_task(self, task_key: str, phrases: list[str],
                      anchor: np.ndarray | None = None) -> None:
        """Register a task's canonical phrase (first) and its rephrasings."""
        own = stable_rng(self.seed, "text", task_key).normal(size=self.dim)
        if anchor is None:
            canonical = _unit(own)
        else:
            canonical = _unit(_unit(anchor) + self.task_weight * _unit(own))
        for j, phrase in enumerate(phrases):
            if j == 0:
                vec = canonical
            else:
                bump = stable_rng(self.seed, "rephrase", task_key, j).normal(size=self.dim)
                vec = _unit(canonical + self.noise * bump)
            self.entries.setdefault(phrase, vec)

    def get(self, query: str) -> np.ndarray:
        try:
            return self.entries[query]
        except KeyError:
            raise MissingEmbeddingError(f"no mock text embedding for {query!r}") from None

    def as_cache(self) -> EmbeddingCache:
        return EmbeddingCache(self.dim, dict(self.entries))


class MockVisionEncoder:
    """Deterministic stand-in for a frozen image backbone on synthetic scenes.

    An egocentric image is summarized by what it would have to contain: an
    appearance mixture of the stations visible in a +-fov field of view,
    weighted by cos(bearing) / (1 + distance), concatenated with a sinusoidal
    encoding of the viewer's (x, y, yaw).  A fixed seeded projection maps the
    features to the embedding space and the result is L2-normalized.
    """

    def __init__(self, dim: int = MOCK_DIM, seed: int = 0, appearance_dim: int = 16,
                 fov_deg: float = 60.0, appearance_gain: float = 1.0,
                 xy_freqs=(0.3, 0.7, 1.5, 3.0), yaw_harmonics: int = 4):
        self.dim = dim
        self.seed = seed
        self.appearance_dim = appearance_dim
        self.fov = np.radians(fov_deg)
        self.appearance_gain = appearance_gain
        self.xy_freqs = np.asarray(xy_freqs, dtype=np.float64)
        self.yaw_harmonics = yaw_harmonics
        n_pose = 4 * len(self.xy_freqs) + 2 * yaw_harmonics
        self._projection = stable_rng(seed, "vision-projection").normal(
            size=(dim, appearance_dim + n_pose)
        ) / np.sqrt(appearance_dim + n_pose)
        self._appearance: dict[int, np.ndarray] = {}

    def appearance_vector(self, appearance_seed: int) -> np.ndarray:
        if appearance_seed not in self._appearance:
            rng = stable_rng(self.seed, "appearance", appearance_seed)
            self._appearance[appearance_seed] = _unit(rng.normal(size=self.appearance_dim))
        return self._appearance[appearance_seed]

    def appearance_anchor(self, appearance_seed: int) -> np.ndarray:
        """Embedding-space direction of one station's appearance (text anchor)."""
        feats = np.zeros(self._projection.shape[1])
        feats[: self.appearance_dim] = self.appearance_gain * self.appearance_vector(appearance_seed)
        return _unit(self._projection @ feats)

    def _pose_features(self, x: float, y: float, yaw: float) -> np.ndarray:
        parts = []
        for f in self.xy_freqs:
            parts.extend([np.sin(f * x), np.cos(f * x), np.sin(f * y), np.cos(f * y)])
        for m in range(1, self.yaw_harmonics + 1):
            parts.extend([np.sin(m * yaw), np.cos(m * yaw)])
        return np.asarray(parts)

    def encode_view(self, stations: list[tuple[np.ndarray, int]],
                    x: float, y: float, yaw: float) -> np.ndarray:
        """Embed the view from (x, y, yaw) of stations [(xy position, appearance seed)]."""
        mix = np.zeros(self.appearance_dim)
        for pos, app_seed in stations:
            dx, dy = pos[0] - x, pos[1] - y
            dist = float(np.hypot(dx, dy))
            bearing = np.arctan2(np.sin(np.arctan2(dy, dx) - yaw), np.cos(np.arctan2(dy, dx) - yaw))
            if abs(bearing) <= self.fov:
                mix += (np.cos(bearing) / (1.0 + dist)) * self.appearance_vector(app_seed)
        feats = np.concatenate([self.appearance_gain * mix, self._pose_features(x, y, yaw)])
        return _unit(self._projection @ feats)
