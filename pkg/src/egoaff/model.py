"""The affordance head, its training objective, and the training loops.

The head maps a concatenated (image, text) embedding pair to a ground-plane
task region in the viewer's egocentric frame.  Everything is plain float64
numpy with hand-written backward passes so gradients can be audited against
finite differences; the optimizer is Adam with the usual (0.9, 0.999) moments.

Loss per pair is the region distance d(target, prediction) (see
geometry.frechet_distance); the batch loss is the arithmetic mean, which has
the same minimizer as the summed form and keeps magnitudes in meters.
Targets arrive pre-rectified into each image's gravity-aligned frame, so the
loss itself applies no transform.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .dataset import TaskSpan, VideoArtifacts
from .encoders import EmbeddingCache, VisionAdapter
from .errors import (CacheFormatError, ConfigError, EmptyBatchError, ShapeError,
                     TrainingDivergenceError)
from .geometry import GroundGaussian
from .seeding import stable_rng

LN_EPS = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = "affordance-checkpoint 1"

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def default_widths(dim: int) -> list[int]:
    """Three hidden layers, width tied to the embedding dimension (>= 128)."""
    w = max(128, dim)
    return [w, w, w]


class AffordanceHead:
    """Four fully connected layers, layer norm after each hidden layer.

    Input is the 2d concatenation of the (adapted) image embedding and the
    text embedding; output is (mu_x, mu_y, mu_z, raw_s) with
    sigma = softplus(raw_s) guaranteeing a strictly positive spread.
    """

    PARAM_ORDER = ("w1", "b1", "ln1_g", "ln1_b", "w2", "b2", "ln2_g", "ln2_b",
                   "w3", "b3", "ln3_g", "ln3_b", "w4", "b4")

    def __init__(self, dim: int, widths: list[int] | None = None, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self.widths = list(widths) if widths is not None else default_widths(dim)
        if len(self.widths) != 3:
            raise ConfigError(f"expected 3 hidden widths, got {self.widths}")
        sizes = [2 * dim, *self.widths, 4]
        if params is not None:
            self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        else:
            rng = stable_rng(seed, "head-init")
            self.params = {}
            for i in range(4):
                fan_in, fan_out = sizes[i], sizes[i + 1]
                self.params[f"w{i + 1}"] = rng.normal(size=(fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
                self.params[f"b{i + 1}"] = np.zeros(fan_out)
                if i < 3:
                    self.params[f"ln{i + 1}_g"] = np.ones(fan_out)
                    self.params[f"ln{i + 1}_b"] = np.zeros(fan_out)

    def copy(self) -> "AffordanceHead":
        return AffordanceHead(self.dim, self.widths,
                              params={k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Map inputs (n, 2d) to raw outputs (n, 4); optionally keep the tape."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 2 * self.dim:
            raise ShapeError(f"head expects (n, {2 * self.dim}) inputs, got {x.shape}")
        p = self.params
        cache = {"x": x} if want_cache else None
        a = x
        for i in (1, 2, 3):
            z = a @ p[f"w{i}"].T + p[f"b{i}"]
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + LN_EPS)
            xhat = (z - mu) * inv
            n = p[f"ln{i}_g"] * xhat + p[f"ln{i}_b"]
            a_next = gelu(n)
            if want_cache:
                cache[f"a{i - 1}"] = a
                cache[f"xhat{i}"] = xhat
                cache[f"inv{i}"] = inv
                cache[f"n{i}"] = n
            a = a_next
        out = a @ p["w4"].T + p["b4"]
        if want_cache:
            cache["a3"] = a
            return out, cache
        return out

    def backward(self, cache: dict, d_out: np.ndarray):
        """Gradients of every parameter plus the input, given d(loss)/d(out)."""
        p = self.params
        grads = {}
        grads["w4"] = d_out.T @ cache["a3"]
        grads["b4"] = d_out.sum(axis=0)
        da = d_out @ p["w4"]
        for i in (3, 2, 1):
            dn = da * gelu_grad(cache[f"n{i}"])
            xhat, inv = cache[f"xhat{i}"], cache[f"inv{i}"]
            grads[f"ln{i}_g"] = (dn * xhat).sum(axis=0)
            grads[f"ln{i}_b"] = dn.sum(axis=0)
            dxhat = dn * p[f"ln{i}_g"]
            dz = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
            a_prev = cache[f"a{i - 1}"]
            grads[f"w{i}"] = dz.T @ a_prev
            grads[f"b{i}"] = dz.sum(axis=0)
            da = dz @ p[f"w{i}"]
        return grads, da


def region_from_output(raw: np.ndarray) -> GroundGaussian:
    """Decode one raw head output row into a region."""
    raw = np.asarray(raw, dtype=np.float64).reshape(4)
    return GroundGaussian(raw[:3], float(softplus(raw[3])))


def forward(e_v: np.ndarray, e_l: np.ndarray, head: AffordanceHead) -> GroundGaussian:
    """Single-pair prediction from already-adapted embeddings."""
    e_v = np.asarray(e_v, dtype=np.float64).reshape(-1)
    e_l = np.asarray(e_l, dtype=np.float64).reshape(-1)
    if e_v.shape[0] != head.dim or e_l.shape[0] != head.dim:
        raise ShapeError(f"embeddings must have dimension {head.dim}, "
                         f"got {e_v.shape[0]} and {e_l.shape[0]}")
    out = head.forward(np.concatenate([e_v, e_l])[None, :])
    return region_from_output(out[0])


def _targets_array(regions) -> np.ndarray:
    t = np.empty((len(regions), 4))
    for i, r in enumerate(regions):
        t[i, :3] = r.mean
        t[i, 3] = r.sigma
    return t


def batch_loss(out: np.ndarray, targets: np.ndarray):
    """Mean region distance over a batch of raw outputs; returns loss and d_out."""
    n = out.shape[0]
    if n == 0:
        raise EmptyBatchError("loss over an empty batch")
    mu, raw_s = out[:, :3], out[:, 3]
    sig = softplus(raw_s)
    dmu = mu - targets[:, :3]
    dsig = sig - targets[:, 3]
    dist = np.sqrt(np.sum(dmu * dmu, axis=1) + 2.0 * dsig * dsig)
    loss = float(dist.mean())
    denom = np.maximum(dist, 1e-12)[:, None]
    d_out = np.empty_like(out)
    d_out[:, :3] = dmu / (denom * n)
    d_out[:, 3] = (2.0 * dsig / (denom[:, 0] * n)) * sigmoid(raw_s)
    d_out[dist == 0.0, :] = 0.0  # exact match: subgradient at the minimum
    return loss, d_out


def loss(e_v: np.ndarray, e_l: np.ndarray, targets, head: AffordanceHead,
         adapter: VisionAdapter | None = None) -> float:
    """Batch loss in meters for raw vision embeddings (n,d), text (n,d), targets."""
    e_v = np.asarray(e_v, dtype=np.float64)
    e_l = np.asarray(e_l, dtype=np.float64)
    if e_v.shape[0] == 0:
        raise EmptyBatchError("loss over an empty batch")
    if adapter is not None:
        e_v = adapter.apply(e_v)
    out = head.forward(np.concatenate([e_v, e_l], axis=1))
    t = targets if isinstance(targets, np.ndarray) else _targets_array(targets)
    value, _ = batch_loss(out, t)
    return value


def loss_and_grads(e_v: np.ndarray, e_l: np.ndarray, targets: np.ndarray,
                   head: AffordanceHead, adapter: VisionAdapter,
                   train_adapter: bool):
    """Loss plus analytic gradients for the head and (optionally) the adapter."""
    ev_adapted = adapter.apply(e_v)
    x = np.concatenate([ev_adapted, e_l], axis=1)
    out, cache = head.forward(x, want_cache=True)
    value, d_out = batch_loss(out, targets)
    head_grads, dx = head.backward(cache, d_out)
    adapter_grads = None
    if train_adapter:
        dev = dx[:, : head.dim]
        adapter_grads = {"weight": dev.T @ e_v, "bias": dev.sum(axis=0)}
    return value, head_grads, adapter_grads


class Adam:
    """Adaptive-moment gradient descent over a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], step_size: float,
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = params
        self.step_size = step_size
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.params[k] -= self.step_size * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 256
    step_size: float = 1e-4
    seed: int = 0
    train_adapter: bool = True
    sample_rephrasings: bool = True
    pair_fraction: float = 1.0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.step_size <= 0:
            raise ConfigError("epochs, batch_size and step_size must be positive")
        if not 0.0 < self.pair_fraction <= 1.0:
            raise ConfigError(f"pair_fraction must lie in (0,1], got {self.pair_fraction}")


@dataclass(eq=False)
class TrainingSet:
    """Flattened pair table: embeddings by index, targets as a (n,4) array."""

    vision: np.ndarray  # (n_keys, d) raw image embeddings
    text: np.ndarray  # (n_phrases, d) frozen text embeddings
    pair_vision: np.ndarray  # (n,) index into vision
    pair_canonical: np.ndarray  # (n,) index into text (canonical phrase)
    option_flat: np.ndarray  # concatenated candidate text indices per pair
    option_start: np.ndarray  # (n,) offsets into option_flat
    option_len: np.ndarray  # (n,) candidate counts
    targets: np.ndarray  # (n, 4) mu_x, mu_y, mu_z, sigma

    @property
    def dim(self) -> int:
        return self.vision.shape[1]

    def __len__(self) -> int:
        return self.pair_vision.shape[0]


def assemble_training_set(items: list[VideoArtifacts], vision_cache: EmbeddingCache,
                          text_cache, pairs_override=None) -> TrainingSet:
    """Gather training pairs from prepared videos into contiguous index arrays."""
    dim = vision_cache.dimension
    vision_rows: list[np.ndarray] = []
    vision_idx: dict[str, int] = {}
    text_rows: list[np.ndarray] = []
    text_idx: dict[str, int] = {}

    def vkey(key: str) -> int:
        if key not in vision_idx:
            vision_idx[key] = len(vision_rows)
            vision_rows.append(vision_cache.get(key))
        return vision_idx[key]

    def tkey(phrase: str) -> int:
        if phrase not in text_idx:
            text_idx[phrase] = len(text_rows)
            text_rows.append(text_cache.get(phrase))
        return text_idx[phrase]

    pair_vision, pair_canonical, option_flat, option_start, option_len = [], [], [], [], []
    targets = []
    for art in items:
        tasks: dict[str, TaskSpan] = {t.task_id: t for t in art.video.tasks}
        source_pairs = pairs_override(art) if pairs_override is not None else art.train_pairs
        for pair in source_pairs:
            frame = art.video.frames[pair.image_frame_index]
            task = tasks[pair.task_id]
            options = [tkey(p) for p in task.phrases()]
            pair_vision.append(vkey(frame.image_key))
            pair_canonical.append(options[0])
            option_start.append(len(option_flat))
            option_flat.extend(options)
            option_len.append(len(options))
            targets.append([*pair.target_region_ego.mean, pair.target_region_ego.sigma])

    if not pair_vision:
        raise EmptyBatchError("no training pairs assembled")
    return TrainingSet(
        vision=np.array(vision_rows, dtype=np.float64).reshape(len(vision_rows), dim),
        text=np.array(text_rows, dtype=np.float64).reshape(len(text_rows), dim),
        pair_vision=np.array(pair_vision, dtype=np.int64),
        pair_canonical=np.array(pair_canonical, dtype=np.int64),
        option_flat=np.array(option_flat, dtype=np.int64),
        option_start=np.array(option_start, dtype=np.int64),
        option_len=np.array(option_len, dtype=np.int64),
        targets=np.array(targets, dtype=np.float64),
    )


@dataclass(eq=False)
class Checkpoint:
    head: AffordanceHead
    adapter: VisionAdapter
    dim: int
    config: TrainConfig
    seed: int
    loss_history: list[float] = field(default_factory=list)

    def predict_region(self, e_v_raw: np.ndarray, e_l: np.ndarray) -> GroundGaussian:
        return forward(self.adapter.apply(e_v_raw), e_l, self.head)


def _run_epochs(head: AffordanceHead, adapter: VisionAdapter, data: TrainingSet,
                config: TrainConfig, history: list[float]) -> None:
    params = dict(head.params)
    if config.train_adapter:
        params["adapter_w"] = adapter.weight
        params["adapter_b"] = adapter.bias
    opt = Adam(params, config.step_size)
    n = len(data)
    for epoch in range(config.epochs):
        order = stable_rng(config.seed, "epoch-order", epoch).permutation(n)
        if config.pair_fraction < 1.0:
            order = order[: max(1, int(np.ceil(config.pair_fraction * n)))]
        if config.sample_rephrasings:
            pick = stable_rng(config.seed, "epoch-phrase", epoch).random(order.shape[0])
            offsets = np.floor(pick * data.option_len[order]).astype(np.int64)
            text_idx = data.option_flat[data.option_start[order] + offsets]
        else:
            text_idx = data.pair_canonical[order]
        total, seen = 0.0, 0
        for lo in range(0, order.shape[0], config.batch_size):
            sel = order[lo : lo + config.batch_size]
            e_v = data.vision[data.pair_vision[sel]]
            e_l = data.text[text_idx[lo : lo + sel.shape[0]]]
            value, head_grads, adapter_grads = loss_and_grads(
                e_v, e_l, data.targets[sel], head, adapter, config.train_adapter)
            if not np.isfinite(value):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, step {lo // config.batch_size}")
            grads = dict(head_grads)
            if adapter_grads is not None:
                grads["adapter_w"] = adapter_grads["weight"]
                grads["adapter_b"] = adapter_grads["bias"]
            opt.step(grads)
            total += value * sel.shape[0]
            seen += sel.shape[0]
        history.append(total / seen)


def train(data: TrainingSet, config: TrainConfig) -> Checkpoint:
    """Train a fresh head (and adapter, when enabled) from scratch."""
    if len(data) == 0:
        raise EmptyBatchError("cannot train on an empty pair set")
    dim = data.dim
    head = AffordanceHead(dim, seed=config.seed)
    adapter = VisionAdapter.identity(dim, trainable=config.train_adapter)
    history: list[float] = []
    _run_epochs(head, adapter, data, config, history)
    return Checkpoint(head, adapter, dim, config, config.seed, history)


def finetune(checkpoint: Checkpoint, data: TrainingSet, mode: str = "head_only",
             config: TrainConfig | None = None) -> Checkpoint:
    """Continue training a checkpoint on a single scene's pair set.

    mode "head_only" freezes the adapter; "all" trains both parameter sets.
    """
    if mode not in ("head_only", "all"):
        raise ConfigError(f"fine-tune mode must be head_only or all, got {mode!r}")
    if len(data) == 0:
        raise EmptyBatchError("cannot fine-tune on an empty pair set")
    if data.dim != checkpoint.dim:
        raise ShapeError(f"pair set dimension {data.dim} != checkpoint dimension {checkpoint.dim}")
    config = config if config is not None else replace(checkpoint.config, epochs=25)
    config = replace(config, train_adapter=(mode == "all"))
    head = checkpoint.head.copy()
    adapter = checkpoint.adapter.copy()
    adapter.trainable = mode == "all"
    history: list[float] = []
    _run_epochs(head, adapter, data, config, history)
    return Checkpoint(head, adapter, checkpoint.dim, config, config.seed, history)


def predict(image_key: str, query: str, checkpoint: Checkpoint,
            vision_cache, text_source) -> GroundGaussian:
    """Egocentric region prediction for one image key and one phrase."""
    e_v = vision_cache.get(image_key)
    e_l = text_source.get(query)
    return checkpoint.predict_region(e_v, e_l)


def _config_echo(config: TrainConfig) -> str:
    return (f"epochs={config.epochs} batch_size={config.batch_size} "
            f"step_size={config.step_size!r} seed={config.seed} "
            f"train_adapter={int(config.train_adapter)} "
            f"sample_rephrasings={int(config.sample_rephrasings)} "
            f"pair_fraction={config.pair_fraction!r}")


def _parse_config_echo(line: str) -> TrainConfig:
    fields = dict(part.split("=", 1) for part in line.split())
    return TrainConfig(
        epochs=int(fields["epochs"]),
        batch_size=int(fields["batch_size"]),
        step_size=float(fields["step_size"]),
        seed=int(fields["seed"]),
        train_adapter=bool(int(fields["train_adapter"])),
        sample_rephrasings=bool(int(fields["sample_rephrasings"])),
        pair_fraction=float(fields["pair_fraction"]),
    )


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Text header plus raw little-endian f32 blocks in declared order."""
    header = io.StringIO()
    header.write(CHECKPOINT_MAGIC + "\n")
    header.write(f"dim {checkpoint.dim}\n")
    header.write("widths " + " ".join(str(w) for w in checkpoint.head.widths) + "\n")
    header.write(f"seed {checkpoint.seed}\n")
    header.write("config " + _config_echo(checkpoint.config) + "\n")
    blocks: list[tuple[str, np.ndarray]] = []
    for name in AffordanceHead.PARAM_ORDER:
        blocks.append((name, checkpoint.head.params[name]))
    blocks.append(("adapter_w", checkpoint.adapter.weight))
    blocks.append(("adapter_b", checkpoint.adapter.bias))
    blocks.append(("history", np.asarray(checkpoint.loss_history, dtype=np.float64)))
    for name, arr in blocks:
        header.write(f"block {name} " + " ".join(str(s) for s in arr.shape) + "\n")
    header.write("data\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for _, arr in blocks:
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\ndata\n")
    if nl < 0 or not raw.startswith(CHECKPOINT_MAGIC.encode()):
        raise CacheFormatError(f"{path}: not a checkpoint file")
    lines = raw[:nl].decode("utf-8").splitlines()
    body = raw[nl + len(b"\ndata\n") :]
    dim = widths = seed = config = None
    blocks: list[tuple[str, tuple[int, ...]]] = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "dim":
            dim = int(rest)
        elif key == "widths":
            widths = [int(w) for w in rest.split()]
        elif key == "seed":
            seed = int(rest)
        elif key == "config":
            config = _parse_config_echo(rest)
        elif key == "block":
            parts = rest.split()
            blocks.append((parts[0], tuple(int(s) for s in parts[1:])))
    if dim is None or widths is None or seed is None or config is None:
        raise CacheFormatError(f"{path}: incomplete checkpoint header")
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in blocks:
        count = int(np.prod(shape)) if shape else 0
        end = off + 4 * count
        if end > len(body):
            raise CacheFormatError(f"{path}: truncated block {name!r}")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)
        off = end
    if off != len(body):
        raise CacheFormatError(f"{path}: {len(body) - off} trailing bytes")
    head = AffordanceHead(dim, widths, params={k: arrays[k] for k in AffordanceHead.PARAM_ORDER})
    adapter = VisionAdapter(arrays["adapter_w"], arrays["adapter_b"], config.train_adapter)
    return Checkpoint(head, adapter, dim, config, seed, [float(v) for v in arrays["history"]])
