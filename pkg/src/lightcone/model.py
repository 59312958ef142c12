"""Variational autoencoder with a Poincare-ball latent space.

The encoder is a one-hidden-layer MLP whose tangent head is pushed onto the
ball with the exponential map at the origin and whose scale head goes through
softplus. The posterior is a wrapped normal and the prior is the standard
wrapped normal at the origin. The decoder's first layer measures signed
hyperbolic distances from the latent to learned gyroplanes; a dense layer
then produces Bernoulli pixel logits.

All model math is written on :mod:`lightcone.autodiff` graphs so the same
code serves evaluation and training.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Graph, Tensor
from .cones import EmbeddedFrameEvent, EmbedMap, embed_frame, lorentz_embedding
from . import geometry as geo
from .geometry import PoincarePoint
from .rng import RandomState
from .wrapped_normal import LOG_2PI, WrappedNormal

SIGMA_FLOOR = 1e-5
LOG_COLUMNS = ("step", "elbo", "recon", "kl", "wall_ms")
PARAM_NAMES = (
    "enc.W1", "enc.b1", "enc.Wmu", "enc.bmu", "enc.Ws", "enc.bs",
    "dec.p", "dec.a", "dec.W2", "dec.b2",
)  # fmt: skip


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class PVaeConfig:
    image_side: int = 32
    latent_n: int = 8
    hidden: int = 600
    c: float = 1.0
    lr: float = 5e-4
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    kl_samples: int = 1
    eval_kl_samples: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.latent_n < 1:
            raise ValueError("latent_n must be at least 1")
        if self.image_side < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError("image_side, hidden and batch_size must be positive")
        if not self.c > 0:
            raise ValueError("curvature c must be positive")

    @property
    def pixels(self) -> int:
        return self.image_side**2

    @property
    def spacetime_dim(self) -> int:
        return 1 + self.latent_n


@dataclass(frozen=True)
class GyroplaneParams:
    """Per-unit offsets ``p`` (rows, on the ball) and normals ``a`` (rows)."""

    p: np.ndarray
    a: np.ndarray


@dataclass(eq=False)
class PVae:
    config: PVaeConfig
    params: dict[str, np.ndarray]
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)

    @property
    def c(self) -> float:
        return self.config.c

    def gyroplanes(self) -> GyroplaneParams:
        return GyroplaneParams(geo.expmap0(self.params["dec.p"], self.c), self.params["dec.a"].copy())


def _glorot(rng: RandomState, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -lim, lim)


def init_model(config: PVaeConfig) -> PVae:
    rng = RandomState(config.seed).spawn(2)
    d, h, n = config.pixels, config.hidden, config.latent_n
    params = {
        "enc.W1": _glorot(rng, d, h),
        "enc.b1": np.zeros(h),
        "enc.Wmu": _glorot(rng, h, n),
        "enc.bmu": np.zeros(n),
        "enc.Ws": _glorot(rng, h, n),
        "enc.bs": np.zeros(n),
        # gyroplane offsets as tangent vectors at the origin, so every p is a ball point
        "dec.p": 0.01 * rng.normal((h, n)),
        "dec.a": _glorot(rng, n, h).T.copy(),
        "dec.W2": _glorot(rng, h, d),
        "dec.b2": np.zeros(d),
    }
    return PVae(config, params)


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


def _leaves(g: Graph, params: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    return {k: g.input(params[k], k, requires_grad=trainable) for k in PARAM_NAMES}


def _encode(P: dict[str, Tensor], x: Tensor, c: float) -> tuple[Tensor, Tensor]:
    h = ad.tanh(x @ P["enc.W1"] + P["enc.b1"])
    mu = ad.expmap0(h @ P["enc.Wmu"] + P["enc.bmu"], c)
    sigma = ad.softplus(h @ P["enc.Ws"] + P["enc.bs"]) + SIGMA_FLOOR
    return mu, sigma


def _gyroplane(z: Tensor, p: Tensor, a: Tensor, c: float) -> Tensor:
    """Signed distances from rows of ``z`` (B, n) to gyroplanes ``(p, a)`` (H, n).

    Uses ``(-p) (+) z`` expanded so that every term is a (B, H) matrix built
    from inner products.
    """
    sc = math.sqrt(c)
    x = -p
    xz = z @ x.T  # (B, H)
    x2 = (x * x).sum(axis=-1).reshape(1, -1)  # (1, H)
    z2 = (z * z).sum(axis=-1, keepdims=True)  # (B, 1)
    xa = (x * a).sum(axis=-1).reshape(1, -1)
    za = z @ a.T
    a_norm = ad.norm(a).reshape(1, -1)
    A = 1.0 + 2.0 * c * xz + c * z2
    B = 1.0 - c * x2
    D = 1.0 + 2.0 * c * xz + (c * c) * x2 * z2
    diff_a = (A * xa + B * za) / D
    diff2 = (A * A * x2 + 2.0 * A * B * xz + B * B * z2) / (D * D)
    arg = 2.0 * sc * diff_a / ((1.0 - c * diff2) * a_norm)
    return a_norm * ad.asinh(arg) / sc


def _decode(P: dict[str, Tensor], z: Tensor, c: float) -> Tensor:
    p = ad.expmap0(P["dec.p"], c)
    h = ad.tanh(_gyroplane(z, p, P["dec.a"], c))
    return h @ P["dec.W2"] + P["dec.b2"]


def _log_prior(z: Tensor, c: float, n: int) -> Tensor:
    # standard wrapped normal at the origin: |log_0 z| = (2 / sqrt c) artanh(sqrt c |z|)
    sc = math.sqrt(c)
    d0 = (2.0 / sc) * ad.artanh(sc * ad.norm(z))
    return (-0.5 * d0 * d0 - 0.5 * n * LOG_2PI + (n - 1) * ad.log_r_over_sinh(sc * d0)).sum(axis=-1)


def _log_posterior(eps: Tensor, sigma: Tensor, v: Tensor, c: float, n: int) -> Tensor:
    # log_map(mu, z) = v by construction
    gauss = (-0.5 * eps * eps - ad.log(sigma) - 0.5 * LOG_2PI).sum(axis=-1)
    return gauss + (n - 1) * ad.log_r_over_sinh(math.sqrt(c) * ad.norm(v)).sum(axis=-1)


def bernoulli_loglik(x: Tensor, logits: Tensor) -> Tensor:
    return (x * logits - ad.softplus(logits)).sum(axis=-1)


@dataclass
class ElboGraph:
    graph: Graph
    loss: Tensor
    elbo: Tensor  # per image
    recon: Tensor  # per image
    kl: Tensor  # per image, averaged over the KL samples
    kl_terms: Tensor  # (K, B)
    leaves: dict[str, Tensor]


def build_elbo(model: PVae, images: np.ndarray, eps: np.ndarray, trainable: bool = True) -> ElboGraph:
    """ELBO graph for a batch with frozen noise ``eps`` of shape ``(K, B, n)``.

    The first noise slice drives the reconstruction term; all ``K`` slices
    enter the Monte Carlo KL estimate.
    """
    cfg = model.config
    c, n = cfg.c, cfg.latent_n
    g = Graph()
    P = _leaves(g, model.params, trainable)
    x = g.const(images)
    e = g.const(eps)
    mu, sigma = _encode(P, x, c)
    v = sigma * e  # (K, B, n)
    z = ad.mobius_add(mu, ad.expmap0(v, c), c)
    kl_terms = _log_posterior(e, sigma, v, c, n) - _log_prior(z, c, n)
    kl = kl_terms.mean(axis=0)
    recon = bernoulli_loglik(x, _decode(P, _first(z), c))
    elbo = recon - kl
    loss = -elbo.mean()
    return ElboGraph(g, loss, elbo, recon, kl, kl_terms, P)


def _first(z: Tensor) -> Tensor:
    k = z.shape[0]
    if k == 1:
        return z.reshape(*z.shape[1:])
    # select slice 0 with a constant one-hot contraction
    sel = np.zeros((1, k))
    sel[0, 0] = 1.0
    flat = z.reshape(k, -1)
    return (z.graph.const(sel) @ flat).reshape(*z.shape[1:])


# ---------------------------------------------------------------------------
# public model API
# ---------------------------------------------------------------------------


def _as_batch(images, pixels: int) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 1 or x.ndim == 3:
        x = x.reshape(-1 if x.ndim == 3 else 1, x.size if x.ndim == 1 else x.shape[1] * x.shape[2])
    if x.ndim != 2 or x.shape[1] != pixels:
        raise ValueError(f"expected images with {pixels} pixels, got shape {np.shape(images)}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("pixel intensities must lie in [0, 1]")
    return x


def encode_array(model: PVae, images) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and scales for a batch, as ``(B, n)`` arrays."""
    x = _as_batch(images, model.config.pixels)
    g = Graph()
    P = _leaves(g, model.params, False)
    mu, sigma = _encode(P, g.const(x), model.c)
    return mu.value, sigma.value


def encode(model: PVae, image) -> WrappedNormal:
    mu, sigma = encode_array(model, image)
    if mu.shape[0] != 1:
        raise ValueError("encode takes a single image; use encode_array for batches")
    return WrappedNormal(PoincarePoint(mu[0], model.c), sigma[0])


def gyroplane_layer(z: PoincarePoint, params: GyroplaneParams) -> np.ndarray:
    """Signed hyperbolic distance of ``z`` to each gyroplane."""
    g = Graph()
    out = _gyroplane(g.const(z.v[None, :]), g.const(params.p), g.const(params.a), z.c)
    return out.value[0]


def decode_array(model: PVae, z) -> np.ndarray:
    """Pixel logits for a ``(B, n)`` batch of ball points."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    g = Graph()
    P = _leaves(g, model.params, False)
    return _decode(P, g.const(z), model.c).value


def decode(model: PVae, z: PoincarePoint) -> np.ndarray:
    return decode_array(model, z.v)[0]


def sigmoid(logits):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(logits)))


def reconstruct(model: PVae, images) -> np.ndarray:
    """Decoded pixel means at the posterior means."""
    mu, _ = encode_array(model, images)
    return sigmoid(decode_array(model, mu))


@dataclass(frozen=True)
class ElboParts:
    total: float
    recon: float
    kl: float
    kl_stderr: float


def elbo(model: PVae, images, rng: RandomState, kl_samples: int = 1) -> ElboParts:
    """Batch-mean ELBO and its parts (nats per image)."""
    x = _as_batch(images, model.config.pixels)
    eps = rng.normal((kl_samples, x.shape[0], model.config.latent_n))
    eg = build_elbo(model, x, eps, trainable=False)
    terms = eg.kl_terms.value.reshape(-1)
    se = float(np.std(terms, ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else math.inf
    return ElboParts(float(eg.elbo.value.mean()), float(eg.recon.value.mean()), float(eg.kl.value.mean()), se)


def loss_and_grads(model: PVae, images: np.ndarray, eps: np.ndarray) -> tuple[float, dict[str, np.ndarray], ElboGraph]:
    eg = build_elbo(model, images, eps)
    grads = ad.backward(eg.graph, eg.loss).named()
    return float(eg.loss.value), grads, eg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogRow:
    step: int
    elbo: float
    recon: float
    kl: float
    wall_ms: float
    kl_stderr: float = 0.0


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, math.ceil(n_images / batch_size))


def train(
    model: PVae,
    frames: np.ndarray,
    config: PVaeConfig | None = None,
    max_steps: int | None = None,
    on_step: Callable[[PVae, LogRow], None] | None = None,
    checkpoint: Callable[[PVae], None] | None = None,
) -> tuple[PVae, list[LogRow]]:
    """Adam on the negative ELBO over shuffled minibatches.

    ``frames`` is an ``(N, pixels)`` array, uint8 (dequantised per batch) or
    float in [0, 1]. Shuffling and noise are functions of ``(seed, epoch)``
    and ``(seed, step)``, so a model resumed from a checkpoint continues the
    exact same stream. Raises :class:`DivergenceError` on a non-finite loss.
    """
    cfg = config or model.config
    root = RandomState(cfg.seed)
    n_img = frames.shape[0]
    spe = steps_per_epoch(n_img, cfg.batch_size)
    total = spe * cfg.epochs
    if max_steps is not None:
        total = min(total, model.step + max_steps)
    log: list[LogRow] = []
    order, order_epoch = None, -1
    while model.step < total:
        epoch, pos = divmod(model.step, spe)
        if epoch != order_epoch:
            order, order_epoch = root.spawn(0, epoch).permutation(n_img), epoch
        idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        batch = frames[idx]
        x = batch.astype(np.float64) / 255.0 if batch.dtype == np.uint8 else np.asarray(batch, dtype=np.float64)
        eps = root.spawn(1, model.step).normal((cfg.kl_samples, x.shape[0], cfg.latent_n))
        t0 = time.perf_counter()
        try:
            loss, grads, eg = loss_and_grads(model, x, eps)
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at step {model.step}: {exc}") from exc
        if not math.isfinite(loss) or not all(np.all(np.isfinite(gv)) for gv in grads.values()):
            raise DivergenceError(f"non-finite loss or gradient at step {model.step}")
        model.params, model.adam = ad.adam_step(model.params, grads, model.adam, lr=cfg.lr)
        model.step += 1
        wall = (time.perf_counter() - t0) * 1e3
        kl_t = eg.kl.value
        se = float(np.std(kl_t, ddof=1) / math.sqrt(kl_t.size)) if kl_t.size > 1 else 0.0
        row = LogRow(model.step, float(eg.elbo.value.mean()), float(eg.recon.value.mean()), float(kl_t.mean()), wall, se)
        log.append(row)
        if on_step is not None:
            on_step(model, row)
        if checkpoint is not None and cfg.checkpoint_every and model.step % cfg.checkpoint_every == 0:
            checkpoint(model)
    return model, log


def smoothed_losses(log: list[LogRow], steps_per_epoch: int) -> tuple[float, float]:
    """Mean loss over the first 10 steps and over the last full epoch."""
    losses = np.array([-r.elbo for r in log])
    return float(losses[:10].mean()), float(losses[-steps_per_epoch:].mean())


def write_log(path, rows: list[LogRow], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        if not append:
            fh.write(",".join(LOG_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r.step},{r.elbo!r},{r.recon!r},{r.kl!r},{r.wall_ms:.3f}\n")


# ---------------------------------------------------------------------------
# embedding frames as events
# ---------------------------------------------------------------------------


def embed_sequence(model: PVae, frames, embed_map: EmbedMap | None = None, dt: float = 1.0) -> list[EmbeddedFrameEvent]:
    """Posterior means of each frame as events at times ``0, dt, 2 dt, ...``."""
    embed_map = embed_map or lorentz_embedding(c=model.c)
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        frames = frames.astype(np.float64) / 255.0
    mu, _ = encode_array(model, frames.reshape(frames.shape[0], -1))
    return [embed_frame(i, PoincarePoint(m, model.c), embed_map, dt) for i, m in enumerate(mu)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LCCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: PVae, path) -> None:
    """Binary container: header, config JSON, then named float64 tensors."""
    tensors = dict(model.params)
    for k, v in model.adam.m.items():
        tensors[f"adam.m/{k}"] = v
    for k, v in model.adam.v.items():
        tensors[f"adam.v/{k}"] = v
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    out = [struct.pack("<4sHqqI", CKPT_MAGIC, CKPT_VERSION, model.config.seed, model.step, len(cfg)), cfg]
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_checkpoint(path) -> PVae:
    raw = Path(path).read_bytes()
    head = struct.Struct("<4sHqqI")
    if len(raw) < head.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, _seed, step, cfg_len = head.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = head.size
    try:
        cfg_dict = json.loads(raw[off : off + cfg_len])
        off += cfg_len
        known = {f.name for f in fields(PVaeConfig)}
        config = PVaeConfig(**{k: v for k, v in cfg_dict.items() if k in known})
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor '{name}'")
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    missing = [k for k in PARAM_NAMES if k not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    params = {k: tensors[k] for k in PARAM_NAMES}
    m = {k[len("adam.m/") :]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/") :]: t for k, t in tensors.items() if k.startswith("adam.v/")}
    return PVae(config, params, step, AdamState(step, m, v))
