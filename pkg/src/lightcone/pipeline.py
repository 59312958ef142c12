"""Subcommand implementations: data generation, training and the cone experiments.

Each ``cmd_*`` function takes a :class:`~lightcone.config.RunConfig`, writes
its outputs (CSV, PGM, PNG and ``manifest.json``) into ``config.out`` and
returns an in-memory report. Random streams are derived from the run seed
with fixed keys per purpose, so CSV and PGM outputs depend only on the
configuration.
"""

from __future__ import annotations

import dataclasses
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import matplotlib
import numpy as np

from . import __version__, data, imaging, plotting
from . import model as M
from .cones import (
    EmbeddedFrameEvent,
    EmbedMap,
    LightCone,
    Orientation,
    ZeroAccepted,
    ball_embedding,
    earliest_feasible_time,
    embed_frame,
    estimate_aperture,
    lorentz_embedding,
    probe_futures,
    probe_pasts,
    sample_in_section,
)
from .config import ConfigError, RunConfig, require_file
from .geometry import Event, PoincarePoint
from .rng import ALGORITHM, RandomState
from .wrapped_normal import WrappedNormal

# stream keys under the run seed
_EXP1, _PREDICT, _PROBE, _APERTURE, _EVAL = 10, 20, 30, 40, 50


class EmptyIntersection(RuntimeError):
    """No candidate landed in the intersection of the active cones."""

    def __init__(self, message: str, t: float, earliest: float | None):
        super().__init__(message)
        self.t = t
        self.earliest = earliest


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_manifest(out: Path, command: str, cfg: RunConfig, wall_s: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "versions": {
            "lightcone": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "rng": ALGORITHM,
        "wall_time_s": round(wall_s, 3),
        "outputs": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def embed_map_for(cfg: RunConfig, c: float) -> EmbedMap:
    return lorentz_embedding(cfg.rho, c) if cfg.embedding == "lorentz" else ball_embedding(cfg.rho)


def load_inputs(cfg: RunConfig) -> tuple[M.PVae, list[data.Sequence]]:
    ckpt = require_file(cfg.checkpoint, "checkpoint")
    ds_path = require_file(cfg.dataset, "dataset")
    try:
        model = M.load_checkpoint(ckpt)
        dataset = data.load(ds_path)
    except (M.CheckpointError, data.DatasetFormatError) as exc:
        raise ConfigError(str(exc)) from exc
    if not dataset:
        raise ConfigError("dataset is empty")
    if dataset[0].pixels.shape[1] != model.config.image_side:
        raise ConfigError("dataset frame size does not match the checkpoint")
    return model, dataset


def _sequence(dataset, index: int) -> data.Sequence:
    if index >= len(dataset):
        raise ConfigError(f"sequence {index} out of range for {len(dataset)} sequences")
    return dataset[index]


def decode_frames(model: M.PVae, latents) -> np.ndarray:
    side = model.config.image_side
    return M.sigmoid(M.decode_array(model, latents)).reshape(-1, side, side)


def _proposal(cfg: RunConfig, model: M.PVae, center: PoincarePoint | None) -> WrappedNormal:
    if cfg.proposal == "prior" or center is None:
        return WrappedNormal.standard(model.config.latent_n, model.c, 1.0)
    return WrappedNormal(center, cfg.proposal_sigma)


def resolve_slope(cfg: RunConfig, model: M.PVae, dataset, embed: EmbedMap) -> float:
    fixed = cfg.fixed_slope()
    return fixed if fixed is not None else aperture_from_data(cfg, model, dataset, embed)[0]


# ---------------------------------------------------------------------------
# choose
# ---------------------------------------------------------------------------


def choose_index(frames, reference, score: Callable = imaging.ssim) -> int:
    """Index of the best-scoring frame; the lowest index wins ties."""
    if len(frames) == 0:
        raise ValueError("choose needs at least one sample")
    best, best_i = -math.inf, 0
    for i, f in enumerate(frames):
        s = score(f, reference)
        if s > best:
            best, best_i = s, i
    return best_i


def choose(samples: Sequence[tuple[Event, np.ndarray]], reference, score: Callable = imaging.ssim):
    """The ``(event, frame)`` pair whose frame best matches ``reference``."""
    return samples[choose_index([f for _, f in samples], reference, score)]


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> Path:
    t0 = time.perf_counter()
    out = _outdir(cfg)
    dcfg = data.DataConfig(
        n_sequences=cfg.n_sequences,
        frames_per_seq=cfg.frames_per_seq,
        image_side=cfg.image_side,
        sprite_px_range=(cfg.sprite_px_min, cfg.sprite_px_max),
        v_max=cfg.v_max,
        seed=cfg.seed,
    )
    try:
        dataset = data.generate(dcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = Path(cfg.dataset) if cfg.dataset else out / "dataset.lcds"
    data.save(dataset, path)
    show = dataset[: min(6, len(dataset))]
    cols = list(range(0, cfg.frames_per_seq, max(1, cfg.frames_per_seq // 8)))
    preview = imaging.grid([s.frame(j) for s in show for j in cols], ncols=len(cols))
    imaging.write_pgm(out / "preview.pgm", preview)
    plotting.image(out / "preview.png", preview, "rows: sequences, columns: frames")
    write_manifest(out, "gen-data", cfg, time.perf_counter() - t0, {"dataset": str(path)})
    return path


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    model: M.PVae
    log: list[M.LogRow]
    initial_loss: float
    final_loss: float
    checkpoint: Path
    wall_s: float


def _read_losses(path: Path) -> tuple[list[int], list[float]]:
    steps, losses = [], []
    for line in path.read_text().splitlines()[1:]:
        parts = line.split(",")
        steps.append(int(parts[0]))
        losses.append(-float(parts[1]))
    return steps, losses


def cmd_train(cfg: RunConfig) -> TrainReport:
    t0 = time.perf_counter()
    ds_path = require_file(cfg.dataset, "dataset")
    out = _outdir(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    try:
        dataset = data.load(ds_path)
    except data.DatasetFormatError as exc:
        raise ConfigError(str(exc)) from exc
    frames = data.all_frames(dataset)
    side = dataset[0].pixels.shape[1]
    log_path = out / "train_log.csv"
    if cfg.resume:
        if not ckpt.is_file():
            raise ConfigError(f"cannot resume: checkpoint not found: {ckpt}")
        model = M.load_checkpoint(ckpt)
        model.config = dataclasses.replace(model.config, epochs=cfg.epochs, checkpoint_every=cfg.checkpoint_every)
        append = log_path.is_file()
    else:
        mcfg = M.PVaeConfig(
            image_side=side,
            latent_n=cfg.latent_n,
            hidden=cfg.hidden,
            c=cfg.curvature,
            lr=cfg.lr,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
            kl_samples=cfg.kl_samples,
            eval_kl_samples=cfg.eval_kl_samples,
            checkpoint_every=cfg.checkpoint_every,
        )
        model = M.init_model(mcfg)
        append = False
    if model.config.image_side != side:
        raise ConfigError("dataset frame size does not match the model")

    with open(log_path, "a" if append else "w", newline="") as fh:
        if not append:
            fh.write(",".join(M.LOG_COLUMNS) + "\n")

        def on_step(m, row):
            fh.write(f"{row.step},{row.elbo!r},{row.recon!r},{row.kl!r},{row.wall_ms:.3f}\n")

        model, log = M.train(
            model,
            frames,
            model.config,
            max_steps=cfg.max_steps or None,
            on_step=on_step,
            checkpoint=lambda m: M.save_checkpoint(m, ckpt),
        )
    M.save_checkpoint(model, ckpt)

    # fixed evaluation batch with the larger KL sample count
    root = RandomState(model.config.seed)
    idx = np.sort(root.spawn(_EVAL).permutation(frames.shape[0])[: min(256, frames.shape[0])])
    te = time.perf_counter()
    ev = M.elbo(model, frames[idx].astype(np.float64) / 255.0, root.spawn(_EVAL, 1), model.config.eval_kl_samples)
    write_csv(
        out / "eval.csv",
        ["step", "elbo", "recon", "kl", "wall_ms"],
        [(model.step, ev.total, ev.recon, ev.kl, f"{(time.perf_counter() - te) * 1e3:.3f}")],
    )

    steps, losses = _read_losses(log_path)
    spe = M.steps_per_epoch(frames.shape[0], model.config.batch_size)
    plotting.loss_curve(out / "loss.png", steps, losses, spe)
    initial = float(np.mean(losses[:10])) if losses else math.nan
    final = float(np.mean(losses[-spe:])) if losses else math.nan
    wall = time.perf_counter() - t0
    write_manifest(
        out,
        "train",
        cfg,
        wall,
        {"checkpoint": str(ckpt), "step": model.step, "initial_loss": initial, "final_loss": final},
    )
    return TrainReport(model, log, initial, final, ckpt, wall)


# ---------------------------------------------------------------------------
# single-cone synthesis
# ---------------------------------------------------------------------------


@dataclass
class Experiment1Report:
    times: list[float]
    rates: list[float]
    attempted: list[int]
    accepted: list[int]
    apex: EmbeddedFrameEvent
    slope: float
    latents: dict[float, np.ndarray] = field(default_factory=dict)


def cmd_experiment1(cfg: RunConfig) -> Experiment1Report:
    """Acceptance of prior draws inside one future cone at several times.

    Every time slice reuses the same proposal stream, so the accepted sets
    are nested and the acceptance rate cannot decrease with time.
    """
    t0 = time.perf_counter()
    model, dataset = load_inputs(cfg)
    out = _outdir(cfg)
    embed = embed_map_for(cfg, model.c)
    slope = resolve_slope(cfg, model, dataset, embed)
    seq = _sequence(dataset, cfg.sequence)
    apex = M.embed_sequence(model, seq.pixels[:1], embed, cfg.dt)[0]
    cone = LightCone(apex.event, slope)
    prior = _proposal(dataclasses.replace(cfg, proposal="prior"), model, None)
    side = model.config.image_side

    imaging.write_pgm(out / "reference.pgm", seq.frame(0))
    base = prior.sample_array(RandomState(cfg.seed).spawn(_EXP1), cfg.grid_size)
    imaging.write_pgm(out / "grid_unconstrained.pgm", imaging.grid(decode_frames(model, base)))

    report = Experiment1Report([], [], [], [], apex, slope)
    rows = [("none", cfg.samples, cfg.samples, 1.0)]
    for t in cfg.time_list():
        rng = RandomState(cfg.seed).spawn(_EXP1)
        try:
            s = sample_in_section([cone], apex.event.t + t, prior, embed, rng, max_trials=cfg.samples)
            att, acc, lat = s.attempted, s.accepted, s.latents
        except ZeroAccepted as exc:
            att, acc, lat = exc.trials, 0, np.zeros((0, model.config.latent_n))
        rate = acc / att
        report.times.append(t)
        report.rates.append(rate)
        report.attempted.append(att)
        report.accepted.append(acc)
        report.latents[t] = lat
        rows.append((t, att, acc, rate))
        if acc:
            frames = decode_frames(model, lat[: cfg.grid_size])
            imaging.write_pgm(out / f"grid_t{t:g}.pgm", imaging.grid(frames))
        else:
            imaging.write_pgm(out / f"grid_t{t:g}.pgm", np.zeros((side, side)))
    write_csv(out / "acceptance.csv", ["t", "attempted", "accepted", "rate"], rows)
    plotting.acceptance_bars(out / "acceptance.png", ["none"] + [f"{t:g}" for t in report.times], [1.0] + report.rates)
    write_manifest(out, "experiment1", cfg, time.perf_counter() - t0, {"slope": slope})
    return report


# ---------------------------------------------------------------------------
# intersecting-cone prediction
# ---------------------------------------------------------------------------


@dataclass
class ConeStep:
    branch: int
    index: int
    t: float
    cones: tuple[LightCone, ...]
    attempted: int
    accepted: int
    events: list[Event]
    chosen: int
    ssim: float
    wall_ms: float

    @property
    def rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 1.0


@dataclass
class PredictionReport:
    steps: list[ConeStep]
    predictions: list[np.ndarray]
    observed: list[EmbeddedFrameEvent]
    slope: float
    images: list[str] = field(default_factory=list)

    @property
    def acceptance_rates(self) -> list[float]:
        return [s.rate for s in self.steps]

    @property
    def ssim_scores(self) -> list[float]:
        return [s.ssim for s in self.steps]

    @property
    def wall_ms_per_cone(self) -> list[float]:
        return [s.wall_ms for s in self.steps]


def rollout_times(t_last: float, horizon: float, k: int, dt: float) -> list[float]:
    """Apex times strictly between the last observation and ``horizon``, then ``horizon``."""
    horizon = float(horizon)
    times = []
    i = 1
    while t_last + i * k * dt < horizon - 1e-9 * max(1.0, horizon):
        times.append(t_last + i * k * dt)
        i += 1
    return times + [horizon]


def _write_prediction_outputs(out: Path, cfg, report: PredictionReport, prefix_frames, rollouts):
    write_csv(
        out / "predict.csv",
        ["branch", "step", "t", "n_cones", "attempted", "accepted", "rate", "ssim"],
        [(s.branch, s.index, s.t, len(s.cones), s.attempted, s.accepted, s.rate, s.ssim) for s in report.steps],
    )
    for b, frames in enumerate(rollouts):
        if not frames:
            continue
        name = f"rollout_b{b}.pgm"
        imaging.write_pgm(out / name, imaging.grid(list(prefix_frames) + frames, ncols=len(prefix_frames) + len(frames)))
        report.images.append(name)
    for b, pred in enumerate(report.predictions):
        name = f"prediction_b{b}.pgm"
        imaging.write_pgm(out / name, pred)
        report.images.append(name)
    if rollouts and rollouts[0]:
        strip = imaging.grid(
            [f for r in rollouts if r for f in list(prefix_frames) + r], ncols=len(prefix_frames) + len(rollouts[0])
        )
        plotting.image(out / "rollout.png", strip, "observed prefix, then chosen frames per branch")
    summary = {
        "acceptance_rates": report.acceptance_rates,
        "ssim_scores": report.ssim_scores,
        "wall_ms_per_cone": report.wall_ms_per_cone,
        "images": sorted(report.images),
        "slope": report.slope,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_predict(cfg: RunConfig) -> PredictionReport:
    """Roll the observed prefix forward through intersecting future cones.

    The observed frames become cone apices at ``0, dt, ...``. Each branch
    then places a new apex every ``k`` steps by sampling the current
    intersection, choosing the candidate whose decoding best matches the
    first observed frame, and adding that event's cone. At ``horizon`` the
    full intersection is sampled once more and the chosen decoding is the
    prediction.
    """
    t0 = time.perf_counter()
    model, dataset = load_inputs(cfg)
    out = _outdir(cfg)
    seq = _sequence(dataset, cfg.sequence)
    if cfg.prefix > len(seq):
        raise ConfigError(f"prefix {cfg.prefix} longer than the sequence ({len(seq)} frames)")
    t_last = (cfg.prefix - 1) * cfg.dt
    if cfg.horizon <= t_last:
        raise ConfigError(f"horizon {cfg.horizon} must be later than the last observed frame at t={t_last}")
    embed = embed_map_for(cfg, model.c)
    slope = resolve_slope(cfg, model, dataset, embed)
    observed = M.embed_sequence(model, seq.pixels[: cfg.prefix], embed, cfg.dt)
    reference = seq.frame(0)
    prefix_frames = [seq.frame(i) for i in range(cfg.prefix)]
    base_cones = [LightCone(e.event, slope) for e in observed]
    times = rollout_times(t_last, cfg.horizon, cfg.k, cfg.dt)
    root = RandomState(cfg.seed).spawn(_PREDICT)

    report = PredictionReport([], [], observed, slope)
    rollouts: list[list[np.ndarray]] = []
    failure = None
    for b in range(cfg.branches):
        cones = list(base_cones)
        apex = observed[-1]
        chosen_frames: list[np.ndarray] = []
        rollouts.append(chosen_frames)
        for i, t in enumerate(times):
            proposal = _proposal(cfg, model, apex.latent)
            tc = time.perf_counter()
            try:
                s = sample_in_section(
                    cones, t, proposal, embed, root.spawn(b, i), max_trials=cfg.trials, n_accept=cfg.candidates or None
                )
            except ZeroAccepted:
                span = max(cfg.horizon, 1.0) * 10
                earliest = earliest_feasible_time(cones, t, t + span, step=cfg.dt)
                failure = EmptyIntersection(
                    f"branch {b}: no candidate in the intersection of {len(cones)} cones at t={t:g} "
                    f"after {cfg.trials} trials; earliest certified feasible time: "
                    f"{'unknown' if earliest is None else f'{earliest:g}'}",
                    t,
                    earliest,
                )
                break
            frames = decode_frames(model, s.latents)
            j = choose_index(frames, reference)
            score = imaging.ssim(frames[j], reference)
            wall = (time.perf_counter() - tc) * 1e3
            report.steps.append(ConeStep(b, i, t, tuple(cones), s.attempted, s.accepted, s.events, j, score, wall))
            chosen_frames.append(frames[j])
            apex = EmbeddedFrameEvent(-1, s.events[j], PoincarePoint(s.latents[j], model.c))
            if i < len(times) - 1:
                cones.append(LightCone(apex.event, slope))
            else:
                report.predictions.append(frames[j])
        if failure is not None:
            break
    _write_prediction_outputs(out, cfg, report, prefix_frames, rollouts)
    write_manifest(out, "predict", cfg, time.perf_counter() - t0, {"slope": slope})
    if failure is not None:
        raise failure
    return report


# ---------------------------------------------------------------------------
# counterfactual probing
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    state: EmbeddedFrameEvent
    events: list[Event]
    latents: np.ndarray
    frames: np.ndarray
    cone: LightCone


def cmd_probe(cfg: RunConfig) -> ProbeReport:
    t0 = time.perf_counter()
    model, dataset = load_inputs(cfg)
    out = _outdir(cfg)
    seq = _sequence(dataset, cfg.sequence)
    if cfg.frame >= len(seq):
        raise ConfigError(f"frame {cfg.frame} out of range for a {len(seq)}-frame sequence")
    embed = embed_map_for(cfg, model.c)
    slope = resolve_slope(cfg, model, dataset, embed)
    mu, _ = M.encode_array(model, seq.frame(cfg.frame).reshape(1, -1))
    state = embed_frame(cfg.frame, PoincarePoint(mu[0], model.c), embed, cfg.dt)
    proposal = _proposal(cfg, model, state.latent)
    probe = probe_futures if cfg.direction == "future" else probe_pasts
    try:
        s = probe(state, cfg.probe_horizon, proposal, RandomState(cfg.seed).spawn(_PROBE), cfg.probe_k, embed, slope, cfg.trials)
    except ZeroAccepted as exc:
        raise EmptyIntersection(
            f"no {cfg.direction} state found at horizon {cfg.probe_horizon:g} after {exc.trials} trials",
            state.event.t,
            None,
        ) from exc
    frames = decode_frames(model, s.latents)
    ref = seq.frame(cfg.frame)
    rows = []
    for i, (e, f) in enumerate(zip(s.events, frames)):
        rows.append((i, e.t, float(np.linalg.norm(e.x - state.event.x)), imaging.ssim(f, ref)))
    write_csv(out / "probe.csv", ["index", "t", "distance", "ssim_vs_input"], rows)
    gallery = imaging.grid([ref] + list(frames), ncols=len(frames) + 1)
    imaging.write_pgm(out / "gallery.pgm", gallery)
    sign = "+" if cfg.direction == "future" else "-"
    plotting.image(out / "gallery.png", gallery, f"input, then {cfg.direction} states at {sign}{cfg.probe_horizon:g}")
    write_manifest(out, "probe", cfg, time.perf_counter() - t0, {"slope": slope})
    orientation = Orientation.FUTURE if cfg.direction == "future" else Orientation.PAST
    return ProbeReport(state, s.events, s.latents, frames, LightCone(state.event, slope, orientation))


# ---------------------------------------------------------------------------
# aperture
# ---------------------------------------------------------------------------


def aperture_from_data(cfg: RunConfig, model: M.PVae, dataset, embed: EmbedMap):
    """Slope estimate plus the positive and counter-example speeds behind it."""
    subset = dataset[: min(cfg.aperture_sequences, len(dataset))]
    if len(subset[0]) < 2:
        raise ConfigError("dataset too small: sequences need at least two frames")
    positives = [M.embed_sequence(model, s.pixels, embed, cfg.dt) for s in subset]
    try:
        pairs = data.negatives(subset, RandomState(cfg.seed).spawn(_APERTURE), cfg.aperture_negatives)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    negatives = [(positives[p.seq_a][p.frame_a], positives[p.seq_b][p.frame_b]) for p in pairs]
    slope = estimate_aperture(positives, negatives)

    def speed(a, b):
        return float(np.linalg.norm(b.event.x - a.event.x)) / (b.event.t - a.event.t)

    pos = [speed(a, b) for seq in positives for a, b in zip(seq[:-1], seq[1:])]
    neg = [speed(a, b) for a, b in negatives]
    return slope, pos, neg


def cmd_aperture(cfg: RunConfig) -> float:
    t0 = time.perf_counter()
    model, dataset = load_inputs(cfg)
    out = _outdir(cfg)
    embed = embed_map_for(cfg, model.c)
    slope, pos, neg = aperture_from_data(cfg, model, dataset, embed)
    (out / "aperture.txt").write_text(f"slope = {slope!r}\n")
    write_csv(out / "speeds.csv", ["kind", "speed"], [("positive", v) for v in pos] + [("negative", v) for v in neg])
    plotting.speed_histogram(out / "speeds.png", pos, neg, slope)
    write_manifest(out, "aperture", cfg, time.perf_counter() - t0, {"slope": slope})
    return slope
