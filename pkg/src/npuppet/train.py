"""Fitting loop: stochastic gradient descent of the rendered objective
over the deformation model's parameters.

The loop is deterministic for a fixed seed: frames are in-memory arrays,
the dataset order is reshuffled each epoch from the run's generator, and
batch gradients accumulate in batch index order. The optimization step is
single-writer; nothing here needs worker threads.

Epoch statistics are measured by a forward pass after the epoch's updates,
with the same arithmetic evaluate() uses, so the last log entry of a run
agrees exactly with a post-hoc evaluation of the returned parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10: same API from the backport
    import tomli as tomllib

from .autodiff import constant
from .checkpoint import params_digest, save_params
from .energies import (
    LossWeights,
    arap_st,
    area_st,
    joints_st,
    masked_rec_st,
    rec_st,
    total_st,
    wild_total_st,
)
from .errors import NumericError, ValidationError
from .model import ModelConfig, init_params, lift_params, predict_st
from .puppet import Puppet, cotangent_weights, rest_state
from .render import RasterConfig, coverage_area

MODES = ("standard", "wild")

# Divergence guard: a reconstruction blow-up past this multiple of the
# initial value rolls back to the last checkpoint with a halved step size.
# A run that starts already reconstructed (rec ~ 0) has no meaningful
# reference value, and rolling back would fight the joints and area terms,
# so the guard stays off below the baseline floor.
GUARD_FACTOR = 10.0
GUARD_LIMIT = 3
GUARD_MIN_BASELINE = 1.0e-6

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1.0e-8


@dataclass(frozen=True)
class TrainConfig:
    """Shape of one fitting run. The raster is square at `resolution`,
    which must be a multiple of 8 so three stride-2 encoder stages divide
    it evenly. `mode` picks the clean-plate objective ("standard") or the
    masked objective for frames with backgrounds ("wild")."""

    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1.0e-4
    seed: int = 0
    resolution: int = 256
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "standard"
    checkpoint_every: int = 10

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.resolution < 8 or self.resolution % 8 != 0:
            raise ValidationError(
                f"resolution must be a positive multiple of 8, got {self.resolution}"
            )
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.checkpoint_every < 1:
            raise ValidationError(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}"
            )
        if not isinstance(self.weights, LossWeights):
            raise ValidationError("weights must be a LossWeights instance")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


def config_from_dict(d: dict) -> TrainConfig:
    """Build a TrainConfig from a plain mapping, rejecting unknown keys."""
    known = {
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "resolution",
        "weights",
        "mode",
        "checkpoint_every",
    }
    extra = set(d) - known
    if extra:
        raise ValidationError(f"unknown train config keys: {sorted(extra)}")
    kw = dict(d)
    if "weights" in kw:
        w = kw["weights"]
        if not isinstance(w, dict):
            raise ValidationError("weights must be a table of loss weights")
        try:
            kw["weights"] = LossWeights(**w)
        except TypeError:
            raise ValidationError(f"unknown loss weight keys: {sorted(w)}") from None
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def save_config(cfg: TrainConfig, path) -> None:
    w = cfg.weights
    lines = [
        f"epochs = {cfg.epochs}",
        f"batch_size = {cfg.batch_size}",
        f"learning_rate = {cfg.learning_rate!r}",
        f"seed = {cfg.seed}",
        f"resolution = {cfg.resolution}",
        f'mode = "{cfg.mode}"',
        f"checkpoint_every = {cfg.checkpoint_every}",
        "",
        "[weights]",
        f"arap_weight = {w.arap_weight!r}",
        f"joints_weight = {w.joints_weight!r}",
        f"user_arap_weight = {w.user_arap_weight!r}",
        f"user_joints_weight = {w.user_joints_weight!r}",
        f"area_weight = {w.area_weight!r}",
        "",
    ]
    Path(path).write_text("\n".join(lines))


@dataclass(frozen=True)
class EpochRecord:
    """One log line. `rec` is the reconstruction term in the mode's own
    form (masked in wild runs); `area` is the silhouette-area deviation,
    which enters `total` only in wild mode. `wall` is the epoch's duration
    in seconds. `checkpoint` is the parameter digest when this epoch was
    checkpointed, else None."""

    epoch: int
    rec: float
    reg: float
    joints: float
    area: float
    total: float
    lr: float
    wall: float
    checkpoint: str | None


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.entries and rec.epoch <= self.entries[-1].epoch:
            raise ValidationError(
                f"epoch indices must increase, got {rec.epoch} after {self.entries[-1].epoch}"
            )
        vals = (rec.rec, rec.reg, rec.joints, rec.area, rec.total, rec.lr, rec.wall)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"log entry for epoch {rec.epoch} has non-finite values")
        self.entries.append(rec)

    def final(self) -> EpochRecord:
        if not self.entries:
            raise ValidationError("empty train log")
        return self.entries[-1]

    def to_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e)) + "\n")


def log_from_ndjson(path) -> TrainLog:
    log = TrainLog()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                log.append(EpochRecord(**json.loads(line)))
    return log


class TrainAborted(NumericError):
    """The objective went non-finite (or the mask collapsed). Carries the
    last checkpointed parameters and the log written so far."""

    def __init__(self, msg: str, params: dict, log: TrainLog):
        super().__init__(msg)
        self.params = params
        self.log = log


def frames_rgba(frames, size: int) -> list:
    """Normalize a frame collection to float64 RGBA at the run resolution.
    RGB frames get an opaque alpha channel; values must sit in [0,1]."""
    if isinstance(frames, np.ndarray) and frames.ndim == 4:
        frames = list(frames)
    frames = list(frames)
    if not frames:
        raise ValidationError("training needs at least one frame")
    out = []
    for i, f in enumerate(frames):
        a = np.asarray(f, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] not in (3, 4):
            raise ValidationError(f"frame {i}: expected (H,W,3|4), got {a.shape}")
        if a.shape[0] != size or a.shape[1] != size:
            raise ValidationError(
                f"frame {i}: expected {size}x{size}, got {a.shape[0]}x{a.shape[1]}"
            )
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"frame {i} has non-finite values")
        if a.min() < -1e-9 or a.max() > 1.0 + 1e-9:
            raise ValidationError(f"frame {i} values must lie in [0,1]")
        if a.shape[2] == 3:
            a = np.concatenate([a, np.ones_like(a[..., :1])], axis=2)
        out.append(a)
    return out


def _resolve_model_cfg(cfg: TrainConfig, model_cfg: ModelConfig | None) -> ModelConfig:
    if model_cfg is None:
        return ModelConfig(height=cfg.resolution, width=cfg.resolution)
    if model_cfg.height != cfg.resolution or model_cfg.width != cfg.resolution:
        raise ValidationError(
            f"model raster {model_cfg.width}x{model_cfg.height} does not match "
            f"train resolution {cfg.resolution}"
        )
    return model_cfg


@dataclass(frozen=True)
class FrameMetrics:
    rec: float
    reg: float
    joints: float
    area: float
    total: float


def _frame_metrics(x, params, p, model_cfg, rcfg, ew, rest_area, lw, mode) -> FrameMetrics:
    """Forward-only loss components for one frame at the current params.
    Uses the graph ops on constants so the numbers are bit-identical to
    what the training step minimizes."""
    _, v = predict_st(x, params, p, model_cfg)
    vc = constant(v.data)
    reg = float(arap_st(vc, p, ew).data)
    joints = float(joints_st(vc, p.joints).data)
    area = float(area_st(vc, p, rcfg, rest_area).data)
    if mode == "wild":
        rec = float(masked_rec_st(vc, p, rcfg, x).data)
        total = rec + lw.arap_weight * reg + lw.joints_weight * joints + lw.area_weight * area
    else:
        rec = float(rec_st(vc, p, rcfg, x).data)
        total = rec + lw.arap_weight * reg + lw.joints_weight * joints
    return FrameMetrics(rec=rec, reg=reg, joints=joints, area=area, total=total)


def _mean_metrics(xs, params, p, model_cfg, rcfg, ew, rest_area, lw, mode) -> FrameMetrics:
    ms = [
        _frame_metrics(x, params, p, model_cfg, rcfg, ew, rest_area, lw, mode) for x in xs
    ]
    return FrameMetrics(
        rec=float(np.mean([m.rec for m in ms])),
        reg=float(np.mean([m.reg for m in ms])),
        joints=float(np.mean([m.joints for m in ms])),
        area=float(np.mean([m.area for m in ms])),
        total=float(np.mean([m.total for m in ms])),
    )


def _adam_step(params, grads, m, v, t, lr):
    out = {}
    b1t = 1.0 - _ADAM_BETA1**t
    b2t = 1.0 - _ADAM_BETA2**t
    for k in params:
        g = grads[k]
        m[k] = _ADAM_BETA1 * m[k] + (1.0 - _ADAM_BETA1) * g
        v[k] = _ADAM_BETA2 * v[k] + (1.0 - _ADAM_BETA2) * g * g
        out[k] = params[k] - lr * (m[k] / b1t) / (np.sqrt(v[k] / b2t) + _ADAM_EPS)
    return out


def _copy_params(params: dict) -> dict:
    return {k: np.array(v, dtype=np.float64) for k, v in params.items()}


def train(
    frames,
    p: Puppet,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
):
    """Fit the deformation model to `frames`, returning (params, log).

    Standard mode minimizes reconstruction + rigidity + joints against
    clean-plate frames; wild mode swaps in the masked reconstruction and
    adds the area anchor, for frames composited over arbitrary backgrounds.
    A checkpoint is taken at init, every `cfg.checkpoint_every` epochs, and
    at the end (written under `out_dir` when given, along with the log and
    a manifest). If the mean reconstruction explodes past GUARD_FACTOR x
    its initial value the run rolls back to the last checkpoint with the
    step size halved, at most GUARD_LIMIT times; a non-finite objective
    raises TrainAborted carrying the last checkpointed parameters.
    """
    model_cfg = _resolve_model_cfg(cfg, model_cfg)
    xs = frames_rgba(frames, cfg.resolution)
    rcfg = RasterConfig(width=cfg.resolution, height=cfg.resolution)
    ew = cotangent_weights(p)
    rest_area = coverage_area(rest_state(p), p, rcfg)
    lw = cfg.weights

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    params = init_params(model_cfg, p.n_vertices, seed=cfg.seed)
    m = {k: np.zeros_like(a) for k, a in params.items()}
    v = {k: np.zeros_like(a) for k, a in params.items()}
    t = 0
    lr = cfg.learning_rate
    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)

    def checkpoint(epoch: int) -> str:
        digest = params_digest(params)
        if out is not None:
            save_params(out / f"checkpoint_{epoch:04d}.bin", params)
        return digest

    def abort(reason: str):
        if out is not None:
            log.to_ndjson(out / "train_log.ndjson")
        raise TrainAborted(
            f"{reason}; last good checkpoint is {last_digest}", _copy_params(last_good), log
        )

    tic = time.perf_counter()
    stats = _mean_metrics(xs, params, p, model_cfg, rcfg, ew, rest_area, lw, cfg.mode)
    last_digest = checkpoint(0)
    last_good = _copy_params(params)
    log.append(
        EpochRecord(
            epoch=0,
            rec=stats.rec,
            reg=stats.reg,
            joints=stats.joints,
            area=stats.area,
            total=stats.total,
            lr=lr,
            wall=time.perf_counter() - tic,
            checkpoint=last_digest,
        )
    )
    baseline = stats.rec
    halvings = 0

    n = len(xs)
    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            lifted = lift_params(params)
            try:
                for idx in batch:
                    _, vt = predict_st(xs[idx], lifted, p, model_cfg)
                    if cfg.mode == "wild":
                        loss = wild_total_st(vt, p, ew, rcfg, xs[idx], lw, rest_area)
                    else:
                        loss = total_st(vt, p, ew, rcfg, xs[idx], lw)
                    if not np.isfinite(loss.data):
                        abort(f"non-finite loss at epoch {epoch}")
                    loss.backward()
            except NumericError as err:
                if isinstance(err, TrainAborted):
                    raise
                abort(f"numeric failure at epoch {epoch} ({err})")
            grads = {
                k: (lt.grad if lt.grad is not None else np.zeros_like(lt.data))
                / len(batch)
                for k, lt in lifted.items()
            }
            t += 1
            params = _adam_step(params, grads, m, v, t, lr)

        try:
            stats = _mean_metrics(xs, params, p, model_cfg, rcfg, ew, rest_area, lw, cfg.mode)
        except NumericError as err:
            abort(f"numeric failure at epoch {epoch} ({err})")
        finite = all(
            np.isfinite(x) for x in (stats.rec, stats.reg, stats.joints, stats.area)
        )
        if not finite:
            abort(f"non-finite loss at epoch {epoch}")

        lr_used = lr
        if (
            halvings < GUARD_LIMIT
            and baseline > GUARD_MIN_BASELINE
            and stats.rec > GUARD_FACTOR * baseline
        ):
            # Rolled back: the logged stats are the diverged measurement,
            # the parameters continue from the last checkpoint.
            halvings += 1
            lr *= 0.5
            params = _copy_params(last_good)
            m = {k: np.zeros_like(a) for k, a in params.items()}
            v = {k: np.zeros_like(a) for k, a in params.items()}
            t = 0

        digest = None
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            digest = checkpoint(epoch)
            last_digest = digest
            last_good = _copy_params(params)
        log.append(
            EpochRecord(
                epoch=epoch,
                rec=stats.rec,
                reg=stats.reg,
                joints=stats.joints,
                area=stats.area,
                total=stats.total,
                lr=lr_used,
                wall=time.perf_counter() - tic,
                checkpoint=digest,
            )
        )

    if out is not None:
        log.to_ndjson(out / "train_log.ndjson")
        write_manifest(
            out / "manifest.json",
            model_cfg=model_cfg,
            train_cfg=cfg,
            n_vertices=p.n_vertices,
            checkpoint=last_digest,
            trained=True,
        )
    return params, log


@dataclass(frozen=True)
class EvalReport:
    """Per-frame and mean reconstruction distance between each frame and
    its re-rendered prediction. Always the plain (unmasked) distance, also
    for models that were fitted in wild mode."""

    per_frame: tuple
    mean: float

    def to_dict(self) -> dict:
        return {"per_frame": list(self.per_frame), "mean": self.mean}


def evaluate(
    frames,
    params: dict,
    p: Puppet,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
) -> EvalReport:
    """Reconstruction report at fixed parameters (no gradients)."""
    model_cfg = _resolve_model_cfg(cfg, model_cfg)
    xs = frames_rgba(frames, cfg.resolution)
    rcfg = RasterConfig(width=cfg.resolution, height=cfg.resolution)
    per = []
    for x in xs:
        _, v = predict_st(x, params, p, model_cfg)
        per.append(float(rec_st(constant(v.data), p, rcfg, x).data))
    return EvalReport(per_frame=tuple(per), mean=float(np.mean(per)))


def write_manifest(
    path,
    *,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    n_vertices: int,
    checkpoint: str,
    trained: bool,
) -> None:
    """Sidecar JSON describing a checkpoint: architecture, run config, and
    whether the parameters were actually fitted (consumers refuse to
    interpolate or pose with untrained parameters)."""
    doc = {
        "format": "npuppet-model",
        "version": 1,
        "trained": bool(trained),
        "checkpoint": checkpoint,
        "n_vertices": int(n_vertices),
        "model": {
            "height": model_cfg.height,
            "width": model_cfg.width,
            "conv_channels": list(model_cfg.conv_channels),
            "enc_fc": list(model_cfg.enc_fc),
            "dec_fc": list(model_cfg.dec_fc),
            "offset_clamp": model_cfg.offset_clamp,
        },
        "train": train_cfg.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("format") != "npuppet-model":
        raise ValidationError(f"{path}: not a model manifest")
    if doc.get("version") != 1:
        raise ValidationError(f"{path}: unsupported manifest version {doc.get('version')}")
    for key in ("trained", "checkpoint", "n_vertices", "model", "train"):
        if key not in doc:
            raise ValidationError(f"{path}: manifest is missing {key!r}")
    return doc


def manifest_model_config(doc: dict) -> ModelConfig:
    m = doc["model"]
    return ModelConfig(
        height=int(m["height"]),
        width=int(m["width"]),
        conv_channels=tuple(int(c) for c in m["conv_channels"]),
        enc_fc=tuple(int(c) for c in m["enc_fc"]),
        dec_fc=tuple(int(c) for c in m["dec_fc"]),
        offset_clamp=float(m["offset_clamp"]),
    )
