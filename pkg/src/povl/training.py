"""Sample assembly, the training loop, checkpointing and prediction evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .features import T_MAX, T_MIN, FeatureTable, frenet_origin
from .geometry import SegmentKind
from .metrics import rmse
from .predictor import T_PRED, cv_frenet_prior
from .scene import FPS, RoadMap, Track
from .tensor import Adam, NumericError
from .transformer import ModelConfig, Normalizer, POVLModel, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    max_batches: int = 2000
    batch_size: int = 64
    t_obs_strategy: str = "uniform"   # "uniform" over [2, 15] or "max"
    seed: int = 0
    checkpoint_every: int = 500
    clip_norm: Optional[float] = 5.0
    log_every: int = 100
    # Probability of blanking a teacher-forced displacement token, so the
    # decoder cannot simply copy the previous step and the encoder has to
    # carry the motion estimate.
    token_dropout: float = 0.0
    # Std of Gaussian noise added to teacher-forced tokens (normalised units),
    # so the decoder learns to tolerate its own imperfect feedback.
    token_noise: float = 0.5
    # "constant", or "cosine" to anneal lr to zero over max_batches
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr <= 0 or self.max_batches <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate, batch count and batch size must be positive")
        if self.t_obs_strategy not in ("uniform", "max"):
            raise ValueError(f"unknown t_obs strategy {self.t_obs_strategy!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class Dataset:
    features: np.ndarray      # (N, T_MAX, 28) raw, zero-padded
    mask: np.ndarray          # (N, T_MAX)
    targets: np.ndarray       # (N, T_PRED, 2) per-step Frenet displacements
    origin: np.ndarray        # (N, 2) Frenet (s, d) at the anchor
    path: np.ndarray          # (N,) 0 slip road, 1 main carriageway
    future: np.ndarray        # (N, T_PRED, 2) Cartesian ground truth
    pos: np.ndarray           # (N, 2) current Cartesian position
    vel: np.ndarray           # (N, 2) current velocity
    vehicle_id: np.ndarray
    frame: np.ndarray
    recording: np.ndarray     # recording label per sample
    prior: np.ndarray         # (N, T_PRED, 2) Frenet image of the CV rollout

    def __len__(self):
        return len(self.features)

    @property
    def t_obs(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def subset(self, idx) -> "Dataset":
        return Dataset(**{k: getattr(self, k)[idx] for k in self.__dataclass_fields__})

    def with_t_obs(self, t_obs: int) -> "Dataset":
        """Same anchors truncated to ``t_obs`` observed rows (history permitting)."""
        full = self.t_obs
        if np.any(full < t_obs):
            raise ValueError(f"some samples have fewer than {t_obs} observed rows")
        mask = np.zeros_like(self.mask)
        mask[:, T_MAX - t_obs:] = True
        d = self.subset(slice(None))
        d.mask = mask
        d.features = np.where(mask[..., None], self.features, 0.0)
        return d

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("no samples")
        return Dataset(**{k: np.concatenate([getattr(p, k) for p in parts])
                          for k in Dataset.__dataclass_fields__})


PATH_CODE = {SegmentKind.SLIP_ROAD: 0, SegmentKind.MAIN_CARRIAGEWAY: 1}
PATH_KIND = {v: k for k, v in PATH_CODE.items()}


def eligible_anchors(track: Track, min_history: int = T_MIN, horizon: int = T_PRED) -> np.ndarray:
    """Indices with at least ``min_history`` observed and ``horizon`` future frames."""
    n = len(track)
    return np.arange(min_history - 1, n - horizon)


def make_samples(tracks: dict[int, Track], road: RoadMap, seed: int = 0,
                 t_obs="uniform", stride: int = 1, min_history: int = T_MIN,
                 recording: str = "rec", table: Optional[FeatureTable] = None,
                 vehicles: Optional[Sequence[int]] = None) -> Dataset:
    """Windows and displacement targets for every eligible (vehicle, frame).

    ``t_obs`` is "uniform" (drawn from [2, min(15, history)] per sample), or a
    fixed integer.  Windows only ever contain frames up to the anchor.
    """
    rng = np.random.default_rng(seed)
    table = table or FeatureTable(tracks, road)
    feats, masks, targets, origin, paths, future = [], [], [], [], [], []
    pos, vel, vids, frames, priors = [], [], [], [], []
    if isinstance(t_obs, (int, np.integer)):
        min_history = max(min_history, int(t_obs))
    for vid in (sorted(tracks) if vehicles is None else vehicles):
        tr = tracks[vid]
        rows = table.rows[vid]
        for i in eligible_anchors(tr, min_history)[::stride]:
            hist = min(i + 1, T_MAX)
            if t_obs == "uniform":
                k = int(rng.integers(T_MIN, hist + 1))
            elif t_obs == "max":
                k = hist
            else:
                k = int(t_obs)
            frame = int(tr.frames[i])
            o = frenet_origin(tr, road, frame)
            path = road.paths[o.associated_path]
            fut = tr.pos[i + 1:i + 1 + T_PRED]
            s, d, _ = path.project(fut)
            sd = np.stack([np.concatenate([[o.s], s]), np.concatenate([[o.d], d])], 1)
            w = np.zeros((T_MAX, rows.shape[1]))
            w[T_MAX - k:] = rows[i + 1 - k:i + 1]
            m = np.arange(T_MAX) >= T_MAX - k
            feats.append(w)
            masks.append(m)
            targets.append(np.diff(sd, axis=0))
            origin.append((o.s, o.d))
            paths.append(PATH_CODE[o.associated_path])
            future.append(fut)
            priors.append(cv_frenet_prior(path, o.s, o.d, [rows[i, 1]], [rows[i, 2]])[0])
            pos.append(tr.pos[i])
            vel.append(tr.vel[i])
            vids.append(vid)
            frames.append(frame)
    n = len(feats)
    if n == 0:
        return Dataset(np.zeros((0, T_MAX, 28)), np.zeros((0, T_MAX), bool),
                       np.zeros((0, T_PRED, 2)), np.zeros((0, 2)), np.zeros(0, int),
                       np.zeros((0, T_PRED, 2)), np.zeros((0, 2)), np.zeros((0, 2)),
                       np.zeros(0, int), np.zeros(0, int), np.zeros(0, dtype=object),
                       np.zeros((0, T_PRED, 2)))
    return Dataset(np.array(feats), np.array(masks), np.array(targets), np.array(origin),
                   np.array(paths), np.array(future), np.array(pos), np.array(vel),
                   np.array(vids), np.array(frames), np.array([recording] * n, dtype=object),
                   np.array(priors))


@dataclass
class TrainResult:
    model: POVLModel
    losses: list
    status: str = "ok"
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)


def train(dataset: Dataset, model_config: ModelConfig = None,
          config: TrainingConfig = None, checkpoint_path=None,
          callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("empty training set")
    model_config = model_config or ModelConfig()
    config = config or TrainingConfig()
    model = POVLModel(model_config)
    resid = dataset.targets - model.prior(dataset.features, dataset.prior)
    norm = Normalizer.fit(dataset.features, dataset.mask, resid)
    model.normalizer = norm
    x_all = norm.features(dataset.features, dataset.mask)
    y_all = model.normalise_targets(dataset.features, dataset.targets, dataset.prior)
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.lr, clip_norm=config.clip_norm)
    n = len(dataset)
    order = rng.permutation(n)
    cursor = 0
    losses: list[float] = []
    good = {k: v.copy() for k, v in model.arrays().items()}
    status = "ok"
    t0 = time.perf_counter()

    def meta():
        return {"training_config": asdict(config), "loss_curve": losses, "status": status,
                "n_samples": n}

    for step in range(config.max_batches):
        bs = min(config.batch_size, n)
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        model.zero_grad()
        tokens = model.teacher_tokens(y_all[idx])
        if config.token_dropout > 0:
            drop = rng.random(tokens.shape[:2]) < config.token_dropout
            drop[:, 0] = False
            tokens[drop, :2] = 0.0
        if config.token_noise > 0:
            tokens[:, 1:, :2] += rng.normal(0.0, config.token_noise, tokens[:, 1:, :2].shape)
        try:
            loss = model.forward_train(x_all[idx], dataset.mask[idx], y_all[idx], tokens)
            loss.backward()
            grads = model.grads()
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError("non-finite gradient")
        except NumericError as e:
            log.warning("step %d: %s; restoring last good parameters", step, e)
            for k, v in good.items():
                model.params[k].data[...] = v
            status = f"aborted at step {step}: {e}"
            break
        if config.lr_schedule == "cosine":
            opt.lr = 0.5 * config.lr * (1 + math.cos(math.pi * step / config.max_batches))
        opt.step(model.params, grads)
        losses.append(float(loss.data))
        if callback:
            callback(step, losses[-1])
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f", step, losses[-1])
        if (step + 1) % config.checkpoint_every == 0:
            good = {k: v.copy() for k, v in model.arrays().items()}
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, meta())
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, meta())
    return TrainResult(model, losses, status, time.perf_counter() - t0, meta())


def training_nll(model: POVLModel, dataset: Dataset) -> float:
    """Teacher-forced mean NLL in normalised units (the training objective)."""
    x = model.normalizer.features(dataset.features, dataset.mask)
    y = model.normalise_targets(dataset.features, dataset.targets, dataset.prior)
    return float(model.forward_train(x, dataset.mask, y).data)


def reconstruct_positions(disp: np.ndarray, dataset: Dataset, road: RoadMap) -> np.ndarray:
    """Cartesian positions from per-step displacements (N, T, 2), clamped to the paths."""
    out = np.zeros(disp.shape)
    for code, kind in PATH_KIND.items():
        sel = dataset.path == code
        if not sel.any() or kind not in road.paths:
            continue
        path = road.paths[kind]
        s = dataset.origin[sel, 0:1] + np.cumsum(disp[sel, :, 0], axis=1)
        d = dataset.origin[sel, 1:2] + np.cumsum(disp[sel, :, 1], axis=1)
        lo, hi = path.s_range
        s = np.clip(s, lo, hi)
        out[sel] = path.evaluate(s.ravel(), d.ravel()).reshape(-1, disp.shape[1], 2)
    return out


def predict_dataset(model, dataset: Dataset, road: RoadMap, chunk: int = 512) -> np.ndarray:
    """Predicted Cartesian futures (N, T_PRED, 2); ``model="gt"`` returns ground truth."""
    if isinstance(model, str):
        if model == "gt":
            return dataset.future.copy()
        if model == "cv":
            k = np.arange(1, T_PRED + 1)[None, :, None] / FPS
            return dataset.pos[:, None] + k * dataset.vel[:, None]
        raise ValueError(f"unknown predictor {model!r}")
    disp = np.zeros((len(dataset), T_PRED, 2))
    for lo in range(0, len(dataset), chunk):
        sl = slice(lo, lo + chunk)
        gs = model.predict_gaussian(dataset.features[sl], dataset.mask[sl], dataset.prior[sl])
        disp[sl] = np.stack([g.mu for g in gs])
    return reconstruct_positions(disp, dataset, road)


@dataclass
class PredictionReport:
    horizons: list            # seconds
    rmse_horizon: dict        # name -> list per horizon (full observation)
    t_obs: list
    rmse_obslength: dict      # name -> list per t_obs (pooled over the horizon)
    n_samples: int

    def rows_horizon(self):
        return [{"horizon_s": h, **{k: v[i] for k, v in self.rmse_horizon.items()}}
                for i, h in enumerate(self.horizons)]

    def rows_obslength(self):
        return [{"t_obs": t, "seconds": t / FPS, **{k: v[i] for k, v in self.rmse_obslength.items()}}
                for i, t in enumerate(self.t_obs)]


def evaluate(model, test: Dataset, road: RoadMap, t_obs_values=range(T_MIN, T_MAX + 1),
             name: str = "povl") -> PredictionReport:
    """RMSE by horizon (1..5 s, at t_obs = 15) and by observation length, with CV columns.

    ``test`` should hold full 15-step windows so every t_obs uses the same anchors.
    """
    horizons = [1, 2, 3, 4, 5]
    cv = predict_dataset("cv", test, road)
    t_obs_values = list(t_obs_values)
    by_t, cv_t = [], []
    full = None
    for t in t_obs_values:
        sub = test.with_t_obs(t)
        pred = predict_dataset(model, sub, road)
        by_t.append(rmse(pred, sub.future))
        cv_t.append(rmse(cv, test.future))
        if t == T_MAX:
            full = pred
    if full is None:
        full = predict_dataset(model, test.with_t_obs(T_MAX), road)
    rh = {name: [rmse(full, test.future, h * FPS) for h in horizons],
          "cv": [rmse(cv, test.future, h * FPS) for h in horizons]}
    return PredictionReport(horizons, rh, t_obs_values, {name: by_t, "cv": cv_t}, len(test))
