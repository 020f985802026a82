"""Masked transformer encoder-decoder that outputs per-step bivariate Gaussians.

Pre-LN layers.  The encoder reads a padded observation window; padded rows are
masked as attention keys, and positions are encoded by *age* (steps before the
current frame), so an observation gives the same latents whatever it is padded
to.  The decoder is autoregressive over displacement tokens ``(Δs, Δd, start)``
with a causal mask; it is teacher forced in training and fed its own means at
inference.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import (
    NumericError,
    Tensor,
    check_finite,
    concat,
    attention_bias,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
)

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2 * math.pi)
# tanh reaches exactly ±1 in float64 for |x| > ~19; keep |ρ| < 1 strictly
RHO_MAX = 1.0 - 1e-6
DISP_STD_FLOOR = 1e-3


@dataclass
class ModelConfig:
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 8
    d_model: int = 64
    d_ff: int = 128
    input_dim: int = 28
    output_dim: int = 5
    T_max: int = 15
    T_pred: int = 25
    dec_input_dim: int = 3
    seed: int = 0
    # Predict displacements as residuals over a constant-velocity prior, so an
    # untrained head starts at the CV baseline.
    cv_residual: bool = True
    dt: float = 0.2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.output_dim != 5:
            raise ValueError("output head is (mu_s, mu_d, sigma_s, sigma_d, rho)")


@dataclass
class Normalizer:
    feat_mean: np.ndarray
    feat_std: np.ndarray
    disp_mean: np.ndarray
    disp_std: np.ndarray

    @classmethod
    def identity(cls, n_features: int = 28) -> "Normalizer":
        return cls(np.zeros(n_features), np.ones(n_features), np.zeros(2), np.ones(2))

    @classmethod
    def fit(cls, features: np.ndarray, mask: np.ndarray, disp: np.ndarray) -> "Normalizer":
        rows = features[mask]
        fs = rows.std(axis=0)
        ds = disp.reshape(-1, 2).std(axis=0)
        # constant features keep unit scale; displacement scale never drops below 1 mm
        return cls(rows.mean(axis=0), np.where(fs > 1e-6, fs, 1.0),
                   disp.reshape(-1, 2).mean(axis=0), np.maximum(ds, DISP_STD_FLOOR))

    def features(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        z = (x - self.feat_mean) / self.feat_std
        return np.where(mask[..., None], z, 0.0)

    def to_dict(self):
        return {k: np.asarray(v, float).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, float) for k, v in d.items()})


@dataclass
class GaussianTrajectory:
    """Per-step displacement Gaussians in physical Frenet units."""

    mu: np.ndarray      # (T_pred, 2) mean (Δs, Δd)
    sigma: np.ndarray   # (T_pred, 2)
    rho: np.ndarray     # (T_pred,)

    def covariance(self) -> np.ndarray:
        ss, sd = self.sigma[:, 0], self.sigma[:, 1]
        c = self.rho * ss * sd
        return np.stack([np.stack([ss * ss, c], -1), np.stack([c, sd * sd], -1)], -2)


def positional_encoding(positions, d_model: int) -> np.ndarray:
    pos = np.asarray(positions, float)[..., None]
    i = np.arange(0, d_model, 2)
    ang = pos / np.power(10000.0, i / d_model)
    pe = np.zeros(pos.shape[:-1] + (d_model,))
    pe[..., 0::2] = np.sin(ang)
    pe[..., 1::2] = np.cos(ang[..., : d_model // 2])
    return pe


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    D, F = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        lim = math.sqrt(6.0 / (n_in + n_out))
        p[name + ".w"] = rng.uniform(-lim, lim, (n_in, n_out))
        p[name + ".b"] = np.zeros(n_out)

    def norm(name):
        p[name + ".g"] = np.ones(D)
        p[name + ".b"] = np.zeros(D)

    def attn(name):
        for k in ("q", "k", "v", "o"):
            dense(f"{name}.{k}", D, D)

    def ffn(name):
        dense(name + ".1", D, F)
        dense(name + ".2", F, D)

    dense("enc.embed", cfg.input_dim, D)
    for i in range(cfg.n_layers_enc):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ff")
    norm("enc.ln")
    dense("dec.embed", cfg.dec_input_dim, D)
    for i in range(cfg.n_layers_dec):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ff")
    norm("dec.ln")
    dense("head", D, cfg.output_dim)
    p["head.w"] *= 0.01  # start near a unit Gaussian on normalised targets
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray]):
    """Scaled dot-product attention over the last two axes.

    ``mask`` broadcasts to (..., Tq, Tk); False marks keys that must receive
    exactly zero weight.  Returns (context, weights).
    """
    dk = q.shape[-1]
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(dk))
    w = masked_softmax(scores, mask)
    return w @ v, w.data


def multi_head_attention(params, name: str, xq: Tensor, xkv: Tensor, mask, n_heads: int) -> Tensor:
    B, Tq, D = xq.shape
    Tk = xkv.shape[1]
    h = n_heads
    dh = D // h

    def heads(x, T, tag):
        y = linear(x, params[f"{name}.{tag}.w"], params[f"{name}.{tag}.b"])
        return y.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(xq, Tq, "q"), heads(xkv, Tk, "k"), heads(xkv, Tk, "v")
    ctx, _ = attention(q, k, v, mask)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, D)
    return linear(ctx, params[f"{name}.o.w"], params[f"{name}.o.b"])


class POVLModel:
    def __init__(self, config: ModelConfig = None, params: Optional[dict] = None,
                 normalizer: Optional[Normalizer] = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config)
        self.normalizer = normalizer or Normalizer.identity(self.config.input_dim)

    # -- building blocks ---------------------------------------------------

    def _ln(self, x, name):
        return layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _ff(self, x, name):
        p = self.params
        return linear(gelu(linear(x, p[name + ".1.w"], p[name + ".1.b"])), p[name + ".2.w"],
                      p[name + ".2.b"])

    def encode(self, x: np.ndarray, mask: np.ndarray) -> Tensor:
        """x: (B, T, input_dim) normalised features, mask: (B, T) with a valid suffix."""
        cfg, p = self.config, self.params
        x = np.asarray(x, float)
        mask = np.asarray(mask, bool)
        T = x.shape[1]
        age = np.arange(T - 1, -1, -1)
        h = linear(Tensor(x), p["enc.embed.w"], p["enc.embed.b"]) + positional_encoding(age, cfg.d_model)
        key_mask = attention_bias(mask[:, None, None, :])
        for i in range(cfg.n_layers_enc):
            a = self._ln(h, f"enc.{i}.ln1")
            h = h + multi_head_attention(p, f"enc.{i}.attn", a, a, key_mask, cfg.n_heads)
            h = h + self._ff(self._ln(h, f"enc.{i}.ln2"), f"enc.{i}.ff")
            check_finite(h, f"encoder layer {i}")
        return check_finite(self._ln(h, "enc.ln"), "encoder output")

    def decode(self, memory: Tensor, mem_mask: np.ndarray, tokens: np.ndarray) -> Tensor:
        """Raw head outputs (B, K, 5) for decoder input tokens (B, K, 3)."""
        cfg, p = self.config, self.params
        tokens = np.asarray(tokens, float)
        K = tokens.shape[1]
        h = linear(Tensor(tokens), p["dec.embed.w"], p["dec.embed.b"]) + positional_encoding(
            np.arange(K), cfg.d_model)
        causal = attention_bias(np.tril(np.ones((K, K), bool))[None, None])
        cross = attention_bias(np.asarray(mem_mask, bool)[:, None, None, :])
        for i in range(cfg.n_layers_dec):
            a = self._ln(h, f"dec.{i}.ln1")
            h = h + multi_head_attention(p, f"dec.{i}.self", a, a, causal, cfg.n_heads)
            a = self._ln(h, f"dec.{i}.ln2")
            h = h + multi_head_attention(p, f"dec.{i}.cross", a, memory, cross, cfg.n_heads)
            h = h + self._ff(self._ln(h, f"dec.{i}.ln3"), f"dec.{i}.ff")
            check_finite(h, f"decoder layer {i}")
        h = self._ln(h, "dec.ln")
        return check_finite(linear(h, p["head.w"], p["head.b"]), "output head")

    @staticmethod
    def teacher_tokens(targets: np.ndarray) -> np.ndarray:
        """Decoder inputs for teacher forcing from normalised targets (B, K, 2)."""
        B, K, _ = targets.shape
        start = np.zeros((B, 1, 3))
        start[..., 2] = 1.0
        prev = np.concatenate([targets[:, :-1], np.zeros((B, K - 1, 1))], axis=-1)
        return np.concatenate([start, prev], axis=1)

    def forward_train(self, x, mask, targets, tokens: Optional[np.ndarray] = None) -> Tensor:
        """Mean NLL under teacher forcing, all inputs normalised."""
        mem = self.encode(x, mask)
        if tokens is None:
            tokens = self.teacher_tokens(targets)
        raw = self.decode(mem, mask, tokens)
        return nll_loss(raw, targets)

    def generate(self, x, mask, steps: Optional[int] = None) -> np.ndarray:
        """Greedy mean-feedback decoding; raw head outputs (B, steps, 5)."""
        steps = steps or self.config.T_pred
        mem = self.encode(x, mask)
        B = mem.shape[0]
        tokens = np.zeros((B, 1, 3))
        tokens[..., 2] = 1.0
        out = np.zeros((B, steps, 5))
        for k in range(steps):
            raw = self.decode(mem, mask, tokens).data
            out[:, k] = raw[:, -1]
            if k + 1 < steps:
                nxt = np.concatenate([raw[:, -1:, :2], np.zeros((B, 1, 1))], axis=-1)
                tokens = np.concatenate([tokens, nxt], axis=1)
        return out

    def prior(self, features: np.ndarray, prior: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-step displacements (B, T_pred, 2) the residual is measured from.

        ``prior`` overrides the default, which repeats the window's own Frenet
        step (v_long, v_lat) * dt.  Callers that know the reference path pass the
        exact Frenet image of a Cartesian constant-velocity extrapolation.
        """
        features = np.asarray(features, float)
        shape = features.shape[:-2] + (self.config.T_pred, 2)
        if not self.config.cv_residual:
            return np.zeros(shape)
        if prior is not None:
            prior = np.asarray(prior, float)
            if prior.shape != shape:
                raise ValueError(f"prior shape {prior.shape}, expected {shape}")
            return prior
        # the current frame is always the last (valid) row; columns 1, 2 = v_long, v_lat
        return np.broadcast_to(features[..., -1, None, 1:3] * self.config.dt, shape).copy()

    def normalise_targets(self, features: np.ndarray, targets: np.ndarray,
                          prior: Optional[np.ndarray] = None) -> np.ndarray:
        n = self.normalizer
        return (targets - self.prior(features, prior) - n.disp_mean) / n.disp_std

    def predict_gaussian(self, features: np.ndarray, mask: np.ndarray,
                         prior: Optional[np.ndarray] = None) -> list[GaussianTrajectory]:
        """Raw (un-normalised) windows (B, T, 28) to physical displacement Gaussians."""
        features = np.asarray(features, float)
        mask = np.asarray(mask, bool)
        if features.ndim == 2:
            features, mask = features[None], mask[None]
            prior = None if prior is None else np.asarray(prior)[None]
        x = self.normalizer.features(features, mask)
        raw = self.generate(x, mask)
        prior = self.prior(features, prior)
        return [self.to_physical(r, p) for r, p in zip(raw, prior)]

    def to_physical(self, raw: np.ndarray, prior=0.0) -> GaussianTrajectory:
        n = self.normalizer
        mu = raw[:, :2] * n.disp_std + n.disp_mean + prior
        sigma = np.exp(raw[:, 2:4]) * n.disp_std
        return GaussianTrajectory(mu, sigma, RHO_MAX * np.tanh(raw[:, 4]))

    # -- parameters ----------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))


def split_head(raw: Tensor):
    """(μ_s, μ_d, log σ_s, log σ_d, ρ) tensors from raw head outputs."""
    return raw[..., 0], raw[..., 1], raw[..., 2], raw[..., 3], raw[..., 4].tanh() * RHO_MAX


def nll_loss(raw: Tensor, truth: np.ndarray) -> Tensor:
    """Mean per-step bivariate Gaussian negative log-likelihood.

    σ = exp(raw[..., 2:4]) and ρ = RHO_MAX · tanh(raw[..., 4]).
    """
    truth = np.asarray(truth, float)
    if truth.shape != raw.shape[:-1] + (2,):
        raise ValueError(f"truth shape {truth.shape} does not match predictions {raw.shape}")
    mu_s, mu_d, ls, ld, rho = split_head(raw)
    zs = (truth[..., 0] - mu_s) * (-ls).exp()
    zd = (truth[..., 1] - mu_d) * (-ld).exp()
    one_m = 1.0 - rho.square()
    q = zs.square() + zd.square() - 2.0 * rho * zs * zd
    nll = LOG_2PI + ls + ld + 0.5 * one_m.log() + q / (2.0 * one_m)
    loss = nll.mean()
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss")
    return loss


def gaussian_nll(mu, sigma, rho, truth) -> np.ndarray:
    """Plain numpy per-step NLL (used for reporting)."""
    zs = (truth[..., 0] - mu[..., 0]) / sigma[..., 0]
    zd = (truth[..., 1] - mu[..., 1]) / sigma[..., 1]
    om = 1 - rho * rho
    return (LOG_2PI + np.log(sigma[..., 0] * sigma[..., 1]) + 0.5 * np.log(om)
            + (zs * zs + zd * zd - 2 * rho * zs * zd) / (2 * om))


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: POVLModel, extra: Optional[dict] = None):
    """``.npz`` with one array per named parameter plus a JSON ``__meta__`` entry."""
    meta = {"version": CHECKPOINT_VERSION, "model_config": asdict(model.config),
            "normalizer": model.normalizer.to_dict(), **(extra or {})}
    arrays = {k: v for k, v in model.arrays().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[POVLModel, dict]:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = ModelConfig(**meta["model_config"])
        params = init_params(cfg)
        for k in params:
            if k not in z:
                raise ValueError(f"checkpoint is missing parameter {k}")
            if z[k].shape != params[k].shape:
                raise ValueError(f"parameter {k} has shape {z[k].shape}, expected {params[k].shape}")
            params[k] = Tensor(z[k].astype(float), requires_grad=True, name=k)
    return POVLModel(cfg, params, Normalizer.from_dict(meta["normalizer"])), meta
