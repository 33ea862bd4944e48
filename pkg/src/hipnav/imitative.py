"""Conditional trajectory density q(tau | o).

The context has two parts: a global vector from a feed-forward encoder over
the (downsampled) appearance+height patch and the past positions, and a
per-cell feature map (a learned 1x1 layer over the patch). A step network
then parameterises each future point autoregressively as

    tau_i = 2 tau_{i-1} - tau_{i-2} + residual_i + S_i z_i,   z_i ~ N(0, I)

from the global context, the last few points and map features sampled
bilinearly on a small stencil ahead of tau_{i-1} along the direction of
motion. S_i is lower triangular
with diag(S_i) >= sigma_floor, so that
log q <= H * (-log 2 pi - 2 log sigma_floor) = eta for every input.
Everything is float64 numpy with hand-written gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .config import ModelConfig, TrainConfig, _to_plain, model_config_from_dict
from .nn import Adam, init_dense, mlp_backward, mlp_forward

LOG2PI = math.log(2 * math.pi)
FULL_MASK = (1.0, 1.0, 1.0, 1.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ImitativeModel:
    cfg: ModelConfig
    params: dict
    channel_mask: tuple[float, ...] = FULL_MASK
    train_seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def sigma_floor(self) -> float:
        return self.cfg.sigma_floor

    @property
    def eta(self) -> float:
        return self.cfg.eta

    @property
    def context_dim(self) -> int:
        c = self.cfg
        return c.enc_hidden[-1] + c.patch_cells * c.patch_cells * c.map_channels

    def copy(self) -> "ImitativeModel":
        return ImitativeModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                              self.channel_mask, self.train_seed, dict(self.meta))


def input_dim(cfg: ModelConfig) -> int:
    return cfg.patch_cells * cfg.patch_cells * cfg.channels + 2 * cfg.past


def init_model(cfg: ModelConfig | None = None, seed: int = 0,
               channel_mask=FULL_MASK) -> ImitativeModel:
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    params: dict = {}
    init_dense(rng, [input_dim(cfg), *cfg.enc_hidden], "enc.", params)
    init_dense(rng, [cfg.channels, cfg.map_channels], "map.", params)
    n_local = len(cfg.stencil_forward) * len(cfg.stencil_lateral) * cfg.map_channels
    n_in = cfg.enc_hidden[-1] + 2 * cfg.step_points + n_local
    init_dense(rng, [n_in, cfg.step_hidden, 5], "step.", params, out_scale=0.1)
    # start with per-axis scale ~0.2 m
    params["step.b1"][2:4] = math.log(math.expm1(0.2 - cfg.sigma_floor))
    return ImitativeModel(cfg, params, tuple(float(m) for m in channel_mask))


# ---------------------------------------------------------------- inputs


def downsample_patch(patch, cells: int) -> np.ndarray:
    """Block-average (..., n, n, C) down to (..., cells, cells, C)."""
    p = np.asarray(patch, dtype=float)
    n = p.shape[-2]
    if n == cells:
        return p
    if n % cells:
        raise ValueError(f"patch side {n} is not a multiple of {cells}")
    f = n // cells
    shp = p.shape[:-3] + (cells, f, cells, f, p.shape[-1])
    return p.reshape(shp).mean(axis=(-4, -2))


def encoder_input(model: ImitativeModel, patch, past) -> np.ndarray:
    cfg = model.cfg
    p = np.asarray(patch, dtype=float)
    if p.ndim >= 3 and p.shape[-2] != cfg.patch_cells:
        p = downsample_patch(p, cfg.patch_cells)
    if p.shape[-3:] != (cfg.patch_cells, cfg.patch_cells, cfg.channels):
        raise ValueError(f"patch shape {p.shape} does not match the model's {cfg.patch_cells}x{cfg.patch_cells}x{cfg.channels}")
    past = np.asarray(past, dtype=float)
    if past.shape[-2:] != (cfg.past, 2):
        raise ValueError(f"past_positions shape {past.shape} does not match ({cfg.past}, 2)")
    p = p * np.asarray(model.channel_mask)
    lead = p.shape[:-3]
    return np.concatenate([p.reshape(lead + (-1,)), past.reshape(lead + (-1,))], axis=-1)


def _context(model, x_in):
    cfg = model.cfg
    cc = cfg.patch_cells * cfg.patch_cells
    g, enc_acts = mlp_forward(model.params, "enc.", x_in)
    cells = x_in[..., : cc * cfg.channels].reshape(x_in.shape[:-1] + (cc, cfg.channels))
    fmap, map_acts = mlp_forward(model.params, "map.", cells)
    ctx = np.concatenate([g, fmap.reshape(x_in.shape[:-1] + (-1,))], axis=-1)
    return ctx, (enc_acts, map_acts)


def encode(model: ImitativeModel, observation=None, *, patch=None, past=None) -> np.ndarray:
    """Context vector(s) for an Observation or explicit (patch, past) arrays:
    the global encoding followed by the flattened feature map."""
    if observation is not None:
        patch, past = observation.patch, observation.past_positions
    ctx, _ = _context(model, encoder_input(model, patch, past))
    return ctx


def stencil(cfg: ModelConfig) -> np.ndarray:
    f = np.asarray(cfg.stencil_forward, dtype=float)
    lat = np.asarray(cfg.stencil_lateral, dtype=float)
    return np.stack(np.meshgrid(f, lat, indexing="ij"), axis=-1).reshape(-1, 2)


def bilinear_taps(cfg: ModelConfig, pts):
    """Flattened-cell indices and weights (..., 4) of local points on the
    patch grid. Row index is forward distance, column runs left to right;
    points off the patch clamp to its border."""
    c = cfg.patch_cells
    res = cfg.patch_extent / c
    rf = np.clip(pts[..., 0] / res - 0.5, 0.0, c - 1.0)
    cf = np.clip((cfg.patch_extent / 2 - pts[..., 1]) / res - 0.5, 0.0, c - 1.0)
    # a diverged network must surface as a non-finite loss, not a bad index
    rf, cf = np.nan_to_num(rf), np.nan_to_num(cf)
    r0 = np.minimum(np.floor(rf).astype(np.int64), c - 2)
    c0 = np.minimum(np.floor(cf).astype(np.int64), c - 2)
    tr, tc = rf - r0, cf - c0
    base = r0 * c + c0
    idx = np.stack([base, base + 1, base + c, base + c + 1], axis=-1)
    w = np.stack([(1 - tr) * (1 - tc), (1 - tr) * tc, tr * (1 - tc), tr * tc], axis=-1)
    return idx, w


def stencil_points(cfg: ModelConfig, prev1, prev2):
    """Stencil positions (..., S, 2) laid out along the current direction of
    motion prev1 - prev2. A small bias toward +x keeps the frame defined
    (and smooth) when the robot is stationary."""
    d = prev1 - prev2
    d = d + np.array([0.02, 0.0])
    u = d / np.linalg.norm(d, axis=-1, keepdims=True)
    n = np.stack([-u[..., 1], u[..., 0]], axis=-1)
    off = stencil(cfg)
    return prev1[..., None, :] + off[:, 0, None] * u[..., None, :] + off[:, 1, None] * n[..., None, :]


def _sample_map(model, fmap, prev1, prev2):
    """Map features on the stencil at each step; fmap is (L, cc, F), prev1
    and prev2 are (L, H, 2). Returns (L, H, S*F) and the taps."""
    idx, w = bilinear_taps(model.cfg, stencil_points(model.cfg, prev1, prev2))  # (L, H, S, 4)
    L, H, S = idx.shape[:3]
    vals = np.take_along_axis(fmap, idx.reshape(L, -1, 1), axis=1).reshape(L, H, S, 4, -1)
    local = (vals * w[..., None]).sum(axis=-2)
    return local.reshape(L, H, -1), (idx, w)


# ---------------------------------------------------------------- density


def _prev_points(tau, past, count: int):
    """(..., H, count, 2): for every step i the points x_{i-1}, x_{i-2}, ...
    taken from tau and, before it starts, from the past (last row = x_0)."""
    past = np.asarray(past, dtype=float)
    full = np.concatenate([past[..., -count:, :], tau[..., :-1, :]], axis=-2)
    H = tau.shape[-2]
    # column j holds x_{i-1-j}
    return np.stack([full[..., count - 1 - j: count - 1 - j + H, :] for j in range(count)], axis=-2)


def _step_params(model, ctx, prev):
    """Run the step network; returns mean, (s11, s21, s22) and the cache for backprop.

    ``ctx`` has shape lead + (D,) and ``prev`` lead + (H, P, 2) with
    prev[..., 0, :] = x_{i-1}.
    """
    prev1, prev2 = prev[..., 0, :], prev[..., 1, :]
    cfg = model.cfg
    G = cfg.enc_hidden[-1]
    lead = prev1.shape[:-2]
    H = prev1.shape[-2]
    ctx = np.broadcast_to(ctx, lead + ctx.shape[-1:])
    fmap = ctx[..., G:].reshape((-1, cfg.patch_cells * cfg.patch_cells, cfg.map_channels))
    local, taps = _sample_map(model, fmap, prev1.reshape(-1, H, 2), prev2.reshape(-1, H, 2))
    g = np.broadcast_to(ctx[..., None, :G], lead + (H, G))
    s_in = np.concatenate([g, prev.reshape(lead + (H, -1)), local.reshape(lead + (H, -1))], axis=-1)
    out, acts = mlp_forward(model.params, "step.", s_in, final_tanh=False)
    sf = model.sigma_floor
    res = out[..., 0:2]
    mean = 2.0 * prev1 - prev2 + res
    raw = out[..., 2:4]
    diag = sf + np.logaddexp(0.0, raw)
    s11, s22 = diag[..., 0], diag[..., 1]
    s21 = out[..., 4]
    return mean, (s11, s21, s22), (acts, raw, taps)


def _gauss_terms(tau, mean, S):
    s11, s21, s22 = S
    r = tau - mean
    y1 = r[..., 0] / s11
    y2 = (r[..., 1] - s21 * y1) / s22
    logp = -LOG2PI - np.log(s11) - np.log(s22) - 0.5 * (y1 * y1 + y2 * y2)
    return logp, (y1, y2)


def step_log_probs(model: ImitativeModel, context, tau, past) -> np.ndarray:
    """Per-step log densities, shape (..., H)."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape[-2:] != (model.cfg.horizon, 2):
        raise ValueError(f"trajectory must have shape (..., {model.cfg.horizon}, 2)")
    if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(context)) and np.all(np.isfinite(past))):
        raise ValueError("non-finite input to log_prob")
    context = np.asarray(context, dtype=float)
    past = np.asarray(past, dtype=float)
    lead = np.broadcast_shapes(context.shape[:-1], tau.shape[:-2], past.shape[:-2])
    tau = np.broadcast_to(tau, lead + tau.shape[-2:])
    past = np.broadcast_to(past, lead + past.shape[-2:])
    context = np.broadcast_to(context, lead + context.shape[-1:])
    prev = _prev_points(tau, past, model.cfg.step_points)
    mean, S, _ = _step_params(model, context, prev)
    logp, _ = _gauss_terms(tau, mean, S)
    return logp


def log_prob(model: ImitativeModel, context, tau, past) -> np.ndarray | float:
    """log q(tau | o) in nats; ``past`` supplies the anchor points x_0, x_-1, ..."""
    lp = step_log_probs(model, context, tau, past).sum(axis=-1)
    return float(lp) if np.ndim(lp) == 0 else lp


def mean_rollout(model: ImitativeModel, context, past) -> np.ndarray:
    """The trajectory obtained with all noise set to zero."""
    return sample(model, context, past, z=np.zeros((model.cfg.horizon, 2)))[0]


def sample(model: ImitativeModel, context, past, rng=None, z=None):
    """Draw trajectories by pushing standard-normal noise through the flow.

    Returns (tau, log_q) where log_q is accumulated by change of variables
    during sampling. ``z`` has shape (..., H, 2); if omitted it is drawn
    from ``rng`` with shape (H, 2).
    """
    H = model.cfg.horizon
    if z is None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal((H, 2))
    z = np.asarray(z, dtype=float)
    context = np.asarray(context, dtype=float)
    lead = np.broadcast_shapes(z.shape[:-2], context.shape[:-1], np.asarray(past).shape[:-2])
    P = model.cfg.step_points
    past = np.broadcast_to(np.asarray(past, dtype=float), lead + np.asarray(past).shape[-2:])
    recent = [past[..., -1 - j, :] for j in range(P)]  # x_{i-1}, x_{i-2}, ...
    ctx = np.broadcast_to(context, lead + context.shape[-1:])
    z = np.broadcast_to(z, lead + (H, 2))
    tau = np.empty(lead + (H, 2))
    logq = np.zeros(lead)
    for i in range(H):
        prev = np.stack(recent, axis=-2)[..., None, :, :]
        mean, (s11, s21, s22), _ = _step_params(model, ctx, prev)
        mean, s11, s21, s22 = mean[..., 0, :], s11[..., 0], s21[..., 0], s22[..., 0]
        zi = z[..., i, :]
        xi = np.stack([mean[..., 0] + s11 * zi[..., 0], mean[..., 1] + s21 * zi[..., 0] + s22 * zi[..., 1]], axis=-1)
        logq += -LOG2PI - np.log(s11) - np.log(s22) - 0.5 * (zi[..., 0] ** 2 + zi[..., 1] ** 2)
        tau[..., i, :] = xi
        recent = [xi] + recent[:-1]
    return tau, logq


# ---------------------------------------------------------------- gradients


def loss_and_grad(model: ImitativeModel, x_in, tau, past):
    """Mean negative log-likelihood over a batch and its parameter gradients.

    ``x_in`` is the flattened encoder input (B, D), ``tau`` (B, H, 2) and
    ``past`` (B, H_past, 2).
    """
    params = model.params
    cfg = model.cfg
    B = tau.shape[0]
    ctx, (enc_acts, map_acts) = _context(model, x_in)
    prev = _prev_points(tau, past, cfg.step_points)
    mean, (s11, s21, s22), (step_acts, raw, (idx, wts)) = _step_params(model, ctx, prev)
    logp, (y1, y2) = _gauss_terms(tau, mean, (s11, s21, s22))
    loss = -logp.sum(axis=-1).mean()

    w = 1.0 / B
    # d(-logp)/d(y) = y; then through the triangular solve
    gy2 = y2 * w
    gy1 = (y1 - y2 * s21 / s22) * w
    g_r1 = gy1 / s11
    g_r2 = gy2 / s22
    g_s11 = w / s11 - gy1 * y1 / s11
    g_s22 = w / s22 - gy2 * y2 / s22
    g_s21 = -gy2 * y1 / s22
    sig = 1.0 / (1.0 + np.exp(-raw))
    g_out = np.stack([-g_r1, -g_r2, g_s11 * sig[..., 0], g_s22 * sig[..., 1], g_s21], axis=-1)

    grads: dict = {}
    g_sin = mlp_backward(params, "step.", step_acts, g_out, grads, final_tanh=False)
    G = cfg.enc_hidden[-1]
    mlp_backward(params, "enc.", enc_acts, g_sin[..., :G].sum(axis=-2), grads)
    # scatter the stencil gradients back onto the feature-map cells
    F = cfg.map_channels
    H, S = idx.shape[1], idx.shape[2]
    g_local = g_sin[..., G + 2 * cfg.step_points:].reshape(B, H, S, 1, F) * wts[..., None]
    g_map = np.zeros((B, cfg.patch_cells * cfg.patch_cells, F))
    np.add.at(g_map, (np.arange(B)[:, None], idx.reshape(B, -1)), g_local.reshape(B, -1, F))
    mlp_backward(params, "map.", map_acts, g_map, grads)
    return loss, grads


def _loss_only(model, x_in, tau, past):
    ctx, _ = _context(model, x_in)
    prev = _prev_points(tau, past, model.cfg.step_points)
    mean, S, _ = _step_params(model, ctx, prev)
    logp, _ = _gauss_terms(tau, mean, S)
    return -logp.sum(axis=-1).mean()


def relative_error(a, n, floor=1e-4):
    a = np.asarray(a)
    n = np.asarray(n)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def numeric_grad(model: ImitativeModel, x_in, tau, past, h=1e-5) -> dict:
    out = {}
    for k in sorted(model.params):
        p = model.params[k]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            lp = _loss_only(model, x_in, tau, past)
            flat[j] = old - h
            lm = _loss_only(model, x_in, tau, past)
            flat[j] = old
            gf[j] = (lp - lm) / (2 * h)
        out[k] = g
    return out


# small enough that central differences over every parameter stay well under a
# second; the stencil is pinned so the check does not grow with the default
GRADCHECK_CONFIG = ModelConfig(patch_cells=2, enc_hidden=(8, 8), step_hidden=8, map_channels=2,
                               stencil_forward=(0.5, 1.0), stencil_lateral=(-0.4, 0.4))


def random_check_case(seed: int, cfg: ModelConfig = GRADCHECK_CONFIG):
    """A randomly initialised (and jittered) small model and one example."""
    rng = np.random.default_rng(seed)
    model = init_model(cfg, int(rng.integers(2**31)))
    for k in sorted(model.params):
        model.params[k] = model.params[k] + rng.normal(0.0, 0.1, model.params[k].shape)
    patch = rng.uniform(0.0, 1.0, (cfg.patch_cells, cfg.patch_cells, cfg.channels))
    past = np.cumsum(rng.normal(0.0, 0.2, (cfg.past, 2)), axis=0)
    past -= past[-1]
    tau = np.cumsum(rng.normal(0.2, 0.2, (cfg.horizon, 2)), axis=0)
    return model, (patch, past, tau)


def grad_check(model: ImitativeModel, example, h: float = 1e-5, return_grads: bool = False):
    """Max relative error between analytic and central-difference gradients of -log q.

    ``example`` is a (patch, past, tau) triple for a single example.
    """
    patch, past, tau = example
    x_in = encoder_input(model, patch, past)[None]
    tau = np.asarray(tau, dtype=float)[None]
    past = np.asarray(past, dtype=float)[None]
    _, ga = loss_and_grad(model, x_in, tau, past)
    gn = numeric_grad(model, x_in, tau, past, h)
    err = max(float(relative_error(ga[k], gn[k]).max()) for k in ga)
    if return_grads:
        return err, ga, gn
    return err


# ---------------------------------------------------------------- training


def mirror_examples(patches, past, future):
    """Append left-right mirrored copies: y -> -y and patch columns reversed."""
    flip = np.array([1.0, -1.0])
    return (np.concatenate([patches, patches[:, :, ::-1, :]]),
            np.concatenate([past, past * flip]),
            np.concatenate([future, future * flip]))


def train(dataset, config: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
          channel_mask=FULL_MASK, init: ImitativeModel | None = None, log=None):
    """Maximum-likelihood fit on perturbed future positions.

    Each epoch draws fresh Gaussian noise of scale ``perturbation_sigma`` on
    the targets and takes minibatch Adam steps on the mean negative
    log-likelihood. With ``config.mirror`` the mirrored copy of every example
    joins the training set. Returns (model, per-epoch mean losses).
    """
    config = config or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    model = init.copy() if init is not None else init_model(model_cfg, int(rng.integers(2**31)), channel_mask)
    model.train_seed = config.seed
    patches, past, fut = dataset.patches, dataset.past, dataset.future
    if config.mirror:
        patches, past, fut = mirror_examples(patches, past, fut)
        n = len(fut)
    x_all = encoder_input(model, patches, past).astype(np.float32)
    opt = Adam(model.params, lr=config.learning_rate)
    losses = []
    B = config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        noisy = fut + rng.normal(0.0, config.perturbation_sigma, fut.shape)
        total, count = 0.0, 0
        for s in range(0, n, B):
            idx = order[s:s + B]
            loss, grads = loss_and_grad(model, x_all[idx], noisy[idx], past[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.step(model.params, grads)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        if log is not None:
            log(f"epoch {epoch}: nll {losses[-1]:.3f}")
    return model, losses


def dataset_nll(model: ImitativeModel, dataset, batch: int = 4096) -> float:
    """Mean negative log-likelihood of unperturbed futures."""
    tot = 0.0
    for s in range(0, len(dataset), batch):
        sl = slice(s, s + batch)
        x = encoder_input(model, dataset.patches[sl], dataset.past[sl])
        tot += _loss_only(model, x, dataset.future[sl], dataset.past[sl]) * len(dataset.future[sl])
    return tot / len(dataset)


# ---------------------------------------------------------------- persistence

MODEL_SCHEMA = "hipnav.model"
FORMAT_VERSION = 1


def save_params(path, schema: str, model, extra_header: dict | None = None) -> None:
    header = {
        "model": _to_plain(model.cfg),
        "channel_mask": list(model.channel_mask),
        "train_seed": model.train_seed,
        "sigma_floor": model.cfg.sigma_floor,
        "eta": model.cfg.eta,
        "meta": model.meta,
    }
    header.update(extra_header or {})
    fileio.write_binary(path, schema, FORMAT_VERSION, header, model.params)


def load_params(path, schema: str):
    """(ModelConfig, params, header) from a checkpoint written by save_params."""
    header, params = fileio.read_binary(path, schema, FORMAT_VERSION)
    cfg = model_config_from_dict(header["model"])
    return cfg, {k: v.astype(float) for k, v in params.items()}, header


def save_model(path, model: ImitativeModel, extra_header: dict | None = None) -> None:
    save_params(path, MODEL_SCHEMA, model, extra_header)


def load_model(path) -> ImitativeModel:
    cfg, params, h = load_params(path, MODEL_SCHEMA)
    return ImitativeModel(cfg, params, tuple(h["channel_mask"]), h["train_seed"], dict(h.get("meta", {})))
