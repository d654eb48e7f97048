"""Adversarial training of the segmentation generator against a patch discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from . import network as N
from . import tensor as T


LOG_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    # generator Adam; the large epsilon keeps Adam from inflating the tiny
    # gradients of saturated tanh outputs into a runaway all-background solution
    learning_rate: float = 1e-3
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-2
    disc_learning_rate: float = 2e-4
    disc_adam_epsilon: float = 1e-8
    l1_weight: float = 100.0
    seed: int = 1
    profile_name: str = "desk-32"
    checkpoint_interval: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("learning_rate", "disc_learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.adam_epsilon <= 0 or self.disc_adam_epsilon <= 0:
            raise ValueError("Adam epsilons must be > 0")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


# --- losses ---------------------------------------------------------------

def _clamped_log(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log(max(x, LOG_CLAMP)) and its derivative (zero where clamped)."""
    floor = x.dtype.type(LOG_CLAMP)
    live = x > floor
    safe = np.where(live, x, floor)
    return np.log(safe), np.where(live, 1 / safe, 0).astype(x.dtype, copy=False)


def discriminator_loss(d_real: np.ndarray, d_fake: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of -[log D(real) + log(1 - D(fake))] and its gradients w.r.t. both inputs."""
    if d_real.shape != d_fake.shape:
        raise T.ShapeError(f"discriminator outputs disagree: {d_real.shape} vs {d_fake.shape}")
    count = d_real.size
    log_r, dlog_r = _clamped_log(d_real)
    log_f, dlog_f = _clamped_log(1 - d_fake)
    loss = -(np.sum(log_r, dtype=np.float64) + np.sum(log_f, dtype=np.float64)) / count
    grad_real = -dlog_r / count
    grad_fake = dlog_f / count
    return float(loss), grad_real, grad_fake


def generator_loss(d_fake: np.ndarray, fake_mask: np.ndarray, true_mask: np.ndarray, l1_weight: float
                   ) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Non-saturating adversarial term -log D(fake) plus a weighted L1 term.

    Returns (adversarial loss, L1 loss, d/d d_fake, d/d fake_mask); the total
    objective is adversarial + l1_weight * L1.
    """
    if fake_mask.shape != true_mask.shape:
        raise T.ShapeError(f"mask shapes disagree: {fake_mask.shape} vs {true_mask.shape}")
    log_f, dlog_f = _clamped_log(d_fake)
    adv = -np.sum(log_f, dtype=np.float64) / d_fake.size
    diff = fake_mask - true_mask
    l1 = np.sum(np.abs(diff), dtype=np.float64) / diff.size
    grad_d = -dlog_f / d_fake.size
    grad_mask = np.sign(diff) * diff.dtype.type(l1_weight / diff.size)
    return float(adv), float(l1), grad_d, grad_mask


# --- Adam -----------------------------------------------------------------

@numba.njit(error_model="numpy", fastmath=True, cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(p.size):
        gi = g[i]
        mi = m[i]
        vi = v[i]
        if gi == 0 and mi == 0 and vi == 0:
            # the update would be exactly zero
            continue
        mi = b1 * mi + (1 - b1) * gi
        vi = b2 * vi + (1 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: N.ParamStore, grads: N.ParamStore, state: OptimizerState,
              config: TrainConfig) -> tuple[N.ParamStore, OptimizerState]:
    """One bias-corrected Adam update, applied in place to `params`.

    Discriminator parameters use the disc_* learning rate and epsilon.
    """
    if params.role == "discriminator":
        lr, eps = config.disc_learning_rate, config.disc_adam_epsilon
    else:
        lr, eps = config.learning_rate, config.adam_epsilon
    grad_map = dict(grads.items())
    named = list(params.items())
    for name, p in named:
        g = grad_map.get(name)
        if g is None or g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} missing or mis-shaped")
        # cheap screen first; the elementwise check only runs when the sum is off
        if not math.isfinite(float(np.sum(g))) and not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in {name}")
    state.step += 1
    f32 = np.float32
    b1, b2 = f32(config.adam_beta1), f32(config.adam_beta2)
    bc1 = f32(1 - config.adam_beta1 ** state.step)
    bc2 = f32(1 - config.adam_beta2 ** state.step)
    for name, p in named:
        if name not in state.first:
            state.first[name] = np.zeros_like(p)
            state.second[name] = np.zeros_like(p)
        g = np.ascontiguousarray(grad_map[name], dtype=p.dtype)
        _adam_kernel(p.reshape(-1), g.reshape(-1), state.first[name].reshape(-1),
                     state.second[name].reshape(-1), f32(lr), b1, b2, f32(eps), bc1, bc2)
    return params, state


# --- loop -----------------------------------------------------------------

@dataclass
class LossReport:
    rows: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    def add(self, epoch, step, d_loss, g_adv, g_l1):
        self.rows.append((epoch, step, d_loss, g_adv, g_l1))

    def epoch_means(self) -> dict[int, tuple[float, float, float]]:
        out = {}
        for epoch in sorted({r[0] for r in self.rows}):
            sel = np.array([r[2:] for r in self.rows if r[0] == epoch])
            out[epoch] = tuple(float(v) for v in sel.mean(axis=0))
        return out

    def to_csv(self) -> str:
        lines = ["epoch,step,d_loss,g_adv,g_l1"]
        lines += [f"{e},{s},{d!r},{a!r},{l!r}" for e, s, d, a, l in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    generator: tuple[N.NetworkSpec, N.ParamStore]
    discriminator: tuple[N.NetworkSpec, N.ParamStore]
    losses: LossReport


def _save_all(run_dir: Path, gen, disc, losses: LossReport) -> None:
    N.save_checkpoint(*gen, run_dir / "gen.ckpt")
    N.save_checkpoint(*disc, run_dir / "disc.ckpt")
    (run_dir / "loss.csv").write_text(losses.to_csv())


def train(images: np.ndarray, masks: np.ndarray, config: TrainConfig, run_dir=None,
          progress=None) -> TrainResult:
    """Alternate one discriminator and one generator Adam step per batch.

    `images` is (n, 3, h, w) in [-1, 1], `masks` (n, 1, h, w) in {-1, +1}.
    With `run_dir`, checkpoints and the loss log are written every
    `checkpoint_interval` epochs and at the end; a diverging run raises
    TrainingDivergedError and leaves the last written checkpoints alone.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    gen_spec = N.build_generator(config.profile_name)
    disc_spec = N.build_discriminator(config.profile_name)
    expected = (3, *gen_spec.input_size)
    if images.shape[1:] != expected or masks.shape != (len(images), 1, *gen_spec.input_size):
        raise T.ShapeError(f"profile {config.profile_name} needs images (n, {expected}) and masks "
                           f"(n, 1, {gen_spec.input_size}); got {images.shape} and {masks.shape}")
    images = np.ascontiguousarray(images, dtype=np.float32)
    masks = np.ascontiguousarray(masks, dtype=np.float32)
    gen_params = N.init_params(gen_spec, config.seed)
    disc_params = N.init_params(disc_spec, config.seed)
    gen_opt, disc_opt = OptimizerState(), OptimizerState()
    rng = np.random.Generator(np.random.PCG64([config.seed, 2]))
    losses = LossReport()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, m = images[idx], masks[idx]
            step += 1
            d_loss, g_adv, g_l1 = _train_step(gen_spec, gen_params, disc_spec, disc_params,
                                              gen_opt, disc_opt, x, m, config)
            losses.add(epoch, step, d_loss, g_adv, g_l1)
        if progress is not None:
            progress(epoch, losses.epoch_means()[epoch])
        if run_dir is not None and (epoch % config.checkpoint_interval == 0 or epoch == config.epochs):
            _save_all(run_dir, (gen_spec, gen_params), (disc_spec, disc_params), losses)
    return TrainResult((gen_spec, gen_params), (disc_spec, disc_params), losses)


def _train_step(gen_spec, gen_params, disc_spec, disc_params, gen_opt, disc_opt, x, m, config):
    n = len(x)
    fake, gen_cache = N.forward(gen_spec, gen_params, x)

    # discriminator: real and fake pairs share one batched pass
    pairs = np.concatenate([T.concat_channels(x, m), T.concat_channels(x, fake)], axis=0)
    d_out, d_cache = N.forward(disc_spec, disc_params, pairs)
    d_loss, g_real, g_fake = discriminator_loss(d_out[:n], d_out[n:])
    d_grads, _ = N.backward(disc_spec, disc_params, d_cache, np.concatenate([g_real, g_fake]))

    # generator: judged by the freshly updated discriminator
    fake_pairs = T.concat_channels(x, fake)
    _check_finite(d_loss, "discriminator loss")
    adam_step(disc_params, d_grads, disc_opt, config)
    d_fake, fake_cache = N.forward(disc_spec, disc_params, fake_pairs)
    g_adv, g_l1, grad_d, grad_l1 = generator_loss(d_fake, fake, m, config.l1_weight)
    _check_finite(g_adv + config.l1_weight * g_l1, "generator loss")
    _, grad_pairs = N.backward(disc_spec, disc_params, fake_cache, grad_d,
                               need_input_grad=True, need_param_grads=False)
    _, grad_fake = T.split_channels(grad_pairs, 3)
    g_grads, _ = N.backward(gen_spec, gen_params, gen_cache, grad_fake + grad_l1)
    adam_step(gen_params, g_grads, gen_opt, config)
    return d_loss, g_adv, g_l1


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value}")
