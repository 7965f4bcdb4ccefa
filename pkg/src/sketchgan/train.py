"""Adversarial training: losses, Adam and the alternating update loop."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn, ops
from .tensor import DimensionError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
LOSS_COLUMNS = ("iteration", "j_d", "j_g", "mean_d_real", "mean_d_fake")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    k: int = 1
    dz: int = 2
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end
    generator_loss: str = "non_saturating"  # or "minimax": minimise log(1 - D(G(z)))
    init_std: float = nn.INIT_STD
    bn_momentum: float = ops.BN_MOMENTUM
    bn_eps: float = ops.BN_EPS

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.k < 1 or self.dz < 1:
            raise ValueError("batch_size, k and dz must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.generator_loss not in ("non_saturating", "minimax"):
            raise ValueError(f"unknown generator_loss {self.generator_loss!r}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values (config file or CLI), coercing each field's type."""
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            t = types[key]
            kwargs[key] = int(raw) if t == "int" else float(raw) if t == "float" else str(raw)
        return cls(**kwargs)

    def to_lines(self) -> list:
        return [f"{k}={v}" for k, v in dataclasses.asdict(self).items()]


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class LossRecord:
    iteration: int
    j_d: float
    j_g: float
    mean_d_real: float
    mean_d_fake: float

    def row(self) -> list:
        return [str(self.iteration)] + [repr(float(v)) for v in
                                        (self.j_d, self.j_g, self.mean_d_real, self.mean_d_fake)]


def sample_latent(m: int, dz: int, rng: np.random.Generator) -> Tensor:
    """Latent batch z ~ U[0, 1), shape (m, dz)."""
    if m < 1 or dz < 1:
        raise ValueError("m and dz must be >= 1")
    return Tensor(rng.random((m, dz)))


def _check_probs(t: Tensor) -> None:
    v = t.values
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ValueError("discriminator outputs must lie in [0, 1]")


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """J_D = -(1/2m) * (sum log D(x) + sum log(1 - D(G(z))))."""
    if d_real.size != d_fake.size:
        raise DimensionError("real and fake batches must have equal size", axis="batch")
    _check_probs(d_real)
    _check_probs(d_fake)
    m = d_real.size
    total = ops.add(ops.sum(ops.clamped_log(d_real, LOG_CLAMP, 1 - LOG_CLAMP)),
                    ops.sum(ops.clamped_log1m(d_fake, LOG_CLAMP, 1 - LOG_CLAMP)))
    return ops.scale(total, -1.0 / (2 * m))


def generator_loss(d_fake: Tensor, form: str = "non_saturating") -> Tensor:
    """J_G = -(1/m) sum log D(G(z)); ``form="minimax"`` gives (1/m) sum log(1 - D(G(z)))."""
    _check_probs(d_fake)
    m = d_fake.size
    if form == "minimax":
        return ops.scale(ops.sum(ops.clamped_log1m(d_fake, LOG_CLAMP, 1 - LOG_CLAMP)), 1.0 / m)
    return ops.scale(ops.sum(ops.clamped_log(d_fake, LOG_CLAMP, 1 - LOG_CLAMP)), -1.0 / m)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 0.002,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, applied in place to ``params`` (name -> ndarray or Tensor)."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        values = p.values if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(values)
        if values.shape != np.shape(g):
            raise DimensionError(f"{name}: grad shape {np.shape(g)} != param shape {values.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(values)
            state.v[name] = np.zeros_like(values)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


@contextlib.contextmanager
def frozen(model: nn.Model):
    """Temporarily stop gradient flow into ``model``'s parameters."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]


class TrainSink:
    """Receives loss records and checkpoints; the default does nothing."""

    def record(self, rec: LossRecord) -> None:
        pass

    def checkpoint(self, iteration: int, g: nn.Model, d: nn.Model, tag: str = "") -> None:
        pass

    def close(self) -> None:
        pass


class DirectorySink(TrainSink):
    """Writes ``losses.csv`` and ``generator.ckpt`` / ``discriminator.ckpt`` into a directory."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.out_dir / "losses.csv", "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(LOSS_COLUMNS)

    def record(self, rec: LossRecord) -> None:
        self._csv.writerow(rec.row())

    def checkpoint(self, iteration: int, g: nn.Model, d: nn.Model, tag: str = "") -> None:
        suffix = f".{tag}" if tag else ""
        nn.save_checkpoint(g, self.out_dir / f"generator{suffix}.ckpt")
        nn.save_checkpoint(d, self.out_dir / f"discriminator{suffix}.ckpt")

    def close(self) -> None:
        self._fh.close()


@dataclass
class TrainResult:
    g: nn.Model
    d: nn.Model
    history: list
    g_state: AdamState
    d_state: AdamState


def _grads(model: nn.Model) -> dict:
    return {k: p.grad for k, p in model.params.items()}


def train(dataset, g: nn.Model, d: nn.Model, cfg: TrainConfig, sink: Optional[TrainSink] = None) -> TrainResult:
    """Alternate ``cfg.k`` discriminator updates with one generator update, ``cfg.iterations`` times.

    Each discriminator update draws a fresh data batch (uniform, with
    replacement) and a fresh latent batch; the generator update draws its own
    latent batch.  No convergence test is applied.
    """
    sink = sink or TrainSink()
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} samples, fewer than batch size {cfg.batch_size}")
    if g.spec.is_discriminator or not d.spec.is_discriminator:
        raise ValueError("expected a (generator, discriminator) pair")
    rng = np.random.default_rng(cfg.seed)
    g_state, d_state = AdamState(), AdamState()
    history = []
    m = cfg.batch_size
    adam = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    for it in range(1, cfg.iterations + 1):
        for _ in range(cfg.k):
            z = sample_latent(m, cfg.dz, rng)
            x = dataset.sample(m, rng)
            with no_grad():
                fake = g.forward(z, "train")
            d.zero_grad()
            d_real = d.forward(x, "train")
            d_fake = d.forward(fake, "train")
            j_d = discriminator_loss(d_real, d_fake)
            backward(j_d)
            adam_step(d.params, _grads(d), d_state, **adam)

        z = sample_latent(m, cfg.dz, rng)
        g.zero_grad()
        with frozen(d):
            d_gz = d.forward(g.forward(z, "train"), "train")
            j_g = generator_loss(d_gz, cfg.generator_loss)
            backward(j_g)
        adam_step(g.params, _grads(g), g_state, **adam)

        rec = LossRecord(it, j_d.item(), j_g.item(), float(d_real.values.mean()), float(d_fake.values.mean()))
        history.append(rec)
        sink.record(rec)
        if not (math.isfinite(rec.j_d) and math.isfinite(rec.j_g)):
            sink.checkpoint(it, g, d, tag="diagnostic")
            sink.close()
            raise NonFiniteLossError(f"non-finite loss at iteration {it}: J_D={rec.j_d} J_G={rec.j_g}")
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it != cfg.iterations:
            sink.checkpoint(it, g, d, tag=f"it{it:05d}")
        if it % 50 == 0 or it == 1:
            log.info("iter %d  J_D=%.4f  J_G=%.4f  D(x)=%.3f  D(G(z))=%.3f",
                     it, rec.j_d, rec.j_g, rec.mean_d_real, rec.mean_d_fake)

    sink.checkpoint(cfg.iterations, g, d)
    sink.close()
    return TrainResult(g, d, history, g_state, d_state)


def build_pair(arch: str, cfg: TrainConfig) -> tuple:
    """Generator and discriminator for ``arch`` ("sketch" or "thin"), seeded from ``cfg``."""
    if arch not in nn.ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    gspec, dspec = nn.ARCHITECTURES[arch]
    g = nn.build_model(gspec(cfg.dz), cfg.seed, cfg.init_std, cfg.bn_momentum, cfg.bn_eps)
    d = nn.build_model(dspec(), cfg.seed + 1, cfg.init_std, cfg.bn_momentum, cfg.bn_eps)
    return g, d
