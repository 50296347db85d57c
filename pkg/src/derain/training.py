"""Alternating discriminator / generator training with an L1 reconstruction term."""
from __future__ import annotations

import io
import json
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import AlignedPair, DatasetSplit
from .errors import ConfigInvalid, IoFailure, NonFiniteLoss, ShapeMismatch
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    check_dims,
    generator_forward,
    load_state_arrays,
    read_archive,
    state_arrays,
    to_tensor,
    write_archive,
)

CHECKPOINT_FORMAT = "derain-ckpt/1"
U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 34
    batch_size: int = 1
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    l1_weight: float = 100.0
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigInvalid("learning_rate must be positive")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ConfigInvalid("Adam betas must lie in [0, 1)")
        if self.l1_weight < 0:
            raise ConfigInvalid("l1_weight must be non-negative")


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed) & U64, *keys])
    return int(ss.generate_state(1, np.uint64)[0])


# --- losses --------------------------------------------------------------------

def softplus(x: torch.Tensor) -> torch.Tensor:
    """log(1 + e^x) without overflow: max(x, 0) + log1p(e^-|x|)."""
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def discriminator_loss(real_logits, fake_logits):
    """Binary cross-entropy pushing real patches to 1 and fake patches to 0.

    Accepts tensors (returns a tensor) or arrays (returns a float).
    """
    real, is_t = _as_tensor(real_logits)
    fake, _ = _as_tensor(fake_logits)
    if real.shape != fake.shape:
        raise ShapeMismatch(f"logit grids differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    loss = 0.5 * (softplus(-real).mean() + softplus(fake).mean())
    return loss if is_t else float(loss)


def generator_loss(fake_logits, predicted, target, l1_weight: float):
    """Non-saturating adversarial loss plus weighted L1; returns (total, adv, l1)."""
    fake, is_t = _as_tensor(fake_logits)
    pred, _ = _as_tensor(predicted)
    tgt, _ = _as_tensor(target)
    if pred.shape != tgt.shape:
        raise ShapeMismatch(f"predicted {tuple(pred.shape)} vs target {tuple(tgt.shape)}")
    adv = softplus(-fake).mean()
    l1 = l1_distance(pred, tgt)
    total = adv + l1_weight * l1
    if is_t:
        return total, adv, l1
    return float(total), float(adv), float(l1)


def l1_distance(a, b):
    """Mean absolute difference; symmetric in its arguments."""
    return torch.abs(a - b).mean()


# --- state ---------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    d_loss: float
    g_adv: float
    l1_train: float
    l1_val: float | None

    def __post_init__(self):
        for name in ("d_loss", "g_adv", "l1_train", "l1_val"):
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise NonFiniteLoss(f"epoch {self.epoch}: {name} = {v}")


@dataclass
class TrainState:
    """Everything needed to resume training: networks, optimiser moments, rng, history."""

    config: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list[EpochMetrics] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_checkpoint(self, buf)
        return buf.getvalue()

    def clone(self) -> "TrainState":
        return load_checkpoint(io.BytesIO(self.to_bytes()))


def _adam(module: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        module.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), foreach=False
    )


def init_state(
    config: TrainConfig,
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    meta: dict | None = None,
) -> TrainState:
    config.validate()
    if tuple(gen_config.input_dims) != tuple(disc_config.input_dims):
        raise ConfigInvalid("generator and discriminator must share input dims")
    gen = build_generator(gen_config, derive_seed(config.seed, 1))
    disc = build_discriminator(disc_config, derive_seed(config.seed, 2))
    rng = torch.Generator().manual_seed(derive_seed(config.seed, 3) & 0x7FFFFFFFFFFFFFFF)
    gen.rng = rng
    return TrainState(config, gen, disc, _adam(gen, config), _adam(disc, config), rng, meta=dict(meta or {}))


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return out


def _load_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(state: TrainState, path) -> None:
    """Write a checkpoint archive to a path or binary file object."""
    arrays = {}
    arrays.update(state_arrays(state.generator, "generator/"))
    arrays.update(state_arrays(state.discriminator, "discriminator/"))
    arrays.update(_optimizer_arrays(state.opt_g, "opt_g"))
    arrays.update(_optimizer_arrays(state.opt_d, "opt_d"))
    arrays["rng"] = state.rng.get_state().numpy().copy()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": state.epoch,
        "step": state.step,
        "train_config": asdict(state.config),
        "generator_config": asdict(state.generator.config),
        "discriminator_config": asdict(state.discriminator.config),
        "history": [asdict(m) for m in state.history],
        "meta": state.meta,
    }
    write_archive(path, arrays, manifest)


def load_checkpoint(path) -> TrainState:
    arrays, manifest = read_archive(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise IoFailure(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = TrainConfig(**manifest["train_config"])
    gcfg = dict(manifest["generator_config"])
    gcfg["input_dims"] = tuple(gcfg["input_dims"])
    dcfg = dict(manifest["discriminator_config"])
    dcfg["input_dims"] = tuple(dcfg["input_dims"])
    gen = Generator(GeneratorConfig(**gcfg))
    disc = Discriminator(DiscriminatorConfig(**dcfg))
    load_state_arrays(gen, arrays, "generator/")
    load_state_arrays(disc, arrays, "discriminator/")
    opt_g, opt_d = _adam(gen, cfg), _adam(disc, cfg)
    _load_optimizer(opt_g, arrays, "opt_g")
    _load_optimizer(opt_d, arrays, "opt_d")
    rng = torch.Generator()
    rng.set_state(torch.from_numpy(np.array(arrays["rng"])))
    gen.rng = rng
    return TrainState(
        config=cfg, generator=gen, discriminator=disc, opt_g=opt_g, opt_d=opt_d, rng=rng,
        epoch=int(manifest["epoch"]), step=int(manifest["step"]),
        history=[EpochMetrics(**m) for m in manifest["history"]],
        meta=dict(manifest.get("meta", {})),
    )


def checkpoint_meta(path) -> dict:
    """Manifest of a checkpoint without building the networks."""
    return read_archive(path)[1]


# --- steps ---------------------------------------------------------------------

@contextmanager
def deterministic_math(enabled: bool):
    """Single-threaded torch math for bit-reproducible runs."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(threads)


def _check_finite(value: torch.Tensor, what: str, state: TrainState, extra: dict) -> None:
    if not torch.isfinite(value).all():
        detail = ", ".join(f"{k}={float(v.detach()):.6g}" for k, v in extra.items())
        raise NonFiniteLoss(f"{what} is not finite at epoch {state.epoch} step {state.step} ({detail})")


def train_step(state: TrainState, pair: AlignedPair | Sequence[AlignedPair]) -> tuple[TrainState, dict]:
    """One discriminator update then one generator update, in place.

    ``pair`` may be a single pair or a batch of equally sized pairs.
    """
    batch = [pair] if isinstance(pair, AlignedPair) else list(pair)
    if not batch:
        raise ValueError("empty batch")
    dims = state.generator.config.input_dims
    for p in batch:
        check_dims(p.clear, dims, f"pair {p.id}")
    gen, disc = state.generator, state.discriminator
    dtype = next(gen.parameters()).dtype
    x = torch.cat([to_tensor(p.distorted, dtype) for p in batch])
    y = torch.cat([to_tensor(p.clear, dtype) for p in batch])
    gen.train()
    disc.train()

    fake = gen(x)

    for p in disc.parameters():
        p.requires_grad_(True)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(disc(x, y), disc(x, fake.detach()))
    _check_finite(d_loss, "discriminator loss", state, {"d_loss": d_loss})
    d_loss.backward()
    state.opt_d.step()

    for p in disc.parameters():
        p.requires_grad_(False)
    state.opt_g.zero_grad(set_to_none=True)
    total, adv, l1 = generator_loss(disc(x, fake), fake, y, state.config.l1_weight)
    _check_finite(total, "generator loss", state, {"adv": adv, "l1": l1})
    total.backward()
    state.opt_g.step()
    for p in disc.parameters():
        p.requires_grad_(True)

    state.step += 1
    metrics = {"d_loss": d_loss.item(), "g_adv": adv.item(), "g_l1": l1.item(), "g_total": total.item()}
    return state, metrics


def validation_l1(gen: Generator, pairs: Iterable[AlignedPair]) -> float | None:
    vals = [float(np.abs(generator_forward(gen, p.distorted) - p.clear).mean()) for p in pairs]
    return float(np.mean(vals)) if vals else None


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, 4, epoch)).permutation(n)


ProgressCallback = Callable[[int, int, dict], None]


def train(
    config: TrainConfig,
    split: DatasetSplit,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    callbacks: Sequence[ProgressCallback] = (),
    checkpoint_dir: str | os.PathLike | None = None,
    metrics_path: str | os.PathLike | None = None,
    state: TrainState | None = None,
    meta: dict | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[TrainState, list[EpochMetrics]]:
    """Run (or resume) training until ``config.epochs`` epochs are complete.

    Each finished epoch appends an :class:`EpochMetrics`, writes
    ``epoch_NNN.ckpt`` under ``checkpoint_dir`` and one JSON line to
    ``metrics_path`` when those are given.
    """
    config.validate()
    train_pairs = list(split.train)
    if not train_pairs:
        raise ValueError("training split is empty")
    if state is None:
        dims = train_pairs[0].dims
        state = init_state(
            config,
            gen_config or GeneratorConfig(input_dims=dims),
            disc_config or DiscriminatorConfig(input_dims=dims),
            meta,
        )
    else:
        # resumed runs keep their optimiser but may extend the schedule
        state.config = config
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    with deterministic_math(config.deterministic):
        for epoch in range(state.epoch, config.epochs):
            order = epoch_order(config.seed, epoch, len(train_pairs))
            sums = {"d_loss": 0.0, "g_adv": 0.0, "g_l1": 0.0}
            n_steps = 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_pairs[i] for i in order[start:start + config.batch_size]]
                state, m = train_step(state, batch)
                for k in sums:
                    sums[k] += m[k]
                n_steps += 1
                for cb in callbacks:
                    cb(epoch, state.step, m)
            metrics = EpochMetrics(
                epoch=epoch,
                d_loss=sums["d_loss"] / n_steps,
                g_adv=sums["g_adv"] / n_steps,
                l1_train=sums["g_l1"] / n_steps,
                l1_val=validation_l1(state.generator, split.validation),
            )
            state.history.append(metrics)
            state.epoch = epoch + 1
            if checkpoint_dir is not None:
                save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt")
            if metrics_path is not None:
                _append_jsonl(metrics_path, {**asdict(metrics), "step": state.step})
            if on_epoch is not None:
                on_epoch(metrics)
    return state, list(state.history)


def _append_jsonl(path, obj) -> None:
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot append to {path}: {exc}") from exc


@dataclass(frozen=True)
class OverfitReport:
    best_epoch: int
    overfit_epoch: int | None

    @property
    def overfit(self) -> bool:
        return self.overfit_epoch is not None


def detect_overfit(history: Sequence[EpochMetrics], patience: int = 3) -> OverfitReport:
    """Best epoch by validation L1, and the first epoch where overfitting is evident.

    Overfitting is flagged once validation L1 has risen for ``patience``
    consecutive epochs while training L1 kept falling.
    """
    if not history:
        raise ValueError("history is empty")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    val = [m.l1_val for m in history]
    if any(v is None for v in val):
        raise ValueError("detect_overfit needs validation L1 for every epoch")
    best = int(np.argmin(val))
    run, onset = 0, None
    for i in range(1, len(history)):
        rising = val[i] > val[i - 1]
        fitting = history[i].l1_train < history[i - 1].l1_train
        run = run + 1 if rising and fitting else 0
        if run >= patience and onset is None:
            onset = i
    return OverfitReport(best_epoch=best, overfit_epoch=onset)
