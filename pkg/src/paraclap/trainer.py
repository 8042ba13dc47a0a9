"""Deterministic minibatch training of the projection model.

Two modes mirror the comparison the evaluation is built around:

  * ``baseline`` trains with the anchor loss only (paraphrase weights forced
    to zero, paraphrase variants not required in the data);
  * ``robust`` adds both paraphrase views at every step and is typically run
    with ``init_from`` pointing at a baseline checkpoint (continual
    fine-tuning), though a fresh start is supported for ablations.

Runs are bit-reproducible: batch order derives from (seed, epoch), updates
are plain numpy, and checkpoints carry no timestamps.

Config files are flat ``key = value`` text; see ``parse_config`` for the key
set and defaults.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .datapack import Dataset, make_batches
from .errors import ConfigError, NonFiniteLoss
from .losses import LossBreakdown, LossWeights, TrainBatch, final_loss
from .model import (
    LOG_TAU_MAX,
    LOG_TAU_MIN,
    Layer,
    ModelCheckpoint,
    ProjectionHead,
    backward,
    forward,
    init_model,
    load_checkpoint,
)

MODES = ("baseline", "robust")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        # lr = 0 is allowed as a diagnostic no-op run
        if not (self.lr >= 0):
            raise ConfigError(f"lr must be >= 0, got {self.lr!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int
    batch_size: int
    seed: int
    optimizer: OptimizerConfig = OptimizerConfig()
    weights: LossWeights = LossWeights()
    init_from: str | None = None
    eval_every: int = 0
    d_embed: int = 32
    hidden: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.mode == "baseline" and (
            self.weights.lambda_text != 0.0 or self.weights.lambda_audio != 0.0
        ):
            # baseline mode is anchor-only by definition
            object.__setattr__(
                self,
                "weights",
                LossWeights(0.0, 0.0, self.weights.reduction),
            )


_CONFIG_KEYS = {
    "mode": str,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "optimizer": str,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "lambda_text": float,
    "lambda_audio": float,
    "reduction": str,
    "init_from": str,
    "eval_every": int,
    "d_embed": int,
    "hidden": int,
}

_REQUIRED_KEYS = ("mode", "epochs", "batch_size", "seed")


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    raw: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        raw[key] = value

    missing = [k for k in _REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys {missing}")

    def get(key, default=None):
        if key not in raw:
            return default
        if raw[key].lower() == "none":
            return None
        try:
            return _CONFIG_KEYS[key](raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw[key]!r}") from exc

    optimizer = OptimizerConfig(
        kind=get("optimizer", "adam"),
        lr=get("lr", 1e-3),
        beta1=get("beta1", 0.9),
        beta2=get("beta2", 0.999),
        eps=get("eps", 1e-8),
    )
    weights = LossWeights(
        lambda_text=get("lambda_text", 1.0),
        lambda_audio=get("lambda_audio", 1.0),
        reduction=get("reduction", "mean"),
    )
    return TrainConfig(
        mode=get("mode"),
        epochs=get("epochs"),
        batch_size=get("batch_size"),
        seed=get("seed"),
        optimizer=optimizer,
        weights=weights,
        init_from=get("init_from"),
        eval_every=get("eval_every", 0),
        d_embed=get("d_embed", 32),
        hidden=get("hidden"),
    )


# --- optimizer state --------------------------------------------------------------


def _param_arrays(ckpt: ModelCheckpoint):
    """Flat view of all trainable arrays, fixed order: audio head, text head."""
    out = []
    for head in (ckpt.audio_head, ckpt.text_head):
        for layer in head.layers:
            out.append(layer.weights)
            out.append(layer.bias)
    return out


@dataclass
class OptState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    m_log_tau: float = 0.0
    v_log_tau: float = 0.0

    @classmethod
    def fresh(cls, ckpt: ModelCheckpoint) -> "OptState":
        arrays = _param_arrays(ckpt)
        return cls(
            t=0,
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def _clone_checkpoint(ckpt: ModelCheckpoint) -> ModelCheckpoint:
    def clone_head(head: ProjectionHead) -> ProjectionHead:
        return ProjectionHead(
            [
                Layer(layer.weights.copy(), layer.bias.copy(), layer.activation)
                for layer in head.layers
            ]
        )

    return ModelCheckpoint(
        audio_head=clone_head(ckpt.audio_head),
        text_head=clone_head(ckpt.text_head),
        log_tau=ckpt.log_tau,
        metadata=dict(ckpt.metadata),
    )


def _batch_gradients(
    ckpt: ModelCheckpoint, batch: TrainBatch, config: TrainConfig, step_index: int = 0
):
    """Forward through the heads, composite loss, backward to parameters."""
    robust = config.mode == "robust"
    e_audio = forward(ckpt.audio_head, batch.audio)
    e_text = forward(ckpt.text_head, batch.text)
    if not (np.all(np.isfinite(e_audio)) and np.all(np.isfinite(e_text))):
        raise NonFiniteLoss(step_index, {"tau": ckpt.tau, "stage": "forward"})
    if robust:
        e_p1 = forward(ckpt.text_head, batch.para1)
        e_p2 = forward(ckpt.text_head, batch.para2)
        if not (np.all(np.isfinite(e_p1)) and np.all(np.isfinite(e_p2))):
            raise NonFiniteLoss(step_index, {"tau": ckpt.tau, "stage": "forward"})
    else:
        e_p1 = e_text
        e_p2 = e_text
    breakdown = final_loss(
        TrainBatch(audio=e_audio, text=e_text, para1=e_p1, para2=e_p2, ids=batch.ids),
        tau=ckpt.tau,
        w=config.weights,
    )

    audio_grads, _ = backward(ckpt.audio_head, batch.audio, breakdown.grad_audio)
    text_grads, _ = backward(ckpt.text_head, batch.text, breakdown.grad_text)
    if robust and (config.weights.lambda_text > 0 or config.weights.lambda_audio > 0):
        p1_grads, _ = backward(ckpt.text_head, batch.para1, breakdown.grad_para1)
        p2_grads, _ = backward(ckpt.text_head, batch.para2, breakdown.grad_para2)
        text_grads = [
            (gw + gw1 + gw2, gb + gb1 + gb2)
            for (gw, gb), (gw1, gb1), (gw2, gb2) in zip(text_grads, p1_grads, p2_grads)
        ]
    flat = []
    for gw, gb in audio_grads + text_grads:
        flat.append(gw)
        flat.append(gb)
    return breakdown, flat


def step(
    ckpt: ModelCheckpoint,
    batch: TrainBatch,
    opt_state: OptState,
    config: TrainConfig,
    step_index: int = 0,
):
    """One forward/backward/update. Returns (new ckpt, new state, breakdown).

    The input checkpoint is left untouched; tau is updated through its log
    and clamped to the legal range.
    """
    breakdown, grads = _batch_gradients(ckpt, batch, config, step_index)

    scalars = list(breakdown.scalars().values()) + [breakdown.grad_log_tau]
    if not all(math.isfinite(v) for v in scalars) or not all(
        np.all(np.isfinite(g)) for g in grads
    ):
        raise NonFiniteLoss(
            step_index,
            {"tau": ckpt.tau, **breakdown.scalars()},
        )

    new = _clone_checkpoint(ckpt)
    params = _param_arrays(new)
    opt = config.optimizer
    new_state = OptState(
        t=opt_state.t + 1,
        m=[a.copy() for a in opt_state.m],
        v=[a.copy() for a in opt_state.v],
        m_log_tau=opt_state.m_log_tau,
        v_log_tau=opt_state.v_log_tau,
    )

    if opt.kind == "sgd":
        for p, g in zip(params, grads):
            p -= opt.lr * g
        new_log_tau = new.log_tau - opt.lr * breakdown.grad_log_tau
    else:
        t = new_state.t
        bc1 = 1.0 - opt.beta1**t
        bc2 = 1.0 - opt.beta2**t
        for i, (p, g) in enumerate(zip(params, grads)):
            new_state.m[i] = opt.beta1 * new_state.m[i] + (1 - opt.beta1) * g
            new_state.v[i] = opt.beta2 * new_state.v[i] + (1 - opt.beta2) * g * g
            m_hat = new_state.m[i] / bc1
            v_hat = new_state.v[i] / bc2
            p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        g = breakdown.grad_log_tau
        new_state.m_log_tau = opt.beta1 * new_state.m_log_tau + (1 - opt.beta1) * g
        new_state.v_log_tau = opt.beta2 * new_state.v_log_tau + (1 - opt.beta2) * g * g
        new_log_tau = new.log_tau - opt.lr * (new_state.m_log_tau / bc1) / (
            math.sqrt(new_state.v_log_tau / bc2) + opt.eps
        )

    new.log_tau = min(max(new_log_tau, LOG_TAU_MIN), LOG_TAU_MAX)
    return new, new_state, breakdown


# --- history ----------------------------------------------------------------------


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # {"step", "epoch", scalars..., "tau"}
    epochs: list = field(default_factory=list)  # {"epoch", "wall_clock_s"}
    evals: list = field(default_factory=list)  # {"step", "report": {...}}

    def record_step(self, step_idx: int, epoch: int, breakdown: LossBreakdown, tau: float):
        if self.steps and step_idx <= self.steps[-1]["step"]:
            raise ValueError("step indices must be strictly increasing")
        self.steps.append(
            {"step": step_idx, "epoch": epoch, **breakdown.scalars(), "tau": tau}
        )

    def to_ndjson(self) -> str:
        import json

        lines = []
        for rec in self.steps:
            lines.append(json.dumps({"kind": "step", **rec}, sort_keys=True))
        for rec in self.epochs:
            lines.append(json.dumps({"kind": "epoch", **rec}, sort_keys=True))
        for rec in self.evals:
            lines.append(json.dumps({"kind": "eval", **rec}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        from pathlib import Path

        Path(path).write_text(self.to_ndjson(), encoding="utf-8")


def train(
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
    eval_variants=("test", "test_p"),
):
    """Full training run. Returns (final checkpoint, history).

    Deterministic given (dataset bytes, config): epoch e shuffles with seed
    (config.seed, e), and the optimizer is plain numpy arithmetic.
    """
    if config.init_from is not None:
        ckpt = load_checkpoint(config.init_from)
    else:
        ckpt = init_model(
            d_audio_in=dataset.audio_dim,
            d_text_in=dataset.text_dim,
            d_embed=config.d_embed,
            hidden=config.hidden,
            seed=config.seed,
        )
    opt_state = OptState.fresh(ckpt)
    history = TrainHistory()
    variant_pair = ("p1", "p2") if config.mode == "robust" else None

    step_idx = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        batches = make_batches(
            dataset, config.batch_size, seed=[config.seed, epoch], variant_pair=variant_pair
        )
        for batch in batches:
            step_idx += 1
            ckpt, opt_state, breakdown = step(ckpt, batch, opt_state, config, step_idx)
            history.record_step(step_idx, epoch, breakdown, ckpt.tau)
            if (
                config.eval_every > 0
                and eval_dataset is not None
                and step_idx % config.eval_every == 0
            ):
                from .metrics import evaluate

                report = evaluate(ckpt, eval_dataset, variants=eval_variants)
                history.evals.append(
                    {"step": step_idx, "report": {"variants": report.variants}}
                )
        history.epochs.append(
            {"epoch": epoch, "wall_clock_s": time.perf_counter() - t0}
        )

    ckpt.metadata = dict(ckpt.metadata)
    ckpt.metadata["created_step"] = step_idx
    return ckpt, history
