"""Losses, Adam, and the two-stage (pre-training, adversarial) procedure.

Optimizer 1 owns the feature extractor and generator, optimizer 2 owns the
discriminator.  Both step on every batch in both stages.  In the adversarial
stage the feature extractor descends ``dLg/dtheta_f - lam * dLd/dtheta_f``
while the generator and discriminator updates are unchanged.
"""

from __future__ import annotations

import copy
import io
import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .model import (
    ModelConfig,
    ModelParams,
    discriminator_forward,
    feature_extractor_forward,
    generator_forward,
    init_params,
)
from .synth import Dataset, DatasetSplit

log = logging.getLogger(__name__)

CLIP_EPS = 1e-7
METRICS_HEADER = "epoch,stage,loss_g,loss_d,loss_joint,disc_acc"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr1: float = 1e-3
    lr2: float = 1e-4
    lam: float = 0.1
    batch: int = 32
    epochs_pretrain: int = 6
    epochs_adversarial: int = 20
    decay_factor: float = 0.95
    decay_period: int = 5
    seed: int = 0
    precision: str = "float32"
    ablation: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_eps: float = CLIP_EPS
    lrelu_alpha: float = 0.2
    se_ratio: int = 16

    def __post_init__(self):
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lam < 0:
            raise ConfigError(f"adversarial weight must be >= 0, got {self.lam}")
        if self.batch < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs_pretrain < 0 or self.epochs_adversarial < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def total_epochs(self) -> int:
        return self.epochs_pretrain + self.epochs_adversarial

    def stage_lambda(self, stage: str) -> float:
        return 0.0 if stage == "pretrain" or self.ablation else self.lam

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LossRecord:
    epoch: int
    stage: str
    loss_g: float
    loss_d: float
    loss_joint: float
    disc_acc: float


# ---------------------------------------------------------------------------
# losses


def loss_generation(y: T.Tensor, target, eps: float = CLIP_EPS) -> T.Tensor:
    """Pixel-summed binary cross-entropy averaged over the batch."""
    lo, hi = float(y.data.min()), float(y.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"generator output outside [0, 1]: [{lo}, {hi}]")
    return T.binary_cross_entropy(y, target, eps)


def loss_domain(d: T.Tensor, labels, eps: float = CLIP_EPS) -> T.Tensor:
    """Class-summed binary cross-entropy of domain probabilities vs one-hot labels."""
    lab = np.asarray(labels)
    if lab.shape != d.shape or not (np.all((lab == 0) | (lab == 1)) and np.all(lab.sum(axis=-1) == 1)):
        raise ValueError("domain labels must be one-hot rows matching the prediction shape")
    return T.binary_cross_entropy(d, lab, eps)


def loss_joint(loss_g, loss_d, lam: float):
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return loss_g - lam * loss_d


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data -= (lr / c1) * m / denom


def lr_schedule(initial_lr: float, epoch: int, decay_factor: float = 0.95, period: int = 5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * decay_factor ** (epoch // period)


def new_optimizers(config: TrainConfig) -> tuple[AdamState, AdamState]:
    mk = lambda: AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    return mk(), mk()


# ---------------------------------------------------------------------------
# steps


@dataclass
class StepResult:
    loss_g: float
    loss_d: float
    loss_joint: float


@dataclass
class Gradients:
    """Per-parameter gradients routed to the two optimizers."""

    feature: dict[str, np.ndarray]
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    loss_g: float
    loss_d: float


def compute_gradients(batch, params: ModelParams, lam: float, alpha: float = 0.2,
                      clip_eps: float = CLIP_EPS) -> Gradients:
    """One shared forward pass; ``feature`` holds ``dLg/dtheta_f - lam * dLd/dtheta_f``.

    With ``lam == 0`` the discriminator loss is never back-propagated into the
    feature extractor.
    """
    x, y_true, labels = batch
    z = feature_extractor_forward(x, params)
    y = generator_forward(z, params, alpha)
    d = discriminator_forward(z, params, alpha)
    lg = loss_generation(y, y_true, clip_eps)
    ld = loss_domain(d, labels, clip_eps)

    f_names, g_names, d_names = list(params.feature), list(params.generator), list(params.discriminator)
    fg = [params.feature[k] for k in f_names] + [params.generator[k] for k in g_names]
    grads_g = T.backward(lg, fg, accumulate=False)
    grad_f = dict(zip(f_names, grads_g[: len(f_names)]))
    grad_g = dict(zip(g_names, grads_g[len(f_names):]))

    d_targets = [params.discriminator[k] for k in d_names]
    if lam != 0.0:
        d_targets += [params.feature[k] for k in f_names]
    grads_d = T.backward(ld, d_targets, accumulate=False)
    grad_d = dict(zip(d_names, grads_d[: len(d_names)]))
    if lam != 0.0:
        for k, gd in zip(f_names, grads_d[len(d_names):]):
            grad_f[k] = grad_f[k] - lam * gd
    return Gradients(grad_f, grad_g, grad_d, float(lg.data), float(ld.data))


def apply_updates(params: ModelParams, grads: Gradients, opt1: AdamState, opt2: AdamState,
                  lr1: float, lr2: float) -> None:
    """Optimizer 1 steps (theta_f, theta_g); optimizer 2 steps theta_d."""
    adam_step({**params.feature, **params.generator}, {**grads.feature, **grads.generator}, opt1, lr1)
    adam_step(params.discriminator, grads.discriminator, opt2, lr2)


def _step(batch, params: ModelParams, opt1: AdamState, opt2: AdamState,
          config: TrainConfig, lam: float, epoch: int) -> StepResult:
    grads = compute_gradients(batch, params, lam, config.lrelu_alpha, config.clip_eps)
    lr1 = lr_schedule(config.lr1, epoch, config.decay_factor, config.decay_period)
    lr2 = lr_schedule(config.lr2, epoch, config.decay_factor, config.decay_period)
    apply_updates(params, grads, opt1, opt2, lr1, lr2)
    return StepResult(grads.loss_g, grads.loss_d, grads.loss_g - lam * grads.loss_d)


def pretrain_step(batch, params, opt1, opt2, config: TrainConfig, epoch: int = 0) -> StepResult:
    """Optimizer 1 on ``dLg/d(theta_f, theta_g)``, optimizer 2 on ``dLd/dtheta_d``."""
    return _step(batch, params, opt1, opt2, config, 0.0, epoch)


def adversarial_step(batch, params, opt1, opt2, config: TrainConfig,
                     epoch: int = 0, lam: float | None = None) -> StepResult:
    """As :func:`pretrain_step` but the feature extractor also ascends ``lam * Ld``."""
    lam = config.stage_lambda("adversarial") if lam is None else lam
    if lam < 0:
        raise ConfigError(f"adversarial stage needs lam >= 0, got {lam}")
    return _step(batch, params, opt1, opt2, config, lam, epoch)


# ---------------------------------------------------------------------------
# evaluation helpers


def _as_dtype(x: np.ndarray, params: ModelParams) -> np.ndarray:
    return x.astype(params.feature["conv1.kernel"].dtype, copy=False)


def predict_domains(params: ModelParams, csi: np.ndarray, batch: int = 128, alpha: float = 0.2) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(csi), batch):
            z = feature_extractor_forward(T.Tensor(_as_dtype(csi[i : i + batch], params)), params)
            out.append(discriminator_forward(z, params, alpha).data)
    return np.concatenate(out) if out else np.zeros((0, params.num_domains))


def predict_images(params: ModelParams, csi: np.ndarray, batch: int = 64, alpha: float = 0.2) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(csi), batch):
            z = feature_extractor_forward(T.Tensor(_as_dtype(csi[i : i + batch], params)), params)
            out.append(generator_forward(z, params, alpha).data)
    return np.concatenate(out) if out else np.zeros((0, 120, 160, 1))


def discriminator_accuracy(params: ModelParams, csi: np.ndarray, labels: np.ndarray, alpha: float = 0.2) -> float:
    """Share of samples whose argmax domain (ties to the lowest index) matches the label."""
    if len(csi) == 0:
        return float("nan")
    d = predict_domains(params, csi, alpha=alpha)
    return float(np.mean(np.argmax(d, axis=1) == np.argmax(labels, axis=1)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[LossRecord]


def model_config(config: TrainConfig, num_domains: int) -> ModelConfig:
    return ModelConfig(num_domains=num_domains, se_ratio=config.se_ratio,
                       lrelu_alpha=config.lrelu_alpha, dtype=config.precision)


class Trainer:
    """Epoch-at-a-time training state: parameters, both optimizers and the shuffle stream.

    ``copy()`` snapshots everything, so two runs that share a prefix (e.g. the
    same pre-training) can branch without re-running it.
    """

    def __init__(self, dataset: Dataset, split: DatasetSplit, config: TrainConfig,
                 params: ModelParams | None = None):
        train_idx = np.asarray(split.train)
        if len(train_idx) == 0:
            raise ConfigError("training split is empty")
        if np.any(dataset.subject[train_idx] == dataset.target_id):
            raise ConfigError("target-subject samples found in the training split")
        k = dataset.domain.shape[1]
        if params is None:
            params = init_params(config.seed, model_config(config, k))
        elif params.num_domains != k:
            raise ConfigError(f"model has {params.num_domains} domains but labels have width {k}")
        self.dataset, self.split, self.config = dataset, split, config
        self.params = params
        self.opt1, self.opt2 = new_optimizers(config)
        self.rng = np.random.default_rng([config.seed, 1])
        self.history: list[LossRecord] = []

    @property
    def epoch(self) -> int:
        return len(self.history)

    @property
    def done(self) -> bool:
        return self.epoch >= self.config.total_epochs

    def copy(self, **overrides) -> "Trainer":
        """Deep copy; ``overrides`` replace config fields in the copy (e.g. ``ablation=True``)."""
        other = object.__new__(Trainer)
        other.dataset, other.split = self.dataset, self.split
        other.config = replace(self.config, **overrides)
        other.params = self.params.copy()
        other.opt1, other.opt2 = copy.deepcopy(self.opt1), copy.deepcopy(self.opt2)
        other.rng = copy.deepcopy(self.rng)
        other.history = list(self.history)
        return other

    def run_epoch(self) -> LossRecord:
        cfg, ds, epoch = self.config, self.dataset, self.epoch
        stage = "pretrain" if epoch < cfg.epochs_pretrain else "adversarial"
        lam = cfg.stage_lambda(stage)
        dtype = np.dtype(cfg.precision)
        order = self.rng.permutation(np.asarray(self.split.train))
        lgs, lds = [], []
        for i in range(0, len(order), cfg.batch):
            idx = np.sort(order[i : i + cfg.batch])
            batch = (T.Tensor(ds.csi[idx].astype(dtype)), ds.skeleton[idx].astype(dtype), ds.domain[idx].astype(dtype))
            if stage == "pretrain":
                r = pretrain_step(batch, self.params, self.opt1, self.opt2, cfg, epoch)
            else:
                r = adversarial_step(batch, self.params, self.opt1, self.opt2, cfg, epoch, lam)
            lgs.append(r.loss_g)
            lds.append(r.loss_d)
        mg, md = float(np.mean(lgs)), float(np.mean(lds))
        test_idx = np.asarray(self.split.test_source)
        acc = discriminator_accuracy(self.params, ds.csi[test_idx], ds.domain[test_idx], cfg.lrelu_alpha)
        rec = LossRecord(epoch, stage, mg, md, mg - lam * md, acc)
        self.history.append(rec)
        log.info("epoch %d %s loss_g=%.3f loss_d=%.4f disc_acc=%.3f", epoch, stage, mg, md, acc)
        return rec

    def run(self, until: int | None = None, on_epoch=None) -> TrainResult:
        """Train up to epoch ``until`` (default: the end of the schedule)."""
        stop = self.config.total_epochs if until is None else min(until, self.config.total_epochs)
        while self.epoch < stop:
            rec = self.run_epoch()
            if on_epoch is not None:
                on_epoch(rec, self.params)
        return TrainResult(self.params, self.history)


def train(dataset: Dataset, split: DatasetSplit, config: TrainConfig,
          params: ModelParams | None = None, on_epoch=None) -> TrainResult:
    """Pre-train for ``epochs_pretrain`` epochs, then train adversarially.

    One :class:`LossRecord` per epoch; ``disc_acc`` is measured on the
    held-out source split after the epoch.  Everything is a pure function of
    ``config.seed`` and the data.
    """
    return Trainer(dataset, split, config, params).run(on_epoch=on_epoch)


def metrics_csv(history: list[LossRecord]) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    for r in history:
        buf.write(f"{r.epoch},{r.stage},{r.loss_g!r},{r.loss_d!r},{r.loss_joint!r},{r.disc_acc!r}\n")
    return buf.getvalue()
