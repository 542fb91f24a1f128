"""Loss, AdamW, the pre-train / augmented-train schedule and cross-validation."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .augment import NoiseSource
from .dataset import LdlDataset, kfold_split, zscore_fit_transform
from .errors import ConfigurationError, ContractError, DimensionError, LdlError
from .metrics import MetricsReport, score_predictions
from .numerics import Tape, Tensor
from .tabmixer import AUGMENTED, BLOCK_FORMS, RESIDUAL, TILED, TabMixerModel, predict, predict_batch

log = logging.getLogger(__name__)


class TrainingDiverged(LdlError, FloatingPointError):
    """The training loss became NaN or infinite."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigurationError(f"invalid loss weights alpha={self.alpha}, beta={self.beta}")


def combined_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over rows of ``alpha * L1 + beta * KL(target || pred)``."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    if (pred.data <= 0).any():
        raise ContractError("predicted probabilities must be strictly positive")
    l1 = nx.sum_last(nx.absolute(nx.sub(pred, target)))
    pos = target > 0
    t_log_t = np.zeros_like(target)
    t_log_t[pos] = target[pos] * np.log(target[pos])
    # KL = sum t ln t - sum t ln p
    kl = nx.sub(t_log_t.sum(axis=-1), nx.sum_last(nx.mul(target, nx.log(pred))))
    per_row = nx.add(nx.mul(cfg.alpha, l1), nx.mul(cfg.beta, kl))
    return nx.mean_all(per_row)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: OptimizerState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p.data -= lr * step
    return state


# ---------------------------------------------------------------------------
# training schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    learning_rate: float = 2e-4
    epochs: int = 500
    weight_decay: float = 0.01
    seed: int = 1024
    pretrain_epochs: int | None = None   # None: 10% of epochs
    with_fa: bool = True
    with_pt: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    blocks: int = 12
    hidden: int = 512
    learner_hidden: int = 64
    block_form: str = RESIDUAL
    chunk: int = 250   # rows per forward/backward pass inside one mini-batch

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.chunk < 1:
            raise ConfigurationError("batch_size, epochs and chunk must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.pretrain_epochs is not None and self.pretrain_epochs < 0:
            raise ConfigurationError("pretrain_epochs must be non-negative")
        if self.block_form not in BLOCK_FORMS:
            raise ConfigurationError(f"block_form must be one of {BLOCK_FORMS}")

    @property
    def n_pretrain(self) -> int:
        if not self.with_pt:
            return 0
        if self.pretrain_epochs is None:
            return max(1, round(0.1 * self.epochs))
        return self.pretrain_epochs

    @property
    def main_mode(self) -> str:
        return AUGMENTED if self.with_fa else TILED

    def new_model(self, n: int, c: int, seed: int) -> TabMixerModel:
        return TabMixerModel.init(n, c, seed=seed, blocks=self.blocks, hidden=self.hidden,
                                  learner_hidden=self.learner_hidden, form=self.block_form)


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss: float


@dataclass
class TrainResult:
    model: TabMixerModel
    trace: list[EpochRecord]
    noise_draws: int

    def trace_csv(self) -> str:
        lines = ["phase,epoch,loss"]
        lines += [f"{r.phase},{r.epoch},{r.loss!r}" for r in self.trace]
        return "\n".join(lines) + "\n"


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint32)[0])


def _run_phase(model: TabMixerModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               phase: str, epochs: int, mode: str, noise: NoiseSource | None,
               rng: np.random.Generator, trace: list[EpochRecord]) -> None:
    params = model.parameters(include_learner=(mode == AUGMENTED))
    state = OptimizerState.zeros(params)
    m = x.shape[0]
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(m)
        total = 0.0
        for s in range(0, m, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            grads = [np.zeros_like(p.data) for p in params]
            batch_loss = 0.0
            for c0 in range(0, idx.size, cfg.chunk):
                ci = idx[c0:c0 + cfg.chunk]
                w = ci.size / idx.size
                with Tape() as tape:
                    loss = combined_loss(predict(model, x[ci], noise, mode), y[ci], cfg.loss)
                got = tape.backward(loss)
                for k, p in enumerate(params):
                    g = got.get(p)
                    if g is not None:
                        grads[k] += w * g
                batch_loss += w * float(loss.data)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"{phase} epoch {epoch}: loss is {batch_loss}")
            adamw_step(params, grads, state, cfg.learning_rate, weight_decay=cfg.weight_decay)
            total += batch_loss * idx.size
        trace.append(EpochRecord(phase, epoch, total / m))
        log.debug("%s epoch %d loss %.6f", phase, epoch, total / m)


def pretrain(model: TabMixerModel, data: LdlDataset, cfg: TrainConfig,
             trace: list[EpochRecord] | None = None) -> TabMixerModel:
    """Fit everything except the learner on tiled copies of each sample."""
    if not cfg.with_pt or cfg.n_pretrain == 0:
        return model
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    _run_phase(model, data.features, data.labels, cfg, "pretrain", cfg.n_pretrain, TILED,
               None, rng, trace if trace is not None else [])
    return model


def train_model(model: TabMixerModel, data: LdlDataset, cfg: TrainConfig,
                noise: NoiseSource | None = None) -> TrainResult:
    """Optional tiled pre-training, then training in the configured mode."""
    if noise is None:
        noise = NoiseSource(derive_seed(cfg.seed, 3))
    start = noise.draws
    trace: list[EpochRecord] = []
    pretrain(model, data, cfg, trace)
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    _run_phase(model, data.features, data.labels, cfg, "train", cfg.epochs, cfg.main_mode,
               noise if cfg.with_fa else None, rng, trace)
    return TrainResult(model, trace, noise.draws - start)


def evaluate_model(model: TabMixerModel, data: LdlDataset, noise: NoiseSource | None,
                   mode: str = AUGMENTED) -> dict[str, float]:
    """Mean of the six metrics over ``data``, one reset-seeded stochastic pass."""
    if noise is not None:
        noise.reset()
    pred = predict_batch(model, data.features, noise, mode)
    return score_predictions(pred, data.labels)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def run_fold(data: LdlDataset, cfg: TrainConfig, repeat: int, fold: int,
             train_idx: np.ndarray, test_idx: np.ndarray) -> tuple[dict[str, float], int]:
    xtr, mean, std = zscore_fit_transform(data.features[train_idx], data.features[train_idx])
    xte = (data.features[test_idx] - mean) / std
    train = LdlDataset(data.name, xtr, data.labels[train_idx])
    test = LdlDataset(data.name, xte, data.labels[test_idx])
    fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, repeat, fold))
    model = cfg.new_model(data.n, data.c, derive_seed(fold_cfg.seed, 0))
    noise = NoiseSource(derive_seed(fold_cfg.seed, 3))
    result = train_model(model, train, fold_cfg, noise)
    eval_noise = NoiseSource(derive_seed(fold_cfg.seed, 4)) if cfg.with_fa else None
    row = evaluate_model(result.model, test, eval_noise, cfg.main_mode)
    log.info("repeat %d fold %d: %s", repeat, fold,
             " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    draws = result.noise_draws + (eval_noise.draws if eval_noise is not None else 0)
    return row, draws


def _fold_job(args):
    return run_fold(*args)


def run_cv(data: LdlDataset, cfg: TrainConfig, k: int = 5, repeats: int = 10,
           workers: int = 1) -> MetricsReport:
    """Repeated k-fold CV; rows are aggregated repeat-major, fold-minor."""
    plan = kfold_split(data.m, k, repeats, cfg.seed)
    jobs = [(data, cfg, r, f, tr, te) for r, f, tr, te in plan.splits()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    report = MetricsReport.aggregate([r for r, _ in results], sum(d for _, d in results))
    report.fold_keys = [(r, f) for _, _, r, f, _, _ in jobs]
    return report
