"""Training loops: supervised, candidate grid search, co-objective, and
masked-correction training, plus evaluation and epoch bookkeeping.

All modes share one protocol: channel-independent mini-batches, Adam,
early stopping on validation MSE with best-checkpoint restore, metrics in
standardized units. Runs are deterministic functions of (config, seed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .autodiff import Tape, Var, zero_grads
from .data import SplitWindows, WindowDataset, flatten_channels
from .errors import ConfigError, ContractError
from .models import (
    ModelConfig,
    ReconstructionNet,
    build_predictor,
    flat_grads,
    flat_params,
    param_slices,
    set_flat_params,
)
from .sharpness import HvpContext, lambda_max

MODES = ("supervised", "grid_search", "co_objective", "scam")


@dataclass
class TrainConfig:
    mode: str = "scam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    eval_batch: int = 512
    # candidate grid search
    grid_candidates: int = 8
    grid_inner_steps: int = 2000
    grid_grad_threshold: float = 1e-3
    grid_outer_lr: float = 0.02
    grid_inner_optimizer: str = "adam"
    # optional curvature logging
    log_sharpness: bool = False
    sharpness_batch: int = 512

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0 or self.grid_outer_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs, patience must be >= 1")
        if self.grid_candidates < 1 or self.grid_inner_steps < 1:
            raise ConfigError("grid search sizes must be >= 1")
        if self.grid_grad_threshold <= 0:
            raise ConfigError("grid_grad_threshold must be positive")
        if self.grid_inner_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"grid_inner_optimizer must be adam or sgd")
        if self.eval_batch < 1 or self.sharpness_batch < 1:
            raise ConfigError("batch sizes must be >= 1")


class Adam:
    """Standard bias-corrected Adam; a non-finite gradient skips the whole
    step and bumps skipped_steps instead of corrupting the moments."""

    def __init__(self, params: list[Var], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.skipped_steps = 0

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                self.skipped_steps += 1
                return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    """Plain gradient descent (used by the grid-search outer loop)."""

    def __init__(self, params: list[Var], lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.skipped_steps = 0

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                self.skipped_steps += 1
                return
        for p in self.params:
            p.value -= self.lr * p.grad


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    train_mae: float
    val_mse: float
    val_mae: float
    test_mse: float
    test_mae: float
    rec_corrected: float = 0.0
    pred_corrected: float = 0.0
    sup_in_mask: float = 0.0
    sup_out_mask: float = 0.0
    loss_rec: float = 0.0
    loss_pred: float = 0.0
    loss_target: float = 0.0
    lambda_max: float | None = None
    wall_time_s: float = 0.0


EPOCH_CSV_FIELDS = [
    "epoch", "train_mse", "train_mae", "val_mse", "val_mae", "test_mse", "test_mae",
    "rec_corrected", "pred_corrected", "sup_in_mask", "sup_out_mask",
    "loss_rec", "loss_pred", "loss_target", "lambda_max", "wall_time_s",
]

TIMING_FIELDS = {"wall_time_s"}


def write_epochs_csv(records: list[EpochRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(EPOCH_CSV_FIELDS) + "\n")
        for r in records:
            cells = []
            for name in EPOCH_CSV_FIELDS:
                v = getattr(r, name)
                if v is None:
                    cells.append("")
                elif name == "epoch":
                    cells.append(str(v))
                else:
                    cells.append(repr(float(v)))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, ds: WindowDataset, batch: int = 512, scaler=None) -> tuple[float, float]:
    """MSE and MAE of the predictor over every window and channel.

    Metrics are in standardized units unless a scaler is passed, in which
    case predictions and targets are mapped back to raw units first.
    """
    n = len(ds)
    if n == 0:
        raise ContractError("empty window dataset")
    nch = ds.n_channels
    sq = 0.0
    ab = 0.0
    count = 0
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        x = flatten_channels(ds.x[lo:hi])
        y = flatten_channels(ds.y[lo:hi])
        pred = model.forward(Tape(), x).value
        if scaler is not None:
            # flattened rows cycle through channels within each window
            sd = np.tile(scaler.std, hi - lo)[:, None]
            mu = np.tile(scaler.mean, hi - lo)[:, None]
            pred = pred * sd + mu
            y = y * sd + mu
        d = pred - y
        sq += float(np.sum(d * d))
        ab += float(np.sum(np.abs(d)))
        count += d.size
    return sq / count, ab / count


def _snapshot(models: list) -> list[tuple]:
    state = []
    for model in models:
        for _, v in model.parameters():
            state.append((v, v.value.copy()))
        for name, arr in model.buffers():
            state.append((arr, arr.copy()))
    return state


def _restore(state: list[tuple]) -> None:
    for target, saved in state:
        if isinstance(target, Var):
            target.value[...] = saved
        else:
            target[...] = saved


def _batch_indices(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[lo : lo + batch] for lo in range(0, n, batch)]


# ---------------------------------------------------------------------------
# shared epoch loop


def _fit(bundle: SplitWindows, f, g, cfg: TrainConfig, batch_loss_fn) -> list[EpochRecord]:
    """Run epochs of batch_loss_fn, early-stop on val MSE, restore the best."""
    models = [f] + ([g] if g is not None else [])
    params = [v for _, v in f.parameters()]
    if g is not None:
        params += [v for _, v in g.loss_parameters()]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(bundle.train)
    records: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = -1
    best_state = _snapshot(models)
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        sq = ab = 0.0
        count = 0
        bsum = np.zeros(7)
        bweight = 0
        for idx in _batch_indices(n, cfg.batch_size, rng):
            x = flatten_channels(bundle.train.x[idx])
            y = flatten_channels(bundle.train.y[idx])
            tape = Tape()
            loss, yhat, breakdown = batch_loss_fn(tape, x, y)
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            f.spectral_step()
            d = yhat - y
            sq += float(np.sum(d * d))
            ab += float(np.sum(np.abs(d)))
            count += d.size
            if breakdown is not None:
                bsum += np.array([
                    breakdown.rec_corrected, breakdown.pred_corrected,
                    breakdown.sup_in_mask, breakdown.sup_out_mask,
                    breakdown.loss_rec, breakdown.loss_pred, breakdown.loss_target,
                ]) * d.size
                bweight += d.size
        val_mse, val_mae = evaluate(f, bundle.val, cfg.eval_batch)
        test_mse, test_mae = evaluate(f, bundle.test, cfg.eval_batch)
        bmean = bsum / bweight if bweight else np.zeros(7)
        lam = None
        if cfg.log_sharpness:
            ctx = predictor_loss_context(f, bundle.val, cfg.sharpness_batch)
            lam = lambda_max(ctx, seed=cfg.seed).value
        records.append(EpochRecord(
            epoch=epoch,
            train_mse=sq / count, train_mae=ab / count,
            val_mse=val_mse, val_mae=val_mae,
            test_mse=test_mse, test_mae=test_mae,
            rec_corrected=float(bmean[0]), pred_corrected=float(bmean[1]),
            sup_in_mask=float(bmean[2]), sup_out_mask=float(bmean[3]),
            loss_rec=float(bmean[4]), loss_pred=float(bmean[5]), loss_target=float(bmean[6]),
            lambda_max=lam,
            wall_time_s=time.perf_counter() - t0,
        ))
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = _snapshot(models)
        elif epoch - best_epoch >= cfg.patience:
            break
    _restore(best_state)
    return records


# ---------------------------------------------------------------------------
# training modes


def train_supervised(bundle: SplitWindows, model, cfg: TrainConfig) -> tuple[object, list[EpochRecord]]:
    """Plain L1 training of the predictor on raw labels."""

    def batch_loss(tape: Tape, x: np.ndarray, y: np.ndarray):
        yhat = model.forward(tape, x)
        loss = tape.mean(tape.abs(tape.sub(yhat, tape.constant(y))))
        return loss, yhat.value, None

    records = _fit(bundle, model, None, cfg, batch_loss)
    return model, records


def _candidate_losses(tape: Tape, g: ReconstructionNet, f, x: np.ndarray, y: np.ndarray,
                      masked: bool):
    """Per-candidate losses plus the batch-mean breakdown."""
    yhat = f.forward(tape, x)
    cands = g.head_outputs(tape, y)
    yconst = tape.constant(y)
    per = []
    parts = np.zeros(7)
    for c in cands:
        masks = L.compute_masks(c.value, yhat.value, y)
        if masked:
            per.append(L.scam_masked_loss(tape, c, yhat, yconst, masks))
        else:
            per.append(L.co_objective_loss(tape, c, yhat, yconst))
        b = L.loss_breakdown(c.value, yhat.value, y, masks)
        parts += np.array([
            b.rec_corrected, b.pred_corrected, b.sup_in_mask, b.sup_out_mask,
            b.loss_rec, b.loss_pred, b.loss_target,
        ])
    parts /= len(cands)
    breakdown = L.LossBreakdown(*parts)
    return per, yhat, breakdown


def train_co_objective(bundle: SplitWindows, g: ReconstructionNet, f, cfg: TrainConfig):
    """Joint training on mean(|c - t| + |c - p|); the raw-label term trains
    only the reconstruction network, the closeness term trains both."""

    def batch_loss(tape: Tape, x: np.ndarray, y: np.ndarray):
        per, yhat, breakdown = _candidate_losses(tape, g, f, x, y, masked=False)
        return L.aggregate_over_series(tape, per), yhat.value, breakdown

    records = _fit(bundle, f, g, cfg, batch_loss)
    return f, g, records


def train_scam(bundle: SplitWindows, g: ReconstructionNet, f, cfg: TrainConfig):
    """Joint training on the masked correction loss."""

    def batch_loss(tape: Tape, x: np.ndarray, y: np.ndarray):
        per, yhat, breakdown = _candidate_losses(tape, g, f, x, y, masked=True)
        return L.aggregate_over_series(tape, per), yhat.value, breakdown

    records = _fit(bundle, f, g, cfg, batch_loss)
    return f, g, records


# ---------------------------------------------------------------------------
# candidate grid search


@dataclass
class GridRecord:
    index: int
    loss_rec: float
    loss_pred: float
    loss_target: float
    inner_steps: int
    grad_norm: float
    test_mse: float
    test_mae: float
    phi_snapshot: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _recon_candidates(g: ReconstructionNet, y: np.ndarray) -> np.ndarray:
    """(B, S, H) candidate values with the reconstruction net frozen."""
    return g.forward(Tape(), y).value


def train_grid_search(bundle: SplitWindows, g: ReconstructionNet, predictor_factory,
                      cfg: TrainConfig) -> tuple[ReconstructionNet, list[GridRecord]]:
    """Outer loop over candidate label sets (Alg: propose, fit, score, refine).

    Each outer round i freezes the reconstruction parameters phi_i, fits a
    freshly initialized predictor theta_i on the candidate labels until the
    RMS gradient falls below the threshold or the step budget runs out, then
    scores theta_i on raw test labels and takes one full-batch gradient step
    on the reconstruction loss mean|c - t| to propose phi_{i+1}.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(bundle.train)
    records: list[GridRecord] = []
    phi_params = [v for _, v in g.loss_parameters()]
    outer = Sgd(phi_params, cfg.grid_outer_lr)
    for i in range(cfg.grid_candidates):
        f = predictor_factory(i)
        theta = [v for _, v in f.parameters()]
        if cfg.grid_inner_optimizer == "adam":
            inner = Adam(theta, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        else:
            inner = Sgd(theta, cfg.lr)
        n_theta = sum(v.value.size for v in theta)
        steps = 0
        gnorm = np.inf
        loss_pred_val = np.inf
        while steps < cfg.grid_inner_steps and gnorm > cfg.grid_grad_threshold:
            for idx in _batch_indices(n, cfg.batch_size, rng):
                x = flatten_channels(bundle.train.x[idx])
                y = flatten_channels(bundle.train.y[idx])
                cands = _recon_candidates(g, y)
                tape = Tape()
                yhat = f.forward(tape, x)
                per = [
                    tape.mean(tape.abs(tape.sub(yhat, tape.constant(cands[:, s]))))
                    for s in range(cands.shape[1])
                ]
                loss = L.aggregate_over_series(tape, per)
                inner.zero_grad()
                tape.backward(loss)
                gnorm = float(np.linalg.norm(np.concatenate([v.grad.ravel() for v in theta])))
                gnorm /= np.sqrt(n_theta)
                inner.step()
                f.spectral_step()
                loss_pred_val = loss.value.item()
                steps += 1
                if steps >= cfg.grid_inner_steps or gnorm <= cfg.grid_grad_threshold:
                    break
        test_mse, test_mae = evaluate(f, bundle.test, cfg.eval_batch)
        # full-batch reconstruction gradient at phi_i, then one descent step
        outer.zero_grad()
        loss_rec = 0.0
        loss_target = 0.0
        total = 0
        for lo in range(0, n, cfg.eval_batch):
            hi = min(lo + cfg.eval_batch, n)
            y = flatten_channels(bundle.train.y[lo:hi])
            x = flatten_channels(bundle.train.x[lo:hi])
            tape = Tape()
            cands = g.head_outputs(tape, y)
            yconst = tape.constant(y)
            per = [tape.mean(tape.abs(tape.sub(c, yconst))) for c in cands]
            chunk = L.aggregate_over_series(tape, per)
            weight = y.size / (n * bundle.train.horizon * bundle.train.n_channels)
            tape.backward(tape.scale(chunk, weight))
            loss_rec += chunk.value.item() * weight
            with_f = f.forward(Tape(), x).value
            loss_target += float(np.mean(np.abs(with_f - y))) * weight
            total += y.size
        phi_snapshot = {name: v.value.copy() for name, v in g.loss_parameters()}
        records.append(GridRecord(
            index=i, loss_rec=loss_rec, loss_pred=loss_pred_val, loss_target=loss_target,
            inner_steps=steps, grad_norm=gnorm, test_mse=test_mse, test_mae=test_mae,
            phi_snapshot=phi_snapshot,
        ))
        outer.step()
    return g, records


# ---------------------------------------------------------------------------
# curvature contexts


def _loss_and_grad_fn(f, x: np.ndarray, y: np.ndarray, point_weights: np.ndarray | None):
    params = f.parameters()
    theta0 = flat_params(params)

    def loss_and_grad(theta: np.ndarray) -> tuple[float, np.ndarray]:
        set_flat_params(params, theta)
        tape = Tape()
        yhat = f.forward(tape, x)
        diff = tape.abs(tape.sub(yhat, tape.constant(y)))
        if point_weights is not None:
            diff = tape.mul(diff, tape.constant(point_weights))
        loss = tape.mean(diff)
        zero_grads([v for _, v in params])
        tape.backward(loss)
        grad = flat_grads(params)
        set_flat_params(params, theta0)
        return loss.value.item(), grad

    return theta0, loss_and_grad


def predictor_loss_context(f, ds: WindowDataset, batch: int = 512,
                           point_weights: np.ndarray | None = None) -> HvpContext:
    """Curvature context for the predictor's L1 loss on a fixed batch of
    windows, optionally weighted per output point (e.g. by a mask)."""
    take = min(batch, len(ds))
    x = flatten_channels(ds.x[:take])
    y = flatten_channels(ds.y[:take])
    if point_weights is not None and point_weights.shape != y.shape:
        raise ContractError(f"point weights {point_weights.shape} vs targets {y.shape}")
    params = f.parameters()
    theta0, fn = _loss_and_grad_fn(f, x, y, point_weights)
    names = param_slices(params)
    segments = {
        seg: slice(min(names[p].start for p in plist), max(names[p].stop for p in plist))
        for seg, plist in f.segments().items() if plist
    }
    return HvpContext(theta0, fn, segments)
