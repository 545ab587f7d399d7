"""Naive and meta-learned parameter updates over sliding windows.

Losses are written as ``loss_fn(params, window) -> scalar`` where ``params``
maps names to tensors. The same update code therefore drives the full VO
model (via ``torch.func.functional_call``) and small analytic toys.
"""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.func import functional_call

from .data_io import SequenceDataset
from .errors import DegenerateWindowWarning, DomainError
from .feature_alignment import AlignConfig, FeatureStats, SourceStatsEMA, align_stats
from .geometry import Intrinsics, PoseSE3
from .losses import LossWeights
from .networks import VONet, WindowResult

log = logging.getLogger(__name__)

Params = Dict[str, torch.Tensor]
LossFn = Callable[[Params, object], torch.Tensor]

LOG_COLUMNS = ("iteration", "inner_loss", "outer_loss", "grad_cosine", "lr", "wall_ms")
REPORT_COLUMNS = ("window", "inner_loss", "outer_loss", "grad_inner", "grad_cosine", "photometric", "skipped", "wall_ms")
ONLINE_MODES = ("none", "naive", "meta")


@dataclass
class SlidingWindow:
    """``N`` consecutive frames ``(N, 3, H, W)``, oldest first, starting at frame ``index``."""

    frames: torch.Tensor
    index: int = 0
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[1] != 3:
            raise DomainError(f"window frames must be (N, 3, H, W), got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 2:
            raise DomainError("a window needs at least two frames")
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64)
            if len(ts) != len(self) or np.any(np.diff(ts) <= 0):
                raise DomainError("window timestamps must be increasing, one per frame")

    def __len__(self):
        return self.frames.shape[0]

    def batch(self) -> torch.Tensor:
        return self.frames[None]


def sliding_windows(ds: SequenceDataset, N: int, dtype=torch.float32):
    """Every stride-1 window of ``ds``."""
    if len(ds) < N:
        raise DomainError(f"sequence of {len(ds)} frames is shorter than the window length {N}")
    for i in range(len(ds) - N + 1):
        yield SlidingWindow(ds.tensor(i, i + N, dtype), i, ds.timestamps[i : i + N])


@dataclass(frozen=True)
class OptimConfig:
    alpha: float = 1e-4
    halving_interval: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    weight_decay: float = 4e-4
    batch_size_train: int = 4
    batch_size_online: int = 1
    second_order: bool = False
    inner_alpha: Optional[float] = None  # defaults to the scheduled alpha
    window_length: int = 9
    iterations: int = 20000
    meta: bool = True
    stats_iterations: int = 1000
    stats_decay: float = 0.99
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError("alpha must be positive")
        if self.inner_alpha is not None and self.inner_alpha < 0:
            raise DomainError("inner_alpha must be nonnegative")
        if self.halving_interval < 1 or self.iterations < 0:
            raise DomainError("halving_interval must be >= 1 and iterations >= 0")
        if self.window_length < 2:
            raise DomainError("window_length must be at least 2")
        if self.batch_size_train < 1 or self.batch_size_online < 1:
            raise DomainError("batch sizes must be positive")


def learning_rate(alpha0: float, iteration: int, halving_interval: int = 5000) -> float:
    """``alpha0`` halved every ``halving_interval`` iterations."""
    return alpha0 * 0.5 ** (iteration // halving_interval)


# ------------------------------------------------------------------ primitives


def window_loss(model: VONet, params: Optional[Params], window, K: Intrinsics,
                weights: LossWeights = LossWeights()) -> WindowResult:
    """Run ``model`` with ``params`` over a window (``SlidingWindow`` or ``(B, N, 3, H, W)``).

    Recurrent state always starts from zero. Degenerate pairs (no valid
    pixel) are flagged in the result and trigger a warning.
    """
    frames = window.batch() if isinstance(window, SlidingWindow) else window
    if params is None:
        res = model(frames, K, weights)
    else:
        res = functional_call(model, params, (frames, K, weights))
    if bool(res.degenerate.any()):
        warnings.warn("window contains a pair with no valid pixel", DegenerateWindowWarning, stacklevel=2)
    return res


def model_loss_fn(model: VONet, K: Intrinsics, weights: LossWeights = LossWeights()) -> LossFn:
    def fn(params, window):
        return window_loss(model, params, window, K, weights).loss
    return fn


def _finite(grads) -> bool:
    return all(bool(torch.isfinite(g).all()) for g in grads)


class StepResult(NamedTuple):
    params: Params
    loss: float
    skipped: bool


def naive_online_step(loss_fn: LossFn, params: Params, window, alpha: float) -> StepResult:
    """One plain gradient-descent step ``theta - alpha * grad L(theta, window)``.

    A non-finite loss or gradient leaves ``params`` unchanged and sets ``skipped``.
    """
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    names = list(params)
    loss = loss_fn(params, window)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    grads = [torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)]
    loss = float(loss.detach())
    if not (math.isfinite(loss) and _finite(grads)):
        return StepResult(params, loss, True)
    with torch.no_grad():
        new = {n: params[n] - alpha * g for n, g in zip(names, grads)}
    return StepResult(new, loss, False)


def inner_update(loss_fn: LossFn, params: Params, window, alpha: float, second_order: bool = False):
    """Adapted parameters ``theta - alpha * grad L(theta, window)`` kept in the graph.

    First-order mode treats the inner gradient as a constant. Returns
    ``(adapted, inner_loss, inner_grads)``.
    """
    names = list(params)
    loss = loss_fn(params, window)
    if alpha == 0:
        return dict(params), loss, None
    grads = torch.autograd.grad(loss, [params[n] for n in names], create_graph=second_order, allow_unused=True)
    grads = [torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)]
    if not second_order:
        grads = [g.detach() for g in grads]
    adapted = {n: params[n] - alpha * g for n, g in zip(names, grads)}
    return adapted, loss, grads


def meta_objective(loss_fn: LossFn, params: Params, D_i, D_next, alpha: float, second_order: bool = False):
    """``L(theta - alpha * grad L(theta, D_i), D_next)``; returns ``(objective, inner_loss)``."""
    adapted, inner, _ = inner_update(loss_fn, params, D_i, alpha, second_order)
    return loss_fn(adapted, D_next), inner


def _flat(grads) -> torch.Tensor:
    return torch.cat([g.reshape(-1) for g in grads])


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(torch.dot(a, b)) / (na * nb)


def gradient_alignment(loss_fn: LossFn, params: Params, D_i, D_next) -> Tuple[float, float]:
    """Inner product and cosine of ``grad L(theta, D_i)`` and ``grad L(theta, D_next)``."""
    names = list(params)
    flats = []
    for D in (D_i, D_next):
        g = torch.autograd.grad(loss_fn(params, D), [params[n] for n in names], allow_unused=True)
        flats.append(_flat([torch.zeros_like(params[n]) if x is None else x for n, x in zip(names, g)]))
    return float(torch.dot(flats[0], flats[1])), cosine(flats[0], flats[1])


# ------------------------------------------------------------------ meta-training


@dataclass
class TrainResult:
    model: VONet
    source_stats: Optional[FeatureStats]
    log: List[dict]
    completed: bool = True


def sample_pairs(rng: np.random.Generator, datasets: Sequence[SequenceDataset], N: int, batch: int):
    """``batch`` random (dataset index, start frame) pairs with room for ``N + 1`` frames."""
    counts = np.array([len(ds) - N for ds in datasets])
    if np.any(counts < 1):
        raise DomainError(f"every training sequence needs at least {N + 1} frames")
    p = counts / counts.sum()
    out = []
    for _ in range(batch):
        d = int(rng.choice(len(datasets), p=p))
        out.append((d, int(rng.integers(0, counts[d]))))
    return out


def _write_log(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in LOG_COLUMNS])


def read_log(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def meta_train(datasets: Sequence[SequenceDataset], model: VONet, cfg: OptimConfig,
               weights: LossWeights = LossWeights(), seed: int = 0, log_path=None,
               resume_path=None, stop_after: Optional[int] = None) -> TrainResult:
    """Pre-train ``model`` on (D_i, D_{i+1}) window pairs.

    With ``cfg.meta`` the outer AdamW step minimises the meta-objective;
    otherwise it minimises the plain loss on ``D_{i+1}`` of the same sampled
    pairs (standard training; ``inner_loss`` then holds that loss and
    ``outer_loss`` stays empty). Normalisation uses per-sample statistics;
    the source statistics are the EMA of batch statistics over the last
    ``cfg.stats_iterations`` iterations, collected on the forward pass at the
    base parameters. ``resume_path`` stores and restores the full training
    state; ``stop_after`` ends the run early to simulate an interruption.
    """
    if len(datasets) == 0:
        raise DomainError("training needs at least one sequence")
    N = cfg.window_length
    K = datasets[0].K
    for ds in datasets:
        if (ds.K.height, ds.K.width) != (model.cfg.height, model.cfg.width):
            raise DomainError("dataset resolution differs from the model input size")
    tensors = [ds.tensor(0, len(ds), next(model.parameters()).dtype) for ds in datasets]
    rng = np.random.default_rng(seed)
    model.aligner.mode = "instant"
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.alpha, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            weight_decay=cfg.weight_decay)
    ema = SourceStatsEMA(cfg.stats_decay)
    rows: List[dict] = []
    start = 0
    if resume_path is not None and Path(resume_path).is_file():
        state = torch.load(resume_path, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        ema.value = None if state["ema"] is None else FeatureStats.from_state(state["ema"])
        rows = state["log"]
        start = state["iteration"]
        log.info("resumed training at iteration %d", start)

    def save_state(it):
        if resume_path is None:
            return
        torch.save({
            "model": model.state_dict(), "optimizer": opt.state_dict(), "rng": rng.bit_generator.state,
            "ema": None if ema.value is None else ema.value.to_state(), "log": rows, "iteration": it,
        }, resume_path)

    loss_fn = model_loss_fn(model, K, weights)
    names = [n for n, _ in model.named_parameters()]
    stats_from = cfg.iterations - cfg.stats_iterations
    completed = True
    for it in range(start, cfg.iterations):
        if stop_after is not None and it >= stop_after:
            completed = False
            break
        t0 = time.perf_counter()
        lr = learning_rate(cfg.alpha, it, cfg.halving_interval)
        for g in opt.param_groups:
            g["lr"] = lr
        pairs = sample_pairs(rng, datasets, N, cfg.batch_size_train)
        batch = torch.stack([tensors[d][s : s + N + 1] for d, s in pairs])
        D_i, D_next = batch[:, :N], batch[:, 1:]
        params = dict(model.named_parameters())
        collect = it >= stats_from
        cos = None
        if cfg.meta:
            alpha_in = lr if cfg.inner_alpha is None else cfg.inner_alpha
            if collect:
                model.aligner.begin_collect()
            if alpha_in == 0:
                with torch.no_grad():
                    inner = loss_fn(params, D_i)
                adapted, g_in = params, None
            else:
                adapted, inner, g_in = inner_update(loss_fn, params, D_i, alpha_in, cfg.second_order)
            if collect:
                ema.update(model.aligner.end_collect())
            outer = loss_fn(adapted, D_next)
            grads = torch.autograd.grad(outer, [params[n] for n in names])
            if g_in is not None:
                cos = cosine(_flat(g_in).detach(), _flat(grads))
            inner_v, outer_v = inner.item(), outer.item()
        else:
            if collect:
                model.aligner.begin_collect()
            loss = loss_fn(params, D_next)
            if collect:
                ema.update(model.aligner.end_collect())
            grads = torch.autograd.grad(loss, [params[n] for n in names])
            inner_v, outer_v = loss.item(), None
        if _finite(grads):
            for n, g in zip(names, grads):
                params[n].grad = g
            opt.step()
            opt.zero_grad(set_to_none=True)
        else:
            log.warning("iteration %d: non-finite gradient, step skipped", it)
        rows.append({"iteration": it, "inner_loss": inner_v, "outer_loss": outer_v, "grad_cosine": cos,
                     "lr": lr, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_state(it + 1)
            if log_path is not None:
                _write_log(log_path, rows)
    if not completed:
        save_state(len(rows))
    if log_path is not None:
        _write_log(log_path, rows)
    model.aligner.mode = "instant"
    return TrainResult(model, ema.value, rows, completed)


# ------------------------------------------------------------------ online adaptation


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "meta"
    window_length: int = 9
    alpha: float = 1e-4
    second_order: bool = False
    lstm: bool = True
    fa: bool = True
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self):
        if self.mode not in ONLINE_MODES:
            raise DomainError(f"online mode must be one of {ONLINE_MODES}, got {self.mode!r}")
        if self.window_length < 2:
            raise DomainError("window_length must be at least 2")
        if self.alpha < 0:
            raise DomainError("alpha must be nonnegative")


@dataclass
class AdaptationReport:
    rows: List[dict] = field(default_factory=list)
    stats: List[Tuple[int, FeatureStats]] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def photometric(self) -> np.ndarray:
        return np.array([r["photometric"] for r in self.rows], dtype=np.float64)

    def final_quartile(self) -> float:
        p = self.photometric()
        if len(p) == 0:
            return float("nan")
        return float(np.mean(p[len(p) - max(1, len(p) // 4):]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in self.header.items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in REPORT_COLUMNS])


class AdaptResult(NamedTuple):
    poses: List[Tuple[float, PoseSE3]]
    report: AdaptationReport
    model: VONet


def _to_pose(euler: torch.Tensor, trans: torch.Tensor) -> PoseSE3:
    e = euler.detach().double().numpy()
    return PoseSE3.from_euler(*e, translation=trans.detach().double().numpy())


def _frames(stream):
    for k, item in enumerate(stream):
        if isinstance(item, tuple):
            yield float(item[0]), item[1]
        else:
            yield float(k), item


def online_adapt(stream: Iterable, model: VONet, source_stats: Optional[FeatureStats], K: Intrinsics,
                 cfg: AdaptConfig = AdaptConfig(), weights: LossWeights = LossWeights()) -> AdaptResult:
    """Estimate poses over a frame stream while adapting ``model`` in place.

    ``stream`` yields ``(3, H, W)`` frames or ``(timestamp, frame)`` pairs.
    For each new window ``D_i``: the aligned statistics are updated from the
    statistics observed on ``D_i``, the relative pose of the newest pair (all
    pairs for the first window) is emitted, and only then are the weights
    updated. ``naive`` takes a gradient step on ``D_i``. ``meta`` adapts
    ``theta`` on ``D_{i-1}``, predicts ``D_i`` with the adapted parameters
    and steps ``theta`` along the gradient of that prediction's loss, which
    is the meta-objective on the pair ``(D_{i-1}, D_i)``.
    """
    N = cfg.window_length
    model.lstm_enabled = cfg.lstm
    aligner = model.aligner
    use_fa = cfg.fa and source_stats is not None
    if cfg.fa and source_stats is None:
        warnings.warn("checkpoint has no source statistics; feature alignment disabled", stacklevel=2)
    if use_fa:
        aligner.mode = "aligned"
        aligner.stats = source_stats.copy()
    else:
        aligner.mode = "instant"
    report = AdaptationReport(header={"mode": cfg.mode, "lstm": cfg.lstm, "fa": use_fa, "window_length": N,
                                      "alpha": cfg.alpha, "beta": cfg.align.beta})
    loss_fn = model_loss_fn(model, K, weights)
    names = [n for n, _ in model.named_parameters()]
    poses: List[Tuple[float, PoseSE3]] = []
    buf: deque = deque(maxlen=N)
    stamps: deque = deque(maxlen=N)
    prev_window = None
    i = 0
    for ts, frame in _frames(stream):
        buf.append(frame)
        stamps.append(ts)
        if len(buf) < N:
            continue
        t0 = time.perf_counter()
        window = torch.stack(list(buf))[None]
        if use_fa:
            with torch.no_grad():
                aligner.begin_collect()
                try:
                    model(window, K, weights)
                finally:
                    observed = aligner.end_collect()
            aligner.stats = align_stats(aligner.stats, observed, cfg.align.beta)
            report.stats.append((i, aligner.stats.copy()))
        params = dict(model.named_parameters())
        meta_step = cfg.mode == "meta" and prev_window is not None and cfg.alpha > 0
        row = {"window": i, "inner_loss": float("nan"), "outer_loss": float("nan"), "grad_inner": float("nan"),
               "grad_cosine": float("nan"), "photometric": float("nan"), "skipped": 0, "wall_ms": 0.0}
        if meta_step:
            # predictions come from theta adapted on the previous window, the
            # quantity the meta-objective optimises; its loss is the outer loss
            adapted, inner, g_in = inner_update(loss_fn, params, prev_window, cfg.alpha, cfg.second_order)
            res = window_loss(model, adapted, window, K, weights)
            row["inner_loss"], row["outer_loss"] = inner.item(), res.loss.item()
        else:
            with torch.set_grad_enabled(cfg.mode == "naive" and cfg.alpha > 0):
                res = window_loss(model, params, window, K, weights)
            row["inner_loss"] = res.loss.item()
        row["photometric"] = res.photometric.item()
        first = N - 1 if i == 0 else 1
        for k in range(N - first, N):
            poses.append((stamps[k], _to_pose(res.euler[0, k - 1], res.translation[0, k - 1])))
        if meta_step:
            grads = torch.autograd.grad(res.loss, [params[n] for n in names])
            a, b = _flat(g_in).detach(), _flat(grads)
            row["grad_inner"], row["grad_cosine"] = float(torch.dot(a, b)), cosine(a, b)
            _apply(params, names, grads, cfg.alpha, row)
        elif cfg.mode == "naive" and cfg.alpha > 0:
            grads = torch.autograd.grad(res.loss, [params[n] for n in names])
            _apply(params, names, grads, cfg.alpha, row)
        prev_window = window
        row["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        report.rows.append(row)
        i += 1
    if i == 0 and len(buf) >= 2:
        warnings.warn(f"stream of {len(buf)} frames is shorter than the window length {N}; no adaptation",
                      stacklevel=2)
        with torch.no_grad():
            res = model(torch.stack(list(buf))[None], K, weights)
        for k in range(1, len(buf)):
            poses.append((stamps[k], _to_pose(res.euler[0, k - 1], res.translation[0, k - 1])))
    return AdaptResult(poses, report, model)


def _apply(params, names, grads, alpha, row) -> None:
    if not _finite(grads):
        row["skipped"] = 1
        log.warning("window %s: non-finite gradient, update skipped", row["window"])
        return
    with torch.no_grad():
        for n, g in zip(names, grads):
            params[n].sub_(alpha * g)


def dataset_stream(ds: SequenceDataset, dtype=torch.float32):
    """``(timestamp, frame)`` pairs of a dataset in order."""
    for k in range(len(ds)):
        yield float(ds.timestamps[k]), torch.from_numpy(ds.frame(k)).permute(2, 0, 1).to(dtype)
