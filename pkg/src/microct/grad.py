"""Reverse-mode gradients of the unrolled network, Adam and the training loop.

The loss is the mean squared error over a batch and all pixels.  Per-sample
gradients are computed in fixed-size chunks and summed in sample order, so
the result does not depend on how many worker threads process the chunks.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergedError
from .masks import build_mask
from .metrics import psnr
from .unrolled import (
    ForwardTrace,
    LayerParams,
    NetworkParams,
    SubbandCorrection,
    default_filter_gain,
    init_params,
    load_params,
    psidonet_forward,
    save_params,
)
from .wavelet import haar_analyze_array, haar_synthesize_array
from .xray import XRayTransform


@dataclass
class ParamGradients:
    layers: list[LayerParams]

    def to_vector(self) -> np.ndarray:
        parts = []
        for lp in self.layers:
            parts.append(np.array([lp.alpha, lp.beta, lp.gamma]))
            parts.append(lp.filters.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


def _block_size(params: NetworkParams) -> int:
    return 3 + params.num_subbands ** 2 * params.mask.size ** 2


def _sample_gradients(params: NetworkParams, trace: ForwardTrace, gu: np.ndarray,
                      op: XRayTransform) -> np.ndarray:
    """Per-sample gradient rows ``(B, P)`` given ``dLoss/du`` of shape ``(B, n, n)``."""
    L = params.levels
    K = params.num_blocks
    if len(trace.pre) != K:
        raise InvalidArgumentError(f"trace holds {len(trace.pre)} layers, network has {K}")
    B = gu.shape[0]
    per = _block_size(params)
    out = np.zeros((B, K * per))
    corr = SubbandCorrection(params.geometry.image_size, L, params.mask) if K else None
    gw = haar_analyze_array(gu, L)
    for k in range(K - 1, -1, -1):
        lp = params.layers[k]
        z = trace.pre[k]
        active = np.abs(z) > abs(lp.gamma)
        gz = np.where(active, gw, 0.0)
        base = k * per
        out[:, base] = np.sum(gz * (trace.data_term - trace.normal[k]), axis=(1, 2))
        out[:, base + 1] = -np.sum(gz * trace.corrected[k], axis=(1, 2))
        sgn = 1.0 if lp.gamma >= 0 else -1.0
        out[:, base + 2] = -sgn * np.sum(gz * np.sign(z), axis=(1, 2))
        if lp.beta != 0.0:
            dz = -lp.beta * params.filter_gain * corr.filter_gradient(gz, trace.inputs[k])
            out[:, base + 3:base + per] = dz.reshape(B, -1)
        if k == 0:
            break
        n_gz = haar_analyze_array(op.normal(haar_synthesize_array(gz, L)), L)
        gw = gz - lp.alpha * n_gz
        if lp.beta != 0.0 and np.any(lp.filters):
            gw = gw - lp.beta * corr.adjoint(gz, corr.prepare(params.filter_gain * lp.filters))
    return out


def _split(params: NetworkParams, vec: np.ndarray) -> ParamGradients:
    q, p = params.num_subbands, params.mask.size
    per = _block_size(params)
    layers = []
    for k in range(params.num_blocks):
        c = vec[k * per:(k + 1) * per]
        layers.append(LayerParams(float(c[0]), float(c[1]), float(c[2]), c[3:].reshape(q, q, p, p).copy()))
    return ParamGradients(layers)


def backward(m: np.ndarray, params: NetworkParams, trace: ForwardTrace, target: np.ndarray,
             output: np.ndarray | None = None, op: XRayTransform | None = None
             ) -> tuple[float, ParamGradients]:
    """MSE loss of the traced forward pass and its parameter gradients."""
    op = op or params.operator()
    target = np.asarray(target, dtype=np.float64)
    single = target.ndim == 2
    tb = target[None] if single else target
    u = haar_synthesize_array(trace.output, params.levels) if output is None else np.asarray(output)
    u = u[None] if u.ndim == 2 else u
    if u.shape != tb.shape:
        raise InvalidArgumentError(f"target shape {target.shape} does not match output {u.shape}")
    count = tb.size
    diff = u - tb
    loss = float(np.sum(diff * diff) / count)
    rows = _sample_gradients(params, trace, 2.0 * diff / count, op)
    total = np.zeros(rows.shape[1])
    for r in rows:
        total += r
    return loss, _split(params, total)


def loss_and_gradient(params: NetworkParams, sinos: np.ndarray, targets: np.ndarray,
                      op: XRayTransform, chunk: int = 5, threads: int = 1) -> tuple[float, np.ndarray]:
    """Batch MSE and flat gradient; reduction order is the sample order."""
    B = sinos.shape[0]
    npix = targets.shape[-1] * targets.shape[-2]
    bounds = [(s, min(s + chunk, B)) for s in range(0, B, chunk)]

    def work(b):
        s, e = b
        u, trace = psidonet_forward(sinos[s:e], params, op=op)
        diff = u - targets[s:e]
        sq = np.sum(diff * diff, axis=(1, 2))
        rows = _sample_gradients(params, trace, 2.0 * diff / npix, op)
        acc = np.zeros(rows.shape[1])
        for r in rows:
            acc += r
        return float(np.sum(sq)), acc

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, bounds))
    else:
        results = [work(b) for b in bounds]
    grad = np.zeros(results[0][1].size)
    sq = 0.0
    for s, g in results:
        grad += g
        sq += s
    return sq / (B * npix), grad / B


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              t: int | None = None) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on flat vectors."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise InvalidArgumentError("Adam step counter must be at least 1")
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    blocks: int = 10
    filter_size: int = 17
    mask: str = "full"
    q: int = 0
    levels: int = 3
    epochs: int = 15
    batch: int = 25
    lr: float = 1e-3
    lambda0: float = 1e-3
    seed: int = 0
    chunk: int = 5
    threads: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_samples: int = 0          # 0 means the whole test split
    filter_gain: float = 0.0      # 0 selects default_filter_gain

    def __post_init__(self):
        if self.blocks < 1:
            raise InvalidArgumentError("blocks must be at least 1")
        if self.epochs < 0 or self.batch < 1 or self.chunk < 1 or self.threads < 1:
            raise InvalidArgumentError("epochs, batch, chunk and threads must be positive")
        if self.lr < 0 or self.lambda0 < 0:
            raise InvalidArgumentError("lr and lambda0 must be non-negative")

    def to_dict(self) -> dict:
        # the worker count never changes results, so it is not part of the record
        d = asdict(self)
        d.pop("threads")
        return d


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        return [r["loss"] for r in self.rows if r["batch"] == "epoch"]

    def write_csv(self, path) -> None:
        cols = ["epoch", "batch", "loss", "val_psnr", "wall_time"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c, "") for c in cols})


def validation_psnr(params: NetworkParams, sinos: np.ndarray, images: np.ndarray,
                    op: XRayTransform | None = None, chunk: int = 5) -> float:
    op = op or params.operator()
    vals = []
    for s in range(0, sinos.shape[0], chunk):
        u, _ = psidonet_forward(sinos[s:s + chunk], params, op=op)
        vals.extend(psnr(a, b) for a, b in zip(u, images[s:s + chunk]))
    return float(np.mean(vals)) if vals else math.nan


def train(dataset, config: TrainConfig, checkpoint: str | Path | None = None,
          log_path: str | Path | None = None, progress=None) -> tuple[NetworkParams, TrainLog]:
    """Fit a network to the training split of ``dataset``.

    Per-epoch validation PSNR is measured on the test split (for logging
    only).  The checkpoint, if given, is rewritten after every epoch, so a
    diverged run leaves the last good state on disk.
    """
    g = dataset.geometry
    mask = build_mask(config.mask, g.angle_set, config.filter_size, config.q)
    if config.filter_size > g.image_size:
        raise InvalidArgumentError("filter size exceeds the image side")
    gain = config.filter_gain or default_filter_gain(mask, config.levels)
    params = init_params(g, config.blocks, mask, config.levels, config.lambda0,
                         scale=dataset.scale, filter_gain=gain)
    params.meta = {"train": config.to_dict()}
    op = params.operator()
    X, Y = dataset.sinograms["train"], dataset.images["train"]
    Xv, Yv = dataset.sinograms["test"], dataset.images["test"]
    if config.val_samples:
        Xv, Yv = Xv[: config.val_samples], Yv[: config.val_samples]
    N = X.shape[0]
    if N == 0:
        raise InvalidArgumentError("training split is empty")
    rng = np.random.default_rng(config.seed)
    vec = params.to_vector()
    state = AdamState.zeros(vec.size)
    log = TrainLog()
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        seen, total = 0, 0.0
        for bi, s in enumerate(range(0, N, config.batch)):
            idx = order[s:s + config.batch]
            loss, grad = loss_and_gradient(params, X[idx], Y[idx], op, config.chunk, config.threads)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}; "
                    f"last good checkpoint: {checkpoint or 'none'}")
            vec, state = adam_step(vec, grad, state, config.lr, config.beta1, config.beta2, config.eps)
            params = params.with_vector(vec)
            total += loss * len(idx)
            seen += len(idx)
            log.rows.append({"epoch": epoch, "batch": bi, "loss": loss,
                             "wall_time": round(time.perf_counter() - start, 3)})
        vp = validation_psnr(params, Xv, Yv, op, config.chunk) if len(Xv) else math.nan
        log.rows.append({"epoch": epoch, "batch": "epoch", "loss": total / seen, "val_psnr": vp,
                         "wall_time": round(time.perf_counter() - start, 3)})
        if progress:
            progress(epoch, total / seen, vp)
        if checkpoint:
            save_adam(checkpoint, params, state)
        if log_path:
            log.write_csv(log_path)
    if config.epochs == 0 and checkpoint:
        save_adam(checkpoint, params, state)
    if log_path:
        log.write_csv(log_path)
    return params, log


def save_adam(path, params: NetworkParams, state: AdamState) -> None:
    save_params(path, params, trailing=[state.m, state.v], extra={"adam": {"t": state.t}})


def load_checkpoint(path) -> tuple[NetworkParams, AdamState | None]:
    params, trailing, head = load_params(path)
    adam = head.get("adam")
    if adam and len(trailing) == 2:
        return params, AdamState(trailing[0], trailing[1], int(adam["t"]))
    return params, None
