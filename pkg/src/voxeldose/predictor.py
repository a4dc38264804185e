"""Scout-based organ dose regressor: shared convolutional trunk, one head per label.

Each head is FC(256) -> LeakyReLU(0.2) -> FC(1) -> sigmoid and predicts a
min-max normalized dose; :class:`DosePredictor` carries the per-label
bounds needed to return mGy.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dosimetry import LABELS
from .scout import CHANNELS, ModelInput

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "voxeldose-predictor/1"


@dataclass
class ArchConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    stem_pool: int = 2
    head_hidden: int = 256
    n_labels: int = len(LABELS)


class ScoutNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers: list[nn.Module] = []
        if arch.stem_pool > 1:
            layers.append(nn.AvgPool2d(arch.stem_pool))
        c_in = arch.in_channels
        for w in arch.widths:
            layers += [nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = w
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleList(
            nn.Sequential(
                nn.Linear(c_in, arch.head_hidden),
                nn.LeakyReLU(0.2),
                nn.Linear(arch.head_hidden, 1),
                nn.Sigmoid(),
            )
            for _ in range(arch.n_labels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.trunk(x)
        return torch.cat([h(feats) for h in self.heads], dim=1)


def dose_loss(d: torch.Tensor, d_hat: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Batch mean over samples of the per-label L2 norms summed over labels.

    For scalar labels each norm is an absolute error; ``squared=True`` uses
    squared errors instead.
    """
    if d.shape != d_hat.shape:
        raise ValueError(f"target shape {tuple(d.shape)} != prediction shape {tuple(d_hat.shape)}")
    diff = (d - d_hat).unsqueeze(-1)
    if squared:
        per = (diff**2).squeeze(-1)
    else:
        per = torch.linalg.vector_norm(diff, ord=2, dim=-1)
    return per.sum(dim=1).mean()


def dose_bounds(doses: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Per-label (min, max) widened by ``margin`` of the range; shape (n_labels, 2)."""
    d = np.atleast_2d(np.asarray(doses, dtype=float))
    lo, hi = d.min(axis=0), d.max(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, np.maximum(np.abs(hi), 1e-6))
    return np.stack([lo - margin * span, hi + margin * span], axis=1)


def normalize_dose(v, bounds: np.ndarray) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if np.any(b[:, 1] <= b[:, 0]):
        raise ValueError("degenerate normalization bounds (min >= max)")
    return (np.asarray(v, dtype=float) - b[:, 0]) / (b[:, 1] - b[:, 0])


def denormalize_dose(v, bounds: np.ndarray) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if np.any(b[:, 1] <= b[:, 0]):
        raise ValueError("degenerate normalization bounds (min >= max)")
    return np.asarray(v, dtype=float) * (b[:, 1] - b[:, 0]) + b[:, 0]


def augment(x: np.ndarray, d, rng: np.random.Generator, p_flip: float = 0.5, sigma: float = 0.01,
            flip: bool | None = None, range_channel: int = 2):
    """Random vertical flip of all channels plus Gaussian noise on scout channels.

    ``x`` is ``(channels, rows, cols)``; targets are returned untouched.
    Pass ``flip`` to force the flip decision.
    """
    out = np.asarray(x)
    do_flip = bool(rng.random() < p_flip) if flip is None else flip
    if do_flip:
        out = out[:, ::-1, :]
    if sigma > 0:
        out = out.astype(np.float32, copy=True)
        scouts = [c for c in range(out.shape[0]) if c != range_channel]
        out[scouts] += rng.normal(0.0, sigma, size=(len(scouts),) + out.shape[1:]).astype(np.float32)
    else:
        out = out.copy()
    return out, d


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 150
    batch_size: int = 16
    flip: bool = True
    noise_sigma: float = 0.01
    seed: int = 0
    channels: tuple[str, ...] = CHANNELS
    widths: tuple[int, ...] = (16, 32, 64, 128)
    stem_pool: int = 2
    margin: float = 0.05
    squared_loss: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    threads: int = 1
    cosine_decay: bool = False  # anneal lr to 0 over the run; off reproduces a constant rate
    micro_batch: int = 8  # gradient unit; threads only schedule micro-batches

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if not self.channels or any(c not in CHANNELS for c in self.channels):
            raise ValueError(f"channels must be drawn from {CHANNELS}")


@dataclass
class DosePredictor:
    net: ScoutNet
    arch: ArchConfig
    bounds: np.ndarray
    labels: tuple[str, ...] = LABELS
    channels: tuple[str, ...] = CHANNELS
    history: list[dict] = field(default_factory=list)
    timings_ms: list[float] = field(default_factory=list)
    input_bounds: dict = field(default_factory=dict)  # scout (min, max) per view

    def _select(self, x: np.ndarray) -> np.ndarray:
        idx = [CHANNELS.index(c) for c in self.channels]
        return x[:, idx] if x.ndim == 4 else x[idx]

    def forward(self, x) -> np.ndarray:
        """Normalized predictions in (0, 1), shape (batch, n_labels)."""
        arr = _as_batch(x)
        if arr.shape[1] != len(CHANNELS):
            raise ValueError(f"expected {len(CHANNELS)} input channels, got {arr.shape[1]}")
        p = next(self.net.parameters())
        t = torch.as_tensor(np.ascontiguousarray(self._select(arr)), dtype=p.dtype)
        self.net.eval()
        with torch.no_grad():
            return self.net(t).double().numpy()

    def predict(self, inputs, batch_size: int = 8) -> np.ndarray:
        """Doses in mGy, shape (n, n_labels); per-scan wall time is appended to ``timings_ms``."""
        if self.bounds is None:
            raise ValueError("predictor has no normalization bounds")
        arr = _as_batch(inputs)
        out = []
        for i in range(0, len(arr), batch_size):
            chunk = arr[i:i + batch_size]
            t0 = time.perf_counter()
            norm = self.forward(chunk)
            dt = (time.perf_counter() - t0) * 1000 / len(chunk)
            self.timings_ms.extend([dt] * len(chunk))
            out.append(denormalize_dose(norm, self.bounds))
        return np.vstack(out)

    def predict_dict(self, x) -> dict[str, float]:
        return dict(zip(self.labels, self.predict(x)[0]))

    # --- checkpoint ---------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "labels": list(self.labels),
            "channels": list(self.channels),
            "bounds": np.asarray(self.bounds).tolist(),
            "arch": asdict(self.arch),
            "dtype": str(next(self.net.parameters()).dtype).replace("torch.", ""),
            "input_bounds": {k: list(v) for k, v in self.input_bounds.items()},
        }
        blobs = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **blobs)

    @classmethod
    def load(cls, path) -> "DosePredictor":
        with np.load(Path(path)) as z:
            header = json.loads(bytes(z["header"]).decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
            arch_d = header["arch"]
            arch_d["widths"] = tuple(arch_d["widths"])
            arch = ArchConfig(**arch_d)
            net = ScoutNet(arch)
            dtype = getattr(torch, header.get("dtype", "float32"))
            net.to(dtype)
            state = {k[len("param/"):]: torch.as_tensor(z[k]) for k in z.files if k.startswith("param/")}
        net.load_state_dict(state)
        input_bounds = {k: tuple(v) for k, v in header.get("input_bounds", {}).items()}
        return cls(net, arch, np.asarray(header["bounds"]), tuple(header["labels"]),
                   tuple(header["channels"]), input_bounds=input_bounds)


def _as_batch(x) -> np.ndarray:
    if isinstance(x, ModelInput):
        return x.data[None]
    if isinstance(x, (list, tuple)):
        return np.stack([xi.data if isinstance(xi, ModelInput) else np.asarray(xi) for xi in x])
    arr = np.asarray(x)
    return arr[None] if arr.ndim == 3 else arr


def build_predictor(cfg: TrainConfig, bounds: np.ndarray, dtype=torch.float32) -> DosePredictor:
    torch.manual_seed(cfg.seed)
    arch = ArchConfig(in_channels=len(cfg.channels), widths=tuple(cfg.widths), stem_pool=cfg.stem_pool)
    net = ScoutNet(arch).to(dtype)
    b = None if bounds is None else np.asarray(bounds, dtype=float)
    return DosePredictor(net, arch, b, LABELS, tuple(cfg.channels))


def train(
    inputs,
    doses: np.ndarray,
    cfg: TrainConfig,
    val: tuple | None = None,
    bounds: np.ndarray | None = None,
    dtype=torch.float32,
) -> DosePredictor:
    """Fit a predictor with Adam on the dose loss.

    ``inputs`` is a list of :class:`ModelInput` or an array
    ``(n, 3, rows, cols)``; ``doses`` is ``(n, n_labels)`` in mGy. Bounds
    default to the training doses widened by ``cfg.margin``. ``val`` is an
    optional ``(inputs, doses)`` pair evaluated after every epoch.
    The loss history is stored on ``model.history``.
    """
    cfg.validate()
    x_all = _as_batch(inputs)
    y_all = np.asarray(doses, dtype=float)
    if len(x_all) == 0:
        raise ValueError("empty training fold")
    if len(x_all) != len(y_all):
        raise ValueError("inputs and doses differ in length")
    # Every op runs single-threaded and micro-batch gradients are summed in a
    # fixed order, so the parameters do not depend on cfg.threads.
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        bounds = dose_bounds(y_all, cfg.margin) if bounds is None else np.asarray(bounds)
        model = build_predictor(cfg, bounds, dtype)
        params = [p for p in model.net.parameters()]
        y_norm = torch.as_tensor(normalize_dose(y_all, bounds), dtype=dtype)
        sel = [CHANNELS.index(c) for c in cfg.channels]
        rng = np.random.default_rng(cfg.seed)
        opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs) if cfg.cosine_decay else None
        n = len(x_all)
        if val is not None:
            xv = _as_batch(val[0])
            yv = torch.as_tensor(normalize_dose(np.asarray(val[1], dtype=float), bounds), dtype=dtype)

        def grad_of(xb, yb):
            loss = dose_loss(yb, model.net(xb), cfg.squared_loss) * len(yb)
            return loss.detach(), torch.autograd.grad(loss, params)

        for epoch in range(1, cfg.epochs + 1):
            model.net.train()
            order = rng.permutation(n)
            total = 0.0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                batch = []
                for i in idx:
                    xi = x_all[i]
                    if cfg.flip or cfg.noise_sigma > 0:
                        xi, _ = augment(xi, None, rng, p_flip=0.5 if cfg.flip else 0.0, sigma=cfg.noise_sigma)
                    batch.append(xi[sel])
                xb = torch.as_tensor(np.ascontiguousarray(np.stack(batch)), dtype=dtype)
                parts = [(xb[j:j + cfg.micro_batch], y_norm[idx[j:j + cfg.micro_batch]])
                         for j in range(0, len(idx), cfg.micro_batch)]
                outs = list(pool.map(lambda a: grad_of(*a), parts)) if pool else [grad_of(*a) for a in parts]
                loss = outs[0][0]
                grads = list(outs[0][1])
                for l_k, g_k in outs[1:]:
                    loss = loss + l_k
                    grads = [g + h for g, h in zip(grads, g_k)]
                loss = loss / len(idx)
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, batch starting {s}: {loss.item()}"
                    )
                for p, g in zip(params, grads):
                    p.grad = g / len(idx)
                opt.step()
                total += loss.item() * len(idx)
            if sched is not None:
                sched.step()
            rec = {"epoch": epoch, "train_loss": total / n, "val_loss": float("nan")}
            if val is not None:
                model.net.eval()
                with torch.no_grad():
                    pv = model.net(torch.as_tensor(np.ascontiguousarray(xv[:, sel]), dtype=dtype))
                    rec["val_loss"] = float(dose_loss(yv, pv, cfg.squared_loss))
            model.history.append(rec)
            if epoch % 25 == 0 or epoch == 1:
                log.info("epoch %d train %.5f val %.5f", epoch, rec["train_loss"], rec["val_loss"])
    finally:
        if pool is not None:
            pool.shutdown()
        torch.set_num_threads(prev_threads)
    return model


def write_training_log(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for r in history:
            fh.write(f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r}\n")


def parameter_groups(net: ScoutNet) -> dict[str, nn.Parameter]:
    return dict(net.named_parameters())


def finite_difference_check(net: ScoutNet, x: torch.Tensor, d: torch.Tensor, eps: float = 1e-4,
                            seed: int = 0, squared: bool = False) -> float:
    """Worst relative error between autograd and central differences of the loss.

    For every parameter tensor the directional derivative is checked along a
    random Gaussian direction and along the gradient itself with a
    fourth-order central stencil. Steps ``eps, eps/10, ..., eps/1000`` are
    tried; a stencil that straddles a kink of the piecewise-linear parts
    disagrees with its neighbour, so the estimate from the most
    self-consistent adjacent pair is used. Run in float64.
    """
    gen = torch.Generator().manual_seed(seed)
    net.zero_grad()
    dose_loss(d, net(x), squared).backward()
    worst = 0.0

    def f() -> float:
        with torch.no_grad():
            return float(dose_loss(d, net(x), squared))

    def stencil(p, v, h) -> float:
        vals = []
        with torch.no_grad():
            for k in (2, 1, -1, -2):
                p.add_(v, alpha=k * h)
                vals.append(f())
                p.add_(v, alpha=-k * h)
        f2, f1, fm1, fm2 = vals
        return (-f2 + 8 * f1 - 8 * fm1 + fm2) / (12 * h)

    for _, p in net.named_parameters():
        g = p.grad.detach().clone()
        if float(g.abs().max()) == 0.0:
            continue
        probes = [torch.randn(p.shape, generator=gen, dtype=p.dtype), g / g.norm()]
        for v in probes:
            an = float((g * v).sum())
            est = [stencil(p, v, eps * 10.0 ** -k) for k in range(4)]
            k = min(range(3), key=lambda i: abs(est[i] - est[i + 1]) / max(abs(est[i]), 1e-300))
            fd = est[k + 1]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst
