"""Learned inverse sensor model: a small numpy encoder-decoder that maps
a binary aggregated-detection image to per-cell class probabilities.

All layers carry hand-written backward passes (no autodiff, no GPU).
Parameters are float32 throughout, matching the on-disk payload;
gradient checking runs on float64 copies.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import IGNORE, GridSpec, LabelGrid
from .lovasz import ProbMap, _lovasz_flat, PROB_FLOOR
from .metrics import N_CLASSES, ConfusionCounts, confusion, iou_per_class, miou


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns NaN/inf."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    decay: float = 0.9
    plateau_patience: int = 2
    plateau_delta: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    flip_prob: float = 0.5
    k: int = 20  # aggregation window used when building the dataset
    seed: int = 0


@dataclass(eq=False)
class OccNetModel:
    """Encoder-decoder with skip connections; all convolutions are 3x3."""

    in_channels: int
    widths: tuple[int, ...]
    n_classes: int
    seed: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


# ---------------------------------------------------------------------------
# layers: forward and backward


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution with zero padding 1.

    x is (batch, c_in, h, w); w is (c_out, c_in, 3, 3); b is (c_out,).
    """
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    y = np.tensordot(win, w, axes=[(1, 4, 5), (1, 2, 3)])
    return np.moveaxis(y, 3, 1) + b[None, :, None, None]


def conv3x3_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Gradients (dx, dw, db) of the 3x3 convolution."""
    dy = np.ascontiguousarray(dy)
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win_dy = sliding_window_view(dyp, (3, 3), axis=(2, 3))
    wflip = w[:, :, ::-1, ::-1]
    dx = np.tensordot(win_dy, wflip, axes=[(1, 4, 5), (0, 2, 3)])
    dx = np.moveaxis(dx, 3, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win_x = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dw = np.tensordot(dy, win_x, axes=[(0, 2, 3), (0, 2, 3)])
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool2x2_forward(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2x2 needs even spatial dims")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def maxpool2x2_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Routes each gradient to the first max within its 2x2 window
    (row-major order inside the window)."""
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    am = np.argmax(win, axis=-1)  # first occurrence on ties
    onehot = am[..., None] == np.arange(4)
    d4 = dy[..., None] * onehot
    return d4.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(dy: np.ndarray, c_a: int):
    return dy[:, :c_a], dy[:, c_a:]


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    inner = (p * dp).sum(axis=1, keepdims=True)
    return p * (dp - inner)


# ---------------------------------------------------------------------------
# model assembly


def _conv_names(model: OccNetModel):
    names = []
    for i in range(model.depth + 1):
        names += [f"enc{i}_conv1", f"enc{i}_conv2"]
    for i in reversed(range(model.depth)):
        names += [f"dec{i}_conv1", f"dec{i}_conv2"]
    names.append("head")
    return names


def init_model(
    in_channels: int = 1,
    widths=(16, 32, 64),
    n_classes: int = N_CLASSES,
    seed: int = 0,
) -> OccNetModel:
    """Seeded fan-in-scaled uniform init; biases start at zero."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("need at least two stages")
    model = OccNetModel(in_channels, widths, n_classes, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def add_conv(name, c_in, c_out):
        bound = math.sqrt(6.0 / (c_in * 9))
        model.params[name + "_w"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(np.float32)
        model.params[name + "_b"] = np.zeros(c_out, dtype=np.float32)

    d = model.depth
    c = in_channels
    for i in range(d + 1):
        add_conv(f"enc{i}_conv1", c, widths[i])
        add_conv(f"enc{i}_conv2", widths[i], widths[i])
        c = widths[i]
    for i in reversed(range(d)):
        add_conv(f"dec{i}_conv1", widths[i + 1] + widths[i], widths[i])
        add_conv(f"dec{i}_conv2", widths[i], widths[i])
    add_conv("head", widths[0], n_classes)
    return model


def _forward(model: OccNetModel, x: np.ndarray, tape: list | None = None) -> np.ndarray:
    """Forward pass on a padded (b, c, h, w) batch; optionally records a
    tape for the backward walk."""
    p = model.params
    d = model.depth

    def conv(name, h):
        if tape is not None:
            tape.append(("conv", name, h))
        return conv3x3_forward(h, p[name + "_w"], p[name + "_b"])

    def act(h):
        if tape is not None:
            tape.append(("relu", h))
        return relu_forward(h)

    skips = []
    h = x
    for i in range(d + 1):
        h = act(conv(f"enc{i}_conv1", h))
        h = act(conv(f"enc{i}_conv2", h))
        if i < d:
            skips.append(h)
            if tape is not None:
                tape.append(("skip_out", i))
                tape.append(("pool", h))
            h = maxpool2x2_forward(h)
    for i in reversed(range(d)):
        if tape is not None:
            tape.append(("up",))
        h = upsample2x_forward(h)
        if tape is not None:
            tape.append(("concat", i, h.shape[1]))
        h = concat_channels(h, skips[i])
        h = act(conv(f"dec{i}_conv1", h))
        h = act(conv(f"dec{i}_conv2", h))
    return conv("head", h)


def _backward(model: OccNetModel, tape: list, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    grads = {}
    skip_grads: dict[int, np.ndarray] = {}
    d = dlogits
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "conv":
            _, name, x_saved = entry
            dx, dw, db = conv3x3_backward(x_saved, p[name + "_w"], d)
            grads[name + "_w"] = grads.get(name + "_w", 0) + dw
            grads[name + "_b"] = grads.get(name + "_b", 0) + db
            d = dx
        elif kind == "relu":
            d = relu_backward(entry[1], d)
        elif kind == "pool":
            d = maxpool2x2_backward(entry[1], d)
        elif kind == "skip_out":
            d = d + skip_grads.pop(entry[1])
        elif kind == "up":
            d = upsample2x_backward(d)
        elif kind == "concat":
            _, slot, c_main = entry
            d, d_skip = concat_channels_backward(d, c_main)
            skip_grads[slot] = d_skip
        else:  # pragma: no cover
            raise AssertionError(f"unknown tape entry {kind}")
    for name, arr in p.items():
        grads.setdefault(name, np.zeros_like(arr))
    return grads


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, int, int]:
    """Reflect-pad the trailing spatial dims up to a multiple; returns pads."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pad, mode="reflect")
    return x, ph, pw


def _prep_input(model: OccNetModel, grid: np.ndarray, dtype) -> tuple[np.ndarray, int, int]:
    g = np.asarray(grid, dtype=dtype)
    if g.ndim == 2:
        g = g[None, None]
    elif g.ndim == 3:
        g = g[:, None]
    x, ph, pw = pad_to_multiple(g, 2**model.depth)
    return x, ph, pw


def forward_batch(model: OccNetModel, grids: np.ndarray, tape: list | None = None):
    """Probabilities (b, 3, h, w) for a batch of (b, h, w) input grids."""
    h, w = np.asarray(grids).shape[-2:]
    x, ph, pw = _prep_input(model, grids, model.params["head_w"].dtype)
    logits = _forward(model, x, tape)
    probs = softmax_channels(logits)
    return probs, (ph, pw, h, w)


def forward(model: OccNetModel, grid: np.ndarray, spec: GridSpec) -> ProbMap:
    """Per-cell class probabilities for one input grid."""
    probs, (_, _, h, w) = forward_batch(model, np.asarray(grid)[None])
    return ProbMap(spec, np.moveaxis(probs[0, :, :h, :w], 0, -1))


def infer(model: OccNetModel, grid: np.ndarray, spec: GridSpec) -> LabelGrid:
    """Argmax labeling; ties resolve to the lowest class index. Never ignore."""
    probs, (_, _, h, w) = forward_batch(model, np.asarray(grid)[None])
    labels = np.argmax(probs[0, :, :h, :w], axis=0).astype(np.uint8)
    return LabelGrid(spec, labels)


# ---------------------------------------------------------------------------
# losses on batches


def _batch_loss_and_dprobs(probs: np.ndarray, labels: np.ndarray, loss_kind: str, class_weights):
    """Mean loss over the batch plus d(loss)/d(probs), on padded tensors.

    labels uses the category codes with ignore for padding and masked
    cells; padded border cells are labeled ignore by the caller.
    """
    b = probs.shape[0]
    dprobs = np.zeros_like(probs)
    total = 0.0
    for i in range(b):
        p_flat = np.moveaxis(probs[i], 0, -1).reshape(-1, N_CLASSES)
        y_flat = labels[i].ravel()
        keep = y_flat != IGNORE
        pk = p_flat[keep].astype(float)
        yk = y_flat[keep].astype(np.int64)
        if len(yk) == 0:
            raise TrainingDivergedError("training example with zero scoreable cells")
        if loss_kind == "lovasz":
            loss, _, _, g = _lovasz_flat(pk, yk)
        else:
            n = len(yk)
            w = np.asarray(class_weights, dtype=float)
            pg = np.maximum(pk[np.arange(n), yk], PROB_FLOOR)
            loss = float(np.mean(w[yk] * -np.log(pg)))
            g = np.zeros_like(pk)
            live = pk[np.arange(n), yk] > PROB_FLOOR
            g[np.arange(n)[live], yk[live]] = -w[yk[live]] / (pg[live] * n)
        total += loss
        gfull = np.zeros_like(p_flat)
        gfull[keep] = g / b
        dprobs[i] = np.moveaxis(gfull.reshape(probs.shape[2], probs.shape[3], N_CLASSES), -1, 0)
    return total / b, dprobs


def loss_and_grads(
    model: OccNetModel,
    grids: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "lovasz",
    class_weights=(1.0, 1.0, 1.0),
):
    """Forward + backward over a batch; returns (loss, grads dict)."""
    tape: list = []
    probs, (ph, pw, h, w) = forward_batch(model, grids, tape)
    # padded border cells never score: label them ignore
    lab = np.full((probs.shape[0],) + probs.shape[2:], IGNORE, dtype=np.uint8)
    lab[:, :h, :w] = labels
    loss, dprobs = _batch_loss_and_dprobs(probs, lab, loss_kind, class_weights)
    dlogits = softmax_channels_backward(probs, dprobs.astype(probs.dtype))
    grads = _backward(model, tape, dlogits)
    return loss, grads


# ---------------------------------------------------------------------------
# optimization


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """v <- momentum*v + grad; theta <- theta - lr*v. In place."""
    for name, p in params.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            velocity[name] = v
        v *= momentum
        v += grads[name]
        p -= (lr * v).astype(p.dtype)


def flip_lateral(grid: np.ndarray) -> np.ndarray:
    """Mirror the lateral (column) axis; applies to inputs and labels alike."""
    return grid[..., ::-1]


def _val_miou(model: OccNetModel, val_pairs, spec: GridSpec) -> float:
    pooled = ConfusionCounts.zeros()
    for g, lab in val_pairs:
        pred = infer(model, g, spec)
        pooled = pooled + confusion(pred, lab)
    return miou(iou_per_class(pooled))


def train(
    train_pairs,
    val_pairs,
    spec: GridSpec,
    cfg: TrainConfig = TrainConfig(),
    loss_kind: str = "lovasz",
    widths=(16, 32, 64),
    class_weights=(1.0, 1.0, 1.0),
    in_channels: int = 1,
) -> tuple[OccNetModel, list[dict]]:
    """SGD training with momentum, plateau decay and flip augmentation.

    train_pairs/val_pairs are lists of (input grid, LabelGrid). Each
    epoch shuffles seeded, flips input and label together with
    probability flip_prob, runs mini-batches, then scores validation
    mIoU. The untrained model's validation mIoU is the starting
    best-so-far, so an epoch counts as a plateau unless it beats the
    best by more than plateau_delta; after plateau_patience consecutive
    plateau epochs the learning rate is multiplied by decay and the
    counter resets. Each log entry records the learning rate in effect
    after that epoch's plateau bookkeeping. Returns the weights of the
    best validation score seen (possibly the initialization) and the
    per-epoch log; identical seeds give bit-identical results.
    """
    if not train_pairs:
        raise ValueError("empty training set")
    if not val_pairs:
        raise ValueError("empty validation set")
    if loss_kind not in ("lovasz", "wce"):
        raise ValueError(f"unknown loss {loss_kind!r}")
    model = init_model(in_channels, widths, N_CLASSES, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    velocity: dict[str, np.ndarray] = {}
    lr = cfg.lr0
    best_miou = _val_miou(model, val_pairs, spec)
    best_params = copy.deepcopy(model.params)
    stall = 0
    log = []

    inputs = [np.asarray(g, dtype=np.float32) for g, _ in train_pairs]
    labels = [lab.cells for _, lab in train_pairs]

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        flips = rng.random(len(inputs)) < cfg.flip_prob
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            gs = np.stack(
                [flip_lateral(inputs[i]) if flips[i] else inputs[i] for i in sel]
            )
            ys = np.stack(
                [flip_lateral(labels[i]) if flips[i] else labels[i] for i in sel]
            )
            loss, grads = loss_and_grads(model, gs, ys, loss_kind, class_weights)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch} batch {n_batches} (lr={lr})"
                )
            sgd_step(model.params, grads, velocity, lr, cfg.momentum)
            epoch_loss += loss
            n_batches += 1
        val_miou = _val_miou(model, val_pairs, spec)
        if val_miou > best_miou + cfg.plateau_delta:
            best_miou = val_miou
            best_params = copy.deepcopy(model.params)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.plateau_patience:
                lr *= cfg.decay
                stall = 0
        log.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_miou": val_miou,
                "lr": lr,
            }
        )
    model.params = best_params
    return model, log


# ---------------------------------------------------------------------------
# gradient checking


def _model_to_dtype(model: OccNetModel, dtype) -> OccNetModel:
    m = OccNetModel(model.in_channels, model.widths, model.n_classes, model.seed)
    m.params = {k: v.astype(dtype) for k, v in model.params.items()}
    return m


def grad_check(
    model: OccNetModel,
    grid: np.ndarray,
    label: LabelGrid,
    loss_kind: str = "lovasz",
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy of the model. The relative error uses a small
    scale floor so near-zero entries compare absolutely.
    """
    m = _model_to_dtype(model, np.float64)
    g64 = np.asarray(grid, dtype=np.float64)[None]
    y = label.cells[None]

    _, grads = loss_and_grads(m, g64, y, loss_kind)

    def loss_at() -> float:
        probs, (_, _, h, w) = forward_batch(m, g64)
        lab = np.full((1,) + probs.shape[2:], IGNORE, dtype=np.uint8)
        lab[:, :h, :w] = y
        loss, _ = _batch_loss_and_dprobs(probs, lab, loss_kind, (1.0, 1.0, 1.0))
        return loss

    worst = 0.0
    for name, p in m.params.items():
        ga = grads[name]
        flat = p.ravel()
        gflat = np.asarray(ga).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_at()
            flat[i] = orig - eps
            lm = loss_at()
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            denom = max(abs(num), abs(gflat[i]), 1e-3)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst
