"""Iterative prune / group / retrain loop and its desk-scale support code:
a float shift+pointwise network with manual backprop, SGD with Nesterov
momentum and cosine learning-rate decay, dataset handling (synthetic task,
IDX ingestion, stratified subsets), and quantized network export.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import (ColCombineError, ConfigError, DataFormatError,
                         DivergenceError, StagnationError)
from .matrix import (NUM_SHIFT_DIRECTIONS, ColumnGrouping, LayerDef,
                     NetworkDef, PackingParams, QuantParams,
                     SparseFilterMatrix)
from .packing import group_columns, group_prune, pack
from .simulator import relu_quant, shift_apply
from .validation import magnitudes


@dataclass(frozen=True)
class TrainConfig:
    """SGD and loop schedule knobs."""

    eta: float = 0.1                 # initial learning rate
    momentum: float = 0.9            # Nesterov momentum coefficient
    epochs_per_iteration: int = 20
    final_epochs: int = 100
    lr_floor_fraction: float = 0.2   # LR at the end of each iteration
    beta_decay: float = 0.9          # per-iteration decay of the prune percentage
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.lr_floor_fraction <= 1):
            raise ConfigError("lr_floor_fraction must lie in (0, 1]")
        if not (0 < self.beta_decay < 1):
            raise ConfigError("beta_decay must lie in (0, 1)")
        if self.eta <= 0 or self.batch_size < 1:
            raise ConfigError("eta must be positive and batch_size >= 1")


@dataclass
class PruneMask:
    """Per-layer boolean matrices; True marks a permanently-zero weight."""

    layers: List[np.ndarray]

    @classmethod
    def empty_for(cls, model: "ShiftNet") -> "PruneMask":
        return cls([np.zeros_like(l.weight, dtype=bool) for l in model.layers])

    def grow(self, layer: int, newly_zero: np.ndarray) -> None:
        self.layers[layer] |= newly_zero

    def nnz(self) -> int:
        return int(sum((~m).sum() for m in self.layers))

    def copy(self) -> "PruneMask":
        return PruneMask([m.copy() for m in self.layers])


@dataclass(frozen=True)
class Dataset:
    """8-bit samples with class labels; iteration order is index order."""

    images: np.ndarray  # (n, channels, height, width) int8, values in [0, 127]
    labels: np.ndarray  # (n,) int64
    tag: str = ""

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise ValueError("images must be (n, channels, height, width) matching labels")
        if images.size and (images.min() < -128 or images.max() > 127):
            raise ValueError("image values must fit in signed 8 bits")
        object.__setattr__(self, "images", images.astype(np.int8))
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def make_synthetic_dataset(n_per_class: int, num_classes: int = 10, channels: int = 8,
                           height: int = 8, width: int = 8, noise: int = 30,
                           seed: int = 0, tag: str = "") -> Dataset:
    """Balanced prototype-classification task.

    Each class gets a per-channel intensity level plus a spatial texture;
    samples add uniform pixel noise.  Levels keep the classes separable
    through the network's global average pooling."""
    rng = np.random.default_rng(seed)
    levels = rng.integers(15, 95, size=(num_classes, channels))
    texture = rng.integers(-20, 21, size=(num_classes, channels, height, width))
    protos = np.clip(levels[:, :, None, None] + texture, 0, 127)
    images = []
    labels = []
    for k in range(num_classes):
        jitter = rng.integers(-noise, noise + 1,
                              size=(n_per_class, channels, height, width))
        images.append(np.clip(protos[k][None] + jitter, 0, 127))
        labels.append(np.full(n_per_class, k))
    order = rng.permutation(n_per_class * num_classes)
    return Dataset(np.concatenate(images)[order], np.concatenate(labels)[order], tag=tag)


def split_dataset(data: Dataset, eval_fraction: float, seed: int = 0) -> Tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    n = len(data)
    order = rng.permutation(n)
    n_eval = int(round(n * eval_fraction))
    ev, tr = order[:n_eval], order[n_eval:]
    return (Dataset(data.images[tr], data.labels[tr], tag="train"),
            Dataset(data.images[ev], data.labels[ev], tag="eval"))


def dataset_fraction(data: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Class-stratified random subset; deterministic per seed."""
    if not (0 < fraction <= 1):
        raise ConfigError("fraction must lie in (0, 1]")
    if fraction == 1:
        return data
    rng = np.random.default_rng(seed)
    keep: List[np.ndarray] = []
    for k in np.unique(data.labels):
        idx = np.nonzero(data.labels == k)[0]
        n_keep = int(np.floor(len(idx) * fraction))
        if n_keep == 0:
            raise ConfigError(
                f"fraction {fraction} leaves class {int(k)} empty ({len(idx)} samples)")
        keep.append(rng.permutation(idx)[:n_keep])
    sel = np.sort(np.concatenate(keep))
    return Dataset(data.images[sel], data.labels[sel], tag=data.tag)


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes."""
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4:
            raise DataFormatError("IDX file too short for a magic number")
        (magic,) = struct.unpack(">I", head)
        if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
            raise DataFormatError(f"unexpected IDX magic 0x{magic:08x}")
        rank = magic & 0xFF
        dims_raw = f.read(4 * rank)
        if len(dims_raw) != 4 * rank:
            raise DataFormatError("truncated IDX dimension header")
        dims = struct.unpack(f">{rank}I", dims_raw)
        n = int(np.prod(dims))
        payload = f.read(n)
        if len(payload) != n:
            raise DataFormatError("truncated IDX payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair; pixels are halved into [0, 127]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"expected a rank-3 IDX image file, got rank {images.ndim}")
    if labels.ndim != 1:
        raise DataFormatError(f"expected a rank-1 IDX label file, got rank {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset((images[:, None, :, :] >> 1).astype(np.int8),
                   labels.astype(np.int64))


@dataclass
class ShiftLayer:
    weight: np.ndarray  # float32 (out_channels, in_channels)
    shifts: np.ndarray  # (in_channels,) direction codes


class ShiftNet:
    """Float master network: per layer a channel shift, a pointwise matmul,
    and ReLU between layers; logits are the spatial mean of the last layer."""

    def __init__(self, channels: Sequence[int], height: int = 8, width: int = 8,
                 seed: int = 0):
        if len(channels) < 2:
            raise ConfigError("need at least input and output channel counts")
        rng = np.random.default_rng(seed)
        self.height = height
        self.width = width
        self.layers: List[ShiftLayer] = []
        for m, n in zip(channels[:-1], channels[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / m), size=(n, m)).astype(np.float32)
            shifts = np.arange(m) % NUM_SHIFT_DIRECTIONS
            self.layers.append(ShiftLayer(w, shifts))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "ShiftNet":
        dup = ShiftNet.__new__(ShiftNet)
        dup.height, dup.width = self.height, self.width
        dup.layers = [ShiftLayer(l.weight.copy(), l.shifts.copy()) for l in self.layers]
        return dup

    def nnz(self) -> int:
        return int(sum(np.count_nonzero(l.weight) for l in self.layers))

    def apply_mask(self, mask: PruneMask) -> None:
        for l, m in zip(self.layers, mask.layers):
            l.weight[m] = 0.0

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x: float (batch, channels, height, width) -> logits (batch, classes)."""
        a = x
        cache = []
        last = self.num_layers - 1
        for i, layer in enumerate(self.layers):
            s = shift_apply(a, layer.shifts)
            z = np.einsum("nm,bmhw->bnhw", layer.weight, s)
            a = np.maximum(z, 0.0) if i < last else z
            if want_cache:
                cache.append((s, z))
        logits = a.mean(axis=(2, 3))
        return (logits, cache) if want_cache else logits

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        logits, cache = self.forward(x, want_cache=True)
        b = x.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        probs = expv / expv.sum(axis=1, keepdims=True)
        loss = float(-np.log(probs[np.arange(b), y] + 1e-12).mean())
        dlogits = probs.copy()
        dlogits[np.arange(b), y] -= 1.0
        dlogits /= b
        hw = self.height * self.width
        da = np.broadcast_to(dlogits[:, :, None, None] / hw,
                             (b, logits.shape[1], self.height, self.width)).copy()
        grads = [None] * self.num_layers
        last = self.num_layers - 1
        for i in range(last, -1, -1):
            s, z = cache[i]
            dz = da if i == last else da * (z > 0)
            grads[i] = np.einsum("bnhw,bmhw->nm", dz, s).astype(np.float32)
            if i > 0:
                ds = np.einsum("nm,bnhw->bmhw", self.layers[i].weight, dz)
                da = _shift_backward(ds, self.layers[i].shifts)
        return loss, grads

    def accuracy(self, data: Dataset) -> float:
        x = data.images.astype(np.float32) / 128.0
        logits = self.forward(x)
        return float((logits.argmax(axis=1) == data.labels).mean())


def _shift_backward(grad: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    # Gradient of a zero-padded translation is the opposite translation.
    opposite = np.array([_OPPOSITE[int(s)] for s in shifts])
    return shift_apply(grad, opposite)


_OPPOSITE = {0: 0, 1: 5, 2: 6, 3: 7, 4: 8, 5: 1, 6: 2, 7: 3, 8: 4}


def smallest_magnitude_mask(values: np.ndarray, beta: float,
                            eligible: Optional[np.ndarray] = None) -> np.ndarray:
    """Mask of the floor(beta% * nnz) smallest-magnitude nonzero entries.

    Ties at the threshold magnitude fall in row-major scan order until the
    count is met.  ``eligible`` restricts the candidate set (e.g. to
    currently-unmasked weights).
    """
    if not (0 <= beta < 100):
        raise ConfigError("beta must lie in [0, 100)")
    v = np.asarray(values)
    nz = v != 0
    if eligible is not None:
        nz &= eligible
    flat_idx = np.nonzero(nz.reshape(-1))[0]  # ascending row-major positions
    count = int(np.floor(beta / 100.0 * flat_idx.size))
    out = np.zeros(v.size, dtype=bool)
    if count:
        mags = magnitudes(v.reshape(-1)[flat_idx])
        order = np.argsort(mags, kind="stable")  # ties keep row-major order
        out[flat_idx[order[:count]]] = True
    return out.reshape(v.shape)


def magnitude_prune(F, beta: float):
    """Zero the beta% smallest-magnitude nonzero weights of a matrix."""
    if isinstance(F, SparseFilterMatrix):
        v = F.values.copy()
        v[smallest_magnitude_mask(v, beta)] = 0
        return SparseFilterMatrix(v)
    v = np.asarray(F).copy()
    v[smallest_magnitude_mask(v, beta)] = 0
    return v


def cosine_schedule(eta: float, epochs: int, floor_fraction: float) -> np.ndarray:
    """Per-epoch learning rates decaying from eta to floor_fraction * eta."""
    if epochs <= 0:
        return np.zeros(0)
    floor = eta * floor_fraction
    if epochs == 1:
        return np.array([eta])
    t = np.arange(epochs) / (epochs - 1)
    return floor + 0.5 * (eta - floor) * (1 + np.cos(np.pi * t))


def sgd_retrain(model: ShiftNet, mask: PruneMask, data: Dataset,
                lr_schedule: Sequence[float], cfg: Optional[TrainConfig] = None,
                eval_data: Optional[Dataset] = None) -> List[float]:
    """Minibatch SGD with Nesterov momentum over the float master weights.

    Masked weights are forced back to zero after every update.  Returns the
    per-epoch evaluation accuracy (on ``eval_data`` when given, else on the
    training split).
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    x_all = data.images.astype(np.float32) / 128.0
    y_all = data.labels
    buffers = [np.zeros_like(l.weight) for l in model.layers]
    accs: List[float] = []
    model.apply_mask(mask)
    for lr in lr_schedule:
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(x_all[idx], y_all[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss became {loss}")
            for layer, g, buf, m in zip(model.layers, grads, buffers, mask.layers):
                g = np.where(m, 0.0, g)
                buf *= cfg.momentum
                buf += g
                layer.weight -= lr * (g + cfg.momentum * buf)
                layer.weight[m] = 0.0
        accs.append(model.accuracy(eval_data if eval_data is not None else data))
    return accs


@dataclass
class TrainResult:
    model: ShiftNet
    groupings: List[ColumnGrouping]
    mask: PruneMask
    history: List[Tuple[int, int, float]]  # (epoch, nnz, accuracy)
    iterations: int


def iterative_train(model: ShiftNet, params: PackingParams, cfg: TrainConfig,
                    data: Dataset, eval_data: Optional[Dataset] = None,
                    retrainer: Callable = sgd_retrain) -> TrainResult:
    """Prune / group / conflict-prune / retrain until the nonzero target.

    Each iteration prunes beta% of each layer's surviving weights, groups
    the layer's columns, prunes conflicts inside groups, then retrains with
    a cosine-decayed learning rate; beta decays between iterations.  Once
    the total nonzero count is at or below rho, a final training phase runs
    with the learning rate decayed to zero.
    """
    mask = PruneMask.empty_for(model)
    model.apply_mask(mask)
    groupings: List[ColumnGrouping] = [
        ColumnGrouping(tuple((int(c),) for c in range(l.weight.shape[1])),
                       alpha=params.alpha, gamma=params.gamma)
        for l in model.layers
    ]
    history: List[Tuple[int, int, float]] = []
    epoch = 0
    beta = params.beta
    iterations = 0

    def record(accs: List[float]):
        nonlocal epoch
        for a in accs:
            epoch += 1
            history.append((epoch, mask.nnz(), a))

    while mask.nnz() > params.rho:
        before = mask.nnz()
        for li, layer in enumerate(model.layers):
            newly = smallest_magnitude_mask(layer.weight, beta, eligible=~mask.layers[li])
            layer.weight[newly] = 0.0
            mask.grow(li, newly)
            grouping, _ = group_columns(layer.weight, params.alpha, params.gamma)
            pruned = group_prune(layer.weight, grouping)
            mask.grow(li, (pruned == 0) & ~mask.layers[li] & (layer.weight != 0))
            layer.weight[:] = pruned
            groupings[li] = grouping
        if mask.nnz() == before and mask.nnz() > params.rho:
            raise StagnationError(
                f"iteration pruned no weights at nnz={mask.nnz()} > rho={params.rho}")
        iterations += 1
        record(retrainer(model, mask, data,
                         cosine_schedule(cfg.eta, cfg.epochs_per_iteration,
                                         cfg.lr_floor_fraction),
                         cfg, eval_data))
        beta *= cfg.beta_decay

    record(retrainer(model, mask, data,
                     cosine_schedule(cfg.eta, cfg.final_epochs, 0.0),
                     cfg, eval_data))
    return TrainResult(model, groupings, mask, history, iterations)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_network(model: ShiftNet, calib: Dataset, acc_bits: int = 32) -> NetworkDef:
    """Freeze the float master into an int8 network.

    Weights quantize symmetrically per layer.  Each layer's requantization
    shift is the smallest power-of-two right shift under which the largest
    absolute accumulator value over the calibration batch still fits in
    8 bits (rounding half away from zero, saturating).
    """
    maps = calib.images.astype(np.int64)
    layers: List[LayerDef] = []
    for layer in model.layers:
        scale = float(np.abs(layer.weight).max())
        scale = scale / 127.0 if scale > 0 else 1.0
        wq = np.clip(_round_half_away(layer.weight / scale), -128, 127).astype(np.int64)
        shifted = shift_apply(maps, layer.shifts)
        acc = np.einsum("nm,bmhw->bnhw", wq, shifted)
        max_abs = int(np.abs(acc).max())
        out_shift = 0
        while (max_abs + (1 << out_shift >> 1)) >> out_shift > 127:
            out_shift += 1
        quant = QuantParams(acc_bits=acc_bits, out_shift=out_shift)
        layers.append(LayerDef(filter=SparseFilterMatrix(wq.astype(np.int8)),
                               width=model.width, height=model.height,
                               shifts=tuple(int(s) for s in layer.shifts),
                               quant=quant))
        maps = relu_quant(acc, quant).astype(np.int64)
    return NetworkDef(tuple(layers))


def pack_network(net: NetworkDef, groupings: Sequence[ColumnGrouping]) -> NetworkDef:
    """Attach packed matrices (conflict-pruning first, which is a no-op on
    already-pruned layers)."""
    layers = []
    for layer, grouping in zip(net.layers, groupings):
        pruned = group_prune(layer.filter, grouping)
        layers.append(LayerDef(filter=pruned, width=layer.width, height=layer.height,
                               shifts=layer.shifts, quant=layer.quant,
                               packed=pack(pruned, grouping)))
    return NetworkDef(tuple(layers))


def train_dense(model: ShiftNet, cfg: TrainConfig, data: Dataset,
                eval_data: Optional[Dataset] = None,
                epochs: Optional[int] = None) -> List[float]:
    """Train without any pruning (the dense baseline)."""
    mask = PruneMask.empty_for(model)
    schedule = cosine_schedule(cfg.eta, epochs if epochs is not None else cfg.final_epochs,
                               cfg.lr_floor_fraction)
    return sgd_retrain(model, mask, data, schedule, cfg, eval_data)


def limited_data_comparison(fraction: float, seeds: Sequence[int],
                            channels: Sequence[int] = (8, 16, 16, 10),
                            n_per_class: int = 96, noise: int = 30,
                            params: Optional[PackingParams] = None,
                            cfg: Optional[TrainConfig] = None,
                            pretrain_epochs: int = 30) -> dict:
    """Prune/retrain a pretrained model vs a fresh one on a data subset.

    Both undergo the same iterative loop on ``fraction`` of the training
    split; the pretrained model first trains dense on the full split.
    Returns per-seed and mean evaluation accuracies for both starts.
    """
    base_params = params or PackingParams(alpha=8, beta=20.0, gamma=0.5, rho=1)
    base_cfg = cfg or TrainConfig(epochs_per_iteration=16, final_epochs=30)
    pre_accs, fresh_accs = [], []
    for seed in seeds:
        data = make_synthetic_dataset(n_per_class, num_classes=channels[-1],
                                      channels=channels[0], noise=noise, seed=seed)
        train, evald = split_dataset(data, 0.25, seed=seed)
        subset = dataset_fraction(train, fraction, seed=seed)
        run_cfg = TrainConfig(eta=base_cfg.eta, momentum=base_cfg.momentum,
                              epochs_per_iteration=base_cfg.epochs_per_iteration,
                              final_epochs=base_cfg.final_epochs,
                              lr_floor_fraction=base_cfg.lr_floor_fraction,
                              beta_decay=base_cfg.beta_decay,
                              batch_size=base_cfg.batch_size, seed=seed)

        pretrained = ShiftNet(channels, seed=seed)
        rho = max(1, int(base_params.rho if base_params.rho > 1
                         else 0.25 * pretrained.nnz()))
        run_params = PackingParams(alpha=base_params.alpha, beta=base_params.beta,
                                   gamma=base_params.gamma, rho=rho)
        train_dense(pretrained, run_cfg, train, evald, epochs=pretrain_epochs)
        pre = iterative_train(pretrained, run_params, run_cfg, subset, evald)
        pre_accs.append(pre.history[-1][2])

        fresh = ShiftNet(channels, seed=seed + 1)
        fr = iterative_train(fresh, run_params, run_cfg, subset, evald)
        fresh_accs.append(fr.history[-1][2])
    return {
        "fraction": fraction,
        "seeds": list(seeds),
        "pretrained_accuracy": pre_accs,
        "fresh_accuracy": fresh_accs,
        "pretrained_mean": float(np.mean(pre_accs)),
        "fresh_mean": float(np.mean(fresh_accs)),
    }


class ColumnCombiningClassifier(BaseEstimator, ClassifierMixin):
    """Estimator wrapper: fit runs the iterative prune/retrain loop on a
    shift+pointwise network, predict evaluates the float master."""

    def __init__(self, hidden_channels=(16, 16), alpha=8, beta=20.0, gamma=0.5,
                 rho_fraction=0.25, eta=0.1, momentum=0.9, epochs_per_iteration=10,
                 final_epochs=20, lr_floor_fraction=0.2, beta_decay=0.9,
                 batch_size=32, seed=0):
        self.hidden_channels = hidden_channels
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.rho_fraction = rho_fraction
        self.eta = eta
        self.momentum = momentum
        self.epochs_per_iteration = epochs_per_iteration
        self.final_epochs = final_epochs
        self.lr_floor_fraction = lr_floor_fraction
        self.beta_decay = beta_decay
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 4:
            raise ValueError("X must be (n_samples, channels, height, width)")
        self.classes_ = np.unique(y)
        channels = [X.shape[1], *self.hidden_channels, len(self.classes_)]
        model = ShiftNet(channels, height=X.shape[2], width=X.shape[3], seed=self.seed)
        cfg = TrainConfig(eta=self.eta, momentum=self.momentum,
                          epochs_per_iteration=self.epochs_per_iteration,
                          final_epochs=self.final_epochs,
                          lr_floor_fraction=self.lr_floor_fraction,
                          beta_decay=self.beta_decay, batch_size=self.batch_size,
                          seed=self.seed)
        rho = max(1, int(self.rho_fraction * model.nnz()))
        params = PackingParams(alpha=self.alpha, beta=self.beta,
                               gamma=self.gamma, rho=rho)
        data = Dataset(X.astype(np.int8), np.searchsorted(self.classes_, y))
        result = iterative_train(model, params, cfg, data)
        self.model_ = result.model
        self.groupings_ = result.groupings
        self.mask_ = result.mask
        self.history_ = result.history
        self.n_iterations_ = result.iterations
        return self

    def predict(self, X):
        X = np.asarray(X).astype(np.float32) / 128.0
        logits = self.model_.forward(X)
        return self.classes_[logits.argmax(axis=1)]
