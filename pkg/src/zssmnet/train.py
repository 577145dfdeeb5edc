"""Restoration pre-training, deeply supervised fine-tuning and
sliding-window ensemble inference."""
import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mesh as meshlib
from .nn import autograd as ag
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.losses import detection_loss, loss_mse
from .nn.optim import schedule, sgd_step
from .ssl import RecipeProbs, restoration_pair, sample_recipe, sample_subvolumes
from .volume import CaseRecord, Volume, crop_or_pad_array, network_input

LOG_FIELDS = ("epoch", "loss", "lr", "val_metric")


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class IncompatibleModelError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 24
    lr0: float = 0.1
    momentum: float = 0.9
    step_gamma: float = 0.5
    step_size: int = 10
    patience: int = 20
    subvolumes_per_case: int = 16
    subvolume_dims: tuple = (16, 64, 64)
    max_epochs: int = 200
    include_masks: bool = False
    seed: int = 0
    probs: RecipeProbs = field(default_factory=RecipeProbs)

    def __post_init__(self):
        object.__setattr__(self, "subvolume_dims", tuple(int(d) for d in self.subvolume_dims))
        if isinstance(self.probs, dict):
            object.__setattr__(self, "probs", RecipeProbs(**self.probs))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.subvolumes_per_case < 1 or self.max_epochs < 1:
            raise ValueError("subvolumes_per_case and max_epochs must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FinetuneConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    patch_dims: tuple = (16, 64, 64)
    batch_size: int = 2
    iterations_per_epoch: int = 0  # 0: one pass over the training cases
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 0.5
    lesion_fraction: float = 0.5
    folds: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_dims", tuple(int(d) for d in self.patch_dims))
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.folds < 1:
            raise ValueError("need at least one fold")
        if not 0 <= self.lesion_fraction <= 1:
            raise ValueError("lesion_fraction must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    net: meshlib.MeshNetwork
    history: list
    stopped_epoch: int


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to lower the best loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, loss):
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def _item_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def _check_finite(value, step):
    if not np.isfinite(value):
        raise DivergenceError(step, value)


class _Log:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def write(self, row):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] if row[k] is not None else "" for k in LOG_FIELDS])


# ------------------------------------------------------------ pre-training

def build_subvolume_pool(cases, cfg):
    pool = []
    for k, case in enumerate(cases):
        pool += sample_subvolumes(case, cfg.subvolumes_per_case, cfg.subvolume_dims,
                                  seed=_item_seed(cfg.seed, 1, k))
    return pool


def _restoration_batch(pool, idx, epoch, cfg, seed_tag):
    xs, ts = [], []
    for k in idx:
        recipe = sample_recipe(cfg.probs, _item_seed(cfg.seed, seed_tag, epoch, k),
                               cfg.subvolume_dims)
        x, t = restoration_pair(pool[k], recipe, cfg.include_masks)
        xs.append(x)
        ts.append(t)
    return np.stack(xs), np.stack(ts)


def restoration_loss(net, x, target):
    return loss_mse(meshlib.restore(net, x.astype(net.dtype)), target)


def pretrain(cases, net, cfg=PretrainConfig(), log_path=None, pool=None):
    """Restoration pre-training with SGD, step LR and loss-based early stopping.

    A restoration head is attached if the network has none. The epoch
    loss is the mean batch MSE; ``val_metric`` is the MSE on a fixed
    corrupted batch drawn once at the start.
    """
    if not cases and pool is None:
        raise ValueError("empty dataset")
    if net.restoration_head is None:
        out_ch = net.cfg.in_channels if cfg.include_masks else 3
        net.add_restoration_head(out_ch, seed=_item_seed(cfg.seed, 2))
    pool = pool if pool is not None else build_subvolume_pool(cases, cfg)
    val_idx = np.arange(min(cfg.batch_size, len(pool)))
    val_x, val_t = _restoration_batch(pool, val_idx, 0, cfg, seed_tag=4)
    params = net.parameters(include_heads=False)
    log, stopper, history = _Log(log_path), EarlyStopping(cfg.patience), []
    step = 0
    epoch = 0
    for epoch in range(cfg.max_epochs):
        lr = schedule("step", epoch, cfg.lr0, gamma=cfg.step_gamma, step_size=cfg.step_size)
        order = np.random.default_rng(_item_seed(cfg.seed, 3, epoch)).permutation(len(pool))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            x, t = _restoration_batch(pool, order[b:b + cfg.batch_size], epoch, cfg, seed_tag=5)
            loss = restoration_loss(net, x, t)
            _check_finite(float(loss.value), step)
            loss.backward()
            sgd_step(params, lr, cfg.momentum)
            losses.append(float(loss.value))
            step += 1
        val = float(restoration_loss(net, val_x, val_t).value)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "val_metric": val}
        history.append(row)
        log.write(row)
        if stopper.update(row["loss"]):
            break
    return TrainResult(net, history, epoch)


# ------------------------------------------------------------ fine-tuning

def fold_assignment(case_ids, n_folds, seed=0):
    """Case id -> fold index, balanced by a seeded permutation of sorted ids."""
    ids = sorted(case_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {ids[p]: int(k % n_folds) for k, p in enumerate(perm)}


def _pad_to(arr, dims):
    target = tuple(max(n, d) for n, d in zip(arr.shape[-3:], dims))
    if target == arr.shape[-3:]:
        return arr
    return crop_or_pad_array(arr, target, 0)


def prepare_finetune_case(case, patch_dims):
    x = _pad_to(network_input(case, mode="unit_range"), patch_dims)
    les = case.lesions if case.lesions is not None else np.zeros(case.dims, dtype=bool)
    y = _pad_to(les.astype(np.float32)[None], patch_dims)[0]
    return x, y


def sample_patch(x, y, patch_dims, rng, lesion_fraction):
    """Random patch; with probability ``lesion_fraction`` it is centred on a
    lesion voxel (when the case has any)."""
    dims = y.shape
    if lesion_fraction > 0 and y.any() and rng.random() < lesion_fraction:
        vox = np.argwhere(y > 0)
        c = vox[rng.integers(len(vox))]
        origin = [int(min(max(ci - p // 2, 0), n - p)) for ci, p, n in zip(c, patch_dims, dims)]
    else:
        origin = [int(rng.integers(0, n - p + 1)) for n, p in zip(dims, patch_dims)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_dims))
    return x[(slice(None),) + sl], y[sl]


def deep_supervision_weights(grid):
    """Loss weights for the final head then each aux head, in
    :func:`mesh.head_positions` order."""
    return [1.0] + [meshlib.aux_weight(i if j == grid else j, grid)
                    for i, j in meshlib.head_positions(grid)]


def supervision_loss(net, x, y, cfg):
    """Deep-supervision objective: final head plus ``0.5**(G-i)``-weighted aux heads.

    Aux labels are nearest-resampled (strided) to each head's resolution.
    """
    final, aux = meshlib.forward(net, x.astype(net.dtype))
    G = net.grid
    terms = [detection_loss(ag.channel(final, 1), y, cfg.alpha, cfg.gamma, cfg.beta)]
    for (i, j) in meshlib.head_positions(G):
        dz, dy, dx = net.modules[(i, j)].divisor
        lab = y[:, ::int(dz), ::int(dy), ::int(dx)]
        terms.append(detection_loss(ag.channel(aux[(i, j)], 1), lab, cfg.alpha, cfg.gamma,
                                    cfg.beta))
    return ag.weighted_sum(terms, deep_supervision_weights(G))


def load_backbone(net, params):
    """Copy matching backbone weights (no heads) into ``net``; returns the count."""
    n = 0
    for p in params:
        if ".head." in p.name or p.name.startswith("restore."):
            continue
        if p.name in net.params:
            q = net.params[p.name]
            if q.value.shape != p.value.shape:
                raise IncompatibleModelError(f"{p.name}: {p.value.shape} vs {q.value.shape}")
            q.value[...] = p.value
            n += 1
    return n


def check_patch(net, patch_dims):
    try:
        meshlib.check_input_shape(net, (1, net.cfg.in_channels) + tuple(patch_dims))
    except ag.ShapeError as exc:
        raise ValueError(f"patch {tuple(patch_dims)} violates mesh divisibility: {exc}") from None


def finetune(cases, net, cfg=FinetuneConfig(), init=None, log_path=None, val_fn=None):
    """Deeply supervised fine-tuning with the poly schedule.

    ``init`` is ``None`` (keep the random initialization), a checkpoint
    path, or a list of parameters; only backbone weights are taken.
    ``val_fn(net, epoch)`` may return a validation metric for the log.
    """
    if not cases:
        raise ValueError("empty dataset")
    check_patch(net, cfg.patch_dims)
    if init is not None:
        params = load_checkpoint(init)[0] if isinstance(init, (str, Path)) else init
        load_backbone(net, params)
    net.drop_restoration_head()
    data = [prepare_finetune_case(c, cfg.patch_dims) for c in cases]
    params = net.parameters()
    iters = cfg.iterations_per_epoch or math.ceil(len(data) / cfg.batch_size)
    log, history = _Log(log_path), []
    step = 0
    for epoch in range(cfg.epochs):
        lr = schedule("poly", epoch, cfg.lr0, epoch_max=cfg.epochs)
        rng = np.random.default_rng(_item_seed(cfg.seed, 10, epoch))
        order = rng.permutation(len(data))
        while len(order) < iters * cfg.batch_size:
            order = np.r_[order, rng.permutation(len(data))]
        losses = []
        for it in range(iters):
            xs, ys = [], []
            for k in order[it * cfg.batch_size:(it + 1) * cfg.batch_size]:
                px, py = sample_patch(*data[k], cfg.patch_dims, rng, cfg.lesion_fraction)
                xs.append(px)
                ys.append(py)
            loss = supervision_loss(net, np.stack(xs), np.stack(ys), cfg)
            _check_finite(float(loss.value), step)
            loss.backward()
            sgd_step(params, lr, cfg.momentum)
            losses.append(float(loss.value))
            step += 1
        val = val_fn(net, epoch) if val_fn is not None else None
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "val_metric": val}
        history.append(row)
        log.write(row)
    return TrainResult(net, history, cfg.epochs - 1)


def finetune_folds(cases, make_net, cfg=FinetuneConfig(), init=None, out_dir=None):
    """One model per fold, each trained on the other folds (all cases if one fold).

    Returns ``[(fold, TrainResult)]``; models are saved as
    ``model_fold{k}.zckpt`` under ``out_dir``.
    """
    folds = fold_assignment([c.case_id for c in cases], cfg.folds, cfg.seed)
    results = []
    for k in range(cfg.folds):
        train_cases = [c for c in cases if cfg.folds == 1 or folds[c.case_id] != k]
        net = make_net(k)
        log = Path(out_dir) / f"train_fold{k}.csv" if out_dir else None
        res = finetune(train_cases, net, replace(cfg, seed=_item_seed(cfg.seed, 20, k)),
                       init=init, log_path=log)
        if out_dir:
            save_model(Path(out_dir) / f"model_fold{k}.zckpt", res.net,
                       {"kind": "finetune", "fold": k, "finetune": cfg.to_dict()})
        results.append((k, res))
    return results


# ------------------------------------------------------------ models on disk

def save_model(path, net, extra=None, rng_state=None):
    meta = {"mesh": net.cfg.to_dict(), "restoration": net.restoration_head is not None}
    meta.update(extra or {})
    save_checkpoint(path, list(net.params.values()), meta, rng_state)


def load_model(path):
    params, meta, _ = load_checkpoint(path)
    cfg = meshlib.MeshConfig.from_dict(meta["mesh"])
    net = meshlib.build(cfg, seed=0)
    table = {p.name: p for p in params}
    if "restore.w" in table:
        net.add_restoration_head(table["restore.w"].value.shape[0])
    missing = set(net.params) - set(table)
    if missing:
        raise IncompatibleModelError(f"checkpoint lacks {sorted(missing)[:3]}")
    for name, q in net.params.items():
        p = table[name]
        if p.value.shape != q.value.shape:
            raise IncompatibleModelError(f"{name}: {p.value.shape} vs {q.value.shape}")
        q.value[...] = p.value
        q.momentum[...] = p.momentum
    return net, meta


# ------------------------------------------------------------ inference

def predict_patch(net, x):
    """Class-1 softmax for a batch ``(N, 6, Z, Y, X)`` -> ``(N, Z, Y, X)``."""
    try:
        final, _ = meshlib.forward(net, x)
    except ag.ShapeError as exc:
        raise IncompatibleModelError(str(exc)) from None
    return final.value[:, 1].astype(np.float64)


def _positions(n, p, stride):
    if n <= p:
        return [0]
    pos = list(range(0, n - p, stride))
    return pos + [n - p]


def sliding_window(model, arr, patch_dims):
    """Overlap-averaged map of ``model`` over a ``(6, Z, Y, X)`` array."""
    dims = arr.shape[1:]
    padded = _pad_to(arr, patch_dims)
    pdims = padded.shape[1:]
    acc = np.zeros(pdims)
    cnt = np.zeros(pdims)
    stride = [max(1, p // 2) for p in patch_dims]
    grids = [_positions(n, p, s) for n, p, s in zip(pdims, patch_dims, stride)]
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                sl = (slice(z, z + patch_dims[0]), slice(y, y + patch_dims[1]),
                      slice(x, x + patch_dims[2]))
                pred = model(padded[(slice(None),) + sl][None])[0]
                acc[sl] += pred
                cnt[sl] += 1
    out = acc / cnt
    # undo the centred padding
    off = [(m - n) // 2 for m, n in zip(pdims, dims)]
    return out[tuple(slice(o, o + n) for o, n in zip(off, dims))]


def _as_model(m):
    if isinstance(m, meshlib.MeshNetwork):
        def run(x, net=m):
            return predict_patch(net, x.astype(net.dtype))
        return run
    if callable(m):
        return m
    raise IncompatibleModelError(f"cannot run {type(m).__name__} as a model")


def infer(models, case, patch_dims):
    """Equal-weight ensemble of per-model sliding-window lesion maps.

    ``case`` is a preprocessed :class:`CaseRecord` (normalized here as in
    training) or a ready ``(6, Z, Y, X)`` array. Models are mesh networks
    or callables ``(N, 6, Z, Y, X) -> (N, Z, Y, X)``.
    """
    if not models:
        raise ValueError("need at least one model")
    if isinstance(case, CaseRecord):
        arr, spacing = network_input(case, mode="unit_range"), case.spacing
    else:
        arr, spacing = np.asarray(case, dtype=np.float32), (1.0, 1.0, 1.0)
    for m in models:
        if isinstance(m, meshlib.MeshNetwork):
            if arr.shape[0] != m.cfg.in_channels:
                raise IncompatibleModelError(
                    f"model expects {m.cfg.in_channels} channels, input has {arr.shape[0]}")
            try:
                check_patch(m, patch_dims)
            except ValueError as exc:
                raise IncompatibleModelError(str(exc)) from None
    maps = [sliding_window(_as_model(m), arr, tuple(patch_dims)) for m in models]
    prob = np.clip(np.mean(maps, axis=0), 0.0, 1.0)
    return Volume(prob[None].astype(np.float32), spacing)
