"""Sub-volume sampling and the four corruptions used for restoration
pre-training.

Corruptions touch only the image channels (the first three); the one-hot
zonal channels are passed through untouched. A recipe records which
transforms are on and every random parameter they need, so applying it
is a pure function.
"""
import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import crop_or_pad_array, network_input

N_IMAGE = 3
CUTOUT_KINDS = ("none", "inner", "outer")
MAX_CUTOUT_FRACTION = 0.25


@dataclass(frozen=True, eq=False)
class SubVolume:
    data: np.ndarray  # (6, Z, Y, X): T2W, DWI, ADC, BG, CG, PZ
    case_id: str = ""
    origin: tuple = (0, 0, 0)
    padded: bool = False

    @property
    def image(self):
        return self.data[:N_IMAGE]

    @property
    def dims(self):
        return self.data.shape[1:]


@dataclass(frozen=True)
class RecipeProbs:
    p_nonlinear: float = 0.9
    p_shuffle: float = 0.5
    p_inner: float = 0.3
    p_outer: float = 0.3
    p_decreasing: float = 0.5
    shuffle_windows: int = 1000
    shuffle_bounds: tuple = (2, 8, 8)  # max window extent (z, y, x)
    inner_max_windows: int = 5
    outer_max_windows: int = 10

    def __post_init__(self):
        for name in ("p_nonlinear", "p_shuffle", "p_inner", "p_outer", "p_decreasing"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} is not a probability")
        if self.p_inner + self.p_outer > 1 + 1e-12:
            raise ValueError("inner and outer cutout probabilities must sum to at most 1")
        object.__setattr__(self, "shuffle_bounds", tuple(int(b) for b in self.shuffle_bounds))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class CorruptionRecipe:
    nonlinear: bool = False
    shuffle: bool = False
    cutout: str = "none"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cutout not in CUTOUT_KINDS:
            raise ValueError(f"cutout must be one of {CUTOUT_KINDS}")

    @property
    def flags(self):
        return (self.nonlinear, self.shuffle, self.cutout)

    def to_dict(self):
        def plain(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [plain(x) for x in v]
            if isinstance(v, np.generic):
                return v.item()
            return v
        return {"nonlinear": self.nonlinear, "shuffle": self.shuffle, "cutout": self.cutout,
                "seed": self.seed, "params": plain(self.params)}


def recipe_classes():
    """The 12 transform combinations: 2 (nonlinear) x 2 (shuffle) x 3 (cutout)."""
    return [(nl, sh, cut) for nl, sh, cut in itertools.product((False, True), (False, True),
                                                               CUTOUT_KINDS)]


# ------------------------------------------------------------ sub-volumes

def sample_subvolumes(case, count, dims=(16, 64, 64), seed=0, arr=None):
    """``count`` random crops of the unit-range 6-channel case input.

    Cases smaller than ``dims`` along an axis are zero-padded (centred)
    first and the crops flagged ``padded``.
    """
    if count < 1:
        raise ValueError("need at least one sub-volume")
    if arr is None:
        arr = network_input(case, mode="unit_range")
    dims = tuple(int(d) for d in dims)
    padded = any(n < d for n, d in zip(arr.shape[1:], dims))
    if padded:
        target = tuple(max(n, d) for n, d in zip(arr.shape[1:], dims))
        arr = crop_or_pad_array(arr, target, 0.0)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        origin = tuple(int(rng.integers(0, n - d + 1)) for n, d in zip(arr.shape[1:], dims))
        sl = tuple(slice(o, o + d) for o, d in zip(origin, dims))
        out.append(SubVolume(np.ascontiguousarray(arr[(slice(None),) + sl], dtype=np.float32),
                             case.case_id, origin, padded))
    return out


# ------------------------------------------------------------ transforms

def bezier_curve(control_points, samples=1001):
    """Dense samples ``(x(t), y(t))`` of a cubic Bezier through 4 points."""
    p = np.asarray(control_points, dtype=np.float64)
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = ((1 - t) ** 3 * p[0] + 3 * (1 - t) ** 2 * t * p[1]
           + 3 * (1 - t) * t ** 2 * p[2] + t ** 3 * p[3])
    return pts[:, 0], pts[:, 1]


def bezier_control_points(p1, p2, decreasing=False):
    if decreasing:
        return [(0.0, 1.0), tuple(p1), tuple(p2), (1.0, 0.0)]
    return [(0.0, 0.0), tuple(p1), tuple(p2), (1.0, 1.0)]


def intensity_map(values, control_points):
    xs, ys = bezier_curve(control_points)
    return np.interp(values, xs, ys)


def apply_nonlinear(sv, control_points):
    data = sv.data.copy()
    img = np.clip(data[:N_IMAGE].astype(np.float64), 0.0, 1.0)
    data[:N_IMAGE] = np.clip(intensity_map(img, control_points), 0.0, 1.0)
    return SubVolume(data, sv.case_id, sv.origin, sv.padded)


def apply_local_shuffle(sv, windows, seed):
    """Permute voxels inside each window in turn, one permutation shared
    by all image channels. ``windows`` rows are ``(z, y, x, dz, dy, dx)``.

    Permutations are drawn as ``default_rng(seed).permutation(size)`` per
    window, in window order.
    """
    data = sv.data.copy()
    img = data[:N_IMAGE]
    rng = np.random.default_rng(seed)
    for z, y, x, dz, dy, dx in np.asarray(windows, dtype=np.int64).reshape(-1, 6):
        block = img[:, z:z + dz, y:y + dy, x:x + dx]
        flat = block.reshape(N_IMAGE, -1)
        perm = rng.permutation(flat.shape[1])
        img[:, z:z + dz, y:y + dy, x:x + dx] = flat[:, perm].reshape(block.shape)
    return SubVolume(data, sv.case_id, sv.origin, sv.padded)


def window_mask(dims, windows):
    m = np.zeros(dims, dtype=bool)
    for z, y, x, dz, dy, dx in np.asarray(windows, dtype=np.int64).reshape(-1, 6):
        m[z:z + dz, y:y + dy, x:x + dx] = True
    return m


def apply_inner_cutout(sv, windows, fills):
    data = sv.data.copy()
    for (z, y, x, dz, dy, dx), fill in zip(np.asarray(windows, dtype=np.int64).reshape(-1, 6),
                                           fills):
        data[:N_IMAGE, z:z + dz, y:y + dy, x:x + dx] = fill
    return SubVolume(data, sv.case_id, sv.origin, sv.padded)


def apply_outer_cutout(sv, windows, fill):
    data = sv.data.copy()
    keep = window_mask(sv.dims, windows)
    data[:N_IMAGE, ~keep] = fill
    return SubVolume(data, sv.case_id, sv.origin, sv.padded)


# ------------------------------------------------------------ sampling

def _random_window(rng, dims, lo_frac, hi_frac):
    size = [int(rng.integers(max(1, int(np.ceil(lo_frac * d))), max(1, int(hi_frac * d)) + 1))
            for d in dims]
    start = [int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size)]
    return start + size


def _sample_inner(rng, dims, max_windows):
    total = float(np.prod(dims))
    for _ in range(1000):
        n = int(rng.integers(1, max_windows + 1))
        wins = [_random_window(rng, dims, 0.1, 0.5) for _ in range(n)]
        frac = window_mask(dims, wins).sum() / total
        if 0 < frac < MAX_CUTOUT_FRACTION:
            return wins, rng.random(n).tolist()
    raise RuntimeError("could not sample inner cutout windows")  # pragma: no cover


def _sample_outer(rng, dims, max_windows):
    total = float(np.prod(dims))
    for _ in range(1000):
        n = int(rng.integers(1, max_windows + 1))
        wins = [_random_window(rng, dims, 0.5, 1.0) for _ in range(n)]
        outside = 1 - window_mask(dims, wins).sum() / total
        if outside < MAX_CUTOUT_FRACTION:
            return wins, float(rng.random())
    raise RuntimeError("could not sample outer cutout windows")  # pragma: no cover


def _sample_shuffle(rng, dims, n_windows, bounds):
    wins = np.empty((n_windows, 6), dtype=np.int64)
    for k in range(n_windows):
        size = [int(rng.integers(1, min(b, d) + 1)) for b, d in zip(bounds, dims)]
        start = [int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size)]
        wins[k] = start + size
    return wins


def sample_recipe(probs=None, seed=0, dims=(16, 64, 64)):
    """Draw transform flags and freeze all their parameters."""
    probs = probs or RecipeProbs()
    dims = tuple(int(d) for d in dims)
    ss = np.random.SeedSequence(seed)
    flag_rng, nl_rng, sh_rng, cut_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    nonlinear = bool(flag_rng.random() < probs.p_nonlinear)
    shuffle = bool(flag_rng.random() < probs.p_shuffle)
    u = flag_rng.random()
    cutout = "inner" if u < probs.p_inner else "outer" if u < probs.p_inner + probs.p_outer else "none"

    params = {}
    if nonlinear:
        decreasing = bool(nl_rng.random() < probs.p_decreasing)
        xs = np.sort(nl_rng.random(2))
        ys = np.sort(nl_rng.random(2))
        if decreasing:
            ys = ys[::-1]
        params["nonlinear"] = {"p1": [float(xs[0]), float(ys[0])],
                               "p2": [float(xs[1]), float(ys[1])], "decreasing": decreasing}
    if shuffle:
        params["shuffle"] = {"windows": _sample_shuffle(sh_rng, dims, probs.shuffle_windows,
                                                        probs.shuffle_bounds),
                             "seed": int(sh_rng.integers(2 ** 63))}
    if cutout == "inner":
        wins, fills = _sample_inner(cut_rng, dims, probs.inner_max_windows)
        params["inner"] = {"windows": wins, "fills": fills}
    elif cutout == "outer":
        wins, fill = _sample_outer(cut_rng, dims, probs.outer_max_windows)
        params["outer"] = {"windows": wins, "fill": fill}
    return CorruptionRecipe(nonlinear, shuffle, cutout, int(seed), params)


def identity_recipe():
    return CorruptionRecipe()


def recipe_for_class(flags, seed=0, dims=(16, 64, 64), probs=None):
    """A recipe with the given flags and freshly sampled parameters."""
    nl, sh, cut = flags
    base = probs or RecipeProbs()
    forced = RecipeProbs(p_nonlinear=float(nl), p_shuffle=float(sh),
                         p_inner=float(cut == "inner"), p_outer=float(cut == "outer"),
                         p_decreasing=base.p_decreasing, shuffle_windows=base.shuffle_windows,
                         shuffle_bounds=base.shuffle_bounds,
                         inner_max_windows=base.inner_max_windows,
                         outer_max_windows=base.outer_max_windows)
    return sample_recipe(forced, seed, dims)


def corrupt(sv, recipe):
    """Apply the enabled transforms in the order nonlinear, shuffle, cutout."""
    out = sv
    p = recipe.params
    if recipe.nonlinear:
        q = p["nonlinear"]
        out = apply_nonlinear(out, bezier_control_points(q["p1"], q["p2"], q["decreasing"]))
    if recipe.shuffle:
        out = apply_local_shuffle(out, p["shuffle"]["windows"], p["shuffle"]["seed"])
    if recipe.cutout == "inner":
        out = apply_inner_cutout(out, p["inner"]["windows"], p["inner"]["fills"])
    elif recipe.cutout == "outer":
        out = apply_outer_cutout(out, p["outer"]["windows"], p["outer"]["fill"])
    return out


def restoration_pair(sv, recipe, include_masks=False):
    """(corrupted network input, regression target)."""
    corrupted = corrupt(sv, recipe)
    target = sv.data if include_masks else sv.image
    return corrupted.data, np.array(target, copy=True)
