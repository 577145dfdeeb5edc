"""The G x G mesh of mixed 2D/3D modules.

Grid coordinates are 1-based ``(i, j)``. Each mesh axis is U-shaped:
``level(i)`` rises to the middle row/column and falls again, so moving
down a column pools (or unpools) in 3D and moving along a row pools (or
unpools) in-plane only. Module ``(i, j)`` therefore works at
``(Z / 2**l(i), Y / 2**(l(i)+l(j)), X / 2**(l(i)+l(j)))`` with the
default pooling factors.
"""
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .nn import autograd as ag
from .nn.autograd import Parameter, ShapeError


@dataclass(frozen=True)
class MeshConfig:
    grid: int = 5
    base_filters: int = 32
    growth: int = 16
    in_channels: int = 6
    n_classes: int = 2
    slope: float = 0.01
    eps: float = 1e-5
    pool_3d: tuple = (2, 2, 2)
    pool_2d: tuple = (1, 2, 2)

    def __post_init__(self):
        if self.grid < 3 or self.grid % 2 == 0:
            raise ValueError(f"grid size must be odd and >= 3, got {self.grid}")
        if self.base_filters <= 0 or self.growth <= 0:
            raise ValueError("base_filters and growth must be positive")
        if self.in_channels <= 0 or self.n_classes < 2:
            raise ValueError("need in_channels >= 1 and n_classes >= 2")
        if not 0 < self.slope < 1:
            raise ValueError("leaky slope must lie in (0, 1)")
        object.__setattr__(self, "pool_3d", tuple(int(f) for f in self.pool_3d))
        object.__setattr__(self, "pool_2d", tuple(int(f) for f in self.pool_2d))
        for f in self.pool_3d + self.pool_2d:
            if f not in (1, 2):
                raise ValueError("pooling factors must be 1 or 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("pool_3d", "pool_2d"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def level(i, grid=5):
    if not 1 <= i <= grid:
        raise IndexError(f"grid index {i} outside 1..{grid}")
    return min(i, grid + 1 - i) - 1


def depth(i, j, grid=5):
    return level(i, grid) + level(j, grid) + 1


def filter_count(d, base=32, growth=16):
    if d < 1:
        raise ValueError(f"depth must be >= 1, got {d}")
    return base + growth * (d - 1)


def aux_weight(i, grid=5):
    """Deep-supervision weight of the heads at (i, G) and (G, i)."""
    return 0.5 ** (grid - i)


def module_kind(i, j, grid):
    if j == grid and i < grid:
        return "2d"
    if i == grid and j < grid:
        return "3d"
    return "mixed"


def head_positions(grid):
    """Auxiliary head coordinates, ordered (i, G) then (G, i) for i = 2..G-1."""
    aux = [(i, grid) for i in range(2, grid)] + [(grid, i) for i in range(2, grid)]
    return aux


@dataclass
class Module:
    i: int
    j: int
    kind: str
    channels: int
    sources: list  # (kind, (i, j), resample) in concatenation order
    in_channels: int
    divisor: tuple  # per-axis spatial divisor relative to the input
    blocks: dict = field(default_factory=dict)  # "2d"/"3d" -> list of layer param tuples
    head: tuple = None


def _edge(cfg, src_level, dst_level, vertical):
    factors = cfg.pool_3d if vertical else cfg.pool_2d
    if dst_level > src_level:
        return ("pool", factors)
    return ("up", factors)


def _apply_divisor(div, resample):
    op, factors = resample
    if op == "pool":
        return tuple(Fraction(d) * f for d, f in zip(div, factors))
    if op == "up":
        return tuple(Fraction(d) / f for d, f in zip(div, factors))
    return div


class MeshNetwork:
    """Parameters and wiring of a mesh; evaluation lives in :func:`forward`."""

    def __init__(self, cfg, modules, params, restoration_head=None):
        self.cfg = cfg
        self.modules = modules
        self.params = params
        self.restoration_head = restoration_head

    @property
    def grid(self):
        return self.cfg.grid

    def parameters(self, include_heads=True, include_restoration=True):
        out = []
        for p in self.params.values():
            if not include_heads and ".head." in p.name:
                continue
            if not include_restoration and p.name.startswith("restore."):
                continue
            out.append(p)
        return out

    def n_parameters(self):
        return sum(p.value.size for p in self.params.values())

    def heads(self):
        return [(ij, m) for ij, m in sorted(self.modules.items()) if m.head is not None]

    def max_divisor(self):
        div = np.ones(3, dtype=object)
        for m in self.modules.values():
            div = np.maximum(div, np.array(m.divisor, dtype=object))
        return tuple(int(d) for d in div)

    def astype(self, dtype):
        """Copy of the network with parameters (and momenta) cast to ``dtype``."""
        params = {}
        for name, p in self.params.items():
            q = Parameter(name, p.value.astype(dtype))
            q.momentum = p.momentum.astype(dtype)
            params[name] = q
        return _rebind(self, params)

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def add_restoration_head(self, channels=3, seed=0, zero_init=True):
        """Attach a fresh 1x1x1 regression head on the final module.

        With ``zero_init`` the head starts at zero, so the first updates
        fit the head instead of back-propagating a large initial error
        into the backbone.
        """
        rng = np.random.default_rng(seed)
        top = self.modules[(self.grid, self.grid)]
        w, b = _conv_params(rng, "restore", channels, top.channels, (1, 1, 1), self.dtype)
        if zero_init:
            w.value[...] = 0
        self.params[w.name] = w
        self.params[b.name] = b
        self.restoration_head = (w, b)
        return self

    def drop_restoration_head(self):
        if self.restoration_head is not None:
            for p in self.restoration_head:
                self.params.pop(p.name, None)
        self.restoration_head = None
        return self


def _rebind(net, params):
    modules = {}
    for ij, m in net.modules.items():
        blocks = {k: [tuple(params[p.name] for p in layer) for layer in layers]
                  for k, layers in m.blocks.items()}
        head = tuple(params[p.name] for p in m.head) if m.head else None
        modules[ij] = Module(m.i, m.j, m.kind, m.channels, list(m.sources), m.in_channels,
                             m.divisor, blocks, head)
    restore = None
    if net.restoration_head is not None:
        restore = tuple(params[p.name] for p in net.restoration_head)
    return MeshNetwork(net.cfg, modules, params, restore)


def _conv_params(rng, prefix, c_out, c_in, kernel, dtype, slope=0.01):
    fan_in = c_in * int(np.prod(kernel))
    std = np.sqrt(2.0 / ((1 + slope ** 2) * fan_in))
    w = rng.standard_normal((c_out, c_in) + tuple(kernel)) * std
    return (Parameter(f"{prefix}.w", w.astype(dtype)),
            Parameter(f"{prefix}.b", np.zeros(c_out, dtype=dtype)))


def build(cfg=None, seed=0, dtype=np.float32):
    """Construct and shape-check a mesh network.

    Raises ``ShapeError`` if two inputs of any module disagree on their
    spatial divisor, which would make the wiring size-inconsistent.
    """
    cfg = cfg or MeshConfig()
    G = cfg.grid
    mid = (G + 1) // 2
    rng = np.random.default_rng(seed)
    modules, params = {}, {}

    for i in range(1, G + 1):
        for j in range(1, G + 1):
            sources = []
            if i == 1 and j == 1:
                sources.append(("input", None, ("none", None)))
            if i > 1:
                sources.append(("edge", (i - 1, j),
                                _edge(cfg, level(i - 1, G), level(i, G), vertical=True)))
            if j > 1:
                sources.append(("edge", (i, j - 1),
                                _edge(cfg, level(j - 1, G), level(j, G), vertical=False)))
            if i > mid:
                sources.append(("skip", (G + 1 - i, j), ("none", None)))
            if j > mid:
                sources.append(("skip", (i, G + 1 - j), ("none", None)))

            divs, c_in = [], 0
            for kind, src, resample in sources:
                if kind == "input":
                    divs.append((Fraction(1),) * 3)
                    c_in += cfg.in_channels
                else:
                    sm = modules[src]
                    divs.append(_apply_divisor(sm.divisor, resample))
                    c_in += sm.channels
            if any(d != divs[0] for d in divs[1:]):
                raise ShapeError(f"module m{i}{j}: inputs disagree on spatial size {divs}")
            divisor = divs[0]
            if any(d < 1 or d.denominator != 1 for d in divisor):
                raise ShapeError(f"module m{i}{j}: non-integral divisor {divisor}")

            k = filter_count(depth(i, j, G), cfg.base_filters, cfg.growth)
            mod = Module(i, j, module_kind(i, j, G), k, sources, c_in,
                         tuple(int(d) for d in divisor))
            kinds = ("2d", "3d") if mod.kind == "mixed" else (mod.kind,)
            for bk in kinds:
                kz = 1 if bk == "2d" else 3
                layers, c = [], c_in
                for layer in range(2):
                    prefix = f"m{i}{j}.{bk}.{layer}"
                    # no conv bias: the instance norm removes it and its shift replaces it
                    w, _ = _conv_params(rng, f"{prefix}.conv", k, c, (kz, 3, 3), dtype, cfg.slope)
                    gain = Parameter(f"{prefix}.in.g", np.ones(k, dtype=dtype))
                    shift = Parameter(f"{prefix}.in.s", np.zeros(k, dtype=dtype))
                    layers.append((w, gain, shift))
                    c = k
                mod.blocks[bk] = layers
            modules[(i, j)] = mod

    for ij in head_positions(G) + [(G, G)]:
        mod = modules[ij]
        w, b = _conv_params(rng, f"m{ij[0]}{ij[1]}.head", cfg.n_classes, mod.channels,
                            (1, 1, 1), dtype, cfg.slope)
        mod.head = (w, b)

    for mod in modules.values():
        for layers in mod.blocks.values():
            for layer in layers:
                for p in layer:
                    params[p.name] = p
        if mod.head:
            for p in mod.head:
                params[p.name] = p
    return MeshNetwork(cfg, modules, params)


def check_input_shape(net, shape):
    """Raise ``ShapeError`` naming the first axis the mesh cannot divide."""
    if len(shape) != 5:
        raise ShapeError(f"expected (N, C, Z, Y, X) input, got {shape}")
    if shape[1] != net.cfg.in_channels:
        raise ShapeError(f"expected {net.cfg.in_channels} input channels, got {shape[1]}")
    for axis, (d, q) in enumerate(zip(shape[2:], net.max_divisor())):
        if d % q:
            raise ShapeError(f"axis {'ZYX'[axis]} of size {d} is not divisible by {q}")


def _block(x, layers, slope, eps):
    for w, gain, shift in layers:
        x = ag.leaky_relu(ag.instance_norm(ag.conv(x, w), gain, shift, eps), slope)
    return x


def _resample(node, resample):
    op, factors = resample
    if op == "pool":
        return ag.max_pool(node, factors)
    if op == "up":
        return ag.linear_upsample(node, factors)
    return node


def forward(net, x, with_features=False):
    """Evaluate the mesh.

    ``x`` is a node or array of shape ``(N, C, Z, Y, X)`` (a 4-D array
    gets a batch axis). Returns ``(final, aux)`` where ``final`` is the
    channel-softmax at module (G, G) and ``aux`` maps each auxiliary head
    coordinate to its softmax node. With ``with_features`` the feature
    map of module (G, G) is returned as a third element.
    """
    if not isinstance(x, ag.Node):
        arr = np.asarray(x, dtype=net.dtype)
        if arr.ndim == 4:
            arr = arr[None]
        x = ag.constant(arr)
    check_input_shape(net, x.shape)
    cfg = net.cfg
    feats = {}
    for (i, j), mod in sorted(net.modules.items()):
        inputs = []
        for kind, src, resample in mod.sources:
            inputs.append(x if kind == "input" else _resample(feats[src], resample))
        h = ag.concat(inputs)
        outs = [_block(h, mod.blocks[bk], cfg.slope, cfg.eps) for bk in ("2d", "3d")
                if bk in mod.blocks]
        feats[(i, j)] = ag.abs_diff(outs[0], outs[1]) if len(outs) == 2 else outs[0]

    def head(ij):
        w, b = net.modules[ij].head
        return ag.softmax_channels(ag.conv(feats[ij], w, b))

    G = cfg.grid
    final = head((G, G))
    aux = {ij: head(ij) for ij in head_positions(G)}
    if with_features:
        return final, aux, feats[(G, G)]
    return final, aux


def restore(net, x):
    """Restoration output of the pre-training head (linear, no softmax)."""
    if net.restoration_head is None:
        raise ValueError("network has no restoration head; call add_restoration_head()")
    _, _, feat = forward(net, x, with_features=True)
    w, b = net.restoration_head
    return ag.conv(feat, w, b)


def summary(net, input_zyx=None):
    """Plain-text table of modules, block types, channels and shapes."""
    cfg = net.cfg
    lines = [f"MeshNetwork grid={cfg.grid} base_filters={cfg.base_filters} growth={cfg.growth} "
             f"in_channels={cfg.in_channels} n_classes={cfg.n_classes}"]
    lines.append("module kind  depth channels in_ch divisor(z,y,x) shape sources")
    for (i, j), m in sorted(net.modules.items()):
        shape = "-"
        if input_zyx is not None:
            shape = "x".join(str(d // q) for d, q in zip(input_zyx, m.divisor))
        src = ",".join("in" if k == "input" else f"{k}:m{s[0]}{s[1]}/{r[0]}"
                       for k, s, r in m.sources)
        head = " head" if m.head else ""
        lines.append(f"m{i}{j} {m.kind:5s} {depth(i, j, cfg.grid):5d} {m.channels:8d} "
                     f"{m.in_channels:5d} {m.divisor[0]},{m.divisor[1]},{m.divisor[2]} "
                     f"{shape} {src}{head}")
    lines.append(f"heads={len(net.heads())} parameters={net.n_parameters()}")
    return "\n".join(lines) + "\n"
