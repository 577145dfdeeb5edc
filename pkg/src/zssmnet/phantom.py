"""Synthetic anisotropic bpMRI cases.

A central-gland ellipsoid sits inside a peripheral-zone shell. Lesions
are spheres clipped to the gland, dark on T2W/ADC and bright on DWI.
Everything is a deterministic function of the seed.
"""
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import BG, CG, PZ, CaseRecord, Volume, ZonalMask, save_case, write_manifest

# base intensities per tissue, channels (T2W, DWI, ADC)
TISSUE = {
    BG: (0.25, 0.10, 0.45),
    CG: (0.45, 0.30, 0.65),
    PZ: (0.70, 0.25, 0.85),
}


class InfeasiblePhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple = (16, 128, 128)
    spacing: tuple = (3.0, 0.5, 0.5)
    gland_radii_mm: tuple = (18.0, 16.0, 20.0)  # z, y, x of the outer (PZ) ellipsoid
    cg_fraction: float = 0.6  # CG radii as a fraction of the outer radii
    radius_jitter: float = 0.1
    centre_jitter_mm: float = 3.0
    positive_rate: float = 0.5
    max_lesions: int = 3
    pz_lesion_fraction: float = 0.75
    lesion_radius_mm: tuple = (3.0, 6.0)
    lesion_contrast: tuple = (-0.25, 0.45, -0.40)
    mimic_rate: float = 0.0  # DWI-bright spots without ADC restriction, per case
    noise: float = 0.05
    min_lesion_voxels: int = 10

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "gland_radii_mm", tuple(float(r) for r in self.gland_radii_mm))
        object.__setattr__(self, "lesion_radius_mm", tuple(float(r) for r in self.lesion_radius_mm))
        object.__setattr__(self, "lesion_contrast", tuple(float(c) for c in self.lesion_contrast))
        if self.noise < 0:
            raise InfeasiblePhantomError("noise must be non-negative")
        extent = [d * s for d, s in zip(self.dims, self.spacing)]
        for r, e in zip(self.gland_radii_mm, extent):
            if 2 * r * (1 + self.radius_jitter) + 2 * self.centre_jitter_mm > e:
                raise InfeasiblePhantomError(
                    f"gland radii {self.gland_radii_mm} mm do not fit a {extent} mm field")
        lo, hi = self.lesion_radius_mm
        if not 0 < lo <= hi:
            raise InfeasiblePhantomError(f"bad lesion radius range {self.lesion_radius_mm}")
        if not 0 <= self.positive_rate <= 1:
            raise InfeasiblePhantomError("positive_rate must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _grid_mm(params):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(params.dims, params.spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, centre, radii):
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii))
    return r2 <= 1.0


def generate_case(params=None, seed=0, n_lesions=None, case_id=None):
    """One phantom case; ``n_lesions`` forces the lesion count."""
    params = params or PhantomParams()
    rng = np.random.default_rng(seed)
    grid = _grid_mm(params)
    extent = np.array(params.dims) * np.array(params.spacing)
    centre = extent / 2 + rng.uniform(-1, 1, 3) * params.centre_jitter_mm
    radii = np.array(params.gland_radii_mm) * (1 + rng.uniform(-1, 1, 3) * params.radius_jitter)

    outer = _ellipsoid(grid, centre, radii)
    # CG sits slightly anterior (lower y) inside the shell
    cg_centre = centre - np.array([0.0, 0.15 * radii[1], 0.0])
    inner = _ellipsoid(grid, cg_centre, radii * params.cg_fraction) & outer
    labels = np.full(params.dims, BG, dtype=np.uint8)
    labels[outer] = PZ
    labels[inner] = CG

    if n_lesions is None:
        n_lesions = int(rng.integers(1, params.max_lesions + 1)) if rng.random() < params.positive_rate else 0
    lesions = np.zeros(params.dims, dtype=bool)
    placed = 0
    for _ in range(n_lesions):
        for _attempt in range(50):
            zone = PZ if rng.random() < params.pz_lesion_fraction else CG
            cand = np.argwhere(labels == zone)
            if len(cand) == 0:
                continue
            vox = cand[rng.integers(len(cand))]
            c = (vox + 0.5) * np.array(params.spacing)
            r = rng.uniform(*params.lesion_radius_mm)
            sphere = _ellipsoid(grid, c, (r, r, r)) & outer & ~lesions
            # keep lesions apart so each ground-truth component is one lesion
            dil = _ellipsoid(grid, c, (r + 2 * params.spacing[0],) + (r + 3.0,) * 2)
            if sphere.sum() >= params.min_lesion_voxels and not (dil & lesions).any():
                lesions |= sphere
                placed += 1
                break
        else:
            raise InfeasiblePhantomError("could not place a lesion; gland too small?")

    image = np.empty((3,) + params.dims, dtype=np.float64)
    for ch in range(3):
        base = np.choose(labels, [TISSUE[BG][ch], TISSUE[CG][ch], TISSUE[PZ][ch]])
        image[ch] = base + params.lesion_contrast[ch] * lesions

    n_mimics = int(rng.poisson(params.mimic_rate)) if params.mimic_rate > 0 else 0
    for _ in range(n_mimics):
        cand = np.argwhere(outer & ~lesions)
        vox = cand[rng.integers(len(cand))]
        c = (vox + 0.5) * np.array(params.spacing)
        r = rng.uniform(*params.lesion_radius_mm)
        spot = _ellipsoid(grid, c, (r, r, r)) & outer & ~lesions
        image[1][spot] += params.lesion_contrast[1]

    image += rng.normal(0.0, params.noise, image.shape)
    cid = case_id if case_id is not None else f"phantom_{seed}"
    return CaseRecord(cid, Volume(image.astype(np.float32), params.spacing),
                      ZonalMask(labels, params.spacing), lesions, placed > 0,
                      meta={"seed": int(seed) if np.isscalar(seed) else None, "n_lesions": placed})


def generate_dataset(n, params=None, seed=0, out_dir=None):
    """``n`` cases with exactly ``round(n * positive_rate)`` positives.

    Per-case seeds are spawned from the master seed; ids carry the master
    seed so datasets from different seeds never collide. When
    ``out_dir`` is given, volumes and ``manifest.jsonl`` are written there.
    """
    if n < 1:
        raise ValueError("need at least one case")
    params = params or PhantomParams()
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n + 1)
    order_rng = np.random.default_rng(children[-1])
    n_pos = int(round(n * params.positive_rate))
    positive = np.zeros(n, dtype=bool)
    positive[order_rng.permutation(n)[:n_pos]] = True
    cases = []
    for k in range(n):
        crng = np.random.default_rng(children[k])
        count = int(crng.integers(1, params.max_lesions + 1)) if positive[k] else 0
        case_seed = int(crng.integers(2 ** 63))
        cases.append(generate_case(params, case_seed, n_lesions=count,
                                   case_id=f"ph{seed}_{k:04d}"))
    manifest = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        entries = [save_case(c, out_dir) for c in cases]
        manifest = out_dir / "manifest.jsonl"
        write_manifest(manifest, entries)
    return cases, manifest
