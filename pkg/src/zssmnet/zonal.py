"""Clean-up of predicted zonal masks by connected-component rules."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BG, CG, PZ, ZonalMask

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)
LARGE_FOV_MM = 120.0


@dataclass(frozen=True)
class Component:
    index: np.ndarray  # flat voxel indices, ascending
    size: int
    n_cg: int
    n_pz: int
    centroid: tuple  # voxel coordinates (z, y, x)

    @property
    def mixed(self):
        return self.n_cg > 0 and self.n_pz > 0


def label_components(binary):
    """26-connected labelling; returns (label array, count)."""
    return ndimage.label(binary, structure=STRUCTURE_26)


def connected_components(mask):
    """Components of the non-BG voxels, largest first, ties by centroid."""
    lab = mask.labels
    comp, n = label_components(lab != BG)
    if n == 0:
        return []
    flat_comp = comp.ravel()
    flat_lab = lab.ravel()
    order = np.argsort(flat_comp, kind="stable")
    bounds = np.searchsorted(flat_comp[order], np.arange(1, n + 2))
    out = []
    for k in range(n):
        idx = order[bounds[k]:bounds[k + 1]]
        coords = np.array(np.unravel_index(idx, lab.shape), dtype=np.float64)
        zones = flat_lab[idx]
        out.append(Component(idx, len(idx), int((zones == CG).sum()), int((zones == PZ).sum()),
                             tuple(coords.mean(axis=1))))
    out.sort(key=lambda c: (-c.size, c.centroid))
    return out


def is_large_fov(mask, threshold_mm=LARGE_FOV_MM):
    _, ny, nx = mask.dims
    _, sy, sx = mask.spacing
    return max(ny * sy, nx * sx) > threshold_mm


def _keep(mask, components):
    out = np.zeros(mask.labels.size, dtype=np.uint8)
    flat = mask.labels.ravel()
    for c in components:
        out[c.index] = flat[c.index]
    return ZonalMask(out.reshape(mask.dims), mask.spacing)


def postprocess(mask, fov_class=None, fov_threshold_mm=LARGE_FOV_MM):
    """Apply the four rules in order and return a single-component mask.

    1. a lone component is kept as is;
    2. components holding only one zone are dropped (unless that would
       drop everything);
    3. for large-FOV images, keep the component whose centroid is closest
       to the image centre (in mm);
    4. otherwise keep the largest component.

    ``fov_class`` is ``"normal"``, ``"large"`` or ``None`` to classify by
    in-plane physical extent.
    """
    comps = connected_components(mask)
    if len(comps) <= 1:
        return mask
    mixed = [c for c in comps if c.mixed]
    if mixed:
        comps = mixed
    if len(comps) == 1:
        return _keep(mask, comps)
    if fov_class is None:
        fov_class = "large" if is_large_fov(mask, fov_threshold_mm) else "normal"
    if fov_class not in ("normal", "large"):
        raise ValueError(f"fov_class must be 'normal' or 'large', got {fov_class!r}")
    if fov_class == "large":
        sp = np.array(mask.spacing)
        centre = (np.array(mask.dims) - 1) / 2.0
        dist = [float(np.linalg.norm((np.array(c.centroid) - centre) * sp)) for c in comps]
        best = int(np.argmin(dist))
        return _keep(mask, [comps[best]])
    return _keep(mask, [comps[0]])
