"""Seeded synthetic multi-domain 3D "ultrasound" phantoms.

Each case renders a smooth star-shaped chamber (dark interior, bright
wall) inside an elliptical-cone field of view, over multiplicative
speckle, with per-domain appearance (gamma, contrast, grain, blur).
Geometry parameters of the three built-in device-like domains mirror the
acquisition statistics the system is meant to bridge.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

FACE6 = ndimage.generate_binary_structure(3, 1)


class GenerationError(RuntimeError):
    """Shape could not be placed inside the field of view."""


@dataclass
class Volume:
    """3D scalar field with voxel spacing in mm and a domain tag.

    ``data`` is indexed (z, y, x); x is the fastest-varying axis on disk.
    """

    data: np.ndarray
    spacing_mm: tuple
    domain: str = ""

    @property
    def dims(self):
        return self.data.shape


@dataclass
class DomainSpec:
    name: str
    azimuth_deg: tuple          # (mean, std)
    elevation_deg: tuple
    resolution_mm: tuple
    gamma: float = 1.0
    speckle_grain: float = 1.0  # voxels
    blur_sigma: float = 0.8     # voxels
    contrast: float = 1.0
    split: tuple = (0, 0, 0)    # (train, val, test)
    native_size: int = 64

    def __post_init__(self):
        for mean, _ in (self.azimuth_deg, self.elevation_deg):
            if not 0 < mean < 180:
                raise ValueError(f"opening angle {mean} out of (0, 180)")
        if self.resolution_mm[0] <= 0:
            raise ValueError("resolution must be positive")
        if any(s < 0 for s in self.split):
            raise ValueError("split counts must be >= 0")


def builtin_domains():
    """Three device-like presets: wide cone, narrow cone, eval-only."""
    return [
        DomainSpec("A", azimuth_deg=(87.1, 4.7), elevation_deg=(78.2, 0.1),
                   resolution_mm=(0.95, 0.10), gamma=1.0, speckle_grain=1.0,
                   blur_sigma=0.8, contrast=1.0, split=(33, 7, 27)),
        DomainSpec("B", azimuth_deg=(47.3, 10.4), elevation_deg=(47.4, 10.5),
                   resolution_mm=(0.95, 0.10), gamma=1.8, speckle_grain=2.0,
                   blur_sigma=1.4, contrast=0.55, split=(39, 8, 32)),
        DomainSpec("C", azimuth_deg=(80.2, 0.0), elevation_deg=(91.6, 0.0),
                   resolution_mm=(0.96, 0.11), gamma=0.8, speckle_grain=1.5,
                   blur_sigma=1.0, contrast=0.85, split=(0, 0, 15)),
    ]


def scaled_domains(native_size, split=None):
    """Builtin presets at a reduced native grid (for desk-scale runs)."""
    out = []
    for d in builtin_domains():
        kw = {"native_size": native_size}
        if split is not None:
            kw["split"] = split
        out.append(replace(d, **kw))
    return out


# ---------------------------------------------------------------------------
# geometry


def _fov_mask(size, azimuth_deg, elevation_deg, apex_offset=2.0):
    z, y, x = np.mgrid[0:size, 0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    depth = z - apex_offset + 1e-9
    hx = np.tan(np.radians(azimuth_deg / 2.0)) * depth
    hy = np.tan(np.radians(elevation_deg / 2.0)) * depth
    with np.errstate(divide="ignore", invalid="ignore"):
        r = ((x - c) / hx) ** 2 + ((y - c) / hy) ** 2
    return (depth > 0) & (r <= 1.0)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, xq, yq, zq = q
    return np.array([
        [1 - 2 * (yq * yq + zq * zq), 2 * (xq * yq - zq * w), 2 * (xq * zq + yq * w)],
        [2 * (xq * yq + zq * w), 1 - 2 * (xq * xq + zq * zq), 2 * (yq * zq - xq * w)],
        [2 * (xq * zq - yq * w), 2 * (yq * zq + xq * w), 1 - 2 * (xq * xq + yq * yq)],
    ])


@dataclass
class ShapeSpec:
    semi_axes_mm: np.ndarray
    perturb_amp: np.ndarray     # low-order smooth radial perturbation
    perturb_dir: np.ndarray
    perturb_freq: np.ndarray
    perturb_phase: np.ndarray
    bump_dir: np.ndarray        # appendage on the chamber surface
    bump_scale: float
    rotation: np.ndarray = field(default=None)
    center_vox: np.ndarray = field(default=None)


def _sample_shape(rng):
    semi = np.array([rng.normal(12.0, 2.0), rng.normal(9.0, 1.5), rng.normal(7.0, 1.2)])
    semi = np.clip(semi, 4.0, 18.0)
    n_terms = 3
    return ShapeSpec(
        semi_axes_mm=semi,
        perturb_amp=rng.uniform(0.0, 0.07, size=n_terms),
        perturb_dir=rng.normal(size=(n_terms, 3)),
        perturb_freq=rng.integers(2, 4, size=n_terms).astype(np.float64),
        perturb_phase=rng.uniform(0, 2 * np.pi, size=n_terms),
        bump_dir=rng.normal(size=3),
        bump_scale=rng.uniform(0.25, 0.4),
    )


def _render_mask(size, shape, res_mm):
    semi_vox = shape.semi_axes_mm / res_mm
    rot = shape.rotation
    z, y, x = np.mgrid[0:size, 0:size, 0:size].astype(np.float64)
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()]) - shape.center_vox[:, None]
    local = rot.T @ pts
    v = local / semi_vox[:, None]
    rho = np.linalg.norm(v, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(rho > 0, v / np.maximum(rho, 1e-12), 0.0)
    limit = np.ones_like(rho)
    for a, d, f, ph in zip(shape.perturb_amp, shape.perturb_dir,
                           shape.perturb_freq, shape.perturb_phase):
        dn = d / np.linalg.norm(d)
        limit += a * np.cos(f * np.pi * (dn @ u) + ph)
    mask = rho <= limit

    # appendage: smaller ellipsoid anchored on the chamber surface
    bd = shape.bump_dir / np.linalg.norm(shape.bump_dir)
    anchor = shape.center_vox + rot @ (bd * semi_vox)
    bump_semi = semi_vox * shape.bump_scale
    vb = (rot.T @ (np.stack([x.ravel(), y.ravel(), z.ravel()]) - anchor[:, None])) / bump_semi[:, None]
    mask |= np.linalg.norm(vb, axis=0) <= 1.0
    return mask.reshape(size, size, size)


# ---------------------------------------------------------------------------
# case rendering

MAX_PLACEMENT_ATTEMPTS = 20


def sample_case(domain, seed):
    """Generate one (intensity Volume, label Volume) pair, fully
    determined by (domain spec, seed)."""
    rng = np.random.default_rng(seed)
    size = domain.native_size
    az = max(10.0, rng.normal(*domain.azimuth_deg))
    el = max(10.0, rng.normal(*domain.elevation_deg))
    res = max(0.3, rng.normal(*domain.resolution_mm))
    # angle/size statistics assume ~1 mm voxels on a 64 grid; rescale the
    # metric scene for other native grids
    res *= 64.0 / size
    fov = _fov_mask(size, az, el)

    shape = _sample_shape(rng)
    mask = None
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        shape.rotation = _random_rotation(rng)
        cz = rng.uniform(0.55, 0.78) * size
        cx = (size - 1) / 2.0 + rng.normal(0.0, 0.04 * size)
        cy = (size - 1) / 2.0 + rng.normal(0.0, 0.04 * size)
        shape.center_vox = np.array([cx, cy, cz])
        # shrink (aspect preserved) if the cone is too narrow at this
        # depth for the drawn chamber; retries shrink a bit further
        semi_vox = shape.semi_axes_mm / res
        extent = semi_vox.max() * 1.45   # perturbation + appendage margin
        depth = cz - extent - 2.0
        room = min(np.tan(np.radians(az / 2.0)), np.tan(np.radians(el / 2.0))) * max(depth, 1.0)
        room = min(room, size - 1 - cz)
        fit = min(1.0, 0.95 * room / extent) * (0.93 ** attempt)
        scaled = replace(shape, semi_axes_mm=shape.semi_axes_mm * fit)
        scaled.rotation = shape.rotation
        scaled.center_vox = shape.center_vox
        cand = _render_mask(size, scaled, res)
        if cand.any() and not (cand & ~fov).any():
            mask = cand
            break
    if mask is None:
        raise GenerationError(
            f"shape escaped the field of view after {MAX_PLACEMENT_ATTEMPTS} attempts "
            f"(domain {domain.name}, seed {seed})")

    wall = ndimage.binary_dilation(mask, FACE6, iterations=2) & ~mask
    img = np.full((size, size, size), 0.50, dtype=np.float64)
    img[mask] = 0.12
    img[wall] = 0.85

    noise = rng.standard_normal(img.shape)
    noise = ndimage.gaussian_filter(noise, domain.speckle_grain)
    noise /= max(noise.std(), 1e-9)
    img *= 1.0 + 0.35 * noise
    img = ndimage.gaussian_filter(img, domain.blur_sigma)
    img = np.clip(img, 0.0, 1.0) ** domain.gamma
    img = 0.5 + domain.contrast * (img - 0.5)
    img = np.clip(img, 0.0, 1.0)
    img[~fov] = 0.0

    spacing = (res, res, res)
    vol = Volume(img.astype(np.float32), spacing, domain.name)
    label = Volume(mask.astype(np.uint8), spacing, domain.name)
    return vol, label


def preprocess(vol, target=64, interp="trilinear"):
    """Scale so the largest dimension fits ``target`` (angles and ratios
    preserved), then zero-pad the shorter axes symmetrically.

    Intensities are rescaled to [0, 1]; labels use ``interp='nearest'``
    so the identical geometric transform applies to both.
    """
    if target <= 0:
        raise ValueError("target size must be positive")
    dims = vol.data.shape
    scale = target / max(dims)
    out_dims = tuple(max(1, round(d * scale)) for d in dims)
    factors = [o / d for o, d in zip(out_dims, dims)]
    order = 0 if interp == "nearest" else 1
    data = ndimage.zoom(vol.data.astype(np.float32), factors, order=order,
                        grid_mode=True, mode="grid-constant")
    data = data[:out_dims[0], :out_dims[1], :out_dims[2]]
    if interp == "nearest":
        data = (data > 0.5).astype(np.uint8)
    else:
        lo, hi = float(data.min()), float(data.max())
        data = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    out = np.zeros((target,) * 3, dtype=data.dtype)
    off = [(target - o) // 2 for o in out_dims]
    out[off[0]:off[0] + out_dims[0],
        off[1]:off[1] + out_dims[1],
        off[2]:off[2] + out_dims[2]] = data
    spacing = tuple(s / scale for s in vol.spacing_mm)
    return Volume(out, spacing, vol.domain)


# ---------------------------------------------------------------------------
# file format and dataset manifest

_DTYPE_F32 = 0
_DTYPE_U8 = 1


def write_volume(path, vol):
    data = vol.data
    code = _DTYPE_U8 if data.dtype == np.uint8 else _DTYPE_F32
    d, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"V3D1")
        fh.write(struct.pack("<3I", w, h, d))          # dims as (x, y, z)
        fh.write(struct.pack("<3f", *vol.spacing_mm[::-1]))
        fh.write(struct.pack("<B", code))
        if code == _DTYPE_U8:
            fh.write(np.ascontiguousarray(data).tobytes())
        else:
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_volume(path, domain=""):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"V3D1":
        raise ValueError(f"{path}: bad volume magic")
    w, h, d = struct.unpack_from("<3I", raw, 4)
    sx, sy, sz = struct.unpack_from("<3f", raw, 16)
    (code,) = struct.unpack_from("<B", raw, 28)
    count = w * h * d
    if code == _DTYPE_U8:
        data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=29)
    elif code == _DTYPE_F32:
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=29)
    else:
        raise ValueError(f"{path}: unknown dtype code {code}")
    return Volume(data.reshape(d, h, w).copy(), (sz, sy, sx), domain)


@dataclass
class ManifestEntry:
    case_id: str
    domain: str
    split: str
    volume_path: str
    label_path: str
    seed: int


def case_seed(global_seed, case_id):
    return (int(global_seed) << 32) ^ zlib.crc32(case_id.encode())


def make_dataset(domains, seed, out_dir):
    """Generate every case per the domain split counts and write volumes,
    labels and a manifest CSV. Returns the manifest entries.

    Target-domain labels are written too, but training code must only
    ever read them for evaluation.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for dom in domains:
        for split, count in zip(("train", "val", "test"), dom.split):
            for i in range(count):
                case_id = f"{dom.name}_{split}_{i:03d}"
                cseed = case_seed(seed, case_id)
                vol, label = sample_case(dom, cseed)
                vpath = out_dir / f"{case_id}.vol"
                lpath = out_dir / f"{case_id}.lab"
                write_volume(vpath, vol)
                write_volume(lpath, label)
                entries.append(ManifestEntry(case_id, dom.name, split,
                                             str(vpath), str(lpath), cseed))
    write_manifest(out_dir / "manifest.csv", entries)
    return entries


def write_manifest(path, entries):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["case_id", "domain", "split", "volume_path", "label_path", "seed"])
        for e in entries:
            wr.writerow([e.case_id, e.domain, e.split, e.volume_path, e.label_path, e.seed])


def read_manifest(path):
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entries.append(ManifestEntry(row["case_id"], row["domain"], row["split"],
                                         row["volume_path"], row["label_path"],
                                         int(row["seed"])))
    return entries
