"""Benchmark objectives with known ground truth.

Four families: an analytic quadratic, a negated Gaussian whose smoothed
derivatives have closed forms (a non-PSD testbed), plateaued
box-placement and texture tasks on a tiny software rasterizer, and a
Phong-shaded sphere with analytic derivatives.  Every objective is a
deterministic function of its parameters, so exact finite-difference
oracles apply.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimators import Objective

TWO_PI = 2.0 * math.pi


@dataclass
class Task:
    """An objective with ground truth and optional derivative oracles.

    ``smoothed_grad``/``smoothed_hess`` take (theta, kernel_sigma) and
    return derivatives of the Gaussian-smoothed objective; they exist
    only where the convolution has a closed form.
    """

    name: str
    dim: int
    fn: Callable[[np.ndarray], float]
    theta_true: np.ndarray
    init_sampler: Callable[[np.random.Generator], np.ndarray]
    analytic_grad: Callable[[np.ndarray], np.ndarray] | None = None
    analytic_hess: Callable[[np.ndarray], np.ndarray] | None = None
    smoothed_grad: Callable[[np.ndarray, float], np.ndarray] | None = None
    smoothed_hess: Callable[[np.ndarray, float], np.ndarray] | None = None
    plateau_points: list[np.ndarray] = field(default_factory=list)

    def objective(self) -> Objective:
        return Objective(self.fn, self.dim, name=self.name)

    def param_error(self, theta: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(theta, dtype=float) - self.theta_true))


# ---------------------------------------------------------------------------
# analytic tasks
# ---------------------------------------------------------------------------

QUAD_A = 5.0
QUAD_B = 5.0
QUAD_C = 7.5
QUAD_HESSIAN = np.array([[2.0 * QUAD_A, QUAD_C], [QUAD_C, 2.0 * QUAD_B]])


def quad_task() -> Task:
    """Two-dimensional quadratic bowl a*x0^2 + b*x1^2 + c*x0*x1.

    Gaussian smoothing adds only a constant, so the smoothed gradient and
    Hessian coincide with the plain ones at every bandwidth.
    """

    def fn(th):
        x0, x1 = float(th[0]), float(th[1])
        return QUAD_A * x0 * x0 + QUAD_B * x1 * x1 + QUAD_C * x0 * x1

    def grad(th):
        return QUAD_HESSIAN @ np.asarray(th, dtype=float)

    def hess(th):
        return QUAD_HESSIAN.copy()

    return Task(
        name="quad",
        dim=2,
        fn=fn,
        theta_true=np.zeros(2),
        init_sampler=lambda gen: gen.uniform(-3.0, 3.0, size=2),
        analytic_grad=grad,
        analytic_hess=hess,
        smoothed_grad=lambda th, s: QUAD_HESSIAN @ np.asarray(th, dtype=float),
        smoothed_hess=lambda th, s: QUAD_HESSIAN.copy(),
    )


def negated_gaussian_task(sigma1: float = 1.0) -> Task:
    """Negated 2D Gaussian: a bowl whose Hessian is indefinite everywhere.

    Convolving with a Gaussian of bandwidth sigma2 gives another negated
    Gaussian of scale sqrt(sigma1^2 + sigma2^2), so smoothed derivatives
    of any order are available in closed form.
    """
    if sigma1 <= 0:
        raise ValueError(f"sigma1 must be > 0, got {sigma1}")
    s1sq = sigma1 * sigma1

    def fn(th):
        x0, x1 = float(th[0]), float(th[1])
        return -math.exp(-(x0 * x0 + x1 * x1) / (2.0 * s1sq)) / (TWO_PI * s1sq)

    def _neg_gauss_value(th, ssq):
        th = np.asarray(th, dtype=float)
        return -math.exp(-float(th @ th) / (2.0 * ssq)) / (TWO_PI * ssq)

    def grad(th, ssq=s1sq):
        th = np.asarray(th, dtype=float)
        return -_neg_gauss_value(th, ssq) * th / ssq

    def hess(th, ssq=s1sq):
        th = np.asarray(th, dtype=float)
        val = _neg_gauss_value(th, ssq)
        return -val * (np.eye(2) / ssq - np.outer(th, th) / (ssq * ssq))

    return Task(
        name="neg_gauss",
        dim=2,
        fn=fn,
        theta_true=np.zeros(2),
        init_sampler=lambda gen: gen.uniform(-3.0, 3.0, size=2),
        analytic_grad=grad,
        analytic_hess=hess,
        smoothed_grad=lambda th, s2: grad(th, s1sq + s2 * s2),
        smoothed_hess=lambda th, s2: hess(th, s1sq + s2 * s2),
    )


# ---------------------------------------------------------------------------
# rasterized tasks
# ---------------------------------------------------------------------------

BOX_SIDE = 1.0 / 8.0  # in canvas widths

_BOX_TARGETS = np.array([
    [0.50, 0.50],
    [0.25, 0.25],
    [0.75, 0.25],
    [0.25, 0.75],
    [0.75, 0.75],
    [0.50, 0.20],
    [0.20, 0.50],
    [0.80, 0.50],
])


@dataclass(frozen=True)
class RasterScene:
    """Axis-aligned square rasterizer with analytic coverage antialiasing.

    Pixel values are the exact overlap area between the square and the
    pixel cell, so the image is a deterministic, piecewise-smooth
    function of the square centers.
    """

    width: int
    height: int
    box_half: float
    background: float = 0.0

    def axis_coverage(self, center: float, npix: int) -> np.ndarray:
        lo = (center - self.box_half) * npix
        hi = (center + self.box_half) * npix
        cells = np.arange(npix, dtype=float)
        return np.clip(np.minimum(hi, cells + 1.0) - np.maximum(lo, cells), 0.0, 1.0)

    def render(self, centers: np.ndarray) -> np.ndarray:
        """Coverage image for a set of square centers, clipped to [0, 1]."""
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        img = np.full((self.height, self.width), self.background)
        for cx, cy in centers:
            img += np.outer(self.axis_coverage(cy, self.height), self.axis_coverage(cx, self.width))
        return np.clip(img, 0.0, 1.0)


def _box_plateau_points(num_boxes: int, count: int) -> list[np.ndarray]:
    # diagonal positions with both coordinates beyond the visibility clamp:
    # the rendered image is exactly invariant there, so classic finite
    # differences are 0.0 bit-for-bit
    corners = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
    pts = []
    for k in range(count):
        theta = np.empty(2 * num_boxes)
        for b in range(num_boxes):
            corner = corners[(k + b) % 4]
            reach = 0.48 + 0.28 * ((k * 7 + b * 3) % 5) / 4.0
            theta[2 * b: 2 * b + 2] = 0.5 + corner * reach
        pts.append(theta)
    return pts


def box_task(num_boxes: int, resolution: tuple[int, int] = (64, 64)) -> Task:
    """Match square placements to a reference image by MSE.

    Each square renders into its own color channel, so squares cannot
    hide behind one another and every square is matched against its own
    target.  Centers clamp to the visible range inside the objective, so
    a square never leaves the canvas: parameters pushed past the clamp
    are legal and sit on an exactly flat plateau where classic gradients
    vanish identically, while the smoothed gradient still pulls toward
    the target.  Disjoint in-canvas placements are near-flat as well (the
    image error no longer depends on where a stray square sits, up to
    sub-pixel coverage ripple).
    """
    if not (1 <= num_boxes <= 8):
        raise ValueError(f"num_boxes must be in 1..8, got {num_boxes}")
    w, h = resolution
    if w < 32 or h < 32:
        raise ValueError(f"resolution must be at least 32x32, got {resolution}")
    scene = RasterScene(width=w, height=h, box_half=BOX_SIDE / 2.0)
    targets = _BOX_TARGETS[:num_boxes]
    ref_channels = [scene.render(t[None, :]) for t in targets]
    # squared image error in units of one box footprint: a lost square
    # costs about 2.0, which keeps gradient scales usable at wide sigma
    norm = (w * BOX_SIDE) * (h * BOX_SIDE)
    lo = scene.box_half
    hi = 1.0 - scene.box_half

    def fn(th):
        centers = np.clip(np.asarray(th, dtype=float).reshape(num_boxes, 2), lo, hi)
        total = 0.0
        for k in range(num_boxes):
            diff = scene.render(centers[k][None, :]) - ref_channels[k]
            total += float(np.sum(diff * diff))
        return total / norm

    def init(gen):
        return gen.uniform(0.15, 0.85, size=2 * num_boxes)

    return Task(
        name=f"box{2 * num_boxes}",
        dim=2 * num_boxes,
        fn=fn,
        theta_true=targets.reshape(-1).copy(),
        init_sampler=init,
        plateau_points=_box_plateau_points(num_boxes, 20),
    )


def _texture_reference(side: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    ref = 0.5 + 0.45 * np.sin(TWO_PI * jj / side) * np.cos(TWO_PI * ii / side)
    return ref.reshape(-1)


def texture_task(side: int = 16) -> Task:
    """Per-texel intensity recovery: separable, convex, n = side^2.

    Texels clamp to [0, 1] inside the objective; the analytic gradient is
    2(theta - ref)/n on the interior and 0 where the clamp is active.
    """
    if side < 4:
        raise ValueError(f"side must be >= 4, got {side}")
    ref = _texture_reference(side)
    n = side * side

    def fn(th):
        t = np.clip(np.asarray(th, dtype=float), 0.0, 1.0)
        d = t - ref
        return float(d @ d / n)

    def grad(th):
        th = np.asarray(th, dtype=float)
        t = np.clip(th, 0.0, 1.0)
        g = 2.0 * (t - ref) / n
        g[(th < 0.0) | (th > 1.0)] = 0.0
        return g

    def hess(th):
        th = np.asarray(th, dtype=float)
        d = np.where((th < 0.0) | (th > 1.0), 0.0, 2.0 / n)
        return np.diag(d)

    return Task(
        name=f"texture{side}",
        dim=n,
        fn=fn,
        theta_true=ref.copy(),
        init_sampler=lambda gen: gen.uniform(0.0, 1.0, size=n),
        analytic_grad=grad,
        analytic_hess=hess,
    )


# ---------------------------------------------------------------------------
# Phong sphere
# ---------------------------------------------------------------------------

PHONG_TRUE = np.array([0.6, 0.3, 0.2, 0.4, 0.4, 0.4, 2.0])
_SHININESS_FLOOR = 1e-3
_SHININESS_UNIT = 10.0  # th[6] carries the exponent in tens, keeping all
                        # seven parameters on commensurate scales


class _PhongScene:
    """Direct per-pixel shading of a sphere under one point light."""

    def __init__(self, resolution: int = 32):
        radius = 0.95
        xs = np.linspace(-1.0, 1.0, resolution)
        xx, yy = np.meshgrid(xs, xs)
        rr = xx * xx + yy * yy
        mask = rr <= radius * radius
        nx = xx[mask] / radius
        ny = yy[mask] / radius
        nz = np.sqrt(np.clip(radius * radius - rr[mask], 0.0, None)) / radius
        light = np.array([0.4, 0.4, 0.8])
        light = light / np.linalg.norm(light)
        ndotl = nx * light[0] + ny * light[1] + nz * light[2]
        self.diffuse = np.clip(ndotl, 0.0, None)
        # view direction (0, 0, 1): specular base is the z component of
        # the reflected light direction
        refl_z = 2.0 * ndotl * nz - light[2]
        self.spec_base = np.clip(refl_z, 0.0, 1.0)
        self.log_spec = np.where(self.spec_base > 0.0, np.log(np.clip(self.spec_base, 1e-300, None)), 0.0)
        self.total_pixels = resolution * resolution

    def shade(self, kd: np.ndarray, ks: np.ndarray, alpha: float) -> np.ndarray:
        spec = np.where(self.spec_base > 0.0, self.spec_base ** alpha, 0.0)
        return self.diffuse[:, None] * kd[None, :] + spec[:, None] * ks[None, :]

    def spec_terms(self, alpha: float):
        spec = np.where(self.spec_base > 0.0, self.spec_base ** alpha, 0.0)
        return spec, spec * self.log_spec, spec * self.log_spec * self.log_spec


def phong_sphere_task(resolution: int = 32) -> Task:
    """Recover 7 reflectance unknowns of a shaded sphere from its image.

    Parameters are diffuse RGB, specular RGB, and the shininess exponent
    (expressed in tens, so all seven unknowns are order one); geometry,
    camera, and light stay fixed.  Exponents at or below zero are clamped
    to a small floor inside the objective.
    """
    scene = _PhongScene(resolution)
    ref = scene.shade(PHONG_TRUE[0:3], PHONG_TRUE[3:6], PHONG_TRUE[6] * _SHININESS_UNIT)
    norm = 3.0 * scene.total_pixels

    def _split(th):
        th = np.asarray(th, dtype=float)
        return th[0:3], th[3:6], max(float(th[6]) * _SHININESS_UNIT, _SHININESS_FLOOR)

    def fn(th):
        kd, ks, alpha = _split(th)
        diff = scene.shade(kd, ks, alpha) - ref
        return float(np.sum(diff * diff) / norm)

    def grad(th):
        kd, ks, alpha = _split(th)
        spec, spec_l, _ = scene.spec_terms(alpha)
        e = scene.shade(kd, ks, alpha) - ref
        g = np.empty(7)
        g[0:3] = 2.0 * (e.T @ scene.diffuse) / norm
        g[3:6] = 2.0 * (e.T @ spec) / norm
        g[6] = 2.0 * _SHININESS_UNIT * float((e * (spec_l[:, None] * ks[None, :])).sum()) / norm
        return g

    def hess(th):
        kd, ks, alpha = _split(th)
        spec, spec_l, spec_l2 = scene.spec_terms(alpha)
        e = scene.shade(kd, ks, alpha) - ref
        h = np.zeros((7, 7))
        dd = float(scene.diffuse @ scene.diffuse)
        ds = float(scene.diffuse @ spec)
        ss = float(spec @ spec)
        for c in range(3):
            h[c, c] = dd
            h[c, 3 + c] = h[3 + c, c] = ds
            h[3 + c, 3 + c] = ss
        d_sl = float(scene.diffuse @ spec_l)
        s_sl = float(spec @ spec_l)
        sl_sl = float(spec_l @ spec_l)
        unit = _SHININESS_UNIT
        for c in range(3):
            h[c, 6] = h[6, c] = ks[c] * d_sl * unit
            # J_ks * J_alpha plus the e * d2I/(dks dalpha) curvature term
            h[3 + c, 6] = h[6, 3 + c] = (ks[c] * s_sl + float(e[:, c] @ spec_l)) * unit
        h[6, 6] = (sl_sl * float(ks @ ks) + float(((e * spec_l2[:, None]) @ ks).sum())) * unit * unit
        return 2.0 * h / norm

    def init(gen):
        th = np.empty(7)
        th[0:6] = gen.uniform(0.05, 0.95, size=6)
        th[6] = gen.uniform(0.5, 5.0)
        return th

    return Task(
        name="phong",
        dim=7,
        fn=fn,
        theta_true=PHONG_TRUE.copy(),
        init_sampler=init,
        analytic_grad=grad,
        analytic_hess=hess,
    )


# ---------------------------------------------------------------------------
# task registry
# ---------------------------------------------------------------------------

def make_task(name: str) -> Task:
    """Build a task from its registry name (used by configs and the CLI)."""
    key = name.strip().lower()
    if key == "quad":
        return quad_task()
    if key in ("neg_gauss", "negated_gaussian", "neggauss"):
        return negated_gaussian_task()
    if key == "box2":
        return box_task(1)
    if key == "box10":
        return box_task(5)
    if key.startswith("texture"):
        side = int(key.removeprefix("texture") or 16)
        return texture_task(side)
    if key == "phong":
        return phong_sphere_task()
    raise ValueError(f"unknown task {name!r}")


TASK_NAMES = ("quad", "neg_gauss", "box2", "box10", "texture8", "texture16", "phong")


# ---------------------------------------------------------------------------
# reference image files: magic, width/height/channels, row-major float32
# ---------------------------------------------------------------------------

_IMAGE_MAGIC = b"F32I"


def write_image(path, image: np.ndarray) -> None:
    """Write a grayscale or RGB float image in the lossless raw layout.

    Layout: 4-byte magic ``F32I``, then width, height, channels as
    little-endian uint32, then the pixel data as little-endian float32 in
    row-major order.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"image must be HxW or HxWxC, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_IMAGE_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_image(path) -> np.ndarray:
    """Read an image written by ``write_image``; returns (H, W, C) float32."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _IMAGE_MAGIC:
            raise ValueError(f"{path}: not a float32 image file (magic {magic!r})")
        w, h, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"{path}: truncated image data")
    return data.reshape(h, w, c).astype(np.float32)
