"""TV-L1 optical flow (duality-based solver) and WFLO flow files.

The solver follows the usual coarse-to-fine scheme: at every pyramid level
the second image is warped by the current flow, the data term is linearised
and the TV-L1 energy is minimised by alternating a pointwise thresholding
step with a projected-gradient step on the dual TV variable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

FLOW_MAGIC = b"WFLO"


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same shape")

    @classmethod
    def from_array(cls, flow: np.ndarray) -> "FlowField":
        return cls(np.ascontiguousarray(flow[..., 0]), np.ascontiguousarray(flow[..., 1]))

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1).astype(np.float32)

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[..., :3] @ np.array([0.299, 0.587, 0.114])
    return image


def _forward_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fx = np.zeros_like(f)
    fy = np.zeros_like(f)
    fx[:, :-1] = f[:, 1:] - f[:, :-1]
    fy[:-1, :] = f[1:, :] - f[:-1, :]
    return fx, fy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # adjoint of -_forward_gradient
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    return div


def _warp(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = image.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    return cv2.remap(image.astype(np.float32), xs + u.astype(np.float32), ys + v.astype(np.float32),
                     cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE).astype(np.float64)


def _tvl1_level(i0, i1, u, v, lam, theta, tau, warps, iterations):
    i1y, i1x = np.gradient(i1)
    p = [np.zeros_like(i0) for _ in range(4)]
    lt = lam * theta
    for _ in range(warps):
        i1w = _warp(i1, u, v)
        gx = _warp(i1x, u, v)
        gy = _warp(i1y, u, v)
        grad = gx ** 2 + gy ** 2
        rho_c = i1w - gx * u - gy * v - i0
        for _ in range(iterations):
            rho = rho_c + gx * u + gy * v
            low = rho < -lt * grad
            high = rho > lt * grad
            mid = ~(low | high) & (grad > 1e-10)
            step = np.zeros_like(rho)
            step[low] = lt
            step[high] = -lt
            step[mid] = -rho[mid] / grad[mid]
            u1 = u + step * gx
            v1 = v + step * gy
            u = u1 + theta * _divergence(p[0], p[1])
            v = v1 + theta * _divergence(p[2], p[3])
            for k, comp in ((0, u), (2, v)):
                cx, cy = _forward_gradient(comp)
                norm = 1.0 + (tau / theta) * np.sqrt(cx ** 2 + cy ** 2)
                p[k] = (p[k] + (tau / theta) * cx) / norm
                p[k + 1] = (p[k + 1] + (tau / theta) * cy) / norm
    return u, v


def extract_flow(frame_a: np.ndarray, frame_b: np.ndarray, *, lam: float = 0.15, theta: float = 0.3,
                 tau: float = 0.25, levels: int = 5, warps: int = 5, iterations: int = 30,
                 zoom: float = 0.5) -> FlowField:
    """Dense TV-L1 flow from ``frame_a`` to ``frame_b`` (pixels, u right, v down).

    Frames are RGB or gray in [0, 1]; they are converted to gray on a 0..255
    scale, which is the scale the default ``lam`` is meant for.
    """
    a = to_gray(frame_a) * 255.0
    b = to_gray(frame_b) * 255.0
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    a = ndimage.gaussian_filter(a, 0.8)
    b = ndimage.gaussian_filter(b, 0.8)
    sigma = 0.6 * np.sqrt(1.0 / zoom ** 2 - 1.0)
    pyr = [(a, b)]
    for _ in range(levels - 1):
        pa, pb = pyr[-1]
        h, w = pa.shape
        nh, nw = int(round(h * zoom)), int(round(w * zoom))
        if min(nh, nw) < 8:
            break
        pyr.append(tuple(cv2.resize(ndimage.gaussian_filter(x, sigma), (nw, nh), interpolation=cv2.INTER_LINEAR)
                         for x in (pa, pb)))
    u = np.zeros_like(pyr[-1][0])
    v = np.zeros_like(u)
    for level in range(len(pyr) - 1, -1, -1):
        i0, i1 = pyr[level]
        if u.shape != i0.shape:
            sy, sx = i0.shape[0] / u.shape[0], i0.shape[1] / u.shape[1]
            size = (i0.shape[1], i0.shape[0])
            u = cv2.resize(u, size, interpolation=cv2.INTER_LINEAR) * sx
            v = cv2.resize(v, size, interpolation=cv2.INTER_LINEAR) * sy
        u, v = _tvl1_level(i0, i1, u, v, lam, theta, tau, warps, iterations)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def write_flow(path: str | Path, flow: np.ndarray | FlowField) -> None:
    """Little-endian: ``WFLO``, uint32 H, uint32 W, then H*W*(u, v) float32."""
    arr = flow.as_array() if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError("flow must be H x W x 2")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(arr.astype("<f4").tobytes())


def read_flow(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a WFLO file")
    h, w = struct.unpack("<II", blob[4:12])
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    if data.size != h * w * 2:
        raise ValueError(f"{path}: truncated flow file")
    return data.reshape(h, w, 2).astype(np.float32)
