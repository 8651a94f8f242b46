"""Perspective cameras and low-order spherical-harmonic lighting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Camera", "SHLighting"]


@dataclass
class Camera:
    """Pinhole camera mapping world points to clip space.

    ``projection`` is a 4x4 matrix taking world homogeneous coordinates to
    clip coordinates.  The w component of a clip point equals camera-space
    depth (scene units along the optical axis), which is what the depth
    buffers store.  Screen coordinates follow from the NDC mapping

        X = (clip.x / clip.w * 0.5 + 0.5) * width
        Y = (0.5 - clip.y / clip.w * 0.5) * height

    so pixel (i, j) has its center at (i + 0.5, j + 0.5) and Y grows
    downward.
    """

    projection: np.ndarray
    image_size: tuple[int, int]
    near: float
    far: float

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.shape != (4, 4):
            raise ValueError("projection must be a 4x4 matrix")
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection contains non-finite entries")
        w, h = self.image_size
        w, h = int(w), int(h)
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        self.image_size = (w, h)
        self.near = float(self.near)
        self.far = float(self.far)
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        # Rows (x, y, w) form the pinhole part; a singular one has no
        # center of projection.
        pin = self.projection[[0, 1, 3], :3]
        if abs(np.linalg.det(pin)) < 1e-12:
            raise ValueError("projection has a degenerate pinhole part")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (n,3) -> clip coordinates (n,4)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.projection[:, :3].T + self.projection[:, 3]

    def clip_to_screen(self, clip: np.ndarray) -> np.ndarray:
        """Clip coordinates (n,4) -> pixel coordinates (n,2); caller
        guarantees clip.w > 0."""
        w, h = self.image_size
        x = (clip[:, 0] / clip[:, 3] * 0.5 + 0.5) * w
        y = (0.5 - clip[:, 1] / clip[:, 3] * 0.5) * h
        return np.stack([x, y], axis=1)

    def center(self) -> np.ndarray:
        """Center of projection in world coordinates."""
        pin = self.projection[[0, 1, 3], :3]
        rhs = self.projection[[0, 1, 3], 3]
        return -np.linalg.solve(pin, rhs)

    def view_direction(self) -> np.ndarray:
        """Unit optical axis (the direction with growing camera depth)."""
        axis = self.projection[3, :3]
        return axis / np.linalg.norm(axis)

    @classmethod
    def from_extrinsics(cls, rotation, translation, focal_px, image_size,
                        principal_point=None, near: float = 0.1,
                        far: float = 100.0) -> "Camera":
        """Build from a world-to-camera rigid transform and pixel intrinsics.

        ``rotation`` rows are the camera's right / up / forward axes, so a
        world point maps to camera coordinates R @ p + t with z forward.
        ``focal_px`` is a scalar or (fx, fy) in pixels; ``principal_point``
        defaults to the image center.
        """
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        w, h = int(image_size[0]), int(image_size[1])
        focal = np.broadcast_to(np.asarray(focal_px, dtype=np.float64), (2,))
        fx, fy = float(focal[0]), float(focal[1])
        if principal_point is None:
            cx, cy = 0.5 * w, 0.5 * h
        else:
            cx, cy = float(principal_point[0]), float(principal_point[1])
        right, up, fwd = rotation
        tx, ty, tz = translation

        proj = np.zeros((4, 4), dtype=np.float64)
        proj[0, :3] = (fx * right + (cx - 0.5 * w) * fwd) / (0.5 * w)
        proj[0, 3] = (fx * tx + (cx - 0.5 * w) * tz) / (0.5 * w)
        proj[1, :3] = (fy * up + (0.5 * h - cy) * fwd) / (0.5 * h)
        proj[1, 3] = (fy * ty + (0.5 * h - cy) * tz) / (0.5 * h)
        nf = far - near
        proj[2, :3] = (far + near) / nf * fwd
        proj[2, 3] = ((far + near) * tz - 2.0 * far * near) / nf
        proj[3, :3] = fwd
        proj[3, 3] = tz
        return cls(proj, (w, h), near, far)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, focal_px,
                image_size, principal_point=None, near: float = 0.1,
                far: float = 100.0) -> "Camera":
        """Camera at ``eye`` looking toward ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - eye
        norm = np.linalg.norm(fwd)
        if norm < 1e-12:
            raise ValueError("eye and target coincide")
        fwd = fwd / norm
        right = np.cross(fwd, up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("view direction is parallel to up")
        right = right / norm
        true_up = np.cross(right, fwd)
        rotation = np.stack([right, true_up, fwd])
        translation = -rotation @ eye
        return cls.from_extrinsics(rotation, translation, focal_px,
                                   image_size, principal_point, near, far)


# Analytic irradiance constants for order-2 spherical harmonics.
_C1 = 0.429043
_C2 = 0.511664
_C3 = 0.743125
_C4 = 0.886227
_C5 = 0.247708


@dataclass
class SHLighting:
    """Order-2 spherical-harmonic environment lighting, 9 RGB coefficients.

    Coefficient rows are band-major: (0,0), (1,-1), (1,0), (1,1), (2,-2),
    (2,-1), (2,0), (2,1), (2,2).  Irradiance at a unit normal n is the
    quadratic form [n;1]^T M [n;1] with the standard analytic constants.
    """

    coeffs: np.ndarray
    _matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (9, 3):
            raise ValueError("lighting needs 9 coefficient triples")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("lighting coefficients must be finite")
        self._matrix = self._build_matrix()

    def _build_matrix(self) -> np.ndarray:
        l00, l1m1, l10, l11, l2m2, l2m1, l20, l21, l22 = self.coeffs
        mats = np.zeros((3, 4, 4), dtype=np.float64)
        for ch in range(3):
            m = mats[ch]
            m[0, 0] = _C1 * l22[ch]
            m[0, 1] = m[1, 0] = _C1 * l2m2[ch]
            m[0, 2] = m[2, 0] = _C1 * l21[ch]
            m[0, 3] = m[3, 0] = _C2 * l11[ch]
            m[1, 1] = -_C1 * l22[ch]
            m[1, 2] = m[2, 1] = _C1 * l2m1[ch]
            m[1, 3] = m[3, 1] = _C2 * l1m1[ch]
            m[2, 2] = _C3 * l20[ch]
            m[2, 3] = m[3, 2] = _C2 * l10[ch]
            m[3, 3] = _C4 * l00[ch] - _C5 * l20[ch]
        return mats

    @classmethod
    def uniform(cls, value=1.0) -> "SHLighting":
        """DC-only lighting whose irradiance equals ``value`` everywhere."""
        rgb = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        coeffs = np.zeros((9, 3), dtype=np.float64)
        coeffs[0] = rgb / _C4
        return cls(coeffs)

    def irradiance(self, normals: np.ndarray) -> np.ndarray:
        """Irradiance per channel at unit normals (...,3) -> (...,3)."""
        n = np.asarray(normals, dtype=np.float64)
        q = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
        # E_c = q^T M_c q
        mq = np.einsum("cij,...j->...ci", self._matrix, q)
        return np.einsum("...ci,...i->...c", mq, q)

    def irradiance_grad(self, normals: np.ndarray) -> np.ndarray:
        """d irradiance / d normal, shape (...,3 channels, 3 components)."""
        n = np.asarray(normals, dtype=np.float64)
        a = self._matrix[:, :3, :3]
        b = self._matrix[:, :3, 3]
        return 2.0 * (np.einsum("cij,...j->...ci", a, n) + b)
