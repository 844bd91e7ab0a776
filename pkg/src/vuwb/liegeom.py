"""Rotation and rigid-pose algebra.

Quaternions are stored w-first, ``(w, x, y, z)``. A :class:`PoseSE3` is a
world-to-body transform: ``p_B = R_BW @ p_W + t_BW``.

Pose increments live in a 6-vector ``[dt; dw]``. The retraction applies them
on the left of the pose::

    boxplus(T, [dt; dw]) = [exp(dw) | dt] * T

so that a world point expressed in the body frame moves as
``p_B' = exp(dw) p_B + dt`` (first order: ``p_B + dt - skew(p_B) dw``).
"""

from __future__ import annotations

import math

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stacked cross-product matrices for an (N, 3) array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# quaternion kernels (vectorised over leading axes)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product; rotation of the result is ``R(a) @ R(b)``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method.

    The branch is picked by the largest of ``trace, R00, R11, R22``; ties go
    to the lowest index. Output has ``w >= 0``.
    """
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    k = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    """Exponential map to quaternions, vectorised over leading axes."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta with its Taylor branch near zero
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(0.5 * safe) / safe)
    c = np.where(small, 1.0 - theta * theta / 8.0, np.cos(0.5 * theta))
    q = np.concatenate([c, k * w], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm of a unit quaternion, angle in ``[0, pi]``.

    At exactly ``pi`` (``w == 0``) the sign of the axis is fixed by making
    its largest-magnitude component positive (lowest index on ties).
    """
    q = np.array(q, dtype=float)
    flip = q[..., 0] < 0
    q[flip] = -q[flip]
    at_pi = q[..., 0] == 0.0
    if np.any(at_pi):
        sub = q[at_pi]
        idx = np.argmax(np.abs(sub[:, 1:]), axis=1)
        sgn = np.sign(sub[np.arange(len(sub)), idx + 1])
        q[at_pi] = sub * sgn[:, None]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    w = q[..., :1]
    small = n < 0.5 * SMALL_ANGLE
    safe = np.where(small, 1.0, n)
    theta = 2.0 * np.arctan2(n, w)
    scale = np.where(small, 2.0 / np.where(small, w, 1.0), theta / safe)
    return scale * v


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

class Rotation:
    """Unit quaternion ``(w, x, y, z)``."""

    __slots__ = ("q",)

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0)):
        q = np.asarray(q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError(f"invalid quaternion {q}")
        self.q = q / n

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        return cls(matrix_to_quat(R))

    @classmethod
    def from_rotvec(cls, w) -> Rotation:
        return so3_exp(w)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> Rotation:
        w, x, y, z = self.q
        return Rotation((w, -x, -y, -z))

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def __matmul__(self, other: Rotation) -> Rotation:
        return Rotation(quat_multiply(self.q, other.q))

    def __repr__(self) -> str:
        return f"Rotation(q={self.q.tolist()})"


class PoseSE3:
    """Rigid transform ``[R | t]`` mapping world points into the body frame."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation | None = None, translation=None):
        self.rotation = rotation if rotation is not None else Rotation()
        if translation is None:
            translation = np.zeros(3)
        self.translation = np.array(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> PoseSE3:
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_qt(cls, q, t) -> PoseSE3:
        return cls(Rotation(q), t)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def copy(self) -> PoseSE3:
        return PoseSE3(Rotation(self.rotation.q.copy()), self.translation.copy())

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return compose(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return (np.array_equal(self.rotation.q, other.rotation.q)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self) -> str:
        return f"PoseSE3(q={self.rotation.q.tolist()}, t={self.translation.tolist()})"


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def so3_exp(w) -> Rotation:
    """Rodrigues exponential; Taylor branch below ``SMALL_ANGLE``."""
    return Rotation(rotvec_to_quat(np.asarray(w, dtype=float).reshape(3)))


def so3_log(rot: Rotation) -> np.ndarray:
    if not isinstance(rot, Rotation):
        rot = Rotation.from_matrix(rot)
    return quat_to_rotvec(rot.q)


def boxplus(X: PoseSE3, delta) -> PoseSE3:
    delta = np.asarray(delta, dtype=float).reshape(6)
    dq = rotvec_to_quat(delta[3:])
    q = quat_normalize(quat_multiply(dq, X.rotation.q))
    t = quat_to_matrix(dq) @ X.translation + delta[:3]
    return PoseSE3(Rotation(q), t)


def boxplus_batch(q: np.ndarray, t: np.ndarray, delta: np.ndarray):
    """Vectorised :func:`boxplus` over (N, 4) quaternions and (N, 3) translations."""
    dq = rotvec_to_quat(delta[:, 3:])
    q_new = quat_normalize(quat_multiply(dq, q))
    t_new = np.einsum("nij,nj->ni", quat_to_matrix(dq), t) + delta[:, :3]
    return q_new, t_new


def compose(A: PoseSE3, B: PoseSE3) -> PoseSE3:
    """``A * B``: apply ``B`` first, then ``A``."""
    q = quat_normalize(quat_multiply(A.rotation.q, B.rotation.q))
    return PoseSE3(Rotation(q), A.R @ B.translation + A.translation)


def inverse(T: PoseSE3) -> PoseSE3:
    rinv = T.rotation.inverse()
    return PoseSE3(rinv, -(rinv.matrix @ T.translation))


def transform_point(T: PoseSE3, p) -> np.ndarray:
    return T.R @ np.asarray(p, dtype=float) + T.translation


def pose_log(T: PoseSE3) -> np.ndarray:
    """``[t; so3_log(R)]`` -- the decoupled residual used by the pose graph."""
    return np.concatenate([T.translation, so3_log(T.rotation)])
