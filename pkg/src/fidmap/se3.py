"""Rigid-body pose arithmetic with compact quaternion orientations.

Quaternions are stored ``[x, y, z, w]`` throughout. A *compact* quaternion is
the imaginary part ``[x, y, z]`` of a unit quaternion whose scalar part is
non-negative, so ``w = sqrt(1 - |q|^2)`` recovers the full quaternion.

The vectorised helpers (``quat_*``, ``rotvec_*``) accept arrays with any
leading batch shape; the optimizer relies on them for whole-graph evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_COMPACT_SLACK = 1e-9


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched cross product; cheaper than ``np.cross`` on small arrays."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` of ``[x, y, z, w]`` quaternions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    av, aw = a[..., :3], a[..., 3:]
    bv, bw = b[..., :3], b[..., 3:]
    v = aw * bv + bw * av + cross(av, bv)
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    return np.concatenate([v, w], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate([-q[..., :3], q[..., 3:]], axis=-1)


def quat_positive(q: np.ndarray) -> np.ndarray:
    """Flip quaternions onto the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., 3:] < 0.0, -1.0, 1.0)
    return q * sign


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    return quat_positive(q / n)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (yy + zz)
    r[..., 0, 1] = 2 * (xy - wz)
    r[..., 0, 2] = 2 * (xz + wy)
    r[..., 1, 0] = 2 * (xy + wz)
    r[..., 1, 1] = 1 - 2 * (xx + zz)
    r[..., 1, 2] = 2 * (yz - wx)
    r[..., 2, 0] = 2 * (xz - wy)
    r[..., 2, 1] = 2 * (yz + wx)
    r[..., 2, 2] = 1 - 2 * (xx + yy)
    return r


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to a unit quaternion on the ``w >= 0`` hemisphere."""
    r = np.asarray(r, dtype=float)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        # Shepperd's method: pivot on the largest of w, x, y, z.
        if tr > max(m[0, 0], m[1, 1], m[2, 2]):
            s = 2.0 * np.sqrt(1.0 + tr)
            out[k] = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            out[k] = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
        elif m[1, 1] >= m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            out[k] = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            out[k] = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    return quat_normalize(out.reshape(r.shape[:-2] + (4,)))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv, qw = q[..., :3], q[..., 3:]
    t = 2.0 * cross(qv, v)
    return v + qw * t + cross(qv, t)


def rotvec_to_quat(phi: np.ndarray) -> np.ndarray:
    """Exponential map from rotation vectors (radians) to unit quaternions."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    # sin(a/2)/a -> 1/2 - a^2/48 as a -> 0
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([k * phi, np.cos(half)], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_positive(q)
    v, w = q[..., :3], np.clip(q[..., 3:], -1.0, 1.0)
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return k * v


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices ``[v]x`` for a batch of 3-vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def expand_compact(q: np.ndarray) -> np.ndarray:
    """Compact ``[x, y, z]`` to full ``[x, y, z, w]`` with ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    w = np.sqrt(np.maximum(0.0, 1.0 - np.sum(q * q, axis=-1, keepdims=True)))
    return np.concatenate([q, w], axis=-1)


def compact(q: np.ndarray) -> np.ndarray:
    return quat_normalize(q)[..., :3]


@dataclass(frozen=True, eq=False)
class Pose:
    """6-DoF rigid transform: translation ``p`` and compact quaternion ``q``.

    The transform maps points from the pose's local frame into its parent
    frame: ``x_parent = R(q) @ x_local + p``.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(3)
        q = np.array(self.q, dtype=float).reshape(3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("pose components must be finite")
        n = float(np.linalg.norm(q))
        if n > 1.0 + _COMPACT_SLACK:
            raise ValueError(f"compact quaternion norm {n} exceeds 1")
        if n > 1.0:
            q = q / n
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_quat(cls, p, quat_xyzw) -> Pose:
        """Build from a full quaternion; it is normalized and put on ``w >= 0``."""
        return cls(p, quat_normalize(np.asarray(quat_xyzw, dtype=float))[:3])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, 3], rot_to_quat(m[:3, :3])[:3])

    @classmethod
    def from_rotvec(cls, p, phi) -> Pose:
        return cls.from_quat(p, rotvec_to_quat(phi))

    @property
    def quat(self) -> np.ndarray:
        """Full ``[x, y, z, w]`` quaternion."""
        return expand_compact(self.q)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.p
        return m

    def vector(self) -> np.ndarray:
        """The 6-vector ``[px, py, pz, qx, qy, qz]``."""
        return np.concatenate([self.p, self.q])

    def transform_point(self, x) -> np.ndarray:
        return quat_rotate(self.quat, np.asarray(x, dtype=float)) + self.p

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.p, other.p, atol=atol, rtol=0) and np.allclose(self.q, other.q, atol=atol, rtol=0))

    def __repr__(self) -> str:
        return f"Pose(p={self.p.tolist()}, q={self.q.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` in ``a``'s frame."""
    qa = a.quat
    return Pose(a.p + quat_rotate(qa, b.p), compact(quat_mul(qa, b.quat)))


def inverse(a: Pose) -> Pose:
    qi = quat_conj(a.quat)
    return Pose(-quat_rotate(qi, a.p), compact(qi))


def relative_pose(x_t: Pose, x_next: Pose) -> Pose:
    """``x_next`` expressed in the frame of ``x_t``."""
    return compose(inverse(x_t), x_next)


def box_minus(measured: Pose, predicted: Pose) -> np.ndarray:
    """6-vector residual ``measured - predicted``.

    Translation components subtract directly; the rotational part is the
    imaginary part of ``q_predicted^-1 * q_measured`` on the ``w >= 0``
    hemisphere, i.e. ``sin(angle / 2) * axis`` of the rotation error.
    """
    dq = quat_positive(quat_mul(quat_conj(predicted.quat), measured.quat))
    return np.concatenate([measured.p - predicted.p, dq[:3]])


def predict_gravity(x: Pose, g_world) -> np.ndarray:
    """World gravity direction expressed in the frame of ``x``."""
    g = np.asarray(g_world, dtype=float)
    return quat_rotate(quat_conj(x.quat), g)


def unit_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def translation(x: float, y: float, z: float) -> Pose:
    return Pose([x, y, z], [0.0, 0.0, 0.0])


def rot_x(angle: float, p=(0.0, 0.0, 0.0)) -> Pose:
    return Pose.from_rotvec(p, [angle, 0.0, 0.0])


def rot_y(angle: float, p=(0.0, 0.0, 0.0)) -> Pose:
    return Pose.from_rotvec(p, [0.0, angle, 0.0])


def rot_z(angle: float, p=(0.0, 0.0, 0.0)) -> Pose:
    return Pose.from_rotvec(p, [0.0, 0.0, angle])
