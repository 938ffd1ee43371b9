"""SO(3)/SE(3) group operations and right-perturbation covariance algebra.

Twist convention used everywhere in this package: a twist is a 6-vector
``xi = [rho, phi]`` with the translational part ``rho`` (meters) in the first
three entries and the rotational part ``phi`` (radians) in the last three.
Uncertain poses follow the right-perturbation convention

    T = T_bar * exp(xi^),   xi ~ N(0, Sigma),

so every 6x6 covariance in this package lives in the body-side tangent space
with the [rho, phi] block ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle closed-form sinc-like coefficients are replaced
# by their Taylor series to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-2

# Rotations are re-orthonormalized once a composition chain reaches this
# length, bounding round-off drift on long products.
RENORM_CHAIN = 100


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 skew-symmetric matrix such that skew(a) @ b = cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite entries")


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series fallback for small angles."""
    phi = np.asarray(phi, dtype=float)
    _check_finite(phi, "rotation vector")
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    S = skew(phi)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * S + b * (S @ S)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R.

    Valid for angles up to pi; at exactly pi the axis sign is ambiguous and
    the branch with the first nonzero axis component positive is returned.
    """
    R = np.asarray(R, dtype=float)
    _check_finite(R, "rotation matrix")
    trace = float(np.trace(R))
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 of (sin, cos) stays well conditioned at both ends of [0, pi],
    # unlike arccos of the trace whose error blows up as 1/sin(theta)
    sin_theta = float(np.linalg.norm(w))
    theta = float(np.arctan2(sin_theta, 0.5 * (trace - 1.0)))
    if theta < SMALL_ANGLE:
        # w = sin(theta) * axis; invert the sinc factor by series
        theta2 = theta * theta
        return w * (1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0)
    if theta > np.pi - 1e-4:
        # Near pi the antisymmetric part degenerates; recover the axis from
        # the symmetric part S = R + R^T - (trace - 1) I = 2 (1 - cos) v v^T.
        S = R + R.T - (trace - 1.0) * np.eye(3)
        j = int(np.argmax(np.diag(S)))
        v = S[:, j]
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise ValueError("rotation angle too close to pi to extract an axis")
        v = v / norm
        sign = float(v @ w)
        if sign < 0.0 or (sign == 0.0 and _first_nonzero_negative(v)):
            v = -v
        return theta * v
    # w / sin_theta is the unit axis; scaling it by theta keeps the two
    # factors consistent to rounding (no 1/sin amplification near pi)
    return w * (theta / sin_theta)


def _first_nonzero_negative(v: np.ndarray) -> bool:
    for x in v:
        if x != 0.0:
            return x < 0.0
    return False


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    S = skew(phi)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * S + c * (S @ S)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    S = skew(phi)
    if theta < SMALL_ANGLE:
        e = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    else:
        e = (1.0 / theta2) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * S + e * (S @ S)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


@dataclass(frozen=True)
class Pose:
    """SE(3) element stored as a 3x3 rotation matrix and a position vector."""

    rotation: np.ndarray
    position: np.ndarray
    # length of the composition chain that produced this pose; once it hits
    # RENORM_CHAIN the rotation is re-orthonormalized and the count reset
    chain: int = field(default=0, compare=False, repr=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        R = self.rotation @ other.rotation
        p = self.rotation @ other.position + self.position
        chain = max(self.chain, other.chain) + 1
        if chain >= RENORM_CHAIN:
            R = _orthonormalize(R)
            chain = 0
        return Pose(R, p, chain)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -(Rt @ self.position), self.chain)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.position

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.position
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Pose":
        return Pose(np.array(M[:3, :3], dtype=float), np.array(M[:3, 3], dtype=float))


@dataclass(frozen=True)
class PoseWithCovariance:
    """Pose with 6x6 right-perturbation covariance in [rho, phi] ordering."""

    mean: Pose
    cov: np.ndarray


def exp(xi: np.ndarray) -> Pose:
    """SE(3) exponential of a twist [rho, phi]."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError("twist must be a 6-vector [rho, phi]")
    _check_finite(xi, "twist")
    rho, phi = xi[:3], xi[3:]
    R = so3_exp(phi)
    p = so3_left_jacobian(phi) @ rho
    return Pose(R, p)


def log(T: Pose) -> np.ndarray:
    """Twist [rho, phi] such that exp(log(T)) = T. Rotation angle must be < pi."""
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.position
    return np.concatenate([rho, phi])


def se3_hat(xi: np.ndarray) -> np.ndarray:
    """4x4 Lie-algebra matrix of a twist [rho, phi]."""
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3] = xi[:3]
    return out


def adjoint(T: Pose) -> np.ndarray:
    """6x6 Adjoint satisfying exp((Ad_T xi)^) = T exp(xi^) T^-1."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = T.rotation
    Ad[:3, 3:] = skew(T.position) @ T.rotation
    Ad[3:, 3:] = T.rotation
    return Ad


def se3_ad(xi: np.ndarray) -> np.ndarray:
    """6x6 adjoint of a twist (the algebra-level bracket matrix)."""
    S = skew(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = S
    out[:3, 3:] = skew(xi[:3])
    out[3:, 3:] = S
    return out


def _jacobian_q_block(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    P = skew(rho)
    S = skew(phi)
    SP = S @ P
    PS = P @ S
    SPS = SP @ S
    if theta < SMALL_ANGLE:
        c1 = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
        c2 = -1.0 / 24.0 + theta2 / 720.0 - theta2 * theta2 / 40320.0
        c3 = -1.0 / 120.0 + theta2 / 5040.0 - theta2 * theta2 / 362880.0
    else:
        theta4 = theta2 * theta2
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        c1 = (theta - sin_t) / (theta2 * theta)
        c2 = (1.0 - theta2 / 2.0 - cos_t) / theta4
        c3 = (theta - sin_t - theta2 * theta / 6.0) / (theta4 * theta)
    return (
        0.5 * P
        + c1 * (SP + PS + SPS)
        - c2 * (S @ SP + PS @ S - 3.0 * SPS)
        - 0.5 * (c2 - 3.0 * c3) * (SPS @ S + S @ SPS)
    )


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 SE(3) left Jacobian of a twist [rho, phi]."""
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[:3, 3:] = _jacobian_q_block(xi[:3], xi[3:])
    out[3:, 3:] = J
    return out


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    Jinv = so3_left_jacobian_inv(xi[3:])
    Q = _jacobian_q_block(xi[:3], xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    out[3:, 3:] = Jinv
    return out


def right_jacobian(xi: np.ndarray) -> np.ndarray:
    return left_jacobian(-np.asarray(xi, dtype=float))


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return left_jacobian_inv(-np.asarray(xi, dtype=float))


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def transport_covariance(cov: np.ndarray, T: Pose) -> np.ndarray:
    """Map a right-perturbation covariance through a frame change by T.

    Returns Ad_T cov Ad_T^T, re-symmetrized.
    """
    Ad = adjoint(T)
    return symmetrize(Ad @ cov @ Ad.T)
