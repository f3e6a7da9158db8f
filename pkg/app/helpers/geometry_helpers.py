"""
Rotation, activation and spherical-harmonics math shared by the rasterizer and the losses.

Quaternions are stored scalar-first (w, x, y, z) and composed with the Hamilton convention.
All functions are vectorized over a leading primitive axis.
"""

import numpy as np
from scipy.special import expit, logit
from scipy.spatial.transform import Rotation

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

SH_COEFFS = 16


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def inverse_sigmoid(y: np.ndarray) -> np.ndarray:
    return logit(np.clip(y, 1e-12, 1.0 - 1e-12))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(norm, 1e-30)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """
    Convert unit quaternions to rotation matrices.

    Args:
        q (np.ndarray): (..., 4) quaternions, scalar first. Assumed normalized.

    Returns:
        np.ndarray: (..., 3, 3) rotation matrices.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotation_grad_to_quaternion(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """
    Chain a gradient on R(q) back to the (unit) quaternion components.

    Args:
        q (np.ndarray): (..., 4) unit quaternions the rotation was built from.
        dR (np.ndarray): (..., 3, 3) gradient of the loss with respect to R.

    Returns:
        np.ndarray: (..., 4) gradient with respect to q, treating q as already normalized.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2.0 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
                - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2.0 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2.0 * x * g[..., 1, 1]
                - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2.0 * x * g[..., 2, 2])
    dy = 2.0 * (-2.0 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
                + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2.0 * y * g[..., 2, 2])
    dz = 2.0 * (-2.0 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
                - 2.0 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalization_backward(q_raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Gradient through q_hat = q / |q|."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q_hat = q_raw / norm
    return (d_unit - q_hat * np.sum(q_hat * d_unit, axis=-1, keepdims=True)) / norm


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quaternion_multiply_backward(a: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    """
    Returns:
        tuple: (d_a, d_b) for out = a * b.
    """
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    gw, gx, gy, gz = d_out[..., 0], d_out[..., 1], d_out[..., 2], d_out[..., 3]
    d_a = np.stack([
        gw * bw + gx * bx + gy * by + gz * bz,
        -gw * bx + gx * bw - gy * bz + gz * by,
        -gw * by + gx * bz + gy * bw - gz * bx,
        -gw * bz - gx * by + gy * bx + gz * bw,
    ], axis=-1)
    d_b = np.stack([
        gw * aw + gx * ax + gy * ay + gz * az,
        -gw * ax + gx * aw + gy * az - gz * ay,
        -gw * ay - gx * az + gy * aw + gz * ax,
        -gw * az + gx * ay - gy * ax + gz * aw,
    ], axis=-1)
    return d_a, d_b


def quaternion_conjugate(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quaternion_from_euler_degrees(angles: np.ndarray) -> np.ndarray:
    """Scalar-first quaternion for an intrinsic xyz Euler rotation in degrees."""
    xyzw = Rotation.from_euler("xyz", np.asarray(angles, dtype=np.float64), degrees=True).as_quat()
    return np.concatenate([xyzw[..., 3:4], xyzw[..., :3]], axis=-1)


def covariance_from_scale_rotation(scale: np.ndarray, R: np.ndarray) -> np.ndarray:
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def sh_coefficient_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """
    Evaluate the real spherical-harmonics basis along unit directions.

    Args:
        dirs (np.ndarray): (N, 3) unit directions.
        degree (int): Highest band to evaluate, 0..3.

    Returns:
        np.ndarray: (N, 16) basis values; bands above `degree` are zero.
    """
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = np.zeros((dirs.shape[0], SH_COEFFS), dtype=np.float64)
    basis[:, 0] = SH_C0
    if degree >= 1:
        basis[:, 1] = -SH_C1 * y
        basis[:, 2] = SH_C1 * z
        basis[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 4] = SH_C2[0] * x * y
        basis[:, 5] = SH_C2[1] * y * z
        basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        basis[:, 7] = SH_C2[3] * x * z
        basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        basis[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        basis[:, 10] = SH_C3[1] * x * y * z
        basis[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        basis[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        basis[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        basis[:, 14] = SH_C3[5] * z * (xx - yy)
        basis[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return basis


def sh_basis_jacobian(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """
    Returns:
        np.ndarray: (N, 16, 3) derivative of each basis function with respect to the direction.
    """
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    J = np.zeros((n, SH_COEFFS, 3), dtype=np.float64)
    if degree >= 1:
        J[:, 1, 1] = -SH_C1
        J[:, 2, 2] = SH_C1
        J[:, 3, 0] = -SH_C1
    if degree >= 2:
        J[:, 4] = SH_C2[0] * np.stack([y, x, np.zeros(n)], axis=-1)
        J[:, 5] = SH_C2[1] * np.stack([np.zeros(n), z, y], axis=-1)
        J[:, 6] = SH_C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=-1)
        J[:, 7] = SH_C2[3] * np.stack([z, np.zeros(n), x], axis=-1)
        J[:, 8] = SH_C2[4] * np.stack([2.0 * x, -2.0 * y, np.zeros(n)], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        J[:, 9] = SH_C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, np.zeros(n)], axis=-1)
        J[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
        J[:, 11] = SH_C3[2] * np.stack([-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=-1)
        J[:, 12] = SH_C3[3] * np.stack([-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=-1)
        J[:, 13] = SH_C3[4] * np.stack([4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=-1)
        J[:, 14] = SH_C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=-1)
        J[:, 15] = SH_C3[6] * np.stack([3.0 * xx - 3.0 * yy, -6.0 * x * y, np.zeros(n)], axis=-1)
    return J


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    return (rgb - 0.5) / SH_C0


def sh_dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return dc * SH_C0 + 0.5
