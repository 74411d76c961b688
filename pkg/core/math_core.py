"""
math_core.py
------------
Numerical building blocks shared by every other module.

  - complex matrix helpers (product, Hermitian transpose, real block form)
  - the stacked-real layout: all real parts first, then all imaginary parts
  - seeded random streams and Gaussian sampling
  - diagonal Gaussian posteriors and their exact KL divergence
  - reverse-mode gradients of scalar losses (autograd) plus a
    central-difference oracle to check them

Complex CN(mu, s * I) maps onto the stacked-real layout with variance
s / 2 on every real dimension.
"""

from dataclasses import dataclass

import autograd.numpy as anp
import numpy as np
from autograd import value_and_grad as _value_and_grad
from autograd.tracer import getval

from core.errors import DomainError, NumericError, ShapeError


# ── Complex linear algebra ───────────────────

def hermitian(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose of the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def cmatmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Complex matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"cmatmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cmatmul: {a.shape} x {b.shape} do not conform")
    return a @ b


def real_block(a: np.ndarray) -> np.ndarray:
    """[[Re, -Im], [Im, Re]], the real matrix acting on stacked vectors."""
    a = np.asarray(a)
    return np.block([[a.real, -a.imag], [a.imag, a.real]])


# ── Stacked-real layout ──────────────────────

def to_stacked(z: np.ndarray, batch_dims: int = 0) -> np.ndarray:
    """
    Flatten the trailing (non-batch) axes of a complex array row-major and
    return [real parts..., imaginary parts...] along the last axis.
    """
    z = np.asarray(z)
    batch_shape = z.shape[:batch_dims]
    flat = z.reshape(batch_shape + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def from_stacked(v, shape: tuple = None):
    """
    Inverse of to_stacked. `shape` is the complex shape of one item; batch
    axes of `v` are kept in front. Works on autograd boxes too.
    """
    d = v.shape[-1]
    if d % 2:
        raise ShapeError(f"stacked vector has odd length {d}")
    half = d // 2
    z = v[..., :half] + 1j * v[..., half:]
    if shape is None:
        return z
    return anp.reshape(z, v.shape[:-1] + tuple(shape))


# ── Random streams ───────────────────────────

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Seeded PCG64 stream. Extra integer keys (grid point, block index, ...)
    derive independent child streams from the same root seed.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def gaussian_sample(dim: int, rng: np.random.Generator, size: tuple = ()) -> np.ndarray:
    """I.i.d. N(0, 1) per real dimension of a stacked vector."""
    if dim <= 0 or dim % 2:
        raise DomainError(f"stacked dimension must be even and positive, got {dim}")
    return rng.standard_normal(tuple(size) + (dim,))


def complex_normal(shape: tuple, var: float, rng: np.random.Generator) -> np.ndarray:
    """Circularly symmetric CN(0, var) entries (var / 2 per real dimension)."""
    if var < 0:
        raise DomainError(f"variance must be >= 0, got {var}")
    n = int(np.prod(shape))
    if n == 0 or var == 0:
        return np.zeros(shape, dtype=complex)
    v = gaussian_sample(2 * n, rng) * np.sqrt(var / 2.0)
    return from_stacked(v).reshape(shape)


# ── Gaussian posteriors ──────────────────────

@dataclass
class GaussianPosterior:
    """
    Diagonal Gaussian over a stacked-real vector.

    mean and var share a shape; leading axes (if any) index slots, the last
    axis is the stacked dimension. Zero variances are tolerated only as the
    degenerate limit for sampling; the KL requires strictly positive ones.
    """
    mean: object
    var: object

    def __post_init__(self):
        m, v = getval(self.mean), getval(self.var)
        if np.shape(m) != np.shape(v):
            raise ShapeError(f"posterior mean {np.shape(m)} vs var {np.shape(v)}")
        if np.shape(m)[-1] % 2:
            raise ShapeError("posterior dimension must be even (stacked-real)")
        if not np.all(np.isfinite(v)) or np.any(np.asarray(v) < 0):
            raise DomainError("posterior variances must be finite and >= 0")

    @property
    def dim(self) -> int:
        return np.shape(getval(self.mean))[-1]

    def detach(self) -> "GaussianPosterior":
        """Plain-numpy copy (drops autograd boxes)."""
        return GaussianPosterior(np.array(getval(self.mean)), np.array(getval(self.var)))


def gaussian_kl_diag(post: GaussianPosterior, prior_var) -> object:
    """
    KL( N(m, diag(s)) || N(0, diag(p)) ), summed over every entry:
        sum 1/2 [ s/p + m^2/p - 1 - ln(s/p) ]
    prior_var broadcasts against the posterior (scalar or per-dimension).
    """
    s_raw = np.asarray(getval(post.var))
    p_raw = np.asarray(getval(prior_var), dtype=float)
    if np.any(s_raw <= 0):
        raise DomainError("KL needs strictly positive posterior variances")
    if np.any(p_raw <= 0):
        raise DomainError("KL needs strictly positive prior variances")
    try:
        np.broadcast_shapes(s_raw.shape, p_raw.shape)
    except ValueError as exc:
        raise ShapeError(f"prior variance {p_raw.shape} vs posterior {s_raw.shape}") from exc

    ratio = post.var / prior_var
    return 0.5 * anp.sum(ratio + post.mean ** 2 / prior_var - 1.0 - anp.log(ratio))


# ── Gradients ────────────────────────────────

def checked(primitive: str, value):
    """Pass `value` through, raising NumericError if any entry is non-finite."""
    if not np.all(np.isfinite(getval(value))):
        raise NumericError("non-finite intermediate", primitive)
    return value


def value_and_grad(loss_fn, params: np.ndarray) -> tuple:
    """Loss value and exact gradient by reverse-mode accumulation."""
    value, gradient = _value_and_grad(loss_fn)(np.asarray(params, dtype=float))
    checked("loss", value)
    checked("backward", gradient)
    return float(value), np.asarray(gradient)


def grad(loss_fn, params: np.ndarray) -> np.ndarray:
    return value_and_grad(loss_fn, params)[1]


def finite_difference_grad(loss_fn, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    params = np.asarray(params, dtype=float)
    out = np.empty_like(params)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + step
        up = float(loss_fn(bumped))
        bumped[i] = params[i] - step
        down = float(loss_fn(bumped))
        out[i] = (up - down) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """
    Coordinate-wise |a - n| / max(|a|, |n|, floor * max|a|).
    The floor keeps near-zero coordinates from dividing by round-off.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = np.maximum(scale, floor * max(np.max(np.abs(analytic)), 1e-12))
    return np.abs(analytic - numeric) / scale
