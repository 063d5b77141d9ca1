"""Numerical verification of layer Jacobians.

Probes are drawn from the portable RNG, filtered by a kink margin, and
reduced in probe-index order, so every report is reproducible from its
seed.  Defects are Frobenius norms: ``||J^T J - I||`` for orthogonality
and ``||(J J^T)^2 - J J^T||`` for partial isometry (the latter vanishes
exactly when J J^T is a projection).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, NearKinkError, NoValidProbeError
from .layers import DEFAULT_MARGIN, LimitLayer
from .linalg import svd_values
from .rng import SplitMix64, derive_seed

PASS_TOL = 1e-10
ISOMETRY_TOL = 1e-8


def orthogonality_defect(jac: np.ndarray) -> float:
    """Frobenius distance of J^T J from the identity."""
    if jac.ndim != 2 or jac.shape[0] != jac.shape[1]:
        raise DimensionError(f"expected a square Jacobian, got {jac.shape}")
    gram = jac.T @ jac
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(np.sqrt(np.sum(gram * gram)))


def partial_isometry_defect(jac: np.ndarray) -> float:
    """Frobenius distance of J J^T from being a projection."""
    if jac.ndim != 2 or jac.shape[0] != jac.shape[1]:
        raise DimensionError(f"expected a square Jacobian, got {jac.shape}")
    gram = jac @ jac.T
    resid = gram @ gram - gram
    return float(np.sqrt(np.sum(resid * resid)))


def fd_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        cols.append((np.asarray(fn(x + step)) - np.asarray(fn(x - step))) / (2.0 * h))
    return np.stack(cols, axis=1)


def _as_stack(target) -> list:
    return list(target) if isinstance(target, (list, tuple)) else [target]


def stack_kink_distance(stack: list, x: np.ndarray) -> float:
    """Smallest kink distance over the stack, each layer at its own input."""
    dist = np.inf
    cur = x
    for layer in stack:
        dist = min(dist, layer.kink_distance(cur))
        cur = layer.forward(cur)
    return float(dist)


def stack_jacobian(stack: list, x: np.ndarray, margin: float = DEFAULT_MARGIN):
    """Chained Jacobian of a layer stack at ``x``."""
    cur = x
    jac = None
    for layer in stack:
        part = layer.jacobian(cur, margin)
        jac = part if jac is None else part @ jac
        cur = layer.forward(cur)
    return jac


def gradient_norm_ratio(
    target, x: np.ndarray, v: np.ndarray, margin: float = DEFAULT_MARGIN
) -> float:
    """||J(x)^T v|| / ||v|| through a layer or stack via chained VJPs.

    Each layer's forward state is margin-checked, so a probe landing on
    a kink raises rather than silently picking a one-sided derivative.
    """
    stack = _as_stack(target)
    v = np.asarray(v, dtype=np.float64)
    v_norm = float(np.sqrt(v @ v))
    if v_norm == 0.0:
        raise DimensionError("cotangent must be nonzero")
    inputs = []
    cur = np.asarray(x, dtype=np.float64)
    for layer in stack:
        dist = layer.kink_distance(cur)
        if dist < margin:
            raise NearKinkError(dist, margin)
        inputs.append(cur)
        cur = layer.forward(cur)
    grad = v
    for layer, layer_in in zip(reversed(stack), reversed(inputs)):
        grad, _ = layer.vjp(layer_in, grad)
    return float(np.sqrt(grad @ grad)) / v_norm


def _opt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    return repr(float(value))


@dataclass
class VerifyReport:
    """Aggregated probe results with a declared pass criterion.

    ``probes`` counts inputs actually measured; margin rejections land
    in ``skipped_near_kink``.  Singular-value fields are None when the
    run skipped spectra, and ``bound_epsilon`` is None unless the pass
    criterion is an interval around 1.
    """

    probes: int
    max_orth_defect: float
    max_partial_defect: float
    sv_min: float | None
    sv_max: float | None
    bound_epsilon: float | None
    passed: bool | None
    skipped_near_kink: int
    criterion: str
    tol: float
    seed: int
    kind: str
    width: int
    depth: int

    CSV_HEADER = (
        "probes,max_orth_defect,max_partial_defect,sv_min,sv_max,"
        "bound_epsilon,pass,skipped_near_kink"
    )

    def __post_init__(self):
        if self.sv_min is not None and self.sv_max is not None:
            if self.sv_min > self.sv_max:
                raise DimensionError("sv_min exceeds sv_max")

    def to_json(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out

    def json_dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def csv_row(self) -> str:
        return ",".join(
            (
                str(self.probes),
                repr(float(self.max_orth_defect)),
                repr(float(self.max_partial_defect)),
                _opt(self.sv_min),
                _opt(self.sv_max),
                _opt(self.bound_epsilon),
                _opt(self.passed),
                str(self.skipped_near_kink),
            )
        )


def spectrum_probe(
    target,
    n_probes: int,
    seed: int,
    input_scale: float = 1.0,
    margin: float = DEFAULT_MARGIN,
    criterion: str = "orthogonal",
    tol: float = PASS_TOL,
    epsilon: float | None = None,
    collect_values: bool = False,
    compute_sv: bool = True,
):
    """Probe Jacobian spectra of a layer or stack at Gaussian inputs.

    ``criterion`` decides the pass flag: "orthogonal" and "partial"
    compare the respective worst defect against ``tol``; "sv_interval"
    requires every singular value to lie in [1-epsilon-tol, 1+epsilon+tol];
    "none" records measurements without judging them.

    ``compute_sv=False`` skips singular values (sv fields become nan),
    which the defect-only criteria never read.

    Returns the VerifyReport; with ``collect_values=True`` returns
    ``(report, list_of_sv_arrays)`` for downstream histograms.
    """
    if criterion == "sv_interval" and not compute_sv:
        raise DimensionError("sv_interval criterion needs compute_sv=True")
    stack = _as_stack(target)
    width = stack[0].width
    stream = SplitMix64(derive_seed(seed, 0x50))
    used = 0
    skipped = 0
    max_orth = 0.0
    max_partial = 0.0
    sv_min = np.inf
    sv_max = -np.inf
    values: list[np.ndarray] = []
    for _ in range(n_probes):
        x = input_scale * stream.gaussian(width)
        try:
            jac = stack_jacobian(stack, x, margin)
        except NearKinkError:
            skipped += 1
            continue
        used += 1
        max_orth = max(max_orth, orthogonality_defect(jac))
        max_partial = max(max_partial, partial_isometry_defect(jac))
        if compute_sv:
            sv = svd_values(jac)
            sv_min = min(sv_min, float(sv[-1]))
            sv_max = max(sv_max, float(sv[0]))
            if collect_values:
                values.append(sv)
    if used == 0:
        raise NoValidProbeError(
            f"all {n_probes} probes fell within the kink margin {margin}"
        )
    if criterion == "orthogonal":
        passed = bool(max_orth <= tol)
    elif criterion == "partial":
        passed = bool(max_partial <= tol)
    elif criterion == "sv_interval":
        if epsilon is None:
            raise DimensionError("sv_interval criterion needs epsilon")
        passed = bool(sv_min >= 1.0 - epsilon - tol and sv_max <= 1.0 + epsilon + tol)
    elif criterion == "none":
        passed = None
    else:
        raise DimensionError(f"unknown criterion {criterion!r}")
    report = VerifyReport(
        probes=used,
        max_orth_defect=max_orth,
        max_partial_defect=max_partial,
        sv_min=float(sv_min) if compute_sv else None,
        sv_max=float(sv_max) if compute_sv else None,
        bound_epsilon=epsilon,
        passed=passed,
        skipped_near_kink=skipped,
        criterion=criterion,
        tol=tol,
        seed=seed,
        kind=type(stack[0]).__name__ if len(stack) == 1 else "stack",
        width=width,
        depth=len(stack),
    )
    return (report, values) if collect_values else report


def check_dynamical_isometry(
    layer: LimitLayer,
    n_probes: int,
    seed: int,
    input_scale: float = 1.0,
    margin: float = DEFAULT_MARGIN,
    tol: float = ISOMETRY_TOL,
) -> VerifyReport:
    """Verify all Jacobian singular values sit within the predicted band.

    The band half-width is ``max(2*Lip(m)*||b||, 2*sqrt(n)*Lip(q))``, the
    smallest value for which the layer's coefficient fields satisfy the
    isometry conditions.
    """
    return spectrum_probe(
        layer,
        n_probes,
        seed,
        input_scale=input_scale,
        margin=margin,
        criterion="sv_interval",
        tol=tol,
        epsilon=layer.isometry_epsilon(),
    )


class _CellQuantizedField:
    """Base field sampled at cell centers of a 2-D grid on coords (0, 1).

    The remaining coordinates pass through unpartitioned, so the result
    is constant on each cell of the induced partition along the first
    two axes.  Used only to build density comparisons.
    """

    def __init__(self, base, resolution: int, radius: float):
        self.base = base
        self.resolution = int(resolution)
        self.radius = float(radius)

    def _snap(self, X: np.ndarray) -> np.ndarray:
        width = 2.0 * self.radius / self.resolution
        snapped = X.copy()
        idx = np.floor((X[:, :2] + self.radius) / width)
        idx = np.clip(idx, 0, self.resolution - 1)
        snapped[:, :2] = -self.radius + (idx + 0.5) * width
        return snapped

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        return self.base.eval_batch(self._snap(X))

    def grad_batch(self, X: np.ndarray) -> np.ndarray:
        return np.zeros_like(X)

    def kink_distance(self, x) -> float:
        return np.inf

    def params(self) -> dict:
        return {}

    def param_grads_batch(self, X, coeff) -> dict:
        return {}


@dataclass
class DensityReport:
    """Sup-norm gap between a limit layer and its cell-sampled surrogate."""

    resolution: int
    domain_radius: float
    n_probes: int
    seed: int
    measured_gap: float
    theoretical_bound: float

    CSV_HEADER = "resolution,domain_radius,n_probes,seed,measured_gap,theoretical_bound"

    def to_json(self) -> dict:
        return asdict(self)

    def csv_row(self) -> str:
        return (
            f"{self.resolution},{float(self.domain_radius)!r},{self.n_probes},"
            f"{self.seed},{float(self.measured_gap)!r},{float(self.theoretical_bound)!r}"
        )


def density_gap(
    layer: LimitLayer,
    resolution: int,
    domain_radius: float,
    n_probes: int,
    seed: int,
) -> DensityReport:
    """Compare a limit layer against its piecewise-constant-field surrogate.

    The surrogate's coefficient fields are the layer's fields sampled at
    the centers of an axis-aligned grid with ``resolution`` cells per
    axis over the first two coordinates of the radius-``domain_radius``
    ball (remaining coordinates unpartitioned).  The measured sup-norm
    gap over ball-uniform probes never exceeds the bound
    ``sup|q - q~| + sup|m - m~| * ||b||``.
    """
    if resolution < 1:
        raise DimensionError(f"resolution must be >= 1, got {resolution}")
    m_tilde = _CellQuantizedField(layer.m_field, resolution, domain_radius)
    q_tilde = _CellQuantizedField(layer.q_field, resolution, domain_radius)
    surrogate = LimitLayer(layer.B, layer.b, m_tilde, q_tilde, strict=False)
    X = SplitMix64(derive_seed(seed, 0xD6)).ball(n_probes, layer.width, domain_radius)
    gap = np.max(np.abs(layer.forward_batch(X) - surrogate.forward_batch(X)), axis=1)
    m_err = np.abs(layer.m_field.eval_batch(X) - m_tilde.eval_batch(X))
    q_err = np.abs(layer.q_field.eval_batch(X) - q_tilde.eval_batch(X))
    b_norm = float(np.sqrt(layer.b @ layer.b))
    return DensityReport(
        resolution=resolution,
        domain_radius=domain_radius,
        n_probes=n_probes,
        seed=seed,
        measured_gap=float(np.max(gap)),
        theoretical_bound=float(np.max(q_err) + np.max(m_err) * b_norm),
    )
