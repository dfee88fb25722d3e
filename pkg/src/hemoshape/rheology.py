"""Power-law stress, its regularization, certified inequalities and the hemolysis index.

The constitutive law is ``S(A) = (1 + |A|)^(q-2) A`` with ``|.|`` the
Frobenius norm. The regularized law adds ``(1/m) (1 + |A|)^(p-2) A``.

Certificate constants
---------------------
For ``1 < q <= 2`` the following hold for every symmetric ``A``:

* coercivity ``S(A):A >= 2^(q-2) |A|^q - 2^(q-2)``. If ``|A| >= 1`` then
  ``1 + |A| <= 2|A|`` and ``q - 2 <= 0`` give ``(1+|A|)^(q-2) >= 2^(q-2)|A|^(q-2)``.
  If ``|A| < 1`` the right-hand side is negative.
* growth ``|S(A)| <= 1 + |A|^(q-1)``, since
  ``|A| (1+|A|)^(q-2) <= (1+|A|)^(q-1) <= 1 + |A|^(q-1)`` (subadditivity of
  ``s -> s^(q-1)``).
* strict monotonicity, because ``S`` is the gradient of the strictly convex
  potential ``F(|A|)`` with ``F'(s) = s (1+s)^(q-2)`` increasing.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np


class ParameterError(ValueError):
    """Raised when a parameter set violates its validity window."""


def conjugate(s: float) -> float:
    """Hoelder conjugate ``s / (s - 1)``."""
    if s <= 1.0:
        raise ParameterError(f"conjugate exponent undefined for s={s} <= 1")
    return s / (s - 1.0)


@dataclass(frozen=True)
class RheologyParams:
    """Exponents of the stress law and the regularization schedule.

    ``q`` lies in ``(6/5, 2]``; ``q = 2`` is the Newtonian limit. The
    regularization exponent must satisfy ``p >= max(2, (5q/6)')``. A schedule
    entry ``inf`` switches the regularization off.
    """

    q: float
    p: float
    m_schedule: tuple = (math.inf,)

    def __post_init__(self):
        object.__setattr__(self, "m_schedule", tuple(float(m) for m in self.m_schedule))
        if not 6.0 / 5.0 < self.q <= 2.0:
            raise ParameterError(f"q={self.q} outside (6/5, 2]")
        p_min = self.p_min(self.q)
        if self.p < p_min - 1e-12:
            raise ParameterError(f"p={self.p} below max(2, (5q/6)')={p_min:.6g}")
        ms = self.m_schedule
        if not ms:
            raise ParameterError("m_schedule is empty")
        if any(m < 1.0 for m in ms):
            raise ParameterError("m_schedule entries must be >= 1")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ParameterError("m_schedule must be strictly increasing")

    @staticmethod
    def p_min(q: float) -> float:
        s = 5.0 * q / 6.0
        return max(2.0, conjugate(s)) if s > 1.0 else math.inf

    @property
    def q_conj(self) -> float:
        return conjugate(self.q)

    def to_dict(self):
        return {"q": self.q, "p": self.p,
                "m_schedule": [m if math.isfinite(m) else "inf" for m in self.m_schedule]}

    @classmethod
    def from_dict(cls, d):
        return cls(q=float(d["q"]), p=float(d["p"]),
                   m_schedule=tuple(float(m) for m in d.get("m_schedule", ["inf"])))


def hemolysis_window(q: float, alpha: float) -> tuple[float, float]:
    """Admissible range ``[1, q'/alpha]`` of the integrability exponent ``r``."""
    qc = conjugate(q)
    if alpha > qc:
        raise ParameterError(f"alpha={alpha} exceeds q'={qc:.6g}")
    return 1.0, qc / alpha


@dataclass(frozen=True)
class HemolysisParams:
    """Constants of ``h = c_h |S|^alpha t^beta`` and the exponent ``r``.

    ``beta`` has no default on purpose.
    """

    c_h: float
    alpha: float
    beta: float
    r: float = 1.0

    def __post_init__(self):
        for name in ("c_h", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.r < 1.0:
            raise ParameterError(f"r={self.r} < 1")

    def validate(self, rheo: RheologyParams) -> tuple[float, float]:
        lo, hi = hemolysis_window(rheo.q, self.alpha)
        if not lo <= self.r <= hi * (1 + 1e-12):
            raise ParameterError(
                f"r={self.r} outside window [1, q'/alpha] = [1, {hi:.6g}] "
                f"(q={rheo.q}, alpha={self.alpha})")
        return lo, hi

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(c_h=float(d["c_h"]), alpha=float(d["alpha"]),
                   beta=float(d["beta"]), r=float(d.get("r", 1.0)))


def _check_symmetric(a, tol=1e-12):
    a = np.asarray(a, dtype=float)
    asym = np.abs(a - np.swapaxes(a, -1, -2)).max(initial=0.0)
    scale = max(1.0, np.abs(a).max(initial=0.0))
    if asym > tol * scale:
        raise ValueError(f"tensor not symmetric (asymmetry {asym:.3e})")
    return a


def frobenius(a):
    return np.sqrt(np.einsum("...ij,...ij->...", a, a))


def _power_law(a, expo):
    nrm = frobenius(a)
    return ((1.0 + nrm) ** (expo - 2.0))[..., None, None] * a


def stress(a, params: RheologyParams, check: bool = True):
    """``(1 + |a|)^(q-2) a`` for one tensor or a stack of tensors."""
    a = _check_symmetric(a) if check else np.asarray(a, dtype=float)
    return _power_law(a, params.q)


def stress_regularized(a, params: RheologyParams, m: float, check: bool = True):
    a = _check_symmetric(a) if check else np.asarray(a, dtype=float)
    out = _power_law(a, params.q)
    if math.isfinite(m):
        out = out + _power_law(a, params.p) / m
    return out


def viscosity(nrm, params: RheologyParams, m: float = math.inf):
    """Scalar secant viscosity so that ``S^m(A) = viscosity(|A|) A``."""
    nu = (1.0 + nrm) ** (params.q - 2.0)
    if math.isfinite(m):
        nu = nu + (1.0 + nrm) ** (params.p - 2.0) / m
    return nu


def hemolysis_index(stress_value, t, hp: HemolysisParams):
    """Pointwise ``c_h |stress|^alpha t^beta``; ``stress_value`` may be stacked."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("exposure time must be nonnegative")
    return hp.c_h * frobenius(np.asarray(stress_value, dtype=float)) ** hp.alpha * t ** hp.beta


def random_symmetric(rng, n, dim, max_norm=1e3):
    """Symmetric tensors with log-uniform norms in ``[1e-6, max_norm]``."""
    a = rng.standard_normal((n, dim, dim))
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    nrm = frobenius(a)
    target = np.exp(rng.uniform(np.log(1e-6), np.log(max_norm), n))
    return a * (target / nrm)[:, None, None]


@dataclass
class Certificate:
    q: float
    dim: int
    samples: int
    seed: int
    c1: float
    c2: float
    c3: float
    coercivity_margin: float
    growth_margin: float
    monotonicity_min: float
    passed: bool
    witness: dict = field(default_factory=dict)

    def to_row(self):
        d = asdict(self)
        d.pop("witness")
        return d


class CertificateError(AssertionError):
    def __init__(self, msg, certificate):
        super().__init__(msg)
        self.certificate = certificate


def certify_inequalities(params: RheologyParams, samples: int = 10**5, seed: int = 0,
                         dim: int = 2, raise_on_failure: bool = True) -> Certificate:
    """Check coercivity, growth and strict monotonicity on random tensor pairs.

    Tensors are drawn with ``|A| <= 1e3``. Pairs with ``A == B`` are excluded
    from the monotonicity check. Margins are relative to the right-hand
    sides so that a negative margin means a violation.
    """
    if samples < 10**4:
        raise ValueError("certify_inequalities needs at least 1e4 samples")
    q = params.q
    c1 = c2 = 2.0 ** (q - 2.0)
    c3 = 1.0
    rng = np.random.default_rng(seed)
    a = random_symmetric(rng, samples, dim)
    b = random_symmetric(rng, samples, dim)
    # half of the pairs are close neighbours, where monotonicity is tight
    near = rng.random(samples) < 0.5
    b[near] = a[near] + 1e-3 * frobenius(a[near])[:, None, None] * b[near] / frobenius(b[near])[:, None, None]

    sa = stress(a, params, check=False)
    na = frobenius(a)
    lhs = np.einsum("nij,nij->n", sa, a)
    rhs = c1 * na ** q - c2
    coerc = (lhs - rhs) / (1.0 + np.abs(rhs))
    grow = (c3 * (1.0 + na ** (q - 1.0)) - frobenius(sa)) / (1.0 + na ** (q - 1.0))
    sb = stress(b, params, check=False)
    diff = a - b
    keep = frobenius(diff) > 0
    mono = np.einsum("nij,nij->n", sa - sb, diff)[keep]

    witness = {}
    if coerc.min() < -1e-12:
        i = int(np.argmin(coerc))
        witness["coercivity"] = a[i].tolist()
    if grow.min() < -1e-12:
        i = int(np.argmin(grow))
        witness["growth"] = a[i].tolist()
    if mono.size and mono.min() <= 0.0:
        i = np.flatnonzero(keep)[int(np.argmin(mono))]
        witness["monotonicity"] = [a[i].tolist(), b[i].tolist()]
    cert = Certificate(q=q, dim=dim, samples=samples, seed=seed, c1=c1, c2=c2, c3=c3,
                       coercivity_margin=float(coerc.min()), growth_margin=float(grow.min()),
                       monotonicity_min=float(mono.min()) if mono.size else math.inf,
                       passed=not witness, witness=witness)
    if witness and raise_on_failure:
        raise CertificateError(f"stress inequality violated: {sorted(witness)}", cert)
    return cert


def write_certificates_csv(path, certs):
    rows = [c.to_row() for c in certs]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
