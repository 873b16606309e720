"""SDE models with autonomous coefficients on [0, 1].

Coefficients take states with the component axis first and any number of
trailing batch axes, so ``x[0]`` is the first component of every path:

    drift(x)              (d, *B) -> (d, *B)
    diffusion(x)          (d, *B) -> (d, q, *B)
    diffusion_jacobian(x) (d, *B) -> (d, q, d, *B), entry [l, j, l'] = dg_{lj}/dx_{l'}

Keeping the batch axis last lets numpy's inner loops run over contiguous
replicates, which is what makes the per-step cost acceptable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

FD_REL_STEP = 1e-5


class EvaluationError(ArithmeticError):
    """A model coefficient produced a non-finite value."""

    def __init__(self, what: str, x):
        self.what = what
        self.x = np.asarray(x)
        super().__init__(f"non-finite {what} at x={self.x.tolist()}")


def _fd_jacobian(diffusion: Callable[[Array], Array], x: Array) -> Array:
    """Central differences of ``diffusion`` with step 1e-5 * (1 + |x_l|)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for l in range(x.shape[0]):
        h = FD_REL_STEP * (1.0 + np.abs(x[l]))
        e = np.zeros_like(x)
        e[l] = h
        cols.append((diffusion(x + e) - diffusion(x - e)) / (2.0 * h))
    return np.stack(cols, axis=2)


@dataclass(frozen=True)
class SdeModel:
    name: str
    dim_state: int
    dim_noise: int
    initial_state: Array
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    diffusion_jacobian: Optional[Callable[[Array], Array]] = None
    params: dict = field(default_factory=dict)
    facts: str = ""

    def __post_init__(self):
        x0 = np.array(self.initial_state, dtype=float).reshape(-1)
        if x0.shape != (self.dim_state,):
            raise ValueError(
                f"initial_state has length {x0.size}, expected {self.dim_state}"
            )
        x0.setflags(write=False)
        object.__setattr__(self, "initial_state", x0)

    @property
    def jacobian_is_fd(self) -> bool:
        """True when the Jacobian falls back to finite differences."""
        return self.diffusion_jacobian is None

    def jacobian(self, x: Array) -> Array:
        if self.diffusion_jacobian is None:
            return _fd_jacobian(self.diffusion, x)
        return self.diffusion_jacobian(x)


@dataclass(frozen=True)
class Payoff:
    value: Callable[[Array], Array]
    description: str

    def __call__(self, x: Array) -> Array:
        return self.value(x)


def h_tensor(model: SdeModel, x) -> Array:
    """Return h[l, j, j'] = 1/2 * sum_{l'} dg_{lj}/dx_{l'} * g_{l'j'} at ``x``.

    ``x`` has shape (d, *B); the result has shape (d, q, q, *B).
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise EvaluationError("state", x)
    h = 0.5 * np.einsum("ljk...,kp...->ljp...", model.jacobian(x), model.diffusion(x))
    if not np.all(np.isfinite(h)):
        raise EvaluationError("h tensor", x)
    return h


def commutativity_defect(model: SdeModel, x) -> float:
    """max over (l, j, j') of |h_{ljj'}(x) - h_{lj'j}(x)|."""
    h = h_tensor(model, np.asarray(x, dtype=float).reshape(-1))
    return float(np.max(np.abs(h - np.swapaxes(h, 1, 2))))


@dataclass
class RegularityReport:
    max_deviation: float
    tol: float
    passed: bool
    n_points: int
    jacobian_is_fd: bool


def check_regularity(model: SdeModel, probe_points, tol: float = 1e-6) -> RegularityReport:
    """Compare the model's Jacobian against central differences of g.

    Deviation is |J - FD| / max(1, |FD|), maximised over entries and points.
    """
    pts = [np.asarray(p, dtype=float).reshape(-1) for p in probe_points]
    if not pts:
        raise ValueError("check_regularity needs at least one probe point")
    x = np.stack(pts, axis=-1)
    if not np.all(np.isfinite(x)):
        raise EvaluationError("probe point", x)
    jac = model.jacobian(x)
    fd = _fd_jacobian(model.diffusion, x)
    if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(fd))):
        raise EvaluationError("diffusion jacobian", x)
    dev = float(np.max(np.abs(jac - fd) / np.maximum(1.0, np.abs(fd))))
    return RegularityReport(dev, tol, dev <= tol, len(pts), model.jacobian_is_fd)


# -- built-in models --------------------------------------------------------


def clark_cameron() -> SdeModel:
    def drift(x):
        return np.zeros_like(x)

    def diffusion(x):
        g = np.zeros((2, 2) + x.shape[1:])
        g[0, 0] = 1.0
        g[1, 1] = x[0]
        return g

    def jacobian(x):
        jac = np.zeros((2, 2, 2) + x.shape[1:])
        jac[1, 1, 0] = 1.0
        return jac

    return SdeModel(
        name="clark-cameron",
        dim_state=2,
        dim_noise=2,
        initial_state=np.zeros(2),
        drift=drift,
        diffusion=diffusion,
        diffusion_jacobian=jacobian,
        facts=(
            "X1(t) = W1(t), X2(t) = int_0^t W1 dW2; E X2(1) = 0, "
            "E X2(1)^2 = 1/2; only nonzero h entry is h_{2,2,1} = 1/2 "
            "(commutativity defect 1/2 everywhere)"
        ),
    )


def additive_2d(mu=(0.1, -0.2), G=((1.0, 0.5), (0.3, 0.8)), x0=(1.0, 0.0)) -> SdeModel:
    mu = np.asarray(mu, dtype=float).reshape(2)
    G = np.asarray(G, dtype=float).reshape(2, 2)

    def drift(x):
        return np.broadcast_to(mu.reshape((2,) + (1,) * (x.ndim - 1)), x.shape).copy()

    def diffusion(x):
        return np.broadcast_to(G.reshape((2, 2) + (1,) * (x.ndim - 1)), (2, 2) + x.shape[1:]).copy()

    def jacobian(x):
        return np.zeros((2, 2, 2) + x.shape[1:])

    return SdeModel(
        name="additive-2d",
        dim_state=2,
        dim_noise=2,
        initial_state=x0,
        drift=drift,
        diffusion=diffusion,
        diffusion_jacobian=jacobian,
        params={"mu": mu.tolist(), "G": G.tolist(), "x0": list(x0)},
        facts="X(1) = x0 + mu + G W(1) exactly; h == 0; Milstein reduces to Euler",
    )


def trig_2d(a=0.25, b=0.3, c=0.2, drift_scale=0.5, x0=(0.0, 0.0)) -> SdeModel:
    """Bounded, smooth, non-commutative coefficients built from sin/cos."""

    def drift(x):
        out = np.empty_like(x)
        out[0] = drift_scale * np.cos(x[1])
        out[1] = -drift_scale * np.sin(x[0])
        return out

    def diffusion(x):
        x1, x2 = x[0], x[1]
        g = np.empty((2, 2) + x.shape[1:])
        g[0, 0] = 1.0 + a * np.sin(x2)
        g[0, 1] = b * np.cos(x1)
        g[1, 0] = c * np.sin(x1 + x2)
        g[1, 1] = 1.0 + a * np.cos(x1)
        return g

    def jacobian(x):
        x1, x2 = x[0], x[1]
        jac = np.zeros((2, 2, 2) + x.shape[1:])
        jac[0, 0, 1] = a * np.cos(x2)
        jac[0, 1, 0] = -b * np.sin(x1)
        s = c * np.cos(x1 + x2)
        jac[1, 0, 0] = s
        jac[1, 0, 1] = s
        jac[1, 1, 0] = -a * np.sin(x1)
        return jac

    return SdeModel(
        name="trig-2d",
        dim_state=2,
        dim_noise=2,
        initial_state=x0,
        drift=drift,
        diffusion=diffusion,
        diffusion_jacobian=jacobian,
        params={"a": a, "b": b, "c": c, "drift_scale": drift_scale, "x0": list(x0)},
        facts="f, g and all their derivatives are bounded; h is non-symmetric in (j, j')",
    )


def gbm_1d(mu=0.05, sigma=0.2, x0=1.0) -> SdeModel:
    def drift(x):
        return mu * x

    def diffusion(x):
        return (sigma * x)[:, None]

    def jacobian(x):
        return np.full((1, 1, 1) + x.shape[1:], float(sigma))

    return SdeModel(
        name="gbm-1d",
        dim_state=1,
        dim_noise=1,
        initial_state=[x0],
        drift=drift,
        diffusion=diffusion,
        diffusion_jacobian=jacobian,
        params={"mu": mu, "sigma": sigma, "x0": x0},
        facts="E X(1) = x0 exp(mu); h_{1,1,1}(x) = sigma^2 x / 2; q = 1 so always commutative",
    )


MODELS: dict[str, Callable[..., SdeModel]] = {
    "clark-cameron": clark_cameron,
    "additive-2d": additive_2d,
    "trig-2d": trig_2d,
    "gbm-1d": gbm_1d,
}


def get_model(model_id: str, **params) -> SdeModel:
    try:
        factory = MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model id {model_id!r}; known: {sorted(MODELS)}") from None
    return factory(**params)


def _component(idx: int):
    def value(x):
        return np.asarray(x)[idx]

    return value


def _component_squared(idx: int):
    def value(x):
        return np.asarray(x)[idx] ** 2

    return value


def constant_payoff(c: float = 1.0) -> Payoff:
    return Payoff(lambda x: np.full(np.asarray(x).shape[1:], float(c)), f"constant {c}")


PAYOFFS: dict[str, Callable[[], Payoff]] = {
    "x1": lambda: Payoff(_component(0), "phi(x) = x_1"),
    "x2": lambda: Payoff(_component(1), "phi(x) = x_2"),
    "x2sq": lambda: Payoff(_component_squared(1), "phi(x) = x_2^2"),
    "const": constant_payoff,
}


def get_payoff(payoff_id: str, **params) -> Payoff:
    try:
        factory = PAYOFFS[payoff_id]
    except KeyError:
        raise KeyError(f"unknown payoff id {payoff_id!r}; known: {sorted(PAYOFFS)}") from None
    return factory(**params)


def payoff_dim_ok(payoff_id: str, model: SdeModel) -> bool:
    need = {"x1": 1, "x2": 2, "x2sq": 2}.get(payoff_id, 0)
    return model.dim_state >= need


def random_probe_points(model: SdeModel, count: int, rng: np.random.Generator, scale: float = 2.0) -> Array:
    """(count, d) points around x0 for diagnostics."""
    return model.initial_state + scale * rng.standard_normal((count, model.dim_state))


__all__ = [
    "EvaluationError",
    "SdeModel",
    "Payoff",
    "RegularityReport",
    "h_tensor",
    "commutativity_defect",
    "check_regularity",
    "get_model",
    "get_payoff",
    "MODELS",
    "PAYOFFS",
]
