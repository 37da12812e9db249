"""Recurrent trace units: paired-rotation recurrence with exact forward-mode traces.

Each hidden unit is a 2x2 scaled-rotation block acting on a pair of real
state components (h_c1, h_c2). The block is parameterized by a magnitude
r in (0, 1] and a phase theta > 0, both learned through stability-enforcing
transforms of raw parameters nu_log and theta_log. Inputs enter through two
matrices scaled by the per-unit normalizer gamma = sqrt(1 - r^2).

Training is forward-mode: a TraceStore carries the sensitivities of both
state components w.r.t. every recurrent parameter, updated recursively each
step at cost linear in the parameter count, and a per-step loss gradient
w.r.t. the state (CreditSignal) turns the traces into parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidParameterError, NumericsError, ShapeError

EPS_GAMMA = 1e-12

ACTIVATION_CODES = {"identity": 0, "relu": 1, "tanh": 2}
PARAMETERIZATIONS = ("exp_exp", "exp_neg", "direct", "sigmoid")
VARIANTS = ("linear", "nonlinear")


def activation_apply(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def activation_deriv(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {name!r}")


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


@dataclass
class RtuParams:
    """Learnable parameters of one trace-unit layer.

    ``nu_log`` and ``theta_log`` are the raw magnitude/phase parameters;
    ``w_c1``/``w_c2`` are the (n, d) input matrices of the two components.
    ``variant`` selects where the activation acts: after the recurrence
    (linear) or inside it (nonlinear). ``parameterization`` selects how the
    magnitude r is produced from ``nu_log``.
    """

    nu_log: np.ndarray
    theta_log: np.ndarray
    w_c1: np.ndarray
    w_c2: np.ndarray
    activation: str = "relu"
    variant: str = "linear"
    parameterization: str = "exp_exp"

    def __post_init__(self):
        self.nu_log = _as_f64(self.nu_log)
        self.theta_log = _as_f64(self.theta_log)
        self.w_c1 = _as_f64(self.w_c1)
        self.w_c2 = _as_f64(self.w_c2)
        if self.activation not in ACTIVATION_CODES:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise InvalidParameterError(f"unknown parameterization {self.parameterization!r}")
        n = self.nu_log.shape[0]
        if self.theta_log.shape != (n,):
            raise ShapeError("nu_log and theta_log lengths differ")
        if self.w_c1.shape != self.w_c2.shape or self.w_c1.ndim != 2 or self.w_c1.shape[0] != n:
            raise ShapeError("input matrices must both be (n, d)")

    @property
    def n(self) -> int:
        return self.nu_log.shape[0]

    @property
    def d(self) -> int:
        return self.w_c1.shape[1]

    def validate_finite(self):
        for name in ("nu_log", "theta_log", "w_c1", "w_c2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite entries in {name}")

    def copy(self) -> "RtuParams":
        return RtuParams(self.nu_log.copy(), self.theta_log.copy(),
                         self.w_c1.copy(), self.w_c2.copy(),
                         self.activation, self.variant, self.parameterization)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"nu_log": self.nu_log, "theta_log": self.theta_log,
                "w_c1": self.w_c1, "w_c2": self.w_c2}

    def load_dict(self, values: dict[str, np.ndarray]):
        self.nu_log = _as_f64(values["nu_log"])
        self.theta_log = _as_f64(values["theta_log"])
        self.w_c1 = _as_f64(values["w_c1"])
        self.w_c2 = _as_f64(values["w_c2"])


@dataclass
class Coefficients:
    """Values derived from the raw parameters, recomputed after every update.

    The ``d*`` fields are the chain-rule factors of g, phi, and gamma w.r.t.
    the raw magnitude and phase parameters; the trace recursions consume them
    so that the traces live directly in raw-parameter space.
    """

    r: np.ndarray
    theta: np.ndarray
    g: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    dg_nu: np.ndarray
    dphi_nu: np.ndarray
    dg_th: np.ndarray
    dphi_th: np.ndarray
    dgamma_nu: np.ndarray


def magnitude_from_raw(nu_log: np.ndarray, parameterization: str) -> np.ndarray:
    if parameterization == "exp_exp":
        return np.exp(-np.exp(nu_log))
    if parameterization == "exp_neg":
        return np.exp(-nu_log)
    if parameterization == "direct":
        return nu_log.copy()
    if parameterization == "sigmoid":
        return 1.0 / (1.0 + np.exp(-nu_log))
    raise InvalidParameterError(f"unknown parameterization {parameterization!r}")


def raw_from_magnitude(r: np.ndarray, parameterization: str) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if parameterization == "exp_exp":
        return np.log(-np.log(r))
    if parameterization == "exp_neg":
        return -np.log(r)
    if parameterization == "direct":
        return r.copy()
    if parameterization == "sigmoid":
        return np.log(r / (1.0 - r))
    raise InvalidParameterError(f"unknown parameterization {parameterization!r}")


def _magnitude_raw_deriv(r: np.ndarray, nu_log: np.ndarray, parameterization: str) -> np.ndarray:
    # dr / d(raw magnitude parameter)
    if parameterization == "exp_exp":
        return -r * np.exp(nu_log)
    if parameterization == "exp_neg":
        return -r
    if parameterization == "direct":
        return np.ones_like(r)
    return r * (1.0 - r)  # sigmoid


def derive_coefficients(params: RtuParams, eps_gamma: float = EPS_GAMMA) -> Coefficients:
    """Compute r, theta, g, phi, gamma and their raw-parameter derivatives.

    gamma is clamped away from zero (r -> 1 makes sqrt(1 - r^2) singular and
    the nu-trace divides by it).
    """
    # fused finite check; name the offender only on failure
    probe = (kernels.array_probe_sum(params.nu_log) + kernels.array_probe_sum(params.theta_log)
             + kernels.array_probe_sum(params.w_c1) + kernels.array_probe_sum(params.w_c2))
    if not np.isfinite(probe):
        params.validate_finite()
    r = magnitude_from_raw(params.nu_log, params.parameterization)
    if np.any(r <= 0.0) or np.any(r > 1.0):
        raise InvalidParameterError("magnitude r left (0, 1]; clip raw parameters after updates")
    theta = np.exp(params.theta_log)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    g = r * cos_t
    phi = r * sin_t
    gamma = np.sqrt(np.maximum(1.0 - r * r, eps_gamma))
    dr = _magnitude_raw_deriv(r, params.nu_log, params.parameterization)
    return Coefficients(
        r=r, theta=theta, g=g, phi=phi, gamma=gamma,
        dg_nu=cos_t * dr,
        dphi_nu=sin_t * dr,
        dg_th=-phi * theta,
        dphi_th=g * theta,
        dgamma_nu=-(r / gamma) * dr,
    )


@dataclass
class RtuState:
    """Paired hidden vectors plus the pre-activations that produced them.

    In the linear variant the state is its own pre-activation; the nonlinear
    variant stores f(pre) in h and keeps pre for derivative evaluation.
    """

    h_c1: np.ndarray
    h_c2: np.ndarray
    pre_c1: np.ndarray
    pre_c2: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RtuState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self) -> "RtuState":
        return RtuState(self.h_c1.copy(), self.h_c2.copy(),
                        self.pre_c1.copy(), self.pre_c2.copy())


def combined_output(state: RtuState, params: RtuParams) -> np.ndarray:
    """The 2n view handed to downstream layers: [f(h_c1); f(h_c2)] for the
    linear variant, [h_c1; h_c2] for the nonlinear one (already activated)."""
    if params.variant == "linear":
        return np.concatenate([activation_apply(params.activation, state.h_c1),
                               activation_apply(params.activation, state.h_c2)])
    return np.concatenate([state.h_c1, state.h_c2])


@dataclass
class TraceStore:
    """Sensitivities of both state components w.r.t. every recurrent parameter.

    Exactly 4n + 4nd scalars regardless of how many steps were taken:
    four n-vectors for the magnitude/phase parameters and four (n, d)
    matrices for the input weights.
    """

    e_nu_c1: np.ndarray
    e_nu_c2: np.ndarray
    e_th_c1: np.ndarray
    e_th_c2: np.ndarray
    ew11: np.ndarray  # d h_c1 / d w_c1
    ew12: np.ndarray  # d h_c1 / d w_c2
    ew21: np.ndarray  # d h_c2 / d w_c1
    ew22: np.ndarray  # d h_c2 / d w_c2

    @classmethod
    def zeros(cls, n: int, d: int) -> "TraceStore":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n),
                   np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d)))

    def scalar_count(self) -> int:
        return sum(arr.size for arr in self._arrays())

    def _arrays(self):
        return (self.e_nu_c1, self.e_nu_c2, self.e_th_c1, self.e_th_c2,
                self.ew11, self.ew12, self.ew21, self.ew22)

    def copy(self) -> "TraceStore":
        return TraceStore(*(a.copy() for a in self._arrays()))

    def check_finite(self, step: int | None = None):
        for a in self._arrays():
            if not np.all(np.isfinite(a)):
                where = f" at step {step}" if step is not None else ""
                raise NumericsError(f"non-finite trace entries{where}")


@dataclass
class CreditSignal:
    """Per-step loss gradient w.r.t. the two stored state vectors."""

    d_c1: np.ndarray
    d_c2: np.ndarray


@dataclass
class ParamGrad:
    """Gradient container shaped like RtuParams."""

    nu_log: np.ndarray
    theta_log: np.ndarray
    w_c1: np.ndarray
    w_c2: np.ndarray

    @classmethod
    def zeros_like(cls, params: RtuParams) -> "ParamGrad":
        return cls(np.zeros(params.n), np.zeros(params.n),
                   np.zeros((params.n, params.d)), np.zeros((params.n, params.d)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"nu_log": self.nu_log, "theta_log": self.theta_log,
                "w_c1": self.w_c1, "w_c2": self.w_c2}

    def add_(self, other: "ParamGrad"):
        self.nu_log += other.nu_log
        self.theta_log += other.theta_log
        self.w_c1 += other.w_c1
        self.w_c2 += other.w_c2


def init_rtu_params(rng: np.random.Generator, n: int, d: int, *,
                    variant: str = "linear", activation: str = "relu",
                    parameterization: str = "exp_exp",
                    r_min: float = 0.0, r_max: float = 1.0,
                    max_phase: float = 2.0 * np.pi) -> RtuParams:
    """Ring initialization: r^2 uniform on [r_min^2, r_max^2], phase uniform
    on [0, max_phase], input weights uniform +-1/sqrt(d)."""
    u = rng.uniform(r_min ** 2, r_max ** 2, size=n)
    r = np.clip(np.sqrt(u), 1e-6, 1.0 - 1e-9)
    theta = np.clip(rng.uniform(0.0, max_phase, size=n), 1e-6, None)
    bound = 1.0 / np.sqrt(d)
    return RtuParams(
        nu_log=raw_from_magnitude(r, parameterization),
        theta_log=np.log(theta),
        w_c1=rng.uniform(-bound, bound, size=(n, d)),
        w_c2=rng.uniform(-bound, bound, size=(n, d)),
        activation=activation,
        variant=variant,
        parameterization=parameterization,
    )


def clip_raw_magnitude(params: RtuParams):
    """Post-update projection for the parameterizations that do not enforce
    r in (0, 1] by construction."""
    if params.parameterization == "direct":
        np.clip(params.nu_log, 1e-6, 1.0, out=params.nu_log)
    elif params.parameterization == "exp_neg":
        np.clip(params.nu_log, 1e-12, None, out=params.nu_log)


def _check_x(params: RtuParams, x: np.ndarray) -> np.ndarray:
    x = _as_f64(x)
    if x.shape != (params.d,):
        raise ShapeError(f"input has shape {x.shape}, expected ({params.d},)")
    return x


def rtu_step(state: RtuState, coeffs: Coefficients, params: RtuParams,
             x: np.ndarray) -> RtuState:
    """Advance the recurrence one step (no trace update)."""
    x = _check_x(params, x)
    new = state.copy()
    kernels.rtu_plain_step(params.variant == "nonlinear",
                           ACTIVATION_CODES[params.activation],
                           coeffs.g, coeffs.phi, coeffs.gamma,
                           params.w_c1, params.w_c2, x,
                           new.h_c1, new.h_c2, new.pre_c1, new.pre_c2)
    if not (np.all(np.isfinite(new.h_c1)) and np.all(np.isfinite(new.h_c2))):
        raise NumericsError("recurrent state overflowed")
    return new


def _trace_step(traces: TraceStore, prev_state: RtuState, coeffs: Coefficients,
                params: RtuParams, x: np.ndarray, nonlinear: bool) -> TraceStore:
    x = _check_x(params, x)
    if traces.e_nu_c1.shape != (params.n,) or traces.ew11.shape != (params.n, params.d):
        raise ShapeError("trace store does not match parameter shapes")
    new = traces.copy()
    scratch = prev_state.copy()  # kernel advances state and traces together
    kernels.rtu_fused_step(nonlinear, ACTIVATION_CODES[params.activation],
                           coeffs.g, coeffs.phi, coeffs.gamma,
                           coeffs.dg_nu, coeffs.dphi_nu, coeffs.dg_th,
                           coeffs.dphi_th, coeffs.dgamma_nu,
                           params.w_c1, params.w_c2, x,
                           scratch.h_c1, scratch.h_c2, scratch.pre_c1, scratch.pre_c2,
                           new.e_nu_c1, new.e_nu_c2, new.e_th_c1, new.e_th_c2,
                           new.ew11, new.ew12, new.ew21, new.ew22,
                           True)
    new.check_finite()
    return new


def linear_trace_step(traces: TraceStore, prev_state: RtuState, coeffs: Coefficients,
                      params: RtuParams, x: np.ndarray) -> TraceStore:
    """Trace recursion for the linear recurrence."""
    return _trace_step(traces, prev_state, coeffs, params, x, nonlinear=False)


def nonlinear_trace_step(traces: TraceStore, prev_state: RtuState, coeffs: Coefficients,
                         params: RtuParams, x: np.ndarray,
                         new_pre: tuple[np.ndarray, np.ndarray]) -> TraceStore:
    """Trace recursion for the nonlinear recurrence.

    ``new_pre`` is this step's pair of pre-activation vectors; f'(new_pre)
    scales each component's recursion, and the input-normalizer derivative
    term rides inside that factor.
    """
    new = _trace_step(traces, prev_state, coeffs, params, x, nonlinear=True)
    # The fused kernel recomputes the pre-activations from (prev_state, x);
    # new_pre is cross-checked so a caller holding stale values fails loudly.
    pre_c1, pre_c2 = new_pre
    check = rtu_step(prev_state, coeffs, params, x)
    if not (np.array_equal(check.pre_c1, pre_c1) and np.array_equal(check.pre_c2, pre_c2)):
        raise ValueError("new_pre does not match the step produced by (prev_state, x)")
    return new


def assemble_param_gradient(credit: CreditSignal, traces: TraceStore) -> ParamGrad:
    """Contract the credit with the traces: cost linear in n + nd."""
    d1 = _as_f64(credit.d_c1)
    d2 = _as_f64(credit.d_c2)
    if d1.shape != traces.e_nu_c1.shape or d2.shape != traces.e_nu_c2.shape:
        raise ShapeError("credit length does not match trace width")
    return ParamGrad(
        nu_log=d1 * traces.e_nu_c1 + d2 * traces.e_nu_c2,
        theta_log=d1 * traces.e_th_c1 + d2 * traces.e_th_c2,
        w_c1=d1[:, None] * traces.ew11 + d2[:, None] * traces.ew21,
        w_c2=d1[:, None] * traces.ew12 + d2[:, None] * traces.ew22,
    )


def reset_episode(state: RtuState, traces: TraceStore) -> tuple[RtuState, TraceStore]:
    """Zero the state and every trace (episode boundary)."""
    n = state.h_c1.shape[0]
    d = traces.ew11.shape[1]
    return RtuState.zeros(n), TraceStore.zeros(n, d)


def credit_from_output_grad(d_h: np.ndarray, state: RtuState,
                            params: RtuParams) -> CreditSignal:
    """Turn the loss gradient w.r.t. the combined 2n output into a credit
    w.r.t. the stored state vectors.

    The linear variant applies its activation after the recurrence, so the
    post-activation derivative folds in here and the traces never see it.
    """
    d_h = _as_f64(d_h)
    n = params.n
    if d_h.shape != (2 * n,):
        raise ShapeError(f"output gradient has shape {d_h.shape}, expected ({2 * n},)")
    d1, d2 = d_h[:n], d_h[n:]
    if params.variant == "linear":
        d1 = activation_deriv(params.activation, state.h_c1) * d1
        d2 = activation_deriv(params.activation, state.h_c2) * d2
    return CreditSignal(d_c1=d1.copy(), d_c2=d2.copy())


def input_credit(credit: CreditSignal, coeffs: Coefficients, params: RtuParams,
                 state: RtuState) -> np.ndarray:
    """Loss gradient w.r.t. this step's input through the direct path only
    (time dependence stays with the traces; layers stacked below receive
    this stop-gradient credit)."""
    d1, d2 = credit.d_c1, credit.d_c2
    if params.variant == "nonlinear":
        d1 = activation_deriv(params.activation, state.pre_c1) * d1
        d2 = activation_deriv(params.activation, state.pre_c2) * d2
    return params.w_c1.T @ (coeffs.gamma * d1) + params.w_c2.T @ (coeffs.gamma * d2)


class RtuCell:
    """Stateful fast path used by the agents: owns parameters, coefficients,
    state, and traces, and advances them in place through the selected kernel
    backend. The functional operations above express the same arithmetic on
    immutable values.
    """

    def __init__(self, params: RtuParams):
        self.params = params
        self.coeffs = derive_coefficients(params)
        self.state = RtuState.zeros(params.n)
        self.traces = TraceStore.zeros(params.n, params.d)
        self._nonlinear = params.variant == "nonlinear"
        self._act = ACTIVATION_CODES[params.activation]

    @property
    def out_dim(self) -> int:
        return 2 * self.params.n

    def refresh_coefficients(self):
        """Call after any parameter update."""
        self.coeffs = derive_coefficients(self.params)

    def reset(self):
        self.state = RtuState.zeros(self.params.n)
        self.traces = TraceStore.zeros(self.params.n, self.params.d)

    def step(self, x: np.ndarray, update_traces: bool = True) -> np.ndarray:
        c, s, t = self.coeffs, self.state, self.traces
        kernels.rtu_fused_step(self._nonlinear, self._act,
                               c.g, c.phi, c.gamma, c.dg_nu, c.dphi_nu,
                               c.dg_th, c.dphi_th, c.dgamma_nu,
                               self.params.w_c1, self.params.w_c2, x,
                               s.h_c1, s.h_c2, s.pre_c1, s.pre_c2,
                               t.e_nu_c1, t.e_nu_c2, t.e_th_c1, t.e_th_c2,
                               t.ew11, t.ew12, t.ew21, t.ew22,
                               update_traces)
        return self.output()

    def output(self) -> np.ndarray:
        return combined_output(self.state, self.params)

    def credit(self, d_h: np.ndarray) -> CreditSignal:
        return credit_from_output_grad(d_h, self.state, self.params)

    def param_grads(self, credit: CreditSignal) -> ParamGrad:
        return assemble_param_gradient(credit, self.traces)

    def input_credit(self, credit: CreditSignal) -> np.ndarray:
        return input_credit(credit, self.coeffs, self.params, self.state)

    def snapshot(self) -> tuple[RtuState, TraceStore]:
        return self.state.copy(), self.traces.copy()

    def load(self, state: RtuState, traces: TraceStore):
        self.state = state.copy()
        self.traces = traces.copy()

    def grads_at(self, snapshot: tuple[RtuState, TraceStore],
                 d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for an output-gradient evaluated at an earlier
        (state, traces) snapshot; used when the update lags the step."""
        state, traces = snapshot
        credit = credit_from_output_grad(d_out, state, self.params)
        return assemble_param_gradient(credit, traces).as_dict()
