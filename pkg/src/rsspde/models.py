"""Model builders: stochastic porous media, an OU validation model, Q-matrix families.

Porous media setting: domain (0, pi) with Dirichlet eigenpairs
``e_j = sqrt(2) sin(j xi)``, ``lambda_j = j**2`` under the normalised measure
``d xi / pi``. States are L2-coefficients ``x_j``; the pivot space is the
negative Sobolev space with weights ``w_j = lambda_j ** -gamma`` and the V-norm
is the L^{r+1} norm evaluated on a DST-I collocation grid.

The nonlinearity is evaluated on the same grid that defines the V-norm, so
``<A(x), x>_H = -kappa |x|_V^{r+1} + g |x|_H^2`` holds exactly in discrete form.
"""

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft, special

from .core import AssumptionConstants, LinearJumpCoef, ModelSpec
from .noise import LargeJumpConfig, NoiseConfig, SmallJumpConfig
from .regime import RateMatrix, table_rates, zero_rates

TWO_PI = 2.0 * math.pi
SLACK = 1.05


def _phase(t, period):
    return TWO_PI * np.mod(t, period) / period


def _regime_ramp(i):
    # 0 at i = 1, increasing to 1 as i -> infinity
    return 1.0 - 1.0 / np.asarray(i, dtype=float)


@dataclass(frozen=True)
class PorousMediaParams:
    n_modes: int = 8
    d: int = 1
    gamma_frac: float = 1.0
    r_pme: float = 3.0
    kappa0: float = 1.0
    kappa_amp: float = 0.25
    kappa_regime: float = 0.0
    g0: float = 0.5
    g1: float = 0.0
    g_regime: float = 0.0
    s_decay: float = 0.9
    b0: float = 1.0
    b_amp: float = 0.2
    b_regime: float = 0.0
    period: float = 1.0
    n_grid: int | None = None

    def __post_init__(self):
        if self.d != 1:
            raise ValueError("only the 1-D Dirichlet interval is implemented (d = 1)")
        if self.n_modes < 1:
            raise ValueError("n_modes must be positive")
        if not self.gamma_frac > 0:
            raise ValueError("gamma_frac must be positive")
        if not self.r_pme > 1:
            raise ValueError("r_pme must exceed 1")
        if not 0.5 < self.s_decay <= self.gamma_frac / self.d:
            raise ValueError(f"s_decay must lie in (1/2, gamma/d] = (0.5, {self.gamma_frac / self.d}]")
        if not (self.kappa0 > 0 and 0 <= self.kappa_amp < 1 and self.kappa_regime >= 0):
            raise ValueError("kappa must stay in [k1, k2] with k1 > 0")
        if not (self.b0 > 0 and 0 <= self.b_amp < 1 and 0 <= self.b_regime < 1):
            raise ValueError("b' must be bounded away from zero")
        if self.g_regime < 0:
            raise ValueError("g_regime must be nonnegative")
        if not self.period > 0:
            raise ValueError("period must be positive")
        if self.n_grid is not None and self.n_grid < self.n_modes:
            raise ValueError("n_grid must be at least n_modes")

    @property
    def grid_size(self):
        # 2x padding keeps cubic products of the leading modes resolved
        return self.n_grid or 2 * self.n_modes + 1

    @property
    def modes(self):
        return np.arange(1, self.n_modes + 1, dtype=float)

    @property
    def eigenvalues(self):
        return self.modes ** (2.0 / self.d)

    @property
    def h_weights(self):
        return self.eigenvalues ** (-self.gamma_frac)

    @property
    def k1(self):
        return self.kappa0 * (1.0 - self.kappa_amp)

    @property
    def k2(self):
        return self.kappa0 * (1.0 + self.kappa_amp) * (1.0 + self.kappa_regime)

    @property
    def g_sup(self):
        return abs(self.g0) + abs(self.g1) + self.g_regime

    @property
    def g_plus(self):
        return max(0.0, self.g0 + abs(self.g1))

    @property
    def b_sup(self):
        return self.b0 * (1.0 + self.b_amp)

    @property
    def b_inf(self):
        return self.b0 * (1.0 - self.b_amp) * (1.0 - self.b_regime)

    def kappa(self, t, i):
        ph = _phase(t, self.period)
        return (self.kappa0 * (1.0 + self.kappa_amp * np.sin(ph))
                * (1.0 + self.kappa_regime * _regime_ramp(i)))

    def g(self, t, i):
        ph = _phase(t, self.period)
        return self.g0 + self.g1 * np.sin(ph) - self.g_regime * _regime_ramp(i)

    def b_prime(self, t, i):
        ph = _phase(t, self.period)
        return (self.b0 * (1.0 + self.b_amp * np.cos(ph))
                * (1.0 - self.b_regime * _regime_ramp(i)))


# --------------------------------------------------------------------------
# spectral transforms on the DST-I grid xi_k = k pi / (N + 1)


@functools.lru_cache(maxsize=32)
def sine_matrix(n_grid, n_modes):
    """``S[k, j] = sin((j + 1) xi_k)`` on the DST-I grid."""
    k = np.arange(1, n_grid + 1)[:, None]
    j = np.arange(1, n_modes + 1)[None, :]
    S = np.sin(k * j * math.pi / (n_grid + 1))
    S.setflags(write=False)
    return S


def to_grid(x, n_grid):
    """Grid values ``u(xi_k) = sum_j x_j sqrt(2) sin(j xi_k)``."""
    x = np.asarray(x, dtype=float)
    S = sine_matrix(n_grid, x.shape[-1])
    # stacked matmul: each row is its own product, independent of the batch size
    return math.sqrt(2.0) * np.matmul(x[..., None, :], S.T)[..., 0, :]


def from_grid(f, n_modes):
    """Discrete L2 projection onto the leading ``n_modes`` eigenfunctions."""
    n_grid = f.shape[-1]
    S = sine_matrix(n_grid, n_modes)
    return (math.sqrt(2.0) / (n_grid + 1)) * np.matmul(f[..., None, :], S)[..., 0, :]


def dst_to_grid(x, n_grid):
    """Same as ``to_grid`` through a fast sine transform (for large grids)."""
    x = np.asarray(x, dtype=float)
    pad = [(0, 0)] * (x.ndim - 1) + [(0, n_grid - x.shape[-1])]
    return (math.sqrt(2.0) / 2.0) * fft.dst(np.pad(x, pad), type=1, axis=-1)


def grid_points(n_grid):
    return np.arange(1, n_grid + 1) * math.pi / (n_grid + 1)


def _psi(u, r):
    return np.abs(u) ** (r - 1.0) * u


def pme_drift(t, x, i, p):
    x = np.asarray(x, dtype=float)
    u = to_grid(x, p.grid_size)
    psi = from_grid(_psi(u, p.r_pme), p.n_modes)
    kap = np.asarray(p.kappa(t, i))[..., None]
    g = np.asarray(p.g(t, i))[..., None]
    return -kap * p.eigenvalues ** p.gamma_frac * psi + g * x


def pme_jacobian(t, x, i, p):
    x = np.asarray(x, dtype=float)
    N = p.grid_size
    S = sine_matrix(N, p.n_modes)
    u = to_grid(x, N)
    dpsi = p.r_pme * np.abs(u) ** (p.r_pme - 1.0)
    M = (2.0 / (N + 1)) * np.matmul(S.T * dpsi[..., None, :], S)
    kap = np.asarray(p.kappa(t, i))[..., None, None]
    g = np.asarray(p.g(t, i))[..., None, None]
    lam = (p.eigenvalues ** p.gamma_frac)[:, None]
    return -kap * lam * M + g * np.eye(p.n_modes)


def pme_diffusion(t, x, i, p):
    x = np.asarray(x, dtype=float)
    j = p.modes
    bj = np.asarray(p.b_prime(t, i))[..., None] / (1.0 + j ** (-2.0 * p.gamma_frac / p.d) * np.abs(x))
    return bj * j ** (-p.s_decay)


def pme_v_norm(x, p):
    u = to_grid(x, p.grid_size)
    N = p.grid_size
    return (np.sum(np.abs(u) ** (p.r_pme + 1.0), axis=-1) / (N + 1)) ** (1.0 / (p.r_pme + 1.0))


def pme_v_dual(x, a, p):
    """Lower estimate of ``|a|_{V*}`` from a set of probe directions."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    w = p.h_weights
    q = (p.r_pme + 1.0) / p.r_pme
    g = to_grid(w * a, p.grid_size)
    holder = from_grid(np.abs(g) ** (q - 1.0) * np.sign(g), p.n_modes)
    probes = [a, w * a, holder]
    probes += [np.broadcast_to(np.eye(p.n_modes)[k], a.shape) for k in range(p.n_modes)]
    best = np.zeros(a.shape[0])
    for y in probes:
        den = pme_v_norm(y, p)
        num = np.abs(np.sum(w * a * y, axis=-1))
        best = np.maximum(best, np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0))
    return best.reshape(np.shape(a)[:-1]) if np.ndim(a) > 1 else best[0]


# --------------------------------------------------------------------------
# jump coefficients


def builtin_jump_coefs(choice, n_modes, h_weights, mode=1, c_H=0.1, c_J=0.1, z_cap=2.0):
    """Return ``(H, J)`` as ``LinearJumpCoef`` objects (``None`` when off)."""
    if choice == "off":
        return None, None
    if not 1 <= mode <= n_modes:
        raise ValueError(f"jump mode {mode} outside [1, {n_modes}]")
    w = np.asarray(h_weights, dtype=float)
    phi = np.zeros(n_modes)
    phi[mode - 1] = 1.0 / math.sqrt(w[mode - 1])

    def fixed(scale):
        def direction(t, x, i):
            return np.broadcast_to(scale * phi, np.shape(x)).copy()
        return direction

    J = LinearJumpCoef(fixed(c_J), cap=z_cap, name=f"additive_mode_{mode}")
    if choice == "additive_mode_k":
        return LinearJumpCoef(fixed(c_H), name=f"additive_mode_{mode}"), J
    if choice == "damped_state":
        def damped(t, x, i):
            x = np.asarray(x, dtype=float)
            nrm = np.sqrt(np.sum(w * x * x, axis=-1))
            return c_H * x / (1.0 + nrm)[..., None]
        return LinearJumpCoef(damped, name="damped_state"), J
    raise ValueError(f"unknown jump coefficient choice {choice!r}")


def _jump_bounds(choice, noise, c_H, c_J, z_cap):
    """(bound on the small-jump square integral, its Lipschitz constant, big-jump square integral)."""
    m2 = noise.small_jump.moment(2.0) if noise.small_on else 0.0
    if choice == "off":
        return 0.0, 0.0, 0.0
    h_sq = c_H ** 2 * m2
    h_lip = h_sq if choice == "damped_state" else 0.0
    big = 0.0
    if noise.large_on:
        lj = noise.large_jump
        big = lj.integrate(lambda z: min(abs(z), z_cap) ** 2) * c_J ** 2
    return h_sq, h_lip, big


# --------------------------------------------------------------------------
# rate-matrix families


def _state_level(x):
    x = np.asarray(x, dtype=float)
    s = np.sum(x * x, axis=-1)
    return s / (1.0 + s)


def qmatrix_family_a(m=1, M=0.6, drift_gap=0.2, s_max=64, state_mod=0.0, closed=False):
    """Banded rates: inward (downward) ``M``, outward ``(M - gap)(1 - state_mod * phi(x))``.

    ``phi(x) = |x|^2 / (1 + |x|^2)``. With ``closed`` the outward rates at the top
    of the truncated range are dropped instead of routed to the exit column.
    """
    if m < 1 or M <= 0:
        raise ValueError("need m >= 1 and M > 0")
    if not 0 < drift_gap < M:
        raise ValueError("drift_gap must lie in (0, M) so inward rates dominate outward ones")
    if not 0 <= state_mod < 1:
        raise ValueError("state_mod must lie in [0, 1)")
    out_rate = M - drift_gap
    cols = np.arange(1, s_max + 2)

    def row_fn(x, i):
        i = np.asarray(i)
        lvl = _state_level(x) if state_mod else np.zeros(np.shape(i))
        qo = out_rate * (1.0 - state_mod * np.asarray(lvl))
        diff = cols - i[..., None]
        row = np.where((diff < 0) & (diff >= -m), M, 0.0)
        row = row + np.where((diff > 0) & (diff <= m), qo[..., None], 0.0)
        # targets beyond s_max collapse into the exit column
        n_exit = np.clip(i + m - s_max, 0, m)
        row[..., -1] = 0.0 if closed else n_exit * qo
        return row

    name = f"banded_a(m={m},M={M},gap={drift_gap})"
    # the thinning clock only needs an upper bound; slack keeps Q0 strict
    return RateMatrix(row_fn, s_max, SLACK * m * (2.0 * M - drift_gap), name=name,
                      state_independent=state_mod == 0)


def qmatrix_family_b(delta=1.0, lo=0.5, hi=1.0, s_max=64, state_mod=0.0):
    """Rates ``q_ij(x) = c(x) j^{-(1+delta)}`` with ``c(x)`` in ``[lo, hi]``.

    ``c`` is the midpoint shifted by ``state_mod * (phi(x) - 1/2) * (hi - lo)``;
    the mass beyond ``s_max`` (a Hurwitz zeta tail) goes to the exit column.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    if not 0 <= state_mod <= 1:
        raise ValueError("state_mod must lie in [0, 1]")
    j = np.arange(1, s_max + 1, dtype=float)
    base = np.concatenate([j ** (-(1.0 + delta)), [special.zeta(1.0 + delta, s_max + 1)]])
    mid = 0.5 * (lo + hi)

    def row_fn(x, i):
        i = np.asarray(i)
        if state_mod:
            coef = mid + state_mod * (np.asarray(_state_level(x)) - 0.5) * (hi - lo)
        else:
            coef = np.full(np.shape(i), mid)
        return coef[..., None] * base

    return RateMatrix(row_fn, s_max, hi * float(special.zeta(1.0 + delta)),
                      name=f"decay_b(delta={delta},lo={lo},hi={hi})",
                      state_independent=state_mod == 0)


def lyapunov_f(preset, delta=1.0):
    if preset == "square":
        return lambda i: np.asarray(i, dtype=float) ** 2
    if preset == "power":
        return lambda i: np.asarray(i, dtype=float) ** (delta / 2.0)
    if preset == "constant":
        return lambda i: np.ones(np.shape(i))
    raise ValueError(f"unknown Lyapunov preset {preset!r}")


# --------------------------------------------------------------------------
# model assembly


def pme_constants(p, noise, jumps="off", c_H=0.1, c_J=0.1, z_cap=2.0, C_r=None):
    """Declared constants of the porous media model (all with 5% slack)."""
    r = p.r_pme
    alpha = r + 1.0
    if C_r is None:
        C_r = 2.0 ** (1.0 - r)
    h_sq, h_lip, _ = _jump_bounds(jumps, noise, c_H, c_J, z_cap)
    trace = p.b_sup ** 2 * float(np.sum(p.modes ** (-2.0 * p.s_decay)))
    growth = (p.k2 + p.g_sup) ** ((r + 1.0) / r)
    C_sup = SLACK * max(trace + h_sq, growth)
    c = SLACK * max(2.0 * p.g_plus, 2.0 * growth)
    K = SLACK * (2.0 * p.g_plus + p.b_sup ** 2 + h_lip)
    lam = max(2.0, r)
    b_inf, b_sup, k1 = p.b_inf, p.b_sup, p.k1
    s = p.s_decay
    modes = p.modes

    return AssumptionConstants(
        alpha=alpha, beta=0.0, theta=2.0 * k1, K=K, gamma_growth=0.0,
        c=c, C_sup=C_sup, lam_exp=lam,
        B_n=lambda n: (b_inf / (1.0 + n)) * modes ** (-s),
        delta_n=lambda n: k1 * C_r * (b_inf / (1.0 + n)) ** lam,
        K_tilde_n=lambda n: K,
        C_lip_n=lambda n: b_sup,
        rho=None, n0=1, C_r=C_r,
    )


def pme_model(p=None, rates=None, jumps="off", jump_mode=1, c_H=0.1, c_J=0.1, z_cap=2.0,
              small_jump=None, large_jump=None, noise_modes=None, seed=0, C_r=None,
              constants=None):
    p = p or PorousMediaParams()
    rates = rates or zero_rates()
    if jumps != "off":
        small_jump = small_jump or SmallJumpConfig()
    noise = NoiseConfig(p.n_modes, small_jump=small_jump if jumps != "off" else None,
                        large_jump=large_jump if jumps != "off" else None,
                        seed=seed, noise_modes=noise_modes)
    H, J = builtin_jump_coefs(jumps, p.n_modes, p.h_weights, jump_mode, c_H, c_J, z_cap)
    if constants is None:
        constants = pme_constants(p, noise, jumps, c_H, c_J, z_cap, C_r=C_r)
    return ModelSpec(
        name="pme",
        n_modes=p.n_modes,
        drift=lambda t, x, i: pme_drift(t, x, i, p),
        diffusion=lambda t, x, i: pme_diffusion(t, x, i, p),
        h_weights=p.h_weights,
        rate_matrix=rates,
        period=p.period,
        noise=noise,
        small_jump_coef=H,
        large_jump_coef=J,
        constants=constants,
        drift_jacobian=lambda t, x, i: pme_jacobian(t, x, i, p),
        v_norm_fn=lambda x: pme_v_norm(x, p),
        v_dual_norm_fn=lambda x, a: pme_v_dual(x, a, p),
        params=p,
    )


@dataclass(frozen=True)
class OUParams:
    decay: tuple
    sigma: tuple
    period: float = 1.0

    @property
    def lam(self):
        return np.asarray(self.decay, dtype=float)

    @property
    def sig(self):
        return np.asarray(self.sigma, dtype=float)

    def mean(self, x0, t):
        return np.exp(-self.lam * t) * np.asarray(x0, dtype=float)

    def variance(self, t):
        lam = self.lam
        return self.sig ** 2 * -np.expm1(-2.0 * lam * t) / (2.0 * lam)

    def stationary_variance(self):
        return self.sig ** 2 / (2.0 * self.lam)

    def sample(self, x0, t, rng, n):
        """Exact draws from the transition law at time ``t``."""
        return self.mean(x0, t) + np.sqrt(self.variance(t)) * rng.standard_normal((n, len(self.lam)))


def ou_constants(p):
    lam, sig = p.lam, p.sig
    return AssumptionConstants(
        alpha=2.0, beta=0.0, theta=2.0 * lam.min(), K=0.0, gamma_growth=0.0,
        c=SLACK * lam.max() ** 2, C_sup=SLACK * float(np.sum(sig ** 2)), lam_exp=2.0,
        B_n=lambda n: 0.99 * sig,
        delta_n=lambda n: float(np.min(lam * sig ** 2)) * 0.99 ** 2,
        K_tilde_n=lambda n: 0.0,
        C_lip_n=lambda n: 1.0,
    )


def ou_model(n_modes=2, decay=None, sigma=None, rates=None, period=1.0, seed=0,
             noise_modes=None):
    """Diagonal OU: ``dx_j = -lambda_j x_j dt + sigma_j dbeta_j`` with Euclidean H = V."""
    decay = tuple(float(v) for v in (decay if decay is not None else np.arange(1, n_modes + 1)))
    sigma = tuple(float(v) for v in (sigma if sigma is not None else np.ones(n_modes)))
    if len(decay) != n_modes or len(sigma) != n_modes:
        raise ValueError("decay and sigma need one entry per mode")
    if min(decay) <= 0 or min(sigma) <= 0:
        raise ValueError("decay rates and noise levels must be positive")
    p = OUParams(decay, sigma, period)
    lam, sig = p.lam, p.sig

    def drift(t, x, i):
        return -lam * np.asarray(x, dtype=float)

    def diffusion(t, x, i):
        return np.broadcast_to(sig, np.shape(x)).copy()

    def jac(t, x, i):
        return np.broadcast_to(-lam, np.shape(x)).copy()

    return ModelSpec(
        name="ou",
        n_modes=n_modes,
        drift=drift,
        diffusion=diffusion,
        h_weights=np.ones(n_modes),
        rate_matrix=rates or zero_rates(),
        period=period,
        noise=NoiseConfig(n_modes, seed=seed, noise_modes=noise_modes),
        constants=ou_constants(p),
        drift_jacobian=jac,
        params=p,
    )


def scalar_linear_model(a=1.0, sigma=1.0):
    """One-mode ``dX = -a X dt + sigma dW``."""
    return ou_model(1, decay=[a], sigma=[sigma])


def rate_preset(name, **kw):
    if name == "banded_a":
        return qmatrix_family_a(**kw)
    if name == "decay_b":
        return qmatrix_family_b(**kw)
    if name == "table":
        return table_rates(kw["table"])
    if name == "none":
        return zero_rates(kw.get("num_regimes", 1))
    raise ValueError(f"unknown rate-matrix preset {name!r}")
