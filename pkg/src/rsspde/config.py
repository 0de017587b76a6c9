"""TOML run configuration: schema, validation and model assembly.

Every section has a closed key set; unknown keys are rejected with their
dotted path so typos fail loudly instead of silently using defaults.
"""

import dataclasses
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .core import StepControl, check_lambda_range
from .models import PorousMediaParams, lyapunov_f, ou_model, pme_model, rate_preset
from .noise import LargeJumpConfig, SmallJumpConfig

SCHEMA_VERSION = 1
EXPERIMENTS = ("simulate", "check", "lyapunov", "periodic", "ergoavg", "couple", "steer")

_PME_KEYS = {f.name for f in dataclasses.fields(PorousMediaParams)}
_MODEL_KEYS = {
    "preset", "n_modes", "decay", "sigma", "period", "jumps", "jump_mode", "c_H", "c_J",
    "z_cap", "noise_modes", "lam_exp",
} | _PME_KEYS
_RATE_KEYS = {"preset", "m", "M", "drift_gap", "s_max", "state_mod", "closed", "delta", "lo",
              "hi", "table", "num_regimes"}
_NOISE_KEYS = {"small_jump", "large_jump"}
_SMALL_KEYS = {f.name for f in dataclasses.fields(SmallJumpConfig)}
_LARGE_KEYS = {f.name for f in dataclasses.fields(LargeJumpConfig)}
_STEP_KEYS = {f.name for f in dataclasses.fields(StepControl)}

_COMMON_RUN = {"kind", "x0", "i0", "n_traj", "t_end", "obs_times", "n_obs"}
_EXPERIMENT_KEYS = {
    "simulate": _COMMON_RUN,
    "check": {"kind", "n_samples", "lyapunov", "delta"},
    "lyapunov": _COMMON_RUN | {"lyapunov", "delta", "levels", "n_samples"},
    "periodic": _COMMON_RUN | {"phases", "k_min", "k_max", "n_perm", "cross"},
    "ergoavg": {"kind", "x0", "i0", "observable", "clip", "mode", "regime", "phase", "n_terms",
                "n_reps", "burn_in", "dispersed_regimes"},
    "couple": {"kind", "x", "y", "i", "eps", "n_stop", "T", "dt", "n_pairs", "tail_times",
               "separations", "holder_t", "holder_clip"},
    "steer": {"kind", "x0", "i0", "target", "T", "M", "R", "t1", "eps_reg", "level", "dt",
              "window_steps", "n_runs", "delta", "sweep"},
}
_TOP_KEYS = {"seed", "workers", "output_dir", "model", "rates", "noise", "step", "experiment"}


class ConfigError(ValueError):
    pass


def _reject_unknown(section, allowed, where):
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {where + extra[0]!r} (allowed: {', '.join(sorted(allowed))})")


@dataclass
class RunConfig:
    experiment: dict
    model: dict = field(default_factory=lambda: {"preset": "ou"})
    rates: dict = field(default_factory=lambda: {"preset": "none"})
    noise: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)
    seed: int = 0
    workers: int | None = None
    output_dir: str = "out"

    @property
    def kind(self):
        return self.experiment["kind"]

    def resolved(self):
        """Plain dict that round-trips through ``from_dict``."""
        out = {"seed": self.seed, "workers": self.resolved_workers(), "output_dir": self.output_dir,
               "model": self.model, "rates": self.rates, "experiment": self.experiment}
        if self.noise:
            out["noise"] = self.noise
        if self.step:
            out["step"] = self.step
        return out

    def resolved_workers(self):
        return self.workers if self.workers is not None else (os.cpu_count() or 1)

    def dumps(self):
        return tomli_w.dumps(self.resolved())

    # assembly ---------------------------------------------------------

    def step_control(self):
        return StepControl(**self.step)

    def build_rates(self):
        kw = dict(self.rates)
        name = kw.pop("preset", "none")
        return rate_preset(name, **kw)

    def build_noise(self):
        sj = self.noise.get("small_jump")
        lj = self.noise.get("large_jump")
        return (SmallJumpConfig(**sj) if sj is not None else None,
                LargeJumpConfig(**lj) if lj is not None else None)

    def build_model(self):
        kw = dict(self.model)
        preset = kw.pop("preset", "ou")
        lam = kw.pop("lam_exp", None)
        rates = self.build_rates()
        if preset == "ou":
            bad = set(kw) - {"n_modes", "decay", "sigma", "period", "noise_modes"}
            if bad:
                raise ConfigError(f"key model.{sorted(bad)[0]} does not apply to the ou preset")
            model = ou_model(rates=rates, seed=self.seed, **kw)
        elif preset == "pme":
            jkw = {k: kw.pop(k) for k in ("jumps", "jump_mode", "c_H", "c_J", "z_cap",
                                          "noise_modes") if k in kw}
            bad = set(kw) - _PME_KEYS
            if bad:
                raise ConfigError(f"key model.{sorted(bad)[0]} does not apply to the pme preset")
            sj, lj = self.build_noise()
            model = pme_model(PorousMediaParams(**kw), rates=rates, small_jump=sj, large_jump=lj,
                              seed=self.seed, **jkw)
        else:
            raise ConfigError(f"unknown model preset {preset!r} (ou | pme)")
        if lam is not None:
            model = dataclasses.replace(
                model, constants=dataclasses.replace(model.constants, lam_exp=float(lam)))
        return model

    def lyapunov(self):
        e = self.experiment
        return lyapunov_f(e.get("lyapunov", "square"), e.get("delta", 1.0))


def from_dict(raw, env=None):
    env = os.environ if env is None else env
    _reject_unknown(raw, _TOP_KEYS, "")
    if "experiment" not in raw:
        raise ConfigError("missing [experiment] section")
    exp = dict(raw["experiment"])
    kind = exp.get("kind")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"experiment.kind must be one of {', '.join(EXPERIMENTS)}, got {kind!r}")
    _reject_unknown(exp, _EXPERIMENT_KEYS[kind], "experiment.")
    model = dict(raw.get("model", {"preset": "ou"}))
    _reject_unknown(model, _MODEL_KEYS, "model.")
    rates = dict(raw.get("rates", {"preset": "none"}))
    _reject_unknown(rates, _RATE_KEYS, "rates.")
    noise = dict(raw.get("noise", {}))
    _reject_unknown(noise, _NOISE_KEYS, "noise.")
    if "small_jump" in noise:
        _reject_unknown(noise["small_jump"], _SMALL_KEYS, "noise.small_jump.")
    if "large_jump" in noise:
        _reject_unknown(noise["large_jump"], _LARGE_KEYS, "noise.large_jump.")
    step = dict(raw.get("step", {}))
    _reject_unknown(step, _STEP_KEYS, "step.")

    seed = int(env.get("RSSPDE_SEED", raw.get("seed", 0)))
    workers = env.get("RSSPDE_WORKERS", raw.get("workers"))
    workers = int(workers) if workers is not None else None
    if workers is not None and workers < 1:
        raise ConfigError("workers must be at least 1")
    cfg = RunConfig(experiment=exp, model=model, rates=rates, noise=noise, step=step, seed=seed,
                    workers=workers, output_dir=str(raw.get("output_dir", "out")))
    try:
        m = cfg.build_model()
        cfg.step_control()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    c = m.constants
    try:
        check_lambda_range(c.lam_exp, c.alpha)
    except ValueError as exc:
        raise ConfigError(f"model.lam_exp: {exc}") from exc
    return cfg


def load(path, env=None):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message carries line and column
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, env)
