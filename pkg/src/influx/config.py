"""Run configuration: TOML key = value file plus command-line overrides."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .models import FAMILIES, ModelSpec
from .solvers import DEFAULT_DAMPING, SolverOptions
from .training import OPTIMIZERS, TrainConfig

METHODS = ("if", "theta-relatif", "l-relatif")


@dataclass(frozen=True)
class RunConfig:
    train_data: str | None = None
    train_format: str = "csv"
    test_data: str | None = None
    test_format: str = "csv"
    n_classes: int | None = None

    family: str = "softmax-regression"
    hidden: int | None = None
    bias: bool = True
    l2: float = 1e-3

    optimizer: str = "newton"
    max_iters: int = 500
    grad_tol: float = 1e-8
    seed: int = 0

    solver: str = "direct"
    damping: float | None = None
    basis: str = "hessian"
    cg_tol: float = 1e-8
    lissa_iters: int = 100_000
    lissa_scale: str = "auto"

    q: int = 10
    pca_batch: int = 256

    test_idx: int = 0
    method: str = "if"
    k: int = 5
    sign: str = "pos"
    projected: bool = False
    projection: str | None = None

    loo_count: int = 20
    loo_select: str = "top"
    ndcg_k: int = 10
    n_eval_tests: int = 20
    emit_csv: bool = False

    out_dir: str = "."
    stem: str = "run"

    def __post_init__(self):
        _validate(self)

    @property
    def resolved_damping(self) -> float:
        return DEFAULT_DAMPING[self.family] if self.damping is None else self.damping

    def model_spec(self, d: int, c: int) -> ModelSpec:
        return ModelSpec(self.family, d, c, self.hidden, self.bias, self.l2)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.optimizer, self.max_iters, self.grad_tol, self.seed)

    def solver_options(self) -> SolverOptions:
        scale = self.lissa_scale if self.lissa_scale == "auto" else float(self.lissa_scale)
        return SolverOptions(tol=self.cg_tol, lissa_iters=self.lissa_iters, lissa_scale=scale,
                             seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["damping"] = self.resolved_damping
        return d

    def training_key(self) -> dict:
        """The subset of settings that determines the trained parameters."""
        keys = ("train_data", "train_format", "n_classes", "family", "hidden", "bias", "l2",
                "optimizer", "max_iters", "grad_tol", "seed")
        return {k: getattr(self, k) for k in keys}


_CHOICES = {
    "train_format": ("csv", "idx"),
    "test_format": ("csv", "idx"),
    "family": FAMILIES,
    "optimizer": OPTIMIZERS,
    "solver": ("direct", "cg", "lissa"),
    "basis": ("hessian", "fisher"),
    "method": METHODS,
    "sign": ("pos", "neg", "abs"),
    "loo_select": ("top", "random"),
}

_POSITIVE = ("grad_tol", "cg_tol", "max_iters", "lissa_iters", "q", "pca_batch", "k",
             "loo_count", "ndcg_k", "n_eval_tests")


def _validate(cfg: RunConfig):
    for key, choices in _CHOICES.items():
        if getattr(cfg, key) not in choices:
            raise ConfigError(f"{key}: {getattr(cfg, key)!r} is not one of {list(choices)}", key)
    for key in _POSITIVE:
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key}: must be > 0", key)
    if cfg.damping is not None and not cfg.damping >= 0:
        raise ConfigError("damping: must be >= 0", "damping")
    if not cfg.l2 >= 0:
        raise ConfigError("l2: must be >= 0", "l2")
    if cfg.lissa_scale != "auto":
        try:
            if not float(cfg.lissa_scale) > 0:
                raise ValueError
        except ValueError:
            raise ConfigError("lissa_scale: must be 'auto' or a positive number", "lissa_scale") from None
    if cfg.family == "mlp-1hidden" and not cfg.hidden:
        raise ConfigError("hidden: required for mlp-1hidden", "hidden")
    if cfg.test_idx < 0:
        raise ConfigError("test_idx: must be >= 0", "test_idx")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    t = _TYPES[key]
    if value is None:
        return None
    try:
        if "bool" in t:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if t.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if t.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {t}", key) from None


def build_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from an optional TOML file and flag overrides (flags win)."""
    values = {}
    if file_path is not None:
        try:
            with open(file_path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {file_path}: {exc}", "config") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config: {file_path} is not valid TOML: {exc}", "config") from None
        for key, val in raw.items():
            name = key.replace("-", "_")
            if name not in _TYPES:
                raise ConfigError(f"{key}: unknown configuration key", key)
            values[name] = _coerce(name, val)
    for key, val in (overrides or {}).items():
        name = key.replace("-", "_")
        if name not in _TYPES:
            raise ConfigError(f"{key}: unknown configuration key", key)
        if val is not None:
            values[name] = _coerce(name, val)
    return RunConfig(**values)
