"""Experiment configuration: schema, overrides, canonical hash."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .reports import canonical_json, config_hash

KINDS = ("psi-check", "solve", "price", "admissibility", "uniqueness", "comparison", "stability", "class-d", "apriori")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridCfg(_Strict):
    T: float = Field(1.0, gt=0)
    M: int = Field(50, ge=1)


class EnsembleCfg(_Strict):
    n_paths: int = Field(100_000, ge=2)
    d: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class PsiCfg(_Strict):
    mu: float = Field(1.0, gt=0)


class NamedSpec(_Strict):
    name: str
    params: dict[str, float] = Field(default_factory=dict)
    shift: float = 0.0  # generators only: f + shift


class BasisCfg(_Strict):
    degree: int = Field(7, ge=0, le=15)
    ridge: float = Field(1e-8, ge=0)


class ErrorModelCfg(_Strict):
    C1: float = Field(ge=0)
    C2: float = Field(ge=0)


class TolerancesCfg(_Strict):
    rel: float = Field(0.01, ge=0)
    stderr_k: float = Field(3.0, ge=0)
    tol_unique: ErrorModelCfg | None = None
    tol_cmp: ErrorModelCfg | None = None
    tol_stab: float | None = None
    eps_ui: float = Field(1e-3, gt=0)
    max_violation: float = Field(0.01, ge=0, le=1)
    admissibility_threshold: float = Field(0.2, gt=0)
    calibrated_at: dict | None = None


class PsiCheckCfg(_Strict):
    samples: int = Field(100_000, ge=1)
    exp_moment_b: float | None = Field(0.5, ge=0)
    martingale_b: list[float] = Field(default_factory=lambda: [0.25, 0.5])


class SolveCfg(_Strict):
    scheme: Literal["backward_euler", "picard"] = "backward_euler"
    oracle: bool = True
    picard_k_max: int = Field(50, ge=1)
    picard_tol: float = Field(1e-6, gt=0)


class PriceCfg(_Strict):
    admissibility_paths: int = Field(100_000, ge=1)
    override: bool = False
    check_bT: bool = False


class AdmissibilityCfg(_Strict):
    expect: Literal["ADMISSIBLE", "UNSTABLE"] = "ADMISSIBLE"


class UniquenessCfg(_Strict):
    bases: list[BasisCfg] = Field(default_factory=lambda: [BasisCfg(degree=7), BasisCfg(degree=9)], min_length=2)
    schemes: list[Literal["backward_euler", "picard"]] = Field(default_factory=lambda: ["backward_euler", "picard"],
                                                               min_length=1)
    refine_check: bool = True


class ComparisonCfg(_Strict):
    mode: Literal["lipschitz_41", "osgood_43"] = "osgood_43"
    generator: NamedSpec
    terminal: NamedSpec
    probe_delta: float = Field(0.01, gt=0)


class StabilityCfg(_Strict):
    eta: NamedSpec
    n_list: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16], min_length=1)
    betas: list[float] = Field(default_factory=lambda: [0.5, 0.9], min_length=1)
    mode: Literal["i", "ii"] = "ii"
    trivial_coupling: bool = True
    admissibility_paths: int = Field(100_000, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if any(b <= 0 or b >= 1 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        if self.n_list != sorted(self.n_list) or any(n < 1 for n in self.n_list):
            raise ValueError("n_list must be increasing positive integers")
        return self


class ClassDCfg(_Strict):
    K_ladder: list[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0], min_length=1)
    self_test: bool = True


class ExperimentConfig(_Strict):
    kind: Literal[KINDS]
    grid: GridCfg = GridCfg()
    ensemble: EnsembleCfg = EnsembleCfg()
    psi: PsiCfg = PsiCfg()
    generator: NamedSpec | None = None
    terminal: NamedSpec | None = None
    basis: BasisCfg = BasisCfg()
    tolerances: TolerancesCfg = TolerancesCfg()
    output: str = "out"
    psi_check: PsiCheckCfg | None = None
    solve: SolveCfg | None = None
    price: PriceCfg | None = None
    admissibility: AdmissibilityCfg | None = None
    uniqueness: UniquenessCfg | None = None
    comparison: ComparisonCfg | None = None
    stability: StabilityCfg | None = None
    class_d: ClassDCfg | None = None

    @model_validator(mode="after")
    def _sections(self):
        needs_problem = self.kind not in ("psi-check", "admissibility")
        if needs_problem and self.generator is None:
            raise ValueError(f"kind {self.kind!r} needs a 'generator' section")
        if self.kind != "psi-check" and self.terminal is None:
            raise ValueError(f"kind {self.kind!r} needs a 'terminal' section")
        required = {"comparison": "comparison", "stability": "stability"}
        if self.kind in required and getattr(self, required[self.kind]) is None:
            raise ValueError(f"kind {self.kind!r} needs a '{required[self.kind]}' section")
        if self.kind == "uniqueness" and self.tolerances.tol_unique is None:
            raise ValueError("uniqueness needs tolerances.tol_unique (run 'calibrate')")
        if self.kind == "comparison" and self.tolerances.tol_cmp is None:
            raise ValueError("comparison needs tolerances.tol_cmp (run 'calibrate')")
        if self.kind == "stability" and self.tolerances.tol_stab is None:
            raise ValueError("stability needs tolerances.tol_stab (run 'calibrate')")
        return self

    def resolved(self) -> dict:
        """Every field, defaults included, with the per-kind section filled in."""
        data = self.model_dump(mode="json")
        section = {"psi-check": ("psi_check", PsiCheckCfg), "solve": ("solve", SolveCfg), "price": ("price", PriceCfg),
                   "admissibility": ("admissibility", AdmissibilityCfg), "uniqueness": ("uniqueness", UniquenessCfg),
                   "class-d": ("class_d", ClassDCfg)}.get(self.kind)
        if section and data[section[0]] is None:
            data[section[0]] = section[1]().model_dump(mode="json")
        return data

    def section(self, name: str):
        got = getattr(self, name)
        if got is not None:
            return got
        return {"psi_check": PsiCheckCfg, "solve": SolveCfg, "price": PriceCfg, "admissibility": AdmissibilityCfg,
                "uniqueness": UniquenessCfg, "class_d": ClassDCfg}[name]()

    @property
    def hash(self) -> str:
        # the output location does not change what is computed
        data = self.resolved()
        data.pop("output")
        return config_hash(data)


# ---------------------------------------------------------------- loading


def _line_of(text: str, loc) -> int | None:
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    needle = f'"{keys[-1]}"'
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return None


def _format_errors(exc: ValidationError, text: str | None, source: str) -> str:
    lines = []
    for err in exc.errors():
        key = ".".join(str(k) for k in err["loc"]) or "<root>"
        where = _line_of(text, err["loc"]) if text else None
        at = f"{source}:{where}: " if where else f"{source}: "
        lines.append(f"{at}{key}: {err['msg']}")
    return "\n".join(lines)


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides) -> dict:
    """``key.sub=value`` assignments; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = parse_value(raw)
    return data


def validate(data: dict, text: str | None = None, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, text, source)) from None


def load_config(path, overrides=None, seed=None, paths=None, steps=None, out=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    flags = []
    if seed is not None:
        flags.append(f"ensemble.seed={seed}")
    if paths is not None:
        flags.append(f"ensemble.n_paths={paths}")
    if steps is not None:
        flags.append(f"grid.M={steps}")
    if out is not None:
        flags.append(f"output={json.dumps(str(out))}")
    data = apply_overrides(data, flags + list(overrides or ()))
    return validate(data, text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(json.loads(canonical_json(cfg.resolved())), indent=2, sort_keys=True)
