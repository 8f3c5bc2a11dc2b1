"""Command line: ``pkcal {fit,bayes,compare,mc-study,rate-study}``.

Configuration is a JSON document validated in full before anything runs.
Every output file is staged under a temporary name and renamed into place
only after the whole command has succeeded.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, field_validator, model_validator

from . import __version__
from .bayes import McmcSettings, PosteriorSpec, credible_region, sample_posterior, write_chain_table
from .calibrate import (CalibrationProblem, LambdaPolicy, _Profile, asymptotic_covariance, fit_ko_mode,
                        fit_l2, fit_pk)
from .domain import DomainSpec, build_quadrature
from .errors import DataError, PkcalError, ValidationError
from .kernel import FAMILIES, KernelSpec
from .model import REGISTRY, ExternalModelSpec, builtin, external_model
from .optim import OptimizerSettings
from .study import METHODS, SCENARIOS, StudySettings, mc_study, rate_study, scenario, theoretical_rate

FIT_METHODS = ("pk", "l2", "ko")
ALL_METHODS = ("pk", "l2", "ko", "bayes-pk", "bayes-ogp", "compare", "mc-study", "rate-study")

EXIT_CODES = {
    "success": 0,
    "validation": 2,
    "data": 3,
    "numeric": 4,
    "optimization": 5,
    "transport": 6,
}


# ---------------------------------------------------------------------------
# configuration schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainConfig(_Strict):
    bounds: list[tuple[float, float]] = [(0.0, 1.0)]


class QuadratureConfig(_Strict):
    kind: Optional[Literal["tensor-gauss", "sobol-qmc"]] = None
    level: int = Field(64, ge=1, le=4096)


class KernelConfig(_Strict):
    family: Literal[FAMILIES] = "matern-5/2"
    lengthscales: list[float] = [0.25]
    variance: float = Field(1.0, gt=0)

    @field_validator("lengthscales")
    @classmethod
    def _positive(cls, v):
        if not v or any(not x > 0 for x in v):
            raise ValueError("lengthscales must be a non-empty list of positive numbers")
        return v


class ExternalConfig(_Strict):
    command: str
    timeout: float = Field(30.0, gt=0)


class ModelConfig(_Strict):
    builtin: Optional[str] = "linear-features"
    params: dict = {}
    external: Optional[ExternalConfig] = None
    theta_bounds: Optional[list[tuple[float, float]]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.external is not None:
            self.builtin = None
            if self.theta_bounds is None:
                raise ValueError("an external model needs theta_bounds")
        elif self.builtin not in REGISTRY:
            raise ValueError(f"unknown builtin model {self.builtin!r}; choose from {sorted(REGISTRY)}")
        return self


class LambdaConfig(_Strict):
    policy: Literal["gcv", "fixed"] = "gcv"
    value: Optional[float] = Field(None, gt=0)
    grid: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.policy == "fixed" and self.value is None:
            raise ValueError("a fixed lambda policy needs a positive value")
        if self.grid is not None and (not self.grid or any(not g > 0 for g in self.grid)):
            raise ValueError("lambda grid must be non-empty and positive")
        return self


class OptimizerConfig(_Strict):
    starts: Optional[int] = Field(None, ge=1)
    max_iters: int = Field(2000, ge=1)
    x_tol: float = Field(1e-9, gt=0)
    f_tol: float = Field(1e-14, gt=0)


class McmcConfig(_Strict):
    chains: int = Field(4, ge=1)
    burn_in: int = Field(1000, ge=0)
    samples: int = Field(2000, ge=1)
    target_accept: float = Field(0.3, gt=0, lt=1)
    adapt_window: int = Field(100, ge=1)


class BayesConfig(_Strict):
    noise: Literal["plugin", "unit"] = "plugin"
    ogp_literal: bool = False
    level: float = Field(0.95, gt=0, lt=1)


class StudyConfig(_Strict):
    scenario: Literal[tuple(SCENARIOS)] = "S2"
    n: int = Field(100, ge=2)
    replications: int = Field(100, ge=1)
    sigma: float = Field(0.1, ge=0)
    noise: Literal["gaussian", "uniform"] = "gaussian"
    methods: list[Literal[METHODS]] = ["pk"]
    ko_lambdas: list[float] = [1e-4, 1e-2, 1.0]
    n_grid: list[int] = [50, 100, 200, 400]
    lambda_schedule: Optional[tuple[float, float]] = None

    @field_validator("ko_lambdas")
    @classmethod
    def _positive(cls, v):
        if not v or any(not x > 0 for x in v):
            raise ValueError("ko_lambdas must be a non-empty list of positive numbers")
        return v


class PlotConfig(_Strict):
    profile_points: int = Field(101, ge=3, le=10001)


class RunConfig(_Strict):
    domain: DomainConfig = DomainConfig()
    quadrature: QuadratureConfig = QuadratureConfig()
    kernel: KernelConfig = KernelConfig()
    model: ModelConfig = ModelConfig()
    method: Literal[ALL_METHODS] = "pk"
    lambda_: LambdaConfig = Field(LambdaConfig(), alias="lambda")
    optimizer: OptimizerConfig = OptimizerConfig()
    mcmc: McmcConfig = McmcConfig()
    bayes: BayesConfig = BayesConfig()
    study: StudyConfig = StudyConfig()
    plots: PlotConfig = PlotConfig()
    seed: int = Field(0, ge=0, lt=2 ** 64)
    jitter_rel: float = Field(1e-12, gt=0, le=1e-6)
    data: Optional[str] = None
    out: Optional[str] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def dump(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def _schema_fields(model_cls, loc):
    """Field names (by alias) valid at ``loc`` inside the config schema."""
    cls = model_cls
    for part in loc:
        if not isinstance(part, str):
            continue
        field = next((f for name, f in cls.model_fields.items() if (f.alias or name) == part), None)
        ann = getattr(field, "annotation", None)
        ann = next((a for a in getattr(ann, "__args__", ()) if isinstance(a, type)), ann)
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            cls = ann
        else:
            break
    return [f.alias or name for name, f in cls.model_fields.items()]


def _format_errors(exc: PydanticError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = err["loc"]
        path = ".".join(str(p) for p in loc) or "<root>"
        if err["type"] == "extra_forbidden":
            valid = _schema_fields(RunConfig, loc[:-1])
            near = difflib.get_close_matches(str(loc[-1]), valid, n=1)
            hint = f"; did you mean {near[0]!r}?" if near else f"; valid fields: {valid}"
            out.append(f"{path}: unknown field{hint}")
        else:
            out.append(f"{path}: {err['msg']}")
    return out


def parse_config(text: str, source="<config>", base_dir: Path | None = None) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{source}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{source}: top level must be an object")
    try:
        cfg = RunConfig.model_validate(raw)
    except PydanticError as exc:
        raise ValidationError(f"{source}: invalid configuration:\n  " + "\n  ".join(_format_errors(exc))) from None
    if base_dir is not None and cfg.data is not None and not os.path.isabs(cfg.data):
        cfg.data = str(base_dir / cfg.data)
    errors = _semantic_errors(cfg)
    if errors:
        raise ValidationError(f"{source}: invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _semantic_errors(cfg: RunConfig) -> list[str]:
    errors = []
    d = len(cfg.domain.bounds)
    for j, (lo, hi) in enumerate(cfg.domain.bounds):
        if not lo < hi:
            errors.append(f"domain.bounds.{j}: need lower < upper, got [{lo}, {hi}]")
    if len(cfg.kernel.lengthscales) != d:
        errors.append(f"kernel.lengthscales: need {d} entries to match the domain, got {len(cfg.kernel.lengthscales)}")
    for j, (lo, hi) in enumerate(cfg.model.theta_bounds or []):
        if not lo < hi:
            errors.append(f"model.theta_bounds.{j}: need lower < upper, got [{lo}, {hi}]")
    if any(b <= a for a, b in zip(cfg.study.n_grid, cfg.study.n_grid[1:])) or len(cfg.study.n_grid) < 3:
        errors.append("study.n_grid: need at least 3 strictly increasing sizes")
    return errors


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path), path.parent.resolve())


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.dump(), indent=2, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.dump(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# data

def read_data(path, dim: int):
    """Comma-separated file with header ``x_1..x_d,y``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty data file")
    header = [h.strip() for h in rows[0]]
    want = [f"x_{j + 1}" for j in range(dim)] + ["y"]
    if header != want:
        raise DataError(f"{path}: header must be {','.join(want)}, got {','.join(header)}")
    vals = []
    for i, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != dim + 1:
            raise DataError(f"{path}: line {i} has {len(row)} fields, expected {dim + 1}")
        try:
            vals.append([float(c) for c in row])
        except ValueError:
            raise DataError(f"{path}: line {i} has a non-numeric field") from None
    A = np.array(vals, dtype=float).reshape(-1, dim + 1)
    if not np.all(np.isfinite(A)):
        raise DataError(f"{path}: non-finite values")
    return A[:, :dim], A[:, dim]


def write_data(path, X, y):
    X = np.atleast_2d(X)
    header = ",".join([f"x_{j + 1}" for j in range(X.shape[1])] + ["y"])
    np.savetxt(path, np.column_stack([X, y]), delimiter=",", header=header, comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# building blocks from a config

def _kernel(cfg):
    return KernelSpec(cfg.kernel.family, tuple(cfg.kernel.lengthscales), cfg.kernel.variance)


def _model(cfg):
    mc = cfg.model
    d = len(cfg.domain.bounds)
    if mc.external is not None:
        return external_model(ExternalModelSpec(mc.external.command, d, tuple(map(tuple, mc.theta_bounds)),
                                                mc.external.timeout))
    params = dict(mc.params)
    if mc.theta_bounds is not None:
        params["theta_bounds"] = tuple(map(tuple, mc.theta_bounds))
    try:
        model = builtin(mc.builtin, **params)
    except TypeError as exc:
        raise ValidationError(f"model.params: {exc}") from None
    if model.dim != d:
        raise ValidationError(f"model {mc.builtin!r} has dimension {model.dim} but the domain has {d}")
    return model


def _policy(cfg):
    lc = cfg.lambda_
    if lc.policy == "fixed":
        return LambdaPolicy.fixed(lc.value)
    return LambdaPolicy.gcv(lc.grid) if lc.grid else LambdaPolicy.gcv()


def _optimizer(cfg):
    return OptimizerSettings(**cfg.optimizer.model_dump())


def _mcmc(cfg):
    return McmcSettings(**cfg.mcmc.model_dump())


def build_problem(cfg: RunConfig, X, y) -> CalibrationProblem:
    domain = DomainSpec(tuple(map(tuple, cfg.domain.bounds)))
    rule = build_quadrature(domain, cfg.quadrature.kind, cfg.quadrature.level, seed=cfg.seed)
    try:
        domain.check_points(X, "data row")
    except ValidationError as exc:
        raise DataError(str(exc)) from None
    model = _model(cfg)
    try:
        return CalibrationProblem(X, y, model, _kernel(cfg), rule, _policy(cfg), _optimizer(cfg),
                                  cfg.jitter_rel, cfg.seed)
    except ValidationError as exc:
        raise DataError(f"data rejected: {exc}") from None


# ---------------------------------------------------------------------------
# commands; each returns {filename: text}

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _report(cfg, command, result):
    doc = {"tool": "pkcal", "version": __version__, "command": command, "seed": cfg.seed,
           "config_hash": config_hash(cfg), "config": cfg.dump(), "result": result}
    return json.dumps(_to_jsonable(doc), indent=2, sort_keys=True) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _profile_table(problem, result, points):
    """``J`` along each theta coordinate through theta-hat, the others held fixed."""
    m = problem.model
    prof = _Profile(problem, result.lambda_used, result.method != "ko")
    rows = []
    for i in range(m.q):
        for v in np.linspace(m.lower[i], m.upper[i], points):
            t = result.theta_hat.copy()
            t[i] = v
            rows.append([i + 1, float(v), prof(t)])
    return _csv(["coordinate", "theta", "objective"], rows)


def _fit_outputs(problem, res, cfg):
    files = {}
    if res.gcv_trace:
        files["gcv_trace.csv"] = _csv(["lambda", "score"], res.gcv_trace)
    if res.method != "l2":
        files["profile_curve.csv"] = _profile_table(problem, res, cfg.plots.profile_points)
    return files


def _fit_result(res):
    out = res.to_dict()
    out["diagnostics"] = {k: v for k, v in res.diagnostics.items()}
    return out


def cmd_fit(cfg, X, y, method):
    problem = build_problem(cfg, X, y)
    if method == "pk":
        res = fit_pk(problem)
    elif method == "l2":
        res = fit_l2(problem)
    else:
        if cfg.lambda_.policy != "fixed":
            raise ValidationError("lambda: KO-mode fitting needs policy 'fixed' with a value")
        res = fit_ko_mode(problem)
    result = _fit_result(res)
    try:
        result["asymptotic_cov"] = asymptotic_covariance(problem, res.theta_hat, res.sigma2_hat,
                                                         result=res).tolist()
    except PkcalError as exc:
        result["asymptotic_cov_error"] = str(exc)
    return {"report.json": _report(cfg, f"fit --method {method}", result), **_fit_outputs(problem, res, cfg)}


def cmd_bayes(cfg, X, y, variant, threads=1):
    problem = build_problem(cfg, X, y)
    freq = fit_pk(problem)
    s2 = freq.sigma2_hat if cfg.bayes.noise == "plugin" else None
    spec = PosteriorSpec(variant, freq.lambda_used, mcmc=_mcmc(cfg), seed=cfg.seed, noise_variance=s2,
                         ogp_literal=cfg.bayes.ogp_literal)
    post = sample_posterior(spec, problem, threads=threads)
    cr = credible_region(post, cfg.bayes.level)
    result = {"variant": variant, "lambda_used": freq.lambda_used, "noise_variance": s2,
              "frequentist_theta": freq.theta_hat, "mode": post.mode, "laplace_cov": post.laplace_cov,
              "credible_region": cr.to_dict(), "split_rhat": post.split_rhat, "ess": post.ess,
              "acceptance_rates": [c.acceptance_rate for c in post.chains],
              "chains": post.trace["chains"]}
    buf = io.StringIO()
    write_chain_table(buf, post)
    return {"report.json": _report(cfg, f"bayes --variant {variant}", result), "mcmc_draws.csv": buf.getvalue()}


def cmd_compare(cfg, X, y):
    problem = build_problem(cfg, X, y)
    l2 = fit_l2(problem)
    pk = fit_pk(problem, l2)
    ko = fit_ko_mode(problem, pk.lambda_used, l2)
    rows = [[r.method, r.lambda_used, r.objective, r.sigma2_hat, *r.theta_hat] for r in (pk, l2, ko)]
    header = ["method", "lambda", "objective", "sigma2"] + [f"theta_{i + 1}" for i in range(problem.model.q)]
    result = {"pk": _fit_result(pk), "l2": _fit_result(l2), "ko": _fit_result(ko),
              "note": "KO-mode uses the lambda selected for the projected-kernel fit"}
    return {"report.json": _report(cfg, "compare", result), "compare.csv": _csv(header, rows),
            **_fit_outputs(problem, pk, cfg)}


def _study_settings(cfg, threads):
    s = cfg.study
    return StudySettings(kernel=_kernel(cfg), quad_level=cfg.quadrature.level, lambda_policy=_policy(cfg),
                         optimizer=_optimizer(cfg), mcmc=_mcmc(cfg), ko_lambdas=tuple(s.ko_lambdas),
                         credible_level=cfg.bayes.level, bayes_noise=cfg.bayes.noise, workers=threads)


def _scenario(cfg):
    s = cfg.study
    sc = scenario(s.scenario, n=s.n, replications=s.replications, sigma=s.sigma, seed=cfg.seed)
    sc = replace(sc, noise=s.noise)
    if len(cfg.kernel.lengthscales) != sc.domain.dim:
        raise ValidationError(f"kernel.lengthscales: scenario {sc.name} needs {sc.domain.dim} entries")
    return sc


def cmd_mc_study(cfg, threads=1):
    rep = mc_study(_scenario(cfg), cfg.study.methods, _study_settings(cfg, threads))
    rows = rep.table_rows()
    q = len(rep.theta_star)
    files = {"report.json": _report(cfg, "mc-study", rep.to_dict(include_runtime=False)),
             "replications.csv": _csv(["index", "method"] + [f"theta_{i + 1}" for i in range(q)],
                                      [[r["index"], r["method"]] + [r[f"theta_{i + 1}"] for i in range(q)]
                                       for r in rows])}
    if rep.ko_sweep:
        t = rep.ko_sweep["table"]
        files["ko_sweep.csv"] = _csv(["lambda", "estimator"] + [f"median_theta_{i + 1}" for i in range(q)],
                                     [[float(k), e, *t[k][f"{e}_median"]] for k in t for e in ("ko", "pk")])
    return files


def cmd_rate_study(cfg, threads=1):
    s = cfg.study
    sc = _scenario(cfg)
    rep = rate_study(sc, s.n_grid, s.replications, _study_settings(cfg, threads),
                     None if s.lambda_schedule is None else tuple(s.lambda_schedule))
    result = rep.to_dict(include_runtime=False)
    try:
        result["theoretical_slope"] = theoretical_rate(cfg.kernel.family, sc.domain.dim)
    except ValidationError:
        result["theoretical_slope"] = None
    ec = rep.error_curve
    return {"report.json": _report(cfg, "rate-study", result),
            "error_curve.csv": _csv(["n", "median_error"], zip(ec["n"], ec["median_error"]))}


# ---------------------------------------------------------------------------
# output commit

def commit_outputs(out_dir, files: dict):
    """Stage every file under a temporary name, then rename them all into place."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            tmp = out / f".{name}.tmp-{os.getpid()}"
            tmp.write_text(text)
            staged.append((tmp, out / name))
    except OSError:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def run(cfg: RunConfig, command: str, method: str | None = None, data: str | None = None,
        out: str | None = None, threads: int = 1) -> dict:
    """Execute one command and write its outputs; returns the files written."""
    data = data or cfg.data
    out = out or cfg.out or "."
    if command in ("fit", "bayes", "compare"):
        if data is None:
            raise DataError("this command needs a data file (--data or the config field 'data')")
        X, y = read_data(data, len(cfg.domain.bounds))
    if command == "fit":
        method = method or (cfg.method if cfg.method in FIT_METHODS else "pk")
        files = cmd_fit(cfg, X, y, method)
    elif command == "bayes":
        variant = method or (cfg.method.split("-")[1] if cfg.method.startswith("bayes-") else "pk")
        files = cmd_bayes(cfg, X, y, variant, threads)
    elif command == "compare":
        files = cmd_compare(cfg, X, y)
    elif command == "mc-study":
        files = cmd_mc_study(cfg, threads)
    elif command == "rate-study":
        files = cmd_rate_study(cfg, threads)
    else:
        raise ValidationError(f"unknown command {command!r}")
    commit_outputs(out, files)
    return files


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--data", help="CSV with header x_1..x_d,y (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="parallel workers for chains and replications")
    p = argparse.ArgumentParser(prog="pkcal", description="Calibrate computer models with projected kernels.")
    p.add_argument("--version", action="version", version=f"pkcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    f = sub.add_parser("fit", parents=[common], help="point estimate of theta")
    f.add_argument("--method", choices=FIT_METHODS)
    b = sub.add_parser("bayes", parents=[common], help="posterior sampling for theta")
    b.add_argument("--variant", choices=("pk", "ko", "ogp"))
    sub.add_parser("compare", parents=[common], help="PK, L2 and KO-mode on the same data")
    sub.add_parser("mc-study", parents=[common], help="Monte-Carlo study on a shipped scenario")
    sub.add_parser("rate-study", parents=[common], help="prediction error against sample size")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ValidationError("--seed must lie in [0, 2^64)")
            cfg.seed = args.seed
        method = getattr(args, "method", None) or getattr(args, "variant", None)
        files = run(cfg, args.command, method, args.data, args.out, args.threads)
    except PkcalError as exc:
        print(json.dumps({"error": exc.category, "exit_code": exc.exit_code, "message": str(exc)}),
              file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"status": "ok", "files": sorted(files)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
