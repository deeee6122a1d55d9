"""Command-line pipeline: train -> gradcache -> [project] -> stest/relatif -> influence -> evaluate.

Artifacts are written to ``out_dir`` as ``{stem}.{kind}.{hash8}.bin|json``,
where ``hash8`` is the first eight hex digits of the trained parameter hash.
Every JSON artifact embeds the parameter hash and the full resolved config;
keys are sorted and no timestamps are written, so reruns are byte-identical.

Exit codes: 0 success, 2 configuration or input error, 3 missing or stale
upstream artifact, 4 solver or training failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .config import METHODS, RunConfig, build_config
from .data import Dataset, load_dataset
from .errors import (CapExceededError, ConfigError, ConvergenceError, DataFormatError,
                     DimensionError, SolverError, StaleCacheError)
from .evaluation import approximation_metrics, influence_set_stats, knn_overlap, loo_many
from .gradcache import _atomic_write, build_grad_cache, load_grad_cache, save_grad_cache
from .influence import (DenominatorCache, InfluenceScores, influence_all, l_relatif,
                        load_denominators, precompute_denominators, save_denominators,
                        theta_relatif, top_k)
from .models import ParamVector, grad, objective, objective_grad, predict_proba
from .projection import (fit_pca, load_projection, project_cache, projected_hessian,
                         projected_influence, save_projection)
from .solvers import CurvatureOperator, s_test
from .training import train

log = logging.getLogger("influx")

COMMANDS = ("train", "gradcache", "stest", "influence", "relatif", "project", "evaluate", "loo")
EXIT_CONFIG, EXIT_STALE, EXIT_SOLVER = 2, 3, 4


# -- argument parsing -----------------------------------------------------------

def _flags(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    g = p.add_argument_group("data")
    g.add_argument("--train-data", default=S, help="training set: CSV path or IDX 'images+labels'")
    g.add_argument("--train-format", choices=("csv", "idx"), default=S)
    g.add_argument("--test-data", default=S, help="test set (defaults to the training set)")
    g.add_argument("--test-format", choices=("csv", "idx"), default=S)
    g.add_argument("--n-classes", type=int, default=S)
    g = p.add_argument_group("model and training")
    g.add_argument("--family", choices=("softmax-regression", "mlp-1hidden"), default=S)
    g.add_argument("--hidden", type=int, default=S, help="hidden width for mlp-1hidden")
    g.add_argument("--no-bias", dest="bias", action="store_const", const=False, default=S)
    g.add_argument("--l2", type=float, default=S, help="ridge coefficient of the objective")
    g.add_argument("--optimizer", choices=("newton", "lbfgs", "gd"), default=S)
    g.add_argument("--max-iters", type=int, default=S)
    g.add_argument("--grad-tol", type=float, default=S)
    g.add_argument("--seed", type=int, default=S)
    g = p.add_argument_group("inverse curvature")
    g.add_argument("--solver", choices=("direct", "cg", "lissa"), default=S)
    g.add_argument("--damping", type=float, default=S, help="lambda added to the curvature")
    g.add_argument("--cg-tol", type=float, default=S, help="relative residual target")
    g.add_argument("--lissa-iters", type=int, default=S)
    g.add_argument("--lissa-scale", default=S, help="'auto' or a positive scale")
    g.add_argument("--basis", choices=("hessian", "fisher"), default=S)
    g = p.add_argument_group("influence")
    g.add_argument("--test-idx", type=int, default=S, help="row of the test set to explain")
    g.add_argument("--method", choices=METHODS, default=S)
    g.add_argument("--k", type=int, default=S, help="explanation set size")
    g.add_argument("--sign", choices=("pos", "neg", "abs"), default=S)
    g.add_argument("--projected", action="store_const", const=True, default=S,
                   help="score in the PCA-projected parameter space")
    g.add_argument("--projection", default=S, metavar="FILE", help="projection file to use")
    g.add_argument("--q", type=int, default=S, help="projection dimension")
    g.add_argument("--pca-batch", type=int, default=S)
    g = p.add_argument_group("evaluation")
    g.add_argument("--loo-count", type=int, default=S, help="number of leave-one-out retrainings")
    g.add_argument("--loo-select", choices=("top", "random"), default=S)
    g.add_argument("--ndcg-k", type=int, default=S)
    g.add_argument("--n-eval-tests", type=int, default=S, help="test points for set statistics")
    g.add_argument("--csv", dest="emit_csv", action="store_const", const=True, default=S,
                   help="also write a per-point CSV")
    g = p.add_argument_group("output")
    g.add_argument("--out-dir", default=S)
    g.add_argument("--stem", default=S)
    p.add_argument("--config", dest="config_file", default=None, metavar="FILE",
                   help="TOML file of key = value settings; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="influx",
        description="Influence and relative influence for softmax regression and small MLPs.",
        epilog="INFLUX_THREADS caps worker parallelism. Exit codes: 2 config, 3 stale, 4 solver.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "train": "fit the model and write the parameter artifact",
        "gradcache": "write per-example training gradients",
        "stest": "inverse-curvature product for one test point",
        "influence": "rank training points for one test point",
        "relatif": "precompute theta- and loss-RelatIF denominators",
        "project": "fit a gradient-PCA projection and report its fidelity",
        "evaluate": "metrics, leave-one-out checks, set statistics, k-NN overlap",
        "loo": "leave-one-out retraining against predicted influence",
    }
    for name in COMMANDS:
        _flags(sub.add_parser(name, help=helps[name], description=helps[name]))
    return parser


# -- artifact helpers -----------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, bytes):
        return obj.hex()
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _path(cfg: RunConfig, kind: str, h8: str, ext: str) -> str:
    return os.path.join(cfg.out_dir, f"{cfg.stem}.{kind}.{h8}.{ext}")


def _write_json(path: str, obj) -> str:
    _atomic_write(path, [dumps(obj).encode()])
    return path


class _Ctx:
    """Lazily loaded data and upstream artifacts for one invocation."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._train = self._test = None
        self._theta = self._cache = None

    @property
    def train(self) -> Dataset:
        if self._train is None:
            if self.cfg.train_data is None:
                raise ConfigError("train_data: no training set given", "train_data")
            self._train = load_dataset(self.cfg.train_data, self.cfg.train_format,
                                       self.cfg.n_classes)
        return self._train

    @property
    def test(self) -> Dataset:
        if self._test is None:
            if self.cfg.test_data is None:
                self._test = self.train
            else:
                self._test = load_dataset(self.cfg.test_data, self.cfg.test_format,
                                          self.cfg.n_classes or self.train.c)
        return self._test

    def spec(self):
        return self.cfg.model_spec(self.train.d, max(self.train.c, self.cfg.n_classes or 0))

    @property
    def theta(self) -> ParamVector:
        if self._theta is None:
            want = _clean(self.cfg.training_key())
            pattern = os.path.join(glob.escape(self.cfg.out_dir), f"{glob.escape(self.cfg.stem)}.params.*.json")
            for path in sorted(glob.glob(pattern)):
                with open(path) as fh:
                    doc = json.load(fh)
                if {k: doc["config"].get(k) for k in want} == want:
                    theta = ParamVector(np.array(doc["values"], dtype=np.float64), self.spec())
                    if theta.params_hash != doc["params_hash"]:
                        raise StaleCacheError(f"{path}: parameter hash does not match its values")
                    self._theta = theta
                    break
            else:
                raise StaleCacheError("params missing or stale; run `influx train` first")
        return self._theta

    @property
    def h8(self) -> str:
        return self.theta.params_hash[:8]

    @property
    def cache(self):
        if self._cache is None:
            try:
                h8 = self.h8
            except StaleCacheError as exc:
                raise StaleCacheError(f"gradcache missing or stale: {exc}") from None
            path = _path(self.cfg, "gradcache", h8, "bin")
            if not os.path.exists(path):
                raise StaleCacheError(f"gradcache missing or stale: {path} not found; "
                                      "run `influx gradcache` first")
            cache = load_grad_cache(path)
            try:
                cache.check(self.theta.digest)
            except StaleCacheError as exc:
                raise StaleCacheError(f"gradcache missing or stale: {exc}") from None
            self._cache = cache
        return self._cache

    def test_point(self, idx=None):
        idx = self.cfg.test_idx if idx is None else idx
        if not 0 <= idx < self.test.n:
            raise ConfigError(f"test_idx: {idx} out of range for {self.test.n} test points",
                              "test_idx")
        return self.test.example(idx)

    def operator(self, dense=None) -> CurvatureOperator:
        cfg = self.cfg
        if dense is None:
            dense = cfg.solver == "direct"
        return CurvatureOperator.from_model(self.theta, self.train, cfg.resolved_damping,
                                            cfg.basis, dense=dense)

    def header(self, kind: str) -> dict:
        return {"kind": kind, "params_hash": self.theta.params_hash, "config": self.cfg.to_dict()}


# -- scoring ----------------------------------------------------------------------

def _denominators(ctx: _Ctx, variant: str, op: CurvatureOperator) -> DenominatorCache:
    cfg = ctx.cfg
    path = _path(cfg, f"denom-{variant}-{cfg.basis}", ctx.h8, "bin")
    if os.path.exists(path):
        dc = load_denominators(path)
        if (dc.params_hash == ctx.theta.digest and dc.damping == op.damping
                and dc.basis == op.basis and dc.values.shape[0] == ctx.cache.n):
            return dc
    dc = precompute_denominators(ctx.cache, op, variant, cfg.solver, opts=cfg.solver_options())
    save_denominators(dc, path)
    return dc


def _projection_path(ctx: _Ctx) -> str:
    return ctx.cfg.projection or _path(ctx.cfg, f"projection-q{ctx.cfg.q}", ctx.h8, "bin")


def _projected_scores(ctx: _Ctx, test_idx: int, method: str) -> InfluenceScores:
    cfg = ctx.cfg
    path = _projection_path(ctx)
    if not os.path.exists(path):
        raise StaleCacheError(f"projection missing: {path}; run `influx project` first")
    proj = load_projection(path)
    if proj.p != ctx.cache.p:
        raise StaleCacheError(f"projection has P={proj.p}, model has P={ctx.cache.p}")
    op = ctx.operator(dense=False)
    pc = projected_hessian(proj, op, cfg.resolved_damping, ctx.theta.digest)
    GA = project_cache(proj, ctx.cache)
    x, y = ctx.test_point(test_idx)
    sc = projected_influence(proj, pc, grad(ctx.theta, (x, y)), ctx.cache, test_idx, GA)
    sc = InfluenceScores(sc.scores, test_idx, "if", "projected-direct", pc.damping, cfg.basis,
                         sc.params_hash, report=sc.report)
    if method == "if":
        return sc
    M = pc.h_omega + pc.damping * np.eye(proj.q)
    X = np.linalg.solve(M, GA.T).T
    degenerate = ~np.any(np.asarray(ctx.cache.grads) != 0.0, axis=1)
    if method == "theta-relatif":
        vals = np.linalg.norm(X @ proj.a, axis=1)
        dc = DenominatorCache("theta", vals, degenerate, pc.damping, cfg.basis, ctx.theta.digest)
        return theta_relatif(sc, dc)
    vals = np.sqrt(np.maximum(np.einsum("ij,ij->i", GA, X), 0.0))
    dc = DenominatorCache("ell", vals, degenerate, pc.damping, cfg.basis, ctx.theta.digest)
    return l_relatif(sc, dc)


def _scores(ctx: _Ctx, test_idx: int, method: str, op=None, projected=None) -> InfluenceScores:
    cfg = ctx.cfg
    if cfg.projected if projected is None else projected:
        return _projected_scores(ctx, test_idx, method)
    op = op or ctx.operator()
    s = s_test(ctx.theta, ctx.train, ctx.test_point(test_idx), cfg.solver, op=op,
               test_id=test_idx, opts=cfg.solver_options())
    sc = influence_all(s, ctx.cache)
    if method == "if":
        return sc
    if method == "theta-relatif":
        return theta_relatif(sc, _denominators(ctx, "theta", op))
    return l_relatif(sc, _denominators(ctx, "ell", op))


def _report_of(sc: InfluenceScores, cfg: RunConfig) -> dict:
    rep = sc.report.to_dict() if sc.report is not None else {}
    rep.pop("method", None)
    return {**rep, "lambda": sc.damping, "basis": sc.basis, "solver": sc.solver or cfg.solver}


# -- commands ---------------------------------------------------------------------

def cmd_train(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    spec = ctx.spec()
    theta = train(ctx.train, spec, cfg.train_config())
    ctx._theta = theta
    doc = {
        **ctx.header("params"),
        "spec": spec.to_dict(),
        "objective": objective(theta, ctx.train),
        "grad_norm": float(np.linalg.norm(objective_grad(theta, ctx.train))),
        "n_train": ctx.train.n,
        "values": theta.values,
    }
    _write_json(_path(cfg, "params", ctx.h8, "json"), doc)
    return {k: v for k, v in doc.items() if k != "values"}


def cmd_gradcache(ctx: _Ctx) -> dict:
    cache = build_grad_cache(ctx.theta, ctx.train, ctx.cfg.grad_tol)
    path = _path(ctx.cfg, "gradcache", ctx.h8, "bin")
    save_grad_cache(cache, path)
    ctx._cache = cache
    return {**ctx.header("gradcache"), "n": cache.n, "p": cache.p,
            "file": os.path.basename(path)}


def cmd_stest(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    op = ctx.operator()
    s = s_test(ctx.theta, ctx.train, ctx.test_point(), cfg.solver, op=op,
               test_id=cfg.test_idx, opts=cfg.solver_options())
    rep = s.report.to_dict()
    rep.pop("method")
    doc = {**ctx.header("stest"), **rep, "test_id": cfg.test_idx, "lambda": s.damping,
           "basis": s.basis, "solver": cfg.solver, "values": s.values}
    _write_json(_path(cfg, f"stest-t{cfg.test_idx}", ctx.h8, "json"), doc)
    return {k: v for k, v in doc.items() if k != "values"}


def _entries(ctx: _Ctx, sc: InfluenceScores, k: int, sign: str) -> list:
    ex = top_k(sc, k, sign)
    p = predict_proba(ctx.theta, ctx.train.features[ex.indices])
    pt = p[np.arange(ex.k), ctx.train.labels[ex.indices]]
    deg = sc.degenerate if sc.degenerate is not None else np.zeros(len(sc), dtype=bool)
    return [{"idx": int(i), "score": float(s), "prob_of_selected_class": float(q),
             "degenerate": bool(deg[i])} for i, s, q in zip(ex.indices, ex.scores, pt)]


def cmd_influence(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    ctx.cache  # noqa: B018 - fail fast when the gradient cache is absent
    sc = _scores(ctx, cfg.test_idx, cfg.method)
    k = min(cfg.k, len(sc))
    doc = {
        **ctx.header("influence"),
        "test_id": cfg.test_idx,
        "method": cfg.method,
        "projected": cfg.projected,
        "sign": cfg.sign,
        **_report_of(sc, cfg),
        "entries": _entries(ctx, sc, k, cfg.sign),
    }
    kind = f"influence-{cfg.method}-t{cfg.test_idx}" + ("-proj" if cfg.projected else "")
    _write_json(_path(cfg, kind, ctx.h8, "json"), doc)
    return doc


def cmd_relatif(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    op = ctx.operator()
    out = {**ctx.header("relatif"), "lambda": op.damping, "basis": op.basis, "solver": cfg.solver}
    for variant in ("theta", "ell"):
        dc = _denominators(ctx, variant, op)
        its = [r.iterations for r in dc.reports] or [0]
        res = [r.residual_norm for r in dc.reports] or [0.0]
        out[variant] = {
            "file": os.path.basename(_path(cfg, f"denom-{variant}-{cfg.basis}", ctx.h8, "bin")),
            "n_degenerate": int(dc.degenerate.sum()),
            "min": float(dc.values.min()),
            "max": float(dc.values.max()),
            "max_iterations": int(max(its)),
            "max_residual": float(max(res)),
        }
    _write_json(_path(cfg, "relatif", ctx.h8, "json"), out)
    return out


def _ks(cfg, n):
    return (min(cfg.ndcg_k, n),)


def cmd_project(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    proj = fit_pca(ctx.cache, cfg.q, batch_size=cfg.pca_batch)
    path = _projection_path(ctx)
    save_projection(proj, path)
    doc = {**ctx.header("project"), "q": proj.q, "p": proj.p, "passes": proj.passes,
           "explained_variance": proj.explained_variance, "eigvals": proj.eigvals,
           "file": os.path.basename(path)}
    # fidelity against the configured unprojected route, for the chosen test point
    exact = _scores(ctx, cfg.test_idx, "if", projected=False)
    approx = _scores(ctx, cfg.test_idx, "if", projected=True)
    doc["test_id"] = cfg.test_idx
    doc["reference"] = _report_of(exact, cfg)
    doc["metrics"] = approximation_metrics(approx, exact, _ks(cfg, len(exact))).to_dict()
    _write_json(_path(cfg, f"project-q{proj.q}", ctx.h8, "json"), doc)
    return doc


def _loo_indices(cfg: RunConfig, scores: np.ndarray) -> np.ndarray:
    n = scores.shape[0]
    m = min(cfg.loo_count, n)
    if cfg.loo_select == "random":
        return np.sort(np.random.default_rng(cfg.seed).choice(n, size=m, replace=False))
    return top_k(scores, m, "abs").indices


def _loo_block(ctx: _Ctx, sc: InfluenceScores):
    cfg = ctx.cfg
    idx = _loo_indices(cfg, sc.scores)
    res = loo_many(ctx.train, ctx.theta.spec, cfg.train_config(), idx, ctx.test_point(),
                   sc, ctx.theta)
    pred = np.array([r.predicted_delta for r in res])
    act = np.array([r.delta_test_loss for r in res])
    ok = len(res) > 1 and np.ptp(pred) > 0 and np.ptp(act) > 0
    pearson = float(np.corrcoef(pred, act)[0, 1]) if ok else None
    return res, pearson


def cmd_loo(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    ctx.cache  # noqa: B018
    sc = _scores(ctx, cfg.test_idx, "if")
    res, pearson = _loo_block(ctx, sc)
    doc = {**ctx.header("loo"), "test_id": cfg.test_idx, **_report_of(sc, cfg),
           "loo": [r.to_dict() for r in res], "pearson_predicted_actual": pearson}
    _write_json(_path(cfg, f"loo-t{cfg.test_idx}", ctx.h8, "json"), doc)
    return doc


def cmd_evaluate(ctx: _Ctx) -> dict:
    cfg = ctx.cfg
    ctx.cache  # noqa: B018
    exact_op = ctx.operator(dense=True)
    direct = RunConfig(**{**ctx.cfg.__dict__, "solver": "direct", "projected": False})
    ref = _Ctx(direct)
    ref._train, ref._test, ref._theta, ref._cache = ctx._train, ctx._test, ctx._theta, ctx._cache
    exact = _scores(ref, cfg.test_idx, "if", op=exact_op)
    approx = _scores(ctx, cfg.test_idx, "if")
    metrics = approximation_metrics(approx, exact, _ks(cfg, len(exact)))
    res, pearson = _loo_block(ctx, approx)

    n_tests = min(cfg.n_eval_tests, ctx.test.n)
    k = min(cfg.k, ctx.train.n)
    sets = [top_k(_scores(ctx, t, cfg.method), k, cfg.sign, test_id=t) for t in range(n_tests)]
    st = influence_set_stats(sets, ctx.theta, ctx.train)
    chosen = top_k(_scores(ctx, cfg.test_idx, cfg.method), k, cfg.sign, test_id=cfg.test_idx)
    nn, overlap = knn_overlap(ctx.train, ctx.test_point()[0], k, chosen)

    doc = {
        **ctx.header("evaluate"),
        "test_id": cfg.test_idx,
        "method": cfg.method,
        "approx": _report_of(approx, cfg),
        "reference": _report_of(exact, direct),
        "metrics": metrics.to_dict(),
        "loo": [r.to_dict() for r in res],
        "loo_pearson": pearson,
        "set_stats": {**st.__dict__, "n_tests": n_tests, "k": k},
        "knn_overlap": {"k": k, "overlap": overlap, "knn": nn, "explanation": chosen.indices},
    }
    kind = f"evaluate-{cfg.method}-t{cfg.test_idx}"
    _write_json(_path(cfg, kind, ctx.h8, "json"), doc)
    if cfg.emit_csv:
        actual = {r.removed_idx: r.delta_test_loss for r in res}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["idx", "exact", "approx", "predicted_delta", "actual_delta"])
        n = ctx.train.n
        for i in range(n):
            a = actual.get(i)
            w.writerow([i, repr(float(exact.scores[i])), repr(float(approx.scores[i])),
                        repr(float(approx.scores[i]) / n), "" if a is None else repr(a)])
        _atomic_write(_path(cfg, kind, ctx.h8, "csv"), [buf.getvalue().encode()])
    return doc


_RUN = {
    "train": cmd_train, "gradcache": cmd_gradcache, "stest": cmd_stest,
    "influence": cmd_influence, "relatif": cmd_relatif, "project": cmd_project,
    "evaluate": cmd_evaluate, "loo": cmd_loo,
}


def run(command: str, cfg: RunConfig) -> dict:
    """Execute one pipeline stage; returns the JSON document it wrote."""
    if command not in _RUN:
        raise ConfigError(f"command: unknown command {command!r}", "command")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return _RUN[command](_Ctx(cfg))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config_file", "verbose")}
    try:
        cfg = build_config(args.config_file, overrides)
        doc = run(args.command, cfg)
    except (ConfigError, DataFormatError, DimensionError) as exc:
        print(f"influx: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StaleCacheError as exc:
        print(f"influx: error: {exc}", file=sys.stderr)
        return EXIT_STALE
    except (SolverError, ConvergenceError, CapExceededError) as exc:
        print(f"influx: error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    sys.stdout.write(dumps({k: v for k, v in doc.items() if k != "config"}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
