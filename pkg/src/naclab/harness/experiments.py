"""Declarative experiment specs, multi-seed orchestration and CSV output.

A spec is one JSON document::

    {
      "kind": "critic-convergence",          # see KINDS
      "instance": "gallery:tabular-2x2",      # or a path, or an inline instance object
      "seeds": [0, 1, 2],
      "critic": {
        "n": "min",                           # or an integer
        "num_iters": 10000,
        "gamma_c": 0.5,                       # defaults to the instance's gamma_c
        "w0": "zero",                         # or a list
        "schedule": {"kind": "constant", "alpha": "compliant"},
        "theorem1_mode": false
      },
      "actor": {"T": 50, "beta": null, "eval_rule": "all-iterates", "theorem2": true},
      "checkpoints": [10, 1000],
      "alphas": [0.1, 0.05],                  # stepsize-sweep only
      "bound_ks": [100, 1000],                # bound-table only
      "sweep": {"epsilons": [0.4, 0.2], "T_grid": [2, 4], "K_grid": [16, 32],
                "alpha_scale": 0.5, "alpha_cap": 0.1},
      "divergence_threshold": 1e8,
      "mixing_cap": 1000000,
      "thin": null,
      "output_dir": "my-run"
    }

Every sub-config is validated before any sampling starts. Outputs are
per-seed CSVs, an aggregate CSV (mean and standard error across seeds) and a
``manifest.json`` holding derived constants; timestamps appear only in the
manifest, so CSV bodies are byte-identical across repeated runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import actor as actor_mod
from ..actor import ActorConfig, run_exact_npg, run_nac, run_qnpg, theorem2_bound, xi_proxy
from ..critic import (
    DIVERGENCE_THRESHOLD,
    CriticConfig,
    CriticProblem,
    StepSchedule,
    check_theorem1_gate,
    compliant_alpha,
    run_critic,
    theorem1_bound,
    theorem3_bounds,
)
from ..errors import BoundInapplicable, ConfigurationError, NaclabError
from ..formats import Instance, load_instance, parse_instance
from ..mdp import FeatureMap
from ..sampler import MIXING_CAP, MixingProfile, generate
from . import gallery

KINDS = (
    "critic-convergence",
    "stepsize-sweep",
    "deadly-triad",
    "nac-gap",
    "npg-exact",
    "qnpg",
    "bound-table",
)
SAMPLING_KINDS = {"critic-convergence", "stepsize-sweep", "deadly-triad", "nac-gap"}
DEFAULT_OUT = "naclab_out"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_ASSUMPTION = 3
EXIT_EXPECTED_DIVERGENCE = 4


@dataclass
class ExperimentSpec:
    kind: str
    instance: Instance
    instance_ref: str
    seeds: list
    critic: dict = field(default_factory=dict)
    actor: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    bound_ks: list = field(default_factory=list)
    sweep: dict = field(default_factory=dict)
    threshold: float = DIVERGENCE_THRESHOLD
    mixing_cap: int = MIXING_CAP
    thin: int | None = None
    output_dir: str = ""
    raw: dict = field(default_factory=dict)

    def problem(self) -> CriticProblem:
        inst = self.instance
        target = inst.target if inst.target is not None else inst.behavior.table
        problem = CriticProblem(inst.mdp, inst.features, target, inst.behavior)
        problem.__dict__["mixing"] = MixingProfile(inst.mdp, inst.behavior, cap=self.mixing_cap)
        return problem


def _fail(msg: str):
    raise ConfigurationError(msg)


def _resolve_instance(ref, base_dir: Path) -> tuple[Instance, str]:
    if isinstance(ref, dict):
        return parse_instance(json.dumps(ref), source="<inline instance>"), "inline"
    if not isinstance(ref, str) or not ref:
        _fail("'instance' must be a gallery reference, a file path or an inline object")
    if ref.startswith("gallery:"):
        return gallery.load(ref.split(":", 1)[1]), ref
    path = Path(ref)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        _fail(f"instance file {path} does not exist")
    return load_instance(path), str(path)


def _check_int(value, name, low=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < low:
        _fail(f"'{name}' must be an integer >= {low}")
    return value


def parse_spec(doc, base_dir: Path | str = ".") -> ExperimentSpec:
    """Validate a spec document (dict or JSON text) and resolve its instance."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            _fail(f"spec is not valid JSON (line {exc.lineno}): {exc.msg}")
    if not isinstance(doc, dict):
        _fail("spec must be a JSON object")
    known = {
        "kind", "instance", "seeds", "critic", "actor", "checkpoints", "alphas", "bound_ks",
        "sweep", "divergence_threshold", "mixing_cap", "thin", "output_dir", "notes",
    }
    unknown = sorted(set(doc) - known)
    if unknown:
        _fail(f"unknown spec keys: {', '.join(unknown)}")
    kind = doc.get("kind")
    if kind not in KINDS:
        _fail(f"'kind' must be one of {', '.join(KINDS)}")
    if "instance" not in doc:
        _fail("spec needs an 'instance'")
    instance, ref = _resolve_instance(doc["instance"], Path(base_dir))
    if instance.features is None:
        instance.features = FeatureMap.tabular(instance.mdp.num_states, instance.mdp.num_actions)
    instance.features.check_compatible(instance.mdp)
    if instance.behavior is None:
        _fail("instance needs a 'behavior_policy'")
    seeds = doc.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        _fail("'seeds' must be a non-empty list of integers")
    for s in seeds:
        _check_int(s, "seeds[]")
    if len(set(seeds)) != len(seeds):
        _fail("'seeds' contains duplicates")
    thin = doc.get("thin")
    if thin is not None:
        _check_int(thin, "thin", 1)
    spec = ExperimentSpec(
        kind=kind,
        instance=instance,
        instance_ref=ref,
        seeds=sorted(seeds),
        critic=dict(doc.get("critic", {})),
        actor=dict(doc.get("actor", {})),
        checkpoints=[_check_int(c, "checkpoints[]") for c in doc.get("checkpoints", [])],
        alphas=list(doc.get("alphas", [])),
        bound_ks=[_check_int(k, "bound_ks[]") for k in doc.get("bound_ks", [])],
        sweep=dict(doc.get("sweep", {})),
        threshold=float(doc.get("divergence_threshold", DIVERGENCE_THRESHOLD)),
        mixing_cap=_check_int(doc.get("mixing_cap", MIXING_CAP), "mixing_cap", 1),
        thin=thin,
        output_dir=str(doc.get("output_dir", "")),
        raw=doc,
    )
    if not spec.threshold > 0:
        _fail("'divergence_threshold' must be positive")
    _validate_subconfigs(spec)
    return spec


def _validate_subconfigs(spec: ExperimentSpec) -> None:
    needs_critic = spec.kind in {"critic-convergence", "stepsize-sweep", "deadly-triad", "nac-gap", "bound-table"}
    if needs_critic and not spec.critic and spec.kind != "deadly-triad":
        _fail(f"kind '{spec.kind}' needs a 'critic' block")
    if spec.critic or spec.kind == "deadly-triad":
        build_critic_config(spec, spec.problem())
    if spec.kind in {"nac-gap", "npg-exact", "qnpg"}:
        if not spec.actor:
            _fail(f"kind '{spec.kind}' needs an 'actor' block")
    if spec.actor:
        build_actor_config(spec, spec.problem())
    if spec.kind == "stepsize-sweep":
        if not spec.alphas or not all(isinstance(a, (int, float)) and a > 0 for a in spec.alphas):
            _fail("'alphas' must be a non-empty list of positive step sizes")
    if spec.kind == "bound-table" and not spec.bound_ks:
        _fail("'bound_ks' must list the iterations at which to evaluate the bound")
    if spec.sweep:
        for key in ("epsilons", "T_grid", "K_grid"):
            vals = spec.sweep.get(key)
            if not isinstance(vals, list) or not vals or not all(
                isinstance(v, (int, float)) and v > 0 for v in vals
            ):
                _fail(f"'sweep.{key}' must be a non-empty list of positive numbers")
        for key in ("T_grid", "K_grid"):
            if not all(isinstance(v, int) for v in spec.sweep[key]):
                _fail(f"'sweep.{key}' must hold integers")
        for key in ("alpha_scale", "alpha_cap"):
            value = spec.sweep.get(key, 0.5)
            if not isinstance(value, (int, float)) or not value > 0:
                _fail(f"'sweep.{key}' must be positive")
        unknown = set(spec.sweep) - {"epsilons", "T_grid", "K_grid", "alpha_scale", "alpha_cap"}
        if unknown:
            _fail(f"unknown sweep key(s): {', '.join(sorted(unknown))}")


def _resolve_n(spec: ExperimentSpec, problem: CriticProblem, gamma_c: float, value) -> int:
    if value == "min":
        return problem.n_min(gamma_c)
    return _check_int(value, "critic.n", 1)


def build_critic_config(
    spec: ExperimentSpec, problem: CriticProblem, n=None, alpha=None, zeta=None
) -> CriticConfig:
    c = spec.critic
    demo = spec.instance.extra.get("demo", {})
    gamma_c = c.get("gamma_c", spec.instance.gamma_c)
    if gamma_c is None:
        _fail("'critic.gamma_c' is required when the instance does not define one")
    n = _resolve_n(spec, problem, gamma_c, c.get("n", "min") if n is None else n)
    K = _check_int(c.get("num_iters", demo.get("num_iters", 1000)), "critic.num_iters")
    d = problem.features.dim
    w0 = c.get("w0", demo.get("w0", "zero"))
    if w0 == "zero":
        w0 = np.zeros(d)
    elif not isinstance(w0, list) or len(w0) != d:
        _fail(f"'critic.w0' must be \"zero\" or a list of {d} numbers")
    sched = dict(c.get("schedule", {"kind": "constant", "alpha": demo.get("alpha", "compliant")}))
    if alpha is not None:
        sched["alpha"] = alpha
    if sched.get("alpha") == "compliant":
        if sched.get("kind", "constant") != "constant":
            _fail("a compliant step size is defined only for constant schedules")
        sched["alpha"] = compliant_alpha(problem, n, gamma_c, zeta=zeta)
    try:
        schedule = StepSchedule(
            sched.get("kind", "constant"), float(sched["alpha"]),
            float(sched.get("eta", 1.0)), float(sched.get("h", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        _fail(f"invalid 'critic.schedule': {exc}")
    return CriticConfig(
        n=n, schedule=schedule, num_iters=K, w0=np.asarray(w0, dtype=float), gamma_c=gamma_c,
        theorem1_mode=bool(c.get("theorem1_mode", False)), threshold=spec.threshold, thin=spec.thin,
    )


def build_actor_config(spec: ExperimentSpec, problem: CriticProblem, critic=None, T=None) -> ActorConfig:
    a = spec.actor
    if critic is None:
        zeta = spec.instance.behavior.zeta_max if spec.kind == "nac-gap" else None
        if spec.critic:
            critic = build_critic_config(spec, problem, zeta=zeta)
        else:
            # Exact and least-squares actors use only n and gamma_c from the critic config.
            gamma_c = spec.instance.gamma_c if spec.instance.gamma_c is not None else 0.5
            critic = CriticConfig(
                problem.n_min(gamma_c), StepSchedule.constant(1.0), 1, np.zeros(problem.features.dim), gamma_c
            )
    T = _check_int(a.get("T", 1) if T is None else T, "actor.T", 1)
    cfg = ActorConfig(
        T=T, critic=critic, beta=a.get("beta"),
        theta0=a.get("theta0"), eval_rule=a.get("eval_rule", "uniform-sample"),
        theorem2=bool(a.get("theorem2", False)),
    )
    cfg.resolve_beta(problem.mdp.num_actions)
    cfg.resolve_theta0(problem.features.dim)
    return cfg


# ---------------------------------------------------------------- CSV helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def csv_text(header: list[str], rows, comments: list[str] = ()) -> str:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- per-seed workers


def _critic_seed(job):
    problem, config, seed, checkpoints, w_pi = job
    traj = generate(problem.mdp, problem.behavior, 0, max(config.num_iters + config.n, 1), seed)
    run = run_critic(traj, config, problem, w_pi=w_pi, checkpoints=checkpoints)
    return seed, run


def _nac_seed(job):
    inst, config, seed = job
    return seed, run_nac(inst.mdp, inst.features, inst.behavior, config, seed)


@dataclass
class Outcome:
    status: int
    files: dict
    manifest: dict

    @property
    def out_dir(self) -> Path:
        return Path(self.manifest["output_dir"])


class _Writer:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def flush(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in sorted(self.files.items()):
            (self.out_dir / name).write_text(text)


def output_root(override=None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get("NACLAB_OUT", DEFAULT_OUT))


def _header(spec: ExperimentSpec, seed) -> list[str]:
    return [
        "config " + json.dumps(spec.raw, sort_keys=True, separators=(",", ":")),
        f"seed {seed}",
        f"mdp_hash {spec.instance.content_hash()}",
    ]


def _critic_constants(problem: CriticProblem, config: CriticConfig) -> dict:
    out = {
        "n": config.n,
        "n_min": problem.n_min(config.gamma_c),
        "gamma_c": config.gamma_c,
        "zeta_pi": problem.zeta,
        "lambda_min": problem.lambda_min,
        "kappa_min": problem.stationary.kappa_min,
        "alpha": config.schedule.alpha,
        "schedule": config.schedule.kind,
    }
    if config.schedule.kind == "constant":
        try:
            out["t_alpha"] = problem.mixing.t_alpha(config.schedule.alpha)
        except NaclabError as exc:
            out["t_alpha"] = None
            out["t_alpha_error"] = str(exc)
    return out


def _run_critic_convergence(spec, problem, workers, writer, manifest):
    config = build_critic_config(spec, problem)
    fp = problem.fixed_point(config.n)
    manifest["constants"] = _critic_constants(problem, config)
    manifest["constants"]["w_pi_norm"] = float(np.linalg.norm(fp.w_pi))
    manifest["constants"]["contraction"] = fp.contraction_estimate
    jobs = [(problem, config, s, spec.checkpoints, fp.w_pi) for s in spec.seeds]
    results = _map(_critic_seed, jobs, workers)
    steps = results[0][1].steps

    bounds = None
    try:
        if config.schedule.kind == "constant":
            check_theorem1_gate(config, problem)
            tau = problem.mixing.t_alpha(config.schedule.alpha) + config.n + 1
            bounds = {int(k): theorem1_bound(config, problem, int(k)) for k in steps if k >= tau}
        else:
            ks = [int(k) for k in steps]
            probe = theorem3_bounds(config, problem, [ks[-1]])[0]
            bounds = {b.k: b for b in theorem3_bounds(config, problem, [k for k in ks if k >= probe.tau])}
    except BoundInapplicable as exc:
        manifest["bound_status"] = f"bound columns omitted: {exc}"
    if bounds is not None:
        any_b = next(iter(bounds.values()), None)
        if any_b is not None:
            manifest["constants"].update(c1=any_b.c1, c2=any_b.c2, tau=any_b.tau, f=any_b.f)
        manifest["bound_status"] = "bound columns present"

    header = ["k", "mse"] + (["bound_E1", "bound_E2"] if bounds is not None else [])
    divergences = {}
    per_k: dict[int, list] = {}
    for seed, run in results:
        rows = []
        for k, err in zip(run.steps, run.errors):
            mse = float(err) ** 2
            row = [int(k), mse]
            per_k.setdefault(int(k), []).append(mse)
            if bounds is not None:
                b = bounds.get(int(k))
                row += [b.E1, b.E2] if b else [None, None]
            rows.append(row)
        comments = _header(spec, seed)
        if run.diverged:
            divergences[seed] = run.divergence.step
            comments.append(f"diverged {run.divergence}")
        writer.add(f"seed_{seed}.csv", csv_text(header, rows, comments))
    agg = []
    for k in sorted(per_k):
        m, se = mean_stderr(per_k[k])
        row = [k, m, se, len(per_k[k])]
        if bounds is not None:
            b = bounds.get(k)
            row += [b.E1, b.E2] if b else [None, None]
        agg.append(row)
    agg_header = ["k", "mse_mean", "mse_stderr", "num_seeds"] + (header[2:] if bounds is not None else [])
    writer.add("aggregate.csv", csv_text(agg_header, agg))
    manifest["divergences"] = {str(s): k for s, k in divergences.items()}
    return EXIT_OK


def _plateau(run) -> float:
    K = run.steps[-1]
    sel = run.steps >= K // 2
    return float(np.mean(run.errors[sel] ** 2))


def _run_stepsize_sweep(spec, problem, workers, writer, manifest):
    rows_by_seed: dict[int, list] = {s: [] for s in spec.seeds}
    agg = []
    consts = []
    for alpha in sorted(spec.alphas, reverse=True):
        config = build_critic_config(spec, problem, alpha=float(alpha))
        fp = problem.fixed_point(config.n)
        t_alpha = problem.mixing.t_alpha(float(alpha))
        jobs = [(problem, config, s, spec.checkpoints, fp.w_pi) for s in spec.seeds]
        plateaus = []
        for seed, run in _map(_critic_seed, jobs, workers):
            p = math.inf if run.diverged else _plateau(run)
            plateaus.append(p)
            rows_by_seed[seed].append([alpha, t_alpha, p])
        m, se = mean_stderr(plateaus)
        agg.append([alpha, t_alpha, m, se, len(plateaus)])
        consts.append(_critic_constants(problem, config))
    for seed, rows in rows_by_seed.items():
        writer.add(f"seed_{seed}.csv", csv_text(["alpha", "t_alpha", "plateau_mse"], rows, _header(spec, seed)))
    writer.add("aggregate.csv", csv_text(["alpha", "t_alpha", "plateau_mean", "plateau_stderr", "num_seeds"], agg))
    manifest["constants"] = consts
    return EXIT_OK


def _run_deadly_triad(spec, problem, workers, writer, manifest):
    from ..critic import certify_contraction

    gamma_c = spec.critic.get("gamma_c", spec.instance.gamma_c)
    n_min = problem.n_min(gamma_c)
    record = gallery.certify(spec.instance)
    writer.add("certification.json", json.dumps(record, indent=1, sort_keys=True) + "\n")
    manifest["certification"] = record
    status = EXIT_OK
    for label, n in (("n1", 1), ("nmin", n_min)):
        config = build_critic_config(spec, problem, n=n)
        w_pi = problem.fixed_point(n_min).w_pi
        jobs = [(problem, config, s, [], w_pi) for s in spec.seeds]
        rows = []
        for seed, run in _map(_critic_seed, jobs, workers):
            err = float(run.errors[-1]) if np.isfinite(run.errors[-1]) else math.inf
            rows.append([seed, n, run.diverged, run.divergence.step if run.diverged else None, err])
        writer.add(
            f"deadly_{label}.csv",
            csv_text(["seed", "n", "diverged", "divergence_step", "final_error"], rows),
        )
        manifest[f"divergent_seeds_{label}"] = sum(r[2] for r in rows)
        manifest[f"contraction_{label}"] = certify_contraction(problem, n)
        if label == "n1" and manifest["divergent_seeds_n1"] > 0:
            status = EXIT_EXPECTED_DIVERGENCE
    return status


def _realizable(inst: Instance) -> bool:
    """With one feature per state-action pair every Q is representable, so xi is exactly 0."""
    return inst.features.dim == inst.mdp.num_pairs


def _nac_rows(run, report):
    rows = []
    for t in range(len(run.gaps)):
        row = [t, run.gaps[t],
               run.xi_trace[t] if t < len(run.xi_trace) else None,
               run.wnorms[t] if t < len(run.wnorms) else None]
        if report is not None:
            row += [report.A1, report.A2, report.A3, report.A4]
        rows.append(row)
    return rows


def _run_nac_gap(spec, problem, workers, writer, manifest):
    inst = spec.instance
    config = build_actor_config(spec, problem)
    results = _map(_nac_seed, [(inst, config, s) for s in spec.seeds], workers)
    xi = 0.0 if _realizable(inst) else max(xi_proxy(run) for _, run in results)
    visited = max(float(np.max(run.wnorms)) for _, run in results)
    report = None
    try:
        report = theorem2_bound(inst.mdp, inst.features, inst.behavior, config, xi=xi, visited_max_wnorm=visited)
        manifest["bound"] = report.as_dict()
    except BoundInapplicable as exc:
        manifest["bound_status"] = f"bound columns omitted: {exc}"
    header = ["t", "gap", "xi_t", "wnorm_t"] + (["A1", "A2", "A3", "A4"] if report else [])
    per_t: dict[int, list] = {}
    averaged = []
    for seed, run in results:
        writer.add(f"seed_{seed}.csv", csv_text(header, _nac_rows(run, report), _header(spec, seed)))
        for t, g in enumerate(run.gaps):
            per_t.setdefault(t, []).append(g)
        averaged.append(run.mean_gap)
        if run.divergence:
            manifest.setdefault("divergences", {})[str(seed)] = [run.divergence[0], str(run.divergence[1])]
    agg = [[t, *mean_stderr(v), len(v)] for t, v in sorted(per_t.items())]
    writer.add("aggregate.csv", csv_text(["t", "gap_mean", "gap_stderr", "num_seeds"], agg))
    m, se = mean_stderr(averaged)
    manifest["averaged_gap"] = {"mean": m, "stderr": se}
    if report is not None:
        manifest["averaged_gap"]["dominated"] = bool(m + 2 * se <= report.total)
    manifest["constants"] = _critic_constants(problem.with_target(inst.behavior.table), config.critic)
    manifest["constants"]["zeta_max"] = inst.behavior.zeta_max
    return EXIT_OK


def _run_npg_exact(spec, problem, workers, writer, manifest):
    inst = spec.instance
    config = build_actor_config(spec, problem)
    run = run_exact_npg(inst.mdp, inst.features, inst.behavior, config)
    A = inst.mdp.num_actions
    gamma = inst.mdp.discount
    rows = []
    for t, (g, v) in enumerate(zip(run.gaps, run.values)):
        bound = actor_mod.fact1_bound(gamma, run.beta, A, t) if t >= 1 else None
        rows.append([t, g, v, bound])
    writer.add("run.csv", csv_text(["t", "gap", "value", "fact1_bound"], rows, _header(spec, "none")))
    manifest["xi_proxy"] = xi_proxy(run)
    return EXIT_OK


def _run_qnpg(spec, problem, workers, writer, manifest):
    inst = spec.instance
    config = build_actor_config(spec, problem)
    nu = spec.actor.get("nu", "discounted-visitation")
    run = run_qnpg(inst.mdp, inst.features, config, nu_choice=nu, behavior=inst.behavior)
    rows = []
    for t in range(len(run.gaps)):
        extra = [run.xi_trace[t], run.extra["eps_bias"][t], run.extra["min_weight"][t]] if t < run.T else [None] * 3
        rows.append([t, run.gaps[t], *extra])
    writer.add("run.csv", csv_text(["t", "gap", "xi_t", "eps_bias", "min_weight"], rows, _header(spec, "none")))
    gamma = inst.mdp.discount
    xi = xi_proxy(run)
    manifest["averaged_gap"] = run.mean_gap
    manifest["max_norm_bound"] = actor_mod.qnpg_bound(gamma, run.T, xi)
    try:
        manifest["weighted_bound"] = actor_mod.qnpg_weighted_bound(run, gamma)
    except BoundInapplicable as exc:
        manifest["weighted_bound"] = None
        manifest["weighted_bound_status"] = str(exc)
    manifest["xi_proxy"] = xi
    return EXIT_OK


def _run_bound_table(spec, problem, workers, writer, manifest):
    config = build_critic_config(spec, problem)
    rows = []
    for k in spec.bound_ks:
        if config.schedule.kind == "constant":
            b = theorem1_bound(config, problem, k)
        else:
            b = theorem3_bounds(config, problem, [k])[0]
        rows.append([k, b.E1, b.E2, b.total, b.c1, b.c2, b.tau, b.t_alpha, b.case])
    writer.add("critic_bound.csv", csv_text(
        ["k", "E1", "E2", "total", "c1", "c2", "tau", "t_alpha", "case"], rows))
    manifest["constants"] = _critic_constants(problem, config)
    if spec.actor:
        inst = spec.instance
        nac_critic = build_critic_config(spec, problem, zeta=inst.behavior.zeta_max)
        acfg = build_actor_config(spec, problem, critic=nac_critic)
        report = theorem2_bound(inst.mdp, inst.features, inst.behavior, acfg, xi=float(spec.actor.get("xi", 0.0)))
        writer.add("actor_bound.csv", csv_text(["term", "value"], sorted(
            (k, v) for k, v in report.as_dict().items() if isinstance(v, (int, float))
        )))
        manifest["bound"] = report.as_dict()
    return EXIT_OK


RUNNERS = {
    "critic-convergence": _run_critic_convergence,
    "stepsize-sweep": _run_stepsize_sweep,
    "deadly-triad": _run_deadly_triad,
    "nac-gap": _run_nac_gap,
    "npg-exact": _run_npg_exact,
    "qnpg": _run_qnpg,
    "bound-table": _run_bound_table,
}


def _destination(spec: ExperimentSpec, out: str | None, default_name: str) -> Path:
    root = output_root(out)
    if spec.output_dir:
        return root / spec.output_dir
    canonical = json.dumps(spec.raw, sort_keys=True, separators=(",", ":")).encode()
    return root / f"{default_name}-{hashlib.sha1(canonical).hexdigest()[:10]}"


def _manifest_base(spec: ExperimentSpec, out_dir: Path, workers: int) -> dict:
    return {
        "kind": spec.kind,
        "instance": spec.instance_ref,
        "instance_name": spec.instance.name,
        "mdp_hash": spec.instance.content_hash(),
        "seeds": spec.seeds,
        "spec": spec.raw,
        "workers": workers,
        "output_dir": str(out_dir),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def run_experiment(spec: ExperimentSpec, out: str | None = None, workers: int = 1) -> Outcome:
    """Run ``spec``; files are written only after every computation succeeds."""
    out_dir = _destination(spec, out, spec.kind)
    manifest = _manifest_base(spec, out_dir, workers)
    writer = _Writer(out_dir)
    problem = spec.problem()
    status = RUNNERS[spec.kind](spec, problem, workers, writer, manifest)
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["files"] = sorted(writer.files) + ["manifest.json"]
    manifest["status"] = status
    writer.add("manifest.json", json.dumps(manifest, indent=1, sort_keys=True, default=_json_default) + "\n")
    writer.flush()
    return Outcome(status, dict(writer.files), manifest)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


# ---------------------------------------------------------------- sample-complexity sweep


def _gap_job(job):
    inst, config, seed = job
    run = run_nac(inst.mdp, inst.features, inst.behavior, config, seed)
    if run.divergence is not None:
        # A diverged critic can never certify the accuracy target at this grid point.
        return math.inf, 0.0
    return run.mean_gap, xi_proxy(run)


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    alpha: float
    T: int | None
    K: int | None
    total_samples: int | None
    mean_gap: float | None
    stderr: float | None
    a2: float
    reachable: bool


SWEEP_ALPHA_CAP = 0.1


def sweep_alpha(epsilon: float, scale: float, cap: float = SWEEP_ALPHA_CAP) -> float:
    """Critic step size tied to the accuracy target, ``alpha = min(scale * epsilon^2, cap)``.

    The cap keeps loose targets from selecting a step size at which the critic diverges.
    """
    return min(scale * epsilon**2, cap)


def sample_complexity_sweep(spec: ExperimentSpec, workers: int = 1) -> tuple[list[SweepRow], float | None]:
    """Smallest ``T * (K + n)`` on doubling grids with mean averaged gap ``<= epsilon``.

    For each target the critic step size is ``alpha_scale * epsilon^2``. Grid
    points are scanned with ``T`` ascending and, for each ``T``, ``K``
    ascending; a scan stops as soon as its sample count cannot beat the best
    point found. The function-approximation term ``4 xi / (1-gamma)^2`` (with
    ``xi`` the visited proxy, or 0 for a square feature matrix) is subtracted
    from the mean gap.
    """
    inst = spec.instance
    problem = spec.problem()
    sw = spec.sweep
    scale = float(sw.get("alpha_scale", 0.5))
    cap = float(sw.get("alpha_cap", SWEEP_ALPHA_CAP))
    T_grid = sorted(int(t) for t in sw["T_grid"])
    K_grid = sorted(int(k) for k in sw["K_grid"])
    gamma = inst.mdp.discount
    base_critic = build_critic_config(spec, problem, alpha=1.0)
    n = base_critic.n
    rows = []
    for eps in sorted((float(e) for e in sw["epsilons"]), reverse=True):
        alpha = sweep_alpha(eps, scale, cap)
        best = None
        for T in T_grid:
            for K in K_grid:
                total = T * (K + n)
                if best is not None and total >= best.total_samples:
                    break
                critic = replace(base_critic, schedule=StepSchedule.constant(alpha), num_iters=K, thin=K)
                config = build_actor_config(spec, problem, critic=critic, T=T)
                config = replace(config, eval_rule="all-iterates")
                out = _map(_gap_job, [(inst, config, s) for s in spec.seeds], workers)
                gaps = [g for g, _ in out]
                xi = 0.0 if _realizable(inst) else max(x for _, x in out)
                a2 = 4 * xi / (1 - gamma) ** 2
                if not all(math.isfinite(g) for g in gaps):
                    continue
                m, se = mean_stderr(gaps)
                if m - a2 <= eps:
                    best = SweepRow(eps, alpha, T, K, total, m, se, a2, True)
                    break
        rows.append(best or SweepRow(eps, alpha, None, None, None, None, None, 0.0, False))
    reach = [r for r in rows if r.reachable]
    slope = None
    if len(reach) >= 2:
        x = np.log([1 / r.epsilon for r in reach])
        y = np.log([r.total_samples for r in reach])
        slope = float(np.polyfit(x, y, 1)[0])
    return rows, slope


def run_sweep(spec: ExperimentSpec, out: str | None = None, workers: int = 1) -> Outcome:
    if not spec.sweep:
        raise ConfigurationError("spec has no 'sweep' block")
    if spec.kind != "nac-gap":
        raise ConfigurationError("a sweep spec must have kind 'nac-gap'")
    out_dir = _destination(spec, out, "sweep")
    manifest = _manifest_base(spec, out_dir, workers)
    rows, slope = sample_complexity_sweep(spec, workers)
    writer = _Writer(out_dir)
    header = ["epsilon", "alpha", "T", "K", "total_samples", "mean_gap", "stderr", "A2", "reachable"]
    writer.add("sweep.csv", csv_text(header, [
        [r.epsilon, r.alpha, r.T, r.K, r.total_samples, r.mean_gap, r.stderr, r.a2, r.reachable] for r in rows
    ]))
    manifest["slope"] = slope
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["files"] = ["manifest.json", "sweep.csv"]
    manifest["status"] = EXIT_OK
    writer.add("manifest.json", json.dumps(manifest, indent=1, sort_keys=True, default=_json_default) + "\n")
    writer.flush()
    return Outcome(EXIT_OK, dict(writer.files), manifest)
