"""Experiment orchestration: configs, sweeps, seed aggregation, normalization,
frontiers and sweet spots."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields
from multiprocessing import Pool
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .attack import AttackSpec, adversary_from_dict, adversary_to_dict, evaluate, train_adversary
from .cert import CSV_COLUMNS, MdpConstants, three_term_report
from .envs import Env, make_env
from .policy import C_QUARTER_CATEGORICAL, C_VERIFIED_CATEGORICAL, masks_to_dict, policy_from_dict, policy_to_dict
from .prune import PruneState
from .rl import METRIC_COLUMNS, PpoConfig, train

log = logging.getLogger(__name__)

WORKERS_ENV = "PRUNECERT_WORKERS"
SECTIONS = ("env", "ppo", "prune", "attack", "cert", "sweep")

RESULT_COLUMNS = ["env", "method", "sparsity", "kappa", "attack", "seed", "clean_return", "robust_return",
                  "lipschitz", "global_bound", "f_hat"]
CERT_ROW_KEYS = ["env", "method", "sparsity", "kappa", "seed"]
FRONTIER_COLUMNS = ["env", "method", "kappa", "attack", "sparsity", "n_seeds",
                    "norm_clean", "norm_clean_sem", "norm_clean_ci95",
                    "norm_robust", "norm_robust_sem", "norm_robust_ci95"]
SWEETSPOT_COLUMNS = ["env", "method", "kappa", "sweet_spot", "clean", "robust_worst", "robust_avg",
                     "mode_sweet_spot", "worst_seed_abs", "worst_seed_norm"]
FAILURE_COLUMNS = ["cell", "error"]


class MissingBaselineError(KeyError):
    pass


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aggregate:
    mean: float
    sem: Optional[float]
    ci95: Optional[float]
    n: int


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean, SEM (sample std, n-1) and 1.96 SEM; SEM is None for one value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("aggregate of no values")
    if x.size == 1:
        return Aggregate(float(x[0]), None, None, 1)
    sem = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return Aggregate(float(x.mean()), sem, 1.96 * sem, int(x.size))


def worst_seed(per_seed_means: Sequence[float]) -> float:
    if len(per_seed_means) == 0:
        raise ValueError("worst_seed of no seeds")
    return float(min(per_seed_means))


def normalize(value, baseline_mean: float, reference: float = 0.0):
    """(value - reference) / (baseline - reference).

    With the default reference 0 this is value / baseline. Scale
    consistent: multiplying value, baseline and reference by k > 0 leaves
    the result unchanged.
    """
    denom = baseline_mean - reference
    if denom == 0 or not math.isfinite(denom):
        raise ZeroDivisionError(f"baseline {baseline_mean} equals the reference {reference}")
    return (np.asarray(value, dtype=np.float64) - reference) / denom


def sweet_spot(curve: dict[float, tuple[float, float]]) -> float:
    """Sparsity maximizing (norm_clean + norm_robust) / 2; ties go to the
    lower sparsity."""
    if not curve:
        raise ValueError("sweet_spot of an empty curve")
    best_level, best = None, -math.inf
    for level in sorted(curve):
        c, r = curve[level]
        score = 0.5 * (c + r)
        if score > best:
            best_level, best = level, score
    return best_level


def mode_low(levels: Iterable[float]) -> float:
    """Most frequent level; ties favour the smaller level."""
    counts = Counter(levels)
    if not counts:
        raise ValueError("mode of nothing")
    top = max(counts.values())
    return min(level for level, c in counts.items() if c == top)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_PRUNE = {"schedule": "cubic", "burn_in_fraction": 0.25, "update_interval": None,
                 "erk_enabled": True, "prune_critic": True}
DEFAULT_CERT = {"epsilon": None, "norm_p": "inf", "beta_smoothness": 0.0, "quadrature_points": 8,
                "categorical_constant": "verified", "states": 32}
DEFAULT_SWEEP = {"methods": ["magnitude"], "sparsities": [0.0, 0.3, 0.5, 0.7, 0.8, 0.9], "kappas": [0.0],
                 "seeds": [0], "eval_episodes": 100, "normalize_reference": "random",
                 "reference_episodes": 200}
ATTACK_KEYS = {f.name for f in fields(AttackSpec)} - {"adversary", "q_model"} | {"train_steps"}


def _merge(defaults: dict, given: Optional[dict], section: str) -> dict:
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    env: dict
    ppo: PpoConfig
    prune: dict
    attack: list[dict]
    cert: dict
    sweep: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc or {})
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}; expected {SECTIONS}")
        env = dict(doc.get("env") or {"name": "pointmass"})
        env.setdefault("params", {})
        if set(env) - {"name", "params"}:
            raise ValueError("[env] takes only 'name' and 'params'")
        make_env(env["name"], **env["params"])  # validate
        ppo_doc = dict(doc.get("ppo") or {})
        known = {f.name for f in fields(PpoConfig)}
        if set(ppo_doc) - known:
            raise ValueError(f"unknown keys in [ppo]: {sorted(set(ppo_doc) - known)}")
        ppo = PpoConfig(**ppo_doc)
        prune = _merge(DEFAULT_PRUNE, doc.get("prune"), "prune")
        if prune["update_interval"] is None:
            prune["update_interval"] = ppo.minibatches  # once per update epoch
        attacks = []
        for a in doc.get("attack") or [{"family": "none"}]:
            a = dict(a)
            if set(a) - ATTACK_KEYS:
                raise ValueError(f"unknown keys in [attack]: {sorted(set(a) - ATTACK_KEYS)}")
            full = {f.name: f.default for f in fields(AttackSpec) if f.name not in ("adversary", "q_model")}
            full["train_steps"] = 100_000
            full.update(a)
            full["norm_p"] = "inf" if AttackSpec(norm_p=full["norm_p"]).norm_p == math.inf else 2
            AttackSpec(**{k: v for k, v in full.items() if k != "train_steps"})  # validate
            attacks.append(full)
        cert = _merge(DEFAULT_CERT, doc.get("cert"), "cert")
        if cert["epsilon"] is None:
            cert["epsilon"] = ppo.epsilon
        if cert["categorical_constant"] not in ("verified", "quarter"):
            raise ValueError("cert.categorical_constant must be 'verified' or 'quarter'")
        sweep = _merge(DEFAULT_SWEEP, doc.get("sweep"), "sweep")
        if sweep["normalize_reference"] not in ("zero", "random"):
            raise ValueError("sweep.normalize_reference must be 'zero' or 'random'")
        sweep["sparsities"] = sorted(float(s) for s in sweep["sparsities"])
        return cls(env, ppo, prune, attacks, cert, sweep)

    def to_dict(self) -> dict:
        return {"env": copy.deepcopy(self.env), "ppo": self.ppo.to_dict(), "prune": dict(self.prune),
                "attack": [dict(a) for a in self.attack], "cert": dict(self.cert), "sweep": copy.deepcopy(self.sweep)}

    def make_env(self) -> Env:
        return make_env(self.env["name"], **self.env["params"])

    def constants(self, env: Env) -> MdpConstants:
        return MdpConstants(self.ppo.gamma, env.r_max, float(self.cert["epsilon"]),
                            math.inf if str(self.cert["norm_p"]) == "inf" else 2)

    def categorical_constant(self) -> float:
        return C_VERIFIED_CATEGORICAL if self.cert["categorical_constant"] == "verified" else C_QUARTER_CATEGORICAL


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    method: str
    sparsity: float
    kappa: float
    seed: int

    @property
    def dense(self) -> bool:
        return self.sparsity == 0.0

    @property
    def id(self) -> str:
        return f"{self.method}_s{self.sparsity:g}_k{self.kappa:g}_seed{self.seed}"


def plan_cells(cfg: RunConfig) -> list[Cell]:
    """Dense cells (method 'dense') first, then every method x sparsity > 0."""
    sw = cfg.sweep
    dense = [Cell("dense", 0.0, float(k), int(s)) for k in sw["kappas"] for s in sw["seeds"]]
    pruned = [Cell(m, float(p), float(k), int(s)) for m in sw["methods"] for p in sw["sparsities"] if p > 0
              for k in sw["kappas"] for s in sw["seeds"]]
    return dense + pruned


def _ppo_for(cfg: RunConfig, cell: Cell) -> PpoConfig:
    d = cfg.ppo.to_dict()
    d.update(seed=cell.seed, kappa=cell.kappa)
    return PpoConfig(**d)


def _prune_for(cfg: RunConfig, cell: Cell) -> PruneState:
    if cell.dense:
        return PruneState()
    p = cfg.prune
    return PruneState(criterion=cell.method, target_sparsity=cell.sparsity, schedule=p["schedule"],
                      burn_in_fraction=p["burn_in_fraction"], update_interval=int(p["update_interval"]),
                      erk_enabled=p["erk_enabled"], prune_critic=p["prune_critic"], rng_seed=cell.seed)


def _attack_spec(a: dict, adversary=None) -> AttackSpec:
    spec = AttackSpec(**{k: v for k, v in a.items() if k != "train_steps"})
    spec.adversary = adversary
    return spec


def _attack_name(a: dict) -> str:
    return a["family"] if a["family"] != "learned" else f"learned-l{a['lambda_stealth']:g}"


def _visited_states(net, env: Env, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    S = env.reset(rng, max(1, n))
    steps = int(rng.integers(0, env.horizon)) if env.horizon > 1 else 0
    for _ in range(steps):
        S = env.step(S, net.distribution(env.observe(S)).mode()).s_next
    return env.observe(S)


def _cell_dir(out: Path) -> Path:
    d = out / "cells"
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_cell(cfg: RunConfig, cell: Cell, out: Path) -> dict:
    """Train, evaluate and certify one cell; writes its marker file."""
    env = cfg.make_env()
    cells = _cell_dir(out)
    result = train(_ppo_for(cfg, cell), env, _prune_for(cfg, cell))
    net = result.net
    (cells / f"{cell.id}.weights.json").write_text(json.dumps(policy_to_dict(net)) + "\n")
    if result.masks:
        (cells / f"{cell.id}.masks.json").write_text(json.dumps(masks_to_dict(net, result.masks)) + "\n")
    write_csv(cells / f"{cell.id}.metrics.csv", METRIC_COLUMNS, result.metrics)

    dense_key = Cell("dense", 0.0, cell.kappa, cell.seed).id
    if cell.dense:
        dense_net = net
        adversaries = {}
        for a in cfg.attack:
            if a["family"] == "learned":
                spec = _attack_spec(a)
                adv_cfg = _ppo_for(cfg, cell)
                adv_cfg = PpoConfig(**{**adv_cfg.to_dict(), "total_steps": int(a["train_steps"]), "kappa": 0.0})
                adv = train_adversary(net, env, spec, adv_cfg)
                adversaries[_attack_name(a)] = adversary_to_dict(adv)
        (cells / f"{cell.id}.adversaries.json").write_text(json.dumps(adversaries) + "\n")
    else:
        dense_net = policy_from_dict(json.loads((cells / f"{dense_key}.weights.json").read_text()))
        adversaries = json.loads((cells / f"{dense_key}.adversaries.json").read_text())

    episodes = int(cfg.sweep["eval_episodes"])
    consts = cfg.constants(env)
    eval_seed = 10_000 + cell.seed
    clean = evaluate(net, env, AttackSpec("none"), episodes, np.random.default_rng(eval_seed))
    states = _visited_states(net, env, int(cfg.cert["states"]), eval_seed)
    report = three_term_report(0.0, dense_net, net, states, consts,
                               beta_smoothness=float(cfg.cert["beta_smoothness"]),
                               quadrature_points=int(cfg.cert["quadrature_points"]),
                               categorical_constant=cfg.categorical_constant())
    rows = []
    for a in cfg.attack:
        name = _attack_name(a)
        adv = adversary_from_dict(adversaries[name]) if a["family"] == "learned" else None
        ev = evaluate(net, env, _attack_spec(a, adv), episodes, np.random.default_rng(eval_seed))
        rows.append({"env": env.name, "method": cell.method, "sparsity": cell.sparsity, "kappa": cell.kappa,
                     "attack": name, "seed": cell.seed, "clean_return": clean.mean, "robust_return": ev.mean,
                     "lipschitz": report.surrogate_lipschitz, "global_bound": report.global_bound,
                     "f_hat": ev.f_hat})
    cert_row = {"env": env.name, "method": cell.method, "sparsity": cell.sparsity, "kappa": cell.kappa,
                "seed": cell.seed, "clean_return": clean.mean, **report.csv_row()}
    marker = {"cell": cell.id, "rows": rows, "cert": cert_row}
    (cells / f"{cell.id}.done.json").write_text(json.dumps(marker, sort_keys=True) + "\n")
    return marker


def _run_cell_safe(args) -> dict:
    cfg, cell, out = args
    marker = Path(out) / "cells" / f"{cell.id}.done.json"
    if marker.exists():
        return json.loads(marker.read_text())
    try:
        return run_cell(cfg, cell, Path(out))
    except Exception as exc:  # recorded, sweep continues
        log.exception("cell %s failed", cell.id)
        return {"cell": cell.id, "error": f"{type(exc).__name__}: {exc}"}


def reference_return(cfg: RunConfig) -> float:
    """Mean return of a uniform-random policy (0 when the sweep normalizes
    by plain ratio)."""
    if cfg.sweep["normalize_reference"] == "zero":
        return 0.0
    env = cfg.make_env()
    rng = np.random.default_rng(12345)
    n = int(cfg.sweep["reference_episodes"])
    S = env.reset(rng, n)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    for _ in range(env.horizon):
        if not alive.any():
            break
        k = int(alive.sum())
        a = (rng.uniform(env.action_low, env.action_high, (k, env.action_dim)) if env.continuous
             else rng.integers(0, env.num_actions, k))
        tr = env.step(S[alive], a)
        ret[alive] += tr.r
        S = S.copy()
        S[alive] = tr.s_next
        alive[np.flatnonzero(alive)[tr.done]] = False
    return float(ret.mean())


@dataclass
class SweepResult:
    rows: list[dict]
    cert_rows: list[dict]
    failures: list[dict] = field(default_factory=list)
    reference: float = 0.0


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_sweep(cfg: RunConfig, out) -> SweepResult:
    """Run every cell (skipping completed ones) and write all CSVs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(dump_config(cfg))
    cells = plan_cells(cfg)
    dense = [c for c in cells if c.dense]
    pruned = [c for c in cells if not c.dense]
    workers = _workers()
    markers = []
    for phase in (dense, pruned):
        jobs = [(cfg, c, str(out)) for c in phase]
        if workers > 1 and len(jobs) > 1:
            with Pool(workers) as pool:
                markers.extend(pool.map(_run_cell_safe, jobs))
        else:
            markers.extend(_run_cell_safe(j) for j in jobs)
    rows = [r for m in markers if "rows" in m for r in m["rows"]]
    certs = [m["cert"] for m in markers if "cert" in m]
    failures = [{"cell": m["cell"], "error": m["error"]} for m in markers if "error" in m]
    result = SweepResult(rows, certs, failures, reference_return(cfg) if rows else 0.0)
    report(result, out, cfg)
    return result


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _num(row: dict, key: str) -> float:
    return float(row[key])


def _baselines(rows: list[dict]) -> dict:
    """Mean clean and robust return of the sparsity-0 cells per
    (env, kappa, attack)."""
    groups = defaultdict(lambda: ([], []))
    for r in rows:
        if _num(r, "sparsity") == 0.0:
            key = (r["env"], _num(r, "kappa"), r["attack"])
            groups[key][0].append(_num(r, "clean_return"))
            groups[key][1].append(_num(r, "robust_return"))
    return {k: (float(np.mean(c)), float(np.mean(rb))) for k, (c, rb) in groups.items()}


def frontier(rows: list[dict], reference: float = 0.0) -> list[dict]:
    """Per (env, method, kappa, attack, sparsity): seed-aggregated normalized
    clean and robust returns. The dense cells join every method's curve."""
    base = _baselines(rows)
    methods = sorted({r["method"] for r in rows if r["method"] != "dense"}) or ["dense"]
    groups = defaultdict(lambda: ([], []))
    for r in rows:
        key = (r["env"], _num(r, "kappa"), r["attack"])
        if key not in base:
            raise MissingBaselineError(f"no sparsity-0 baseline for {key}")
        bc, br = base[key]
        nc_ = float(normalize(_num(r, "clean_return"), bc, reference))
        nr = float(normalize(_num(r, "robust_return"), br, reference))
        targets = methods if r["method"] == "dense" else [r["method"]]
        for m in targets:
            g = groups[(r["env"], m, _num(r, "kappa"), r["attack"], _num(r, "sparsity"))]
            g[0].append(nc_)
            g[1].append(nr)
    out = []
    for (env, m, k, atk, sp), (cs, rs) in sorted(groups.items()):
        ac, ar = aggregate(cs), aggregate(rs)
        out.append({"env": env, "method": m, "kappa": k, "attack": atk, "sparsity": sp, "n_seeds": ac.n,
                    "norm_clean": ac.mean, "norm_clean_sem": ac.sem, "norm_clean_ci95": ac.ci95,
                    "norm_robust": ar.mean, "norm_robust_sem": ar.sem, "norm_robust_ci95": ar.ci95})
    return out


def sweetspots(rows: list[dict], reference: float = 0.0) -> list[dict]:
    """Sweet-spot table per (env, method, kappa) over the non-clean attacks."""
    front = frontier(rows, reference)
    base = _baselines(rows)
    by_method = defaultdict(lambda: defaultdict(dict))
    for f in front:
        by_method[(f["env"], f["method"], f["kappa"])][f["attack"]][f["sparsity"]] = (f["norm_clean"], f["norm_robust"])
    out = []
    for (env, m, k), per_attack in sorted(by_method.items()):
        attacks = [a for a in sorted(per_attack) if a != "none"] or sorted(per_attack)
        levels = sorted(set.intersection(*(set(per_attack[a]) for a in attacks)))
        avg_curve = {p: (per_attack[attacks[0]][p][0], float(np.mean([per_attack[a][p][1] for a in attacks])))
                     for p in levels}
        spot = sweet_spot(avg_curve)
        robust_at = [per_attack[a][spot][1] for a in attacks]
        spots = {a: sweet_spot(per_attack[a]) for a in attacks}
        worst_abs, worst_norm = [], []
        for a in attacks:
            source = "dense" if spots[a] == 0.0 else m
            per_seed = [_num(r, "robust_return") for r in rows
                        if r["env"] == env and r["attack"] == a and _num(r, "kappa") == k
                        and r["method"] == source and _num(r, "sparsity") == spots[a]]
            w = worst_seed(per_seed)
            worst_abs.append(w)
            worst_norm.append(float(normalize(w, base[(env, k, a)][1], reference)))
        out.append({"env": env, "method": m, "kappa": k, "sweet_spot": spot, "clean": avg_curve[spot][0],
                    "robust_worst": float(min(robust_at)), "robust_avg": float(np.mean(robust_at)),
                    "mode_sweet_spot": mode_low(spots.values()),
                    "worst_seed_abs": float(np.mean(worst_abs)), "worst_seed_norm": float(np.mean(worst_norm))})
    return out


def with_clean_regret(cert_rows: list[dict]) -> list[dict]:
    """Fill term1 with the clean regret against the best clean return seen
    in the same env, and recompute the total."""
    best = defaultdict(lambda: -math.inf)
    for r in cert_rows:
        best[r["env"]] = max(best[r["env"]], _num(r, "clean_return"))
    out = []
    for r in cert_rows:
        term1 = best[r["env"]] - _num(r, "clean_return")
        out.append({**r, "term1": term1, "total": term1 + _num(r, "term2") + _num(r, "term3")})
    return out


def report(result: SweepResult, out, cfg: Optional[RunConfig] = None) -> dict[str, Path]:
    """Write results.csv, frontier.csv, sweetspots.csv, cert.csv and
    failures.csv; returns their paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("results", "frontier", "sweetspots", "cert", "failures")}
    write_csv(paths["results"], RESULT_COLUMNS, result.rows)
    front = frontier(result.rows, result.reference) if result.rows else []
    spots = sweetspots(result.rows, result.reference) if result.rows else []
    write_csv(paths["frontier"], FRONTIER_COLUMNS, front)
    write_csv(paths["sweetspots"], SWEETSPOT_COLUMNS, spots)
    write_csv(paths["cert"], CERT_ROW_KEYS + ["clean_return"] + CSV_COLUMNS, with_clean_regret(result.cert_rows))
    write_csv(paths["failures"], FAILURE_COLUMNS, result.failures)
    return paths


def report_from_dir(out, reference: Optional[float] = None) -> dict[str, Path]:
    """Rebuild the derived CSVs from an existing results.csv / cert.csv."""
    out = Path(out)
    rows = read_csv(out / "results.csv")
    certs = read_csv(out / "cert.csv") if (out / "cert.csv").exists() else []
    if reference is None:
        cfg_path = out / "resolved_config.yaml"
        reference = reference_return(load_config(cfg_path)) if cfg_path.exists() and rows else 0.0
    fails = read_csv(out / "failures.csv") if (out / "failures.csv").exists() else []
    return report(SweepResult(rows, certs, fails, reference), out)
