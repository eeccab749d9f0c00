"""Command-line entry point: train, certify, prune, attack, sweep, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attack import adversary_from_dict, adversary_to_dict, evaluate, train_adversary
from .cert import CSV_COLUMNS, CertReport, three_term_report
from .harness import (RunConfig, _attack_name, _attack_spec, _visited_states, dump_config, load_config,
                      report_from_dir, run_sweep, write_csv)
from .numcheck import self_check
from .policy import load_policy, masks_from_dict, masks_to_dict, save_policy
from .prune import CRITERIA, PruneState, apply_masks, prune_step
from .rl import METRIC_COLUMNS, PpoConfig, train

ATTACK_COLUMNS = ["attack", "epsilon", "episodes", "mean", "sem", "ci95", "f_hat"]


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig.from_dict({})


def _seeded(cfg: RunConfig, seed: Optional[int]) -> PpoConfig:
    d = cfg.ppo.to_dict()
    if seed is not None:
        d["seed"] = seed
    return PpoConfig(**d)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _write_report(out: Path, stem: str, rep: CertReport) -> None:
    row = rep.csv_row()
    lines = [f"{k}={float(v)!r}" for k, v in row.items()]
    lines += [f"epsilon_l2={rep.epsilon_l2!r}"] + [f"note={n}" for n in rep.notes]
    (out / f"{stem}.txt").write_text("\n".join(lines) + "\n")
    write_csv(out / f"{stem}.csv", CSV_COLUMNS, [row])


def cmd_train(args) -> int:
    cfg = _config(args)
    ppo = _seeded(cfg, args.seed)
    env = cfg.make_env()
    out = _out(args)
    p = cfg.prune
    prune_state = PruneState(criterion=args.criterion, target_sparsity=args.sparsity, schedule=p["schedule"],
                             burn_in_fraction=p["burn_in_fraction"], update_interval=int(p["update_interval"]),
                             erk_enabled=p["erk_enabled"], prune_critic=p["prune_critic"], rng_seed=ppo.seed)
    ckpt = out / "checkpoints"
    counter = {"n": 0}

    def on_update(row, net):
        counter["n"] += 1
        if args.checkpoint_interval and counter["n"] % args.checkpoint_interval == 0:
            ckpt.mkdir(exist_ok=True)
            save_policy(net, ckpt / f"weights_step{row['step']}.json")

    result = train(ppo, env, prune_state, callback=on_update)
    (out / "resolved_config.yaml").write_text(dump_config(cfg))
    write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
    save_policy(result.net, out / "weights.json")
    if result.masks:
        _write_json(out / "masks.json", masks_to_dict(result.net, result.masks))
        write_csv(out / "prune_events.csv", list(result.prune_events[0]) if result.prune_events else ["step"],
                  result.prune_events)
    final = result.metrics[-1] if result.metrics else {}
    print(f"trained {len(result.metrics)} updates; final return_mean={final.get('return_mean', float('nan')):.4f}")
    return 0


def cmd_certify(args) -> int:
    if args.self_check:
        results = self_check(args.seed or 0)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
        return 0 if all(r.passed for r in results) else 1
    if not args.weights:
        print("certify needs --weights (or --self-check)", file=sys.stderr)
        return 2
    cfg = _config(args)
    env = cfg.make_env()
    net = load_policy(args.weights)
    pruned = load_policy(args.pruned) if args.pruned else net
    states = _visited_states(pruned, env, int(cfg.cert["states"]), args.seed or 0)
    rep = three_term_report(args.clean_regret, net, pruned, states, cfg.constants(env),
                            beta_smoothness=float(cfg.cert["beta_smoothness"]),
                            quadrature_points=int(cfg.cert["quadrature_points"]),
                            categorical_constant=cfg.categorical_constant())
    out = _out(args)
    _write_report(out, "cert", rep)
    print((out / "cert.txt").read_text(), end="")
    return 0


def cmd_prune(args) -> int:
    cfg = _config(args)
    env = cfg.make_env()
    net = load_policy(args.weights)
    if args.masks:
        masks = masks_from_dict(json.loads(Path(args.masks).read_text()))
    else:
        state = PruneState(criterion=args.criterion, target_sparsity=args.sparsity, schedule="linear",
                           burn_in_fraction=0.0, erk_enabled=cfg.prune["erk_enabled"],
                           prune_critic=cfg.prune["prune_critic"], rng_seed=args.seed or 0)
        masks = prune_step(state, net, 1, 1)
    pruned = net.with_parameters(apply_masks(net.parameters(), masks))
    out = _out(args)
    save_policy(pruned, out / "pruned_weights.json")
    _write_json(out / "masks.json", masks_to_dict(net, masks))
    states = _visited_states(net, env, int(cfg.cert["states"]), args.seed or 0)
    kw = dict(beta_smoothness=float(cfg.cert["beta_smoothness"]),
              quadrature_points=int(cfg.cert["quadrature_points"]),
              categorical_constant=cfg.categorical_constant())
    consts = cfg.constants(env)
    before = three_term_report(0.0, net, net, states, consts, **kw)
    after = three_term_report(0.0, net, pruned, states, consts, **kw)
    b, a = before.csv_row(), after.csv_row()
    rows = [{"which": "before", **b}, {"which": "after", **a},
            {"which": "delta", **{k: a[k] - b[k] for k in CSV_COLUMNS}}]
    write_csv(out / "cert_delta.csv", ["which"] + CSV_COLUMNS, rows)
    kept = sum(float(m.sum()) for m in masks.values())
    total = sum(m.size for m in masks.values())
    print(f"sparsity={1 - kept / total:.4f} lipschitz {b['lipschitz']:.6g} -> {a['lipschitz']:.6g}")
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    env = cfg.make_env()
    victim = load_policy(args.weights)
    seed = args.seed or 0
    out = _out(args)
    rows, adversaries = [], {}
    for a in cfg.attack:
        adv = None
        if a["family"] == "learned":
            if args.adversary:
                adv = adversary_from_dict(json.loads(Path(args.adversary).read_text()))
            else:
                ppo = PpoConfig(**{**_seeded(cfg, seed).to_dict(), "total_steps": int(a["train_steps"]), "kappa": 0.0})
                adv = train_adversary(victim, env, _attack_spec(a), ppo)
            adversaries[_attack_name(a)] = adversary_to_dict(adv)
        spec = _attack_spec(a, adv)
        ev = evaluate(victim, env, spec, args.episodes, np.random.default_rng(seed))
        rows.append({"attack": _attack_name(a), "epsilon": spec.epsilon, "episodes": args.episodes,
                     "mean": ev.mean, "sem": ev.sem, "ci95": ev.ci95, "f_hat": ev.f_hat})
    write_csv(out / "attack.csv", ATTACK_COLUMNS, rows)
    for name, doc in adversaries.items():
        _write_json(out / f"adversary_{name}.json", doc)
    for r in rows:
        print(f"{r['attack']:>14}  mean={r['mean']:.4f}  ci95={r['ci95'] if r['ci95'] is not None else float('nan'):.4f}"
              f"  f_hat={r['f_hat']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.sweep["seeds"] = [args.seed]
    result = run_sweep(cfg, args.out)
    print(f"{len(result.rows)} result rows, {len(result.failures)} failed cells -> {args.out}")
    return 1 if result.failures else 0


def cmd_report(args) -> int:
    paths = report_from_dir(args.out)
    for p in paths.values():
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunecert", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default: str):
        p.add_argument("--config", help="YAML config with sections env/ppo/prune/attack/cert/sweep")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=out_default, help="output directory")
        return p

    p = common(sub.add_parser("train", help="PPO training, optionally with pruning"), "runs/train")
    p.add_argument("--criterion", choices=sorted(CRITERIA), default="none")
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--checkpoint-interval", type=int, default=0, help="updates between weight checkpoints")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("certify", help="certificate for a weight file"), "runs/certify")
    p.add_argument("--weights")
    p.add_argument("--pruned", help="pruned weight file for the three-term report")
    p.add_argument("--clean-regret", type=float, default=0.0)
    p.add_argument("--self-check", action="store_true", help="run the oracle suite and exit")
    p.set_defaults(func=cmd_certify)

    p = common(sub.add_parser("prune", help="one-shot pruning of a weight file"), "runs/prune")
    p.add_argument("--weights", required=True)
    p.add_argument("--masks", help="apply this mask file instead of computing one")
    p.add_argument("--criterion", choices=["magnitude", "random"], default="magnitude")
    p.add_argument("--sparsity", type=float, default=0.5)
    p.set_defaults(func=cmd_prune)

    p = common(sub.add_parser("attack", help="evaluate a victim under the configured attacks"), "runs/attack")
    p.add_argument("--weights", required=True)
    p.add_argument("--adversary", help="trained adversary weight file for learned attacks")
    p.add_argument("--episodes", type=int, default=100)
    p.set_defaults(func=cmd_attack)

    p = common(sub.add_parser("sweep", help="full experiment grid"), "runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("report", help="rebuild derived CSVs from a sweep directory"), "runs/sweep")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
