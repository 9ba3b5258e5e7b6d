"""Command-line entry point: ``autobid <command> [options]``.

Every command writes CSV outputs plus ``manifest.json`` into ``--out`` and
exits with status 1 when an invariant check fails.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, ablations, tabular
from .data import WeightTable, load as load_dataset, save as save_dataset
from .iql import evaluate_policy, load_bundle, save_bundle, train_iql
from .orchestrator import EVAL_OFFSET, RunConfig, config_dict, config_hash, collect, full_profile, init_state, \
    initial_safe_policy, run
from .policy import NoiseConfig
from .weighting import compute_weights

log = logging.getLogger("autobid")


def merge_overrides(obj, overrides: dict):
    """Return a copy of dataclass ``obj`` with nested ``overrides`` applied."""
    kw = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, val in overrides.items():
        if key not in names:
            raise ValueError(f"unknown setting {key!r} for {type(obj).__name__}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur) and isinstance(val, dict):
            kw[key] = merge_overrides(cur, val)
        else:
            kw[key] = tuple(val) if isinstance(val, list) else val
    return dataclasses.replace(obj, **kw)


def load_run_config(path: str | None, seed: int | None = None) -> RunConfig:
    """JSON overrides on top of the desk defaults; ``"profile": "full"`` starts from the full-size world."""
    raw = json.loads(Path(path).read_text()) if path else {}
    profile = raw.pop("profile", "desk")
    if profile not in ("desk", "full"):
        raise ValueError(f"unknown profile {profile!r}")
    cfg = merge_overrides(full_profile() if profile == "full" else RunConfig(), raw)
    return cfg.replace(seed=seed) if seed is not None else cfg


def write_rows(rows: list[dict], path: Path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


def write_manifest(out: Path, command: str, config: RunConfig | None, result: dict) -> None:
    manifest = {"command": command, "code_version": __version__, "result": result}
    if config is not None:
        manifest.update(config=config_dict(config), config_hash=config_hash(config), seed=config.seed)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _policy(args, config):
    return load_bundle(args.policy).policy if args.policy else initial_safe_policy(config)[0]


# --- commands ----------------------------------------------------------------


def cmd_collect(args, config, out):
    policy = _policy(args, config)
    safe = None
    if args.safe:
        safe = init_state(config).safe_set(config.replace(history=1))
    noise = NoiseConfig(args.noise, args.sigma, config.seed)
    D, trace = collect(policy, noise, config.world, np.arange(args.episodes), safe)
    save_dataset(D, out / "dataset.csv")
    if trace is not None:
        trace.to_csv(out / "seas_trace_episode0.csv")
    ret = D.returns()
    return {"episodes": len(D), "mean_return": float(ret.mean())}, True


def cmd_train(args, config, out):
    D = load_dataset(args.data)
    if args.weights == "uniform":
        W = WeightTable.uniform(D)
    else:
        W, _ = compute_weights(D, dataclasses.replace(config.weighting, alpha=config.alpha, gamma=config.gamma,
                                                      returns=args.weights))
    W.to_csv(D, out / "weights.csv")
    bundle = train_iql(D, W, dataclasses.replace(config.iql, gamma=config.gamma, seed=config.seed),
                       init_policy=_policy(args, config))
    save_bundle(bundle, out / "bundle")
    write_rows([{"step": i, **{k: v[i] for k, v in bundle.losses.items()}}
                for i in range(config.iql.gradient_steps)], out / "losses.csv")
    return {"policy_hash": bundle.policy.theta_hash(), "low_support": bundle.low_support}, bundle.all_finite()


def cmd_iterate(args, config, out):
    reports = run(config, out)
    ok = all(r.status == "ok" and r.safety_ok for r in reports)
    best = [r.best_so_far for r in reports]
    return {"final_improvement": reports[-1].improvement, "best_so_far": best,
            "statuses": [r.status for r in reports]}, ok


def cmd_evaluate(args, config, out):
    policy = _policy(args, config)
    mean, se = evaluate_policy(policy, config.world, args.episodes, EVAL_OFFSET)
    write_rows([{"policy_hash": policy.theta_hash(), "episodes": args.episodes, "mean_return": mean,
                 "standard_error": se}], out / "evaluation.csv")
    return {"mean_return": mean, "standard_error": se}, bool(np.isfinite(mean))


ABLATIONS = {
    "noise": ablations.ablation_noise_sweep,
    "tee": ablations.ablation_tee_matrix,
    "stochasticity": ablations.ablation_stochasticity,
    "safety": ablations.ablation_safety_baselines,
    "dispersion": ablations.ablation_dispersion,
}


def cmd_ablate(args, config, out):
    kw = {"seeds": tuple(args.seeds)} if args.seeds else {}
    rep = ABLATIONS[args.which](config, out=out, **kw)
    ok = True
    if args.which == "safety":
        # the exploration return must respect each epsilon's bound within two standard errors
        ok = all(r["one_minus_ratio"] <= r["epsilon"] + r["two_se"] for r in rep.summary["epsilon_sweep"])
    return rep.summary, ok


def cmd_oracle(args, config, out):
    if args.which == "theorem1":
        res = tabular.seas_bound_suite(args.cases, config.seed, stochastic=not args.deterministic,
                                       single_start=args.deterministic)
        name = "theorem1.csv"
    else:
        res = tabular.weighting_suite(args.cases, config.seed, alpha=config.alpha)
        name = "weighting.csv"
    write_rows(res.rows, out / name)
    summary = {"runs": res.runs, "violations": res.violations}
    if res.first_failure is not None and args.which == "theorem1":
        ff = res.first_failure
        summary["first_failure"] = {"mdp": ff["mdp"], "explorer": ff["explorer"], "epsilon": ff["eps"],
                                    "expected_return": str(ff["expected_return"]), "threshold": str(ff["threshold"])}
    return summary, res.passed


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings overriding the desk defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="autobid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="deploy a policy with exploration noise")
    c.add_argument("--policy", help="bundle directory (default: distilled pacing policy)")
    c.add_argument("--noise", choices=("psn", "asn", "none"), default="psn")
    c.add_argument("--sigma", type=float, default=0.1)
    c.add_argument("--episodes", type=int, default=100)
    c.add_argument("--safe", action="store_true", help="guard exploration with SEAS")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", parents=[common], help="weight a dataset and train with IQL")
    t.add_argument("--data", required=True)
    t.add_argument("--policy", help="bundle directory used as the warm start")
    t.add_argument("--weights", choices=("robust", "raw", "uniform"), default="robust")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("iterate", parents=[common], help="run the iterative collect/weight/train loop")
    i.set_defaults(func=cmd_iterate)

    e = sub.add_parser("evaluate", parents=[common], help="noise-free evaluation of a policy")
    e.add_argument("--policy")
    e.add_argument("--episodes", type=int, default=2000)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="controlled comparisons")
    a.add_argument("which", choices=sorted(ABLATIONS))
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(func=cmd_ablate)

    o = sub.add_parser("oracle", parents=[common], help="exact tabular checks")
    o.add_argument("which", choices=("theorem1", "appendixA"))
    o.add_argument("--cases", type=int, default=None, help="number of random MDPs or trajectory sets")
    o.add_argument("--deterministic", action="store_true",
                   help="deterministic rewards from a single start state (theorem1 only)")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "oracle" and args.cases is None:
        args.cases = 50 if args.which == "theorem1" else 100
    try:
        config = load_run_config(args.config, args.seed)
    except (OSError, ValueError, TypeError) as exc:
        print(f"autobid: bad config: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, ok = args.func(args, config, out)
    write_manifest(out, " ".join(["autobid", *(argv if argv is not None else sys.argv[1:])]), config,
                   {**result, "invariants_ok": ok})
    print(json.dumps({"command": args.command, "ok": ok, **result}, default=str))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
