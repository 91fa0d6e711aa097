"""Command-line driver: ``dfm {train,sample,search,eval,gradcheck}``.

Every command takes ``--seed`` and writes its resolved configuration next to
its outputs. The output directory is ``--out``, else ``$DFM_OUTPUT_DIR``,
else the config's ``output_dir``.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 validation
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import kernels
from .config import RunConfig, load_config
from .datagen import DatasetSpec, NoteSample, ground_truth_batch, load_dataset, make_dataset, write_samples_csv
from .errors import ConfigError, DFMError, InputDomainError, NumericDomainError
from .metrics import attribute_deviation, energy_distance, timbre_consistency_loss
from .net import ConditionSet, NetConfig, NetParams, backward_batch, finite_diff_grad, forward_batch, relative_error
from .rng import EVAL, GRADCHECK, SAMPLE, Stream
from .sampler import SamplerConfig, generate_trajectory
from .search import SearchConfig, best_of_n, embed_condition_text, generate_instrument
from .train import train, write_log

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4
OUTPUT_ENV = "DFM_OUTPUT_DIR"
GRADCHECK_TOL = 1e-4
METRICS_HEADER = ["metric", "condition", "value", "n", "seed"]


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or os.environ.get(OUTPUT_ENV) or (cfg.output_dir if cfg else None) or "runs/default"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, command: str, payload: dict) -> None:
    text = yaml.safe_dump({"command": command, **payload}, sort_keys=True, default_flow_style=False)
    (out / "config.resolved.yaml").write_text(text)


def _parse_cond(text: str) -> ConditionSet:
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"condition must be 'class,pitch,velocity', got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"condition must be 'class,pitch,velocity', got {text!r}")
    return ConditionSet(*parts)


def _parse_range(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _load_checkpoint(path) -> NetParams:
    try:
        return NetParams.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def _spec_from(params: NetParams | None) -> DatasetSpec | None:
    if params is not None and "dataset" in params.meta:
        return DatasetSpec.from_dict(params.meta["dataset"])
    return None


def _sampler_cfg(args, base: SamplerConfig) -> SamplerConfig:
    return SamplerConfig(
        num_steps=args.num_steps if args.num_steps is not None else base.num_steps,
        solver=args.solver or base.solver,
        tau=args.tau if getattr(args, "tau", None) is not None else base.tau,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=args.seed,
            dataset=dataclasses.replace(cfg.dataset, seed=args.seed),
            train=dataclasses.replace(cfg.train, seed=args.seed),
            sampler=dataclasses.replace(cfg.sampler, seed=args.seed),
        )
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=args.steps))
    out = _out_dir(args, cfg)
    samples = make_dataset(cfg.dataset, cfg.n_per_condition)
    net_cfg = cfg.net_config()
    params = NetParams.init(net_cfg, cfg.train.seed)
    result = train(samples, cfg.train, params=params)
    result.params.meta = {"dataset": cfg.dataset.to_dict(), "run": cfg.to_dict()}
    result.params.save(out / "checkpoint.dfm")
    with open(out / "train_log.jsonl", "w") as fh:
        write_log(result.log, fh)
    (out / "config.resolved.yaml").write_text(yaml.safe_dump({"command": "train", **cfg.to_dict()}, sort_keys=True))
    if result.log:
        print(f"trained {len(result.log)} steps: loss {result.log[0]['loss']:.4f} -> {result.log[-1]['loss']:.4f}")
    print(f"wrote {out / 'checkpoint.dfm'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params = _load_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    args.seed = seed
    scfg = _sampler_cfg(args, cfg.sampler)
    cond = _parse_cond(args.cond)
    if args.n < 0:
        raise ConfigError("n must be >= 0")
    out = _out_dir(args, cfg)
    spec = _spec_from(params)
    root = Stream(seed).child(SAMPLE, 0)
    trajs = [generate_trajectory(params, cond, scfg, root.child(i).generator()) for i in range(args.n)]
    with open(out / "samples.csv", "w", newline="") as fh:
        if trajs:
            write_samples_csv(fh, [NoteSample(t.final, cond) for t in trajs], spec, d=params.config.d)
    if args.dump:
        with open(out / "trajectories.jsonl", "w") as fh:
            for i, t in enumerate(trajs):
                rec = {"index": i, "cond": list(cond), "sampler": dataclasses.asdict(scfg), "trajectory": t.to_dict()}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_resolved(
        out, "sample",
        {"checkpoint": str(args.checkpoint), "cond": list(cond), "n": args.n, "seed": seed,
         "sampler": dataclasses.asdict(scfg), "dump": bool(args.dump)},
    )
    print(f"wrote {args.n} samples to {out / 'samples.csv'}")
    return EXIT_OK


def _search_cfg(args, base: SearchConfig) -> SearchConfig:
    kw = {}
    for name, attr in (("n", "n"), ("objective", "objective"), ("guided_steps", "guided_steps"),
                       ("branch", "branch"), ("lam", "lam"), ("tau", "tau")):
        val = getattr(args, attr)
        if val is not None:
            kw[name] = val
    return dataclasses.replace(base, **kw)


def _parse_sweep(text: str) -> list[int]:
    key, _, values = text.partition("=")
    if key != "guided_steps" or not values:
        raise ConfigError("--sweep expects guided_steps=v1,v2,...")
    return [int(v) for v in values.split(",")]


def cmd_search(args) -> int:
    params = _load_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    args.seed = seed
    scfg = _sampler_cfg(args, cfg.sampler)
    search_cfg = _search_cfg(args, cfg.search)
    spec = _spec_from(params) or cfg.dataset
    if args.pitches:
        if args.cond:
            raise ConfigError("give either --cond or --pitches, not both")
        conds = [ConditionSet(args.class_id, p, args.velocity) for p in _parse_range(args.pitches)]
    else:
        conds = [_parse_cond(args.cond or "0,0,0")]
    out = _out_dir(args, cfg)
    text_emb = embed_condition_text(conds[0], spec, search_cfg.embed_seed, search_cfg.embed_dim)
    root = Stream(seed).child(SAMPLE)
    resolved = {
        "checkpoint": str(args.checkpoint), "conds": [list(c) for c in conds], "seed": seed,
        "sampler": dataclasses.asdict(scfg), "search": dataclasses.asdict(search_cfg),
    }

    if args.sweep:
        values = _parse_sweep(args.sweep)
        resolved["sweep"] = {"guided_steps": values, "seeds": args.sweep_seeds}
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "guided_steps", "prompt", "objective_value"])
            for s in range(seed, seed + args.sweep_seeds):
                for g in values:
                    sc = dataclasses.replace(search_cfg, guided_steps=g)
                    res = best_of_n(params, conds[0], [], text_emb, sc, scfg, Stream(s).child(SAMPLE, 0))
                    w.writerow([s, g, repr(res.winner.scores["prompt"]), repr(res.log[res.winner.index]["value"])])
        _write_resolved(out, "search", resolved)
        print(f"wrote {out / 'sweep.csv'}")
        return EXIT_OK

    if len(conds) == 1:
        res = best_of_n(params, conds[0], [], text_emb, search_cfg, scfg, root.child(0))
        winners = [res.winner.sample]
        log = res.log
        dumps = [{"note": 0, "cond": list(conds[0]), "prior_samples": [], "prior_embeddings": [],
                  "candidates": [_candidate_record(c) for c in res.candidates], "winner": res.winner.index}]
    else:
        inst = generate_instrument(params, conds, search_cfg, scfg, root, text_emb)
        winners = inst.samples
        conds = inst.conds
        log = inst.log
        dumps = [{"notes": inst.notes}]
    with open(out / "winners.csv", "w", newline="") as fh:
        write_samples_csv(fh, [NoteSample(x, c) for x, c in zip(winners, conds)], spec)
    with open(out / "selection_log.jsonl", "w") as fh:
        write_log(log, fh)
    if args.dump:
        payload = {"text_embedding": text_emb.tolist(), "lam": search_cfg.lam,
                   "objective": search_cfg.objective, "notes": dumps}
        (out / "candidates.json").write_text(json.dumps(payload, sort_keys=True))
    _write_resolved(out, "search", resolved)
    print(f"wrote {len(winners)} winner(s) to {out / 'winners.csv'}")
    return EXIT_OK


def _candidate_record(c) -> dict:
    return {"index": c.index, "sample": c.sample.tolist(), "embedding": c.embedding.tolist(),
            "scores": c.scores, "trajectory": c.trajectory.to_dict()}


def _cond_label(c) -> str:
    return "/".join(str(int(v)) for v in c)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    spec = None
    if args.checkpoint:
        spec = _spec_from(_load_checkpoint(args.checkpoint))
    samples: list[NoteSample] = []
    for path in args.samples:
        try:
            got, file_spec = load_dataset(path)
        except OSError as exc:
            raise ConfigError(f"cannot read samples {path}: {exc}") from exc
        samples.extend(got)
        spec = spec or file_spec
    if spec is None:
        spec = cfg.dataset if args.config else None
    if spec is None:
        raise ConfigError("no dataset spec: pass --checkpoint, --config, or samples with a spec header")
    max_samples = cfg.eval.get("max_samples")
    out = _out_dir(args, cfg)
    by_cond: dict[ConditionSet, list[np.ndarray]] = {}
    for s in samples:
        by_cond.setdefault(ConditionSet(*s.cond), []).append(s.x)
    reference: dict[ConditionSet, list[np.ndarray]] = {}
    for path in args.reference or []:
        try:
            got, _ = load_dataset(path)
        except OSError as exc:
            raise ConfigError(f"cannot read reference {path}: {exc}") from exc
        for s in got:
            reference.setdefault(ConditionSet(*s.cond), []).append(s.x)
    rows = []
    gt_root = Stream(seed).child(EVAL)
    for cond in sorted(by_cond):
        xs = np.array(by_cond[cond])
        if args.reference:
            if cond not in reference:
                raise ConfigError(f"reference has no samples for condition {tuple(cond)}")
            gt = np.array(reference[cond])
        else:
            gt = ground_truth_batch(spec, cond, len(xs), gt_root.child(*cond).generator())
        rows.append(["energy_distance", _cond_label(cond), energy_distance(xs, gt, max_samples), len(xs), seed])
        dev = attribute_deviation(xs, [cond] * len(xs), spec)
        rows.append(["pitch_deviation", _cond_label(cond), dev["pitch"], len(xs), seed])
        rows.append(["velocity_deviation", _cond_label(cond), dev["velocity"], len(xs), seed])
    by_class: dict[int, list[np.ndarray]] = {}
    for s in samples:
        by_class.setdefault(int(s.cond[0]), []).append(s.x)
    for cls in sorted(by_class):
        group = by_class[cls]
        if len(group) >= 2:
            rows.append(["tcc", f"class={cls}", timbre_consistency_loss(group), len(group), seed])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for metric, cond, value, n, s in rows:
            w.writerow([metric, cond, repr(float(value)), n, s])
    _write_resolved(out, "eval", {"samples": [str(p) for p in args.samples], "seed": seed,
                                  "reference": [str(p) for p in args.reference or []],
                                  "dataset": spec.to_dict(), "max_samples": max_samples})
    print(f"wrote {len(rows)} metric rows to {out / 'metrics.csv'}")
    return EXIT_OK


def _parse_sizes(text: str) -> dict:
    sizes = {"d": 2, "hidden": 6, "depth": 2, "n_classes": 2, "n_pitches": 3, "n_velocities": 2}
    if text:
        for part in text.split(","):
            key, _, val = part.partition("=")
            if key not in sizes:
                raise ConfigError(f"unknown size {key!r}; expected one of {sorted(sizes)}")
            sizes[key] = int(val)
    return sizes


def gradcheck(seed: int, sizes: dict, batch: int = 3, step: float = 1e-3, corrupt: float = 0.0) -> dict[str, float]:
    """Max relative error per tensor between backward_batch and five-point central differences.

    The log-variance head is randomized so its gradient path is exercised.
    ``corrupt`` scales the analytic gradients by (1 + corrupt) as a
    negative control.
    """
    cfg = NetConfig(**sizes)
    params = NetParams.init(cfg, seed)
    rng = Stream(seed).child(GRADCHECK).generator()
    params.tensors["logvar_w"][:] = rng.uniform(-0.5, 0.5, size=params.tensors["logvar_w"].shape)
    x = rng.standard_normal((batch, cfg.d))
    t = rng.uniform(0.0, 1.0, size=batch)
    conds = np.stack(
        [rng.integers(0, cfg.n_classes, batch), rng.integers(0, cfg.n_pitches, batch),
         rng.integers(0, cfg.n_velocities, batch)], axis=1)
    g_mu = rng.standard_normal((batch, cfg.d))
    g_lv = rng.standard_normal(batch)

    def loss(p):
        mu, lv = forward_batch(p, x, t, conds)
        return float((g_mu * mu).sum() + (g_lv * lv).sum())

    _, _, cache = forward_batch(params, x, t, conds, keep_cache=True)
    analytic = backward_batch(params, cache, g_mu, g_lv)
    numeric = finite_diff_grad(params, loss, step, order=4)
    return {k: float(relative_error(analytic[k] * (1.0 + corrupt), numeric[k]).max()) for k in analytic}


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    sizes = _parse_sizes(args.sizes)
    out = _out_dir(args)
    per_seed = []
    groups: dict[str, float] = {}
    for s in range(seed, seed + args.seeds):
        errs = gradcheck(s, sizes, corrupt=args.corrupt)
        per_seed.append({"seed": s, "max_rel_err": max(errs.values())})
        for k, v in errs.items():
            group = k.split(".", 1)[-1] if k.startswith("block") else k
            groups[group] = max(groups.get(group, 0.0), v)
    worst = max(groups.values())
    passed = worst < GRADCHECK_TOL
    report = {"sizes": sizes, "seeds": per_seed, "groups": groups, "max_rel_err": worst,
              "tolerance": GRADCHECK_TOL, "passed": passed}
    (out / "gradcheck.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    _write_resolved(out, "gradcheck", {"seed": seed, "seeds": args.seeds, "sizes": sizes})
    for g in sorted(groups):
        print(f"{g:16s} {groups[g]:.3e}")
    print(f"max relative error {worst:.3e} ({'PASS' if passed else 'FAIL'}, tol {GRADCHECK_TOL:g})")
    return EXIT_OK if passed else EXIT_VALIDATION


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s (kernels: {kernels.BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help=f"output directory (overrides ${OUTPUT_ENV})")
        if config:
            p.add_argument("--config", default=None, help="YAML run configuration")

    def sampling(p):
        p.add_argument("--num-steps", type=int, default=None)
        p.add_argument("--solver", choices=("euler", "midpoint", "rk4"), default=None)
        p.add_argument("--tau", type=float, default=None)

    p = sub.add_parser("train", help="train a network on the configured dataset")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(p)
    sampling(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cond", required=True, help="class,pitch,velocity")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--dump", action="store_true", help="write replayable trajectories")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("search", help="best-of-N / guided search, single note or instrument")
    common(p)
    sampling(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cond", default=None, help="class,pitch,velocity (single note)")
    p.add_argument("--pitches", default=None, help="instrument pitch ids, e.g. 0-11")
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--velocity", type=int, default=0)
    p.add_argument("--objective", default=None)
    p.add_argument("--n", "-N", type=int, default=None)
    p.add_argument("--guided-steps", type=int, default=None)
    p.add_argument("--branch", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--sweep", default=None, help="e.g. guided_steps=1,2,4,8,16")
    p.add_argument("--sweep-seeds", type=int, default=5)
    p.add_argument("--dump", action="store_true", help="write all candidates for offline rescoring")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="metrics CSV for sample files")
    common(p)
    p.add_argument("samples", nargs="+")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--reference", action="append", default=None,
                   help="samples file to compare against (default: seeded ground-truth draws)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    common(p, config=False)
    p.add_argument("--sizes", default="", help="e.g. d=2,hidden=6,depth=2")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDomainError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DFMError, InputDomainError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
