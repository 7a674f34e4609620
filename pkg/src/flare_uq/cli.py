"""Command-line entry point: data, training, scoring, evaluation and studies.

Every command writes deterministic files (sorted JSON, full-precision CSV,
salted SVG) so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .datasets import generate, read_csv, save_dataset, write_csv
from .denoiser import Architecture, DenoiserModel, load_checkpoint, save_checkpoint
from .diffusion import make_noise, make_schedule, write_schedule_csv
from .errors import (
    FlareError,
    InvalidArgument,
    NotPositiveDefinite,
    NumericalBreakdown,
    RankDeficient,
    ResourceLimit,
    SchemaError,
    ShapeError,
)

log = logging.getLogger("flare_uq")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SCHEMA_PATH = Path(__file__).with_name("schemas") / "metrics_report.schema.json"


class CommandError(Exception):
    """Usage-level failure with a user-facing message."""


# -- small I/O helpers -----------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(cfgmod.dumps(_jsonable(obj)), encoding="utf-8")


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                              for v in r) + "\n")


def write_scores(path: Path, ids, scores, raw) -> None:
    write_rows(path, ["sample_id", "score", "raw_trace"],
               [(int(i), float(s), float(r)) for i, s, r in zip(ids, scores, raw)])


def read_scores(path) -> tuple:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header[:2] != ["sample_id", "score"]:
                raise SchemaError(f"{path}: expected header sample_id,score,...")
            data = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
    except FileNotFoundError:
        raise CommandError(f"scores file {path} not found") from None
    return data[:, 0].astype(np.int64), data[:, 1]


def _read_samples(path) -> np.ndarray:
    try:
        return read_csv(path)
    except FileNotFoundError:
        raise CommandError(f"samples file {path} not found") from None


def _out(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- pipeline pieces -------------------------------------------------------

def build_schedule(cfg):
    return make_schedule(cfg["schedule"]["kind"], cfg["schedule"]["T"])


def build_dataset(cfg, seed=None):
    dc = cfg["dataset"]
    return generate(dc["name"], cfg["seed"] if seed is None else seed,
                    standardize=dc["standardize"], **dc["overrides"])


def build_arch(cfg) -> Architecture:
    mc = cfg["model"]
    return Architecture(cfgmod.data_dim(cfg), mc["hidden"], mc["n_blocks"], mc["time_embed_dim"],
                        cfg["schedule"]["T"])


def load_model(path, sched) -> DenoiserModel:
    try:
        model, ema, _ = load_checkpoint(path, sched.hash)
    except FileNotFoundError:
        raise CommandError(f"checkpoint {path} not found") from None
    return ema if ema is not None else model


def _checkpoint_path(args, cfg) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg["output_dir"]) / "model.ckpt"


def posterior_for(cfg, model, dataset, sched, kind=None):
    """Posterior for an estimator kind; returns (posterior, label)."""
    from .laplace import build_posterior

    ec = cfg["estimator"]
    kind = kind or ec["kind"]
    common = dict(damping=ec["damping"], n_pairs=ec["n_pairs"], seed=cfg["seed"],
                  scale=ec["scale"], dense_limit=ec["dense_limit"])
    if kind == "flare":
        m = min(cfgmod.default_m(cfg, model.p), model.p)
        return build_posterior(model, dataset, sched, "subnet", m=m, **common)
    if kind == "full":
        return build_posterior(model, dataset, sched, "full", **common)
    if kind in ("llla", "bayesdiff"):
        return build_posterior(model, dataset, sched, "last_layer", **common)
    raise InvalidArgument(f"unknown estimator {kind!r}")


def score_samples(cfg, model, dataset, sched, kind, n_samples):
    """Returns (x0, scores, raw_trace, aleatoric, sample_ids)."""
    from .uncertainty import epistemic_rollout, predictive_variance_rollout

    noise = make_noise(sched, model.d, cfg["seed"], np.arange(n_samples))
    post = posterior_for(cfg, model, dataset, sched, kind)
    if kind == "bayesdiff":
        res = predictive_variance_rollout(model, sched, post, cfg["estimator"]["S"], noise,
                                          np.random.default_rng([cfg["seed"], 3]),
                                          chunk=cfg["score"]["chunk"])
        raw = res.var[0].sum(axis=1)
        return res.x0, res.scores, raw, np.zeros(n_samples), res.sample_ids
    traj = epistemic_rollout(model, sched, post, cfg["sampler"], noise, estimator=kind,
                             stride=cfg["score"]["stride"], chunk=cfg["score"]["chunk"])
    return traj.x0, traj.scores, traj.trace0, traj.aleatoric, traj.sample_ids


# -- commands --------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    out = _out(cfg)
    ds = build_dataset(cfg)
    path = out / f"{ds.name}.csv"
    save_dataset(ds, path)
    print(f"wrote {path} ({ds.n} x {ds.dim})")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .training import TrainConfig, eval_loss, train

    out = _out(cfg)
    sched = build_schedule(cfg)
    ds = build_dataset(cfg)
    arch = build_arch(cfg)
    model = DenoiserModel.init(arch, np.random.default_rng([cfg["seed"], 0]))
    tc = TrainConfig(seed=cfg["seed"], **cfg["train"])
    res = train(model, ds, sched, tc, log_every=max(1, tc.steps // 20) if tc.steps else 0)
    ckpt = _checkpoint_path(args, cfg)
    save_checkpoint(ckpt, res.model, res.ema, cfg["seed"], sched.hash,
                    {"dataset": ds.name, "steps": tc.steps})
    manifest = {
        "command": "train",
        "checkpoint": str(ckpt),
        "config": cfg,
        "schedule": {"kind": sched.kind, "T": sched.T, "hash": sched.hash},
        "p": model.p,
        "final_loss": float(np.mean(res.losses[-100:])) if res.losses else None,
        "eval_loss_ema": eval_loss(res.ema, ds, sched),
        "skipped_steps": res.skipped,
    }
    write_json(out / "train_manifest.json", manifest)
    print(f"wrote {ckpt} (p={model.p}, T={sched.T})")
    return EXIT_OK


def cmd_score(args, cfg) -> int:
    from . import plotting

    out = _out(cfg)
    sched = build_schedule(cfg)
    model = load_model(_checkpoint_path(args, cfg), sched)
    ds = build_dataset(cfg)
    n = args.n_samples or cfg["score"]["n_samples"]
    kind = cfg["estimator"]["kind"]
    x0, scores, raw, ale, ids = score_samples(cfg, model, ds, sched, kind, n)
    write_csv(x0, out / "samples.csv")
    write_scores(out / f"scores_{kind}.csv", ids, scores, raw)
    manifest = {
        "command": "score",
        "config": cfg,
        "estimator": kind,
        "n_samples": n,
        "noise_seed": cfg["seed"],
        "schedule_hash": sched.hash,
        "p": model.p,
        "filter_percentile": cfg["filter_percentile"],
        "mean_score": float(np.mean(scores)),
        "max_aleatoric": float(np.max(ale)) if len(ale) else 0.0,
    }
    write_json(out / f"score_manifest_{kind}.json", manifest)
    if not args.no_plots:
        plotting.score_scatter(x0, scores, out / f"scores_{kind}.svg", title=kind)
    print(f"scored {n} samples with {kind}; mean score {np.mean(scores):.6g}")
    return EXIT_OK


def _parse_scores_args(items):
    out = {}
    for it in items:
        if "=" not in it:
            raise CommandError(f"--scores expects method=path, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


def cmd_eval(args, cfg) -> int:
    import jsonschema

    from . import plotting
    from .eval.protocol import evaluate_filtering

    out = _out(cfg)
    gen = _read_samples(args.samples)
    if args.real:
        real = _read_samples(args.real)
    else:
        real = build_dataset(cfg).samples
    if real.shape[1] != gen.shape[1]:
        raise CommandError(f"real dim {real.shape[1]} != generated dim {gen.shape[1]}")
    scores = {}
    for name, path in sorted(_parse_scores_args(args.scores).items()):
        ids, s = read_scores(path)
        if len(s) != len(gen) or not np.array_equal(ids, np.arange(len(gen))):
            raise CommandError(f"{path}: scores do not align with {args.samples}")
        scores[name] = s
    compare = {}
    if "flare" in scores and "llla" in scores:
        compare["flare_vs_llla_gc"] = ("flare", "llla", "gc")
    if "flare" in scores and "bayesdiff" in scores:
        compare["flare_vs_bayesdiff_auc"] = ("flare", "bayesdiff", "auc")
    ev = cfg["eval"]
    res = evaluate_filtering(real, gen, scores, cfg["filter_percentile"], seed=cfg["seed"],
                             B=ev["B"], dataset=cfg["dataset"]["name"],
                             disc_steps=ev["disc_steps"], disc_width=ev["disc_width"],
                             compare=compare)
    report = {"reports": res["reports"], "comparisons": res["comparisons"],
              "discriminator": res["discriminator"], "config": cfg}
    report = _jsonable(report)
    schema = json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))
    jsonschema.validate(report, schema)
    write_json(out / "metrics_report.json", report)
    if not args.no_plots:
        gi = res["held_out"]["gen_eval"]
        for name, s in scores.items():
            plotting.score_scatter(gen[gi], s[gi], out / f"eval_{name}.svg", title=name)
    print("method,acc_unfiltered,acc_filtered,gap_closure_pct,roc_auc,bootstrap_p")
    for name, r in sorted(res["reports"].items()):
        gc = "n/a" if r["gap_closure_pct"] is None else f"{r['gap_closure_pct']:.3f}"
        p = "n/a" if r["bootstrap_p"] is None else f"{r['bootstrap_p']:.4f}"
        print(f"{name},{r['acc_unfiltered']:.4f},{r['acc_filtered']:.4f},{gc},{r['roc_auc']:.4f},{p}")
    return EXIT_OK


# -- validation studies ----------------------------------------------------

def _tiny_model(cfg, sched, args):
    if args.checkpoint:
        return load_model(args.checkpoint, sched)
    return DenoiserModel.init(build_arch(cfg), np.random.default_rng([cfg["seed"], 0]))


def _validate_unroll(args, cfg, out):
    from .eval.studies import unroll_check

    rep = unroll_check(100, np.random.default_rng([cfg["seed"], 21]))
    return rep, rep["max_rel_trace_dev"] < 1e-10, f"max relative trace deviation {rep['max_rel_trace_dev']:.3e}"


def _validate_lemma1(args, cfg, out):
    from .eval.studies import lemma1_check

    rep = lemma1_check(100, np.random.default_rng([cfg["seed"], 22]))
    return rep, rep["max_rel_frobenius_dev"] < 1e-8, f"max relative deviation {rep['max_rel_frobenius_dev']:.3e}"


def _validate_sketch(args, cfg, out):
    from . import plotting
    from .eval.studies import low_rank_instance, sketch_convergence_study

    J_pop, J_t = low_rank_instance(rng=np.random.default_rng([cfg["seed"], 23]))
    grid = [32, 64, 128, 256, 512]
    rep = sketch_convergence_study(J_pop, J_t, grid, 50, np.random.default_rng([cfg["seed"], 24]))
    means = rep.mean_rel_error[:4]
    mono = all(b < a for a, b in zip(means, means[1:]))
    ok = mono and -0.7 <= rep.slope <= -0.3 and rep.error_at_p < 1e-10 and not rep.flagged_low_alignment
    write_rows(out / "sketch_trials.csv", ["m", "trial", "rel_error"],
               [(m, k, e) for m, errs in zip(grid, rep.raw) for k, e in enumerate(errs)])
    if not args.no_plots:
        plotting.loglog_line(grid[:4], means, out / "sketch.svg", "m", "mean relative trace error",
                             ref_slope=-0.5)
    d = rep.to_dict()
    d.pop("raw")
    return d, ok, f"slope {rep.slope:.3f}, error at m=p {rep.error_at_p:.2e}, monotone {mono}"


def _validate_prop1(args, cfg, out):
    from .eval.studies import prop1_mc_check, random_spd

    sched = build_schedule(cfg)
    model = _tiny_model(cfg, sched, args)
    rng = np.random.default_rng([cfg["seed"], 25])
    t = sched.T // 2
    x_t = rng.standard_normal(model.d)
    ll = model.last_layer_indices()
    lin = prop1_mc_check(model, random_spd(len(ll), rng), sched, x_t, t, 4096, rng,
                         scale=1e-2, indices=ll)
    full = prop1_mc_check(model, np.eye(model.p), sched, x_t, t, 4096, rng, scale=1e-4)
    ok = lin["rel_trace_error"] < 0.05 and full["rel_trace_error"] < 0.10
    rep = {"linear_head": lin, "nonlinear": full, "t": t}
    return rep, ok, (f"linear-head error {lin['rel_trace_error']:.3%}, "
                     f"nonlinear error {full['rel_trace_error']:.3%}")


def _validate_cross_term(args, cfg, out):
    from .eval.studies import cross_term_study

    sched = build_schedule(cfg)
    model = _tiny_model(cfg, sched, args)
    ds = build_dataset(cfg)
    ev = cfg["eval"]
    c2 = json.loads(json.dumps(cfg))
    c2["estimator"]["damping"] = ev["cross_term_damping"]
    c2["estimator"]["dense_limit"] = max(model.p, c2["estimator"]["dense_limit"])
    post = posterior_for(c2, model, ds, sched, "full")
    rep = cross_term_study(model, post, sched, ev["n_paths"], ev["S"], ev["thresholds"],
                           seed=cfg["seed"])
    write_rows(out / "cross_term_paths.csv", ["path", "pct_change"],
               list(enumerate(rep.pct_change)))
    tau = 0.01
    test = next((t for t in rep.tests if abs(t["tau"] - tau) < 1e-15), None)
    ok = rep.mean_abs < tau and test is not None and test["p"] < 1e-4
    return rep.to_dict(), ok, f"mean |du/u| {rep.mean_abs:.5f}% (threshold {tau}%)"


def _validate_schedule(args, cfg, out):
    sched = build_schedule(cfg)
    write_schedule_csv(sched, out / "schedule.csv")
    ok = (abs(sched.tilde_beta[1]) == 0.0 and np.all(np.diff(sched.bar_alpha[1:]) < 0)
          and np.all((sched.beta[1:] > 0) & (sched.beta[1:] < 1)))
    rep = {"kind": sched.kind, "T": sched.T, "hash": sched.hash,
           "bar_alpha_T": float(sched.bar_alpha[-1]), "tilde_beta_1": float(sched.tilde_beta[1])}
    return rep, bool(ok), f"T={sched.T} bar_alpha_T={sched.bar_alpha[-1]:.3e}"


VALIDATORS = {
    "unroll": _validate_unroll,
    "lemma1": _validate_lemma1,
    "sketch": _validate_sketch,
    "prop1": _validate_prop1,
    "cross-term": _validate_cross_term,
    "schedule": _validate_schedule,
}


def cmd_validate(args, cfg) -> int:
    out = _out(cfg)
    rep, ok, msg = VALIDATORS[args.study](args, cfg, out)
    name = args.study.replace("-", "_")
    write_json(out / f"validate_{name}.json", {"study": args.study, "pass": bool(ok), "report": rep,
                                                "seed": cfg["seed"]})
    print(f"{args.study}: {'PASS' if ok else 'FAIL'}: {msg}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_ablate_keep(args, cfg) -> int:
    from . import plotting
    from .uncertainty import keep_fraction_sweep

    out = _out(cfg)
    sched = build_schedule(cfg)
    model = load_model(_checkpoint_path(args, cfg), sched)
    ds = build_dataset(cfg)
    ab = cfg["ablate"]
    ec = cfg["estimator"]
    rows = keep_fraction_sweep(model, sched, ds, ab["fractions"], ab["n_samples"], cfg["seed"],
                               cfg["sampler"], ec["damping"], ec["n_pairs"],
                               max(ec["dense_limit"], 1 << 14))
    write_rows(out / "ablate_keep.csv", ["fraction", "m", "mean_trace", "noise_seed"],
               [(r["fraction"], r["m"], r["mean_trace"], r["noise_seed"]) for r in rows])
    write_json(out / "ablate_keep_manifest.json",
               {"command": "ablate-keep", "config": cfg, "noise_seed": cfg["seed"],
                "fractions": ab["fractions"], "p": model.p, "rows": rows})
    if not args.no_plots:
        plotting.line([r["fraction"] for r in rows], [r["mean_trace"] for r in rows],
                      out / "ablate_keep.svg", "kept fraction", "mean trace / d", logx=True)
    for r in rows:
        print(f"{r['fraction']},{r['m']},{r['mean_trace']:.6g}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="preset:sine",
                        help="JSON config path or preset:<grid|sine|chirp|damped>")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--no-plots", action="store_true", help="skip SVG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flare-uq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    tr = sub.add_parser("train", parents=[common], help="train the denoiser")
    tr.add_argument("--checkpoint", default=None)
    sc = sub.add_parser("score", parents=[common], help="sample and score")
    sc.add_argument("--checkpoint", default=None)
    sc.add_argument("--n-samples", type=int, default=None)
    ev = sub.add_parser("eval", parents=[common], help="discriminator filtering report")
    ev.add_argument("--samples", required=True)
    ev.add_argument("--scores", nargs="+", required=True, metavar="METHOD=PATH")
    ev.add_argument("--real", default=None, help="real data CSV (default: regenerate)")
    va = sub.add_parser("validate", parents=[common], help="numerical validation studies")
    va.add_argument("study", choices=sorted(VALIDATORS))
    va.add_argument("--checkpoint", default=None)
    ak = sub.add_parser("ablate-keep", parents=[common], help="kept-fraction sweep")
    ak.add_argument("--checkpoint", default=None)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "validate": cmd_validate,
    "ablate-keep": cmd_ablate_keep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise CommandError("--seed must be non-negative")
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["output_dir"] = args.out
        if args.threads is not None and args.threads < 1:
            raise CommandError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except (CommandError, SchemaError, InvalidArgument, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalBreakdown, NotPositiveDefinite, RankDeficient) as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ResourceLimit, FlareError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
