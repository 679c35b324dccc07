"""Command-line interface.

Errors are reported as one JSON object on stderr, with a distinct exit code
per failure class (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, UnsupportedAttackError
from .diffusion import DegenerateModelError, invert, sample
from .errors import DimensionError
from .fingerprint import FingerprintError, synthesize, synthesize_random_baseline
from .harness.config import ConfigError, ExperimentConfig, derive_seed, load_config
from .harness.report import summarize
from .harness.runs import Run, build_model, close_log, open_log, variant_config
from .io import FileFormatError, load_anchor, load_model, load_record, save_anchor, save_model, save_record, write_json
from .verify import verify
from .watermark import bits_to_str, make_anchor, make_key, random_message, str_to_bits

EXIT_CODES = {
    "usage": 2,
    "missing_file": 3,
    "invalid_config": 4,
    "dimension_mismatch": 5,
    "unsupported": 6,
    "numerical": 7,
    "internal": 1,
}


def _classify(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, DimensionError):
        return "dimension_mismatch"
    if isinstance(exc, (ConfigError, FileFormatError)):
        return "invalid_config"
    if isinstance(exc, UnsupportedAttackError):
        return "unsupported"
    if isinstance(exc, (FingerprintError, DegenerateModelError, FloatingPointError)):
        return "numerical"
    if isinstance(exc, ValueError):
        return "invalid_config"
    return "internal"


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _stamp(cfg: ExperimentConfig, **seeds) -> dict:
    return {"config_hash": cfg.hash, "master_seed": cfg.master_seed, "seeds": seeds}


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---- subcommands -----------------------------------------------------------------------------------

def cmd_make_model(args) -> int:
    cfg = _config(args)
    names = [s.name for s in cfg.zoo]
    if args.name not in names:
        raise ConfigError(f"no model named {args.name!r} in the zoo {names}")
    index = names.index(args.name)
    model = build_model(cfg, index)
    save_model(args.out, model)
    _print({"model_id": model.model_id, "out": str(args.out), **_stamp(cfg, model=cfg.model_seed(index))})
    return 0


def cmd_make_anchor(args) -> int:
    cfg = _config(args)
    key = make_key(cfg.key_seed(), cfg.key.k, cfg.D, cfg.key.beta, cfg.key.kappa)
    seed = derive_seed(cfg.master_seed, "anchor", args.index)
    rng = np.random.default_rng(seed)
    carrier = rng.standard_normal(cfg.D)
    m = str_to_bits(args.message) if args.message else random_message(key.k, rng)
    if m.shape != (key.k,):
        raise DimensionError(f"message has {m.size} bits, key carries k={key.k}")
    anchor = make_anchor(carrier, m, key)
    save_anchor(args.out, anchor)
    _print({"message": bits_to_str(anchor.message), "out": str(args.out),
            **_stamp(cfg, key=cfg.key_seed(), anchor=seed)})
    return 0


def cmd_invert(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    anchor = load_anchor(args.anchor)
    if anchor.image.shape != (model.D,):
        raise DimensionError(f"anchor D={anchor.image.shape[0]}, model D={model.D}")
    x_T = invert(model, anchor.image, refine=args.refine)
    back = sample(model, x_T)
    err = float(np.linalg.norm(back - anchor.image) / np.linalg.norm(anchor.image))
    doc = {"model_id": model.model_id, "x_T": x_T.tolist(), "roundtrip_relative_error": err, "refine": args.refine,
           **_stamp(cfg)}
    write_json(args.out, doc)
    _print({"model_id": model.model_id, "roundtrip_relative_error": err, "out": str(args.out)})
    return 0


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    anchor = load_anchor(args.anchor)
    optim = replace(variant_config(cfg, args.variant), seed=derive_seed(cfg.master_seed, "optim", model.model_id))
    synth = synthesize_random_baseline if args.variant == "baseline" else synthesize
    rec = synth(model, anchor, optim)
    rec.record_id = f"{model.model_id[:12]}/{args.variant}/{bits_to_str(anchor.message)}"
    rec.meta = {"variant": args.variant, **_stamp(cfg, optim=optim.seed)}
    save_record(args.out, rec)
    if args.trace_csv:
        Path(args.trace_csv).write_text(rec.trace_csv())
    _print({"record_id": rec.record_id, "bit_accuracy": rec.bit_accuracy, "iterations": rec.iterations_run,
            "out": str(args.out)})
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    suspect = load_model(args.model)
    records = [load_record(p) for p in args.records]
    alpha = args.alpha if args.alpha is not None else cfg.alpha
    two_sided = args.two_sided or cfg.two_sided
    rep = verify(suspect, records, alpha, two_sided)
    doc = {"kind": "verification", "report": rep.to_dict(), **_stamp(cfg)}
    write_json(args.out, doc)
    _print({"verdict": rep.verdict, "mean": rep.mean, "p": rep.p, "out": str(args.out)})
    return 0


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"attack parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        params[k] = json.loads(v) if v[:1] in "-0123456789[" else v
    return params


def cmd_attack(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    spec = AttackSpec(args.kind, _parse_params(args.param), args.attack_seed)
    attacked = spec.apply(model)
    attacked = attacked.with_params(attacked.params(), {**attacked.provenance, **_stamp(cfg, attack=spec.seed)})
    save_model(args.out, attacked)
    _print({"source_model_id": model.model_id, "model_id": attacked.model_id, "attack": spec.label,
            "out": str(args.out)})
    return 0


def _run(args) -> Run:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    open_log(out)
    return Run(cfg, out)


def cmd_matrix(args) -> int:
    run = _run(args)
    try:
        docs = [run.matrix(v) for v in args.variant]
        if args.attacks:
            run.attacks()
    finally:
        close_log()
    _print({v: d["summary"] for v, d in zip(args.variant, docs)})
    return 0


def cmd_ablate(args) -> int:
    run = _run(args)
    try:
        doc = run.ablate()
    finally:
        close_log()
    _print({"off_diagonal_increase": doc["off_diagonal_increase"]})
    return 0


def cmd_sweep(args) -> int:
    run = _run(args)
    try:
        if args.axis == "steps":
            doc = run.sweep_steps(tuple(args.grids))
        elif args.axis == "payload":
            doc = run.sweep_payload()
        else:
            doc = run.sweep_sampler()
    finally:
        close_log()
    _print({"kind": doc["kind"], "rows": len(doc["rows"])})
    return 0


def cmd_report(args) -> int:
    text, problems = summarize(args.run_dir)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# ---- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffprint", description="Fingerprint noise lab for toy diffusion models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config JSON (defaults are used when omitted)")
        sp.add_argument("--seed", type=int, help="override the config master seed")
        if out_required is not None:
            sp.add_argument("--out", "-o", required=out_required, help="output path")

    sp = sub.add_parser("make-model", help="build one zoo model and write its model file")
    common(sp)
    sp.add_argument("--name", required=True, help="zoo entry name, e.g. gmm-0")
    sp.set_defaults(func=cmd_make_model)

    sp = sub.add_parser("make-anchor", help="embed a message into a seeded carrier")
    common(sp)
    sp.add_argument("--message", help="bit string of length k (random when omitted)")
    sp.add_argument("--index", type=int, default=0, help="anchor index used in seed derivation")
    sp.set_defaults(func=cmd_make_anchor)

    sp = sub.add_parser("invert", help="map an anchor back to its trajectory origin")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--anchor", required=True)
    sp.add_argument("--refine", type=int, default=0, help="fixed-point refinement sweeps per step")
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("synthesize", help="optimize fingerprint noise for a model and anchor")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--anchor", required=True)
    sp.add_argument("--variant", choices=("ours", "baseline", "ablation"), default="ours")
    sp.add_argument("--trace-csv", help="also write the loss trace as CSV")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("verify", help="query a suspect with fingerprint records and test against chance")
    common(sp)
    sp.add_argument("--model", required=True, help="suspect model file")
    sp.add_argument("--records", nargs="+", required=True)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--two-sided", action="store_true")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attack", help="apply finetune, prune or quantize to a model file")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--kind", required=True, choices=("finetune", "prune", "quantize"))
    sp.add_argument("--param", action="append", metavar="KEY=VALUE",
                    help="steps, lr, shift (finetune); ratio (prune); mantissa_bits (quantize)")
    sp.add_argument("--attack-seed", type=int, default=0)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("matrix", help="cross-model verification matrix over the zoo")
    common(sp, out_required=False)
    sp.add_argument("--variant", nargs="+", choices=("ours", "baseline", "ablation"), default=["ours"])
    sp.add_argument("--attacks", action="store_true", help="also run the configured attacks (robustness table)")
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("ablate", help="full objective vs both anchoring terms removed")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="verification steps, payload length, or sampler stochasticity")
    common(sp, out_required=False)
    sp.add_argument("axis", choices=("steps", "payload", "sampler"))
    sp.add_argument("--grids", type=int, nargs="+", default=[10, 25, 50])
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="markdown summary of a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", "-o", help="also write the summary here")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured report
        kind = _classify(exc)
        err = {"error": kind, "type": exc.__class__.__name__, "message": str(exc), "exit_code": EXIT_CODES[kind],
               "command": args.command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
