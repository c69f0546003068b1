"""``abbnn`` command line: gendata, train, export, infer, verify, audit, slopes.

Exit codes: 0 ok, 1 invariant failure, 2 configuration error,
3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AuditError,
    CheckpointMismatch,
    ConfigError,
    ContractViolation,
    DataError,
    ExportError,
    FormatError,
    NumericalAbort,
    SpecError,
)

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("abbnn")

# Per-command defaults, applied after the config file so that the precedence
# is: flag > ABBNN_SEED (seed only) > config file > default.
DEFAULTS = {
    "gendata": {"n_train": 2000, "n_test": 400, "classes": 2, "channels": 1, "size": 16,
                "separation": 3.0, "seed": 2023},
    "train": {"data": "synth", "out": "run", "phase": "both", "epochs": 20, "batch_size": 64, "lr": 1e-3,
              "agc_lambda": 0.001, "seed": 2023, "loss": "ce"},
    "export": {"frac_bits": 16, "probes": 64},
    "infer": {"top_k": 1, "saturation_budget": 0, "strict": False},
    "verify": {"probes": 100, "seed": 2023, "strict": False},
    "audit": {"variant": "bnfree"},
    "slopes": {},
}


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abbnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="flat key=value file; flags override it")
        return sp

    g = cmd("gendata", "write the seeded synthetic dataset as IDX files")
    g.add_argument("--out", required=False)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--channels", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--separation", type=float)
    g.add_argument("--seed", type=int)

    t = cmd("train", "two-step training (or one phase) on a GraphSpec")
    t.add_argument("--spec", help="GraphSpec path or bundled name (toy2block, toy_dense, ...)")
    t.add_argument("--data", help="IDX dataset directory, or 'synth' for the default synthetic set")
    t.add_argument("--out", help="output directory for checkpoints and metrics.jsonl")
    t.add_argument("--phase", choices=["both", "fp", "step1", "step2"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--agc-lambda", type=float)
    t.add_argument("--agc-exclude", help="comma-separated parameter-name prefixes, e.g. L12")
    t.add_argument("--seed", type=int)
    t.add_argument("--loss", choices=["ce", "distill"])
    t.add_argument("--teacher", help="teacher checkpoint for --loss distill")
    t.add_argument("--activation", help="quantized | rleaky:<exp>")
    t.add_argument("--alpha-exp", type=int)
    t.add_argument("--init-checkpoint", help="checkpoint to resume from (required for --phase step2)")

    e = cmd("export", "fold a step2 checkpoint into an ABNN model")
    e.add_argument("--ckpt")
    e.add_argument("--spec", help="optional GraphSpec to check the checkpoint against")
    e.add_argument("--out")
    e.add_argument("--frac-bits", type=int)
    e.add_argument("--probes", type=int, help="threshold spot-check probes per layer")

    i = cmd("infer", "run the multiplication-free engine")
    i.add_argument("--model")
    i.add_argument("--input", help="IDX image file or flat ABFX fixed-point file")
    i.add_argument("--strict", action="store_true", default=None, help="shift-add boundary layers too")
    i.add_argument("--top-k", type=int)
    i.add_argument("--counters", help="write counters as JSON lines here")
    i.add_argument("--saturation-budget", type=int)

    v = cmd("verify", "training graph vs engine equivalence report")
    v.add_argument("--model")
    v.add_argument("--ckpt")
    v.add_argument("--probes", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--strict", action="store_true", default=None)
    v.add_argument("--report", help="write the report as a JSON line here")

    a = cmd("audit", "static multiplication-operand audit")
    a.add_argument("--spec")
    a.add_argument("--hw", type=int, help="input height/width (default: the spec's)")
    a.add_argument("--variant", choices=["bnfree", "ab", "both"])
    a.add_argument("--out", help="write MOReport records (JSON lines) here")

    s = cmd("slopes", "histogram of PReLU slope and kappa exponents")
    s.add_argument("--model")
    s.add_argument("--ckpt")
    return p


def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def merge_args(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, ABBNN_SEED and the command defaults."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    seed_flag = getattr(args, "seed", None)
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in actions:
                raise ConfigError(f"unknown config key '{key}' for '{args.command}'")
            if getattr(args, key) is not None:
                continue  # flag wins
            action = actions[key]
            try:
                if action.const is True:  # store_true
                    conv = _bool(value)
                else:
                    conv = action.type(value) if action.type else value
            except ValueError as exc:
                raise ConfigError(f"config key '{key}': {exc}") from exc
            if action.choices and conv not in action.choices:
                raise ConfigError(f"config key '{key}': {conv!r} not one of {list(action.choices)}")
            setattr(args, key, conv)
    env_seed = os.environ.get("ABBNN_SEED")
    if env_seed and "seed" in actions and seed_flag is None:
        try:
            args.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"ABBNN_SEED must be an integer, got {env_seed!r}") from exc
    for key, value in DEFAULTS.get(args.command, {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise ConfigError(f"'{args.command}' needs --{n.replace('_', '-')}")


def _load_spec(name):
    from .graphspec import load_spec

    try:
        return load_spec(name)
    except FileNotFoundError as exc:
        raise ConfigError(f"spec file not found: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read spec {name}: {exc}") from exc


def _need_file(path, kind="input"):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{kind} file not found: {p}")
    return p


# --------------------------------------------------------------------------- commands


def cmd_gendata(args) -> int:
    from .data import make_synthetic, save_dataset

    _require(args, "out")
    ds = make_synthetic(args.n_train, args.n_test, args.classes, args.channels, args.size, args.separation, args.seed)
    sums = save_dataset(ds, args.out)
    for name, digest in sums.items():
        print(f"{digest}  {name}")
    return EXIT_OK


def _dataset(args, spec):
    from .data import load_dataset, make_synthetic

    if args.data == "synth":
        c, h, w = spec.input_shape
        if h != w:
            raise DataError("the synthetic set is square; use an IDX dataset for non-square inputs")
        return make_synthetic(channels=c, size=h)
    return load_dataset(args.data)


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_two_step, train_phase
    from . import checkpoint

    _require(args, "spec")
    spec = _load_spec(args.spec)
    exclude = tuple(s.strip() for s in args.agc_exclude.split(",") if s.strip()) if args.agc_exclude else ()
    base = TrainConfig(
        phase="step1", epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, agc_lambda=args.agc_lambda, agc_exclude=exclude, seed=args.seed,
        loss=args.loss, teacher=args.teacher, activation=args.activation, alpha_exp=args.alpha_exp,
        init_checkpoint=args.init_checkpoint,
    )
    for phase in (["step1", "step2"] if args.phase == "both" else [args.phase]):
        replace(base, phase=phase).validate(require_checkpoint=args.phase != "both")
    if args.loss == "distill":
        _need_file(args.teacher, "teacher checkpoint")
    data = _dataset(args, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    log_path.unlink(missing_ok=True)
    if args.phase == "both":
        cfg1 = replace(base, phase="step1", init_checkpoint=None)
        state, history = run_two_step(spec, data, cfg1, replace(base, phase="step2", init_checkpoint=None), out,
                                      log_path=log_path)
    else:
        state, history = train_phase(spec, data, replace(base, phase=args.phase), log_path=log_path)
        checkpoint.save(state, out / f"{args.phase}.abck")
    for r in history:
        print(f"{r['phase']:<6} epoch {r['epoch']:>3}  loss {r['train_loss']:.4f}  "
              f"train {r['train_acc']:.4f}  test {r['test_acc']:.4f}")
    print(f"checkpoints and metrics written to {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    from . import checkpoint
    from .exporter import fold, write_abnn

    _require(args, "ckpt", "out")
    state = checkpoint.load(_need_file(args.ckpt, "checkpoint"))
    spec = _load_spec(args.spec) if args.spec else None
    model = fold(state, spec, args.frac_bits, probes=args.probes)
    write_abnn(model, args.out)
    print(f"wrote {args.out}: {len(model.layers)} layers, Q{31 - model.frac_bits}.{model.frac_bits}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import load_inputs
    from .engine import infer
    from .exporter import read_abnn

    _require(args, "model", "input")
    model = read_abnn(_need_file(args.model, "model"))
    x = load_inputs(_need_file(args.input), model.frac_bits)
    result = infer(model, x, args.strict, saturation_budget=args.saturation_budget)
    logits = result.logits.to_float()
    k = max(1, min(args.top_k, logits.shape[1]))
    for n, row in enumerate(logits):
        top = np.argsort(-row, kind="stable")[:k]
        print(f"sample {n}: " + ", ".join(f"class {c} ({row[c]:+.5f})" for c in top))
    print(f"multiplications: {result.counters.multiplications}")
    print(f"multiplications (non-boundary): {result.core.multiplications}")
    c = result.counters
    print(f"additions: {c.additions}  shifts: {c.shifts}  xnor_popcounts: {c.xnor_popcounts}  "
          f"comparisons: {c.comparisons}  saturations: {c.saturations}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.counters:
        with open(args.counters, "w") as fh:
            for r in result.layers:
                fh.write(json.dumps({"record": "layer", "index": r.index, "kind": r.kind, "boundary": r.boundary,
                                     **r.counters.as_dict()}, sort_keys=True) + "\n")
            fh.write(json.dumps({"record": "summary", "strict": bool(args.strict), **result.summary()},
                                sort_keys=True) + "\n")
    if result.core.multiplications or (args.strict and c.multiplications):
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import checkpoint
    from .engine import verify
    from .exporter import read_abnn

    _require(args, "model", "ckpt")
    model = read_abnn(_need_file(args.model, "model"))
    state = checkpoint.load(_need_file(args.ckpt, "checkpoint"))
    report = verify(model, state, None, args.probes, seed=args.seed, strict=args.strict)
    print(report.table())
    for note in report.notes:
        print(f"FAIL: {note}")
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    return EXIT_INVARIANT if report.diverged else EXIT_OK


def cmd_audit(args) -> int:
    from .opaudit import audit_graph

    _require(args, "spec")
    spec = _load_spec(args.spec)
    variants = ["bnfree", "ab"] if args.variant == "both" else [args.variant]
    lines = []
    for variant in variants:
        report = audit_graph(spec, variant, args.hw)
        print(report.table())
        print()
        lines.append(report.to_jsonl())
        if variant == "ab" and report.total != 0:
            return EXIT_INVARIANT
    if args.out:
        Path(args.out).write_text("".join(lines))
    return EXIT_OK


def _histogram(title, values) -> str:
    counts = Counter(int(v) for v in np.ravel(values))
    if not counts:
        return f"{title}: (none)"
    width = max(counts.values())
    lines = [f"{title} ({sum(counts.values())} channels)"]
    for e in range(min(counts), max(counts) + 1):
        n = counts.get(e, 0)
        lines.append(f"  2^{e:<4} {n:>6}  " + "#" * max(1 if n else 0, round(40 * n / width)))
    return "\n".join(lines)


def cmd_slopes(args) -> int:
    from .exporter import PackedConv, PackedDense, ShiftPReLU, read_abnn

    if args.model:
        model = read_abnn(_need_file(args.model, "model"))
        slopes = [l.exp for l in model.layers if isinstance(l, ShiftPReLU)]
        kappas = [l.kappa_exp for l in model.layers if isinstance(l, (PackedConv, PackedDense))]
    elif args.ckpt:
        from . import checkpoint
        from .nfgraph import kappa_exponents, pname, round_half_even, sws_standardize

        state = checkpoint.load(_need_file(args.ckpt, "checkpoint"))
        slopes, kappas = [], []
        for r in state.spec.resolve():
            if r.kind == "qrprelu":
                slopes.append(round_half_even(state.params[pname(r.index, "a")]))
            elif r.kind == "rleaky":
                slopes.append(np.full(r.in_shape[0], r.spec.fields["slope_exp"]))
            elif r.kind in ("binconv", "dense"):
                kappas.append(kappa_exponents(sws_standardize(state.params[pname(r.index, "W")])))
    else:
        raise ConfigError("'slopes' needs --model or --ckpt")
    cat = lambda xs: np.concatenate([np.ravel(x) for x in xs]) if xs else np.array([])  # noqa: E731
    print(_histogram("PReLU slope exponents", cat(slopes)))
    print(_histogram("kappa exponents", cat(kappas)))
    return EXIT_OK


COMMANDS = {
    "gendata": cmd_gendata,
    "train": cmd_train,
    "export": cmd_export,
    "infer": cmd_infer,
    "verify": cmd_verify,
    "audit": cmd_audit,
    "slopes": cmd_slopes,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        merge_args(parser, args)
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SpecError, CheckpointMismatch, AuditError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractViolation, ExportError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
