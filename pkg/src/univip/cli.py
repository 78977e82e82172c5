"""Command-line entry point: ``univip <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .boxes import BoxFormatError, FilterConfig, format_boxes
from .model import CheckpointError, ModelState, load_checkpoint
from .profiles import PROFILES, get_profile
from .proposals import ProposalConfig, generate_proposals
from .synth import DataError, load_manifest, read_ppm, read_sample, write_dataset
from .tensor import NumericError
from .train import TrainConfig, TrainingAborted, apply_overrides, load_config, train
from .views import ViewConfig, ViewError, create_overlapping_views

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(out, text):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args):
    man = write_dataset(args.out, args.count, args.seed, args.profile)
    print(f"wrote {man.count} samples to {args.out}")


def _proposals_for(image, profile, rng):
    return generate_proposals(image, FilterConfig(min_scale=profile.min_scale), rng,
                              ProposalConfig.for_profile(profile))


def cmd_propose(args):
    profile = get_profile(args.profile)
    if args.image:
        image = read_ppm(args.image)
    elif args.manifest is not None and args.index is not None:
        image = read_sample(load_manifest(args.manifest), args.index)[0]
    else:
        raise UsageError("give --image, or --manifest with --index")
    boxes = _proposals_for(image, profile, np.random.default_rng(args.seed))
    _write(args.out, format_boxes(boxes))


def cmd_make_views(args):
    profile = get_profile(args.profile)
    man = load_manifest(args.manifest)
    n = man.count if args.limit is None else min(args.limit, man.count)
    cfg = ViewConfig(min_scale=profile.min_scale)
    lines = []
    for i in range(n):
        image = read_sample(man, i)[0]
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, i]))
        props = _proposals_for(image, profile, rng)
        vp = create_overlapping_views(image, props, args.K, args.iters, rng, cfg)
        lines.append(json.dumps({"index": i, **vp.to_dict()}, sort_keys=True))
    _write(args.out, "".join(line + "\n" for line in lines))


def _parse_overrides(extra):
    overrides, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            key, val = tok[2:], extra[i + 1]
            i += 2
        overrides[key] = val
    return overrides


def cmd_train(args, extra):
    cfg = load_config(args.config) if args.config else TrainConfig()
    try:
        cfg = apply_overrides(cfg, _parse_overrides(extra)).validate()
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    res = train(cfg)
    print(f"trained {res.steps} steps; checkpoint {res.checkpoint_path}")


def _eval_state(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    if args.random_init:
        cfg = TrainConfig(seed=args.seed)
        return ModelState.create(cfg.arch, np.random.default_rng([args.seed, 1]))
    raise UsageError("give --checkpoint or --random-init")


def _instances(args, state):
    from .evaluate import instance_set

    profile = get_profile(args.profile)
    ds = instance_set(load_manifest(args.manifest), profile.instance_size, args.limit or 0)
    if not len(ds.labels):
        raise DataError("dataset has no labelled instances")
    return ds


def cmd_probe(args):
    from .evaluate import probe_state

    state = _eval_state(args)
    res = probe_state(state, _instances(args, state), seed=args.seed)
    print(json.dumps({"accuracy": res.accuracy, "n_train": res.n_train, "n_test": res.n_test}))


def cmd_knn(args):
    from .evaluate import knn_state

    state = _eval_state(args)
    try:
        acc = knn_state(state, _instances(args, state), k=args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"accuracy": acc, "k": args.k}))


def cmd_check_grad(args):
    from .gradsuite import run_gradient_suite

    reports = run_gradient_suite(seed=args.seed, h=args.h, tol=args.tol)
    ok = True
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:<24s} worst rel_err={rep.worst:.3e}")
    if not ok:
        raise NumericError("gradient check failed")


def parse_sinkhorn_problem(text, name="<input>"):
    """Sections ``[cost]`` (rows), ``[b]``, ``[a]`` and optionally ``[epsilon]``."""
    sections, current = {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise DataError(f"{name}:{lineno}:1: unterminated section header")
            current = line[1:-1].strip().lower()
            if current not in ("cost", "a", "b", "epsilon"):
                raise DataError(f"{name}:{lineno}:1: unknown section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise DataError(f"{name}:{lineno}:1: value outside of a section")
        row, col = [], raw.index(line[0]) + 1
        for tok in line.split():
            try:
                row.append(float(tok))
            except ValueError:
                raise DataError(f"{name}:{lineno}:{col}: not a number: {tok!r}") from None
            col += len(tok) + 1
        sections[current].append(row)
    missing = [s for s in ("cost", "a", "b") if s not in sections]
    if missing:
        raise DataError(f"{name}: missing section(s) {', '.join(missing)}")
    rows = sections["cost"]
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"{name}: cost rows have different lengths")
    eps = sections.get("epsilon", [[0.05]])
    return (np.array(rows), np.array(sum(sections["a"], [])), np.array(sum(sections["b"], [])),
            float(eps[0][0]))


def cmd_sinkhorn_demo(args):
    from .ot import marginal_violation, sinkhorn

    with open(args.problem, "r", encoding="utf-8") as fh:
        C, a, b, eps = parse_sinkhorn_problem(fh.read(), args.problem)
    if args.epsilon is not None:
        eps = args.epsilon
    try:
        tp = sinkhorn(C, a, b, eps, args.max_iter, args.tol, args.newton_steps)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    np.set_printoptions(precision=6, suppress=True)
    print(f"epsilon={eps:g} iterations={tp.iterations} converged={tp.converged}")
    print(f"cost={tp.cost(C):.6f} marginal_violation={marginal_violation(tp, a, b):.3e}")
    print(tp.plan)
    if not tp.converged:
        raise NumericError("Sinkhorn did not converge")


# -- parser -------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="univip", description="Multi-instance self-supervised pre-training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    profiles = sorted(PROFILES)

    s = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=2000)
    s.add_argument("--profile", choices=profiles, default="desk")
    s.add_argument("--out", required=True)

    s = sub.add_parser("propose", help="unsupervised box proposals for one image")
    s.add_argument("--image")
    s.add_argument("--manifest")
    s.add_argument("--index", type=int)
    s.add_argument("--profile", choices=profiles, default="desk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = sub.add_parser("make-views", help="overlapping view pairs as JSON lines")
    s.add_argument("--manifest", required=True)
    s.add_argument("--K", type=int, default=4)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--profile", choices=profiles, default="desk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int)
    s.add_argument("--out")

    s = sub.add_parser("train", help="pre-train; any config key can be passed as --key value")
    s.add_argument("--config")

    for name, helptext in (("probe", "linear probe on frozen features"),
                           ("knn", "cosine k-NN on frozen features")):
        s = sub.add_parser(name, help=helptext)
        src = s.add_mutually_exclusive_group(required=True)
        src.add_argument("--checkpoint")
        src.add_argument("--random-init", action="store_true")
        s.add_argument("--manifest", required=True)
        s.add_argument("--profile", choices=profiles, default="desk")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--limit", type=int)
        if name == "knn":
            s.add_argument("--k", type=int, default=20)

    s = sub.add_parser("check-grad", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)

    s = sub.add_parser("sinkhorn-demo", help="solve a small transport problem from a text file")
    s.add_argument("problem")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--newton-steps", type=int, default=50)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "propose": cmd_propose,
    "make-views": cmd_make_views,
    "probe": cmd_probe,
    "knn": cmd_knn,
    "check-grad": cmd_check_grad,
    "sinkhorn-demo": cmd_sinkhorn_demo,
}


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if extra and args.command != "train":
        print(f"univip: usage error: unrecognized arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "train":
            cmd_train(args, extra)
        else:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"univip: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BoxFormatError, CheckpointError, ViewError, OSError) as exc:
        print(f"univip: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingAborted) as exc:
        print(f"univip: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
