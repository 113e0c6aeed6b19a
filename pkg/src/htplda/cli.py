"""Command-line interface: ``htplda <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy import linalg

from htplda import files, metrics, preprocessing, scoring
from htplda.errors import DataError, NumericalError
from htplda.model import (
    INFINITY,
    load_model,
    parse_nu,
    sample,
    save_model,
    synthetic_model,
)
from htplda.training import TrainConfig, adapt_interpolate, train

log = logging.getLogger("htplda")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


class Outputs:
    """Tracks files written by a command so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def remove(self):
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _nu(text):
    try:
        return parse_nu(text)
    except DataError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _unit_interval(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {v}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _nonnegative_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _write_config(path: Path, args, outputs: Outputs):
    sidecar = outputs.add(str(path) + ".config")
    with open(sidecar, "w", encoding="utf-8") as f:
        for key, value in sorted(vars(args).items()):
            if key in ("func", "config", "command", "prep_command") or value is None:
                continue
            if isinstance(value, float) and math.isinf(value):
                value = "inf"
            f.write(f"{key} = {value}\n")


def _load_enroll_test(args, sm):
    enroll = files.read_embeddings(args.enroll)
    test = files.read_embeddings(args.test)
    model_of = files.read_labels(args.enroll_map) if args.enroll_map else None
    e_ids, e_me = scoring.group_embeddings(sm, enroll.X, enroll.ids, model_of)
    t_ids, t_me = scoring.group_embeddings(sm, test.X, test.ids)
    return e_ids, e_me, t_ids, t_me


# -- commands -----------------------------------------------------------------


def cmd_make_model(args, out: Outputs):
    if not args.dim < args.dim_embed:
        raise DataError(f"--dim must be < --dim-embed, got {args.dim} >= {args.dim_embed}")
    m = synthetic_model(args.dim_embed, args.dim, args.nu, args.seed, between=args.between)
    save_model(out.add(args.out), m)
    _write_config(Path(args.out), args, out)


def cmd_sample(args, out: Outputs):
    model = load_model(args.model)
    data, _ = sample(model, [args.per_speaker] * args.speakers, seed=args.seed)
    files.write_embeddings(out.add(args.out), files.EmbeddingFile(data.ids, data.X))
    files.write_labels(out.add(args.labels_out), data.ids, data.speakers)
    _write_config(Path(args.out), args, out)


def cmd_prep_fit(args, out: Outputs):
    emb = files.read_embeddings(args.input)
    p = preprocessing.fit(
        emb.X, center=args.center, whiten=args.whiten, project=args.project, radius=args.ln_radius, shrink=args.shrink
    )
    preprocessing.save(out.add(args.out), p)
    _write_config(Path(args.out), args, out)


def cmd_prep_apply(args, out: Outputs):
    p = preprocessing.load(args.prep)
    emb = files.read_embeddings(args.input)
    Y = preprocessing.apply(p, emb.X)
    files.write_embeddings(out.add(args.out), files.EmbeddingFile(emb.ids, Y))


def cmd_prep_recenter(args, out: Outputs):
    p = preprocessing.load(args.prep)
    emb = files.read_embeddings(args.input)
    preprocessing.save(out.add(args.out), p.recentered(emb.X))
    _write_config(Path(args.out), args, out)


def cmd_train(args, out: Outputs):
    emb = files.read_embeddings(args.input)
    data = files.labeled(emb, files.read_labels(args.labels))
    if args.min_utts > 1:
        data = data.filter_min_count(args.min_utts)
        if len(data) == 0:
            raise DataError(f"no speaker has at least {args.min_utts} utterances")
    log.info("training on %d utterances from %d speakers", len(data), data.num_speakers)
    config = TrainConfig(
        nu=args.nu,
        d=args.dim,
        iterations=args.iters,
        seed=args.seed,
        tol=args.tol,
        min_div_z=not args.no_min_div_z,
        min_div_lambda=not args.no_min_div_lambda,
        threads=args.threads,
    )
    init = load_model(args.init_model) if args.init_model else None
    model, trace = train(data, config, init_model=init)
    save_model(out.add(args.out), model)
    if args.trace:
        trace.write_csv(out.add(args.trace))
    _write_config(Path(args.out), args, out)


def cmd_score(args, out: Outputs):
    sm = scoring.diagonalize(load_model(args.model))
    e_ids, e_me, t_ids, t_me = _load_enroll_test(args, sm)
    trials = files.read_trials(args.trials) if args.trials else None
    scores = scoring.score_matrix(sm, e_ids, e_me, t_ids, t_me, trials)
    files.write_scores(out.add(args.out), scores, args.full_precision)
    _write_config(Path(args.out), args, out)


def cmd_snorm(args, out: Outputs):
    raw = files.read_scores(args.scores)
    sm = scoring.diagonalize(load_model(args.model))
    e_ids, e_me, t_ids, t_me = _load_enroll_test(args, sm)
    cohort = files.read_embeddings(args.cohort)
    if args.top_k > cohort.N:
        raise DataError(f"--top-k {args.top_k} exceeds cohort size {cohort.N}")
    c_me = scoring.extract_many(sm, cohort.X)
    e_index = {k: i for i, k in enumerate(e_ids)}
    t_index = {k: i for i, k in enumerate(t_ids)}
    try:
        ei = np.array([e_index[e] for e in raw.trials.enroll], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"unknown enrollment id {exc.args[0]!r}") from None
    try:
        ti = np.array([t_index[t] for t in raw.trials.test], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"unknown test id {exc.args[0]!r}") from None
    ue, ei = np.unique(ei, return_inverse=True)
    ut, ti = np.unique(ti, return_inverse=True)
    ec = scoring.score_cross(sm, e_me[ue], c_me)
    tc = scoring.score_cross(sm, t_me[ut], c_me)
    normed = scoring.snorm_adaptive(raw.scores, ec, tc, args.top_k, ei, ti)
    files.write_scores(out.add(args.out), scoring.ScoreSet(raw.trials, normed), args.full_precision)
    _write_config(Path(args.out), args, out)


def cmd_adapt(args, out: Outputs):
    m_out = load_model(args.outdomain)
    m_in = load_model(args.indomain)
    save_model(out.add(args.out_model), adapt_interpolate(m_out, m_in, args.alpha))
    _write_config(Path(args.out_model), args, out)


def cmd_eval(args, out: Outputs):
    names = [m for m in args.metrics.split(",") if m]
    for name in names:
        if not (name in ("eer", "cprimary", "cllr") or name.startswith("mindcf:")):
            raise UsageError(f"unknown metric {name!r}")
    scores = files.read_scores(args.scores)
    labels = files.attach_labels(scores, files.read_trials(args.trials))
    s = metrics.LabeledScores.from_labels(scores.scores, labels)
    rows = metrics.evaluate(s, names)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:.6f}")
    if args.out:
        with open(out.add(args.out), "w", encoding="utf-8") as f:
            f.write("metric,value\n")
            for k, v in rows:
                f.write(f"{k},{v!r}\n")


# -- parser -------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="htplda", description="Heavy-tailed PLDA speaker-verification backend.")
    p.add_argument("--config", help="file of 'key = value' defaults; flags override")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("make-model", help="write a random ground-truth model for synthetic experiments")
    s.add_argument("--dim-embed", type=_positive_int, required=True, help="embedding dimension D")
    s.add_argument("--dim", type=_positive_int, required=True, help="speaker subspace dimension d")
    s.add_argument("--nu", type=_nu, default=INFINITY)
    s.add_argument("--between", type=_positive_float, default=1.0, help="speaker-factor scale")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_model)

    s = sub.add_parser("sample", help="draw labeled embeddings from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--speakers", type=_positive_int, required=True)
    s.add_argument("--per-speaker", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--labels-out", required=True)
    s.set_defaults(func=cmd_sample)

    prep = sub.add_parser("prep", help="centering / whitening / length normalisation")
    psub = prep.add_subparsers(dest="prep_command", required=True, parser_class=Parser)
    s = psub.add_parser("fit")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--center", action="store_true")
    s.add_argument("--whiten", action="store_true")
    s.add_argument("--project", action="store_true", help="project onto a sphere (length normalisation)")
    s.add_argument("--ln-radius", type=_positive_float, default=None, help="sphere radius (default sqrt(D))")
    s.add_argument("--shrink", type=float, default=1e-6, help="relative covariance shrinkage; 0 disables")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep_fit)
    s = psub.add_parser("apply")
    s.add_argument("--prep", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep_apply)
    s = psub.add_parser("recenter", help="replace a preprocessor's mean by the mean of a dev set")
    s.add_argument("--prep", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep_recenter)

    s = sub.add_parser("train", help="VB training at fixed nu")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--nu", type=_nu, required=True, help="degrees of freedom, or 'inf' for G-PLDA")
    s.add_argument("--dim", type=_positive_int, required=True)
    s.add_argument("--iters", type=_positive_int, default=50)
    s.add_argument("--tol", type=_nonnegative_float, default=1e-6, help="relative bound change that stops training; 0 runs every iteration")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-utts", type=_positive_int, default=1, help="drop speakers with fewer utterances")
    s.add_argument("--init-model", help="start from this model instead of a random one")
    s.add_argument("--no-min-div-z", action="store_true")
    s.add_argument("--no-min-div-lambda", action="store_true")
    s.add_argument("--threads", type=_positive_int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="per-iteration CSV trace")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score trials (or the full cross)")
    s.add_argument("--model", required=True)
    s.add_argument("--enroll", required=True)
    s.add_argument("--enroll-map", help="'<utteranceId> <modelId>' lines for multi-session enrollment")
    s.add_argument("--test", required=True)
    s.add_argument("--trials")
    s.add_argument("--full-precision", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("snorm", help="adaptive symmetric score normalisation")
    s.add_argument("--scores", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--enroll", required=True)
    s.add_argument("--enroll-map")
    s.add_argument("--test", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--top-k", type=int, default=200)
    s.add_argument("--full-precision", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_snorm)

    s = sub.add_parser("adapt", help="interpolate out-of-domain and in-domain models")
    s.add_argument("--outdomain", required=True)
    s.add_argument("--indomain", required=True)
    s.add_argument("--alpha", type=_unit_interval, default=0.5, help="weight of the in-domain model")
    s.add_argument("--out-model", required=True)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="detection metrics for a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--metrics", default="eer,mindcf:0.01,mindcf:0.005,cprimary,cllr")
    s.add_argument("--out", help="CSV report")
    s.set_defaults(func=cmd_eval)
    return p


def _read_config(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as f:
        for k, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{k}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subparser_for(parser: Parser, argv: list[str]) -> Parser:
    """The innermost sub-parser selected by ``argv`` (for applying config defaults)."""
    p = parser
    for tok in argv:
        actions = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
        if actions and tok in actions[0].choices:
            p = actions[0].choices[tok]
    return p


def _apply_config(parser: Parser, argv: list[str]) -> list[str]:
    """Install defaults from ``--config`` (anywhere in argv) and return argv without it."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return argv
    try:
        values = _read_config(known.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    target = _subparser_for(parser, argv)
    dests = {a.dest: a for a in target._actions}
    defaults = {}
    for key, raw in values.items():
        action = dests.get(key)
        if action is None:
            raise UsageError(f"config key {key!r} is not an option of this command")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
            action.required = False
    target.set_defaults(**defaults)
    return rest


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not any(isinstance(h, _StderrHandler) for h in log.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Outputs()
    try:
        args.func(args, out)
    except UsageError as exc:
        out.remove()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        out.remove()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, linalg.LinAlgError, FloatingPointError) as exc:
        out.remove()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
