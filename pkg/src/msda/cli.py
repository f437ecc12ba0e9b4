"""Command-line entry point: gen-data, train, evaluate, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as C
from .checkpoint import CheckpointError, load_params
from .data import SPLITS, DataError, Vocabulary, load_manifest, make_corpora, split_of, write_corpus
from .evaluation import evaluate
from .pipeline import METHODS, Splits, TeacherCache, TrainingDiverged, append_summary, run_baseline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("msda")


def _digest(tree: dict) -> str:
    return hashlib.sha1(json.dumps(tree, sort_keys=True).encode("utf-8")).hexdigest()[:12]


def _load_config(args, method: Optional[str] = None):
    overrides = list(args.override or [])
    if method is not None:
        C.check_method_overrides(method, overrides)
    cfg, resolved = C.load(Path(args.config) if args.config else None, overrides)
    if method is not None:
        resolved["method"] = method
    return cfg, resolved


def _seeds(args, cfg) -> list[int]:
    return list(args.seed) if getattr(args, "seed", None) else list(cfg.seeds)


def _corpora(cfg, data_dir: Optional[str], seed: int) -> dict:
    """Corpora from a gen-data directory, or synthesized in memory from the config."""
    root = data_dir or cfg.data.root
    if root is None:
        return make_corpora(cfg.data.shift, seed)
    root = Path(root)
    out = {}
    for domain in ("source", "target"):
        out[domain] = load_manifest(root / domain / "manifest.jsonl", input_channels=cfg.model.input_channels)
    if out["source"].vocab != out["target"].vocab:
        raise DataError(f"{root}: source and target vocabularies differ")
    if out["source"].vocab.size_with_blank != cfg.model.vocab_size:
        raise DataError(
            f"{root}: vocabulary has {out['source'].vocab.size_with_blank} symbols (with blank), "
            f"model expects {cfg.model.vocab_size}"
        )
    return out


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg, resolved = _load_config(args)
    seed = args.seed[0] if args.seed else cfg.seeds[0]
    out = Path(args.out or cfg.data.root or Path(cfg.output_dir) / "data")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: output directory {out} exists (use --force to overwrite)", file=sys.stderr)
            return EXIT_DATA
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    corpora = make_corpora(cfg.data.shift, seed)
    stats = {"seed": seed, "frame_seconds": cfg.data.frame_seconds, "domains": {}}
    for domain, corpus in corpora.items():
        write_corpus(corpus, out / domain)
        splits = {p: sum(1 for u in corpus.utterances if split_of(u.id) == p) for p in SPLITS}
        frames = corpus.total_frames()
        stats["domains"][domain] = {
            "utterances": len(corpus),
            "splits": splits,
            "frames": frames,
            "hours_equivalent": frames * cfg.data.frame_seconds / 3600.0,
        }
    _write_json(out / "stats.json", dict(stats, provenance=C.provenance(resolved)))
    print(f"corpus statistics ({out})")
    for domain, st in stats["domains"].items():
        split_txt = " ".join(f"{k}={v}" for k, v in st["splits"].items())
        print(f"  {domain:<7} utterances={st['utterances']} {split_txt} frames={st['frames']} "
              f"hours={st['hours_equivalent']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    method = args.method
    cfg, resolved = _load_config(args, method)
    prov = C.provenance(resolved)
    out_root = Path(args.out or cfg.output_dir)
    cache = TeacherCache()
    for seed in _seeds(args, cfg):
        corpora = _corpora(cfg, args.data, seed)
        splits = Splits.from_corpora(corpora["source"], corpora["target"])
        workdir = out_root / method / f"seed-{seed}"
        if workdir.exists():
            if not args.force:
                print(f"error: run directory {workdir} exists (use --force to overwrite)", file=sys.stderr)
                return EXIT_DATA
            shutil.rmtree(workdir)
        workdir.mkdir(parents=True)
        (workdir / "config.yaml").write_text(C.dump_yaml(dict(resolved, seeds=[seed])), encoding="utf-8")
        outcome = run_baseline(
            method, cfg.model, cfg.stage1, cfg.stage2, splits, seed, setting=cfg.setting, workdir=workdir,
            cache=cache, teacher_objective=cfg.teacher_objective, student_objective=cfg.student_objective,
            teacher_checkpoint=Path(args.teacher) if args.teacher else None, meta={"provenance": prov},
        )
        rec = outcome.record
        summary = out_root / "summary.csv"
        append_summary(summary, rec, version=prov["version"], config_digest=_digest(resolved))
        _write_json(workdir / "record.json", dict(rec.row(), provenance=prov))
        print(f"{method} seed={seed} target_test_wer={rec.target_test_wer:.4f} "
              f"source_test_wer={rec.source_test_wer:.4f} steps={rec.steps}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        params, meta = load_params(Path(args.checkpoint))
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    manifest = Path(args.manifest)
    vocab = None
    if meta.get("vocab") is not None:
        vocab = Vocabulary(meta["vocab"])
        vocab_file = manifest.parent / "vocab.json"
        if vocab_file.exists() and Vocabulary(json.loads(vocab_file.read_text(encoding="utf-8"))) != vocab:
            print(f"error: vocabulary of {manifest} does not match the checkpoint", file=sys.stderr)
            return EXIT_DATA
    corpus = load_manifest(manifest, vocab=vocab, input_channels=params.config.input_channels)
    if corpus.vocab.size_with_blank != params.config.vocab_size:
        print(f"error: manifest vocabulary has {corpus.vocab.size_with_blank} symbols, checkpoint expects "
              f"{params.config.vocab_size}", file=sys.stderr)
        return EXIT_DATA
    if args.split:
        corpus = corpus.split(args.split)
    report = evaluate(params, corpus)
    report.meta = {
        "checkpoint": str(args.checkpoint),
        "manifest": str(manifest),
        "split": args.split,
        "role": meta.get("role", "model"),
        "stage": meta.get("stage"),
        "step": meta.get("step"),
        "method": meta.get("method"),
        "provenance": meta.get("provenance"),
        "evaluator_version": C.version_string(),
    }
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    report.write(out)
    print(f"role={report.meta['role']} utterances={len(report.rows)} excluded_empty={report.excluded_empty_reference}")
    print(f"report {out}")
    print(f"WER {report.wer:.4f}")
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise C.ConfigError(f"cannot parse number list {text!r}") from None


def cmd_sweep(args) -> int:
    from .sweeps import COEFFICIENT_GRID, FRACTIONS, SweepContext, sweep_coefficients, sweep_sample_efficiency

    cfg, resolved = _load_config(args)
    seeds = _seeds(args, cfg)
    values = _parse_floats(args.values) if args.values else list(COEFFICIENT_GRID)
    fractions = _parse_floats(args.fractions) if args.fractions else list(FRACTIONS)
    out = Path(args.out or Path(cfg.output_dir) / "sweeps")
    out.mkdir(parents=True, exist_ok=True)
    corpora_cache: dict = {}

    def splits(seed):
        if seed not in corpora_cache:
            c = _corpora(cfg, args.data, seed)
            corpora_cache[seed] = Splits.from_corpora(c["source"], c["target"])
        return corpora_cache[seed]

    ctx = SweepContext(cfg.model, cfg.stage1, cfg.stage2, splits, cfg.setting)
    _write_json(out / f"{args.kind}-provenance.json", C.provenance(resolved))
    if args.kind == "coefficients":
        path = out / f"coefficients-{args.axis}.csv"
        rows = sweep_coefficients(ctx, args.axis, values, args.fixed_other, seeds, path, args.jobs)
    else:
        path = out / "sample-efficiency.csv"
        rows = sweep_sample_efficiency(ctx, fractions, seeds, path, args.jobs)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} rows ({failed} failed) -> {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plotting
    from .report import method_grid, read_rows, render_csv, render_markdown, render_text

    runs = [Path(p) for p in args.runs]
    summaries = []
    for p in runs:
        summaries.extend([p] if p.is_file() else sorted(p.rglob("summary.csv")))
    if not summaries:
        print("error: no summary.csv found", file=sys.stderr)
        return EXIT_DATA
    rows = read_rows(summaries)
    settings = args.settings.split(",") if args.settings else None
    grid = method_grid(rows, args.metric, settings=settings)
    out = Path(args.out) if args.out else None
    text = render_markdown(grid) if args.markdown else render_text(grid)
    print(text, end="")
    print("---- csv ----")
    table_csv = render_csv(grid)
    print(table_csv, end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(render_text(grid), encoding="utf-8")
        (out / "table.md").write_text(render_markdown(grid), encoding="utf-8")
        (out / "table.csv").write_text(table_csv, encoding="utf-8")
        figures = [plotting.method_bars(grid, out / "methods.png")]
        for p in runs:
            base = p if p.is_dir() else p.parent
            for sweep in sorted(base.rglob("coefficients-*.csv")):
                sweep_rows = read_rows([sweep])
                figures.append(plotting.coefficient_sweep(sweep_rows, out / f"{sweep.stem}.png"))
            for sweep in sorted(base.rglob("sample-efficiency.csv")):
                figures.append(plotting.sample_efficiency(read_rows([sweep]), out / "sample-efficiency.png"))
        print("---- figures ----")
        for f in figures:
            print(f)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--override", "-o", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. stage2.gamma=1e-3 (repeatable)")
        sp.add_argument("--out", help="output directory")
        if seeds:
            sp.add_argument("--seed", type=int, action="append", help="seed (repeatable; default: config seeds)")

    g = sub.add_parser("gen-data", help="write synthetic source/target corpora and manifests")
    common(g)
    g.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and evaluate one method")
    common(t)
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--data", help="corpus directory from gen-data (default: synthesize from config)")
    t.add_argument("--teacher", help="stage-one checkpoint to start meta pseudo-labelling from")
    t.add_argument("--force", action="store_true", help="overwrite existing run directories")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="greedy-decode a manifest with a checkpoint and score WER")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=SPLITS, help="score only this split of the manifest")
    e.add_argument("--out", help="report path (default: <checkpoint>.eval.json)")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="coefficient or target-data-size sweep")
    common(s)
    s.add_argument("--kind", choices=("coefficients", "sample-efficiency"), required=True)
    s.add_argument("--axis", choices=("gamma", "delta"), default="gamma")
    s.add_argument("--values", help="comma-separated coefficient values")
    s.add_argument("--fixed-other", type=float, default=1e-3, help="value of the coefficient not swept")
    s.add_argument("--fractions", help="comma-separated target fractions")
    s.add_argument("--data", help="corpus directory from gen-data")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="render result tables (and figures) from run directories")
    r.add_argument("runs", nargs="+", help="run directories or summary.csv files")
    r.add_argument("--out", help="directory for table files and PNG figures")
    r.add_argument("--markdown", action="store_true", help="print a pipe table instead of aligned text")
    r.add_argument("--metric", default="target_test_wer", choices=("target_test_wer", "source_test_wer"))
    r.add_argument("--settings", help="comma-separated setting columns (default: all found)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
