"""``inkmark`` command line: train, calibrate, generate, detect, evaluate, analyze, report, pipeline.

Exit codes: 0 on success, 1 when a stage fails, 2 on usage errors
(bad flags, missing input files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .calibrate import GAMMA_GRID, INTENSITIES, calibrate_scheme, generate_batch
from .corpus import Vocabulary, load_documents, tokenize
from .detect import detector_for, detect, ewd_z_score, roc_from_scores
from .errors import InkmarkError
from .langmodel import NGramModel
from .pipeline import (
    RunConfig,
    analyze_cls,
    analyze_mcq,
    evaluation_record,
    run_pipeline,
    train_model,
    write_report,
)
from .taskeval import load_task, task_category
from .util import derive_seed, read_json, write_json
from .watermark import WatermarkSpec, watermarked_generate

log = logging.getLogger("inkmark")


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str = "file") -> str | None:
    if path is not None and not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_source(args):
    """Model from --model or --endpoint (with --vocab)."""
    if (args.model is None) == (getattr(args, "endpoint", None) is None):
        raise UsageError("give exactly one of --model and --endpoint")
    if args.model is not None:
        return NGramModel.load(_existing(args.model, "model"))
    if args.vocab is None:
        raise UsageError("--endpoint needs --vocab")
    from .remote import RemoteModel

    vocab = Vocabulary.from_json(Path(_existing(args.vocab, "vocabulary")).read_text(encoding="utf-8"))
    return RemoteModel(args.endpoint, vocab)


def _load_spec(path: str | None) -> WatermarkSpec | None:
    if path is None:
        return None
    obj = read_json(_existing(path, "spec"))
    if "chosen" in obj:  # a calibration result
        return WatermarkSpec(obj["scheme"], obj["chosen"]["gamma"], obj["chosen"]["delta"], obj["key"])
    return WatermarkSpec.from_dict(obj)


def _read_lines(path: str, vocab: Vocabulary, limit: int | None = None) -> list[tuple[int, ...]]:
    return [tokenize(doc, vocab)[:limit] for doc in load_documents(_existing(path))]


def _write_jsonl(path: str, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    with open(_existing(path), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    for p in args.corpus:
        _existing(p, "corpus file")
    model = train_model(args.corpus, args.order, args.min_count)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    if args.vocab_out:
        Path(args.vocab_out).write_text(model.vocab.to_json() + "\n", encoding="utf-8")
    print(f"wrote {args.out} (|V|={model.vocab.size}, order={model.order})")
    return 0


def cmd_calibrate(args) -> int:
    model = _load_source(args)
    prefixes = _read_lines(args.prefixes, model.vocab, args.prefix_tokens)
    snippets = _read_lines(args.snippets, model.vocab, args.snippet_tokens)
    gen_length = INTENSITIES[args.intensity].gen_length
    negatives = generate_batch(model, None, prefixes, gen_length, args.seed, "negative")
    result = calibrate_scheme(
        model, args.scheme, args.intensity, prefixes, snippets, negatives,
        key=args.key if args.key is not None else derive_seed(args.seed, "key") % (1 << 32),
        seed=args.seed, gamma_grid=args.gamma_grid,
    )
    write_json(args.out, result.to_dict())
    gamma, delta = result.chosen
    print(f"{args.scheme} {args.intensity}: gamma={gamma} delta={delta:.4f}")
    return 0


def cmd_generate(args) -> int:
    model = _load_source(args)
    spec = _load_spec(args.spec)
    records = []
    for i, prompt in enumerate(_read_lines(args.prompts, model.vocab, args.prefix_tokens)):
        seed = derive_seed(args.seed, "generate", i)
        gen = watermarked_generate(
            model, spec, prompt, args.max_tokens, decode=args.decode, seed=seed, min_tokens=args.min_tokens
        )
        records.append({
            "prompt_ids": list(prompt),
            "output_ids": list(gen.tokens),
            "spec": spec.to_dict() if spec is not None else None,
            "seed": seed,
        })
    _write_jsonl(args.out, records)
    print(f"wrote {len(records)} transcripts to {args.out}")
    return 0


def cmd_detect(args) -> int:
    model = _load_source(args)
    spec = _load_spec(args.spec)
    records = _read_jsonl(args.transcripts)
    if spec is None:
        specs = {json.dumps(r["spec"], sort_keys=True) for r in records if r.get("spec")}
        if len(specs) != 1:
            raise UsageError("transcripts do not name a single watermark; pass --spec")
        spec = WatermarkSpec.from_dict(json.loads(specs.pop()))
    negatives = _read_jsonl(args.negatives) if args.negatives else []
    detector = args.detector or detector_for(spec.scheme)
    reports, pos, neg = [], [], []

    def run(rec):
        seq = list(rec["prompt_ids"]) + list(rec["output_ids"])
        start = max(len(rec["prompt_ids"]), 1)
        if detector == "ewd":
            return ewd_z_score(seq, spec, model, start, args.threshold)
        return detect(seq, spec, model.vocab.size, start, args.threshold, model.vocab.bos_id)

    for rec in records:
        report = run(rec)
        out = report.to_dict()
        out["watermarked"] = rec.get("spec") is not None
        reports.append(out)
        (pos if out["watermarked"] else neg).append(report.z)
    for rec in negatives:
        neg.append(run(rec).z)
    _write_jsonl(args.out, reports)
    print(f"wrote {len(reports)} detection reports to {args.out}")
    if args.roc:
        if not pos or not neg:
            raise UsageError("an ROC needs both watermarked and unwatermarked transcripts")
        with open(args.roc, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("threshold", "tpr", "fpr"))
            for p in roc_from_scores(pos, neg):
                writer.writerow((repr(p.threshold), repr(p.tpr), repr(p.fpr)))
        print(f"wrote ROC to {args.roc}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_source(args)
    spec = _load_spec(args.spec)
    rec = evaluation_record(model, spec, args.intensity, Path(_existing(args.task, "task")))
    write_json(args.out, rec)
    s = rec["score"]
    norm = "n/a" if s["normalized"] is None else f"{s['normalized']:.4f}"
    print(f"{rec['task']}: {s['metric_name']}={s['raw']:.4f} (unwatermarked {s['unwatermarked_raw']:.4f}), normalized {norm}")
    return 0


def cmd_analyze(args) -> int:
    model = _load_source(args)
    spec = _load_spec(args.spec)
    if spec is None:
        raise UsageError("analyze needs --spec")
    task = load_task(_existing(args.task, "task"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cat = task_category(task)
    if cat == "CLS":
        summary = analyze_cls(model, spec, task, out, "")
    elif cat == "MCQ":
        summary = analyze_mcq(model, spec, task, out, "", args.k)
    else:
        raise UsageError(f"analyze supports CLS and MCQ tasks, not {cat}")
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    md, table = write_report(_existing(args.run_dir, "run directory"), args.out_dir)
    print(md.read_text(encoding="utf-8"), end="")
    return 0


def cmd_pipeline(args) -> int:
    obj = read_json(_existing(args.config, "config")) if args.config else {}
    for name in ("out_dir", "model", "endpoint", "vocab", "spec", "seed", "workers", "intensity"):
        value = getattr(args, name)
        if value is not None:
            obj[name] = value
    if args.tasks is not None:
        obj["tasks"] = args.tasks.split(",")
    obj.setdefault("out_dir", "run")
    if obj.get("model") is None and obj.get("endpoint") is None:
        obj["model"] = str(Path(obj["out_dir"]) / "model.json")
    try:
        config = RunConfig.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    report = run_pipeline(config, stop_after=args.stop_after)
    if report.exists():
        print(report.read_text(encoding="utf-8"), end="")
    return 0


# parser --------------------------------------------------------------------


def _source_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model JSON written by 'inkmark train'")
    p.add_argument("--endpoint", help="remote logit server base URL")
    p.add_argument("--vocab", help="vocabulary JSON (with --endpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inkmark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an n-gram model")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--min-count", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate one scheme at one intensity")
    _source_flags(p)
    p.add_argument("--scheme", choices=("KGW", "EWD", "SIR"), required=True)
    p.add_argument("--intensity", choices=tuple(INTENSITIES), default="moderate")
    p.add_argument("--gamma-grid", type=_floats, default=GAMMA_GRID)
    p.add_argument("--prefixes", required=True, help="one prefix document per line")
    p.add_argument("--snippets", required=True, help="one perplexity snippet per line")
    p.add_argument("--prefix-tokens", type=int, default=16)
    p.add_argument("--snippet-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--key", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("generate", help="generate (optionally watermarked) continuations")
    _source_flags(p)
    p.add_argument("--spec", help="watermark spec or calibration result JSON; omit for no watermark")
    p.add_argument("--prompts", required=True)
    p.add_argument("--prefix-tokens", type=int)
    p.add_argument("--max-tokens", type=int, default=50)
    p.add_argument("--min-tokens", type=int, default=0)
    p.add_argument("--decode", choices=("greedy", "multinomial"), default="multinomial")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="score transcripts and build an ROC")
    _source_flags(p)
    p.add_argument("--transcripts", required=True)
    p.add_argument("--negatives", help="extra unwatermarked transcripts for the ROC")
    p.add_argument("--spec")
    p.add_argument("--detector", choices=("plain", "ewd"))
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--out", required=True)
    p.add_argument("--roc")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score one task with and without a watermark")
    _source_flags(p)
    p.add_argument("--task", required=True)
    p.add_argument("--spec")
    p.add_argument("--intensity", default="custom")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="label partitions (CLS) or rank stability (MCQ)")
    _source_flags(p)
    p.add_argument("--task", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--k", type=_ints, default=(1, 2, 3))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="summarize evaluation reports in a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage end to end (resumable)")
    p.add_argument("--config", help="JSON config; flags override it")
    p.add_argument("--out-dir")
    p.add_argument("--model")
    p.add_argument("--endpoint")
    p.add_argument("--vocab")
    p.add_argument("--spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--intensity", choices=tuple(INTENSITIES))
    p.add_argument("--tasks", help="comma-separated task names")
    p.add_argument("--stop-after", choices=("train", "calibrate", "evaluate", "analyze", "report"))
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"inkmark {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"inkmark {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (InkmarkError, ValueError) as exc:
        print(f"inkmark {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
