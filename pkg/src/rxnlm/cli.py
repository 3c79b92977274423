"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Tables go to stdout as TSV with a header row. Every command also writes a
provenance record (seed, config hash, checkpoint digest) next to ``--out``
when given, else to ``--provenance``, else as one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .checkpoint import CheckpointError, config_hash, file_digest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

logger = logging.getLogger("rxnlm")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _tsv(rows: Sequence[Sequence[Any]], header: Sequence[str], out=None) -> None:
    out = out or sys.stdout
    out.write("\t".join(header) + "\n")
    for row in rows:
        out.write("\t".join("" if v is None else str(v) for v in row) + "\n")


def _inputs(value: str) -> list[str]:
    """A literal string, or the non-empty lines of a file when ``value`` names one."""
    p = Path(value)
    try:
        is_file = p.is_file()
    except OSError:
        is_file = False
    if is_file:
        return [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [value]


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"config not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"bad TOML in {path}: {exc}") from exc
    flat: dict = {}
    for key, val in raw.items():
        if isinstance(val, dict):
            flat.update(val)
        else:
            flat[key] = val
    return flat


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}") from exc


def _provenance(args, record: dict) -> None:
    record = {"command": args.command, "version": __version__, "seed": getattr(args, "seed", None),
              "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **record}
    text = json.dumps(record, sort_keys=True)
    target = getattr(args, "provenance", None)
    out = getattr(args, "out", None)
    if not target and out:
        target = str(out) + ".provenance.json"
    if target:
        Path(target).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stderr.write(text + "\n")


def _records(path: Optional[str]):
    from .corpus import bundled_corpus_path, load_corpus

    p = Path(path) if path else bundled_corpus_path()
    if not p.exists():
        raise DataError(f"corpus not found: {p}")
    return load_corpus(p)


def _load_lm(path: str):
    from .training import ReactionLM

    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    return ReactionLM.load(path)


def _load_head(path: str):
    from .checkpoint import load_checkpoint
    from .heads import TaskHeadClassifier, TaskHeadRegressor

    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    kind = load_checkpoint(path)[2].get("estimator")
    cls = {"TaskHeadRegressor": TaskHeadRegressor, "TaskHeadClassifier": TaskHeadClassifier}.get(kind)
    if cls is None:
        raise DataError(f"{path} is not a task-head checkpoint")
    return cls.load(path)


def _labelled(path: str) -> tuple[list[str], list[float]]:
    """``text<TAB>label`` rows; a header row whose label is not numeric is skipped."""
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    texts, labels = [], []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise DataError(f"{path}:{i + 1}: expected text<TAB>label")
        try:
            labels.append(float(parts[1]))
        except ValueError:
            if i == 0:
                continue
            raise DataError(f"{path}:{i + 1}: label {parts[1]!r} is not a number")
        texts.append(parts[0])
    if not texts:
        raise DataError(f"{path}: no labelled rows")
    return texts, labels


# ---------------------------------------------------------------- commands


def cmd_vocab(args) -> int:
    from .vocab import load_vocabulary

    vocab = load_vocabulary(args.vocab)
    if args.format == "json":
        print(json.dumps({t: i for t, i in vocab.entries}, ensure_ascii=False))
    else:
        _tsv([(t, i) for t, i in vocab.entries], ["token", "index"])
    _provenance(args, {"vocab_size": len(vocab.entries)})
    return EXIT_OK


def cmd_tokenize(args) -> int:
    from .vocab import encode, load_vocabulary, tokenize

    vocab = load_vocabulary(args.vocab)
    rows = []
    for text in _inputs(args.input):
        toks = tokenize(text, vocab)
        shown = encode(toks, vocab, args.max_length) if args.ids else toks
        rows.append((text, " ".join(map(str, shown))))
    _tsv(rows, ["input", "ids" if args.ids else "tokens"])
    _provenance(args, {"n_inputs": len(rows)})
    return EXIT_OK


def cmd_canon(args) -> int:
    from .smiles import canonicalize

    rows, failed = [], 0
    for text in _inputs(args.input):
        c = canonicalize(text)
        failed += c is None
        rows.append((text, c, "ok" if c is not None else "invalid"))
    _tsv(rows, ["input", "canonical", "status"])
    _provenance(args, {"n_inputs": len(rows), "n_invalid": failed})
    return EXIT_DATA if failed == len(rows) else EXIT_OK


def cmd_corpus(args) -> int:
    from .corpus import split_dataset

    load = _records(args.corpus)
    if args.action == "stats":
        recs = load.records
        n_reag = sum(bool(r.reagents) for r in recs)
        rows = [("records", len(recs)), ("skipped_lines", load.skipped), ("with_reagents", n_reag),
                ("mean_reactants", f"{sum(len(r.reactants) for r in recs) / max(len(recs), 1):.3f}"),
                ("mean_products", f"{sum(len(r.products) for r in recs) / max(len(recs), 1):.3f}")]
        _tsv(rows, ["metric", "value"])
        _provenance(args, {"corpus": args.corpus or "bundled", "records": len(recs)})
        return EXIT_OK
    ratios = _floats(args.ratios, "--ratios")
    if not ratios or any(r <= 0 for r in ratios):
        raise UsageError("--ratios must be positive numbers")
    if not args.out:
        raise UsageError("corpus split needs --out DIR")
    parts = split_dataset([r.to_string() for r in load.records], ratios, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ["train", "valid", "test"] if len(parts) == 3 else (["train", "test"] if len(parts) == 2 else
                                                                 [f"part{i}" for i in range(len(parts))])
    rows = []
    for name, part in zip(names, parts):
        (out / f"{name}.txt").write_text("".join(s + "\n" for s in part), encoding="utf-8")
        rows.append((name, len(part)))
    _tsv(rows, ["split", "records"])
    _provenance(args, {"ratios": ratios, "records": len(load.records)})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .training import ReactionLM

    params = _load_config(args.config)
    if args.seed is not None:
        params["seed"] = args.seed
    if args.steps is not None:
        params["n_steps"] = args.steps
    valid = set(ReactionLM().get_params())
    unknown = set(params) - valid
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    lm = ReactionLM(**params)
    recs = _records(args.corpus).records
    lm.fit(recs)
    digest = lm.save(args.out)
    hist = lm.history_
    rows = [(s, f"{l:.6f}") for s, l in zip(hist.steps, hist.losses)][-5:] if hasattr(hist, "steps") else []
    if rows:
        _tsv(rows, ["step", "loss"])
    _provenance(args, {"config_hash": config_hash(lm.config_.to_dict()), "checkpoint": args.out,
                       "checkpoint_sha256": digest, "params": lm.get_params()})
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .heads import TaskHeadClassifier, TaskHeadRegressor

    params = _load_config(args.config)
    if args.seed is not None:
        params["seed"] = args.seed
    if args.steps is not None:
        params["n_steps"] = args.steps
    if args.squash:
        params["squash"] = args.squash
    if args.label_range:
        lo_hi = _floats(args.label_range, "--label-range")
        if len(lo_hi) != 2 or lo_hi[0] >= lo_hi[1]:
            raise UsageError("--label-range expects LO,HI with LO < HI")
        params["label_range"] = tuple(lo_hi)
    params["finetune"] = args.mode
    cls = TaskHeadClassifier if args.task == "classification" else TaskHeadRegressor
    unknown = set(params) - set(cls().get_params())
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    if args.base and not Path(args.base).exists():
        raise DataError(f"checkpoint not found: {args.base}")
    texts, labels = _labelled(args.data)
    est = cls(base=args.base, **params).fit(texts, labels)
    digest = est.save(args.out)
    _tsv([(h["step"], f"{h['loss']:.6f}", f"{h['train']:.6f}", f"{h['val']:.6f}") for h in est.history_],
         ["step", "loss", "train_metric", "val_metric"])
    _provenance(args, {"config_hash": config_hash({k: str(v) for k, v in est.get_params().items()}),
                       "base_checkpoint_sha256": file_digest(args.base) if args.base else None,
                       "checkpoint": args.out, "checkpoint_sha256": digest, "best_step": est.best_step_,
                       "test_metric": est.test_metrics_})
    return EXIT_OK


def cmd_generate(args) -> int:
    lm = _load_lm(args.model)
    texts = _inputs(args.input)
    rows = []
    for text in texts:
        res = lm.generate(text, strategy=args.strategy, n=args.n, seed=args.seed, top_k=args.top_k,
                          top_p=args.top_p, max_new=args.max_new)
        for rank, hyp in enumerate(res, 1):
            rows.append((text, rank, hyp.text(lm.vocab_), f"{hyp.log_prob:.6f}", int(hyp.complete)))
    _tsv(rows, ["input", "rank", "output", "log_prob", "complete"])
    _provenance(args, {"checkpoint_sha256": file_digest(args.model), "strategy": args.strategy, "n": args.n,
                       "config_hash": config_hash(lm.config_.to_dict())})
    return EXIT_OK


_TASK_MASK = {"retro": 0, "reagent": 1, "forward": 2}


def cmd_eval(args) -> int:
    from .metrics import auc, mae, r_squared, rmse, syntax_error_rate, top_k_accuracy

    if args.head:
        est = _load_head(args.head)
        texts, labels = _labelled(args.data)
        if hasattr(est, "predict_proba"):
            scores = est.predict_proba(texts)[:, 1]
            rows = [("auc", f"{auc(scores, labels):.6f}")]
        else:
            pred = est.predict(texts)
            rows = [("rmse", f"{rmse(pred, labels):.6f}"), ("mae", f"{mae(pred, labels):.6f}"),
                    ("r2", f"{r_squared(pred, labels):.6f}")]
        _tsv(rows, ["metric", "value"])
        _provenance(args, {"checkpoint_sha256": file_digest(args.head), "n": len(texts)})
        return EXIT_OK
    if not args.model:
        raise UsageError("eval needs --model (language model) or --head (task head)")
    from .decoding import sentence_field

    lm = _load_lm(args.model)
    recs = _records(args.data).records[: args.limit or None]
    ks = sorted({int(k) for k in _floats(args.k, "--k")})
    if not ks or ks[0] < 1:
        raise UsageError("--k must list positive integers")
    role = ["reactant", "reagent", "product"][_TASK_MASK[args.task]]
    preds, refs = [], []
    for rec in recs:
        parts = [".".join(rec.reactants), ".".join(rec.reagents), ".".join(rec.products)]
        ref = parts[_TASK_MASK[args.task]]
        if not ref:
            continue
        parts[_TASK_MASK[args.task]] = "<msk>"
        res = lm.generate(">".join(parts), strategy="beam", n=max(ks), max_new=args.max_new)
        preds.append([sentence_field(h.text(lm.vocab_), role) or "" for h in res])
        refs.append(ref)
    rows = [(f"top_{k}", f"{top_k_accuracy(preds, refs, k):.6f}") for k in ks]
    rows += [(f"syntax_error_{k}", f"{syntax_error_rate(preds, k):.6f}") for k in ks]
    rows.append(("n", len(refs)))
    _tsv(rows, ["metric", "value"])
    _provenance(args, {"checkpoint_sha256": file_digest(args.model), "task": args.task, "n": len(refs)})
    return EXIT_OK


def cmd_plan(args) -> int:
    from .planner import PlannerConfig, ToyChemistry, annotate_route, language_model_oracles, plan, read_stock

    cfg = PlannerConfig(num_sample=args.num_sample, budget=args.budget, max_depth=args.max_depth, c=args.c,
                        tau=args.tau, routes=args.routes, seed=args.seed)
    digests: dict = {}
    if args.toy:
        toy = ToyChemistry(args.seed)
        models, stock = toy.models(), toy.stock
        canonical = False
    else:
        if not (args.model and args.value and args.policy and args.stock):
            raise UsageError("plan needs --model, --value, --policy and --stock (or --toy)")
        lm = _load_lm(args.model)
        value, policy = _load_head(args.value), _load_head(args.policy)
        if not Path(args.stock).exists():
            raise DataError(f"stock file not found: {args.stock}")
        stock = read_stock(args.stock)
        models = language_model_oracles(lm, value, policy, seed=args.seed)
        canonical = True
        digests = {k: file_digest(getattr(args, k)) for k in ("model", "value", "policy", "stock")}
    reports = plan(args.target, models, stock, cfg, canonical=canonical)
    if args.temperature or args.yield_head:
        temp = _load_head(args.temperature) if args.temperature else None
        yld = _load_head(args.yield_head) if args.yield_head else None
        reports = [annotate_route(r, temp, yld) for r in reports]
    rows = []
    for i, rep in enumerate(reports, 1):
        for j, st in enumerate(rep.steps, 1):
            rows.append((i, j, st.product, ".".join(st.precursors), st.reagents, f"{st.visit_probability:.6f}",
                         st.temperature, st.yield_percent))
        if not rep.steps:
            rows.append((i, 0, rep.target, "", "", "", None, None))
    _tsv(rows, ["route", "step", "product", "precursors", "reagents", "visit_probability", "temperature",
                "yield"])
    for i, rep in enumerate(reports, 1):
        sys.stderr.write(f"route {i}: solved={rep.solved} steps={rep.n_steps} score={rep.score:.6g}\n")
    if args.out:
        Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=2), encoding="utf-8")
    _provenance(args, {"config_hash": config_hash(vars(cfg)), "target": args.target, "toy": args.toy,
                       "digests": digests, "solved": bool(reports and reports[0].solved)})
    return EXIT_OK if reports and reports[0].solved else EXIT_DATA


def cmd_inspect(args) -> int:
    from .introspection import embedding_matrix, export_attention, pca_project, token_distance

    lm = _load_lm(args.model)
    extra = {"checkpoint_sha256": file_digest(args.model)}
    if args.action == "distance":
        if len(args.items) != 2:
            raise UsageError("inspect distance takes exactly two tokens")
        _tsv([(args.items[0], args.items[1], f"{token_distance(*args.items, lm):.6f}")],
             ["token_a", "token_b", "distance"])
    elif args.action == "pca":
        vocab = lm.vocab_
        tokens = args.items or [t for t, _ in vocab.entries]
        w = embedding_matrix(lm)
        res = pca_project(w[[vocab.index(t) for t in tokens]], args.dims)
        _tsv([(t, *[f"{v:.6f}" for v in row]) for t, row in zip(tokens, res.coords)],
             ["token"] + [f"pc{i + 1}" for i in range(args.dims)])
        extra["explained_variance_ratio"] = res.explained_variance_ratio.tolist()
    else:
        if len(args.items) != 1:
            raise UsageError("inspect attention takes one reaction")
        head = args.head if args.head == "mean" else int(args.head)
        amap = export_attention(args.items[0], lm, args.layer, args.kind, head)
        sys.stdout.write(amap.to_tsv())
    _provenance(args, extra)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rxnlm", description="Reaction language model toolkit")
    p.add_argument("--version", action="version", version=f"rxnlm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--provenance", help="where to write the provenance JSON record")
        return sp

    sp = add("vocab", cmd_vocab, "print the vocabulary")
    sp.add_argument("--vocab", help="vocabulary file (TSV or JSON)")
    sp.add_argument("--format", choices=["tsv", "json"], default="tsv")

    sp = add("tokenize", cmd_tokenize, "tokenize a string or every line of a file")
    sp.add_argument("input")
    sp.add_argument("--ids", action="store_true", help="print framed token indices")
    sp.add_argument("--vocab")
    sp.add_argument("--max-length", type=int, default=1024)

    sp = add("canon", cmd_canon, "canonicalize SMILES")
    sp.add_argument("input")

    sp = add("corpus", cmd_corpus, "corpus statistics and splits")
    sp.add_argument("action", choices=["stats", "split"])
    sp.add_argument("--corpus", help="reaction file (default: bundled corpus)")
    sp.add_argument("--ratios", default="9,1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("pretrain", cmd_pretrain, "train the mask-filling language model")
    sp.add_argument("--config", help="TOML with estimator parameters")
    sp.add_argument("--corpus")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "fit a task head on labelled text")
    sp.add_argument("--data", required=True, help="TSV of text<TAB>label")
    sp.add_argument("--task", choices=["regression", "classification"], default="regression")
    sp.add_argument("--base", help="pretrained checkpoint")
    sp.add_argument("--mode", choices=["lora", "full", "head"], default="lora")
    sp.add_argument("--squash", choices=["none", "sigmoid"])
    sp.add_argument("--label-range")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)

    sp = add("generate", cmd_generate, "fill a masked reaction")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="masked reaction or file of them")
    sp.add_argument("--strategy", choices=["beam", "top_k", "top_p", "full"], default="beam")
    sp.add_argument("--n", type=int, default=5)
    sp.add_argument("--top-k", type=int, default=10)
    sp.add_argument("--top-p", type=float, default=0.9)
    sp.add_argument("--max-new", type=int)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval", cmd_eval, "top-k accuracy of a language model, or task-head metrics")
    sp.add_argument("--model")
    sp.add_argument("--head")
    sp.add_argument("--data")
    sp.add_argument("--task", choices=sorted(_TASK_MASK), default="retro")
    sp.add_argument("--k", default="1,3,5")
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--max-new", type=int)

    sp = add("plan", cmd_plan, "multi-step retrosynthesis search")
    sp.add_argument("--target", required=True)
    sp.add_argument("--toy", action="store_true", help="use the string-splitting toy chemistry")
    sp.add_argument("--model")
    sp.add_argument("--value")
    sp.add_argument("--policy")
    sp.add_argument("--stock")
    sp.add_argument("--temperature", help="temperature head checkpoint")
    sp.add_argument("--yield", dest="yield_head", help="yield head checkpoint")
    sp.add_argument("--budget", type=int, default=500)
    sp.add_argument("--num-sample", type=int, default=50)
    sp.add_argument("--max-depth", type=int, default=20)
    sp.add_argument("--c", type=float, default=1.5)
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--routes", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("inspect", cmd_inspect, "embedding distances, PCA and attention maps")
    sp.add_argument("action", choices=["distance", "pca", "attention"])
    sp.add_argument("items", nargs="*")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dims", type=int, default=2)
    sp.add_argument("--layer", type=int, default=-1)
    sp.add_argument("--kind", choices=["encoder", "decoder", "cross"], default="encoder")
    sp.add_argument("--head", default="mean")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .corpus import ReactionFormatError, ReactionValidityError
    from .smiles import SmilesSyntaxError
    from .vocab import DecodeError, SequenceLengthError, VocabularyError

    data_errors = (DataError, CheckpointError, FileNotFoundError, SmilesSyntaxError, VocabularyError,
                   SequenceLengthError, DecodeError, ReactionFormatError, ReactionValidityError)
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"rxnlm {args.command}: {exc}\n")
        return EXIT_USAGE
    except data_errors as exc:
        sys.stderr.write(f"rxnlm {args.command}: {exc}\n")
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        sys.stderr.write(f"rxnlm {args.command}: internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
