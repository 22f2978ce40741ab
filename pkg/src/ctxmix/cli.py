"""Command-line entry point: ``ctxmix <subcommand> ...``.

Subcommands: gen-data, init-model, train, score, eval, export. Outputs go to
``--out-dir`` (default: ``$CTXMIX_OUTPUT_DIR`` or the current directory). Every
CSV starts with a ``# seed: N`` line; timestamps only ever go to ``run.log``.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from . import pipeline, plotting
from .model import EncoderConfig, init_weights
from .numerics import DistanceKind
from .scorers import Baseline
from .training import DivergenceError, TrainConfig, TrainMode, evaluate_accuracy, train
from .weights_io import WeightFileError, load_weights, save_weights

log = logging.getLogger("ctxmix")

OUTPUT_ENV = "CTXMIX_OUTPUT_DIR"


class CLIError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(out: Path, message: str) -> None:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise CLIError(f"missing required artifact: {what}")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"missing required artifact: {what} ({p})")
    return p


def _write_csv(path: Path, seed: int, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed: {seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    if args.config:
        cfg = data_mod.GeneratorConfig.from_text(_require(args.config, "generator config").read_text())
    else:
        cfg = data_mod.GeneratorConfig(
            n=2 * args.n,
            attractor_rate=args.attractor_rate,
            min_length=args.min_length,
            max_length=args.max_length,
            seed=args.seed,
        )
    vocab = data_mod.default_vocab()
    examples = data_mod.generate_synthetic(cfg, vocab)
    train_set, test_set = data_mod.split_equally(examples)
    out = _out_dir(args)
    for name, ds in (("train", train_set), ("test", test_set)):
        data_mod.save_dataset(ds, out / f"{name}.jsonl", vocab)
        sg = sum(ex.number_label is data_mod.Number.SINGULAR for ex in ds)
        attractors = sum(
            any(data_mod.is_attractor(vocab, t, ex.number_label) for t in ex.token_ids) for ex in ds
        )
        print(f"{name}: {len(ds)} examples, singular={sg}, plural={len(ds) - sg}, attractors={attractors}")
    _sidecar(out, f"gen-data seed={cfg.seed} n={cfg.n}")
    return 0


# ---------------------------------------------------------------------------
# init-model / train


def cmd_init_model(args) -> int:
    config = EncoderConfig(
        num_layers=args.layers,
        num_heads=args.heads,
        model_dim=args.dim,
        ffn_dim=args.ffn_dim,
        vocab_size=len(data_mod.default_vocab()),
        max_positions=args.max_positions,
        tie_head=not args.untied_head,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(init_weights(config, args.seed), out, text=args.text)
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    weights = load_weights(_require(args.weights, "weights"))
    train_set = data_mod.load_dataset(_require(args.data, "training data"), split=data_mod.Split.TRAIN)
    eval_set = (
        data_mod.load_dataset(_require(args.eval_data, "evaluation data"), split=data_mod.Split.TEST)
        if args.eval_data
        else None
    )
    config = TrainConfig(
        mode=TrainMode(args.mode),
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        eval_interval=args.eval_interval,
        seed=args.seed,
        unk_rate=args.unk_rate if args.mode == "mlm" else 0.0,
    )
    try:
        trained, report = train(weights, train_set, config, eval_set)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if report.accuracy is None:
        report.accuracy = evaluate_accuracy(trained, eval_set or train_set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(trained, out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.csv")
    report.write_csv(report_path, seed=args.seed)
    print(f"accuracy={report.accuracy:.4f} steps={report.steps} checkpoint={out} report={report_path}")
    _sidecar(out.parent, f"train mode={args.mode} seed={args.seed} steps={report.steps}")
    return 0


# ---------------------------------------------------------------------------
# score


def _score_options(args) -> pipeline.ScoreOptions:
    return pipeline.ScoreOptions(
        distance=DistanceKind.parse(args.distance, args.normalize_representations),
        add_identity=args.add_identity,
        ig_steps=args.ig_steps,
        baseline=Baseline.parse(args.baseline),
        objective=args.objective,
        exclude_special_tokens=args.exclude_special_tokens,
        seed=args.seed,
    )


def _methods(spec: Sequence[str]) -> List[str]:
    names = [m for item in spec for m in item.split(",") if m]
    for m in names:
        if m not in pipeline.ALL_METHODS:
            raise pipeline.UnknownMethodError(m)
    return names


def cmd_score(args) -> int:
    weights = load_weights(_require(args.weights, "weights"))
    dataset = data_mod.load_dataset(_require(args.data, "dataset"))
    if args.limit:
        dataset = data_mod.Dataset(dataset.examples[: args.limit], dataset.split)
    vocab = data_mod.default_vocab()
    methods = _methods(args.method)
    options = _score_options(args)
    L = weights.config.num_layers
    layers = None
    if args.layer not in ("all", "aggregated"):
        layers = [int(args.layer)]
        if not 0 <= layers[0] <= L:
            raise CLIError(f"--layer must be 'all', 'aggregated' or 0..{L}")
    out = _out_dir(args)
    for method in methods:
        results = pipeline.score_dataset(method, weights, dataset, options, layers, args.jobs)
        jsonl = out / f"scores_{method}.jsonl"
        rows = []
        with open(jsonl, "w", encoding="utf-8") as fh:
            for idx, (ex, res) in enumerate(zip(dataset, results)):
                rec = {
                    "index": idx,
                    "method": method,
                    "seed": args.seed,
                    "mask_position": ex.mask_position,
                    "tokens": vocab.decode(ex.token_ids),
                    "layers": {},
                    "aggregated": _floats(res.aggregated),
                }
                if args.layer != "aggregated":
                    for l, vec in sorted(res.layer_vectors.items()):
                        entry = {"row": _floats(vec)}
                        if res.maps is not None and l >= 1:
                            entry["map"] = _floats(res.maps[l - 1])
                        rec["layers"][str(l)] = entry
                        rows.extend((idx, l, p, tok, float(s)) for p, (tok, s) in enumerate(zip(rec["tokens"], vec)))
                if args.aggregate == "rollout" and res.rollout is not None:
                    rec["rollout"] = [_floats(r) for r in res.rollout]
                rows.extend(
                    (idx, "aggregated", p, tok, float(s)) for p, (tok, s) in enumerate(zip(rec["tokens"], res.aggregated))
                )
                fh.write(json.dumps(rec) + "\n")
        _write_csv(out / f"scores_{method}.csv", args.seed, ["example", "layer", "position", "token", "score"], rows)
        print(f"{method}: scored {len(results)} examples -> {jsonl}")
    _sidecar(out, f"score methods={','.join(methods)} seed={args.seed}")
    return 0


def _read_scores(path: Path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _scored_subset(dataset, loaded: Dict[str, List[dict]]):
    """Restrict ``dataset`` to the example indices every score file covers."""
    index_sets = {m: [r["index"] for r in recs] for m, recs in loaded.items()}
    first = next(iter(index_sets.values()))
    for m, idx in index_sets.items():
        if idx != first:
            raise CLIError(f"score files cover different examples ({m!r} differs)")
    if first and max(first) >= len(dataset):
        raise CLIError(f"score files reference example {max(first)} but the dataset has {len(dataset)}")
    return data_mod.Dataset([dataset.examples[i] for i in first], dataset.split)


def _score_files(scores_dir: Path, methods: Optional[Sequence[str]]) -> Dict[str, Path]:
    if methods:
        found = {}
        for m in _methods(methods):
            p = scores_dir / f"scores_{m}.jsonl"
            if not p.exists():
                raise CLIError(f"missing required artifact: score file for {m!r} ({p}); run `ctxmix score` first")
            found[m] = p
        return found
    found = {p.stem[len("scores_"):]: p for p in sorted(scores_dir.glob("scores_*.jsonl"))}
    if not found:
        raise CLIError(f"missing required artifact: no scores_*.jsonl files in {scores_dir}")
    return found


# ---------------------------------------------------------------------------
# eval


def _eval_cue_alignment(args, out: Path) -> None:
    dataset = data_mod.load_dataset(_require(args.data, "dataset"))
    files = _score_files(_require(args.scores_dir, "scores directory"), args.method)
    loaded = {m: _read_scores(p) for m, p in files.items() if m != "blank_out"}
    if not loaded:
        raise CLIError("missing required artifact: no score files besides blank_out")
    dataset = _scored_subset(dataset, loaded)
    vectors = {}
    for method, recs in loaded.items():
        for key in recs[0]["layers"]:
            vectors[(method, int(key))] = [np.asarray(r["layers"][key]["row"]) for r in recs]
        vectors[(method, "aggregated")] = [np.asarray(r["aggregated"]) for r in recs]
    report = ev.cue_alignment(dataset, vectors)
    rows = sorted(report.rows(), key=lambda r: (r[0], str(r[1]), r[2]))
    _write_csv(out / "cue_alignment.csv", args.seed, ["method", "layer", "metric", "value"], rows)
    for metric in ("dot", "ap", "probes_needed"):
        table: Dict[str, Dict[int, float]] = {}
        for method, layer, m, value in rows:
            if m == metric and layer != "aggregated":
                table.setdefault(method, {})[layer] = value
        plotting.alignment_heatmap(table, metric, out / f"cue_alignment_{metric}.svg", f"cue alignment ({metric})")
    print(f"cue alignment: {len(vectors)} (method, layer) cells -> {out / 'cue_alignment.csv'}")


def _eval_probing(args, out: Path) -> None:
    weights = load_weights(_require(args.weights, "weights"))
    dataset = data_mod.load_dataset(_require(args.data, "dataset"))
    reps = pipeline.mask_representations(weights, dataset)
    labels = np.array([ex.number_label.index for ex in dataset])
    if args.random_labels:
        labels = np.random.default_rng(args.seed).integers(0, 2, size=len(labels))
    levels = [args.layer] if args.layer is not None else range(len(reps))
    reports = [ev.mdl_online(reps[l], labels, 2, seed=args.seed, layer=l) for l in levels]
    rows = []
    for r in reports:
        rows += [(r.layer, "mdl_bits", r.mdl), (r.layer, "compression", r.compression), (r.layer, "N", r.N), (r.layer, "K", r.K)]
        rows += [(r.layer, f"chunk_bits@{b}", bits) for b, bits in zip(r.boundaries, r.chunk_bits)]
    _write_csv(out / "probing.csv", args.seed, ["layer", "metric", "value"], rows)
    plotting.compression_plot([r.layer for r in reports], [r.compression for r in reports], out / "compression.svg")

    if args.alignment:
        comp = {r.layer: r.compression for r in reports}
        align: Dict[str, Dict[int, float]] = {}
        with open(_require(args.alignment, "cue alignment CSV"), encoding="utf-8") as fh:
            for row in csv.DictReader(line for line in fh if not line.startswith("#")):
                if row["metric"] == "dot" and row["layer"] != "aggregated":
                    align.setdefault(row["method"], {})[int(row["layer"])] = float(row["value"])
        corr_rows = []
        for method, per_layer in sorted(align.items()):
            shared = sorted(set(per_layer) & set(comp))
            if len(shared) < 2:
                continue
            rho = ev.layerwise_correlation([per_layer[l] for l in shared], [comp[l] for l in shared])
            corr_rows.append((method, len(shared), "degenerate" if np.isnan(rho) else repr(rho)))
        _write_csv(out / "probing_correlation.csv", args.seed, ["method", "num_layers", "spearman_rho"], corr_rows)
    print("compression: " + ", ".join(f"L{r.layer}={r.compression:.3f}" for r in reports))


def _eval_faithfulness(args, out: Path) -> None:
    weights = load_weights(_require(args.weights, "weights"))
    dataset = data_mod.load_dataset(_require(args.data, "dataset"))
    scores_dir = _require(args.scores_dir, "scores directory")
    files = _score_files(scores_dir, args.method)
    loaded = {m: _read_scores(p) for m, p in files.items()}
    dataset = _scored_subset(dataset, loaded)
    method_scores = {}
    for method, recs in loaded.items():
        method_scores[method] = [np.asarray(r["aggregated"]) for r in recs]
    blank = method_scores.get("blank_out") or [ev.blank_out_scores(weights, ex) for ex in dataset]
    exclude = [pipeline.special_positions(ex) for ex in dataset] if args.exclude_special_tokens else None
    report = ev.faithfulness_correlation(weights, dataset, method_scores, blank, exclude)
    rows = []
    for method in method_scores:
        lo_hi = ev.bootstrap_ci(report.per_example[method], seed=args.seed)
        rows += [
            (method, "mean_rho", report.mean_rho(method)),
            (method, "ci95_low", lo_hi[1]),
            (method, "ci95_high", lo_hi[2]),
            (method, "examples", int(np.sum(~np.isnan(report.per_example[method])))),
            (method, "degenerate", report.degenerate(method)),
            (method, "skipped_short", report.skipped_short),
        ]
    _write_csv(out / "faithfulness.csv", args.seed, ["method", "metric", "value"], rows)
    per_ex = []
    for method, rhos in report.per_example.items():
        per_ex += [(i, method, "degenerate" if np.isnan(r) else repr(float(r))) for i, r in enumerate(rhos)]
    _write_csv(out / "faithfulness_examples.csv", args.seed, ["example", "method", "rho"], per_ex)
    print("mean rho: " + ", ".join(f"{m}={report.mean_rho(m):.3f}" for m in method_scores))


def cmd_eval(args) -> int:
    out = _out_dir(args)
    {"cue-alignment": _eval_cue_alignment, "probing": _eval_probing, "faithfulness": _eval_faithfulness}[
        args.protocol
    ](args, out)
    _sidecar(out, f"eval {args.protocol} seed={args.seed}")
    return 0


# ---------------------------------------------------------------------------
# export


def cmd_export(args) -> int:
    out = _out_dir(args)
    docs = {}
    for path in args.scores:
        recs = _read_scores(_require(path, "score file"))
        if not 0 <= args.example < len(recs):
            raise CLIError(f"example {args.example} not in {path} ({len(recs)} records)")
        rec = recs[args.example]
        docs[rec["method"]] = rec
    tokens = next(iter(docs.values()))["tokens"]
    seed = next(iter(docs.values()))["seed"]
    written = []
    for method, rec in docs.items():
        stem = f"example{args.example}_{method}"
        matrices = {f"layer{k}": v["map"] for k, v in rec["layers"].items() if "map" in v}
        matrices.update({f"rollout{i + 1}": m for i, m in enumerate(rec.get("rollout", []))})
        if "csv" in args.format:
            for name, mat in matrices.items():
                written.append(_write_csv(out / f"{stem}_{name}.csv", seed, tokens, mat))
            vectors = {k: v["row"] for k, v in rec["layers"].items()}
            vectors["aggregated"] = rec["aggregated"]
            written.append(
                _write_csv(out / f"{stem}_rows.csv", seed, ["layer"] + tokens, ([k] + list(v) for k, v in vectors.items()))
            )
        if "svg" in args.format:
            for name, mat in matrices.items():
                written.append(plotting.map_heatmap(np.asarray(mat), tokens, out / f"{stem}_{name}.svg", f"{method} {name}"))
    if "json" in args.format:
        doc = {"example": args.example, "seed": seed, "tokens": tokens, "methods": docs}
        path = out / f"example{args.example}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        written.append(path)
    print(f"wrote {len(written)} files to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxmix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out-dir", default=None, help=f"output directory (default ${OUTPUT_ENV} or .)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-data", help="generate synthetic train/test agreement data")
    common(g)
    g.add_argument("--n", type=int, default=2000, help="examples per split")
    g.add_argument("--attractor-rate", type=float, default=0.25)
    g.add_argument("--min-length", type=int, default=6)
    g.add_argument("--max-length", type=int, default=12)
    g.add_argument("--config", help="key = value generator config file (overrides flags; n is the total)")
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("init-model", help="write freshly initialized weights")
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--layers", type=int, default=3)
    i.add_argument("--heads", type=int, default=4)
    i.add_argument("--dim", type=int, default=64)
    i.add_argument("--ffn-dim", type=int, default=128)
    i.add_argument("--max-positions", type=int, default=32)
    i.add_argument("--untied-head", action="store_true")
    i.add_argument("--text", action="store_true", help="write the inline-text weight format")
    i.set_defaults(func=cmd_init_model)

    t = sub.add_parser("train", help="MLM pre-training or restricted-logit fine-tuning")
    t.add_argument("--weights", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="loss-curve CSV (default <out>.report.csv)")
    t.add_argument("--mode", choices=[m.value for m in TrainMode], default="finetune")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--max-steps", type=int, default=600)
    t.add_argument("--eval-interval", type=int, default=100)
    t.add_argument("--unk-rate", type=float, default=0.1, help="MLM only: [UNK] corruption rate")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="run context-mixing / attribution methods over a dataset")
    common(s)
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", action="append", required=True, help=f"one of {', '.join(pipeline.ALL_METHODS)}")
    s.add_argument("--layer", default="all", help="'all', 'aggregated' or a layer index")
    s.add_argument("--aggregate", choices=["none", "rollout"], default="none")
    s.add_argument("--distance", default="cosine", choices=["cosine", "euclidean", "spearman"])
    s.add_argument("--normalize-representations", action="store_true")
    s.add_argument("--add-identity", dest="add_identity", action="store_true", default=None)
    s.add_argument("--no-add-identity", dest="add_identity", action="store_false")
    s.add_argument("--exclude-special-tokens", action="store_true")
    s.add_argument("--ig-steps", type=int, default=64)
    s.add_argument("--baseline", default="zero", help="'zero' or 'token:<id>'")
    s.add_argument("--objective", choices=["logit", "logprob"], default="logit")
    s.add_argument("--limit", type=int, default=0, help="score only the first N examples")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="cue alignment, MDL probing or blank-out faithfulness")
    common(e)
    e.add_argument("protocol", choices=["cue-alignment", "probing", "faithfulness"])
    e.add_argument("--data", required=True)
    e.add_argument("--weights")
    e.add_argument("--scores-dir")
    e.add_argument("--method", action="append")
    e.add_argument("--layer", type=int, help="probing: single representation level")
    e.add_argument("--random-labels", action="store_true", help="probing: replace labels with seeded coin flips")
    e.add_argument("--alignment", help="probing: cue_alignment.csv to correlate with compression")
    e.add_argument("--exclude-special-tokens", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write one example's maps as CSV / SVG / JSON")
    common(x, seed=False)
    x.add_argument("--scores", action="append", required=True)
    x.add_argument("--example", type=int, default=0)
    x.add_argument("--format", action="append", choices=["csv", "json", "svg"], default=None)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "format", "unset") is None:
        args.format = ["csv", "json"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, pipeline.UnknownMethodError, data_mod.DatasetFormatError, data_mod.GeneratorConfigError,
            WeightFileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
