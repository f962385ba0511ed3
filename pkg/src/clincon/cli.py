"""``clincon`` command line.

Every subcommand writes its artifacts plus a ``*.manifest.json`` recording the
resolved configuration, seeds and the sha256 of each output. Manifests carry
no timestamps, so identical invocations give byte-identical files.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from clincon.data import (
    balanced_biomarker_testset,
    label_histogram,
    load_manifest,
    split_by_identity,
    write_manifest,
)
from clincon.errors import DataError, NumericError
from clincon.experiments import run_access_sweep
from clincon.losses import LossSpec
from clincon.metrics import MetricReport, biomarker_metrics, build_report, multilabel_auroc, paired_t_test
from clincon.synthetic import CohortConfig, default_biomarker_specs, generate_cohort
from clincon.theory import SweepPipeline, TaskConfig, run_proxy_cell, summarize_sweep, write_sweep_csv
from clincon.train import (
    ClassifierState,
    EncoderConfig,
    EncoderState,
    HyperParams,
    distill,
    export_embeddings,
    predict,
    pretrain_contrastive,
    train_linear_probe,
    train_supervised_baseline,
)

log = logging.getLogger("clincon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, which we reserve for data errors
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """JSON run file: hyperparameters, loss, encoder shape, seed and paths."""

    hyperparams: HyperParams = field(default_factory=HyperParams)
    loss: str = "cst+eye"
    bin_widths: dict[str, float] = field(default_factory=dict)
    encoder: dict[str, Any] = field(default_factory=lambda: {"hidden": [256], "rep_dim": 64})
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, {f.name for f in fields(cls)}, "run config")
        d = dict(d)
        if "hyperparams" in d:
            _reject_unknown(d["hyperparams"], {f.name for f in fields(HyperParams)}, "hyperparams")
            d["hyperparams"] = HyperParams(**d["hyperparams"])
        if "encoder" in d:
            _reject_unknown(d["encoder"], {"hidden", "rep_dim", "head_hidden", "proj_dim"}, "encoder")
        cfg = cls(**d)
        cfg.loss_spec()  # validate early
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        except TypeError as exc:
            raise DataError(f"{path}: {exc}") from None

    def loss_spec(self) -> LossSpec:
        return LossSpec.parse(self.loss, temperature=self.hyperparams.temperature,
                              bin_widths=tuple(self.bin_widths.items()))

    def encoder_config(self, payload_dim: int) -> EncoderConfig:
        return EncoderConfig(payload_dim, **{**self.encoder, "hidden": tuple(self.encoder.get("hidden", (256,)))})

    def to_dict(self) -> dict:
        return {"hyperparams": asdict(self.hyperparams), "loss": self.loss, "bin_widths": dict(self.bin_widths),
                "encoder": dict(self.encoder), "seed": self.seed, "paths": dict(self.paths)}


def _reject_unknown(d: Any, known: set[str], what: str) -> None:
    if not isinstance(d, dict):
        raise DataError(f"{what} must be a JSON object")
    unknown = sorted(set(d) - known)
    if unknown:
        raise DataError(f"unknown {what} keys: {unknown}")


HP_FLAGS = {
    "batch_size": int, "epochs": int, "momentum": float, "lr_pretrain": float,
    "weight_decay": float, "lr_probe": float, "aug_noise": float, "aug_dropout": float,
}


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    hp = asdict(cfg.hyperparams)
    for name in HP_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            hp[name] = v
    if getattr(args, "tau", None) is not None:
        hp["temperature"] = args.tau
    cfg.hyperparams = HyperParams(**hp)
    if getattr(args, "loss", None):
        cfg.loss = args.loss
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.loss_spec()
    return cfg


def _add_hp_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON; flags override its values")
    for name, typ in HP_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path: str | os.PathLike, command: str, config: dict, seeds: Sequence[int],
                       outputs: Sequence[str | os.PathLike]) -> Path:
    path = Path(path)
    doc = {
        "command": command,
        "config": config,
        "seeds": [int(s) for s in seeds],
        "outputs": {Path(o).name: sha256_file(o) for o in outputs},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_for(out: str | os.PathLike) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _fractions(text: str) -> list[float]:
    """Percentages (``25,50``) or fractions (``0.25,0.5``)."""
    vals = _float_list(text)
    if any(v > 1 for v in vals):
        vals = [v / 100.0 for v in vals]
    return vals


def max_workers() -> int:
    raw = os.environ.get("CLINCON_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CLINCON_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"CLINCON_THREADS must be a positive integer, got {raw!r}")
    return n


def fan_out(fn: Callable, cells: Sequence[tuple]) -> list:
    """Run ``fn(*cell)`` for each cell, in order, using up to CLINCON_THREADS processes."""
    workers = min(max_workers(), len(cells))
    if workers <= 1:
        return [fn(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*cells)))


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return path


def _parse_tests(items: Sequence[str], targets: Sequence[str]) -> dict[str, str]:
    """``--test path`` applies to every target; ``--test NAME=path`` to one."""
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if sep:
            out[name] = path
        else:
            out.update({t: item for t in targets})
    missing = [t for t in targets if t not in out]
    if missing:
        raise UsageError(f"no test set given for {missing}")
    return {t: out[t] for t in targets}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> list[Path]:
    if args.config:
        try:
            cfg_dict = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc})") from None
        cfg = CohortConfig.from_dict(cfg_dict)
    else:
        cfg = CohortConfig(biomarker_specs=default_biomarker_specs())
    if args.seed is not None:
        cfg = CohortConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, gt = generate_cohort(cfg)
    manifest = write_manifest(ds, out / "manifest.csv")
    gt_path = out / "ground_truth.json"
    gt.save(gt_path)
    payloads = sorted((out / "manifest_payloads").iterdir())
    write_run_manifest(out / "run.manifest.json", "gen-synth", cfg.to_dict(), [cfg.seed],
                       [manifest, gt_path, *payloads])
    log.info("wrote %d samples to %s", len(ds), manifest)
    return [manifest, gt_path]


def cmd_split(args) -> list[Path]:
    ds = load_manifest(args.data)
    train, test = split_by_identity(ds, args.key, args.holdout, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_manifest(train, out / "train.csv"), write_manifest(test, out / "test.csv")]
    for b in args.balanced or []:
        bal = balanced_biomarker_testset(test, b, args.per_class, args.seed)
        written.append(write_manifest(bal, out / f"test_{b}.csv"))
    config = {"data": str(args.data), "key": args.key, "holdout": args.holdout,
              "balanced": list(args.balanced or []), "per_class": args.per_class}
    write_run_manifest(out / "split.manifest.json", "split", config, [args.seed], written)
    return written


def cmd_histogram(args) -> list[Path]:
    hist = label_histogram(load_manifest(args.data), args.key)
    doc = {"key": hist.key, "bins": [[v, n, e] for v, n, e in hist.bins]}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if not args.out:
        sys.stdout.write(text)
        return []
    Path(args.out).write_text(text)
    write_run_manifest(_manifest_for(args.out), "histogram", {"data": str(args.data), "key": args.key}, [], [args.out])
    return [Path(args.out)]


def cmd_pretrain(args) -> list[Path]:
    cfg = _resolve_config(args)
    train = load_manifest(args.train)
    spec = cfg.loss_spec()
    enc = pretrain_contrastive(train, spec, cfg.hyperparams, cfg.encoder_config(train.payload_dim), cfg.seed)
    enc.meta["train_sha256"] = sha256_file(args.train)
    enc.save(args.out)
    write_run_manifest(_manifest_for(args.out), "pretrain", {**cfg.to_dict(), "train": str(args.train)},
                       [cfg.seed], [args.out])
    return [Path(args.out)]


def _target_arg(text: str) -> str | list[str]:
    parts = [t.strip() for t in text.split(",") if t.strip()]
    return parts[0] if len(parts) == 1 else parts


def cmd_probe(args) -> list[Path]:
    cfg = _resolve_config(args)
    enc = EncoderState.load(args.encoder)
    clf = train_linear_probe(enc, load_manifest(args.train), _target_arg(args.target), cfg.hyperparams, cfg.seed)
    clf.save(args.out)
    write_run_manifest(_manifest_for(args.out), "probe",
                       {**cfg.to_dict(), "encoder": str(args.encoder), "train": str(args.train), "target": args.target},
                       [cfg.seed], [args.out])
    return [Path(args.out)]


def cmd_baseline(args) -> list[Path]:
    cfg = _resolve_config(args)
    labeled = load_manifest(args.train)
    clf = train_supervised_baseline(labeled, _target_arg(args.target), cfg.hyperparams,
                                    cfg.encoder_config(labeled.payload_dim), cfg.seed)
    clf.save(args.out)
    write_run_manifest(_manifest_for(args.out), "baseline",
                       {**cfg.to_dict(), "train": str(args.train), "target": args.target}, [cfg.seed], [args.out])
    return [Path(args.out)]


def cmd_distill(args) -> list[Path]:
    cfg = _resolve_config(args)
    teacher = ClassifierState.load(args.teacher)
    labeled = load_manifest(args.labeled)
    unlabeled = load_manifest(args.unlabeled)
    student = distill(teacher, labeled, unlabeled, args.temperature, cfg.hyperparams, cfg.seed, args.student_init)
    student.save(args.out)
    config = {**cfg.to_dict(), "teacher": str(args.teacher), "labeled": str(args.labeled),
              "unlabeled": str(args.unlabeled), "temperature": args.temperature, "student_init": args.student_init}
    write_run_manifest(_manifest_for(args.out), "distill", config, [cfg.seed], [args.out])
    return [Path(args.out)]


def evaluate_model(model: ClassifierState, tests: dict[str, str], seed: int | None) -> MetricReport:
    names = model.biomarkers
    per = {}
    for j, b in enumerate(names):
        test = load_manifest(tests[b])
        scores = predict(model, test)
        scores = scores[:, j] if model.multilabel else scores
        per[b] = biomarker_metrics(scores, test.biomarker_targets([b])[:, 0])
    ml = None
    if model.multilabel and len(set(tests.values())) == 1:
        test = load_manifest(tests[names[0]])
        ml = multilabel_auroc(predict(model, test), test.biomarker_targets(names), names)
    return build_report(per, seed, ml)


def cmd_eval(args) -> list[Path]:
    model = ClassifierState.load(args.model)
    report = evaluate_model(model, _parse_tests(args.test, model.biomarkers), model.meta.get("seed"))
    report.save(args.out)
    write_run_manifest(_manifest_for(args.out), "eval", {"model": str(args.model), "test": list(args.test)},
                       [report.seed] if report.seed is not None else [], [args.out])
    return [Path(args.out)]


def _access_cell(encoder: str, train: str, tests: dict[str, str], fraction: float, seed: int, hp: dict) -> dict:
    enc = EncoderState.load(encoder)
    test_sets = {b: load_manifest(p) for b, p in tests.items()}
    return run_access_sweep(enc, load_manifest(train), test_sets, (fraction,), (seed,), HyperParams(**hp))[0]


def cmd_sweep_access(args) -> list[Path]:
    cfg = _resolve_config(args)
    fractions = _fractions(args.fractions)
    seeds = _int_list(args.seeds)
    if not fractions or not seeds:
        raise UsageError("need at least one fraction and one seed")
    targets = [t.strip() for t in args.target.split(",") if t.strip()]
    tests = _parse_tests(args.test, targets)
    hp = asdict(cfg.hyperparams)
    cells = [(args.encoder, args.train, tests, f, s, hp) for f in fractions for s in seeds]
    rows = fan_out(_access_cell, cells)
    columns = ["fraction", "seed", "n_labeled", "auroc", *(f"auroc_{b}" for b in targets)]
    out = _write_csv(Path(args.out), columns, rows)
    config = {**cfg.to_dict(), "encoder": str(args.encoder), "train": str(args.train), "tests": tests,
              "fractions": fractions}
    write_run_manifest(_manifest_for(out), "sweep-access", config, seeds, [out])
    return [out]


def cmd_theory_sweep(args) -> list[Path]:
    eps = _float_list(args.eps)
    seeds = _int_list(args.seeds)
    prior = tuple(_float_list(args.prior)) if args.prior else None
    task = TaskConfig(K=args.K, m=args.m, sigma=args.sigma, prior=prior)
    pipe = SweepPipeline()
    if args.epochs is not None:
        pipe = SweepPipeline(pretrain=HyperParams(batch_size=128, epochs=args.epochs))
    if len(eps) < 3:
        raise DataError("a proxy sweep needs at least 3 corruption levels")
    rows = fan_out(run_proxy_cell, [(e, task, pipe, s) for e in eps for s in seeds])
    out = write_sweep_csv(rows, args.out)
    summary = Path(args.out).with_suffix(".summary.json")
    summary.write_text(json.dumps(summarize_sweep(rows), indent=2, sort_keys=True) + "\n")
    config = {"eps": eps, "task": asdict(task), "pipeline": {**asdict(pipe)}}
    write_run_manifest(_manifest_for(out), "theory-sweep", config, seeds, [out, summary])
    return [out, summary]


def cmd_export_embeddings(args) -> list[Path]:
    enc = EncoderState.load(args.encoder)
    out = export_embeddings(enc, load_manifest(args.data), args.out, args.layer)
    write_run_manifest(_manifest_for(out), "export-embeddings",
                       {"encoder": str(args.encoder), "data": str(args.data), "layer": args.layer}, [], [out])
    return [out]


def _metric_from_report(report: MetricReport, metric: str, biomarker: str | None) -> float:
    if biomarker:
        if biomarker not in report.per_biomarker:
            raise DataError(f"report has no entry for biomarker {biomarker!r}")
        return float(report.per_biomarker[biomarker][metric])
    if metric == "multilabel_auroc":
        if report.multilabel_auroc is None:
            raise DataError("report has no multi-label AUROC")
        return float(report.multilabel_auroc)
    if metric in report.averaged:
        return float(report.averaged[metric])
    if len(report.per_biomarker) == 1:
        return float(next(iter(report.per_biomarker.values()))[metric])
    raise DataError(f"report has no averaged {metric!r}; pass --biomarker")


def cmd_compare(args) -> list[Path]:
    a = [_metric_from_report(MetricReport.load(p), args.metric, args.biomarker) for p in args.a]
    b = [_metric_from_report(MetricReport.load(p), args.metric, args.biomarker) for p in args.b]
    res = paired_t_test(a, b, args.alpha)
    doc = {"metric": args.metric, "biomarker": args.biomarker, "a": a, "b": b,
           "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b)), **asdict(res)}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if not args.out:
        sys.stdout.write(text)
        return []
    Path(args.out).write_text(text)
    write_run_manifest(_manifest_for(args.out), "compare",
                       {"a": list(args.a), "b": list(args.b), "metric": args.metric,
                        "biomarker": args.biomarker, "alpha": args.alpha}, [], [args.out])
    return [Path(args.out)]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clincon", description="Clinically supervised contrastive pretraining toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synth", help="generate a synthetic cohort")
    p.add_argument("--config", help="CohortConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("split", help="identity-disjoint train/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--key", choices=("eye", "patient"), default="eye")
    p.add_argument("--holdout", type=int, default=20)
    p.add_argument("--balanced", nargs="*", help="also write balanced test sets for these biomarkers")
    p.add_argument("--per-class", dest="per_class", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("histogram", help="per-label image and eye counts")
    p.add_argument("--data", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("pretrain", help="contrastive pretraining on clinical labels")
    p.add_argument("--train", required=True)
    p.add_argument("--loss", help="e.g. cst+eye, bcva:1+cst:2, self")
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_hp_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on a frozen encoder")
    p.add_argument("--encoder", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--target", required=True, help="biomarker name, comma list, or 'multilabel'")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_hp_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("baseline", help="fully supervised encoder + linear head")
    p.add_argument("--train", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_hp_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("distill", help="distil a probe into a student head")
    p.add_argument("--teacher", required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--student-init", dest="student_init", choices=("random", "teacher"), default="random")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_hp_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="metric report for a classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True, action="append", help="PATH or BIOMARKER=PATH; repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-access", help="probe AUROC versus fraction of labeled data")
    p.add_argument("--encoder", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True, action="append", help="PATH or BIOMARKER=PATH; repeatable")
    p.add_argument("--target", required=True, help="comma-separated biomarkers")
    p.add_argument("--fractions", default="25,50,75,100")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", required=True)
    _add_hp_flags(p)
    p.set_defaults(func=cmd_sweep_access)

    p = sub.add_parser("theory-sweep", help="latent-class proxy corruption sweep")
    p.add_argument("--eps", default="0,0.2,0.4,0.6,0.8")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--prior", default="0.4,0.3,0.2,0.1", help="class prior; empty string for uniform")
    p.add_argument("--epochs", type=int, help="pretraining epochs (default 10)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theory_sweep)

    p = sub.add_parser("export-embeddings", help="write representation vectors to CSV")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", choices=("representation", "projection"), default="representation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("compare", help="Welch t-test between two sets of metric reports")
    p.add_argument("--a", required=True, nargs="+")
    p.add_argument("--b", required=True, nargs="+")
    p.add_argument("--metric", default="auroc")
    p.add_argument("--biomarker")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        max_workers()
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
