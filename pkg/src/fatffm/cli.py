"""Command-line entry points binding data, models, and training together.

Subcommands: prepare, synth, train, eval, gradcheck, ablate. Runs are driven
by versioned JSON config files; flags only cover the simple commands. Exit
status: 0 success, 1 validation error, 2 runtime/metric error, 3 gradient
check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .diffcore import VERIFY_DTYPE, grad_check, rng_stream
from .errors import (
    ConfigError,
    DataError,
    FatFFMError,
    GradCheckFailure,
    MetricError,
)
from .model import Model, ModelSpec, load_checkpoint, probe_params, save_checkpoint
from .train import TrainConfig, default_ablation_matrix, evaluate, run_ablation, train

log = logging.getLogger("fatffm")

MODEL_CONFIG_FIELDS = (
    "variant",
    "interaction",
    "embed_dim",
    "hidden",
    "dropout",
    "composer",
    "shared_composer",
    "reduction",
    "attention_width",
    "bypass_attention",
)
TRAIN_CONFIG_FIELDS = ("epochs", "batch_size", "learning_rate", "eval_every", "patience")

GRADCHECK_CONFIGS = (
    "LR",
    "FM",
    "FFM",
    "DeepFFM-I",
    "DeepFFM-H",
    "FAT-DeepFFM-I",
    "FAT-DeepFFM-H",
    "MLP-DeepFFM-H",
    "CE-DeepFFM-H",
    "FAT-DeepFFM-H-maxpool",
)


def _load_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


def _write_json(path, blob):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_section(cfg, section, allowed, problems):
    body = cfg.get(section, {})
    if not isinstance(body, dict):
        problems.append(f"{section}: must be an object")
        return {}
    for key in body:
        if key not in allowed:
            problems.append(f"{section}.{key}: unknown field")
    return body


def _resolve_run_config(cfg, need_variant=True):
    """Validate a train/ablate config, reporting every violated field at once.

    Returns (resolved dict, vocab sizes, data paths dict).
    """
    problems = []
    if not isinstance(cfg, dict):
        raise ConfigError("config: must be a JSON object")
    for key in cfg:
        if key not in ("version", "seed", "out_dir", "data", "model", "train", "matrix"):
            problems.append(f"{key}: unknown top-level field")
    if cfg.get("version", 1) != 1:
        problems.append(f"version: unsupported {cfg.get('version')!r}")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append(f"seed: must be a non-negative integer, got {seed!r}")
    out_dir = cfg.get("out_dir")
    if not out_dir or not isinstance(out_dir, str):
        problems.append("out_dir: required string")

    data_cfg = cfg.get("data")
    paths = {}
    if not isinstance(data_cfg, dict):
        problems.append("data: required object with train/valid/vocab paths")
    else:
        for key in ("train", "valid", "vocab"):
            p = data_cfg.get(key)
            if not p or not isinstance(p, str):
                problems.append(f"data.{key}: required path")
            elif not Path(p).is_file():
                problems.append(f"data.{key}: no such file {p!r}")
            else:
                paths[key] = p
        for key in data_cfg:
            if key not in ("train", "valid", "vocab", "eval"):
                problems.append(f"data.{key}: unknown field")
        if "eval" in data_cfg:
            p = data_cfg["eval"]
            if not isinstance(p, str) or not Path(p).is_file():
                problems.append(f"data.eval: no such file {p!r}")
            else:
                paths["eval"] = p

    model_cfg = _check_section(cfg, "model", MODEL_CONFIG_FIELDS, problems)
    for key in ("n_fields", "vocab_sizes"):
        if key in model_cfg:
            problems.append(f"model.{key}: derived from the vocabulary file, not configurable")
    if not need_variant:
        for key in ("variant", "interaction"):
            if key in model_cfg:
                problems.append(f"model.{key}: set by the ablation matrix, not configurable")
    train_cfg = _check_section(cfg, "train", TRAIN_CONFIG_FIELDS, problems)

    vocab_sizes = None
    if "vocab" in paths:
        try:
            vocab_sizes = datamod.Vocabulary.load(paths["vocab"]).sizes
        except (ConfigError, KeyError, ValueError, json.JSONDecodeError) as exc:
            problems.append(f"data.vocab: unreadable vocabulary: {exc}")

    spec = tcfg = None
    if vocab_sizes is not None:
        model_kwargs = {k: model_cfg[k] for k in MODEL_CONFIG_FIELDS if k in model_cfg}
        if not need_variant:
            model_kwargs.pop("variant", None)
            model_kwargs.pop("interaction", None)
            spec_probe = ModelSpec(
                variant="deepffm",
                n_fields=len(vocab_sizes),
                vocab_sizes=vocab_sizes,
                **model_kwargs,
            )
        else:
            spec_probe = ModelSpec(
                variant=model_kwargs.pop("variant", "deepffm"),
                n_fields=len(vocab_sizes),
                vocab_sizes=vocab_sizes,
                **model_kwargs,
            )
        problems.extend("model." + p for p in spec_probe.problems())
        spec = spec_probe
    tcfg_probe = TrainConfig(
        seed=seed if isinstance(seed, int) and seed >= 0 else 0,
        **{k: train_cfg[k] for k in TRAIN_CONFIG_FIELDS if k in train_cfg},
    )
    problems.extend("train." + p for p in tcfg_probe.problems())
    tcfg = tcfg_probe

    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))

    resolved = {
        "version": 1,
        "seed": seed,
        "out_dir": out_dir,
        "data": dict(data_cfg),
        "model": {k: getattr(spec, k) for k in MODEL_CONFIG_FIELDS},
        "train": {k: getattr(tcfg, k) for k in TRAIN_CONFIG_FIELDS},
    }
    resolved["model"]["hidden"] = list(spec.hidden)
    return resolved, spec, tcfg, paths


# -- subcommands ----------------------------------------------------------------


def cmd_prepare(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not 0.0 < args.ratio < 1.0:
        raise ConfigError(f"--ratio must be in (0, 1), got {args.ratio}")
    if args.error_budget < 0:
        raise ConfigError(f"--error-budget must be >= 0, got {args.error_budget}")

    parse_errors = []
    if args.format == "criteo":
        schema = datamod.CriteoSchema()
        raws = []
        with open(args.input, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raws.append(datamod.parse_criteo_line(line, schema, lineno=lineno))
                except datamod.ParseError as exc:
                    parse_errors.append(str(exc))
        _enforce_budget(parse_errors, args.error_budget)
        tr, te = datamod.split_indices(len(raws), args.ratio, args.seed)
        vocab = datamod.build_vocab(
            (raws[i] for i in tr), schema, min_count=args.min_count, max_bucket=args.max_bucket
        )
        n_fields = schema.n_fields
        train_rows = [datamod.encode(raws[i], vocab) for i in tr]
        test_rows = [datamod.encode(raws[i], vocab) for i in te]
    else:  # pre-encoded libffm input
        n_fields = datamod.sniff_ffm_fields(args.input)
        if n_fields == 0:
            raise ConfigError(f"{args.input}: empty input")
        insts = []
        with open(args.input, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    insts.append(datamod.parse_ffm_line(line, n_fields, lineno=lineno))
                except datamod.ParseError as exc:
                    parse_errors.append(str(exc))
        _enforce_budget(parse_errors, args.error_budget)
        tr, te = datamod.split_indices(len(insts), args.ratio, args.seed)
        sizes = [1] * n_fields
        for i in tr:
            for f, (idx, _v) in enumerate(insts[i].fields):
                sizes[f] = max(sizes[f], idx + 1)
        vocab = datamod.Vocabulary(
            [datamod.FieldVocab(kind="indexed", size=s) for s in sizes],
            min_count=args.min_count,
            max_bucket=args.max_bucket,
        )

        def clamp(inst):
            # indices unseen in the train split fold into the reserved 0 slot
            fields = tuple(
                (i if i < sizes[f] else 0, v) for f, (i, v) in enumerate(inst.fields)
            )
            return datamod.Instance(label=inst.label, fields=fields)

        train_rows = [insts[i] for i in tr]
        test_rows = [clamp(insts[i]) for i in te]

    train_ds = datamod.Dataset.from_instances(train_rows, n_fields)
    test_ds = datamod.Dataset.from_instances(test_rows, n_fields)
    datamod.write_ffm_file(out_dir / "train.ffm", train_ds)
    datamod.write_ffm_file(out_dir / "test.ffm", test_ds)
    vocab.save(out_dir / "vocab.json")
    datamod.write_split_manifest(
        out_dir / "manifest.txt",
        seed=args.seed,
        ratio=args.ratio,
        counts={"train": train_ds.n_rows, "test": test_ds.n_rows, "skipped": len(parse_errors)},
    )
    print(
        f"prepared {train_ds.n_rows}/{test_ds.n_rows} rows "
        f"(skipped {len(parse_errors)}) into {out_dir}"
    )
    return 0


def _enforce_budget(parse_errors, budget):
    if len(parse_errors) > budget:
        head = "; ".join(parse_errors[:3])
        raise DataError(
            f"{len(parse_errors)} malformed rows exceed the error budget of {budget}: {head}"
        )


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_rows = args.test_rows if args.test_rows is not None else args.rows // 5
    result = datamod.synth_generate(
        n_fields=args.fields,
        vocab_sizes=args.vocab_size,
        k=args.k,
        seed=args.seed,
        count=args.rows,
        test_count=test_rows,
        flip_prob=args.noise,
    )
    datamod.write_ffm_file(out_dir / "train.ffm", result.train)
    datamod.write_ffm_file(out_dir / "test.ffm", result.test)
    vocab = datamod.Vocabulary(
        [datamod.FieldVocab(kind="indexed", size=s) for s in result.teacher.vocab_sizes],
        min_count=1,
        max_bucket=datamod.DEFAULT_MAX_BUCKET,
    )
    vocab.save(out_dir / "vocab.json")
    teacher_spec = ModelSpec(
        variant="ffm",
        n_fields=args.fields,
        vocab_sizes=result.teacher.vocab_sizes,
        embed_dim=args.k,
        dropout=0.0,
    )
    teacher_model = Model(
        teacher_spec,
        {k: v.astype(np.float32) for k, v in result.teacher.params().items()},
    )
    save_checkpoint(out_dir / "teacher.ckpt", teacher_model)
    total = args.rows + test_rows
    datamod.write_split_manifest(
        out_dir / "manifest.txt",
        seed=args.seed,
        ratio=(args.rows / total) if total else 0.0,
        counts={"train": result.train.n_rows, "test": result.test.n_rows},
    )
    print(f"synthesized {result.train.n_rows}/{result.test.n_rows} rows into {out_dir}")
    return 0


def _load_split(path, n_fields):
    ds = datamod.load_ffm_file(path, n_fields)
    return ds


def cmd_train(args) -> int:
    cfg = _load_json(args.config, "config")
    resolved, spec, tcfg, paths = _resolve_run_config(cfg, need_variant=True)
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "resolved_config.json", resolved)

    train_ds = _load_split(paths["train"], spec.n_fields)
    valid_ds = _load_split(paths["valid"], spec.n_fields)
    result = train(spec, tcfg, train_ds, valid_ds)

    from . import report

    report.write_metric_log(out_dir / "metrics.tsv", result.records)
    report.render_training_curves(result.records, out_dir / "curves.png")
    save_checkpoint(out_dir / "model.ckpt", result.model)

    for rec in result.records:
        if rec["epoch"] == "final":
            print(
                f"final {rec['split']} auc={rec['auc']!r} "
                f"logloss={rec['logloss']!r} rows={rec['count']}"
            )
    print(f"checkpoint={out_dir / 'model.ckpt'}")
    if result.diverged:
        log.error("training diverged; kept the last good parameters")
        return 2
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    spec = model.spec
    observed = datamod.sniff_ffm_fields(args.data)
    if observed == 0:
        raise MetricError(f"{args.data}: no instances to evaluate")
    if observed != spec.n_fields:
        raise DataError(
            f"schema mismatch: checkpoint has n_fields={spec.n_fields}, "
            f"embed_dim={spec.embed_dim}; data file has {observed} fields"
        )
    dataset = _load_split(args.data, spec.n_fields)
    report = evaluate(model, dataset, "eval")
    print(
        f"model={report.model} split=eval rows={report.count} "
        f"auc={report.auc!r} logloss={report.logloss!r}"
    )
    return 0


def _gradcheck_spec(name, n, k, hidden) -> ModelSpec:
    base = dict(
        n_fields=n,
        vocab_sizes=(6,) * n,
        embed_dim=k,
        hidden=hidden,
        dropout=0.0,
        reduction=1,
        attention_width=6,
    )
    table = {
        "LR": dict(variant="lr"),
        "FM": dict(variant="fm"),
        "FFM": dict(variant="ffm"),
        "DeepFFM-I": dict(variant="deepffm", interaction="inner"),
        "DeepFFM-H": dict(variant="deepffm", interaction="hadamard"),
        "FAT-DeepFFM-I": dict(variant="fat-deepffm", interaction="inner"),
        "FAT-DeepFFM-H": dict(variant="fat-deepffm", interaction="hadamard"),
        "MLP-DeepFFM-H": dict(variant="mlp-deepffm", interaction="hadamard"),
        "CE-DeepFFM-H": dict(variant="ce-deepffm", interaction="hadamard"),
        "FAT-DeepFFM-H-maxpool": dict(
            variant="fat-deepffm", interaction="hadamard", composer="maxpool"
        ),
    }
    if name not in table:
        raise ConfigError(f"unknown gradcheck config {name!r}; choose from {GRADCHECK_CONFIGS}")
    return ModelSpec(**{**base, **table[name]}).validated()


def cmd_gradcheck(args) -> int:
    if args.n > 6 or args.n < 2:
        raise ConfigError(f"--n must be in [2, 6] for gradient checking, got {args.n}")
    if args.k > 4 or args.k < 1:
        raise ConfigError(f"--k must be in [1, 4] for gradient checking, got {args.k}")
    names = args.configs or list(GRADCHECK_CONFIGS)
    canon = {c.lower(): c for c in GRADCHECK_CONFIGS}
    failures = []
    for raw_name in names:
        name = canon.get(raw_name.lower())
        if name is None:
            raise ConfigError(f"unknown gradcheck config {raw_name!r}")
        spec = _gradcheck_spec(name, args.n, args.k, hidden=(12, 8, 6))
        model = Model(spec, probe_params(spec, args.seed, dtype=VERIFY_DTYPE))
        g = rng_stream(args.seed, "gradcheck:" + name)
        idx = np.array(
            [[g.integers(0, s) for s in spec.vocab_sizes]], dtype=np.int64
        )
        val = g.uniform(0.5, 1.5, size=(1, spec.n_fields))
        y = float(g.integers(0, 2))

        def loss() -> float:
            probs, _ = model.forward(idx, val)
            p = float(probs[0])
            return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))

        probs, cache = model.forward(idx, val)
        grads = model.backward(cache, np.array([float(probs[0]) - y]))

        for block in model.params:
            base = model.params[block]
            analytic = grads[block]
            if args.corrupt_block == block:
                analytic = analytic + 1e-2  # negative-control hook

            def f_block(vec):
                model.params[block] = vec
                try:
                    return loss()
                finally:
                    model.params[block] = base

            rep = grad_check(f_block, analytic, base, h=args.step, tol=args.tol)
            status = "ok" if rep.passed else "FAIL"
            print(
                f"{name:<22} {block:<10} max_rel_err={rep.max_rel_err:.3e} "
                f"checked={rep.n_checked} skipped={rep.n_skipped} {status}"
            )
            if not rep.passed:
                failures.append(f"{name}/{block}: {rep.max_rel_err:.3e} > {rep.tol:.1e}")
    if failures:
        raise GradCheckFailure(
            f"{len(failures)} parameter block(s) failed:\n  " + "\n  ".join(failures)
        )
    print(f"gradcheck ok: {len(names)} configuration(s), tol={args.tol:.1e}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_json(args.config, "config")
    matrix_cfg = cfg.get("matrix", {}) or {}
    if not isinstance(matrix_cfg, dict):
        raise ConfigError("matrix: must be an object")
    resolved, base_spec, tcfg, paths = _resolve_run_config(cfg, need_variant=False)
    variants = matrix_cfg.get("variants", ["deepffm", "mlp-deepffm", "ce-deepffm", "fat-deepffm"])
    interactions = matrix_cfg.get("interactions", ["inner", "hadamard"])
    for key in matrix_cfg:
        if key not in ("variants", "interactions"):
            raise ConfigError(f"matrix.{key}: unknown field")

    specs = []
    for interaction in interactions:
        for variant in variants:
            specs.append(
                ModelSpec(
                    variant=variant,
                    n_fields=base_spec.n_fields,
                    vocab_sizes=base_spec.vocab_sizes,
                    embed_dim=base_spec.embed_dim,
                    interaction=interaction,
                    hidden=base_spec.hidden,
                    dropout=base_spec.dropout,
                    composer=base_spec.composer,
                    shared_composer=base_spec.shared_composer,
                    reduction=base_spec.reduction,
                    attention_width=base_spec.attention_width,
                ).validated()
            )

    out_dir = Path(resolved["out_dir"])
    (out_dir / "models").mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics").mkdir(parents=True, exist_ok=True)
    resolved["matrix"] = {"variants": list(variants), "interactions": list(interactions)}
    _write_json(out_dir / "resolved_config.json", resolved)

    train_ds = _load_split(paths["train"], base_spec.n_fields)
    valid_ds = _load_split(paths["valid"], base_spec.n_fields)
    eval_ds = _load_split(paths["eval"], base_spec.n_fields) if "eval" in paths else None

    rows, results = run_ablation(specs, tcfg, train_ds, valid_ds, eval_data=eval_ds)

    from . import report

    table = report.ablation_table_text(rows)
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    (out_dir / "ablation.tsv").write_text(report.ablation_table_tsv(rows), encoding="utf-8")
    report.render_ablation_chart(rows, out_dir / "ablation.png")
    for name, result in results.items():
        save_checkpoint(out_dir / "models" / f"{name}.ckpt", result.model)
        report.write_metric_log(out_dir / "metrics" / f"{name}.tsv", result.records)
    print(table, end="")
    if any(r.error for r in rows):
        log.error("some ablation entries failed; see the table")
        return 2
    return 0


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fatffm",
        description="Field-aware factorization CTR models with CENet-style field attention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split raw data, build a vocabulary, encode to libffm")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("criteo", "ffm"), default="criteo")
    p.add_argument("--ratio", type=float, default=0.9, help="train fraction of the split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--min-count", type=int, default=datamod.DEFAULT_MIN_COUNT)
    p.add_argument("--max-bucket", type=int, default=datamod.DEFAULT_MAX_BUCKET)
    p.add_argument("--error-budget", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a teacher-labelled synthetic dataset")
    p.add_argument("--fields", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rows", type=int, default=50000)
    p.add_argument("--test-rows", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.0, help="label flip probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a libffm file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--configs", nargs="*", default=None, metavar="NAME",
                   help=f"subset of {', '.join(GRADCHECK_CONFIGS)} (default: all)")
    p.add_argument("--n", type=int, default=4, help="fields (max 6)")
    p.add_argument("--k", type=int, default=3, help="embedding size (max 4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--corrupt-block", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the attention-comparison matrix from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}.get(
        os.environ.get("FATFFM_LOG", "").lower(), logging.WARNING
    )
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GradCheckFailure as exc:
        print(f"gradcheck failed: {exc}", file=sys.stderr)
        return 3
    except (FatFFMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
