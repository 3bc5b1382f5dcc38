"""Command-line entry point: ``mmfusion {train,evaluate,predict,gradcheck,synth}``.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 64 usage error.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .data import file_sha256, gen_synthetic, load_dataset, make_splits, write_synthetic
from .encoders import read_features, tokenize
from .errors import NumericError, ValidationError
from .losses import grad_check
from .model import MODES, POOLINGS, FusionConfig, Sample, forward, init_params, load_checkpoint, predict, save_checkpoint
from .numkit import SeededRng
from .train import MODALITY_FILTERS, evaluate, evaluate_all_filters, train

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64

RUN_KEYS = {"dataset", "epochs", "seed", "out_dir"}

log = logging.getLogger("mmfusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def config_hash(config):
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


def load_run_config(path):
    """Split a run-config JSON into (FusionConfig fields, run settings)."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: run config must be a JSON object")
    fields = set(FusionConfig.__dataclass_fields__) | {"lambda"}
    unknown = sorted(set(raw) - fields - RUN_KEYS)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {unknown}")
    run = {k: raw[k] for k in RUN_KEYS if k in raw}
    if "dataset" not in run:
        raise ValidationError(f"{path}: 'dataset' (manifest path) is required")
    base = os.path.dirname(os.path.abspath(path))
    run["dataset"] = os.path.join(base, run["dataset"])
    run["out_dir"] = os.path.join(base, run.get("out_dir", "."))
    return {k: v for k, v in raw.items() if k not in RUN_KEYS}, run


def _dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args):
    fields, run = load_run_config(args.config)
    dataset = load_dataset(run["dataset"])
    fields.setdefault("class_count", len(dataset.classes))
    if dataset.image_dim is not None:
        fields.setdefault("image_dim", dataset.image_dim)
    config = FusionConfig.from_dict(fields)
    epochs = int(run.get("epochs", 30))
    seed = int(run.get("seed", 0))
    if epochs < 0:
        raise ValidationError("epochs must be >= 0")
    split = make_splits(dataset.posts)
    state = train(dataset, config, epochs, seed, split=split)

    out_dir = args.out_dir or run["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "model.mmck")
    save_checkpoint(ckpt, config, state.best_params, dataset.classes, state.vocab)
    test = dataset.encode(dataset.subset(split.test), state.vocab)
    metrics = {
        "mode": config.mode,
        "seed": seed,
        "epochs": epochs,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "dataset_manifest_hash": file_sha256(run["dataset"]),
        "classes": dataset.classes,
        "best_epoch": state.best_epoch,
        "best_validation_accuracy": state.best_validation_accuracy,
        "history": state.history,
        "test": {f: m.to_dict() for f, m in evaluate_all_filters(test, state.best_params, config).items()},
    }
    _dump(metrics, os.path.join(out_dir, "metrics.json"))
    print(f"wrote {ckpt} and {os.path.join(out_dir, 'metrics.json')}")
    both = metrics["test"].get("both")
    if both:
        print(f"test accuracy {both['accuracy']:.4f}  f_macro {both['f_macro']:.4f}  f_micro {both['f_micro']:.4f}")
    return EXIT_OK


def _split_samples(dataset, vocab, split_name):
    if split_name == "all":
        posts = dataset.posts
    else:
        posts = dataset.subset(getattr(make_splits(dataset.posts), split_name))
    return dataset.encode(posts, vocab)


def format_table(rows):
    header = f"{'model':<14}{'input':<12}{'accuracy':>10}{'f_macro':>10}{'f_micro':>10}{'n':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['model']:<14}{r['input']:<12}{100 * r['accuracy']:>10.2f}{r['f_macro']:>10.3f}{r['f_micro']:>10.3f}{r['total']:>7d}"
        )
    return "\n".join(lines)


def cmd_evaluate(args):
    dataset = load_dataset(args.dataset)
    filters = MODALITY_FILTERS if args.modality == "all" else (args.modality,)
    results = []
    for path in args.checkpoint:
        ck = load_checkpoint(path)
        if args.mode and ck.config.mode != args.mode:
            raise ValidationError(f"{path}: checkpoint mode {ck.config.mode} does not match --mode {args.mode}")
        if list(ck.classes) != list(dataset.classes):
            raise ValidationError(f"{path}: checkpoint classes {ck.classes} differ from dataset {dataset.classes}")
        samples = _split_samples(dataset, ck.vocab, args.split)
        for f in filters:
            report = evaluate(samples, ck.params, ck.config, f)
            results.append({"checkpoint": path, "model": ck.config.mode, "input": f, **report.to_dict()})
    doc = {"split": args.split, "dataset_manifest_hash": file_sha256(args.dataset), "results": results}
    if args.json_out:
        _dump(doc, args.json_out)
    print(json.dumps(doc, sort_keys=True))
    print(format_table(results))
    return EXIT_OK


def cmd_predict(args):
    ck = load_checkpoint(args.checkpoint)
    token_ids = None
    if args.text is not None:
        if ck.vocab is None:
            raise ValidationError("this checkpoint has no vocabulary; it cannot read text")
        token_ids = ck.vocab.ids(tokenize(args.text))
    image = None
    if args.feat_inline is not None:
        image = np.array([float(x) for x in args.feat_inline.split(",")])
    elif args.features is not None:
        feats = read_features(args.features)
        if not 0 <= args.record < feats.shape[0]:
            raise ValidationError(f"record {args.record} out of range ({feats.shape[0]} records)")
        image = feats[args.record]
    sample = Sample(token_ids, image)
    probs, _ = forward(sample, ck.params, ck.config)
    idx = predict(sample, ck.params, ck.config)
    print(json.dumps({"class": ck.classes[idx], "index": idx, "probabilities": probs.tolist()}))
    return EXIT_OK


def gradcheck_fixture(mode, seed, pooling="max", d=4, h=3, n=6, classes=3, g=2, vocab_size=12):
    """Random tiny model, post and disjoint negative texts for a gradient check."""
    config = FusionConfig(
        mode=mode, pooling=pooling, aggregation=pooling, d=d, h=h, image_dim=n, class_count=classes, g=g
    )
    rng = SeededRng(seed)
    params = init_params(config, vocab_size, rng, embeddings=rng.normal(0.0, 0.5, (vocab_size, d)))
    for name, value in params.items():
        if value.ndim == 1:
            params[name] = rng.normal(0.0, 0.1, value.shape)
    per_text = vocab_size // (g + 1)
    perm = rng.permutation(vocab_size)
    sample = Sample(perm[:per_text], rng.normal(0.0, 1.0, n), int(rng.integers(0, classes)), f"fixture-{seed}")
    negatives = [perm[(j + 1) * per_text : (j + 2) * per_text] for j in range(g)]
    return config, params, sample, negatives


def cmd_gradcheck(args):
    config, params, sample, negatives = gradcheck_fixture(args.mode, args.seed, args.pooling)
    report = grad_check(params, sample, negatives, config, args.step, args.tolerance, dropout_seed=args.seed)
    print(report.to_text())
    if args.jsonl:
        with open(args.jsonl, "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_synth(args):
    data = gen_synthetic(args.seed, args.per_class, 4, args.d_text, args.n_image, args.xor_fraction)
    provenance = {
        "generator": "synthetic two-bit posts",
        "seed": args.seed,
        "per_class": args.per_class,
        "xor_fraction": args.xor_fraction,
        "d_text": args.d_text,
        "n_image": args.n_image,
    }
    path = write_synthetic(args.out, data, provenance)
    print(f"wrote {len(data.posts)} posts to {path}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="mmfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", help="overrides out_dir from the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score one or more checkpoints on a dataset split")
    e.add_argument("--checkpoint", required=True, action="append")
    e.add_argument("--dataset", required=True, help="dataset manifest")
    e.add_argument("--mode", choices=MODES, help="require checkpoints of this mode")
    e.add_argument("--split", choices=("test", "validation", "train", "all"), default="test")
    e.add_argument("--modality", choices=MODALITY_FILTERS + ("all",), default="both")
    e.add_argument("--json-out")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="classify one post")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--text")
    pr.add_argument("--features", help="MMF1 feature file")
    pr.add_argument("--record", type=int, default=0)
    pr.add_argument("--feat-inline", help="comma-separated feature values")
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=MODES, default="common_space")
    g.add_argument("--pooling", choices=POOLINGS, default="max")
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--jsonl", help="write the machine-readable summary here")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--per-class", type=int, default=250)
    s.add_argument("--xor-fraction", type=float, default=1.0)
    s.add_argument("--d-text", type=int, default=200)
    s.add_argument("--n-image", type=int, default=64)
    s.set_defaults(func=cmd_synth)
    return p


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
