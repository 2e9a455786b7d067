"""Command-line entry point: ``clcsca gen-data | train | eval | check``.

Exit codes: 0 success, 1 contract or validation failure, 2 I/O or format failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import checks, data
from . import model as M
from . import train as T
from .errors import ContractError, DataError, FormatError, ShapeError

log = logging.getLogger("clcsca")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def content_hash(obj) -> str:
    """Git blob hash of the canonical JSON encoding of ``obj``."""
    body = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    config_hash: str
    out_dir: str
    started: str
    finished: str | None = None
    inputs: dict | None = None
    results: dict | None = None

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# configs


def preset_network(task: str, name: str, num_classes: int) -> M.NetworkConfig:
    presets = {
        ("classification", "desk"): M.desk_classification,
        ("classification", "fullsize"): M.fullsize_classification,
        ("segmentation", "desk"): M.desk_segmentation,
        ("segmentation", "fullsize"): M.fullsize_segmentation,
    }
    if (task, name) not in presets:
        raise ContractError(f"no {name!r} preset for {task}")
    return presets[task, name](num_classes)


def preset_training(task: str, **overrides) -> T.TrainConfig:
    if task == "classification":
        return T.classification_training(**overrides)
    return T.segmentation_training(**overrides)


def resolve_configs(spec: str | None, task: str, num_classes: int) -> tuple[M.NetworkConfig, T.TrainConfig]:
    """``spec`` is a preset name (``desk``, ``fullsize``) or a JSON file.

    The file holds either a bare network config or ``{"network": ..., "training": ...}``;
    a missing training section falls back to the task's default schedule.
    """
    spec = spec or "desk"
    if spec in ("desk", "fullsize"):
        return preset_network(task, spec, num_classes), preset_training(task)
    raw = json.loads(Path(spec).read_text())
    try:
        net = M.NetworkConfig.from_dict(raw.get("network", raw))
        tr = T.TrainConfig.from_dict(raw["training"]) if "training" in raw else preset_training(net.task)
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed config {spec}: {exc!r}") from None
    if net.task != task:
        raise ContractError(f"config is for {net.task}, data is for {task}")
    if net.num_classes != num_classes:
        raise ContractError(f"config has {net.num_classes} classes, data has {num_classes}")
    return net, tr


def _dataset_classes(ds: data.Dataset) -> int:
    return data.NUM_PARTS if ds.task == "segmentation" else len(ds.class_names)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    seg = args.task == "segmentation"
    kinds = data.PART_KINDS if seg else data.SHAPE_KINDS
    if not 1 <= args.classes <= len(kinds):
        raise ContractError(f"--classes must be in [1, {len(kinds)}] for {args.task}")
    default_train, default_test = data.DEFAULT_SPLITS[args.task]
    train_n = args.train_per_class if args.train_per_class is not None else default_train
    test_n = args.test_per_class if args.test_per_class is not None else default_test
    train, test = data.make_dataset(
        args.task, train_n, test_n, args.seed, n_points=args.points, noise_sigma=args.noise,
        kinds=kinds[: args.classes],
    )
    manifest = data.save_dataset(args.out, train, test)
    print(f"wrote {len(train)} train + {len(test)} test clouds, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    train = data.load_dataset(args.data, "train")
    test = data.load_dataset(args.data, "test")
    net, tr = resolve_configs(args.config, train.task, _dataset_classes(train))
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    tr = tr.replace(**overrides)
    if args.ablate:
        net = net.ablate(args.ablate)
    if train.samples and len(train.samples[0]) < net.paths[0].resolution:
        raise ContractError(
            f"clouds have {len(train.samples[0])} points, network needs {net.paths[0].resolution}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"network": net.to_dict(), "training": tr.to_dict()}
    (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    model = M.Model.create(net, T.stream(tr.seed, "init"))
    result = T.fit(model, train, test, tr, out_dir=out)
    key = "oa" if net.task == "classification" else "instance_miou"
    RunManifest(
        command="train",
        seed=tr.seed,
        config=snapshot,
        config_hash=content_hash(snapshot),
        out_dir=str(out),
        started=started,
        finished=_now(),
        inputs={"data": str(args.data)},
        results={"final": result.final.get(key), "best": result.best.get(key), "best_epoch": result.best_epoch},
    ).write(out / "run.json")
    print(f"final test {key} {result.final.get(key):.4f}, best {result.best.get(key):.4f} at epoch {result.best_epoch}")
    return EXIT_OK


def _print_eval(metrics: dict, ds: data.Dataset) -> None:
    if ds.task == "classification":
        print(f"{'split':<8}{'n':>6}{'OA':>10}{'ACC':>10}{'loss':>10}")
        print(f"{ds.split:<8}{len(ds):>6}{metrics['oa']:>10.4f}{metrics['acc']:>10.4f}{metrics['loss']:>10.4f}")
        return
    print(f"{'category':<10}{'IoU':>10}")
    for cat, v in sorted(metrics["category_iou"].items()):
        print(f"{cat:<10}{v:>10.4f}")
    print(f"{'instance':<10}{metrics['instance_miou']:>10.4f}")
    print(f"{'class':<10}{metrics['class_miou']:>10.4f}")
    print(f"point accuracy {metrics['point_acc']:.4f}, loss {metrics['loss']:.4f}")


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    ds = data.load_dataset(args.data, args.split)
    net, _ = resolve_configs(str(cfg_path), ds.task, _dataset_classes(ds))
    model = M.Model(net, M.load_params(ckpt, net))
    metrics = T.evaluate(model, ds)
    _print_eval(metrics, ds)
    return EXIT_OK


def cmd_check(args) -> int:
    suites = list(checks.SUITES) if args.suite == "all" else [args.suite]
    failed = False
    for name in suites:
        for r in checks.run_suite(name, seed=args.seed):
            print(r.line())
            failed |= not r.passed
    return EXIT_CONTRACT if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clcsca", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset (PCLD files + manifest.json)")
    g.add_argument("--task", choices=M.TASKS, default="classification")
    g.add_argument("--classes", type=int, default=None, help="number of shape kinds (default: all)")
    g.add_argument("--train-per-class", type=int, default=None)
    g.add_argument("--test-per-class", type=int, default=None)
    g.add_argument("--points", type=int, default=None, help="points per cloud (256 cls / 512 seg)")
    g.add_argument("--noise", type=float, default=None, help="jitter sigma (0.02 cls / 0 seg)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--config", default=None, help="'desk' (default), 'fullsize', or a config JSON file")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablate", choices=("baseline", "clca", "csca", "full"), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", default=None, help="defaults to config.json beside the checkpoint")
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the verification suites")
    c.add_argument("--suite", choices=(*checks.SUITES, "all"), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "gen-data" and args.classes is None:
        args.classes = len(data.PART_KINDS if args.task == "segmentation" else data.SHAPE_KINDS)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ShapeError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
