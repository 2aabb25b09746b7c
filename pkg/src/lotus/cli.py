"""Command-line experiment driver.

    lotus baseline [--config c.json] [--seed N] [--out DIR] [--key.path VALUE ...]
    lotus sweep    ... [--checkpoint DIR/baseline.lots]
    lotus lottery  ... [--checkpoint DIR/baseline.lots]
    lotus issp     ... [--checkpoint DIR/baseline.lots]
    lotus plot CSV --kind {line_by_epoch,line_by_sparsity} [--output FILE]

Any config field can be overridden with a flag named after its dotted path,
e.g. ``--lottery.drop_fraction 0.25`` or ``--epochs 5``. Values are parsed as
JSON when possible, so ``--sweep.levels [0.1,0.3,0.5]`` works; a plain
comma list is also accepted for list fields.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from lotus.dataio import (
    ImageDataset,
    MetricRow,
    gen_synthetic,
    load_checkpoint,
    load_cifar10,
    make_checkpoint,
    save_checkpoint,
    unpack_checkpoint,
    write_json,
    write_metrics,
)
from lotus.errors import FormatError, LotusError, NumericError
from lotus.lottery import LotterySpec, ScoreLayer, build_lottery_dataset, finetune_on_lottery
from lotus.plotting import KINDS, emit_plot, patch_drop_svg
from lotus.pruning import ISPConfig, Scope, essential_sparsity_sweep, issp_pipeline
from lotus.training import OptimizerConfig, train_epochs
from lotus.vit import CIFAR_CONFIG, SYNTHETIC_CONFIG, ViTConfig, copy_params, init_params

log = logging.getLogger("lotus")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_LEVELS = [0.01] + [round(0.05 * i, 2) for i in range(1, 11)]

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "kind": "synthetic",
        "n_train": 4096,
        "n_eval": 512,
        "noise_sigma": 0.5,
        "dir": None,
        "limit": None,
        "eval_limit": None,
    },
    # filled from SYNTHETIC_CONFIG or CIFAR_CONFIG depending on dataset.kind
    "model": {},
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "batch_size": 32},
    "sweep": {"levels": SWEEP_LEVELS, "tolerance": 0.01, "scope": "global"},
    "isp": ISPConfig().to_dict(),
    "lottery": {"drop_fraction": 0.10, "score_layer": "last", "init": "pruned", "samples": 4},
    "epochs": 8,
    "hflip": False,
    "record_wall_time": False,
    "output_dir": "runs",
}

# Fields whose defaults come straight from the published setup; every other
# default is reported as non-paper in run.json.
PAPER_DEFAULTS = {"sweep.levels", "isp.data_fraction", "lottery.drop_fraction"}

class ConfigError(LotusError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _model_defaults(kind: str) -> dict:
    return (CIFAR_CONFIG if kind == "cifar10" else SYNTHETIC_CONFIG).to_dict()


def _set_path(cfg: dict, path: str, value) -> None:
    parts = path.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config field {path!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config field {path!r}")
    old = node[parts[-1]]
    if isinstance(old, dict):
        raise ConfigError(f"config field {path!r} is a section, not a value")
    if isinstance(old, list) and isinstance(value, str):
        value = [float(x) for x in value.split(",") if x.strip()]
    node[parts[-1]] = value


def _merge(cfg: dict, user: dict) -> list:
    """Merge ``user`` into ``cfg`` in place; return the dotted keys set."""
    touched = []
    for path, v in _flatten(user).items():
        _set_path(cfg, path, v)
        touched.append(path)
    return touched


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(tokens: list) -> dict:
    """``['--a.b', '1', '--c=x']`` -> ``{'a.b': 1, 'c': 'x'}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            raw = tokens[i + 1]
            i += 2
        out[key] = _parse_value(raw)
    return out


def resolve_config(config_path=None, overrides: dict | None = None) -> tuple[dict, list]:
    """Defaults <- JSON file <- flag overrides. Returns ``(config, user-set keys)``."""
    user = {}
    if config_path is not None:
        text = Path(config_path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
    overrides = dict(overrides or {})
    kind = overrides.get("dataset.kind", user.get("dataset", {}).get("kind", DEFAULTS["dataset"]["kind"]))
    cfg = copy.deepcopy(DEFAULTS)
    cfg["model"] = _model_defaults(kind)
    touched = _merge(cfg, user)
    for key, value in overrides.items():
        _set_path(cfg, key, value)
        touched.append(key)
    validate_config(cfg)
    return cfg, sorted(set(touched))


def validate_config(cfg: dict) -> None:
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    epochs = cfg["epochs"]
    if isinstance(epochs, bool) or not isinstance(epochs, int) or epochs < 1:
        raise ConfigError(f"epochs must be a positive integer, got {epochs!r}")
    ds = cfg["dataset"]
    if ds["kind"] not in ("synthetic", "cifar10"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'cifar10', got {ds['kind']!r}")
    if ds["kind"] == "cifar10" and not ds["dir"]:
        raise ConfigError("dataset.dir is required for cifar10")
    for key in ("n_train", "n_eval"):
        if not isinstance(ds[key], int) or ds[key] < 1:
            raise ConfigError(f"dataset.{key} must be a positive integer")
    if cfg["lottery"]["init"] not in ("fresh", "pruned"):
        raise ConfigError(f"lottery.init must be 'fresh' or 'pruned', got {cfg['lottery']['init']!r}")
    if not isinstance(cfg["lottery"]["samples"], int) or cfg["lottery"]["samples"] < 0:
        raise ConfigError("lottery.samples must be a non-negative integer")
    try:
        model_config(cfg)
        optimizer_config(cfg)
        ISPConfig(**cfg["isp"])
        lottery_spec(cfg)
        Scope(cfg["sweep"]["scope"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if float(cfg["sweep"]["tolerance"]) < 0:
        raise ConfigError("sweep.tolerance must be >= 0")


def model_config(cfg: dict) -> ViTConfig:
    return ViTConfig(**cfg["model"])


def optimizer_config(cfg: dict) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(lr=float(o["lr"]), beta1=float(o["beta1"]), beta2=float(o["beta2"]),
                           eps=float(o["eps"]), batch_size=int(o["batch_size"]))


def lottery_spec(cfg: dict) -> LotterySpec:
    lot = cfg["lottery"]
    return LotterySpec(float(lot["drop_fraction"]), ScoreLayer(lot["score_layer"]))


def non_paper_defaults(cfg: dict, touched: list) -> list:
    keys = _flatten(cfg)
    return sorted(k for k in keys if k not in PAPER_DEFAULTS and k not in touched
                  and k not in ("output_dir",))


# ---------------------------------------------------------------------------
# data


def load_data(cfg: dict, model: ViTConfig) -> tuple[ImageDataset, ImageDataset]:
    ds = cfg["dataset"]
    if ds["kind"] == "cifar10":
        if (model.image_size, model.channels, model.num_classes) != (32, 3, 10):
            raise ConfigError("cifar10 needs model image_size 32, channels 3, num_classes 10")
        train = load_cifar10(ds["dir"], ds["limit"], "train")
        ev = load_cifar10(ds["dir"], ds["eval_limit"], "eval")
        return train, ev
    kw = dict(image_size=model.image_size, patch_size=model.patch_size, num_classes=model.num_classes,
              noise_sigma=float(ds["noise_sigma"]), seed=cfg["seed"], channels=model.channels)
    return gen_synthetic(ds["n_train"], split="train", **kw), gen_synthetic(ds["n_eval"], split="eval", **kw)


# ---------------------------------------------------------------------------
# commands


class Run:
    """Resolved config plus output directory for one command."""

    def __init__(self, command: str, cfg: dict, touched: list, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.touched = touched
        self.out = out_dir

    def write_sidecar(self, extra: dict | None = None) -> None:
        doc = {
            "command": self.command,
            "config": self.cfg,
            "non_paper_defaults": non_paper_defaults(self.cfg, self.touched),
        }
        if extra:
            doc.update(extra)
        write_json(self.out / "run.json", doc)

    def path(self, name: str) -> Path:
        return self.out / name


def _final_eval(rows) -> float | None:
    ev = [r.accuracy for r in rows if r.split == "eval"]
    return ev[-1] if ev else None


def _load_model(run: Run, checkpoint):
    path = Path(checkpoint) if checkpoint else run.path("baseline.lots")
    ckpt = load_checkpoint(path)
    params, model, mask = unpack_checkpoint(ckpt)
    log.info("loaded %s (%d tensors)", path, len(params))
    return params, model, mask, path


def cmd_baseline(run: Run, checkpoint=None) -> dict:
    cfg = run.cfg
    model = model_config(cfg)
    train, ev = load_data(cfg, model)
    opt = optimizer_config(cfg)
    state = opt.state()
    params = init_params(model, cfg["seed"])
    params, rows = train_epochs(params, model, train, ev, cfg["epochs"], opt, cfg["seed"],
                                experiment="baseline", hflip=bool(cfg["hflip"]),
                                record_wall_time=bool(cfg["record_wall_time"]), state=state)
    write_metrics(run.path("metrics.csv"), rows)
    save_checkpoint(run.path("baseline.lots"),
                    make_checkpoint(params, model, cfg["seed"], adam=state, extra_config={"run": cfg}))
    acc = _final_eval(rows)
    print(f"baseline: final eval accuracy {acc:.4f}")
    return {"final_eval_accuracy": acc}


def cmd_sweep(run: Run, checkpoint=None) -> dict:
    cfg = run.cfg
    params, model, _, ckpt_path = _load_model(run, checkpoint)
    _, ev = load_data(cfg, model)
    sw = cfg["sweep"]
    report = essential_sparsity_sweep(params, model, ev, [float(s) for s in sw["levels"]],
                                      float(sw["tolerance"]), Scope(sw["scope"]))
    rows = [MetricRow("sweep", 0, "eval", 0.0, None, None, report.baseline_accuracy, None)]
    rows += [MetricRow("sweep", 0, "eval", s, None, None, a, None)
             for s, a in zip(report.levels, report.accuracies)]
    write_metrics(run.path("sweep.csv"), rows)
    emit_plot(run.path("sweep.csv"), "line_by_sparsity", run.path("sweep.svg"), title="accuracy vs sparsity")
    write_json(run.path("sweep.json"), report.to_dict())
    note = " (no level within tolerance; smallest level used)" if report.fallback else ""
    print(f"s* = {report.selected:g}{note}")
    return {"checkpoint": str(ckpt_path), "selected": report.selected, "fallback": report.fallback}


def _write_samples(run: Run, lottery, model: ViTConfig, n: int) -> list:
    names = []
    for i in range(min(n, len(lottery))):
        name = f"lottery_sample_{i}.svg"
        run.path(name).write_text(patch_drop_svg(lottery.source.images[i], lottery.kept[i], model.patch_size))
        names.append(name)
    return names


def cmd_lottery(run: Run, checkpoint=None) -> dict:
    cfg = run.cfg
    scorer, model, ckpt_mask, ckpt_path = _load_model(run, checkpoint)
    train, ev = load_data(cfg, model)
    spec = lottery_spec(cfg)
    lottery = build_lottery_dataset(scorer, model, train, spec)
    lottery.save(run.path("lottery.lotd"))
    samples = _write_samples(run, lottery, model, cfg["lottery"]["samples"])
    if cfg["lottery"]["init"] == "fresh":
        params, mask = init_params(model, cfg["seed"]), None
    else:
        params, mask = copy_params(scorer), ckpt_mask
    _, rows = finetune_on_lottery(params, model, lottery, ev, cfg["epochs"], optimizer_config(cfg), cfg["seed"],
                                  mask=mask, experiment="lottery", drop_fraction=spec.drop_fraction,
                                  record_wall_time=bool(cfg["record_wall_time"]))
    write_metrics(run.path("lottery.csv"), rows)
    emit_plot(run.path("lottery.csv"), "line_by_epoch", run.path("lottery.svg"), "accuracy", "lottery accuracy")
    emit_plot(run.path("lottery.csv"), "line_by_epoch", run.path("lottery_loss.svg"), "loss", "lottery loss")
    acc = _final_eval(rows)
    print(f"lottery: kept {lottery.num_kept}/{lottery.num_patches} patches, final eval accuracy {acc:.4f}")
    return {"checkpoint": str(ckpt_path), "kept_per_image": lottery.num_kept, "samples": samples,
            "final_eval_accuracy": acc}


def cmd_issp(run: Run, checkpoint=None) -> dict:
    cfg = run.cfg
    base, model, _, ckpt_path = _load_model(run, checkpoint)
    train, ev = load_data(cfg, model)
    opt = optimizer_config(cfg)
    sw = cfg["sweep"]
    pruned, mask, report = issp_pipeline(base, model, train, ev, [float(s) for s in sw["levels"]],
                                         float(sw["tolerance"]), ISPConfig(**cfg["isp"]), opt, cfg["seed"],
                                         Scope(sw["scope"]))
    print(f"round 1 sparsity {report.sparsity_round1:.4f} (s* = {report.essential_sparsity:g})")
    print(f"round 2 sparsity {report.sparsity_round2:.4f}")
    save_checkpoint(run.path("issp.lots"),
                    make_checkpoint(pruned, model, cfg["seed"], mask=mask,
                                    extra_config={"run": cfg, "issp": report.to_dict()}))
    spec = lottery_spec(cfg)
    lottery = build_lottery_dataset(base, model, train, spec)
    _, issp_rows = finetune_on_lottery(copy_params(pruned), model, lottery, ev, cfg["epochs"], opt, cfg["seed"],
                                       mask=mask, experiment="issp", drop_fraction=spec.drop_fraction)
    _, lot_rows = finetune_on_lottery(copy_params(base), model, lottery, ev, cfg["epochs"], opt, cfg["seed"],
                                      experiment="lottery_only", drop_fraction=spec.drop_fraction)
    write_metrics(run.path("issp.csv"), issp_rows + lot_rows)
    emit_plot(run.path("issp.csv"), "line_by_epoch", run.path("issp.svg"), "accuracy",
              "ISSP vs lottery-only", split="eval")
    summary = report.to_dict()
    summary.update(issp_final_accuracy=_final_eval(issp_rows), lottery_only_final_accuracy=_final_eval(lot_rows))
    write_json(run.path("issp.json"), summary)
    print(f"issp: final eval accuracy {summary['issp_final_accuracy']:.4f} "
          f"(lottery-only {summary['lottery_only_final_accuracy']:.4f})")
    return {"checkpoint": str(ckpt_path), "sparsity_round1": report.sparsity_round1,
            "sparsity_round2": report.sparsity_round2}


HANDLERS = {"baseline": cmd_baseline, "sweep": cmd_sweep, "lottery": cmd_lottery, "issp": cmd_issp}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lotus", description="Data lottery tickets and ISSP pruning for tiny ViTs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if name != "baseline":
            p.add_argument("--checkpoint", help="model checkpoint (default: OUT/baseline.lots)")
    p = sub.add_parser("plot", help="render a metrics CSV as SVG")
    p.add_argument("csv")
    p.add_argument("--kind", choices=KINDS, default="line_by_epoch")
    p.add_argument("--metric", default="accuracy")
    p.add_argument("--split", default=None)
    p.add_argument("--output", help="SVG path (default: CSV path with .svg suffix)")
    return parser


def _run_plot(args) -> int:
    out = Path(args.output) if args.output else Path(args.csv).with_suffix(".svg")
    emit_plot(args.csv, args.kind, out, args.metric, split=args.split)
    print(f"wrote {out}")
    return EXIT_OK


def _dispatch(args, extra: list) -> int:
    if args.command == "plot":
        if extra:
            raise ConfigError(f"unexpected arguments {extra}")
        return _run_plot(args)
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    cfg, touched = resolve_config(args.config, overrides)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    run = Run(args.command, cfg, touched, out)
    result = HANDLERS[args.command](run, getattr(args, "checkpoint", None))
    run.write_sidecar({"result": result})
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args, extra)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (LotusError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
