"""Command-line entry point: generate, pretrain, train, eval, embed.

Every command reads an optional strict JSON config (``--config``), applies
flag overrides and writes the fully resolved config to ``config.json`` in its
output directory. Exit codes: 0 success, 2 config error, 3 divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, DivergenceError, DomainError, LoadError
from .pretrain import PretrainConfig, evaluate_reconstruction, pretrain_mae
from .synthdata import DataConfig, generate_cases, read_dataset, split_dataset, write_dataset
from .text import record_to_sentence
from .trainer import TrainConfig, load_model, train
from .zeroshot import evaluate, export_embeddings

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("clip3d")

SECTIONS = ("seed", "paths", "data", "pretrain", "train", "eval")
PATH_KEYS = ("dataset", "checkpoint", "init_image_encoder", "out")
EVAL_DEFAULTS = {"seeds": 1, "baseline_repeats": 100, "export_embeddings": False}
DATA_EXTRA = {"cases": 80}


class ConfigError(ContractError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _without_seed(d: dict) -> dict:
    # the top-level seed is the only one a config file may carry
    return {k: v for k, v in d.items() if k != "seed"}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    paths: dict = dataclasses.field(default_factory=dict)
    data: DataConfig = DataConfig()
    cases: int = 80
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig()
    eval: dict = dataclasses.field(default_factory=lambda: dict(EVAL_DEFAULTS))

    def to_dict(self) -> dict:
        return _jsonable({
            "seed": self.seed,
            "paths": {k: self.paths.get(k) for k in PATH_KEYS},
            "data": {"cases": self.cases, **dataclasses.asdict(self.data)},
            "pretrain": _without_seed(self.pretrain.to_dict()),
            "train": _without_seed(self.train.to_dict()),
            "eval": dict(self.eval),
        })


def parse_config(raw: dict) -> RunConfig:
    """Strictly parse a config mapping; section-level ``seed`` keys are rejected in favour of the top-level one."""
    _check_keys("config", raw, SECTIONS)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    paths = raw.get("paths", {})
    _check_keys("paths", paths, PATH_KEYS)

    data = dict(raw.get("data", {}))
    _check_keys("data", data, _field_names(DataConfig) + list(DATA_EXTRA))
    cases = data.pop("cases", DATA_EXTRA["cases"])

    pre = dict(raw.get("pretrain", {}))
    _check_keys("pretrain", pre, [f for f in _field_names(PretrainConfig) if f != "seed"])
    tr = dict(raw.get("train", {}))
    _check_keys("train", tr, [f for f in _field_names(TrainConfig) if f != "seed"])
    ev = raw.get("eval", {})
    _check_keys("eval", ev, EVAL_DEFAULTS)
    try:
        return RunConfig(
            seed=seed,
            paths=dict(paths),
            data=DataConfig(**_tupled(data)),
            cases=cases,
            pretrain=PretrainConfig(**_tupled(pre), seed=seed),
            train=TrainConfig(**_tupled(tr), seed=seed),
            eval={**EVAL_DEFAULTS, **ev},
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["paths"]["out"] = args.out
    for key in ("dataset", "checkpoint", "init_image_encoder"):
        val = getattr(args, key, None)
        if val is not None:
            raw["paths"][key] = val
    if getattr(args, "cases", None) is not None:
        raw["data"]["cases"] = args.cases
    if getattr(args, "accum_freq", None) is not None:
        raw["train"]["accum_freq"] = args.accum_freq
    steps = getattr(args, "steps", None)
    if steps is not None:
        section = "pretrain" if args.command == "pretrain" else "train"
        raw[section]["steps"] = steps
        if steps == 0 or raw[section]["warmup_steps"] >= steps:
            raw[section]["warmup_steps"] = min(raw[section]["warmup_steps"], max(steps - 1, 0))
    if getattr(args, "seeds", None) is not None:
        raw["eval"]["seeds"] = args.seeds
    if getattr(args, "export_embeddings", False):
        raw["eval"]["export_embeddings"] = True
    return parse_config(raw)


# -- helpers -----------------------------------------------------------------


def _need(cfg: RunConfig, key: str) -> Path:
    val = cfg.paths.get(key)
    if not val:
        raise ConfigError(f"missing path: --{key.replace('_', '-')}")
    return Path(val)


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _dataset(cfg: RunConfig):
    root = _need(cfg, "dataset")
    if not (root / "split.json").is_file():
        raise FileNotFoundError(f"no dataset at {root} (split.json missing)")
    return read_dataset(root)


# -- commands ----------------------------------------------------------------


def cmd_generate(cfg: RunConfig, force: bool = False) -> Path:
    out = _need(cfg, "out")
    cases = generate_cases(cfg.cases, cfg.seed, cfg.data)
    ds = split_dataset(cases, np.random.default_rng([cfg.seed, 4]))
    _prepare_out(out, force)
    write_dataset(ds, out)
    _echo(cfg, out)
    print(f"wrote {len(ds.cases)} cases ({len(ds.train)} train / {len(ds.test)} test) to {out}")
    return out


def cmd_pretrain(cfg: RunConfig, force: bool = False) -> Path:
    ds = _dataset(cfg)
    out = _prepare_out(_need(cfg, "out"), force)
    _echo(cfg, out)
    res = pretrain_mae(cfg.pretrain, ds, out / "pretrain.cal3")
    model_mse, base_mse = evaluate_reconstruction(res, ds)
    summary = {"masked_mse": model_mse, "mean_predictor_mse": base_mse,
               "final_loss": res.history[-1]["loss"] if res.history else None}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"pretrained encoder -> {res.checkpoint} (masked MSE {model_mse:.4f}, mean predictor {base_mse:.4f})")
    return res.checkpoint


def cmd_train(cfg: RunConfig, force: bool = False, progress: bool = False) -> Path:
    ds = _dataset(cfg)
    init = cfg.paths.get("init_image_encoder")
    if init and not Path(init).is_file():
        raise FileNotFoundError(f"no checkpoint at {init}")
    out = _prepare_out(_need(cfg, "out"), force)
    _echo(cfg, out)
    res = train(cfg.train, ds, init_image_encoder=init, out_dir=out, progress=progress)
    final = f"final loss {res.history[-1]['loss']:.4f}" if res.history else "no steps run"
    print(f"checkpoint -> {res.checkpoint} ({final})")
    return res.checkpoint


def cmd_eval(cfg: RunConfig, force: bool = False) -> Path:
    ckpt = _need(cfg, "checkpoint")
    ds = _dataset(cfg)
    model, *_ = load_model(ckpt)
    out = _prepare_out(_need(cfg, "out"), force)
    _echo(cfg, out)
    cases = ds.test_cases
    if not cases:
        raise ConfigError("dataset has no test split")
    ev = cfg.eval
    report = evaluate(model, cases, seeds=ev["seeds"], baseline_repeats=ev["baseline_repeats"],
                      baseline_seed=cfg.seed)
    report["checkpoint"] = str(ckpt)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    if ev["export_embeddings"]:
        _export(model, cases, out / "embeddings.csv")
    auc = report["classification"]["auc"]["average"]
    print(f"average AUC {auc['mean']:.3f} +/- {auc['sem']:.3f}; MRR {report['retrieval']['mrr']['mean']:.3f}")
    return out / "report.json"


def _export(model, cases, path: Path) -> Path:
    img = model.embed_volumes([c.volume for c in cases])
    txt = model.embed_texts([record_to_sentence(c.record) for c in cases])
    return export_embeddings([c.case_id for c in cases], [c.record.label_set for c in cases], img, txt, path)


def cmd_embed(cfg: RunConfig, force: bool = False, split: str = "all") -> Path:
    ckpt = _need(cfg, "checkpoint")
    ds = _dataset(cfg)
    model, *_ = load_model(ckpt)
    out = _prepare_out(_need(cfg, "out"), force)
    _echo(cfg, out)
    cases = {"all": ds.cases, "train": ds.train_cases, "test": ds.test_cases}[split]
    path = _export(model, cases, out / "embeddings.csv")
    print(f"wrote {2 * len(cases)} embeddings to {path}")
    return path


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="strict JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="clip3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--cases", type=int)

    pt = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pretraining of the image trunk")
    pt.add_argument("--dataset")
    pt.add_argument("--steps", type=int)

    t = sub.add_parser("train", parents=[common], help="contrastive alignment training")
    t.add_argument("--dataset")
    t.add_argument("--accum-freq", type=int, dest="accum_freq")
    t.add_argument("--steps", type=int)
    t.add_argument("--init-image-encoder", dest="init_image_encoder")
    t.add_argument("--progress", action="store_true", help="show a progress bar")

    e = sub.add_parser("eval", parents=[common], help="zero-shot classification and retrieval report")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--seeds", type=int)
    e.add_argument("--export-embeddings", action="store_true", dest="export_embeddings")

    m = sub.add_parser("embed", parents=[common], help="export image and sentence embeddings")
    m.add_argument("--dataset")
    m.add_argument("--checkpoint")
    m.add_argument("--split", choices=("all", "train", "test"), default="all")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "generate":
            cmd_generate(cfg, args.force)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force, args.progress)
        elif args.command == "eval":
            cmd_eval(cfg, args.force)
        else:
            cmd_embed(cfg, args.force, args.split)
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, LoadError, DimensionError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
