"""Command line interface: ``s2rm <command> [options]``.

Every command accepts ``--config FILE`` (INI sections ``[model]``, ``[train]``,
``[data]``, ``[run]``); command-line flags override file values, and the
merged configuration is written to ``<out>/config.ini``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 gradient-check failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from pathlib import Path

from . import gradcheck
from .errors import ConfigError, S2RMError
from .evalsuite import (DROP_FRACTIONS, PROMPT_STEPS, ROLLOUT_STEPS, MetricsReport, enclave_map, one_step_eval,
                        robustness_sweep, rollout, write_pgm)
from .recurrent import MODEL_KINDS, S2RM, BaselineConfig, S2RMConfig, build_model
from .tensorcore import set_determinism
from .trainer import TrainConfig, load_checkpoint, train
from .worldsim import DatasetSpec, generate_dataset, load_dataset

log = logging.getLogger("s2rm")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_GRADCHECK = 0, 1, 2, 3

_MODEL_KEYS = ({f.name for f in dataclasses.fields(S2RMConfig)}
               | {f.name for f in dataclasses.fields(BaselineConfig)} | {"kind"}) - {"core"}
SECTIONS = {
    "model": _MODEL_KEYS,
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "data": {"train", "val", "eval", "seqs", "val_seqs", "test_seqs", "frames", "balls", "views", "seed",
             "ood_balls", "index", "rollout_frames"},
    "run": {"out", "threads", "seed", "ckpt", "drop", "fractions"},
}
# a key present in several sections (``seed``) is set in all of them by its flag


PATH_KEYS = (("run", "out"), ("run", "ckpt"), ("data", "train"), ("data", "val"), ("data", "eval"))


class UsageError(ConfigError):
    pass


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def read_config(path) -> dict:
    """Parse an INI run config into ``{section: {key: str}}``; unknown keys are rejected."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise UsageError(f"unknown config key {section}.{key}")
            out.setdefault(section, {})[key] = value
    return out


def merge_config(args) -> dict:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for section, keys in SECTIONS.items():
        for key in keys:
            value = getattr(args, key, None)
            if value is not None:
                cfg.setdefault(section, {})[key] = value if isinstance(value, str) else _fmt(value)
    for section, key in PATH_KEYS:
        if key in cfg.get(section, {}):
            cfg[section][key] = _resolve(cfg[section][key])
    return cfg


def _resolve(value: str) -> str:
    parts = []
    for item in value.split(","):
        name, sep, path = item.strip().rpartition("=")
        parts.append(f"{name}{sep}{Path(path).expanduser().resolve()}")
    return ",".join(parts)


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def write_config(cfg: dict, out_dir: Path) -> None:
    parser = configparser.ConfigParser()
    for section in sorted(cfg):
        parser[section] = {k: str(v) for k, v in sorted(cfg[section].items())}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.ini", "w") as fh:
        parser.write(fh)


def _get(cfg, section, key, default):
    raw = cfg.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        return _coerce(raw, default) if default is not None else raw
    except ValueError as exc:
        raise UsageError(f"bad value for {section}.{key}: {raw!r}") from exc


def _out_dir(cfg) -> Path:
    return Path(_get(cfg, "run", "out", "out")).resolve()


def _model_fields(cfg, kind):
    fields = S2RMConfig if kind == "s2gru" else BaselineConfig
    defaults = {f.name: f.default for f in dataclasses.fields(fields) if f.name != "core"}
    return {k: _get(cfg, "model", k, v) for k, v in defaults.items()}


def _datasets(spec: str | None) -> dict:
    """``name=path,name=path`` or plain ``path,path`` -> ``{name: dataset}``."""
    if not spec:
        raise UsageError("no evaluation datasets given (use --data)")
    out = {}
    for item in spec.split(","):
        item = item.strip()
        name, _, path = item.rpartition("=") if "=" in item else (Path(item).stem, "", item)
        p = Path(path).resolve()
        if not p.exists():
            raise UsageError(f"dataset {p} does not exist")
        out[name] = load_dataset(p)
    return out


def _load_model(cfg):
    ckpt_path = _get(cfg, "run", "ckpt", None)
    if ckpt_path is None:
        raise UsageError("missing --ckpt")
    path = Path(ckpt_path).resolve()
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    model = load_checkpoint(path).build()
    model.eval()
    return model


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    out = _out_dir(cfg)
    seqs = _get(cfg, "data", "seqs", 500)
    T = _get(cfg, "data", "frames", 30)
    balls = _get(cfg, "data", "balls", 3)
    A = _get(cfg, "data", "views", 10)
    seed = _get(cfg, "data", "seed", 0)
    val_seqs = _get(cfg, "data", "val_seqs", max(1, seqs // 10))
    test_seqs = _get(cfg, "data", "test_seqs", max(1, seqs // 10))
    ood = [int(b) for b in _get(cfg, "data", "ood_balls", "1,2,3,4,5,6").split(",") if b.strip()]
    write_config(cfg, out)
    generate_dataset(DatasetSpec(seqs, T, A, balls, seed), out / "train.bin")
    generate_dataset(DatasetSpec(val_seqs, T, A, balls, seed + 1), out / "val.bin")
    for b in ood:
        generate_dataset(DatasetSpec(test_seqs, T, A, b, seed + 100 + b), out / f"test_b{b}.bin")
    # rollouts need 20 prompt + 25 free-running steps
    rollout_T = _get(cfg, "data", "rollout_frames", PROMPT_STEPS + ROLLOUT_STEPS)
    generate_dataset(DatasetSpec(test_seqs, rollout_T, A, balls, seed + 200), out / "rollout.bin")
    log.info("wrote datasets to %s", out)
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    kind = _get(cfg, "model", "kind", "s2gru")
    if kind not in MODEL_KINDS:
        raise UsageError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    tdefaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    tcfg = TrainConfig(**{k: _get(cfg, "train", k, v) for k, v in tdefaults.items()})
    paths = {}
    for split in ("train", "val"):
        p = _get(cfg, "data", split, None)
        if p is None or not Path(p).exists():
            raise UsageError(f"missing or nonexistent --{split} dataset")
        paths[split] = Path(p).resolve()
    write_config(cfg, out)
    model = build_model(kind, **_model_fields(cfg, kind))
    result = train(model, load_dataset(paths["train"]), load_dataset(paths["val"]), tcfg, out_dir=out, progress=True)
    best = result.checkpoint
    log.info("best epoch %d val loss %.6f -> %s", best.epoch, best.val_loss, result.checkpoint_path)
    return EXIT_OK


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    drop = _get(cfg, "run", "drop", 0.0)
    seed = _get(cfg, "run", "seed", 0)
    data = _datasets(_get(cfg, "data", "eval", None))
    write_config(cfg, out)
    report = MetricsReport([one_step_eval(model, ds, drop, seed=seed, dataset_id=name) for name, ds in data.items()])
    report.to_csv(out / "metrics.csv")
    for row in report:
        print(f"{row.dataset}: balls={row.n_balls} drop={row.drop_fraction:g} "
              f"bacc={row.balanced_accuracy:.4f} f1={row.f1:.4f} bce={row.mean_bce:.4f}")
    return EXIT_OK


def cmd_robustness(cfg) -> int:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    raw = _get(cfg, "run", "fractions", None)
    fractions = [float(f) for f in raw.split(",")] if raw else list(DROP_FRACTIONS)
    data = _datasets(_get(cfg, "data", "eval", None))
    write_config(cfg, out)
    report = robustness_sweep(model, data, fractions, seed=_get(cfg, "run", "seed", 0), out_csv=out / "metrics.csv")
    for row in report:
        print(f"{row.dataset}: drop={row.drop_fraction:g} bacc={row.balanced_accuracy:.4f} f1={row.f1:.4f}")
    return EXIT_OK


def cmd_rollout(cfg) -> int:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    data = _datasets(_get(cfg, "data", "eval", None))
    index = _get(cfg, "data", "index", 0)
    seed = _get(cfg, "run", "seed", 0)
    write_config(cfg, out)
    ds = next(iter(data.values()))
    result = rollout(model, ds[index], seed=seed)
    for i in range(result.prompt_len, result.prompt_len + result.rollout_len):
        write_pgm(result.predictions[i], out / f"rollout_t{i + 1:03d}.pgm")
        write_pgm(result.truth[i], out / f"truth_t{i + 1:03d}.pgm")
    log.info("wrote %d rollout frames to %s", result.rollout_len, out)
    return EXIT_OK


def cmd_enclaves(cfg) -> int:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    if not isinstance(model, S2RM):
        raise UsageError("enclave maps need an s2gru checkpoint")
    write_config(cfg, out)
    for m, image in enumerate(enclave_map(model)):
        write_pgm(image, out / f"enclave_m{m}.pgm")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    ok = gradcheck.run(seed=_get(cfg, "run", "seed", 0))
    return EXIT_OK if ok else EXIT_GRADCHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "enclaves": cmd_enclaves,
    "robustness": cmd_robustness,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2rm", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="intra-op threads (1 = fully deterministic)")
    common.add_argument("--seed", type=int, dest="seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write train/val/OOD datasets")
    p.add_argument("--seqs", type=int)
    p.add_argument("--val-seqs", type=int, dest="val_seqs")
    p.add_argument("--test-seqs", type=int, dest="test_seqs")
    p.add_argument("--frames", type=int)
    p.add_argument("--balls", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--ood-balls", dest="ood_balls", help="comma-separated ball counts for test sets")
    p.add_argument("--rollout-frames", type=int, dest="rollout_frames", help="length of rollout.bin sequences")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--kind", choices=MODEL_KINDS)
    p.add_argument("--train", help="training dataset file")
    p.add_argument("--val", help="validation dataset file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--n-modules", type=int, dest="n_modules")
    p.add_argument("--hidden", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))

    for name, helptext in (("eval", "one-step metrics"), ("robustness", "dropped-view sweep"),
                           ("rollout", "prompted rollout images"), ("enclaves", "module enclave images")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--ckpt", help="checkpoint file")
        if name != "enclaves":
            p.add_argument("--data", dest="eval", help="dataset(s): path or name=path, comma separated")
        if name == "eval":
            p.add_argument("--drop", type=float, help="fraction of views dropped")
        if name == "robustness":
            p.add_argument("--fractions", help="comma-separated drop fractions")
        if name == "rollout":
            p.add_argument("--index", type=int, help="sequence index within the dataset")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = merge_config(args)
        set_determinism(_get(cfg, "run", "threads", 1))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"s2rm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (S2RMError, OSError, RuntimeError, ValueError) as exc:
        print(f"s2rm: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
