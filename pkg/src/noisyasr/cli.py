"""``noisyasr`` command line: synth | mix | train | eval | decode | gradcheck.

Every option can also come from a JSON config file with flat dotted keys
(``{"train.mode": "AvT", "seed": 3}``); flags override file values and keys
not understood by the chosen command are rejected. The ``train`` command
additionally accepts any ``train.<field>`` / ``model.<field>`` key through
the config file or ``--set KEY=VALUE``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import corpus as C
from .audio import read_wav
from .ctc import InfeasibleTargetError
from .model import CheckpointError, ModelConfig, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("noisyasr")


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    threads: int = 1
    out: str | None = None
    paths: dict[str, str] = field(default_factory=dict)
    options: dict[str, object] = field(default_factory=dict)
    train: dict[str, object] = field(default_factory=dict)
    model: dict[str, object] = field(default_factory=dict)


# --------------------------------------------------------------------------- config plumbing

def _field_defaults(cls) -> dict:
    return {f.name: f.default if f.default is not MISSING else f.default_factory() for f in fields(cls)}


def _coerce(key: str, value, default):
    """Convert a JSON or command-line value to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float) or default is None and isinstance(value, (int, float)):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = json.loads(value) if value.startswith("[") else value.split(",")
            return tuple(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        return value
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} (expected {type(default).__name__})") from None


def _dynamic_keys(command: str) -> dict[str, object]:
    if command != "train":
        return {}
    from .train import TrainConfig
    keys = {f"train.{k}": v for k, v in _field_defaults(TrainConfig).items()}
    keys.update({f"model.{k}": v for k, v in _field_defaults(ModelConfig).items()})
    return keys


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object of dotted keys")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: key {k!r} holds an object; use flat dotted keys")
    return data


def resolve(command: str, flag_values: dict, file_values: dict, overrides: dict) -> RunConfig:
    """Merge file values, then ``--set`` overrides, then explicit flags, into a RunConfig."""
    dynamic = _dynamic_keys(command)
    allowed = set(flag_values) | set(dynamic)
    merged: dict = {}
    for source, values in (("config", file_values), ("--set", overrides)):
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) for '{command}': {', '.join(unknown)}")
        merged.update(values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})

    rc = RunConfig(command)
    for key, value in merged.items():
        if key in dynamic:
            value = _coerce(key, value, dynamic[key])
        head, _, tail = key.partition(".")
        if not tail:
            setattr(rc, head, _coerce(key, value, getattr(rc, head)) if head in ("seed", "threads") else value)
        elif head in ("paths", "train", "model", "options"):
            getattr(rc, head)[tail] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    if rc.threads < 1:
        raise ConfigError("threads must be >= 1")
    return rc


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _require(rc: RunConfig, *keys: str) -> None:
    for k in keys:
        head, _, tail = k.partition(".")
        value = getattr(rc, head).get(tail) if tail else getattr(rc, head)
        if value in (None, ""):
            flag = "--" + (tail or head).replace("_", "-")
            raise UsageError(f"{rc.command}: missing required {flag} (or config key {k!r})")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _out_dir(rc: RunConfig) -> Path:
    _require(rc, "out")
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_utts(manifest_path):
    from .train import Utterance
    path = _existing(manifest_path)
    return [Utterance(e.utterance_id, C.load_audio(e, path.parent), e.transcript)
            for e in C.load_manifest(path)]


# --------------------------------------------------------------------------- commands

def cmd_synth(rc: RunConfig) -> int:
    out = _out_dir(rc)
    o = rc.options
    spec_seed = lambda k: C.SynthSpec(seed=_sub_seed(rc.seed, k))  # noqa: E731
    for k, (split, n) in enumerate((("train", o["n_train"]), ("dev", o["n_dev"]), ("test", o["n_test"]))):
        C.synth_corpus(spec_seed(k), int(n), split, out / split)
        log.info("wrote %d %s utterances", n, split)
    noise = C.synth_noise_set(int(o["noise_per_type"]), float(o["noise_duration"]), _sub_seed(rc.seed, 10),
                              out / "noise")
    train, test = C.partition_noise_set(noise, 10, 8, seed=_sub_seed(rc.seed, 11))
    C.save_noise_list(train, test, out / "noise" / "noise_list.csv")
    log.info("wrote %d noise files per type", o["noise_per_type"])
    return 0


def _snr_list(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(s) for s in text)
    try:
        return tuple(float(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"snrs: expected comma-separated numbers, got {text!r}") from None


def cmd_mix(rc: RunConfig) -> int:
    _require(rc, "paths.corpus", "paths.noise")
    out = _out_dir(rc)
    corpus = _existing(rc.paths["corpus"])
    entries = C.load_manifest(corpus)
    pairs = [(e, C.load_audio(e, corpus.parent)) for e in entries]
    test_noise = C.load_noise_list(_existing(rc.paths["noise"]), "test")
    if not test_noise:
        raise ValueError(f"{rc.paths['noise']}: no files in the test split")
    grid, _ = C.build_noisy_test_set(pairs, test_noise, _snr_list(rc.options["snrs"]), seed=rc.seed,
                                     out_dir=out, threads=rc.threads)
    log.info("wrote %d mixed utterances", len(grid))
    return 0


def cmd_train(rc: RunConfig) -> int:
    from .train import TrainConfig, train, write_metrics_csv
    _require(rc, "paths.train")
    tfields = dict(rc.train)
    tfields.setdefault("seed", rc.seed)
    tc = TrainConfig.for_mode(tfields.pop("mode", "VanillaDAT"), **tfields)
    out = _out_dir(rc)

    train_utts = _train_utts(rc.paths["train"])
    dev_utts = _train_utts(rc.paths["dev"]) if rc.paths.get("dev") else []
    noise = C.load_noise_list(_existing(rc.paths["noise"]), "train") if rc.paths.get("noise") else {}
    if not noise and (tc.aug_prob > 0 or tc.uses_noise_head):
        raise UsageError("train: --noise is required when aug_prob > 0 or the mode uses the noise head")

    if rc.paths.get("init"):
        params, _ = load_checkpoint(_existing(rc.paths["init"]))
        if rc.model:
            want = replace(params.cfg, **rc.model)
            if want != params.cfg:
                raise CheckpointError("model.* settings disagree with the --init checkpoint's config")
    else:
        params = init_params(ModelConfig(**rc.model), rc.seed)
    log.info("mode=%s seed=%d params=%d", tc.mode, tc.seed, params.n_values())

    result = train(tc, params, train_utts, noise, dev_utts)
    write_metrics_csv(result.metrics, out / "metrics.csv")
    save_checkpoint(out / "checkpoint.npz", result.best,
                    {"mode": tc.mode, "best_epoch": result.best_epoch, "seed": tc.seed})
    (out / "run_config.json").write_text(json.dumps(
        {"train": {f.name: getattr(tc, f.name) for f in fields(tc)}, "model": params.cfg.to_dict(),
         "paths": rc.paths}, indent=1, sort_keys=True) + "\n")
    log.info("best epoch %d", result.best_epoch)
    return 0


def cmd_eval(rc: RunConfig) -> int:
    from .evaluate import evaluate_grid, write_results_csv
    _require(rc, "paths.checkpoint")
    if not rc.paths.get("manifest") and not rc.paths.get("clean"):
        raise UsageError("eval: give --manifest, --clean or both")
    out = _out_dir(rc)
    params, _ = load_checkpoint(_existing(rc.paths["checkpoint"]))
    entries, bases = [], {}
    for key in ("manifest", "clean"):
        if rc.paths.get(key):
            path = _existing(rc.paths[key])
            for e in C.load_manifest(path):
                entries.append(e)
                bases[e.utterance_id] = path.parent
    noisy = [e for e in entries if not e.is_clean]
    types = sorted({e.noise_label.value for e in noisy}, key=lambda l: C.NoiseLabel(l).index)
    snrs = sorted({e.snr_db for e in noisy})
    grid = evaluate_grid(params, entries, bases, rc.options["method"], snrs, types)
    write_results_csv([grid], out / "results.csv")
    log.info("clean WER %.1f", grid.clean_wer)
    return 0


def cmd_decode(rc: RunConfig) -> int:
    from .ctc import greedy_decode
    from .model import forward
    from .train import feature_fn
    _require(rc, "paths.checkpoint", "paths.wav")
    params, _ = load_checkpoint(_existing(rc.paths["checkpoint"]))
    audio = read_wav(_existing(rc.paths["wav"]))
    log_probs, _ = forward(params, feature_fn(params.cfg)(audio))
    text = greedy_decode(log_probs.value[0], params.cfg.vocab, params.cfg.blank_index)
    print(text)
    if rc.out:
        (_out_dir(rc) / "transcript.txt").write_text(text + "\n")
    return 0


def cmd_gradcheck(rc: RunConfig) -> int:
    from .gradcheck import run_suite
    o = rc.options
    seeds = range(rc.seed, rc.seed + int(o["n_seeds"]))
    results = run_suite(seeds, float(o["step"]))
    worst = max(r.max_rel_error for r in results)
    for r in results:
        log.info("seed %d: max relative error %.3e over %d values", r.seed, r.max_rel_error, r.n_values)
    print(f"max relative error: {worst:.3e}")
    if rc.out:
        with open(_out_dir(rc) / "gradcheck.csv", "w") as fh:
            fh.write("seed,max_rel_error\n")
            fh.writelines(f"{r.seed},{r.max_rel_error!r}\n" for r in results)
    if worst >= float(o["tol"]):
        raise GradientMismatch(f"max relative error {worst:.3e} exceeds tolerance {o['tol']}")
    return 0


class GradientMismatch(RuntimeError):
    pass


COMMANDS = {"synth": cmd_synth, "mix": cmd_mix, "train": cmd_train, "eval": cmd_eval,
            "decode": cmd_decode, "gradcheck": cmd_gradcheck}


# --------------------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisyasr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text, defaults: dict):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON file of flat dotted keys")
        p.add_argument("--out", dest="out", metavar="DIR", help="output directory")
        p.add_argument("--seed", dest="seed", type=int, metavar="N", help="master seed (default 0)")
        p.add_argument("--threads", dest="threads", type=int, metavar="N",
                       help="worker cap for parallel stages (default 1)")
        p.set_defaults(_defaults=defaults)
        return p

    p = command("synth", "write a synthetic tone corpus (train/dev/test) and a noise set",
                {"options.n_train": 300, "options.n_dev": 50, "options.n_test": 50,
                 "options.noise_per_type": 18, "options.noise_duration": 3.0})
    p.add_argument("--n-train", dest="options.n_train", type=int, metavar="N", help="default 300")
    p.add_argument("--n-dev", dest="options.n_dev", type=int, metavar="N", help="default 50")
    p.add_argument("--n-test", dest="options.n_test", type=int, metavar="N", help="default 50")
    p.add_argument("--noise-per-type", dest="options.noise_per_type", type=int, metavar="N",
                   help="noise files per type, at least 18 (default 18)")
    p.add_argument("--noise-duration", dest="options.noise_duration", type=float, metavar="SEC",
                   help="seconds per noise file (default 3.0)")

    p = command("mix", "build the noisy test grid: every utterance x test noise type x SNR",
                {"options.snrs": "0,5,10,15,20"})
    p.add_argument("--corpus", dest="paths.corpus", metavar="CSV", help="clean manifest")
    p.add_argument("--noise", dest="paths.noise", metavar="CSV", help="noise list (test split is used)")
    p.add_argument("--snrs", dest="options.snrs", metavar="LIST", help="comma-separated dB (default 0,5,10,15,20)")

    p = command("train", "train a model in one of VanillaDAT, SoftFreezeDAT, MTL, AvT", {})
    p.add_argument("--train", dest="paths.train", metavar="CSV", help="training manifest")
    p.add_argument("--dev", dest="paths.dev", metavar="CSV", help="dev manifest for best-epoch selection")
    p.add_argument("--noise", dest="paths.noise", metavar="CSV", help="noise list (train split is used)")
    p.add_argument("--init", dest="paths.init", metavar="NPZ", help="start from this checkpoint")
    p.add_argument("--mode", dest="train.mode", metavar="MODE", help="VanillaDAT | SoftFreezeDAT | MTL | AvT")
    p.add_argument("--epochs", dest="train.epochs", type=int, metavar="N")
    p.add_argument("--lr", dest="train.base_lr", type=float, metavar="X", help="base learning rate")
    p.add_argument("--batch-size", dest="train.batch_size", type=int, metavar="N")
    p.add_argument("--aug-prob", dest="train.aug_prob", type=float, metavar="P")
    p.add_argument("--set", dest="_set", action="append", metavar="KEY=VALUE",
                   help="override any train.* or model.* key (repeatable)")

    p = command("eval", "greedy-decode manifests and write the WER grid to results.csv",
                {"options.method": "model"})
    p.add_argument("--checkpoint", dest="paths.checkpoint", metavar="NPZ")
    p.add_argument("--manifest", dest="paths.manifest", metavar="CSV", help="noisy grid manifest")
    p.add_argument("--clean", dest="paths.clean", metavar="CSV", help="clean test manifest")
    p.add_argument("--method", dest="options.method", metavar="NAME", help="method column (default 'model')")

    p = command("decode", "print the greedy transcript of one WAV file", {})
    p.add_argument("--checkpoint", dest="paths.checkpoint", metavar="NPZ")
    p.add_argument("--wav", dest="paths.wav", metavar="PATH")

    p = command("gradcheck", "finite-difference check of the tiny model; prints the max relative error",
                {"options.n_seeds": 5, "options.step": 1e-4, "options.tol": 1e-4})
    p.add_argument("--n-seeds", dest="options.n_seeds", type=int, metavar="N", help="default 5")
    p.add_argument("--step", dest="options.step", type=float, metavar="H", help="central-difference step (1e-4)")
    p.add_argument("--tol", dest="options.tol", type=float, metavar="X", help="failure threshold (1e-4)")
    return parser


def _flag_values(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "_defaults", "_set"}
    return {k: v for k, v in vars(ns).items() if k not in skip}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ns = build_parser().parse_args(argv)
    try:
        file_values = load_config_file(ns.config) if ns.config else {}
        flags = _flag_values(ns)
        file_and_defaults = {**ns._defaults, **file_values}
        rc = resolve(ns.command, flags, file_and_defaults, _parse_set(getattr(ns, "_set", None)))
        if "seed" not in file_values and ns.seed is None:
            log.info("seed not given; using %d", rc.seed)
        return COMMANDS[ns.command](rc)
    except FileNotFoundError as exc:
        msg = str(exc) if exc.filename is None else f"file not found: {exc.filename}"
        return _fail(msg)
    except ConfigError as exc:
        return _fail(f"config error: {exc}")
    except UsageError as exc:
        return _fail(str(exc))
    except CheckpointError as exc:
        return _fail(f"checkpoint error: {exc}")
    except GradientMismatch as exc:
        return _fail(f"gradient check failed: {exc}")
    except ValueError as exc:
        cause = exc
        while cause is not None and not isinstance(cause, InfeasibleTargetError):
            cause = cause.__cause__
        if cause is not None:
            return _fail(f"infeasible CTC target: {exc}")
        return _fail(f"invalid input: {exc}")


def _fail(msg: str) -> int:
    print(f"noisyasr: error: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
