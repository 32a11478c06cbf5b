"""Experiment runner and command-line entry point.

A run is described by a flat key-value spec that can come from a JSON config
file, command-line flags, or both (flags win).  Each invocation creates a
fresh timestamped directory under the output root containing the resolved
config, one JSON-lines file of per-round metrics per repeat, and a CSV
summarizing the final round across repeats.

The environment variable PFB_THREADS caps the worker threads used for
client updates.  It only affects wall-clock time; results are identical for
any value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (Dataset, load_csv, load_idx, partition_dirichlet,
                   partition_label_shard, synth_gaussian_mixture)
from .errors import ConfigError, DivergenceError
from .fl import (PriorStrategy, RunConfig, RunHistory, Tricks, run_fedavg,
                 run_perfedavg_fo, run_pfedbred)
from .models import make_model

METHODS = ("pfedbred", "fedavg", "perfedavg_fo")
MODELS = ("mclr", "dnn")
STRATEGIES = ("vanilla", "lg", "meg", "mh", "mh_variant")

_DEFAULTS: dict = {
    "dataset_idx": None,
    "dataset_csv": None,
    "synth": None,
    "partition": "label_shard:3",
    "method": "pfedbred",
    "strategy": "mh",
    "model": "mclr",
    "T": 100,
    "R": 20,
    "K": 5,
    "S": None,
    "N": 20,
    "lambda": 15.0,
    "alpha_m": 0.01,
    "alpha": 0.01,
    "eta": 0.05,
    "eta_alpha": 0.01,
    "beta": None,
    "batch": 20,
    "seed": 0,
    "repeats": 1,
    "ft": False,
    "am": False,
    "train_fraction": 0.9,
    "track_deviations": True,
    "out": "runs",
}


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully resolved experiment description."""

    dataset_idx: tuple | None
    dataset_csv: str | None
    synth: tuple | None
    partition_kind: str
    partition_param: float
    method: str
    strategy: str
    model: str
    num_rounds: int
    local_steps: int
    prox_steps: int
    sample_size: int
    num_clients: int
    lam: float
    alpha_m: float
    alpha: float
    eta: float
    eta_alpha: float
    beta: float
    batch_size: int
    seed: int
    repeats: int
    ft: bool
    am: bool
    train_fraction: float
    track_deviations: bool
    out: str

    def to_config(self) -> dict:
        """Flat key-value form; feeding it back to parse_config reproduces this spec."""
        if self.partition_kind == "label_shard":
            partition = f"label_shard:{int(self.partition_param)}"
        else:
            partition = f"dirichlet:{repr(float(self.partition_param))}"
        synth = None
        if self.synth is not None:
            c, d, npc, sep = self.synth
            synth = f"{c},{d},{npc},{repr(float(sep))}"
        return {
            "dataset_idx": ",".join(self.dataset_idx) if self.dataset_idx else None,
            "dataset_csv": self.dataset_csv,
            "synth": synth,
            "partition": partition,
            "method": self.method,
            "strategy": self.strategy,
            "model": self.model,
            "T": self.num_rounds,
            "R": self.local_steps,
            "K": self.prox_steps,
            "S": self.sample_size,
            "N": self.num_clients,
            "lambda": self.lam,
            "alpha_m": self.alpha_m,
            "alpha": self.alpha,
            "eta": self.eta,
            "eta_alpha": self.eta_alpha,
            "beta": self.beta,
            "batch": self.batch_size,
            "seed": self.seed,
            "repeats": self.repeats,
            "ft": self.ft,
            "am": self.am,
            "train_fraction": self.train_fraction,
            "track_deviations": self.track_deviations,
            "out": self.out,
        }

    def run_config(self, seed: int) -> RunConfig:
        return RunConfig(
            alpha_m=self.alpha_m, alpha=self.alpha, lam=self.lam, beta=self.beta,
            num_rounds=self.num_rounds, local_steps=self.local_steps,
            prox_steps=self.prox_steps, sample_size=self.sample_size,
            num_clients=self.num_clients, batch_size=self.batch_size,
            strategy=PriorStrategy(kind=self.strategy, eta_alpha=self.eta_alpha, eta=self.eta),
            tricks=Tricks(ft=self.ft, am=self.am), seed=seed,
            track_deviations=self.track_deviations)


def _as_int(key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    return int(value)


def _as_float(key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, np.floating)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    return float(value)


def _as_bool(key: str, value) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
    return value


def _as_str(key: str, value) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"config key {key!r} must be a nonempty string, got {value!r}")
    return value


def _parse_partition(value: str):
    kind, sep, param = value.partition(":")
    if not sep:
        raise ConfigError(f"config key 'partition' must look like 'label_shard:K' "
                          f"or 'dirichlet:ALPHA', got {value!r}")
    if kind == "label_shard":
        try:
            k = int(param)
        except ValueError:
            raise ConfigError(f"label_shard class count must be an integer, got {param!r}") from None
        if k < 1:
            raise ConfigError(f"label_shard class count must be >= 1, got {k}")
        return kind, k
    if kind == "dirichlet":
        try:
            alpha = float(param)
        except ValueError:
            raise ConfigError(f"dirichlet alpha must be a number, got {param!r}") from None
        if not alpha > 0:
            raise ConfigError(f"dirichlet alpha must be positive, got {alpha}")
        return kind, alpha
    raise ConfigError(f"unknown partition kind {kind!r}; expected label_shard or dirichlet")


def _parse_synth(value: str) -> tuple:
    parts = value.split(",")
    if len(parts) != 4:
        raise ConfigError(f"config key 'synth' must be 'CLASSES,DIMS,PER_CLASS,SEPARATION', "
                          f"got {value!r}")
    try:
        c, d, npc = int(parts[0]), int(parts[1]), int(parts[2])
        sep = float(parts[3])
    except ValueError:
        raise ConfigError(f"could not parse 'synth' value {value!r}") from None
    if c < 2 or d < 1 or npc < 1 or sep < 0:
        raise ConfigError(f"'synth' values out of range: {value!r}")
    return c, d, npc, sep


def _parse_dataset_idx(value) -> tuple:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return str(value[0]), str(value[1])
    if isinstance(value, str):
        parts = value.split(",")
        if len(parts) == 2 and all(parts):
            return parts[0], parts[1]
    raise ConfigError(f"config key 'dataset_idx' must be 'IMAGES,LABELS', got {value!r}")


def parse_config(config_path=None, overrides=None) -> ExperimentSpec:
    """Merge defaults, an optional JSON config file, and explicit overrides.

    Later sources win.  Unknown keys and ill-typed values raise ConfigError
    naming the offending key.
    """
    merged = dict(_DEFAULTS)
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    if overrides:
        for key, value in overrides.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    return _build_spec(merged)


def _build_spec(cfg: dict) -> ExperimentSpec:
    sources = [k for k in ("dataset_idx", "dataset_csv", "synth") if cfg[k] is not None]
    if len(sources) != 1:
        raise ConfigError(
            f"exactly one dataset source among dataset_idx, dataset_csv, synth is "
            f"required; got {sources or 'none'}")

    dataset_idx = _parse_dataset_idx(cfg["dataset_idx"]) if cfg["dataset_idx"] is not None else None
    dataset_csv = _as_str("dataset_csv", cfg["dataset_csv"]) if cfg["dataset_csv"] is not None else None
    synth = _parse_synth(_as_str("synth", cfg["synth"])) if cfg["synth"] is not None else None
    partition_kind, partition_param = _parse_partition(_as_str("partition", cfg["partition"]))

    method = _as_str("method", cfg["method"])
    if method not in METHODS:
        raise ConfigError(f"config key 'method' must be one of {METHODS}, got {method!r}")
    strategy = _as_str("strategy", cfg["strategy"])
    if strategy not in STRATEGIES:
        raise ConfigError(f"config key 'strategy' must be one of {STRATEGIES}, got {strategy!r}")
    model = _as_str("model", cfg["model"])
    if model not in MODELS:
        raise ConfigError(f"config key 'model' must be one of {MODELS}, got {model!r}")

    num_rounds = _as_int("T", cfg["T"])
    local_steps = _as_int("R", cfg["R"])
    prox_steps = _as_int("K", cfg["K"])
    num_clients = _as_int("N", cfg["N"])
    for key, val in (("T", num_rounds), ("R", local_steps), ("K", prox_steps), ("N", num_clients)):
        if val < 1:
            raise ConfigError(f"config key {key!r} must be >= 1, got {val}")

    if cfg["S"] is None:
        sample_size = max(1, round(0.2 * num_clients))
    else:
        sample_size = _as_int("S", cfg["S"])
    if not 1 <= sample_size <= num_clients:
        raise ConfigError(f"config key 'S' must lie in [1, N={num_clients}], got {sample_size}")

    lam = _as_float("lambda", cfg["lambda"])
    if not lam > 0:
        raise ConfigError(f"config key 'lambda' must be positive, got {lam}")
    alpha_m = _as_float("alpha_m", cfg["alpha_m"])
    alpha = _as_float("alpha", cfg["alpha"])
    eta = _as_float("eta", cfg["eta"])
    eta_alpha = _as_float("eta_alpha", cfg["eta_alpha"])
    if alpha_m < 0:
        raise ConfigError(f"config key 'alpha_m' must be nonnegative, got {alpha_m}")
    if not alpha > 0:
        raise ConfigError(f"config key 'alpha' must be positive, got {alpha}")
    if eta < 0 or eta_alpha < 0:
        raise ConfigError("config keys 'eta' and 'eta_alpha' must be nonnegative")

    ft = _as_bool("ft", cfg["ft"])
    am = _as_bool("am", cfg["am"])
    if cfg["beta"] is None:
        beta = 2.0 if am else 1.0
    else:
        beta = _as_float("beta", cfg["beta"])
    if not beta > 0:
        raise ConfigError(f"config key 'beta' must be positive, got {beta}")
    if am and beta != 2.0:
        raise ConfigError(f"config key 'am' requires beta == 2, got beta={beta}")

    batch_size = _as_int("batch", cfg["batch"])
    if batch_size < 1:
        raise ConfigError(f"config key 'batch' must be >= 1, got {batch_size}")
    seed = _as_int("seed", cfg["seed"])
    if seed < 0:
        raise ConfigError(f"config key 'seed' must be nonnegative, got {seed}")
    repeats = _as_int("repeats", cfg["repeats"])
    if repeats < 1:
        raise ConfigError(f"config key 'repeats' must be >= 1, got {repeats}")
    train_fraction = _as_float("train_fraction", cfg["train_fraction"])
    if not 0 < train_fraction < 1:
        raise ConfigError(f"config key 'train_fraction' must lie in (0, 1), got {train_fraction}")
    track_deviations = _as_bool("track_deviations", cfg["track_deviations"])
    out = _as_str("out", cfg["out"])

    return ExperimentSpec(
        dataset_idx=dataset_idx, dataset_csv=dataset_csv, synth=synth,
        partition_kind=partition_kind, partition_param=partition_param,
        method=method, strategy=strategy, model=model,
        num_rounds=num_rounds, local_steps=local_steps, prox_steps=prox_steps,
        sample_size=sample_size, num_clients=num_clients,
        lam=lam, alpha_m=alpha_m, alpha=alpha, eta=eta, eta_alpha=eta_alpha,
        beta=beta, batch_size=batch_size, seed=seed, repeats=repeats,
        ft=ft, am=am, train_fraction=train_fraction,
        track_deviations=track_deviations, out=out)


def build_dataset(spec: ExperimentSpec) -> Dataset:
    if spec.synth is not None:
        c, d, npc, sep = spec.synth
        return synth_gaussian_mixture(c, d, npc, sep, seed=spec.seed)
    if spec.dataset_csv is not None:
        return load_csv(spec.dataset_csv)
    return load_idx(*spec.dataset_idx)


def build_partition(spec: ExperimentSpec, dataset: Dataset, seed: int):
    if spec.partition_kind == "label_shard":
        return partition_label_shard(dataset, spec.num_clients, int(spec.partition_param),
                                     train_fraction=spec.train_fraction, seed=seed)
    return partition_dirichlet(dataset, spec.num_clients, float(spec.partition_param),
                               train_fraction=spec.train_fraction, seed=seed)


def threads_from_env() -> int:
    raw = os.environ.get("PFB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PFB_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


def _new_run_dir(root: Path) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    suffix = 0
    while True:
        name = f"run-{stamp}" if suffix == 0 else f"run-{stamp}-{suffix}"
        candidate = root / name
        try:
            candidate.mkdir(parents=True, exist_ok=False)
            return candidate
        except FileExistsError:
            suffix += 1


def _round_record(m, repeat: int, seed: int, method: str, strategy) -> dict:
    return {
        "round": m.round,
        "repeat": repeat,
        "seed": seed,
        "method": method,
        "strategy": strategy,
        "global_acc": m.global_acc_globaltest,
        "personalized_acc": m.personalized_acc_localtest,
        "mean_local_loss": m.mean_local_loss,
        "gce": m.gce,
        "dev_global": {str(k): v for k, v in sorted(m.per_class_deviation_global.items())} or None,
        "dev_local": {str(k): v for k, v in sorted(m.per_class_deviation_local.items())} or None,
    }


def _run_one(spec: ExperimentSpec, dataset: Dataset, seed: int, workers: int) -> RunHistory:
    partition = build_partition(spec, dataset, seed)
    model = make_model(spec.model, dataset.num_features, dataset.num_classes)
    cfg = spec.run_config(seed)
    if spec.method == "fedavg":
        return run_fedavg(cfg, dataset, partition, model, workers=workers)
    if spec.method == "perfedavg_fo":
        return run_perfedavg_fo(cfg, dataset, partition, model, workers=workers)
    return run_pfedbred(cfg, dataset, partition, model, workers=workers)


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> Path:
    """Run all repeats, write outputs, and return the created run directory."""
    if workers is None:
        workers = threads_from_env()
    dataset = build_dataset(spec)
    root = Path(spec.out)
    root.mkdir(parents=True, exist_ok=True)
    run_dir = _new_run_dir(root)
    config_text = json.dumps(spec.to_config(), indent=2, sort_keys=True)
    (run_dir / "config.json").write_text(config_text + "\n", encoding="utf-8")

    strategy = spec.strategy if spec.method == "pfedbred" else None
    finals = []
    for repeat in range(spec.repeats):
        seed = spec.seed + repeat
        history = _run_one(spec, dataset, seed, workers)
        path = run_dir / f"repeat_{repeat}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for m in history.rounds:
                fh.write(json.dumps(_round_record(m, repeat, seed, spec.method, strategy),
                                    sort_keys=True) + "\n")
        finals.append(history.rounds[-1])

    rows = [
        ("global_acc", [m.global_acc_globaltest for m in finals]),
        ("personalized_acc", [m.personalized_acc_localtest for m in finals]),
        ("mean_local_loss", [m.mean_local_loss for m in finals]),
    ]
    if all(m.gce is not None for m in finals):
        rows.append(("gce", [m.gce for m in finals]))
    with open(run_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("metric,mean,std\n")
        for name, values in rows:
            arr = np.asarray(values, dtype=np.float64)
            fh.write(f"{name},{repr(float(arr.mean()))},{repr(float(arr.std()))}\n")
    return run_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfedbred",
        description="Personalized federated learning with Bregman-proximal local objectives.")
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    parser.add_argument("--dataset-idx", type=str, dest="dataset_idx",
                        metavar="IMAGES,LABELS", help="binary IDX image/label pair")
    parser.add_argument("--dataset-csv", type=str, dest="dataset_csv",
                        metavar="PATH", help="CSV file with header label,f0,f1,...")
    parser.add_argument("--synth", type=str, metavar="C,D,NPC,SEP",
                        help="synthetic Gaussian mixture: classes, dims, per-class count, separation")
    parser.add_argument("--partition", type=str, metavar="label_shard:K|dirichlet:ALPHA")
    parser.add_argument("--method", type=str, choices=METHODS)
    parser.add_argument("--strategy", type=str, choices=STRATEGIES)
    parser.add_argument("--model", type=str, choices=MODELS)
    parser.add_argument("--T", type=int, help="communication rounds")
    parser.add_argument("--R", type=int, help="local steps per round")
    parser.add_argument("--K", type=int, help="inner proximal steps")
    parser.add_argument("--S", type=int, help="clients sampled per round")
    parser.add_argument("--N", type=int, help="total clients")
    parser.add_argument("--lambda", type=float, dest="lambda_", help="divergence weight")
    parser.add_argument("--alpha-m", type=float, dest="alpha_m", help="local/global step size")
    parser.add_argument("--alpha", type=float, help="inner solver step size")
    parser.add_argument("--eta", type=float, help="memorized-shift step")
    parser.add_argument("--eta-alpha", type=float, dest="eta_alpha", help="loss-gradient shift step")
    parser.add_argument("--beta", type=float, help="server mixing weight")
    parser.add_argument("--batch", type=int, help="mini-batch size")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--ft", action="store_const", const=True, default=None,
                        help="fine-tune personalized models before local testing")
    parser.add_argument("--am", action="store_const", const=True, default=None,
                        help="aggregation momentum (forces beta=2)")
    parser.add_argument("--no-deviations", action="store_const", const=False, default=None,
                        dest="track_deviations", help="skip per-class deviation tracking")
    parser.add_argument("--train-fraction", type=float, dest="train_fraction")
    parser.add_argument("--out", type=str, help="output root directory")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    mapping = {
        "dataset_idx": args.dataset_idx,
        "dataset_csv": args.dataset_csv,
        "synth": args.synth,
        "partition": args.partition,
        "method": args.method,
        "strategy": args.strategy,
        "model": args.model,
        "T": args.T,
        "R": args.R,
        "K": args.K,
        "S": args.S,
        "N": args.N,
        "lambda": args.lambda_,
        "alpha_m": args.alpha_m,
        "alpha": args.alpha,
        "eta": args.eta,
        "eta_alpha": args.eta_alpha,
        "beta": args.beta,
        "batch": args.batch,
        "seed": args.seed,
        "repeats": args.repeats,
        "ft": args.ft,
        "am": args.am,
        "track_deviations": args.track_deviations,
        "train_fraction": args.train_fraction,
        "out": args.out,
    }
    return {k: v for k, v in mapping.items() if v is not None}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = parse_config(args.config, _overrides_from_args(args))
        run_dir = run_experiment(spec)
    except DivergenceError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
