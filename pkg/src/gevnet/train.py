"""Configuration, training loop, evaluation and checkpoints."""
from __future__ import annotations

import configparser
import csv
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .architecture import PRESETS, Architecture, Network, parse_descriptor
from .container import read_container, write_container
from .data import SphericalDataset, load_datasets, mixup_batch
from .errors import ConfigError, FormatError, ShapeMismatchError
from .network import GeometryContext, cache_dir
from .optim import AdamState, adam_step, cross_entropy

CSV_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "wall_time")
CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    architecture: str = "gevnet2"
    level: int = 3
    pairing: str = ""  # empty: the preset's own choice
    epochs: int = 20
    batch_size: int = 128
    lr: float = 3e-4
    lr_decay: float = 0.9
    weight_decay: float = 0.0
    N: int = 101
    Q: int = 1000
    seed: int = 0
    precision: str = "float64"
    dataset: str = ""
    out_dir: str = "runs/default"
    mixup: bool = False
    mixup_alpha: float = 0.2
    n_train: int = 0  # 0: use the whole prepared split
    n_test: int = 0
    recalibrate: int = 1000  # training samples for exact end-of-epoch normalization statistics; 0 disables

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.recalibrate < 0:
            raise ConfigError("recalibrate must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.N < 3:
            raise ConfigError("N must be >= 3")
        if self.Q < 24:
            raise ConfigError("Q must be >= 24")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.pairing not in ("", "full", "diagonal"):
            raise ConfigError("pairing must be full or diagonal")
        if self.architecture not in PRESETS:
            parse_descriptor(self.architecture)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def arch(self) -> Architecture:
        over = {"level": self.level, "N": self.N}
        if self.pairing:
            over["pairing"] = self.pairing
        if self.architecture in PRESETS:
            return Architecture.preset(self.architecture, **over)
        return Architecture(self.architecture, **{"pairing": "full", **over})

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value: str):
    kind = _TYPES[key]
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        if kind in ("bool", bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value.strip()


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments, no sections) plus overrides."""
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if cp.sections() != ["config"]:
        raise ConfigError("config files take plain key = value lines, no sections")
    values = dict(cp["config"])
    values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, net: Network, cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {"kind": CHECKPOINT_KIND, "architecture": net.arch.to_dict(), "config": asdict(cfg) if cfg else None}
    meta.update(extra or {})
    write_container(path, meta, net.state_dict())


def load_checkpoint(path) -> tuple[Network, dict]:
    meta, arrays = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path}: not a checkpoint")
    arch = Architecture(**meta["architecture"])
    net = Network(arch)
    net.load_state_dict(arrays)
    return net, meta


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def _inputs(fields: np.ndarray, dtype) -> np.ndarray:
    return fields[:, :, :, None].astype(dtype, copy=False)


def predict(net: Network, ctx: GeometryContext, data: SphericalDataset, batch_size: int = 256, dtype=np.float64):
    if data.level != net.arch.level:
        raise ShapeMismatchError(f"dataset level {data.level} != network level {net.arch.level}")
    out = []
    for s in range(0, len(data), batch_size):
        out.append(net.forward(_inputs(data.fields[s : s + batch_size], dtype), ctx, train=False))
    return np.concatenate(out) if out else np.zeros((0, net.arch.num_classes))


def evaluate(net: Network, ctx: GeometryContext, data: SphericalDataset, batch_size: int = 256, dtype=np.float64):
    """Argmax accuracy and confusion matrix (rows: true class)."""
    logits = predict(net, ctx, data, batch_size, dtype)
    pred = logits.argmax(axis=1)
    true = data.hard_labels
    k = net.arch.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    acc = float(np.mean(pred == true)) if len(true) else 0.0
    return acc, confusion


def train(cfg: TrainConfig, train_set: SphericalDataset | None = None, test_set: SphericalDataset | None = None,
          ctx: GeometryContext | None = None, write: bool = True, log=None):
    """Run the seeded training loop; returns ``(network, history rows)``.

    Writes ``metrics.csv``, ``checkpoint.gevc`` and ``config.txt`` into
    ``cfg.out_dir`` when ``write`` is set.
    """
    if train_set is None or test_set is None:
        if not cfg.dataset:
            raise ConfigError("no dataset given")
        train_set, test_set, _ = load_datasets(cfg.dataset)
    if train_set.level != cfg.level or test_set.level != cfg.level:
        raise ConfigError(f"dataset level {train_set.level} does not match configured level {cfg.level}")
    if ctx is None:
        ctx = GeometryContext(cfg.Q, cache=cache_dir())
    elif ctx.Q != cfg.Q:
        raise ConfigError(f"geometry context built with Q={ctx.Q}, config asks for Q={cfg.Q}")
    if cfg.n_train:
        train_set = train_set.subset(np.arange(min(cfg.n_train, len(train_set))))
    if cfg.n_test:
        test_set = test_set.subset(np.arange(min(cfg.n_test, len(test_set))))

    dtype = cfg.dtype
    net = Network(cfg.arch()).init(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    history = []
    calib = None
    if cfg.recalibrate:
        pick = np.random.default_rng(cfg.seed + 2).permutation(len(train_set))[: cfg.recalibrate]
        calib = _inputs(train_set.fields[np.sort(pick)], dtype)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_set))
        losses, correct, seen = [], 0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x = train_set.fields[idx]
            y = train_set.labels[idx]
            if cfg.mixup:
                lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
                perm = rng.permutation(len(idx))
                x, y = mixup_batch(x, y, x[perm], y[perm], lam)
            net.zero_grad()
            logits = net.forward(_inputs(x, dtype), ctx, train=True)
            loss, g = cross_entropy(logits.astype(np.float64), y)
            net.backward(g.astype(dtype))
            params = {name: layer.params[k] for name, layer, k in net.named_params()}
            grads = {name: layer.grads[k].astype(np.float64) for name, layer, k in net.named_params()}
            adam_step(params, grads, state, lr, cfg.weight_decay)
            losses.append(loss * len(idx))
            correct += int(np.sum(logits.argmax(axis=1) == np.argmax(y, axis=1)))
            seen += len(idx)
        if calib is not None:
            net.recalibrate(calib, ctx)
        test_acc, _ = evaluate(net, ctx, test_set, dtype=dtype)
        row = {
            "epoch": epoch + 1,
            "train_loss": sum(losses) / seen,
            "train_acc": correct / seen,
            "test_acc": test_acc,
            "lr": lr,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(row)
        if log:
            log(row)
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", history)
        save_checkpoint(out / "checkpoint.gevc", net, cfg)
        (out / "config.txt").write_text(config_text(cfg))
    return net, history


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in r.items()})


# ---------------------------------------------------------------------------
# desk-scale ablation
# ---------------------------------------------------------------------------

DESK_SETTINGS = {"level": 3, "epochs": 10, "batch_size": 32, "lr": 1e-2, "N": 101, "Q": 1000}


def desk_ablation(train_set: SphericalDataset, test_set: SphericalDataset, seeds=(0, 1, 2, 3, 4),
                  models=("gevnet2", "genet2"), ctx: GeometryContext | None = None, log=None, **settings) -> dict:
    """Seeded runs of each model; reports per-run and mean test error."""
    kw = {**DESK_SETTINGS, **settings}
    ctx = ctx or GeometryContext(kw["Q"], cache=cache_dir())
    t0 = time.perf_counter()
    runs = {}
    for name in models:
        runs[name] = []
        for seed in seeds:
            cfg = TrainConfig(architecture=name, seed=seed, **kw)
            net, hist = train(cfg, train_set, test_set, ctx, write=False)
            row = {"seed": seed, "test_acc": hist[-1]["test_acc"], "params": net.num_params(),
                   "train_loss": [h["train_loss"] for h in hist]}
            runs[name].append(row)
            if log:
                log({"model": name, **row})
    summary = {
        name: {
            "params": rows[0]["params"],
            "mean_test_error": float(np.mean([1 - r["test_acc"] for r in rows])),
            "test_acc": [r["test_acc"] for r in rows],
            "train_loss": [r["train_loss"] for r in rows],
        }
        for name, rows in runs.items()
    }
    return {"schema_version": 1, "settings": kw, "seeds": list(seeds), "models": summary,
            "runtime_s": time.perf_counter() - t0}
