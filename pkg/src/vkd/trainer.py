"""Mini-batch Adam training under a cyclical KL weight, with early stopping."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .inference import predict, report_from_scores
from .model import ModelConfig, VkdModel, init_params
from .objectives import AnnealSchedule, beta_at, cvi_loss, vkd_loss
from .tensor import Tensor, backward

OBJECTIVES = ("vkd", "vkd_no_mi", "cvi")
CHECKPOINT_MAGIC = "vkdc 1"


class TrainingAborted(RuntimeError):
    """Raised when a batch loss is not finite."""

    def __init__(self, batch_index, breakdown):
        self.batch_index = batch_index
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at batch iteration {batch_index}: {breakdown}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    objective: str = "vkd"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 40
    mc_M: int = 1
    mc_L: int = 1
    anneal_R: float = 0.5
    anneal_C: int = 4
    anneal_g: str = "linear"
    early_stop_tolerance: float = 0.01
    patience: int = 5
    eval_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, max_epochs >= 0")
        if self.mc_M < 1 or self.mc_L < 1 or self.eval_samples < 1:
            raise ValueError("mc_M, mc_L and eval_samples must be >= 1")
        if not 0.0 < self.early_stop_tolerance < 1.0:
            raise ValueError("early_stop_tolerance must be in (0, 1)")


LOG_FIELDS = (
    "epoch", "t", "beta", "train_total", "train_image_ce", "train_text_ce",
    "train_kl", "val_image_ce", "val_macro_auc", "wall_ms",
)


@dataclass
class TrainLogRow:
    epoch: int
    t: int
    beta: float
    train_total: float
    train_image_ce: float
    train_text_ce: float
    train_kl: float
    val_image_ce: float
    val_macro_auc: float
    wall_ms: float

    def replay_key(self):
        """Every field except wall time, for determinism comparisons."""
        d = asdict(self)
        d.pop("wall_ms")
        return d


class Adam:
    """Bias-corrected Adam over a dict of named parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for n, p in self.params.items():
            g = p.grad
            m = self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    """Everything beyond the parameters needed to resume a run bit-for-bit."""

    epoch: int = 0
    best_auc: float = -math.inf
    best_epoch: int = 0
    ref_auc: float = -math.inf
    stale: int = 0
    stopped: int = 0
    best_params: dict = field(default_factory=dict)


def batches_per_epoch(n_train, batch_size):
    return math.ceil(n_train / batch_size)


class Trainer:
    def __init__(self, model, train_ds, val_ds, config, optimizer=None, state=None):
        if len(train_ds) == 0 or len(val_ds) == 0:
            raise ValueError("train: datasets must be nonempty")
        mc = model.config
        for name, ds in (("train", train_ds), ("val", val_ds)):
            if ds.image.shape[1] != mc.input_dim or ds.labels.shape[1] != mc.n_classes:
                raise ValueError(
                    f"{name} data dims (d={ds.image.shape[1]}, k={ds.labels.shape[1]}) do not match "
                    f"model (d={mc.input_dim}, k={mc.n_classes})"
                )
        self.model = model
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.config = config
        self.optimizer = optimizer or Adam(
            model.params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps
        )
        self.state = state or TrainState()
        self.T = batches_per_epoch(len(train_ds), config.batch_size)
        self.schedule = AnnealSchedule(
            T=max(self.T, config.anneal_C), C=config.anneal_C, R=config.anneal_R, g=config.anneal_g
        )

    @property
    def step(self):
        return self.optimizer.step_count

    @property
    def done(self):
        return bool(self.state.stopped) or self.state.epoch >= self.config.max_epochs

    def _loss(self, batch, beta, t):
        cfg = self.config
        key = (cfg.seed, t)
        if cfg.objective == "cvi":
            return cvi_loss(self.model, batch, cfg.mc_M, beta, key, train=True)
        text_weight = 0.0 if cfg.objective == "vkd_no_mi" else 1.0
        return vkd_loss(self.model, batch, cfg.mc_M, cfg.mc_L, beta, key, train=True, text_weight=text_weight)

    def run_epoch(self):
        cfg = self.config
        start = time.perf_counter()
        epoch = self.state.epoch + 1
        n = len(self.train_ds)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(4)
        beta = 0.0
        for b in range(self.T):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = self.train_ds.subset(idx)
            t = self.step + 1
            beta = beta_at(self.schedule, t)
            out = self._loss(batch, beta, t)
            parts = (out.total.item(), out.image_ce, out.text_ce, out.kl)
            if not all(math.isfinite(x) for x in parts):
                raise TrainingAborted(t, out.as_dict())
            self.optimizer.zero_grad()
            backward(out.total)
            self.optimizer.step()
            sums += np.array(parts) * len(idx)
        means = sums / n

        pred = predict(self.model, self.val_ds.image, cfg.eval_samples, cfg.seed)
        report = report_from_scores(pred.probs, self.val_ds.labels)
        p = np.clip(pred.probs, 1e-12, 1.0 - 1e-12)
        y = self.val_ds.labels
        val_ce = float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p)).sum(axis=1)))
        self._update_early_stopping(epoch, report.macro)
        self.state.epoch = epoch
        return TrainLogRow(
            epoch=epoch, t=self.step, beta=beta,
            train_total=means[0], train_image_ce=means[1], train_text_ce=means[2], train_kl=means[3],
            val_image_ce=val_ce, val_macro_auc=report.macro,
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )

    def _update_early_stopping(self, epoch, val_auc):
        s = self.state
        if val_auc > s.best_auc:
            s.best_auc = val_auc
            s.best_epoch = epoch
            s.best_params = self.model.state()
        # patience counts epochs without a relative improvement of `tolerance`
        if s.ref_auc == -math.inf or val_auc > s.ref_auc * (1.0 + self.config.early_stop_tolerance):
            s.ref_auc = val_auc
            s.stale = 0
        else:
            s.stale += 1
            if s.stale >= self.config.patience:
                s.stopped = 1

    def fit(self, until_epoch=None, log_path=None, on_epoch=None):
        log = []
        while not self.done and (until_epoch is None or self.state.epoch < until_epoch):
            row = self.run_epoch()
            log.append(row)
            if log_path is not None:
                append_log(log_path, row)
            if on_epoch is not None:
                on_epoch(row)
        return log

    def best_model(self):
        best = self.model.copy()
        if self.state.best_params:
            best.load_state(self.state.best_params)
        return best


def train(model, train_ds, val_ds, config, log_path=None):
    """Train ``model`` in place and return ``(best_model, log_rows)``.

    The returned model carries the parameters with the best validation macro
    AUC on the image-only path.
    """
    trainer = Trainer(model, train_ds, val_ds, config)
    if log_path is not None:
        start_log(log_path)
    log = trainer.fit(log_path=log_path)
    return trainer.best_model(), log


def train_from_scratch(model_config, train_ds, val_ds, config, log_path=None):
    return train(init_params(model_config, config.seed), train_ds, val_ds, config, log_path)


# ---------------------------------------------------------------------------
# CSV log
# ---------------------------------------------------------------------------


def _fmt(x):
    return str(x) if isinstance(x, (int, np.integer)) else "%.17g" % x


def start_log(path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(LOG_FIELDS) + "\n")


def append_log(path, row):
    with open(path, "a", encoding="utf-8", newline="") as fh:
        fh.write(",".join(_fmt(getattr(row, f)) for f in LOG_FIELDS) + "\n")


def log_to_csv(rows):
    buf = io.StringIO()
    buf.write(",".join(LOG_FIELDS) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(getattr(row, f)) for f in LOG_FIELDS) + "\n")
    return buf.getvalue()


def read_log(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            kwargs = {}
            for f in fields(TrainLogRow):
                kwargs[f.name] = int(rec[f.name]) if f.type == "int" else float(rec[f.name])
            rows.append(TrainLogRow(**kwargs))
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_STATE_KEYS = ("epoch", "best_auc", "best_epoch", "ref_auc", "stale", "stopped")


def _dataclass_pairs(obj):
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]


def _write_tensor(lines, name, arr):
    lines.append(f"{name} {arr.ndim} " + " ".join(str(s) for s in arr.shape))
    lines.append(" ".join("%.17g" % x for x in arr.ravel()))


def save_checkpoint(trainer, path):
    """Atomically write the model and everything needed to resume it, as text."""
    model = trainer.model
    pairs = _dataclass_pairs(model.config) + _dataclass_pairs(trainer.config)
    pairs += [(k, getattr(trainer.state, k)) for k in _STATE_KEYS]
    line2 = " ".join(f"{k}={_fmt(v) if isinstance(v, float) else v}" for k, v in pairs)
    lines = [CHECKPOINT_MAGIC, line2]
    for name, p in model.params.items():
        _write_tensor(lines, name, p.data)
    for name in model.params:
        _write_tensor(lines, f"{name}.m", trainer.optimizer.m[name])
    for name in model.params:
        _write_tensor(lines, f"{name}.v", trainer.optimizer.v[name])
    for name, arr in trainer.state.best_params.items():
        _write_tensor(lines, f"{name}.best", arr)
    lines.append(f"step={trainer.step}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _coerce(dc_field, raw):
    t = dc_field.type
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


@dataclass
class Checkpoint:
    model: VkdModel
    train_config: TrainConfig
    optimizer: Adam
    state: TrainState

    def trainer(self, train_ds, val_ds):
        return Trainer(self.model, train_ds, val_ds, self.train_config, self.optimizer, self.state)


def load_checkpoint(path, expected=None):
    """Read a checkpoint. ``expected`` (a ModelConfig) guards against
    loading weights of a different architecture."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        found = lines[0] if lines else "<empty>"
        raise CheckpointError(f"unsupported checkpoint version {found!r}, expected {CHECKPOINT_MAGIC!r}")
    raw = dict(part.split("=", 1) for part in lines[1].split())
    model_cfg = ModelConfig(**{f.name: _coerce(f, raw[f.name]) for f in fields(ModelConfig)})
    train_cfg = TrainConfig(**{f.name: _coerce(f, raw[f.name]) for f in fields(TrainConfig)})
    if expected is not None:
        for f in fields(ModelConfig):
            a, b = getattr(expected, f.name), getattr(model_cfg, f.name)
            if a != b:
                raise CheckpointError(f"checkpoint {f.name}={b} but configuration expects {f.name}={a}")
    shapes = model_cfg.param_shapes()
    tensors = {}
    i = 2
    while i < len(lines) and not lines[i].startswith("step="):
        head = lines[i].split()
        name, rank = head[0], int(head[1])
        shape = tuple(int(s) for s in head[2:2 + rank])
        values = np.array([float(x) for x in lines[i + 1].split()])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {values.size} values for shape {shape}")
        base = name.rsplit(".", 1)[0] if name.endswith((".m", ".v", ".best")) else name
        if base not in shapes:
            raise CheckpointError(f"unknown tensor {name!r}")
        if shapes[base] != shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape} vs config shape {shapes[base]}")
        tensors[name] = values.reshape(shape)
        i += 2
    if i >= len(lines):
        raise CheckpointError("missing final step= line")
    step = int(lines[i].split("=", 1)[1])
    missing = [n for n in shapes if n not in tensors]
    if missing:
        raise CheckpointError(f"missing tensors: {', '.join(missing)}")
    params = {n: Tensor(tensors[n], requires_grad=True, name=n) for n in shapes}
    model = VkdModel(model_cfg, params)
    opt = Adam(params, train_cfg.lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    for n in shapes:
        opt.m[n] = tensors.get(f"{n}.m", np.zeros(shapes[n]))
        opt.v[n] = tensors.get(f"{n}.v", np.zeros(shapes[n]))
    opt.step_count = step
    state = TrainState(
        epoch=int(raw["epoch"]), best_auc=float(raw["best_auc"]), best_epoch=int(raw["best_epoch"]),
        ref_auc=float(raw["ref_auc"]), stale=int(raw["stale"]), stopped=int(raw["stopped"]),
        best_params={n: tensors[f"{n}.best"] for n in shapes if f"{n}.best" in tensors},
    )
    return Checkpoint(model, train_cfg, opt, state)


def save_model(model, path, train_config=None):
    """Checkpoint with fresh optimizer state, e.g. for a selected best model."""
    config = train_config or TrainConfig()
    dummy = Trainer.__new__(Trainer)
    dummy.model = model
    dummy.config = config
    dummy.optimizer = Adam(model.params)
    dummy.state = TrainState()
    save_checkpoint(dummy, path)
