"""Adversarial training: config, methods, regularizers, schedules, metrics.

Determinism contract: every random draw (shuffling, random starts, penalty
noise, eval attacks) uses an rng derived statelessly from (config seed, role,
epoch, batch), so a run is bit-reproducible and any logged quantity can be
recomputed from the matching checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from fractions import Fraction

import numpy as np

from . import attacks, datasets, models
from . import engine as eg


class ConfigError(Exception):
    """Invalid or inconsistent training configuration."""


def derive_seed(*parts) -> int:
    """Stateless seed derivation; order-sensitive, collision-resistant."""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def parse_ratio(value) -> float:
    """Accept exact rationals like "10/255" (kept verbatim in configs) or
    plain numbers; returns the float value."""
    if isinstance(value, str):
        try:
            return float(Fraction(value))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"cannot parse number {value!r}: {e}") from None
    if isinstance(value, (int, float)):
        return float(value)
    raise ConfigError(f"expected number or fraction string, got {type(value).__name__}")


# method name -> (per-batch attack, second-order penalty)
METHODS = {
    "standard": (None, None),
    "fgsm_at": ("fgsm", None),
    "fgsm_rs_at": ("fgsm_rs", None),
    "pgd_at": ("pgd", None),
    "free_at": ("free", None),
    "fgsm_gradalign": ("fgsm", "gradalign"),
    "pgd_gradalign": ("pgd", "gradalign"),
    "fgsm_gradnorm": ("fgsm", "gradnorm"),
    "fgsm_cure": ("fgsm", "cure"),
}

_METHOD_KEYS = {"name", "alpha", "steps", "m_replay", "lambda", "stop_grad_second_arg"}

_CONFIG_KEYS = {
    "model": "cnn4",
    "model_options": {},
    "init": "kaiming",
    "dataset": "surrogate",
    "dataset_options": {},
    "method": {"name": "fgsm_at"},
    "eps": "8/255",
    "eps_warmup_epochs": 0,
    "epochs": 30,
    "batch_size": 128,
    "seed": 0,
    "optimizer": "adam",
    "lr_max": 0.003,
    "momentum": 0.9,
    "lr_schedule": "cyclic",
    "peak_frac": 0.4,
    "augment": "none",
    "early_stop": True,
    "eval_every": 1,
    "eval_points": 512,
    "track_history": True,
}


def gradalign_lambda_default(eps: float) -> float:
    """Log-linear interpolation between the tuned anchors lambda(8/255)=0.2
    and lambda(16/255)=2.0; extrapolates outside, floored at 0.01."""
    e0, e1 = 8.0 / 255.0, 16.0 / 255.0
    t = (eps - e0) / (e1 - e0)
    return max(float(np.exp(np.log(0.2) + t * (np.log(2.0) - np.log(0.2)))), 0.01)


@dataclass
class TrainConfig:
    model: str = "cnn4"
    model_options: dict = field(default_factory=dict)
    init: str = "kaiming"
    dataset: str = "surrogate"
    dataset_options: dict = field(default_factory=dict)
    method: dict = field(default_factory=lambda: {"name": "fgsm_at"})
    eps: str | float = "8/255"
    eps_warmup_epochs: int = 0
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    optimizer: str = "adam"
    lr_max: float = 0.003
    momentum: float = 0.9
    lr_schedule: str = "cyclic"
    peak_frac: float = 0.4
    augment: str = "none"
    early_stop: bool = True
    eval_every: int = 1
    eval_points: int = 512
    track_history: bool = True

    def __post_init__(self):
        self.method = dict(self.method)
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(_CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; "
                              f"valid keys: {sorted(_CONFIG_KEYS)}")
        return cls(**d)

    def validate(self) -> None:
        name = self.method.get("name")
        if name not in METHODS:
            raise ConfigError(f"unknown method {name!r}; valid: {sorted(METHODS)}")
        bad = set(self.method) - _METHOD_KEYS
        if bad:
            raise ConfigError(f"unknown method keys {sorted(bad)}; "
                              f"valid keys: {sorted(_METHOD_KEYS)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eps_value() < 0:
            raise ConfigError("eps must be >= 0")
        if self.lam() < 0:
            raise ConfigError("lambda must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cyclic", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if name == "free_at" and int(self.method.get("m_replay", 8)) < 1:
            raise ConfigError("m_replay must be >= 1")
        if name.startswith("pgd") and int(self.method.get("steps", 10)) < 1:
            raise ConfigError("steps must be >= 1")
        if name in ("fgsm_gradnorm", "fgsm_cure") and "lambda" not in self.method:
            raise ConfigError(f"{name} requires method.lambda")
        if self.method.get("alpha") is not None:
            a = parse_ratio(self.method["alpha"])
            if name == "fgsm_rs_at" and not (0.0 <= a <= 2.0 * self.eps_value()):
                raise ConfigError("fgsm_rs_at alpha must lie in [0, 2*eps]")

    # --- derived values ---

    def eps_value(self) -> float:
        return parse_ratio(self.eps)

    def eps_at(self, epoch: int) -> float:
        """Linear warmup over the first eps_warmup_epochs epochs."""
        w = self.eps_warmup_epochs
        scale = min(1.0, (epoch + 1) / w) if w > 0 else 1.0
        return self.eps_value() * scale

    def alpha_at(self, epoch: int) -> float | None:
        """Explicit step size, scaled with the warmup so alpha/eps is fixed."""
        raw = self.method.get("alpha")
        if raw is None:
            return None
        a = parse_ratio(raw)
        eps = self.eps_value()
        return a * (self.eps_at(epoch) / eps) if eps > 0 else a

    def lam(self) -> float:
        name = self.method.get("name", "")
        if METHODS.get(name, (None, None))[1] is None:
            return 0.0
        if "lambda" in self.method:
            return parse_ratio(self.method["lambda"])
        return gradalign_lambda_default(self.eps_value())

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def build_model(config: TrainConfig):
    opts = dict(config.model_options)
    if config.model == "cnn4":
        base = dict(in_channels=3, side=32, filters=4, kernel=3, stride=2,
                    padding=1, num_classes=10)
        base.update(opts)
        return models.SingleLayerCNN(**base)
    if config.model == "smallconv":
        base = dict(in_channels=3, side=32, num_classes=10)
        base.update(opts)
        return models.SmallConvNet(**base)
    raise ConfigError(f"unknown model preset {config.model!r}; valid: cnn4, smallconv")


# --- regularizers (second-order: differentiable w.r.t. parameters) ---

def _tracked_input_grad(model, params, x_arr, y):
    """Input gradient as a graph node so downstream ops stay differentiable
    in the parameters (requires an active higher-order graph for that)."""
    xt = eg.Tensor(x_arr, requires_grad=True)
    total = eg.tsum(model.loss_per_example(params, xt, y))
    return eg.backward(total, [xt])[xt]


def grad_align_penalty(model, params, x, y, eps, seed=None, eta=None,
                       stop_grad_second_arg=False):
    """Batch mean of 1 - cos(grad at x, grad at x + eta), eta ~ U([-eps,eps]^d),
    one draw per example. Differentiable in the parameters.

    ``eta`` overrides the draw (tests pin it); no box clipping on x + eta.
    """
    x = np.asarray(x, dtype=np.float64)
    if eta is None:
        eta = np.random.default_rng(seed).uniform(-eps, eps, size=x.shape)
    g0 = _tracked_input_grad(model, params, x, y)
    g1 = _tracked_input_grad(model, params, x + eta, y)
    if stop_grad_second_arg:
        g1 = g1.detach()
    cos = eg.cosine_similarity(eg.flatten(g0), eg.flatten(g1), axis=1)
    return eg.mean(eg.sub(1.0, cos))


def grad_norm_penalty(model, params, x, y):
    """Batch mean of the squared l2 norm of the input gradient."""
    g = _tracked_input_grad(model, params, np.asarray(x, dtype=np.float64), y)
    return eg.mean(eg.tsum(eg.square(eg.flatten(g)), axis=1))


def fgsm_direction(model, params, x, y, eps: float) -> np.ndarray:
    """eps * sign(grad): the raw single-step direction, as a constant
    (gradient flow stops at the sign)."""
    with eg.Graph():
        g = _tracked_input_grad(model, params, np.asarray(x, dtype=np.float64), y)
    return eps * np.sign(g.data)


def cure_penalty(model, params, x, y, eps, delta=None):
    """Batch mean of ||grad at x+delta - grad at x||^2 with delta the fixed
    single-step direction (a constant during differentiation)."""
    x = np.asarray(x, dtype=np.float64)
    if delta is None:
        delta = fgsm_direction(model, params, x, y, eps)
    g0 = _tracked_input_grad(model, params, x, y)
    g1 = _tracked_input_grad(model, params, x + delta, y)
    diff = eg.flatten(eg.sub(g1, g0))
    return eg.mean(eg.tsum(eg.square(diff), axis=1))


def _penalty_term(kind, model, params, x, y, eps, seed, method):
    if kind == "gradalign":
        return grad_align_penalty(model, params, x, y, eps, seed=seed,
                                  stop_grad_second_arg=bool(
                                      method.get("stop_grad_second_arg", False)))
    if kind == "gradnorm":
        return grad_norm_penalty(model, params, x, y)
    if kind == "cure":
        return cure_penalty(model, params, x, y, eps)
    raise ConfigError(f"unknown penalty {kind!r}")


# --- optimizers ---

class SGD:
    def __init__(self, params: models.ParamSet, momentum: float = 0.9):
        self.momentum = momentum
        self.buf = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, params: models.ParamSet, grads: dict, lr: float) -> None:
        for name, t in params.items():
            b = self.buf[name]
            b *= self.momentum
            b += grads[name]
            t.data -= lr * b

    def state_arrays(self) -> dict:
        return {f"opt.buf.{n}": v.copy() for n, v in self.buf.items()}

    def load_state(self, arrays: dict) -> None:
        for n in self.buf:
            self.buf[n] = np.array(arrays[f"opt.buf.{n}"])


class Adam:
    def __init__(self, params: models.ParamSet, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: models.ParamSet, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {"opt.t": np.array(float(self.t))}
        out.update({f"opt.m.{n}": v.copy() for n, v in self.m.items()})
        out.update({f"opt.v.{n}": v.copy() for n, v in self.v.items()})
        return out

    def load_state(self, arrays: dict) -> None:
        self.t = int(arrays["opt.t"])
        for n in self.m:
            self.m[n] = np.array(arrays[f"opt.m.{n}"])
            self.v[n] = np.array(arrays[f"opt.v.{n}"])


def make_optimizer(config: TrainConfig, params: models.ParamSet):
    if config.optimizer == "adam":
        return Adam(params)
    return SGD(params, momentum=config.momentum)


# --- learning-rate schedules ---

def cyclic_lr(max_lr: float, total_steps: int, peak_frac: float = 0.4):
    """Triangular schedule on [0, total_steps]: 0 at both ends, max_lr at
    peak_frac of the way through."""
    total = max(total_steps, 1)
    peak = peak_frac * total

    def lr(step: int) -> float:
        s = min(max(step, 0), total)
        if peak <= 0:
            return max_lr * (total - s) / total
        if s <= peak:
            return max_lr * s / peak
        if peak >= total:
            return max_lr
        return max_lr * (total - s) / (total - peak)

    return lr


def make_schedule(config: TrainConfig, total_steps: int):
    if config.lr_schedule == "constant":
        return lambda step: config.lr_max
    return cyclic_lr(config.lr_max, total_steps, config.peak_frac)


# --- metric log ---

SCHEMA_TAG = "coat-metrics/1"
COLUMNS = ["epoch", "lr", "train_loss", "train_clean_acc", "train_fgsm_acc",
           "train_pgd_acc", "test_clean_acc", "test_pgd_acc", "grad_alignment",
           "cos_fgsm_pgd", "omega_value", "wallclock_s",
           "test_fgsm_acc", "loss_ratio_pgd_fgsm"]


class MetricLogError(Exception):
    pass


class MetricLog:
    """Per-epoch rows; CSV serialization with a versioned schema line."""

    def __init__(self, rows: list[dict] | None = None):
        self.rows: list[dict] = []
        for r in rows or []:
            self.append(r)

    def append(self, row: dict) -> dict:
        bad = set(row) - set(COLUMNS)
        if bad:
            raise MetricLogError(f"unknown metric columns {sorted(bad)}")
        full = {c: row.get(c, float("nan")) for c in COLUMNS}
        full["epoch"] = int(full["epoch"])
        self.rows.append(full)
        return full

    def column(self, name: str) -> np.ndarray:
        if name not in COLUMNS:
            raise MetricLogError(f"unknown column {name!r}; have {COLUMNS}")
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @staticmethod
    def header_lines() -> list[str]:
        return [f"# schema: {SCHEMA_TAG}", ",".join(COLUMNS)]

    @staticmethod
    def format_row(row: dict) -> str:
        cells = []
        for c in COLUMNS:
            v = row[c]
            cells.append(str(int(v)) if c == "epoch" else repr(float(v)))
        return ",".join(cells)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.header_lines():
                fh.write(line + "\n")
            for row in self.rows:
                fh.write(self.format_row(row) + "\n")

    @classmethod
    def read_csv(cls, path) -> "MetricLog":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != f"# schema: {SCHEMA_TAG}":
            raise MetricLogError(f"{path}: missing schema line '{SCHEMA_TAG}'")
        if len(lines) < 2 or lines[1].split(",") != COLUMNS:
            raise MetricLogError(f"{path}: column mismatch; expected {COLUMNS}")
        log = cls()
        for ln in lines[2:]:
            if not ln:
                continue
            vals = ln.split(",")
            if len(vals) != len(COLUMNS):
                raise MetricLogError(f"{path}: bad row width {len(vals)}")
            log.append({c: float(v) for c, v in zip(COLUMNS, vals)})
        return log

    def to_json(self) -> str:
        return json.dumps({"schema": SCHEMA_TAG, "rows": self.rows}, indent=1)


@dataclass
class EarlyStopState:
    """Tracks the best train-subset PGD accuracy; best value never decreases."""
    best_acc: float = -1.0
    best_epoch: int = -1
    best_arrays: dict | None = None

    def update(self, epoch: int, acc: float, params: models.ParamSet) -> bool:
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_epoch = epoch
            self.best_arrays = params.to_arrays()
            return True
        return False


# --- the training loop ---

@dataclass
class TrainResult:
    config: TrainConfig
    model: object
    final_arrays: dict
    best_arrays: dict
    best_epoch: int
    best_train_pgd_acc: float
    log: MetricLog
    history: list[dict]          # per-epoch parameter snapshots (may be empty)
    aborted: bool = False
    abort_epoch: int = -1


def _batch_seed(cfg_seed: int, role: str, epoch: int, batch: int) -> int:
    return derive_seed(cfg_seed, role, epoch, batch)


def _train_delta(attack, model, params, x, y, eps, alpha, cfg, epoch, batch):
    """The per-batch adversarial perturbation for the configured method."""
    if attack is None or eps == 0.0:
        return np.zeros_like(x)
    seed = _batch_seed(cfg.seed, "attack", epoch, batch)
    if attack == "fgsm":
        return attacks.fgsm(model, params, x, y, eps, alpha=alpha).delta
    if attack == "fgsm_rs":
        return attacks.fgsm_rs(model, params, x, y, eps, alpha=alpha, seed=seed).delta
    if attack == "pgd":
        steps = int(cfg.method.get("steps", 10))
        return attacks.pgd(model, params, x, y, eps, steps=steps, alpha=alpha,
                           restarts=1, init="uniform", zero_first_restart=False,
                           seed=seed).delta
    raise ConfigError(f"unknown attack {attack!r}")


def _param_grads(loss_t, params: models.ParamSet) -> dict:
    gmap = eg.backward(loss_t, list(params.tensors()))
    return {n: gmap[t].data for n, t in params.items()}


def _step_plain(model, params, opt, lr, x, y, delta):
    with eg.Graph():
        loss_t = model.loss(params, x + delta, y)
        grads = _param_grads(loss_t, params)
    opt.step(params, grads, lr)


def train(config, data=None, data_dir=None, metrics_path=None,
          checkpoint_dir=None, start_epoch: int = 0,
          init_arrays: dict | None = None, opt_state: dict | None = None,
          prior_rows: list | None = None, progress=None) -> TrainResult:
    """Run the configured training; returns final and best parameters plus the
    metric log. On a non-finite loss the run aborts and the parameters roll
    back to the last finite epoch snapshot.
    """
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(config)
    model = build_model(cfg)
    if data is None:
        data = datasets.load_by_name(cfg.dataset, cfg.dataset_options, data_dir)
    train_ds, test_ds = data

    params = model.init_params(seed=cfg.seed, scheme=cfg.init)
    if init_arrays is not None:
        params = model.params_from_arrays(init_arrays)

    attack, penalty = METHODS[cfg.method["name"]]
    lam = cfg.lam()
    m_replay = int(cfg.method.get("m_replay", 8)) if attack == "free" else 1
    n_epochs = max(1, cfg.epochs // m_replay) if attack == "free" else cfg.epochs

    plan = datasets.BatchPlan(len(train_ds), cfg.batch_size, seed=cfg.seed,
                              augment=cfg.augment)
    nb = plan.batches_per_epoch()
    total_steps = n_epochs * nb * m_replay
    sched = make_schedule(cfg, total_steps)
    opt = make_optimizer(cfg, params)
    if opt_state is not None:
        opt.load_state(opt_state)

    n_tr = min(cfg.eval_points, len(train_ds))
    n_te = min(cfg.eval_points, len(test_ds))
    tr_eval = datasets.subsample(train_ds, n_tr, seed=derive_seed(cfg.seed, "evaltr"))
    te_eval = datasets.subsample(test_ds, n_te, seed=derive_seed(cfg.seed, "evalte"))

    log = MetricLog(prior_rows)
    writer = None
    if metrics_path is not None:
        fresh = start_epoch == 0
        writer = open(metrics_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            for line in MetricLog.header_lines():
                writer.write(line + "\n")
            writer.flush()

    es = EarlyStopState()
    history: list[dict] = []
    last_good = params.to_arrays()
    co_event = None
    aborted = False
    abort_epoch = -1
    step = start_epoch * nb * m_replay

    try:
        for epoch in range(start_epoch, n_epochs):
            t0 = time.perf_counter()
            eps_e = cfg.eps_at(epoch)
            alpha_e = cfg.alpha_at(epoch)
            lr_first = sched(step)
            try:
                for b, (xb, yb) in enumerate(plan.iter_epoch(train_ds, epoch)):
                    if attack == "free":
                        step = _free_batch(model, params, opt, sched, step, xb, yb,
                                           eps_e, m_replay)
                        continue
                    lr = sched(step)
                    delta = _train_delta(attack, model, params, xb, yb, eps_e,
                                         alpha_e, cfg, epoch, b)
                    if penalty is not None and lam > 0.0:
                        eta_seed = _batch_seed(cfg.seed, "eta", epoch, b)
                        with eg.Graph(eg.HIGHER_ORDER):
                            loss_t = model.loss(params, xb + delta, yb)
                            pen = _penalty_term(penalty, model, params, xb, yb,
                                                eps_e, eta_seed, cfg.method)
                            total = eg.add(loss_t, eg.mul(lam, pen))
                            grads = eg.grad_of_grad(total, dict(params.items()))
                        opt.step(params, {n: g.data for n, g in grads.items()}, lr)
                    else:
                        _step_plain(model, params, opt, lr, xb, yb, delta)
                    step += 1
            except eg.NumericFault:
                aborted = True
                abort_epoch = epoch
                params = model.params_from_arrays(last_good)

            heavy = (epoch % max(cfg.eval_every, 1) == 0) or epoch == n_epochs - 1
            if aborted:
                heavy = False
            row = {"epoch": epoch, "lr": lr_first}
            if heavy:
                row.update(epoch_metrics(model, params, cfg, tr_eval, te_eval,
                                         eps_e, epoch))
            row["wallclock_s"] = time.perf_counter() - t0
            full = log.append(row)
            if writer is not None:
                writer.write(MetricLog.format_row(full) + "\n")
                writer.flush()
            if cfg.track_history:
                history.append(params.to_arrays())
            if heavy and np.isfinite(full["train_pgd_acc"]):
                es.update(epoch, full["train_pgd_acc"], params)
            if not aborted:
                last_good = params.to_arrays()
            if checkpoint_dir is not None:
                extra = opt.state_arrays()
                extra["epoch"] = np.array(float(epoch))
                models.save_checkpoint(f"{checkpoint_dir}/last.ckpt", params,
                                       config=cfg.to_dict(), extra=extra)
                if co_event is None and heavy:
                    from . import diagnostics
                    co_event = diagnostics.detect_co(log.rows)
                    # epoch match keeps a resumed run from re-saving an old
                    # event with current (later) weights
                    if co_event is not None and co_event.epoch == epoch:
                        # weights right as the collapse completes; the rolling
                        # last.ckpt soon overwrites this state otherwise
                        models.save_checkpoint(
                            f"{checkpoint_dir}/co_event.ckpt", params,
                            config=cfg.to_dict(),
                            extra={"epoch": np.array(float(epoch))})
            if progress is not None:
                progress(epoch, full)
            if aborted:
                break
    finally:
        if writer is not None:
            writer.close()

    final_arrays = params.to_arrays()
    if not cfg.early_stop or es.best_arrays is None:
        best_arrays, best_epoch, best_acc = final_arrays, len(log.rows) - 1, float("nan")
    else:
        best_arrays, best_epoch, best_acc = es.best_arrays, es.best_epoch, es.best_acc
    return TrainResult(cfg, model, final_arrays, best_arrays, best_epoch,
                       best_acc, log, history, aborted, abort_epoch)


def _free_batch(model, params, opt, sched, step, x, y, eps, m_replay) -> int:
    """One minibatch of free adversarial training: delta persists across the
    m replays (reset to zero per batch); each replay moves delta by the full
    eps*sign step and then takes an optimizer step at the updated point.
    m_replay=1 therefore coincides with zero-init single-step AT at alpha=eps.
    """
    delta = np.zeros_like(x)
    for _ in range(m_replay):
        if eps > 0.0:
            g = attacks.input_gradient(model, params, x + delta, y)
            delta = np.clip(delta + eps * np.sign(g), -eps, eps)
            delta = np.clip(x + delta, 0.0, 1.0) - x
        with eg.Graph():
            loss_t = model.loss(params, x + delta, y)
            grads = _param_grads(loss_t, params)
        opt.step(params, grads, sched(step))
        step += 1
    return step


def free_at_epoch(model, params, opt, batch_iter, eps: float, m_replay: int,
                  sched=None, step: int = 0) -> int:
    """One epoch of free adversarial training over an (x, y) iterable;
    returns the updated step count. Exposed for direct accounting tests."""
    if m_replay < 1:
        raise ConfigError("m_replay must be >= 1")
    if sched is None:
        sched = lambda s: 0.0
    for x, y in batch_iter:
        step = _free_batch(model, params, opt, sched, step, x, y, eps, m_replay)
    return step


# --- per-epoch evaluation ---

LOG_PGD_STEPS = 10
COS_POINTS = 128


def _acc_from(hits: np.ndarray) -> float:
    return float(1.0 - hits.mean())


def training_objective(model, params, cfg: TrainConfig, x, y, eps_e: float,
                       epoch: int) -> float:
    """The logged objective: cross-entropy at the method's perturbation plus
    lambda times the penalty, all recomputable from a checkpoint since every
    random draw is derived from (seed, epoch)."""
    attack, penalty = METHODS[cfg.method["name"]]
    seed = derive_seed(cfg.seed, "objective", epoch)
    if attack == "free" or attack is None or eps_e == 0.0:
        delta = np.zeros_like(x)
        if attack == "free" and eps_e > 0.0:
            delta = attacks.fgsm(model, params, x, y, eps_e).delta
    else:
        alpha_e = cfg.alpha_at(epoch)
        delta = _train_delta(attack, model, params, x, y, eps_e, alpha_e, cfg,
                             epoch, -1) if attack != "fgsm_rs" else None
        if attack == "fgsm_rs":
            delta = attacks.fgsm_rs(model, params, x, y, eps_e, alpha=alpha_e,
                                    seed=seed).delta
    with eg.no_grad():
        value = float(model.loss(params, x + delta, y).data)
    lam = cfg.lam()
    if penalty is not None and lam > 0.0:
        with eg.Graph(eg.HIGHER_ORDER):
            pen = _penalty_term(penalty, model, params, x, y, eps_e,
                                derive_seed(cfg.seed, "objective-eta", epoch),
                                cfg.method)
            value += lam * float(pen.data)
    return value


def epoch_metrics(model, params, cfg: TrainConfig, tr_eval, te_eval,
                  eps_e: float, epoch: int) -> dict:
    """Evaluation block for one epoch; all attacks run at the nominal eps
    (the objective uses the warmed-up eps_e)."""
    from . import diagnostics  # local import: diagnostics depends on attacks only

    eps = cfg.eps_value()
    seed = derive_seed(cfg.seed, "eval", epoch)
    tr_x, tr_y = tr_eval.images, tr_eval.labels
    te_x, te_y = te_eval.images, te_eval.labels

    out = {"train_loss": training_objective(model, params, cfg, tr_x, tr_y,
                                            eps_e, epoch)}
    out["train_clean_acc"] = model.accuracy(params, tr_x, tr_y)
    out["test_clean_acc"] = model.accuracy(params, te_x, te_y)
    if eps == 0.0:
        for k in ("train_fgsm_acc", "train_pgd_acc", "test_fgsm_acc",
                  "test_pgd_acc"):
            out[k] = out[k.split("_")[0] + "_clean_acc"]
        out.update(grad_alignment=1.0, cos_fgsm_pgd=1.0, omega_value=0.0,
                   loss_ratio_pgd_fgsm=1.0)
        return out

    tr_fgsm = attacks.fgsm(model, params, tr_x, tr_y, eps)
    out["train_fgsm_acc"] = _acc_from(tr_fgsm.misclassified)
    tr_pgd = attacks.pgd(model, params, tr_x, tr_y, eps, steps=LOG_PGD_STEPS,
                         restarts=1, init="uniform", zero_first_restart=False,
                         seed=derive_seed(seed, "trpgd"))
    out["train_pgd_acc"] = _acc_from(tr_pgd.misclassified)

    te_fgsm = attacks.fgsm(model, params, te_x, te_y, eps)
    out["test_fgsm_acc"] = _acc_from(te_fgsm.misclassified)
    te_pgd = attacks.pgd(model, params, te_x, te_y, eps, steps=LOG_PGD_STEPS,
                         restarts=1, init="uniform", zero_first_restart=False,
                         seed=derive_seed(seed, "tepgd"))
    out["test_pgd_acc"] = _acc_from(te_pgd.misclassified)
    out["loss_ratio_pgd_fgsm"] = float(te_pgd.loss.mean() / max(te_fgsm.loss.mean(),
                                                                1e-12))

    est = diagnostics.gradient_alignment(model, params, te_eval, eps,
                                         n_points=len(te_eval), n_eta=1,
                                         seed=derive_seed(seed, "align"))
    out["grad_alignment"] = est.mean
    out["omega_value"] = 1.0 - est.mean

    n_cos = min(COS_POINTS, len(te_eval))
    out["cos_fgsm_pgd"] = diagnostics.attack_direction_cosine(
        model, params, te_eval, eps, seed=derive_seed(seed, "coss"),
        n_points=n_cos, pgd_kwargs=dict(steps=LOG_PGD_STEPS, restarts=1,
                                        init="uniform", zero_first_restart=False))
    return out
