"""Training loop, evaluation, checkpoint selection and loss ablations."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .data import DomainData, split_train_val
from .errors import ConfigError, QueueError
from .nets import (
    MLPSpec,
    ModelBundle,
    classify,
    forward_features,
    init_bundle,
    load_bundle,
    momentum_update,
    save_bundle,
)
from .queue import KnowledgeQueue, new_queue

log = logging.getLogger(__name__)

LOSS_NAMES = ("teach", "learn", "cs")
PREDICTION_MODES = ("classifier", "frontdoor")

# name -> (teach, learn, cs)
ABLATIONS = {
    "wo_teach": (False, True, True),
    "wo_learn": (True, False, True),
    "wo_cs": (True, True, False),
    "teach_only": (True, False, False),
    "full": (True, True, True),
}


def parse_loss_flags(value) -> tuple[bool, bool, bool]:
    """Accepts three booleans, or a comma list of loss names (``"teach,cs"``, ``"all"``)."""
    if isinstance(value, str):
        names = [v.strip() for v in value.split(",") if v.strip()]
        if names in (["all"], ["full"]):
            return (True, True, True)
        bad = [n for n in names if n not in LOSS_NAMES]
        if bad:
            raise ConfigError(f"unknown loss name(s) {bad}; choose from {LOSS_NAMES}", "loss_flags")
        return tuple(n in names for n in LOSS_NAMES)
    flags = tuple(bool(v) for v in value)
    if len(flags) != 3:
        raise ConfigError("need exactly three flags (teach, learn, cs)", "loss_flags")
    return flags


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    alpha: float = 0.999
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size_per_domain: int = 32
    queue_multiple: int = 4
    loss_flags: tuple[bool, bool, bool] = (True, True, True)
    prediction_mode: str = "frontdoor"
    val_fraction: float = 0.2
    hidden_widths: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss_flags", parse_loss_flags(self.loss_flags))
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.tau > 0:
            raise ConfigError(f"must be positive, got {self.tau}", "tau")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.alpha}", "alpha")
        if not self.learning_rate > 0:
            raise ConfigError(f"must be positive, got {self.learning_rate}", "learning_rate")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.epochs}", "epochs")
        for name in ("batch_size_per_domain", "queue_multiple", "feature_dim"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ConfigError(f"must be a positive integer, got {v}", name)
        if self.feature_dim % 2:
            raise ConfigError("must be even (the projector halves it)", "feature_dim")
        if any(w <= 0 for w in self.hidden_widths):
            raise ConfigError("widths must be positive", "hidden_widths")
        if not any(self.loss_flags):
            raise ConfigError("at least one loss must be enabled", "loss_flags")
        if self.prediction_mode not in PREDICTION_MODES:
            raise ConfigError(f"must be one of {PREDICTION_MODES}", "prediction_mode")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.val_fraction}", "val_fraction")

    @property
    def effective_prediction_mode(self) -> str:
        # H and G only learn through the front-door loss; without it the
        # front-door head is untrained and the classifier is the model.
        if self.prediction_mode == "frontdoor" and not self.loss_flags[1]:
            return "classifier"
        return self.prediction_mode

    def mlp_spec(self, in_dim: int) -> MLPSpec:
        return MLPSpec((in_dim, *self.hidden_widths, self.feature_dim))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_flags"] = list(self.loss_flags)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", unknown[0])
        return cls(**raw)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def load_config(path: str | Path) -> TrainConfig:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return TrainConfig.from_dict(raw)


@dataclass
class MetricsRecord:
    epoch: int
    l_teach: dict[int, float]
    l_learn: dict[int, float]
    l_cs: dict[int, float]
    l_all: float
    val_accuracy: float
    test_accuracy: float
    clamp_events: int

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("l_teach", "l_learn", "l_cs"):
            d[k] = {str(dom): v for dom, v in d[k].items()}
        return d


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    queue: KnowledgeQueue
    steps: int = 0


@dataclass
class StepResult:
    l_teach: dict[int, float]
    l_learn: dict[int, float]
    l_cs: dict[int, float]
    l_all: float
    clamp_events: int


def init_state(config: TrainConfig, in_dim: int, num_classes: int, num_source_domains: int) -> TrainState:
    bundle = init_bundle(config.mlp_spec(in_dim), num_classes, config.seed)
    queue = new_queue(config.batch_size_per_domain, num_source_domains, config.feature_dim,
                      config.queue_multiple)
    return TrainState(config, bundle, queue)


def domain_losses(state: TrainState, Z: Tensor, y: np.ndarray, snapshot) -> tuple[losses.LossBreakdown, int]:
    """Enabled CCM losses for one domain's teacher features ``Z``.

    ``snapshot`` is the pre-push queue ``(Z_Q, Y_Q)`` or ``None`` when the
    queue is still empty, in which case the queue-based terms are skipped.
    """
    cfg, b = state.config, state.bundle
    teach_on, learn_on, cs_on = cfg.loss_flags
    t_teach = t_learn = t_cs = None
    clamps = 0
    if teach_on:
        t_teach = losses.l_teach(classify(b.C, Z), y)
    if snapshot is not None:
        zq, yq = snapshot
        if learn_on:
            px = losses.p_x(Z, cfg.tau, training=True)
            pzx = losses.p_z_given_x(zq, Z, cfg.tau)
            pyzx = losses.p_y_given_zx(b.H, b.G, zq, Z)
            fd = losses.front_door_batch(px, pzx, pyzx)
            t_learn, clamps = losses.l_learn(fd, y)
        if cs_on:
            t_cs = losses.l_cs(Z, zq, yq, y, cfg.tau)
    return losses.l_all((t_teach, t_learn, t_cs), cfg.loss_flags), clamps


def train_step(state: TrainState, batches: Sequence[tuple[int, np.ndarray, np.ndarray]]) -> StepResult:
    """One pass of the per-domain loop over a batch split by domain.

    ``batches`` holds ``(domain_id, X, y)`` per source domain. Losses use the
    queue as it stood before this step; student features are pushed only
    after the parameter update, in domain order.
    """
    if not batches:
        raise ConfigError("train_step needs at least one domain batch")
    seen = set()
    for dom, X, y in batches:
        if len(y) == 0:
            raise ConfigError(f"empty batch for domain {dom}")
        if dom in seen:
            raise ConfigError(f"domain {dom} appears twice in one step")
        seen.add(dom)

    cfg, bundle = state.config, state.bundle
    snapshot = state.queue.snapshot() if len(state.queue) else None
    params = bundle.parameters()
    ad.zero_grad(params)

    totals, pushes = [], []
    res = StepResult({}, {}, {}, 0.0, 0)
    for dom, X, y in batches:
        Z = forward_features(bundle.F, X)
        momentum_update(bundle, cfg.alpha)
        Z_student = forward_features(bundle.F_prime, X, student=True)
        bd, clamps = domain_losses(state, Z, y, snapshot)
        totals.append(bd.total)
        pushes.append((Z_student.data, y))
        res.l_teach[dom], res.l_learn[dom], res.l_cs[dom] = bd.l_teach, bd.l_learn, bd.l_cs
        res.clamp_events += clamps

    total = totals[0]
    for t in totals[1:]:
        total = ad.add(total, t)
    total = ad.scale(total, 1.0 / len(totals))
    res.l_all = total.item()

    if total.requires_grad:
        student = [p.data for p in bundle.F_prime.parameters()]
        ad.backward(total)
        lr = cfg.learning_rate
        for p in params:
            if p.grad is not None:
                p.data = p.data - lr * p.grad
        assert all(a is p.data for a, p in zip(student, bundle.F_prime.parameters())), \
            "optimizer touched the student"

    for Zs, y in pushes:
        state.queue.push_batch(Zs, y)
    state.steps += 1
    return res


def predict(bundle: ModelBundle, queue: KnowledgeQueue | None, X: np.ndarray, mode: str,
            tau: float = 0.07, chunk: int = 256) -> np.ndarray:
    """Class predictions, each sample handled on its own.

    ``frontdoor`` scores class y of sample x as
    ``sum_i P(z_i | x) * P(y | z_i, x)`` against the frozen queue, i.e. the
    front-door rule with ``P(X=x) = 1`` for the sample itself.
    """
    if mode not in PREDICTION_MODES:
        raise ConfigError(f"must be one of {PREDICTION_MODES}", "prediction_mode")
    X = np.asarray(X, dtype=np.float64)
    out = np.zeros(len(X), dtype=np.int64)
    if mode == "frontdoor":
        if queue is None or len(queue) == 0:
            raise QueueError("front-door prediction needs a warmed knowledge queue")
        zq, _ = queue.snapshot()
    with ad.no_grad():
        for s in range(0, len(X), chunk):
            f = forward_features(bundle.F, X[s : s + chunk])
            if mode == "classifier":
                scores = classify(bundle.C, f).data
            else:
                pzx = losses.p_z_given_x(zq, f, tau).data
                pyzx = losses.p_y_given_zx(bundle.H, bundle.G, zq, f).data
                scores = losses.front_door_independent(pzx, pyzx)
            out[s : s + chunk] = scores.argmax(axis=1)
    return out


def evaluate(bundle: ModelBundle, queue: KnowledgeQueue | None, data, mode: str, tau: float = 0.07) -> float:
    """Accuracy on ``data``: a DomainData, a list of them, or an ``(X, y)`` pair."""
    if isinstance(data, DomainData):
        X, y = data.X, data.y
    elif isinstance(data, tuple):
        X, y = data
    else:
        X = np.vstack([d.X for d in data])
        y = np.concatenate([d.y for d in data])
    if len(y) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(bundle, queue, X, mode, tau) == np.asarray(y)))


def epoch_batches(train: dict[int, DomainData], batch_size: int, seed: int, epoch: int):
    """Yields one list of per-domain batches per step.

    An epoch is one pass over the smallest source domain; each domain is
    drawn without replacement under a permutation seeded by (seed, epoch).
    """
    n_min = min(len(d) for d in train.values())
    steps = n_min // batch_size
    if steps == 0:
        raise ConfigError(f"smallest domain has {n_min} samples < batch size {batch_size}",
                          "batch_size_per_domain")
    perms = {d: np.random.default_rng([seed, epoch, d]).permutation(len(dd)) for d, dd in train.items()}
    for s in range(steps):
        step = []
        for d in sorted(train):
            idx = perms[d][s * batch_size : (s + 1) * batch_size]
            step.append((d, train[d].X[idx], train[d].y[idx]))
        yield step


@dataclass
class FitResult:
    bundle: ModelBundle
    queue: KnowledgeQueue
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    history: list[MetricsRecord] = field(default_factory=list)
    config: TrainConfig | None = None

    def summary(self) -> dict:
        return {
            "summary": True,
            "best_epoch": self.best_epoch,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "prediction_mode": self.config.effective_prediction_mode if self.config else None,
            "epochs": len([h for h in self.history if h.epoch > 0]),
        }


def _copy_queue(q: KnowledgeQueue) -> KnowledgeQueue:
    return KnowledgeQueue.from_state(q.capacity, q.d, q.state(), q.total_pushed)


def fit(config: TrainConfig, data: dict[int, DomainData], test_domain: int | None = None,
        progress: bool = False) -> FitResult:
    """Train for ``config.epochs`` and keep the best epoch by source validation accuracy.

    Validation pools the held-out splits of all source domains; the test
    domain never influences selection. Ties go to the earliest epoch. With
    ``epochs == 0`` the initialized model is returned and evaluated (with the
    classifier, since an untaught model has no queue to reason over).
    """
    if test_domain is None:
        test_domain = max(data)
    sources = [d for d in sorted(data) if d != test_domain]
    if len(sources) < 2:
        raise ConfigError(f"need at least two source domains, got {len(sources)}")
    train, val = split_train_val(data, config.val_fraction, config.seed, test_domain)
    test = data[test_domain]
    in_dim = test.X.shape[1]
    num_classes = int(max(int(d.y.max()) for d in data.values()) + 1)
    state = init_state(config, in_dim, num_classes, len(sources))
    mode = config.effective_prediction_mode
    val_list = [val[d] for d in sources]

    history: list[MetricsRecord] = []
    if config.epochs == 0:
        m = "classifier" if mode == "frontdoor" and len(state.queue) == 0 else mode
        va = evaluate(state.bundle, state.queue, val_list, m, config.tau)
        te = evaluate(state.bundle, state.queue, test, m, config.tau)
        history.append(MetricsRecord(0, {}, {}, {}, 0.0, va, te, 0))
        return FitResult(state.bundle.copy(), _copy_queue(state.queue), 0, va, te, history, config)

    best = None
    for epoch in range(1, config.epochs + 1):
        sums = {k: {d: 0.0 for d in sources} for k in ("l_teach", "l_learn", "l_cs")}
        total, clamps, steps = 0.0, 0, 0
        for batch in epoch_batches(train, config.batch_size_per_domain, config.seed, epoch):
            r = train_step(state, batch)
            for d in sources:
                sums["l_teach"][d] += r.l_teach[d]
                sums["l_learn"][d] += r.l_learn[d]
                sums["l_cs"][d] += r.l_cs[d]
            total += r.l_all
            clamps += r.clamp_events
            steps += 1
        va = evaluate(state.bundle, state.queue, val_list, mode, config.tau)
        te = evaluate(state.bundle, state.queue, test, mode, config.tau)
        rec = MetricsRecord(
            epoch,
            {d: v / steps for d, v in sums["l_teach"].items()},
            {d: v / steps for d, v in sums["l_learn"].items()},
            {d: v / steps for d, v in sums["l_cs"].items()},
            total / steps,
            va,
            te,
            clamps,
        )
        history.append(rec)
        if progress:
            log.info("epoch %d  loss %.4f  val %.4f  test %.4f", epoch, rec.l_all, va, te)
        if best is None or va > best[1]:
            best = (epoch, va, te, state.bundle.copy(), _copy_queue(state.queue))
    epoch, va, te, bundle, queue = best
    return FitResult(bundle, queue, epoch, va, te, history, config)


def run_ablation(config: TrainConfig, data: dict[int, DomainData], test_domain: int | None = None,
                 rows: Sequence[str] = tuple(ABLATIONS), prediction_mode: str = "classifier") -> list[dict]:
    """Fit once per loss-flag combination and report selected accuracies.

    Only the loss flags vary between rows; every row is scored with the same
    ``prediction_mode``. The classifier is the default because it is the one
    head every ablation row can be read through (rows without the teaching
    loss then show what an untaught classifier does).
    """
    out = []
    for name in rows:
        cfg = config.replace(loss_flags=list(ABLATIONS[name]), prediction_mode=prediction_mode)
        res = fit(cfg, data, test_domain)
        out.append({
            "config": name,
            "teach": int(cfg.loss_flags[0]),
            "learn": int(cfg.loss_flags[1]),
            "cs": int(cfg.loss_flags[2]),
            "prediction_mode": cfg.effective_prediction_mode,
            "seed": cfg.seed,
            "best_epoch": res.best_epoch,
            "val_acc": res.val_accuracy,
            "test_acc": res.test_accuracy,
        })
    return out


# ---------------------------------------------------------------- artifacts


def write_metrics(path: str | Path, result: FitResult) -> None:
    with open(path, "w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        fh.write(json.dumps(result.summary(), sort_keys=True) + "\n")


def save_checkpoint(path: str | Path, result: FitResult) -> None:
    q = result.queue
    extra = {
        "config": result.config.to_dict() if result.config else None,
        "queue": {"capacity": q.capacity, "d": q.d, "total_pushed": q.total_pushed},
        "selection": {"best_epoch": result.best_epoch, "val_accuracy": result.val_accuracy,
                      "test_accuracy": result.test_accuracy},
    }
    save_bundle(path, result.bundle, extra, q.state())


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, KnowledgeQueue, TrainConfig | None]:
    bundle, header, arrays = load_bundle(path)
    qh = header["queue"]
    queue = KnowledgeQueue.from_state(qh["capacity"], qh["d"], arrays, qh.get("total_pushed", 0))
    cfg = TrainConfig.from_dict(header["config"]) if header.get("config") else None
    return bundle, queue, cfg
