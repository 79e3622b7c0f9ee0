"""Softmax models, group-balanced weighted training, plug-in estimation and risk equalization."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import as_simplex
from .data_io import DataError, GroupedDataset
from .metrics import per_sample_loss

ACTIVATIONS = ("elu", "relu", "tanh")
INIT_SCHEME = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))"
MAGIC = b"MMPF"
MODEL_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class InfeasibleTargetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# models


def _act(z, kind):
    if kind == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z, a, kind):
    if kind == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    if kind == "relu":
        return (z > 0).astype(float)
    return 1.0 - a ** 2


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class SoftmaxModel:
    """Fully connected network with a softmax output (no hidden layers = multinomial logistic regression)."""

    def __init__(self, n_features: int, n_classes: int, hidden: Sequence[int] = (), activation: str = "elu",
                 seed: int = 0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.seed = seed
        rng = np.random.default_rng(seed)
        dims = self.dims
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

    @property
    def dims(self) -> list[int]:
        return [self.n_features, *self.hidden, self.n_classes]

    @property
    def is_linear(self) -> bool:
        return not self.hidden

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        for i, p in enumerate(state):
            if i % 2 == 0:
                self.weights[i // 2] = p.copy()
            else:
                self.biases[i // 2] = p.copy()

    def copy(self) -> "SoftmaxModel":
        out = SoftmaxModel.__new__(SoftmaxModel)
        out.__dict__.update(self.__dict__)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    def _forward(self, X):
        acts = [X]
        pre = []
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W + b
            h = _act(z, self.activation)
            pre.append(z)
            acts.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        return logits, pre, acts

    def log_proba(self, X) -> np.ndarray:
        return _log_softmax(self._forward(np.asarray(X, dtype=float))[0])

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.log_proba(X))

    def loss_and_grads(self, X, y, sample_weights, loss: str):
        """Value and parameter gradients of ``sum_i w_i * loss(h(x_i), y_i)``."""
        X = np.asarray(X, dtype=float)
        logits, pre, acts = self._forward(X)
        logp = _log_softmax(logits)
        p = np.exp(logp)
        n = X.shape[0]
        onehot = np.zeros_like(p)
        onehot[np.arange(n), y] = 1.0
        w = np.asarray(sample_weights, dtype=float)[:, None]
        if loss == "ce":
            value = -float((w[:, 0] * logp[np.arange(n), y]).sum())
            dz = w * (p - onehot)
        else:
            diff = p - onehot
            value = float((w[:, 0] * (diff ** 2).sum(axis=1)).sum())
            g = 2.0 * diff
            dz = w * p * (g - (g * p).sum(axis=1, keepdims=True))
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dz
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                back = delta @ self.weights[layer].T
                delta = back * _act_grad(pre[layer - 1], acts[layer], self.activation)
        grads = [g for pair in zip(grads_w, grads_b) for g in pair]
        return value, grads

    def describe(self) -> dict:
        return {
            "kind": "softmax_mlp",
            "dims": self.dims,
            "activation": self.activation,
            "seed": self.seed,
            "init": INIT_SCHEME,
        }


class ConstantModel:
    """Predicts the same probability vector for every input."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, X) -> np.ndarray:
        return np.tile(self.probs, (np.asarray(X).shape[0], 1))


def save_model(model: SoftmaxModel, path, metadata: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (magic, version, layer dims, float64 parameters) and a ``<path>.json`` sidecar."""
    path = Path(path)
    dims = model.dims
    blob = bytearray(MAGIC)
    blob += struct.pack("<II", MODEL_FORMAT_VERSION, len(dims))
    blob += struct.pack(f"<{len(dims)}I", *dims)
    for p in model.params():
        blob += np.ascontiguousarray(p, dtype="<f8").tobytes()
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(bytes(blob))
    meta = {"format_version": MODEL_FORMAT_VERSION, "architecture": model.describe(), **(metadata or {})}
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2, default=_jsonable))
    return bin_path, json_path


def load_model(path) -> SoftmaxModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a model file")
    version, n_dims = struct.unpack_from("<II", raw, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    dims = list(struct.unpack_from(f"<{n_dims}I", raw, 12))
    arch = meta["architecture"]
    model = SoftmaxModel(dims[0], dims[-1], dims[1:-1], arch["activation"], arch.get("seed", 0))
    offset = 12 + 4 * n_dims
    state = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            state.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy())
            offset += 8 * count
    model.set_state(state)
    return model


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "bs"
    batch_size: int = 512
    lr: float = 1e-3
    decay: float = 0.25
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    hidden: tuple[int, ...] = ()
    activation: str = "elu"
    optimizer: str = "auto"
    sampling: str = "balanced"

    def __post_init__(self):
        if self.loss not in ("bs", "ce"):
            raise ValueError("loss must be 'bs' or 'ce'")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")
        if self.optimizer not in ("auto", "sgd", "adam"):
            raise ValueError("optimizer must be 'auto', 'sgd' or 'adam'")
        if self.sampling not in ("balanced", "naive"):
            raise ValueError("sampling must be 'balanced' or 'naive'")


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        p -= lr * g


def group_risks_on(model, ds: GroupedDataset, loss: str) -> np.ndarray:
    """Mean loss of ``model`` over each group's samples in ``ds``."""
    ds.require_all_groups("evaluation data")
    losses = per_sample_loss(model.predict_proba(ds.features), ds.labels, loss)
    return np.bincount(ds.groups, weights=losses, minlength=ds.n_groups) / ds.group_counts()


def batch_weights(groups: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Per-sample weights turning a batch sum into ``sum_a mu_a * mean_loss_a``; absent groups drop out."""
    counts = np.bincount(groups, minlength=mu.size).astype(float)
    counts[counts == 0] = 1.0
    return mu[groups] / counts[groups]


@dataclass
class TrainResult:
    model: SoftmaxModel
    val_risks: np.ndarray
    mu: np.ndarray
    epochs: int
    accepted: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def train_weighted(train: GroupedDataset, val: GroupedDataset, mu, cfg: TrainConfig,
                   model: SoftmaxModel | None = None) -> TrainResult:
    """Minimise ``<mu, group risks>`` with group-balanced minibatches and validation model selection.

    Every batch draws group labels uniformly, then samples each row from that
    group's training pool with replacement. After each epoch the weighted
    validation risk decides whether the epoch's parameters replace the best
    ones (ties accepted). Otherwise the learning rate shrinks by ``cfg.decay``
    and patience grows. Each epoch restarts from the best parameters. With
    ``cfg.sampling == "naive"`` batches are plain uniform draws over rows and
    the batch objective is the unweighted mean loss.
    """
    mu = as_simplex(mu)
    if train.n_groups != mu.size or val.n_groups != mu.size:
        raise DataError(f"weights have {mu.size} entries but data has {train.n_groups} groups")
    if train.n_features != val.n_features:
        raise DataError("train and validation feature dimensions differ")
    train.require_all_groups("training data")
    val.require_all_groups("validation data")

    n_classes = max(train.n_classes, val.n_classes)
    if model is None:
        model = SoftmaxModel(train.n_features, n_classes, cfg.hidden, cfg.activation, seed=cfg.seed)
    use_adam = cfg.optimizer == "adam" or (cfg.optimizer == "auto" and not model.is_linear)
    rng = np.random.default_rng([cfg.seed, 1])
    pools = train.group_indices()
    n_groups = mu.size
    steps_per_epoch = max(1, int(np.ceil(len(train) / cfg.batch_size)))

    best_state = model.get_state()
    best_risks = group_risks_on(model, val, cfg.loss)
    best_value = float(mu @ best_risks)
    accepted = [best_value]
    history = []
    lr = cfg.lr
    patience = 0
    opt = _Adam(model.params()) if use_adam else None

    epoch = 0
    while epoch < cfg.max_epochs and patience < cfg.patience:
        model.set_state(best_state)
        if use_adam and patience > 0:
            opt = _Adam(model.params())
        for _ in range(steps_per_epoch):
            # with one group, balanced draws coincide with uniform row draws
            if cfg.sampling == "balanced" and n_groups > 1:
                a = rng.integers(0, n_groups, cfg.batch_size)
                counts = np.bincount(a, minlength=n_groups)
                idx = np.concatenate([rng.choice(pools[g], counts[g]) for g in range(n_groups) if counts[g]])
                w = batch_weights(train.groups[idx], mu)
            else:
                idx = rng.integers(0, len(train), cfg.batch_size)
                w = np.full(idx.size, 1.0 / idx.size)
            value, grads = model.loss_and_grads(train.features[idx], train.labels[idx], w, cfg.loss)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch + 1}")
            params = model.params()
            if use_adam:
                opt.step(params, grads, lr)
            else:
                _sgd_step(params, grads, lr)
        epoch += 1
        risks = group_risks_on(model, val, cfg.loss)
        if not np.all(np.isfinite(risks)):
            raise TrainingError(f"non-finite validation risk at epoch {epoch}")
        value = float(mu @ risks)
        improved = value <= best_value
        if improved:
            best_state, best_risks, best_value = model.get_state(), risks, value
            accepted.append(value)
            patience = 0
        else:
            lr *= cfg.decay
            patience += 1
        history.append({"epoch": epoch, "val_weighted": value, "accepted": improved, "lr": lr})

    model.set_state(best_state)
    return TrainResult(model, best_risks, mu, epoch, accepted, history)


class JointSolver:
    """Linear-weighting solver that trains one model per weight vector."""

    def __init__(self, train: GroupedDataset, val: GroupedDataset, cfg: TrainConfig):
        self.train, self.val, self.cfg = train, val, cfg
        self.results: list[TrainResult] = []

    def __call__(self, mu):
        res = train_weighted(self.train, self.val, mu, self.cfg)
        self.results.append(res)
        return res.model, res.val_risks


# ---------------------------------------------------------------------------
# plug-in estimation


@dataclass
class PluginBundle:
    """Per-group label models ``p(y|x,a)``, a group model ``p(a|x)`` and group priors."""

    label_models: list
    group_model: object
    priors: np.ndarray

    def __post_init__(self):
        self.priors = as_simplex(self.priors, atol=1e-9)
        if len(self.label_models) != self.priors.size:
            raise ValueError("need one label model per group")


def plugin_combine(bundle: PluginBundle, mu, X) -> np.ndarray:
    """Optimal predictor for ``mu`` assembled from the bundle.

    ``h(x) = sum_a p(y|x,a) p(a|x) mu_a / p_a  /  sum_a p(a|x) mu_a / p_a``.
    """
    mu = as_simplex(mu)
    X = np.asarray(X, dtype=float)
    pa = bundle.group_model.predict_proba(X) * (mu / bundle.priors)[None, :]
    den = pa.sum(axis=1, keepdims=True)
    if np.any(den <= 0):
        raise ArithmeticError("plug-in normaliser is zero for some input")
    num = sum(pa[:, [a]] * bundle.label_models[a].predict_proba(X) for a in range(mu.size))
    return num / den


def reweight_output(posterior, mu, priors) -> np.ndarray:
    """Rescale class probabilities by ``mu_a / p_a`` and renormalise (classes are the groups)."""
    posterior = np.asarray(posterior, dtype=float)
    mu = np.asarray(mu, dtype=float)
    priors = np.asarray(priors, dtype=float)
    if posterior.shape[-1] != mu.size or mu.size != priors.size:
        raise ValueError("posterior, weights and priors must have the same number of classes")
    scaled = posterior * (mu / priors)
    den = scaled.sum(axis=-1, keepdims=True)
    if np.any(den <= 0):
        raise ArithmeticError("reweighting normaliser is zero")
    return scaled / den


class PluginPredictor:
    def __init__(self, bundle: PluginBundle, mu):
        self.bundle = bundle
        self.mu = as_simplex(mu)

    def predict_proba(self, X) -> np.ndarray:
        return plugin_combine(self.bundle, self.mu, X)


class PluginSolver:
    """Linear-weighting solver that only re-combines fixed component models."""

    def __init__(self, bundle: PluginBundle, val: GroupedDataset, loss: str):
        self.bundle, self.val, self.loss = bundle, val, loss

    def __call__(self, mu):
        pred = PluginPredictor(self.bundle, mu)
        return pred, group_risks_on(pred, self.val, self.loss)


def train_plugin(train: GroupedDataset, val: GroupedDataset, cfg: TrainConfig) -> PluginBundle:
    """Fit ``p(y|x,a)`` per group and ``p(a|x)`` independently; priors are train frequencies."""
    train.require_all_groups("training data")
    val.require_all_groups("validation data")
    n_groups = train.n_groups
    naive = replace(cfg, sampling="naive")
    label_models = []
    for a in range(n_groups):
        tr = _single_group(train.subset(train.groups == a))
        va = _single_group(val.subset(val.groups == a))
        tr.n_classes = va.n_classes = max(train.n_classes, val.n_classes)
        label_models.append(train_weighted(tr, va, [1.0], replace(naive, seed=cfg.seed + 1 + a)).model)
    if n_groups == 1:
        group_model = ConstantModel([1.0])
    else:
        group_model = train_weighted(_groups_as_labels(train), _groups_as_labels(val), [1.0],
                                     replace(naive, seed=cfg.seed)).model
    priors = train.group_counts() / len(train)
    return PluginBundle(label_models, group_model, priors)


def _single_group(ds: GroupedDataset) -> GroupedDataset:
    return GroupedDataset(ds.features, ds.labels, np.zeros(len(ds), dtype=np.int64),
                          n_classes=ds.n_classes, n_groups=1)


def _groups_as_labels(ds: GroupedDataset) -> GroupedDataset:
    return GroupedDataset(ds.features, ds.groups, np.zeros(len(ds), dtype=np.int64),
                          n_classes=ds.n_groups, n_groups=1)


def label_equals_group_bundle(group_posterior_model, n_groups: int, priors=None) -> PluginBundle:
    """Bundle for problems whose classes are the groups: one-hot label models around a posterior model."""
    priors = np.full(n_groups, 1.0 / n_groups) if priors is None else priors
    return PluginBundle([ConstantModel(np.eye(n_groups)[a]) for a in range(n_groups)], group_posterior_model, priors)


# ---------------------------------------------------------------------------
# post-hoc equalization


def solve_mixing_rates(risk_fn: Callable[[int, float], float], n_groups: int, target: float,
                       tol: float = 1e-4, max_bisections: int = 100) -> np.ndarray:
    """Per-group mixing rates ``gamma_a`` with ``risk_fn(a, gamma_a) == target``.

    ``gamma_a = 0`` for groups already within ``tol`` of the target. Other
    groups are bisected on ``[0, 1]``, which needs ``risk(0) < target <= risk(1)``.
    """
    gammas = np.zeros(n_groups)
    for a in range(n_groups):
        r0 = risk_fn(a, 0.0)
        if abs(r0 - target) <= tol:
            continue
        if r0 > target:
            raise InfeasibleTargetError(f"group {a} risk {r0:.6g} already exceeds target {target:.6g}")
        r1 = risk_fn(a, 1.0)
        if r1 < target - tol:
            raise InfeasibleTargetError(f"target {target:.6g} is above the uniform predictor's risk {r1:.6g} "
                                        f"for group {a}")
        lo, hi = 0.0, 1.0
        for _ in range(max_bisections):
            mid = 0.5 * (lo + hi)
            if risk_fn(a, mid) < target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12:
                break
        gammas[a] = 0.5 * (lo + hi)
    return gammas


class EqualizedPredictor:
    """``(1 - gamma_a) h(x) + gamma_a * uniform`` for a sample of group ``a`` (needs group labels)."""

    def __init__(self, model, gammas):
        self.model = model
        self.gammas = np.asarray(gammas, dtype=float)

    def predict_proba(self, X, groups) -> np.ndarray:
        p = self.model.predict_proba(X)
        g = self.gammas[np.asarray(groups)][:, None]
        return (1.0 - g) * p + g / p.shape[1]


@dataclass
class EqualizationResult:
    gammas: np.ndarray
    target: float
    risks_before: np.ndarray
    risks_after: np.ndarray
    predictor: object = None

    def to_json(self) -> dict:
        return {k: _jsonable(v) if isinstance(v, np.ndarray) else v
                for k, v in asdict(self).items() if k != "predictor"}


def posthoc_equalize(model, eval_ds: GroupedDataset, loss: str, target: float | None = None,
                     tol: float = 1e-4) -> EqualizationResult:
    """Degrade over-performing groups until every group's eval risk equals ``target``.

    ``target`` defaults to the worst group risk. Requires group membership at
    prediction time.
    """
    eval_ds.require_all_groups("evaluation data")
    p = model.predict_proba(eval_ds.features)
    n_classes = p.shape[1]
    idx = eval_ds.group_indices()

    def risk(a, gamma):
        q = (1.0 - gamma) * p[idx[a]] + gamma / n_classes
        return float(per_sample_loss(q, eval_ds.labels[idx[a]], loss).mean())

    before = np.array([risk(a, 0.0) for a in range(eval_ds.n_groups)])
    target = float(before.max()) if target is None else float(target)
    gammas = solve_mixing_rates(risk, eval_ds.n_groups, target, tol)
    after = np.array([risk(a, gammas[a]) for a in range(eval_ds.n_groups)])
    return EqualizationResult(gammas, target, before, after, EqualizedPredictor(model, gammas))


def posthoc_equalize_oracle(spec, mu, loss: str = "bs", target: float | None = None, tol: float = 1e-4,
                            quad=None) -> EqualizationResult:
    """Same construction on an analytic spec, with risks from quadrature."""
    from .synthetic import QuadratureConfig, mixed_group_risks

    quad = quad or QuadratureConfig()
    n = spec.n_groups

    def risk(a, gamma):
        gam = np.zeros(n)
        gam[a] = gamma
        return float(mixed_group_risks(spec, mu, gam, loss, quad)[a])

    before = mixed_group_risks(spec, mu, np.zeros(n), loss, quad)
    target = float(before.max()) if target is None else float(target)
    gammas = solve_mixing_rates(risk, n, target, tol)
    after = mixed_group_risks(spec, mu, gammas, loss, quad)
    return EqualizationResult(gammas, target, before, after)
