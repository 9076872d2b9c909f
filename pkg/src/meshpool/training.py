"""Dataset preparation, Adam, the training loop and evaluation."""
import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, NumericalError
from .metrics import accuracy, ami, mean_absolute_error
from .model import (
    ModelConfig, build_input, embed_mesh, fit_normalization, forward, init_model, loss,
    ready, save_checkpoint,
)
from .spectral import as_reference

REPORT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1e-3
    seed: int = 0
    split_ratios: tuple = (0.7, 0.1, 0.2)
    early_stop_patience: int = 0  # evaluations without improvement; 0 disables
    eval_every: int = 1
    ami_every: int = 0  # epochs between AMI checkpoints; 0 disables

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 \
                or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ArgumentError(f"split_ratios must be 3 non-negative numbers summing to 1, "
                                f"got {self.split_ratios}")
        if self.epochs < 0 or self.eval_every < 1 or self.early_stop_patience < 0 \
                or self.ami_every < 0:
            raise ArgumentError("epochs, patience and ami_every must be >= 0, eval_every >= 1")
        if self.learning_rate < 0 or self.adam_eps <= 0 or self.alpha < 0:
            raise ArgumentError("learning_rate and alpha must be >= 0, adam_eps > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ArgumentError("Adam betas must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ArgumentError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d)


# -- data ------------------------------------------------------------------

@dataclass
class PreparedDataset:
    task: str
    field_names: list
    splits: dict  # split name -> list of MeshInput
    reference: object
    residuals: dict  # mesh path -> ICP residual

    @property
    def mode(self):
        return "classify" if self.task == "two_region_class" else "regress"


def prepare_dataset(manifest, k_neighbors=5, d=3, reference=None):
    """Embed every mesh, align to a common reference, build model inputs.

    Without an explicit ``reference`` the first training mesh in manifest
    order provides it.
    """
    base = ModelConfig(field_names=manifest.field_names, k_neighbors=k_neighbors,
                       spectral_dim=d, kernel={"kind": "bspline", "grid": [5] * d})
    entries = list(manifest.entries)
    if reference is None:
        first = next((e for e in entries if e.split == "train"), None)
        if first is None:
            raise ArgumentError("manifest has no training meshes")
        _, emb, _ = embed_mesh(manifest.mesh(first), d=d)
        reference = as_reference(emb, reference_id=first.path)
    splits = {"train": [], "val": [], "test": []}
    residuals = {}
    for entry in entries:
        mesh = manifest.mesh(entry)
        graph, emb, corr = embed_mesh(mesh, reference, d=d)
        residuals[entry.path] = corr.residual
        splits[entry.split].append(build_input(mesh, emb, graph, base, entry.target, entry.path))
    return PreparedDataset(task=manifest.task, field_names=list(manifest.field_names),
                           splits=splits, reference=reference, residuals=residuals)


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- reporting -------------------------------------------------------------

@dataclass
class MetricsReport:
    task: str
    metric_name: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = None
    epochs_run: int = 0
    stopped_early: bool = False
    test_metric: float = None
    ami_trace: list = field(default_factory=list)  # [epoch, mean AMI]
    saturated: int = 0
    empty_clusters: int = 0
    predictions: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["format_version"] = REPORT_VERSION
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def write(self, path):
        Path(path).write_text(self.to_json() + "\n")


def _prediction(output, task):
    out = output.data.reshape(-1)
    if task == "classify":
        return int(np.argmax(out))
    return [float(x) for x in out]


def evaluate(state, inputs, return_predictions=False):
    """Accuracy in percent (classification) or MAE (regression) over ``inputs``."""
    if not inputs:
        raise ArgumentError("cannot evaluate on an empty split")
    config = state.config
    preds, targets, rows = [], [], []
    with ad.no_grad():
        for inp in inputs:
            result = forward(inp, state)
            pred = _prediction(result.output, config.task)
            preds.append(pred)
            targets.append(inp.target if config.task == "classify" else list(inp.target))
            rows.append({"mesh": inp.name, "target": targets[-1], "prediction": pred,
                         "output": [float(x) for x in result.output.data.reshape(-1)]})
    if config.task == "classify":
        metric = accuracy(np.array(preds), np.array([int(t) for t in targets]))
    else:
        metric = mean_absolute_error(np.array(preds), np.array(targets))
    return (metric, rows) if return_predictions else metric


def mean_loss(state, inputs):
    config = state.config
    total = 0.0
    with ad.no_grad():
        for inp in inputs:
            result = forward(inp, state)
            total += float(loss(result, inp.target, result.S1, inp.graph, config).data)
    return total / len(inputs)


def cluster_labels(state, inp):
    with ad.no_grad():
        result = forward(inp, state)
    if result.S1 is None:
        raise ArgumentError("only learnable pooling produces cluster assignments")
    return np.argmax(result.S1.data, axis=1), result.S1.data


def mean_ami(state, inputs):
    scores = [ami(cluster_labels(state, inp)[0], inp.parcels)
              for inp in inputs if inp.parcels is not None]
    return float(np.mean(scores)) if scores else float("nan")


def train(data, model_config, train_config, checkpoint_dir=None, log=None):
    """Train on ``data.splits['train']``; returns the best-validation state and a report.

    One mesh per Adam step in a seeded order. The returned state is the one
    with the lowest validation loss seen (training loss when there is no
    validation split).
    """
    tc = train_config
    config = copy.deepcopy(model_config)
    config.alpha = tc.alpha
    train_set, val_set = data.splits["train"], data.splits["val"]
    test_set = data.splits["test"]
    if not train_set:
        raise ArgumentError("empty training split")
    if not config.fitted:
        fit_normalization(config, train_set)
    for inp in train_set + val_set + test_set:
        ready(inp, config)
    state = init_model(config, tc.seed)
    state.reference = data.reference
    params = state.values()
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng([int(tc.seed), 23])
    report = MetricsReport(task=config.task,
                           metric_name="accuracy" if config.task == "classify" else "mae")
    best_state, best_loss, stale = state.copy(), math.inf, 0
    last_good = None
    ami_set = val_set or train_set

    def record_ami(epoch):
        if config.pooling_mode == "learnable" and tc.ami_every:
            report.ami_trace.append([epoch, mean_ami(state, ami_set)])

    record_ami(0)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for idx in order:
            inp = train_set[idx]
            tape = ad.Tape()
            with ad.use_tape(tape):
                result = forward(inp, state)
                value = loss(result, inp.target, result.S1, inp.graph, config)
            if not np.isfinite(value.data):
                path = None
                if checkpoint_dir is not None and last_good is not None:
                    path = str(Path(checkpoint_dir) / "last_good.ckpt")
                    save_checkpoint(last_good, path)
                raise NumericalError(f"non-finite loss at epoch {epoch} on {inp.name}", path)
            tape.backward(value)
            grads = [p.grad for p in params]
            tape.clear()
            for p in params:
                p.grad = None
            adam_step(params, grads, adam, tc.learning_rate, tc.adam_beta1, tc.adam_beta2,
                      tc.adam_eps)
            epoch_loss += float(value.data)
            report.saturated += result.diagnostics.get("saturated", 0)
            report.empty_clusters += result.diagnostics.get("empty_clusters", 0)
        if checkpoint_dir is not None:
            last_good = state.copy()
        report.train_loss.append(epoch_loss / len(train_set))
        report.epochs_run = epoch
        if tc.ami_every and epoch % tc.ami_every == 0:
            record_ami(epoch)
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            current = mean_loss(state, val_set) if val_set else report.train_loss[-1]
            report.val_loss.append(current)
            report.val_epochs.append(epoch)
            if current < best_loss:
                best_loss, best_state, stale = current, state.copy(), 0
                report.best_epoch = epoch
            else:
                stale += 1
            if log is not None:
                log(f"epoch {epoch}: train {report.train_loss[-1]:.5f} val {current:.5f}")
            if tc.early_stop_patience and stale >= tc.early_stop_patience:
                report.stopped_early = True
                break
    report.best_val_loss = None if math.isinf(best_loss) else best_loss
    if tc.epochs == 0:
        best_state = state
    if test_set:
        report.test_metric, report.predictions = evaluate(best_state, test_set, True)
    return best_state, report
