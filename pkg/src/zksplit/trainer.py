"""Desk-scale U-shaped split training.

The model is a small dense network: the client holds the head (d_in -> h1)
and the tail (h1 -> classes); the server holds a two-layer backbone
(h1 -> h2 -> h1) with ReLU nonlinearities. Training is float64 SGD; client
parameters are quantized to fixed point only at checkpoint boundaries.

The forward/backward pieces are pure functions reused verbatim by the
monolithic oracle and by the message-passing exchange in the protocol layer,
so split and unsplit execution agree bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDiverged
from .field import DEFAULT_FRAC_BITS
from .modelcore import ParamVector


@dataclass(frozen=True)
class ArchSpec:
    d_in: int = 64
    h1: int = 32
    h2: int = 64
    classes: int = 10

    @property
    def client_param_count(self):
        head = self.h1 * self.d_in + self.h1
        tail = self.classes * self.h1 + self.classes
        return head + tail


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.05
    epochs: int = 3
    batch: int = 32


@dataclass(frozen=True)
class PoisonSpec:
    """Backdoor trigger: fixed feature positions forced to a value, labels
    rewritten to the target for a pdr fraction of the shard."""

    trigger_indices: tuple = (0, 1, 2, 3)
    trigger_value: float = 1.0
    target_label: int = 0
    pdr: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.pdr <= 1.0:
            raise ConfigError("pdr must lie in [0, 1]")


@dataclass
class DataShard:
    x: np.ndarray
    y: np.ndarray
    owner: int
    iid_degree: float
    main_label: int


# -- parameter packing ------------------------------------------------------

def unpack_client(pv, arch):
    """ParamVector -> (head W, head b, tail W, tail b) float64 views."""
    flat = pv.to_floats()
    if flat.size != arch.client_param_count:
        raise ShapeError("client parameter count does not match architecture")
    sizes = [arch.h1 * arch.d_in, arch.h1, arch.classes * arch.h1, arch.classes]
    offs = np.cumsum([0] + sizes)
    wh = flat[offs[0]:offs[1]].reshape(arch.h1, arch.d_in)
    bh = flat[offs[1]:offs[2]]
    wt = flat[offs[2]:offs[3]].reshape(arch.classes, arch.h1)
    bt = flat[offs[3]:offs[4]]
    return wh, bh, wt, bt


def pack_client(wh, bh, wt, bt, frac_bits=DEFAULT_FRAC_BITS):
    flat = np.concatenate([wh.ravel(), bh, wt.ravel(), bt])
    return ParamVector.from_floats(flat, frac_bits)


def init_client_params(arch, seed, frac_bits=DEFAULT_FRAC_BITS):
    rng = np.random.default_rng(seed)
    wh = rng.normal(0, np.sqrt(2.0 / arch.d_in), (arch.h1, arch.d_in))
    bh = np.zeros(arch.h1)
    wt = rng.normal(0, np.sqrt(2.0 / arch.h1), (arch.classes, arch.h1))
    bt = np.zeros(arch.classes)
    return pack_client(wh, bh, wt, bt, frac_bits)


def init_backbone(arch, seed):
    rng = np.random.default_rng(seed)
    return {
        "w1": rng.normal(0, np.sqrt(2.0 / arch.h1), (arch.h2, arch.h1)),
        "b1": np.zeros(arch.h2),
        "w2": rng.normal(0, np.sqrt(2.0 / arch.h2), (arch.h1, arch.h2)),
        "b2": np.zeros(arch.h1),
    }


def clone_backbone(state):
    return {k: v.copy() for k, v in state.items()}


# -- forward/backward pieces (shared by split and monolithic paths) ---------

def head_forward(wh, bh, x):
    z = x @ wh.T + bh
    return z, np.maximum(z, 0.0)


def backbone_forward(state, a0):
    z1 = a0 @ state["w1"].T + state["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ state["w2"].T + state["b2"]
    a2 = np.maximum(z2, 0.0)
    return {"a0": a0, "z1": z1, "a1": a1, "z2": z2}, a2


def tail_forward(wt, bt, a2):
    return a2 @ wt.T + bt


def loss_and_dlogits(logits, y):
    """Mean cross-entropy with softmax; returns (loss, dL/dlogits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def tail_backward(wt, a2, dlogits):
    dwt = dlogits.T @ a2
    dbt = dlogits.sum(axis=0)
    da2 = dlogits @ wt
    return dwt, dbt, da2


def backbone_backward(state, cache, da2, z2):
    dz2 = da2 * (z2 > 0)
    dw2 = dz2.T @ cache["a1"]
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ state["w2"]
    dz1 = da1 * (cache["z1"] > 0)
    dw1 = dz1.T @ cache["a0"]
    db1 = dz1.sum(axis=0)
    da0 = dz1 @ state["w1"]
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}, da0


def head_backward(z0, x, da0):
    dz0 = da0 * (z0 > 0)
    return dz0.T @ x, dz0.sum(axis=0)


class LocalBackboneSession:
    """Server-side half of one training turn; mutates its backbone copy."""

    def __init__(self, state, lr):
        self.state = state
        self.lr = lr
        self._cache = None
        self._z2 = None

    def forward(self, a0):
        cache, a2 = backbone_forward(self.state, a0)
        self._cache, self._z2 = cache, cache["z2"]
        return a2

    def backward(self, da2):
        grads, da0 = backbone_backward(self.state, self._cache, da2, self._z2)
        for key, g in grads.items():
            self.state[key] -= self.lr * g
        return da0


def sgd_batch(wh, bh, wt, bt, backbone, x, y, lr):
    """One SGD step across the three partitions; returns the batch loss."""
    z0, a0 = head_forward(wh, bh, x)
    a2 = backbone.forward(a0)
    logits = tail_forward(wt, bt, a2)
    loss, dlogits = loss_and_dlogits(logits, y)
    dwt, dbt, da2 = tail_backward(wt, a2, dlogits)
    da0 = backbone.backward(da2)
    dwh, dbh = head_backward(z0, x, da0)
    wt -= lr * dwt
    bt -= lr * dbt
    wh -= lr * dwh
    bh -= lr * dbh
    return loss


def poisoned_view(shard, poison, seed):
    """Apply the trigger/relabel to a pdr fraction of a shard (copy)."""
    x = shard.x.copy()
    y = shard.y.copy()
    n = len(y)
    count = int(round(poison.pdr * n))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(n)[:count]
    x[np.ix_(chosen, list(poison.trigger_indices))] = poison.trigger_value
    y[chosen] = poison.target_label
    return x, y


def train_round(ckpt_client, backbone_state, shard, poison, hyper, arch, seed,
                frac_bits=DEFAULT_FRAC_BITS, backbone_session=None):
    """One local training turn; returns (quantized client params, backbone state).

    ``backbone_session`` lets the protocol layer substitute a message-passing
    proxy; by default the exchange runs in-process on a backbone copy.
    """
    wh, bh, wt, bt = (a.copy() for a in unpack_client(ckpt_client, arch))
    if backbone_session is None:
        backbone_session = LocalBackboneSession(clone_backbone(backbone_state), hyper.lr)
    if poison is not None:
        x_all, y_all = poisoned_view(shard, poison, seed)
    else:
        x_all, y_all = shard.x, shard.y
    if hyper.epochs == 0:
        return ckpt_client, backbone_session.state
    rng = np.random.default_rng(seed ^ 0x5EED)
    n = len(y_all)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, hyper.batch):
            idx = order[lo:lo + hyper.batch]
            loss = sgd_batch(wh, bh, wt, bt, backbone_session, x_all[idx], y_all[idx], hyper.lr)
            if not np.isfinite(loss) or loss > 1e6:
                raise TrainingDiverged(f"loss={loss}")
    return pack_client(wh, bh, wt, bt, frac_bits), backbone_session.state


def predict(client_params, backbone_state, arch, x):
    wh, bh, wt, bt = unpack_client(client_params, arch)
    _, a0 = head_forward(wh, bh, x)
    _, a2 = backbone_forward(backbone_state, a0)
    return np.argmax(tail_forward(wt, bt, a2), axis=1)


def evaluate(client_params, backbone_state, arch, test_x, test_y, triggered=False,
             poison=None):
    """MA on the clean set, or BA on a fully triggered set (true-target samples
    excluded from the BA count)."""
    if len(test_y) == 0:
        raise ConfigError("empty test set")
    x = np.asarray(test_x, dtype=np.float64)
    y = np.asarray(test_y)
    if triggered:
        if poison is None:
            raise ConfigError("triggered evaluation needs a PoisonSpec")
        keep = y != poison.target_label
        x = x[keep].copy()
        y = y[keep]
        if len(y) == 0:
            raise ConfigError("no eligible samples for backdoor evaluation")
        x[:, list(poison.trigger_indices)] = poison.trigger_value
        preds = predict(client_params, backbone_state, arch, x)
        return float(np.mean(preds == poison.target_label))
    preds = predict(client_params, backbone_state, arch, x)
    return float(np.mean(preds == y))


# -- data -------------------------------------------------------------------

def make_blobs(task_seed, sample_seed, n_samples, d_in=64, classes=10, spread=0.12):
    """Synthetic 10-class task: one Gaussian blob per class inside [0, 1]^d.

    The class centers depend only on task_seed, so train and test splits drawn
    with different sample_seeds share one task.
    """
    centers = np.random.default_rng(task_seed).uniform(0.15, 0.85, size=(classes, d_in))
    rng = np.random.default_rng(sample_seed)
    y = rng.integers(0, classes, size=n_samples)
    x = centers[y] + rng.normal(0, spread, size=(n_samples, d_in))
    return np.clip(x, 0.0, 1.0), y.astype(np.int64)


def load_csv_dataset(path):
    """CSV ingestion: header row, float feature columns, integer column 'label'."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ConfigError("CSV dataset needs a 'label' column")
        label_col = header.index("label")
        xs, ys = [], []
        for row in reader:
            ys.append(int(row[label_col]))
            xs.append([float(v) for i, v in enumerate(row) if i != label_col])
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


def partition_dataset(x, y, n_clients, iid_degree, seed):
    """Main-label partitioning: an iid_degree fraction of each shard comes from
    the shuffled global pool, the rest only from the client's main label."""
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if not 0.0 <= iid_degree <= 1.0:
        raise ConfigError("iid_degree must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(y)
    labels = np.unique(y)
    by_label = {int(c): np.flatnonzero(y == c) for c in labels}
    global_stream = rng.permutation(n)
    cursor = 0
    base, extra = divmod(n, n_clients)
    shards = []
    for client in range(n_clients):
        size = base + (1 if client < extra else 0)
        main = int(rng.choice(labels))
        n_iid = int(round(iid_degree * size))
        take = global_stream[cursor:cursor + n_iid]
        cursor += n_iid
        n_main = size - n_iid
        pool = by_label[main]
        main_take = rng.choice(pool, size=n_main, replace=True) if n_main else np.empty(0, dtype=np.int64)
        idx = np.concatenate([take, main_take]).astype(np.int64)
        rng.shuffle(idx)
        shards.append(DataShard(x=x[idx], y=y[idx], owner=client,
                                iid_degree=iid_degree, main_label=main))
    return shards
