# autodiff.py - reverse-mode gradients on numpy, the policy/value network and its optimizer.
# Responsibilities:
#   - GradTape: record array ops, replay them backwards into parameter gradients.
#   - Mlp: two tanh hidden layers, one categorical head per action dimension, one value head.
#   - AdamOptimizer: bias-corrected Adam; non-finite updates are rejected and logged.
#   - Binary checkpoints (layout in CHECKPOINT_FORMAT.md) and observation encoding.

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ContractViolation
from minicraft import CELL_KINDS, MOB_KINDS, NO_ENTITY, OUT_OF_BOUNDS, GameData, Observation

logger = logging.getLogger(__name__)


# ---------------------- tape ---------------------- #
class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "param_name")

    def __init__(self, value: np.ndarray, parents: Tuple["Node", ...] = (), backward_fn=None, param_name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn: Optional[Callable[[np.ndarray], Tuple[np.ndarray, ...]]] = backward_fn
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class GradTape:
    """Records operations in creation order; backward walks them in reverse."""

    def __init__(self):
        self.nodes: List[Node] = []

    def clear(self) -> None:
        self.nodes = []

    def _record(self, value, parents=(), backward_fn=None, param_name=None) -> Node:
        node = Node(value, parents, backward_fn, param_name)
        self.nodes.append(node)
        return node

    # --- leaves ---
    def param(self, name: str, value: np.ndarray) -> Node:
        return self._record(value, param_name=name)

    def constant(self, value) -> Node:
        return self._record(value)

    # --- ops ---
    def add(self, a: Node, b: Node) -> Node:
        return self._record(a.value + b.value, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a: Node, b: Node) -> Node:
        return self._record(a.value - b.value, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def mul(self, a: Node, b: Node) -> Node:
        return self._record(a.value * b.value, (a, b),
                            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    def neg(self, a: Node) -> Node:
        return self._record(-a.value, (a,), lambda g: (-g,))

    def scale(self, a: Node, c: float) -> Node:
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._record(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._record(out, (a,), lambda g: (g * (1.0 - out ** 2),))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._record(out, (a,), lambda g: (g * out,))

    def square(self, a: Node) -> Node:
        return self._record(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))

    def log_softmax(self, a: Node) -> Node:
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        probs = np.exp(out)
        return self._record(out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))

    def take(self, a: Node, index: np.ndarray) -> Node:
        """Pick one column per row: out[i] = a[i, index[i]]."""
        index = np.asarray(index, dtype=int)
        rows = np.arange(a.shape[0])

        def back(g):
            full = np.zeros_like(a.value)
            np.add.at(full, (rows, index), g)
            return (full,)

        return self._record(a.value[rows, index], (a,), back)

    def reshape(self, a: Node, shape: Tuple[int, ...]) -> Node:
        return self._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def minimum(self, a: Node, b: Node) -> Node:
        pick_a = a.value <= b.value
        return self._record(np.minimum(a.value, b.value), (a, b),
                            lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        inside = (a.value >= lo) & (a.value <= hi)
        return self._record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))

    def sum(self, a: Node, axis: Optional[int] = None) -> Node:
        if axis is None:
            return self._record(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
        return self._record(a.value.sum(axis=axis), (a,),
                            lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))

    def mean(self, a: Node) -> Node:
        n = a.value.size
        return self._record(a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))

    # --- reverse pass ---
    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        if not self.nodes or not any(node is loss for node in self.nodes):
            raise ContractViolation("backward() needs a loss recorded on this tape (run forward first)")
        if loss.value.size != 1:
            raise ContractViolation(f"loss must be a scalar, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        end = next(i for i, node in enumerate(self.nodes) if node is loss)
        grads: Dict[str, np.ndarray] = {}
        for node in reversed(self.nodes[: end + 1]):
            if node.grad is None:
                continue
            if node.param_name is not None:
                grads[node.param_name] = grads.get(node.param_name, 0) + node.grad
            if node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g
        # parameters the loss does not depend on get zero gradients
        for node in self.nodes:
            if node.param_name is not None and node.param_name not in grads:
                grads[node.param_name] = np.zeros_like(node.value)
        return grads


# ---------------------- network ---------------------- #
def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Mlp:
    input_dim: int
    hidden_dim: int
    head_dims: Tuple[int, ...]
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    adam: Optional["AdamOptimizer"] = field(default=None, repr=False, compare=False)

    @staticmethod
    def param_shapes(input_dim: int, hidden_dim: int, head_dims: Sequence[int]) -> Dict[str, Tuple[int, ...]]:
        shapes = {
            "w1": (input_dim, hidden_dim),
            "b1": (hidden_dim,),
            "w2": (hidden_dim, hidden_dim),
            "b2": (hidden_dim,),
        }
        for i, k in enumerate(head_dims):
            shapes[f"head{i}_w"] = (hidden_dim, k)
            shapes[f"head{i}_b"] = (k,)
        shapes["value_w"] = (hidden_dim, 1)
        shapes["value_b"] = (1,)
        return shapes

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, head_dims: Sequence[int], seed: int = 0) -> "Mlp":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(input_dim, hidden_dim, head_dims).items():
            if name.endswith("_b") or name in ("b1", "b2"):
                params[name] = np.zeros(shape)
                continue
            scale = 1.0 / np.sqrt(shape[0])
            if name.startswith("head"):
                scale *= 0.01
            params[name] = rng.normal(0.0, scale, size=shape)
        return cls(input_dim, hidden_dim, tuple(head_dims), params)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, head_dims: Sequence[int]) -> "Mlp":
        shapes = cls.param_shapes(input_dim, hidden_dim, head_dims)
        return cls(input_dim, hidden_dim, tuple(head_dims), {k: np.zeros(s) for k, s in shapes.items()})

    def copy(self) -> "Mlp":
        return Mlp(self.input_dim, self.hidden_dim, self.head_dims, {k: v.copy() for k, v in self.params.items()})

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ContractViolation(f"observation vector has length {x.shape[-1]}, network expects {self.input_dim}")
        return x

    def forward(self, obs_vec: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Plain numpy pass; accepts one vector or a batch of rows."""
        x = self._check_input(obs_vec)
        p = self.params
        h = np.tanh(x @ p["w1"] + p["b1"])
        h = np.tanh(h @ p["w2"] + p["b2"])
        logits = [h @ p[f"head{i}_w"] + p[f"head{i}_b"] for i in range(len(self.head_dims))]
        value = (h @ p["value_w"] + p["value_b"])[..., 0]
        return logits, value

    def forward_tape(self, tape: GradTape, obs_batch: np.ndarray) -> Tuple[List[Node], Node]:
        x = self._check_input(obs_batch)
        if x.ndim == 1:
            x = x[None, :]
        leaves = {name: tape.param(name, value) for name, value in self.params.items()}
        h = tape.tanh(tape.add(tape.matmul(tape.constant(x), leaves["w1"]), leaves["b1"]))
        h = tape.tanh(tape.add(tape.matmul(h, leaves["w2"]), leaves["b2"]))
        logits = [
            tape.add(tape.matmul(h, leaves[f"head{i}_w"]), leaves[f"head{i}_b"])
            for i in range(len(self.head_dims))
        ]
        value = tape.reshape(tape.add(tape.matmul(h, leaves["value_w"]), leaves["value_b"]), (x.shape[0],))
        return logits, value

    def policy(self, obs_vec: np.ndarray) -> Tuple[List[np.ndarray], float]:
        logits, value = self.forward(obs_vec)
        return [_softmax(l) for l in logits], value

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def forward(net: Mlp, obs_vec: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    return net.forward(obs_vec)


def backward(tape: GradTape, loss: Node) -> Dict[str, np.ndarray]:
    return tape.backward(loss)


# ---------------------- optimizer ---------------------- #
@dataclass
class AdamOptimizer:
    lr: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    rejected: int = 0

    def step(self, net: Mlp, grads: Dict[str, np.ndarray]) -> bool:
        """Apply one Adam update in place; returns False when the update was rejected."""
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.rejected += 1
            logger.warning("Adam: rejected update with non-finite gradient (total rejected: %s)", self.rejected)
            return False
        b1, b2 = self.betas
        t = self.t + 1
        new_params, new_m, new_v = {}, {}, {}
        for name, value in net.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            m = b1 * self.m.get(name, np.zeros_like(value)) + (1 - b1) * g
            v = b2 * self.v.get(name, np.zeros_like(value)) + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            new_params[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            new_m[name], new_v[name] = m, v
        if any(not np.all(np.isfinite(p)) for p in new_params.values()):
            self.rejected += 1
            logger.warning("Adam: rejected update producing non-finite parameters")
            return False
        net.params.update(new_params)
        self.m, self.v, self.t = new_m, new_v, t
        return True


def sgd_adam_step(net: Mlp, grads: Dict[str, np.ndarray], lr: float = 3e-4,
                  betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                  optimizer: Optional[AdamOptimizer] = None) -> Mlp:
    """One Adam update of `net` in place.

    Without `optimizer` the moments are kept on the network itself, so repeated calls
    continue one bias-corrected recurrence. A passed optimizer keeps its own settings.
    """
    if optimizer is None:
        if net.adam is None:
            net.adam = AdamOptimizer()
        optimizer = net.adam
        optimizer.lr, optimizer.betas, optimizer.eps = lr, tuple(betas), eps
    optimizer.step(net, grads)
    return net


# ---------------------- checkpoints ---------------------- #
CHECKPOINT_MAGIC = b"MCNN"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")  # magic, version, header length


def encode_checkpoint(net: Mlp, optimizer: Optional[AdamOptimizer] = None, meta: Optional[dict] = None) -> bytes:
    names = list(net.params)
    header = {
        "input_dim": net.input_dim,
        "hidden_dim": net.hidden_dim,
        "head_dims": list(net.head_dims),
        "params": [[name, list(net.params[name].shape)] for name in names],
        "optimizer": None,
        "meta": meta or {},
    }
    if optimizer is not None:
        header["optimizer"] = {
            "lr": optimizer.lr,
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
            "t": optimizer.t,
            "has_moments": bool(optimizer.m),
        }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)), head]
    for name in names:
        chunks.append(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())
    if optimizer is not None and optimizer.m:
        for table in (optimizer.m, optimizer.v):
            for name in names:
                chunks.append(np.ascontiguousarray(table[name], dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Tuple[Mlp, Optional[AdamOptimizer], dict]:
    if len(blob) < _PREFIX.size:
        raise ConfigError("checkpoint is truncated")
    magic, version, head_len = _PREFIX.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError("not a network checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    offset = _PREFIX.size
    try:
        header = json.loads(blob[offset:offset + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"checkpoint header is unreadable: {e}") from e
    offset += head_len

    def read(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        if offset + count * 8 > len(blob):
            raise ConfigError("checkpoint is truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += count * 8
        return arr

    specs = [(name, tuple(shape)) for name, shape in header["params"]]
    net = Mlp(header["input_dim"], header["hidden_dim"], tuple(header["head_dims"]),
              {name: read(shape) for name, shape in specs})
    optimizer = None
    opt = header.get("optimizer")
    if opt is not None:
        optimizer = AdamOptimizer(lr=opt["lr"], betas=tuple(opt["betas"]), eps=opt["eps"], t=opt["t"])
        if opt.get("has_moments"):
            optimizer.m = {name: read(shape) for name, shape in specs}
            optimizer.v = {name: read(shape) for name, shape in specs}
    if offset != len(blob):
        raise ConfigError("checkpoint has trailing bytes")
    return net, optimizer, header.get("meta", {})


def save_checkpoint(path, net: Mlp, optimizer: Optional[AdamOptimizer] = None, meta: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(encode_checkpoint(net, optimizer, meta))
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[Mlp, Optional[AdamOptimizer], dict]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------- observation encoding ---------------------- #
BLOCK_NAMES = CELL_KINDS
ENTITY_NAMES = (NO_ENTITY,) + MOB_KINDS
VOXEL_NAMES = CELL_KINDS + (OUT_OF_BOUNDS,)
INVENTORY_CLIP = 8.0


class ObservationEncoder:
    """Flattens an Observation into the network input vector."""

    def __init__(self, data: GameData):
        self.num_rays = int(data.world["num_rays"])
        self.sentinel = 2.0 * float(data.world["ray_range"])
        self.items = data.items
        self._item_index = {name: i for i, name in enumerate(self.items)}
        self._block_index = {name: i for i, name in enumerate(BLOCK_NAMES)}
        self._entity_index = {name: i for i, name in enumerate(ENTITY_NAMES)}
        self._voxel_index = {name: i for i, name in enumerate(VOXEL_NAMES)}
        self.ray_width = 2 + len(BLOCK_NAMES) + len(ENTITY_NAMES)
        self.dim = self.num_rays * self.ray_width + 9 * len(VOXEL_NAMES) + len(self.items) + 4

    def _dist(self, d: float) -> float:
        return (self.sentinel if not np.isfinite(d) else d) / self.sentinel

    def encode(self, obs: Observation) -> np.ndarray:
        out = np.zeros(self.dim)
        for i, ray in enumerate(obs.rays):
            base = i * self.ray_width
            out[base] = self._dist(ray.block_distance)
            out[base + 1] = self._dist(ray.entity_distance)
            out[base + 2 + self._block_index[ray.block_name]] = 1.0
            out[base + 2 + len(BLOCK_NAMES) + self._entity_index[ray.entity_name]] = 1.0
        base = self.num_rays * self.ray_width
        for r, row in enumerate(obs.voxels):
            for c, name in enumerate(row):
                out[base + (r * 3 + c) * len(VOXEL_NAMES) + self._voxel_index[name]] = 1.0
        base += 9 * len(VOXEL_NAMES)
        for item, count in obs.inventory.items():
            if item in self._item_index:
                out[base + self._item_index[item]] = min(count, INVENTORY_CLIP) / INVENTORY_CLIP
        base += len(self.items)
        out[base + obs.yaw] = 1.0
        return out
