"""Two-layer LSTM language model with gate instrumentation and ablation.

Gate blocks of every weight matrix and bias are stacked in the fixed order
(i, f, g, o): input gate, forget gate, cell candidate, output gate.  For a
layer with H units, rows ``k*H:(k+1)*H`` of ``w_x``, ``w_h`` and ``b`` belong
to block k.

Ablation clamps a unit's hidden output h to zero after every update, before
it reaches the recurrence, the next layer and the output layer.  The cell
state can be clamped too (``clamp_cell=True``).
"""
from __future__ import annotations

import base64
import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .units import AblationMask, UnitRef

log = logging.getLogger(__name__)

GATE_ORDER = ("i", "f", "g", "o")
CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass
class LayerParams:
    w_x: np.ndarray   # (4H, in)
    w_h: np.ndarray   # (4H, H)
    b: np.ndarray     # (4H,)

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[1]

    def block(self, name: str, which: str = "w_h") -> np.ndarray:
        k = GATE_ORDER.index(name)
        H = self.hidden_dim
        return getattr(self, which)[k * H:(k + 1) * H]


@dataclass
class LanguageModel:
    """All parameters of the model plus its vocabulary (the checkpoint)."""

    vocab: list[str]
    embedding: np.ndarray            # (V, E)
    layers: list[LayerParams]
    w_out: np.ndarray                # (V, H)
    b_out: np.ndarray                # (V,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.vocab)}
        self.validate()

    # ---- shape bookkeeping ---------------------------------------------
    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden_dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> dict:
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim, "n_layers": self.n_layers}

    def validate(self) -> None:
        V, E, H = self.vocab_size, self.embed_dim, self.hidden_dim
        if len(self._index) != V:
            raise ValueError("vocabulary contains duplicate tokens")
        expect = [("embedding", self.embedding, (V, E)), ("w_out", self.w_out, (V, H)),
                  ("b_out", self.b_out, (V,))]
        for k, layer in enumerate(self.layers):
            in_dim = E if k == 0 else H
            expect += [(f"layer{k + 1}.w_x", layer.w_x, (4 * H, in_dim)),
                       (f"layer{k + 1}.w_h", layer.w_h, (4 * H, H)),
                       (f"layer{k + 1}.b", layer.b, (4 * H,))]
        for name, arr, shape in expect:
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")

    def token_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in model vocabulary") from None

    def encode(self, tokens: Sequence[str], unk: str | None = None) -> np.ndarray:
        if unk is not None and unk in self._index:
            u = self._index[unk]
            return np.array([self._index.get(t, u) for t in tokens], dtype=np.int64)
        return np.array([self.token_id(t) for t in tokens], dtype=np.int64)

    def params(self) -> dict[str, np.ndarray]:
        """Named views of every parameter array (shared memory)."""
        out = {"embedding": self.embedding}
        for k, layer in enumerate(self.layers):
            out[f"layer{k + 1}.w_x"] = layer.w_x
            out[f"layer{k + 1}.w_h"] = layer.w_h
            out[f"layer{k + 1}.b"] = layer.b
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out

    def copy(self) -> "LanguageModel":
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.vocab).encode())
        for name, arr in self.params().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    # ---- checkpoint IO ---------------------------------------------------
    def to_json(self) -> dict:
        def enc(a):
            return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()
        return {
            "format": "numunits-lstm-checkpoint",
            "version": CHECKPOINT_VERSION,
            "dims": self.dims,
            "gate_order": list(GATE_ORDER),
            "dtype": "float64-le",
            "layout": "row-major",
            "vocab": list(self.vocab),
            "meta": self.meta,
            "arrays": {name: {"shape": list(arr.shape), "data": enc(arr)}
                       for name, arr in self.params().items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "LanguageModel":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        if list(d.get("gate_order", [])) != list(GATE_ORDER):
            raise ValueError(f"gate order {d.get('gate_order')} != {list(GATE_ORDER)}")
        dims = d["dims"]
        arrays = {}
        for name, spec in d["arrays"].items():
            raw = base64.b64decode(spec["data"])
            shape = tuple(spec["shape"])
            if len(raw) != 8 * math.prod(shape):
                raise ValueError(f"{name}: payload size does not match shape {shape}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        layers = [LayerParams(arrays[f"layer{k}.w_x"], arrays[f"layer{k}.w_h"], arrays[f"layer{k}.b"])
                  for k in range(1, dims["n_layers"] + 1)]
        model = cls(list(d["vocab"]), arrays["embedding"], layers, arrays["w_out"], arrays["b_out"],
                    dict(d.get("meta", {})))
        if model.dims != dims:
            raise ValueError(f"checkpoint dims {dims} disagree with arrays {model.dims}")
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "LanguageModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def init_model(vocab: Sequence[str], embed_dim: int = 64, hidden_dim: int = 64,
               n_layers: int = 2, seed: int = 0, forget_bias: float = 1.0) -> LanguageModel:
    """Uniform(-k, k) initialisation with k = 1/sqrt(hidden_dim), forget bias +1."""
    rng = np.random.default_rng([seed, 101])
    k = 1.0 / math.sqrt(hidden_dim)
    V, E, H = len(vocab), embed_dim, hidden_dim

    def u(*shape):
        return rng.uniform(-k, k, size=shape)

    layers = []
    for li in range(n_layers):
        b = u(4 * H)
        b[H:2 * H] = forget_bias
        layers.append(LayerParams(u(4 * H, E if li == 0 else H), u(4 * H, H), b))
    return LanguageModel(list(vocab), u(V, E), layers, u(V, H), np.zeros(V))


# --------------------------------------------------------------------------
# Single step (reference-style API)

@dataclass
class GateSnapshot:
    """Gate and state values of one layer at one timestep."""

    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    ctilde: np.ndarray


def cell_step(layer: LayerParams, x, h_prev, c_prev) -> GateSnapshot:
    """One LSTM update: C = f*C_prev + i*C~, h = o*tanh(C)."""
    x, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x, h_prev, c_prev))
    H = layer.hidden_dim
    if x.shape[-1] != layer.w_x.shape[1] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ValueError("cell_step: input/state shapes do not match the layer")
    z = x @ layer.w_x.T + h_prev @ layer.w_h.T + layer.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    return GateSnapshot(o * np.tanh(c), c, i, f, o, g)


# --------------------------------------------------------------------------
# Batched forward pass

@dataclass
class LayerStates:
    gates: np.ndarray   # (T, B, 4H) activated
    c: np.ndarray       # (T, B, H)
    h: np.ndarray       # (T, B, H)


@dataclass
class ActivationTrace:
    """Per-timestep gate and state record of one sentence.

    Arrays are indexed [t, layer, unit] with 0-based layer/unit positions.
    """

    tokens: list[str]
    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    ctilde: np.ndarray
    c0: np.ndarray | None = None   # (layer, unit) initial cell state
    logprobs: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def snapshot(self, t: int, layer: int) -> GateSnapshot:
        return GateSnapshot(*(getattr(self, k)[t, layer] for k in ("h", "c", "i", "f", "o", "ctilde")))

    def unit(self, ref: UnitRef, what: str = "c") -> np.ndarray:
        return getattr(self, what)[:, ref.layer - 1, ref.unit - 1]

    def write_csv(self, path_or_handle, units: Sequence[UnitRef] | None = None) -> None:
        own = isinstance(path_or_handle, (str, bytes)) or hasattr(path_or_handle, "__fspath__")
        fh = open(path_or_handle, "w", newline="") if own else path_or_handle
        try:
            w = csv.writer(fh)
            w.writerow(["t", "token", "layer", "unit", "h", "c", "i", "f", "o", "ctilde"])
            T, L, H = self.h.shape
            refs = units if units is not None else [UnitRef(l + 1, u + 1) for l in range(L) for u in range(H)]
            for t in range(T):
                for r in refs:
                    l, u = r.layer - 1, r.unit - 1
                    w.writerow([t, self.tokens[t], r.layer, r.unit] +
                               [repr(float(getattr(self, k)[t, l, u])) for k in
                                ("h", "c", "i", "f", "o", "ctilde")])
        finally:
            if own:
                fh.close()


def _keep_vectors(model: LanguageModel, mask: AblationMask | None, clamp_cell: bool):
    H = model.hidden_dim
    out = []
    for li in range(model.n_layers):
        keep_h = np.ones(H) if mask is None else mask.keep_vector(li + 1, H)
        keep_c = keep_h if clamp_cell else np.ones(H)
        out.append((np.ascontiguousarray(keep_h), np.ascontiguousarray(keep_c)))
    return out


def run_layers(model: LanguageModel, ids: np.ndarray, mask: AblationMask | None = None,
               clamp_cell: bool = False, state=None, start_layer: int = 0,
               inputs: np.ndarray | None = None) -> tuple[list[LayerStates], list]:
    """Run the recurrent stack on a (T, B) id array.

    ``state`` is a per-layer list of (h0, c0) arrays of shape (B, H); zeros when
    omitted.  With ``start_layer`` > 0, ``inputs`` (T, B, H) replaces the
    output of layer ``start_layer - 1`` (used to reuse unablated lower layers).
    Returns the per-layer states and the final (h, c) of every layer.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be a (T, B) array")
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise IndexError(f"token id out of range for vocabulary of {model.vocab_size}")
    if mask is not None:
        mask.validate(model.n_layers, model.hidden_dim)
    T, B = ids.shape
    H = model.hidden_dim
    keeps = _keep_vectors(model, mask, clamp_cell)
    x = model.embedding[ids] if start_layer == 0 else inputs
    states, finals = [], []
    for li in range(start_layer, model.n_layers):
        layer = model.layers[li]
        gx = np.ascontiguousarray(x @ layer.w_x.T + layer.b)
        if state is None:
            h0 = np.zeros((B, H))
            c0 = np.zeros((B, H))
        else:
            h0 = np.ascontiguousarray(state[li][0], dtype=np.float64)
            c0 = np.ascontiguousarray(state[li][1], dtype=np.float64)
        gates = np.empty((T, B, 4 * H))
        c = np.empty((T, B, H))
        h = np.empty((T, B, H))
        kernels.lstm_forward(gx, layer.w_h, h0, c0, keeps[li][0], keeps[li][1], gates, c, h)
        states.append(LayerStates(gates, c, h))
        finals.append((h[-1].copy() if T else h0, c[-1].copy() if T else c0))
        x = h
    return states, finals


def output_logprobs(model: LanguageModel, h_top: np.ndarray) -> np.ndarray:
    return log_softmax(h_top @ model.w_out.T + model.b_out)


def forward(model: LanguageModel, tokens, mask: AblationMask | None = None, record: bool = False,
            clamp_cell: bool = False):
    """Next-token log-probabilities for one sequence.

    ``tokens`` are ids or strings.  Returns ``(logprobs (T, V), trace)`` where
    ``trace`` is an :class:`ActivationTrace` when ``record`` is set, else None.
    """
    words = None
    if len(tokens) and isinstance(tokens[0], str):
        words = list(tokens)
        ids = model.encode(tokens)
    else:
        ids = np.asarray(tokens, dtype=np.int64)
        words = [model.vocab[i] if 0 <= i < model.vocab_size else "?" for i in ids]
    states, _ = run_layers(model, ids[:, None], mask, clamp_cell)
    logprobs = output_logprobs(model, states[-1].h[:, 0]) if len(ids) else np.zeros((0, model.vocab_size))
    if not record:
        return logprobs, None
    H = model.hidden_dim

    def stack(fn):
        return np.stack([fn(s) for s in states], axis=1)

    trace = ActivationTrace(
        words,
        h=stack(lambda s: s.h[:, 0]), c=stack(lambda s: s.c[:, 0]),
        i=stack(lambda s: s.gates[:, 0, :H]), f=stack(lambda s: s.gates[:, 0, H:2 * H]),
        ctilde=stack(lambda s: s.gates[:, 0, 2 * H:3 * H]), o=stack(lambda s: s.gates[:, 0, 3 * H:]),
        c0=np.zeros((model.n_layers, H)), logprobs=logprobs)
    return logprobs, trace


def batch_states(model: LanguageModel, sequences: Sequence[Sequence[str]], mask: AblationMask | None = None,
                 clamp_cell: bool = False) -> list[LayerStates]:
    """Layer states for equal-length token sequences, batched as (T, B)."""
    if not sequences:
        raise ValueError("no sequences")
    T = len(sequences[0])
    if any(len(s) != T for s in sequences):
        raise ValueError("sequences must have equal length")
    ids = np.stack([model.encode(s) for s in sequences], axis=1)
    return run_layers(model, ids, mask, clamp_cell)[0]


def record_batch(model: LanguageModel, sequences: Sequence[Sequence[str]], mask: AblationMask | None = None,
                 clamp_cell: bool = False, bos: str | None = "<eos>") -> list[ActivationTrace]:
    """ActivationTraces for equal-length sentences in one batched run.

    With ``bos`` set, each sentence is preceded by that token and the extra
    step is dropped from the traces (its state becomes ``c0``).
    """
    seqs = [([bos] if bos is not None else []) + list(s) for s in sequences]
    states = batch_states(model, seqs, mask, clamp_cell)
    H = model.hidden_dim
    k = 1 if bos is not None else 0
    lp = output_logprobs(model, states[-1].h[k:])

    def pick(b, fn):
        return np.stack([fn(s)[k:, b] for s in states], axis=1)

    out = []
    for b, s in enumerate(sequences):
        c0 = np.stack([s_.c[0, b] for s_ in states]) if k else np.zeros((model.n_layers, H))
        out.append(ActivationTrace(
            list(s), h=pick(b, lambda x: x.h), c=pick(b, lambda x: x.c),
            i=pick(b, lambda x: x.gates[:, :, :H]), f=pick(b, lambda x: x.gates[:, :, H:2 * H]),
            ctilde=pick(b, lambda x: x.gates[:, :, 2 * H:3 * H]), o=pick(b, lambda x: x.gates[:, :, 3 * H:]),
            c0=c0, logprobs=lp[:, b]))
    return out


def perplexity(model: LanguageModel, corpus: Sequence[Sequence[str]], mask: AblationMask | None = None,
               eos: str = "<eos>", unk: str | None = "<unk>") -> float:
    """exp(mean NLL) over every predicted token; each sentence is run from a
    zero state with ``eos`` as first input and predicted after the last word."""
    total, count = 0.0, 0
    by_len: dict[int, list] = {}
    for s in corpus:
        by_len.setdefault(len(s), []).append(s)
    if not by_len:
        raise ValueError("perplexity of an empty corpus")
    for L, group in by_len.items():
        ids = np.stack([model.encode([eos] + list(s) + [eos], unk=unk) for s in group], axis=1)
        states, _ = run_layers(model, ids[:-1], mask)
        lp = output_logprobs(model, states[-1].h)
        tgt = ids[1:]
        total -= np.take_along_axis(lp, tgt[..., None], axis=-1).sum()
        count += tgt.size
    return float(math.exp(total / count))


# --------------------------------------------------------------------------
# Loss and gradients

def loss_and_grads(model: LanguageModel, inputs: np.ndarray, targets: np.ndarray, state=None,
                   with_grads: bool = True):
    """Mean cross-entropy of ``targets`` given ``inputs`` (both (T, B) ids).

    Returns (loss, grads, final_state).  ``grads`` maps parameter names (as in
    :meth:`LanguageModel.params`) to arrays; ``final_state`` is detached.
    """
    T, B = inputs.shape
    H = model.hidden_dim
    states, finals = run_layers(model, inputs, state=state)
    top = states[-1].h
    logits = top.reshape(T * B, H) @ model.w_out.T + model.b_out
    lp = log_softmax(logits)
    tgt = targets.reshape(-1)
    n = tgt.size
    loss = -lp[np.arange(n), tgt].mean()
    if not with_grads:
        return float(loss), None, finals
    dlogits = np.exp(lp)
    dlogits[np.arange(n), tgt] -= 1.0
    dlogits /= n
    grads = {"w_out": dlogits.T @ top.reshape(T * B, H), "b_out": dlogits.sum(0)}
    dh = np.ascontiguousarray((dlogits @ model.w_out).reshape(T, B, H))
    ones = np.ones(H)
    for li in range(model.n_layers - 1, -1, -1):
        layer = model.layers[li]
        st = states[li]
        h0 = np.zeros((B, H)) if state is None else state[li][0]
        c0 = np.zeros((B, H)) if state is None else np.ascontiguousarray(state[li][1])
        dgates = np.empty((T, B, 4 * H))
        dh0 = np.empty((B, H))
        dc0 = np.empty((B, H))
        kernels.lstm_backward(dh, layer.w_h, st.gates, st.c, c0, ones, ones, dgates, dh0, dc0)
        dg2 = dgates.reshape(T * B, 4 * H)
        x = model.embedding[inputs] if li == 0 else states[li - 1].h
        h_prev = np.concatenate([h0[None], st.h[:-1]], axis=0).reshape(T * B, H)
        grads[f"layer{li + 1}.w_x"] = dg2.T @ x.reshape(T * B, -1)
        grads[f"layer{li + 1}.w_h"] = dg2.T @ h_prev
        grads[f"layer{li + 1}.b"] = dg2.sum(0)
        dx = dg2 @ layer.w_x
        if li > 0:
            dh = np.ascontiguousarray(dx.reshape(T, B, H))
        else:
            demb = np.zeros_like(model.embedding)
            np.add.at(demb, inputs.reshape(-1), dx)
            grads["embedding"] = demb
    return float(loss), grads, finals


# --------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.0
    batch_size: int = 32
    bptt: int = 35
    clip_norm: float = 5.0
    epochs: int = 10
    seed: int = 0
    valid_fraction: float = 0.05
    lr_decay: float = 0.5
    min_improvement: float = 0.0     # relative validation gain below which lr decays
    optimizer: str = "sgd"          # "sgd" or "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    log_every: int = 0


class TrainingDiverged(RuntimeError):
    pass


def batchify(ids: np.ndarray, batch_size: int) -> np.ndarray:
    """Split a token stream into ``batch_size`` contiguous columns (T, B)."""
    n = len(ids) // batch_size
    return ids[: n * batch_size].reshape(batch_size, n).T.copy()


def corpus_stream(model: LanguageModel, sentences: Sequence[Sequence[str]], eos: str = "<eos>",
                  unk: str = "<unk>") -> np.ndarray:
    toks = [eos]
    for s in sentences:
        toks.extend(s)
        toks.append(eos)
    return model.encode(toks, unk=unk)


def _stream_nll(model: LanguageModel, data: np.ndarray, bptt: int) -> float:
    state = None
    total, count = 0.0, 0
    for start in range(0, data.shape[0] - 1, bptt):
        seq = min(bptt, data.shape[0] - 1 - start)
        loss, _, state = loss_and_grads(model, data[start:start + seq], data[start + 1:start + 1 + seq],
                                        state, with_grads=False)
        total += loss * seq * data.shape[1]
        count += seq * data.shape[1]
    return total / max(count, 1)


def _enc(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _dec(d) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).astype(np.float64)


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit after an epoch."""

    epoch: int
    step: int
    lr: float
    model: LanguageModel
    best: LanguageModel
    best_ppl: float
    moments: dict
    log: list

    def to_json(self) -> dict:
        return {"format": "numunits-train-state", "epoch": self.epoch, "step": self.step, "lr": self.lr,
                "best_ppl": self.best_ppl, "log": self.log, "model": self.model.to_json(),
                "best": self.best.to_json(),
                "moments": {k: [_enc(m), _enc(v)] for k, (m, v) in self.moments.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        return cls(d["epoch"], d["step"], d["lr"], LanguageModel.from_json(d["model"]),
                   LanguageModel.from_json(d["best"]), d["best_ppl"],
                   {k: (_dec(m), _dec(v)) for k, (m, v) in d["moments"].items()}, list(d["log"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "TrainState":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def split_validation(corpus: Sequence[Sequence[str]], fraction: float, seed: int):
    """Seeded (train, valid) split of a sentence list."""
    corpus = list(corpus)
    n_valid = max(1, int(len(corpus) * fraction))
    order = np.random.default_rng([seed, 7]).permutation(len(corpus))
    return [corpus[i] for i in order[n_valid:]], [corpus[i] for i in order[:n_valid]]


def train(model_init: LanguageModel, corpus: Sequence[Sequence[str]], hyper: TrainConfig = TrainConfig(),
          valid: Sequence[Sequence[str]] | None = None, callback=None, resume: TrainState | None = None):
    """Truncated-BPTT training with global-norm clipping.

    Sentences are shuffled once per epoch (seeded by seed and epoch) and
    streamed into ``batch_size`` columns; hidden state carries across windows
    within an epoch.  The learning rate is multiplied by ``lr_decay`` whenever
    validation perplexity does not improve by ``min_improvement`` (relative).
    ``callback(row, state)`` runs after every epoch with a :class:`TrainState`;
    passing such a state back as ``resume`` continues the run exactly.
    Returns (best model, log) where log holds one dict per epoch.
    """
    if hyper.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {hyper.optimizer!r}")
    if hyper.epochs <= 0:
        return model_init.copy(), []
    corpus = list(corpus)
    if valid is None:
        corpus, valid = split_validation(corpus, hyper.valid_fraction, hyper.seed)
    valid_data = batchify(corpus_stream(model_init, valid), min(hyper.batch_size, max(1, len(valid))))
    if resume is None:
        model = model_init.copy()
        st = TrainState(0, 0, hyper.lr, model, model.copy(),
                        math.exp(_stream_nll(model, valid_data, hyper.bptt)),
                        {k: (np.zeros_like(p), np.zeros_like(p)) for k, p in model.params().items()}, [])
    else:
        st = TrainState(resume.epoch, resume.step, resume.lr, resume.model.copy(), resume.best.copy(),
                        resume.best_ppl, {k: (m.copy(), v.copy()) for k, (m, v) in resume.moments.items()},
                        list(resume.log))
    model = st.model
    params = model.params()
    b1, b2 = hyper.betas
    for epoch in range(st.epoch + 1, hyper.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([hyper.seed, 7, epoch]).permutation(len(corpus))
        data = batchify(corpus_stream(model, [corpus[i] for i in order]), hyper.batch_size)
        state = None
        tot, cnt = 0.0, 0
        for start in range(0, data.shape[0] - 1, hyper.bptt):
            seq = min(hyper.bptt, data.shape[0] - 1 - start)
            loss, grads, state = loss_and_grads(model, data[start:start + seq],
                                                data[start + 1:start + 1 + seq], state)
            st.step += 1
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {st.step}")
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            clip = min(1.0, hyper.clip_norm / (norm + 1e-12)) if hyper.clip_norm > 0 else 1.0
            if hyper.optimizer == "sgd":
                for name, g in grads.items():
                    params[name] -= st.lr * clip * g
            else:
                corr1, corr2 = 1.0 - b1 ** st.step, 1.0 - b2 ** st.step
                for name, g in grads.items():
                    m, v = st.moments[name]
                    g = g * clip
                    m *= b1
                    m += (1.0 - b1) * g
                    v *= b2
                    v += (1.0 - b2) * g * g
                    params[name] -= st.lr * (m / corr1) / (np.sqrt(v / corr2) + 1e-8)
            tot += loss * seq
            cnt += seq
            if hyper.log_every and st.step % hyper.log_every == 0:
                log.info("epoch %d step %d loss %.4f", epoch, st.step, loss)
        train_ppl = math.exp(tot / max(cnt, 1))
        valid_ppl = math.exp(_stream_nll(model, valid_data, hyper.bptt))
        row = {"epoch": epoch, "lr": st.lr, "train_ppl": train_ppl, "valid_ppl": valid_ppl}
        enough = valid_ppl < st.best_ppl * (1.0 - hyper.min_improvement)
        if valid_ppl < st.best_ppl:
            st.best_ppl = valid_ppl
            st.best = model.copy()
        st.log.append(row)
        log.info("epoch %d lr %.4g train ppl %.3f valid ppl %.3f (%.1fs)", epoch, st.lr, train_ppl,
                 valid_ppl, time.perf_counter() - t0)
        if not enough:
            st.lr *= hyper.lr_decay
        st.epoch = epoch
        if callback is not None:
            callback(row, st)
    best = st.best.copy()
    best.meta = dict(best.meta, best_valid_ppl=st.best_ppl)
    return best, list(st.log)
