"""LSTM sleep model written directly in numpy (float64).

Architecture: stage embedding -> stacked LSTM layers -> linear -> softmax.
The embedding has a sixth row, the learned start symbol, which is fed at
record start so that the first epoch of every record gets a prediction.
Gate blocks are stacked in the order input, forget, cell, output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import N_STAGES, Hypnogram, SequenceModel
from .io import FormatError

START = N_STAGES
N_INPUTS = N_STAGES + 1


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite training loss {loss!r} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    layers: int = 1
    hidden: int = 64
    embed_dim: int = 16
    learning_rate: float = 1e-3
    max_epochs: int = 30
    bptt_len: int = 32
    batch_size: int = 16
    patience: int = 3
    seed: int = 0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        for name in ("layers", "hidden", "embed_dim", "max_epochs", "bptt_len",
                     "batch_size", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not (self.learning_rate > 0 and self.clip_norm > 0):
            raise ValueError("learning_rate and clip_norm must be positive")


# layer x hidden grid of full-size models, plus a desk-scale default
PRESETS = {
    "desk": TrainConfig(),
    "2x256": TrainConfig(layers=2, hidden=256),
    "2x1024": TrainConfig(layers=2, hidden=1024),
    "4x256": TrainConfig(layers=4, hidden=256),
    "4x1024": TrainConfig(layers=4, hidden=1024),
}


@dataclass
class LstmLayer:
    W: np.ndarray  # (4H, input)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)


@dataclass(frozen=True, eq=False)
class LstmState:
    h: np.ndarray  # (layers, H)
    c: np.ndarray

    @classmethod
    def zeros(cls, model: "LstmSlm") -> "LstmState":
        shape = (model.n_layers, model.hidden)
        return cls(np.zeros(shape), np.zeros(shape))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LstmSlm(SequenceModel):
    # states are read-only arrays, so sharing them between beams is safe
    state_shareable = True

    def __init__(self, embedding, layers: Sequence[LstmLayer], out_w, out_b):
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.layers = list(layers)
        self.out_w = np.asarray(out_w, dtype=np.float64)
        self.out_b = np.asarray(out_b, dtype=np.float64)
        self._check()

    @property
    def hidden(self) -> int:
        return self.out_w.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    def _check(self):
        if not self.layers:
            raise ValueError("need at least one LSTM layer")
        h, d = self.hidden, self.embed_dim
        if self.embedding.shape != (N_INPUTS, d):
            raise ValueError(f"embedding must be {N_INPUTS} x {d}")
        if self.out_w.shape != (h, N_STAGES) or self.out_b.shape != (N_STAGES,):
            raise ValueError("output projection has wrong shape")
        for i, layer in enumerate(self.layers):
            n_in = d if i == 0 else h
            if (layer.W.shape != (4 * h, n_in) or layer.U.shape != (4 * h, h)
                    or layer.b.shape != (4 * h,)):
                raise ValueError(f"layer {i} has wrong shape for hidden={h}")
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")

    @classmethod
    def initialize(cls, config: TrainConfig, rng=None) -> "LstmSlm":
        rng = np.random.default_rng(config.seed if rng is None else rng)
        h, d = config.hidden, config.embed_dim
        scale = 1.0 / math.sqrt(h)
        emb = rng.uniform(-0.5, 0.5, (N_INPUTS, d))
        layers = []
        for i in range(config.layers):
            n_in = d if i == 0 else h
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0  # forget gate starts open
            layers.append(LstmLayer(rng.uniform(-scale, scale, (4 * h, n_in)),
                                    rng.uniform(-scale, scale, (4 * h, h)), b))
        out_w = rng.uniform(-scale, scale, (h, N_STAGES))
        return cls(emb, layers, out_w, np.zeros(N_STAGES))

    @classmethod
    def zeros(cls, layers: int, hidden: int, embed_dim: int) -> "LstmSlm":
        return cls(np.zeros((N_INPUTS, embed_dim)),
                   [LstmLayer(np.zeros((4 * hidden, embed_dim if i == 0 else hidden)),
                              np.zeros((4 * hidden, hidden)), np.zeros(4 * hidden))
                    for i in range(layers)],
                   np.zeros((hidden, N_STAGES)), np.zeros(N_STAGES))

    def params(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (live views, in a fixed order)."""
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.W"] = layer.W
            out[f"layer{i}.U"] = layer.U
            out[f"layer{i}.b"] = layer.b
        out["output.W"] = self.out_w
        out["output.b"] = self.out_b
        return out

    def copy(self) -> "LstmSlm":
        return LstmSlm(self.embedding.copy(),
                       [LstmLayer(l.W.copy(), l.U.copy(), l.b.copy()) for l in self.layers],
                       self.out_w.copy(), self.out_b.copy())

    # batched single step, h and c shaped (layers, B, H)

    def _step(self, tokens, h, c):
        x = self.embedding[tokens]
        h_new = np.empty_like(h)
        c_new = np.empty_like(c)
        n = self.hidden
        for i, layer in enumerate(self.layers):
            z = x @ layer.W.T + h[i] @ layer.U.T + layer.b
            ig = _sigmoid(z[:, :n])
            fg = _sigmoid(z[:, n:2 * n])
            gg = np.tanh(z[:, 2 * n:3 * n])
            og = _sigmoid(z[:, 3 * n:])
            c_new[i] = fg * c[i] + ig * gg
            h_new[i] = og * np.tanh(c_new[i])
            x = h_new[i]
        return h_new, c_new

    def _output(self, h_top):
        return _softmax(h_top @ self.out_w + self.out_b)

    # SequenceModel

    def initial_state(self):
        _, state = lstm_step(self, LstmState.zeros(self), None)
        return state

    def advance(self, state, stage):
        _, new = lstm_step(self, state, stage)
        return new

    def next_distribution(self, state):
        return self._output(state.h[-1][None, :])[0]

    def predict_batch(self, states):
        return self._output(np.stack([s.h[-1] for s in states]))

    def advance_batch(self, states, stages):
        h = np.stack([s.h for s in states], axis=1)
        c = np.stack([s.c for s in states], axis=1)
        h, c = self._step(np.asarray(stages, dtype=np.int64), h, c)
        return [LstmState(h[:, j].copy(), c[:, j].copy()) for j in range(len(states))]

    def stage_probs(self, stages):
        return self.stage_probs_many([stages])[0]

    def stage_probs_many(self, sequences):
        """Score several records at once (padded batch, zero initial state)."""
        seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
        inputs, targets, mask = _pad_batch(seqs)
        b = len(seqs)
        h = np.zeros((self.n_layers, b, self.hidden))
        c = np.zeros_like(h)
        out = np.empty(targets.shape)
        rows = np.arange(b)
        for t in range(targets.shape[1]):
            h, c = self._step(inputs[:, t], h, c)
            out[:, t] = self._output(h[-1])[rows, targets[:, t]]
        return [out[j, :len(s)] for j, s in enumerate(seqs)]

    def to_text(self) -> str:
        return serialize_lstm(self)


def lstm_step(model: LstmSlm, state: LstmState, prev_stage) -> tuple[np.ndarray, LstmState]:
    """Consume one stage (``None`` = record start) and predict the next one."""
    if state.h.shape != (model.n_layers, model.hidden) or state.c.shape != state.h.shape:
        raise ValueError(f"state shape {state.h.shape} does not match model "
                         f"({model.n_layers}, {model.hidden})")
    token = START if prev_stage is None else int(prev_stage)
    h, c = model._step(np.array([token]), state.h[:, None, :], state.c[:, None, :])
    new = LstmState(h[:, 0], c[:, 0])
    return model._output(h[-1])[0], new


def _pad_batch(seqs):
    t_max = max(len(s) for s in seqs)
    b = len(seqs)
    inputs = np.full((b, t_max), START, dtype=np.int64)
    targets = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max))
    for j, s in enumerate(seqs):
        n = len(s)
        inputs[j, 1:n] = s[:-1]
        targets[j, :n] = s
        mask[j, :n] = 1.0
    return inputs, targets, mask


# training


def _layer_forward(layer, x, h, c):
    """Run one layer over a window. x: (B, T, in); h, c: (B, H)."""
    n = h.shape[1]
    b, t_len, _ = x.shape
    xw = x @ layer.W.T + layer.b
    gates = np.empty((b, t_len, 4 * n))
    tcs = np.empty((b, t_len, n))
    hs = np.empty((b, t_len, n))
    h_prev = np.empty((b, t_len, n))
    c_prev = np.empty((b, t_len, n))
    for t in range(t_len):
        h_prev[:, t] = h
        c_prev[:, t] = c
        z = xw[:, t] + h @ layer.U.T
        g = gates[:, t]
        g[:, :2 * n] = _sigmoid(z[:, :2 * n])
        g[:, 2 * n:3 * n] = np.tanh(z[:, 2 * n:3 * n])
        g[:, 3 * n:] = _sigmoid(z[:, 3 * n:])
        c = g[:, n:2 * n] * c + g[:, :n] * g[:, 2 * n:3 * n]
        tc = np.tanh(c)
        h = g[:, 3 * n:] * tc
        tcs[:, t], hs[:, t] = tc, h
    return hs, (x, gates, tcs, h_prev, c_prev), h, c


def _layer_backward(layer, cache, dhs):
    x, gates, tcs, h_prev, c_prev = cache
    n = layer.U.shape[1]
    b, t_len, _ = dhs.shape
    dz_all = np.empty_like(gates)
    dh_next = np.zeros((b, n))
    dc_next = np.zeros((b, n))
    for t in range(t_len - 1, -1, -1):
        g = gates[:, t]
        ig, fg, gg, og = g[:, :n], g[:, n:2 * n], g[:, 2 * n:3 * n], g[:, 3 * n:]
        tc = tcs[:, t]
        dh = dhs[:, t] + dh_next
        dc = dh * og * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, t]
        dz[:, :n] = dc * gg * ig * (1.0 - ig)
        dz[:, n:2 * n] = dc * c_prev[:, t] * fg * (1.0 - fg)
        dz[:, 2 * n:3 * n] = dc * ig * (1.0 - gg * gg)
        dz[:, 3 * n:] = dh * tc * og * (1.0 - og)
        dc_next = dc * fg
        dh_next = dz @ layer.U
    flat = dz_all.reshape(-1, 4 * n)
    grads = (flat.T @ x.reshape(-1, x.shape[2]),
             flat.T @ h_prev.reshape(-1, n),
             flat.sum(axis=0))
    return dz_all @ layer.W, grads


def loss_and_grads(model: LstmSlm, inputs, targets, mask, h0=None, c0=None):
    """Mean masked cross-entropy of a window and its gradient.

    ``inputs``/``targets``/``mask`` are (B, T); ``h0``/``c0`` are
    (layers, B, H) carried-in states (zeros if omitted). Gradients do not
    flow into the carried-in state. Returns ``(loss, grads, (hT, cT))``.
    """
    b, _ = inputs.shape
    n = model.hidden
    if h0 is None:
        h0 = np.zeros((model.n_layers, b, n))
        c0 = np.zeros_like(h0)
    count = mask.sum()
    x = model.embedding[inputs]
    caches = []
    h_t, c_t = [], []
    for i, layer in enumerate(model.layers):
        x, cache, h_last, c_last = _layer_forward(layer, x, h0[i], c0[i])
        caches.append(cache)
        h_t.append(h_last)
        c_t.append(c_last)
    probs = _softmax(x @ model.out_w + model.out_b)
    p_true = np.take_along_axis(probs, targets[..., None], axis=2)[..., 0]
    loss = -float((mask * np.log(p_true)).sum()) / count

    dlogits = probs.copy()
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=2) - 1.0, axis=2)
    dlogits *= (mask / count)[..., None]
    grads = {"output.W": x.reshape(-1, n).T @ dlogits.reshape(-1, N_STAGES),
             "output.b": dlogits.sum(axis=(0, 1))}
    dx = dlogits @ model.out_w.T
    for i in range(model.n_layers - 1, -1, -1):
        dx, (dw, du, db) = _layer_backward(model.layers[i], caches[i], dx)
        grads[f"layer{i}.W"], grads[f"layer{i}.U"], grads[f"layer{i}.b"] = dw, du, db
    demb = np.zeros_like(model.embedding)
    np.add.at(demb, inputs.ravel(), dx.reshape(-1, model.embed_dim))
    grads["embedding"] = demb
    return loss, grads, (np.stack(h_t), np.stack(c_t))


@dataclass
class _Adam:
    lr: float
    beta1: float
    beta2: float
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _corpus_perplexity(model, records):
    probs = model.stage_probs_many([r.indices() for r in records])
    logp = sum(float(np.log(p).sum()) for p in probs)
    return math.exp(-logp / sum(len(p) for p in probs))


def train_lstm(train: Sequence[Hypnogram], valid: Sequence[Hypnogram],
               config: TrainConfig = TrainConfig(), log: Callable[[str], None] | None = None
               ) -> tuple[LstmSlm, list[float]]:
    """Fit by truncated BPTT with Adam; keep the best-validation parameters."""
    if not train or not valid:
        raise ValueError("train and valid splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    model = LstmSlm.initialize(config, rng)
    opt = _Adam(config.learning_rate, config.beta1, config.beta2)
    seqs = [r.indices().astype(np.int64) for r in train]
    best, best_ppl = model.copy(), math.inf
    history: list[float] = []
    stale = 0
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), config.batch_size):
            batch = [seqs[i] for i in order[start:start + config.batch_size]]
            inputs, targets, mask = _pad_batch(batch)
            h = np.zeros((model.n_layers, len(batch), model.hidden))
            c = np.zeros_like(h)
            for w in range(0, inputs.shape[1], config.bptt_len):
                sl = slice(w, w + config.bptt_len)
                if not mask[:, sl].any():
                    break
                loss, grads, (h, c) = loss_and_grads(model, inputs[:, sl], targets[:, sl],
                                                     mask[:, sl], h, c)
                step += 1
                if not math.isfinite(loss):
                    raise TrainingDivergedError(step, loss)
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > config.clip_norm:
                    for g in grads.values():
                        g *= config.clip_norm / norm
                opt.update(model.params(), grads)
        ppl = _corpus_perplexity(model, valid)
        if not math.isfinite(ppl):
            raise TrainingDivergedError(step, ppl)
        history.append(ppl)
        if log is not None:
            log(f"epoch {epoch + 1}: valid perplexity {ppl:.5f}")
        if ppl < best_ppl:
            best, best_ppl, stale = model.copy(), ppl, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


def lstm_gradient_check(model: LstmSlm, sequence, grad_fn=None, step: float = 1e-5,
                        floor: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The loss is the mean cross-entropy of ``sequence`` scored from record
    start. ``grad_fn(model, inputs, targets, mask)`` replaces the analytic
    gradient (tests pass a corrupted one). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    seq = sequence.indices() if isinstance(sequence, Hypnogram) else np.asarray(sequence)
    seq = seq.astype(np.int64)
    if not 1 <= len(seq) <= 8:
        raise ValueError("gradient check needs a sequence of 1..8 epochs")
    if model.hidden > 8:
        raise ValueError("gradient check is meant for hidden <= 8")
    inputs, targets, mask = _pad_batch([seq])
    if grad_fn is None:
        grads = loss_and_grads(model, inputs, targets, mask)[1]
    else:
        grads = grad_fn(model, inputs, targets, mask)
    worst = 0.0
    for name, p in model.params().items():
        g = grads[name]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_and_grads(model, inputs, targets, mask)[0]
            p[idx] = orig - step
            down = loss_and_grads(model, inputs, targets, mask)[0]
            p[idx] = orig
            num = (up - down) / (2 * step)
            a = g[idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# persistence

def serialize_lstm(model: LstmSlm) -> str:
    lines = ["SLM-LSTM v1", f"layers {model.n_layers}", f"hidden {model.hidden}",
             f"embed_dim {model.embed_dim}"]
    for name, arr in model.params().items():
        a2 = arr.reshape(1, -1) if arr.ndim == 1 else arr
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"array {name} {dims}")
        for row in a2:
            lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def deserialize_lstm(text: str) -> LstmSlm:
    lines = text.splitlines()
    pos = 0

    def take():
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise FormatError("unexpected end of file", pos)
        pos += 1
        return pos, lines[pos - 1].strip()

    lineno, head = take()
    if head != "SLM-LSTM v1":
        raise FormatError("expected header 'SLM-LSTM v1'", lineno)
    meta = {}
    for key in ("layers", "hidden", "embed_dim"):
        lineno, line = take()
        parts = line.split()
        if len(parts) != 2 or parts[0] != key or not parts[1].isdigit() or int(parts[1]) < 1:
            raise FormatError(f"expected '{key} <positive int>'", lineno)
        meta[key] = int(parts[1])
    template = LstmSlm.zeros(meta["layers"], meta["hidden"], meta["embed_dim"])
    for name, target in template.params().items():
        lineno, line = take()
        parts = line.split()
        if len(parts) < 3 or parts[:2] != ["array", name]:
            raise FormatError(f"expected 'array {name} <dims>'", lineno)
        try:
            dims = tuple(int(d) for d in parts[2:])
        except ValueError:
            raise FormatError("array dimensions must be integers", lineno) from None
        if dims != target.shape:
            raise FormatError(f"{name} declared {dims}, model needs {target.shape}", lineno)
        n_rows = dims[0] if len(dims) == 2 else 1
        n_cols = dims[-1]
        flat = target.reshape(n_rows, n_cols)
        for r in range(n_rows):
            lineno, line = take()
            if line.startswith("array") or line == "end":
                raise FormatError(f"{name} is truncated: {r} of {n_rows} rows", lineno)
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise FormatError("non-numeric value", lineno) from None
            if len(vals) != n_cols:
                raise FormatError(f"{name} row has {len(vals)} values, expected {n_cols}",
                                  lineno)
            if not all(math.isfinite(v) for v in vals):
                raise FormatError("non-finite value", lineno)
            flat[r] = vals
    lineno, line = take()
    if line != "end":
        raise FormatError("expected 'end' after the last array (extra rows?)", lineno)
    return template


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
