"""Parameterized layers and recurrent cells built on :mod:`ssvae.autodiff`.

LSTM parameters are stored fused: ``W_x`` (in, 4H), ``W_h`` (H, 4H) and
``b`` (4H,), with gate blocks ordered input, forget, output, candidate.
CLSTM-II adds ``W_yc`` (C, H), injected straight into the cell update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor

CELL_KINDS = ("lstm", "clstm1", "clstm2")


class ParamSpec(NamedTuple):
    name: str
    shape: tuple[int, ...]
    init: str = "glorot"  # glorot | zeros | lstm_bias
    fan: tuple[int, int] | None = None


class ParamSet(Mapping[str, Tensor]):
    """Ordered name -> Tensor map; shapes are fixed once added."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None, specs: Sequence[ParamSpec] = ()):
        self._entries: dict[str, Tensor] = {}
        self.specs: dict[str, ParamSpec] = {s.name: s for s in specs}
        for name, t in (entries or {}).items():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already defined")
        t.requires_grad = True
        t.name = name
        self._entries[name] = t

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def view(self, prefix: str) -> "ParamSet":
        """Entries under ``prefix.`` with the prefix stripped; tensors are shared."""
        p = prefix + "."
        out = ParamSet()
        out._entries = {k[len(p):]: v for k, v in self._entries.items() if k.startswith(p)}
        return out

    def group(self, prefix: str) -> dict[str, Tensor]:
        p = prefix + "."
        return {k: v for k, v in self._entries.items() if k.startswith(p)}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._entries.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in self._entries.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != v.shape:
                raise ad.ShapeError("load", v.shape, a.shape, detail=k)
            v.data = a.copy()

    def n_values(self) -> int:
        return sum(v.size for v in self._entries.values())


def init_params(specs: Sequence[ParamSpec], rng: RngStream) -> ParamSet:
    """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases.

    ``lstm_bias`` entries are zero except the forget block, which is 1.0.
    """
    params = ParamSet(specs=specs)
    for spec in specs:
        shape = tuple(spec.shape)
        if spec.init == "glorot":
            fan_in, fan_out = spec.fan or (shape[0], shape[-1])
            s = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(shape) * 2 * s - s
        elif spec.init == "zeros":
            data = np.zeros(shape)
        elif spec.init == "lstm_bias":
            data = np.zeros(shape)
            h = shape[0] // 4
            data[h : 2 * h] = 1.0
        else:
            raise ValueError(f"unknown init {spec.init!r} for {spec.name}")
        params[spec.name] = Tensor(data)
    return params


def lstm_specs(prefix: str, n_in: int, hidden: int, kind: str = "lstm", n_classes: int = 0) -> list[ParamSpec]:
    if kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {kind!r}")
    width = n_in + n_classes if kind == "clstm1" else n_in
    specs = [
        ParamSpec(f"{prefix}.W_x", (width, 4 * hidden), "glorot", (width, hidden)),
        ParamSpec(f"{prefix}.W_h", (hidden, 4 * hidden), "glorot", (hidden, hidden)),
        ParamSpec(f"{prefix}.b", (4 * hidden,), "lstm_bias"),
    ]
    if kind == "clstm2":
        specs.append(ParamSpec(f"{prefix}.W_yc", (n_classes, hidden), "glorot"))
    return specs


def dense_specs(prefix: str, n_in: int, n_out: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.W", (n_in, n_out)), ParamSpec(f"{prefix}.b", (n_out,), "zeros")]


# ---------------------------------------------------------------------------
# layers


def embedding_lookup(table: Tensor, token_ids) -> Tensor:
    return ad.embedding_gather(table, np.asarray(token_ids))


def dense(params: Mapping[str, Tensor], x: Tensor, activation: str = "none") -> Tensor:
    W, b = params["W"], params["b"]
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ad.ShapeError("dense", x.shape, W.shape)
    y = x @ W + b
    if activation == "none":
        return y
    if activation == "tanh":
        return ad.tanh(y)
    if activation == "sigmoid":
        return ad.sigmoid(y)
    raise ValueError(f"unknown activation {activation!r}")


def dropout_mask(shape, rate: float, rng: RngStream) -> np.ndarray | None:
    """Inverted-dropout multiplier, or None when dropout is off."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return rng.bernoulli(keep, shape) / keep


def apply_mask(x: Tensor, mask: np.ndarray | None) -> Tensor:
    return x if mask is None else x * mask


def word_dropout(token_ids, rate: float, rng: RngStream, unk_id: int = 1) -> np.ndarray:
    ids = np.array(token_ids, dtype=np.int64, copy=True)
    if rate <= 0.0:
        return ids
    drop = rng.bernoulli(rate, ids.shape).astype(bool)
    ids[drop] = unk_id
    return ids


# ---------------------------------------------------------------------------
# recurrent cells


@dataclass
class CellState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ad.ShapeError("CellState", self.h.shape, self.c.shape)


def zero_state(batch: int, hidden: int) -> CellState:
    return CellState(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def _as_label(y) -> Tensor:
    return y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))


def _gates(params, proj: Tensor, state: CellState, cell_extra: Tensor | None) -> CellState:
    H = state.h.shape[1]
    pre = proj + state.h @ params["W_h"]
    ifo = ad.sigmoid(pre[:, : 3 * H])
    i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
    cand = ad.tanh(pre[:, 3 * H :])
    c = f * state.c + i * cand
    if cell_extra is not None:
        c = c + cell_extra
    h = o * ad.tanh(c)
    return CellState(h, c)


def lstm_step(params: Mapping[str, Tensor], w_t: Tensor, state: CellState) -> CellState:
    if w_t.shape[1] != params["W_x"].shape[0]:
        raise ad.ShapeError("lstm_step", w_t.shape, params["W_x"].shape)
    return _gates(params, w_t @ params["W_x"] + params["b"], state, None)


def clstm1_step(params: Mapping[str, Tensor], w_t: Tensor, y, state: CellState) -> CellState:
    """Standard LSTM step on the concatenated input [w_t, y]."""
    return lstm_step(params, ad.concat([w_t, _as_label(y)], axis=1), state)


def clstm2_step(params: Mapping[str, Tensor], w_t: Tensor, y, state: CellState) -> CellState:
    """Gates see only w_t and h; the cell update gains tanh(y W_yc)."""
    if w_t.shape[1] != params["W_x"].shape[0]:
        raise ad.ShapeError("clstm2_step", w_t.shape, params["W_x"].shape)
    extra = ad.tanh(_as_label(y) @ params["W_yc"])
    return _gates(params, w_t @ params["W_x"] + params["b"], state, extra)


def _masked(new: Tensor, old: Tensor, m: np.ndarray) -> Tensor:
    return old + (new - old) * m


def unroll(
    kind: str,
    params: Mapping[str, Tensor],
    inputs,
    mask,
    y=None,
    initial: CellState | None = None,
    emb_mask: np.ndarray | None = None,
) -> tuple[list[Tensor], CellState]:
    """Run a cell over a padded batch.

    ``inputs`` is either an int id matrix (B, T), embedded with
    ``params["emb"]``, or an already-embedded Tensor (B, T, E).  Positions
    with mask 0 carry the state through unchanged.  Returns the per-step
    hidden outputs and the final state.
    """
    if kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {kind!r}")
    if kind != "lstm" and y is None:
        raise ValueError(f"{kind} requires a label vector y")
    if isinstance(inputs, Tensor):
        emb = inputs
    else:
        emb = embedding_lookup(params["emb"], inputs)
    emb = apply_mask(emb, emb_mask)
    B, T, E = emb.shape
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (B, T):
        raise ad.ShapeError("unroll", mask.shape, (B, T))
    W_x = params["W_x"]
    H = params["W_h"].shape[0]
    state = initial if initial is not None else zero_state(B, H)

    extra = None
    if kind == "clstm1":
        yt = _as_label(y)
        if W_x.shape[0] != E + yt.shape[1]:
            raise ad.ShapeError("clstm1 unroll", (E, yt.shape[1]), W_x.shape)
        bias = yt @ W_x[E:] + params["b"]
        W_in = W_x[:E]
    else:
        if W_x.shape[0] != E:
            raise ad.ShapeError("unroll", emb.shape, W_x.shape)
        bias = params["b"]
        W_in = W_x
        if kind == "clstm2":
            extra = ad.tanh(_as_label(y) @ params["W_yc"])

    # input projections for every step in one matmul
    proj = ad.reshape(ad.reshape(emb, (B * T, E)) @ W_in, (B, T, 4 * H))
    outputs: list[Tensor] = []
    for t in range(T):
        m = mask[:, t : t + 1]
        if not m.any():
            outputs.append(state.h)
            continue
        new = _gates(params, proj[:, t, :] + bias, state, extra)
        if m.all():
            state = new
        else:
            state = CellState(_masked(new.h, state.h, m), _masked(new.c, state.c, m))
        outputs.append(state.h)
    return outputs, state


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   magic   8 bytes  b"SSVAECK\0"
#   version u32      = 1
#   count   u32      number of entries
#   entry*  u16 name length, utf-8 name, u8 ndim, ndim * u64 dims,
#           prod(dims) * f64 values in row-major order

CKPT_MAGIC = b"SSVAECK\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Mapping[str, Tensor], path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} entries")
    return out
