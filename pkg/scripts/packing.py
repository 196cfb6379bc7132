"""
Slot layouts for permutation-free packed linear layers.

Convolution: every output position i owns a block of k_p*k_q slots holding
its receptive field (taps in row-major (u, v) order, out-of-image taps are
zero-fill). Blocks are row-major by output position; channels sit at the same
offsets in different ciphertexts so channel sums are slotwise add_ct.

  slot(j, i, tap) = (j % cpc) * bps * r2 + (i % bps) * r2 + tap
  ct(j, i)        = (j // cpc) * segments + i // bps

with cpc channels per ciphertext, bps blocks per ciphertext (all blocks of
a channel unless the channel has to be split into segments).

Fully connected: output row i owns the n_i-slot block i; the input vector is
repeated once per row held by a ciphertext.

Compact: one value per slot in order, used for indicators, shares and results.

Layouts derive deterministically from the public architecture, so client and
server build identical ones and never exchange them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from nn_model import Conv, Fc, ShapeError, conv_geometry


@dataclass
class CompactLayout:
    count: int
    n: int

    @property
    def ct_count(self) -> int:
        return max(1, -(-self.count // self.n))

    @property
    def in_cts(self) -> int:
        return self.ct_count

    @property
    def num_outputs(self) -> int:
        return self.count

    def expand_input(self, values) -> List[np.ndarray]:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size != self.count:
            raise ShapeError(f"expected {self.count} values, got {v.size}")
        out = []
        for c in range(self.ct_count):
            vec = np.zeros(self.n)
            chunk = v[c * self.n:(c + 1) * self.n]
            vec[:chunk.size] = chunk
            out.append(vec)
        return out

    def gather(self, vectors) -> np.ndarray:
        return np.concatenate([np.asarray(v, dtype=np.float64) for v in vectors])[:self.count]

    def chunk_len(self, c: int) -> int:
        return min(self.n, self.count - c * self.n)


@dataclass
class ConvLayout:
    w_i: int
    h_i: int
    c_i: int
    c_o: int
    k_p: int
    k_q: int
    stride: int
    n: int
    h_o: int
    w_o: int
    pad_top: int
    pad_left: int
    block_size: int
    blocks_per_channel: int
    channels_per_ct: int
    blocks_per_ct: int
    segments: int
    ct_count: int
    src: np.ndarray = field(repr=False)
    chan: np.ndarray = field(repr=False)
    block: np.ndarray = field(repr=False)
    tap: np.ndarray = field(repr=False)
    seg_slots: List[np.ndarray] = field(repr=False)

    @property
    def groups(self) -> int:
        return -(-self.c_i // self.channels_per_ct)

    @property
    def in_cts(self) -> int:
        return self.ct_count

    @property
    def out_cts(self) -> int:
        return self.c_o * self.segments

    @property
    def num_outputs(self) -> int:
        return self.c_o * self.blocks_per_channel

    @property
    def input_dims(self) -> Tuple[int, int, int]:
        return self.c_i, self.h_i, self.w_i

    def slot_of(self, j: int, i: int, tap: int) -> Tuple[int, int]:
        cpc, bps, r2 = self.channels_per_ct, self.blocks_per_ct, self.block_size
        return (j // cpc) * self.segments + i // bps, (j % cpc) * bps * r2 + (i % bps) * r2 + tap

    def entry_at(self, ct: int, slot: int) -> Optional[Tuple[int, int, int, bool]]:
        """(channel, output index, tap, zero_fill) or None for an unused slot."""
        if self.chan[ct, slot] < 0:
            return None
        return (int(self.chan[ct, slot]), int(self.block[ct, slot]), int(self.tap[ct, slot]),
                bool(self.src[ct, slot] < 0))

    def block_slots(self, o: int) -> Tuple[np.ndarray, np.ndarray]:
        """Compact output ids and their slot blocks (rows) for output ciphertext o."""
        t, s = divmod(o, self.segments)
        slots = self.seg_slots[s]
        ids = t * self.blocks_per_channel + s * self.blocks_per_ct + np.arange(slots.shape[0])
        return ids, slots

    def linear_terms(self, o: int) -> List[int]:
        s = o % self.segments
        return [g * self.segments + s for g in range(self.groups)]


@dataclass
class FcLayout:
    n_i: int
    n_o: int
    n: int
    block_size: int
    rows_per_ct: int
    ct_count: int

    @property
    def repeats(self) -> int:
        return min(self.rows_per_ct, self.n_o)

    @property
    def in_cts(self) -> int:
        return 1

    @property
    def out_cts(self) -> int:
        return self.ct_count

    @property
    def num_outputs(self) -> int:
        return self.n_o

    def slot_of(self, row: int, j: int) -> Tuple[int, int]:
        return row // self.rows_per_ct, (row % self.rows_per_ct) * self.n_i + j

    def entry_at(self, ct: int, slot: int) -> Optional[Tuple[int, int]]:
        r, j = divmod(slot, self.n_i)
        row = ct * self.rows_per_ct + r
        if r >= self.rows_per_ct or row >= self.n_o:
            return None
        return row, j

    def rows_in(self, o: int) -> np.ndarray:
        return np.arange(o * self.rows_per_ct, min(self.n_o, (o + 1) * self.rows_per_ct))

    def block_slots(self, o: int) -> Tuple[np.ndarray, np.ndarray]:
        rows = self.rows_in(o)
        local = rows - o * self.rows_per_ct
        return rows, local[:, None] * self.n_i + np.arange(self.n_i)[None, :]

    def linear_terms(self, o: int) -> List[int]:
        return [0]


def build_conv_layout(w_i: int, h_i: int, c_i: int, conv: Conv, n: int) -> ConvLayout:
    r2 = conv.k_p * conv.k_q
    if r2 > n:
        raise ShapeError(f"{conv.k_p}x{conv.k_q} kernel needs {r2} slots, only {n} available")
    if conv.stride not in (1, 2):
        raise ShapeError(f"stride {conv.stride} is not supported (1 or 2)")
    if conv.c_i != c_i:
        raise ShapeError(f"conv expects {conv.c_i} channels, got {c_i}")
    h_o, w_o, top, left = conv_geometry(h_i, w_i, conv)
    hw = h_o * w_o
    channel_slots = hw * r2
    if channel_slots <= n:
        cpc, bps, segments = min(c_i, n // channel_slots), hw, 1
    else:
        cpc, bps = 1, n // r2
        segments = -(-hw // bps)
    ct_count = -(-c_i // cpc) * segments

    J, I, T = (a.ravel() for a in np.meshgrid(np.arange(c_i), np.arange(hw), np.arange(r2), indexing="ij"))
    ct = (J // cpc) * segments + I // bps
    slot = (J % cpc) * bps * r2 + (I % bps) * r2 + T
    row = (I // w_o) * conv.stride - top + T // conv.k_q
    col = (I % w_o) * conv.stride - left + T % conv.k_q
    inside = (row >= 0) & (row < h_i) & (col >= 0) & (col < w_i)

    shape = (ct_count, n)
    src = np.full(shape, -1, dtype=np.int64)
    chan = np.full(shape, -1, dtype=np.int64)
    block = np.full(shape, -1, dtype=np.int64)
    tap = np.full(shape, -1, dtype=np.int64)
    src[ct, slot] = np.where(inside, J * h_i * w_i + row * w_i + col, -1)
    chan[ct, slot] = J
    block[ct, slot] = I
    tap[ct, slot] = T

    seg_slots = []
    for s in range(segments):
        nb = min(bps, hw - s * bps)
        LB, LC, TT = np.meshgrid(np.arange(nb), np.arange(cpc), np.arange(r2), indexing="ij")
        seg_slots.append((LC * bps * r2 + LB * r2 + TT).reshape(nb, cpc * r2))

    return ConvLayout(w_i=w_i, h_i=h_i, c_i=c_i, c_o=conv.c_o, k_p=conv.k_p, k_q=conv.k_q,
                      stride=conv.stride, n=n, h_o=h_o, w_o=w_o, pad_top=top, pad_left=left,
                      block_size=r2, blocks_per_channel=hw, channels_per_ct=cpc, blocks_per_ct=bps,
                      segments=segments, ct_count=ct_count, src=src, chan=chan, block=block, tap=tap,
                      seg_slots=seg_slots)


def build_fc_layout(n_i: int, n_o: int, n: int) -> FcLayout:
    if n_i > n:
        raise ShapeError(f"fc input of {n_i} does not fit {n} slots")
    if n_i < 1 or n_o < 1:
        raise ShapeError("fc dims must be positive")
    rows_per_ct = n // n_i
    return FcLayout(n_i=n_i, n_o=n_o, n=n, block_size=n_i, rows_per_ct=rows_per_ct,
                    ct_count=-(-n_o // rows_per_ct))


def expand_input(x, layout: ConvLayout) -> List[np.ndarray]:
    flat = np.asarray(x, dtype=np.float64).ravel()
    if flat.size != layout.c_i * layout.h_i * layout.w_i:
        raise ShapeError(f"input has {flat.size} values, layout expects {layout.input_dims}")
    vals = np.where(layout.src >= 0, flat[np.clip(layout.src, 0, None)], 0.0)
    return list(vals)


def expand_kernel(k, t: int, layout: ConvLayout, v=1.0) -> List[np.ndarray]:
    """k'_t scaled per output block by v (length blocks_per_channel or scalar)."""
    kt = np.asarray(k, dtype=np.float64).reshape(layout.c_o, layout.c_i, layout.block_size)[t]
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (layout.blocks_per_channel,))
    used = layout.src >= 0
    jj = np.clip(layout.chan, 0, None)
    tt = np.clip(layout.tap, 0, None)
    ii = np.clip(layout.block, 0, None)
    vals = np.where(used, kt[jj, tt] * v[ii], 0.0)
    return list(vals)


def expand_fc_input(x, layout: FcLayout) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != layout.n_i:
        raise ShapeError(f"fc expects {layout.n_i} inputs, got {x.size}")
    vec = np.zeros(layout.n)
    vec[:layout.repeats * layout.n_i] = np.tile(x, layout.repeats)
    return vec


def expand_fc_weights(w, layout: FcLayout, v=1.0) -> List[np.ndarray]:
    w = np.asarray(w, dtype=np.float64).reshape(layout.n_o, layout.n_i)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (layout.n_o,))
    out = []
    for o in range(layout.ct_count):
        rows = layout.rows_in(o)
        vec = np.zeros(layout.n)
        vec[:rows.size * layout.n_i] = (w[rows] * v[rows, None]).ravel()
        out.append(vec)
    return out


def block_sum(decoded, layout) -> np.ndarray:
    """Per-output sums over each block; one decoded vector per output ciphertext."""
    if len(decoded) != layout.out_cts:
        raise ShapeError(f"expected {layout.out_cts} vectors, got {len(decoded)}")
    y = np.zeros(layout.num_outputs)
    for o, vec in enumerate(decoded):
        ids, slots = layout.block_slots(o)
        y[ids] += np.asarray(vec, dtype=np.float64)[slots].sum(axis=1)
    return y


def weight_vectors(layer, layout, v) -> List[List[Tuple[int, np.ndarray]]]:
    """Per output ciphertext: (input ct index, plaintext operand) pairs."""
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (layout.num_outputs,))
    if isinstance(layout, ConvLayout):
        hw = layout.blocks_per_channel
        per_kernel = [expand_kernel(layer.weight, t, layout, v[t * hw:(t + 1) * hw]) for t in range(layout.c_o)]
        return [[(i, per_kernel[o // layout.segments][i]) for i in layout.linear_terms(o)]
                for o in range(layout.out_cts)]
    vecs = expand_fc_weights(layer.weight, layout, v)
    return [[(0, vecs[o])] for o in range(layout.out_cts)]


def layout_for(layer, in_dims, n: int):
    c, h, w = in_dims
    if isinstance(layer, Conv):
        return build_conv_layout(w, h, c, layer, n)
    if isinstance(layer, Fc):
        return build_fc_layout(layer.n_i, layer.n_o, n)
    raise ShapeError(f"no slot layout for {layer!r}")


def relayout_share(share, layout) -> List[np.ndarray]:
    """Plaintext share -> slot vectors of the layout that consumes it next."""
    if isinstance(layout, ConvLayout):
        return expand_input(share, layout)
    if isinstance(layout, FcLayout):
        return [expand_fc_input(share, layout)]
    return layout.expand_input(share)
