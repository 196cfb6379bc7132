"""
Per-step operations of the two-party inference protocol.

Each function is one move of one party: it takes that party's context
(backend, own key, fixed-point params, rng) and the material it legally
holds, and returns ciphertexts to ship or plaintext shares to keep. Message
ordering lives in session.py; nothing here touches the wire.

Scales
------
- client input and additive shares: f (FpParams.scale_bits)
- blinded linear results: 2f+g (weights*v encoded at f+g, masks at 2f+g),
  g = FpParams.guard_bits covering the smallest ReLU blinding factor 2^-g
- ReLU: y and relu(y) at f+g, indicators at f, products at 2f+g
- sigmoid/softmax operands: f_nl (exp_fp), products at 2*f_nl

Stage
-----
A stage is one linear layer (Conv or Fc) plus an optional activation and the
mean pools that follow it. Pools in front of the first linear layer are
applied by the client to its own input.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fixedpoint import FpParams, Saturation, encode_vector, requantize
from nn_model import Activation, Conv, Fc, MeanPool, NetworkSpec, ShapeError, layer_output_dims
from packing import CompactLayout, ConvLayout, FcLayout, block_sum, layout_for, relayout_share, weight_vectors
from phe import HeBackend, Owner, PackedPlaintext, PheParams, SecretKey, make_backend

log = logging.getLogger(__name__)

# ERROR frame codes
E_DIGEST = 1
E_ORDER = 2
E_FRAME = 3
E_CRYPTO = 4
E_ABORTED = 5


class ProtocolError(Exception):
    def __init__(self, message: str, code: int = E_CRYPTO):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Configuration and party context
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    phe: PheParams
    fp: FpParams
    exp_fp: FpParams
    backend: str = "rlwe"
    relu_exp_range: Tuple[int, int] = (-4, 4)
    softmax_exp_range: Tuple[int, int] = (-2, 2)
    sigmoid_r1_bound: float = 1.0
    r2_range: Tuple[float, float] = (2.0 ** -8, 2.0 ** -7)
    softmax_r_range: Tuple[float, float] = (4.0, 8.0)
    exp_cap_bits: int = 12
    mask_spread_bits: int = 3
    unsafe_degenerate: bool = False

    def __post_init__(self):
        lo, hi = self.relu_exp_range
        if lo > hi:
            raise ValueError(f"empty relu_exp_range {self.relu_exp_range}")
        if -lo > self.fp.guard_bits:
            raise ValueError(f"relu_exp_range starts at 2^{lo} but fp carries only {self.fp.guard_bits} guard bits")

    @classmethod
    def build(cls, n: int = 4096, plaintext_bits: int = 40, sigma: float = 3.2, scale_bits: int = 10,
              clip_bound: float = 16.0, exp_scale_bits: int = 16, backend: str = "rlwe",
              **knobs) -> "SessionConfig":
        phe = PheParams.generate(n=n, plaintext_bits=plaintext_bits, sigma=sigma)
        # 2^-e blinding factors need e extra bits on the weight grid
        lo, _ = knobs.get("relu_exp_range", cls.relu_exp_range)
        fp = phe.fp(scale_bits, clip_bound, guard_bits=max(0, -int(lo)))
        return cls(phe=phe, fp=fp, exp_fp=fp.with_scale(exp_scale_bits), backend=backend, **knobs)

    @property
    def n(self) -> int:
        return self.phe.n

    @property
    def guard_bits(self) -> int:
        return self.fp.guard_bits

    @property
    def share_bound(self) -> float:
        return self.fp.clip_bound

    @property
    def digest(self) -> bytes:
        text = f"{self.backend}|{self.phe.digest.hex()}|{self.fp.scale_bits}|{self.fp.guard_bits}|{self.exp_fp.scale_bits}"
        return hashlib.sha256(text.encode()).digest()[:8]


@dataclass
class Party:
    role: Owner
    config: SessionConfig
    backend: HeBackend
    key: SecretKey
    rng: np.random.Generator
    saturation: Saturation = field(default_factory=Saturation)

    @property
    def fp(self) -> FpParams:
        return self.config.fp

    @property
    def exp_fp(self) -> FpParams:
        return self.config.exp_fp

    @property
    def n(self) -> int:
        return self.config.n

    def plain(self, values, scale_bits: Optional[int] = None, fp: Optional[FpParams] = None) -> PackedPlaintext:
        return PackedPlaintext.from_values(values, fp or self.fp, self.n, scale_bits=scale_bits)

    def encrypt_values(self, values, fp: Optional[FpParams] = None, saturate: bool = False) -> List:
        fp = fp or self.fp
        layout = CompactLayout(np.size(values), self.n)
        return [self.backend.encrypt(PackedPlaintext.from_values(chunk, fp, self.n, saturate=saturate,
                                                                 saturation=self.saturation), self.key)
                for chunk in layout.expand_input(values)]

    def decrypt_values(self, cts, count: int, fp: Optional[FpParams] = None) -> np.ndarray:
        fp = fp or self.fp
        out = [self.backend.decrypt(ct, self.key).decode(fp) for ct in cts]
        return CompactLayout(count, self.n).gather(out)


def make_party(role: Owner, config: SessionConfig, seed: Optional[int] = None,
               key: Optional[SecretKey] = None) -> Party:
    backend = make_backend(config.backend, config.phe, seed)
    if key is None:
        key = backend.keygen(role, seed if seed is not None else int(np.random.SeedSequence().entropy % 2 ** 32))
    if key.owner != role:
        raise ProtocolError(f"{role.name} party given a {key.owner.name} key", E_CRYPTO)
    if key.params_digest != config.phe.digest:
        raise ProtocolError("key was generated under different parameters", E_DIGEST)
    return Party(role, config, backend, key, np.random.default_rng(seed))


def units_plaintext(units, scale_bits: int, party: Party) -> PackedPlaintext:
    """Integer grid units already at scale_bits -> plaintext, no float round trip."""
    p = party.config.phe.p
    slots = np.zeros(party.n, dtype=np.int64)
    u = np.asarray(units, dtype=np.int64).ravel()
    if u.size and np.abs(u).max() > p // 2:
        raise ProtocolError("mask does not fit the plaintext modulus", E_CRYPTO)
    slots[:u.size] = u % p
    return PackedPlaintext(slots, scale_bits)


def grid_uniform(rng: np.random.Generator, lo: float, hi: float, bits: int, size) -> np.ndarray:
    g = 1 << bits
    return rng.integers(math.ceil(lo * g), math.floor(hi * g) + 1, size=size) / float(g)


# --------------------------------------------------------------------------
# Stage plan
# --------------------------------------------------------------------------

@dataclass
class Stage:
    index: int
    layer: object
    activation: str
    in_dims: Tuple[int, int, int]
    linear_dims: Tuple[int, int, int]
    out_dims: Tuple[int, int, int]
    pools: List[MeanPool]
    layout: object

    @property
    def num_outputs(self) -> int:
        return self.layout.num_outputs

    @property
    def kind(self) -> str:
        return "conv" if isinstance(self.layer, Conv) else "fc"


@dataclass
class StagePlan:
    pre_pools: List[MeanPool]
    input_dims: Tuple[int, int, int]
    stages: List[Stage]

    @property
    def output_size(self) -> int:
        return int(np.prod(self.stages[-1].out_dims))

    def next_layout(self, k: int):
        """Layout that consumes stage k's output; compact for the last stage."""
        if k + 1 < len(self.stages):
            return self.stages[k + 1].layout
        return None


def plan_stages(net: NetworkSpec, n: int) -> StagePlan:
    net.validate()
    dims = tuple(net.input_dims)
    pre_pools, stages = [], []
    current = None
    for layer in net.layers:
        if isinstance(layer, (Conv, Fc)):
            if isinstance(layer, Fc) and math.prod(dims) != layer.n_i:
                raise ShapeError(f"fc expects {layer.n_i} inputs, previous stage yields {dims}")
            fc_dims = (layer.n_i, 1, 1) if isinstance(layer, Fc) else dims
            layout = layout_for(layer, fc_dims, n)
            out = layer_output_dims(layer, dims)
            current = Stage(len(stages), layer, "none", dims, out, out, [], layout)
            stages.append(current)
            dims = out
        elif isinstance(layer, Activation):
            if current is None or current.activation != "none" or current.pools:
                raise ShapeError(f"{layer.kind} must directly follow a conv or fc layer")
            current.activation = layer.kind
        elif isinstance(layer, MeanPool):
            dims = layer_output_dims(layer, dims)
            if current is None:
                pre_pools.append(layer)
            else:
                current.pools.append(layer)
                current.out_dims = dims
    if not stages:
        raise ShapeError(f"network {net.name} has no linear layer")
    return StagePlan(pre_pools, tuple(net.input_dims), stages)


def pool_shares(share, dims, pools: Sequence[MeanPool]):
    """Mean-pool one party's plaintext share; linear, so shares still add up."""
    a = np.asarray(share, dtype=np.float64).reshape(dims)
    for pool in pools:
        rh, rw = pool.region
        c, h, w = a.shape
        h_o, w_o = h // rh, w // rw
        a = a[:, :h_o * rh, :w_o * rw].reshape(c, h_o, rh, w_o, rw).mean(axis=(2, 4))
    return a.ravel(), a.shape


def output_bias(layer, layout) -> np.ndarray:
    if layer.bias is None:
        return np.zeros(layout.num_outputs)
    bias = np.asarray(layer.bias, dtype=np.float64).ravel()
    if isinstance(layout, ConvLayout):
        return np.repeat(bias, layout.blocks_per_channel)
    return bias


# --------------------------------------------------------------------------
# Server-side blinding material
# --------------------------------------------------------------------------

def zero_sum_rows(rng: np.random.Generator, targets, width: int, limit: int, redraws: int = 32) -> np.ndarray:
    """Integer rows in [-limit, limit] whose sums equal targets exactly.

    Each row draws width-1 entries uniformly and closes the sum with the last;
    rows whose closing entry falls outside the range are redrawn. Rows still
    out of range after `redraws` attempts spread the excess evenly and clip.
    Every row is shuffled at the end so no position is distinguished.
    """
    targets = np.asarray(targets, dtype=np.int64)
    rows = targets.size
    x = np.zeros((rows, width), dtype=np.int64)
    todo = np.arange(rows)
    for _ in range(redraws):
        if not todo.size:
            break
        head = rng.integers(-limit, limit + 1, size=(todo.size, width - 1), dtype=np.int64)
        last = targets[todo] - head.sum(axis=1)
        ok = np.abs(last) <= limit
        x[todo[ok], :-1] = head[ok]
        x[todo[ok], -1] = last[ok]
        todo = todo[~ok]
    if todo.size:
        x[todo] = _spread_rows(rng, targets[todo], width, limit)
    return rng.permuted(x, axis=1)


def _spread_rows(rng: np.random.Generator, targets: np.ndarray, width: int, limit: int) -> np.ndarray:
    x = rng.integers(-limit, limit + 1, size=(targets.size, width), dtype=np.int64)
    for _ in range(16):
        excess = targets - x.sum(axis=1)
        if not excess.any():
            return x
        sign = np.sign(excess)[:, None]
        free = np.where(sign > 0, limit - x, x + limit) > 0
        q, rem = np.divmod(np.abs(excess), np.maximum(free.sum(axis=1), 1))
        rank = np.cumsum(free, axis=1) - 1
        x += sign * np.where(free, q[:, None] + (rank < rem[:, None]), 0)
        np.clip(x, -limit, limit, out=x)
    excess = targets - x.sum(axis=1)
    if excess.any():
        log.warning("mask range too narrow for %d block target(s); widening one element", int((excess != 0).sum()))
        x[:, -1] += excess
    return x


@dataclass
class LinearMask:
    """Per-output scaling v and additive mask b (f-grid units) per output ciphertext."""
    v: np.ndarray
    b_units: List[np.ndarray]
    targets: np.ndarray


def gen_linear_mask(party: Party, layout, v, targets) -> LinearMask:
    f = party.fp.scale_bits
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (layout.num_outputs,)).copy()
    targets = np.asarray(targets, dtype=np.float64)
    t_units = np.rint(targets * (1 << f)).astype(np.int64)
    limit = 1 << (f + party.config.mask_spread_bits)
    vectors = []
    for o in range(layout.out_cts):
        ids, slots = layout.block_slots(o)
        vec = np.zeros(party.n, dtype=np.int64)
        if party.config.unsafe_degenerate:
            rows = np.zeros(slots.shape, dtype=np.int64)
            rows[:, 0] = t_units[ids]
        else:
            rows = zero_sum_rows(party.rng, t_units[ids], slots.shape[1], limit)
        vec[slots.ravel()] = rows.ravel()
        vectors.append(vec)
    return LinearMask(v, vectors, t_units / float(1 << f))


@dataclass
class ReluBlinding:
    v1: np.ndarray
    v2: np.ndarray
    id1: np.ndarray
    id2: np.ndarray
    mask: LinearMask
    id1_cts: List = field(default_factory=list, repr=False)
    id2_cts: List = field(default_factory=list, repr=False)


def polar_indicators(v1) -> Tuple[np.ndarray, np.ndarray]:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = 1.0 / v1
    return np.where(v1 > 0, 0.0, v2), np.where(v1 > 0, v2, -v2)


def gen_relu_blinding(party: Party, layout, v1=None) -> ReluBlinding:
    count = layout.num_outputs
    if v1 is None:
        if party.config.unsafe_degenerate:
            v1 = np.ones(count)
        else:
            lo, hi = party.config.relu_exp_range
            e = party.rng.integers(lo, hi + 1, size=count)
            sign = party.rng.choice(np.array([-1.0, 1.0]), size=count)
            v1 = sign * np.ldexp(1.0, e)
    v1 = np.asarray(v1, dtype=np.float64)
    if np.any(v1 == 0):
        raise ProtocolError("blinding factor must be nonzero")
    id1, id2 = polar_indicators(v1)
    mask = gen_linear_mask(party, layout, v1, np.zeros(count))
    blinding = ReluBlinding(v1, 1.0 / v1, id1, id2, mask)
    blinding.id1_cts = party.encrypt_values(id1)
    blinding.id2_cts = party.encrypt_values(id2)
    return blinding


@dataclass
class SigmoidBlinding:
    gain: float
    r1: np.ndarray
    e_r1: np.ndarray
    mask: LinearMask
    e_r1_cts: List = field(default_factory=list, repr=False)


def gen_sigmoid_blinding(party: Party, layout, gain: float = 1.0) -> SigmoidBlinding:
    """gain 1 for sigmoid, 2 for tanh (evaluated as 2*sigmoid(2x) - 1)."""
    count = layout.num_outputs
    bound = 0.0 if party.config.unsafe_degenerate else party.config.sigmoid_r1_bound
    r1 = grid_uniform(party.rng, -bound, bound, party.fp.scale_bits, count)
    e_r1 = requantize_to(np.exp(r1), party.exp_fp.scale_bits)
    mask = gen_linear_mask(party, layout, gain, -r1)
    blinding = SigmoidBlinding(gain, r1, e_r1, mask)
    blinding.e_r1_cts = party.encrypt_values(e_r1, fp=party.exp_fp)
    return blinding


server_sigmoid_blind = gen_sigmoid_blinding


@dataclass
class SoftmaxBlinding:
    v1: np.ndarray
    ln_v1: np.ndarray
    v2: np.ndarray
    mask: LinearMask
    v_cts: List = field(default_factory=list, repr=False)


def gen_softmax_blinding(party: Party, layout) -> SoftmaxBlinding:
    count = layout.num_outputs
    f = party.fp.scale_bits
    if party.config.unsafe_degenerate:
        e = np.zeros(count, dtype=np.int64)
    else:
        lo, hi = party.config.softmax_exp_range
        e = party.rng.integers(lo, hi + 1, size=count)
    # ln v1 must sit on the f grid for exact block targets; v1 follows from it
    ln_v1 = requantize_to(e * math.log(2.0), f)
    v1 = np.exp(ln_v1)
    v2 = requantize_to(1.0 / v1, party.exp_fp.scale_bits)
    mask = gen_linear_mask(party, layout, 1.0, ln_v1)
    blinding = SoftmaxBlinding(v1, ln_v1, v2, mask)
    blinding.v_cts = party.encrypt_values(v2, fp=party.exp_fp)
    return blinding


server_softmax_blind = gen_softmax_blinding


@dataclass
class PassThrough:
    r: np.ndarray
    mask: LinearMask


def gen_passthrough_mask(party: Party, layout, final: bool) -> PassThrough:
    """Linear layer with no activation: the server keeps r, the client learns y - r."""
    count = layout.num_outputs
    if final or party.config.unsafe_degenerate:
        r = np.zeros(count)
    else:
        b = party.config.share_bound
        r = grid_uniform(party.rng, -b, b, party.fp.scale_bits, count)
    return PassThrough(r, gen_linear_mask(party, layout, 1.0, -r))


def requantize_to(values, bits: int) -> np.ndarray:
    g = float(1 << bits)
    return np.floor(np.asarray(values, dtype=np.float64) * g + 0.5) / g


# --------------------------------------------------------------------------
# Linear layers (server)
# --------------------------------------------------------------------------

def _blinded_linear(party: Party, input_cts, layer, layout, mask: LinearMask) -> List:
    """[x']_C -> [x' o k' o v + b]_C per output ciphertext, without any rotation."""
    if len(input_cts) != layout.in_cts:
        raise ShapeError(f"layer expects {layout.in_cts} input ciphertexts, got {len(input_cts)}")
    be, f, g = party.backend, party.fp.scale_bits, party.fp.guard_bits
    bias = output_bias(layer, layout) * mask.v
    out = []
    for o, terms in enumerate(weight_vectors(layer, layout, mask.v)):
        acc = None
        for i, vec in terms:
            prod = be.mul_plain(input_cts[i], party.plain(vec, scale_bits=f + g))
            acc = prod if acc is None else be.add_ct(acc, prod)
        ids, slots = layout.block_slots(o)
        b = mask.b_units[o].astype(np.float64) / float(1 << f)
        b[slots[:, 0]] += bias[ids]
        out.append(be.add_plain(acc, party.plain(b, scale_bits=2 * f + g)))
    return out


def server_linear_conv(party: Party, input_cts, layer: Conv, layout: ConvLayout, mask: LinearMask) -> List:
    if not isinstance(layout, ConvLayout):
        raise ShapeError("conv layer needs a ConvLayout")
    return _blinded_linear(party, input_cts, layer, layout, mask)


def server_fc_linear(party: Party, input_cts, layer: Fc, layout: FcLayout, mask: LinearMask) -> List:
    if not isinstance(layout, FcLayout):
        raise ShapeError("fc layer needs an FcLayout")
    return _blinded_linear(party, input_cts, layer, layout, mask)


def server_linear(party: Party, input_cts, layer, layout, mask: LinearMask) -> List:
    if isinstance(layer, Conv):
        return server_linear_conv(party, input_cts, layer, layout, mask)
    return server_fc_linear(party, input_cts, layer, layout, mask)


# --------------------------------------------------------------------------
# Client: decrypt, block-sum, ReLU via polar indicators
# --------------------------------------------------------------------------

def client_encrypt_input(party: Party, x, layout) -> List:
    """Client's first upload: saturated input in the first layer's layout."""
    vectors = relayout_share(x, layout)
    return [party.backend.encrypt(PackedPlaintext.from_values(v, party.fp, party.n, saturate=True,
                                                              saturation=party.saturation), party.key)
            for v in vectors]


def client_decrypt_and_sum(party: Party, cts, layout, requant: bool = True) -> np.ndarray:
    """Block sums of the blinded linear result; requant folds them onto the f grid."""
    decoded = [party.backend.decrypt(ct, party.key).decode(party.fp) for ct in cts]
    y = block_sum(decoded, layout)
    return requantize(y, party.fp) if requant else y


def client_relu_eval(party: Party, y, id1_cts, id2_cts) -> List:
    """Add(Mult([ID1]_S, y), Mult([ID2]_S, relu(y))) = [relu(Con)]_S at scale 2f+g."""
    be, fy = party.backend, party.fp.scale_bits + party.fp.guard_bits
    y = requantize_to(y, fy)
    layout = CompactLayout(y.size, party.n)
    if len(id1_cts) != layout.ct_count or len(id2_cts) != layout.ct_count:
        raise ProtocolError("indicator ciphertexts do not match the layer width", E_ORDER)
    out = []
    for c, (yc, rc) in enumerate(zip(layout.expand_input(y), layout.expand_input(np.maximum(y, 0.0)))):
        a = be.mul_plain(id1_cts[c], party.plain(yc, scale_bits=fy))
        b = be.mul_plain(id2_cts[c], party.plain(rc, scale_bits=fy))
        out.append(be.add_ct(a, b))
    return out


def draw_share(party: Party, count: int) -> np.ndarray:
    if party.config.unsafe_degenerate:
        return np.zeros(count)
    b = party.config.share_bound
    return grid_uniform(party.rng, -b, b, party.fp.scale_bits, count)


def client_make_shares(party: Party, relu_cts, count: int):
    """-> ([relu - s1]_S to send, s1 kept by the client)."""
    s1 = draw_share(party, count)
    layout = CompactLayout(count, party.n)
    masked = [party.backend.add_plain(ct, party.plain(-chunk, scale_bits=ct.scale_bits))
              for ct, chunk in zip(relu_cts, layout.expand_input(s1))]
    return masked, s1


def server_open_share(party: Party, masked_cts, count: int) -> np.ndarray:
    """Decrypt the client-masked activation; the result is the server's share on the f grid."""
    return requantize(party.decrypt_values(masked_cts, count), party.fp)


def client_encrypt_share(party: Party, share, layout) -> List:
    """Client share re-laid-out for the layer that consumes it (compact when layout is None)."""
    if layout is None:
        return party.encrypt_values(share)
    return [party.backend.encrypt(party.plain(v), party.key) for v in relayout_share(share, layout)]


def server_absorb_shares(party: Party, share_cts, share, layout) -> List:
    """Add the server's plaintext share onto the client's encrypted one: [a']_C in layout."""
    vectors = (CompactLayout(np.size(share), party.n).expand_input(share) if layout is None
               else relayout_share(share, layout))
    if len(vectors) != len(share_cts):
        raise ProtocolError(f"expected {len(vectors)} share ciphertexts, got {len(share_cts)}", E_ORDER)
    return [party.backend.add_plain(ct, party.plain(v)) for ct, v in zip(share_cts, vectors)]


def client_open_result(party: Party, cts, count: int, fp: Optional[FpParams] = None) -> np.ndarray:
    return party.decrypt_values(cts, count, fp)


# --------------------------------------------------------------------------
# Sigmoid / tanh
# --------------------------------------------------------------------------

@dataclass
class ClientSigmoidMaterial:
    r2: np.ndarray
    r2_cts: List = field(default_factory=list, repr=False)


def client_sigmoid_material(party: Party, count: int) -> ClientSigmoidMaterial:
    lo, hi = party.config.r2_range
    r2 = grid_uniform(party.rng, lo, hi, party.exp_fp.scale_bits, count)
    return ClientSigmoidMaterial(r2, party.encrypt_values(r2, fp=party.exp_fp))


def client_sigmoid_eval(party: Party, y, e_r1_cts, material: ClientSigmoidMaterial) -> List:
    """Mult(Add([e^r1]_S, e^-y), r2) per compact ciphertext, scale 2*f_nl."""
    be, efp = party.backend, party.exp_fp
    y = np.asarray(y, dtype=np.float64)
    cap = party.config.exp_cap_bits * math.log(2.0)
    z = np.exp(np.minimum(-y, cap))
    layout = CompactLayout(y.size, party.n)
    if len(e_r1_cts) != layout.ct_count:
        raise ProtocolError("sigmoid material does not match the layer width", E_ORDER)
    out = []
    for c, (zc, rc) in enumerate(zip(layout.expand_input(z), layout.expand_input(material.r2))):
        s = be.add_plain(e_r1_cts[c], party.plain(zc, fp=efp))
        out.append(be.mul_plain(s, party.plain(rc, fp=efp)))
    return out


def server_sigmoid_finish(party: Party, d_cts, blinding: SigmoidBlinding, r2_cts) -> List:
    """d = r2*(e^r1 + e^-y); Mult([r2]_C, e^r1 / d) = [sigmoid(y + r1)]_C at scale 2*f_nl."""
    efp = party.exp_fp
    count = blinding.r1.size
    d = party.decrypt_values(d_cts, count, efp)
    if np.any(d <= 0):
        raise ProtocolError(f"{int((d <= 0).sum())} non-positive sigmoid denominator(s)", E_CRYPTO)
    factor = blinding.e_r1 / d
    layout = CompactLayout(count, party.n)
    return [party.backend.mul_plain(ct, party.plain(fc, fp=efp))
            for ct, fc in zip(r2_cts, layout.expand_input(factor))]


def server_mask_encrypted_activation(party: Party, cts, count: int):
    """[act]_C at 2*f_nl -> ([act - m]_C for the client, m kept by the server)."""
    m = draw_share(party, count)
    efp = party.exp_fp
    layout = CompactLayout(count, party.n)
    masked = [party.backend.add_plain(ct, party.plain(-chunk, scale_bits=2 * efp.scale_bits, fp=efp))
              for ct, chunk in zip(cts, layout.expand_input(m))]
    return masked, m


def client_unmask(party: Party, masked_cts, count: int) -> np.ndarray:
    return requantize(party.decrypt_values(masked_cts, count, party.exp_fp), party.fp)


def tanh_shares(client_share, server_share):
    """Shares of sigmoid(2x) -> shares of tanh(x) = 2*sigmoid(2x) - 1."""
    return 2.0 * np.asarray(client_share), 2.0 * np.asarray(server_share) - 1.0


# --------------------------------------------------------------------------
# Softmax
# --------------------------------------------------------------------------

def client_softmax_eval(party: Party, y, v_cts):
    """-> (part 0: [(v2 o w) + b']_S, part 1: [w]_C) with w = r*e^(y - max y)."""
    be, efp = party.backend, party.exp_fp
    y = np.asarray(y, dtype=np.float64)
    layout = CompactLayout(y.size, party.n)
    if len(v_cts) != layout.ct_count:
        raise ProtocolError("softmax material does not match the layer width", E_ORDER)
    lo, hi = party.config.softmax_r_range
    r = float(grid_uniform(party.rng, lo, hi, efp.scale_bits, 1)[0])
    w = requantize_to(r * np.exp(y - y.max()), efp.scale_bits)
    two = 2 * efp.scale_bits
    limit = 8 << two
    if party.config.unsafe_degenerate or y.size == 1:
        b_units = np.zeros(y.size, dtype=np.int64)
    else:
        b_units = zero_sum_rows(party.rng, [0], y.size, limit)[0]
    part0 = []
    for c, wc in enumerate(layout.expand_input(w)):
        prod = be.mul_plain(v_cts[c], party.plain(wc, fp=efp))
        part0.append(be.add_plain(prod, units_plaintext(b_units[c * party.n:(c + 1) * party.n], two, party)))
    part1 = party.encrypt_values(w, fp=efp)
    return part0, part1


def server_softmax_finish(party: Party, part0, part1, blinding: SoftmaxBlinding) -> List:
    """D = r*sum(e^Con)*e^-max; Mult([w]_C, 1/(v1 o D)) = [softmax(Con)]_C at scale 2*f_nl."""
    efp = party.exp_fp
    count = blinding.v1.size
    d = float(party.decrypt_values(part0, count, efp).sum())
    if not d > 0:
        raise ProtocolError("non-positive softmax denominator", E_CRYPTO)
    factor = 1.0 / (blinding.v1 * d)
    layout = CompactLayout(count, party.n)
    return [party.backend.mul_plain(ct, party.plain(fc, fp=efp))
            for ct, fc in zip(part1, layout.expand_input(factor))]
