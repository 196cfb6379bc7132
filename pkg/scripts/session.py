"""
Client and server state machines for one secure inference.

Message flow per session:

    HELLO <-> HELLO                                 digests must match
    server: INDICATORS per stage                    offline
    client: INDICATORS(R2) per sigmoid/tanh stage   offline
    client: CT_UPLOAD(0)
    per stage k:
      server: BLINDED_LINEAR(k)
      relu     client: NONLINEAR_SHARE(k)
      sigmoid  client: NONLINEAR_SHARE(k)  server: MASKED_SHARE(k)
      softmax  client: NONLINEAR_SHARE(k, part 0 and 1)  server: RESULT(k)  (end)
      client: CT_UPLOAD(k+1) with its share in the next layout
    last stage: client CT_UPLOAD(K) compact, server RESULT(K); a last
    stage without activation leaves the logits with the client directly.

Any exception sends an ERROR frame with a numeric code before it propagates.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fixedpoint import EncodingOverflow
from nn_model import NetworkSpec, ShapeError
from packing import CompactLayout
from phe import OpCounters, Owner, ParameterError, PheError, SecretKey
from protocol import (E_ABORTED, E_CRYPTO, E_DIGEST, E_FRAME, E_ORDER, Party, ProtocolError, SessionConfig,
                      client_decrypt_and_sum, client_encrypt_input, client_encrypt_share, client_make_shares,
                      client_open_result, client_relu_eval, client_sigmoid_eval, client_sigmoid_material,
                      client_softmax_eval, client_unmask, gen_passthrough_mask, gen_relu_blinding,
                      gen_sigmoid_blinding, gen_softmax_blinding, make_party, plan_stages, pool_shares,
                      server_absorb_shares, server_linear, server_mask_encrypted_activation, server_open_share,
                      server_sigmoid_finish, server_softmax_finish, tanh_shares)
from transport import (ByteCounters, Channel, FrameError, Message, MsgType, PeerError, ProtocolViolation,
                       TransportClosed, TransportError, Which, loopback_pair)

log = logging.getLogger(__name__)

SMOOTH = ("sigmoid", "tanh")


def error_code(exc: BaseException) -> int:
    if isinstance(exc, (ProtocolError, PeerError, ProtocolViolation)):
        return exc.code
    if isinstance(exc, FrameError):
        return E_FRAME
    if isinstance(exc, TransportClosed):
        return E_ABORTED
    if isinstance(exc, ParameterError):
        return E_DIGEST
    if isinstance(exc, (PheError, EncodingOverflow)):
        return E_CRYPTO
    return E_FRAME


@dataclass
class StageStats:
    index: int
    kind: str
    activation: str
    ops: OpCounters = field(default_factory=OpCounters)
    bytes: ByteCounters = field(default_factory=ByteCounters)
    seconds: float = 0.0


@dataclass
class PartyReport:
    role: str
    stages: List[StageStats]
    total: OpCounters
    bytes: ByteCounters
    offline_ops: OpCounters
    seconds: float
    saturation: int = 0


@dataclass
class InferenceResult:
    scores: np.ndarray
    client: PartyReport
    server: Optional[PartyReport] = None

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))


class _Session:
    role = Owner.CLIENT

    def __init__(self, net: NetworkSpec, config: SessionConfig, key: Optional[SecretKey] = None,
                 seed: Optional[int] = None):
        self.net = net
        self.config = config
        self.party: Party = make_party(self.role, config, seed=seed, key=key)
        self.plan = plan_stages(net, config.n)
        self.stats: List[StageStats] = []
        self.offline_ops = OpCounters()

    # -- wire helpers ------------------------------------------------------
    def _send_cts(self, ch: Channel, msg_type: MsgType, layer: int, cts, which: int = 0):
        be = self.party.backend
        for seq, ct in enumerate(cts):
            ch.send(Message(msg_type, layer=layer, seq=seq, which=which, data=be.serialize(ct)))

    def _recv_cts(self, ch: Channel, msg_type: MsgType, layer: int, count: int, owner: Owner,
                  which: Optional[int] = None) -> list:
        out = []
        for seq in range(count):
            msg = ch.expect(msg_type, layer, which)
            if msg.seq != seq:
                raise ProtocolViolation(f"{msg.describe()} out of sequence (expected seq {seq})")
            try:
                ct = self.party.backend.deserialize(msg.data)
            except ValueError as e:
                raise ProtocolError(f"malformed ciphertext in {msg.describe()}: {e}", E_FRAME) from e
            if ct.owner != owner:
                raise ProtocolError(f"{msg.describe()} carries a {ct.owner.name}-owned ciphertext", E_CRYPTO)
            out.append(ct)
        return out

    def _compact_count(self, count: int) -> int:
        return CompactLayout(count, self.config.n).ct_count

    def _handshake(self, ch: Channel, hello: Message):
        params_digest, net_digest = hello.digests
        if params_digest != self.config.digest:
            raise ProtocolError("session parameters differ between client and server", E_DIGEST)
        if net_digest != self.net.digest:
            raise ProtocolError(f"network digest mismatch for {self.net.name}", E_DIGEST)

    def _hello(self) -> Message:
        return Message.hello(self.config.digest, self.net.digest)

    # -- stage bookkeeping ---------------------------------------------------
    def _begin(self, ch: Channel):
        self._t0 = time.perf_counter()
        self._ops0 = self.party.backend.counters_snapshot()
        self._bytes0 = ch.counters.snapshot()

    def _end(self, ch: Channel, stage):
        st = StageStats(stage.index, stage.kind, stage.activation,
                        self.party.backend.counters_snapshot() - self._ops0,
                        ch.counters.snapshot() - self._bytes0,
                        time.perf_counter() - self._t0)
        self.stats.append(st)
        log.debug("%s stage %d (%s+%s): mult=%d add=%d perm=%d %.3fs", self.role.name.lower(), stage.index,
                  stage.kind, stage.activation, st.ops.mult, st.ops.add, st.ops.perm, st.seconds)

    def report(self, ch: Channel, seconds: float) -> PartyReport:
        return PartyReport(self.role.name.lower(), self.stats, self.party.backend.counters_snapshot(),
                           ch.counters.snapshot(), self.offline_ops, seconds, self.party.saturation.count)

    def run(self, ch: Channel, *args):
        t0 = time.perf_counter()
        try:
            result = self._run(ch, *args)
        except PeerError:
            raise
        except (ProtocolError, TransportError, PheError, EncodingOverflow, ValueError) as e:
            code = error_code(e)
            log.error("%s aborting session: %s (code %d)", self.role.name.lower(), e, code)
            if not isinstance(e, TransportClosed):
                ch.send_error(code, str(e))
            raise
        finally:
            ch.close()
        return result, self.report(ch, time.perf_counter() - t0)

    def _run(self, ch: Channel, *args):
        raise NotImplementedError


class ServerSession(_Session):
    """Holds the weights; never sees the client's input or its key."""

    role = Owner.SERVER

    def __init__(self, net: NetworkSpec, config: SessionConfig, key: Optional[SecretKey] = None,
                 seed: Optional[int] = None):
        if not net.has_weights():
            raise ShapeError(f"server network {net.name} has no weights")
        super().__init__(net, config, key, seed)

    def _offline(self, ch: Channel) -> list:
        party, stages = self.party, self.plan.stages
        material = []
        for stage in stages:
            act, layout = stage.activation, stage.layout
            if act == "relu":
                b = gen_relu_blinding(party, layout)
                self._send_cts(ch, MsgType.INDICATORS, stage.index, b.id1_cts, Which.ID1)
                self._send_cts(ch, MsgType.INDICATORS, stage.index, b.id2_cts, Which.ID2)
            elif act in SMOOTH:
                b = gen_sigmoid_blinding(party, layout, gain=2.0 if act == "tanh" else 1.0)
                self._send_cts(ch, MsgType.INDICATORS, stage.index, b.e_r1_cts, Which.E_R1)
            elif act == "softmax":
                b = gen_softmax_blinding(party, layout)
                self._send_cts(ch, MsgType.INDICATORS, stage.index, b.v_cts, Which.V_VEC)
            else:
                b = gen_passthrough_mask(party, layout, final=stage.index == len(stages) - 1)
            material.append(b)
        r2 = {}
        for stage in stages:
            if stage.activation in SMOOTH:
                r2[stage.index] = self._recv_cts(ch, MsgType.INDICATORS, stage.index,
                                                 self._compact_count(stage.num_outputs), Owner.CLIENT, Which.R2)
        return material, r2

    def _run(self, ch: Channel):
        hello = ch.expect(MsgType.HELLO)
        self._handshake(ch, hello)
        ch.send(self._hello())
        log.info("session for %s accepted (%d stages)", self.net.name, len(self.plan.stages))

        material, r2 = self._offline(ch)
        self.offline_ops = self.party.backend.counters_snapshot()
        stages = self.plan.stages
        first = stages[0]
        inputs = self._recv_cts(ch, MsgType.CT_UPLOAD, 0, first.layout.in_cts, Owner.CLIENT)

        for stage in stages:
            self._begin(ch)
            k, act, b = stage.index, stage.activation, material[stage.index]
            out = server_linear(self.party, inputs, stage.layer, stage.layout, b.mask)
            self._send_cts(ch, MsgType.BLINDED_LINEAR, k, out)
            count = stage.num_outputs
            nct = self._compact_count(count)

            if act == "softmax":
                part0 = self._recv_cts(ch, MsgType.NONLINEAR_SHARE, k, nct, Owner.SERVER, 0)
                part1 = self._recv_cts(ch, MsgType.NONLINEAR_SHARE, k, nct, Owner.CLIENT, 1)
                self._send_cts(ch, MsgType.RESULT, k, server_softmax_finish(self.party, part0, part1, b))
                self._end(ch, stage)
                return None
            if act == "relu":
                masked = self._recv_cts(ch, MsgType.NONLINEAR_SHARE, k, nct, Owner.SERVER, 0)
                share = server_open_share(self.party, masked, count)
            elif act in SMOOTH:
                d = self._recv_cts(ch, MsgType.NONLINEAR_SHARE, k, nct, Owner.SERVER, 0)
                act_cts = server_sigmoid_finish(self.party, d, b, r2[k])
                masked, share = server_mask_encrypted_activation(self.party, act_cts, count)
                self._send_cts(ch, MsgType.MASKED_SHARE, k, masked)
                if act == "tanh":
                    _, share = tanh_shares(0.0, share)
            else:
                share = b.r
            share, _ = pool_shares(share, stage.linear_dims, stage.pools)

            nxt = self.plan.next_layout(k)
            if nxt is None:
                if act != "none":
                    final = len(stages)
                    cts = self._recv_cts(ch, MsgType.CT_UPLOAD, final, self._compact_count(share.size), Owner.CLIENT)
                    self._send_cts(ch, MsgType.RESULT, final, server_absorb_shares(self.party, cts, share, None))
                self._end(ch, stage)
                return None
            cts = self._recv_cts(ch, MsgType.CT_UPLOAD, k + 1, nxt.in_cts, Owner.CLIENT)
            inputs = server_absorb_shares(self.party, cts, share, nxt)
            self._end(ch, stage)
        return None


class ClientSession(_Session):
    """Holds the input; sees the architecture but no weights."""

    role = Owner.CLIENT

    def _offline(self, ch: Channel):
        material = {}
        for stage in self.plan.stages:
            nct = self._compact_count(stage.num_outputs)
            if stage.activation == "relu":
                id1 = self._recv_cts(ch, MsgType.INDICATORS, stage.index, nct, Owner.SERVER, Which.ID1)
                id2 = self._recv_cts(ch, MsgType.INDICATORS, stage.index, nct, Owner.SERVER, Which.ID2)
                material[stage.index] = (id1, id2)
            elif stage.activation in SMOOTH:
                material[stage.index] = self._recv_cts(ch, MsgType.INDICATORS, stage.index, nct,
                                                       Owner.SERVER, Which.E_R1)
            elif stage.activation == "softmax":
                material[stage.index] = self._recv_cts(ch, MsgType.INDICATORS, stage.index, nct,
                                                       Owner.SERVER, Which.V_VEC)
        r2 = {}
        for stage in self.plan.stages:
            if stage.activation in SMOOTH:
                r2[stage.index] = client_sigmoid_material(self.party, stage.num_outputs)
                self._send_cts(ch, MsgType.INDICATORS, stage.index, r2[stage.index].r2_cts, Which.R2)
        return material, r2

    def _run(self, ch: Channel, x):
        party, plan = self.party, self.plan
        x = np.asarray(x, dtype=np.float64)
        if x.size != int(np.prod(plan.input_dims)):
            raise ShapeError(f"input has {x.size} values, network expects {plan.input_dims}")
        ch.send(self._hello())
        self._handshake(ch, ch.expect(MsgType.HELLO))

        material, r2 = self._offline(ch)
        self.offline_ops = party.backend.counters_snapshot()
        x, _ = pool_shares(x, plan.input_dims, plan.pre_pools)
        stages = plan.stages

        self._begin(ch)
        self._send_cts(ch, MsgType.CT_UPLOAD, 0, client_encrypt_input(party, x, stages[0].layout))
        for stage in stages:
            if stage.index:
                self._begin(ch)
            k, act = stage.index, stage.activation
            count = stage.num_outputs
            nct = self._compact_count(count)
            blinded = self._recv_cts(ch, MsgType.BLINDED_LINEAR, k, stage.layout.out_cts, Owner.CLIENT)
            y = client_decrypt_and_sum(party, blinded, stage.layout, requant=act == "none")

            if act == "softmax":
                part0, part1 = client_softmax_eval(party, y, material[k])
                self._send_cts(ch, MsgType.NONLINEAR_SHARE, k, part0, 0)
                self._send_cts(ch, MsgType.NONLINEAR_SHARE, k, part1, 1)
                res = self._recv_cts(ch, MsgType.RESULT, k, nct, Owner.CLIENT)
                self._end(ch, stage)
                return client_open_result(party, res, count, party.exp_fp)
            if act == "relu":
                id1, id2 = material[k]
                masked, share = client_make_shares(party, client_relu_eval(party, y, id1, id2), count)
                self._send_cts(ch, MsgType.NONLINEAR_SHARE, k, masked, 0)
            elif act in SMOOTH:
                self._send_cts(ch, MsgType.NONLINEAR_SHARE, k, client_sigmoid_eval(party, y, material[k], r2[k]), 0)
                masked = self._recv_cts(ch, MsgType.MASKED_SHARE, k, nct, Owner.CLIENT)
                share = client_unmask(party, masked, count)
                if act == "tanh":
                    share, _ = tanh_shares(share, 0.0)
            else:
                share = y
            share, _ = pool_shares(share, stage.linear_dims, stage.pools)

            nxt = plan.next_layout(k)
            if nxt is None:
                if act == "none":
                    self._end(ch, stage)
                    return share
                final = len(stages)
                self._send_cts(ch, MsgType.CT_UPLOAD, final, client_encrypt_share(party, share, None))
                res = self._recv_cts(ch, MsgType.RESULT, final, self._compact_count(share.size), Owner.CLIENT)
                self._end(ch, stage)
                return client_open_result(party, res, share.size)
            self._send_cts(ch, MsgType.CT_UPLOAD, k + 1, client_encrypt_share(party, share, nxt))
            self._end(ch, stage)
        raise ProtocolError("stage plan ended without a result", E_ORDER)


def run_secure_inference(net: NetworkSpec, x, config: SessionConfig, *,
                         client_key: Optional[SecretKey] = None, server_key: Optional[SecretKey] = None,
                         client_seed: Optional[int] = None, server_seed: Optional[int] = None,
                         timeout: float = 600.0) -> InferenceResult:
    """Both parties in one process over a loopback channel pair; the server runs on a worker thread."""
    server = ServerSession(net, config, key=server_key, seed=server_seed)
    client = ClientSession(net.public(), config, key=client_key, seed=client_seed)
    client_ch, server_ch = loopback_pair(timeout)
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="cheetah-server") as pool:
        fut = pool.submit(server.run, server_ch)
        try:
            scores, client_report = client.run(client_ch, x)
        except PeerError:
            # the server's own exception carries the root cause
            fut.result()
            raise
        _, server_report = fut.result()
    log.info("inference on %s done: client sent %d bytes, received %d bytes", net.name,
             client_report.bytes.sent, client_report.bytes.received)
    return InferenceResult(np.asarray(scores, dtype=np.float64), client_report, server_report)
