import socket
import threading

import pytest

from transport import (CRC, CT_FRAME_OVERHEAD, HEADER, BadCrc, BadMagic, ByteCounters, LengthError, Message, MsgType,
                       PeerError, ProtocolViolation, TransportClosed, UnknownMessage, Which, connect,
                       decode_payload, frame_decode, frame_encode, loopback_pair, make_server, parse_endpoint)


class TestFrames:
    @pytest.mark.parametrize("msg", [
        Message.hello(b"A" * 8, b"B" * 8),
        Message(MsgType.CT_UPLOAD, layer=3, seq=7, data=b"\x01\x02\x03"),
        Message(MsgType.INDICATORS, layer=1, which=Which.ID2, seq=0, data=b"xyz"),
        Message(MsgType.NONLINEAR_SHARE, layer=2, which=1, seq=4, data=b""),
        Message.error(4, "decryption failed"),
    ])
    def test_round_trip(self, msg):
        assert frame_decode(frame_encode(msg)) == msg

    def test_ciphertext_overhead(self):
        frame = frame_encode(Message(MsgType.BLINDED_LINEAR, data=b"\x00" * 100))
        assert len(frame) == 100 + CT_FRAME_OVERHEAD == 120

    def test_bad_magic(self):
        frame = bytearray(frame_encode(Message.hello(b"A" * 8, b"B" * 8)))
        frame[0:4] = b"XXXX"
        with pytest.raises(BadMagic):
            frame_decode(bytes(frame))

    def test_bad_crc(self):
        frame = bytearray(frame_encode(Message(MsgType.RESULT, data=b"payload")))
        frame[HEADER.size + 7] ^= 0x01
        with pytest.raises(BadCrc):
            frame_decode(bytes(frame))

    def test_length_mismatch(self):
        frame = frame_encode(Message(MsgType.RESULT, data=b"payload"))
        with pytest.raises(LengthError):
            frame_decode(frame[:-1])
        with pytest.raises(LengthError):
            frame_decode(frame[:HEADER.size - 1])

    def test_unknown_type(self):
        with pytest.raises(UnknownMessage):
            decode_payload(99, b"")

    def test_short_hello(self):
        with pytest.raises(LengthError):
            decode_payload(MsgType.HELLO, b"\x00" * 10)

    def test_crc_covers_type_byte(self):
        frame = bytearray(frame_encode(Message(MsgType.CT_UPLOAD, data=b"abc")))
        frame[5] = MsgType.RESULT
        with pytest.raises(BadCrc):
            frame_decode(bytes(frame))
        assert CRC.size == 4


class TestByteCounters:
    def test_online_offline_split(self):
        c = ByteCounters()
        c.record(True, Message.hello(b"A" * 8, b"B" * 8), 30)
        c.record(False, Message(MsgType.INDICATORS, layer=0), 100)
        c.record(True, Message(MsgType.CT_UPLOAD, layer=0), 50)
        c.record(False, Message(MsgType.BLINDED_LINEAR, layer=0), 60)
        assert (c.sent, c.received, c.offline, c.online) == (80, 160, 130, 110)
        assert c.layer_bytes(0, "CT_UPLOAD", "BLINDED_LINEAR") == 110
        assert c.by_layer[0] == 110

    def test_difference(self):
        c = ByteCounters()
        c.record(True, Message(MsgType.CT_UPLOAD, layer=0), 50)
        before = c.snapshot()
        c.record(True, Message(MsgType.CT_UPLOAD, layer=1), 70)
        delta = c - before
        assert delta.sent == 70 and delta.layer_bytes(1, "CT_UPLOAD") == 70
        assert delta.layer_bytes(0, "CT_UPLOAD") == 0


class TestLoopback:
    def test_messages_and_counts(self):
        client, server = loopback_pair(timeout=5)
        msg = Message(MsgType.CT_UPLOAD, layer=0, seq=1, data=b"\x00" * 32)
        client.send(msg)
        assert server.expect(MsgType.CT_UPLOAD, layer=0) == msg
        assert client.counters.sent == server.counters.received == 32 + CT_FRAME_OVERHEAD

    def test_out_of_order(self):
        client, server = loopback_pair(timeout=5)
        client.send(Message(MsgType.RESULT, layer=2))
        with pytest.raises(ProtocolViolation):
            server.expect(MsgType.CT_UPLOAD)

    def test_wrong_layer(self):
        client, server = loopback_pair(timeout=5)
        client.send(Message(MsgType.CT_UPLOAD, layer=2))
        with pytest.raises(ProtocolViolation):
            server.expect(MsgType.CT_UPLOAD, layer=1)

    def test_peer_error_raised(self):
        client, server = loopback_pair(timeout=5)
        server.send_error(1, "digest mismatch")
        with pytest.raises(PeerError) as e:
            client.recv()
        assert e.value.code == 1 and "digest" in e.value.text

    def test_close_wakes_peer(self):
        client, server = loopback_pair(timeout=5)
        server.close()
        with pytest.raises(TransportClosed):
            client.recv()

    def test_timeout(self):
        client, _ = loopback_pair(timeout=0.05)
        with pytest.raises(TransportClosed):
            client.recv()


class TestSockets:
    def test_endpoint_parsing(self):
        assert parse_endpoint("10.0.0.1:9000") == ("10.0.0.1", 9000)
        assert parse_endpoint(":9000") == ("127.0.0.1", 9000)
        assert parse_endpoint("host") == ("host", 7462)
        with pytest.raises(ValueError):
            parse_endpoint("host:port")

    def test_hello_echo(self):
        def echo(ch):
            ch.send(ch.expect(MsgType.HELLO))

        server = make_server("127.0.0.1:0", echo, timeout=5)
        host, port = server.server_address[:2]
        t = threading.Thread(target=server.handle_request)
        t.start()
        try:
            ch = connect(f"{host}:{port}", timeout=5)
            hello = Message.hello(b"P" * 8, b"N" * 8)
            ch.send(hello)
            assert ch.expect(MsgType.HELLO).digests == (b"P" * 8, b"N" * 8)
            ch.close()
        finally:
            t.join(5)
            server.server_close()

    def test_connect_refused(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        with pytest.raises(TransportClosed):
            connect(f"127.0.0.1:{port}", timeout=1)
