#!/usr/bin/env python3
"""
Tests for the RTSP codec, digest auth and the camera/NVR session machines
"""

import hashlib
import random

import pytest

from .errors import RtspParseError
from .rtsp import (START, Credentials, Method, MessageKind, SessionState, TimerEvent, client_step,
                   compute_digest_response, new_client_session, new_server_session, parse_message,
                   request, response, serialize_message, server_expire, server_step)

URI = "rtsp://camera/"


def md5(text):
    return hashlib.md5(text.encode()).hexdigest()


def wire(msg):
    return parse_message(serialize_message(msg))


def handshake(rtsp_settings, seed=0):
    """Drive a client and server against each other until the client has nothing left to send"""
    server = new_server_session(rtsp_settings)
    client = new_client_session(rtsp_settings)
    rng = random.Random(seed)
    client, actions = client_step(client, START, 0)
    outbox = list(actions.send)
    sent = []
    now = 0
    while outbox:
        msg = outbox.pop(0)
        sent.append(msg.method)
        now += 1000
        server, reply = server_step(server, wire(msg), now, rng)
        client, actions = client_step(client, wire(reply), now)
        outbox.extend(actions.send)
    return client, server, actions, sent


def test_digest_response_matches_rfc2617_formula():
    cred = Credentials("root", "pass", "camera", nonce="0a4f113b")
    expected = md5(f"{md5('root:camera:pass')}:0a4f113b:{md5('DESCRIBE:' + URI)}")
    assert compute_digest_response(cred, "DESCRIBE", URI) == expected
    fresh = Credentials("root", "pass", "camera", nonce="77c1d9e0")
    assert compute_digest_response(fresh, "DESCRIBE", URI) != expected


@pytest.mark.parametrize("raw, message", [
    (b"", "missing request line"),
    (b"RTSP/1.0 abc OK\r\nCSeq: 1\r\n\r\n", "malformed status line"),
    (b"DESCRIBE rtsp://camera/\r\nCSeq: 1\r\n\r\n", "malformed request line"),
    (b"FETCH rtsp://camera/ RTSP/1.0\r\nCSeq: 1\r\n\r\n", "unknown method FETCH"),
    (b"OPTIONS * RTSP/1.0\r\nno colon here\r\n\r\n", "malformed header line"),
    (b"OPTIONS * RTSP/1.0\r\nCSeq: x\r\n\r\n", "invalid CSeq"),
    (b"OPTIONS * RTSP/1.0\r\nAccept: */*\r\n\r\n", "missing CSeq"),
])
def test_parse_errors_name_the_defect(raw, message):
    with pytest.raises(RtspParseError, match=message):
        parse_message(raw)


def test_serialize_then_parse_preserves_messages():
    rng = random.Random(1234)
    methods = [m.value for m in Method]
    for _ in range(1000):
        headers = {f"X-H{i}": f"v{rng.randint(0, 999)}" for i in range(rng.randint(0, 4))}
        body = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 20)))
        if rng.random() < 0.5:
            msg = request(rng.choice(methods), URI, rng.randint(0, 2**31), headers, body)
        else:
            msg = response(rng.choice([200, 401, 454, 455, 461, 501]), rng.randint(0, 2**31), headers, body)
        assert wire(msg) == msg


def test_cseq_is_written_first():
    raw = serialize_message(request("OPTIONS", URI, 7, {"User-Agent": "nvr"}))
    assert raw.split(b"\r\n")[1] == b"CSeq: 7"


def test_options_lists_public_methods(settings):
    _, reply = server_step(new_server_session(settings.rtsp), request("OPTIONS", URI, 1), 0)
    assert reply.status == 200
    assert "DESCRIBE" in reply.header("Public") and "REDIRECT" not in reply.header("Public")


@pytest.mark.parametrize("method, status", [("REDIRECT", 405), ("RECORD", 501), ("ANNOUNCE", 501),
                                            ("PLAY", 454), ("TEARDOWN", 454), ("PAUSE", 454)])
def test_server_status_codes(settings, method, status):
    _, reply = server_step(new_server_session(settings.rtsp), request(method, URI, 3), 0)
    assert reply.status == status
    assert reply.cseq == 3


def test_protected_describe_is_challenged(settings):
    server, reply = server_step(new_server_session(settings.rtsp), request("DESCRIBE", URI, 2), 0)
    assert reply.status == 401
    assert reply.header("WWW-Authenticate").startswith('Digest realm="camera", nonce=')
    assert server.state == SessionState.INIT


def test_setup_without_transport_is_461(settings):
    rtsp_settings = settings.rtsp.model_copy(update={'protected_methods': []})
    server, reply = server_step(new_server_session(rtsp_settings), request("SETUP", URI, 4), 0)
    assert reply.status == 461
    assert server.session_id is None


def test_describe_while_playing_is_455(settings):
    _, server, _, _ = handshake(settings.rtsp)
    _, reply = server_step(server, request("DESCRIBE", URI, 99), 10_000)
    assert reply.status == 455


def test_client_reaches_playing_through_digest_challenge(settings):
    client, server, actions, sent = handshake(settings.rtsp)
    assert sent == ["OPTIONS", "DESCRIBE", "DESCRIBE", "SETUP", "PLAY"]
    assert client.state == SessionState.PLAYING
    assert server.state == SessionState.PLAYING
    assert client.session_id == server.session_id
    assert client.ssrc == server.ssrc
    kinds = {t.kind: t.delay_us for t in actions.timers}
    assert kinds == {'keepalive': 30_000_000, 'watchdog': 2_000_000}


def test_basic_auth_mode(settings):
    client, server, _, _ = handshake(settings.rtsp.model_copy(update={'auth_mode': "BASIC"}))
    assert client.state == server.state == SessionState.PLAYING


def test_retry_resends_same_message_with_same_cseq(settings):
    client, actions = client_step(new_client_session(settings.rtsp), START, 0)
    first = actions.send[0]
    retry = actions.timers[0]
    client, actions = client_step(client, TimerEvent(retry.kind, retry.token), retry.delay_us)
    assert actions.send == [first]
    assert client.pending.retry_count == 1
    assert client.pending.cseq == first.cseq


def test_454_restarts_and_stale_timers_are_ignored(settings):
    client, _, actions, _ = handshake(settings.rtsp)
    keepalive = next(t for t in actions.timers if t.kind == "keepalive")
    client, actions = client_step(client, TimerEvent("keepalive", keepalive.token), 0)
    assert actions.send[0].method == "GET_PARAMETER"
    client, actions = client_step(client, response(454, actions.send[0].cseq), 0)
    assert actions.restarted == "status 454"
    assert [m.method for m in actions.send] == ["TEARDOWN", "OPTIONS"]
    assert client.state == SessionState.INIT
    client, actions = client_step(client, TimerEvent("watchdog", keepalive.token), 0)
    assert actions.ignored and not actions.send


def test_other_errors_restart_after_retry_interval(settings):
    client, actions = client_step(new_client_session(settings.rtsp), START, 0)
    client, actions = client_step(client, response(500, actions.send[0].cseq), 0)
    assert actions.restarted == "status 500"
    assert not [m for m in actions.send if m.method == "OPTIONS"]
    restart = actions.timers[-1]
    assert restart.kind == "restart" and restart.delay_us == 2_000_000
    client, actions = client_step(client, TimerEvent("restart", restart.token), restart.delay_us)
    assert [m.method for m in actions.send] == ["OPTIONS"]


def test_unexpected_cseq_is_ignored(settings):
    client, actions = client_step(new_client_session(settings.rtsp), START, 0)
    before = client.pending
    client, actions = client_step(client, response(200, 999), 0)
    assert actions.ignored
    assert client.pending == before


def test_watchdog_restarts_without_media(settings):
    client, _, actions, _ = handshake(settings.rtsp)
    watchdog = next(t for t in actions.timers if t.kind == "watchdog")
    client.media_seen = True
    client, actions = client_step(client, TimerEvent("watchdog", watchdog.token), 0)
    assert actions.restarted is None and actions.timers[0].kind == "watchdog"
    client, actions = client_step(client, TimerEvent("watchdog", watchdog.token), 0)
    assert actions.restarted == "no media"


def test_idle_session_expires_after_timeout(settings):
    _, server, _, _ = handshake(settings.rtsp)
    last = server.last_activity
    assert server_expire(server, last + 60_000_000).state == SessionState.PLAYING
    assert server_expire(server, last + 60_000_001).state == SessionState.TERMINATED


def test_teardown_then_new_describe(settings):
    _, server, _, _ = handshake(settings.rtsp)
    server, reply = server_step(server, request("TEARDOWN", URI, 50, {"Session": server.session_id}), 20_000)
    assert reply.status == 200 and server.state == SessionState.TERMINATED
    nonce = server.nonce
    cred = Credentials("root", "pass", "camera", nonce=nonce)
    auth = (f'Digest username="root", realm="camera", nonce="{nonce}", uri="{URI}", '
            f'response="{compute_digest_response(cred, "DESCRIBE", URI)}"')
    server, reply = server_step(server, request("DESCRIBE", URI, 51, {"Authorization": auth}), 21_000)
    assert reply.status == 200
    assert server.state == SessionState.DESCRIBED


def test_responses_are_not_answered(settings):
    server = new_server_session(settings.rtsp)
    _, reply = server_step(server, response(200, 1), 0)
    assert reply is None
    assert response(200, 1).kind == MessageKind.RESPONSE
