#!/usr/bin/env python3
"""
RTSP/1.0 message grammar and session state machines
Text codec, basic/digest authentication, the camera's server session and the
NVR's client session (setup sequence, keepalive, retry, teardown).
"""

import base64
import copy
import hashlib
import logging
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple, Union

from .config import RtspSettings
from .errors import RtspParseError

logger = logging.getLogger(__name__)

RTSP_VERSION = "RTSP/1.0"
US_PER_S = 1_000_000


class Method(str, Enum):
    PLAY = "PLAY"
    PAUSE = "PAUSE"
    DESCRIBE = "DESCRIBE"
    RECORD = "RECORD"
    SETUP = "SETUP"
    TEARDOWN = "TEARDOWN"
    REDIRECT = "REDIRECT"
    ANNOUNCE = "ANNOUNCE"
    GET_PARAMETER = "GET_PARAMETER"
    SET_PARAMETERS = "SET_PARAMETERS"
    OPTIONS = "OPTIONS"


CLIENT_TO_SERVER = frozenset({Method.PLAY, Method.PAUSE, Method.DESCRIBE,
                              Method.RECORD, Method.SETUP, Method.TEARDOWN})
SERVER_TO_CLIENT = frozenset({Method.REDIRECT})
BOTH_DIRECTIONS = frozenset({Method.ANNOUNCE, Method.GET_PARAMETER,
                             Method.OPTIONS, Method.SET_PARAMETERS})
METHOD_NAMES = frozenset(m.value for m in Method)

REASONS = {
    200: "OK",
    400: "Bad Request",
    401: "Unauthorized",
    405: "Method Not Allowed",
    454: "Session Not Found",
    455: "Method Not Valid in This State",
    461: "Unsupported Transport",
    501: "Not Implemented",
}

SDP_STUB = b"m=video 0 RTP/AVP 96\r\na=control:trackID=1\r\n"


class MessageKind(str, Enum):
    REQUEST = "REQUEST"
    RESPONSE = "RESPONSE"


@dataclass
class RtspMessage:
    """One RTSP message; CSeq and Content-Length are kept out of `headers`"""
    kind: MessageKind
    cseq: int
    method: Optional[str] = None
    uri: Optional[str] = None
    status: Optional[int] = None
    reason: Optional[str] = None
    headers: Dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def header(self, name: str) -> Optional[str]:
        lowered = name.lower()
        for key, value in self.headers.items():
            if key.lower() == lowered:
                return value
        return None


def request(method: str, uri: str, cseq: int, headers: Optional[Dict[str, str]] = None,
            body: bytes = b"") -> RtspMessage:
    return RtspMessage(MessageKind.REQUEST, cseq, method=method, uri=uri,
                       headers=dict(headers or {}), body=body)


def response(status: int, cseq: int, headers: Optional[Dict[str, str]] = None,
             body: bytes = b"", reason: Optional[str] = None) -> RtspMessage:
    return RtspMessage(MessageKind.RESPONSE, cseq, status=status,
                       reason=reason if reason is not None else REASONS.get(status, ""),
                       headers=dict(headers or {}), body=body)


def parse_message(data: bytes) -> RtspMessage:
    """Parse one CRLF-framed RTSP message; raises RtspParseError naming the defect"""
    head, sep, rest = data.partition(b"\r\n\r\n")
    if not sep:
        head, rest = data, b""
    lines = head.decode('utf-8', errors='replace').split("\r\n")
    first = lines[0].strip() if lines else ""
    if not first:
        raise RtspParseError("missing request line")

    if first.startswith("RTSP/"):
        parts = first.split(" ", 2)
        if len(parts) < 2 or parts[0] != RTSP_VERSION or not parts[1].isdigit():
            raise RtspParseError(f"malformed status line: {first}")
        msg = RtspMessage(MessageKind.RESPONSE, 0, status=int(parts[1]),
                          reason=parts[2] if len(parts) == 3 else "")
    else:
        parts = first.split(" ")
        if len(parts) != 3 or parts[2] != RTSP_VERSION:
            raise RtspParseError(f"malformed request line: {first}")
        if parts[0] not in METHOD_NAMES:
            raise RtspParseError(f"unknown method {parts[0]}")
        msg = RtspMessage(MessageKind.REQUEST, 0, method=parts[0], uri=parts[1])

    cseq = None
    length = None
    for line in lines[1:]:
        if not line:
            continue
        name, colon, value = line.partition(":")
        name = name.strip()
        if not colon or not name:
            raise RtspParseError(f"malformed header line: {line}")
        value = value.strip()
        if name.lower() == "cseq":
            if not value.isdigit():
                raise RtspParseError(f"invalid CSeq: {value}")
            cseq = int(value)
        elif name.lower() == "content-length":
            if not value.isdigit():
                raise RtspParseError(f"invalid Content-Length: {value}")
            length = int(value)
        else:
            msg.headers[name] = value
    if cseq is None:
        raise RtspParseError("missing CSeq")
    msg.cseq = cseq
    msg.body = rest[:length] if length is not None else rest
    return msg


def serialize_message(msg: RtspMessage) -> bytes:
    if msg.kind == MessageKind.REQUEST:
        lines = [f"{msg.method} {msg.uri} {RTSP_VERSION}"]
    else:
        lines = [f"{RTSP_VERSION} {msg.status} {msg.reason or ''}"]
    lines.append(f"CSeq: {msg.cseq}")
    for name, value in msg.headers.items():
        lines.append(f"{name}: {value}")
    if msg.body:
        lines.append(f"Content-Length: {len(msg.body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode('utf-8') + msg.body


def bad_request_response(data: bytes) -> RtspMessage:
    """400 for bytes that do not parse; echoes a CSeq if one can be found"""
    match = re.search(rb"CSeq:\s*(\d+)", data, re.IGNORECASE)
    return response(400, int(match.group(1)) if match else 0)


# -- authentication ------------------------------------------------------------

class AuthMode(str, Enum):
    BASIC = "BASIC"
    DIGEST = "DIGEST"


@dataclass(frozen=True)
class Credentials:
    username: str
    password: str
    realm: str
    nonce: Optional[str] = None
    mode: AuthMode = AuthMode.DIGEST


def _md5(text: str) -> str:
    return hashlib.md5(text.encode('utf-8')).hexdigest()


def compute_digest_response(cred: Credentials, method: str, uri: str) -> str:
    ha1 = _md5(f"{cred.username}:{cred.realm}:{cred.password}")
    ha2 = _md5(f"{method}:{uri}")
    return _md5(f"{ha1}:{cred.nonce}:{ha2}")


def authorization_header(cred: Credentials, method: str, uri: str) -> str:
    if cred.mode == AuthMode.BASIC:
        token = base64.b64encode(f"{cred.username}:{cred.password}".encode('utf-8')).decode('ascii')
        return f"Basic {token}"
    digest = compute_digest_response(cred, method, uri)
    return (f'Digest username="{cred.username}", realm="{cred.realm}", '
            f'nonce="{cred.nonce}", uri="{uri}", response="{digest}"')


def challenge_header(realm: str, mode: AuthMode, nonce: Optional[str]) -> str:
    if mode == AuthMode.BASIC:
        return f'Basic realm="{realm}"'
    return f'Digest realm="{realm}", nonce="{nonce}"'


def parse_auth_params(value: str) -> Tuple[str, Dict[str, str]]:
    """Split 'Scheme k="v", ...' into (scheme, params)"""
    scheme, _, rest = value.strip().partition(" ")
    params = dict(re.findall(r'(\w+)="([^"]*)"', rest))
    return scheme, params


# -- sessions --------------------------------------------------------------------

class SessionRole(str, Enum):
    CLIENT = "CLIENT"
    SERVER = "SERVER"


class SessionState(str, Enum):
    INIT = "INIT"
    AUTH_PENDING = "AUTH_PENDING"
    DESCRIBED = "DESCRIBED"
    READY = "READY"
    PLAYING = "PLAYING"
    TERMINATED = "TERMINATED"


@dataclass(frozen=True)
class PendingRequest:
    method: str
    cseq: int
    retry_count: int
    message: RtspMessage


@dataclass
class RtspSession:
    role: SessionRole
    state: SessionState = SessionState.INIT
    session_id: Optional[str] = None
    timeout_s: int = 60
    client_port: int = 50100
    server_port: int = 6970
    last_activity: int = 0
    pending: Optional[PendingRequest] = None
    uri: str = "rtsp://camera/"
    credentials: Optional[Credentials] = None
    protected_methods: FrozenSet[str] = frozenset()
    retry_interval_us: int = 2 * US_PER_S
    keepalive_fraction: float = 0.5
    ssrc: Optional[int] = None
    nonce: Optional[str] = None
    cseq: int = 0
    # client bookkeeping; epoch changes on every restart so stale timers are ignored
    epoch: int = 0
    authorized: bool = False
    media_seen: bool = False
    setups: int = 0


def _credentials(settings: RtspSettings) -> Credentials:
    return Credentials(settings.username, settings.password, settings.realm,
                       mode=AuthMode(settings.auth_mode.upper()))


def new_server_session(settings: RtspSettings) -> RtspSession:
    return RtspSession(
        role=SessionRole.SERVER,
        timeout_s=settings.timeout_s,
        client_port=settings.client_port,
        server_port=settings.server_port,
        uri=settings.uri,
        credentials=_credentials(settings),
        protected_methods=frozenset(settings.protected_methods),
        retry_interval_us=int(settings.retry_interval_s * US_PER_S),
        keepalive_fraction=settings.keepalive_fraction,
    )


def new_client_session(settings: RtspSettings) -> RtspSession:
    session = new_server_session(settings)
    session.role = SessionRole.CLIENT
    session.protected_methods = frozenset()
    return session


def parse_session_header(value: str) -> Tuple[str, Optional[int]]:
    """'id;timeout=N' -> (id, N)"""
    parts = [p.strip() for p in value.split(";")]
    timeout = None
    for part in parts[1:]:
        key, _, val = part.partition("=")
        if key.lower() == "timeout" and val.isdigit():
            timeout = int(val)
    return parts[0], timeout


def parse_transport(value: str) -> Dict[str, str]:
    out = {}
    for part in value.split(";"):
        key, eq, val = part.strip().partition("=")
        out[key] = val if eq else ""
    return out


def _token(rng: random.Random, length: int = 16) -> str:
    return ''.join(rng.choice("0123456789abcdef") for _ in range(length))


# -- server ------------------------------------------------------------------------

def server_expire(session: RtspSession, now: int) -> RtspSession:
    """Terminate an established session that has been idle longer than its timeout"""
    if (session.state in (SessionState.READY, SessionState.PLAYING)
            and now - session.last_activity > session.timeout_s * US_PER_S):
        session = copy.copy(session)
        session.state = SessionState.TERMINATED
    return session


def _server_authorized(session: RtspSession, req: RtspMessage) -> bool:
    value = req.header("Authorization")
    cred = session.credentials
    if not value or cred is None:
        return False
    scheme, params = parse_auth_params(value)
    if cred.mode == AuthMode.BASIC:
        expected = base64.b64encode(f"{cred.username}:{cred.password}".encode('utf-8')).decode('ascii')
        return scheme.lower() == "basic" and value.strip().split(" ", 1)[-1] == expected
    if scheme.lower() != "digest" or session.nonce is None:
        return False
    if params.get('nonce') != session.nonce or params.get('username') != cred.username:
        return False
    expected = compute_digest_response(replace(cred, nonce=session.nonce), req.method,
                                       params.get('uri', req.uri))
    return params.get('response') == expected


def server_step(session: RtspSession, req: RtspMessage, now: int,
                rng: Optional[random.Random] = None) -> Tuple[RtspSession, Optional[RtspMessage]]:
    """Camera side: answer one request; (session, None) when the input is not a request"""
    rng = rng or random.Random(now)
    s = copy.copy(server_expire(session, now))
    if req.kind != MessageKind.REQUEST:
        return s, None
    s.last_activity = now
    method = req.method
    cseq = req.cseq

    if method not in CLIENT_TO_SERVER | BOTH_DIRECTIONS:
        return s, response(405, cseq)
    if method in (Method.RECORD, Method.ANNOUNCE):
        return s, response(501, cseq)
    if method == Method.OPTIONS:
        public = ", ".join(m.value for m in Method if m in CLIENT_TO_SERVER | BOTH_DIRECTIONS)
        return s, response(200, cseq, {"Public": public})

    session_header = req.header("Session")
    sid = parse_session_header(session_header)[0] if session_header else None
    established = s.state in (SessionState.READY, SessionState.PLAYING)

    if method in (Method.DESCRIBE, Method.SETUP) and s.state == SessionState.PLAYING:
        return s, response(455, cseq)
    if method in (Method.PLAY, Method.PAUSE, Method.TEARDOWN) or sid is not None:
        if not established or sid != s.session_id:
            return s, response(454, cseq)
    if method == Method.PAUSE and s.state != SessionState.PLAYING:
        return s, response(455, cseq)

    if method in s.protected_methods and not _server_authorized(s, req):
        s.nonce = _token(rng)
        mode = s.credentials.mode if s.credentials else AuthMode.DIGEST
        realm = s.credentials.realm if s.credentials else ""
        return s, response(401, cseq, {"WWW-Authenticate": challenge_header(realm, mode, s.nonce)})

    session_out = {"Session": s.session_id} if s.session_id and established else {}
    if method == Method.DESCRIBE:
        if s.state in (SessionState.INIT, SessionState.AUTH_PENDING, SessionState.TERMINATED):
            s.state = SessionState.DESCRIBED
        return s, response(200, cseq, {"Content-Base": s.uri, "Content-Type": "application/sdp"},
                           body=SDP_STUB)
    if method == Method.SETUP:
        transport = parse_transport(req.header("Transport") or "")
        ports = transport.get("client_port", "").split("-")
        if not ports[0].isdigit():
            return s, response(461, cseq)
        s.client_port = int(ports[0])
        s.session_id = _token(rng)
        s.ssrc = rng.getrandbits(32)
        s.state = SessionState.READY
        return s, response(200, cseq, {
            "Session": f"{s.session_id};timeout={s.timeout_s}",
            "Transport": (f"RTP/AVP;unicast;client_port={s.client_port}-{s.client_port + 1};"
                          f"server_port={s.server_port}-{s.server_port + 1};ssrc={s.ssrc:08X}"),
        })
    if method == Method.PLAY:
        s.state = SessionState.PLAYING
        return s, response(200, cseq, {"Session": s.session_id, "Range": "npt=0.000-"})
    if method == Method.PAUSE:
        s.state = SessionState.READY
        return s, response(200, cseq, session_out)
    if method == Method.TEARDOWN:
        s.state = SessionState.TERMINATED
        return s, response(200, cseq, {"Session": s.session_id})
    # GET_PARAMETER / SET_PARAMETERS: keepalive
    return s, response(200, cseq, session_out)


# -- client ------------------------------------------------------------------------

@dataclass(frozen=True)
class TimerEvent:
    """A client timer firing; `token` is (epoch, cseq) at the time it was requested"""
    kind: str
    token: Tuple[int, int] = (0, 0)


@dataclass
class TimerRequest:
    kind: str
    delay_us: int
    token: Tuple[int, int]


@dataclass
class ClientActions:
    send: List[RtspMessage] = field(default_factory=list)
    timers: List[TimerRequest] = field(default_factory=list)
    ignored: bool = False
    restarted: Optional[str] = None


START = TimerEvent("start")


def _build_request(s: RtspSession, method: str) -> RtspMessage:
    s.cseq += 1
    headers: Dict[str, str] = {}
    if s.authorized and s.credentials is not None:
        headers["Authorization"] = authorization_header(s.credentials, method, s.uri)
    if s.session_id and method not in (Method.OPTIONS, Method.DESCRIBE, Method.SETUP):
        headers["Session"] = s.session_id
    if method == Method.DESCRIBE:
        headers["Accept"] = "application/sdp"
    if method == Method.SETUP:
        headers["Transport"] = f"RTP/AVP;unicast;client_port={s.client_port}-{s.client_port + 1}"
    return request(method, s.uri, s.cseq, headers)


def _issue(s: RtspSession, actions: ClientActions, method: str, delay_us: int = 0) -> None:
    msg = _build_request(s, method)
    s.pending = PendingRequest(method, msg.cseq, 0, msg)
    if delay_us:
        actions.timers.append(TimerRequest("retry", delay_us, (s.epoch, msg.cseq)))
        return
    actions.send.append(msg)
    actions.timers.append(TimerRequest("retry", s.retry_interval_us, (s.epoch, msg.cseq)))


def _restart(s: RtspSession, actions: ClientActions, reason: str, delay_us: int = 0) -> None:
    if s.session_id and s.state != SessionState.TERMINATED:
        actions.send.append(_build_request(s, Method.TEARDOWN))
    logger.debug(f"RTSP client restart ({reason}) from {s.state.value}")
    s.epoch += 1
    s.state = SessionState.INIT
    s.session_id = None
    s.ssrc = None
    s.pending = None
    s.authorized = False
    s.media_seen = False
    actions.restarted = reason
    if delay_us:
        actions.timers.append(TimerRequest("restart", delay_us, (s.epoch, 0)))
    else:
        s.setups += 1
        _issue(s, actions, Method.OPTIONS)


def _on_timer(s: RtspSession, event: TimerEvent, actions: ClientActions) -> None:
    epoch, cseq = event.token
    if event.kind == "start":
        if s.state == SessionState.INIT and s.pending is None:
            s.setups += 1
            _issue(s, actions, Method.OPTIONS)
        return
    if epoch != s.epoch:
        actions.ignored = True
        return
    if event.kind == "retry":
        p = s.pending
        if p is None or p.cseq != cseq:
            actions.ignored = True
            return
        s.pending = replace(p, retry_count=p.retry_count + 1)
        actions.send.append(p.message)
        actions.timers.append(TimerRequest("retry", s.retry_interval_us, (s.epoch, p.cseq)))
    elif event.kind == "restart":
        if s.state == SessionState.INIT and s.pending is None:
            s.setups += 1
            _issue(s, actions, Method.OPTIONS)
    elif event.kind == "keepalive":
        if s.state == SessionState.PLAYING and s.pending is None:
            _issue(s, actions, Method.GET_PARAMETER)
        else:
            actions.ignored = True
    elif event.kind == "watchdog":
        if s.state != SessionState.PLAYING:
            actions.ignored = True
        elif not s.media_seen:
            _restart(s, actions, "no media")
        else:
            s.media_seen = False
            actions.timers.append(TimerRequest("watchdog", s.retry_interval_us, (s.epoch, 0)))


def _keepalive_delay(s: RtspSession) -> int:
    return int(s.timeout_s * US_PER_S * s.keepalive_fraction)


def _on_response(s: RtspSession, msg: RtspMessage, now: int, actions: ClientActions) -> None:
    p = s.pending
    if msg.kind != MessageKind.RESPONSE or p is None or msg.cseq != p.cseq:
        logger.info(f"RTSP client ignoring unexpected message cseq={msg.cseq} "
                    f"(pending {p.cseq if p else None})")
        actions.ignored = True
        return
    s.pending = None
    s.last_activity = now
    status = msg.status or 0

    if status == 401:
        scheme, params = parse_auth_params(msg.header("WWW-Authenticate") or "")
        had_auth = p.message.header("Authorization") is not None
        if scheme and s.credentials is not None:
            s.credentials = replace(s.credentials, nonce=params.get('nonce'),
                                    realm=params.get('realm', s.credentials.realm),
                                    mode=AuthMode.BASIC if scheme.lower() == "basic" else AuthMode.DIGEST)
            s.authorized = True
        if s.state in (SessionState.INIT, SessionState.DESCRIBED):
            s.state = SessionState.AUTH_PENDING
        if scheme and not had_auth:
            _issue(s, actions, p.method)
        else:
            _issue(s, actions, p.method, delay_us=s.retry_interval_us)
        return

    if 200 <= status < 300:
        if p.method == Method.OPTIONS:
            _issue(s, actions, Method.DESCRIBE)
        elif p.method == Method.DESCRIBE:
            s.state = SessionState.DESCRIBED
            _issue(s, actions, Method.SETUP)
        elif p.method == Method.SETUP:
            session_header = msg.header("Session")
            if not session_header:
                _restart(s, actions, "SETUP reply without Session", s.retry_interval_us)
                return
            s.session_id, timeout = parse_session_header(session_header)
            if timeout:
                s.timeout_s = timeout
            transport = parse_transport(msg.header("Transport") or "")
            if transport.get("ssrc"):
                s.ssrc = int(transport["ssrc"], 16)
            s.state = SessionState.READY
            _issue(s, actions, Method.PLAY)
        elif p.method == Method.PLAY:
            s.state = SessionState.PLAYING
            s.media_seen = False
            actions.timers.append(TimerRequest("keepalive", _keepalive_delay(s), (s.epoch, s.cseq)))
            actions.timers.append(TimerRequest("watchdog", s.retry_interval_us, (s.epoch, 0)))
        elif p.method in (Method.GET_PARAMETER, Method.SET_PARAMETERS):
            actions.timers.append(TimerRequest("keepalive", _keepalive_delay(s), (s.epoch, s.cseq)))
        return

    if status in (454, 455):
        _restart(s, actions, f"status {status}")
    else:
        _restart(s, actions, f"status {status}", s.retry_interval_us)


def client_step(session: RtspSession, event: Union[RtspMessage, TimerEvent],
                now: int = 0) -> Tuple[RtspSession, ClientActions]:
    """NVR side: advance the client session by one incoming message or timer"""
    s = copy.copy(session)
    actions = ClientActions()
    if isinstance(event, TimerEvent):
        _on_timer(s, event, actions)
    else:
        _on_response(s, event, now, actions)
    return s, actions
