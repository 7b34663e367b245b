#!/usr/bin/env python3
"""
Hue-style lighting bridge
Token-authenticated REST surface carried as plain-text HTTP inside simulator
frames, user whitelist with link-button registration, lights and alert modes,
and bridge network configuration.
"""

import copy
import json
import logging
import random
import re
import string
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Set, Tuple

logger = logging.getLogger(__name__)

US_PER_S = 1_000_000
TOKEN_ALPHABET = string.ascii_letters + string.digits
TOKEN_LENGTH = 32

ALERT_MODES = ("none", "select", "lselect")
NETCONFIG_FIELDS = ("ipaddress", "dhcp", "netmask", "gateway")

# Hue error type -> (HTTP status, description template)
ERRORS = {
    1: (403, "unauthorized user"),
    2: (400, "body contains invalid json"),
    3: (404, "resource, {address}, not available"),
    4: (405, "method, {method}, not available for resource, {address}"),
    7: (400, "invalid value, {value}, for parameter, {parameter}"),
    101: (400, "link button not pressed"),
}


@dataclass
class LightState:
    name: str
    on: bool = True
    bri: int = 254
    alert: str = "none"
    reachable: bool = True
    alert_until: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name,
                'state': {'on': self.on, 'bri': self.bri, 'alert': self.alert,
                          'reachable': self.reachable}}


@dataclass
class WhitelistEntry:
    token: str
    name: str
    created_at: int


@dataclass
class NetConfig:
    ipaddress: str = "192.168.1.20"
    dhcp: bool = True
    netmask: str = "255.255.255.0"
    gateway: str = "192.168.1.1"


@dataclass
class BridgeState:
    lights: Dict[int, LightState] = field(default_factory=dict)
    whitelist: Dict[str, WhitelistEntry] = field(default_factory=dict)
    linkbutton: bool = False
    linkbutton_deadline: Optional[int] = None
    netconfig: NetConfig = field(default_factory=NetConfig)
    default_netconfig: NetConfig = field(default_factory=NetConfig)
    linkbutton_reset_us: int = 30 * US_PER_S
    select_us: int = 1 * US_PER_S
    lselect_us: int = 15 * US_PER_S
    # user names for registrations when the caller supplies no token factory
    token_rng: random.Random = field(default_factory=lambda: random.Random(0), repr=False, compare=False)


@dataclass
class HttpExchange:
    method: str
    path: str
    body: str = ""
    status: Optional[int] = None
    response_body: Optional[str] = None


def encode_request(method: str, path: str, body: str = "") -> bytes:
    return f"{method} {path}\r\n\r\n{body}".encode('utf-8')


def parse_request(data: bytes) -> HttpExchange:
    head, _, body = data.decode('utf-8', errors='replace').partition("\r\n\r\n")
    parts = head.split(" ")
    if len(parts) != 2 or not parts[1].startswith("/"):
        raise ValueError(f"malformed HTTP request line: {head[:80]}")
    return HttpExchange(method=parts[0].upper(), path=parts[1], body=body)


def encode_response(exchange: HttpExchange) -> bytes:
    return f"HTTP/1.1 {exchange.status}\r\n\r\n{exchange.response_body or ''}".encode('utf-8')


def parse_response(data: bytes) -> Tuple[int, Any]:
    head, _, body = data.decode('utf-8', errors='replace').partition("\r\n\r\n")
    status = int(head.split(" ")[1])
    try:
        return status, json.loads(body) if body else None
    except json.JSONDecodeError:
        return status, body


def error_body(error_type: int, address: str, **values: Any) -> Tuple[int, List[Dict[str, Any]]]:
    status, template = ERRORS[error_type]
    description = template.format(address=address, **values)
    return status, [{'error': {'type': error_type, 'address': address, 'description': description}}]


def new_bridge(lights: Iterable[str] = ("Hue color lamp 1", "Hue color lamp 2", "Hue color lamp 3"),
               tokens: Iterable[str] = (), netconfig: Optional[NetConfig] = None,
               linkbutton_reset_s: float = 30.0, select_s: float = 1.0,
               lselect_s: float = 15.0, seed: int = 0) -> BridgeState:
    net = netconfig or NetConfig()
    bridge = BridgeState(
        lights={i + 1: LightState(name) for i, name in enumerate(lights)},
        netconfig=copy.copy(net),
        default_netconfig=copy.copy(net),
        linkbutton_reset_us=int(linkbutton_reset_s * US_PER_S),
        select_us=int(select_s * US_PER_S),
        lselect_us=int(lselect_s * US_PER_S),
        token_rng=random.Random(seed),
    )
    for token in tokens:
        bridge.whitelist[token] = WhitelistEntry(token, "configured", 0)
    return bridge


def bridge_tick(bridge: BridgeState, now: int) -> BridgeState:
    """Expire the link button and finished alert cycles"""
    if bridge.linkbutton and bridge.linkbutton_deadline is not None and now >= bridge.linkbutton_deadline:
        bridge.linkbutton = False
        bridge.linkbutton_deadline = None
    for light in bridge.lights.values():
        if light.alert_until is not None and now >= light.alert_until:
            light.alert = "none"
            light.alert_until = None
    return bridge


def _parse_bool(value: Any) -> Optional[bool]:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false"):
        return value.lower() == "true"
    return None


def _set_light_state(bridge: BridgeState, light_id: int, body: Dict[str, Any], now: int,
                     address: str) -> Tuple[int, List[Dict[str, Any]]]:
    light = bridge.lights[light_id]
    results: List[Dict[str, Any]] = []
    for key, value in body.items():
        path = f"{address}/{key}"
        if key == "on":
            flag = _parse_bool(value)
            if flag is None:
                results.extend(error_body(7, path, value=value, parameter=key)[1])
                continue
            light.on = flag
            results.append({'success': {path: flag}})
        elif key == "alert":
            if value not in ALERT_MODES:
                results.extend(error_body(7, path, value=value, parameter=key)[1])
                continue
            light.alert = value
            duration = {'select': bridge.select_us, 'lselect': bridge.lselect_us}.get(value)
            light.alert_until = now + duration if duration else None
            results.append({'success': {path: value}})
        elif key == "bri" and isinstance(value, int) and 1 <= value <= 254:
            light.bri = value
            results.append({'success': {path: value}})
        else:
            results.extend(error_body(7, path, value=value, parameter=key)[1])
    return 200, results


def _set_config(bridge: BridgeState, body: Dict[str, Any], now: int) -> Tuple[int, List[Dict[str, Any]]]:
    results: List[Dict[str, Any]] = []
    for key, value in body.items():
        path = f"/config/{key}"
        if key == "linkbutton" and _parse_bool(value) is not None:
            bridge.linkbutton = _parse_bool(value)
            bridge.linkbutton_deadline = now + bridge.linkbutton_reset_us if bridge.linkbutton else None
            results.append({'success': {path: bridge.linkbutton}})
        elif key == "dhcp" and _parse_bool(value) is not None:
            bridge.netconfig.dhcp = _parse_bool(value)
            results.append({'success': {path: bridge.netconfig.dhcp}})
        elif key in ("ipaddress", "netmask", "gateway") and isinstance(value, str):
            setattr(bridge.netconfig, key, value)
            results.append({'success': {path: value}})
        elif key == "name" and isinstance(value, str):
            results.append({'success': {path: value}})
        else:
            results.extend(error_body(7, path, value=value, parameter=key)[1])
    return 200, results


def _config_view(bridge: BridgeState) -> Dict[str, Any]:
    return {
        'linkbutton': bridge.linkbutton,
        'ipaddress': bridge.netconfig.ipaddress,
        'dhcp': bridge.netconfig.dhcp,
        'netmask': bridge.netconfig.netmask,
        'gateway': bridge.netconfig.gateway,
        'whitelist': {t: {'name': e.name, 'create date': e.created_at} for t, e in bridge.whitelist.items()},
    }


def _random_token(rng: random.Random) -> str:
    return ''.join(rng.choice(TOKEN_ALPHABET) for _ in range(TOKEN_LENGTH))


def handle_request(bridge: BridgeState, req: HttpExchange, now: int,
                   token_factory: Optional[Callable[[], str]] = None) -> Tuple[BridgeState, HttpExchange]:
    """Answer one API request; errors come back as Hue error lists, never as exceptions"""
    bridge_tick(bridge, now)
    status, body = _route(bridge, req, now, token_factory or (lambda: _random_token(bridge.token_rng)))
    out = HttpExchange(req.method, req.path, req.body, status, json.dumps(body, sort_keys=True))
    return bridge, out


def _route(bridge: BridgeState, req: HttpExchange, now: int,
           token_factory: Callable[[], str]) -> Tuple[int, Any]:
    parts = [p for p in req.path.split("/") if p]
    if not parts or parts[0] != "api":
        return error_body(3, req.path)
    payload: Any = {}
    if req.method in ("PUT", "POST"):
        try:
            payload = json.loads(req.body) if req.body.strip() else {}
        except json.JSONDecodeError:
            return error_body(2, req.path)
        if not isinstance(payload, dict):
            return error_body(2, req.path)

    if len(parts) == 1:
        if req.method != "POST":
            return error_body(4, "/", method=req.method)
        if not bridge.linkbutton:
            return error_body(101, "")
        token = token_factory()
        bridge.whitelist[token] = WhitelistEntry(token, str(payload.get('devicetype', 'unknown')), now)
        logger.info(f"Hue bridge registered new user {payload.get('devicetype', 'unknown')}")
        return 200, [{'success': {'username': token}}]

    token, resource = parts[1], parts[2:]
    if token not in bridge.whitelist:
        return error_body(1, "/" + "/".join(resource))
    address = "/" + "/".join(resource)

    if not resource:
        if req.method != "GET":
            return error_body(4, address, method=req.method)
        return 200, {'lights': {str(i): l.to_dict() for i, l in bridge.lights.items()},
                     'config': _config_view(bridge), 'sensors': {}}
    if resource[0] == "lights":
        if len(resource) == 1 and req.method == "GET":
            return 200, {str(i): l.to_dict() for i, l in bridge.lights.items()}
        light_id = int(resource[1]) if len(resource) > 1 and resource[1].isdigit() else None
        if light_id is None or light_id not in bridge.lights:
            return error_body(3, address)
        if len(resource) == 2 and req.method == "GET":
            return 200, bridge.lights[light_id].to_dict()
        if len(resource) == 3 and resource[2] == "state" and req.method == "PUT":
            return _set_light_state(bridge, light_id, payload, now, address)
        return error_body(4, address, method=req.method)
    if resource[0] == "config" and len(resource) == 1:
        if req.method == "GET":
            return 200, _config_view(bridge)
        if req.method == "PUT":
            return _set_config(bridge, payload, now)
        return error_body(4, address, method=req.method)
    if resource[0] == "sensors" and req.method == "GET":
        return 200, {}
    return error_body(3, address)


def factory_reset(bridge: BridgeState) -> BridgeState:
    """Empty the whitelist and restore DHCP network defaults; lights keep their state"""
    bridge.whitelist.clear()
    bridge.linkbutton = False
    bridge.linkbutton_deadline = None
    bridge.netconfig = copy.copy(bridge.default_netconfig)
    bridge.netconfig.dhcp = True
    return bridge


API_PATH = re.compile(rb"^[A-Z]+ /api/([A-Za-z0-9_\-]+)")
REGISTERED = re.compile(rb'"username":\s*"([A-Za-z0-9_\-]+)"')


def sniff_tokens(trace, links: Optional[Iterable[str]] = None) -> Set[str]:
    """Every token visible in cleartext API paths or registration replies"""
    wanted = set(links) if links is not None else None
    tokens: Set[str] = set()
    for event in trace:
        if event.kind != "frame_sent" or event.proto != "http" or event.payload is None:
            continue
        if wanted is not None and event.link not in wanted:
            continue
        match = API_PATH.match(event.payload)
        if match:
            tokens.add(match.group(1).decode('ascii'))
        tokens.update(m.decode('ascii') for m in REGISTERED.findall(event.payload))
    return tokens
