#!/usr/bin/env python3
"""
Tests for the lighting bridge REST surface and token sniffing
"""

import json

from .hue import (HttpExchange, NetConfig, encode_request, factory_reset, handle_request, new_bridge,
                  parse_request, parse_response, sniff_tokens)

TOKEN = "9MlfXk2rT7pQzL4vWn8sYc3bHd6gJa0e"
S = 1_000_000


def call(bridge, method, path, body=None, now=0, token="newuser-000000000000000000000001"):
    text = json.dumps(body) if body is not None else ""
    _, reply = handle_request(bridge, HttpExchange(method, path, text), now, token_factory=lambda: token)
    return reply.status, json.loads(reply.response_body)


def error_of(body):
    return body[0]['error']


def test_request_codec():
    req = parse_request(encode_request("PUT", f"/api/{TOKEN}/lights/1/state", '{"on": false}'))
    assert (req.method, req.path, req.body) == ("PUT", f"/api/{TOKEN}/lights/1/state", '{"on": false}')
    assert parse_response(b"HTTP/1.1 200\r\n\r\n[1]") == (200, [1])


def test_unknown_token_is_unauthorized():
    bridge = new_bridge(tokens=[TOKEN])
    status, body = call(bridge, "GET", "/api/not-a-user/lights")
    assert status == 403
    assert error_of(body)['description'] == "unauthorized user"


def test_light_off_request():
    bridge = new_bridge(tokens=[TOKEN])
    status, body = call(bridge, "PUT", f"/api/{TOKEN}/lights/1/state", {"on": False})
    assert status == 200
    assert body == [{'success': {'/lights/1/state/on': False}}]
    assert bridge.lights[1].on is False
    assert bridge.lights[2].on is True


def test_string_false_is_accepted_for_on():
    bridge = new_bridge(tokens=[TOKEN])
    call(bridge, "PUT", f"/api/{TOKEN}/lights/2/state", {"on": "false"})
    assert bridge.lights[2].on is False


def test_unknown_light_is_not_available():
    bridge = new_bridge(tokens=[TOKEN])
    status, body = call(bridge, "PUT", f"/api/{TOKEN}/lights/9/state", {"on": False})
    assert status == 404
    assert error_of(body)['description'] == "resource, /lights/9/state, not available"


def test_bad_json_body():
    bridge = new_bridge(tokens=[TOKEN])
    _, reply = handle_request(bridge, HttpExchange("PUT", f"/api/{TOKEN}/config", "{oops"), 0)
    assert reply.status == 400


def test_registration_requires_link_button():
    bridge = new_bridge(tokens=[TOKEN])
    status, body = call(bridge, "POST", "/api", {"devicetype": "attacker#rpi"})
    assert status == 400 and error_of(body)['description'] == "link button not pressed"
    assert list(bridge.whitelist) == [TOKEN]

    call(bridge, "PUT", f"/api/{TOKEN}/config", {"linkbutton": True}, now=1 * S)
    status, body = call(bridge, "POST", "/api", {"devicetype": "attacker#rpi"}, now=2 * S)
    assert status == 200
    new_token = body[0]['success']['username']
    assert bridge.whitelist[new_token].name == "attacker#rpi"
    status, _ = call(bridge, "GET", f"/api/{new_token}/lights", now=3 * S)
    assert status == 200


def test_registered_user_names_follow_the_seed():
    def register(seed):
        bridge = new_bridge(tokens=[TOKEN], seed=seed)
        handle_request(bridge, HttpExchange("PUT", f"/api/{TOKEN}/config", '{"linkbutton": true}'), 0)
        _, reply = handle_request(bridge, HttpExchange("POST", "/api", '{"devicetype": "app"}'), 1 * S)
        return json.loads(reply.response_body)[0]['success']['username']

    assert register(5) == register(5)
    assert register(5) != register(6)
    assert len(register(5)) == 32


def test_link_button_resets_after_thirty_seconds():
    bridge = new_bridge(tokens=[TOKEN])
    call(bridge, "PUT", f"/api/{TOKEN}/config", {"linkbutton": True}, now=0)
    status, _ = call(bridge, "POST", "/api", {}, now=30 * S)
    assert status == 400
    assert bridge.linkbutton is False


def test_alert_cycle_expires():
    bridge = new_bridge(tokens=[TOKEN])
    call(bridge, "PUT", f"/api/{TOKEN}/lights/2/state", {"alert": "lselect"}, now=0)
    _, light = call(bridge, "GET", f"/api/{TOKEN}/lights/2", now=14 * S)
    assert light['state']['alert'] == "lselect"
    _, light = call(bridge, "GET", f"/api/{TOKEN}/lights/2", now=15 * S)
    assert light['state']['alert'] == "none"
    status, body = call(bridge, "PUT", f"/api/{TOKEN}/lights/2/state", {"alert": "disco"})
    assert error_of(body)['type'] == 7


def test_network_reconfiguration():
    bridge = new_bridge(tokens=[TOKEN])
    call(bridge, "PUT", f"/api/{TOKEN}/config",
         {"ipaddress": "10.13.37.20", "dhcp": False, "netmask": "255.0.0.0", "gateway": "10.0.0.1"})
    assert bridge.netconfig == NetConfig("10.13.37.20", False, "255.0.0.0", "10.0.0.1")
    _, config = call(bridge, "GET", f"/api/{TOKEN}/config")
    assert config['dhcp'] is False


def test_factory_reset_empties_whitelist_and_restores_dhcp():
    bridge = new_bridge(tokens=[TOKEN, "b" * 32, "c" * 32])
    call(bridge, "PUT", f"/api/{TOKEN}/lights/1/state", {"on": False})
    call(bridge, "PUT", f"/api/{TOKEN}/config", {"ipaddress": "10.13.37.20", "dhcp": False})
    factory_reset(bridge)
    assert bridge.whitelist == {}
    assert bridge.netconfig == NetConfig()
    assert bridge.lights[1].on is False
    status, body = call(bridge, "GET", f"/api/{TOKEN}/lights")
    assert error_of(body)['description'] == "unauthorized user"


def test_sniff_tokens_on_empty_trace():
    assert sniff_tokens([]) == set()


def test_default_lab_traffic_leaks_the_configured_token(run_bundled):
    """The app polls the bridge in cleartext, so a tap recovers exactly its token"""
    _, trace, _ = run_bundled("lab-default")
    assert sniff_tokens(trace) == {TOKEN}
    assert sniff_tokens(trace, links=["app-bridge"]) == {TOKEN}
    assert sniff_tokens(trace, links=["cam-nvr"]) == set()
