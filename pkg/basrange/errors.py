"""
Exception hierarchy for basrange
"""


class BasRangeError(Exception):
    """Base class for every error raised by basrange"""


class ConfigurationError(BasRangeError):
    """Invalid topology, scenario, settings or unknown reference"""


class RtspParseError(BasRangeError, ValueError):
    """RTSP text that cannot be turned into a message"""


class TopicFilterError(BasRangeError, ValueError):
    """Malformed MQTT topic name or filter"""


class MqttProtocolError(BasRangeError):
    """MQTT packet that violates the protocol (bad encoding, oversize payload)"""


class PlannerValidationError(BasRangeError, ValueError):
    """Inconsistent device, vulnerability or inventory records"""
