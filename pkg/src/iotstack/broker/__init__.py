from .cluster import Supervisor
from .server import BrokerInstance

__all__ = ["BrokerInstance", "Supervisor"]
