"""Desk-scale IoT messaging stack: broker, slot store, balancer, httpd, bench."""

__version__ = "0.1.0"
