"""Shared pytest wiring.

Exposes the capture manager so the acceptance suite can print its
per-criterion verdict lines to the real terminal; pytest redirects the
stdout file descriptor itself, so plain prints never reach the user.
"""

capture_manager = None


def pytest_configure(config):
    global capture_manager
    capture_manager = config.pluginmanager.getplugin("capturemanager")
