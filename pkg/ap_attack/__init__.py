from ap_attack.core.version import __version__  # noqa: F401
