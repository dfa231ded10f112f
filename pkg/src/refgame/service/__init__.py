from .app import Engine, ServiceSettings, create_app

__all__ = ["Engine", "ServiceSettings", "create_app"]
