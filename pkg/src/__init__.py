__all__ = ["main", "models", "services"]
