from .service import JobManager, create_app

__all__ = ["JobManager", "create_app"]
