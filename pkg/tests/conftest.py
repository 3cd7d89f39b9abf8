import pytest

from krflow.config import settings


@pytest.fixture(autouse=True)
def quiet_settings(monkeypatch):
    monkeypatch.setattr(settings, "quiet", True)
    monkeypatch.setattr(settings, "threads", 1)
    monkeypatch.setattr(settings, "strict", settings.strict)
    monkeypatch.setattr(settings, "seed", settings.seed)
    monkeypatch.setattr(settings, "output_dir", settings.output_dir)
