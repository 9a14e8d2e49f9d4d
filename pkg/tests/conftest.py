from __future__ import annotations

import threading
from pathlib import Path

import pytest

from causaltext.gateway import (
    ExchangeSource,
    Gateway,
    ProviderConfig,
    ReplayFixture,
    ReplayTransport,
)

DATA_DIR = Path(__file__).parent / "data"


class CountingTransport:
    """Wraps a transport and counts provider calls for budget assertions."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.prompts = []
        self._lock = threading.Lock()

    @property
    def source(self):
        return self.inner.source

    def send(self, prompt):
        with self._lock:
            self.calls += 1
            self.prompts.append(prompt)
        return self.inner.send(prompt)


class ScriptedTransport:
    """Plays back a list of canned replies or exceptions, in order."""

    source = ExchangeSource.LIVE

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0

    def send(self, prompt):
        self.calls += 1
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item, 0.0


@pytest.fixture
def provider_config(tmp_path) -> ProviderConfig:
    return ProviderConfig(
        cache_dir=tmp_path / "cache",
        backoff_base=0.0,
        requests_per_minute=1e9,
    )


@pytest.fixture
def gateway_factory(tmp_path):
    """Build a replay gateway with an isolated cache directory."""
    counter = 0

    def build(
        fixture: ReplayFixture,
        parallelism: int = 1,
        counting: bool = False,
    ) -> tuple[Gateway, CountingTransport | None]:
        nonlocal counter
        counter += 1
        config = ProviderConfig(
            cache_dir=tmp_path / f"cache{counter}",
            parallelism=parallelism,
            backoff_base=0.0,
            requests_per_minute=1e9,
        )
        transport = ReplayTransport(fixture)
        wrapper = CountingTransport(transport) if counting else None
        return Gateway(config, wrapper or transport), wrapper

    return build
