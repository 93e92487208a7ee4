"""The Ackley benchmark function and its task handler."""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from osprey.pool import register_handler


@dataclass
class LognormalDelay:
    """Artificial task runtime: ``exp(N(mu, sigma^2))`` seconds."""

    mu: float = math.log(0.5)
    sigma: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def sample(self, rng=random) -> float:
        return rng.lognormvariate(self.mu, self.sigma) if self.enabled else 0.0


@dataclass
class AckleyParams:
    dim: int = 4
    a: float = 20.0
    b: float = 0.2
    c: float = 2 * math.pi
    bound: float = 32.768
    delay: LognormalDelay = field(default_factory=LognormalDelay)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("a, b and c must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AckleyParams":
        d = dict(d)
        delay = LognormalDelay(**d.pop("delay", {}))
        return cls(**d, delay=delay)


def ackley(x, a: float = 20.0, b: float = 0.2, c: float = 2 * math.pi) -> float:
    x = np.asarray(x, dtype=float)
    d = x.size
    return float(
        -a * np.exp(-b * np.sqrt(np.sum(x**2) / d))
        - np.exp(np.sum(np.cos(c * x)) / d)
        + a
        + math.e
    )


def sample_points(n: int, params: AckleyParams, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-params.bound, params.bound, size=(n, params.dim))


def make_payload(x, params: AckleyParams) -> str:
    return json.dumps({
        "sample": [float(v) for v in x],
        "a": params.a, "b": params.b, "c": params.c,
        "delay": asdict(params.delay),
    })


@register_handler("ackley")
def ackley_handler(payload: str) -> str:
    """Evaluate Ackley at ``payload["sample"]`` after the payload's lognormal sleep."""
    task = json.loads(payload)
    delay = LognormalDelay(**task["delay"]) if "delay" in task else LognormalDelay(enabled=False)
    secs = delay.sample()
    if secs > 0:
        time.sleep(secs)
    value = ackley(task["sample"], task.get("a", 20.0), task.get("b", 0.2), task.get("c", 2 * math.pi))
    return json.dumps({"value": value})
